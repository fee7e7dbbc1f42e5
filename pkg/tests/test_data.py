import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eventprop.data import (AugmentConfig, augment_blend, augment_dilate, augment_epoch,
                            augment_id_jitter, augment_shift, blend_alignment, build_delay_line,
                            centre_of_mass, dump_dataset, encode_latency, kfold, latency_times,
                            load_dataset, loso_folds, parse_dataset, read_digits, read_idx,
                            split_loso, synthetic_speech, write_dataset)
from eventprop.errors import ConfigError, DatasetParseError
from eventprop.network import Trial


def rand_trial(rng, n=40, n_in=700, T=1000.0, label=3):
    return Trial(rng.uniform(0, T, n), rng.integers(0, n_in, n), label, T)


trial_st = st.builds(
    lambda seed, n: rand_trial(np.random.default_rng(seed), n),
    st.integers(0, 2**32 - 1), st.integers(0, 60))


# -- latency encoding ---------------------------------------------------------

def test_latency_examples():
    t = latency_times([255, 0, 127.5], 20.0)
    np.testing.assert_allclose(t, [2.0, 18.0, 10.0], rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=784, max_size=784))
def test_digit_events_within_margins(pixels):
    tr = encode_latency(np.array(pixels, float), 20.0, label=7)
    assert len(tr) == 784
    assert tr.times.min() >= 2.0 and tr.times.max() <= 18.0
    assert sorted(tr.channels.tolist()) == list(range(784))


# -- augmentations -------------------------------------------------------------

@given(trial_st, st.integers(0, 1000))
def test_identities(tr, seed):
    rng = np.random.default_rng(seed)
    assert augment_shift(tr, 0.0, rng, 700) == tr
    assert augment_id_jitter(tr, 0.0, rng, 700) == tr
    assert augment_dilate(tr, 1.0, 1.0, rng) == tr
    assert build_delay_line(tr, 1, 30.0, 700) == tr


@settings(max_examples=50, deadline=None)
@given(trial_st, st.integers(0, 2**32 - 1))
def test_shift_moves_all_channels_by_one_bounded_amount(tr, seed):
    out = augment_shift(tr, 40.0, np.random.default_rng(seed), 700)
    assert out.label == tr.label
    src = dict(zip(tr.times.tolist(), tr.channels.tolist()))
    offsets = {c - src[t] for t, c in zip(out.times.tolist(), out.channels.tolist())}
    assert len(offsets) <= 1 and all(abs(k) <= 40 for k in offsets)
    assert np.all((out.channels >= 0) & (out.channels < 700))


def test_shift_bound_over_many_draws():
    tr = Trial([5.0], [350], 0, 10.0)
    ks = [int(augment_shift(tr, 40.0, np.random.default_rng(s), 700).channels[0]) - 350
          for s in range(500)]
    assert max(abs(k) for k in ks) <= 40
    assert len(set(ks)) > 40


def test_shift_drops_events_leaving_the_range():
    tr = Trial([5.0], [699], 0, 10.0)

    class Fixed:
        def uniform(self, lo, hi):
            return 1.0

    assert len(augment_shift(tr, 40.0, Fixed(), 700)) == 0


def test_dilation_drops_events_past_end():
    tr = Trial([100.0, 600.0], [1, 2], 0, 1000.0)
    out = augment_dilate(tr, 2.0, 2.0, np.random.default_rng(0))
    assert out.times.tolist() == [200.0] and out.channels.tolist() == [1]


def test_delay_line_copies():
    tr = Trial([5.0], [3], 0, 1000.0)
    out = build_delay_line(tr, 10, 30.0, 700)
    np.testing.assert_allclose(out.times, 5.0 + 30.0 * np.arange(10))
    assert out.channels.tolist() == [3 + 700 * n for n in range(10)]
    late = build_delay_line(Trial([999.0], [3], 0, 1000.0), 10, 30.0, 700)
    assert late.times.tolist() == [999.0] and late.channels.tolist() == [3]


def test_blend_degenerate_and_empty():
    rng = np.random.default_rng(0)
    tr = rand_trial(rng)
    out = augment_blend(tr, tr, 1.0, 0.0, rng)
    np.testing.assert_array_equal(out.times, tr.times)
    np.testing.assert_array_equal(out.channels, tr.channels)
    empty = Trial([], [], 3, 1000.0)
    assert len(augment_blend(empty, empty, 0.5, 0.5, rng)) == 0
    with pytest.raises(ConfigError):
        augment_blend(tr, Trial([], [], 2, 1000.0), 0.5, 0.5, rng)


def test_blend_count_within_binomial_bound():
    a = Trial(np.linspace(300, 600, 120, endpoint=False), np.arange(120), 1, 1000.0)
    b = Trial(np.linspace(350, 650, 80, endpoint=False), np.arange(80), 1, 1000.0)
    counts = [len(augment_blend(a, b, 0.5, 0.5, np.random.default_rng(s))) for s in range(100)]
    n = len(a) + len(b)
    mean = np.mean(counts)
    sigma = np.sqrt(n * 0.25 / 100)
    assert abs(mean - n / 2) <= 5 * sigma


@settings(max_examples=50, deadline=None)
@given(trial_st, trial_st)
def test_blend_alignment_matches_centres(a, b):
    da, db = blend_alignment(a, b)
    assert abs((centre_of_mass(a) + da) - (centre_of_mass(b) + db)) <= 0.5 * 1e-3


@settings(max_examples=40, deadline=None)
@given(trial_st, st.integers(0, 2**32 - 1))
def test_pipeline_preserves_labels_order_and_range(tr, seed):
    cfg = AugmentConfig(shift=True, jitter=True, sigma_u=3.0, dilate=True, k_scale_min=0.8,
                        k_scale_max=1.2, blend=True, delay=True, n_delay=3, t_delay=20.0)
    trials = [tr, rand_trial(np.random.default_rng(seed), label=tr.label)]
    out = augment_epoch(trials, cfg, 700, np.random.default_rng(seed))
    again = augment_epoch(trials, cfg, 700, np.random.default_rng(seed))
    assert out == again
    assert len(out) == 4
    for o in out:
        assert o.label == tr.label
        key = list(zip(o.times.tolist(), o.channels.tolist()))
        assert key == sorted(key)
        assert np.all((o.times >= 0) & (o.times < o.duration))
        assert np.all((o.channels >= 0) & (o.channels < 3 * 700))


def test_augment_config_validation():
    with pytest.raises(ConfigError):
        AugmentConfig(p_blend=1.5)
    with pytest.raises(ConfigError):
        AugmentConfig(k_scale_min=2.0, k_scale_max=1.0)
    with pytest.raises(ConfigError):
        AugmentConfig(n_delay=0)


# -- file format and splits ------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.lists(trial_st, max_size=5))
def test_round_trip(trials):
    trials = [Trial(t.times, t.channels, t.label, t.duration, trial_id=f"t{k}",
                    speaker=f"s{k % 2}") for k, t in enumerate(trials)]
    assert parse_dataset(dump_dataset(trials)) == trials


def test_round_trip_through_file(tmp_path):
    trials = synthetic_speech(n_classes=3, per_class=4, seed=1)
    write_dataset(tmp_path / "d.txt", trials)
    assert load_dataset(tmp_path / "d.txt") == trials


def test_empty_file_is_empty_dataset(tmp_path):
    (tmp_path / "e.txt").write_text("")
    assert load_dataset(tmp_path / "e.txt") == []


def test_malformed_line_reports_line_number():
    with pytest.raises(DatasetParseError) as err:
        parse_dataset("trial a 0 10.0\nspike 1 2.0\nspike x 3\n")
    assert err.value.lineno == 3


def test_ten_speaker_folds():
    trials = synthetic_speech(n_classes=3, per_class=20, n_speakers=10, seed=0)
    folds = loso_folds(trials)
    assert len(folds) == 10
    seen = []
    for name, tr, va in folds:
        assert {t.speaker for t in va} == {name}
        assert name not in {t.speaker for t in tr}
        assert len(tr) + len(va) == len(trials)
        seen.extend(t.trial_id for t in va)
    assert sorted(seen) == sorted(t.trial_id for t in trials)
    with pytest.raises(ConfigError):
        split_loso(trials, "nobody")


def test_kfold_partitions():
    trials = synthetic_speech(n_classes=2, per_class=7, seed=0)
    folds = kfold(trials, 4, np.random.default_rng(0))
    held = [t.trial_id for _, _, va in folds for t in va]
    assert sorted(held) == sorted(t.trial_id for t in trials)


def test_synthetic_task_has_silent_margins():
    trials = synthetic_speech(n_classes=4, per_class=3, lead=300.0, active=300.0, trail=300.0)
    for t in trials:
        assert t.times.min() >= 300.0 and t.times.max() < 600.0 and t.duration == 900.0


def test_idx_reader(tmp_path):
    imgs = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    path = tmp_path / "x.idx.gz"
    with gzip.open(path, "wb") as f:
        f.write(b"\x00\x00\x08\x03" + struct.pack(">III", 2, 3, 4) + imgs.tobytes())
    np.testing.assert_array_equal(read_idx(path), imgs)
    lab = tmp_path / "y.idx"
    lab.write_bytes(b"\x00\x00\x08\x01" + struct.pack(">I", 2) + bytes([4, 9]))
    X, y = read_digits(path, lab)
    assert X.shape == (2, 12) and y.tolist() == [4, 9]
