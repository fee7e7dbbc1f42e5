import configparser
import json

import numpy as np
import pytest

from eventprop import config as C
from eventprop.cli import EXIT_OK, EXIT_USAGE, main
from eventprop.data import load_dataset
from eventprop.errors import ConfigError

SMALL = """
[data]
source = synthetic
n_classes = 3
per_class = 10
test_per_class = 2
n_channels = 20
n_speakers = {speakers}
lead = 20
active = 60
trail = 20
rate = 40
blobs = 4

[network]
n_hidden = 10
mu_ih = 0.15
sigma_ih = 0.07

[loss]
kind = sum_exp

[training]
epochs = 2
batch_size = 8
eta = 0.005
"""


@pytest.fixture
def small_cfg(tmp_path):
    def make(speakers=4):
        path = tmp_path / f"small{speakers}.ini"
        path.write_text(SMALL.format(speakers=speakers))
        return str(path)
    return make


def test_every_profile_resolves_or_names_missing_keys():
    for name in C.PROFILES:
        try:
            cfg = C.resolve(name)
        except ConfigError as e:
            assert f"profile {name} is missing required keys" in str(e)
            continue
        tc = C.train_config(cfg, 10, 4)
        assert tc.n_hidden == cfg["network"]["n_hidden"]


def test_profiles_exist():
    for name in ("mnist-base", "mnist-full", "shd-final", "ssc-final", "chain-sum",
                 "shd-base-sum", "shd-base-sum_exp", "shd-base-max", "shd-base-time"):
        assert name in C.PROFILES


def test_unknown_keys_are_listed():
    with pytest.raises(ConfigError) as err:
        C.read_overrides("[training]\neta = 1\nspeed = 3\n[bogus]\nx = 1\n")
    assert "training.speed" in str(err.value) and "bogus.x" in str(err.value)


def test_missing_keys_name_the_profile():
    with pytest.raises(ConfigError, match="profile shd-base-sum is missing required keys: "
                                          "data.train_file, data.test_file"):
        C.resolve("shd-base-sum")


def test_layering_and_dump_round_trip():
    cfg = C.resolve("mnist-base", "[training]\neta = 0.5\n", {"training": {"seed": 9}})
    assert cfg["training"]["eta"] == 0.5 and cfg["training"]["seed"] == 9
    again = C.resolve("mnist-base", C.dump(cfg))
    assert again == cfg
    cp = configparser.ConfigParser()
    cp.read_string(C.dump(cfg))
    assert set(cp.sections()) == set(C.SECTIONS)


def test_gradcheck_chain_profile_passes(tmp_path, capsys):
    code = main(["gradcheck", "--profile", "chain-sum", "--out", str(tmp_path), "--threads", "1"])
    assert code == EXIT_OK
    assert "overall: PASS" in capsys.readouterr().out
    assert (tmp_path / "gradcheck_sum.csv").exists()


def test_train_is_byte_identical(tmp_path, small_cfg):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--config", small_cfg(), "--seed", "7", "--out", str(out),
                     "--threads", "1"]) == EXIT_OK
        outs.append(out)
    a, b = ((o / "metrics.csv").read_bytes() for o in outs)
    assert a == b
    stamp = json.loads((outs[0] / "run.json").read_text())
    assert stamp["seed"] == 7 and stamp["version"]
    resolved = C.read_overrides((outs[0] / "config.ini").read_text())
    assert resolved["training"]["seed"] == 7
    for name in ("best.npz", "final.npz", "walltime.txt", "config.ini"):
        assert (outs[0] / name).exists()


def test_eval_and_plot(tmp_path, small_cfg):
    out = tmp_path / "run"
    assert main(["train", "--config", small_cfg(), "--out", str(out), "--plot"]) == EXIT_OK
    assert (out / "learning_curve.svg").read_text().startswith("<svg")
    ev = tmp_path / "ev"
    assert main(["eval", "--config", small_cfg(), "--checkpoint", str(out / "final.npz"),
                 "--out", str(ev)]) == EXIT_OK
    header, row = (ev / "eval.csv").read_text().splitlines()
    assert header.startswith("n_trials,accuracy") and row.startswith("6,")


def test_xval_leave_one_speaker_out(tmp_path, small_cfg):
    out = tmp_path / "xv"
    assert main(["xval", "--config", small_cfg(10), "--folds", "loso", "--out", str(out)]) == EXIT_OK
    folds = sorted(p.name for p in out.glob("fold_*.csv"))
    assert len(folds) == 10
    summary = (out / "summary.csv").read_text().splitlines()
    assert len(summary) == 1 + 10 + 2
    assert summary[-2].startswith("mean,") and summary[-1].startswith("std,")


def test_config_errors_exit_with_usage_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[training]\nwarp = 9\n")
    assert main(["train", "--config", str(bad), "--profile", "synthetic",
                 "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "training.warp" in capsys.readouterr().err
    assert main(["train", "--profile", "shd-final", "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert main(["train", "--profile", "nope", "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_encode_mnist_csv(tmp_path):
    rows = np.zeros((3, 785), int)
    rows[:, 0] = [4, 1, 9]
    rows[1, 1:] = 255
    csv = tmp_path / "d.csv"
    csv.write_text("label," + ",".join(f"p{i}" for i in range(784)) + "\n"
                   + "\n".join(",".join(map(str, r)) for r in rows) + "\n")
    target = tmp_path / "enc" / "digits.txt"
    assert main(["encode-mnist", "--images", str(csv), "--output", str(target)]) == EXIT_OK
    trials = load_dataset(target)
    assert [t.label for t in trials] == [4, 1, 9]
    assert np.all(trials[1].times == 2.0) and np.all(trials[0].times == 18.0)


def test_pathology_command(tmp_path):
    cfg = tmp_path / "p.ini"
    cfg.write_text(SMALL.format(speakers=2).replace("kind = sum_exp", "kind = xentropy")
                   + "\n[pathology]\ntrain_class = 1\n")
    out = tmp_path / "p"
    assert main(["pathology", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    lines = (out / "pathology.csv").read_text().splitlines()
    assert lines[0] == "neuron,weight_to_output,mean_spike_count" and len(lines) == 11
