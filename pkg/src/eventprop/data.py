"""Datasets: text event format, splits, latency encoding and augmentations.

Dataset files are line oriented::

    # comment
    trial <id> <label> <T_ms>
    spike <channel> <time_ms>
    ...
    speaker <trial id> <speaker tag>

``spike`` lines belong to the most recent ``trial`` line. ``speaker`` lines
may appear anywhere and refer to a trial id. Times are written with full
float precision so that a write/read round trip is lossless.
"""
from __future__ import annotations

import gzip
import io
import struct
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DatasetParseError
from .network import Trial


# ----------------------------------------------------------------------------
# text format

def write_dataset(path, trials: Iterable[Trial]) -> None:
    with open(path, "w") as f:
        f.write(dump_dataset(trials))


def dump_dataset(trials: Iterable[Trial]) -> str:
    out = io.StringIO()
    trials = list(trials)
    for k, tr in enumerate(trials):
        tid = tr.trial_id if tr.trial_id is not None else str(k)
        out.write(f"trial {tid} {tr.label} {tr.duration!r}\n")
        for c, t in zip(tr.channels.tolist(), tr.times.tolist()):
            out.write(f"spike {c} {t!r}\n")
    for k, tr in enumerate(trials):
        if tr.speaker is not None:
            tid = tr.trial_id if tr.trial_id is not None else str(k)
            out.write(f"speaker {tid} {tr.speaker}\n")
    return out.getvalue()


def load_dataset(path) -> List[Trial]:
    with open(path) as f:
        return parse_dataset(f)


def parse_dataset(lines) -> List[Trial]:
    if isinstance(lines, str):
        lines = lines.splitlines()
    heads, events, speakers = [], [], []
    ids = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kind = tok[0]
        try:
            if kind == "trial":
                if len(tok) != 4:
                    raise DatasetParseError("expected 'trial <id> <label> <T_ms>'", lineno)
                tid, label, T = tok[1], int(tok[2]), float(tok[3])
                if tid in ids:
                    raise DatasetParseError(f"duplicate trial id {tid!r}", lineno)
                if label < 0:
                    raise DatasetParseError("negative label", lineno)
                if not T > 0:
                    raise DatasetParseError("trial duration must be positive", lineno)
                ids[tid] = len(heads)
                heads.append((tid, label, T))
                events.append(([], []))
            elif kind == "spike":
                if len(tok) != 3:
                    raise DatasetParseError("expected 'spike <channel> <time_ms>'", lineno)
                if not heads:
                    raise DatasetParseError("spike line before any trial line", lineno)
                c, t = int(tok[1]), float(tok[2])
                T = heads[-1][2]
                if c < 0:
                    raise DatasetParseError("negative channel index", lineno)
                if not 0.0 <= t < T:
                    raise DatasetParseError(f"spike time {t} outside [0, {T})", lineno)
                events[-1][0].append(t)
                events[-1][1].append(c)
            elif kind == "speaker":
                if len(tok) != 3:
                    raise DatasetParseError("expected 'speaker <trial id> <tag>'", lineno)
                speakers.append((tok[1], tok[2], lineno))
            else:
                raise DatasetParseError(f"unknown record type {kind!r}", lineno)
        except ValueError as e:
            if isinstance(e, DatasetParseError):
                raise
            raise DatasetParseError(str(e), lineno) from None
    spk = {}
    for tid, tag, lineno in speakers:
        if tid not in ids:
            raise DatasetParseError(f"speaker line names unknown trial {tid!r}", lineno)
        spk[tid] = tag
    return [Trial(np.array(ts, float), np.array(cs, np.int64), label, T,
                  trial_id=tid, speaker=spk.get(tid))
            for (tid, label, T), (ts, cs) in zip(heads, events)]


# ----------------------------------------------------------------------------
# splits

def speakers_of(trials: Sequence[Trial]) -> List[str]:
    tags = {t.speaker for t in trials}
    if None in tags:
        raise ConfigError("some trials carry no speaker tag")
    return sorted(tags)


def split_loso(trials: Sequence[Trial], speaker: str) -> Tuple[List[Trial], List[Trial]]:
    """Train on all other speakers, validate on ``speaker``."""
    if speaker not in speakers_of(trials):
        raise ConfigError(f"unknown speaker {speaker!r}")
    train = [t for t in trials if t.speaker != speaker]
    val = [t for t in trials if t.speaker == speaker]
    return train, val


def loso_folds(trials: Sequence[Trial]):
    return [(s,) + split_loso(trials, s) for s in speakers_of(trials)]


def kfold(trials: Sequence[Trial], k: int, rng: np.random.Generator):
    if k < 2 or k > len(trials):
        raise ConfigError("k-fold needs 2 <= k <= number of trials")
    order = rng.permutation(len(trials))
    parts = np.array_split(order, k)
    folds = []
    for i, part in enumerate(parts):
        held = set(part.tolist())
        folds.append((str(i), [trials[j] for j in order if j not in held],
                      [trials[j] for j in part]))
    return folds


def max_channel(trials: Sequence[Trial]) -> int:
    return max((int(t.channels.max()) for t in trials if len(t)), default=-1)


# ----------------------------------------------------------------------------
# latency encoding

def latency_times(image, duration: float):
    x = np.clip(np.asarray(image, float).ravel(), 0.0, 255.0)
    return (255.0 - x) / 255.0 * (duration - 4.0) + 2.0


def encode_latency(image, duration: float, label: int = 0, **kw) -> Trial:
    """One event per pixel; bright pixels fire early."""
    t = latency_times(image, duration)
    return Trial(t, np.arange(t.size), label, duration, **kw)


# ----------------------------------------------------------------------------
# augmentations

@dataclass
class AugmentConfig:
    shift: bool = False
    f_shift: float = 40.0
    blend: bool = False
    p_blend: float = 0.5
    n_blend_extra: Optional[int] = None
    jitter: bool = False
    sigma_u: float = 0.0
    dilate: bool = False
    k_scale_min: float = 1.0
    k_scale_max: float = 1.0
    delay: bool = False
    n_delay: int = 10
    t_delay: float = 30.0

    def __post_init__(self):
        if not 0.0 <= self.p_blend <= 1.0:
            raise ConfigError("p_blend must lie in [0, 1]")
        if self.k_scale_min > self.k_scale_max:
            raise ConfigError("k_scale_min must not exceed k_scale_max")
        if self.n_delay < 1:
            raise ConfigError("n_delay must be at least 1")
        if self.f_shift < 0 or self.sigma_u < 0:
            raise ConfigError("f_shift and sigma_u must be nonnegative")

    def input_size(self, n_in: int) -> int:
        return n_in * self.n_delay if self.delay else n_in


def _keep_channels(trial, times, chans, n_in):
    ok = (chans >= 0) & (chans < n_in)
    return trial.with_events(times[ok], chans[ok])


def augment_shift(trial: Trial, f_shift: float, rng: np.random.Generator, n_in: int) -> Trial:
    k = int(np.rint(rng.uniform(-f_shift, f_shift))) if f_shift > 0 else 0
    return _keep_channels(trial, trial.times, trial.channels + k, n_in)


def augment_id_jitter(trial: Trial, sigma_u: float, rng: np.random.Generator, n_in: int) -> Trial:
    if sigma_u == 0:
        return trial.with_events(trial.times, trial.channels)
    d = np.rint(rng.normal(0.0, sigma_u, len(trial))).astype(np.int64)
    return _keep_channels(trial, trial.times, trial.channels + d, n_in)


def augment_dilate(trial: Trial, k_min: float, k_max: float, rng: np.random.Generator) -> Trial:
    """Rescale all times by one factor about t = 0; events pushed past T are dropped."""
    if k_min > k_max:
        raise ConfigError("k_min must not exceed k_max")
    k = k_min if k_min == k_max else rng.uniform(k_min, k_max)
    t = trial.times * k
    ok = t < trial.duration
    return trial.with_events(t[ok], trial.channels[ok])


def centre_of_mass(trial: Trial) -> float:
    return float(trial.times.mean()) if len(trial) else 0.5 * trial.duration


def blend_alignment(a: Trial, b: Trial) -> Tuple[float, float]:
    """Time offsets moving both trials onto their common mean centre of mass."""
    ca, cb = centre_of_mass(a), centre_of_mass(b)
    c = 0.5 * (ca + cb)
    return c - ca, c - cb


def augment_blend(a: Trial, b: Trial, p1: float, p2: float, rng: np.random.Generator) -> Trial:
    """Mix spikes of two same-class trials after centre-of-mass alignment."""
    if a.label != b.label:
        raise ConfigError("blending needs two trials of the same class")
    da, db = blend_alignment(a, b)
    ka = rng.random(len(a)) < p1
    kb = rng.random(len(b)) < p2
    t = np.concatenate([a.times[ka] + da, b.times[kb] + db])
    c = np.concatenate([a.channels[ka], b.channels[kb]])
    T = a.duration
    ok = (t >= 0) & (t < T)
    return Trial(t[ok], c[ok], a.label, T, trial_id=None, speaker=None)


def build_delay_line(trial: Trial, n_delay: int, t_delay: float, n_in: int) -> Trial:
    """Copy ``n`` of channel ``c`` is channel ``c + n*n_in``, delayed by ``n*t_delay``."""
    if n_delay < 1:
        raise ConfigError("n_delay must be at least 1")
    n = np.repeat(np.arange(n_delay), len(trial))
    t = np.tile(trial.times, n_delay) + n * t_delay
    c = np.tile(trial.channels, n_delay) + n * n_in
    ok = t < trial.duration
    return trial.with_events(t[ok], c[ok])


def blend_extra(trials: Sequence[Trial], n_extra: int, p_blend: float,
                rng: np.random.Generator) -> List[Trial]:
    """Synthesise ``n_extra`` blended trials from random same-class pairs."""
    by_class = {}
    for t in trials:
        by_class.setdefault(t.label, []).append(t)
    labels = [t.label for t in trials]
    out = []
    for _ in range(n_extra):
        pool = by_class[labels[rng.integers(len(labels))]]
        i, j = rng.integers(len(pool), size=2)
        out.append(augment_blend(pool[i], pool[j], p_blend, p_blend, rng))
    return out


def augment_epoch(trials: Sequence[Trial], cfg: AugmentConfig, n_in: int,
                  rng: np.random.Generator) -> List[Trial]:
    """Per-epoch pipeline: blend extras, then per-trial transforms, delay line last."""
    trials = list(trials)
    if cfg.blend:
        n = len(trials) if cfg.n_blend_extra is None else cfg.n_blend_extra
        trials = trials + blend_extra(trials, n, cfg.p_blend, rng)
    out = []
    for t in trials:
        if cfg.shift:
            t = augment_shift(t, cfg.f_shift, rng, n_in)
        if cfg.jitter:
            t = augment_id_jitter(t, cfg.sigma_u, rng, n_in)
        if cfg.dilate:
            t = augment_dilate(t, cfg.k_scale_min, cfg.k_scale_max, rng)
        out.append(t)
    if cfg.delay:
        out = [build_delay_line(t, cfg.n_delay, cfg.t_delay, n_in) for t in out]
    return out


def prepare_eval(trials: Sequence[Trial], cfg: AugmentConfig, n_in: int) -> List[Trial]:
    if cfg.delay:
        return [build_delay_line(t, cfg.n_delay, cfg.t_delay, n_in) for t in trials]
    return list(trials)


# ----------------------------------------------------------------------------
# synthetic spoken-digit-like task

def synthetic_speech(n_classes=10, per_class=20, n_in=80, n_speakers=4, lead=300.0,
                     active=300.0, trail=300.0, blobs=3, rate=6.0, noise=0.0, seed=0,
                     class_seed=None, envelope=0.0) -> List[Trial]:
    """Random "formant sweep" patterns embedded between silent periods.

    Each class owns ``blobs`` sweeps (onset, channel, slope, widths); a trial
    draws Poisson-many events per sweep. Speakers shift channels and stretch
    time a little. ``rate`` is the mean number of events per sweep per
    10 ms of its duration. Class templates depend on ``class_seed`` only
    (default ``seed``), so train and test sets can share classes.
    A nonzero ``envelope`` thins events by ``exp(-d/|envelope|)`` where ``d``
    is the distance from the onset (positive values) or from the end of the
    active window (negative values).
    """
    crng = np.random.default_rng(seed if class_seed is None else class_seed)
    templates = []
    for _ in range(n_classes):
        tmpl = []
        for _ in range(blobs):
            tmpl.append((crng.uniform(0.1, 0.9) * active,        # centre time
                         crng.uniform(0.15, 0.85) * n_in,         # centre channel
                         crng.uniform(-0.1, 0.1) * n_in / 100.0,  # channels per ms
                         crng.uniform(20.0, 60.0),                # time width
                         crng.uniform(1.0, 3.0)))                 # channel width
        templates.append(tmpl)
    rng = np.random.default_rng([seed, 1])
    spk_shift = rng.integers(-3, 4, n_speakers)
    spk_scale = rng.uniform(0.9, 1.1, n_speakers)
    T = lead + active + trail
    trials = []
    for k in range(n_classes):
        for r in range(per_class):
            s = r % n_speakers
            onset = lead + rng.uniform(-0.05, 0.05) * active
            ts, cs = [], []
            for (tc, cc, slope, wt, wc) in templates[k]:
                n = rng.poisson(rate * wt / 10.0)
                dt_ = rng.normal(0.0, wt / 2.0, n)
                t = onset + (tc + dt_) * spk_scale[s]
                c = cc + slope * dt_ + rng.normal(0.0, wc, n) + spk_shift[s]
                ts.append(t)
                cs.append(np.rint(c))
            if noise > 0:
                n = rng.poisson(noise * active / 1000.0 * n_in)
                ts.append(lead + rng.uniform(0, active, n))
                cs.append(rng.integers(0, n_in, n).astype(float))
            t = np.concatenate(ts)
            c = np.concatenate(cs).astype(np.int64)
            ok = (t >= lead) & (t < lead + active) & (c >= 0) & (c < n_in)
            if envelope:
                d = (t - lead) if envelope > 0 else (lead + active - t)
                ok &= rng.random(t.size) < np.exp(-np.maximum(d, 0.0) / abs(envelope))
            trials.append(Trial(t[ok], c[ok], k, T, trial_id=f"{k}-{r}", speaker=f"s{s}"))
    return trials


# ----------------------------------------------------------------------------
# grey-level digits

def read_idx(path) -> np.ndarray:
    """Read an IDX array file (optionally gzipped)."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise DatasetParseError("not an IDX file", 1)
    kinds = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    if data[2] not in kinds:
        raise DatasetParseError(f"unknown IDX element type {data[2]:#x}", 1)
    ndim = data[3]
    shape = struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim])
    arr = np.frombuffer(data, dtype=kinds[data[2]], offset=4 + 4 * ndim)
    return arr.reshape(shape).astype(kinds[data[2]][1:])


def read_digit_csv(path) -> Tuple[np.ndarray, np.ndarray]:
    """CSV rows ``label, pixel0, ..., pixel783``; a non-numeric header row is skipped."""
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                if lineno == 1:
                    continue
                raise DatasetParseError("non-numeric field", lineno) from None
    if not rows:
        return np.zeros((0, 0)), np.zeros(0, np.int64)
    arr = np.array(rows)
    return arr[:, 1:], arr[:, 0].astype(np.int64)


def read_digits(images_path, labels_path=None) -> Tuple[np.ndarray, np.ndarray]:
    if labels_path is None:
        return read_digit_csv(images_path)
    X = read_idx(images_path)
    y = read_idx(labels_path).astype(np.int64)
    return X.reshape(X.shape[0], -1).astype(float), y


def encode_digits(X, y, duration: float, prefix: str = "") -> List[Trial]:
    return [encode_latency(x, duration, int(lab), trial_id=f"{prefix}{k}")
            for k, (x, lab) in enumerate(zip(X, y))]


def bundled_digits():
    """The 5000-digit MNIST subset shipped with mlxtend (500 per class)."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as e:  # pragma: no cover
        raise ConfigError("the bundled digit subset needs the optional 'mlxtend' package") from e
    X, y = mnist_data()
    return X.astype(float), y.astype(np.int64)


def digit_split(n_train: int, n_test: int, seed: int = 0, source=None):
    """Class-balanced disjoint train/test draw from a digit array pair."""
    X, y = bundled_digits() if source is None else source
    rng = np.random.default_rng(seed)
    classes = np.unique(y)
    tr_idx, te_idx = [], []
    for c in classes:
        idx = rng.permutation(np.flatnonzero(y == c))
        a = n_train // len(classes)
        b = n_test // len(classes)
        if a + b > idx.size:
            raise ConfigError("not enough digits for the requested split")
        tr_idx.append(idx[:a])
        te_idx.append(idx[a:a + b])
    tr = rng.permutation(np.concatenate(tr_idx))
    te = np.sort(np.concatenate(te_idx))
    return (X[tr], y[tr]), (X[te], y[te])
