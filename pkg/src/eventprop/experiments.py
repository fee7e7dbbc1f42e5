"""Dataset assembly for configured runs and the two diagnostic experiments.

``pathology_run`` trains on a subset of classes with the cross-entropy loss
and tabulates, per hidden neuron, its weight onto the trained output against
its spike count. ``gradient_contrast`` compares the hidden-layer gradient
that two losses produce on the same untrained network.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .adjoint import backward_grid
from .config import train_config
from .data import digit_split, encode_digits, load_dataset, read_digits, synthetic_speech
from .errors import ConfigError
from .losses import build_loss_drive
from .network import Trial
from .training import (TrainConfig, _rng, batch_gradient, evaluate, forward_records, init_params,
                       train)


def _class_subset(trials, classes: str):
    if not str(classes).strip():
        return list(trials)
    keep = {int(c) for c in str(classes).replace(";", ",").split(",") if c.strip()}
    return [t for t in trials if t.label in keep]


def build_data(cfg: Dict[str, dict]) -> Tuple[List[Trial], List[Trial], int, Optional[int]]:
    """Return ``(train, test, n_classes, n_channels)`` for a resolved config."""
    d = cfg["data"]
    src = d["source"]
    n_channels = None
    if src == "synthetic":
        kw = dict(n_classes=int(d["n_classes"]), n_in=int(d["n_channels"]),
                  n_speakers=int(d["n_speakers"]), lead=float(d["lead"]), active=float(d["active"]),
                  trail=float(d["trail"]), blobs=int(d["blobs"]), rate=float(d["rate"]),
                  noise=float(d["noise"]), class_seed=int(d["data_seed"]))
        train_set = synthetic_speech(per_class=int(d["per_class"]), seed=int(d["data_seed"]), **kw)
        test_set = synthetic_speech(per_class=int(d["test_per_class"]), seed=int(d["data_seed"]) + 1,
                                    **kw)
        n_classes, n_channels = int(d["n_classes"]), int(d["n_channels"])
    elif src == "mnist":
        (xa, ya), (xb, yb) = digit_split(int(d["n_train"]), int(d["n_test"]), seed=int(d["split_seed"]))
        train_set = encode_digits(xa, ya, float(d["duration"]), "train-")
        test_set = encode_digits(xb, yb, float(d["duration"]), "test-")
        n_classes, n_channels = 10, xa.shape[1]
    elif src == "idx":
        xa, ya = read_digits(d["train_images"], d["train_labels"])
        xb, yb = read_digits(d["test_images"], d["test_labels"])
        train_set = encode_digits(xa.reshape(len(xa), -1), ya, float(d["duration"]), "train-")
        test_set = encode_digits(xb.reshape(len(xb), -1), yb, float(d["duration"]), "test-")
        n_classes, n_channels = 10, int(np.prod(xa.shape[1:]))
    elif src == "file":
        train_set = load_dataset(d["train_file"])
        test_set = load_dataset(d["test_file"]) if d["test_file"] else []
        n_classes = 1 + max(t.label for t in list(train_set) + list(test_set))
    else:
        raise ConfigError(f"unknown data source {src!r}")
    train_set = _class_subset(train_set, d["classes"])
    test_set = _class_subset(test_set, d["classes"])
    if not train_set:
        raise ConfigError("no training trials after class selection")
    return train_set, test_set, n_classes, n_channels


def pearson(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.std() == 0 or y.std() == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


# ----------------------------------------------------------------------------
# transported error at hidden spikes

def transport_sums(params, trials, cfg: TrainConfig, output: int):
    """Per hidden neuron: sum over its spikes of lambda_V - lambda_I of ``output``.

    Values are averaged over trials and also returned per spike as
    ``(trial, neuron, step, value)`` rows.
    """
    spec = cfg.loss_spec
    recs = forward_records(params, trials, spec, cfg.dt)
    rows = []
    for start in range(0, len(recs), cfg.batch_size):
        chunk = recs[start:start + cfg.batch_size]
        ts = trials[start:start + cfg.batch_size]
        drives = [build_loss_drive(spec, r, t.label) for r, t in zip(chunk, ts)]
        same = {(r.n_steps, r.dt) for r in chunk}
        if len(same) != 1:
            raise ConfigError("transport analysis needs trials of equal duration")
        tp = []
        backward_grid(params, chunk, drives, 1.0, transport=tp)
        rows.extend((start + b, i, k, float(d[output])) for b, i, k, d in tp)
    sums = np.zeros(params.n_hidden)
    for _, i, _, v in rows:
        sums[i] += v
    return sums / len(trials), rows


@dataclass
class PathologyResult:
    train_class: int
    weights: np.ndarray            # hidden -> trained output
    counts: np.ndarray             # mean spikes per trial of the trained class
    correlation: float
    initial_transport: np.ndarray  # per-neuron transported sums before training
    top_neurons: List[int]
    history: List[dict] = field(default_factory=list)

    def table(self) -> List[Tuple[int, float, float]]:
        order = np.argsort(self.weights, kind="stable")
        return [(int(i), float(self.weights[i]), float(self.counts[i])) for i in order]

    def to_csv(self) -> str:
        lines = ["neuron,weight_to_output,mean_spike_count"]
        lines += [f"{i},{w!r},{c!r}" for i, w, c in self.table()]
        return "\n".join(lines) + "\n"


def pathology_run(trials: Sequence[Trial], cfg: TrainConfig, train_class: int = 0,
                  top: int = 4, metrics_path=None, on_epoch=None) -> PathologyResult:
    """Train on ``train_class`` trials only and relate activity to output weights."""
    single = [t for t in trials if t.label == train_class]
    if not single:
        raise ConfigError(f"no trials of class {train_class}")
    n_in = cfg.augment.input_size(cfg.n_in) if cfg.n_in is not None else None
    p0 = init_params(cfg, _rng(cfg.seed, 0), n_in if n_in is not None else
                     max(int(t.channels.max()) + 1 for t in single if len(t)))
    sums0, _ = transport_sums(p0, single, cfg, train_class)
    counts0 = np.mean([r.spike_counts for r in forward_records(p0, single, cfg.loss_spec, cfg.dt)],
                      axis=0)
    res = train(single, cfg, metrics_path=metrics_path, params=p0, on_epoch=on_epoch)
    p = res.final_params
    recs = forward_records(p, single, cfg.loss_spec, cfg.dt)
    counts = np.mean([r.spike_counts for r in recs], axis=0)
    w = p.w_ho[train_class].copy()
    return PathologyResult(train_class, w, counts, pearson(counts, w), sums0,
                           [int(i) for i in np.argsort(-counts0, kind="stable")[:top]],
                           res.history)


# ----------------------------------------------------------------------------
# hidden-gradient contrast between losses

def hidden_gradient_norm(params, trials, cfg: TrainConfig) -> float:
    g, _, _ = batch_gradient(params, list(trials), cfg.loss_spec, cfg.dt)
    blocks = [g.dw_ih] + ([g.dw_hh] if g.dw_hh is not None else [])
    return float(np.sqrt(sum(float((b ** 2).sum()) for b in blocks)))


def gradient_contrast(trials: Sequence[Trial], cfg: TrainConfig, losses=("sum", "sum_exp")):
    """Hidden-layer gradient norm of each loss on the same initial network."""
    n_in = cfg.n_in if cfg.n_in is not None else max(int(t.channels.max()) + 1 for t in trials if len(t))
    params = init_params(cfg, _rng(cfg.seed, 0), cfg.augment.input_size(n_in))
    out = {}
    for loss in losses:
        c = TrainConfig(**{**cfg.as_dict(), "loss": loss, "augment": cfg.augment})
        out[loss] = hidden_gradient_norm(params, trials, c)
    return out


def config_for(cfg: Dict[str, dict], n_classes: int, n_channels: Optional[int]) -> TrainConfig:
    return train_config(cfg, n_classes, n_channels)


def final_accuracy(trials, cfg: TrainConfig) -> float:
    res = train(trials, cfg)
    return evaluate(res.final_params, trials, cfg.loss_spec, cfg.dt, cfg.batch_size).accuracy
