"""Mini-batch training: initialisation, Adam, learning-rate control and the epoch loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .adjoint import GradientSet, backward_batch, regularisation_decrement
from .data import AugmentConfig, augment_epoch, prepare_eval
from .errors import ConfigError, SimulationError
from .losses import ABSTAIN, LossSpec, build_loss_drive, classify, loss_value
from .network import (NON_SPIKING, SPIKING, TAU_MEM_MIN, TAU_SYN_MIN, NetworkParams, Trial)
from .simulate import GRID, run_forward_batch

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
EASE_START = 1e-3
EASE_FACTOR = 1.05
FAST_DECAY = 0.8
SLOW_DECAY = 0.85
HALVING_PATIENCE = 50
SILENT_BOOST = 0.002

METRICS_HEADER = [
    "epoch", "train_loss", "train_acc", "val_loss", "val_acc", "hidden_rate",
    "silent_hidden", "clamped_jumps", "eta", "best_epoch",
]


# ----------------------------------------------------------------------------
# configuration

@dataclass
class TrainConfig:
    n_hidden: int = 128
    n_out: int = 10
    n_in: Optional[int] = None
    recurrent: bool = False
    autapses: bool = False
    loss: str = "sum"
    tau0: float = 1.0
    tau1: float = 100.0
    alpha: float = 5e-5
    phantom_spikes: bool = True
    tau_mem: float = 20.0
    tau_syn: float = 5.0
    tau_init: str = "homogeneous"
    learn_tau: bool = False
    mu_ih: float = 0.03
    sigma_ih: float = 0.01
    mu_hh: float = 0.0
    sigma_hh: float = 0.02
    mu_ho: float = 0.0
    sigma_ho: float = 0.03
    eta: float = 1e-3
    ease_in: bool = False
    schedule: bool = False
    k_reg: float = 0.0
    nu_hidden: float = 14.0
    p_drop_in: float = 0.0
    p_drop_hid: float = 0.0
    batch_size: int = 32
    epochs: int = 10
    dt: float = 1.0
    seed: int = 0
    silent_boost: bool = False
    early_stop: str = "train"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    spike_cap: int = 4096

    def __post_init__(self):
        if self.tau_init not in ("homogeneous", "heterogeneous"):
            raise ConfigError("tau_init must be 'homogeneous' or 'heterogeneous'")
        if self.early_stop not in ("none", "train", "validation"):
            raise ConfigError("early_stop must be 'none', 'train' or 'validation'")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.k_reg < 0:
            raise ConfigError("k_reg must be nonnegative")
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.loss_spec  # validates the loss kind

    @property
    def loss_spec(self) -> LossSpec:
        return LossSpec(self.loss, self.tau0, self.tau1, self.alpha, self.phantom_spikes)

    @property
    def output_mode(self) -> str:
        return self.loss_spec.output_mode

    def as_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# initialisation

def gamma_taus(mean: float, size: int, rng: np.random.Generator, lower: float) -> np.ndarray:
    """Third-order gamma draws with mean ``mean``, clipped to ``[lower, 3*mean]``."""
    if mean <= 0:
        raise ConfigError("mean time constant must be positive")
    return np.clip(rng.gamma(3.0, mean / 3.0, size), lower, 3.0 * mean)


def init_params(cfg: TrainConfig, rng: np.random.Generator, n_in: Optional[int] = None) -> NetworkParams:
    n_in = n_in if n_in is not None else cfg.n_in
    if n_in is None:
        raise ConfigError("number of inputs unknown")
    if cfg.tau_mem <= 0 or cfg.tau_syn <= 0:
        raise ConfigError("mean time constants must be positive")
    nh, no = cfg.n_hidden, cfg.n_out
    w_ih = rng.normal(cfg.mu_ih, cfg.sigma_ih, (nh, n_in))
    w_hh = None
    if cfg.recurrent:
        w_hh = rng.normal(cfg.mu_hh, cfg.sigma_hh, (nh, nh))
        if not cfg.autapses:
            np.fill_diagonal(w_hh, 0.0)
    w_ho = rng.normal(cfg.mu_ho, cfg.sigma_ho, (no, nh))
    n = nh + no
    if cfg.tau_init == "heterogeneous":
        tm = gamma_taus(cfg.tau_mem, n, rng, TAU_MEM_MIN)
        ts = gamma_taus(cfg.tau_syn, n, rng, TAU_SYN_MIN)
    else:
        tm, ts = np.full(n, float(cfg.tau_mem)), np.full(n, float(cfg.tau_syn))
    return NetworkParams(w_ih, w_ho, tm, ts, w_hh=w_hh, output_mode=cfg.output_mode,
                         autapses=cfg.autapses)


# ----------------------------------------------------------------------------
# optimiser

@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int
    eta: float
    eta_target: float
    easing: bool = False

    @classmethod
    def create(cls, params: NetworkParams, eta: float, ease_in: bool = False,
               learn_tau: bool = False) -> "OptimizerState":
        names = list(params.blocks()) + (["tau_mem", "tau_syn"] if learn_tau else [])
        shapes = {k: getattr(params, k).shape for k in names}
        return cls({k: np.zeros(s) for k, s in shapes.items()},
                   {k: np.zeros(s) for k, s in shapes.items()}, 0,
                   eta * EASE_START if ease_in else eta, eta, ease_in)


def adam_step(opt: OptimizerState, grads: GradientSet, params: NetworkParams) -> NetworkParams:
    """One bias-corrected Adam update of every block ``opt`` tracks; taus are clipped."""
    g_blocks = grads.blocks()
    for name in opt.m:
        g = g_blocks.get(name)
        if g is None or g.shape != opt.m[name].shape:
            raise ConfigError(f"gradient block {name} missing or misshaped")
        if not np.isfinite(g).all():
            raise SimulationError(f"non-finite gradient in block {name}")
    opt.step += 1
    t = opt.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    new = params.copy()
    for name in opt.m:
        g = g_blocks[name]
        m = opt.m[name] = ADAM_BETA1 * opt.m[name] + (1 - ADAM_BETA1) * g
        v = opt.v[name] = ADAM_BETA2 * opt.v[name] + (1 - ADAM_BETA2) * g * g
        upd = opt.eta * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        setattr(new, name, getattr(new, name) - upd)
    new.tau_mem = np.maximum(new.tau_mem, TAU_MEM_MIN)
    new.tau_syn = np.maximum(new.tau_syn, TAU_SYN_MIN)
    if new.w_hh is not None and not new.autapses:
        np.fill_diagonal(new.w_hh, 0.0)
    return new


def ease_in(opt: OptimizerState) -> OptimizerState:
    """Grow the learning rate by 5% per call until it reaches its target."""
    if opt.easing:
        opt.eta = min(opt.eta * EASE_FACTOR, opt.eta_target)
        if opt.eta >= opt.eta_target:
            opt.easing = False
    return opt


def ease_in_length() -> int:
    return math.ceil(math.log(1.0 / EASE_START) / math.log(EASE_FACTOR))


@dataclass
class ScheduleState:
    m_fast: float = 0.0
    m_slow: float = 0.0
    epochs_since_change: int = 0


def schedule_step(sched: ScheduleState, accuracy: float, opt: Optional[OptimizerState] = None):
    """Update the moving averages; halve the rate when accuracy turns down.

    Returns ``(sched, halved)``. While the rate is still easing in, the
    averages update but no halving happens.
    """
    sched.m_fast = FAST_DECAY * sched.m_fast + (1 - FAST_DECAY) * accuracy
    sched.m_slow = SLOW_DECAY * sched.m_slow + (1 - SLOW_DECAY) * accuracy
    sched.epochs_since_change += 1
    halved = False
    if opt is not None and opt.easing:
        return sched, halved
    if sched.m_fast < sched.m_slow and sched.epochs_since_change >= HALVING_PATIENCE:
        halved = True
        sched.epochs_since_change = 0
        if opt is not None:
            opt.eta *= 0.5
            opt.eta_target *= 0.5
    return sched, halved


def silent_neuron_boost(params: NetworkParams, epoch_spike_totals, boost: float = SILENT_BOOST) -> NetworkParams:
    """Raise every incoming weight of hidden neurons that stayed silent all epoch."""
    silent = np.asarray(epoch_spike_totals) == 0
    if not silent.any():
        return params
    new = params.copy()
    new.w_ih[silent] += boost
    if new.w_hh is not None:
        inc = np.zeros_like(new.w_hh)
        inc[silent] = boost
        if not new.autapses:
            np.fill_diagonal(inc, 0.0)
        new.w_hh += inc
    return new


# ----------------------------------------------------------------------------
# batched forward/backward helpers

def _groups_by_duration(trials):
    groups = {}
    for k, t in enumerate(trials):
        groups.setdefault(t.duration, []).append(k)
    return list(groups.values())


def forward_records(params, trials, spec, dt, rngs=None, dropout=(0.0, 0.0), tau_grads=False,
                    spike_cap=4096, mode=GRID):
    """Records of ``trials`` in input order; trials of differing length run in separate batches."""
    out = [None] * len(trials)
    for idx in _groups_by_duration(trials):
        sub = [trials[k] for k in idx]
        r = None if rngs is None else [rngs[k] for k in idx]
        recs = run_forward_batch(params, sub, spec, dt, r, dropout, mode, tau_grads=tau_grads,
                                 spike_cap=spike_cap)
        for k, rec in zip(idx, recs):
            out[k] = rec
    return out


def batch_gradient(params, trials, spec, dt, k_reg=0.0, nu_hidden=0.0, rngs=None,
                   dropout=(0.0, 0.0), tau_grads=False, spike_cap=4096, mode=GRID):
    """Mean gradient of a mini-batch with its records, losses and predictions."""
    for t in trials:
        if not 0 <= t.label < params.n_out:
            raise ConfigError(f"class index {t.label} out of range for {params.n_out} outputs")
    recs = forward_records(params, trials, spec, dt, rngs, dropout, tau_grads, spike_cap, mode)
    B = len(trials)
    drives = [build_loss_drive(spec, r, t.label) for r, t in zip(recs, trials)]
    losses = [loss_value(spec, r, t.label) for r, t in zip(recs, trials)]
    reg = None
    if k_reg > 0:
        mean = np.mean([r.spike_counts for r in recs], axis=0)
        reg = regularisation_decrement(mean, nu_hidden, k_reg, B)
    grads = GradientSet.zeros_like(params)
    for idx in _groups_by_duration(trials):
        grads = grads + backward_batch(params, [recs[k] for k in idx], [drives[k] for k in idx],
                                       1.0 / B, reg, tau_grads)
    return grads, recs, losses


# ----------------------------------------------------------------------------
# evaluation and training

@dataclass
class EvalResult:
    accuracy: float
    loss: float
    predictions: np.ndarray
    hidden_rate: float


def evaluate(params: NetworkParams, trials: Sequence[Trial], spec: LossSpec, dt: float,
             batch_size: int = 32, augment: Optional[AugmentConfig] = None,
             n_in_raw: Optional[int] = None) -> EvalResult:
    """Accuracy and mean loss without dropout; abstentions count as errors."""
    if not trials:
        raise ConfigError("empty dataset")
    if augment is not None:
        trials = prepare_eval(trials, augment, n_in_raw)
    preds, losses, counts = [], [], []
    for s in range(0, len(trials), batch_size):
        batch = trials[s:s + batch_size]
        recs = forward_records(params, batch, spec, dt)
        for r, t in zip(recs, batch):
            preds.append(classify(spec, r))
            losses.append(loss_value(spec, r, t.label))
            counts.append(r.spike_counts.sum())
    preds = np.array(preds)
    labels = np.array([t.label for t in trials])
    acc = float(np.mean((preds == labels) & (preds != ABSTAIN)))
    return EvalResult(acc, float(np.mean(losses)), preds,
                      float(np.mean(counts)) / max(params.n_hidden, 1))


@dataclass
class TrainResult:
    params: NetworkParams
    final_params: NetworkParams
    best_epoch: int
    history: List[dict]
    optimizer: OptimizerState


def _rng(seed, *path):
    return np.random.default_rng([int(seed)] + [int(p) for p in path])


def train(trials: Sequence[Trial], cfg: TrainConfig, val_trials: Optional[Sequence[Trial]] = None,
          metrics_path=None, params: Optional[NetworkParams] = None,
          on_epoch: Optional[Callable] = None) -> TrainResult:
    """Train from a seeded initialisation; returns the early-stopping selection.

    Every random draw comes from a generator keyed by (seed, epoch, batch,
    trial), so runs with equal config and seed are bit-identical.
    """
    trials = list(trials)
    if not trials:
        raise ConfigError("empty dataset")
    spec = cfg.loss_spec
    n_in_raw = cfg.n_in if cfg.n_in is not None else max(int(t.channels.max()) + 1 if len(t) else 0
                                                         for t in trials)
    n_in = cfg.augment.input_size(n_in_raw)
    for t in trials:
        if not 0 <= t.label < cfg.n_out:
            raise ConfigError(f"class index {t.label} out of range for {cfg.n_out} outputs")
    if params is None:
        params = init_params(cfg, _rng(cfg.seed, 0), n_in)
    opt = OptimizerState.create(params, cfg.eta, cfg.ease_in, cfg.learn_tau)
    sched = ScheduleState()
    history = []
    best = (None, -1)
    best_params = params.copy()
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
    dropout = (cfg.p_drop_in, cfg.p_drop_hid)
    try:
        for epoch in range(cfg.epochs):
            ep_trials = augment_epoch(trials, cfg.augment, n_in_raw, _rng(cfg.seed, 1, epoch))
            order = _rng(cfg.seed, 2, epoch).permutation(len(ep_trials))
            totals = np.zeros(params.n_hidden, np.int64)
            correct, loss_sum, clamped = 0, 0.0, 0
            for b, s in enumerate(range(0, len(order), cfg.batch_size)):
                batch = [ep_trials[k] for k in order[s:s + cfg.batch_size]]
                rngs = [_rng(cfg.seed, 3, epoch, b, k) for k in range(len(batch))]
                grads, recs, losses = batch_gradient(
                    params, batch, spec, cfg.dt, cfg.k_reg, cfg.nu_hidden, rngs, dropout,
                    cfg.learn_tau, cfg.spike_cap)
                params = adam_step(opt, grads, params)
                ease_in(opt)
                for r, t in zip(recs, batch):
                    correct += int(classify(spec, r) == t.label)
                    totals += r.spike_counts
                loss_sum += float(np.sum(losses))
                clamped += grads.clamped
            n = len(ep_trials)
            silent = int(np.sum(totals == 0))
            if cfg.silent_boost:
                params = silent_neuron_boost(params, totals)
            row = {"epoch": epoch, "train_loss": loss_sum / n, "train_acc": correct / n,
                   "val_loss": float("nan"), "val_acc": float("nan"),
                   "hidden_rate": float(totals.sum()) / (n * params.n_hidden),
                   "silent_hidden": silent, "clamped_jumps": clamped, "eta": opt.eta}
            if val_trials:
                ev = evaluate(params, val_trials, spec, cfg.dt, cfg.batch_size, cfg.augment, n_in_raw)
                row["val_loss"], row["val_acc"] = ev.loss, ev.accuracy
            monitored = row["val_acc"] if (cfg.early_stop == "validation" and val_trials) else row["train_acc"]
            if cfg.schedule:
                schedule_step(sched, monitored, opt)
            if cfg.early_stop == "none" or best[0] is None or monitored > best[0]:
                best = (monitored, epoch)
                best_params = params.copy()
            row["best_epoch"] = best[1]
            history.append(row)
            logger.info("epoch %d: %s", epoch, row)
            if writer is not None:
                writer.writerow([_fmt(row[k]) for k in METRICS_HEADER])
                fh.flush()
            if on_epoch is not None:
                on_epoch(epoch, params, row)
    finally:
        if fh is not None:
            fh.close()
    if cfg.epochs == 0:
        best = (None, -1)
    return TrainResult(best_params, params, best[1], history, opt)


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def cross_validate(trials: Sequence[Trial], cfg: TrainConfig, folds, metrics_dir=None) -> List[dict]:
    """Train one model per ``(name, train, validate)`` fold; returns per-fold summaries."""
    import os
    out = []
    for name, tr, va in folds:
        path = None if metrics_dir is None else os.path.join(metrics_dir, f"fold_{name}.csv")
        res = train(tr, cfg, va, metrics_path=path)
        row = res.history[res.best_epoch] if res.history else {}
        out.append({"fold": name, "n_train": len(tr), "n_val": len(va),
                    "best_epoch": res.best_epoch,
                    "train_acc": row.get("train_acc", float("nan")),
                    "val_acc": row.get("val_acc", float("nan"))})
    return out


# ----------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: NetworkParams, opt: Optional[OptimizerState] = None, epoch: int = -1):
    arrays = {"version": np.array(CHECKPOINT_VERSION), "epoch": np.array(epoch),
              "w_ih": params.w_ih, "w_ho": params.w_ho,
              "tau_mem": params.tau_mem, "tau_syn": params.tau_syn,
              "theta": np.array(params.theta), "v_reset": np.array(params.v_reset),
              "output_mode": np.array(params.output_mode), "autapses": np.array(params.autapses)}
    if params.w_hh is not None:
        arrays["w_hh"] = params.w_hh
    if opt is not None:
        arrays["opt_step"] = np.array(opt.step)
        arrays["opt_eta"] = np.array(opt.eta)
        arrays["opt_eta_target"] = np.array(opt.eta_target)
        arrays["opt_easing"] = np.array(opt.easing)
        for k in opt.m:
            arrays["opt_m_" + k] = opt.m[k]
            arrays["opt_v_" + k] = opt.v[k]
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path):
    """Returns ``(params, optimizer or None, epoch)``."""
    with np.load(path, allow_pickle=False) as z:
        if "version" not in z or int(z["version"]) != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version")
        params = NetworkParams(z["w_ih"], z["w_ho"], z["tau_mem"], z["tau_syn"],
                               w_hh=z["w_hh"] if "w_hh" in z else None,
                               theta=float(z["theta"]), v_reset=float(z["v_reset"]),
                               output_mode=str(z["output_mode"]), autapses=bool(z["autapses"]))
        opt = None
        if "opt_step" in z:
            names = [k[6:] for k in z.files if k.startswith("opt_m_")]
            opt = OptimizerState({k: z["opt_m_" + k] for k in names},
                                 {k: z["opt_v_" + k] for k in names},
                                 int(z["opt_step"]), float(z["opt_eta"]),
                                 float(z["opt_eta_target"]), bool(z["opt_easing"]))
        return params, opt, int(z["epoch"])
