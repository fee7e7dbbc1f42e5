"""Classification losses, their adjoint drives and decision rules.

Voltage losses are functions of the sampled output voltages ``V(t_n)``.
Their backward drive is expressed as a rate per output and sample,
``drive[n, j] = -dL/dV_j(t_n) / dt``, so that for the integral losses it
reads directly as the bracket ``delta_{j,label} - softmax_j`` (times the
time weighting). The time-to-first-spike loss instead contributes
``dL/dt_k`` at output spike times.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import ConfigError
from .network import NON_SPIKING, SPIKING

logger = logging.getLogger(__name__)

XENTROPY = "xentropy"
SUM = "sum"
SUM_EXP = "sum_exp"
MAX = "max"
TIME = "time"
KINDS = (XENTROPY, SUM, SUM_EXP, MAX, TIME)

ABSTAIN = -1


def exp_weighting(t, duration):
    return np.exp(-np.asarray(t, float) / duration)


@dataclass(frozen=True)
class LossSpec:
    """Which loss to use and its parameters.

    ``weighting`` overrides the time weighting of ``sum_exp`` (default
    ``exp(-t/T)``); it receives sample times and the trial duration.
    """

    kind: str
    tau0: float = 1.0
    tau1: float = 100.0
    alpha: float = 5e-5
    phantom_spikes: bool = True
    weighting: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")

    @property
    def output_mode(self) -> str:
        return SPIKING if self.kind == TIME else NON_SPIKING

    @property
    def needs_trace(self) -> bool:
        return self.kind == XENTROPY

    @property
    def weighting_name(self) -> str:
        if self.kind != SUM_EXP:
            return "one"
        if self.weighting is None:
            return "exp"
        return "custom:" + getattr(self.weighting, "__name__", repr(self.weighting))


def sample_weights(spec: LossSpec, t, duration):
    t = np.asarray(t, float)
    if spec.kind == SUM_EXP:
        fn = spec.weighting or exp_weighting
        return np.broadcast_to(np.asarray(fn(t, duration), float), t.shape)
    return np.ones_like(t)


@dataclass(frozen=True)
class LossDrive:
    """Backward driving terms for one trial.

    ``sample_drive`` has shape ``(n_steps, n_out)`` (rate units) or is
    ``None``. ``spike_drive`` holds ``dl_p/dt_k`` per recorded spike.
    ``phantom`` is ``(neuron, dl_p/dt)`` for a silent labelled output whose
    loss term is injected as if it had fired at the trial end.
    """

    sample_drive: Optional[np.ndarray]
    spike_drive: Optional[np.ndarray] = None
    phantom: Optional[tuple] = None
    no_gradient: bool = False

    def scaled(self, factor: float) -> "LossDrive":
        return LossDrive(
            None if self.sample_drive is None else self.sample_drive * factor,
            None if self.spike_drive is None else self.spike_drive * factor,
            None if self.phantom is None else (self.phantom[0], self.phantom[1] * factor),
            self.no_gradient)


def zero_drive() -> LossDrive:
    return LossDrive(None)


def output_integrals(spec: LossSpec, record) -> np.ndarray:
    if record.weighting == spec.weighting_name:
        return np.asarray(record.output_integrals)
    if record.output_trace is None:
        raise ConfigError(
            f"record holds {record.weighting!r} integrals and no trace; "
            f"loss {spec.kind!r} needs {spec.weighting_name!r}")
    w = sample_weights(spec, record.sample_times, record.duration) * record.dt
    return w @ np.asarray(record.output_trace)


def _first_spikes(spec, record, label):
    """First spike times with the labelled output's silence resolved to T."""
    t = np.asarray(record.first_spike_times, float).copy()
    silent_label = np.isnan(t[label])
    if silent_label:
        t[label] = record.duration
    return t, silent_label


def _time_softmax(spec, t, label):
    part = ~np.isnan(t)
    z = np.full(t.shape, -np.inf)
    z[part] = -t[part] / spec.tau0
    return part, z


def loss_value(spec: LossSpec, record, label: int) -> float:
    """Per-trial loss (no 1/N_batch factor)."""
    if spec.kind == XENTROPY:
        if record.output_trace is None:
            raise ConfigError("xentropy loss needs the output trace")
        ls = log_softmax(np.asarray(record.output_trace), axis=1)
        return float(-record.dt * ls[:, label].sum())
    if spec.kind in (SUM, SUM_EXP):
        return float(-log_softmax(output_integrals(spec, record))[label])
    if spec.kind == MAX:
        return float(-log_softmax(np.asarray(record.v_max))[label])
    t, silent = _first_spikes(spec, record, label)
    if silent and not spec.phantom_spikes:
        logger.debug("labelled output %d silent: no gradient for its spike time", label)
    part, z = _time_softmax(spec, t, label)
    return float(-log_softmax(z)[label] + spec.alpha * np.expm1(t[label] / spec.tau1))


def build_loss_drive(spec: LossSpec, record, label: int) -> LossDrive:
    n_steps, n_out = record.n_steps, record.n_out
    if spec.kind == XENTROPY:
        if record.output_trace is None:
            raise ConfigError("xentropy loss needs the output trace")
        drive = -softmax(np.asarray(record.output_trace), axis=1)
        drive[:, label] += 1.0
        return LossDrive(drive)
    if spec.kind in (SUM, SUM_EXP):
        bracket = -softmax(output_integrals(spec, record))
        bracket[label] += 1.0
        w = sample_weights(spec, record.sample_times, record.duration)
        return LossDrive(w[:, None] * bracket[None, :])
    if spec.kind == MAX:
        bracket = -softmax(np.asarray(record.v_max))
        bracket[label] += 1.0
        drive = np.zeros((n_steps, n_out))
        drive[record.t_max_step, np.arange(n_out)] = bracket / record.dt
        return LossDrive(drive)

    t, silent = _first_spikes(spec, record, label)
    part, z = _time_softmax(spec, t, label)
    sm = softmax(z)
    grad_t = -sm / spec.tau0
    grad_t[label] += 1.0 / spec.tau0 + spec.alpha / spec.tau1 * np.exp(t[label] / spec.tau1)
    nh = record.n_hidden
    spike_drive = np.zeros(record.spike_neuron.size)
    seen = set()
    for k, j in enumerate(record.spike_neuron.tolist()):
        if j >= nh and j not in seen:
            seen.add(j)
            spike_drive[k] = grad_t[j - nh]
    phantom = None
    if silent and spec.phantom_spikes:
        phantom = (nh + label, float(grad_t[label]))
    return LossDrive(None, spike_drive, phantom, no_gradient=silent and not spec.phantom_spikes)


def classify(spec: LossSpec, record) -> int:
    """Predicted class; ties go to the lowest index."""
    if spec.kind == XENTROPY:
        ls = log_softmax(np.asarray(record.output_trace), axis=1).sum(axis=0)
        return int(np.argmax(ls))
    if spec.kind in (SUM, SUM_EXP):
        return int(np.argmax(output_integrals(spec, record)))
    if spec.kind == MAX:
        return int(np.argmax(record.v_max))
    t = np.asarray(record.first_spike_times, float)
    if np.all(np.isnan(t)):
        return ABSTAIN
    return int(np.argmin(np.where(np.isnan(t), np.inf, t)))
