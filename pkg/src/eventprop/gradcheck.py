"""Finite-difference oracle for the adjoint gradients.

Every coordinate is perturbed by ``+eps`` and ``-eps`` and the full forward
loss is re-simulated in exact-timing mode. A coordinate is *stable* when
both perturbed runs reproduce the unperturbed spike counts of every neuron
and the unperturbed order of all events. Order matters because the loss has
kinks wherever a spike moves across a sample time or across an incoming
event (the crossing slope changes there). For the max-voltage loss each
output's maximum must also stay on the same sample.
Only stable coordinates enter the verdict; the others are listed as
skipped.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .adjoint import run_backward_trial
from .errors import ConfigError
from .losses import MAX, LossSpec, build_loss_drive, loss_value
from .network import NON_SPIKING, SPIKING, NetworkParams, Trial
from .simulate import EXACT, run_forward_batch

EPS_WEIGHT = 1e-5
EPS_TAU = 1e-3
# relative errors are taken against max(|analytic|, |numeric|, REL_FLOOR)
REL_FLOOR = 1e-4

PASS = "PASS"
FAIL = "FAIL"
INCONCLUSIVE = "INCONCLUSIVE"


def coordinates(params: NetworkParams, include_tau: bool = False, include_weights: bool = True):
    """All (block, index) pairs that are free parameters."""
    out = []
    if include_weights:
        for name, a in params.blocks().items():
            for idx in np.ndindex(a.shape):
                if name == "w_hh" and not params.autapses and idx[0] == idx[1]:
                    continue
                out.append((name, idx))
    if include_tau:
        for name in ("tau_mem", "tau_syn"):
            out.extend((name, (i,)) for i in range(params.n_neurons))
    return out


def _perturbed(params, block, idx, delta):
    q = params.copy()
    q.check_tau = False
    getattr(q, block)[idx] += delta
    return q


def _signature(spec, record):
    counts = np.bincount(record.spike_neuron, minlength=record.n_hidden + record.n_out)
    times = record.spike_times
    sig = (tuple(counts.tolist()) + tuple(record.spike_neuron.tolist())
           + tuple(record.spike_step.tolist())
           + tuple(np.searchsorted(record.input_times, times).tolist()))
    if spec.kind == MAX:
        sig = sig + tuple(record.t_max_step.tolist())
    return sig


def _forward(params, trial, specs, dt):
    (rec,) = run_forward_batch(params, [trial], specs[0], dt, mode=EXACT, keep_trace=True)
    return {s: (loss_value(s, rec, trial.label), _signature(s, rec)) for s in specs}


@dataclass
class FiniteDifference:
    value: float
    signature_plus: tuple
    signature_minus: tuple

    @property
    def stable(self) -> bool:
        return self.signature_plus == self.signature_minus


def finite_diff_grad(params: NetworkParams, trial: Trial, loss_spec, dt: float, epsilon: float,
                     target: Tuple[str, tuple]):
    """Central difference of the exact-mode loss along one coordinate.

    ``loss_spec`` may be a single spec (returns one :class:`FiniteDifference`)
    or a sequence of specs sharing an output mode (returns a dict keyed by
    spec); the perturbed runs are then shared.
    """
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    specs = [loss_spec] if isinstance(loss_spec, LossSpec) else list(loss_spec)
    block, idx = target
    plus = _forward(_perturbed(params, block, idx, epsilon), trial, specs, dt)
    minus = _forward(_perturbed(params, block, idx, -epsilon), trial, specs, dt)
    out = {s: FiniteDifference((plus[s][0] - minus[s][0]) / (2 * epsilon), plus[s][1], minus[s][1])
           for s in specs}
    return out[loss_spec] if isinstance(loss_spec, LossSpec) else out


@dataclass
class CoordinateCheck:
    block: str
    index: tuple
    analytic: float
    numeric: float
    stable: bool

    @property
    def abs_error(self) -> float:
        return abs(self.analytic - self.numeric)

    @property
    def rel_error(self) -> float:
        return self.abs_error / max(abs(self.analytic), abs(self.numeric), REL_FLOOR)


@dataclass
class GradCheckReport:
    loss: str
    tolerance: float
    rows: List[CoordinateCheck] = field(default_factory=list)

    @property
    def stable_rows(self):
        return [r for r in self.rows if r.stable]

    @property
    def n_skipped(self) -> int:
        return sum(not r.stable for r in self.rows)

    @property
    def max_rel_error(self) -> float:
        rows = self.stable_rows
        return max((r.rel_error for r in rows), default=float("nan"))

    @property
    def verdict(self) -> str:
        if not self.stable_rows:
            return INCONCLUSIVE
        return PASS if self.max_rel_error <= self.tolerance else FAIL

    def merge(self, other: "GradCheckReport") -> "GradCheckReport":
        return GradCheckReport(self.loss, self.tolerance, self.rows + other.rows)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["loss", "block", "index", "analytic", "numeric", "abs_error", "rel_error", "stable"])
        for r in self.rows:
            w.writerow([self.loss, r.block, ":".join(map(str, r.index)), repr(r.analytic),
                        repr(r.numeric), repr(r.abs_error), repr(r.rel_error), int(r.stable)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as f:
                f.write(text)
        return text

    def summary(self) -> str:
        worst = max(self.stable_rows, key=lambda r: r.rel_error, default=None)
        lines = [f"loss {self.loss}: {self.verdict}",
                 f"  coordinates checked: {len(self.rows)} (stable {len(self.stable_rows)}, "
                 f"skipped {self.n_skipped})",
                 f"  max relative error: {self.max_rel_error:.3e} (tolerance {self.tolerance:.1e})"]
        if worst is not None:
            lines.append(f"  worst: {worst.block}{list(worst.index)} analytic {worst.analytic:.9e} "
                         f"numeric {worst.numeric:.9e}")
        return "\n".join(lines)


def analytic_gradient(params, trial, spec, dt, tau_grads=True):
    (rec,) = run_forward_batch(params, [trial], spec, dt, mode=EXACT, keep_trace=True,
                               tau_grads=tau_grads)
    drive = build_loss_drive(spec, rec, trial.label)
    return run_backward_trial(params, rec, drive, tau_grads=tau_grads).blocks()


def compare_many(params: NetworkParams, trial: Trial, specs: Sequence[LossSpec], dt: float,
                 tolerances, include_tau: bool = False, include_weights: bool = True,
                 eps_weight: float = EPS_WEIGHT, eps_tau: float = EPS_TAU) -> Dict[LossSpec, GradCheckReport]:
    """Check several losses on one trial; perturbed forward runs are shared."""
    specs = list(specs)
    if not specs:
        return {}
    if len({s.output_mode for s in specs}) != 1:
        raise ConfigError("losses checked together must share an output mode")
    if isinstance(tolerances, (int, float)):
        tolerances = [float(tolerances)] * len(specs)
    coords = coordinates(params, include_tau, include_weights)
    if len(coords) > 10_000:
        raise ConfigError("network too large for a full coordinate sweep")
    base = _forward(params, trial, specs, dt)
    grads = {s: analytic_gradient(params, trial, s, dt, include_tau) for s in specs}
    reports = {s: GradCheckReport(s.kind, tol) for s, tol in zip(specs, tolerances)}
    for block, idx in coords:
        eps = eps_tau if block.startswith("tau") else eps_weight
        fds = finite_diff_grad(params, trial, specs, dt, eps, (block, idx))
        for s in specs:
            fd = fds[s]
            stable = fd.stable and fd.signature_plus == base[s][1]
            reports[s].rows.append(CoordinateCheck(block, idx, float(grads[s][block][idx]),
                                                   fd.value, stable))
    return reports


def compare(params: NetworkParams, trial: Trial, loss_spec: LossSpec, dt: float, tolerance: float,
            include_tau: bool = False, include_weights: bool = True,
            eps_weight: float = EPS_WEIGHT, eps_tau: float = EPS_TAU) -> GradCheckReport:
    return compare_many(params, trial, [loss_spec], dt, [tolerance], include_tau, include_weights,
                        eps_weight, eps_tau)[loss_spec]


def random_network(seed: int, recurrent: Optional[bool] = None, spiking_outputs: bool = False,
                   duration: float = 15.0):
    """A small seeded network and trial with some hidden activity.

    Layer sizes stay at or below 10 neurons; time constants are drawn per
    neuron so the time-constant gradients see heterogeneous values.
    """
    rng = np.random.default_rng([seed, 77])
    if recurrent is None:
        recurrent = bool(seed % 2)
    n_in = int(rng.integers(2, 7))
    nh = int(rng.integers(3, 11))
    no = int(rng.integers(2, 5))
    w_ih = rng.normal(0.8, 0.5, (nh, n_in))
    w_hh = rng.normal(0.0, 0.3, (nh, nh)) if recurrent else None
    if w_hh is not None:
        np.fill_diagonal(w_hh, 0.0)
    w_ho = rng.normal(1.5 if spiking_outputs else 0.3, 0.6, (no, nh))
    tm = rng.uniform(6.0, 20.0, nh + no)
    ts = rng.uniform(2.0, 8.0, nh + no)
    params = NetworkParams(w_ih, w_ho, tm, ts, w_hh=w_hh,
                           output_mode=SPIKING if spiking_outputs else NON_SPIKING)
    n_ev = int(rng.integers(3 * n_in, 6 * n_in + 1))
    times = rng.uniform(0.0, 0.7 * duration, n_ev)
    chans = rng.integers(0, n_in, n_ev)
    trial = Trial(times, chans, int(rng.integers(no)), duration)
    return params, trial


def chain_network():
    """One input into two hidden neurons feeding two outputs, with three input spikes."""
    params = NetworkParams(w_ih=[[4.0], [3.2]], w_ho=[[0.8, -0.3], [0.2, 0.5]],
                           tau_mem=20.0, tau_syn=5.0)
    trial = Trial([1.0, 4.5, 9.0], [0, 0, 0], 0, 20.0)
    return params, trial


def run_suite(specs: Sequence[LossSpec], tolerances, seeds=range(20), dt: float = 0.1,
              include_tau: bool = False, include_weights: bool = True,
              network: str = "random") -> Dict[LossSpec, GradCheckReport]:
    """Merge per-network reports over seeded random networks (or the fixed chain)."""
    specs = list(specs)
    if isinstance(tolerances, (int, float)):
        tolerances = [float(tolerances)] * len(specs)
    cases = [chain_network()] if network == "chain" else [random_network(s) for s in seeds]
    merged: Dict[LossSpec, GradCheckReport] = {}
    for params, trial in cases:
        reps = compare_many(params, trial, specs, dt, tolerances, include_tau, include_weights)
        for s in specs:
            merged[s] = merged[s].merge(reps[s]) if s in merged else reps[s]
    return merged


def suite_verdict(reports) -> str:
    verdicts = [r.verdict for r in reports]
    if FAIL in verdicts:
        return FAIL
    if INCONCLUSIVE in verdicts:
        return INCONCLUSIVE
    return PASS
