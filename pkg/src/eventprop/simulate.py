"""Forward simulation of LIF networks with sparse spike recording.

Two timing modes share one record format:

``grid``
    Input events act on the step boundary at or before their time, the
    threshold is tested after each step's flow and spikes are placed on the
    step boundary. This is the fixed-timestep scheme used for training and
    is vectorised over a mini-batch.

``exact``
    Input events act at their own times and a threshold crossing detected
    at the end of a step is located inside the step by root-finding on the
    closed-form membrane trajectory. The loss is then a smooth function of
    the parameters between spike-set changes, which is what the adjoint
    gradient is exact for. Used for gradient checks and small networks.

Output voltages are sampled at the start of every step (``t_n = n*dt``);
integral losses are left Riemann sums over these samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigError, SimulationError, SpikeBufferOverflow
from .network import NetworkParams, Trial, n_steps_for, propagator

GRID = "grid"
EXACT = "exact"
DEFAULT_SPIKE_CAP = 4096


@dataclass
class NeuronState:
    V: np.ndarray
    I: np.ndarray

    @classmethod
    def zeros(cls, n, batch=None):
        shape = (n,) if batch is None else (batch, n)
        return cls(np.zeros(shape), np.zeros(shape))


def _readonly(a):
    if a is not None:
        a = np.asarray(a)
        a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ForwardRecord:
    """Everything the backward pass and the losses need from a forward pass.

    Spikes of all non-input neurons are stored column-wise. Neuron indices
    run over hidden neurons first, then outputs. A spike's time is
    ``spike_step*dt + spike_offset``: in grid mode ``spike_step`` is the step
    boundary the spike sits on and the offset is zero; in exact mode it is
    the step the crossing fell in and the offset is the position inside it.
    """

    mode: str
    dt: float
    duration: float
    n_steps: int
    n_hidden: int
    n_out: int
    label: int
    spike_step: np.ndarray
    spike_offset: np.ndarray
    spike_neuron: np.ndarray
    spike_vdot: np.ndarray
    spike_transmitted: np.ndarray
    input_times: np.ndarray
    input_channels: np.ndarray
    output_integrals: np.ndarray
    weighting: str
    v_max: np.ndarray
    t_max_step: np.ndarray
    first_spike_times: np.ndarray
    spike_counts: np.ndarray
    output_final: np.ndarray
    output_trace: Optional[np.ndarray] = None
    snapshots: Optional[np.ndarray] = None
    snapshot_every: int = 0

    def __post_init__(self):
        for name, val in vars(self).items():
            if isinstance(val, np.ndarray):
                _readonly(val)

    @property
    def spike_times(self) -> np.ndarray:
        return self.spike_step * self.dt + self.spike_offset

    @property
    def hidden_spikes(self) -> list:
        """(time, neuron, vdot_minus) for every hidden spike, sorted by time then neuron."""
        sel = self.spike_neuron < self.n_hidden
        return list(zip(self.spike_times[sel].tolist(), self.spike_neuron[sel].tolist(),
                        self.spike_vdot[sel].tolist()))

    @property
    def output_spike_mask(self) -> np.ndarray:
        return self.spike_neuron >= self.n_hidden

    @property
    def t_max(self) -> np.ndarray:
        return self.t_max_step * self.dt

    @property
    def sample_times(self) -> np.ndarray:
        return np.arange(self.n_steps) * self.dt


def crossing_vdot(v_start, i_start, neuron, params, dt, iters=50):
    """Slope of V where it first reaches threshold inside a grid step.

    Starting below threshold and ending at or above it, the exact flow
    crosses exactly once (V is a sum of two exponentials), so bisection on
    the crossing time is safe. The current is decayed to that time.
    """
    tm, ts = params.tau_mem[neuron], params.tau_syn[neuron]
    lo = np.zeros(np.shape(v_start))
    hi = np.full(np.shape(v_start), float(dt))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        e_mem, _, cross = propagator(mid, tm, ts)
        above = e_mem * v_start + cross * i_start >= params.theta
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    i_cross = i_start * np.exp(-hi / ts)
    return (i_cross - params.theta) / tm


def step_forward(state: NeuronState, params: NetworkParams, dt: float,
                 input_channels=(), hidden_spikes=None, step: int = 0):
    """Advance one grid step.

    Current jumps from ``input_channels`` and from the boolean hidden-spike
    vector ``hidden_spikes`` are applied at the step start, then the exact
    flow over ``dt``, then the threshold test. Fired neurons are reset.

    Returns ``(state, fired, vdot_minus)`` where ``fired`` holds neuron
    indices and ``vdot_minus`` is the slope of V where it reached threshold
    inside the step (see :func:`crossing_vdot`).
    """
    if dt <= 0:
        raise ConfigError("dt must be positive")
    coeffs = propagator(dt, params.tau_mem, params.tau_syn)
    V, I = state.V.astype(float).copy(), state.I.astype(float).copy()
    nh = params.n_hidden
    for c in np.asarray(input_channels, dtype=np.int64).ravel():
        I[:nh] += params.w_ih[:, c]
    if hidden_spikes is not None:
        I += params.w_rec() @ np.asarray(hidden_spikes, float)
    V0, I0 = V.copy(), I.copy()
    V, I = V[None], I[None]
    fired = _flow_and_fire(V, I, coeffs, params, step)
    idx = np.flatnonzero(fired[0])
    vdot = crossing_vdot(V0[idx], I0[idx], idx, params, dt)
    return NeuronState(V[0], I[0]), idx, vdot


def _flow_and_fire(V, I, coeffs, params, step):
    e_mem, e_syn, cross = coeffs
    V *= e_mem
    V += cross * I
    I *= e_syn

    if not np.isfinite(V).all() or not np.isfinite(I).all():
        raise SimulationError("non-finite neuron state", step)
    fired = V >= params.theta
    if params.output_mode != "spiking":
        fired[:, params.n_hidden:] = False
    if fired.any():
        V[fired] = params.v_reset
    return fired


def _weights(spec, n_steps, dt, duration):
    from .losses import sample_weights
    return sample_weights(spec, np.arange(n_steps) * dt, duration)


def _prepare_inputs(trial, n_in, p_in, rng):
    times, chans = trial.times, trial.channels
    if chans.size and chans.max() >= n_in:
        raise ConfigError(f"trial uses channel {chans.max()} but the network has {n_in} inputs")
    if p_in > 0:
        if rng is None:
            raise ConfigError("input dropout needs a random generator")
        keep = rng.random(times.size) >= p_in
        times, chans = times[keep], chans[keep]
    return times, chans


def simulate_grid(params: NetworkParams, trials: Sequence[Trial], loss_spec, dt: float,
                  rngs=None, dropout=(0.0, 0.0), keep_trace: Optional[bool] = None,
                  snapshot_every: int = 0, spike_cap: int = DEFAULT_SPIKE_CAP):
    """Grid-mode forward pass of a batch of equal-duration trials."""
    B = len(trials)
    if B == 0:
        return []
    duration = trials[0].duration
    if any(t.duration != duration for t in trials):
        raise ConfigError("all trials in a grid batch must share one duration")
    _check_mode(params, loss_spec)
    p_in, p_hid = dropout
    if (p_in > 0 or p_hid > 0) and rngs is None:
        raise ConfigError("dropout needs random generators")
    rngs = list(rngs) if rngs is not None else [None] * B
    if keep_trace is None:
        keep_trace = loss_spec.needs_trace
    n_steps = n_steps_for(duration, dt)
    nh, no, N = params.n_hidden, params.n_out, params.n_neurons
    coeffs = propagator(dt, params.tau_mem, params.tau_syn)
    w_ihT = np.ascontiguousarray(params.w_ih.T)
    w_recT = np.ascontiguousarray(params.w_rec().T)
    weights = _weights(loss_spec, n_steps, dt, duration) * dt

    delivered = []
    ev_step, ev_b, ev_c = [], [], []
    for b, (trial, rng) in enumerate(zip(trials, rngs)):
        times, chans = _prepare_inputs(trial, params.n_in, p_in, rng)
        delivered.append((times, chans))
        ev_step.append(np.minimum((times / dt + 1e-9).astype(np.int64), n_steps - 1))
        ev_b.append(np.full(times.size, b))
        ev_c.append(chans)
    ev_step = np.concatenate(ev_step)
    order = np.argsort(ev_step, kind="stable")
    ev_step = ev_step[order]
    ev_b = np.concatenate(ev_b)[order]
    ev_c = np.concatenate(ev_c)[order]
    bounds = np.searchsorted(ev_step, np.arange(n_steps + 1))

    V = np.zeros((B, N))
    I = np.zeros((B, N))
    S = None
    trace = np.empty((n_steps, B, no)) if keep_trace else None
    integrals = np.zeros((B, no))
    v_max = np.full((B, no), -np.inf)
    t_max = np.zeros((B, no), dtype=np.int64)
    counts = np.zeros((B, N), dtype=np.int64)
    snaps = [] if snapshot_every else None
    sp_k, sp_b, sp_i, sp_vd, sp_tr = [], [], [], [], []

    for n in range(n_steps):
        vo = V[:, nh:]
        if keep_trace:
            trace[n] = vo
        integrals += weights[n] * vo
        better = vo > v_max
        if better.any():
            v_max = np.where(better, vo, v_max)
            t_max[better] = n
        if snapshot_every and n % snapshot_every == 0:
            snaps.append(np.stack([V, I], axis=1))
        lo, hi = bounds[n], bounds[n + 1]
        if hi > lo:
            inc = np.zeros((B, nh))
            np.add.at(inc, ev_b[lo:hi], w_ihT[ev_c[lo:hi]])
            I[:, :nh] += inc
        if S is not None:
            I += S @ w_recT
            S = None
        V0, I0 = V.copy(), I.copy()
        fired = _flow_and_fire(V, I, coeffs, params, n)
        if fired.any():
            bb, ii = np.nonzero(fired)
            vdot = crossing_vdot(V0[bb, ii], I0[bb, ii], ii, params, dt)
            tr = np.ones(bb.size, bool)
            if p_hid > 0:
                for k in range(bb.size):
                    tr[k] = rngs[bb[k]].random() >= p_hid
            counts[bb, ii] += 1
            if counts[bb, ii].max() > spike_cap:
                worst = ii[np.argmax(counts[bb, ii])]
                raise SpikeBufferOverflow(int(worst), spike_cap, n)
            sp_k.append(np.full(bb.size, n + 1))
            sp_b.append(bb)
            sp_i.append(ii)
            sp_vd.append(vdot)
            sp_tr.append(tr)
            hid = ii < nh
            if hid.any():
                S = np.zeros((B, nh))
                S[bb[hid & tr], ii[hid & tr]] = 1.0

    cat = lambda xs, dt_: np.concatenate(xs) if xs else np.zeros(0, dt_)
    sp_k, sp_b, sp_i = cat(sp_k, np.int64), cat(sp_b, np.int64), cat(sp_i, np.int64)
    sp_vd, sp_tr = cat(sp_vd, float), cat(sp_tr, bool)
    snaps = np.stack(snaps, axis=1) if snaps else None  # (B, n_snap, 2, N)

    records = []
    for b in range(B):
        sel = sp_b == b
        records.append(_make_record(
            GRID, params, trials[b], dt, n_steps, loss_spec,
            sp_k[sel], np.zeros(int(sel.sum())), sp_i[sel], sp_vd[sel], sp_tr[sel],
            delivered[b], integrals[b], v_max[b], t_max[b], V[b, nh:].copy(), I[b, nh:].copy(),
            None if trace is None else trace[:, b].copy(),
            None if snaps is None else snaps[b], snapshot_every))
    return records


def _make_record(mode, params, trial, dt, n_steps, spec, k, off, ii, vd, tr, delivered,
                 integrals, v_max, t_max, v_fin, i_fin, trace, snaps, snapshot_every):
    nh, no = params.n_hidden, params.n_out
    order = np.lexsort((ii, k * dt + off))
    k, off, ii, vd, tr = k[order], off[order], ii[order], vd[order], tr[order]
    counts = np.bincount(ii[ii < nh], minlength=nh)
    first = np.full(no, np.nan)
    out = ii >= nh
    if out.any():
        times = k[out] * dt + off[out]
        for t, j in zip(times[::-1], ii[out][::-1]):
            first[j - nh] = t
    return ForwardRecord(
        mode=mode, dt=float(dt), duration=trial.duration, n_steps=n_steps,
        n_hidden=nh, n_out=no, label=trial.label,
        spike_step=k, spike_offset=off, spike_neuron=ii, spike_vdot=vd,
        spike_transmitted=tr, input_times=delivered[0], input_channels=delivered[1],
        output_integrals=integrals, weighting=spec.weighting_name,
        v_max=v_max, t_max_step=t_max, first_spike_times=first,
        spike_counts=counts, output_final=np.stack([v_fin, i_fin]),
        output_trace=trace, snapshots=snaps, snapshot_every=snapshot_every)


def _check_mode(params, spec):
    if spec.output_mode != params.output_mode:
        raise ConfigError(
            f"loss {spec.kind!r} needs {spec.output_mode} outputs but the network "
            f"has {params.output_mode} outputs")


def _cross1(h, tm, ts):
    """Scalar forward cross coefficient."""
    x = h * (1.0 / tm - 1.0 / ts)
    p = math.expm1(x) / x if x != 0.0 else 1.0
    return (h / tm) * math.exp(-h / tm) * p


def simulate_exact(params: NetworkParams, trial: Trial, loss_spec, dt: float, rng=None,
                   dropout=(0.0, 0.0), keep_trace: bool = True, snapshots: bool = False,
                   spike_cap: int = DEFAULT_SPIKE_CAP) -> ForwardRecord:
    """Exact-timing forward pass of one trial."""
    _check_mode(params, loss_spec)
    p_in, p_hid = dropout
    if p_hid > 0 and rng is None:
        raise ConfigError("hidden dropout needs a random generator")
    duration = trial.duration
    n_steps = n_steps_for(duration, dt)
    nh, no, N = params.n_hidden, params.n_out, params.n_neurons
    theta = params.theta
    tm, ts = params.tau_mem, params.tau_syn
    tm_l, ts_l = tm.tolist(), ts.tolist()
    spiking = params.spiking_mask()
    w_in = np.vstack([params.w_ih, np.zeros((no, params.n_in))])
    w_rec = params.w_rec()
    weights = _weights(loss_spec, n_steps, dt, duration) * dt

    times, chans = _prepare_inputs(trial, params.n_in, p_in, rng)
    ev_step = np.minimum((times / dt + 1e-9).astype(np.int64), n_steps - 1)
    bounds = np.searchsorted(ev_step, np.arange(n_steps + 1))

    V = np.zeros(N)
    I = np.zeros(N)
    trace = np.empty((n_steps, no)) if keep_trace else None
    integrals = np.zeros(no)
    v_max = np.full(no, -np.inf)
    t_max = np.zeros(no, dtype=np.int64)
    counts = np.zeros(N, dtype=np.int64)
    snaps = np.empty((n_steps, 2, N)) if snapshots else None
    sp = []

    def state_at(s, s0, V0, I0, offs, cols):
        e_m, e_s, c = propagator(s - s0, tm, ts)
        Vs = e_m * V0 + c * I0
        Is = e_s * I0
        use = offs <= s
        if use.any():
            h = s - offs[use]
            e_m2, e_s2, c2 = propagator(h[None, :], tm[:, None], ts[:, None])
            Vs = Vs + (cols[:, use] * c2).sum(axis=1)
            Is = Is + (cols[:, use] * e_s2).sum(axis=1)
        return Vs, Is

    for n in range(n_steps):
        vo = V[nh:]
        if keep_trace:
            trace[n] = vo
        integrals += weights[n] * vo
        better = vo > v_max
        v_max = np.where(better, vo, v_max)
        t_max[better] = n
        if snapshots:
            snaps[n, 0], snaps[n, 1] = V, I
        a = n * dt
        lo, hi = bounds[n], bounds[n + 1]
        offs = times[lo:hi] - a
        cols = w_in[:, chans[lo:hi]]
        s0, V0, I0 = 0.0, V, I
        while True:
            Vend, Iend = state_at(dt, s0, V0, I0, offs, cols)
            if not (np.isfinite(Vend).all() and np.isfinite(Iend).all()):
                raise SimulationError("non-finite neuron state", n)
            cand = np.flatnonzero(spiking & (Vend >= theta))
            if cand.size == 0:
                break
            best_s, best_i = None, None
            for i in cand.tolist():
                if V0[i] >= theta:
                    si = s0
                else:
                    wi = cols[i]
                    mask = offs >= s0
                    o_i, w_i = offs[mask].tolist(), wi[mask].tolist()
                    v0, i0, tmi, tsi = float(V0[i]), float(I0[i]), tm_l[i], ts_l[i]

                    def f(s):
                        h = s - s0
                        v = math.exp(-h / tmi) * v0 + _cross1(h, tmi, tsi) * i0
                        for o, w in zip(o_i, w_i):
                            if o <= s:
                                v += w * _cross1(s - o, tmi, tsi)
                        return v - theta

                    si = brentq(f, s0, dt, xtol=2e-16, rtol=1e-15, maxiter=200)
                if best_s is None or si < best_s:
                    best_s, best_i = si, i
            Vs, Is = state_at(best_s, s0, V0, I0, offs, cols)
            # events at or before the crossing are now part of the base state
            keep = offs > best_s
            offs, cols = offs[keep], cols[:, keep]
            i = best_i
            vdot = (Is[i] - theta) / tm_l[i]
            transmitted = True
            if p_hid > 0:
                transmitted = rng.random() >= p_hid
            counts[i] += 1
            if counts[i] > spike_cap:
                raise SpikeBufferOverflow(i, spike_cap, n)
            sp.append((n, best_s, i, vdot, transmitted))
            Vs = Vs.copy()
            Vs[i] = params.v_reset
            if transmitted and i < nh:
                Is = Is + w_rec[:, i]
            s0, V0, I0 = best_s, Vs, Is
        V, I = Vend, Iend

    if sp:
        k, off, ii, vd, tr = (np.array(x) for x in zip(*sp))
        k, ii, tr = k.astype(np.int64), ii.astype(np.int64), tr.astype(bool)
        off, vd = off.astype(float), vd.astype(float)
    else:
        k = ii = np.zeros(0, np.int64)
        off = vd = np.zeros(0)
        tr = np.zeros(0, bool)
    return _make_record(EXACT, params, trial, dt, n_steps, loss_spec, k, off, ii, vd, tr,
                        (times, chans), integrals, v_max, t_max, V[nh:].copy(), I[nh:].copy(),
                        trace, snaps, 1 if snapshots else 0)


def run_forward_batch(params, trials, loss_spec, dt, rngs=None, dropout=(0.0, 0.0),
                      mode=GRID, keep_trace=None, tau_grads=False, snapshot_every=None,
                      spike_cap=DEFAULT_SPIKE_CAP):
    if mode == GRID:
        if tau_grads and snapshot_every is None:
            n = n_steps_for(trials[0].duration, dt) if trials else 1
            snapshot_every = max(1, int(math.sqrt(n)))
        return simulate_grid(params, trials, loss_spec, dt, rngs, dropout, keep_trace,
                             snapshot_every if tau_grads else 0, spike_cap)
    if mode == EXACT:
        rngs = list(rngs) if rngs is not None else [None] * len(trials)
        return [simulate_exact(params, t, loss_spec, dt, r, dropout,
                               True if keep_trace is None else keep_trace,
                               tau_grads, spike_cap)
                for t, r in zip(trials, rngs)]
    raise ConfigError(f"unknown timing mode {mode!r}")


def run_forward_trial(params: NetworkParams, trial: Trial, loss_spec, dt: float, rng=None,
                      dropout=(0.0, 0.0), mode: str = GRID, **kw):
    """Simulate one trial from rest and evaluate its loss.

    Returns ``(record, loss)``; the loss excludes the 1/N_batch factor.
    """
    from .losses import loss_value
    if trial.label >= params.n_out:
        raise ConfigError(f"label {trial.label} out of range for {params.n_out} outputs")
    (record,) = run_forward_batch(params, [trial], loss_spec, dt,
                                  None if rng is None else [rng], dropout, mode, **kw)
    return record, loss_value(loss_spec, record, trial.label)
