"""Backward pass: adjoint integration with jumps at recorded spikes.

The adjoint variables follow

    tau_mem * lambda_V' = -lambda_V - (loss drive)
    tau_syn * lambda_I' = -lambda_I + lambda_V

in backward time, with ``lambda_V`` of a neuron jumping at each of its
recorded spikes. Weight gradients are ``-tau_syn * sum lambda_I`` of the
postsynaptic neuron over the presynaptic spike times.

Loss drives are sample impulses at ``t_n``: ``lambda_V += drive*dt/tau_mem``.
The time-constant gradients use the exact propagator derivatives of every
integration segment,

    dL/dtau = sum_segments p(end) . dPhi/dtau . x(start),

where ``p = (-tau_mem*lambda_V, -tau_syn*lambda_I)``. This equals the
integrals of ``lambda_V * dV/dt`` and ``lambda_I * dI/dt`` over the trial.
The forward states ``x(start)`` are regenerated by replaying the recorded
events from periodic state snapshots.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, SimulationError
from .losses import LossDrive
from .network import (NetworkParams, adjoint_propagator, propagator,
                      propagator_tau_derivatives)

CROSSING_FLOOR = 1e-3


@dataclass
class AdjointState:
    lambda_V: np.ndarray
    lambda_I: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


@dataclass
class GradientSet:
    dw_ih: np.ndarray
    dw_ho: np.ndarray
    dtau_mem: np.ndarray
    dtau_syn: np.ndarray
    dw_hh: Optional[np.ndarray] = None
    clamped: int = field(default=0, compare=False)

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "GradientSet":
        return cls(np.zeros_like(params.w_ih), np.zeros_like(params.w_ho),
                   np.zeros(params.n_neurons), np.zeros(params.n_neurons),
                   None if params.w_hh is None else np.zeros_like(params.w_hh))

    def blocks(self) -> dict:
        out = {"w_ih": self.dw_ih, "w_ho": self.dw_ho}
        if self.dw_hh is not None:
            out["w_hh"] = self.dw_hh
        out["tau_mem"] = self.dtau_mem
        out["tau_syn"] = self.dtau_syn
        return out

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(
            self.dw_ih + other.dw_ih, self.dw_ho + other.dw_ho,
            self.dtau_mem + other.dtau_mem, self.dtau_syn + other.dtau_syn,
            None if self.dw_hh is None else self.dw_hh + other.dw_hh,
            self.clamped + other.clamped)

    def __mul__(self, s: float) -> "GradientSet":
        return GradientSet(
            self.dw_ih * s, self.dw_ho * s, self.dtau_mem * s, self.dtau_syn * s,
            None if self.dw_hh is None else self.dw_hh * s, self.clamped)

    __rmul__ = __mul__


def spike_jump(lam_v_n, transported, vdot_minus, tau_mem_n, theta=1.0, v_reset=0.0,
               dlp_dt=0.0, lv_jump=0.0, floor=CROSSING_FLOOR):
    """Jump of ``lambda_V`` of a spiking neuron; returns ``(lambda_V_minus, clamped)``.

    ``transported`` is ``(W^T (lambda_V+ - lambda_I))_n``. The crossing
    slope ``tau_mem*vdot_minus`` is floored at ``floor``: crossings are
    upward by construction, so a smaller or negative value only arises at
    grazing or discretisation-distorted crossings.
    """
    denom = np.asarray(tau_mem_n * vdot_minus, float)
    clamped = denom < floor
    denom = np.maximum(denom, floor)
    bracket = (theta - v_reset) * lam_v_n + transported + dlp_dt + lv_jump
    return lam_v_n + bracket / denom, clamped


def apply_spike_jump(adjoint: AdjointState, neuron: int, vdot_minus: float,
                     params: NetworkParams, transported=None, dlp_dt: float = 0.0,
                     transmitted: bool = True, floor: float = CROSSING_FLOOR) -> AdjointState:
    """Return the adjoint state just before a recorded spike of ``neuron``.

    Only ``lambda_V[neuron]`` changes. When ``transported`` is omitted it is
    computed from the weights leaving ``neuron``.
    """
    lv, li = adjoint.lambda_V, adjoint.lambda_I
    if transported is None:
        transported = 0.0
        if transmitted and neuron < params.n_hidden:
            transported = float((lv - li) @ params.w_rec()[:, neuron])
    new, _ = spike_jump(lv[neuron], transported if transmitted else 0.0, vdot_minus,
                        params.tau_mem[neuron], params.theta, params.v_reset, dlp_dt,
                        floor=floor)
    lv = lv.copy()
    lv[neuron] = new
    return AdjointState(lv, li.copy())


def regularisation_decrement(mean_counts, nu_hidden: float, k_reg: float, n_batch: int):
    """Per hidden neuron amount subtracted from lambda_V at each of its spikes."""
    return (k_reg / n_batch) * (np.asarray(mean_counts, float) - nu_hidden)


def regularisation_jump(adjoint: AdjointState, neuron: int, mean_count: float,
                        nu_hidden: float, k_reg: float, n_batch: int) -> AdjointState:
    lv = adjoint.lambda_V.copy()
    lv[neuron] -= regularisation_decrement(mean_count, nu_hidden, k_reg, n_batch)
    return AdjointState(lv, adjoint.lambda_I.copy())


class _Accumulator:
    """Gradient sums in the layout used during the backward sweep."""

    def __init__(self, params, tau_grads, record_transport=False):
        self.transport = [] if record_transport else None
        self.step = -1
        self.dw_inT = np.zeros((params.n_in, params.n_hidden))
        self.dw_recT = np.zeros((params.n_hidden, params.n_neurons))
        self.tau_grads = tau_grads
        self.dtm = np.zeros(params.n_neurons)
        self.dts = np.zeros(params.n_neurons)
        self.clamped = 0

    def result(self, params) -> GradientSet:
        nh = params.n_hidden
        ts = params.tau_syn
        dw_ih = -ts[:nh, None] * self.dw_inT.T
        dw_rec = -ts[:, None] * self.dw_recT.T
        dw_hh = None
        if params.w_hh is not None:
            dw_hh = dw_rec[:nh].copy()
            if not params.autapses:
                np.fill_diagonal(dw_hh, 0.0)
        g = GradientSet(dw_ih, dw_rec[nh:].copy(), self.dtm.copy(), self.dts.copy(), dw_hh,
                        self.clamped)
        for name, a in g.blocks().items():
            if not np.isfinite(a).all():
                raise SimulationError(f"non-finite gradient in block {name}")
        return g


def _jumps(lamV, lamI, b, i, vdot, tr, lp, params, w_rec, reg_dec, acc, floor):
    """Apply simultaneous spike jumps in place; all use the post-spike adjoint."""
    nh = params.n_hidden
    hid = i < nh
    send = hid & tr
    transported = np.zeros(b.size)
    if acc.transport is not None and hid.any():
        d = lamV[b[hid], nh:] - lamI[b[hid], nh:]
        acc.transport.append((b[hid], i[hid], np.full(d.shape[0], acc.step), d))
    if send.any():
        diff = lamV[b[send]] - lamI[b[send]]
        transported[send] = np.einsum("kn,nk->k", diff, w_rec[:, i[send]])
        np.add.at(acc.dw_recT, i[send], lamI[b[send]])
    new, clamped = spike_jump(lamV[b, i], transported, vdot, params.tau_mem[i],
                              params.theta, params.v_reset, lp, floor=floor)
    if reg_dec is not None and hid.any():
        new[hid] -= reg_dec[i[hid]]
    acc.clamped += int(clamped.sum())
    lamV[b, i] = new


def _tau_accumulate(acc, lamV, lamI, V, I, h, params):
    de_m, de_s, dc_m, dc_s = propagator_tau_derivatives(h, params.tau_mem, params.tau_syn)
    pV = -params.tau_mem * lamV
    pI = -params.tau_syn * lamI
    acc.dtm += (pV * (de_m * V + dc_m * I)).sum(axis=0)
    acc.dts += (pV * dc_s * I + pI * de_s * I).sum(axis=0)


def _check_records(params, records):
    for r in records:
        if r.n_hidden != params.n_hidden or r.n_out != params.n_out:
            raise ConfigError("forward record does not match the network shape")


def backward_grid(params: NetworkParams, records: Sequence, drives: Sequence[LossDrive],
                  scale: float = 1.0, reg_decrement=None, tau_grads: bool = False,
                  floor: float = CROSSING_FLOOR, transport: Optional[list] = None) -> GradientSet:
    """Batched backward pass over grid-mode records; returns the summed gradient.

    Each trial's loss drive is multiplied by ``scale`` (``1/N_batch`` for a
    batch mean); regulariser decrements are applied as given. When
    ``transport`` is a list, one ``(trial, hidden neuron, step, lambda_V -
    lambda_I of every output)`` tuple per hidden spike is appended to it, in
    backward order.
    """
    _check_records(params, records)
    B = len(records)
    r0 = records[0]
    dt, n_steps = r0.dt, r0.n_steps
    if any(r.mode != "grid" or r.dt != dt or r.n_steps != n_steps for r in records):
        raise ConfigError("grid backward needs grid records of equal dt and length")
    nh, N = params.n_hidden, params.n_neurons
    tm = params.tau_mem
    w_rec = params.w_rec()
    acc = _Accumulator(params, tau_grads, transport is not None)

    sp_b = np.concatenate([np.full(r.spike_step.size, b) for b, r in enumerate(records)])
    sp_k = np.concatenate([r.spike_step for r in records])
    sp_i = np.concatenate([r.spike_neuron for r in records])
    sp_vd = np.concatenate([r.spike_vdot for r in records])
    sp_tr = np.concatenate([r.spike_transmitted for r in records])
    sp_lp = np.concatenate([
        d.spike_drive * scale if d.spike_drive is not None else np.zeros(r.spike_step.size)
        for r, d in zip(records, drives)])
    o = np.argsort(sp_k, kind="stable")
    sp_b, sp_k, sp_i, sp_vd, sp_tr, sp_lp = (x[o] for x in (sp_b, sp_k, sp_i, sp_vd, sp_tr, sp_lp))
    sp_bounds = np.searchsorted(sp_k, np.arange(n_steps + 2))

    ev_step = np.concatenate([np.minimum((r.input_times / dt + 1e-9).astype(np.int64), n_steps - 1)
                              for r in records])
    ev_b = np.concatenate([np.full(r.input_times.size, b) for b, r in enumerate(records)])
    ev_c = np.concatenate([r.input_channels for r in records])
    o = np.argsort(ev_step, kind="stable")
    ev_step, ev_b, ev_c = ev_step[o], ev_b[o], ev_c[o]
    ev_bounds = np.searchsorted(ev_step, np.arange(n_steps + 1))

    has_samples = any(d.sample_drive is not None for d in drives)
    if has_samples:
        drive = np.zeros((n_steps, B, params.n_out))
        for b, d in enumerate(drives):
            if d.sample_drive is not None:
                drive[:, b] = d.sample_drive
        drive *= scale * dt / tm[nh:]

    em, es, c2 = adjoint_propagator(dt, tm, params.tau_syn)
    lamV = np.zeros((B, N))
    lamI = np.zeros((B, N))

    replay = None
    if tau_grads:
        if r0.snapshots is None:
            raise ConfigError("tau gradients need forward snapshots (tau_grads=True in forward)")
        replay = _GridReplay(params, records, dt, n_steps, ev_b, ev_c, ev_bounds,
                             sp_b, sp_i, sp_tr, sp_bounds)

    for b, d in enumerate(drives):
        if d.phantom is not None:
            j, val = d.phantom
            lamV[b, j] += val * scale / params.theta

    for n in range(n_steps - 1, -1, -1):
        lo, hi = sp_bounds[n + 1], sp_bounds[n + 2]
        # a spike on boundary n+1 first reaches the outputs after the sample
        # taken there; transporting half of that sample is the continuous
        # limit of the two one-sided derivatives
        half = has_samples and n + 1 < n_steps
        if half:
            lamV[:, nh:] -= 0.5 * drive[n + 1]
        if hi > lo:
            acc.step = n
            _jumps(lamV, lamI, sp_b[lo:hi], sp_i[lo:hi], sp_vd[lo:hi], sp_tr[lo:hi],
                   sp_lp[lo:hi], params, w_rec, reg_decrement, acc, floor)
        if half:
            lamV[:, nh:] += 0.5 * drive[n + 1]
        if replay is not None:
            V, I = replay.state_after_events(n)
            _tau_accumulate(acc, lamV, lamI, V, I, dt, params)
        lamI = es * lamI + c2 * lamV
        lamV = em * lamV
        lo, hi = ev_bounds[n], ev_bounds[n + 1]
        if hi > lo:
            np.add.at(acc.dw_inT, ev_c[lo:hi], lamI[ev_b[lo:hi], :nh])
        if has_samples:
            lamV[:, nh:] += drive[n]
        if not np.isfinite(lamV).all():
            raise SimulationError("non-finite adjoint state", n)
    if transport is not None:
        for bb, ii, kk, d in acc.transport:
            transport.extend(zip(bb.tolist(), ii.tolist(), kk.tolist(), d))
    return acc.result(params)


class _GridReplay:
    """Regenerates forward states at step starts, one snapshot interval at a time."""

    def __init__(self, params, records, dt, n_steps, ev_b, ev_c, ev_bounds,
                 sp_b, sp_i, sp_tr, sp_bounds):
        self.p = params
        self.snaps = np.stack([r.snapshots for r in records])  # (B, n_snap, 2, N)
        self.K = records[0].snapshot_every
        self.n_steps = n_steps
        self.coeffs = propagator(dt, params.tau_mem, params.tau_syn)
        self.w_ihT = params.w_ih.T
        self.w_recT = params.w_rec().T
        self.ev = (ev_b, ev_c, ev_bounds)
        self.sp = (sp_b, sp_i, sp_tr, sp_bounds)
        self.chunk = None
        self.cache = None

    def state_after_events(self, n):
        c = n // self.K
        if self.chunk != c:
            self._replay(c)
        return self.cache[n - c * self.K]

    def _replay(self, c):
        p, nh = self.p, self.p.n_hidden
        V = self.snaps[:, c, 0].copy()
        I = self.snaps[:, c, 1].copy()
        ev_b, ev_c, ev_bounds = self.ev
        sp_b, sp_i, sp_tr, sp_bounds = self.sp
        e_m, e_s, cr = self.coeffs
        out = []
        for n in range(c * self.K, min((c + 1) * self.K, self.n_steps)):
            lo, hi = ev_bounds[n], ev_bounds[n + 1]
            if hi > lo:
                inc = np.zeros((V.shape[0], nh))
                np.add.at(inc, ev_b[lo:hi], self.w_ihT[ev_c[lo:hi]])
                I[:, :nh] += inc
            lo, hi = sp_bounds[n], sp_bounds[n + 1]
            sel = (sp_i[lo:hi] < nh) & sp_tr[lo:hi]
            if sel.any():
                S = np.zeros((V.shape[0], nh))
                S[sp_b[lo:hi][sel], sp_i[lo:hi][sel]] = 1.0
                I += S @ self.w_recT
            out.append((V.copy(), I.copy()))
            V = e_m * V + cr * I
            I = e_s * I
            lo, hi = sp_bounds[n + 1], sp_bounds[n + 2]
            if hi > lo:
                V[sp_b[lo:hi], sp_i[lo:hi]] = p.v_reset
        self.chunk, self.cache = c, out


def backward_exact(params: NetworkParams, record, drive: LossDrive, scale: float = 1.0,
                   reg_decrement=None, tau_grads: bool = False,
                   floor: float = CROSSING_FLOOR) -> GradientSet:
    """Backward pass of one exact-timing record, segment by segment."""
    _check_records(params, [record])
    if record.mode != "exact":
        raise ConfigError("backward_exact needs an exact-mode record")
    if tau_grads and record.snapshots is None:
        raise ConfigError("tau gradients need forward snapshots")
    dt, n_steps = record.dt, record.n_steps
    nh, N = params.n_hidden, params.n_neurons
    tm, ts = params.tau_mem, params.tau_syn
    w_in = np.vstack([params.w_ih, np.zeros((params.n_out, params.n_in))])
    w_rec = params.w_rec()
    acc = _Accumulator(params, tau_grads)

    lp_all = (drive.spike_drive * scale if drive.spike_drive is not None
              else np.zeros(record.spike_step.size))
    ev_step = np.minimum((record.input_times / dt + 1e-9).astype(np.int64), n_steps - 1)
    ev_bounds = np.searchsorted(ev_step, np.arange(n_steps + 1))
    sp_bounds = np.searchsorted(record.spike_step, np.arange(n_steps + 1))
    sdrive = None
    if drive.sample_drive is not None:
        sdrive = drive.sample_drive * (scale * dt) / tm[nh:]

    lamV = np.zeros((1, N))
    lamI = np.zeros((1, N))
    if drive.phantom is not None:
        j, val = drive.phantom
        lamV[0, j] += val * scale / params.theta

    def flow(h):
        nonlocal lamV, lamI
        if h <= 0:
            return
        em, es, c2 = adjoint_propagator(h, tm, ts)
        lamI = es * lamI + c2 * lamV
        lamV = em * lamV

    for n in range(n_steps - 1, -1, -1):
        a = n * dt
        e_lo, e_hi = ev_bounds[n], ev_bounds[n + 1]
        s_lo, s_hi = sp_bounds[n], sp_bounds[n + 1]
        in_off = record.input_times[e_lo:e_hi] - a
        in_ch = record.input_channels[e_lo:e_hi]
        sp_off = record.spike_offset[s_lo:s_hi]
        # (offset, kind, index): kind 0 = spike, 1 = input
        events = sorted([(o, 1, k) for k, o in enumerate(in_off.tolist())]
                        + [(o, 0, k) for k, o in enumerate(sp_off.tolist())])
        groups = []
        for o, kind, k in events:
            if groups and groups[-1][0] == o:
                groups[-1][1].append((kind, k))
            else:
                groups.append((o, [(kind, k)]))

        states = None
        if tau_grads:
            states = _exact_replay(params, record, n, groups, in_ch, s_lo, w_in, w_rec)

        cur = dt
        for g in range(len(groups) - 1, -1, -1):
            o, members = groups[g]
            if tau_grads and cur > o:
                V, I = states[g]
                _tau_accumulate(acc, lamV, lamI, V[None], I[None], cur - o, params)
            flow(cur - o)
            cur = o
            spikes = [s_lo + k for kind, k in members if kind == 0]
            if spikes:
                sl = np.array(spikes)
                _jumps(lamV, lamI, np.zeros(sl.size, np.int64), record.spike_neuron[sl],
                       record.spike_vdot[sl], record.spike_transmitted[sl], lp_all[sl],
                       params, w_rec, reg_decrement, acc, floor)
            for kind, k in members:
                if kind == 1:
                    acc.dw_inT[in_ch[k]] += lamI[0, :nh]
        if tau_grads and cur > 0:
            V, I = record.snapshots[n]
            _tau_accumulate(acc, lamV, lamI, V[None], I[None], cur, params)
        flow(cur)
        if sdrive is not None:
            lamV[0, nh:] += sdrive[n]
        if not np.isfinite(lamV).all():
            raise SimulationError("non-finite adjoint state", n)
    return acc.result(params)


def _exact_replay(params, record, n, groups, in_ch, s_lo, w_in, w_rec):
    """Forward states just after each event group of step ``n``."""
    V, I = (x.copy() for x in record.snapshots[n])
    nh = params.n_hidden
    cur = 0.0
    out = []
    for o, members in groups:
        em, es, c = propagator(o - cur, params.tau_mem, params.tau_syn)
        V, I = em * V + c * I, es * I
        cur = o
        for kind, k in members:
            if kind == 1:
                I = I + w_in[:, in_ch[k]]
            else:
                j = s_lo + k
                i = record.spike_neuron[j]
                V[i] = params.v_reset
                if record.spike_transmitted[j] and i < nh:
                    I = I + w_rec[:, i]
        out.append((V.copy(), I.copy()))
    return out


def run_backward_trial(params: NetworkParams, record, drive: LossDrive, dt: Optional[float] = None,
                       reg_decrement=None, tau_grads: bool = False, scale: float = 1.0,
                       floor: float = CROSSING_FLOOR) -> GradientSet:
    if dt is not None and dt != record.dt:
        raise ConfigError(f"record was produced with dt={record.dt}, not {dt}")
    if record.mode == "exact":
        return backward_exact(params, record, drive, scale, reg_decrement, tau_grads, floor)
    return backward_grid(params, [record], [drive], scale, reg_decrement, tau_grads, floor)


def backward_batch(params, records, drives, scale=1.0, reg_decrement=None, tau_grads=False,
                   floor=CROSSING_FLOOR) -> GradientSet:
    """Summed gradient of a batch, reduced in trial order."""
    if not records:
        return GradientSet.zeros_like(params)
    if records[0].mode == "grid":
        return backward_grid(params, records, drives, scale, reg_decrement, tau_grads, floor)
    total = GradientSet.zeros_like(params)
    for r, d in zip(records, drives):
        total = total + backward_exact(params, r, d, scale, reg_decrement, tau_grads, floor)
    return total
