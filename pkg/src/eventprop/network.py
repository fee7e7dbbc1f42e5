"""Network parameters, trials and the closed-form LIF propagators.

A non-input neuron carries a membrane potential ``V`` and a synaptic
current ``I`` with free dynamics

    tau_mem * dV/dt = -V + I
    tau_syn * dI/dt = -I

Both the forward flow and the adjoint flow are linear with constant
coefficients between events, so every integration step here uses the
exact two-variable propagator rather than an Euler update.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple, Optional

import numpy as np

from .errors import ConfigError

TAU_MEM_MIN = 3.0
TAU_SYN_MIN = 1.0

NON_SPIKING = "non-spiking"
SPIKING = "spiking"


class SpikeEvent(NamedTuple):
    neuron: int
    time: float


@dataclass
class Trial:
    """One labelled input pattern.

    Events are stored column-wise (``times``, ``channels``) and kept sorted
    by time, ties broken by ascending channel.
    """

    times: np.ndarray
    channels: np.ndarray
    label: int
    duration: float
    trial_id: Optional[str] = None
    speaker: Optional[str] = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        channels = np.asarray(self.channels, dtype=np.int64).ravel()
        if times.shape != channels.shape:
            raise ValueError("times and channels must have equal length")
        if self.duration <= 0:
            raise ValueError("trial duration must be positive")
        if times.size and (times.min() < 0 or times.max() >= self.duration):
            raise ValueError("event times must lie in [0, duration)")
        if channels.size and channels.min() < 0:
            raise ValueError("negative channel index")
        order = np.lexsort((channels, times))
        self.times = times[order]
        self.channels = channels[order]
        self.label = int(self.label)
        self.duration = float(self.duration)

    @classmethod
    def from_events(cls, events, label, duration, **kw) -> "Trial":
        events = list(events)
        times = [e.time for e in events]
        chans = [e.neuron for e in events]
        return cls(np.array(times, float), np.array(chans, np.int64), label, duration, **kw)

    @property
    def events(self) -> Iterator[SpikeEvent]:
        for c, t in zip(self.channels.tolist(), self.times.tolist()):
            yield SpikeEvent(c, t)

    def __len__(self):
        return self.times.size

    def with_events(self, times, channels) -> "Trial":
        return replace(self, times=times, channels=channels)

    def __eq__(self, other):
        if not isinstance(other, Trial):
            return NotImplemented
        return (self.label == other.label and self.duration == other.duration
                and self.trial_id == other.trial_id and self.speaker == other.speaker
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.channels, other.channels))


@dataclass
class NetworkParams:
    """Weights and neuron constants of an input-hidden-output network.

    ``tau_mem`` and ``tau_syn`` are per neuron over the hidden neurons
    followed by the output neurons. ``w_hh`` is ``None`` for feedforward
    networks. Without autapses the diagonal of ``w_hh`` is structurally
    zero: it is initialised to zero and never updated.
    """

    w_ih: np.ndarray
    w_ho: np.ndarray
    tau_mem: np.ndarray
    tau_syn: np.ndarray
    w_hh: Optional[np.ndarray] = None
    theta: float = 1.0
    v_reset: float = 0.0
    output_mode: str = NON_SPIKING
    autapses: bool = False
    check_tau: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.w_ih = np.atleast_2d(np.asarray(self.w_ih, dtype=float))
        self.w_ho = np.atleast_2d(np.asarray(self.w_ho, dtype=float))
        n_h = self.w_ih.shape[0]
        if self.w_ho.shape[1] != n_h:
            raise ConfigError(f"w_ho has {self.w_ho.shape[1]} columns, expected {n_h}")
        if self.w_hh is not None:
            self.w_hh = np.asarray(self.w_hh, dtype=float)
            if self.w_hh.shape != (n_h, n_h):
                raise ConfigError(f"w_hh must be {(n_h, n_h)}, got {self.w_hh.shape}")
        n = n_h + self.w_ho.shape[0]
        self.tau_mem = np.broadcast_to(np.asarray(self.tau_mem, float), (n,)).copy()
        self.tau_syn = np.broadcast_to(np.asarray(self.tau_syn, float), (n,)).copy()
        if self.output_mode not in (NON_SPIKING, SPIKING):
            raise ConfigError(f"unknown output_mode {self.output_mode!r}")
        if self.check_tau:
            if np.any(self.tau_mem < TAU_MEM_MIN) or np.any(self.tau_syn < TAU_SYN_MIN):
                raise ConfigError("tau_mem must be >= 3 ms and tau_syn >= 1 ms")

    @property
    def n_in(self) -> int:
        return self.w_ih.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.w_ih.shape[0]

    @property
    def n_out(self) -> int:
        return self.w_ho.shape[0]

    @property
    def n_neurons(self) -> int:
        return self.n_hidden + self.n_out

    @property
    def recurrent(self) -> bool:
        return self.w_hh is not None

    def w_rec(self) -> np.ndarray:
        """Weights from hidden spikes onto all non-input neurons, shape (N, n_hidden)."""
        if self.w_hh is None:
            top = np.zeros((self.n_hidden, self.n_hidden))
        else:
            top = self.w_hh.copy()
            if not self.autapses:
                np.fill_diagonal(top, 0.0)
        return np.vstack([top, self.w_ho])

    def spiking_mask(self) -> np.ndarray:
        mask = np.ones(self.n_neurons, bool)
        if self.output_mode == NON_SPIKING:
            mask[self.n_hidden:] = False
        return mask

    def blocks(self) -> dict:
        out = {"w_ih": self.w_ih, "w_ho": self.w_ho}
        if self.w_hh is not None:
            out["w_hh"] = self.w_hh
        return out

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            w_ih=self.w_ih.copy(), w_ho=self.w_ho.copy(),
            tau_mem=self.tau_mem.copy(), tau_syn=self.tau_syn.copy(),
            w_hh=None if self.w_hh is None else self.w_hh.copy(),
            theta=self.theta, v_reset=self.v_reset, output_mode=self.output_mode,
            autapses=self.autapses, check_tau=self.check_tau)


def phi(x):
    """expm1(x)/x, continuous at 0."""
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    nz = x != 0
    out[nz] = np.expm1(x[nz]) / x[nz]
    return out


def dphi(x):
    """Derivative of :func:`phi`."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-3
    xs = x[small]
    out[small] = 0.5 + xs / 3.0 + xs**2 / 8.0 + xs**3 / 30.0
    xl = x[~small]
    out[~small] = (np.exp(xl) * (xl - 1.0) + 1.0) / xl**2
    return out


def propagator(h, tau_mem, tau_syn):
    """Forward flow coefficients over a duration ``h``.

    Returns ``(e_mem, e_syn, cross)`` with
    ``V(h) = e_mem*V0 + cross*I0`` and ``I(h) = e_syn*I0``. ``cross`` is
    ``tau_syn/(tau_syn-tau_mem) * (e_syn - e_mem)``, evaluated in a form that
    stays accurate as the two constants approach each other.
    """
    h = np.asarray(h, dtype=float)
    e_mem = np.exp(-h / tau_mem)
    e_syn = np.exp(-h / tau_syn)
    r = 1.0 / tau_mem - 1.0 / tau_syn
    cross = (h / tau_mem) * e_mem * phi(h * r)
    return e_mem, e_syn, cross


def adjoint_propagator(h, tau_mem, tau_syn):
    """Backward flow of (lambda_V, lambda_I) over backward duration ``h``.

    ``lambda_V <- e_mem*lambda_V``; ``lambda_I <- e_syn*lambda_I + cross*lambda_V``.
    """
    h = np.asarray(h, dtype=float)
    e_mem = np.exp(-h / tau_mem)
    e_syn = np.exp(-h / tau_syn)
    r = 1.0 / tau_syn - 1.0 / tau_mem
    cross = (h / tau_syn) * e_syn * phi(h * r)
    return e_mem, e_syn, cross


def propagator_tau_derivatives(h, tau_mem, tau_syn):
    """Partial derivatives of the forward coefficients w.r.t. the time constants.

    Returns ``(de_mem/dtau_mem, de_syn/dtau_syn, dcross/dtau_mem, dcross/dtau_syn)``.
    """
    h = np.asarray(h, dtype=float)
    e_mem = np.exp(-h / tau_mem)
    e_syn = np.exp(-h / tau_syn)
    x = h * (1.0 / tau_mem - 1.0 / tau_syn)
    p, dp = phi(x), dphi(x)
    de_mem = h / tau_mem**2 * e_mem
    de_syn = h / tau_syn**2 * e_syn
    dc_mem = (h / tau_mem**2) * e_mem * (h / tau_mem - 1.0) * p \
        - (h / tau_mem) * e_mem * dp * h / tau_mem**2
    dc_syn = (h / tau_mem) * e_mem * dp * h / tau_syn**2
    return de_mem, de_syn, dc_mem, dc_syn


def n_steps_for(duration: float, dt: float) -> int:
    if dt <= 0:
        raise ConfigError("dt must be positive")
    return int(np.ceil(duration / dt - 1e-9))
