"""Closed-loop simulation: excitation signals, integrator augmentation,
feedback laws with single/multi injection, trajectories and step metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.integrate import solve_ivp

RTOL = 1e-8
ATOL = 1e-10
BLOWUP_BOUND = 1e6


# --- signals -------------------------------------------------------------------


@dataclass(frozen=True)
class SignalSpec:
    """``bias + sum(a_i * trig_i(omega_i * t))`` with trig in {sin, cos}."""

    terms: tuple = ()
    bias: float = 0.0

    def __post_init__(self):
        terms = tuple((float(a), float(w), str(k)) for a, w, k in self.terms)
        for a, w, k in terms:
            if k not in ("sin", "cos"):
                raise ValueError(f"unknown term kind {k!r}")
            if not (np.isfinite(a) and np.isfinite(w)):
                raise ValueError("signal parameters must be finite")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "bias", float(self.bias))

    @classmethod
    def from_periods(cls, terms, bias: float = 0.0) -> "SignalSpec":
        """Build from ``(amplitude, period_s, kind)`` triples."""
        return cls(tuple((a, 2 * np.pi / T, k) for a, T, k in terms), bias)

    def scaled(self, c: float) -> "SignalSpec":
        return SignalSpec(tuple((c * a, w, k) for a, w, k in self.terms), c * self.bias)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.full_like(t, self.bias)
        for a, w, k in self.terms:
            out = out + a * (np.sin(w * t) if k == "sin" else np.cos(w * t))
        return out

    def integral(self, t):
        """``int_0^t`` of the signal."""
        t = np.asarray(t, dtype=float)
        out = self.bias * t
        for a, w, k in self.terms:
            if w == 0:
                out = out + (0.0 if k == "sin" else a * t)
            elif k == "sin":
                out = out + a * (1 - np.cos(w * t)) / w
            else:
                out = out + a * np.sin(w * t) / w
        return out


ZERO = SignalSpec()


def eval_signal(sig: SignalSpec, t):
    return sig(t)


# --- plants --------------------------------------------------------------------


class PlantModel:
    """Control-affine plant ``x' = f(x) + g(x) u`` with ``f(0) = 0``.

    ``f`` and ``g`` broadcast over leading axes of ``x``. ``rhs`` is the true
    vector field used for simulation and defaults to the affine form.
    """

    n: int
    m: int
    state_names: tuple = ()
    control_names: tuple = ()

    def f(self, x):
        raise NotImplementedError

    def g(self, x):
        raise NotImplementedError

    def rhs(self, x, u):
        return self.f(x) + self.g(x) @ u

    def input_times_control(self, x, u):
        """``g(x) u`` along a trajectory: ``x`` (N, n), ``u`` (N, m)."""
        return np.einsum("...ij,...j->...i", self.g(x), u)


class LinearPlant(PlantModel):
    def __init__(self, A, B, state_names=None, control_names=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.asarray(B, dtype=float)
        self.B = B[:, None] if B.ndim == 1 else B
        self.n, self.m = self.B.shape
        self.state_names = tuple(state_names or (f"x{i + 1}" for i in range(self.n)))
        self.control_names = tuple(control_names or (f"u{i + 1}" for i in range(self.m)))

    def f(self, x):
        return np.asarray(x, dtype=float) @ self.A.T

    def g(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.B, x.shape[:-1] + self.B.shape)

    def rhs(self, x, u):
        return self.A @ x + self.B @ u


class AugmentedPlant(PlantModel):
    """Plant with an output integrator ``z_y' = y`` inserted before each output state."""

    def __init__(self, base: PlantModel, outputs):
        outputs = tuple(int(i) for i in outputs)
        if len(set(outputs)) != len(outputs):
            raise ValueError("duplicate output indices")
        if any(not 0 <= i < base.n for i in outputs):
            raise ValueError("output index out of range")
        self.base = base
        self.n = base.n + len(outputs)
        self.m = base.m
        order = []  # (kind, base index)
        for i in range(base.n):
            if i in outputs:
                order.append(("z", i))
            order.append(("x", i))
        self._order = order
        self.base_idx = np.array([k for k, (kind, _) in enumerate(order) if kind == "x"])
        self.integrator_idx = tuple(order.index(("z", i)) for i in outputs)
        self.output_idx = tuple(order.index(("x", i)) for i in outputs)
        self._z_src = np.array(outputs, dtype=int)
        names = base.state_names or tuple(f"x{i + 1}" for i in range(base.n))
        self.state_names = tuple(("z_" + names[i]) if kind == "z" else names[i] for kind, i in order)
        self.control_names = base.control_names

    def _split(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., self.base_idx]

    def f(self, x):
        xb = self._split(x)
        out = np.zeros(np.shape(x))
        out[..., self.base_idx] = self.base.f(xb)
        out[..., list(self.integrator_idx)] = xb[..., self._z_src]
        return out

    def g(self, x):
        xb = self._split(x)
        gb = self.base.g(xb)
        out = np.zeros(np.shape(x)[:-1] + (self.n, self.m))
        out[..., self.base_idx, :] = gb
        return out

    def rhs(self, x, u):
        x = np.asarray(x, dtype=float)
        xb = x[self.base_idx]
        out = np.zeros(self.n)
        out[self.base_idx] = self.base.rhs(xb, u)
        out[list(self.integrator_idx)] = xb[self._z_src]
        return out


def augment_integrators(model: PlantModel, outputs) -> AugmentedPlant:
    return AugmentedPlant(model, outputs)


# --- feedback ------------------------------------------------------------------


class ExcitationMode(str, Enum):
    SI = "si"
    MI = "mi"


@dataclass(frozen=True)
class FeedbackLaw:
    """Servo state feedback with probing noise and optional reference injection.

    ``u = -K (x - x_ref(t)) + d(t)`` where ``x_ref`` carries ``int r`` on the
    integrator states and, if ``error_feedback`` is set (the default), ``r``
    on the output states, so that the output gain acts on ``e = r - y``.
    With ``error_feedback=False`` the integrators see the error while the
    proportional path acts on the measurement, the usual arrangement for
    step-command testing. In SI mode ``x_ref = 0``.
    """

    K: np.ndarray
    d: tuple = ()
    r: tuple = ()
    mode: ExcitationMode = ExcitationMode.SI
    integrator_idx: tuple = ()
    output_idx: tuple = ()
    error_feedback: bool = True

    def __post_init__(self):
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "mode", ExcitationMode(self.mode))
        d = tuple(self.d) or tuple(ZERO for _ in range(K.shape[0]))
        if len(d) != K.shape[0]:
            raise ValueError("need one probing signal per control channel")
        object.__setattr__(self, "d", d)
        if self.mode is ExcitationMode.MI:
            if len(self.r) != len(self.integrator_idx) or len(self.r) != len(self.output_idx):
                raise ValueError("MI requires one reference signal per output channel")

    def reference_state(self, t, n: int):
        t = np.asarray(t, dtype=float)
        xr = np.zeros(t.shape + (n,))
        if self.mode is ExcitationMode.MI:
            for sig, zi, yi in zip(self.r, self.integrator_idx, self.output_idx):
                xr[..., zi] = sig.integral(t)
                if self.error_feedback:
                    xr[..., yi] = sig(t)
        return xr

    def probing(self, t):
        t = np.asarray(t, dtype=float)
        return np.stack([sig(t) for sig in self.d], axis=-1)

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        e = x - self.reference_state(t, x.shape[-1])
        return -e @ self.K.T + self.probing(t)


# --- trajectories --------------------------------------------------------------


@dataclass
class Trajectory:
    """Closed-loop run on a uniform inner grid of step ``dt``.

    ``u`` is the applied control including excitation. Sample instants are the
    grid points at multiples of a sample period.
    """

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    dt: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def per_sample(self, T_s: float) -> int:
        k = T_s / self.dt
        if abs(k - round(k)) > 1e-9 * k or round(k) < 2:
            raise ValueError(f"sample period {T_s} is not a multiple of the inner step {self.dt}")
        return int(round(k))

    def window(self, T_s: float, l: int, start: int = 0):
        """Inner-grid slice covering ``l`` sample intervals from sample ``start``."""
        p = self.per_sample(T_s)
        lo, hi = start * p, (start + l) * p
        if hi >= self.t.size:
            raise ValueError(f"trajectory too short for {l} samples of {T_s} s")
        return slice(lo, hi + 1), p

    def samples(self, T_s: float, l: int, start: int = 0):
        sl, p = self.window(T_s, l, start)
        return self.t[sl][::p], self.x[sl][::p], self.u[sl][::p]

    def to_csv(self, path, state_names=None, control_names=None, extra=None):
        """Columns ``t, x..., u...``, preceded by constant ``extra`` columns if given."""
        n, m = self.x.shape[1], self.u.shape[1]
        sn = state_names or [f"x{i + 1}" for i in range(n)]
        cn = control_names or [f"u{i + 1}" for i in range(m)]
        extra = dict(extra or {})
        lead = [str(v) for v in extra.values()]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*extra, "t", *sn, *cn])
            for row in np.column_stack([self.t, self.x, self.u]):
                w.writerow(lead + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, n: int, meta=None):
        """Read a file written by :meth:`to_csv`; ``n`` is the state dimension."""
        with open(path, newline="") as fh:
            header = next(csv.reader(fh))
        first = header.index("t")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, usecols=range(first, len(header)))
        t = data[:, 0]
        dt = float((t[-1] - t[0]) / (t.size - 1)) if t.size > 1 else 0.0
        return cls(t=t, x=data[:, 1 : 1 + n], u=data[:, 1 + n :], dt=dt, meta=dict(meta or {}))


class DivergenceError(RuntimeError):
    pass


def simulate(
    model: PlantModel,
    law: FeedbackLaw,
    x0,
    t_final: float,
    dt: float,
    rtol: float = RTOL,
    atol: float = ATOL,
    blowup_bound: float = BLOWUP_BOUND,
    meta=None,
) -> Trajectory:
    """Integrate the closed loop with the Dormand-Prince 5(4) pair and dense output.

    States and applied controls are reported on the uniform grid ``k * dt``.
    A state norm above ``blowup_bound`` aborts with :class:`DivergenceError`.
    """
    x0 = np.asarray(x0, dtype=float)
    nsteps = int(round(t_final / dt))
    if abs(nsteps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError("t_final must be a multiple of dt")

    def rhs(t, x):
        return model.rhs(x, law(t, x))

    def blowup(t, x):
        return blowup_bound - np.linalg.norm(x)

    blowup.terminal = True
    t_grid = np.arange(nsteps + 1) * dt
    if nsteps == 0:
        raise ValueError("empty horizon")
    sol = solve_ivp(rhs, (0.0, t_grid[-1]), x0, method="RK45", rtol=rtol, atol=atol, dense_output=True, events=blowup)
    if sol.status == 1:
        raise DivergenceError(f"state norm exceeded {blowup_bound:g} at t = {sol.t_events[0][0]:.3f} s")
    if sol.status != 0:
        raise RuntimeError(f"integration failed: {sol.message}")
    x = sol.sol(t_grid).T
    x[0] = x0
    u = law(t_grid, x)
    info = {"nfev": int(sol.nfev), "mode": law.mode.value}
    info.update(meta or {})
    return Trajectory(t=t_grid, x=x, u=u, dt=dt, meta=info)


# --- step metrics --------------------------------------------------------------


@dataclass(frozen=True)
class StepMetrics:
    rise_time_90: float
    settle_time_1pct: float
    overshoot_pct: float


class StepMetricError(ValueError):
    pass


def step_metrics(t, y, step: float, y0: float = 0.0) -> StepMetrics:
    """Rise (first 90% crossing), 1% settling (last exit from band), percent overshoot."""
    t = np.asarray(t, dtype=float)
    dy = (np.asarray(y, dtype=float) - y0) / step
    above = np.nonzero(dy >= 0.9)[0]
    if above.size == 0:
        raise StepMetricError("response never reaches 90% of the command")
    k = above[0]
    t_r = t[k] if k == 0 else t[k - 1] + (0.9 - dy[k - 1]) * (t[k] - t[k - 1]) / (dy[k] - dy[k - 1])
    outside = np.nonzero(np.abs(dy - 1.0) > 0.01)[0]
    if outside.size == 0:
        t_s = t[0]
    elif outside[-1] == t.size - 1:
        raise StepMetricError("response does not settle within the horizon")
    else:
        j = outside[-1]
        e0, e1 = abs(dy[j] - 1.0), abs(dy[j + 1] - 1.0)
        t_s = t[j] + (e0 - 0.01) * (t[j + 1] - t[j]) / (e0 - e1)
    overshoot = max(0.0, (dy.max() - 1.0) * 100.0)
    return StepMetrics(float(t_r - t[0]), float(t_s - t[0]), float(overshoot))
