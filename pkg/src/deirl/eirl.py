"""EIRL / dEIRL: value regression from one closed-loop dataset, reused across iterations.

Each loop ``j`` owns a subset of the (augmented) state and control. From a
trajectory collected under ``K_0`` the loop caches four matrices (the
quadratic-difference matrix and three bilinear trajectory integrals). Every
iteration then reassembles the regression algebraically from the current
gain, solves it for the value matrix ``P_i`` and improves the gain.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from . import lincontrol as lc
from .simcore import ATOL, RTOL, ExcitationMode, FeedbackLaw, PlantModel, SignalSpec, Trajectory, simulate
from .symops import build_compression, delta_matrix, integrate_segments, bilinear, mat_of_vec, tri_dim, vec_of_mat

log = logging.getLogger(__name__)

RANK_TOL = 1e-12


class RankDeficientError(np.linalg.LinAlgError):
    """Regression matrix lost full column rank (insufficient excitation)."""


@dataclass(frozen=True)
class LoopSpec:
    """One learning loop: index sets into the augmented plant, cost, initial gain and excitation.

    ``outputs`` are augmented-state indices of the loop's tracked outputs and
    ``integrators`` the matching integrator states; both are only needed for
    reference injection.
    """

    name: str
    states: tuple
    controls: tuple
    Q: np.ndarray
    R: np.ndarray
    K0: np.ndarray
    T_s: float
    l: int
    i_star: int
    d: tuple = ()
    r: tuple = ()
    outputs: tuple = ()
    integrators: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(int(i) for i in self.states))
        object.__setattr__(self, "controls", tuple(int(i) for i in self.controls))
        n, m = len(self.states), len(self.controls)
        if n < 1 or m < 1:
            raise ValueError("a loop needs at least one state and one control")
        for name, shape in (("Q", (n, n)), ("R", (m, m)), ("K0", (m, n))):
            val = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if val.shape != shape:
                raise ValueError(f"{name} has shape {val.shape}, expected {shape}")
            object.__setattr__(self, name, val)
        if self.l < tri_dim(n):
            raise ValueError(f"loop {self.name}: l = {self.l} < n(n+1)/2 = {tri_dim(n)}")
        if self.T_s <= 0 or self.i_star < 1:
            raise ValueError("T_s must be positive and i_star >= 1")
        if not self.d:
            object.__setattr__(self, "d", tuple(SignalSpec() for _ in range(m)))
        if len(self.d) != m:
            raise ValueError("need one probing signal per loop control")

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def m(self) -> int:
        return len(self.controls)

    @property
    def horizon(self) -> float:
        return self.T_s * self.l


class DriftResidualModel:
    """``w_j(x) = f_j(x) - f_j(0) - A_jj x_j`` and ``g_j(x) u`` from a (possibly nominal) model.

    Parameters
    ----------
    model : PlantModel
        Model whose ``f`` and ``g`` are evaluated at the measured state.
    lin : LtiSystem, optional
        Estimated linear drift and input matrices ``(A, B)`` in the same
        coordinates. Defaults to the linearization of ``model`` at its origin.

    Notes
    -----
    Subtracting ``f(0)`` anchors the residual at the operating point. It is a
    no-op when ``model`` is expressed about its own equilibrium, and removes
    the constant trim mismatch when a nominal model is evaluated about the
    equilibrium of a perturbed plant.
    """

    def __init__(self, model: PlantModel, lin: lc.LtiSystem | None = None):
        self.model = model
        self.lin = lc.linearize(model) if lin is None else lin
        self.f0 = np.asarray(model.f(np.zeros(model.n)), dtype=float)

    @property
    def A(self) -> np.ndarray:
        return self.lin.A

    @property
    def B(self) -> np.ndarray:
        return self.lin.B

    def w(self, x, states):
        states = np.asarray(states)
        fx = self.model.f(x)[..., states] - self.f0[states]
        return fx - x[..., states] @ self.A[np.ix_(states, states)].T

    def gu(self, x, u, states):
        return self.model.input_times_control(x, u)[..., np.asarray(states)]


@dataclass
class LoopData:
    """Gain-independent regression ingredients for one loop."""

    delta: np.ndarray
    I_xx: np.ndarray
    I_gu: np.ndarray
    I_w: np.ndarray
    quad_rel_change: float


def collect_loop_data(traj: Trajectory, loop: LoopSpec, drift: DriftResidualModel | None, start: int = 0) -> LoopData:
    """Integrals over ``loop.l`` intervals of ``loop.T_s`` beginning at sample ``start``.

    With ``drift=None`` only the quadratic terms are formed (model-free IRL).
    """
    sl, p = traj.window(loop.T_s, loop.l, start)
    t = traj.t[sl]
    x = traj.x[sl]
    xj = x[:, loop.states]
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"loop {loop.name}: non-finite trajectory data")
    delta = delta_matrix(xj[::p])
    q = integrate_segments(t, bilinear(xj, xj), p)
    nbar = tri_dim(loop.n)
    I_gu = np.zeros((loop.l, nbar))
    I_w = np.zeros((loop.l, nbar))
    rel = q.rel_change
    if drift is not None:
        gu = drift.gu(x, traj.u[sl], loop.states)
        w = drift.w(x, loop.states)
        qg = integrate_segments(t, bilinear(xj, gu), p)
        qw = integrate_segments(t, bilinear(xj, w), p)
        I_gu, I_w = qg.value, qw.value
        rel = max(rel, qg.rel_change, qw.rel_change)
    for name, M in (("I_xx", q.value), ("I_gu", I_gu), ("I_w", I_w)):
        if not np.all(np.isfinite(M)):
            raise FloatingPointError(f"loop {loop.name}: non-finite {name}")
    return LoopData(delta=delta, I_xx=q.value, I_gu=I_gu, I_w=I_w, quad_rel_change=rel)


@dataclass(frozen=True)
class RegressionProblem:
    Theta: np.ndarray
    Xi: np.ndarray
    kappa: float
    iteration: int
    loop: str


def condition_number(M) -> float:
    s = np.linalg.svd(M, compute_uv=False)
    return float(s[0] / s[-1]) if s[-1] > 0 else np.inf


def closed_loop_weight(B_jj, K) -> np.ndarray:
    """``W (I kron B K) W_r^{-1}``: maps ``bilinear(x, x)`` to ``bilinear(x, B K x)``."""
    BK = np.asarray(B_jj) @ np.asarray(K)
    n = BK.shape[0]
    c = build_compression(n)
    return c.W @ np.kron(np.eye(n), BK) @ c.W_rinv


def build_regression(data: LoopData, loop: LoopSpec, K_i, B_jj, iteration: int = 0) -> RegressionProblem:
    K_i = np.atleast_2d(K_i)
    W_i = closed_loop_weight(B_jj, K_i)
    Theta = data.delta - 2.0 * (data.I_xx @ W_i.T + data.I_gu + data.I_w)
    Xi = -data.I_xx @ vec_of_mat(loop.Q + K_i.T @ loop.R @ K_i)
    return RegressionProblem(Theta, Xi, condition_number(Theta), iteration, loop.name)


@dataclass(frozen=True)
class RegressionSolution:
    vP: np.ndarray
    P: np.ndarray
    residual: float
    kappa: float


def solve_regression(reg: RegressionProblem) -> RegressionSolution:
    """Least squares by column-pivoted QR, falling back to SVD near rank deficiency."""
    Theta, Xi = reg.Theta, reg.Xi
    s = np.linalg.svd(Theta, compute_uv=False)
    if s.size == 0 or s[0] == 0 or s[-1] <= RANK_TOL * s[0] or Theta.shape[0] < Theta.shape[1]:
        raise RankDeficientError(
            f"loop {reg.loop}, iteration {reg.iteration}: regression matrix is rank deficient "
            f"(kappa = {reg.kappa:.3e})"
        )
    Qf, Rf, piv = sla.qr(Theta, mode="economic", pivoting=True)
    diag = np.abs(np.diag(Rf))
    if diag[-1] > 1e3 * RANK_TOL * diag[0]:
        z = sla.solve_triangular(Rf, Qf.T @ Xi)
        vP = np.empty_like(z)
        vP[piv] = z
    else:
        vP = np.linalg.lstsq(Theta, Xi, rcond=None)[0]
    P = mat_of_vec(vP)
    return RegressionSolution(vP, P, float(np.linalg.norm(Theta @ vP - Xi)), reg.kappa)


def update_gain(P, R, B_jj) -> np.ndarray:
    """``K_{i+1} = R^{-1} B_jj' P_i``."""
    return np.linalg.solve(np.atleast_2d(R), np.atleast_2d(B_jj).T @ P)


# --- driver --------------------------------------------------------------------


@dataclass
class LoopResult:
    name: str
    vP: list = field(default_factory=list)
    P: list = field(default_factory=list)
    K: list = field(default_factory=list)
    kappa: list = field(default_factory=list)
    K_star: np.ndarray | None = None
    P_star: np.ndarray | None = None
    kleinman_K: list = field(default_factory=list)
    error: str | None = None
    rank_I_xx: int | None = None
    rank_Theta: list = field(default_factory=list)

    @property
    def K_final(self):
        return self.K[-1]

    def gain_errors(self):
        """Spectral-norm distance of ``K_0 .. K_{i*}`` to the oracle gain."""
        if self.K_star is None:
            return []
        return [float(np.linalg.norm(np.atleast_2d(K - self.K_star), 2)) for K in self.K]

    def rows(self):
        """Per-iteration export rows: ``i, kappa, K_{i+1} entries, error, vP entries``."""
        errors = self.gain_errors()
        header = ["iteration", "kappa"]
        header += [f"K{k}" for k in range(np.size(self.K[0]))]
        header += ["gain_error"]
        header += [f"vP{k}" for k in range(np.size(self.vP[0]))] if self.vP else []
        out = []
        for i, kappa in enumerate(self.kappa):
            row = [i, float(kappa)] + [float(v) for v in np.ravel(self.K[i + 1])]
            row.append(errors[i + 1] if errors else float("nan"))
            row += [float(v) for v in np.ravel(self.vP[i])] if i < len(self.vP) else []
            out.append(row)
        return header, out


@dataclass
class LearningResult:
    loops: list
    mode: ExcitationMode
    trajectory: Trajectory | None = None

    def loop(self, name) -> LoopResult:
        for lr in self.loops:
            if lr.name == name:
                return lr
        raise KeyError(name)

    def to_csv(self, directory, prefix: str = "learning", extra=None) -> list:
        """Write one CSV per loop; ``extra`` is an ordered mapping of constant leading columns."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        extra = dict(extra or {})
        paths = []
        for lr in self.loops:
            header, rows = lr.rows()
            path = directory / f"{prefix}_{lr.name}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(list(extra) + header)
                for row in rows:
                    w.writerow(list(extra.values()) + [repr(v) if isinstance(v, float) else v for v in row])
            paths.append(path)
        return paths


def block_gain(loops, m: int, n: int, gains=None) -> np.ndarray:
    """Assemble a block-structured ``m x n`` gain from per-loop gains."""
    K = np.zeros((m, n))
    for j, loop in enumerate(loops):
        Kj = loop.K0 if gains is None else gains[j]
        K[np.ix_(loop.controls, loop.states)] = Kj
    return K


def collection_law(model, loops, mode: ExcitationMode, error_feedback: bool = True) -> FeedbackLaw:
    """Data-collection controller: every loop under its ``K_0`` with its excitation."""
    mode = ExcitationMode(mode)
    d = [SignalSpec() for _ in range(model.m)]
    for loop in loops:
        for c, sig in zip(loop.controls, loop.d):
            d[c] = sig
    r, zi, yi = [], [], []
    if mode is ExcitationMode.MI:
        for loop in loops:
            if len(loop.r) != len(loop.outputs) or len(loop.outputs) != len(loop.integrators) or not loop.r:
                raise ValueError(f"loop {loop.name}: MI needs reference signals, outputs and integrators")
            r.extend(loop.r)
            zi.extend(loop.integrators)
            yi.extend(loop.outputs)
    return FeedbackLaw(
        K=block_gain(loops, model.m, model.n),
        d=tuple(d),
        r=tuple(r),
        mode=mode,
        integrator_idx=tuple(zi),
        output_idx=tuple(yi),
        error_feedback=error_feedback,
    )


def check_partition(loops, n: int, m: int):
    seen_x, seen_u = set(), set()
    for loop in loops:
        if seen_x & set(loop.states) or seen_u & set(loop.controls):
            raise ValueError("loops must partition states and controls disjointly")
        seen_x |= set(loop.states)
        seen_u |= set(loop.controls)
        if max(loop.states) >= n or max(loop.controls) >= m:
            raise ValueError(f"loop {loop.name}: index out of range")


def learn_loop(
    data: LoopData,
    loop: LoopSpec,
    B_jj,
    K_star=None,
    freeze_gain: bool = False,
    kleinman_A=None,
) -> LoopResult:
    """Run ``i_star`` regression / inversion / improvement cycles on cached data."""
    res = LoopResult(name=loop.name, K=[loop.K0.copy()], K_star=K_star)
    res.rank_I_xx = int(np.linalg.matrix_rank(data.I_xx))
    K = loop.K0
    for i in range(loop.i_star):
        reg = build_regression(data, loop, K, B_jj, iteration=i)
        res.kappa.append(reg.kappa)
        res.rank_Theta.append(int(np.linalg.matrix_rank(reg.Theta)))
        sol = solve_regression(reg)
        res.vP.append(sol.vP)
        res.P.append(sol.P)
        if not freeze_gain:
            K = update_gain(sol.P, loop.R, B_jj)
        res.K.append(np.array(K))
        log.debug("loop %s iter %d kappa %.3e", loop.name, i, reg.kappa)
    if kleinman_A is not None:
        prob = lc.LqrProblem(lc.LtiSystem(kleinman_A, B_jj), loop.Q, loop.R)
        res.kleinman_K = lc.kleinman(prob, loop.K0, loop.i_star).K_seq
    return res


def run_learning(
    model: PlantModel,
    loops,
    mode=ExcitationMode.MI,
    drift: DriftResidualModel | None = None,
    oracle: lc.LtiSystem | None = None,
    x0=None,
    dt: float = 0.0025,
    error_feedback: bool = True,
    trajectory: Trajectory | None = None,
    rtol: float = RTOL,
    atol: float = ATOL,
) -> LearningResult:
    """Algorithm driver: collect once under ``K_0``, then learn each loop independently.

    ``drift`` defaults to the plant itself (exact residual); its linear
    model supplies the ``A_jj``, ``B_jj`` used in the regression. ``oracle`` is the
    linear system whose per-loop LQR solutions serve as reference gains; it
    defaults to the plant's own linearization. A loop that fails is recorded
    with its error and does not stop the others.
    """
    loops = list(loops)
    mode = ExcitationMode(mode)
    check_partition(loops, model.n, model.m)
    drift = drift or DriftResidualModel(model)
    lin = oracle or lc.linearize(model)
    A_design = drift.A
    B_design = drift.B
    for loop in loops:
        A_jj = A_design[np.ix_(loop.states, loop.states)]
        B_jj = B_design[np.ix_(loop.states, loop.controls)]
        ok, a = lc.is_hurwitz(A_jj - B_jj @ loop.K0)
        if not ok:
            raise lc.NotStabilizingError(f"loop {loop.name}: K0 does not stabilize A_jj (abscissa {a:.4g})")
    if trajectory is None:
        law = collection_law(model, loops, mode, error_feedback)
        horizon = max(loop.horizon for loop in loops)
        x0 = np.zeros(model.n) if x0 is None else x0
        trajectory = simulate(
            model, law, x0, horizon, dt, rtol=rtol, atol=atol, meta={"loops": [lp.name for lp in loops]}
        )
    results = []
    for loop in loops:
        B_jj = B_design[np.ix_(loop.states, loop.controls)]
        try:
            blk = lin.block(loop.states, loop.controls)
            prob = lc.LqrProblem(blk, loop.Q, loop.R)
            sol = lc.solve_care(prob, loop.K0)
            data = collect_loop_data(trajectory, loop, drift)
            lr = learn_loop(data, loop, B_jj, K_star=sol.K, kleinman_A=A_design[np.ix_(loop.states, loop.states)])
            lr.P_star = sol.P
        except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            log.warning("loop %s failed: %s", loop.name, exc)
            lr = LoopResult(name=loop.name, K=[loop.K0.copy()], error=str(exc))
        results.append(lr)
    return LearningResult(loops=results, mode=mode, trajectory=trajectory)


def run_eirl(model, loop: LoopSpec, mode=ExcitationMode.MI, **kw) -> LearningResult:
    """Single loop over all fed-back states."""
    return run_learning(model, [loop], mode, **kw)


def run_deirl(model, loops, mode=ExcitationMode.MI, **kw) -> LearningResult:
    if len(loops) < 2:
        raise ValueError("dEIRL needs at least two loops")
    return run_learning(model, loops, mode, **kw)


def run_irl_baseline(
    model, loop: LoopSpec, x0, dt: float = 0.0025, rtol: float = RTOL, atol: float = ATOL
) -> LearningResult:
    """Model-free IRL conditioning baseline under a frozen ``K_0``.

    No probing noise or reference: the only excitation is the off-trim
    initial condition. Iteration ``i`` regresses on the ``i``-th consecutive
    window of ``l`` samples, the regression matrix being the
    quadratic-difference matrix alone.
    """
    quiet = LoopSpec(
        loop.name, loop.states, loop.controls, loop.Q, loop.R, loop.K0, loop.T_s, loop.l, loop.i_star
    )
    law = collection_law(model, [quiet], ExcitationMode.SI)
    traj = simulate(model, law, x0, quiet.horizon * quiet.i_star, dt, rtol=rtol, atol=atol, meta={"method": "irl"})
    res = LoopResult(name=loop.name, K=[loop.K0.copy()])
    for i in range(quiet.i_star):
        data = collect_loop_data(traj, quiet, None, start=i * quiet.l)
        Theta = data.delta
        Xi = -data.I_xx @ vec_of_mat(quiet.Q + quiet.K0.T @ quiet.R @ quiet.K0)
        reg = RegressionProblem(Theta, Xi, condition_number(Theta), i, loop.name)
        res.kappa.append(reg.kappa)
        try:
            sol = solve_regression(reg)
            res.vP.append(sol.vP)
        except RankDeficientError:
            res.vP.append(np.linalg.lstsq(Theta, Xi, rcond=None)[0])
        res.K.append(quiet.K0.copy())
    return LearningResult(loops=[res], mode=ExcitationMode.SI, trajectory=traj)
