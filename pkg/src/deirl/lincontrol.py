"""Linear-systems backbone: Lyapunov and Riccati solves, Kleinman iteration,
finite-difference linearization and closed-loop frequency maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

EPS_HURWITZ = 1e-9


class NotStabilizingError(ValueError):
    """A closed-loop matrix expected to be Hurwitz is not."""


@dataclass(frozen=True)
class LtiSystem:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise ValueError(f"inconsistent shapes A{A.shape} B{B.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError("non-finite entries in (A, B)")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def block(self, states, controls) -> "LtiSystem":
        """Diagonal sub-block ``(A_jj, B_jj)`` for a state/control index set."""
        states = np.asarray(states)
        return LtiSystem(self.A[np.ix_(states, states)], self.B[np.ix_(states, np.asarray(controls))])


@dataclass(frozen=True)
class LqrProblem:
    sys: LtiSystem
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        n, m = self.sys.n, self.sys.m
        if Q.shape != (n, n) or R.shape != (m, m):
            raise ValueError("penalty shapes do not match the system")
        if not np.allclose(Q, Q.T) or not np.allclose(R, R.T):
            raise ValueError("Q and R must be symmetric")
        if np.linalg.eigvalsh(Q).min() < -1e-10:
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(R).min() <= 0:
            raise ValueError("R must be positive definite")
        if not is_stabilizable(self.sys.A, self.sys.B):
            raise ValueError("(A, B) is not stabilizable")
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))
        object.__setattr__(self, "R", 0.5 * (R + R.T))

    def gain(self, P) -> np.ndarray:
        """Policy improvement ``R^{-1} B' P``."""
        return np.linalg.solve(self.R, self.sys.B.T @ P)

    def care_residual(self, P) -> np.ndarray:
        A, B = self.sys.A, self.sys.B
        return A.T @ P + P @ A - P @ B @ np.linalg.solve(self.R, B.T @ P) + self.Q

    def detectable(self) -> bool:
        """PBH detectability of ``(Q^{1/2}, A)``."""
        w, V = np.linalg.eigh(self.Q)
        Qh = (V * np.sqrt(np.clip(w, 0, None))) @ V.T
        return is_stabilizable(self.sys.A.T, Qh.T)


def spectral_abscissa(A) -> float:
    return float(np.max(np.linalg.eigvals(np.atleast_2d(A)).real))


def is_hurwitz(A, eps: float = EPS_HURWITZ) -> tuple[bool, float]:
    """Return ``(max Re(eig) < -eps, spectral abscissa)``."""
    a = spectral_abscissa(A)
    return a < -eps, a


def is_stabilizable(A, B, tol: float = 1e-9) -> bool:
    """PBH test on the eigenvalues with nonnegative real part."""
    A = np.atleast_2d(A)
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n = A.shape[0]
    scale = max(1.0, np.linalg.norm(A), np.linalg.norm(B))
    for lam in np.linalg.eigvals(A):
        if lam.real < -tol:
            continue
        M = np.hstack([lam * np.eye(n) - A, B])
        s = np.linalg.svd(M, compute_uv=False)
        if s[n - 1] <= tol * scale:
            return False
    return True


def solve_ale(A_cl, S) -> np.ndarray:
    """Solve ``A_cl' P + P A_cl + S = 0`` by Kronecker vectorization.

    ``A_cl`` must be Hurwitz; otherwise the solution need not be definite and
    the call is refused.
    """
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    stable, abscissa = is_hurwitz(A_cl)
    if not stable:
        raise NotStabilizingError(f"closed loop not Hurwitz (spectral abscissa {abscissa:.4g})")
    n = A_cl.shape[0]
    I = np.eye(n)
    L = np.kron(I, A_cl.T) + np.kron(A_cl.T, I)
    # column-major vec: vec(A'P) = (I kron A') vec(P), vec(P A) = (A' kron I) vec(P)
    try:
        p = np.linalg.solve(L, -S.reshape(-1, order="F"))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular Lyapunov operator") from exc
    P = p.reshape(n, n, order="F")
    return 0.5 * (P + P.T)


@dataclass
class KleinmanTrace:
    """Iterates of Kleinman's policy iteration.

    ``P_seq[i]`` solves the Lyapunov equation for ``K_seq[i]``, and
    ``K_seq[i + 1]`` is the improved gain, so ``len(K_seq) == len(P_seq) + 1``.
    """

    P_seq: list = field(default_factory=list)
    K_seq: list = field(default_factory=list)
    hurwitz_flags: list = field(default_factory=list)


def kleinman(prob: LqrProblem, K0, iters: int) -> KleinmanTrace:
    A, B = prob.sys.A, prob.sys.B
    K = np.atleast_2d(np.asarray(K0, dtype=float))
    if K.shape != (prob.sys.m, prob.sys.n):
        raise ValueError(f"K0 has shape {K.shape}, expected {(prob.sys.m, prob.sys.n)}")
    trace = KleinmanTrace(K_seq=[K])
    for _ in range(iters):
        A_cl = A - B @ K
        stable, _ = is_hurwitz(A_cl)
        trace.hurwitz_flags.append(stable)
        P = solve_ale(A_cl, prob.Q + K.T @ prob.R @ K)
        K = prob.gain(P)
        trace.P_seq.append(P)
        trace.K_seq.append(K)
    trace.hurwitz_flags.append(is_hurwitz(A - B @ K)[0])
    return trace


@dataclass(frozen=True)
class CareSolution:
    P: np.ndarray
    K: np.ndarray
    residual: float
    iterations: int
    converged: bool


def solve_care(prob: LqrProblem, K0, max_iter: int = 50, rtol: float = 1e-8) -> CareSolution:
    """CARE solution by Kleinman iteration from a stabilizing ``K0``.

    Iterates until the relative Riccati residual drops below ``rtol`` or
    ``max_iter`` is exhausted; the residual is reported either way.
    """
    A, B = prob.sys.A, prob.sys.B
    K = np.atleast_2d(np.asarray(K0, dtype=float))
    scale = max(np.linalg.norm(prob.Q), np.finfo(float).tiny)
    P = None
    res = np.inf
    for it in range(1, max_iter + 1):
        P = solve_ale(A - B @ K, prob.Q + K.T @ prob.R @ K)
        K = prob.gain(P)
        res = float(np.linalg.norm(prob.care_residual(P)) / scale)
        if res <= rtol:
            return CareSolution(P=P, K=K, residual=res, iterations=it, converged=True)
    return CareSolution(P=P, K=K, residual=res, iterations=max_iter, converged=False)


def lqr(prob: LqrProblem) -> tuple[np.ndarray, np.ndarray]:
    """Stabilizing CARE solution via scipy, for seeding gains in tests and studies."""
    P = sla.solve_continuous_are(prob.sys.A, prob.sys.B, prob.Q, prob.R)
    P = 0.5 * (P + P.T)
    return P, prob.gain(P)


def place_gain(A, B, poles) -> np.ndarray:
    from scipy.signal import place_poles

    return place_poles(A, B, poles).gain_matrix


# --- linearization -------------------------------------------------------------


@dataclass(frozen=True)
class Linearization:
    sys: LtiSystem
    richardson_error: float


def _central_jacobian(fun, x0, steps) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    f0 = np.asarray(fun(x0), dtype=float)
    J = np.empty((f0.size, x0.size))
    for i, h in enumerate(steps):
        e = np.zeros_like(x0)
        e[i] = h
        fp = np.asarray(fun(x0 + e), dtype=float)
        fm = np.asarray(fun(x0 - e), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise FloatingPointError(f"non-finite dynamics near the operating point (coordinate {i})")
        J[:, i] = (fp - fm) / (2.0 * h)
    return J


def linearize_fn(dyn, x_e, u_e, rel_tol: float = 1e-4) -> Linearization:
    """Central-difference Jacobians of ``dyn(x, u)`` at ``(x_e, u_e)``.

    Steps are ``max(1e-6, 1e-7 |x_i|)``. The Jacobian is recomputed at half
    step and entries above 1e-6 of the largest magnitude must agree to
    ``rel_tol``; the worst relative disagreement is returned.
    """
    x_e = np.asarray(x_e, dtype=float)
    u_e = np.asarray(u_e, dtype=float)
    hx = np.maximum(1e-6, 1e-7 * np.abs(x_e))
    hu = np.maximum(1e-6, 1e-7 * np.abs(u_e))
    fx = lambda x: dyn(x, u_e)  # noqa: E731
    fu = lambda u: dyn(x_e, u)  # noqa: E731
    A, B = _central_jacobian(fx, x_e, hx), _central_jacobian(fu, u_e, hu)
    A2, B2 = _central_jacobian(fx, x_e, hx / 2), _central_jacobian(fu, u_e, hu / 2)
    err = 0.0
    for J, J2 in ((A, A2), (B, B2)):
        big = np.abs(J2) > 1e-6 * max(np.abs(J2).max(), np.finfo(float).tiny)
        if np.any(big):
            err = max(err, float(np.max(np.abs(J[big] - J2[big]) / np.abs(J2[big]))))
    if err > rel_tol:
        raise FloatingPointError(f"linearization not converged under step halving (rel err {err:.2e})")
    return Linearization(LtiSystem(A2, B2), err)


def linearize(model, x_e=None, u_e=None) -> LtiSystem:
    """Linearize a plant model with ``f(x)`` and ``g(x)`` about an operating point.

    Defaults to the origin of the model's coordinates, where ``f(0) = 0``.
    """
    n, m = model.n, model.m
    x_e = np.zeros(n) if x_e is None else np.asarray(x_e, dtype=float)
    u_e = np.zeros(m) if u_e is None else np.asarray(u_e, dtype=float)
    return linearize_fn(lambda x, u: model.f(x) + model.g(x) @ u, x_e, u_e).sys


def transmission_zeros(A, B, C, D=None) -> np.ndarray:
    """Finite generalized eigenvalues of the Rosenbrock system matrix pencil."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    C = np.atleast_2d(C)
    n, m, p = A.shape[0], B.shape[1], C.shape[0]
    D = np.zeros((p, m)) if D is None else np.atleast_2d(D)
    M = np.block([[A, B], [-C, -D]])
    N = np.zeros_like(M)
    N[:n, :n] = np.eye(n)
    z = sla.eigvals(M, N)
    z = z[np.isfinite(z)]
    return z[np.abs(z) < 1e12]


# --- closed-loop maps ----------------------------------------------------------


@dataclass(frozen=True)
class ServoLoop:
    """Integrator-augmented LTI plant under state feedback ``u = -K x``.

    ``integrators[k]`` is the state index of the integrator of output
    ``outputs[k]``. The reference enters the integrators as ``z' = y - r``
    and, with ``error_feedback`` (the default), also through the output gain
    so that it acts on ``e = r - y``.
    """

    sys: LtiSystem
    K: np.ndarray
    outputs: tuple
    integrators: tuple
    error_feedback: bool = True


@dataclass(frozen=True)
class ClosedLoopMaps:
    omega: np.ndarray
    T_diy: np.ndarray  # (len(omega), p, m)
    T_ry: np.ndarray  # (len(omega), p, p)
    T_diy_siso: np.ndarray  # (len(omega), p)
    T_ry_siso: np.ndarray  # (len(omega), p)


def _freqresp(A, B, C, omega) -> np.ndarray:
    n = A.shape[0]
    out = np.empty((omega.size, C.shape[0], B.shape[1]), dtype=complex)
    I = np.eye(n)
    for k, w in enumerate(omega):
        out[k] = C @ np.linalg.solve(1j * w * I - A, B)
    return out


def _servo_matrices(loop: ServoLoop):
    A, B = loop.sys.A, loop.sys.B
    K = np.atleast_2d(loop.K)
    A_cl = A - B @ K
    n = A.shape[0]
    C = np.zeros((len(loop.outputs), n))
    Br = np.zeros((n, len(loop.outputs)))
    for k, (y, z) in enumerate(zip(loop.outputs, loop.integrators)):
        C[k, y] = 1.0
        Br[z, k] = -1.0
        if loop.error_feedback:
            Br[:, k] += B @ K[:, y]
    return A_cl, B, Br, C


def closed_loop_maps(loop: ServoLoop, freqs, loops=None) -> ClosedLoopMaps:
    """Frequency responses of ``T_{d_i y}`` and ``T_{r y}``.

    The MIMO maps come from the full coupled closed loop. The per-loop SISO
    approximations use only the diagonal block of each loop: ``loops`` is a
    list of ``(state_idx, control_idx, output_pos)`` triples, where
    ``output_pos`` indexes ``loop.outputs``.
    """
    omega = np.asarray(freqs, dtype=float)
    A_cl, B, Br, C = _servo_matrices(loop)
    stable, abscissa = is_hurwitz(A_cl)
    if not stable:
        raise NotStabilizingError(f"closed loop not internally stable (abscissa {abscissa:.4g})")
    T_diy = _freqresp(A_cl, B, C, omega)
    T_ry = _freqresp(A_cl, Br, C, omega)
    p = C.shape[0]
    diy_siso = np.full((omega.size, p), np.nan, dtype=complex)
    ry_siso = np.full((omega.size, p), np.nan, dtype=complex)
    for states, controls, k in loops or ():
        states = np.asarray(states)
        Aj = A_cl[np.ix_(states, states)]
        Bj = B[np.ix_(states, np.asarray(controls))]
        Cj = C[np.ix_([k], states)]
        Brj = Br[np.ix_(states, [k])]
        if not is_hurwitz(Aj)[0]:
            raise NotStabilizingError("diagonal loop block is not stable")
        diy_siso[:, k] = _freqresp(Aj, Bj, Cj, omega)[:, 0, 0]
        ry_siso[:, k] = _freqresp(Aj, Brj, Cj, omega)[:, 0, 0]
    return ClosedLoopMaps(omega, T_diy, T_ry, diy_siso, ry_siso)


def output_feedback_maps(P_jw, K_jw) -> tuple[np.ndarray, np.ndarray]:
    """Unity negative feedback maps from frequency-response samples.

    With ``u = K e + d_i``, ``e = r - y`` and ``y = P u``:
    ``T_{d_i y} = (I + P K)^{-1} P`` and ``T_{r y} = (I + P K)^{-1} P K``.
    """
    P_jw = np.asarray(P_jw, dtype=complex)
    K_jw = np.asarray(K_jw, dtype=complex)
    if P_jw.ndim == 2:
        P_jw, K_jw = P_jw[None], K_jw[None]
    p = P_jw.shape[1]
    L = P_jw @ K_jw
    S_o = np.linalg.inv(np.eye(p) + L)
    return S_o @ P_jw, S_o @ L


def mag_db(h) -> np.ndarray:
    return 20.0 * np.log10(np.maximum(np.abs(h), 1e-300))
