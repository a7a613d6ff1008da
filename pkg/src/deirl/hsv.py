"""Winged-cone hypersonic vehicle, longitudinal axis.

Physical quantities are in ft, slug, s and radians. The control design works
in scaled deviation coordinates about trim (airspeed and altitude in kft,
angles in degrees); :class:`HsvPlant` provides that frame.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize

from . import lincontrol as lc
from .simcore import AugmentedPlant, PlantModel, augment_integrators

DEG = np.pi / 180.0

# state order
V, GAMMA, THETA, Q, H = range(5)
STATE_NAMES = ("V", "gamma", "theta", "q", "h")
CONTROL_NAMES = ("delta_T", "delta_E")

# published cruise trim (angles in degrees)
V_E = 15060.0
H_E = 110000.0
ALPHA_E_DEG = 1.7704
DELTA_T_E = 0.1756
DELTA_E_E_DEG = -0.3947
THRUST_E = 4.4966e4

# design-frame units per physical unit
STATE_SCALE = np.array([1e-3, 1 / DEG, 1 / DEG, 1 / DEG, 1e-3])
CONTROL_SCALE = np.array([1.0, 1 / DEG])


@dataclass(frozen=True)
class HsvParams:
    S: float = 3603.0
    cbar: float = 80.0
    R_E: float = 20_903_500.0
    mu: float = 1.39e16
    m: float | None = None  # None: derived from the published trim
    I_yy: float = 7.0e6
    nu: float = 1.0

    def __post_init__(self):
        for name in ("S", "cbar", "R_E", "mu", "I_yy"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.nu <= 1:
            raise ValueError("nu must lie in (0, 1]")
        if self.m is None:
            object.__setattr__(self, "m", derived_mass(self))
        elif self.m <= 0:
            raise ValueError("m must be positive")


def atmosphere(h):
    """Exponential density (slug/ft^3) and quadratic speed of sound (ft/s)."""
    h = np.asarray(h, dtype=float)
    rho = 0.00238 * np.exp(-h / 24000.0)
    a = 8.99e-9 * h**2 - 9.16e-4 * h + 996.0
    return rho, a


def aero_coefficients(state, ctrl, params: HsvParams) -> dict:
    """Lift, drag, moment and thrust coefficients with their components.

    Broadcasts over leading axes of ``state`` (..., 5) and ``ctrl`` (..., 2).
    """
    state = np.asarray(state, dtype=float)
    ctrl = np.asarray(ctrl, dtype=float)
    Vv, g, th, q, h = np.moveaxis(state, -1, 0)
    dT, dE = np.moveaxis(ctrl, -1, 0)
    _, a = atmosphere(h)
    M = Vv / a
    if np.any(M <= 0):
        raise ValueError("Mach number must be positive")
    al = th - g
    C_L_alpha = params.nu * al * (0.493 + 1.91 / M)
    C_L_dE = (-0.2356 * al**2 - 0.004518 * al - 0.02913) * dE
    C_D = 0.0082 * (171 * al**2 + 1.15 * al + 1) * (0.0012 * M**2 - 0.054 * M + 1)
    C_M_alpha = 1e-4 * (0.06 - np.exp(-M / 3)) * (-6565 * al**2 + 6875 * al + 1)
    C_M_q = (q * params.cbar / (2 * Vv)) * (-0.025 * M + 1.37) * (-6.83 * al**2 + 0.303 * al - 0.23)
    C_M_dE = 0.0292 * (dE - al)
    k = 0.0105 * (1 + 17 / M)
    C_T = np.where(dT < 1, k * 1.15 * dT, k * (1 + 0.15 * dT))
    return {
        "M": M,
        "alpha": al,
        "C_L": C_L_alpha + C_L_dE,
        "C_L_alpha": C_L_alpha,
        "C_L_dE": C_L_dE,
        "C_D": C_D,
        "C_M": C_M_alpha + C_M_q + C_M_dE,
        "C_M_alpha": C_M_alpha,
        "C_M_q": C_M_q,
        "C_M_dE": C_M_dE,
        "k": k,
        "C_T": C_T,
    }


def forces(state, ctrl, params: HsvParams) -> dict:
    """Lift, drag, thrust (lb) and pitching moment (ft lb)."""
    c = aero_coefficients(state, ctrl, params)
    state = np.asarray(state, dtype=float)
    rho, _ = atmosphere(state[..., H])
    qS = 0.5 * rho * state[..., V] ** 2 * params.S
    return {"L": qS * c["C_L"], "D": qS * c["C_D"], "T": qS * c["C_T"], "Mp": qS * params.cbar * c["C_M"], **c}


def dynamics(state, ctrl, params: HsvParams) -> np.ndarray:
    """Time derivative of ``[V, gamma, theta, q, h]``."""
    state = np.asarray(state, dtype=float)
    Vv, g, q, h = state[..., V], state[..., GAMMA], state[..., Q], state[..., H]
    if np.any(Vv <= 0):
        raise ValueError("airspeed must be positive")
    F = forces(state, ctrl, params)
    al = F["alpha"]
    r = h + params.R_E
    m = params.m
    Vdot = (F["T"] * np.cos(al) - F["D"]) / m - params.mu * np.sin(g) / r**2
    gdot = (F["L"] + F["T"] * np.sin(al)) / (m * Vv) - (params.mu - Vv**2 * r) * np.cos(g) / (Vv * r**2)
    qdot = F["Mp"] / params.I_yy
    hdot = Vv * np.sin(g)
    return np.stack([Vdot, gdot, q * np.ones_like(Vdot), qdot, hdot], axis=-1)


def input_matrix(state, params: HsvParams) -> np.ndarray:
    """Columns d(dynamics)/d(delta_T, delta_E) on the throttle branch delta_T < 1.

    The model is affine in the controls there, so
    ``dynamics(x, u) == dynamics(x, 0) + input_matrix(x) @ u``.
    """
    state = np.asarray(state, dtype=float)
    Vv, g, th, h = state[..., V], state[..., GAMMA], state[..., THETA], state[..., H]
    rho, a = atmosphere(h)
    M = Vv / a
    al = th - g
    qS = 0.5 * rho * Vv**2 * params.S
    m = params.m
    dT_coef = qS * 0.0105 * (1 + 17 / M) * 1.15
    dE_lift = qS * (-0.2356 * al**2 - 0.004518 * al - 0.02913)
    zero = np.zeros_like(Vv)
    col_T = np.stack([dT_coef * np.cos(al) / m, dT_coef * np.sin(al) / (m * Vv), zero, zero, zero], axis=-1)
    col_E = np.stack([zero, dE_lift / (m * Vv), zero, qS * params.cbar * 0.0292 / params.I_yy, zero], axis=-1)
    return np.stack([col_T, col_E], axis=-1)


def derived_mass(params: HsvParams) -> float:
    """Mass that balances the flightpath-angle equation at the published trim.

    ``m = (L_e + T_e sin(alpha_e)) r_e^2 / (mu - V_e^2 r_e)`` with level flight,
    evaluated with the nominal lift coefficient whatever ``params.nu`` is.
    """
    x_e, u_e = published_trim()
    # the balance is a property of the nominal vehicle; forces never read the mass
    F = forces(x_e, u_e, replace(params, nu=1.0, m=1.0))
    r = H_E + params.R_E
    return float((F["L"] + F["T"] * np.sin(F["alpha"])) * r**2 / (params.mu - V_E**2 * r))


def published_trim() -> tuple[np.ndarray, np.ndarray]:
    x_e = np.array([V_E, 0.0, ALPHA_E_DEG * DEG, 0.0, H_E])
    u_e = np.array([DELTA_T_E, DELTA_E_E_DEG * DEG])
    return x_e, u_e


class TrimError(RuntimeError):
    pass


def trim(params: HsvParams, seed=None, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Level-flight trim at (V_e, h_e): solve (V', gamma', q') = 0 over (alpha, delta_T, delta_E).

    Uses MINPACK's hybrid Powell method on the residual expressed in
    ft/s^2 and deg/s, seeded from the published nominal trim unless ``seed``
    is given. Raises :class:`TrimError` if the max residual exceeds ``tol``.
    """
    x0, u0 = published_trim() if seed is None else seed
    p0 = np.array([x0[THETA] - x0[GAMMA], u0[0], u0[1]])
    scale = np.array([1.0, 1.0 / DEG, 1.0 / DEG])

    def residual(p):
        x = np.array([V_E, 0.0, p[0], 0.0, H_E])
        return dynamics(x, p[1:], params)[[V, GAMMA, Q]]

    sol = optimize.root(lambda p: residual(p) * scale, p0, method="hybr", tol=1e-14)
    p = sol.x
    r = residual(p)
    if np.max(np.abs(r)) > tol:
        raise TrimError(f"trim did not converge (residual {np.max(np.abs(r)):.3e})")
    return np.array([V_E, 0.0, p[0], 0.0, H_E]), np.array([p[1], p[2]])


class HsvPlant(PlantModel):
    """HSV in scaled deviation coordinates about its own trim.

    ``x = STATE_SCALE * (x_phys - x_e)``, ``u = CONTROL_SCALE * (u_phys - u_e)``.
    ``f(0) == 0`` up to the trim tolerance.

    Parameters
    ----------
    params : HsvParams, optional
    trim_point : tuple of ndarray, optional
        ``(x_e, u_e)``; computed by :func:`trim` when omitted.
    affine_thrust : bool
        When True (default) :meth:`rhs` evaluates ``f(x) + g(x) u``, i.e. the
        ``delta_T < 1`` thrust law is used for every throttle setting. The
        learning methods assume a control-affine plant, and the study
        excitation drives the throttle past 1. Set False for the exact
        piecewise thrust coefficient.
    """

    state_names = STATE_NAMES
    control_names = CONTROL_NAMES
    n = 5
    m = 2

    def __init__(self, params: HsvParams | None = None, trim_point=None,
                 affine_thrust: bool = True):
        self.params = params or HsvParams()
        self.affine_thrust = bool(affine_thrust)
        if trim_point is None:
            nominal = replace(self.params, nu=1.0)
            seed = trim(nominal) if self.params.nu != 1.0 else None
            trim_point = trim(self.params, seed=seed)
        self.x_e, self.u_e = (np.asarray(v, dtype=float) for v in trim_point)

    def to_physical(self, x):
        return self.x_e + np.asarray(x, dtype=float) / STATE_SCALE

    def from_physical(self, x_phys):
        return (np.asarray(x_phys, dtype=float) - self.x_e) * STATE_SCALE

    def control_to_physical(self, u):
        return self.u_e + np.asarray(u, dtype=float) / CONTROL_SCALE

    def f(self, x):
        xp = self.to_physical(x)
        return STATE_SCALE * (dynamics(xp, np.zeros(2), self.params) + input_matrix(xp, self.params) @ self.u_e)

    def g(self, x):
        xp = self.to_physical(x)
        return STATE_SCALE[:, None] * input_matrix(xp, self.params) / CONTROL_SCALE

    def rhs(self, x, u):
        if self.affine_thrust:
            return self.input_times_control(x, u) + self.f(x)
        return STATE_SCALE * dynamics(self.to_physical(x), self.control_to_physical(u), self.params)


def partition():
    """Loop index sets in the integrator-augmented HSV ordering.

    Augmented state is ``[z_V, V, z_gamma, gamma, theta, q, h]``; altitude is
    simulated but not fed back.
    """
    return (
        {"name": "velocity", "states": (0, 1), "controls": (0,), "outputs": (1,)},
        {"name": "fpa", "states": (2, 3, 4, 5), "controls": (1,), "outputs": (3,)},
    )


def augmented(plant: HsvPlant) -> AugmentedPlant:
    """Integrator bank on (V, gamma): state ``[z_V, V, z_gamma, gamma, theta, q, h]``."""
    return augment_integrators(plant, (V, GAMMA))


def estimated_model(plant: HsvPlant, nominal: HsvParams | None = None):
    """Nominal-model estimate of a (possibly perturbed) plant for learning.

    Returns ``(shadow, lin)``. ``shadow`` is the augmented nominal model
    evaluated at the same physical state and control as ``plant`` (same trim
    offsets and scaling). ``lin`` pairs the drift matrix of the nominal
    model linearized about its own trim with the input matrix of ``shadow``
    at the operating point, which only depends on the measured state.
    """
    nominal = nominal or replace(plant.params, nu=1.0)
    shadow = augmented(HsvPlant(nominal, trim_point=(plant.x_e, plant.u_e), affine_thrust=plant.affine_thrust))
    A_nom = lc.linearize(augmented(HsvPlant(nominal, affine_thrust=plant.affine_thrust))).A
    return shadow, lc.LtiSystem(A_nom, lc.linearize(shadow).B)


def step_test_plant(params: HsvParams, nominal: HsvParams | None = None) -> AugmentedPlant:
    """Perturbed plant released from the nominal trim, controls measured from nominal trim values."""
    nominal = nominal or replace(params, nu=1.0)
    return augmented(HsvPlant(params, trim_point=trim(nominal)))


# published gains (augmented ordering, design units)
K0_1 = np.array([[0.2582, 4.3570]])
K0_2 = np.array([[10.0000, 26.3299, 1.6501, 1.0124]])
Q_1 = np.eye(2)
R_1 = np.array([[15.0]])
Q_2 = np.diag([1.0, 1.0, 0.0, 0.0])
R_2 = np.array([[0.01]])
