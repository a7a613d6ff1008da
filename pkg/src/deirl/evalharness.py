"""Study configuration, evaluation drivers, CSV persistence and the command-line interface.

Configuration is an INI file read with :mod:`configparser`. For the
hypersonic-vehicle plant every key has a default (see :data:`HSV_DEFAULTS`),
so an empty file reproduces the reference study. Signals are written as
``amplitude period_s sin|cos`` terms separated by ``;`` plus a ``*_bias`` key.
HSV channels use the design units of :class:`deirl.hsv.HsvPlant`: airspeed in
kft/s and angles in degrees.

Every table row carries the hash of the fully resolved configuration, and
no randomness is used anywhere, so re-running a command reproduces the same
bytes.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import eirl
from . import hsv
from . import lincontrol as lc
from .simcore import (
    DivergenceError,
    ExcitationMode,
    FeedbackLaw,
    LinearPlant,
    SignalSpec,
    StepMetricError,
    simulate,
    step_metrics,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SCHEMAS = {
    "conditioning": ("method", "loop", "iteration", "kappa"),
    "gains": ("method", "loop", "iteration", "entry_index", "value", "error"),
    "weights": ("method", "loop", "iteration", "entry_index", "value"),
    "stepmetrics": ("nu", "loop", "controller", "rise", "settle", "overshoot"),
    "freqresp": ("map", "loop", "omega", "mag_db"),
    "recovery": ("nu", "loop", "error_initial", "error_final", "reduction_pct"),
    "matrices": ("loop", "matrix", "row", "col", "value"),
    "checks": ("check", "acceptance", "passed", "detail"),
}

HSV_DEFAULTS = """
[study]
plant = hsv
nu = 1.0
mode = mi
dt = 0.0025
rtol = 1e-8
atol = 1e-10

[hsv]
# blank mass: derived from the trim balance
mass =
I_yy = 7e6
affine_thrust = yes

[loop velocity]
states = 0 1
controls = 0
outputs = 1
integrators = 0
Q = 1 0; 0 1
R = 15
K0 = 0.2582 4.3570
T_s = 6
l = 15
i_star = 5
# throttle probing noise
d = 0.1 25 sin; 0.1 250 sin
d_bias = 0.2
# airspeed reference, kft/s
r = 0.010 10 cos; 0.010 25 sin; 0.050 200 sin
r_bias = 0

[loop fpa]
states = 2 3 4 5
controls = 1
outputs = 3
integrators = 2
Q = 1 0 0 0; 0 1 0 0; 0 0 0 0; 0 0 0 0
R = 0.01
K0 = 10.0000 26.3299 1.6501 1.0124
T_s = 2
l = 25
i_star = 5
# elevator probing noise, deg
d = 10 6 sin; 5 50 cos; 2.5 25 sin
d_bias = 0
# flightpath-angle reference, deg
r = 0.02 3 cos; 0.1 6 sin; 0.25 15 sin
r_bias = 0

[eirl]
T_s = 5
l = 25
i_star = 5

[irl]
T_s = 0.15
l = 25
i_star = 5
# off-trim release: +1 kft/s airspeed, +2 deg flightpath angle
x0 = 0 1.0 0 2.0 0 0 0

[eval2]
nu = 0.9 0.75

[steps]
dt = 0.01
velocity = 0.1
velocity_horizon = 150
fpa = 1.0
fpa_horizon = 30

[freqresp]
omega_min = 1e-3
omega_max = 1e2
points = 501
gains = initial

[simulate]
t_final = 100
gains = initial
"""

GENERIC_DEFAULTS = """
[study]
mode = mi
nu = 1.0
dt = 0.0025
rtol = 1e-8
atol = 1e-10

[eval2]
nu =

[steps]
dt = 0.01

[freqresp]
omega_min = 1e-3
omega_max = 1e2
points = 501
gains = initial

[simulate]
t_final = 100
gains = initial
"""

# Reference optimal gains of the HSV study, design units.
REFERENCE_LOOP_GAINS = {
    1.0: {"velocity": [0.2582, 4.3577], "fpa": [10.0, 26.3393, 1.6514, 0.9921]},
    0.9: {"velocity": [0.2582, 4.3580], "fpa": [10.0, 27.0327, 1.5685, 0.9671]},
    0.75: {"velocity": [0.2582, 4.3586], "fpa": [10.0, 28.2496, 1.4303, 0.9238]},
}
REFERENCE_CENTRAL_GAIN = [
    [0.2581, 4.3622, 0.0074, 0.0814, 0.0000, 0.0001],
    [-0.2865, -1.1120, 9.9959, 26.3120, 1.6512, 0.9921],
]


class ConfigError(ValueError):
    pass


# --- parsing helpers -----------------------------------------------------------


def _floats(text: str) -> list:
    return [float(v) for v in text.replace(",", " ").split()]


def _indices(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _matrix(text: str) -> np.ndarray:
    rows = [_floats(r) for r in text.split(";") if r.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ConfigError(f"malformed matrix {text!r}")
    return np.array(rows, dtype=float)


def parse_signal(terms: str, bias: float = 0.0) -> SignalSpec:
    """``"a T sin; a T cos"`` with periods in seconds, plus a constant bias."""
    triples = []
    for term in terms.split(";"):
        parts = term.replace(",", " ").split()
        if not parts:
            continue
        if len(parts) != 3:
            raise ConfigError(f"signal term {term!r} is not 'amplitude period sin|cos'")
        a, T, kind = float(parts[0]), float(parts[1]), parts[2].lower()
        if T <= 0:
            raise ConfigError(f"signal period must be positive in {term!r}")
        triples.append((a, T, kind))
    return SignalSpec.from_periods(triples, bias)


def _channel_signals(sec, prefix: str, count: int) -> tuple:
    """``prefix`` for a single channel, else ``prefix1 .. prefixN``."""
    keys = [prefix] if count == 1 else [f"{prefix}{k + 1}" for k in range(count)]
    out = []
    for key in keys:
        if key not in sec and count == 1 and f"{prefix}1" in sec:
            key = f"{prefix}1"
        out.append(parse_signal(sec.get(key, ""), sec.getfloat(f"{key}_bias", 0.0)))
    return tuple(out)


# --- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class StepConfig:
    dt: float
    amplitude: dict  # loop name -> step size (design units)
    horizon: dict  # loop name -> seconds


@dataclass(frozen=True)
class StudyConfig:
    """Resolved study settings; :attr:`text` is the canonical form that is hashed."""

    plant: str
    nu: float
    mode: ExcitationMode
    dt: float
    rtol: float
    atol: float
    loops: tuple
    eirl_loop: eirl.LoopSpec | None
    irl_loop: eirl.LoopSpec | None
    irl_x0: np.ndarray | None
    eval2_nu: tuple
    steps: StepConfig
    freq: dict
    sim: dict
    hsv: dict = field(default_factory=dict)
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    text: str = ""

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]

    def hsv_params(self, nu: float | None = None) -> hsv.HsvParams:
        return hsv.HsvParams(
            m=self.hsv.get("mass"), I_yy=self.hsv.get("I_yy", 7e6), nu=self.nu if nu is None else nu
        )


def _canonical(cp: configparser.ConfigParser) -> str:
    lines = []
    for name in sorted(cp.sections()):
        lines.append(f"[{name}]")
        for key in sorted(cp[name]):
            lines.append(f"{key} = {' '.join(cp[name][key].split())}")
    return "\n".join(lines) + "\n"


def _loop_from_section(name: str, sec) -> eirl.LoopSpec:
    try:
        states = _indices(sec["states"])
        controls = _indices(sec["controls"])
        outputs = _indices(sec.get("outputs", ""))
        integrators = _indices(sec.get("integrators", ""))
        return eirl.LoopSpec(
            name=name,
            states=states,
            controls=controls,
            Q=_matrix(sec["Q"]),
            R=_matrix(sec["R"]),
            K0=_matrix(sec["K0"]),
            T_s=sec.getfloat("T_s"),
            l=sec.getint("l"),
            i_star=sec.getint("i_star", 5),
            d=_channel_signals(sec, "d", len(controls)),
            r=_channel_signals(sec, "r", len(outputs)) if outputs else (),
            outputs=outputs,
            integrators=integrators,
        )
    except KeyError as exc:
        raise ConfigError(f"loop {name}: missing key {exc}") from None


def _central_loop(loops, sec, name: str, with_signals: bool = True) -> eirl.LoopSpec:
    """Single loop over the union of the decentralized loops, block-diagonal cost and gain."""
    states = tuple(sorted(i for lp in loops for i in lp.states))
    controls = tuple(sorted(c for lp in loops for c in lp.controls))
    pos_x = {s: k for k, s in enumerate(states)}
    pos_u = {c: k for k, c in enumerate(controls)}
    Q = np.zeros((len(states),) * 2)
    R = np.zeros((len(controls),) * 2)
    K0 = np.zeros((len(controls), len(states)))
    d = [SignalSpec()] * len(controls)
    r, outputs, integrators = [], [], []
    for lp in loops:
        ix = [pos_x[s] for s in lp.states]
        iu = [pos_u[c] for c in lp.controls]
        Q[np.ix_(ix, ix)] = lp.Q
        R[np.ix_(iu, iu)] = lp.R
        K0[np.ix_(iu, ix)] = lp.K0
        for k, sig in zip(iu, lp.d):
            d[k] = sig
        r.extend(lp.r)
        outputs.extend(lp.outputs)
        integrators.extend(lp.integrators)
    if "Q" in sec:
        Q = _matrix(sec["Q"])
    if "R" in sec:
        R = _matrix(sec["R"])
    if "K0" in sec:
        K0 = _matrix(sec["K0"])
    return eirl.LoopSpec(
        name=name,
        states=states,
        controls=controls,
        Q=Q,
        R=R,
        K0=K0,
        T_s=sec.getfloat("T_s"),
        l=sec.getint("l"),
        i_star=sec.getint("i_star", 5),
        d=tuple(d) if with_signals else (),
        r=tuple(r) if with_signals else (),
        outputs=tuple(outputs) if with_signals else (),
        integrators=tuple(integrators) if with_signals else (),
    )


def load_config(path=None, nu: float | None = None, mode: str | None = None) -> StudyConfig:
    """Read a study file (``None`` gives the HSV reference study) and apply CLI overrides."""
    user = configparser.ConfigParser(inline_comment_prefixes=("#", ";;"))
    user.optionxform = str
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} not found")
        user.read(path)
    plant = user.get("study", "plant", fallback="hsv").strip().lower()
    if plant not in ("hsv", "hsv-linear", "lti"):
        raise ConfigError(f"unknown plant {plant!r} (hsv, hsv-linear or lti)")

    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";;"))
    cp.optionxform = str
    cp.read_string(HSV_DEFAULTS if plant.startswith("hsv") else GENERIC_DEFAULTS)
    if path is not None:
        cp.read(path)
    if nu is not None:
        cp["study"]["nu"] = repr(float(nu))
        cp["eval2"]["nu"] = repr(float(nu))
    if mode is not None:
        cp["study"]["mode"] = mode
    text = _canonical(cp)

    st = cp["study"]
    loops = tuple(
        _loop_from_section(name.split(None, 1)[1], cp[name]) for name in cp.sections() if name.startswith("loop ")
    )
    if not loops:
        raise ConfigError("no [loop <name>] sections")
    eirl_loop = _central_loop(loops, cp["eirl"], "all") if "eirl" in cp else None
    irl_loop, irl_x0 = None, None
    if "irl" in cp:
        irl_loop = _central_loop(loops, cp["irl"], "all", with_signals=False)
        irl_x0 = np.array(_floats(cp["irl"]["x0"])) if "x0" in cp["irl"] else None

    A = B = None
    if plant == "lti":
        pl = cp["plant"] if "plant" in cp else {}
        if "file" in pl:
            data = np.load(Path(path).parent / pl["file"] if path else pl["file"])
            A, B = np.asarray(data["A"], dtype=float), np.asarray(data["B"], dtype=float)
        else:
            try:
                A, B = _matrix(pl["A"]), _matrix(pl["B"])
            except KeyError:
                raise ConfigError("lti plant needs [plant] A and B (or file)") from None

    hsv_opts = {}
    if "hsv" in cp:
        h = cp["hsv"]
        hsv_opts = {
            "mass": float(h["mass"]) if h.get("mass", "").strip() else None,
            "I_yy": h.getfloat("I_yy", 7e6),
            "affine_thrust": h.getboolean("affine_thrust", True),
        }

    sp = cp["steps"]
    steps = StepConfig(
        dt=sp.getfloat("dt", 0.01),
        amplitude={lp.name: sp.getfloat(lp.name) for lp in loops if lp.name in sp},
        horizon={lp.name: sp.getfloat(f"{lp.name}_horizon", 100.0) for lp in loops},
    )
    fr = cp["freqresp"]
    freq = {
        "omega_min": fr.getfloat("omega_min"),
        "omega_max": fr.getfloat("omega_max"),
        "points": fr.getint("points"),
        "gains": fr.get("gains", "initial").strip(),
    }
    sm = cp["simulate"]
    sim = {
        "t_final": sm.getfloat("t_final"),
        "gains": sm.get("gains", "initial").strip(),
        "x0": np.array(_floats(sm["x0"])) if sm.get("x0", "").strip() else None,
    }
    return StudyConfig(
        plant=plant,
        nu=st.getfloat("nu", 1.0),
        mode=ExcitationMode(st.get("mode", "mi").strip().lower()),
        dt=st.getfloat("dt"),
        rtol=st.getfloat("rtol"),
        atol=st.getfloat("atol"),
        loops=loops,
        eirl_loop=eirl_loop,
        irl_loop=irl_loop,
        irl_x0=irl_x0,
        eval2_nu=tuple(_floats(cp["eval2"].get("nu", ""))),
        steps=steps,
        freq=freq,
        sim=sim,
        hsv=hsv_opts,
        A=A,
        B=B,
        text=text,
    )


# --- plants ---------------------------------------------------------------------


def hsv_plant(cfg: StudyConfig, nu: float | None = None) -> hsv.HsvPlant:
    return hsv.HsvPlant(cfg.hsv_params(nu), affine_thrust=cfg.hsv.get("affine_thrust", True))


def build_model(cfg: StudyConfig, nu: float | None = None):
    """Plant model in the coordinates the loops index into."""
    if cfg.plant == "hsv":
        return hsv.augmented(hsv_plant(cfg, nu))
    if cfg.plant == "hsv-linear":
        lin = lc.linearize(hsv.augmented(hsv_plant(cfg, nu)))
        return LinearPlant(lin.A, lin.B)
    return LinearPlant(cfg.A, cfg.B)


# --- results --------------------------------------------------------------------


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str
    acceptance: bool = True


@dataclass
class StudyResult:
    command: str
    tables: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    files: list = field(default_factory=list)  # (relative path, writer(path, extra))
    notes: list = field(default_factory=list)

    def add(self, table: str, row):
        self.tables.setdefault(table, []).append(tuple(row))

    def check(self, name: str, passed: bool, detail: str, acceptance: bool = True):
        self.checks.append(Check(name, bool(passed), detail, acceptance))

    @property
    def failed(self) -> bool:
        return any(c.acceptance and not c.passed for c in self.checks)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_result(result: StudyResult, out, digest: str) -> list:
    """Write every table as ``<name>.csv`` plus a manifest; returns written paths."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tables = dict(result.tables)
    tables["checks"] = [(c.name, c.acceptance, c.passed, c.detail) for c in result.checks]
    written = []
    manifest = []
    for name in sorted(tables):
        path = out / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("config_hash",) + SCHEMAS[name])
            for row in tables[name]:
                w.writerow([digest] + [_fmt(v) for v in row])
        manifest.append((name, SCHEMA_VERSION, len(tables[name])))
        written.append(path)
    for rel, writer in result.files:
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        writer(path, {"config_hash": digest})
        written.append(path)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("config_hash", "command", "table", "schema_version", "rows"))
        for name, version, rows in manifest:
            w.writerow((digest, result.command, name, version, rows))
    written.append(out / "manifest.csv")
    return written


def _learning_tables(res: StudyResult, method: str, lr: eirl.LearningResult):
    for loop in lr.loops:
        if loop.error:
            res.check(f"{method}/{loop.name} ran", False, loop.error, acceptance=False)
        errors = loop.gain_errors()
        for i, kappa in enumerate(loop.kappa):
            res.add("conditioning", (method, loop.name, i, float(kappa)))
        for i, K in enumerate(loop.K):
            err = errors[i] if errors else float("nan")
            for k, v in enumerate(np.ravel(K)):
                res.add("gains", (method, loop.name, i, k, float(v), err))
        for i, vP in enumerate(loop.vP):
            for k, v in enumerate(np.ravel(vP)):
                res.add("weights", (method, loop.name, i, k, float(v)))
    res.files.append((f"learning/{method}.csv", lambda path, extra, lr=lr, method=method: _learning_csv(lr, path, extra)))


def _learning_csv(lr: eirl.LearningResult, path: Path, extra: dict):
    lr.to_csv(path.parent, prefix=path.stem, extra=extra)


def _rank_check(res: StudyResult, method: str, lr: eirl.LearningResult):
    """Regression matrix keeps full column rank whenever the state integral matrix does."""
    for loop in lr.loops:
        if loop.rank_I_xx is None or not loop.rank_Theta:
            continue
        p = np.size(loop.vP[0]) if loop.vP else None
        if p is None or loop.rank_I_xx < p:
            continue
        ok = all(r == p for r in loop.rank_Theta)
        res.check(f"rank/{method}/{loop.name}", ok, f"rank(Theta) = {loop.rank_Theta}, columns {p}")


def _max_kappa(lr: eirl.LearningResult | None, loop: str) -> float:
    if lr is None:
        return float("nan")
    try:
        kap = lr.loop(loop).kappa
    except KeyError:
        return float("nan")
    return float(max(kap)) if kap else float("nan")


def _terminal_error(lr: eirl.LearningResult | None, loop: str) -> float:
    if lr is None:
        return float("nan")
    try:
        errs = lr.loop(loop).gain_errors()
    except KeyError:
        return float("nan")
    return errs[-1] if errs else float("nan")


def _within(value: float, target: float, factor: float) -> bool:
    return bool(np.isfinite(value) and target / factor <= value <= target * factor)


# --- studies ----------------------------------------------------------------------


def _modes(cfg: StudyConfig, mode_override: str | None):
    """Both excitation modes when every loop declares references, else SI only."""
    if mode_override:
        return (ExcitationMode(mode_override),)
    if all(lp.r for lp in cfg.loops):
        return (ExcitationMode.SI, ExcitationMode.MI)
    return (ExcitationMode.SI,)


def cmd_eval1(cfg: StudyConfig, mode: str | None = None) -> StudyResult:
    """Conditioning and convergence study on the configured plant."""
    res = StudyResult("eval1")
    model = build_model(cfg)
    kw = dict(dt=cfg.dt, rtol=cfg.rtol, atol=cfg.atol)
    runs = {}

    def attempt(method, fn):
        try:
            runs[method] = fn()
        except (ValueError, np.linalg.LinAlgError, DivergenceError, FloatingPointError) as exc:
            log.warning("%s failed: %s", method, exc)
            res.check(f"{method} ran", False, str(exc), acceptance=False)
            return
        _learning_tables(res, method, runs[method])
        _rank_check(res, method, runs[method])

    if cfg.irl_loop is not None and cfg.irl_x0 is not None:
        attempt("irl", lambda: eirl.run_irl_baseline(model, cfg.irl_loop, cfg.irl_x0, **kw))
    for m in _modes(cfg, mode):
        if cfg.eirl_loop is not None:
            attempt(f"{m.value}-eirl", lambda m=m: eirl.run_eirl(model, cfg.eirl_loop, m, **kw))
        if len(cfg.loops) >= 2:
            attempt(f"{m.value}-deirl", lambda m=m: eirl.run_deirl(model, cfg.loops, m, **kw))

    if cfg.plant in ("hsv-linear", "lti"):
        _equivalence_checks(res, runs)
    if cfg.plant == "hsv" and cfg.nu == 1.0 and mode is None:
        _eval1_hsv_checks(res, runs)
    return res


def _equivalence_checks(res: StudyResult, runs: dict):
    for method, lr in runs.items():
        if method == "irl":
            continue
        for loop in lr.loops:
            if not loop.kleinman_K:
                continue
            worst = max(
                float(np.linalg.norm(K - Kk, 2)) / (1.0 + float(np.linalg.norm(Kk, 2)))
                for K, Kk in zip(loop.K, loop.kleinman_K)
            )
            res.check(
                f"equivalence/{method}/{loop.name}",
                worst <= 1e-6,
                f"max ||K_i - K_i(Kleinman)|| / (1 + ||K_i||) = {worst:.3e}",
            )


def _eval1_hsv_checks(res: StudyResult, runs: dict):
    de, si, mi, irl = runs.get("mi-deirl"), runs.get("si-eirl"), runs.get("mi-eirl"), runs.get("irl")
    e1, e2, es = _terminal_error(de, "velocity"), _terminal_error(de, "fpa"), _terminal_error(si, "all")
    res.check("convergence/deirl-velocity", e1 <= 1e-4, f"||K_i*,1 - K1*|| = {e1:.3e} (limit 1e-4)")
    res.check("convergence/deirl-fpa", e2 <= 1e-3, f"||K_i*,2 - K2*|| = {e2:.3e} (limit 1e-3)")
    res.check("convergence/si-eirl", es <= 1e-2, f"||K_i* - K*|| = {es:.3e} (limit 1e-2)")

    k1, k2 = _max_kappa(de, "velocity"), _max_kappa(de, "fpa")
    km, ks, ki = _max_kappa(mi, "all"), _max_kappa(si, "all"), _max_kappa(irl, "all")
    irl_min = float(min(irl.loops[0].kappa)) if irl is not None and irl.loops[0].kappa else float("nan")
    ordered = bool(np.all(np.isfinite([k1, k2, km, ks, ki])) and k1 < k2 < km < ks < ki)
    res.check(
        "conditioning/ordering",
        ordered,
        f"deirl-v {k1:.3g} < deirl-fpa {k2:.3g} < eirl {km:.3g} < si-eirl {ks:.3g} < irl {ki:.3g}",
    )
    res.check("conditioning/deirl-velocity", _within(k1, 123.0, 3.0), f"max kappa {k1:.4g} (123 x/÷ 3)")
    res.check("conditioning/deirl-fpa", _within(k2, 4.8e3, 3.0), f"max kappa {k2:.4g} (4.8e3 x/÷ 3)")
    res.check("conditioning/si-eirl", _within(ks, 7.5e6, 10.0), f"max kappa {ks:.4g} (7.5e6 x/÷ 10)")
    res.check("conditioning/irl", irl_min >= 1e10, f"min kappa {irl_min:.3g} (at least 1e10)")


RECOVERY_LIMITS = {0.9: {"velocity": 95.0, "fpa": 85.0}, 0.75: {"velocity": 90.0, "fpa": 75.0}}


def step_gain(cfg: StudyConfig, model, gains) -> np.ndarray:
    return eirl.block_gain(cfg.loops, model.m, model.n, gains)


def run_steps(cfg: StudyConfig, model, K) -> dict:
    """One step per loop with the others held at zero; returns ``loop -> StepMetrics | str``."""
    out = {}
    refs = [lp for lp in cfg.loops if lp.outputs]
    for lp in refs:
        amp = cfg.steps.amplitude.get(lp.name)
        if amp is None:
            continue
        r = tuple(SignalSpec((), amp if other is lp else 0.0) for other in refs)
        law = FeedbackLaw(
            K,
            r=r,
            mode=ExcitationMode.MI,
            integrator_idx=tuple(o.integrators[0] for o in refs),
            output_idx=tuple(o.outputs[0] for o in refs),
            error_feedback=False,
        )
        try:
            traj = simulate(model, law, np.zeros(model.n), cfg.steps.horizon[lp.name], cfg.steps.dt,
                            rtol=cfg.rtol, atol=cfg.atol)
            out[lp.name] = step_metrics(traj.t, traj.x[:, lp.outputs[0]], amp)
        except (StepMetricError, DivergenceError) as exc:
            out[lp.name] = str(exc)
    return out


def cmd_eval2(cfg: StudyConfig, nus=None, mode: str | None = None) -> StudyResult:
    """Optimality recovery on perturbed plants using the nominal model in the regression."""
    if cfg.plant != "hsv":
        raise ConfigError("eval2 needs the hsv plant")
    res = StudyResult("eval2")
    nus = tuple(nus) if nus else cfg.eval2_nu
    if not nus:
        raise ConfigError("no perturbation values configured")
    m = ExcitationMode(mode) if mode else cfg.mode
    for nu in nus:
        plant = hsv_plant(cfg, nu)
        model = hsv.augmented(plant)
        shadow, lin = hsv.estimated_model(plant)
        method = f"{m.value}-deirl-nu{nu:g}"
        try:
            lr = eirl.run_deirl(
                model, cfg.loops, m, drift=eirl.DriftResidualModel(shadow, lin),
                dt=cfg.dt, rtol=cfg.rtol, atol=cfg.atol,
            )
        except (ValueError, np.linalg.LinAlgError, DivergenceError) as exc:
            res.check(f"{method} ran", False, str(exc), acceptance=False)
            continue
        _learning_tables(res, method, lr)
        _rank_check(res, method, lr)
        reductions = {}
        for loop in lr.loops:
            errs = loop.gain_errors()
            if not errs:
                continue
            red = 100.0 * (1.0 - errs[-1] / errs[0]) if errs[0] > 0 else float("nan")
            reductions[loop.name] = red
            res.add("recovery", (nu, loop.name, errs[0], errs[-1], red))
            limit = RECOVERY_LIMITS.get(nu, {}).get(loop.name)
            if limit is not None:
                res.check(f"recovery/nu{nu:g}/{loop.name}", red >= limit, f"reduction {red:.2f}% (at least {limit}%)")

        test_model = hsv.step_test_plant(cfg.hsv_params(nu))
        controllers = {
            "nominal": [lp.K0 for lp in cfg.loops],
            "deirl": [lr.loop(lp.name).K_final for lp in cfg.loops],
            "optimal": [lr.loop(lp.name).K_star for lp in cfg.loops],
        }
        metrics = {}
        for name, gains in controllers.items():
            if any(g is None for g in gains):
                continue
            metrics[name] = run_steps(cfg, test_model, step_gain(cfg, test_model, gains))
            for loop, sm in metrics[name].items():
                if isinstance(sm, str):
                    res.add("stepmetrics", (nu, loop, name, float("nan"), float("nan"), float("nan")))
                    res.notes.append(f"nu={nu:g} {loop} {name}: {sm}")
                else:
                    res.add("stepmetrics", (nu, loop, name, sm.rise_time_90, sm.settle_time_1pct, sm.overshoot_pct))
        if nu == 0.75:
            _eval2_step_checks(res, metrics)
    return res


def _eval2_step_checks(res: StudyResult, metrics: dict):
    get = lambda c: metrics.get(c, {}).get("fpa")  # noqa: E731
    nom, de, opt = get("nominal"), get("deirl"), get("optimal")
    if not all(hasattr(s, "rise_time_90") for s in (nom, de, opt)):
        res.check("steps/nu0.75/fpa", False, "a step response failed to settle")
        return
    res.check(
        "steps/nu0.75/nominal-settle",
        abs(nom.settle_time_1pct - 16.75) <= 0.15 * 16.75,
        f"t_s {nom.settle_time_1pct:.2f} s (16.75 +/- 15%)",
    )
    res.check(
        "steps/nu0.75/nominal-overshoot",
        abs(nom.overshoot_pct - 12.41) <= 2.0,
        f"M_p {nom.overshoot_pct:.2f}% (12.41 +/- 2)",
    )
    res.check(
        "steps/nu0.75/deirl-settle",
        abs(de.settle_time_1pct - 10.28) <= 0.15 * 10.28,
        f"t_s {de.settle_time_1pct:.2f} s (10.28 +/- 15%)",
    )
    res.check(
        "steps/nu0.75/deirl-overshoot",
        abs(de.overshoot_pct - 7.98) <= 1.5,
        f"M_p {de.overshoot_pct:.2f}% (7.98 +/- 1.5)",
    )
    closer = all(
        abs(getattr(de, a) - getattr(opt, a)) < abs(getattr(nom, a) - getattr(opt, a))
        for a in ("rise_time_90", "settle_time_1pct", "overshoot_pct")
    )
    res.check(
        "steps/nu0.75/deirl-closer-to-optimal",
        closer,
        "nominal {:.3f}/{:.3f}/{:.3f}, deirl {:.3f}/{:.3f}/{:.3f}, optimal {:.3f}/{:.3f}/{:.3f}".format(
            nom.rise_time_90, nom.settle_time_1pct, nom.overshoot_pct,
            de.rise_time_90, de.settle_time_1pct, de.overshoot_pct,
            opt.rise_time_90, opt.settle_time_1pct, opt.overshoot_pct,
        ),
    )


def _feedback_model(cfg: StudyConfig):
    """Linearization restricted to the fed-back states, with loop indices remapped."""
    model = build_model(cfg)
    lin = lc.linearize(model)
    states = tuple(sorted(i for lp in cfg.loops for i in lp.states))
    controls = tuple(sorted(c for lp in cfg.loops for c in lp.controls))
    pos = {s: k for k, s in enumerate(states)}
    posu = {c: k for k, c in enumerate(controls)}
    return lin.block(states, controls), pos, posu


def optimal_loop_gains(cfg: StudyConfig, sys_fb=None, pos=None, posu=None) -> list:
    if sys_fb is None:
        sys_fb, pos, posu = _feedback_model(cfg)
    out = []
    for lp in cfg.loops:
        blk = sys_fb.block([pos[s] for s in lp.states], [posu[c] for c in lp.controls])
        out.append(lc.solve_care(lc.LqrProblem(blk, lp.Q, lp.R), lp.K0).K)
    return out


def cmd_freqresp(cfg: StudyConfig) -> StudyResult:
    """Closed-loop input-disturbance and reference maps, exact MIMO and per-loop SISO."""
    res = StudyResult("freqresp")
    sys_fb, pos, posu = _feedback_model(cfg)
    if cfg.freq["gains"] == "optimal":
        gains = optimal_loop_gains(cfg, sys_fb, pos, posu)
    elif cfg.freq["gains"] == "initial":
        gains = [lp.K0 for lp in cfg.loops]
    else:
        raise ConfigError("freqresp gains must be 'initial' or 'optimal'")
    K = np.zeros((sys_fb.m, sys_fb.n))
    for lp, Kj in zip(cfg.loops, gains):
        K[np.ix_([posu[c] for c in lp.controls], [pos[s] for s in lp.states])] = Kj
    refs = [lp for lp in cfg.loops if lp.outputs]
    outputs = tuple(pos[lp.outputs[0]] for lp in refs)
    integrators = tuple(pos[lp.integrators[0]] for lp in refs)
    siso = [
        ([pos[s] for s in lp.states], [posu[lp.controls[0]]], k) for k, lp in enumerate(refs)
    ]
    omega = np.logspace(np.log10(cfg.freq["omega_min"]), np.log10(cfg.freq["omega_max"]), cfg.freq["points"])
    maps = lc.closed_loop_maps(lc.ServoLoop(sys_fb, K, outputs, integrators), omega, siso)
    owner = {}
    for lp in cfg.loops:
        for c in lp.controls:
            owner[posu[c]] = lp.name
    diy_siso, ry_siso = lc.mag_db(maps.T_diy_siso), lc.mag_db(maps.T_ry_siso)
    diy, ry = lc.mag_db(maps.T_diy), lc.mag_db(maps.T_ry)
    for k, lp in enumerate(refs):
        for i, w in enumerate(omega):
            res.add("freqresp", ("T_diy", lp.name, w, diy_siso[i, k]))
        for i, w in enumerate(omega):
            res.add("freqresp", ("T_ry", lp.name, w, ry_siso[i, k]))
    for k, lp in enumerate(refs):
        for c in range(sys_fb.m):
            for i, w in enumerate(omega):
                res.add("freqresp", ("T_diy_mimo", f"{lp.name}/{owner[c]}", w, diy[i, k, c]))
        for kk, other in enumerate(refs):
            for i, w in enumerate(omega):
                res.add("freqresp", ("T_ry_mimo", f"{lp.name}/{other.name}", w, ry[i, k, kk]))

    for k, lp in enumerate(refs):
        low = float(ry_siso[0, k])
        res.check(f"freqresp/{lp.name}/T_ry-low", abs(low) <= 0.1, f"|T_ry| at {omega[0]:.0e} rad/s = {low:.4f} dB",
                  acceptance=False)
    if cfg.plant.startswith("hsv") and "fpa" in [lp.name for lp in refs]:
        k = [lp.name for lp in refs].index("fpa")
        d = diy_siso[:, k]
        i_pk = int(np.argmax(d))
        res.check(
            "freqresp/fpa/P-sensitivity-peak",
            d[i_pk] <= -25.0 and 0.5 <= omega[i_pk] <= 2.0,
            f"peak {d[i_pk]:.3f} dB at {omega[i_pk]:.3f} rad/s (at most -25 dB within 0.5..2 rad/s)",
        )
        outside = (omega < 0.1) | (omega > 2.5)
        res.check(
            "freqresp/fpa/P-sensitivity-rolloff",
            float(d[outside].max()) <= -40.0,
            f"max outside 0.1..2.5 rad/s {float(d[outside].max()):.3f} dB (at most -40 dB)",
        )
    return res


def cmd_oracle(cfg: StudyConfig) -> StudyResult:
    """Kleinman iteration and Riccati residuals for every loop and the centralized design."""
    res = StudyResult("oracle")
    sys_fb, pos, posu = _feedback_model(cfg)
    problems = []
    for lp in cfg.loops:
        blk = sys_fb.block([pos[s] for s in lp.states], [posu[c] for c in lp.controls])
        problems.append((lp.name, lc.LqrProblem(blk, lp.Q, lp.R), lp.K0))
    if cfg.eirl_loop is not None:
        el = cfg.eirl_loop
        blk = sys_fb.block([pos[s] for s in el.states], [posu[c] for c in el.controls])
        problems.append((el.name, lc.LqrProblem(blk, el.Q, el.R), el.K0))
    solutions = {}
    for name, prob, K0 in problems:
        try:
            sol = lc.solve_care(prob, K0)
        except lc.NotStabilizingError as exc:
            res.check(f"oracle/{name}", False, str(exc))
            continue
        solutions[name] = sol
        trace = lc.kleinman(prob, K0, sol.iterations)
        for i, K in enumerate(trace.K_seq):
            err = float(np.linalg.norm(K - sol.K, 2))
            for k, v in enumerate(np.ravel(K)):
                res.add("gains", ("kleinman", name, i, k, float(v), err))
        for mat, M in (("K", sol.K), ("P", sol.P)):
            for (i, j), v in np.ndenumerate(np.atleast_2d(M)):
                res.add("matrices", (name, mat, i, j, float(v)))
        res.check(f"care-residual/{name}", sol.residual <= 1e-8, f"relative residual {sol.residual:.3e}")
        res.notes.append(f"{name}: K* = {np.array2string(np.atleast_2d(sol.K), precision=4, suppress_small=True)}")

    ref = REFERENCE_LOOP_GAINS.get(cfg.nu) if cfg.plant == "hsv" else None
    if ref:
        for name, target in ref.items():
            if name in solutions:
                dev = float(np.max(np.abs(np.ravel(solutions[name].K) - target)))
                res.check(f"reference-gain/nu{cfg.nu:g}/{name}", dev <= 1e-2, f"max entry deviation {dev:.2e}")
        if cfg.nu == 1.0 and "all" in solutions:
            dev = float(np.max(np.abs(solutions["all"].K - np.array(REFERENCE_CENTRAL_GAIN))))
            res.check("reference-gain/nu1/central", dev <= 1e-2, f"max entry deviation {dev:.2e}")
    return res


def cmd_simulate(cfg: StudyConfig, mode: str | None = None) -> StudyResult:
    """Closed-loop run under the configured gains and excitation; writes the trajectory."""
    res = StudyResult("simulate")
    model = build_model(cfg)
    m = ExcitationMode(mode) if mode else cfg.mode
    if cfg.sim["gains"] == "optimal":
        gains = optimal_loop_gains(cfg)
    elif cfg.sim["gains"] == "initial":
        gains = [lp.K0 for lp in cfg.loops]
    else:
        raise ConfigError("simulate gains must be 'initial' or 'optimal'")
    law = eirl.collection_law(model, cfg.loops, m)
    law = replace(law, K=eirl.block_gain(cfg.loops, model.m, model.n, gains))
    x0 = cfg.sim["x0"] if cfg.sim["x0"] is not None else np.zeros(model.n)
    try:
        traj = simulate(model, law, x0, cfg.sim["t_final"], cfg.dt, rtol=cfg.rtol, atol=cfg.atol)
    except DivergenceError as exc:
        res.check("simulate/bounded", False, str(exc), acceptance=False)
        return res
    names = list(getattr(model, "state_names", [])) or None
    res.files.append(("trajectory.csv", lambda path, extra: traj.to_csv(path, names, None, extra)))
    res.check("simulate/bounded", True, f"max |x| = {np.abs(traj.x).max():.4g}", acceptance=False)
    return res


# --- CLI ---------------------------------------------------------------------------

COMMANDS = ("eval1", "eval2", "freqresp", "oracle", "simulate")


def run_command(command: str, cfg: StudyConfig, nu: float | None = None, mode: str | None = None) -> StudyResult:
    if command == "eval1":
        return cmd_eval1(cfg, mode)
    if command == "eval2":
        return cmd_eval2(cfg, (nu,) if nu is not None else None, mode)
    if command == "freqresp":
        return cmd_freqresp(cfg)
    if command == "oracle":
        return cmd_oracle(cfg)
    if command == "simulate":
        return cmd_simulate(cfg, mode)
    raise ConfigError(f"unknown command {command!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deirl", description="Decentralized excitable integral RL studies.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, default=None, help="INI study file (default: HSV reference study)")
    p.add_argument("--out", type=Path, default=None, help="output directory (default: results/<command>)")
    p.add_argument("--nu", type=float, default=None, help="lift-coefficient multiplier override")
    p.add_argument("--mode", choices=("si", "mi"), default=None, help="excitation mode override")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, nu=args.nu, mode=args.mode)
        result = run_command(args.command, cfg, nu=args.nu, mode=args.mode)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    out = args.out or Path("results") / args.command
    for path in write_result(result, out, cfg.digest):
        log.info("wrote %s", path)
    for note in result.notes:
        print(note)
    for c in result.checks:
        tag = "acceptance" if c.acceptance else "info"
        print(f"{'PASS' if c.passed else 'FAIL'} [{tag}] {c.name}: {c.detail}")
    print(f"config {cfg.digest}; outputs in {out}")
    return 1 if result.failed else 0


if __name__ == "__main__":
    sys.exit(main())
