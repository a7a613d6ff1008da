"""The thirteen acceptance criteria, one test each, at their stated tolerances.

Each test records a single PASS/FAIL line that is repeated in the pytest
terminal summary under "acceptance criteria".
"""

from pathlib import Path

import numpy as np

from deirl import eirl
from deirl import evalharness as eh
from deirl import hsv
from deirl import lincontrol as lc
from deirl.simcore import LinearPlant, SignalSpec, simulate
from deirl.symops import bilinear, build_compression, tri_dim, vec_of_mat

from conftest import random_stabilizable

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _checks(result, prefix):
    return [c for c in result.checks if c.name.startswith(prefix) and c.acceptance]


def _summarize(checks):
    return "; ".join(f"{c.name.split('/', 1)[-1]}: {c.detail}" for c in checks)


def test_01_operator_identities(acceptance):
    rng = np.random.default_rng(1)
    worst = 0.0
    norm_dev = 0.0
    for n in range(1, 7):
        c = build_compression(n)
        norm_dev = max(norm_dev, abs(np.linalg.norm(c.W, 2) - 1.0))
        for _ in range(1000):
            x, y = rng.normal(size=n), rng.normal(size=n)
            M = rng.normal(size=(n, n))
            P = M + M.T
            b = bilinear(x, y)
            rel = lambda a, e: float(np.max(np.abs(a - e)) / max(np.max(np.abs(e)), 1e-300))  # noqa: E731
            worst = max(
                worst,
                rel(c.W @ np.kron(x, y), b),
                rel(c.W_rinv @ bilinear(x, x), np.kron(x, x)),
                abs(b @ vec_of_mat(P) - x @ P @ y) / (np.abs(x) @ np.abs(P) @ np.abs(y)),
            )
    ok = worst <= 1e-12 and norm_dev <= 1e-12
    acceptance(1, "operator identities", ok, f"worst relative error {worst:.2e}, | ||W||_2 - 1 | <= {norm_dev:.1e}")
    assert ok


def test_02_kleinman_oracle(acceptance):
    rng = np.random.default_rng(2)
    all_hurwitz, worst_mono, worst_res = True, np.inf, 0.0
    for _ in range(100):
        n = int(rng.integers(1, 6))
        m = int(rng.integers(1, n + 1))
        A, B, K0 = random_stabilizable(rng, n, m)
        Q = np.diag(rng.uniform(0.5, 2.0, n))
        R = np.diag(rng.uniform(0.5, 2.0, m))
        prob = lc.LqrProblem(lc.LtiSystem(A, B), Q, R)
        sol = lc.solve_care(prob, K0)
        trace = lc.kleinman(prob, K0, sol.iterations)
        all_hurwitz &= all(trace.hurwitz_flags)
        seq = trace.P_seq + [sol.P]
        for P, P_next in zip(seq, seq[1:]):
            worst_mono = min(worst_mono, float(np.linalg.eigvalsh(P - P_next).min()))
        worst_res = max(worst_res, sol.residual)
    ok = all_hurwitz and worst_mono >= -1e-8 and worst_res <= 1e-8
    acceptance(2, "Kleinman oracle", ok,
               f"all iterates Hurwitz: {all_hurwitz}, min eig(P_i - P_i+1) {worst_mono:.2e}, "
               f"max CARE residual {worst_res:.2e}")
    assert ok


def test_03_eirl_kleinman_equivalence(acceptance):
    rng = np.random.default_rng(3)
    probe = SignalSpec.from_periods([(1.0, 2.3, "sin"), (0.7, 5.1, "cos"), (0.5, 1.1, "sin"), (0.3, 7.7, "sin")])
    worst = 0.0
    for _ in range(5):
        n, m = int(rng.integers(2, 5)), int(rng.integers(1, 3))
        A, B, K0 = random_stabilizable(rng, n, m)
        loop = eirl.LoopSpec("all", range(n), range(m), np.eye(n), np.eye(m), K0, T_s=0.5,
                             l=tri_dim(n) + 6, i_star=5, d=tuple(probe.scaled(1 + 0.3 * k) for k in range(m)))
        res = eirl.run_eirl(LinearPlant(A, B), loop, "si", x0=rng.normal(size=n),
                            dt=0.005, rtol=1e-10, atol=1e-12).loops[0]
        assert res.error is None, res.error
        worst = max(worst, max(np.linalg.norm(K - Kk, 2) / (1 + np.linalg.norm(Kk, 2))
                               for K, Kk in zip(res.K, res.kleinman_K)))
    hsv_lin = eh.cmd_eval1(eh.load_config(CONFIGS / "hsv_linear.ini"))
    checks = _checks(hsv_lin, "equivalence/")
    ok = worst <= 1e-6 and len(checks) == 6 and all(c.passed for c in checks)
    acceptance(3, "EIRL/Kleinman equivalence", ok,
               f"random LTI worst {worst:.2e}; linearized HSV {len(checks)} runs all within 1e-6: "
               f"{all(c.passed for c in checks)}")
    assert ok


def test_04_rank_lemma(acceptance, eval1_result, eval2_result):
    rng = np.random.default_rng(4)
    random_ok, checked = True, 0
    for _ in range(100):
        n = int(rng.integers(1, 4))
        A, B, K0 = random_stabilizable(rng, n, 1)
        probe = SignalSpec.from_periods([(rng.uniform(0.2, 1.0), T, "sin") for T in rng.uniform(0.5, 8.0, 3)])
        loop = eirl.LoopSpec("all", range(n), (0,), np.eye(n), np.eye(1), K0, T_s=0.4, l=tri_dim(n) + 3,
                             i_star=4, d=(probe,))
        plant = LinearPlant(A, B)
        traj = simulate(plant, eirl.collection_law(plant, [loop], "si"), rng.normal(size=n), loop.horizon, 0.01)
        data = eirl.collect_loop_data(traj, loop, eirl.DriftResidualModel(plant))
        if np.linalg.matrix_rank(data.I_xx) < tri_dim(n):
            continue
        checked += 1
        prob = lc.LqrProblem(lc.LtiSystem(A, B), loop.Q, loop.R)
        for K in lc.kleinman(prob, K0, loop.i_star).K_seq:
            random_ok &= np.linalg.matrix_rank(eirl.build_regression(data, loop, K, B).Theta) == tri_dim(n)
    hsv_checks = _checks(eval1_result, "rank/") + _checks(eval2_result, "rank/")
    hsv_ok = bool(hsv_checks) and all(c.passed for c in hsv_checks)
    ok = random_ok and checked >= 90 and hsv_ok
    acceptance(4, "rank lemma", ok,
               f"{checked}/100 random datasets with full-rank state integrals, Theta full rank: {random_ok}; "
               f"{len(hsv_checks)} HSV loop runs full rank: {hsv_ok}")
    assert ok


def test_05_hsv_trim(acceptance):
    p = hsv.HsvParams()
    x_e, u_e = hsv.trim(p)
    res = float(np.max(np.abs(hsv.dynamics(x_e, u_e, p)[[hsv.V, hsv.GAMMA, hsv.Q]])))
    d_alpha = abs(x_e[hsv.THETA] / hsv.DEG - 1.7704)
    d_T = abs(u_e[0] - 0.1756)
    d_E = abs(u_e[1] / hsv.DEG + 0.3947)
    T = float(hsv.forces(x_e, u_e, p)["T"])
    ok = res < 1e-9 and d_alpha <= 0.02 and d_T <= 1e-3 and d_E <= 0.02 and abs(T / 4.4966e4 - 1) <= 5e-3
    acceptance(5, "HSV trim", ok,
               f"residual {res:.1e}, |d alpha| {d_alpha:.1e} deg, |d delta_T| {d_T:.1e}, "
               f"|d delta_E| {d_E:.1e} deg, T_e {T:.1f} lb, m {p.m:.2f} slug")
    assert ok


def test_06_hsv_linearization(acceptance):
    sys = lc.linearize(hsv.HsvPlant())
    ev = np.linalg.eigvals(sys.A)
    real = np.sort(ev[np.abs(ev.imag) < 1e-9].real)
    slow = max(float(np.min(np.abs(ev - s))) for s in (-1e-5 + 0.0276j, -1e-5 - 0.0276j, 0.0005))
    C = np.zeros((2, 5))
    C[0, hsv.V] = C[1, hsv.GAMMA] = 1.0
    z = lc.transmission_zeros(sys.A, sys.B, C)
    z = np.sort(z[np.abs(z) > 1e-6].real)
    rel = lambda a, b: abs(a / b - 1)  # noqa: E731
    ok = (rel(real[0], -0.8291) <= 0.02 and rel(real[-1], 0.7165) <= 0.02 and slow <= 5e-4
          and rel(z[0], -8.4620) <= 0.02 and rel(z[-1], 8.3938) <= 0.02)
    acceptance(6, "HSV linearization", ok,
               f"poles {real[0]:.4f}, {real[-1]:.4f}; slow-mode distance {slow:.1e}; zeros {z[0]:.4f}, {z[-1]:.4f} "
               f"(I_yy = 7e6, no fit)")
    assert ok


def test_07_optimal_gains(acceptance):
    checks = []
    for nu in (1.0, 0.9, 0.75):
        checks += _checks(eh.cmd_oracle(eh.load_config(nu=nu)), "reference-gain/")
    ok = len(checks) == 7 and all(c.passed for c in checks)
    acceptance(7, "optimal gains", ok, _summarize(checks))
    assert ok


def test_08_eval1_convergence(acceptance, eval1_result):
    checks = _checks(eval1_result, "convergence/")
    ok = len(checks) == 3 and all(c.passed for c in checks)
    acceptance(8, "Eval 1 convergence", ok, _summarize(checks))
    assert ok


def test_09_eval1_conditioning(acceptance, eval1_result):
    checks = _checks(eval1_result, "conditioning/")
    ok = len(checks) == 5 and all(c.passed for c in checks)
    acceptance(9, "Eval 1 conditioning", ok, _summarize(checks))
    assert ok


def test_10_eval2_recovery(acceptance, eval2_result):
    checks = _checks(eval2_result, "recovery/")
    ok = len(checks) == 4 and all(c.passed for c in checks)
    acceptance(10, "Eval 2 recovery", ok, _summarize(checks))
    assert ok


def test_11_eval2_closed_loop(acceptance, eval2_result):
    checks = _checks(eval2_result, "steps/")
    ok = len(checks) == 5 and all(c.passed for c in checks)
    failed = [c for c in checks if not c.passed]
    acceptance(11, "Eval 2 closed loop", ok, _summarize(failed or checks))
    assert ok, _summarize(checks)


def test_12_frequency_domain(acceptance, freqresp_result):
    checks = _checks(freqresp_result, "freqresp/fpa/")
    ok = len(checks) == 2 and all(c.passed for c in checks)
    acceptance(12, "frequency-domain claims", ok, _summarize(checks))
    assert ok


def test_13_determinism(acceptance, tmp_path, hsv_cfg, eval1_result, eval2_result, freqresp_result):
    first = {
        "eval1": eval1_result,
        "eval2": eval2_result,
        "freqresp": freqresp_result,
        "oracle": eh.cmd_oracle(hsv_cfg),
        "simulate": eh.cmd_simulate(hsv_cfg),
    }
    mismatched = []
    total = 0
    for cmd, res in first.items():
        eh.write_result(res, tmp_path / "a" / cmd, hsv_cfg.digest)
        eh.write_result(eh.run_command(cmd, hsv_cfg), tmp_path / "b" / cmd, hsv_cfg.digest)
        for path in sorted((tmp_path / "a" / cmd).rglob("*.csv")):
            total += 1
            other = tmp_path / "b" / cmd / path.relative_to(tmp_path / "a" / cmd)
            if not other.is_file() or other.read_bytes() != path.read_bytes():
                mismatched.append(str(path.relative_to(tmp_path / "a")))
    ok = total > 0 and not mismatched
    acceptance(13, "determinism", ok, f"{total} CSV files compared, {len(mismatched)} differ {mismatched[:3]}")
    assert ok
