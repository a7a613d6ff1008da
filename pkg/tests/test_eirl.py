import numpy as np
import pytest

from deirl import eirl
from deirl import hsv
from deirl import lincontrol as lc
from deirl.simcore import ExcitationMode, LinearPlant, SignalSpec, simulate
from deirl.symops import tri_dim, vec_of_mat

from conftest import random_stabilizable

PROBE = SignalSpec.from_periods([(1.0, 2.3, "sin"), (0.7, 5.1, "cos"), (0.5, 1.1, "sin"), (0.3, 7.7, "sin")])
TIGHT = dict(dt=0.005, rtol=1e-10, atol=1e-12)


def _loop(name, states, controls, K0, T_s=0.5, l=12, i_star=5, probes=None):
    n, m = len(states), len(controls)
    return eirl.LoopSpec(name, states, controls, np.eye(n), np.eye(m), K0, T_s=T_s, l=l, i_star=i_star,
                         d=probes or tuple(PROBE.scaled(1.0 + 0.3 * k) for k in range(m)))


def _relative_gap(loop_result):
    return max(
        float(np.linalg.norm(K - Kk, 2)) / (1.0 + float(np.linalg.norm(Kk, 2)))
        for K, Kk in zip(loop_result.K, loop_result.kleinman_K)
    )


def test_update_gain_scalar():
    assert eirl.update_gain(np.array([[2.0]]), np.array([[1.0]]), np.array([[1.0]]))[0, 0] == 2.0


def test_update_gain_matches_kleinman_improvement(rng):
    A, B, K0 = random_stabilizable(rng, 3, 2)
    prob = lc.LqrProblem(lc.LtiSystem(A, B), np.eye(3), np.diag([1.0, 2.0]))
    P = lc.solve_ale(A - B @ K0, prob.Q + K0.T @ prob.R @ K0)
    np.testing.assert_allclose(eirl.update_gain(P, prob.R, B), prob.gain(P), rtol=1e-14)


def test_closed_loop_weight_maps_bilinear_forms(rng):
    from deirl.symops import bilinear

    B = rng.normal(size=(3, 1))
    K = rng.normal(size=(1, 3))
    x = rng.normal(size=3)
    np.testing.assert_allclose(eirl.closed_loop_weight(B, K) @ bilinear(x, x), bilinear(x, B @ K @ x), atol=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_eirl_equals_kleinman_on_lti(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    m = int(rng.integers(1, 3))
    A, B, K0 = random_stabilizable(rng, n, m)
    loop = _loop("all", range(n), range(m), K0, l=max(12, tri_dim(n) + 4))
    lr = eirl.run_eirl(LinearPlant(A, B), loop, "si", x0=rng.normal(size=n), **TIGHT)
    res = lr.loops[0]
    assert res.error is None
    assert _relative_gap(res) <= 1e-6
    # recovered values follow the monotone Kleinman ordering
    for P, P_next in zip(res.P, res.P[1:]):
        assert np.linalg.eigvalsh(P - P_next).min() >= -1e-6 * max(1.0, np.abs(P).max())


def test_decoupled_loops_match_independent_kleinman(rng):
    A1, B1, K1 = random_stabilizable(rng, 2, 1)
    A2, B2, K2 = random_stabilizable(rng, 3, 1)
    A = np.zeros((5, 5))
    A[:2, :2], A[2:, 2:] = A1, A2
    B = np.zeros((5, 2))
    B[:2, :1], B[2:, 1:] = B1, B2
    loops = [
        _loop("a", (0, 1), (0,), K1, probes=(PROBE,)),
        _loop("b", (2, 3, 4), (1,), K2, l=15, probes=(PROBE.scaled(0.8),)),
    ]
    lr = eirl.run_deirl(LinearPlant(A, B), loops, "si", x0=rng.normal(size=5), **TIGHT)
    for res, (Aj, Bj, Kj) in zip(lr.loops, ((A1, B1, K1), (A2, B2, K2))):
        ref = lc.kleinman(lc.LqrProblem(lc.LtiSystem(Aj, Bj), np.eye(Aj.shape[0]), np.eye(1)), Kj, 5).K_seq
        for K, Kk in zip(res.K, ref):
            assert np.linalg.norm(K - Kk, 2) <= 1e-6 * (1.0 + np.linalg.norm(Kk, 2))


def test_rank_lemma_on_random_datasets(rng):
    checked = 0
    for _ in range(100):
        n = int(rng.integers(1, 4))
        A, B, K0 = random_stabilizable(rng, n, 1)
        periods = rng.uniform(0.5, 8.0, size=3)
        probe = SignalSpec.from_periods([(rng.uniform(0.2, 1.0), T, "sin") for T in periods])
        loop = _loop("all", range(n), (0,), K0, T_s=0.4, l=tri_dim(n) + 3, probes=(probe,))
        traj = simulate(LinearPlant(A, B), eirl.collection_law(LinearPlant(A, B), [loop], "si"),
                        rng.normal(size=n), loop.horizon, 0.01)
        data = eirl.collect_loop_data(traj, loop, eirl.DriftResidualModel(LinearPlant(A, B)))
        p = tri_dim(n)
        if np.linalg.matrix_rank(data.I_xx) < p:
            continue
        checked += 1
        prob = lc.LqrProblem(lc.LtiSystem(A, B), loop.Q, loop.R)
        for K in lc.kleinman(prob, K0, 4).K_seq:
            reg = eirl.build_regression(data, loop, K, B)
            assert np.linalg.matrix_rank(reg.Theta) == p
    assert checked >= 90


def test_regression_solution_is_unique(rng):
    A, B, K0 = random_stabilizable(rng, 3, 1)
    loop = _loop("all", range(3), (0,), K0)
    lr = eirl.run_eirl(LinearPlant(A, B), loop, "si", x0=rng.normal(size=3), **TIGHT)
    traj = lr.trajectory
    data = eirl.collect_loop_data(traj, loop, eirl.DriftResidualModel(LinearPlant(A, B)))
    reg = eirl.build_regression(data, loop, K0, B)
    sol = eirl.solve_regression(reg)
    P_true = lc.solve_ale(A - B @ K0, loop.Q + K0.T @ loop.R @ K0)
    np.testing.assert_allclose(sol.P, P_true, rtol=1e-6)
    for _ in range(20):
        E = rng.normal(size=(3, 3))
        P_wrong = P_true + 0.01 * (E + E.T)
        # the wrong P's Lyapunov residual shifts the right-hand side away from the data
        wrong_res = np.linalg.norm(reg.Theta @ vec_of_mat(P_wrong) - reg.Xi)
        assert wrong_res > sol.residual


def test_rank_deficient_without_excitation():
    A = np.array([[-1.0, 0.0], [0.0, -2.0]])
    B = np.array([[1.0], [1.0]])
    loop = eirl.LoopSpec("all", (0, 1), (0,), np.eye(2), np.eye(1), np.zeros((1, 2)), T_s=0.5, l=6, i_star=2)
    lr = eirl.run_eirl(LinearPlant(A, B), loop, "si", x0=np.zeros(2), dt=0.01)
    assert lr.loops[0].error is not None and "rank deficient" in lr.loops[0].error


def test_loop_failure_is_isolated(rng):
    A = np.diag([-1.0, -2.0, -3.0])
    B = np.eye(3)[:, :2]
    B[2, 1] = 1.0
    good = _loop("good", (0,), (0,), np.zeros((1, 1)), l=6, probes=(PROBE,))
    quiet = eirl.LoopSpec("quiet", (1, 2), (1,), np.eye(2), np.eye(1), np.zeros((1, 2)), T_s=0.5, l=6, i_star=2)
    lr = eirl.run_deirl(LinearPlant(A, B), [good, quiet], "si", x0=np.zeros(3), dt=0.01)
    assert lr.loop("good").error is None
    assert lr.loop("quiet").error is not None


def test_loop_spec_validation():
    with pytest.raises(ValueError, match="n\\(n\\+1\\)/2"):
        eirl.LoopSpec("x", (0, 1), (0,), np.eye(2), np.eye(1), np.zeros((1, 2)), T_s=1, l=2, i_star=1)
    with pytest.raises(ValueError, match="K0"):
        eirl.LoopSpec("x", (0, 1), (0,), np.eye(2), np.eye(1), np.zeros((1, 3)), T_s=1, l=5, i_star=1)
    with pytest.raises(ValueError):
        eirl.check_partition([
            eirl.LoopSpec("a", (0,), (0,), np.eye(1), np.eye(1), np.zeros((1, 1)), T_s=1, l=2, i_star=1),
            eirl.LoopSpec("b", (0,), (1,), np.eye(1), np.eye(1), np.zeros((1, 1)), T_s=1, l=2, i_star=1),
        ], 2, 2)


def test_non_stabilizing_initial_gain_refused():
    loop = eirl.LoopSpec("all", (0,), (0,), np.eye(1), np.eye(1), np.zeros((1, 1)), T_s=1, l=3, i_star=1)
    with pytest.raises(lc.NotStabilizingError):
        eirl.run_eirl(LinearPlant([[1.0]], [[1.0]]), loop, "si", dt=0.01)


def test_dEIRL_needs_two_loops():
    loop = eirl.LoopSpec("all", (0,), (0,), np.eye(1), np.eye(1), np.ones((1, 1)), T_s=1, l=3, i_star=1)
    with pytest.raises(ValueError):
        eirl.run_deirl(LinearPlant([[0.0]], [[1.0]]), [loop], "si")


def test_drift_residual_vanishes_at_trim():
    model = hsv.augmented(hsv.HsvPlant())
    drift = eirl.DriftResidualModel(model)
    np.testing.assert_allclose(drift.w(np.zeros(model.n), range(model.n)), 0.0, atol=1e-12)
    x = np.array([0.0, 0.01, 0.0, 0.1, 0.1, 0.05, 0.0])
    # residual is second order in the deviation
    small = drift.w(1e-2 * x, range(model.n))
    big = drift.w(x, range(model.n))
    assert np.linalg.norm(small) < 1e-3 * np.linalg.norm(big)


def test_estimated_model_residual_anchored_at_perturbed_trim():
    plant = hsv.HsvPlant(hsv.HsvParams(nu=0.75))
    shadow, lin = hsv.estimated_model(plant)
    drift = eirl.DriftResidualModel(shadow, lin)
    np.testing.assert_allclose(drift.w(np.zeros(7), range(7)), 0.0, atol=1e-12)
    nominal = lc.linearize(hsv.augmented(hsv.HsvPlant()))
    np.testing.assert_allclose(drift.A, nominal.A)


def test_learning_csv_export(tmp_path, rng):
    A, B, K0 = random_stabilizable(rng, 2, 1)
    lr = eirl.run_eirl(LinearPlant(A, B), _loop("all", (0, 1), (0,), K0, i_star=3), "si",
                       x0=np.ones(2), dt=0.01)
    (path,) = lr.to_csv(tmp_path, prefix="demo", extra={"config_hash": "h"})
    lines = path.read_text().splitlines()
    assert lines[0] == "config_hash,iteration,kappa,K0,K1,gain_error,vP0,vP1,vP2"
    assert len(lines) == 4 and all(line.startswith("h,") for line in lines[1:])


def test_hsv_mi_and_si_share_fixed_point(eval1_result):
    final = {}
    for method, loop, it, k, v, _ in eval1_result.tables["gains"]:
        if method in ("si-deirl", "mi-deirl") and it == 5:
            final[(method, loop, k)] = v
    keys = [key for key in final if key[0] == "mi-deirl"]
    assert keys
    for _, loop, k in keys:
        assert abs(final[("mi-deirl", loop, k)] - final[("si-deirl", loop, k)]) <= 1e-3


def test_hsv_kappa_finite_and_at_least_one(eval1_result):
    kappas = [row[3] for row in eval1_result.tables["conditioning"]]
    assert kappas and all(np.isfinite(k) and k >= 1.0 for k in kappas)


def test_hsv_runs_use_excitation_modes(hsv_cfg):
    law = eirl.collection_law(hsv.augmented(hsv.HsvPlant()), hsv_cfg.loops, ExcitationMode.MI)
    assert law.integrator_idx == (0, 2) and law.output_idx == (1, 3)
    np.testing.assert_allclose(law.K, [[0.2582, 4.3570, 0, 0, 0, 0, 0], [0, 0, 10.0, 26.3299, 1.6501, 1.0124, 0]])
