import numpy as np
import pytest
from scipy.optimize import brentq

from conftest import random_problem_small
from gentopo.exceptions import InfeasibleVolumeError, InvalidInputError
from gentopo.fea import analyze, element_stiffness
from gentopo.problem import cantilever
from gentopo.simp import (
    SimpConfig,
    SIMPOptimizer,
    compliance_sensitivity,
    filter_sensitivities,
    oc_update,
    refine,
    run_simp,
)


def _fd_sensitivity(problem, x, e, h=1e-5, config=SimpConfig()):
    xp, xm = x.copy(), x.copy()
    xp.flat[e] += h
    xm.flat[e] -= h
    _, cp = analyze(problem, xp, config.penal, method="dense")
    _, cm = analyze(problem, xm, config.penal, method="dense")
    return (cp - cm) / (2 * h)


def test_full_density_sensitivity_is_element_energy(rng):
    p = random_problem_small(rng, 3, 3)
    x = np.ones((3, 3))
    u, _ = analyze(p, x, method="dense")
    dc = compliance_sensitivity(x, u)
    ue = u[p.grid.edof_matrix()]
    expected = -3.0 * (1 - 1e-9) * np.einsum("ij,jk,ik->i", ue, element_stiffness(), ue)
    np.testing.assert_allclose(dc.ravel(order="F"), expected, rtol=1e-12)


def test_sensitivity_nonpositive(rng):
    for _ in range(5):
        p = random_problem_small(rng, 5, 4)
        x = rng.uniform(size=p.grid.shape)
        u, _ = analyze(p, x)
        assert (compliance_sensitivity(x, u) <= 0).all()


@pytest.mark.parametrize("n", [4, 6])
def test_sensitivity_matches_finite_differences(n, rng):
    p = random_problem_small(rng, n, n)
    x = rng.uniform(0.2, 0.9, size=(n, n))
    u, _ = analyze(p, x, method="dense")
    dc = compliance_sensitivity(x, u)
    for e in rng.choice(n * n, size=5, replace=False):
        fd = _fd_sensitivity(p, x, e)
        assert dc.flat[e] == pytest.approx(fd, rel=1e-4)


def test_filter_uniform_input_unchanged(rng):
    x = rng.uniform(0.1, 1, size=(5, 7))
    raw = np.full((5, 7), -2.5)
    # with uniform density the weights normalise exactly
    out = filter_sensitivities(raw, np.full((5, 7), 0.4), 1.5)
    np.testing.assert_allclose(out, raw, atol=1e-12)
    assert filter_sensitivities(raw, x, 2.5).shape == raw.shape


@pytest.mark.parametrize("radius", [0.5, 1.0])
def test_filter_identity_for_small_radius(radius, rng):
    raw = -rng.uniform(size=(4, 4))
    np.testing.assert_allclose(filter_sensitivities(raw, rng.uniform(size=(4, 4)), radius), raw, atol=1e-12)


@pytest.mark.parametrize("radius", [1.5, 2.0, 3.2])
def test_filter_matches_direct_summation(radius, rng):
    ny, nx = 6, 7
    raw = -rng.uniform(size=(ny, nx))
    x = rng.uniform(0.05, 1, size=(ny, nx))
    out = filter_sensitivities(raw, x, radius)
    ref = np.zeros_like(raw)
    for i in range(ny):
        for j in range(nx):
            num = den = 0.0
            for k in range(ny):
                for m in range(nx):
                    w = max(0.0, radius - np.hypot(i - k, j - m))
                    num += w * x[k, m] * raw[k, m]
                    den += w
            ref[i, j] = num / den / max(1e-3, x[i, j])
    np.testing.assert_allclose(out, ref, rtol=1e-12)
    assert (out <= 0).all()


def test_filter_spreads_single_entry():
    raw = np.zeros((5, 5))
    raw[2, 2] = -1.0
    out = filter_sensitivities(raw, np.ones((5, 5)), 1.5)
    assert out[2, 2] < 0 and out[2, 3] < 0 and out[1, 1] < 0
    assert out[0, 0] == 0 and out[2, 4] == 0
    # self-weight 1.5 out of (1.5 + 4*0.5 + 4*(1.5-sqrt2))
    assert out[2, 2] == pytest.approx(-1.5 / (1.5 + 2 + 4 * (1.5 - np.sqrt(2))))


def test_oc_uniform_density_and_sensitivity_unchanged():
    x = np.full((4, 5), 0.3)
    out = oc_update(x, np.full((4, 5), -1.7), SimpConfig(), vf_target=0.3)
    np.testing.assert_allclose(out, x, atol=1e-4)


def test_oc_move_limit_exact(rng):
    x = rng.uniform(0.2, 0.8, size=(6, 6))
    cfg = SimpConfig(move_limit=0.05)
    out = oc_update(x, -rng.uniform(0.01, 10, size=(6, 6)), cfg, vf_target=x.mean())
    assert np.abs(out - x).max() <= 0.05 + 1e-15
    assert out.min() >= 0 and out.max() <= 1
    assert out.mean() == pytest.approx(x.mean(), abs=1e-4)


def test_oc_two_element_bisection_oracle():
    x = np.array([[0.5, 0.5]])
    s = np.array([[-4.0, -1.0]])
    cfg = SimpConfig(move_limit=0.2, bisection_tol=1e-8)
    out = oc_update(x, s, cfg, vf_target=0.5)

    def vol(lam):
        return np.clip(x * np.sqrt(-s / lam), x - 0.2, x + 0.2).mean() - 0.5

    lam = brentq(vol, 1e-6, 1e6, xtol=1e-14)
    expected = np.clip(x * np.sqrt(-s / lam), x - 0.2, x + 0.2)
    np.testing.assert_allclose(out, expected, atol=1e-6)
    assert out[0, 0] > out[0, 1]
    np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], atol=1e-6)


def test_oc_infeasible_volume():
    x = np.full((3, 3), 0.1)
    with pytest.raises(InfeasibleVolumeError):
        oc_update(x, -np.ones((3, 3)), SimpConfig(move_limit=0.1), vf_target=0.8)
    with pytest.raises(InvalidInputError):
        oc_update(x, -np.ones((3, 3)), SimpConfig())


def test_oc_infeasible_volume_bounded_step():
    x = np.array([[0.1, 0.95], [0.5, 0.0]])
    up = oc_update(x, -np.ones((2, 2)), SimpConfig(move_limit=0.1), vf_target=0.8, clip_infeasible=True)
    np.testing.assert_array_equal(up, np.minimum(1.0, x + 0.1))
    down = oc_update(x, -np.ones((2, 2)), SimpConfig(move_limit=0.1), vf_target=0.05, clip_infeasible=True)
    np.testing.assert_array_equal(down, np.maximum(0.0, x - 0.1))


def test_refine_from_far_off_volume(cantilever16):
    # volume 1.0 -> 0.4 needs three full steps at move limit 0.2
    trace = refine(np.ones((16, 16)), cantilever16, 4)
    vols = [1.0]
    x = np.ones((16, 16))
    for n in (1, 2, 3):
        vols.append(refine(x, cantilever16, n).density.mean())
    np.testing.assert_allclose(vols, [1.0, 0.8, 0.6, 0.4], atol=1e-3)
    assert trace.density.mean() == pytest.approx(0.4, abs=1e-3)


def test_simp_cantilever_converges(cantilever16):
    trace = run_simp(cantilever16, SimpConfig(max_iters=60))
    assert trace.converged and trace.changes[-1] < 0.01
    _, c0 = analyze(cantilever16, np.full((16, 16), 0.4))
    assert trace.compliances[0] == pytest.approx(c0)
    assert trace.final_compliance < c0
    assert trace.density.mean() == pytest.approx(0.4, abs=1e-3)
    assert trace.density.min() >= 0 and trace.density.max() <= 1


def test_simp_deterministic():
    p = cantilever(10, 6, 0.5)
    a = run_simp(p, SimpConfig(max_iters=15))
    b = run_simp(p, SimpConfig(max_iters=15))
    assert a.compliances == b.compliances
    assert np.array_equal(a.density, b.density)


def test_refine_zero_iterations_is_identity(rng):
    p = cantilever(6, 4)
    x = rng.uniform(size=(4, 6))
    trace = refine(x, p, 0)
    assert np.array_equal(trace.density, x) and trace.n_iters == 0


def test_refine_runs_exactly_n_iterations(cantilever16):
    opt = run_simp(cantilever16, SimpConfig(max_iters=60)).density
    # starting at a converged design would stop early in run_simp; refine must not
    for n in (1, 5, 10):
        assert refine(opt, cantilever16, n).n_iters == n


def test_refine_restores_volume(cantilever16):
    opt = run_simp(cantilever16, SimpConfig(max_iters=60)).density
    off = np.clip(opt + 0.04, 0, 1)
    assert off.mean() >= 0.4 * 1.05
    assert refine(off, cantilever16, 5).density.mean() == pytest.approx(0.4, abs=1e-3)


def test_refine_lowers_compliance_of_perturbed_optimum(cantilever16, rng):
    opt = run_simp(cantilever16, SimpConfig(max_iters=60)).density
    noisy = np.clip(opt + rng.normal(0, 0.2, size=opt.shape), 0, 1)
    _, c_noisy = analyze(cantilever16, noisy)
    assert refine(noisy, cantilever16, 10).final_compliance < c_noisy


def test_refine_rejects_bad_input(cantilever16):
    with pytest.raises(InvalidInputError):
        refine(np.full((16, 16), 1.2), cantilever16, 3)
    with pytest.raises(InvalidInputError):
        refine(np.full((16, 16), 0.4), cantilever16, -1)


def test_config_validation():
    for kw in ({"penal": 0.5}, {"filter_radius": 0.5}, {"move_limit": 0}, {"vf_target": 1.5}):
        with pytest.raises(InvalidInputError):
            SimpConfig(**kw)


def test_estimator_api(cantilever16):
    est = SIMPOptimizer(max_iters=30)
    assert est.get_params()["max_iters"] == 30
    est.set_params(max_iters=40)
    est.fit(cantilever16)
    assert est.density_.shape == (16, 16) and est.n_iter_ <= 40
    assert est.score(cantilever16) == pytest.approx(-est.compliance_)
    assert est.refine(est.density_, cantilever16, 2).shape == (16, 16)
