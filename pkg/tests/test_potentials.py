import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmvb.potentials import (
    DualComputationError,
    Laplacian,
    StudentT,
    gamma_update,
    h_dual,
    log_potential,
    make_potential,
    numeric_h,
)

# frozen high-precision references (mpmath, 30 digits)
STUDENT_NU3_S1 = -0.57536414490356185  # -(4/2) log(1 + 1/3)
STUDENT_NU5_SC05_S25 = -5.375278407684165  # -(6/2) log(1 + 6.25 / 1.25)
STUDENT_NU3_H1 = 0.15072828980712371  # sup_v -v + 4 log(1 + v/3) = -1 + 4 log(4/3)


def grid_sup(pot, gamma, smax=1e3):
    """Oracle for h: brute-force search over s in [-smax, smax] with two refinement passes."""
    s = np.linspace(-smax, smax, 400_001)
    for _ in range(3):
        vals = -s**2 / gamma - 2.0 * pot.log_t(s)
        i = int(np.argmax(vals))
        step = s[1] - s[0]
        s = np.linspace(s[i] - 2 * step, s[i] + 2 * step, 20_001)
    return float(np.max(-s**2 / gamma - 2.0 * pot.log_t(s)))


def test_laplacian_log_values():
    lap = Laplacian(15.0)
    assert log_potential(lap, 0.0) == 0.0
    assert log_potential(lap, 0.2) == pytest.approx(-3.0, rel=1e-15)


def test_student_log_values():
    assert log_potential(StudentT(3.0, 1.0), 1.0) == pytest.approx(STUDENT_NU3_S1, rel=1e-14)
    assert log_potential(StudentT(5.0, 0.5), 2.5) == pytest.approx(STUDENT_NU5_SC05_S25, rel=1e-14)


def test_laplacian_h_examples():
    assert h_dual(Laplacian(15.0), 0.01) == pytest.approx(2.25, rel=1e-14)
    assert h_dual(Laplacian(1.0), 1.0) == pytest.approx(1.0)
    assert numeric_h(Laplacian(15.0), 0.01) == pytest.approx(2.25, rel=1e-8)


def test_student_h_reference():
    assert h_dual(StudentT(3.0, 1.0), 1.0) == pytest.approx(STUDENT_NU3_H1, rel=1e-9)
    # below gamma = c / (nu + 1) the supremum sits at s = 0
    assert h_dual(StudentT(3.0, 1.0), 0.2) == 0.0


@pytest.mark.parametrize("pot", [Laplacian(15.0), Laplacian(0.7), StudentT(3.0, 1.0), StudentT(1.5, 0.3)])
@pytest.mark.parametrize("gamma", [0.003, 0.05, 0.4, 2.0, 20.0])
def test_h_matches_grid_search(pot, gamma):
    ref = grid_sup(pot, gamma)
    got = float(h_dual(pot, gamma))
    assert abs(got - ref) <= 1e-6 * max(abs(ref), 1e-3)


def test_h_domain_errors():
    with pytest.raises(ValueError):
        h_dual(Laplacian(), 0.0)
    with pytest.raises(ValueError):
        numeric_h(StudentT(), [-1.0])


def test_dual_error_carries_bracket():
    class Unbounded:
        def neg2_log_t_sqrt(self, v):
            return 2.0 * np.asarray(v, float)  # grows linearly: supremum escapes for gamma > 1/2

    with pytest.raises(DualComputationError) as info:
        numeric_h(Unbounded(), 1.0)
    assert info.value.bracket is not None


def test_gamma_update_examples():
    assert gamma_update(Laplacian(15.0), 225.0) == pytest.approx(1.0)
    assert gamma_update(Laplacian(15.0), 1.0) == pytest.approx(15.0)
    with pytest.raises(ValueError):
        gamma_update(Laplacian(15.0), 0.0)


@pytest.mark.parametrize("pot", [Laplacian(15.0), StudentT(3.0, 1.0), StudentT(4.0, 0.2)])
def test_gamma_update_matches_finite_difference(pot):
    rng = np.random.default_rng(0)
    v = np.exp(rng.uniform(np.log(1e-3), np.log(1e2), 50))
    hstep = 1e-6 * v
    fd = (pot.neg2_log_t_sqrt(v + hstep) - pot.neg2_log_t_sqrt(v - hstep)) / (2 * hstep)
    np.testing.assert_allclose(gamma_update(pot, v), fd, rtol=1e-6)


@settings(max_examples=40, deadline=None)
@given(s=st.floats(-3.0, 3.0), tau=st.floats(0.5, 30.0))
def test_bound_tightness_laplacian(s, tau):
    pot = Laplacian(tau)
    t = np.exp(pot.log_t(s))
    gam = np.geomspace(1e-8, 1e3, 200_001)
    bound = np.exp(-(s * s) / (2 * gam) - pot.h(gam) / 2)
    assert bound.max() <= t * (1 + 1e-12)
    if abs(s) > 1e-6:
        # analytic maximiser gamma = |s| / tau lies inside the grid
        assert bound.max() >= t * (1 - 1e-4)


@pytest.mark.parametrize("s", [0.01, 0.1, 0.5, 2.0])
def test_map_variational_consistency(s):
    pot = Laplacian(15.0)
    gam = np.geomspace(1e-6, 1e2, 400_001)
    val = np.min(s * s / gam + pot.h(gam))
    assert val == pytest.approx(-2 * pot.log_t(s), rel=1e-6)


@pytest.mark.parametrize("pot", [Laplacian(15.0), StudentT(3.0, 1.0)])
@pytest.mark.parametrize("v", [0.01, 0.3, 4.0])
def test_gamma_update_is_argmin(pot, v):
    from scipy.optimize import minimize_scalar

    res = minimize_scalar(lambda u: v / np.exp(u) + float(h_dual(pot, np.exp(u))),
                          bounds=(np.log(1e-6), np.log(1e3)), method="bounded",
                          options={"xatol": 1e-10})
    gamma_star = np.exp(res.x)
    assert 1.0 / gamma_update(pot, v) == pytest.approx(gamma_star, rel=1e-4)


def test_make_potential():
    assert make_potential("laplacian", tau=3.0) == Laplacian(3.0)
    assert make_potential("student", nu=4.0) == StudentT(4.0, 1.0)
    with pytest.raises(ValueError):
        make_potential("cauchy")
    with pytest.raises(ValueError):
        Laplacian(-1.0)
