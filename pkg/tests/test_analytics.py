import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from oracles import APPROVES, chain_probability, criterion1_by_patterns, pick_probability
from tpop import analytics as an
from tpop.types import AgentState, ThetaParams

probs = st.floats(0.0, 1.0)
THETA_BINARY = ThetaParams(1.0, 2, (2, 2))
THETA_FLAT = ThetaParams(1.0, 1, (6,))


@settings(max_examples=100)
@given(probs, probs)
def test_root_vector_is_a_distribution_over_fake_claims(ph, pc):
    v = an.root_state_vector(ph, pc)
    assert v.sum() == pytest.approx(1.0)
    assert v[1] == v[5] == 0.0


@settings(max_examples=100)
@given(probs, probs)
def test_selection_matrix_from_naming_rules(ph, pc):
    m = an.selection_matrix(ph, pc)
    expect = np.array([[pick_probability(u, v, ph, pc) for v in range(6)] for u in range(6)])
    np.testing.assert_allclose(m, expect, atol=1e-15)
    for u in (0, 2, 3, 4):
        assert m[u].sum() == pytest.approx(1.0)
    assert not m[1].any() and not m[5].any()


def test_approval_matrix_matches_reference_table():
    a = an.approval_matrix()
    for child in range(6):
        for parent in range(6):
            assert a[parent, child] == APPROVES[child][parent]
    # the reference table happens to be symmetric
    np.testing.assert_array_equal(a, a.T)


def test_selection_matrix_rejects_bad_probability():
    with pytest.raises(ValueError):
        an.selection_matrix(1.2, 0.5)
    with pytest.raises(ValueError):
        an.root_state_vector(0.5, -0.1)


@pytest.mark.parametrize("ph", [0.0, 0.3, 0.9])
@pytest.mark.parametrize("pc", [0.0, 0.5, 1.0])
def test_approval_chains_against_enumeration(ph, pc):
    table = an.approval_probabilities(3, ph, pc)
    for u in range(6):
        for d in (1, 2, 3):
            ref = chain_probability(u, d, ph, pc)
            assert abs(an.approval_probability(u + 1, d, ph, pc) - ref) < 1e-12
            assert abs(table[u, d - 1] - ref) < 1e-12


def test_approval_chain_special_cases():
    # an honest prover among honest agents is always approved
    assert an.approval_probability(AgentState.S3, 4, 1.0, 0.0) == 1.0
    # nobody non-coerced approves a fake position
    assert an.approval_probability(AgentState.S1, 1, 0.3, 0.0) == 0.0
    with pytest.raises(ValueError):
        an.approval_probability(3, 0, 0.5, 0.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 30), st.integers(-1, 32), probs)
def test_binomial_tail_against_scipy(n, k, p):
    ref = stats.binom.sf(k - 1, n, p) if k > 0 else 1.0
    assert an.binomial_tail(n, k, p) == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("theta", [THETA_BINARY, THETA_FLAT, ThetaParams(0.4, 2, (2, 2)), ThetaParams(0.4, 1, (6,))])
@pytest.mark.parametrize("ph,pc", [(0.2, 0.3), (0.5, 0.5), (0.9, 0.1)])
def test_criterion1_against_pattern_enumeration(theta, ph, pc):
    t = Fraction(str(theta.threshold))
    for u in (1, 3, 4, 5):
        p = [chain_probability(u - 1, d, ph, pc) for d in range(1, theta.height + 1)]
        ref = criterion1_by_patterns(theta.level_sizes, t, p)
        assert abs(an.criterion1_probability(u, theta, ph, pc) - ref) < 1e-10


def test_poisson_tail_against_high_precision():
    mpmath.mp.dps = 50
    for lam, n in [(3.5 * math.pi, 6), (3.5 * math.pi, 2), (140 * math.pi, 6), (0.5, 30), (50.0, 49)]:
        ref = 1 - sum(mpmath.e ** (-lam) * mpmath.mpf(lam) ** j / mpmath.factorial(j) for j in range(n))
        assert abs(an.poisson_tail(lam, n) - float(ref)) < 1e-10
    assert an.poisson_tail(2.0, 0) == 1.0
    assert an.poisson_tail(0.0, 3) == 0.0
    assert an.poisson_cdf(4.0, 6) == pytest.approx(stats.poisson.cdf(6, 4.0), abs=1e-14)


def test_criterion2():
    lam = 3.5 * math.pi
    got = an.criterion2_probability(THETA_FLAT, 3.5, 1.0)
    assert got == pytest.approx(an.poisson_tail(lam, 6), abs=1e-15)
    # two-level product follows n_{i+1} per parent
    expect = an.poisson_tail(lam, 2) * an.poisson_tail(lam, 4) ** 2
    assert an.criterion2_probability(THETA_BINARY, 3.5, 1.0) == pytest.approx(expect)
    assert an.criterion2_probability(THETA_BINARY, 140, 1.0) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        an.criterion2_probability(THETA_FLAT, 0, 1)


def test_kappa():
    assert an.kappa(6, 0, 6) == 720 / 46656
    assert an.kappa(10, 2, 1) == pytest.approx(0.8)
    assert an.kappa(3, 5, 1, clamp=True) == 0.0
    with pytest.raises(an.DomainError):
        an.kappa(3, 5, 1)


def test_distance_density_and_overlap():
    r = 0.7
    total = an.adaptive_simpson(lambda x: an.distance_pdf(x, r), 0, 2 * r, tol=1e-10)
    assert abs(total - 1) < 1e-6
    ref, _ = integrate.quad(lambda x: an.distance_pdf(x, r), 0, 2 * r)
    assert abs(ref - 1) < 1e-8
    assert an.overlap_fraction(0.0, r) == 1
    assert an.overlap_fraction(2 * r, r) == 0
    assert an.overlap_fraction(r, r) == pytest.approx(2 / 3 - math.sqrt(3) / (2 * math.pi))
    for bad in (-0.1, 2 * r + 1e-9):
        with pytest.raises(an.DomainError):
            an.distance_pdf(bad, r)
        with pytest.raises(an.DomainError):
            an.overlap_fraction(bad, r)


def test_distance_density_matches_sampling():
    rng = np.random.default_rng(3)
    rad = np.sqrt(rng.random((2, 200000)))
    ang = rng.random((2, 200000)) * 2 * np.pi
    pts = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=-1)
    d = np.linalg.norm(pts[0] - pts[1], axis=-1)
    edges = np.linspace(0, 2, 11)
    hist = np.histogram(d, edges)[0] / len(d)
    for a, b, h in zip(edges[:-1], edges[1:], hist):
        mass = integrate.quad(lambda x: an.distance_pdf(x, 1.0), a, b)[0]
        assert abs(mass - h) < 0.005


@pytest.mark.parametrize(
    "f,a,b,exact",
    [(math.sin, 0, math.pi, 2.0), (math.sqrt, 0, 1, 2 / 3), (lambda x: x**4, -1, 2, 33 / 5)],
)
def test_adaptive_simpson(f, a, b, exact):
    assert an.adaptive_simpson(f, a, b, tol=1e-10) == pytest.approx(exact, abs=1e-8)


def test_uniqueness_probability():
    r = 0.1
    vals = [an.uniqueness_probability(THETA_BINARY, math.pi * n * r * r, r) for n in (1000, 3000, 5000, 10000)]
    assert vals == sorted(vals)
    assert vals[0] == pytest.approx(0.6924, abs=1e-3)
    assert an.uniqueness_probability(THETA_BINARY, 1e7, r) == pytest.approx(1.0, abs=1e-5)
    assert an.uniqueness_probability(THETA_FLAT, 6, 1.0) == 720 / 46656
    with pytest.raises(an.UnsupportedShapeError):
        an.uniqueness_probability(ThetaParams(1, 2, (3, 3)), 100, r)


def test_infinite_density_drops_density_criteria():
    model = an.ModelParams(0.7, 0.2, THETA_BINARY, infinite_density=True)
    c1, c2, c3 = an.criterion_breakdown(3, model)
    assert (c2, c3) == (1.0, 1.0)
    assert an.tpop_probability(3, model) == c1
    finite = an.ModelParams(0.7, 0.2, THETA_BINARY, mu=3.5, r=1.0)
    f1, f2, f3 = an.criterion_breakdown(3, finite)
    assert f1 == c1 and 0 < f2 < 1 and 0 < f3 < 1


def test_surfaces_corners():
    s = an.theoretical_surfaces(THETA_FLAT, 0.5)
    np.testing.assert_allclose(s.p_h, [0, 0.5, 1])
    # all honest: every prover accepted
    assert np.all(s.tp[2] == 1.0)
    # nobody coerced and nobody honest: no fake position is ever approved
    assert s.tn[0, 0] == 1.0
    assert len(list(s.rows())) == 9
    with pytest.raises(ValueError):
        an.grid_values(0.3)


def test_expected_edges():
    assert an.expected_edges(THETA_BINARY, 1, 0) == pytest.approx(6.0)
    assert an.expected_edges(THETA_FLAT, 1, 0) == pytest.approx(6.0)
    assert an.expected_edges(THETA_BINARY, 0, 0) == 0.0
    # single level: six trials of a one-step approval
    v = an.root_state_vector(0.5, 0.5) @ an.transition_matrix(0.5, 0.5)
    assert an.expected_edges(THETA_FLAT, 0.5, 0.5) == pytest.approx(6 * v.sum())


def test_platoon_model():
    root, m, a = an.platoon_matrices(0.3, 0.6)
    np.testing.assert_array_equal(a, [[0, 1, 0], [1, 1, 1], [1, 1, 1]])
    assert root[1] == 0
    assert root[0] == pytest.approx(0.7 * 0.4) and root[2] == pytest.approx(0.7 * 0.6)
    assert an.platoon_expected_edges(THETA_BINARY, 0, 1) == pytest.approx(6.0, abs=1e-9)
    assert an.platoon_expected_edges(THETA_FLAT, 0, 1) == pytest.approx(6.0, abs=1e-9)
    assert an.platoon_expected_edges(THETA_FLAT, 1, 0) == 0.0


def test_honest_edge_optima():
    got = {o["entry"]: (o["p_h"], o["p_c"]) for o in an.optimal_honest_edge_points(101)}
    assert got == {"m3,3": (1.0, 0.0), "m3,4": (1.0, 0.5), "m4,3": (1.0, 0.5), "m4,4": (1.0, 1.0)}
    assert an.honest_edge_probability(AgentState.S3, AgentState.S4, 1.0, 0.5) == pytest.approx(0.25)


def test_format_matrix():
    text = an.format_matrix(an.selection_matrix(0.5, 0.5))
    assert text.splitlines()[0].split() == ["s1", "s2", "s3", "s4", "s5", "s6"]
    assert len(an.format_matrix(an.platoon_matrices(0.5, 0.5)[2]).splitlines()) == 4
