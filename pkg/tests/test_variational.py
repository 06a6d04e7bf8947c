import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from virtualfl import autodiff as ad
from virtualfl.variational import (
    DiagGaussian,
    ImproperFactor,
    NaturalFactor,
    VariationalParams,
    damp,
    factor_product,
    factor_quotient,
    kl_divergence,
    params_kl,
    project_proper,
    sample_reparam,
    softplus_inverse,
    to_moment,
    to_natural,
)
from virtualfl.virtual import init_server

from gradcheck import check


def quadrature_kl(m1, v1, m2, v2) -> float:
    p, q = stats.norm(m1, np.sqrt(v1)), stats.norm(m2, np.sqrt(v2))
    lo, hi = m1 - 12 * np.sqrt(v1), m1 + 12 * np.sqrt(v1)
    val, _ = integrate.quad(lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x)), lo, hi, epsabs=1e-12, epsrel=1e-12,
                            limit=200)
    return val


def test_kl_matches_quadrature():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        m1, m2 = rng.uniform(-3, 3, 2)
        v1, v2 = rng.uniform(0.1, 4.0, 2)
        closed = kl_divergence(DiagGaussian([m1], [v1]), DiagGaussian([m2], [v2]))
        worst = max(worst, abs(closed - quadrature_kl(m1, v1, m2, v2)))
    assert worst < 1e-6


def test_kl_properties():
    a = DiagGaussian([0.0, 1.0], [1.0, 2.0])
    assert kl_divergence(a, a) == 0.0
    b = DiagGaussian([0.5, 1.0], [1.0, 1.0])
    assert kl_divergence(a, b) > 0
    assert kl_divergence(a, b) != pytest.approx(kl_divergence(b, a))


def test_kl_sums_over_dimensions():
    a, b = DiagGaussian([0.0, 1.0], [1.0, 2.0]), DiagGaussian([1.0, -1.0], [0.5, 3.0])
    total = sum(kl_divergence(DiagGaussian([a.mean[i]], [a.variance[i]]), DiagGaussian([b.mean[i]], [b.variance[i]]))
                for i in range(2))
    assert kl_divergence(a, b) == pytest.approx(total, rel=1e-14)


def test_differentiable_kl_matches_closed_form_and_fd():
    rng = np.random.default_rng(1)
    target = DiagGaussian(rng.standard_normal(4), rng.uniform(0.2, 2, 4))
    mean, rho = rng.standard_normal(4), rng.standard_normal(4)
    got = params_kl(ad.Tensor(mean), ad.Tensor(rho), target).item()
    assert got == pytest.approx(kl_divergence(VariationalParams(mean, rho).to_gaussian(), target), rel=1e-12)
    assert check(lambda m, r: params_kl(m, r, target), [mean, rho]) < 1e-5


pos = st.floats(1e-3, 1e3)
real = st.floats(-1e3, 1e3)


@settings(max_examples=200, deadline=None)
@given(real, pos)
def test_natural_round_trip(mean, var):
    d = DiagGaussian([mean], [var])
    back = to_moment(to_natural(d))
    assert back.mean[0] == pytest.approx(mean, rel=1e-12, abs=1e-12)
    assert back.variance[0] == pytest.approx(var, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(-1000, 1000), st.integers(-1000, 1000)), min_size=2, max_size=2))
def test_product_quotient_round_trip_exact(pairs):
    # dyadic rationals keep float addition exact
    (p1, s1), (p2, s2) = pairs
    a = NaturalFactor([p1 / 8], [s1 / 8])
    b = NaturalFactor([p2 / 8], [s2 / 8])
    back = factor_quotient(factor_product(a, b), b)
    assert back.precision[0] == a.precision[0] and back.shift[0] == a.shift[0]


def test_product_is_density_product():
    # N(x; 0, 1) N(x; 2, 1) is proportional to N(x; 1, 1/2)
    prod = to_moment(factor_product(to_natural(DiagGaussian([0.0], [1.0])), to_natural(DiagGaussian([2.0], [1.0]))))
    assert prod.mean[0] == pytest.approx(1.0) and prod.variance[0] == pytest.approx(0.5)


@pytest.mark.parametrize("k", range(1, 11))
def test_init_server_posterior_equals_prior(k):
    rng = np.random.default_rng(k)
    prior = DiagGaussian(rng.standard_normal(7), rng.uniform(0.1, 5.0, 7))
    posterior = init_server(prior, k).posterior
    np.testing.assert_allclose(posterior.mean, prior.mean, rtol=0, atol=1e-12)
    np.testing.assert_allclose(posterior.variance, prior.variance, rtol=0, atol=1e-12)


def test_improper_factor():
    f = NaturalFactor([1.0, -0.5], [0.0, 1.0])
    assert not f.is_proper
    with pytest.raises(ImproperFactor):
        to_moment(f)
    d = project_proper(f, 1e-8)
    assert d.variance[1] == pytest.approx(1e8)
    assert d.mean[0] == 0.0


def test_project_proper_leaves_proper_factors_alone():
    f = to_natural(DiagGaussian([1.0, -2.0], [0.5, 3.0]))
    d = project_proper(f)
    np.testing.assert_allclose(d.mean, [1.0, -2.0])
    np.testing.assert_allclose(d.variance, [0.5, 3.0])


def test_damping():
    old, new = NaturalFactor([1.0], [1.0]), NaturalFactor([3.0], [5.0])
    assert damp(old, new, 1.0) is new
    half = damp(old, new, 0.5)
    assert half.precision[0] == 2.0 and half.shift[0] == 3.0
    with pytest.raises(ValueError):
        damp(old, new, 0.0)


def test_uniform_factor_is_identity():
    f = to_natural(DiagGaussian([0.3], [2.0]))
    g = factor_product(f, NaturalFactor.uniform(1))
    assert g.precision[0] == f.precision[0] and g.shift[0] == f.shift[0]


def test_scaled_powers_multiply_back():
    f = to_natural(DiagGaussian([0.3, 1.0], [2.0, 0.5]))
    parts = [f.scaled(0.25)] * 4
    total = parts[0]
    for p in parts[1:]:
        total = factor_product(total, p)
    np.testing.assert_allclose(total.precision, f.precision, rtol=1e-15)


def test_sample_reparam_moments():
    d = DiagGaussian([1.0, -2.0], [0.25, 4.0])
    draws = sample_reparam(d, np.random.default_rng(0).standard_normal((200_000, 2)))
    np.testing.assert_allclose(draws.mean(0), d.mean, atol=0.02)
    np.testing.assert_allclose(draws.var(0), d.variance, rtol=0.02)
    with pytest.raises(ValueError):
        sample_reparam(d, np.zeros(3))


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 500.0))
def test_softplus_inverse(sigma):
    rho = softplus_inverse(np.array([sigma]))
    assert VariationalParams([0.0], rho).sigma[0] == pytest.approx(sigma, rel=1e-9)


def test_validation():
    with pytest.raises(ValueError):
        DiagGaussian([0.0], [0.0])
    with pytest.raises(ValueError):
        DiagGaussian([0.0, 1.0], [1.0])
    with pytest.raises(ValueError):
        NaturalFactor([np.nan], [0.0])
    with pytest.raises(ValueError):
        softplus_inverse([-1.0])
