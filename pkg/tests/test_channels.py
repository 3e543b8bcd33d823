import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pbigamp.channels import (Awgn, BernoulliGaussian, FiniteAlphabet, Gaussian,
                              denoiser_from_spec, channel_from_spec)
import oracles


def test_bg_rate_one_reduces_to_gaussian_product():
    d = BernoulliGaussian(rate=1.0, mean=0.0, var=1.0, field="real")
    m = d.denoise(2.0, 1.0)
    assert np.isclose(m.mean, 1.0)
    assert np.isclose(m.variance, 0.5)


def test_bg_rate_zero_is_point_mass():
    d = BernoulliGaussian(rate=0.0, mean=0.0, var=1.0, field="real")
    for r in (-3.0, 0.2, 7.0):
        m = d.denoise(r, 0.7)
        assert m.mean == 0.0 and m.variance == 0.0
    assert d.denoise_derivative(1.0, 0.5) == 0.0


def test_bg_matches_quadrature_oracle():
    d = BernoulliGaussian(rate=0.5, mean=0.0, var=1.0, field="real")
    m = d.denoise(0.7, 0.3)
    mean_o, var_o, z_o = oracles.bg_moments_real(0.5, 0.0, 1.0, 0.7, 0.3)
    assert abs(m.mean - mean_o) < 1e-8
    assert abs(m.variance - var_o) < 1e-8
    assert abs(np.exp(m.log_evidence) - z_o) < 1e-10


def test_qpsk_uninformative_pseudo_measurement():
    d = FiniteAlphabet.qpsk()
    m = d.denoise(0.0 + 0.0j, 1e12)
    assert abs(m.mean) < 1e-9
    assert np.isclose(m.variance, 1.0, atol=1e-9)


def test_gaussian_derivative_is_gain():
    d = Gaussian(0.0, 1.0, "real")
    assert np.isclose(d.denoise_derivative(0.3, 0.5), 2.0 / 3.0)


def test_bg_derivative_matches_finite_difference():
    d = BernoulliGaussian(rate=0.5, mean=0.0, var=1.0, field="real")
    r, nu, h = 0.7, 0.3, 1e-5
    num = (d.denoise(r + h, nu).mean - d.denoise(r - h, nu).mean) / (2 * h)
    ana = d.denoise_derivative(r, nu)
    assert abs(num - ana) / abs(num) < 1e-6


@pytest.mark.parametrize("d", [
    Gaussian(0.3, 1.7, "real"),
    BernoulliGaussian(0.2, 0.0, 2.0, "real"),
    BernoulliGaussian(0.6, 0.5, 1.0, "real"),
    FiniteAlphabet(points=(-1.0, 0.5, 2.0), probs=(0.2, 0.5, 0.3), field="real"),
])
def test_variance_identity_real(d):
    # nu_r * derivative == variance
    for r in (-2.0, 0.1, 1.5):
        for nu in (0.05, 0.6, 4.0):
            m = d.denoise(r, nu)
            g = d.denoise_derivative(r, nu)
            scale = max(abs(float(m.variance)), 1e-12)
            assert abs(nu * g - m.variance) / scale < 1e-8


@pytest.mark.parametrize("d", [
    Gaussian(0.0, 1.0, "complex"),
    BernoulliGaussian(0.3, 0.0, 1.5, "complex"),
    FiniteAlphabet.qpsk(),
])
def test_variance_identity_complex(d):
    rng = np.random.default_rng(0)
    for _ in range(8):
        r = rng.standard_normal() + 1j * rng.standard_normal()
        nu = float(10 ** rng.uniform(-2, 2))
        m = d.denoise(r, nu)
        g = d.denoise_derivative(r, nu)
        scale = max(abs(float(np.real(m.variance))), 1e-12)
        assert abs(nu * g - m.variance) / scale < 1e-8


@settings(max_examples=150, deadline=None)
@given(r=st.floats(-30, 30), log_nu=st.floats(-4, 4),
       rate=st.floats(0.01, 0.99), var=st.floats(0.1, 5.0))
def test_bg_variance_nonneg_property(r, log_nu, rate, var):
    d = BernoulliGaussian(rate=rate, mean=0.0, var=var, field="real")
    m = d.denoise(r, 10.0 ** log_nu)
    assert np.isfinite(m.mean) and np.isfinite(m.variance)
    assert m.variance >= 0.0
    assert d.kl_to_prior(r, 10.0 ** log_nu) >= -1e-12


@settings(max_examples=60, deadline=None)
@given(re=st.floats(-10, 10), im=st.floats(-10, 10), log_nu=st.floats(-3, 3))
def test_qpsk_variance_bounded_by_diameter(re, im, log_nu):
    d = FiniteAlphabet.qpsk()
    m = d.denoise(re + 1j * im, 10.0 ** log_nu)
    assert 0.0 <= m.variance <= 4.0 + 1e-9   # max pairwise squared distance


def test_awgn_posterior_basics():
    ch = Awgn(0.0, "real")
    m = ch.posterior(3.2, 0.0, 1.0)
    assert np.isclose(m.mean, 3.2) and m.variance == 0.0
    ch = Awgn(1.0, "real")
    m = ch.posterior(1.0, 0.0, 1.0)
    assert np.isclose(m.mean, 0.5) and np.isclose(m.variance, 0.5)


def test_awgn_posterior_matches_quadrature():
    ch = Awgn(2.0, "real")
    m = ch.posterior(-1.0, 1.0, 4.0)
    mo, vo = oracles.awgn_posterior_quad(2.0, -1.0, 1.0, 4.0, False)
    assert abs(m.mean - mo) < 1e-10
    assert abs(m.variance - vo) < 1e-10


def test_awgn_uninformative_limit():
    ch = Awgn(1e14, "real")
    m = ch.posterior(5.0, 1.2, 2.0)
    assert abs(m.mean - 1.2) < 1e-9
    assert abs(m.variance - 2.0) < 1e-9


def test_residual_scores():
    ch = Awgn(0.0, "real")
    s, nu_s = ch.residual_scores(4.0, 1.0, 2.0)
    assert np.isclose(s, 1.5) and np.isclose(nu_s, 0.5)   # (y-p)/nu_p, 1/nu_p
    ch = Awgn(1.0, "real")
    s, nu_s = ch.residual_scores(1.0, 0.0, 1.0)   # zhat=0.5
    assert np.isclose(s, 0.5) and np.isclose(nu_s, 0.5)
    s, nu_s = ch.residual_scores(2.0, 0.0, 1.0)   # zhat=1.0
    assert np.isclose(s, 1.0) and np.isclose(nu_s, 0.5)
    # zhat == phat gives zero score
    s, _ = ch.residual_scores(0.0, 0.0, 1.0)
    assert s == 0.0


def test_kl_to_prior_gaussian_closed_form():
    d = Gaussian(0.0, 1.0, "real")
    kl = d.kl_to_prior(1.0, 1.0)   # posterior N(0.5, 0.5)
    expect = 0.5 * (0.5 + 0.25 - 1.0 - np.log(0.5))
    assert abs(kl - expect) < 1e-12
    assert abs(expect - 0.2216) < 5e-5


def test_kl_to_prior_limits_and_oracle():
    for d in (Gaussian(0.0, 1.0, "real"), BernoulliGaussian(0.4, 0.0, 1.0, "real"),
              FiniteAlphabet(points=(-1.0, 1.0), field="real")):
        assert abs(d.kl_to_prior(0.3, 1e12)) < 1e-10
    d = BernoulliGaussian(0.5, 0.0, 1.0, "real")
    kl = d.kl_to_prior(0.7, 0.3)
    kl_o = oracles.kl_quad_bg(0.5, 0.0, 1.0, 0.7, 0.3, False)
    assert abs(kl - kl_o) < 1e-6


def test_expected_negative_loglik():
    ch = Awgn(1.0, "real")
    assert np.isclose(ch.expected_negative_loglik(1.0, 1.0, 1e-14),
                      0.5 * np.log(2 * np.pi), atol=1e-9)
    assert np.isclose(ch.expected_negative_loglik(2.0, 0.0, 1.0),
                      2.5 + 0.5 * np.log(2 * np.pi))
    ch0 = Awgn(0.0, "real")
    assert ch0.expected_negative_loglik(1.0, 0.5, 1.0) == np.inf


def test_expected_negative_loglik_monte_carlo():
    rng = np.random.default_rng(3)
    ch = Awgn(0.7, "real")
    y, zm, nup = 1.3, 0.4, 0.9
    z = zm + np.sqrt(nup) * rng.standard_normal(10 ** 6)
    ll = -(-0.5 * np.log(2 * np.pi * 0.7) - (y - z) ** 2 / (2 * 0.7))
    mc, se = ll.mean(), ll.std() / 1e3
    assert abs(ch.expected_negative_loglik(y, zm, nup) - mc) < 3 * se


def test_real_and_complex_gaussian_agree_on_real_inputs():
    dr = Gaussian(0.0, 1.0, "real")
    dc = Gaussian(0.0, 1.0, "complex")
    mr = dr.denoise(0.8, 0.5)
    mc = dc.denoise(0.8 + 0.0j, 0.5)
    assert abs(mr.mean - mc.mean) < 1e-14
    assert abs(mr.variance - mc.variance) < 1e-14


def test_invalid_inputs_raise():
    d = Gaussian(0.0, 1.0, "real")
    with pytest.raises(ValueError):
        d.denoise(np.nan, 1.0)
    with pytest.raises(ValueError):
        d.denoise(1.0, 0.0)
    with pytest.raises(ValueError):
        d.denoise(1.0, -1.0)
    with pytest.raises(ValueError):
        Awgn(1.0, "real").posterior(1.0, 0.5, -2.0)
    with pytest.raises(ValueError):
        FiniteAlphabet(points=(1.0, -1.0), probs=(0.7, 0.7), field="real")
    with pytest.raises(ValueError):
        BernoulliGaussian(rate=1.4)


def test_spec_roundtrip():
    for d in (Gaussian(0.5, 2.0, "real"), BernoulliGaussian(0.1, 0.0, 3.0, "complex"),
              FiniteAlphabet.qpsk()):
        d2 = denoiser_from_spec(d.to_spec())
        assert type(d2) is type(d)
        m1, m2 = d.denoise(0.5, 0.7), d2.denoise(0.5, 0.7)
        assert np.allclose(m1.mean, m2.mean)
    ch = Awgn(0.3, "complex")
    assert channel_from_spec(ch.to_spec()) == ch


def test_bg_log_domain_stability_high_snr():
    # deep posterior tails must stay finite
    d = BernoulliGaussian(0.05, 0.0, 1.0, "complex")
    m = d.denoise(30.0 + 0.0j, 1e-6)
    assert np.isfinite(m.mean) and np.isfinite(m.variance) and np.isfinite(m.log_evidence)
    em = d.em_moments(30.0 + 0.0j, 1e-6)
    assert 0.999 < float(np.real(em.support_prob)) <= 1.0
