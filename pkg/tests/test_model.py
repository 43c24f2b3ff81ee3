import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from transient_ruin.errors import RarityViolation, ValidationError
from transient_ruin.model import (DefaultTimeDistribution, Group, LossDistribution, MultiGroupModel,
                                  NonDefaultStream, PortfolioModel, loss_laplace, loss_mgf,
                                  mean_net_loss, rarity_margin, require_rarity, validate)

LOSSES = [LossDistribution.exponential(1.0), LossDistribution.exponential(2.5),
          LossDistribution.deterministic(2.0), LossDistribution.erlang(3, 2.0)]


def test_validate_accepts_reference_model(base_model):
    assert base_model.lam[3] == pytest.approx(3.6)
    assert base_model.r[9] == 10.0
    assert validate(base_model) == base_model


def test_validate_nonpositive_rate(exp_loss):
    with pytest.raises(ValidationError, match="nonpositive rate"):
        validate(PortfolioModel(n_max=2, lam=(0.0, 1.0), r=(1.0, 1.0), loss=exp_loss))


def test_validate_negative_variance(exp_loss):
    with pytest.raises(ValidationError, match="negative variance"):
        PortfolioModel.proportional(2, 0.9, 1.0, exp_loss, sigma2=(-1.0, 1.0))


def test_validate_nondefault_missing_loss(exp_loss):
    with pytest.raises(ValidationError, match="missing loss"):
        PortfolioModel.proportional(2, 0.9, 1.0, exp_loss, nondefault=NonDefaultStream((0.1, 0.1), None))


def test_validate_wrong_length(exp_loss):
    with pytest.raises(ValidationError):
        validate(PortfolioModel(n_max=3, lam=(1.0, 1.0), r=(1.0, 1.0, 1.0), loss=exp_loss))


def test_with_levels_keeps_per_level_fields(exp_loss):
    m = PortfolioModel.proportional(4, 0.9, 1.0, exp_loss, sigma2=(0.1, 0.2, 0.3, 0.4))
    small = m.with_levels(2)
    assert small.sigma2 == (0.1, 0.2)
    assert small.lam == (0.9, 1.8)
    with pytest.raises(ValidationError):
        m.with_levels(6)


def test_loss_laplace_examples():
    assert loss_laplace(LossDistribution.exponential(1.0), 1.0) == 0.5
    assert loss_laplace(LossDistribution.deterministic(2.0), 0.0) == 1.0
    oracle = integrate.quad(lambda x: math.exp(-0.9 * x) * math.exp(-x), 0, math.inf)[0]
    assert loss_laplace(LossDistribution.exponential(1.0), 0.9) == pytest.approx(oracle, abs=1e-12)
    with pytest.raises(ValidationError):
        loss_laplace(LossDistribution.exponential(1.0), -0.1)


def test_loss_mgf_examples():
    ex = LossDistribution.exponential(1.0)
    assert loss_mgf(ex, 0.5) == pytest.approx(2.0)
    assert math.isinf(loss_mgf(ex, 1.0))
    assert loss_mgf(LossDistribution.deterministic(2.0), 0.3) == pytest.approx(math.exp(0.6), rel=1e-15)


@pytest.mark.parametrize("loss", LOSSES, ids=lambda l: l.kind)
def test_laplace_is_mgf_reflected(loss):
    g = np.linspace(0.0, 20.0, 81)
    assert np.array_equal(loss.laplace(g), loss.mgf(-g))
    assert loss_laplace(loss, 0.0) == 1.0


@pytest.mark.parametrize("loss", LOSSES[:2] + LOSSES[3:], ids=lambda l: l.kind)
def test_laplace_decreasing_convex(loss):
    v = loss.laplace(np.linspace(0.0, 20.0, 201))
    assert np.all(np.diff(v) < 0)
    assert np.all(np.diff(v, 2) > -1e-15)


def test_mgf_domain():
    assert LossDistribution.exponential(2.0).mgf_domain_sup == 2.0
    assert LossDistribution.erlang(2, 3.0).mgf_domain_sup == 3.0
    assert math.isinf(LossDistribution.deterministic(1.0).mgf_domain_sup)
    assert LossDistribution.erlang(3, 2.0).mean == pytest.approx(1.5)


def test_log_mgf_derivatives_match_finite_differences():
    loss = LossDistribution.erlang(2, 3.0)
    a, h = 0.7, 1e-5
    logm, d1, d2 = loss.log_mgf_derivatives(a)
    f = lambda x: math.log(float(loss.mgf(x)))
    assert logm == pytest.approx(f(a))
    assert d1 == pytest.approx((f(a + h) - f(a - h)) / (2 * h), rel=1e-7)
    assert d2 == pytest.approx((f(a + h) - 2 * f(a) + f(a - h)) / h**2, rel=1e-4)


def test_tilted_loss_sampling_mean():
    rng = np.random.default_rng(3)
    loss = LossDistribution.exponential(1.0)
    x = loss.sample_tilted(np.full(200_000, 0.5), rng, 200_000)
    # exponential(1) tilted by 0.5 is exponential(0.5)
    assert x.mean() == pytest.approx(2.0, rel=0.02)


def test_rarity_examples(base_model, exp_loss):
    margin, ok = rarity_margin(base_model, 5.0)
    assert ok and margin == pytest.approx(5.0)
    assert rarity_margin(base_model, 0.1)[1]
    bad = PortfolioModel.proportional(1, 2.0, 0.5, exp_loss)
    margin, ok = rarity_margin(bad, 0.2)
    assert not ok and margin == pytest.approx(0.2 - 0.75)
    with pytest.raises(RarityViolation):
        require_rarity(bad, 0.2)
    with pytest.raises(ValidationError):
        rarity_margin(base_model, 0.0)


def test_mean_net_loss_closed_form_vs_integral(exp_loss):
    m = PortfolioModel.proportional(1, 2.0, 0.5, exp_loss)
    for s in np.linspace(0.0, 10.0, 21):
        closed = (1.0 - 0.5 / 2.0) * (1.0 - math.exp(-2.0 * s))
        integral = (1 - math.exp(-2 * s)) * 1.0 - 0.5 * integrate.quad(lambda v: math.exp(-2 * v), 0, s)[0]
        assert float(mean_net_loss(m, s)) == pytest.approx(closed, abs=1e-12)
        assert closed == pytest.approx(integral, abs=1e-8)


def test_tabulated_default_time_moments():
    grid = np.linspace(0.0, 4.0, 81)
    dens = 0.5 * np.exp(-0.5 * grid)
    T = DefaultTimeDistribution.tabulated(grid, dens)
    assert float(T.cdf(0.0)) == 0.0
    assert np.all(np.diff(T.cdf(np.linspace(0, 5, 50))) >= 0)
    assert T.total_mass <= 1.0
    ref = integrate.quad(lambda v: float(T.survival(v)), 0, 3.0, limit=200)[0]
    assert float(T.expected_min(3.0)) == pytest.approx(ref, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 5.0), st.floats(0.1, 5.0), st.integers(1, 6))
def test_validate_idempotent(lam, r, n):
    m = PortfolioModel.proportional(n, lam, r, LossDistribution.exponential(1.0))
    assert validate(validate(m)) == validate(m)


def test_multigroup_checks(exp_loss):
    with pytest.raises(ValidationError):
        MultiGroupModel(())
    with pytest.raises(ValidationError):
        MultiGroupModel((Group(1, -0.1, 1.0, exp_loss),))
    assert MultiGroupModel((Group(2, 0.9, 1.0, exp_loss), Group(0, 0.5, 2.0, exp_loss))).counts == (2, 0)
