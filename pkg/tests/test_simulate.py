import math

import numpy as np
import pytest
from scipy import integrate, stats

from transient_ruin import exact, simulate
from transient_ruin.asymptotics import decay_rate, legendre, omega
from transient_ruin.errors import RarityViolation, ValidationError
from transient_ruin.model import LossDistribution, NonDefaultStream, PortfolioModel
from transient_ruin.simulate import (AlphaTable, net_loss_at, net_loss_at_epochs, sample_tilted_default_time,
                                     simulate_direct, simulate_is, tilted_measure)

from conftest import p1_closed


def brute_net_loss(T, L, r):
    out = np.empty_like(T)
    for i in range(T.shape[0]):
        for k in range(T.shape[1]):
            v = T[i, k]
            out[i, k] = np.sum(L[i] * (T[i] <= v)) - r * np.sum(np.minimum(T[i], v))
    return out


def test_net_loss_at_epochs_matches_brute_force():
    rng = np.random.default_rng(0)
    T = rng.exponential(1.0, (50, 6))
    L = rng.exponential(1.0, (50, 6))
    assert np.allclose(net_loss_at_epochs(T, L, 0.7), brute_net_loss(T, L, 0.7), atol=1e-12)
    v = T[:, 2]
    assert np.allclose(net_loss_at(v, T, L, 0.7), brute_net_loss(T, L, 0.7)[:, 2], atol=1e-12)


def test_direct_single_obligor(base_model):
    est = simulate_direct(base_model, 1, 5.0, 1.0, 10**6, 1)
    assert abs(est.estimate - p1_closed(5.0, 1.0)) <= 3 * est.std_error
    assert est.std_error == pytest.approx(math.sqrt(est.variance / est.n_runs))
    assert est.ci95[0] < est.estimate < est.ci95[1]


def test_direct_zero_reserve(base_model):
    g = exact.pn_grid(base_model, 3, u=0.0, t_max=2.0)
    est = simulate_direct(base_model, 3, 0.0, 2.0, 200_000, 2)
    assert abs(est.estimate - g.at(0.0, 2.0)) <= 3 * est.std_error + 1e-4


def test_zero_horizon(base_model):
    assert simulate_direct(base_model, 3, 5.0, 0.0, 1000, 0).estimate == 0.0
    assert simulate_is(base_model, 3, 5.0, 0.0, 1000, 0).estimate == 0.0


def test_is_matches_exact(base_model):
    g = exact.pn_grid(base_model, 2, u=5.0, t_max=3.0)
    est = simulate_is(base_model, 2, 5.0, 3.0, 200_000, 4)
    assert abs(est.estimate - g.at(5.0, 3.0)) <= 3 * est.std_error


def test_is_reduces_variance(base_model):
    for n in (1, 3):
        a = simulate_is(base_model, n, 5.0, 2.0, 100_000, 5)
        b = simulate_direct(base_model, n, 5.0, 2.0, 100_000, 5)
        assert a.variance < b.variance
        assert a.ci95[0] <= b.ci95[1] and b.ci95[0] <= a.ci95[1]


def test_is_weight_bound_diagnostics(base_model):
    est = simulate_is(base_model, 4, 5.0, 3.0, 50_000, 6)
    assert est.diagnostics["paper_bound_ok"] == 1.0
    rep = decay_rate(base_model, 5.0 / 4, 3.0)
    assert est.diagnostics["rate"] == pytest.approx(rep.rate)
    assert 0 < est.diagnostics["max_weight"]


def test_determinism_and_workers(base_model):
    a = simulate_is(base_model, 3, 5.0, 2.0, 40_000, 9)
    b = simulate_is(base_model, 3, 5.0, 2.0, 40_000, 9)
    c = simulate_is(base_model, 3, 5.0, 2.0, 40_000, 9, workers=2)
    assert a == b
    assert a.estimate == c.estimate and a.variance == c.variance
    assert simulate_is(base_model, 3, 5.0, 2.0, 40_000, 10).estimate != a.estimate


def test_csv_row(base_model):
    est = simulate_direct(base_model, 2, 5.0, 1.0, 1000, 3)
    row = est.csv_row(2, 5.0, 1.0)
    assert dict(zip(est.CSV_FIELDS, row))["method"] == "direct"
    assert len(row) == len(est.CSV_FIELDS)


def test_input_checks(base_model, exp_loss):
    with pytest.raises(ValidationError):
        simulate_direct(base_model, 0, 5.0, 1.0, 10, 0)
    with pytest.raises(ValidationError):
        simulate_direct(base_model, 2, 5.0, 1.0, 0, 0)
    brown = PortfolioModel.proportional(2, 0.9, 1.0, exp_loss, sigma2=(0.1, 0.1))
    with pytest.raises(ValidationError):
        simulate_direct(brown, 2, 5.0, 1.0, 10, 0)
    bad = PortfolioModel.proportional(2, 2.0, 0.5, exp_loss)
    with pytest.raises(RarityViolation):
        simulate_is(bad, 2, 0.4, 1.0, 10, 0)


def test_direct_with_nondefault_stream(exp_loss):
    m = PortfolioModel.proportional(1, 0.9, 1.0, exp_loss, nondefault=NonDefaultStream((0.2,), exp_loss))
    plain = PortfolioModel.proportional(1, 0.9, 1.0, exp_loss)
    a = simulate_direct(m, 1, 2.0, 1.0, 100_000, 3)
    b = simulate_direct(plain, 1, 2.0, 1.0, 100_000, 3)
    assert a.estimate > b.estimate + 3 * math.hypot(a.std_error, b.std_error)


# tilted default times ------------------------------------------------------

def tilted_cdf(v, lam, r, alpha, s):
    lbar = 1.0 / (1.0 - alpha)
    k = lam + r * alpha
    head = lbar * lam / k * -np.expm1(-k * np.minimum(v, s))
    tail = math.exp(-r * alpha * s) * (np.exp(-lam * s) - np.exp(-lam * np.maximum(v, s)))
    om = lbar * lam / k * -math.expm1(-k * s) + math.exp(-(r * alpha + lam) * s)
    return (head + tail) / om


def test_zero_tilt_is_untilted(base_model):
    rng = np.random.default_rng(1)
    x = sample_tilted_default_time(base_model, 2.0, 0.0, rng, 100_000)
    assert stats.kstest(x, stats.expon(scale=1 / 0.9).cdf).pvalue > 0.01
    tm = tilted_measure(base_model, 2.0, 0.0)
    assert tm.window_weight == pytest.approx(1 - math.exp(-1.8), abs=1e-14)


def test_large_tilt_against_inverse_cdf(base_model):
    rng = np.random.default_rng(2)
    x = sample_tilted_default_time(base_model, 2.0, 0.95, rng, 100_000)
    assert x.mean() < 1 / 0.9
    assert stats.kstest(x, lambda v: tilted_cdf(v, 0.9, 1.0, 0.95, 2.0)).pvalue > 0.01


def test_tilted_density_normalised(base_model):
    lam, r, a, s = 0.9, 1.0, 0.5, 2.0
    tm = tilted_measure(base_model, s, a)
    lbar = 2.0

    def dens(v):
        w = lbar * math.exp(-a * r * v) if v <= s else math.exp(-a * r * s)
        return lam * math.exp(-lam * v) * w / tm.omega

    head = integrate.quad(dens, 0, s)[0]
    tail = integrate.quad(dens, s, math.inf)[0]
    assert head + tail == pytest.approx(1.0, abs=1e-10)
    assert head == pytest.approx(tm.window_weight, abs=1e-10)
    assert tm.omega == pytest.approx(omega(base_model, s, a), rel=1e-14)
    with pytest.raises(ValidationError):
        sample_tilted_default_time(base_model, s, 1.0, np.random.default_rng(0))


def test_alpha_table_accuracy(base_model):
    table = AlphaTable(base_model, 0.1, 5.0)
    for s in (0.003, 0.2, 1.7, 4.9):
        exact_a = legendre(base_model, 0.1, s).alpha_star
        assert float(table(s)) == pytest.approx(exact_a, rel=2e-3)


# decay sequence ------------------------------------------------------------

def test_decay_sequence_small_scale(base_model):
    seq = simulate.decay_sequence(base_model, 5.0, 1.0, [1], 200_000, 3)
    assert seq[0][0] == 1
    p = p1_closed(5.0, 1.0)
    assert seq[0][1] == pytest.approx(-math.log(p), rel=2e-3)
    assert seq[0][1] >= decay_rate(base_model, 5.0, 1.0).rate


def test_unreachable_reserve(base_model):
    est = simulate_direct(base_model, 2, 50.0, 1.0, 10_000, 0)
    assert est.estimate == 0.0
    assert est.ci95 == (0.0, 3.0 / 10_000)
