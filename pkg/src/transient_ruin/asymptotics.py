"""Large-deviations decay rates and the Lundberg-type bound.

For one obligor with default time T (density f), loss L and income rate r,
W(s) = 1{T <= s} L - r min(T, s) has moment generating function

    omega_s(alpha) = lbar(alpha) int_0^s f(v) e^{-r alpha v} dv + e^{-r alpha s} (1 - F(s)),

with lbar the loss mgf. The rate is I(s) = sup_alpha (alpha u - log omega_s(alpha))
and the portfolio decays like exp(-n I(t*)) with t* the minimiser of I on [0, t].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy import optimize

from .errors import NumericalError, RootFindingError, ValidationError
from .model import PortfolioModel, _obligor_time, require_rarity

FOC_TOL = 1e-8
GRID_POINTS = 200
GRID_START = 1e-3


@dataclass(frozen=True)
class LegendreResult:
    s: float
    alpha_star: float
    rate: float
    converged: bool


@dataclass(frozen=True)
class DecayReport:
    t_star: float
    rate: float
    alpha_star_sup: float
    endpoint_flags: Tuple[str, ...] = field(default_factory=tuple)


def _parts(model: PortfolioModel, s: float, alpha: float):
    """omega and its first two alpha-derivatives (inf beyond the mgf domain)."""
    loss = model.loss
    if alpha >= loss.mgf_domain_sup:
        return math.inf, math.inf, math.inf
    T = _obligor_time(model)
    r = model.obligor_r
    if s == 0:
        return 1.0, 0.0, 0.0
    p0, p1, p2 = T.partial_moments(s, r * alpha)
    if not math.isfinite(p0):
        return math.inf, math.inf, math.inf
    logm, d1, d2 = loss.log_mgf_derivatives(alpha)
    if logm > 700.0:
        return math.inf, math.inf, math.inf
    lbar = math.exp(logm)
    lb1 = lbar * d1
    lb2 = lbar * (d2 + d1 * d1)
    if math.isinf(s):
        tail0 = tail1 = tail2 = 0.0
        if T.kind == "tabulated" and T.total_mass < 1.0 and alpha <= 0:
            raise ValidationError("omega at s = inf needs alpha > 0 when T can be infinite")
    else:
        surv = float(T.survival(s))
        tail0 = math.exp(-r * alpha * s) * surv
        tail1 = -r * s * tail0
        tail2 = (r * s) ** 2 * tail0
    w0 = lbar * p0 + tail0
    w1 = lb1 * p0 - r * lbar * p1 + tail1
    w2 = lb2 * p0 - 2 * r * lb1 * p1 + r * r * lbar * p2 + tail2
    return w0, w1, w2


def omega(model: PortfolioModel, t: float, alpha: float) -> float:
    """omega_t(alpha) = E exp(alpha W(t)); math.inf outside the mgf domain."""
    if t < 0:
        raise ValidationError("t must be nonnegative")
    return _parts(model, float(t), float(alpha))[0]


def _closed_form_alpha_inf(lam, r, mu, u):
    disc = 4 * r * r + lam * lam * u * u + 2 * r * lam * mu * u * u + r * r * mu * mu * u * u
    return (-2 * r - lam * u + r * mu * u + math.sqrt(disc)) / (2 * r * u)


def kappa(model: PortfolioModel, u: float, alpha: float) -> float:
    """alpha u - log omega_inf(alpha), in closed form for exponential T and losses."""
    T = _obligor_time(model)
    if model.loss.kind == "exponential" and T.kind == "exponential":
        lam, r, mu = T.rate, model.obligor_r, model.loss.rate
        return alpha * u - math.log(lam * mu) + math.log(lam + r * alpha) + math.log(mu - alpha)
    return alpha * u - math.log(omega(model, math.inf, alpha))


def _foc(model, u, s, a):
    w0, w1, w2 = _parts(model, s, a)
    g = u - w1 / w0
    dg = -(w2 / w0 - (w1 / w0) ** 2)
    return g, dg


def _upper(model, u, s):
    """Right end of the search interval for alpha."""
    sup = model.loss.mgf_domain_sup
    if math.isfinite(sup):
        return sup * (1.0 - 1e-9), sup
    hi = 1.0
    while True:
        g = _foc(model, u, s, hi)[0] if math.isfinite(_parts(model, s, hi)[0]) else math.nan
        if not math.isfinite(g):
            raise NumericalError("no finite maximiser for the Legendre transform "
                                 "(u at or beyond the largest possible net loss)")
        if g <= 0:
            break
        hi *= 2.0
    return hi, hi


def _maximise(model, u, s):
    hi, width = _upper(model, u, s)
    lo = 1e-9 * width

    def neg(a):
        w0 = _parts(model, s, a)[0]
        return -(a * u - math.log(w0)) if math.isfinite(w0) and w0 > 0 else math.inf

    res = optimize.minimize_scalar(neg, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-12 * max(1.0, width)})
    a = float(res.x)
    left, right = lo, hi
    converged = False
    for _ in range(60):
        g, dg = _foc(model, u, s, a)
        if abs(g) < FOC_TOL:
            converged = True
            break
        if g > 0:
            left = a
        else:
            right = a
        step = a - g / dg if dg < 0 else math.nan
        a = step if left < step < right else 0.5 * (left + right)
    interior = converged and a < hi * (1 - 1e-7)
    return a, a * u - math.log(_parts(model, s, a)[0]), interior


def legendre(model: PortfolioModel, u: float, s: float) -> LegendreResult:
    """(alpha*(s), I(s)); s = 0 is the analytic branch alpha* = sup of the mgf domain."""
    require_rarity(model, u)
    if s < 0:
        raise ValidationError("s must be nonnegative")
    sup = model.loss.mgf_domain_sup
    if s == 0:
        return LegendreResult(0.0, sup, sup * u, True)
    T = _obligor_time(model)
    if math.isinf(s) and model.loss.kind == "exponential" and T.kind == "exponential":
        a = _closed_form_alpha_inf(T.rate, model.obligor_r, model.loss.rate, u)
        return LegendreResult(math.inf, a, kappa(model, u, a), True)
    a, rate, ok = _maximise(model, u, float(s))
    return LegendreResult(float(s), a, rate, ok)


def rate_curve(model: PortfolioModel, u: float, s_grid) -> List[LegendreResult]:
    """legendre at every s of a grid, for plotting (s, alpha*, I)."""
    return [legendre(model, u, float(s)) for s in s_grid]


def decreasing_at_infinity(model: PortfolioModel, u: float) -> bool:
    """Sign of I' as s grows: decreasing iff lam - r mu > -lam mu u (exponential case)."""
    T = _obligor_time(model)
    if model.loss.kind == "exponential" and T.kind == "exponential":
        lam, r, mu = T.rate, model.obligor_r, model.loss.rate
        return lam - r * mu > -lam * mu * u
    res = legendre(model, u, math.inf if T.kind == "exponential" else T.support_end)
    far = legendre(model, u, 0.5 * res.s if math.isfinite(res.s) else 1e3)
    return res.rate < far.rate


def decay_rate(model: PortfolioModel, u: float, t: float) -> DecayReport:
    """t* = argmin of I on [0, t], I(t*) and the supremum of alpha* over the grid."""
    require_rarity(model, u)
    if not t > 0:
        raise ValidationError("t must be positive")
    T = _obligor_time(model)
    far = t
    if math.isinf(t):
        far = 60.0 / T.rate if T.kind == "exponential" else T.support_end
    grid = np.geomspace(GRID_START, far, GRID_POINTS) if far > GRID_START else np.array([far])
    results = [legendre(model, u, 0.0)] + [legendre(model, u, float(s)) for s in grid]
    if math.isinf(t):
        results.append(legendre(model, u, math.inf))
    rates = np.array([r.rate for r in results])
    finite = [r.alpha_star for r in results if math.isfinite(r.alpha_star)]
    alpha_sup = max(finite)
    k = int(np.argmin(rates))
    if math.isinf(t) and rates[-1] <= rates[k] + 1e-12 * (1.0 + abs(rates[k])):
        # I has flattened out onto its limit; the infimum is approached at infinity
        k = len(results) - 1
    flags = []
    best = results[k]
    if 0 < k < len(results) - 1:
        a_s = results[k - 1].s
        b_s = results[k + 1].s
        if math.isfinite(b_s):
            res = optimize.minimize_scalar(lambda s: legendre(model, u, s).rate,
                                           bounds=(a_s, b_s), method="bounded",
                                           options={"xatol": 1e-6})
            cand = legendre(model, u, float(res.x))
            if cand.rate <= best.rate:
                best = cand
    else:
        flags.append("endpoint")
    if k == len(results) - 1:
        flags.append("infinite" if math.isinf(best.s) else "right_endpoint")
    if k == 0:
        flags.append("left_endpoint")
    if len(finite) < len(results):
        # lbar is entire, so alpha* grows without bound as s -> 0
        flags.append("alpha_star_unbounded_at_zero")
    if not all(r.converged for r in results):
        flags.append("unconverged_alpha")
    if decreasing_at_infinity(model, u):
        flags.append("decreasing_at_infinity")
    return DecayReport(best.s, best.rate, alpha_sup, tuple(flags))


# ---------------------------------------------------------------------------
# Lundberg-type bound

def lundberg_gamma(model: PortfolioModel, n: int) -> float:
    """Positive root of lbar(gamma) lam_n / (lam_n + gamma r_n) = 1."""
    if int(n) != n or not 1 <= n <= model.n_max:
        raise ValidationError(f"level n={n} outside 1..{model.n_max}")
    lam, r = model.rates(int(n))
    loss = model.loss
    if not lam * loss.mean < r:
        raise RootFindingError("no positive root: lam_n E L >= r_n", (0.0, math.inf))

    def h(g):
        logm = loss.log_mgf_derivatives(g)[0]
        return logm + math.log(lam) - math.log(lam + g * r)

    def dh(g):
        return loss.log_mgf_derivatives(g)[1] - r / (lam + g * r)

    sup = loss.mgf_domain_sup
    top = sup * (1.0 - 1e-12) if math.isfinite(sup) else 1.0
    if not math.isfinite(sup):
        while h(top) <= 0:
            top *= 2.0
            if top > 1e12:
                raise RootFindingError("no sign change for the Lundberg root", (0.0, top))
    # h is convex with h(0) = 0 and h'(0) < 0; start the bracket at its minimiser
    lo = optimize.brentq(dh, 0.0, top, xtol=1e-15) if dh(top) > 0 else 0.0
    if h(top) <= 0:
        raise RootFindingError("no sign change for the Lundberg root", (lo, top), (h(lo), h(top)))
    root = optimize.bisect(h, lo, top, xtol=1e-15, maxiter=500)
    if abs(h(root)) > 1e-12:
        raise RootFindingError(f"Lundberg residual {abs(h(root)):.3g}", (lo, top))
    return float(root)


def lundberg_bound(model: PortfolioModel, n: int, u: float):
    """(e^{-gamma_n u}, whether gamma_1 >= ... >= gamma_n holds to 1e-12)."""
    if u < 0:
        raise ValidationError("u must be nonnegative")
    gammas = [lundberg_gamma(model, k) for k in range(1, int(n) + 1)]
    ok = all(b <= a + 1e-12 for a, b in zip(gammas[:-1], gammas[1:]))
    return math.exp(-gammas[-1] * u), ok
