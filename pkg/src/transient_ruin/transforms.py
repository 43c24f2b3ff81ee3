"""Double transform psi_n(gamma) of the ruin probability.

psi_n(gamma) is the Laplace transform in the initial reserve u of the
probability of ruin before an independent exponential clock with rate theta.
Internally every recursion works with phi_n = 1 - gamma psi_n = E exp(-gamma Z_n),
where Z_n is the maximal net loss, because phi_n is analytic and bounded on
the right half-plane and its only apparent singularities are removable.
Those are handled by ``NodeGrid``.

Complex gamma (and, for the base and Brownian variants, complex theta) are
accepted so that the numerical inversion can evaluate on Bromwich contours.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize

from ._nodes import NodeGrid
from .errors import NumericalError, RootFindingError, ValidationError
from .model import LossDistribution, MultiGroupModel, PortfolioModel

VARIANTS = ("base", "brownian", "nondefault", "multigroup")
DEFAULT_LATTICE_CAP = 10**6


@dataclass(frozen=True)
class TransformQuery:
    gamma: complex
    theta: float = 0.0
    n: object = None
    variant: str = "base"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")


@dataclass(frozen=True)
class TransformValue:
    query: TransformQuery
    value: complex
    method: str
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class NonDefaultState:
    """Per-level constants A_k and positive roots gamma_bar_k."""

    A: tuple
    gamma_bar: tuple
    residuals: tuple


@dataclass(frozen=True)
class WienerHopfFactors:
    nu_plus: complex
    nu_minus: complex


# ---------------------------------------------------------------------------
# argument handling

def _prepare_gamma(gamma, continuation=False):
    g = np.asarray(gamma)
    scalar = g.ndim == 0
    flat = np.atleast_1d(g).astype(complex).ravel()
    if np.any(~np.isfinite(flat)):
        raise ValidationError("gamma must be finite")
    if continuation:
        if np.any(flat == 0):
            raise ValidationError("gamma = 0 is not evaluated")
    elif np.any(flat.real <= 0):
        raise ValidationError("gamma must have a positive real part")
    return g, flat, scalar


def _finish(values, template, scalar, real):
    out = values.reshape(np.shape(template)) if not scalar else values[0]
    if real:
        out = np.real(out)
        return float(out) if scalar else out
    return complex(out) if scalar else out


def _check_theta(theta, allow_complex=True):
    th = complex(theta)
    if not allow_complex and th.imag != 0:
        raise ValidationError("this variant needs a real theta")
    if th.real < 0 or (th.real == 0 and th.imag != 0):
        raise ValidationError("theta must be nonnegative (or have a positive real part)")
    return th


def _levels(model: PortfolioModel, n):
    n = model.n_max if n is None else int(n)
    if n < 0 or n > model.n_max:
        raise ValidationError(f"level n={n} outside 0..{model.n_max}")
    return n


def _is_real(gamma_flat, theta):
    return bool(np.all(gamma_flat.imag == 0) and complex(theta).imag == 0)


# ---------------------------------------------------------------------------
# Wiener-Hopf factors

def wiener_hopf_factors(r: float, sigma2: float, rate) -> WienerHopfFactors:
    """Rates of the maximum and of the drop after it for sigma*B(t) - r*t over Exp(rate).

    nu_plus * nu_minus = 2 rate / sigma2 and nu_plus - nu_minus = 2 r / sigma2.
    """
    if not sigma2 > 0:
        raise ValidationError("Wiener-Hopf factors need a positive variance")
    root = np.sqrt(complex(r * r + 2.0 * rate * sigma2))
    nu_minus = 2.0 * rate / (root + r)
    nu_plus = (root + r) / sigma2
    if complex(rate).imag == 0:
        nu_minus, nu_plus = nu_minus.real, nu_plus.real
    return WienerHopfFactors(nu_plus, nu_minus)


# ---------------------------------------------------------------------------
# base and Brownian recursions

def _level_params(model, theta, n, brownian):
    params = []
    for k in range(1, n + 1):
        lam, r = model.rates(k)
        big = lam + theta
        s2 = model.sigma2[k - 1] if (brownian and model.sigma2 is not None) else 0.0
        if s2 > 0:
            wh = wiener_hopf_factors(r, s2, big)
            params.append((lam / big, wh.nu_minus, wh.nu_plus))
        else:
            params.append((lam / big, big / r, None))
    return params


def _run_levels(loss, params, grid, start=None):
    z = grid.points
    ell = loss.laplace(z)
    phi = np.ones(z.size, dtype=complex) if start is None else start
    handles = {}
    for c, node, nu_plus in params:
        key = complex(node)
        if key not in handles:
            handles[key] = grid.handle(key)
        h_node = loss.laplace(key) * NodeGrid.value(phi, handles[key])
        h = ell * phi
        phi = (1.0 - c) + c * (h_node - node * (h - h_node) / (z - node))
        if nu_plus is not None:
            phi = phi * (nu_plus / (z + nu_plus))
        grid.project(phi)
    return phi


def _phi_recursion(model, gamma_flat, theta, n, brownian):
    params = _level_params(model, theta, n, brownian)
    loss = model.loss
    left = -loss.mgf_domain_sup
    poles = [p[2] for p in params if p[2] is not None]
    if poles:
        left = max(left, max(-complex(v).real for v in poles))
    grid = NodeGrid(gamma_flat, [p[1] for p in params],
                    gain=lambda z: np.abs(loss.laplace(z)), left=left)
    # a directly evaluated node meets 0/0 at its own level; that value is never read
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = _run_levels(model.loss, params, grid)
    return grid.evaluate(phi, gamma_flat)


def psi(model: PortfolioModel, gamma, theta=0.0, n: Optional[int] = None, *,
        continuation: bool = False):
    """psi_n(gamma) by the general-rate recursion started from psi_0 = 0.

    Uses the default rates, income rates and loss law only; Brownian
    variances and non-default streams are ignored here. ``continuation``
    admits gamma with Re gamma <= 0, where the recursion gives the analytic
    continuation (used by contour inversions that leave the half-plane).
    """
    n = _levels(model, n)
    theta = _check_theta(theta)
    g, flat, scalar = _prepare_gamma(gamma, continuation)
    if n == 0:
        return _finish(np.zeros(flat.size, dtype=complex), g, scalar, _is_real(flat, theta))
    phi = _phi_recursion(model, flat, _plain(theta), n, brownian=False)
    return _finish((1.0 - phi) / flat, g, scalar, _is_real(flat, theta))


def _plain(theta):
    return theta.real if theta.imag == 0 else theta


def psi_brownian(model: PortfolioModel, gamma, theta=0.0, n: Optional[int] = None):
    """psi_n(gamma) when the reserve moves as Brownian motion with drift between defaults.

    Levels with zero variance use the plain drift recursion.
    """
    if model.sigma2 is None:
        raise ValidationError("model has no Brownian variances")
    n = _levels(model, n)
    theta = _check_theta(theta)
    g, flat, scalar = _prepare_gamma(gamma)
    if n == 0:
        return _finish(np.zeros(flat.size, dtype=complex), g, scalar, _is_real(flat, theta))
    phi = _phi_recursion(model, flat, _plain(theta), n, brownian=True)
    return _finish((1.0 - phi) / flat, g, scalar, _is_real(flat, theta))


# ---------------------------------------------------------------------------
# non-default losses

def _denominator_root(big, r, lam_nd, loss_nd: LossDistribution):
    """Unique positive zero of big - x r - lam_nd * l_nd(x)."""
    def f(x):
        return big - x * r - lam_nd * float(loss_nd.laplace(x))

    hi = big / r
    while f(hi) >= 0:
        hi *= 2.0
        if hi > 1e12:
            raise RootFindingError("no sign change for the non-default root", (0.0, hi))
    scan = np.linspace(0.0, 2.0 * hi, 257)
    vals = np.array([f(x) for x in scan])
    changes = int(np.count_nonzero(np.diff(np.sign(vals)) != 0))
    if changes != 1:
        raise RootFindingError(f"expected one positive root, saw {changes} sign changes",
                               (0.0, 2.0 * hi), (vals.min(), vals.max()))
    root = optimize.bisect(f, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=400)
    resid = abs(f(root))
    if resid > 1e-12 * max(1.0, big):
        raise RootFindingError(f"bisection residual {resid:.3g}", (0.0, hi))
    return root


def _nondefault_run(model, gamma_flat, theta, n):
    with np.errstate(divide="ignore", invalid="ignore"):
        return _nondefault_levels(model, gamma_flat, theta, n)


def _nondefault_levels(model, gamma_flat, theta, n):
    nd = model.nondefault
    loss, loss_nd = model.loss, nd.loss
    levels = []
    nodes = []
    for k in range(1, n + 1):
        lam, r = model.rates(k)
        lam_nd = nd.lam[k - 1]
        big = lam + lam_nd + theta
        d = big / r
        gbar = _denominator_root(big, r, lam_nd, loss_nd) if lam_nd > 0 else None
        levels.append((lam, lam_nd, big, r, d, gbar))
        nodes.append(d)
        if gbar is not None:
            nodes.append(gbar)
    # with an active stream, D - lam_nd l_nd has a second zero in the left half-plane
    left = 0.0 if any(v > 0 for v in nd.lam[:n]) else -loss.mgf_domain_sup
    grid = NodeGrid(gamma_flat, nodes, gain=lambda x: np.abs(loss.laplace(x)), left=left)
    z = grid.points
    ell = loss.laplace(z)
    ell_nd = loss_nd.laplace(z)
    phi = np.ones(z.size, dtype=complex)
    A, roots, resids = [], [], []
    for lam, lam_nd, big, r, d, gbar in levels:
        h_d = loss.laplace(d) * NodeGrid.value(phi, grid.handle(d))
        G = (lam / r) * (h_d / d - (ell * phi - h_d) / (z - d))
        D = big - z * r
        if gbar is None:
            phi = grid.project(theta / big + G)
            A.append(0.0)
            roots.append(math.nan)
            resids.append(0.0)
            continue
        G_bar = NodeGrid.value(G, grid.handle(gbar)).real
        D_bar = big - gbar * r
        F_bar = ((lam + lam_nd) / big - G_bar) / gbar
        l_bar = float(loss_nd.laplace(gbar))
        a_k = l_bar / gbar - F_bar * D_bar / lam_nd
        numer_bar = D_bar * (theta / big + G_bar) - lam_nd * gbar * a_k
        scale = abs(D_bar) * abs(theta / big + G_bar) + abs(lam_nd * gbar * a_k) + 1e-300
        if abs(numer_bar) > 1e-10 * max(scale, 1.0):
            raise NumericalError(f"non-default constant fails the numerator check ({numer_bar:.3g})")
        phi = (D * (theta / big + G) - lam_nd * z * a_k) / (D - lam_nd * ell_nd)
        grid.project(phi)
        A.append(a_k)
        roots.append(gbar)
        resids.append(abs(numer_bar))
    state = NonDefaultState(tuple(A), tuple(roots), tuple(resids))
    return grid.evaluate(phi, gamma_flat), state


def nondefault_state(model: PortfolioModel, theta=0.0, n: Optional[int] = None) -> NonDefaultState:
    """Constants A_k and roots gamma_bar_k for k = 1..n (nan where lambda_k° = 0)."""
    if model.nondefault is None:
        raise ValidationError("model has no non-default loss stream")
    n = _levels(model, n)
    theta = float(_check_theta(theta, allow_complex=False).real)
    _, state = _nondefault_run(model, np.array([1.0 + 0j]), theta, n)
    return state


def psi_nondefault(model: PortfolioModel, gamma, theta=0.0, n: Optional[int] = None):
    """psi_n(gamma) with extra losses that leave the obligor count unchanged."""
    if model.nondefault is None:
        raise ValidationError("model has no non-default loss stream")
    n = _levels(model, n)
    theta = float(_check_theta(theta, allow_complex=False).real)
    g, flat, scalar = _prepare_gamma(gamma)
    if n == 0:
        return _finish(np.zeros(flat.size, dtype=complex), g, scalar, _is_real(flat, theta))
    phi, _ = _nondefault_run(model, flat, theta, n)
    return _finish((1.0 - phi) / flat, g, scalar, _is_real(flat, theta))


# ---------------------------------------------------------------------------
# multiple groups

def psi_multigroup(mg: MultiGroupModel, gamma, theta=0.0, n=None, cap: int = DEFAULT_LATTICE_CAP):
    """psi_n(gamma) for heterogeneous groups, by recursion over the count lattice.

    The first event out of state m is a default in group j with rate
    lam_j m_j; total income is R = sum r_j m_j, so every group shares the
    node d = (sum lam_j m_j + theta) / R. The lattice is swept in
    lexicographic order and a state is dropped once its last successor is done.
    """
    counts = mg.counts if n is None else tuple(int(v) for v in n)
    if len(counts) != len(mg.groups) or any(v < 0 for v in counts):
        raise ValidationError("n must give a nonnegative count per group")
    cells = 1
    for v in counts:
        cells *= v + 1
    if cells > cap:
        raise ValidationError(f"lattice has {cells} cells, above the cap of {cap}")
    theta = _check_theta(theta)
    theta = _plain(theta)
    g, flat, scalar = _prepare_gamma(gamma)
    if sum(counts) == 0:
        return _finish(np.zeros(flat.size, dtype=complex), g, scalar, _is_real(flat, theta))
    lams = np.array([gr.lam for gr in mg.groups])
    rs = np.array([gr.r for gr in mg.groups])
    states = [m for m in itertools.product(*(range(v + 1) for v in counts)) if any(m)]
    nodes = {}
    for m in states:
        mv = np.array(m)
        nodes[m] = (float(lams @ mv) + theta) / float(rs @ mv)
    left = max(-gr.loss.mgf_domain_sup for gr in mg.groups)
    grid = NodeGrid(flat, list(nodes.values()), left=left,
                    gain=lambda z: np.max([np.abs(gr.loss.laplace(z)) for gr in mg.groups], axis=0))
    z = grid.points
    ells = [gr.loss.laplace(z) for gr in mg.groups]
    zero = tuple(0 for _ in counts)
    table = {zero: np.ones(z.size, dtype=complex)}
    first = next((j for j, v in enumerate(counts) if v > 0), 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        _sweep(mg, states, nodes, grid, ells, table, first, theta, counts)
    phi = table[counts]
    out = grid.evaluate(phi, flat)
    return _finish((1.0 - out) / flat, g, scalar, _is_real(flat, theta))


def _sweep(mg, states, nodes, grid, ells, table, first, theta, counts):
    z = grid.points
    lams = np.array([gr.lam for gr in mg.groups])
    for m in states:
        mv = np.array(m)
        big = float(lams @ mv) + theta
        d = nodes[m]
        hd_handle = grid.handle(d)
        phi = np.full(z.size, theta / big, dtype=complex)
        for j in range(len(counts)):
            if m[j] == 0:
                continue
            prev = table[m[:j] + (m[j] - 1,) + m[j + 1:]]
            c = lams[j] * m[j] / big
            h_d = mg.groups[j].loss.laplace(d) * NodeGrid.value(prev, hd_handle)
            h = ells[j] * prev
            phi = phi + c * (h_d - d * (h - h_d) / (z - d))
        table[m] = grid.project(phi)
        back = m[:first] + (m[first] - 1,) + m[first + 1:] if m[first] > 0 else None
        if back is not None and back in table:
            del table[back]


# ---------------------------------------------------------------------------
# limits and generating function

def psi_pk_limit(a: float, loss: LossDistribution, gamma):
    """psi(gamma) = 1/gamma - (1 + a l'(0)) / (gamma - a + a l(gamma)); needs a E L < 1."""
    if not a >= 0:
        raise ValidationError("a must be nonnegative")
    if a * loss.mean >= 1:
        raise ValidationError("net-profit condition a E L < 1 fails")
    g = np.asarray(gamma)
    if np.any(np.real(g) <= 0):
        raise ValidationError("gamma must be positive")
    out = 1.0 / g - (1.0 - a * loss.mean) / (g - a + a * loss.laplace(g))
    return float(out) if out.ndim == 0 and np.isrealobj(out) else out


def generating_root(z: float, a: float, loss: LossDistribution) -> float:
    """Unique positive root of a - gamma - z a l(gamma) for z in (0, 1)."""
    if not 0 < z < 1:
        raise ValidationError("z must lie in (0, 1)")
    if not a > 0:
        raise ValidationError("a must be positive")

    def nu(x):
        return a - x - z * a * float(loss.laplace(x))

    hi = max(1.0, a)
    while nu(hi) >= 0:
        hi *= 2.0
    root = optimize.bisect(nu, 0.0, hi, xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=500)
    if abs(nu(root)) > 1e-12:
        raise RootFindingError("generating root residual too large", (0.0, hi))
    return root


def generating_function(z: float, gamma, a: float, loss: LossDistribution):
    """Psi(z, gamma) = sum_{n>=1} z^n psi_n(gamma) for rates lam n, r n and theta = 0."""
    root = generating_root(z, a, loss)
    g = np.asarray(gamma, dtype=float)
    if np.any(g <= 0):
        raise ValidationError("gamma must be positive")
    if np.any(np.abs(g - root) <= 1e-9 * max(1.0, root)):
        raise NumericalError("evaluation at a pole of the generating function")

    def k(x):
        return (a - x - a * loss.laplace(x)) / x

    out = z / (1.0 - z) * (k(g) - k(root)) / (a - g - z * a * loss.laplace(g))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# dispatcher

def evaluate(model, query: TransformQuery) -> TransformValue:
    fn = {"base": psi, "brownian": psi_brownian, "nondefault": psi_nondefault,
          "multigroup": psi_multigroup}[query.variant]
    value = fn(model, query.gamma, query.theta, query.n)
    return TransformValue(query, value, method=f"recursion/{query.variant}")
