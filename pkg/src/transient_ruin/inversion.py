"""Numerical Laplace inversion of ruin transforms.

psi(gamma) = int_0^inf e^{-gamma u} p(u) du is inverted in u by Bromwich
summation with Euler acceleration (Abate and Whitt) or by fixed Talbot. The
theta-slot is int_0^inf theta e^{-theta t} p(t) dt, so inverting in t means
dividing by theta and inverting once more; the inner inversion in u then runs
at complex theta and uses the two-sided Bromwich sum.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import comb

from .errors import InversionError, ValidationError

log = logging.getLogger(__name__)

PRECISION_FLOOR = 1e-10
TAIL_TOLERANCE = 1e-3


@dataclass(frozen=True)
class InversionSettings:
    """Parameters of a single inversion.

    ``shift`` is the Bromwich contour parameter A (the discretization error
    is about e^{-A}); when left out it follows from ``precision``. Talbot
    uses ``m1`` contour nodes.
    """

    algorithm: str = "euler"
    m1: int = 40
    m2: int = 12
    precision: float = 1e-8
    shift: Optional[float] = None

    def __post_init__(self):
        if self.algorithm not in ("euler", "talbot"):
            raise ValidationError(f"unknown inversion algorithm {self.algorithm!r}")
        if int(self.m1) != self.m1 or self.m1 < 10:
            raise ValidationError("m1 must be an integer of at least 10")
        if int(self.m2) != self.m2 or self.m2 < 1:
            raise ValidationError("m2 must be a positive integer")
        if not self.precision >= PRECISION_FLOOR:
            raise ValidationError(f"precision below the floor of {PRECISION_FLOOR:g}")
        if self.shift is not None and not self.shift > 0:
            raise ValidationError("shift must be positive")

    @property
    def contour_shift(self) -> float:
        if self.shift is not None:
            return float(self.shift)
        return -math.log(self.precision) + 1.0


# outer (t) and inner (u) settings of the iterated inversion
OUTER_DEFAULT = InversionSettings(precision=1e-7)
INNER_DEFAULT = InversionSettings(precision=PRECISION_FLOOR, shift=27.0)


@dataclass(frozen=True)
class InversionResult:
    value: float
    raw: complex
    error_estimate: float
    clamped: bool


def _call(transform, points):
    points = np.asarray(points)
    try:
        out = np.asarray(transform(points), dtype=complex)
    except (TypeError, ValueError):
        out = None
    if out is None or out.shape != points.shape:
        out = np.array([complex(transform(p)) for p in points.ravel()]).reshape(points.shape)
    return out


def _euler_weights(m2: int) -> np.ndarray:
    return comb(m2, np.arange(m2 + 1)) / 2.0**m2


def _euler(transform, x: float, settings: InversionSettings, symmetric: bool):
    """Euler-accelerated Bromwich sum; returns (value, error estimate, tail)."""
    a = settings.contour_shift
    m1, m2 = settings.m1, settings.m2
    k = np.arange(m1 + m2 + 2)
    nodes = (a + 2j * np.pi * k) / (2.0 * x)
    upper = _call(transform, nodes)
    if symmetric:
        pair = 2.0 * upper.real.astype(complex)
    else:
        lower = _call(transform, np.conj(nodes[1:]))
        pair = np.concatenate(([0.0], upper[1:] + lower))
    terms = np.where(k % 2 == 0, 1.0, -1.0) * pair
    terms[0] = upper[0].real if symmetric else upper[0]
    partial = np.cumsum(terms) * (math.exp(a / 2.0) / (2.0 * x))
    if not np.all(np.isfinite(partial)):
        raise InversionError("non-finite Bromwich partial sums",
                             {"x": x, "shift": a, "partial_sums": partial[-4:].tolist()})
    w = _euler_weights(m2)
    first = complex(w @ partial[m1:m1 + m2 + 1])
    second = complex(w @ partial[m1 + 1:m1 + m2 + 2])
    tail = partial[m1:].tolist()
    return first, abs(first - second), tail


def _talbot(transform, x: float, settings: InversionSettings, symmetric: bool):
    """Fixed Talbot with m1 nodes; the error estimate compares against m1 // 2 nodes."""
    value = _talbot_value(transform, x, settings.m1, symmetric)
    coarse = _talbot_value(transform, x, max(10, settings.m1 // 2), symmetric)
    if not np.isfinite(value):
        raise InversionError("non-finite Talbot sum", {"x": x, "nodes": settings.m1})
    return complex(value), abs(value - coarse), []


def _talbot_value(transform, x, m, symmetric):
    """The transform must be analytic off the negative real axis."""
    r = 2.0 * m / (5.0 * x)
    theta = np.pi * np.arange(1, m) / m
    cot = 1.0 / np.tan(theta)
    s = r * theta * (cot + 1j)
    sigma = theta + (theta * cot - 1.0) * cot
    f0 = complex(_call(transform, np.array([r + 0j]))[0])
    upper = np.exp(x * s) * _call(transform, s) * (1.0 + 1j * sigma)
    if symmetric:
        return (r / m) * (0.5 * f0.real * math.exp(r * x) + np.sum(upper.real))
    lower = np.exp(x * np.conj(s)) * _call(transform, np.conj(s)) * (1.0 - 1j * sigma)
    return (r / m) * (0.5 * f0 * math.exp(r * x) + 0.5 * np.sum(upper + lower))


def _invert(transform, x, settings, symmetric):
    if settings.algorithm == "talbot":
        return _talbot(transform, x, settings, symmetric)
    return _euler(transform, x, settings, symmetric)


def _clamp(raw: complex, err: float, where: str) -> InversionResult:
    val = raw.real
    clipped = min(max(val, 0.0), 1.0)
    if clipped != val:
        log.info("clamped inverted value %.17g at %s to %.17g", val, where, clipped)
    return InversionResult(clipped, raw, err, clipped != val)


def _check_tail(value, err, tail, tolerance, x):
    if not err <= tolerance:
        raise InversionError(
            f"inversion tail did not settle (change {err:.3g})",
            {"x": x, "error_estimate": err, "partial_sums": [complex(v) for v in tail[-6:]],
             "value": complex(value)})


def invert_in_u_detail(transform: Callable, u: float, settings: InversionSettings = InversionSettings(),
                       symmetric: bool = True, tolerance: float = TAIL_TOLERANCE) -> InversionResult:
    """Like ``invert_in_u`` but returns the pre-clamp value and error estimate too."""
    if not u > 0:
        raise ValidationError("u must be positive")
    raw, err, tail = _invert(transform, float(u), settings, symmetric)
    _check_tail(raw, err, tail, tolerance, u)
    return _clamp(raw, err, f"u={u:g}")


def invert_in_u(transform: Callable, u: float, settings: InversionSettings = InversionSettings()) -> float:
    """p(u) from psi(gamma) = int e^{-gamma u} p(u) du, clamped to [0, 1].

    ``transform`` takes an array of complex gamma and must satisfy
    psi(conj gamma) = conj psi(gamma), which holds for any real theta.
    """
    return invert_in_u_detail(transform, u, settings).value


def _exp_horizon(double_transform, u, inner):
    """theta -> p_hat(theta), the ruin probability before an Exp(theta) clock."""
    def p_hat(thetas):
        thetas = np.atleast_1d(np.asarray(thetas, dtype=complex))
        out = np.empty(thetas.shape, dtype=complex)
        for i, th in enumerate(thetas.ravel()):
            def in_u(gamma, th=th):
                return double_transform(gamma, th)
            raw, err, tail = _invert(in_u, u, inner, symmetric=(th.imag == 0))
            _check_tail(raw, err, tail, TAIL_TOLERANCE, u)
            out.flat[i] = raw
        return out

    return p_hat


def invert_in_u_t_detail(double_transform: Callable, u: float, t: float,
                         settings: InversionSettings = OUTER_DEFAULT,
                         inner: InversionSettings = INNER_DEFAULT) -> InversionResult:
    """Like ``invert_in_u_t`` but returns the pre-clamp value and error estimate too."""
    if not (u > 0 and t > 0):
        raise ValidationError("u and t must be positive")
    if settings.algorithm != "euler":
        raise ValidationError("the t-direction is inverted by Euler summation only")
    p_hat = _exp_horizon(double_transform, float(u), inner)

    def laplace_in_t(theta):
        theta = np.asarray(theta, dtype=complex)
        return p_hat(theta) / theta

    raw, err, tail = _euler(laplace_in_t, float(t), settings, symmetric=True)
    _check_tail(raw, err, tail, TAIL_TOLERANCE, t)
    return _clamp(raw, err, f"u={u:g}, t={t:g}")


def invert_in_u_t(double_transform: Callable, u: float, t: float,
                  settings: InversionSettings = OUTER_DEFAULT,
                  inner: InversionSettings = INNER_DEFAULT) -> float:
    """p(u, t) from the double transform (gamma, theta) -> psi.

    The theta-slot carries the factor theta, so p_hat(theta) / theta is the
    ordinary Laplace transform in t. ``settings`` governs the t-direction and
    ``inner`` the u-direction, which run at complex theta.
    """
    return invert_in_u_t_detail(double_transform, u, t, settings, inner).value


# ---------------------------------------------------------------------------
# model-level helpers

def ruin_transform(model, n: Optional[int] = None, continuation: bool = False):
    """(gamma, theta) -> psi_n for a validated model, picking the matching recursion.

    ``continuation`` (base recursion only) lets fixed Talbot evaluate left of
    the imaginary axis; that is valid for losses whose transform has only
    poles, so deterministic losses are refused.
    """
    from . import transforms

    if continuation:
        if model.nondefault is not None or (model.sigma2 is not None and any(v > 0 for v in model.sigma2)):
            raise ValidationError("fixed Talbot is available for the base recursion only")
        if model.loss.kind == "deterministic":
            raise ValidationError("fixed Talbot needs a loss transform without essential singularities")

        def f(gamma, theta):
            return transforms.psi(model, gamma, theta, n, continuation=True)
    elif model.nondefault is not None:
        def f(gamma, theta):
            return transforms.psi_nondefault(model, gamma, theta, n)
    elif model.sigma2 is not None and any(v > 0 for v in model.sigma2):
        def f(gamma, theta):
            return transforms.psi_brownian(model, gamma, theta, n)
    else:
        def f(gamma, theta):
            return transforms.psi(model, gamma, theta, n)
    return f


def exp_horizon_ruin(model, u: float, theta: float, n: Optional[int] = None,
                     settings: InversionSettings = InversionSettings()) -> float:
    """Ruin probability before an independent Exp(theta) clock, by inversion in u."""
    f = ruin_transform(model, n, continuation=settings.algorithm == "talbot")
    return invert_in_u(lambda g: f(g, theta), u, settings)


def ruin_probability(model, u: float, t: float, n: Optional[int] = None,
                     settings: InversionSettings = OUTER_DEFAULT,
                     inner: InversionSettings = INNER_DEFAULT) -> float:
    """p_n(u, t) by iterated inversion of the model's transform."""
    return invert_in_u_t(ruin_transform(model, n), u, t, settings, inner)
