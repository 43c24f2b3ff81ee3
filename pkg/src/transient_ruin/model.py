"""Portfolio data types, loss and default-time laws, and model validation.

All types are frozen dataclasses holding tuples, so a validated model is
hashable, comparable and safe to share between threads or processes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .errors import RarityViolation, ValidationError

LOSS_KINDS = ("exponential", "deterministic", "erlang")
TIME_KINDS = ("exponential", "tabulated")


def _e1(x):
    # (1 - e^{-x}) / x, stable near 0
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 - x / 2.0, -np.expm1(-safe) / safe)


def _e2(x):
    # (1 - e^{-x}(1 + x)) / x^2, stable near 0
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, x)
    big = (-np.expm1(-safe) - safe * np.exp(-safe)) / safe**2
    return np.where(small, 0.5 - x / 3.0 + x * x / 8.0, big)


@dataclass(frozen=True)
class LossDistribution:
    """Law of a single loss L >= 0.

    ``rate`` is used by the exponential and Erlang kinds, ``value`` by the
    deterministic kind and ``shape`` by the Erlang kind.
    """

    kind: str
    rate: float = 1.0
    value: float = 0.0
    shape: int = 1

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValidationError(f"unknown loss kind {self.kind!r}")
        object.__setattr__(self, "rate", float(self.rate))
        object.__setattr__(self, "value", float(self.value))
        if self.kind == "erlang":
            if int(self.shape) != self.shape or self.shape < 1:
                raise ValidationError("erlang shape must be a positive integer")
        object.__setattr__(self, "shape", int(self.shape))
        if self.kind in ("exponential", "erlang") and not self.rate > 0:
            raise ValidationError("nonpositive rate in loss law")
        if self.kind == "deterministic" and not self.value >= 0:
            raise ValidationError("deterministic loss must be nonnegative")
        if not all(math.isfinite(v) for v in (self.rate, self.value)):
            raise ValidationError("loss parameters must be finite")

    @classmethod
    def exponential(cls, rate: float) -> "LossDistribution":
        return cls("exponential", rate=rate)

    @classmethod
    def deterministic(cls, value: float) -> "LossDistribution":
        return cls("deterministic", value=value)

    @classmethod
    def erlang(cls, shape: int, rate: float) -> "LossDistribution":
        return cls("erlang", rate=rate, shape=shape)

    @property
    def mgf_domain_sup(self) -> float:
        return math.inf if self.kind == "deterministic" else self.rate

    @property
    def singular_points(self) -> tuple:
        """Poles of the Laplace transform in the complex plane."""
        return () if self.kind == "deterministic" else (-self.rate,)

    @property
    def mean(self) -> float:
        if self.kind == "deterministic":
            return self.value
        return self.shape / self.rate

    def laplace(self, g):
        """E exp(-g L); accepts real or complex arrays."""
        g = np.asarray(g)
        if self.kind == "deterministic":
            return np.exp(-self.value * g)
        base = self.rate / (self.rate + g)
        return base if self.shape == 1 else base**self.shape

    def mgf(self, a):
        """E exp(a L) for real a, +inf on and beyond the domain boundary."""
        a = np.asarray(a, dtype=float)
        if self.kind == "deterministic":
            return np.exp(self.value * a)
        inside = a < self.rate
        safe = np.where(inside, a, 0.0)
        val = (self.rate / (self.rate - safe)) ** self.shape
        return np.where(inside, val, np.inf)

    def log_mgf_derivatives(self, a: float):
        """(log mgf, first derivative, second derivative) at a < domain sup."""
        if self.kind == "deterministic":
            return self.value * a, self.value, 0.0
        gap = self.rate - a
        k = self.shape
        return k * math.log(self.rate / gap), k / gap, k / gap**2

    def sample(self, rng: np.random.Generator, size):
        if self.kind == "deterministic":
            return np.full(size, self.value)
        if self.shape == 1:
            return rng.exponential(1.0 / self.rate, size)
        return rng.gamma(self.shape, 1.0 / self.rate, size)

    def sample_tilted(self, alpha, rng: np.random.Generator, size):
        """Sample from the law with density proportional to e^{alpha x} P(L in dx)."""
        if self.kind == "deterministic":
            return np.full(size, self.value)
        gap = self.rate - np.asarray(alpha, dtype=float)
        if np.any(gap <= 0):
            raise ValidationError("tilt outside the moment generating function domain")
        if self.shape == 1:
            return rng.exponential(1.0, size) / gap
        return rng.gamma(self.shape, 1.0, size) / gap


@dataclass(frozen=True)
class DefaultTimeDistribution:
    """Law of a single time-to-default T.

    The tabulated kind takes a density on a grid starting at 0 and
    interpolates it linearly; mass missing beyond the last node means the
    obligor never defaults (T = inf).
    """

    kind: str
    rate: float = 1.0
    grid: tuple = ()
    density: tuple = ()

    def __post_init__(self):
        if self.kind not in TIME_KINDS:
            raise ValidationError(f"unknown default-time kind {self.kind!r}")
        object.__setattr__(self, "rate", float(self.rate))
        object.__setattr__(self, "grid", tuple(float(v) for v in self.grid))
        object.__setattr__(self, "density", tuple(float(v) for v in self.density))
        if self.kind == "exponential":
            if not self.rate > 0:
                raise ValidationError("nonpositive rate in default-time law")
            return
        g = np.asarray(self.grid)
        f = np.asarray(self.density)
        if g.size < 2 or g.size != f.size:
            raise ValidationError("tabulated density needs matching grid and values")
        if g[0] != 0.0 or np.any(np.diff(g) <= 0):
            raise ValidationError("density grid must start at 0 and increase")
        if np.any(f < 0) or not np.all(np.isfinite(f)):
            raise ValidationError("density values must be finite and nonnegative")
        if self._cum[-1] > 1.0 + 1e-9:
            raise ValidationError("tabulated density integrates to more than 1")

    @classmethod
    def exponential(cls, rate: float) -> "DefaultTimeDistribution":
        return cls("exponential", rate=rate)

    @classmethod
    def tabulated(cls, grid: Sequence[float], density: Sequence[float]):
        return cls("tabulated", grid=tuple(grid), density=tuple(density))

    # tabulated helpers -------------------------------------------------
    @cached_property
    def _g(self):
        return np.asarray(self.grid)

    @cached_property
    def _f(self):
        return np.asarray(self.density)

    @cached_property
    def _slope(self):
        return np.diff(self._f) / np.diff(self._g)

    @cached_property
    def _cum(self):
        h = np.diff(self._g)
        return np.concatenate(([0.0], np.cumsum(0.5 * h * (self._f[:-1] + self._f[1:]))))

    @cached_property
    def _cum_cdf(self):
        # running integral of F over the grid (F is piecewise quadratic)
        h = np.diff(self._g)
        cell = self._cum[:-1] * h + self._f[:-1] * h**2 / 2 + self._slope * h**3 / 6
        return np.concatenate(([0.0], np.cumsum(cell)))

    @cached_property
    def _gauss(self):
        x, w = np.polynomial.legendre.leggauss(16)
        return (x + 1.0) / 2.0, w / 2.0

    def _locate(self, s):
        s = np.asarray(s, dtype=float)
        idx = np.clip(np.searchsorted(self._g, s, side="right") - 1, 0, self._g.size - 2)
        return idx, s - self._g[idx]

    @property
    def total_mass(self) -> float:
        return 1.0 if self.kind == "exponential" else float(self._cum[-1])

    @property
    def support_end(self) -> float:
        return math.inf if self.kind == "exponential" else self.grid[-1]

    def pdf(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "exponential":
            return np.where(s >= 0, self.rate * np.exp(-self.rate * np.maximum(s, 0)), 0.0)
        inside = (s >= 0) & (s <= self._g[-1])
        return np.where(inside, np.interp(s, self._g, self._f), 0.0)

    def cdf(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "exponential":
            return np.where(s > 0, -np.expm1(-self.rate * np.maximum(s, 0)), 0.0)
        idx, w = self._locate(np.minimum(s, self._g[-1]))
        val = self._cum[idx] + self._f[idx] * w + 0.5 * self._slope[idx] * w * w
        return np.where(s <= 0, 0.0, np.where(s >= self._g[-1], self._cum[-1], val))

    def survival(self, s):
        return 1.0 - self.cdf(s)

    def expected_min(self, s):
        """E min(T, s) = integral of the survival function over [0, s]."""
        s = np.asarray(s, dtype=float)
        if self.kind == "exponential":
            return -np.expm1(-self.rate * s) / self.rate
        end = self._g[-1]
        sc = np.minimum(s, end)
        idx, w = self._locate(sc)
        int_f = (self._cum_cdf[idx] + self._cum[idx] * w + self._f[idx] * w**2 / 2
                 + self._slope[idx] * w**3 / 6)
        tail = np.where(s > end, (s - end) * self._cum[-1], 0.0)
        return s - int_f - tail

    def partial_moments(self, s: float, beta: float):
        """Integrals of v^k f(v) e^{-beta v} over [0, s] for k = 0, 1, 2."""
        if self.kind == "exponential":
            kappa = self.rate + beta
            if kappa <= 0:
                return (math.inf, math.inf, math.inf)
            x = kappa * s
            out = []
            for k in range(3):
                frac = 1.0 if math.isinf(x) else float(special.gammainc(k + 1, x))
                out.append(self.rate * math.factorial(k) / kappa ** (k + 1) * frac)
            return tuple(out)
        end = min(float(s), self._g[-1])
        if end <= 0:
            return (0.0, 0.0, 0.0)
        x, w = self._gauss
        n_full = int(np.searchsorted(self._g, end, side="right") - 1)
        lo = self._g[:n_full]
        hi = self._g[1:n_full + 1]
        if n_full < self._g.size - 1 and end > self._g[n_full]:
            lo = np.append(lo, self._g[n_full])
            hi = np.append(hi, end)
        h = (hi - lo)[:, None]
        v = lo[:, None] + h * x[None, :]
        fv = np.interp(v, self._g, self._f) * np.exp(-beta * v) * w[None, :] * h
        return tuple(float(np.sum(fv * v**k)) for k in range(3))

    def sample(self, rng: np.random.Generator, size):
        u = rng.random(size)
        if self.kind == "exponential":
            return -np.log1p(-u) / self.rate
        return self._invert_cdf(u)

    def _invert_cdf(self, u):
        u = np.asarray(u, dtype=float)
        total = self._cum[-1]
        idx = np.clip(np.searchsorted(self._cum, u, side="right") - 1, 0, self._g.size - 2)
        rem = np.maximum(u - self._cum[idx], 0.0)
        fa = self._f[idx]
        b = self._slope[idx]
        disc = np.sqrt(np.maximum(fa * fa + 2.0 * b * rem, 0.0))
        denom = fa + disc
        w = np.where(denom > 0, 2.0 * rem / np.where(denom > 0, denom, 1.0), 0.0)
        t = np.minimum(self._g[idx] + w, self._g[idx + 1])
        return np.where(u >= total, np.inf, t)

    def sample_beyond(self, s, rng: np.random.Generator, size):
        """Sample T conditioned on T > s (inf for the never-default mass)."""
        s = np.asarray(s, dtype=float)
        if self.kind == "exponential":
            return s + rng.exponential(1.0 / self.rate, size)
        lo = self.cdf(s)
        u = lo + rng.random(size) * (1.0 - lo)
        return np.maximum(self._invert_cdf(u), s)

    def sample_tilted_window(self, s, beta, rng: np.random.Generator, size):
        """Sample from the density proportional to f(v) e^{-beta v} on [0, s].

        ``s`` and ``beta`` may be arrays broadcast against ``size``.
        """
        s = np.broadcast_to(np.asarray(s, dtype=float), size)
        beta = np.broadcast_to(np.asarray(beta, dtype=float), size)
        if self.kind == "exponential":
            kappa = self.rate + beta
            frac = -np.expm1(-kappa * s)
            return -np.log1p(-rng.random(size) * frac) / kappa
        return self._tilted_window_tabulated(s.ravel(), beta.ravel(), rng).reshape(size)

    def _tilted_window_tabulated(self, s, beta, rng):
        # piecewise-linear density split into two hat components per cell;
        # each component is drawn from a truncated exponential and thinned
        out = np.empty(s.size)
        g, f = self._g, self._f
        for i in range(s.size):
            end = min(s[i], g[-1])
            n_full = int(np.searchsorted(g, end, side="right") - 1)
            lo = g[:n_full + 1].copy()
            hi = np.append(g[1:n_full + 1], end)
            fa = np.interp(lo, g, f)
            fb = np.interp(hi, g, f)
            h = hi - lo
            keep = h > 0
            lo, h, fa, fb = lo[keep], h[keep], fa[keep], fb[keep]
            x = beta[i] * h
            scale = np.exp(-beta[i] * lo) * h
            w_down = fa * scale * (_e1(x) - _e2(x))
            w_up = fb * scale * _e2(x)
            weights = np.concatenate((w_down, w_up))
            if weights.sum() <= 0:
                out[i] = 0.0
                continue
            k = int(np.searchsorted(np.cumsum(weights), rng.random() * weights.sum(), side="right"))
            k = min(k, weights.size - 1)
            cell, rising = k % lo.size, k >= lo.size
            hc, bc = h[cell], beta[i]
            while True:
                uu = rng.random()
                if bc * hc > 1e-12:
                    w = -math.log1p(-uu * -math.expm1(-bc * hc)) / bc
                else:
                    w = uu * hc
                accept = w / hc if rising else 1.0 - w / hc
                if rng.random() <= accept:
                    break
            out[i] = lo[cell] + w
        return out


@dataclass(frozen=True)
class NonDefaultStream:
    """Loss events that leave the obligor count unchanged."""

    lam: tuple
    loss: Optional[LossDistribution]


@dataclass(frozen=True)
class PortfolioModel:
    """Per-level rates of a portfolio that starts with ``n_max`` obligors.

    ``lam[i-1]`` and ``r[i-1]`` are the default and income rates while ``i``
    obligors are alive. The proportional profile fixes lam_i = lam*i and
    r_i = r*i and records the per-obligor values.
    """

    n_max: int
    lam: tuple
    r: tuple
    loss: LossDistribution
    sigma2: Optional[tuple] = None
    nondefault: Optional[NonDefaultStream] = None
    default_time: Optional[DefaultTimeDistribution] = None
    profile: str = "general"
    obligor_lambda: Optional[float] = None
    obligor_r: Optional[float] = None

    @classmethod
    def proportional(cls, n_max: int, lam: float, r: float, loss: LossDistribution,
                     **kwargs) -> "PortfolioModel":
        return validate(cls(n_max=n_max, lam=(), r=(), loss=loss, profile="proportional",
                            obligor_lambda=lam, obligor_r=r, **kwargs))

    @classmethod
    def constant(cls, n_max: int, lam: float, r: float, loss: LossDistribution,
                 **kwargs) -> "PortfolioModel":
        """Rates that do not depend on the number of obligors alive."""
        return validate(cls(n_max=n_max, lam=(lam,) * n_max, r=(r,) * n_max, loss=loss,
                            **kwargs))

    def rates(self, k: int):
        return self.lam[k - 1], self.r[k - 1]

    def with_levels(self, n_max: int) -> "PortfolioModel":
        """The same model with a different obligor count (proportional only)."""
        if self.profile != "proportional":
            raise ValidationError("obligor count can only be changed for proportional models")
        if n_max > self.n_max and (self.sigma2 is not None or self.nondefault is not None):
            raise ValidationError("per-level variances and non-default rates cannot be extended")
        sigma2 = self.sigma2[:n_max] if self.sigma2 is not None else None
        nd = self.nondefault
        if nd is not None:
            nd = NonDefaultStream(nd.lam[:n_max], nd.loss)
        return validate(replace(self, n_max=n_max, lam=(), r=(), sigma2=sigma2, nondefault=nd))


ValidatedModel = PortfolioModel


def _float_tuple(values, n, what):
    vals = tuple(float(v) for v in values)
    if len(vals) != n:
        raise ValidationError(f"{what} needs {n} entries, got {len(vals)}")
    if not all(math.isfinite(v) for v in vals):
        raise ValidationError(f"{what} entries must be finite")
    return vals


def validate(model: PortfolioModel) -> PortfolioModel:
    """Check every invariant and return the normalized model."""
    n = model.n_max
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise ValidationError("n_max must be a positive integer")
    n = int(n)
    if not isinstance(model.loss, LossDistribution):
        raise ValidationError("loss must be a LossDistribution")
    ob_lam, ob_r = model.obligor_lambda, model.obligor_r
    if model.profile == "proportional":
        if ob_lam is None or ob_r is None:
            raise ValidationError("proportional profile needs per-obligor rates")
        ob_lam, ob_r = float(ob_lam), float(ob_r)
        if not (ob_lam > 0 and ob_r > 0):
            raise ValidationError("nonpositive rate")
        lam = tuple(ob_lam * i for i in range(1, n + 1))
        r = tuple(ob_r * i for i in range(1, n + 1))
    elif model.profile == "general":
        lam = _float_tuple(model.lam, n, "lambda")
        r = _float_tuple(model.r, n, "r")
        if ob_lam is not None:
            ob_lam = float(ob_lam)
        if ob_r is not None:
            ob_r = float(ob_r)
    else:
        raise ValidationError(f"unknown profile {model.profile!r}")
    if not all(v > 0 for v in lam + r):
        raise ValidationError("nonpositive rate")
    sigma2 = None
    if model.sigma2 is not None:
        sigma2 = _float_tuple(model.sigma2, n, "sigma2")
        if any(v < 0 for v in sigma2):
            raise ValidationError("negative variance")
    nondefault = None
    if model.nondefault is not None:
        nd = model.nondefault
        if nd.loss is None:
            raise ValidationError("nondefault stream with missing loss law")
        nd_lam = _float_tuple(nd.lam, n, "nondefault lambda")
        if any(v < 0 for v in nd_lam):
            raise ValidationError("nonpositive rate")
        nondefault = NonDefaultStream(nd_lam, nd.loss)
    default_time = model.default_time
    if default_time is None and model.profile == "proportional":
        default_time = DefaultTimeDistribution.exponential(ob_lam)
    if default_time is not None and not isinstance(default_time, DefaultTimeDistribution):
        raise ValidationError("default_time must be a DefaultTimeDistribution")
    return PortfolioModel(n_max=n, lam=lam, r=r, loss=model.loss, sigma2=sigma2,
                          nondefault=nondefault, default_time=default_time,
                          profile=model.profile, obligor_lambda=ob_lam, obligor_r=ob_r)


@dataclass(frozen=True)
class HorizonSpec:
    """Exponential clock with rate theta, a fixed horizon t, or no horizon."""

    kind: str
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("exponential", "fixed", "infinite"):
            raise ValidationError(f"unknown horizon kind {self.kind!r}")
        if self.kind != "infinite" and not float(self.value) > 0:
            raise ValidationError("horizon parameter must be positive")
        object.__setattr__(self, "value", float(self.value))

    @classmethod
    def exponential(cls, theta: float) -> "HorizonSpec":
        return cls("exponential", theta)

    @classmethod
    def fixed(cls, t: float) -> "HorizonSpec":
        return cls("fixed", t)

    @classmethod
    def infinite(cls) -> "HorizonSpec":
        return cls("infinite")

    @property
    def theta(self) -> float:
        if self.kind == "fixed":
            raise ValidationError("a fixed horizon has no exponential rate")
        return 0.0 if self.kind == "infinite" else self.value

    @property
    def t(self) -> float:
        if self.kind == "exponential":
            raise ValidationError("an exponential horizon has no fixed length")
        return math.inf if self.kind == "infinite" else self.value


@dataclass(frozen=True)
class Group:
    count: int
    lam: float
    r: float
    loss: LossDistribution


@dataclass(frozen=True)
class MultiGroupModel:
    groups: tuple = field(default_factory=tuple)

    def __post_init__(self):
        groups = tuple(self.groups)
        if not groups:
            raise ValidationError("at least one group is required")
        for g in groups:
            if int(g.count) != g.count or g.count < 0:
                raise ValidationError("group counts must be nonnegative integers")
            if not (g.lam > 0 and g.r > 0):
                raise ValidationError("nonpositive rate")
            if not isinstance(g.loss, LossDistribution):
                raise ValidationError("group loss must be a LossDistribution")
        object.__setattr__(self, "groups", groups)

    @property
    def counts(self) -> tuple:
        return tuple(int(g.count) for g in self.groups)


def loss_laplace(loss: LossDistribution, gamma: float) -> float:
    """E exp(-gamma L) for real gamma >= 0."""
    if not gamma >= 0:
        raise ValidationError("laplace transform needs a nonnegative argument")
    return float(loss.laplace(float(gamma)))


def loss_mgf(loss: LossDistribution, alpha: float) -> float:
    """E exp(alpha L); returns math.inf on or beyond the domain boundary."""
    return float(loss.mgf(float(alpha)))


def mean_net_loss(model: PortfolioModel, s):
    """m(s) = F(s) E L - r E min(T, s) for one obligor."""
    T = _obligor_time(model)
    return T.cdf(s) * model.loss.mean - model.obligor_r * T.expected_min(s)


def _obligor_time(model: PortfolioModel) -> DefaultTimeDistribution:
    if model.profile != "proportional" or model.default_time is None:
        raise ValidationError("per-obligor quantities need the proportional profile")
    return model.default_time


def rarity_margin(model: PortfolioModel, u: float):
    """Return (u - sup_s m(s), margin > 0)."""
    if not u > 0:
        raise ValidationError("u must be positive")
    T = _obligor_time(model)
    el = model.loss.mean
    if T.kind == "exponential":
        sup_m = max(0.0, el - model.obligor_r / T.rate)
    else:
        g = np.asarray(T.grid)
        fine = np.unique(np.concatenate([np.linspace(a, b, 65) for a, b in zip(g[:-1], g[1:])]))
        sup_m = max(0.0, float(np.max(mean_net_loss(model, fine))))
        if T.total_mass >= 1.0 - 1e-15:
            sup_m = max(sup_m, float(mean_net_loss(model, g[-1])))
    margin = float(u - sup_m)
    return margin, margin > 0


def require_rarity(model: PortfolioModel, u: float) -> float:
    margin, ok = rarity_margin(model, u)
    if not ok:
        raise RarityViolation(f"rarity condition fails: margin {margin:.6g} <= 0")
    return margin
