"""Fixed-horizon ruin probabilities for exponential losses by quadrature.

Conditioning on the first default at time s, with k obligors alive,

    p_k(u, t) = int_0^t lam_k e^{-lam_k s} [e^{-mu y} + Q_{k-1}(y, t - s)] ds,   y = u + r_k s,
    Q(y, tau) = int_0^y p_{k-1}(w, tau) mu e^{-mu (y - w)} dw,

where the first term is the chance that the loss exceeds the reserve y and
Q averages the continuation over the reserve left behind. With
g_k = e^{mu u} p_k this becomes

    g_k(u, t) = int_0^t lam_k e^{-(lam_k + mu r_k) s} [1 + mu G_{k-1}(y, t - s)] ds,
    G(y, tau) = int_0^y g_{k-1}(w, tau) dw,

and g_k is a polynomial of degree k - 1 in u (g_1 does not depend on u).
g is held on a (t, u) grid and taken piecewise linear in u, so G is exact
per u-cell for k <= 2; the s-integral uses composite Simpson on the t grid.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ValidationError
from .model import PortfolioModel


TAIL_LEVEL = 1e-10


def p1_exact(lam: float, r: float, mu: float, u: float, t: float) -> float:
    """Closed form p_1(u, t) = lam e^{-mu u} / (lam + mu r) * (1 - e^{-(lam + mu r) t})."""
    if not (lam > 0 and r > 0 and mu > 0):
        raise ValidationError("p1_exact needs positive lam, r and mu")
    if u < 0 or t < 0:
        raise ValidationError("u and t must be nonnegative")
    k = lam + mu * r
    horizon = 1.0 if math.isinf(t) else -math.expm1(-k * t)
    return lam * math.exp(-mu * u) / k * horizon


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid u in [0, u_max] with n_u cells and t in [0, t_max] with n_t cells."""

    u_max: float
    t_max: float
    n_u: int = 512
    n_t: int = 256
    rule: str = "simpson"

    def __post_init__(self):
        if not (self.u_max > 0 and self.t_max > 0):
            raise ValidationError("grid extents must be positive")
        if self.n_u < 16 or self.n_t < 16:
            raise ValidationError("grid resolutions must be at least 16")
        if self.rule not in ("simpson", "trapezoid"):
            raise ValidationError(f"unknown quadrature rule {self.rule!r}")

    @property
    def u(self) -> np.ndarray:
        return np.linspace(0.0, self.u_max, self.n_u + 1)

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.t_max, self.n_t + 1)

    def halved(self) -> Optional["GridSpec"]:
        if self.n_u % 2 or self.n_t % 2 or self.n_u < 32 or self.n_t < 32:
            return None
        return GridSpec(self.u_max, self.t_max, self.n_u // 2, self.n_t // 2, self.rule)


def default_grid(model: PortfolioModel, u: float, t_max: float, n_u: int = 512, n_t: int = 256) -> GridSpec:
    """u_max = u + max r * t_max + 40 / mu, enough for the exponential tail to die out."""
    mu = _mu(model)
    return GridSpec(u + max(model.r) * t_max + 40.0 / mu, t_max, n_u, n_t)


@dataclass
class RuinGrid:
    """p_n on a grid; ``values[i, j]`` is p_n(u[j], t[i]) (rows are times).

    ``decay`` is the loss rate mu: in u the interpolant is e^{-mu u} times a
    linear function, which is exact for n <= 2. Set it to 0 for plain
    bilinear interpolation.
    """

    level: int
    u: np.ndarray
    t: np.ndarray
    values: np.ndarray
    error_estimate: float = math.nan
    flags: List[str] = field(default_factory=list)
    decay: float = 0.0

    def at(self, u, t):
        """Interpolated p_n(u, t); points beyond u_max count as 0."""
        u = np.asarray(u, dtype=float)
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.t[-1] * (1 + 1e-12)) or np.any(u < 0):
            raise ValidationError("query outside the grid")
        hu, ht = self.u[1] - self.u[0], self.t[1] - self.t[0]
        ju = np.clip(np.floor(u / hu).astype(int), 0, self.u.size - 2)
        it = np.clip(np.floor(t / ht).astype(int), 0, self.t.size - 2)
        fu = np.clip(u / hu - ju, 0.0, None)
        ft = np.clip(t / ht - it, 0.0, 1.0)
        v = self.values
        left = (1 - fu) * np.exp(-self.decay * fu * hu)
        right = fu * np.exp(self.decay * (1 - fu) * hu)
        out = ((1 - ft) * (left * v[it, ju] + right * v[it, ju + 1])
               + ft * (left * v[it + 1, ju] + right * v[it + 1, ju + 1]))
        out = np.where(u > self.u[-1], 0.0, out)
        return float(out) if out.ndim == 0 else out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t\\u"] + [f"{x:.17g}" for x in self.u])
            for ti, row in zip(self.t, self.values):
                w.writerow([f"{ti:.17g}"] + [f"{x:.17g}" for x in row])


def _mu(model: PortfolioModel) -> float:
    if model.loss.kind != "exponential":
        raise ValidationError("the quadrature route needs exponential losses")
    return model.loss.rate


def _require_plain(model: PortfolioModel) -> None:
    _mu(model)
    if model.nondefault is not None:
        raise ValidationError("the quadrature route has no non-default loss stream")
    if model.sigma2 is not None and any(v > 0 for v in model.sigma2):
        raise ValidationError("the quadrature route has no Brownian term")


def _s_weights(n_t: int, h: float, rule: str) -> np.ndarray:
    """W[j, l]: weight of node s = t_l in the integral over [0, t_j]."""
    w = np.zeros((n_t + 1, n_t + 1))
    for j in range(1, n_t + 1):
        if rule == "trapezoid" or j == 1:
            w[j, :j + 1] = h
            w[j, 0] = w[j, j] = h / 2
            continue
        simpson_end = j if j % 2 == 0 else j - 3
        if simpson_end > 0:
            row = np.zeros(simpson_end + 1)
            row[1:simpson_end:2] = 4.0
            row[2:simpson_end:2] = 2.0
            row[0] = row[simpson_end] = 1.0
            w[j, :simpson_end + 1] += row * h / 3
        if j % 2:
            w[j, j - 3:j + 1] += np.array([1.0, 3.0, 3.0, 1.0]) * 3 * h / 8
    return w


def _cumulative(g: np.ndarray, h: float) -> np.ndarray:
    """G[m, i] = int_0^{u_i} g(w, tau_m) dw for the piecewise-linear g."""
    out = np.zeros_like(g)
    out[:, 1:] = np.cumsum(0.5 * h * (g[:, 1:] + g[:, :-1]), axis=1)
    return out


def _cumulative_at(y: np.ndarray, g: np.ndarray, G: np.ndarray, h: float, u_max: float):
    """G(y, tau_m) for every m at arbitrary reserves y (beyond u_max, p counts as 0)."""
    n_cells = g.shape[1] - 1
    a = np.clip(np.floor(y / h).astype(int), 0, n_cells - 1)
    d = np.clip(y - a * h, 0.0, h)
    slope = (g[:, a + 1] - g[:, a]) / h
    return G[:, a] + g[:, a] * d + 0.5 * slope * d * d


def _levels_on(model: PortfolioModel, n: int, grid: GridSpec):
    """p_1..p_n on the grid, plus the largest p_{k-1}(u_max, .) that was cut off."""
    mu = _mu(model)
    u, t = grid.u, grid.t
    hu, ht = u[1] - u[0], t[1] - t[0]
    w = _s_weights(grid.n_t, ht, grid.rule)
    cap = np.exp(mu * u)[None, :]
    lam1, r1 = model.rates(1)
    k1 = lam1 + mu * r1
    g = np.broadcast_to((lam1 / k1) * (-np.expm1(-k1 * t))[:, None], (t.size, u.size)).copy()
    decay = np.exp(-mu * u)[None, :]
    out = [g * decay]
    tail_mass = 0.0
    for k in range(2, n + 1):
        lam, r = model.rates(k)
        G = _cumulative(g, hu)
        tail_mass = max(tail_mass, float(np.max(out[-1][:, -1])))
        new = np.zeros_like(g)
        for l in range(grid.n_t + 1):
            s = t[l]
            y = u + r * s
            span = grid.n_t + 1 - l
            Gv = _cumulative_at(y, g[:span], G[:span], hu, grid.u_max)
            term = lam * math.exp(-(lam + mu * r) * s) * (1.0 + mu * Gv)
            new[l:] += w[l:, l][:, None] * term
        g = np.clip(new, 0.0, cap)
        out.append(g * decay)
    return out, tail_mass


def pn_levels(model: PortfolioModel, n: int, grid: GridSpec) -> List[RuinGrid]:
    """RuinGrids for levels 1..n; each carries a Richardson error estimate."""
    _require_plain(model)
    if int(n) != n or n < 1 or n > model.n_max:
        raise ValidationError(f"level n={n} outside 1..{model.n_max}")
    n = int(n)
    full, tail_mass = _levels_on(model, n, grid)
    half_grid = grid.halved()
    half = _levels_on(model, n, half_grid)[0] if half_grid is not None else None
    grids = []
    for k, vals in enumerate(full, start=1):
        flags = []
        err = math.nan
        if half is not None:
            # both rules are second order or better, so the halved grid is at least 4x worse
            err = float(np.max(np.abs(vals[::2, ::2] - half[k - 1]))) / 3.0
        edge = float(np.max(vals[:, -1]))
        if edge >= TAIL_LEVEL:
            flags.append("u_max_too_small")
            warnings.warn(f"p_{k}(u_max, t) reaches {edge:.3g}; enlarge u_max", RuntimeWarning)
        if k > 1 and tail_mass >= TAIL_LEVEL:
            flags.append("extrapolated_beyond_u_max")
        if np.any(np.diff(vals, axis=0) < -1e-9):
            flags.append("not_monotone_in_t")
        if np.any(np.diff(vals, axis=1) > 1e-9):
            flags.append("not_monotone_in_u")
        grids.append(RuinGrid(k, grid.u, grid.t, vals, err, flags, decay=_mu(model)))
    return grids


def pn_grid(model: PortfolioModel, n: int, grid: Optional[GridSpec] = None,
            u: Optional[float] = None, t_max: Optional[float] = None) -> RuinGrid:
    """RuinGrid of p_n; without ``grid`` the default grid for (u, t_max) is used."""
    if grid is None:
        if u is None or t_max is None:
            raise ValidationError("give a grid or both u and t_max")
        grid = default_grid(model, u, t_max)
    return pn_levels(model, n, grid)[-1]
