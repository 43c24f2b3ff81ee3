"""Monte Carlo estimation of ruin probabilities.

Two routes: a direct frequency estimate, and importance sampling that
decomposes ruin by the first obligor whose default triggers it. For anchor j
the default time T_j is drawn from f and, given s = T_j, losses are tilted by
alpha*(s) and every other obligor is drawn from the twisted law

    f^Q(v) = f(v) [lbar(alpha) e^{-r alpha v} 1{v <= s} + e^{-r alpha s} 1{v > s}] / omega_s(alpha).

Randomness comes from Philox streams keyed by (seed, stream, chunk) so the
result does not depend on the number of workers.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .asymptotics import decay_rate, legendre
from .errors import NumericalError, ValidationError
from .model import MultiGroupModel, PortfolioModel, _obligor_time, require_rarity

CHUNK = 1 << 14
ALPHA_GRID = 257
ALPHA_RTOL = 1e-3


@dataclass(frozen=True)
class RuinEstimate:
    estimate: float
    std_error: float
    ci95: Tuple[float, float]
    n_runs: int
    variance: float
    method: str
    seed: int
    diagnostics: Dict[str, float] = field(default_factory=dict)

    CSV_FIELDS = ("method", "n", "u", "t", "N", "seed", "estimate", "std_error",
                  "ci_lo", "ci_hi", "variance")

    def csv_row(self, n, u, t) -> list:
        return [self.method, n, u, t, self.n_runs, self.seed, self.estimate, self.std_error,
                self.ci95[0], self.ci95[1], self.variance]


def _rng(seed: int, stream: int, chunk: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(chunk)))
    return np.random.Generator(np.random.Philox(ss))


def _chunks(n_runs: int):
    return [(c, min(CHUNK, n_runs - c * CHUNK)) for c in range((n_runs + CHUNK - 1) // CHUNK)]


def _run_chunks(fn, args, n_runs, workers):
    jobs = _chunks(n_runs)
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=int(workers)) as pool:
            parts = list(pool.map(fn, *zip(*[(args, c, b) for c, b in jobs])))
    else:
        parts = [fn(args, c, b) for c, b in jobs]
    return parts


def _summarise(parts, n_runs, method, seed, extra=None) -> RuinEstimate:
    total = math.fsum(p[0] for p in parts)
    total_sq = math.fsum(p[1] for p in parts)
    mean = total / n_runs
    var = max(total_sq / n_runs - mean * mean, 0.0) * n_runs / (n_runs - 1) if n_runs > 1 else 0.0
    se = math.sqrt(var / n_runs)
    if mean == 0.0:
        ci = (0.0, 3.0 / n_runs)
    else:
        ci = (mean - 1.959963984540054 * se, mean + 1.959963984540054 * se)
    return RuinEstimate(mean, se, ci, int(n_runs), var, method, int(seed), dict(extra or {}))


def _check_runs(n_runs):
    if int(n_runs) != n_runs or n_runs < 1:
        raise ValidationError("N must be a positive integer")
    return int(n_runs)


# ---------------------------------------------------------------------------
# path functionals

def net_loss_at_epochs(T: np.ndarray, L: np.ndarray, r: float):
    """Z(T_i) for every row of obligor draws, where Z(v) = sum_k 1{T_k <= v} L_k - r min(T_k, v).

    Returns the values in the original obligor order.
    """
    order = np.argsort(T, axis=1, kind="stable")
    Ts = np.take_along_axis(T, order, axis=1)
    Ls = np.take_along_axis(L, order, axis=1)
    n = T.shape[1]
    finite = np.isfinite(Ts)
    Tz = np.where(finite, Ts, 0.0)
    lost = np.cumsum(Ls, axis=1)
    before = np.cumsum(Tz, axis=1)
    alive = n - np.arange(1, n + 1)[None, :]
    z_sorted = lost - r * (before + alive * Tz)
    z_sorted = np.where(finite, z_sorted, -np.inf)
    out = np.empty_like(z_sorted)
    np.put_along_axis(out, order, z_sorted, axis=1)
    return out


def net_loss_at(v: np.ndarray, T: np.ndarray, L: np.ndarray, r: float):
    """Z(v) per row for times v (one per row)."""
    v = v[:, None]
    hit = T <= v
    return np.sum(np.where(hit, L, 0.0), axis=1) - r * np.sum(np.minimum(T, v), axis=1)


# ---------------------------------------------------------------------------
# direct estimation

def _chain_arrays(model: PortfolioModel, n):
    lam = np.array([0.0] + [model.rates(k)[0] for k in range(1, n + 1)])
    r = np.array([0.0] + [model.rates(k)[1] for k in range(1, n + 1)])
    nd = np.zeros(n + 1)
    if model.nondefault is not None:
        nd[1:] = model.nondefault.lam[:n]
    return lam, r, nd


def _chain_max(model: PortfolioModel, n, t, theta, rng, size):
    """Largest net loss over loss epochs before a fixed horizon t or an Exp(theta) clock."""
    lam, r, nd = _chain_arrays(model, n)
    nd_loss = model.nondefault.loss if model.nondefault is not None else None
    level = np.full(size, n)
    clock = np.zeros(size)
    z = np.zeros(size)
    zmax = np.full(size, -np.inf)
    active = np.ones(size, dtype=bool)
    while np.any(active):
        idx = np.flatnonzero(active)
        k = level[idx]
        total = lam[k] + nd[k] + theta
        dead = total <= 0
        if np.any(dead):
            active[idx[dead]] = False
            idx, k, total = idx[~dead], k[~dead], total[~dead]
            if idx.size == 0:
                break
        dt = rng.exponential(1.0, idx.size) / total
        pick = rng.random(idx.size) * total
        if t is not None:
            over = clock[idx] + dt > t
            active[idx[over]] = False
            keep = ~over
            idx, k, dt, pick = idx[keep], k[keep], dt[keep], pick[keep]
        clock[idx] += dt
        z[idx] -= r[k] * dt
        is_default = pick < lam[k]
        is_nd = (~is_default) & (pick < lam[k] + nd[k])
        killed = ~(is_default | is_nd)
        active[idx[killed]] = False
        d_idx = idx[is_default]
        if d_idx.size:
            z[d_idx] += model.loss.sample(rng, d_idx.size)
            level[d_idx] -= 1
        n_idx = idx[is_nd]
        if n_idx.size:
            z[n_idx] += nd_loss.sample(rng, n_idx.size)
        hit = idx[is_default | is_nd]
        zmax[hit] = np.maximum(zmax[hit], z[hit])
    return zmax


def _group_chain_max(mg: MultiGroupModel, counts, theta, rng, size):
    lam = np.array([g.lam for g in mg.groups])
    r = np.array([g.r for g in mg.groups])
    m = np.tile(np.array(counts, dtype=float), (size, 1))
    z = np.zeros(size)
    zmax = np.full(size, -np.inf)
    active = np.ones(size, dtype=bool)
    while np.any(active):
        idx = np.flatnonzero(active)
        rates = m[idx] * lam[None, :]
        dft = rates.sum(axis=1)
        total = dft + theta
        dt = rng.exponential(1.0, idx.size) / total
        z[idx] -= (m[idx] @ r) * dt
        pick = rng.random(idx.size) * total
        killed = pick >= dft
        active[idx[killed]] = False
        cum = np.cumsum(rates, axis=1)
        grp = np.minimum((pick[:, None] >= cum).sum(axis=1), len(mg.groups) - 1)
        live = ~killed
        for j, g in enumerate(mg.groups):
            sel = idx[live & (grp == j)]
            if sel.size:
                z[sel] += g.loss.sample(rng, sel.size)
                m[sel, j] -= 1
        hit = idx[live]
        zmax[hit] = np.maximum(zmax[hit], z[hit])
        active[idx[live][m[idx[live]].sum(axis=1) == 0]] = False
    return zmax


def _obligor_max(model: PortfolioModel, n, t, rng, size):
    T_law = _obligor_time(model)
    T = T_law.sample(rng, (size, n))
    L = model.loss.sample(rng, (size, n))
    z = net_loss_at_epochs(T, L, model.obligor_r)
    z = np.where(T <= t, z, -np.inf)
    return np.max(z, axis=1)


def _direct_paths(model, n, t, rng, size):
    if model.profile == "proportional" and model.nondefault is None:
        return _obligor_max(model, n, t, rng, size)
    if model.default_time is not None and model.default_time.kind != "exponential":
        raise ValidationError("a non-default stream needs exponential default times")
    return _chain_max(model, n, t, 0.0, rng, size)


def _direct_worker(args, chunk, size):
    model, n, u, t, seed = args
    rng = _rng(seed, 0, chunk)
    zmax = _direct_paths(model, n, t, rng, size)
    hit = (zmax >= u).astype(float)
    return float(hit.sum()), float(hit.sum())


def _validate_sim(model, n, u, t):
    if not isinstance(model, PortfolioModel):
        raise ValidationError("simulation needs a PortfolioModel")
    if model.sigma2 is not None and any(v > 0 for v in model.sigma2):
        raise ValidationError("the Brownian-perturbed model is not simulated")
    if int(n) != n or not 1 <= n <= model.n_max:
        raise ValidationError(f"level n={n} outside 1..{model.n_max}")
    if u < 0 or t < 0:
        raise ValidationError("u and t must be nonnegative")


def simulate_direct(model: PortfolioModel, n: int, u: float, t: float, N: int, seed: int,
                    workers: int = 1) -> RuinEstimate:
    """Frequency of max over default epochs <= t of Z_n >= u."""
    _validate_sim(model, n, u, t)
    N = _check_runs(N)
    if t == 0:
        return RuinEstimate(0.0, 0.0, (0.0, 3.0 / N), N, 0.0, "direct", int(seed))
    parts = _run_chunks(_direct_worker, (model, int(n), float(u), float(t), int(seed)), N, workers)
    return _summarise(parts, N, "direct", seed)


# ---------------------------------------------------------------------------
# importance sampling

@dataclass(frozen=True)
class TiltedMeasure:
    """Twisted laws for anchor time s and tilt alpha.

    ``window_weight`` is the probability that another obligor defaults in
    [0, s] under Q; ``omega`` is the normaliser omega_s(alpha).
    """

    s: float
    alpha: float
    omega: float
    window_weight: float
    log_lbar: float


def _log_mgf(loss, a):
    a = np.asarray(a, dtype=float)
    if loss.kind == "deterministic":
        return loss.value * a
    return loss.shape * np.log(loss.rate / (loss.rate - a))


def _window_mass(T_law, s, beta):
    """int_0^s f(v) e^{-beta v} dv, elementwise."""
    s = np.asarray(s, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if T_law.kind == "exponential":
        k = T_law.rate + beta
        return T_law.rate / k * -np.expm1(-k * s)
    flat = [T_law.partial_moments(float(a), float(b))[0] for a, b in zip(s.ravel(), beta.ravel())]
    return np.array(flat).reshape(s.shape)


def tilted_measure(model: PortfolioModel, s: float, alpha: float) -> TiltedMeasure:
    T_law = _obligor_time(model)
    beta = model.obligor_r * alpha
    log_lbar = float(_log_mgf(model.loss, alpha))
    head = math.exp(log_lbar) * float(_window_mass(T_law, s, beta))
    tail = math.exp(-beta * s) * float(T_law.survival(s))
    om = head + tail
    return TiltedMeasure(float(s), float(alpha), om, head / om, log_lbar)


def sample_tilted_default_time(model: PortfolioModel, s: float, alpha: float, rng, size=None):
    """Exact draw from f^Q: a tilted window on [0, s] or the untilted law beyond s."""
    if not 0 <= alpha < model.loss.mgf_domain_sup:
        raise ValidationError("tilt outside the moment generating function domain")
    T_law = _obligor_time(model)
    tm = tilted_measure(model, s, alpha)
    shape = () if size is None else size
    branch = rng.random(shape) < tm.window_weight
    inside = T_law.sample_tilted_window(s, model.obligor_r * alpha, rng, shape)
    beyond = T_law.sample_beyond(s, rng, shape)
    out = np.where(branch, inside, beyond)
    return float(out) if size is None else out


class AlphaTable:
    """alpha*(s) on [0, t], linear in sqrt(s), refined until midpoints agree to 1e-3."""

    def __init__(self, model: PortfolioModel, u: float, t: float, points: int = ALPHA_GRID):
        self.model, self.u, self.t = model, float(u), float(t)
        while True:
            root = np.linspace(0.0, math.sqrt(t), points)
            s = root**2
            a = np.array([legendre(model, u, float(v)).alpha_star for v in s])
            mid_root = 0.5 * (root[1:] + root[:-1])
            probe = mid_root[:: max(1, (points - 1) // 16)]
            exact = np.array([legendre(model, u, float(v * v)).alpha_star for v in probe])
            approx = np.interp(probe, root, a)
            if np.all(np.abs(approx - exact) <= ALPHA_RTOL * np.abs(exact)) or points > 8192:
                break
            points = 2 * points - 1
        self.root, self.alpha = root, a

    def __call__(self, s):
        return np.interp(np.sqrt(np.asarray(s, dtype=float)), self.root, self.alpha)


def _is_worker(args, chunk, size):
    model, n, u_total, t, seed, table, bound_log = args
    T_law = _obligor_time(model)
    r = model.obligor_r
    loss = model.loss
    u = u_total / n
    per_run = np.zeros(size)
    max_weight = 0.0
    max_ratio = -np.inf
    for j in range(n):
        rng = _rng(seed, j + 1, chunk)
        Tj = T_law.sample(rng, size)
        rows = np.flatnonzero(Tj <= t)
        m = rows.size
        if m == 0:
            continue
        s = Tj[rows]
        alpha = table(s)
        beta = r * alpha
        log_lbar = _log_mgf(loss, alpha)
        head = np.exp(log_lbar) * _window_mass(T_law, s, beta)
        tail = np.exp(-beta * s) * T_law.survival(s)
        om = head + tail
        w_in = head / om
        Lj = loss.sample_tilted(alpha, rng, m)
        if n > 1:
            shape = (m, n - 1)
            branch = rng.random(shape) < w_in[:, None]
            t_in = T_law.sample_tilted_window(s[:, None], beta[:, None], rng, shape)
            t_out = T_law.sample_beyond(s[:, None], rng, shape)
            To = np.where(branch, t_in, t_out)
            l_tilt = loss.sample_tilted(np.broadcast_to(alpha[:, None], shape), rng, shape)
            l_plain = loss.sample(rng, shape)
            Lo = np.where(branch, l_tilt, l_plain)
        else:
            To = np.zeros((m, 0))
            Lo = np.zeros((m, 0))
        # obligor order 1..n with the anchor at position j
        T = np.concatenate((To[:, :j], s[:, None], To[:, j:]), axis=1)
        L = np.concatenate((Lo[:, :j], Lj[:, None], Lo[:, j:]), axis=1)
        z = net_loss_at_epochs(T, L, r)
        events = (T <= t) & (z >= u_total)
        first = events[:, j] & ~np.any(events[:, :j], axis=1)
        if not np.any(first):
            continue
        z_s = z[:, j]
        log_w = log_lbar + (n - 1) * np.log(om) - alpha * (z_s + r * s)
        w = np.where(first, np.exp(log_w), 0.0)
        # on F_j, Z(s) >= u_total, so the weight is at most lbar(alpha) e^{-(n-1)(alpha u - log omega) - alpha(u + r s)}
        exact_bound = log_lbar - (n - 1) * (alpha * u - np.log(om)) - alpha * (u + r * s)
        if np.any(first & (log_w > exact_bound + 1e-9)):
            raise NumericalError("importance weight exceeds its almost-sure bound")
        if np.isfinite(bound_log):
            max_ratio = max(max_ratio, float(np.max(np.where(first, log_w - bound_log, -np.inf))))
        max_weight = max(max_weight, float(w.max()))
        per_run[rows] += w
    return float(per_run.sum()), float(np.dot(per_run, per_run)), max_weight, max_ratio


def simulate_is(model: PortfolioModel, n: int, u_total: float, t: float, N: int, seed: int,
                workers: int = 1, table: Optional[AlphaTable] = None) -> RuinEstimate:
    """Importance-sampling estimate of p_n(u_total, t), tilting at u = u_total / n."""
    _validate_sim(model, n, u_total, t)
    if model.profile != "proportional" or model.nondefault is not None:
        raise ValidationError("importance sampling needs the proportional profile without extra streams")
    N = _check_runs(N)
    n = int(n)
    u = u_total / n
    require_rarity(model, u)
    if t == 0:
        return RuinEstimate(0.0, 0.0, (0.0, 3.0 / N), N, 0.0, "is", int(seed))
    if table is None or table.u != u or table.t < t:
        table = AlphaTable(model, u, t)
    rep = decay_rate(model, u, t)
    sup_m = rep.alpha_star_sup
    lbar_m = float(model.loss.mgf(sup_m)) if math.isfinite(sup_m) else math.inf
    bound = lbar_m * math.exp(-(n - 1) * rep.rate) if math.isfinite(lbar_m) else math.inf
    bound_log = math.log(bound) if 0 < bound < math.inf else math.inf
    args = (model, n, float(u_total), float(t), int(seed), table, bound_log)
    parts = _run_chunks(_is_worker, args, N, workers)
    max_ratio = max(p[3] for p in parts)
    # alpha comes from an interpolated table, so allow the second-order slack that introduces
    slack = 1e-6 * max(n - 1, 1)
    diag = {
        "max_weight": max(p[2] for p in parts),
        "paper_bound": bound,
        "paper_bound_ok": float(not math.isfinite(bound_log) or max_ratio <= slack),
        "rate": rep.rate,
        "t_star": rep.t_star,
    }
    return _summarise([p[:2] for p in parts], N, "is", seed, diag)


# ---------------------------------------------------------------------------
# exponential-horizon oracle and decay sequence

def _horizon_worker(args, chunk, size):
    model, n, theta, seed = args
    rng = _rng(seed, 0, chunk)
    if isinstance(model, MultiGroupModel):
        return _group_chain_max(model, n, theta, rng, size)
    return _chain_max(model, n, None, theta, rng, size)


def sample_max_net_loss(model, n, theta: float, N: int, seed: int) -> np.ndarray:
    """Samples of the largest net loss at loss epochs before an Exp(theta) clock.

    ``model`` is a PortfolioModel (``n`` an int, non-default streams allowed)
    or a MultiGroupModel (``n`` a tuple of counts). Paths with no loss give
    -inf. With Z the sample, psi(gamma) = E (1 - e^{-gamma Z+}) / gamma and
    the ruin probability at reserve u is P(Z >= u).
    """
    if not theta > 0:
        raise ValidationError("the exponential clock needs theta > 0")
    N = _check_runs(N)
    if isinstance(model, MultiGroupModel):
        n = tuple(int(v) for v in n)
    else:
        _validate_sim(model, n, 0.0, 0.0)
        n = int(n)
    parts = [_horizon_worker((model, n, float(theta), int(seed)), c, b) for c, b in _chunks(N)]
    return np.concatenate(parts)


def decay_sequence(model: PortfolioModel, u_per_obligor: float, t: float, n_list, N: int, seed: int,
                   workers: int = 1) -> List[Tuple[int, float]]:
    """(n, -log(q_hat_n) / n) with q_n(t) = p_n(n u, t), estimated by importance sampling."""
    table = AlphaTable(model, u_per_obligor, t)
    out = []
    for n in n_list:
        est = simulate_is(model.with_levels(int(n)) if n > model.n_max else model, int(n),
                          n * u_per_obligor, t, N, seed, workers, table)
        val = math.inf if est.estimate <= 0 else -math.log(est.estimate) / n
        out.append((int(n), val))
    return out
