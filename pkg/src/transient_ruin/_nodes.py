"""Evaluation points for recursions with removable singularities.

The transform recursions evaluate divided differences h[x, d] where d is a
level-dependent node. When x sits at or near d, or when nodes coincide (as
they do for constant-ratio rates), the quotient is catastrophically
cancellative. Each cluster of close or repeated nodes is therefore
surrounded by a circle of trapezoid points; every level is computed on those
circle points, and values at the nodes inside are recovered by Cauchy
interpolation

    f(x) ~ (1/M) sum_m f(z_m) (z_m - c) / (z_m - x),

which is spectrally accurate for functions analytic on a disc around the
circle. A divided difference taken on a circle of radius rho, multiplied by the
level factor c d l(z), amplifies rounding noise by about
max |c d l(z)| / rho per level, so each radius is chosen to keep that small
while the circle stays inside the half-plane where l is analytic. A point
evaluated on its own is stable only when |c d l(x) / (x - d)| < 1 for the
repeated nodes d, so points well inside a circle are read from it. Circle values are oversampled (M = 2K) and band-limited to their K
leading Taylor modes after every level, which removes the spurious modes
that would otherwise build up over many levels.

Nodes that are used once and sit far from every other key point are
evaluated directly.
"""
from __future__ import annotations

import math
from collections import Counter

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

TAU = 0.05          # relative linkage distance
RATIO_MAX = 0.62    # largest admissible interior/circle and circle/disc ratio
TARGET = 1e-17      # truncation target that fixes the number of kept modes
RHO_FRAC = 0.8      # largest circle radius relative to the analytic half-plane
WIDE = 10.0         # radius cap, relative to |centre|, when that half-plane is everything
ABSORB = 0.7        # direct points this deep inside a circle are read from it


class _Cluster:
    __slots__ = ("centre", "radius", "points", "start", "stop", "modes")


class NodeGrid:
    """Shared evaluation points for query points and removable-singularity nodes.

    ``points`` is the complex array every recursion level is evaluated on.
    ``handle(x)`` returns a lookup for a query or node, ``value`` recovers the
    value there from an array of values on ``points`` and ``project`` must be
    applied to each freshly computed level.

    ``left`` bounds the half-plane Re z > left where the recursed functions
    are analytic and ``gain(z)`` is the modulus of the factor a level
    multiplies its divided difference by (|l(z)| for the base recursion).
    Each circle radius is chosen to minimise max gain / radius, the per-level
    growth of rounding noise.
    """

    def __init__(self, queries, nodes, tau=TAU, max_modes=256, gain=None, left=0.0):
        queries = np.atleast_1d(np.asarray(queries, dtype=complex)).ravel()
        nodes = np.atleast_1d(np.asarray(nodes, dtype=complex)).ravel()
        if nodes.size and np.any(nodes.real <= left):
            raise ValueError("nodes must lie inside the analytic half-plane")
        keys, inverse = np.unique(np.concatenate((queries, nodes)), return_inverse=True)
        mult = Counter(inverse[queries.size:].tolist())
        is_query = np.zeros(keys.size, dtype=bool)
        is_query[inverse[:queries.size]] = True
        is_node = np.zeros(keys.size, dtype=bool)
        is_node[list(mult)] = True
        scale = np.where(keys.real > 0, keys.real, 0.0)
        self._gain, self._left = gain, float(left)

        labels = self._link(keys, scale, tau)
        n_lab = int(labels.max()) + 1 if labels.size else 0
        size = np.bincount(labels, minlength=n_lab)
        circle = np.zeros(n_lab, dtype=bool)
        for k in np.flatnonzero(is_node):
            lab = labels[k]
            if size[lab] > 1 or mult[k] > 1 or is_query[k]:
                circle[lab] = True

        members = []
        for lab in np.flatnonzero(circle):
            members.extend(self._split(keys[labels == lab]))
        shapes = [self._shape(mem) for mem in members]
        groups = [list(mem) for mem in members]
        direct = []
        for k in np.flatnonzero(~circle[labels]):
            x = keys[k]
            best, where = ABSORB, None
            for idx, (c, rho) in enumerate(shapes):
                q = abs(x - c) / rho
                if q <= best:
                    best, where = q, idx
            if where is None:
                direct.append(x)
            else:
                groups[where].append(x)

        self._lookup = {}
        for pos, x in enumerate(direct):
            self._lookup[x] = ("direct", pos)
        pts = [np.array(direct, dtype=complex)]
        offset = len(direct)
        self.clusters = []
        for (c, rho), mem in zip(shapes, groups):
            cl = self._points(c, rho, np.array(mem, dtype=complex), max_modes)
            cl.start, cl.stop = offset, offset + cl.points.size
            offset = cl.stop
            pts.append(cl.points)
            idx = len(self.clusters)
            self.clusters.append(cl)
            for x in mem:
                self._lookup[x] = ("cluster", idx)
        self.points = np.concatenate(pts)
        self._queries = queries

    @staticmethod
    def _link(keys, scale, tau):
        n = keys.size
        reach = tau * float(scale.max()) if n else 0.0
        if reach <= 0:
            return np.arange(n)
        xy = np.column_stack((keys.real, keys.imag))
        pairs = cKDTree(xy).query_pairs(reach, output_type="ndarray")
        i = pairs[:, 0] if pairs.size else np.zeros(0, dtype=int)
        j = pairs[:, 1] if pairs.size else np.zeros(0, dtype=int)
        ok = np.abs(keys[i] - keys[j]) < tau * np.minimum(scale[i], scale[j])
        adj = coo_matrix((np.ones(int(ok.sum())), (i[ok], j[ok])), shape=(n, n))
        return connected_components(adj, directed=False)[1]

    def _disc(self, c):
        return c.real - self._left

    def _split(self, mem):
        c = complex(np.mean(mem.real), np.mean(mem.imag))
        delta = float(np.max(np.abs(mem - c)))
        if mem.size == 1 or delta <= 0.5 * RATIO_MAX**2 * self._disc(c):
            return [mem]
        axis = mem.real if np.ptp(mem.real) >= np.ptp(mem.imag) else mem.imag
        order = np.argsort(axis, kind="stable")
        srt, a = mem[order], axis[order]
        lo, hi = max(1, srt.size // 4), max(2, (3 * srt.size) // 4)
        gaps = np.diff(a)[lo - 1:hi]
        cut = lo + int(np.argmax(gaps)) if gaps.size else srt.size // 2
        cut = min(max(cut, 1), srt.size - 1)
        return self._split(srt[:cut]) + self._split(srt[cut:])

    def _shape(self, mem):
        """Centre and radius of the circle around a cluster."""
        c = complex(np.mean(mem.real), np.mean(mem.imag))
        delta = float(np.max(np.abs(mem - c)))
        disc = self._disc(c)
        lo = delta / RATIO_MAX
        if self._gain is None:
            return c, max(RATIO_MAX * disc, lo)
        hi = RHO_FRAC * disc if math.isfinite(disc) else WIDE * max(abs(c), 1.0)
        if not hi > lo:
            return c, max(lo, 1e-300)
        lo = max(lo, hi * 1e-3)
        probe = np.exp(2j * np.pi * np.arange(64) / 64)
        best, rho = math.inf, hi
        for cand in np.geomspace(lo, hi, 160):
            score = float(np.max(self._gain(c + cand * probe))) / cand
            if score < best:
                best, rho = score, cand
        return c, float(rho)

    def _points(self, c, rho, mem, max_modes):
        delta = float(np.max(np.abs(mem - c)))
        disc = self._disc(c)
        ratio = max(delta / rho, rho / disc if math.isfinite(disc) else 0.0, 1e-3)
        k = int(math.ceil(math.log(TARGET) / math.log(min(ratio, 0.999))))
        if self._gain is not None:
            # long recursions approach limits with singularities nearer than l's
            k = max_modes
        k = int(min(max(k, 16), max_modes))
        m = 2 * k
        cl = _Cluster()
        cl.centre, cl.radius, cl.modes = c, rho, k
        cl.points = c + rho * np.exp(2j * np.pi * (np.arange(m) + 0.5) / m)
        return cl

    # lookups -------------------------------------------------------------
    def handle(self, x):
        kind, ref = self._lookup[complex(x)]
        if kind == "direct":
            return (ref, None)
        cl = self.clusters[ref]
        z = cl.points
        return (slice(cl.start, cl.stop), (z - cl.centre) / (z - complex(x)) / z.size)

    @staticmethod
    def value(values, handle):
        """Value at a handled point from values on ``points`` (last axis)."""
        ref, w = handle
        if w is None:
            return values[..., ref]
        return values[..., ref] @ w

    def project(self, values):
        """Band-limit circle values to their leading Taylor modes (in place)."""
        for cl in self.clusters:
            seg = np.fft.fft(values[..., cl.start:cl.stop], axis=-1)
            seg[..., cl.modes:] = 0.0
            values[..., cl.start:cl.stop] = np.fft.ifft(seg, axis=-1)
        return values

    def query_matrix(self, queries=None):
        """Dense (Q, P) matrix mapping values on ``points`` to the queries."""
        q = self._queries if queries is None else np.asarray(queries, dtype=complex).ravel()
        mat = np.zeros((q.size, self.points.size), dtype=complex)
        for i, x in enumerate(q):
            ref, w = self.handle(x)
            mat[i, ref] = 1.0 if w is None else w
        return mat

    def evaluate(self, values, queries=None):
        """Values at the queries; direct points are read without mixing in NaNs."""
        q = self._queries if queries is None else np.asarray(queries, dtype=complex).ravel()
        return np.array([self.value(values, self.handle(x)) for x in q], dtype=complex)
