"""Proximal and projection operators for the regularized inversion.

The composite regularizer is tau * R plus the indicator of a constraint set
K: a box, optionally intersected with the hyperplane that pins coordinates
outside an oracle support to the background. Both projections are
componentwise, so the prox of the sum is the penalty prox followed by the
projections in either order.

The anisotropic-TV prox has no closed form; it is computed by coordinate
descent where each 1-D subproblem

    min_x  (1/2) (x - sigma_i)^2 + tau sum_k w_ik |x - nu_k|

is solved exactly by a median formula: the minimizer is the median of the
neighbor values nu_k (ascending) together with the candidates
sigma_i + tau W_j, W_j = -sum_{k<=j} w_k + sum_{k>j} w_k for j = 0..deg.
Sweeps run in ascending vertex order and use already-updated neighbor
values; the data term always uses the original input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InputError, MaskError
from .mesh import VertexAdjacency

TV_SWEEPS_DEFAULT = 50
TV_TOL_DEFAULT = 1e-8

PENALTIES = ("l1", "tv")


def soft_threshold(v, t: float, sigma0) -> np.ndarray:
    """Componentwise shrinkage of v toward sigma0 by t."""
    if t < 0:
        raise InputError("threshold must be nonnegative")
    v = np.asarray(v, dtype=np.float64)
    d = v - sigma0
    return sigma0 + np.sign(d) * np.maximum(np.abs(d) - t, 0.0)


def prox_tv_local(data: float, neighbor_values, weights, tau: float) -> float:
    """Exact minimizer of the single-vertex TV subproblem.

    ``neighbor_values`` must be ascending with ``weights`` co-sorted; an
    empty neighborhood returns ``data`` unchanged.
    """
    vals = np.asarray(neighbor_values, dtype=np.float64)
    ws = np.asarray(weights, dtype=np.float64)
    if vals.size != ws.size:
        raise InputError("neighbor values and weights must pair up")
    if vals.size == 0:
        return float(data)
    if tau < 0:
        raise InputError("tau must be nonnegative")
    if np.any(ws <= 0):
        raise InputError("weights must be positive")
    if np.any(np.diff(vals) < 0):
        raise InputError("neighbor values must be sorted ascending")
    d = vals.size
    total = ws.sum()
    cands = np.empty(2 * d + 1)
    cands[:d] = vals
    acc = 0.0
    for j in range(d + 1):
        cands[d + j] = data + tau * (total - 2.0 * acc)
        if j < d:
            acc += ws[j]
    cands.sort()
    return float(cands[d])


@njit(cache=True)
def _tv_sweep_kernel(x, data, indptr, indices, weights, tau, l_max, tol):
    n = x.size
    for _ in range(l_max):
        max_change = 0.0
        for i in range(n):
            lo, hi = indptr[i], indptr[i + 1]
            deg = hi - lo
            if deg == 0:
                new = data[i]
            else:
                vals = np.empty(deg)
                ws = np.empty(deg)
                for a in range(deg):
                    vals[a] = x[indices[lo + a]]
                    ws[a] = weights[lo + a]
                # insertion sort by value, weights riding along
                for a in range(1, deg):
                    v, w = vals[a], ws[a]
                    b = a - 1
                    while b >= 0 and vals[b] > v:
                        vals[b + 1] = vals[b]
                        ws[b + 1] = ws[b]
                        b -= 1
                    vals[b + 1] = v
                    ws[b + 1] = w
                total = 0.0
                for a in range(deg):
                    total += ws[a]
                cands = np.empty(2 * deg + 1)
                for a in range(deg):
                    cands[a] = vals[a]
                acc = 0.0
                for j in range(deg + 1):
                    cands[deg + j] = data[i] + tau * (total - 2.0 * acc)
                    if j < deg:
                        acc += ws[j]
                cands.sort()
                new = cands[deg]
            change = abs(new - x[i])
            if change > max_change:
                max_change = change
            x[i] = new
        if max_change < tol:
            break
    return x


@njit(cache=True)
def _condense_kernel(x, data, indptr, indices, weights, gap):
    """Collapse flat groups (equal-value components) into a condensed graph.

    Returns the component labels, the per-group data means, current group
    levels, and a CSR over groups whose weights are divided by the source
    group size. Duplicate cross entries between the same two groups are
    left as is: the median subproblem only ever sums weights per value, so
    listing an edge twice equals aggregating it.
    """
    n = x.size
    comp = np.full(n, -1, np.int64)
    stack = np.empty(n, np.int64)
    n_comp = 0
    for seed in range(n):
        if comp[seed] >= 0:
            continue
        comp[seed] = n_comp
        stack[0] = seed
        top = 1
        while top > 0:
            top -= 1
            i = stack[top]
            for pos in range(indptr[i], indptr[i + 1]):
                k = indices[pos]
                if comp[k] < 0 and abs(x[i] - x[k]) <= gap:
                    comp[k] = n_comp
                    stack[top] = k
                    top += 1
        n_comp += 1
    sizes = np.zeros(n_comp)
    sums = np.zeros(n_comp)
    levels = np.zeros(n_comp)
    for i in range(n):
        g = comp[i]
        sizes[g] += 1.0
        sums[g] += data[i]
        levels[g] = x[i]
    means = sums / sizes
    c_indptr = np.zeros(n_comp + 1, np.int64)
    for i in range(n):
        a = comp[i]
        for pos in range(indptr[i], indptr[i + 1]):
            if comp[indices[pos]] != a:
                c_indptr[a + 1] += 1
    for g in range(n_comp):
        c_indptr[g + 1] += c_indptr[g]
    fill = c_indptr[:-1].copy()
    c_indices = np.empty(c_indptr[n_comp], np.int64)
    c_weights = np.empty(c_indptr[n_comp])
    for i in range(n):
        a = comp[i]
        for pos in range(indptr[i], indptr[i + 1]):
            b = comp[indices[pos]]
            if b != a:
                c_indices[fill[a]] = b
                c_weights[fill[a]] = weights[pos] / sizes[a]
                fill[a] += 1
    return comp, n_comp, means, levels, c_indptr, c_indices, c_weights


def prox_tv(sigma, tau: float, adj: VertexAdjacency,
            l_max: int = TV_SWEEPS_DEFAULT, tol: float = TV_TOL_DEFAULT) -> np.ndarray:
    """Anisotropic-TV prox by coordinate sweeps (see module docstring).

    Single-coordinate sweeps alternate with sweeps over flat groups: the
    subproblem objective is strongly convex with a unique fixed point, but
    plateaus can pin every individual coordinate while the plateau as a
    whole sits at a suboptimal level. Restricting the objective to moves
    that keep a group constant and dividing by the group size gives the
    identical median subproblem with the group data mean and scaled
    boundary weights, so the group sweeps reuse the same kernel on the
    condensed graph. The alternation strictly descends and stops at a
    point that no single-vertex or single-plateau move can improve.
    """
    if tau < 0:
        raise InputError("tau must be nonnegative")
    data = np.ascontiguousarray(sigma, dtype=np.float64)
    if data.size != adj.indptr.size - 1:
        raise InputError("vector length does not match the adjacency")
    if tau == 0.0:
        return data.copy()
    gap = max(10.0 * tol, 1e-12)
    x = _tv_sweep_kernel(data.copy(), data, adj.indptr, adj.indices,
                         adj.weights, float(tau), int(l_max), float(tol))
    for _ in range(20):
        comp, n_comp, means, levels, c_indptr, c_indices, c_weights = \
            _condense_kernel(x, data, adj.indptr, adj.indices, adj.weights, gap)
        if n_comp == x.size:
            break
        new_levels = _tv_sweep_kernel(levels, means, c_indptr, c_indices,
                                      c_weights, float(tau), int(l_max),
                                      float(tol))
        fused = new_levels[comp]
        if np.abs(fused - x).max() < tol:
            break
        x = _tv_sweep_kernel(fused, data, adj.indptr, adj.indices,
                             adj.weights, float(tau), int(l_max), float(tol))
    return x


def tv_value(sigma, adj: VertexAdjacency, reference=None) -> float:
    """Weighted anisotropic TV, each unordered neighbor pair counted once."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if reference is not None:
        sigma = sigma - reference
    n = adj.indptr.size - 1
    row = np.repeat(np.arange(n), np.diff(adj.indptr))
    upper = adj.indices > row
    diffs = sigma[row[upper]] - sigma[adj.indices[upper]]
    return float(np.sum(adj.weights[upper] * np.abs(diffs)))


def project_box(sigma, c0: float, c1: float) -> np.ndarray:
    if not c0 < c1:
        raise InputError(f"box requires c0 < c1, got ({c0}, {c1})")
    return np.clip(np.asarray(sigma, dtype=np.float64), c0, c1)


def project_oracle(sigma, mask, sigma0, expected_digest: str | None = None) -> np.ndarray:
    """Keep sigma on the oracle support, reset to sigma0 elsewhere.

    ``mask`` is either a plain 0/1 array or an object carrying ``bits`` and
    ``mesh_digest``; when both a digest expectation and a mask digest are
    known they must agree.
    """
    bits = np.asarray(getattr(mask, "bits", mask))
    digest = getattr(mask, "mesh_digest", None)
    if expected_digest is not None and digest is not None and digest != expected_digest:
        raise MaskError(
            f"mask was built for mesh {digest[:12]}…, expected {expected_digest[:12]}…"
        )
    sigma = np.asarray(sigma, dtype=np.float64)
    if bits.shape != sigma.shape:
        raise MaskError(f"mask length {bits.size} does not match field length {sigma.size}")
    keep = bits.astype(bool)
    return np.where(keep, sigma, sigma0)


@dataclass(frozen=True)
class RegularizerConfig:
    """Penalty, reference, constraint set, and TV inner-loop settings."""

    penalty: str
    sigma0: np.ndarray
    bounds: tuple = (0.1, 3.0)
    mask: object = None
    adjacency: VertexAdjacency | None = None
    tv_reference: bool = False
    l_max: int = TV_SWEEPS_DEFAULT
    tol: float = TV_TOL_DEFAULT
    mesh_digest: str | None = None

    def __post_init__(self):
        if self.penalty not in PENALTIES:
            raise InputError(f"penalty must be one of {PENALTIES}, got {self.penalty!r}")
        sigma0 = np.ascontiguousarray(self.sigma0, dtype=np.float64)
        object.__setattr__(self, "sigma0", sigma0)
        c0, c1 = self.bounds
        if not c0 < c1:
            raise InputError(f"box requires c0 < c1, got ({c0}, {c1})")
        if sigma0.min() < c0 or sigma0.max() > c1:
            raise InputError("reference conductivity must lie inside the box")
        if self.penalty == "tv" and self.adjacency is None:
            raise InputError("the TV penalty needs a vertex adjacency")
        digest = self.mesh_digest
        if digest is None and self.adjacency is not None:
            digest = self.adjacency.mesh_digest
            object.__setattr__(self, "mesh_digest", digest)
        if self.mask is not None:
            bits = np.asarray(getattr(self.mask, "bits", self.mask))
            if bits.size != sigma0.size:
                raise MaskError(
                    f"mask length {bits.size} does not match field length {sigma0.size}"
                )
            mask_digest = getattr(self.mask, "mesh_digest", None)
            if digest is not None and mask_digest is not None and mask_digest != digest:
                raise MaskError(
                    f"mask was built for mesh {mask_digest[:12]}…, "
                    f"config is bound to {digest[:12]}…"
                )

    def penalty_value(self, sigma) -> float:
        """R(sigma): the l1 distance to the reference, or the TV."""
        sigma = np.asarray(sigma, dtype=np.float64)
        if self.penalty == "l1":
            return float(np.abs(sigma - self.sigma0).sum())
        ref = self.sigma0 if self.tv_reference else None
        return tv_value(sigma, self.adjacency, reference=ref)


def prox_g(sigma, tau: float, config: RegularizerConfig) -> np.ndarray:
    """Prox of tau * R plus the constraint indicator (penalty prox, then
    projections; all projections are componentwise, so the order between
    box and oracle does not matter)."""
    if tau < 0:
        raise InputError("tau must be nonnegative")
    if config.penalty == "l1":
        out = soft_threshold(sigma, tau, config.sigma0)
    elif config.tv_reference:
        shifted = np.asarray(sigma, dtype=np.float64) - config.sigma0
        out = config.sigma0 + prox_tv(shifted, tau, config.adjacency,
                                      config.l_max, config.tol)
    else:
        out = prox_tv(sigma, tau, config.adjacency, config.l_max, config.tol)
    if config.mask is not None:
        out = project_oracle(out, config.mask, config.sigma0,
                             expected_digest=config.mesh_digest)
    c0, c1 = config.bounds
    return project_box(out, c0, c1)
