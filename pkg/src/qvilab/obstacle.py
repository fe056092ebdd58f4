"""Impulse obstacle operator on grid functions.

For a time slice V(t, .) the obstacle value at x is

    N[V](t, x) = inf over cone impulses xi of  V(t, x + xi) + ell(t, x, xi)

where V is multilinearly interpolated in space (clamped at the box edges)
and the infimum is searched over the cone intersected with a ball
|xi| <= xi_max.  The search is a coarse product scan in ray coefficients
followed by nested zoom refinements around the incumbent, so multimodal
landscapes are handled by the scan and the refinement only sharpens the
winning basin.  Ties are broken toward smaller |xi|, then lexicographically.

The returned value never exceeds the payoff of any probed impulse, and the
`truncated` flag records searches whose winner sits at the radius cap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .core import GridFunction, interp_slice


@dataclass(frozen=True)
class SearchParams:
    """Search controls for the obstacle infimum.

    xi_max caps |xi|; `coarse` is the scan count per ray coefficient;
    `refine_levels` nested zooms of `refine_points` points per coefficient
    follow, each shrinking the bracket to one cell of the previous level.
    refine_levels=0 reduces the search to the shared coarse scan, which is
    what exact monotonicity or equivariance comparisons should use.
    """

    xi_max: float
    coarse: int = 25
    refine_levels: int = 10
    refine_points: int = 9

    def __post_init__(self):
        if not (self.xi_max > 0.0 and np.isfinite(self.xi_max)):
            raise ValueError(f"xi_max must be positive and finite, got {self.xi_max}")
        if self.coarse < 2:
            raise ValueError("coarse scan needs at least 2 points per coefficient")
        if self.refine_levels < 0 or (self.refine_levels > 0 and self.refine_points < 3):
            raise ValueError("refinement needs refine_points >= 3")


def default_search_params(values_range, constants, grid, coarse=25, refine_levels=10):
    """Radius from the cost coercivity floor, capped by the box diagonal.

    An impulse with alpha*|xi|^beta above the value spread can never win, so
    the cap ((max V - min V - ell0)/alpha)^(1/beta) is safe; jumps longer
    than the box diagonal land on the clamped edge anyway.
    """
    lo, hi = values_range
    spread = float(hi) - float(lo) - constants.ell0
    if spread > 0.0:
        cap = (spread / constants.alpha) ** (1.0 / constants.beta)
    else:
        cap = 0.0
    diag = grid.box_diagonal
    xi_max = min(max(cap, 4.0 * max(grid.dx)), diag)
    return SearchParams(xi_max=xi_max, coarse=coarse, refine_levels=refine_levels)


@dataclass(frozen=True)
class ObstacleResult:
    value: float
    argmin: np.ndarray  # impulse xi, shape (n,)
    truncated: bool
    probes: int


# -------------------------------------------------------------- internals ----

def _lex_less(a, b):
    """Row-wise lexicographic a < b for (N, n) arrays, n in {1, 2}."""
    if a.shape[-1] == 1:
        return a[..., 0] < b[..., 0]
    return (a[..., 0] < b[..., 0]) | (
        (a[..., 0] == b[..., 0]) & (a[..., 1] < b[..., 1])
    )


def _batch_best(values, xi):
    """Per-node best column with (value, |xi|, lex xi) tie-breaking.

    values: (N, B); xi: (N, B, n).  Returns indices (N,).
    """
    norms = np.linalg.norm(xi, axis=-1)
    vbest = values.min(axis=1, keepdims=True)
    tie = values == vbest
    nmask = np.where(tie, norms, np.inf)
    nbest = nmask.min(axis=1, keepdims=True)
    tie &= nmask == nbest
    c0 = np.where(tie, xi[..., 0], np.inf)
    tie &= c0 == c0.min(axis=1, keepdims=True)
    if xi.shape[-1] == 2:
        c1 = np.where(tie, xi[..., 1], np.inf)
        tie &= c1 == c1.min(axis=1, keepdims=True)
    return np.argmax(tie, axis=1)


def _merge_best(best, cand):
    """Merge candidate (value, norm, xi, lam) tuples into the running best."""
    bv, bn, bxi, blam = best
    cv, cn, cxi, clam = cand
    better = (cv < bv) | (
        (cv == bv) & ((cn < bn) | ((cn == bn) & _lex_less(cxi, bxi)))
    )
    bv = np.where(better, cv, bv)
    bn = np.where(better, cn, bn)
    bxi = np.where(better[:, None], cxi, bxi)
    blam = np.where(better[:, None], clam, blam)
    return bv, bn, bxi, blam


class _SliceEvaluator:
    """Evaluates psi(xi) = V_interp(t, x + xi) + ell(t, x, xi) in batches."""

    def __init__(self, grid, slice_values, t, ell, nodes_x):
        self.grid = grid
        self.slice_values = np.asarray(slice_values, dtype=float)
        self.t = float(t)
        self.ell = ell
        self.nodes_x = nodes_x  # (N, n)
        self.n = nodes_x.shape[1]
        self.probes = 0

    def psi(self, xi):
        """xi: (N, B, n).  Returns (N, B)."""
        target = self.nodes_x[:, None, :] + xi
        v = interp_slice(self.grid, self.slice_values, target)
        env = {"t": self.t}
        for d in range(self.n):
            env[f"x{d + 1}"] = self.nodes_x[:, None, d]
            env[f"xi{d + 1}"] = xi[..., d]
        cost = np.asarray(ex.evaluate(self.ell, env), dtype=float)
        cost = np.broadcast_to(cost, v.shape)
        self.probes += v.size
        return v + cost


def _coarse_lambda_grid(m, search):
    axes = [np.linspace(0.0, search.xi_max, search.coarse) for _ in range(m)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([md.ravel() for md in mesh], axis=-1)  # (B, m)


def _search(ev: _SliceEvaluator, cone, search: SearchParams):
    """Run the coarse scan plus zoom refinement for every node of `ev`.

    Returns (values, argmin_xi, truncated) flat over nodes.
    """
    rays = cone.rays
    m = cone.n_rays
    n_nodes = ev.nodes_x.shape[0]
    rows = np.arange(n_nodes)

    def eval_lam(lam):
        """lam: (N, B, m).  Returns (psi-with-cap, xi, norms), off-ball = inf."""
        xi = lam @ rays
        vals = ev.psi(xi)
        norms = np.linalg.norm(xi, axis=-1)
        vals = np.where(norms <= search.xi_max * (1.0 + 1e-12), vals, np.inf)
        return vals, xi, norms

    # coarse shared scan (the lambda grid always includes 0)
    lam0 = np.broadcast_to(
        _coarse_lambda_grid(m, search)[None], (n_nodes, search.coarse**m, m)
    )
    vals, xi_b, norms = eval_lam(lam0)
    pick = _batch_best(vals, xi_b)
    best = (
        vals[rows, pick],
        norms[rows, pick],
        xi_b[rows, pick, :],
        lam0[rows, pick, :],
    )

    # nested zooms around the incumbent coefficient vector
    step = search.xi_max / (search.coarse - 1)
    offsets_1d = np.linspace(-1.0, 1.0, search.refine_points)
    mesh = np.meshgrid(*([offsets_1d] * m), indexing="ij")
    offsets = np.stack([md.ravel() for md in mesh], axis=-1)  # (B, m)
    for _ in range(search.refine_levels):
        lam = best[3][:, None, :] + step * offsets[None, :, :]
        np.clip(lam, 0.0, search.xi_max, out=lam)
        vals, xi_b, norms = eval_lam(lam)
        pick = _batch_best(vals, xi_b)
        cand = (
            vals[rows, pick],
            norms[rows, pick],
            xi_b[rows, pick, :],
            lam[rows, pick, :],
        )
        best = _merge_best(best, cand)
        step *= 2.0 / (search.refine_points - 1)

    values, bnorm, bxi, _ = best
    coarse_step = search.xi_max / (search.coarse - 1)
    truncated = bnorm >= search.xi_max - 0.5 * coarse_step
    return values, bxi, truncated


def evaluate_slice_values(grid, slice_values, t, ell, cone, search):
    """Obstacle operator applied to raw slice values at every spatial node.

    Returns (values, argmin_xi, truncated) with shapes
    (*x_nodes,), (*x_nodes, n), (*x_nodes,).
    """
    space_env = grid.space_env()
    nodes_x = np.stack(
        [space_env[f"x{d + 1}"].ravel() for d in range(grid.n)], axis=-1
    )
    ev = _SliceEvaluator(grid, slice_values, t, ell, nodes_x)
    values, bxi, truncated = _search(ev, cone, search)
    shape = tuple(grid.x_nodes)
    return (
        values.reshape(shape),
        bxi.reshape(shape + (grid.n,)),
        truncated.reshape(shape),
    )


def evaluate_slice(V: GridFunction, t_index, ell, cone, search):
    """Obstacle operator applied to time slice `t_index` of a grid function."""
    t = float(V.grid.t[t_index])
    return evaluate_slice_values(V.grid, V.values[t_index], t, ell, cone, search)


def evaluate(V: GridFunction, t_index, x_point, ell, cone, search):
    """Obstacle value at one (t_index, x_point), x_point inside the box.

    Runs the slice machinery on a single node, so every guarantee of
    evaluate_slice (tie-breaking, truncation flag, probed upper bound)
    holds verbatim.
    """
    grid = V.grid
    x_point = np.atleast_1d(np.asarray(x_point, dtype=float))
    if x_point.shape != (grid.n,):
        raise ValueError(f"x_point must have shape ({grid.n},)")
    for d in range(grid.n):
        if not (grid.x_min[d] <= x_point[d] <= grid.x_max[d]):
            raise ValueError(
                f"x_point component {d + 1} = {x_point[d]} outside "
                f"[{grid.x_min[d]}, {grid.x_max[d]}]"
            )
    t = float(grid.t[t_index])
    ev = _SliceEvaluator(grid, V.values[t_index], t, ell, x_point[None, :])
    values, bxi, truncated = _search(ev, cone, search)
    return ObstacleResult(
        value=float(values[0]),
        argmin=np.array(bxi[0]),
        truncated=bool(truncated[0]),
        probes=ev.probes,
    )
