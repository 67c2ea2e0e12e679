"""Weighted mixture likelihood for the strata model and its EM maximizer.

Each observed (arm, institutionalization) cell mixes the strata that share
the observed coordinate, so which fitted component belongs to which stratum
is not identified by a single EM run. Fitting therefore proceeds in three
stages: per-cell warm starts (a plain univariate normal-mixture EM), an
exhaustive enumeration of the component-to-stratum assignments those warm
starts admit (16 in the four-strata model), and a full EM run from every
assignment, keeping the solution with the highest weighted log-likelihood.

Fitting is deterministic: warm starts initialize from weighted quantile
splits and no stage consumes random numbers.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import Dataset, MeanStructure, ModelParams, StrataGrid, linear_design
from .densities import Family, component_logpdf, norm_logcdf, norm_logpdf
from .errors import (
    ConvergenceError,
    DataError,
    DegenerateMixtureError,
    EstimationError,
    WarmStartError,
)

LOGLIK_TIE_TOL = 1e-8
FROZEN_WEIGHT_TOL = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# cell index
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _Cell:
    t: int
    z: int
    rows: np.ndarray
    strata: np.ndarray
    y: np.ndarray
    y2: np.ndarray
    w: np.ndarray
    zero: np.ndarray  # local indices with y == 0
    pos: np.ndarray   # local indices with y > 0


def cell_order(k_levels: int) -> list[tuple[int, int]]:
    """Canonical cell order: treated arm by z ascending, then control."""
    return [(1, z) for z in range(k_levels)] + [(0, z) for z in range(k_levels)]


def _cells(dataset: Dataset, grid: StrataGrid) -> tuple[_Cell, ...]:
    cache = getattr(dataset, "_stratfit_cells", None)
    if cache is None:
        cache = {}
        object.__setattr__(dataset, "_stratfit_cells", cache)
    got = cache.get(grid.k_levels)
    if got is not None:
        return got
    out = []
    for t, z in cell_order(grid.k_levels):
        rows = np.flatnonzero((dataset.t == t) & (dataset.z == z))
        y = dataset.y[rows]
        out.append(
            _Cell(
                t=t, z=z, rows=rows, strata=grid.compatible(t, z),
                y=y, y2=y * y, w=dataset.w[rows],
                zero=np.flatnonzero(y == 0.0), pos=np.flatnonzero(y > 0.0),
            )
        )
    got = tuple(out)
    cache[grid.k_levels] = got
    return got


def _check_inputs(params: ModelParams, dataset: Dataset) -> None:
    if params.grid.k_levels != dataset.k_levels:
        raise DataError(
            f"dataset has {dataset.k_levels} levels but parameters use "
            f"{params.grid.k_levels}"
        )
    if params.family is Family.TOBIT and np.any(dataset.y < 0.0):
        raise DataError("negative outcome under censored family")


# --------------------------------------------------------------------------
# likelihood and E-step
# --------------------------------------------------------------------------

def _log_probs(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(probs)


def _cell_logdens(cell: _Cell, table, scales, family: Family) -> np.ndarray:
    locs = table[cell.strata, cell.t]
    scale = scales[cell.t]
    z = (cell.y[:, None] - locs) / scale
    ld = -0.5 * z * z - (0.5 * _LOG_2PI + math.log(scale))
    if family is Family.TOBIT and cell.zero.size:
        ld[cell.zero] = norm_logcdf(-locs / scale)
    return ld


def _lse_rows(lm: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp; all-(-inf) rows come out -inf, not nan."""
    if lm.shape[1] == 2:
        return np.logaddexp(lm[:, 0], lm[:, 1])
    m = lm.max(axis=1)
    ok = np.isfinite(m)
    if ok.all():
        return m + np.log(np.exp(lm - m[:, None]).sum(axis=1))
    out = np.full(lm.shape[0], -np.inf)
    if ok.any():
        sub = lm[ok]
        out[ok] = m[ok] + np.log(np.exp(sub - m[ok, None]).sum(axis=1))
    return out


def _cell_mix(params: ModelParams, dataset: Dataset, want_post: bool):
    """Weighted log-likelihood plus, optionally, per-cell posteriors."""
    cells = _cells(dataset, params.grid)
    table = params.location_table()
    logp = _log_probs(params.probs)
    total = 0.0
    posts = []
    for cell in cells:
        if cell.y.size == 0:
            posts.append(None)
            continue
        lm = _cell_logdens(cell, table, params.scales, params.family)
        lm += logp[cell.strata]
        lse = _lse_rows(lm)
        if not np.all(np.isfinite(lse)):
            bad = np.flatnonzero(~np.isfinite(lse))[0]
            raise DegenerateMixtureError(int(cell.rows[bad]))
        total += float(cell.w @ lse)
        if want_post:
            posts.append(np.exp(lm - lse[:, None]))
    return total, posts


def log_likelihood(params: ModelParams, dataset: Dataset) -> float:
    """Weighted observed-data log-likelihood.

    Each case contributes its weight times the log of the mixture over the
    strata compatible with its (arm, z) cell: a treated case sums over the
    unobserved control-side level, a control case over the treated side.
    """
    _check_inputs(params, dataset)
    total, _ = _cell_mix(params, dataset, want_post=False)
    return total


def case_loglik(params: ModelParams, dataset: Dataset) -> np.ndarray:
    """Per-case unweighted log mixture terms, aligned with the dataset rows."""
    _check_inputs(params, dataset)
    cells = _cells(dataset, params.grid)
    table = params.location_table()
    logp = _log_probs(params.probs)
    out = np.zeros(dataset.n)
    for cell in cells:
        if cell.y.size == 0:
            continue
        lm = _cell_logdens(cell, table, params.scales, params.family)
        lm += logp[cell.strata]
        lse = _lse_rows(lm)
        if not np.all(np.isfinite(lse)):
            bad = np.flatnonzero(~np.isfinite(lse))[0]
            raise DegenerateMixtureError(int(cell.rows[bad]))
        out[cell.rows] = lse
    return out


def e_step(params: ModelParams, dataset: Dataset) -> np.ndarray:
    """Posterior strata memberships, one row per case over all strata.

    Strata incompatible with a case's observed cell carry exactly zero;
    compatible entries are the normalized prior-times-density terms computed
    in log space with max subtraction.
    """
    _check_inputs(params, dataset)
    _, posts = _cell_mix(params, dataset, want_post=True)
    out = np.zeros((dataset.n, params.grid.n_strata))
    for cell, post in zip(_cells(dataset, params.grid), posts):
        if post is not None:
            out[np.ix_(cell.rows, cell.strata)] = post
    return out


# --------------------------------------------------------------------------
# M-step
# --------------------------------------------------------------------------

@dataclass(eq=False)
class _Stats:
    """Posterior-weighted sufficient statistics, indexed [arm, stratum]."""

    m: np.ndarray
    b: np.ndarray
    s2: np.ndarray
    mpos: np.ndarray | None = None
    s1p: np.ndarray | None = None
    s2p: np.ndarray | None = None


def _accumulate(cells, posts, family: Family, n_strata: int) -> _Stats:
    m = np.zeros((2, n_strata))
    b = np.zeros((2, n_strata))
    s2 = np.zeros((2, n_strata))
    tobit = family is Family.TOBIT
    mpos = np.zeros((2, n_strata)) if tobit else None
    s1p = np.zeros((2, n_strata)) if tobit else None
    s2p = np.zeros((2, n_strata)) if tobit else None
    for cell, post in zip(cells, posts):
        if post is None:
            continue
        wp = cell.w[:, None] * post
        m[cell.t, cell.strata] += wp.sum(axis=0)
        if tobit:
            wpp = wp[cell.pos]
            mpos[cell.t, cell.strata] += wpp.sum(axis=0)
            s1p[cell.t, cell.strata] += wpp.T @ cell.y[cell.pos]
            s2p[cell.t, cell.strata] += wpp.T @ cell.y2[cell.pos]
        else:
            b[cell.t, cell.strata] += wp.T @ cell.y
            s2[cell.t, cell.strata] += wp.T @ cell.y2
    return _Stats(m=m, b=b, s2=s2, mpos=mpos, s1p=s1p, s2p=s2p)


def _design(grid: StrataGrid, mean_structure: MeanStructure) -> np.ndarray:
    if mean_structure is MeanStructure.LINEAR:
        return linear_design(grid)
    return np.eye(grid.n_strata)


def _solve_wls(design: np.ndarray, m: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = design.T @ (m[:, None] * design)
    rhs = design.T @ b
    try:
        return np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(a, rhs, rcond=None)[0]


def _inverse_mills(a: np.ndarray) -> np.ndarray:
    """phi(a)/Phi(a), stable for very negative a."""
    return np.exp(norm_logpdf(a) - norm_logcdf(a))


def _tobit_newton(design, mpos, s1, s2, mzero, gamma0, delta0):
    """Maximize the aggregated weighted tobit log-likelihood.

    Works in the (gamma, delta) = (location/scale, 1/scale) parameterization,
    in which the censored-normal log-likelihood is globally concave, so a
    damped Newton with step halving converges to the unique maximum. Returns
    (beta, delta) with locations = design @ beta / delta.
    """
    q = design.shape[1]
    beta = np.linalg.lstsq(design, gamma0, rcond=None)[0]
    delta = float(delta0)
    s2_tot = float(s2.sum())
    mpos_tot = float(mpos.sum())

    def objective(beta_v, delta_v):
        g = design @ beta_v
        val = mpos_tot * (math.log(delta_v) - 0.5 * _LOG_2PI)
        val -= 0.5 * (delta_v * delta_v * s2_tot - 2.0 * delta_v * (g @ s1) + (g * g) @ mpos)
        active = mzero > 0.0
        if active.any():
            val += float(mzero[active] @ norm_logcdf(-g[active]))
        return float(val)

    obj = objective(beta, delta)
    for _ in range(100):
        g = design @ beta
        lam = _inverse_mills(-g)
        grad_g = delta * s1 - g * mpos - mzero * lam
        grad_d = mpos_tot / delta - delta * s2_tot + g @ s1
        h_gg = -(mpos + mzero * lam * (lam - g))
        grad = np.concatenate([design.T @ grad_g, [grad_d]])
        if np.max(np.abs(grad)) < 1e-9 * max(1.0, abs(obj)):
            break
        hess = np.empty((q + 1, q + 1))
        hess[:q, :q] = design.T @ (h_gg[:, None] * design)
        hess[:q, q] = hess[q, :q] = design.T @ s1
        hess[q, q] = -mpos_tot / delta**2 - s2_tot
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, -grad, rcond=None)[0]
        size = 1.0
        improved = False
        while size > 1e-16:
            beta_n = beta + size * step[:q]
            delta_n = delta + size * step[q]
            if delta_n > 0.0:
                obj_n = objective(beta_n, delta_n)
                if obj_n > obj:
                    beta, delta, obj = beta_n, delta_n, obj_n
                    improved = True
                    break
            size *= 0.5
        if not improved:
            break
    return beta, delta


def m_step(
    posterior: np.ndarray,
    dataset: Dataset,
    family: Family,
    mean_structure: MeanStructure = MeanStructure.SATURATED,
    prev: ModelParams | None = None,
    scale_floor: tuple[float, float] = (0.0, 0.0),
) -> ModelParams:
    """One maximization step given posterior strata memberships.

    Strata probabilities pool both arms; locations and the per-arm scale
    maximize the posterior-weighted component log-likelihood (closed form
    for the normal family, an inner concave Newton for tobit). A stratum
    whose arm-level posterior weight falls below 1e-8 keeps its previous
    location, which requires ``prev``.
    """
    n, n_strata = posterior.shape
    if n != dataset.n:
        raise ValueError("posterior row count does not match the dataset")
    grid = StrataGrid(int(round(math.sqrt(n_strata))))
    if grid.n_strata != n_strata:
        raise ValueError("posterior column count is not a squared level count")
    cells = _cells(dataset, grid)
    posts = [
        posterior[np.ix_(cell.rows, cell.strata)] if cell.rows.size else None
        for cell in cells
    ]
    stats = _accumulate(cells, posts, family, n_strata)
    params, _, _ = _m_step_core(stats, grid, family, mean_structure, prev, scale_floor)
    return params


def _m_step_core(stats: _Stats, grid, family, mean_structure, prev, scale_floor):
    design = _design(grid, mean_structure)
    q = design.shape[1]
    w_total = float(stats.m.sum())
    if w_total <= 0.0:
        raise DataError("all case weights are zero")
    probs = stats.m.sum(axis=0) / w_total

    prev_table = prev.location_table() if prev is not None else None
    coef = np.empty((q, 2))
    scales = np.empty(2)
    frozen: list[tuple[int, int]] = []
    floor_active = [False, False]

    for t in (0, 1):
        m = stats.m[t]
        arm_w = float(m.sum())
        if arm_w <= 0.0:
            raise DataError(f"empty arm {t}")
        dead = m < FROZEN_WEIGHT_TOL
        freeze = bool(dead.any()) and mean_structure is MeanStructure.SATURATED
        if freeze:
            if prev_table is None:
                raise EstimationError(
                    f"strata {np.flatnonzero(dead).tolist()} lost all posterior "
                    f"weight in arm {t} and no previous parameters were given"
                )
            frozen += [(int(s), t) for s in np.flatnonzero(dead)]

        if family is Family.NORMAL:
            b = stats.b[t]
            if mean_structure is MeanStructure.SATURATED:
                loc = b / np.where(dead, 1.0, m)
                if freeze:
                    loc[dead] = prev_table[dead, t]
                coef_t = loc
            else:
                coef_t = _solve_wls(design, m, b)
                loc = design @ coef_t
            rss = float(stats.s2[t].sum() - 2.0 * loc @ b + (loc * loc) @ m)
            scale = math.sqrt(max(rss, 0.0) / arm_w)
        else:
            mpos, s1, s2 = stats.mpos[t], stats.s1p[t], stats.s2p[t]
            mzero = m - mpos
            if prev is not None:
                prev_scale = float(prev.scales[t])
                gamma0 = prev_table[:, t] / prev_scale
            else:
                prev_scale = max(math.sqrt(float(s2.sum()) / max(arm_w, 1e-300)), 1e-6)
                gamma0 = np.where(mpos > 0, s1 / np.maximum(mpos, 1e-300), 0.0) / prev_scale
            if freeze:
                live = np.flatnonzero(~dead)
                beta_live, delta = _tobit_newton(
                    np.eye(live.size), mpos[live], s1[live], s2[live],
                    mzero[live], gamma0[live], 1.0 / prev_scale,
                )
                loc = prev_table[:, t].copy()
                loc[live] = beta_live / delta
                coef_t = loc
            else:
                beta, delta = _tobit_newton(
                    design, mpos, s1, s2, mzero, gamma0, 1.0 / prev_scale
                )
                coef_t = beta / delta
            scale = 1.0 / delta

        if scale < scale_floor[t]:
            scale = scale_floor[t]
            floor_active[t] = True
        if scale <= 0.0:
            scale = max(scale_floor[t], 1e-12)
        coef[:, t] = coef_t
        scales[t] = scale

    params = ModelParams(
        grid=grid,
        probs=probs / probs.sum(),
        locations=coef,
        scales=scales,
        family=family,
        mean_structure=mean_structure,
    )
    return params, tuple(frozen), tuple(floor_active)


# --------------------------------------------------------------------------
# warm starts
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CellStart:
    """Per-cell preliminary component estimates, sorted by mean ascending."""

    t: int
    z: int
    means: np.ndarray
    sds: np.ndarray
    props: np.ndarray
    weight: float
    degenerate: bool


def _weighted_sd(y: np.ndarray, w: np.ndarray) -> float:
    total = float(w.sum())
    if total <= 0.0:
        return 0.0
    mean = float(w @ y) / total
    return math.sqrt(max(float(w @ (y - mean) ** 2) / total, 0.0))


def _cell_mixture_em(y: np.ndarray, w: np.ndarray, k: int, max_iter: int = 300):
    """Unstructured k-component univariate normal mixture, weighted EM.

    Initialization splits the cell at weighted quantiles, so the procedure
    is fully deterministic. Returns means/sds/props sorted by mean.
    """
    order = np.argsort(y, kind="stable")
    ys = y[order]
    ws = w[order]
    total = float(ws.sum())
    overall_sd = _weighted_sd(ys, ws)
    if overall_sd == 0.0:
        val = float(ys[0])
        floor = max(1e-8, 1e-8 * abs(val))
        return (np.full(k, val), np.full(k, floor), np.full(k, 1.0 / k), True)

    mid = np.cumsum(ws) - 0.5 * ws
    block = np.minimum((mid / total * k).astype(int), k - 1)
    means = np.empty(k)
    sds = np.empty(k)
    props = np.empty(k)
    for j in range(k):
        sel = block == j
        bw = float(ws[sel].sum())
        if bw > 0.0:
            means[j] = float(ws[sel] @ ys[sel]) / bw
            sds[j] = _weighted_sd(ys[sel], ws[sel])
            props[j] = bw / total
        else:
            means[j] = float(np.quantile(ys, (j + 0.5) / k))
            sds[j] = overall_sd
            props[j] = 1.0 / (10.0 * k)
    props /= props.sum()
    sd_floor = 1e-6 * overall_sd
    sds = np.maximum(sds, sd_floor)

    ll_prev = None
    for _ in range(max_iter):
        with np.errstate(divide="ignore"):
            lm = (
                np.log(props)
                - np.log(sds)
                - 0.5 * _LOG_2PI
                - 0.5 * ((ys[:, None] - means) / sds) ** 2
            )
        m = lm.max(axis=1)
        shifted = np.exp(lm - m[:, None])
        ssum = shifted.sum(axis=1)
        ll = float(ws @ (m + np.log(ssum)))
        resp = shifted / ssum[:, None]
        wr = ws[:, None] * resp
        comp_w = wr.sum(axis=0)
        live = comp_w > 1e-12
        props = np.maximum(comp_w / total, 1e-300)
        props /= props.sum()
        means = np.where(live, (wr * ys[:, None]).sum(axis=0) / np.maximum(comp_w, 1e-300), means)
        var = (wr * (ys[:, None] - means) ** 2).sum(axis=0) / np.maximum(comp_w, 1e-300)
        sds = np.where(live, np.maximum(np.sqrt(var), sd_floor), sds)
        if ll_prev is not None and abs(ll - ll_prev) <= 1e-8 * max(1.0, abs(ll)):
            break
        ll_prev = ll

    order = np.argsort(means, kind="stable")
    means, sds, props = means[order], sds[order], props[order]
    degenerate = (means[-1] - means[0]) <= 1e-6 * max(1.0, abs(means).max(), overall_sd)
    return means, sds, props, bool(degenerate)


def warm_start_cells(
    dataset: Dataset, family: Family, grid: StrataGrid | None = None
) -> dict[tuple[int, int], CellStart]:
    """Preliminary per-cell mixtures seeding the starting-value enumeration.

    Every (arm, z) cell gets an unstructured k-component normal mixture; under
    the tobit family the mixture is fit on the positive outcomes only (the
    censored share is absorbed once the full EM runs).
    """
    grid = grid or StrataGrid(dataset.k_levels)
    k = grid.k_levels
    out = {}
    for t, z in cell_order(k):
        sel = (dataset.t == t) & (dataset.z == z) & (dataset.w > 0.0)
        weight = float(dataset.w[sel].sum())
        y = dataset.y[sel]
        w = dataset.w[sel]
        if family is Family.TOBIT:
            pos = y > 0.0
            y, w = y[pos], w[pos]
        if len(y) < k:
            raise WarmStartError(
                f"cell too small for warm start: t={t}, z={z} has {len(y)} usable "
                f"cases but needs at least {k}"
            )
        means, sds, props, degenerate = _cell_mixture_em(y, w, k)
        out[(t, z)] = CellStart(t, z, means, sds, props, weight, degenerate)
    return out


# --------------------------------------------------------------------------
# starting mappings
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StartingMapping:
    """One assignment of warm-start components to compatible strata.

    ``assignment`` holds, per cell in canonical order, a permutation p such
    that the cell's j-th component (means ascending) initializes the
    compatible stratum whose free coordinate is p[j]; id 0 is the identity
    everywhere. ``params`` is the implied initial parameter set.
    """

    mapping_id: int
    assignment: tuple[tuple[int, ...], ...]
    params: ModelParams


def n_mappings(k_levels: int) -> int:
    return math.factorial(k_levels) ** (2 * k_levels)


def _combo_from_id(mapping_id: int, k_levels: int) -> tuple[tuple[int, ...], ...]:
    perms = list(itertools.permutations(range(k_levels)))
    base = len(perms)
    digits = []
    rem = mapping_id
    for _ in range(2 * k_levels):
        digits.append(rem % base)
        rem //= base
    return tuple(perms[d] for d in reversed(digits))


def _pooled_scales(warm, k_levels: int, floor: tuple[float, float]) -> np.ndarray:
    scales = np.empty(2)
    for t in (0, 1):
        num = 0.0
        den = 0.0
        for z in range(k_levels):
            cs = warm[(t, z)]
            num += cs.weight * float(cs.props @ (cs.sds**2))
            den += cs.weight
        scales[t] = max(math.sqrt(num / den) if den > 0 else 0.0, floor[t], 1e-12)
    return scales


def _initial_probs(warm, combo, grid: StrataGrid) -> np.ndarray:
    """Joint strata probabilities reconciling the two arms' warm starts.

    Each arm's cell shares and mapped mixing proportions imply a joint table;
    the two are averaged and then balanced by iterative proportional fitting
    so the z1 margin matches the treated arm's cell shares and the z0 margin
    matches the control arm's.
    """
    k = grid.k_levels
    share = {}
    for t in (0, 1):
        v = np.array([warm[(t, z)].weight for z in range(k)])
        share[t] = v / v.sum()
    q1 = np.zeros((k, k))  # indexed [z0, z1]
    q0 = np.zeros((k, k))
    for (t, z), perm in zip(cell_order(k), combo):
        cs = warm[(t, z)]
        for j in range(k):
            if t == 1:
                q1[perm[j], z] += share[1][z] * cs.props[j]
            else:
                q0[z, perm[j]] += share[0][z] * cs.props[j]
    table = np.maximum(0.5 * (q1 + q0), 1e-12)
    for _ in range(50):
        table *= (share[1] / table.sum(axis=0))[None, :]
        table *= (share[0] / table.sum(axis=1))[:, None]
    table /= table.sum()
    return table.T.ravel()  # row-major over z1 rows matches the grid order


def _materialize(mapping_id, combo, warm, grid, family, mean_structure, scales):
    k = grid.k_levels
    table = np.zeros((grid.n_strata, 2))
    for (t, z), perm in zip(cell_order(k), combo):
        cs = warm[(t, z)]
        strata = grid.compatible(t, z)
        for j in range(k):
            table[strata[perm[j]], t] = cs.means[j]
    if mean_structure is MeanStructure.LINEAR:
        locations = np.linalg.lstsq(linear_design(grid), table, rcond=None)[0]
    else:
        locations = table
    params = ModelParams(
        grid=grid,
        probs=_initial_probs(warm, combo, grid),
        locations=locations,
        scales=scales,
        family=family,
        mean_structure=mean_structure,
    )
    return StartingMapping(mapping_id, combo, params)


def enumerate_mappings(
    warm,
    grid: StrataGrid,
    family: Family,
    mean_structure: MeanStructure = MeanStructure.SATURATED,
    scale_floor: tuple[float, float] = (0.0, 0.0),
):
    """Yield every component-to-stratum assignment as a StartingMapping.

    The four-strata model has exactly 2^4 = 16; with three levels the space
    is (3!)^6 = 216 per arm squared, so mappings materialize lazily.
    """
    scales = _pooled_scales(warm, grid.k_levels, scale_floor)
    perms = list(itertools.permutations(range(grid.k_levels)))
    for i, combo in enumerate(itertools.product(perms, repeat=2 * grid.k_levels)):
        yield _materialize(i, combo, warm, grid, family, mean_structure, scales)


def _initial_logliks(dataset, warm, grid, family, mean_structure, scales):
    """Initial-parameter log-likelihood of every mapping, without running EM.

    Component density columns per cell do not depend on the mapping, so they
    are computed once; each mapping only re-gathers the log priors. Under the
    linear structure the projection shifts the columns, so that path falls
    back to materializing each mapping.
    """
    cells = _cells(dataset, grid)
    linear = mean_structure is MeanStructure.LINEAR
    cols = []
    if not linear:
        for cell in cells:
            cs = warm[(cell.t, cell.z)]
            ld = component_logpdf(cell.y[:, None], cs.means, scales[cell.t], family)
            cols.append(ld)
    perms = list(itertools.permutations(range(grid.k_levels)))
    lls = np.empty(n_mappings(grid.k_levels))
    for i, combo in enumerate(itertools.product(perms, repeat=2 * grid.k_levels)):
        if linear:
            sm = _materialize(i, combo, warm, grid, family, mean_structure, scales)
            lls[i] = log_likelihood(sm.params, dataset)
            continue
        probs = _initial_probs(warm, combo, grid)
        logp = _log_probs(probs)
        total = 0.0
        for cell, ld, perm in zip(cells, cols, combo):
            if ld.shape[0] == 0:
                continue
            lm = ld + logp[cell.strata[np.array(perm)]]
            m = lm.max(axis=1)
            total += float(cell.w @ (m + np.log(np.exp(lm - m[:, None]).sum(axis=1))))
        lls[i] = total
    return lls


def select_starts(
    dataset: Dataset,
    warm,
    grid: StrataGrid,
    family: Family,
    mean_structure: MeanStructure,
    strategy: tuple[str, int],
    scale_floor: tuple[float, float] = (0.0, 0.0),
) -> list[StartingMapping]:
    """Rank all mappings by their initial log-likelihood and keep a subset.

    ``("topk", n)`` keeps the n highest initial values; ``("spread", n)``
    keeps n mappings by farthest-point selection on the initial values, so
    the retained starts cover the spread of the likelihood surface. If n is
    at least the mapping count, everything is returned.
    """
    kind, count = strategy
    scales = _pooled_scales(warm, grid.k_levels, scale_floor)
    total = n_mappings(grid.k_levels)
    if count >= total:
        chosen = list(range(total))
    else:
        lls = _initial_logliks(dataset, warm, grid, family, mean_structure, scales)
        order = sorted(range(total), key=lambda i: (-lls[i], i))
        if kind == "topk":
            chosen = sorted(order[:count])
        elif kind == "spread":
            chosen_set = [order[0]]
            remaining = order[1:]
            while len(chosen_set) < count and remaining:
                gap = {i: min(abs(lls[i] - lls[j]) for j in chosen_set) for i in remaining}
                best_d = max(gap.values())
                pick = min(i for i in remaining if gap[i] == best_d)
                chosen_set.append(pick)
                remaining.remove(pick)
            chosen = sorted(chosen_set)
        else:
            raise ValueError(f"unknown start-selection strategy: {kind!r}")
    return [
        _materialize(i, _combo_from_id(i, grid.k_levels), warm, grid, family,
                     mean_structure, scales)
        for i in chosen
    ]


# --------------------------------------------------------------------------
# EM driver
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FitConfig:
    """Convergence and start-selection knobs for :func:`fit`."""

    tol: float = 1e-9
    max_iter: int = 2000
    starts: str | tuple[str, int] = "all"
    threads: int | None = None
    keep_history: bool = False


def parse_starts(text: str) -> str | tuple[str, int]:
    """Parse a --starts argument: 'all', 'topk:N' or 'spread:N'."""
    if text == "all":
        return "all"
    kind, _, num = text.partition(":")
    if kind in ("topk", "spread") and num.isdigit() and int(num) > 0:
        return (kind, int(num))
    raise ValueError(f"invalid starts specification: {text!r}")


@dataclass(frozen=True, eq=False)
class StartRecord:
    """Outcome of one EM run: where it started and where it ended."""

    mapping_id: int
    loglik: float
    params: ModelParams
    iterations: int
    converged: bool
    floor_active: tuple[bool, bool]
    frozen: tuple[tuple[int, int], ...]
    history: tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class FitResult:
    """Best solution across all starting mappings, with the full trace."""

    params: ModelParams
    loglik: float
    posterior: np.ndarray
    mapping_id: int
    iterations: int
    converged: bool
    trace: tuple[StartRecord, ...]
    tie_ids: tuple[int, ...]
    scale_floor: tuple[float, float]
    floor_active: tuple[bool, bool]
    frozen: tuple[tuple[int, int], ...]

    @property
    def tied(self) -> bool:
        return len(self.tie_ids) > 1


def _run_em(dataset, start: StartingMapping, family, mean_structure, tol,
            max_iter, scale_floor, keep_history) -> StartRecord:
    cells = _cells(dataset, StrataGrid(dataset.k_levels))
    n_strata = dataset.k_levels**2
    params = start.params
    ll_prev = None
    history: list[float] = []
    frozen: tuple[tuple[int, int], ...] = ()
    floor: tuple[bool, bool] = (False, False)
    converged = False
    iterations = 0
    for it in range(1, max_iter + 1):
        iterations = it
        ll, posts = _cell_mix(params, dataset, want_post=True)
        if keep_history:
            history.append(ll)
        if ll_prev is not None and abs(ll - ll_prev) <= tol * max(1.0, abs(ll)):
            converged = True
            break
        stats = _accumulate(cells, posts, family, n_strata)
        params, frozen, floor = _m_step_core(
            stats, params.grid, family, mean_structure, params, scale_floor
        )
        ll_prev = ll
    else:
        ll, _ = _cell_mix(params, dataset, want_post=False)
        if keep_history:
            history.append(ll)
    return StartRecord(
        mapping_id=start.mapping_id,
        loglik=ll,
        params=params,
        iterations=iterations,
        converged=converged,
        floor_active=floor,
        frozen=frozen,
        history=tuple(history),
    )


def _thread_count(config: FitConfig) -> int:
    if config.threads is not None:
        return max(1, config.threads)
    env = os.environ.get("STRATFIT_THREADS", "").strip()
    return max(1, int(env)) if env.isdigit() and env else 1


def fit(
    dataset: Dataset,
    family: Family = Family.NORMAL,
    mean_structure: MeanStructure = MeanStructure.SATURATED,
    config: FitConfig | None = None,
) -> FitResult:
    """Maximize the weighted mixture likelihood over all starting mappings.

    Runs EM from every enumerated (or selected) component-to-stratum
    assignment and returns the best final log-likelihood, with the complete
    per-start trace. Ties within 1e-8 go to the lowest mapping id and are
    recorded. Raises ConvergenceError (carrying the trace) if no start
    converges, DataError on empty cells.
    """
    config = config or FitConfig()
    grid = StrataGrid(dataset.k_levels)
    if family is Family.TOBIT and np.any(dataset.y < 0.0):
        raise DataError("negative outcome under censored family")
    empty = dataset.empty_cells()
    if empty:
        raise DataError(
            f"empty (t, z) cells {empty}: every arm/level cell needs at least "
            "one positive-weight case"
        )
    scale_floor = tuple(
        1e-3 * _weighted_sd(dataset.y[dataset.t == t], dataset.w[dataset.t == t])
        for t in (0, 1)
    )
    warm = warm_start_cells(dataset, family, grid)
    if config.starts == "all":
        starts = list(enumerate_mappings(warm, grid, family, mean_structure, scale_floor))
    else:
        starts = select_starts(
            dataset, warm, grid, family, mean_structure, config.starts, scale_floor
        )

    def run_one(s):
        return _run_em(
            dataset, s, family, mean_structure, config.tol, config.max_iter,
            scale_floor, config.keep_history,
        )

    threads = _thread_count(config)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(run_one, starts))
    else:
        records = [run_one(s) for s in starts]

    if not any(r.converged for r in records):
        raise ConvergenceError(
            f"no starting mapping converged within {config.max_iter} iterations",
            trace=records,
        )
    best_ll = max(r.loglik for r in records)
    tied = sorted(
        r.mapping_id for r in records if best_ll - r.loglik <= LOGLIK_TIE_TOL
    )
    winner = next(r for r in records if r.mapping_id == tied[0])
    posterior = e_step(winner.params, dataset)
    return FitResult(
        params=winner.params,
        loglik=winner.loglik,
        posterior=posterior,
        mapping_id=winner.mapping_id,
        iterations=winner.iterations,
        converged=winner.converged,
        trace=tuple(records),
        tie_ids=tuple(tied),
        scale_floor=scale_floor,
        floor_active=winner.floor_active,
        frozen=winner.frozen,
    )
