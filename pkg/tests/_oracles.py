"""Independent scalar oracles used by the test suite.

Everything here deliberately avoids the package's own numerical paths:
densities go through math.erf/erfc, sums are plain Python loops over the
mixture definition, and optima come from grid refinement.
"""

import math

import numpy as np

_SQRT2 = math.sqrt(2.0)
_SQRT_2PI = math.sqrt(2.0 * math.pi)


def phi_oracle(x: float) -> float:
    return 0.5 * math.erfc(-x / _SQRT2)


def density_oracle(y: float, loc: float, scale: float, family: str) -> float:
    if family == "tobit":
        if y == 0.0:
            return phi_oracle(-loc / scale)
        if y < 0.0:
            raise ValueError("negative outcome under censored family")
    return math.exp(-0.5 * ((y - loc) / scale) ** 2) / (scale * _SQRT_2PI)


def brute_force_loglik(params, dataset) -> float:
    """Direct evaluation of the observed-data mixture likelihood, case by
    case and stratum by stratum."""
    table = params.location_table()
    strata = params.grid.strata
    family = params.family.value
    total = 0.0
    for i in range(dataset.n):
        t = int(dataset.t[i])
        z = int(dataset.z[i])
        y = float(dataset.y[i])
        mix = 0.0
        for s, (z0, z1) in enumerate(strata):
            observed = z1 if t == 1 else z0
            if observed != z:
                continue
            mix += float(params.probs[s]) * density_oracle(
                y, float(table[s, t]), float(params.scales[t]), family
            )
        total += float(dataset.w[i]) * math.log(mix)
    return total


def tobit_grid_mle(y, w, eta_range, zeta_range, refinements=4, grid=41):
    """Single-component weighted censored-normal MLE by nested grid search."""

    def loglik(eta, zeta):
        total = 0.0
        for yi, wi in zip(y, w):
            total += wi * math.log(density_oracle(float(yi), eta, zeta, "tobit"))
        return total

    lo_e, hi_e = eta_range
    lo_z, hi_z = zeta_range
    best = None
    for _ in range(refinements):
        etas = np.linspace(lo_e, hi_e, grid)
        zetas = np.linspace(max(lo_z, 1e-6), hi_z, grid)
        best = max(
            ((loglik(e, z), e, z) for e in etas for z in zetas), key=lambda t: t[0]
        )
        _, e_star, z_star = best
        span_e = (hi_e - lo_e) / (grid - 1)
        span_z = (hi_z - lo_z) / (grid - 1)
        lo_e, hi_e = e_star - 2 * span_e, e_star + 2 * span_e
        lo_z, hi_z = z_star - 2 * span_z, z_star + 2 * span_z
    return best[1], best[2]


def random_small_dataset(rng, family: str, max_cases: int = 10):
    """A tiny random dataset plus random valid parameters for oracle checks."""
    from stratfit.core import Dataset, ModelParams, StrataGrid
    from stratfit.densities import Family

    k = int(rng.integers(2, 4))
    grid = StrataGrid(k)
    n = int(rng.integers(4, max_cases + 1))
    t = rng.integers(0, 2, size=n)
    z = rng.integers(0, k, size=n)
    y = rng.normal(1.0, 2.0, size=n)
    if family == "tobit":
        y = np.maximum(y, 0.0)
    w = rng.uniform(0.2, 3.0, size=n)
    ds = Dataset.from_arrays(y, t, z, w=w, k_levels=k, family=Family(family))
    params = ModelParams(
        grid=grid,
        probs=rng.dirichlet(np.ones(grid.n_strata) * 2.0),
        locations=rng.normal(0.5, 1.5, size=(grid.n_strata, 2)),
        scales=rng.uniform(0.5, 3.0, size=2),
        family=Family(family),
    )
    return ds, params
