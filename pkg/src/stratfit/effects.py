"""Treatment effects on the diagonal strata and their standard errors.

Effects are differences of fitted component locations between arms within a
stratum; the diagonal strata (same institutionalization level under both
arms) are the primary estimand. Standard errors come from the numerically
differentiated weighted log-likelihood: the observed-information (naive)
variant inverts the negative Hessian, the cluster variant wraps it around a
Huber-White meat aggregated over cluster score sums. One finite-difference
code path serves both families and mean structures.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import Dataset, ModelParams, pack, param_names, unpack
from .densities import Family, tobit_mean
from .em import FitResult, case_loglik, log_likelihood
from .errors import InferenceError

Z_5PCT = 1.959963984540054  # two-sided 5% normal quantile
HESS_STEP = 1e-5
JAC_STEP = 1e-6


@dataclass(frozen=True, eq=False)
class ParamCovariance:
    """Covariance of the packed parameter vector at the fitted optimum."""

    kind: str  # "observed_information" or "cluster_sandwich"
    names: tuple[str, ...]
    cov: np.ndarray
    hessian: np.ndarray
    n_clusters: int | None = None

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.cov), 0.0))


@dataclass(frozen=True, eq=False)
class EffectTable:
    """Per-stratum arm contrasts with optional naive and clustered SEs.

    ``effect`` is the latent-location difference (the component means under
    the normal family, the censored-normal locations under tobit); for tobit
    fits ``effect_observed`` adds the censored-mean difference on the
    observed outcome scale.
    """

    params: ModelParams
    effect: np.ndarray
    effect_observed: np.ndarray | None = None
    se_naive: np.ndarray | None = None
    se_cluster: np.ndarray | None = None
    se_naive_observed: np.ndarray | None = None
    se_cluster_observed: np.ndarray | None = None

    def rows(self) -> list[dict]:
        out = []
        for s, (z0, z1) in enumerate(self.params.grid.strata):
            row = {
                "z0": z0,
                "z1": z1,
                "diagonal": z0 == z1,
                "effect": float(self.effect[s]),
            }
            for label, arr in (
                ("se_naive", self.se_naive),
                ("se_cluster", self.se_cluster),
            ):
                se = None if arr is None else float(arr[s])
                row[label] = se
                row[label.replace("se", "significant")] = (
                    None if se is None else bool(abs(row["effect"]) > Z_5PCT * se)
                )
            if self.effect_observed is not None:
                row["effect_observed"] = float(self.effect_observed[s])
                for label, arr in (
                    ("se_naive_observed", self.se_naive_observed),
                    ("se_cluster_observed", self.se_cluster_observed),
                ):
                    row[label] = None if arr is None else float(arr[s])
            out.append(row)
        return out


def treatment_effects(fit: FitResult) -> EffectTable:
    """Arm-1 minus arm-0 location per stratum; adds the observed-scale
    (censored-mean) contrast under the tobit family."""
    params = fit.params
    table = params.location_table()
    effect = table[:, 1] - table[:, 0]
    observed = None
    if params.family is Family.TOBIT:
        observed = (
            tobit_mean(table[:, 1], params.scales[1])
            - tobit_mean(table[:, 0], params.scales[0])
        )
    return EffectTable(params=params, effect=effect, effect_observed=observed)


def _check_interior(fit: FitResult) -> None:
    if any(fit.floor_active):
        raise InferenceError(
            "not at an interior maximum: the scale floor is active in arm(s) "
            f"{[t for t in (0, 1) if fit.floor_active[t]]}"
        )
    pmin = float(fit.params.probs.min())
    if pmin < 1e-6:
        raise InferenceError(
            "not at an interior maximum: a stratum probability is within "
            f"1e-6 of the simplex boundary (min prob {pmin:.3g})"
        )


def _steps(x: np.ndarray, rel: float) -> np.ndarray:
    return rel * np.maximum(1.0, np.abs(x))


def _num_hessian(fun, x: np.ndarray) -> np.ndarray:
    h = _steps(x, HESS_STEP)
    p = len(x)
    hess = np.empty((p, p))
    f0 = fun(x)
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = h[i]
        hess[i, i] = (fun(x + ei) - 2.0 * f0 + fun(x - ei)) / h[i] ** 2
        for j in range(i + 1, p):
            ej = np.zeros(p)
            ej[j] = h[j]
            val = (
                fun(x + ei + ej) - fun(x + ei - ej)
                - fun(x - ei + ej) + fun(x - ei - ej)
            ) / (4.0 * h[i] * h[j])
            hess[i, j] = hess[j, i] = val
    return hess


def _num_jacobian(fun, x: np.ndarray) -> np.ndarray:
    h = _steps(x, JAC_STEP)
    f0 = np.asarray(fun(x), dtype=float)
    jac = np.empty((f0.size, len(x)))
    for j in range(len(x)):
        ej = np.zeros(len(x))
        ej[j] = h[j]
        jac[:, j] = (np.asarray(fun(x + ej)) - np.asarray(fun(x - ej))) / (2.0 * h[j])
    return jac


def _hessian_and_bread(fit: FitResult, dataset: Dataset):
    x = pack(fit.params)
    like = fit.params

    def packed_loglik(v):
        return log_likelihood(unpack(v, like), dataset)

    hess = _num_hessian(packed_loglik, x)
    hess = 0.5 * (hess + hess.T)
    eigs = np.linalg.eigvalsh(hess)
    if eigs.max() > 1e-8 * abs(eigs.min()):
        raise InferenceError(
            "not at an interior maximum: Hessian is not negative definite "
            f"(eigenvalues {np.array2string(eigs, precision=4)})"
        )
    bread = np.linalg.inv(-hess)
    return x, hess, 0.5 * (bread + bread.T)


def observed_information_se(fit: FitResult, dataset: Dataset) -> ParamCovariance:
    """Naive MLE covariance: inverse negative numerical Hessian of the
    weighted log-likelihood at the packed optimum.

    Rejects boundary solutions (active scale floor, near-zero strata
    probabilities) and non-negative-definite Hessians.
    """
    _check_interior(fit)
    _, hess, bread = _hessian_and_bread(fit, dataset)
    return ParamCovariance(
        kind="observed_information",
        names=tuple(param_names(fit.params, packed=True)),
        cov=bread,
        hessian=hess,
    )


def cluster_sandwich_se(
    fit: FitResult, dataset: Dataset, bread: ParamCovariance | None = None
) -> ParamCovariance:
    """Huber-White sandwich covariance with scores summed within clusters.

    meat = sum over clusters of the outer product of the cluster's weighted
    score sum, times the G/(G-1) small-sample factor; bread is the inverse
    negative Hessian (reused from ``bread`` when provided).
    """
    _check_interior(fit)
    codes = dataset.cluster
    n_clusters = len(np.unique(codes))
    if n_clusters < 2:
        raise InferenceError("clustered variance needs at least 2 clusters")
    if bread is None:
        x, hess, bread_m = _hessian_and_bread(fit, dataset)
    else:
        x, hess, bread_m = pack(fit.params), bread.hessian, bread.cov

    like = fit.params
    h = _steps(x, HESS_STEP)
    scores = np.empty((dataset.n, len(x)))
    for j in range(len(x)):
        ej = np.zeros(len(x))
        ej[j] = h[j]
        up = case_loglik(unpack(x + ej, like), dataset)
        dn = case_loglik(unpack(x - ej, like), dataset)
        scores[:, j] = (up - dn) / (2.0 * h[j])

    grouped = np.zeros((n_clusters, len(x)))
    np.add.at(grouped, codes, dataset.w[:, None] * scores)
    meat = grouped.T @ grouped * (n_clusters / (n_clusters - 1.0))
    cov = bread_m @ meat @ bread_m
    return ParamCovariance(
        kind="cluster_sandwich",
        names=tuple(param_names(fit.params, packed=True)),
        cov=0.5 * (cov + cov.T),
        hessian=hess,
        n_clusters=n_clusters,
    )


def _latent_effects_at(v: np.ndarray, like: ModelParams) -> np.ndarray:
    table = unpack(v, like).location_table()
    return table[:, 1] - table[:, 0]


def _observed_effects_at(v: np.ndarray, like: ModelParams) -> np.ndarray:
    params = unpack(v, like)
    table = params.location_table()
    return tobit_mean(table[:, 1], params.scales[1]) - tobit_mean(
        table[:, 0], params.scales[0]
    )


def effect_ses(fit: FitResult, cov: ParamCovariance):
    """Delta-method SEs of the per-stratum effects under ``cov``.

    Returns (latent SEs, observed-scale SEs or None, latent effect
    covariance matrix).
    """
    x = pack(fit.params)
    like = fit.params
    jac = _num_jacobian(lambda v: _latent_effects_at(v, like), x)
    cov_eff = jac @ cov.cov @ jac.T
    se = np.sqrt(np.maximum(np.diag(cov_eff), 0.0))
    se_obs = None
    if fit.params.family is Family.TOBIT:
        jac_o = _num_jacobian(lambda v: _observed_effects_at(v, like), x)
        se_obs = np.sqrt(np.maximum(np.diag(jac_o @ cov.cov @ jac_o.T), 0.0))
    return se, se_obs, cov_eff


def natural_param_ses(fit: FitResult, cov: ParamCovariance) -> np.ndarray:
    """Delta-method SEs for the natural parameters (probs, locations, scales)
    in :func:`stratfit.core.param_names` reporting order."""
    x = pack(fit.params)
    like = fit.params

    def natural(v):
        p = unpack(v, like)
        return np.concatenate([p.probs, p.locations.ravel(), p.scales])

    jac = _num_jacobian(natural, x)
    return np.sqrt(np.maximum(np.diag(jac @ cov.cov @ jac.T), 0.0))


def effect_table(
    fit: FitResult,
    dataset: Dataset,
    naive: bool = True,
    cluster: bool = True,
) -> tuple[EffectTable, ParamCovariance | None, ParamCovariance | None]:
    """Effects with both SE flavors attached; the workhorse behind the CLI."""
    table = treatment_effects(fit)
    cov_n = cov_c = None
    if naive:
        cov_n = observed_information_se(fit, dataset)
        se, se_obs, _ = effect_ses(fit, cov_n)
        table = replace(table, se_naive=se, se_naive_observed=se_obs)
    if cluster:
        cov_c = cluster_sandwich_se(fit, dataset, bread=cov_n)
        se, se_obs, _ = effect_ses(fit, cov_c)
        table = replace(table, se_cluster=se, se_cluster_observed=se_obs)
    return table, cov_n, cov_c
