"""Estimators feeding harmonization: the RCT-only overall effect, pooled and
weighted subgroup effects, and reference estimators (RCT-only subgroup,
oracle, difference of means).

All estimators are pure functions of the dataset and are invariant to row
permutation. Estimators tagged `uses_ec=False` never touch the external
records.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import BINARY, CombinedDataset
from .errors import (
    EmptyArm,
    EmptySubgroupArm,
    NotConverged,
)
from .glm import (
    MODEL_OVERALL,
    MODEL_POOLED,
    DesignMatrix,
    GlmFit,
    _onehot,
    build_design,
    fit_logistic_irls,
    fit_ols,
)

DIFF_MEANS = "diff_means"
OLS = "ols"
LOGISTIC_MARGINAL = "logistic_marginal"
IPW_LOGISTIC = "ipw_logistic"
ORACLE = "oracle"
EXTERNAL = "external"


@dataclass(frozen=True)
class EffectEstimate:
    """A subgroup-effect vector and/or an overall effect with provenance.

    `covariance` (when present) is the K x K covariance of `theta_k`;
    `overall_variance` the variance of `theta_overall`.
    """

    theta_k: np.ndarray | None = None
    theta_overall: float | None = None
    covariance: np.ndarray | None = None
    overall_variance: float | None = None
    method: str = EXTERNAL
    uses_ec: bool = False

    def require_subgroups(self) -> np.ndarray:
        if self.theta_k is None:
            raise ValueError("estimate carries no subgroup effects")
        return self.theta_k

    def require_overall(self) -> float:
        if self.theta_overall is None:
            raise ValueError("estimate carries no overall effect")
        return float(self.theta_overall)


def external_estimate(theta_k, covariance=None) -> EffectEstimate:
    """Wrap a third-party subgroup estimate vector for harmonization."""
    theta_k = np.asarray(theta_k, dtype=float)
    cov = None if covariance is None else np.asarray(covariance, dtype=float)
    return EffectEstimate(theta_k=theta_k, covariance=cov, method=EXTERNAL, uses_ec=True)


# --- difference-of-means estimators -----------------------------------------

def diff_means_overall(ds: CombinedDataset) -> EffectEstimate:
    """Difference between the RCT experimental and control arm means."""
    n1 = int((ds.t_rct == 1).sum())
    n0 = int((ds.t_rct == 0).sum())
    if n1 == 0 or n0 == 0:
        raise EmptyArm("both RCT arms must be non-empty")
    m1 = float(ds.y_rct[ds.t_rct == 1].mean())
    m0 = float(ds.y_rct[ds.t_rct == 0].mean())
    var = _pooled_cell_variance(ds)
    overall_var = var * (1.0 / n1 + 1.0 / n0) if np.isfinite(var) else None
    return EffectEstimate(theta_overall=m1 - m0, overall_variance=overall_var,
                          method=DIFF_MEANS, uses_ec=False)


def _pooled_cell_variance(ds: CombinedDataset) -> float:
    """Within-cell outcome variance pooled over all (subgroup, arm, study)
    cells; binomial cells use p(1-p). Returns nan when no cell has dof."""
    if ds.outcome_family == BINARY:
        num = den = 0.0
        for y, w, t in ((ds.y_rct, ds.w_rct, ds.t_rct),
                        (ds.y_ec, ds.w_ec, np.zeros(ds.n_ec, dtype=int))):
            for k in range(ds.k):
                for arm in (0, 1):
                    m = (w == k) & (t == arm)
                    n = int(m.sum())
                    if n:
                        p = float(y[m].mean())
                        num += n * p * (1 - p)
                        den += n
        return num / den if den else np.nan
    rss = 0.0
    dof = 0
    for y, w, t in ((ds.y_rct, ds.w_rct, ds.t_rct),
                    (ds.y_ec, ds.w_ec, np.zeros(ds.n_ec, dtype=int))):
        for k in range(ds.k):
            for arm in (0, 1):
                m = (w == k) & (t == arm)
                n = int(m.sum())
                if n > 1:
                    rss += float(((y[m] - y[m].mean()) ** 2).sum())
                    dof += n - 1
    return rss / dof if dof > 0 else np.nan


def diff_means_pooled_subgroups(ds: CombinedDataset) -> EffectEstimate:
    """Per-subgroup difference between the RCT treated mean and the control
    mean pooled over RCT and EC patients."""
    theta = np.empty(ds.k)
    var = np.empty(ds.k)
    phi2 = _pooled_cell_variance(ds)
    for k in range(ds.k):
        m1 = ds.rct_mask(k, 1)
        n1 = int(m1.sum())
        m0r = ds.rct_mask(k, 0)
        me = ds.w_ec == k
        n0 = int(m0r.sum()) + int(me.sum())
        if n1 == 0 or n0 == 0:
            raise EmptySubgroupArm(
                f"subgroup {k + 1} needs a treated RCT patient and a pooled control")
        pooled_mean = (ds.y_rct[m0r].sum() + ds.y_ec[me].sum()) / n0
        theta[k] = ds.y_rct[m1].mean() - pooled_mean
        var[k] = phi2 * (1.0 / n1 + 1.0 / n0) if np.isfinite(phi2) else np.nan
    cov = np.diag(var) if np.all(np.isfinite(var)) else None
    return EffectEstimate(theta_k=theta, covariance=cov,
                          method=DIFF_MEANS, uses_ec=True)


def _diff_means_rct_subgroups(ds: CombinedDataset) -> EffectEstimate:
    theta = np.empty(ds.k)
    for k in range(ds.k):
        m1, m0 = ds.rct_mask(k, 1), ds.rct_mask(k, 0)
        if not m1.any() or not m0.any():
            raise EmptySubgroupArm(f"subgroup {k + 1} lacks an RCT arm")
        theta[k] = ds.y_rct[m1].mean() - ds.y_rct[m0].mean()
    return EffectEstimate(theta_k=theta, method=DIFF_MEANS, uses_ec=False)


def oracle_subgroups(ds: CombinedDataset, mu_true) -> EffectEstimate:
    """Treated RCT means minus the known control levels."""
    mu_true = np.asarray(mu_true, dtype=float)
    if mu_true.shape != (ds.k,):
        raise ValueError(f"mu_true must have length {ds.k}")
    theta = np.empty(ds.k)
    for k in range(ds.k):
        m1 = ds.rct_mask(k, 1)
        if not m1.any():
            raise EmptySubgroupArm(f"subgroup {k + 1} has no treated RCT patients")
        theta[k] = ds.y_rct[m1].mean() - mu_true[k]
    return EffectEstimate(theta_k=theta, method=ORACLE, uses_ec=False)


# --- OLS estimators ----------------------------------------------------------

def _theta_block(dm: DesignMatrix) -> list[int]:
    return dm.role_columns("theta")


def ols_subgroup_effects(ds: CombinedDataset) -> EffectEstimate:
    """Subgroup effects from the pooled least-squares model, with the
    covariance block of the treatment-effect coefficients."""
    dm = build_design(ds, MODEL_POOLED)
    y = np.concatenate([ds.y_rct, ds.y_ec])
    fit = fit_ols(dm, y)
    idx = _theta_block(dm)
    cov_all = np.linalg.inv(fit.xtwx)
    disp = fit.dispersion if fit.dispersion and np.isfinite(fit.dispersion) else np.nan
    cov = disp * cov_all[np.ix_(idx, idx)]
    return EffectEstimate(theta_k=fit.coefficients[idx],
                          covariance=cov if np.all(np.isfinite(cov)) else None,
                          method=OLS, uses_ec=True)


def ols_overall_effect(ds: CombinedDataset) -> EffectEstimate:
    """Overall effect from the RCT-only least-squares model."""
    dm = build_design(ds, MODEL_OVERALL)
    fit = fit_ols(dm, ds.y_rct)
    j = dm.column_roles.index("treatment")
    cov_all = np.linalg.inv(fit.xtwx)
    disp = fit.dispersion if fit.dispersion and np.isfinite(fit.dispersion) else np.nan
    return EffectEstimate(theta_overall=float(fit.coefficients[j]),
                          overall_variance=float(disp * cov_all[j, j]) if np.isfinite(disp) else None,
                          method=OLS, uses_ec=False)


def _ols_rct_subgroups(ds: CombinedDataset) -> EffectEstimate:
    h = _onehot(ds.w_rct, ds.k)
    x = np.column_stack([h, h * ds.t_rct[:, None], ds.x_rct])
    fit = fit_ols(x, ds.y_rct)
    return EffectEstimate(theta_k=fit.coefficients[ds.k:2 * ds.k],
                          method=OLS, uses_ec=False)


def ols_joint_covariance(ds: CombinedDataset, dispersion: float | None = None) -> np.ndarray:
    """(K+1) x (K+1) covariance of the pooled subgroup OLS effects stacked
    with the RCT-only overall OLS effect, computed from the two design
    matrices and a common dispersion (pooled-fit estimate by default)."""
    m1 = build_design(ds, MODEL_POOLED)
    m0 = build_design(ds, MODEL_OVERALL)
    y = np.concatenate([ds.y_rct, ds.y_ec])
    if dispersion is None:
        dispersion = fit_ols(m1, y).dispersion
    a1 = np.linalg.inv(m1.values.T @ m1.values)
    a0 = np.linalg.inv(m0.values.T @ m0.values)
    idx = _theta_block(m1)
    j = m0.column_roles.index("treatment")
    var_re = dispersion * a1[np.ix_(idx, idx)]
    var_r = dispersion * a0[j, j]
    m1_rct = m1.values[:ds.n_rct]
    cross = dispersion * (a1 @ (m1_rct.T @ m0.values) @ a0)[idx, j]
    s = np.empty((ds.k + 1, ds.k + 1))
    s[:ds.k, :ds.k] = var_re
    s[:ds.k, ds.k] = cross
    s[ds.k, :ds.k] = cross
    s[ds.k, ds.k] = var_r
    return s


def rct_only_subgroups(ds: CombinedDataset, model: str = DIFF_MEANS) -> EffectEstimate:
    """Subgroup effects from RCT rows only."""
    if model == DIFF_MEANS:
        return _diff_means_rct_subgroups(ds)
    if model == OLS:
        return _ols_rct_subgroups(ds)
    if model == "logistic":
        return logistic_marginal_effects(ds, rct_only=True)
    raise ValueError(f"unknown RCT-only model {model!r}")


# --- logistic marginal effects ----------------------------------------------

def _pooled_logistic_fit(ds: CombinedDataset, weights: np.ndarray | None,
                         rct_only: bool) -> tuple[GlmFit, np.ndarray]:
    if rct_only:
        h = _onehot(ds.w_rct, ds.k)
        x = np.column_stack([h, h * ds.t_rct[:, None], ds.x_rct])
        y = ds.y_rct
        w = np.ones(ds.n_rct) if weights is None else weights[:ds.n_rct]
    else:
        x = build_design(ds, MODEL_POOLED).values
        y = np.concatenate([ds.y_rct, ds.y_ec])
        w = weights
    fit = fit_logistic_irls(x, y, weights=w)
    if not fit.converged:
        raise NotConverged("pooled logistic fit did not converge")
    return fit, x


def marginalize_logistic(ds: CombinedDataset, nu: np.ndarray, eta: np.ndarray,
                         beta: np.ndarray) -> np.ndarray:
    """Average the treated-vs-control response difference over each RCT
    subgroup's covariate values."""
    theta = np.empty(ds.k)
    xb = ds.x_rct @ beta if ds.d else np.zeros(ds.n_rct)
    for k in range(ds.k):
        m = ds.w_rct == k
        if not m.any():
            raise EmptySubgroupArm(f"subgroup {k + 1} has no RCT patients")
        theta[k] = float(np.mean(expit(nu[k] + eta[k] + xb[m]) - expit(nu[k] + xb[m])))
    return theta


def _marginal_gradient(ds: CombinedDataset, nu, eta, beta) -> np.ndarray:
    """Gradient of the marginalized effects against (nu, eta, beta)."""
    k, d = ds.k, ds.d
    grad = np.zeros((k, 2 * k + d))
    xb = ds.x_rct @ beta if d else np.zeros(ds.n_rct)
    for j in range(k):
        m = ds.w_rct == j
        a = nu[j] + eta[j] + xb[m]
        b = nu[j] + xb[m]
        ga = expit(a) * (1 - expit(a))
        gb = expit(b) * (1 - expit(b))
        grad[j, j] = float(np.mean(ga - gb))
        grad[j, k + j] = float(np.mean(ga))
        if d:
            grad[j, 2 * k:] = np.mean((ga - gb)[:, None] * ds.x_rct[m], axis=0)
    return grad


def logistic_marginal_effects(ds: CombinedDataset,
                              weights: np.ndarray | None = None,
                              rct_only: bool = False,
                              method: str = LOGISTIC_MARGINAL) -> EffectEstimate:
    """Subgroup effects on the probability scale from a (weighted) pooled
    logistic model, with a delta-method covariance from the Fisher
    information of the fitted coefficients."""
    fit, _ = _pooled_logistic_fit(ds, weights, rct_only)
    k = ds.k
    nu, eta, beta = fit.coefficients[:k], fit.coefficients[k:2 * k], fit.coefficients[2 * k:]
    theta = marginalize_logistic(ds, nu, eta, beta)
    grad = _marginal_gradient(ds, nu, eta, beta)
    try:
        cov = grad @ np.linalg.solve(fit.information, grad.T)
        cov = 0.5 * (cov + cov.T)
    except np.linalg.LinAlgError:
        cov = None
    return EffectEstimate(theta_k=theta, covariance=cov, method=method,
                          uses_ec=not rct_only)


def logistic_overall_effect(ds: CombinedDataset) -> EffectEstimate:
    """Prevalence-weighted RCT-only logistic marginal effects (an overall
    estimator option for binary pipelines)."""
    est = logistic_marginal_effects(ds, rct_only=True)
    pi = np.bincount(ds.w_rct, minlength=ds.k) / ds.n_rct
    var = None
    if est.covariance is not None:
        var = float(pi @ est.covariance @ pi)
    return EffectEstimate(theta_overall=float(pi @ est.theta_k),
                          overall_variance=var,
                          method=LOGISTIC_MARGINAL, uses_ec=False)


# --- propensity weighting -----------------------------------------------------

@dataclass(frozen=True)
class PropensityModel:
    """Logistic model for trial membership given (subgroup, covariates).

    `rho_ec` holds the fitted membership probabilities for EC records and
    `zeta` the normalizer making the largest EC weight exactly 1.
    """

    coefficients: np.ndarray
    rho_ec: np.ndarray
    zeta: float
    log_odds_ec: np.ndarray = field(repr=False, default=None)


def fit_propensity(ds: CombinedDataset) -> PropensityModel:
    """Fit study membership (RCT = 1, EC = 0) on subgroup indicators plus
    raw covariates."""
    if ds.n_rct == 0 or ds.n_ec == 0:
        raise EmptyArm("propensity model needs both studies non-empty")
    x = np.column_stack([
        np.vstack([_onehot(ds.w_rct, ds.k), _onehot(ds.w_ec, ds.k)]),
        np.vstack([ds.x_rct, ds.x_ec]),
    ])
    y = np.concatenate([np.ones(ds.n_rct), np.zeros(ds.n_ec)])
    fit = fit_logistic_irls(x, y)
    if not fit.converged:
        raise NotConverged("propensity fit did not converge")
    lp_ec = x[ds.n_rct:] @ fit.coefficients
    zeta = float(np.exp(-lp_ec.max()))
    rho = np.clip(expit(lp_ec), 1e-15, 1 - 1e-15)
    return PropensityModel(coefficients=fit.coefficients, rho_ec=rho,
                           zeta=zeta, log_odds_ec=lp_ec)


def ec_weights(pm: PropensityModel) -> np.ndarray:
    """Per-EC-record weights: the membership odds scaled so the maximum
    weight is exactly 1."""
    return np.exp(pm.log_odds_ec - pm.log_odds_ec.max())


def weighted_logistic_effects(ds: CombinedDataset) -> EffectEstimate:
    """Propensity-score-weighted pooled logistic subgroup effects."""
    pm = fit_propensity(ds)
    w = np.concatenate([np.ones(ds.n_rct), ec_weights(pm)])
    return logistic_marginal_effects(ds, weights=w, method=IPW_LOGISTIC)
