"""Dense model fitting: design-matrix construction, ordinary least squares,
and weighted logistic regression via iteratively reweighted least squares.

Three design layouts are supported. The overall model uses columns
[intercept, treatment, covariates] on RCT rows only. The pooled subgroup
model stacks RCT rows then EC rows with subgroup intercepts, subgroup-by-
treatment indicators (zero on EC rows), and shared covariate columns. The
bias block holds EC-membership-by-subgroup indicators aligned to the pooled
row order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from .data import CombinedDataset
from .errors import NotConverged, RankDeficient, SeparationDetected

MODEL_OVERALL = "overall_rct"
MODEL_POOLED = "pooled_subgroup"
MODEL_BIAS_BLOCK = "pooled_subgroup_with_bias"

# g(30) is 1 - 9.4e-14; beyond this the fit is effectively separated
SEPARATION_CAP = 30.0
RANK_TOL = 1e-10


@dataclass(frozen=True)
class DesignMatrix:
    """Design values plus per-column role tags (e.g. "mu[2]", "theta[1]",
    "beta[1]", "gamma[3]", "intercept", "treatment")."""

    values: np.ndarray
    column_roles: tuple[str, ...]

    def role_columns(self, prefix: str) -> list[int]:
        return [j for j, r in enumerate(self.column_roles) if r.split("[")[0] == prefix]


@dataclass
class GlmFit:
    """Coefficients with curvature information.

    `information` is X'WX for logistic fits (Fisher information at the
    optimum) and X'WX / dispersion for least squares whenever the
    dispersion is positive; exact fits keep the unscaled cross-product.
    """

    coefficients: np.ndarray
    information: np.ndarray
    dispersion: float | None
    converged: bool
    iterations: int

    @property
    def xtwx(self) -> np.ndarray:
        if self.dispersion is not None and self.dispersion > 0:
            return self.information * self.dispersion
        return self.information


def _onehot(idx: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(idx), k))
    if len(idx):
        out[np.arange(len(idx)), idx] = 1.0
    return out


def build_design(ds: CombinedDataset, model: str) -> DesignMatrix:
    """Build the design matrix for one of the three model layouts."""
    k, d = ds.k, ds.d
    if model == MODEL_OVERALL:
        values = np.column_stack([np.ones(ds.n_rct), ds.t_rct.astype(float), ds.x_rct])
        roles = ("intercept", "treatment", *(f"beta[{j + 1}]" for j in range(d)))
        return DesignMatrix(values, roles)
    if model == MODEL_POOLED:
        h_r = _onehot(ds.w_rct, k)
        h_e = _onehot(ds.w_ec, k)
        values = np.block([
            [h_r, h_r * ds.t_rct[:, None], ds.x_rct],
            [h_e, np.zeros((ds.n_ec, k)), ds.x_ec],
        ])
        roles = (*(f"mu[{i + 1}]" for i in range(k)),
                 *(f"theta[{i + 1}]" for i in range(k)),
                 *(f"beta[{j + 1}]" for j in range(d)))
        return DesignMatrix(values, roles)
    if model == MODEL_BIAS_BLOCK:
        values = np.vstack([np.zeros((ds.n_rct, k)), _onehot(ds.w_ec, k)])
        roles = tuple(f"gamma[{i + 1}]" for i in range(k))
        return DesignMatrix(values, roles)
    raise ValueError(f"unknown design model {model!r}")


def _check_rank(x: np.ndarray) -> None:
    sv = np.linalg.svd(x, compute_uv=False)
    if sv.size == 0 or sv[-1] <= RANK_TOL * sv[0]:
        raise RankDeficient(
            f"design is rank deficient (singular values span {sv[0]:.3g}..{sv[-1] if sv.size else 0:.3g})")


def fit_ols(design: DesignMatrix | np.ndarray, y: np.ndarray,
            weights: np.ndarray | None = None) -> GlmFit:
    """Weighted least squares through a QR factorization.

    Zero-weight rows are retained but contribute nothing; the dispersion
    estimate divides by (number of positive-weight rows - p).
    """
    x = design.values if isinstance(design, DesignMatrix) else np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[0] != y.shape[0]:
        raise ValueError("design rows and outcome length differ")
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    sw = np.sqrt(w)
    xw = x * sw[:, None]
    yw = y * sw
    _check_rank(xw)
    q, r = np.linalg.qr(xw)
    coef = solve_triangular(r, q.T @ yw)
    resid = yw - xw @ coef
    n_eff = int(np.count_nonzero(w))
    p = x.shape[1]
    rss = float(resid @ resid)
    dispersion = rss / (n_eff - p) if n_eff > p else (0.0 if rss < 1e-12 else float("nan"))
    xtwx = xw.T @ xw
    information = xtwx / dispersion if dispersion and dispersion > 0 else xtwx
    return GlmFit(coefficients=coef, information=information,
                  dispersion=dispersion, converged=True, iterations=1)


def _loglik(lp: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    # y may be fractional (binomial proportions); log(1 + e^lp) via logaddexp
    return float(np.sum(w * (y * lp - np.logaddexp(0.0, lp))))


def fit_logistic_irls(design: DesignMatrix | np.ndarray, y: np.ndarray,
                      weights: np.ndarray | None = None, tol: float = 1e-10,
                      max_iter: int = 100,
                      start: np.ndarray | None = None,
                      allow_unconverged: bool = False) -> GlmFit:
    """Weighted logistic regression by Fisher scoring with step halving.

    Convergence requires the weighted score's infinity norm to fall below
    `tol`. Responses may be fractional in [0, 1] (proportion rows); each
    row's log-likelihood contribution is multiplied by its weight. A
    coefficient escaping the +/-30 cap on the logit scale with a
    non-vanishing score raises SeparationDetected. Exhausting `max_iter`
    raises NotConverged unless `allow_unconverged` asks for the partial fit
    (flagged converged=False) instead.
    """
    x = design.values if isinstance(design, DesignMatrix) else np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any((y < 0) | (y > 1)):
        raise ValueError("logistic responses must lie in [0, 1]")
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    n, p = x.shape
    coef = np.zeros(p) if start is None else np.array(start, dtype=float)
    lp = x @ coef
    ll = _loglik(lp, y, w)
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(lp)
        score = x.T @ (w * (y - mu))
        if np.max(np.abs(score)) < tol:
            info = x.T @ (x * (w * mu * (1.0 - mu))[:, None])
            return GlmFit(coef, info, None, True, it - 1)
        irls_w = w * mu * (1.0 - mu)
        h = x.T @ (x * irls_w[:, None])
        try:
            delta = np.linalg.solve(h, score)
        except np.linalg.LinAlgError:
            raise RankDeficient("singular weighted information matrix") from None
        step, halvings = 1.0, 0
        cand = coef + delta
        lp_c = x @ cand
        ll_c = _loglik(lp_c, y, w)
        while ll_c < ll - 1e-12 and halvings < 20:
            step *= 0.5
            halvings += 1
            cand = coef + step * delta
            lp_c = x @ cand
            ll_c = _loglik(lp_c, y, w)
        coef, lp, ll = cand, lp_c, ll_c
        if np.max(np.abs(coef)) > SEPARATION_CAP:
            mu = expit(lp)
            score = x.T @ (w * (y - mu))
            if np.max(np.abs(score)) >= tol:
                raise SeparationDetected(
                    f"coefficient magnitude exceeded {SEPARATION_CAP} with score "
                    f"{np.max(np.abs(score)):.3g}; data look separated")
    mu = expit(lp)
    score = x.T @ (w * (y - mu))
    info = x.T @ (x * (w * mu * (1.0 - mu))[:, None])
    if np.max(np.abs(score)) < tol:
        return GlmFit(coef, info, None, True, it)
    if allow_unconverged:
        return GlmFit(coef, info, None, False, it)
    raise NotConverged(
        f"IRLS did not reach tol={tol} in {max_iter} iterations "
        f"(score {np.max(np.abs(score)):.3g})")
