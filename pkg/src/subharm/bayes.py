"""Conjugate-normal posteriors for a primary analyst (overall effect, trial
data only) and a subgroup analyst (subgroup effects, trial plus external
data), the cut distribution that replaces the subgroup analyst's overall
marginal with the primary analyst's, and the plug-in conditional that
ignores the primary analyst's uncertainty.

The cut mean reproduces full variance-directed harmonization exactly; the
cut covariance inherits the primary analyst's uncertainty along the
prevalence direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CombinedDataset
from .errors import SingularPosterior, SingularPrior
from .glm import _onehot


@dataclass(frozen=True)
class NormalPosterior:
    """A multivariate normal over labelled parameters."""

    mean: np.ndarray
    cov: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        self.mean.setflags(write=False)
        self.cov.setflags(write=False)

    def block(self, prefix: str) -> tuple[np.ndarray, np.ndarray]:
        """Marginal (mean, cov) of all parameters whose label starts with
        `prefix` (e.g. "theta")."""
        idx = [i for i, lab in enumerate(self.labels) if lab.split("[")[0] == prefix]
        if not idx:
            raise KeyError(f"no parameters labelled {prefix!r}")
        return self.mean[idx], self.cov[np.ix_(idx, idx)]


def flat_prior(dim: int, variance: float = 1e4) -> NormalPosterior:
    """A proper, nearly flat normal prior (zero mean, large diagonal)."""
    return NormalPosterior(np.zeros(dim), variance * np.eye(dim),
                           tuple(f"p[{i}]" for i in range(dim)))


def _conjugate_update(x: np.ndarray, y: np.ndarray, noise_var: float,
                      prior_mean: np.ndarray, prior_cov: np.ndarray,
                      labels: tuple[str, ...]) -> NormalPosterior:
    if noise_var <= 0:
        raise ValueError("noise variance must be positive")
    try:
        prior_prec = np.linalg.inv(prior_cov)
    except np.linalg.LinAlgError:
        raise SingularPrior("prior covariance is singular") from None
    post_prec = prior_prec + (x.T @ x) / noise_var
    try:
        post_cov = np.linalg.inv(post_prec)
    except np.linalg.LinAlgError:
        raise SingularPosterior("posterior precision is singular") from None
    post_cov = 0.5 * (post_cov + post_cov.T)
    post_mean = post_cov @ (prior_prec @ prior_mean + (x.T @ y) / noise_var)
    return NormalPosterior(post_mean, post_cov, labels)


def analyst1_posterior(ds: CombinedDataset, sigma2: float,
                       prior: NormalPosterior | None = None) -> NormalPosterior:
    """Overall-effect posterior from trial data only, under the two-
    parameter normal outcome model with known noise variance."""
    prior = prior or flat_prior(2)
    x = np.column_stack([np.ones(ds.n_rct), ds.t_rct.astype(float)])
    return _conjugate_update(x, ds.y_rct, sigma2, prior.mean, prior.cov,
                             ("mu", "theta"))


def analyst2_posterior(ds: CombinedDataset, phi2: float,
                       prior: NormalPosterior | None = None) -> NormalPosterior:
    """Subgroup-effects posterior from trial plus external data, treating
    external outcomes as exchangeable with trial controls."""
    k = ds.k
    prior = prior or flat_prior(2 * k)
    h_r = _onehot(ds.w_rct, k)
    h_e = _onehot(ds.w_ec, k)
    x = np.block([
        [h_r, h_r * ds.t_rct[:, None]],
        [h_e, np.zeros((ds.n_ec, k))],
    ])
    y = np.concatenate([ds.y_rct, ds.y_ec])
    labels = (*(f"mu[{i + 1}]" for i in range(k)),
              *(f"theta[{i + 1}]" for i in range(k)))
    return _conjugate_update(x, y, phi2, prior.mean, prior.cov, labels)


def cut_distribution(p1: NormalPosterior, p2: NormalPosterior,
                     prevalences) -> NormalPosterior:
    """Mix the subgroup analyst's conditional (given the overall effect)
    over the primary analyst's posterior for that overall effect."""
    pi = np.asarray(prevalences, dtype=float)
    m1, v1 = p1.block("theta")
    m1, v1 = float(m1[0]), float(v1[0, 0])
    m2, s2 = p2.block("theta")
    sp = s2 @ pi
    v_theta2 = float(pi @ sp)
    if v_theta2 <= 0:
        raise SingularPosterior("subgroup posterior is degenerate along the prevalences")
    mean = m2 + sp / v_theta2 * (m1 - float(pi @ m2))
    cov = s2 + (v1 - v_theta2) / v_theta2 ** 2 * np.outer(sp, sp)
    cov = 0.5 * (cov + cov.T)
    labels = tuple(f"theta[{i + 1}]" for i in range(len(pi)))
    return NormalPosterior(mean, cov, labels)


def plug_in_distribution(p2: NormalPosterior, prevalences,
                         theta_hat_a1: float) -> NormalPosterior:
    """Condition the subgroup posterior on the prevalence-weighted average
    equalling a fixed overall point estimate. The support lies in that
    hyperplane, so the covariance is degenerate along the prevalences."""
    pi = np.asarray(prevalences, dtype=float)
    m2, s2 = p2.block("theta")
    sp = s2 @ pi
    v_theta2 = float(pi @ sp)
    if v_theta2 <= 0:
        raise SingularPosterior("subgroup posterior is degenerate along the prevalences")
    mean = m2 + sp / v_theta2 * (float(theta_hat_a1) - float(pi @ m2))
    cov = s2 - np.outer(sp, sp) / v_theta2
    cov = 0.5 * (cov + cov.T)
    labels = tuple(f"theta[{i + 1}]" for i in range(len(pi)))
    return NormalPosterior(mean, cov, labels)
