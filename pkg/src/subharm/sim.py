"""Scenario generation, Monte-Carlo replication, pool-resampling
experiments, and metric aggregation.

Replicates draw from counter-based streams keyed by (seed, replicate,
role), so reports are deterministic for a fixed seed regardless of the
worker count. Failed replicates are recorded with their reason and
excluded from aggregates; the exclusion counts appear in the report.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import expit

from .data import (
    BINARY,
    CONTINUOUS,
    CombinedDataset,
    CsvSchema,
    DesignCounts,
    compute_design_counts,
    load_dataset,
)
from .errors import (
    ConfigError,
    DataError,
    DegenerateDirection,
    InvalidEffect,
    InvalidSpec,
    NumericalError,
    PoolTooSmall,
)
from .estimators import (
    EffectEstimate,
    diff_means_overall,
    diff_means_pooled_subgroups,
    ec_weights,
    fit_propensity,
    logistic_marginal_effects,
    logistic_overall_effect,
    ols_overall_effect,
    ols_subgroup_effects,
    oracle_subgroups,
    rct_only_subgroups,
    weighted_logistic_effects,
)
from .harmonize import (
    FULL,
    HarmonizationConfig,
    analytic_bias_variance,
    bd_direction_glm,
    bd_direction_linear,
    build_limit_map_spec,
    harmonize,
    parse_lambda,
    solve_sigma_from_b,
    vd_sigma,
)
from .intervals import bootstrap_interval, cut_interval, rct_only_interval, analytic_interval
from .bayes import analyst1_posterior, analyst2_posterior, cut_distribution, flat_prior
from .rng import ROLE_COVARIATE, ROLE_OUTCOME, ROLE_RESAMPLE, ROLE_SPIKE, stream

logger = logging.getLogger("subharm")


# --- scenario specification ---------------------------------------------------

@dataclass(frozen=True)
class ScenarioSpec:
    """Generative model for one experiment.

    For the continuous family, `mu`, `theta`, and `distortion` live on the
    outcome scale and outcomes are normal with variance `phi2`; for the
    binary family they live on the logit scale and outcomes are Bernoulli.
    External outcomes shift the control level by `distortion` per
    subgroup. Covariates are independent normals with study-specific
    moments; `fixed_covariates` freezes the covariate panel across
    replicates.
    """

    name: str
    outcome_family: str
    k: int
    n_rct_treated: tuple[int, ...]
    n_rct_control: tuple[int, ...]
    n_ec: tuple[int, ...]
    mu: tuple[float, ...]
    theta: tuple[float, ...]
    distortion: tuple[float, ...]
    phi2: float = 1.0
    n_covariates: int = 0
    beta: tuple[float, ...] = ()
    x_mean_rct: float = 0.0
    x_sd_rct: float = 1.0
    x_mean_ec: float = 0.0
    x_sd_ec: float = 1.0
    fixed_covariates: bool = False
    prevalences: tuple[float, ...] | None = None
    version: int = 1

    def __post_init__(self):
        k = self.k
        if self.outcome_family not in (CONTINUOUS, BINARY):
            raise InvalidSpec(f"unknown outcome family {self.outcome_family!r}")
        for fname in ("n_rct_treated", "n_rct_control", "n_ec", "mu", "theta", "distortion"):
            if len(getattr(self, fname)) != k:
                raise InvalidSpec(f"{fname} must have length K={k}")
        if any(n < 0 for n in (*self.n_rct_treated, *self.n_rct_control, *self.n_ec)):
            raise InvalidSpec("cell sizes must be non-negative")
        if sum(self.n_rct_treated) == 0 or sum(self.n_rct_control) == 0:
            raise InvalidSpec("both RCT arms need patients")
        if self.outcome_family == CONTINUOUS and not self.phi2 > 0:
            raise InvalidSpec("phi2 must be positive for continuous outcomes")
        if len(self.beta) != self.n_covariates:
            raise InvalidSpec("beta length must equal n_covariates")
        if self.prevalences is not None:
            pi = np.asarray(self.prevalences, float)
            if pi.shape != (k,) or np.any(pi <= 0) or abs(pi.sum() - 1) > 1e-12:
                raise InvalidSpec("prevalences must be a strictly positive simplex vector")

    def with_distortion(self, distortion) -> "ScenarioSpec":
        d = tuple(float(v) for v in np.broadcast_to(distortion, (self.k,)))
        return replace(self, distortion=d)

    def to_dict(self) -> dict:
        return {
            "version": self.version, "name": self.name,
            "outcome_family": self.outcome_family, "k": self.k,
            "n_rct_treated": list(self.n_rct_treated),
            "n_rct_control": list(self.n_rct_control),
            "n_ec": list(self.n_ec),
            "mu": list(self.mu), "theta": list(self.theta),
            "distortion": list(self.distortion), "phi2": self.phi2,
            "n_covariates": self.n_covariates, "beta": list(self.beta),
            "x_mean_rct": self.x_mean_rct, "x_sd_rct": self.x_sd_rct,
            "x_mean_ec": self.x_mean_ec, "x_sd_ec": self.x_sd_ec,
            "fixed_covariates": self.fixed_covariates,
            "prevalences": None if self.prevalences is None else list(self.prevalences),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ScenarioSpec":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(obj) - known
        if unknown:
            raise InvalidSpec(f"unknown scenario keys: {sorted(unknown)}")
        kw = dict(obj)
        for fname in ("n_rct_treated", "n_rct_control", "n_ec", "mu", "theta",
                      "distortion", "beta"):
            if fname in kw and kw[fname] is not None:
                kw[fname] = tuple(kw[fname])
        if kw.get("prevalences") is not None:
            kw["prevalences"] = tuple(kw["prevalences"])
        kw.setdefault("name", "inline")
        return cls(**kw)


def generate_scenario(spec: ScenarioSpec, seed: int, replicate: int = 0) -> CombinedDataset:
    """Draw one dataset pair. Cell counts are deterministic; outcomes (and
    covariates, unless frozen) are stochastic."""
    k = spec.k
    w_r = np.repeat(np.arange(k), [t + c for t, c in zip(spec.n_rct_treated, spec.n_rct_control)])
    t_r = np.concatenate([
        np.r_[np.ones(t, dtype=np.int64), np.zeros(c, dtype=np.int64)]
        for t, c in zip(spec.n_rct_treated, spec.n_rct_control)
    ]) if len(w_r) else np.zeros(0, dtype=np.int64)
    w_e = np.repeat(np.arange(k), spec.n_ec)
    d = spec.n_covariates
    cov_rng = stream(seed, 0 if spec.fixed_covariates else replicate, ROLE_COVARIATE)
    x_r = cov_rng.normal(spec.x_mean_rct, spec.x_sd_rct, size=(len(w_r), d)) if d else None
    x_e = cov_rng.normal(spec.x_mean_ec, spec.x_sd_ec, size=(len(w_e), d)) if d else None

    mu = np.asarray(spec.mu)
    th = np.asarray(spec.theta)
    dist = np.asarray(spec.distortion)
    beta = np.asarray(spec.beta)
    lp_r = mu[w_r] + th[w_r] * t_r + (x_r @ beta if d else 0.0)
    lp_e = mu[w_e] + dist[w_e] + (x_e @ beta if d else 0.0)
    out_rng = stream(seed, replicate, ROLE_OUTCOME)
    if spec.outcome_family == CONTINUOUS:
        y_r = lp_r + out_rng.normal(0.0, np.sqrt(spec.phi2), len(w_r))
        y_e = lp_e + out_rng.normal(0.0, np.sqrt(spec.phi2), len(w_e))
    else:
        y_r = (out_rng.random(len(w_r)) < expit(lp_r)).astype(float)
        y_e = (out_rng.random(len(w_e)) < expit(lp_e)).astype(float)
    return CombinedDataset.from_arrays(
        y_rct=y_r, t_rct=t_r, w_rct=w_r, y_ec=y_e, w_ec=w_e, k=k,
        x_rct=x_r, x_ec=x_e, outcome_family=spec.outcome_family)


def true_effects(spec: ScenarioSpec, seed: int = 0) -> np.ndarray:
    """True subgroup effects on the reporting scale: the model effects for
    continuous outcomes; for binary outcomes, the response-probability
    difference averaged over the trial covariate distribution (the frozen
    panel when covariates are fixed, otherwise by quadrature)."""
    if spec.outcome_family == CONTINUOUS:
        return np.asarray(spec.theta, dtype=float)
    mu = np.asarray(spec.mu)
    th = np.asarray(spec.theta)
    if spec.n_covariates == 0:
        return expit(mu + th) - expit(mu)
    beta = np.asarray(spec.beta)
    if spec.fixed_covariates:
        ds = generate_scenario(spec, seed, 0)
        xb = ds.x_rct @ beta
        out = np.empty(spec.k)
        for j in range(spec.k):
            m = ds.w_rct == j
            out[j] = float(np.mean(expit(mu[j] + th[j] + xb[m]) - expit(mu[j] + xb[m])))
        return out
    # linear predictor is scalar normal: Gauss-Hermite over beta'X
    m_lp = spec.x_mean_rct * float(beta.sum())
    s_lp = spec.x_sd_rct * float(np.sqrt((beta ** 2).sum()))
    nodes, wts = hermegauss(80)
    wts = wts / wts.sum()
    z = m_lp + s_lp * nodes
    out = np.empty(spec.k)
    for j in range(spec.k):
        out[j] = float(wts @ (expit(mu[j] + th[j] + z) - expit(mu[j] + z)))
    return out


# --- estimator configuration ---------------------------------------------------

INITIAL_KINDS = ("diff_means_pooled", "diff_means_rct", "oracle", "ols_pooled",
                 "ols_rct", "logistic_pooled", "logistic_rct", "logistic_ipw")
OVERALL_KINDS = ("diff_means", "ols", "logistic")
SIGMA_MODES = ("identity", "fixed", "bd", "vd")


@dataclass(frozen=True)
class EstimatorConfig:
    """One estimator column in a report: either a plain initial estimator
    or a harmonized transform of one."""

    name: str
    kind: str
    initial: str = ""
    overall: str = "diff_means"
    lam: float = FULL
    sigma_mode: str = "bd"
    sigma: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if self.kind == "harmonized":
            if self.initial not in INITIAL_KINDS:
                raise ConfigError(f"harmonized initial must be one of {INITIAL_KINDS}")
            if self.overall not in OVERALL_KINDS:
                raise ConfigError(f"overall must be one of {OVERALL_KINDS}")
            if self.sigma_mode not in SIGMA_MODES:
                raise ConfigError(f"sigma_mode must be one of {SIGMA_MODES}")
        elif self.kind not in INITIAL_KINDS:
            raise ConfigError(f"unknown estimator kind {self.kind!r}")


def parse_estimator(obj) -> EstimatorConfig:
    """Accept a plain kind name or a dict with harmonization options.
    Unknown keys are errors."""
    if isinstance(obj, str):
        return EstimatorConfig(name=obj, kind=obj)
    if not isinstance(obj, dict):
        raise ConfigError(f"estimator entries must be strings or objects, got {type(obj)}")
    allowed = {"name", "kind", "initial", "overall", "lambda", "sigma_mode", "sigma"}
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown estimator keys: {sorted(unknown)}")
    kind = obj.get("kind")
    if kind is None:
        raise ConfigError("estimator objects need a 'kind'")
    lam = parse_lambda(obj.get("lambda", "full"))
    sigma = obj.get("sigma")
    if sigma is not None:
        sigma = tuple(tuple(float(v) for v in row) for row in sigma)
    lam_str = "full" if np.isinf(lam) else format(lam, "g")
    default_name = (f"harmonized[{obj.get('initial')},lam={lam_str},"
                    f"{obj.get('sigma_mode', 'bd')}]" if kind == "harmonized" else kind)
    return EstimatorConfig(
        name=obj.get("name", default_name), kind=kind,
        initial=obj.get("initial", ""), overall=obj.get("overall", "diff_means"),
        lam=lam, sigma_mode=obj.get("sigma_mode", "bd"), sigma=sigma)


class _ReplicateContext:
    """Caches shared fits within one replicate."""

    def __init__(self, ds: CombinedDataset, dc: DesignCounts, mu_true=None):
        self.ds = ds
        self.dc = dc
        self.mu_true = mu_true
        self._cache: dict = {}

    def initial(self, kind: str) -> EffectEstimate:
        if kind in self._cache:
            return self._cache[kind]
        ds = self.ds
        if kind == "diff_means_pooled":
            est = diff_means_pooled_subgroups(ds)
        elif kind == "diff_means_rct":
            est = rct_only_subgroups(ds, "diff_means")
        elif kind == "oracle":
            if self.mu_true is None:
                raise ConfigError("oracle estimator needs known control levels")
            est = oracle_subgroups(ds, self.mu_true)
        elif kind == "ols_pooled":
            est = ols_subgroup_effects(ds)
        elif kind == "ols_rct":
            est = rct_only_subgroups(ds, "ols")
        elif kind == "logistic_pooled":
            est = logistic_marginal_effects(ds)
        elif kind == "logistic_rct":
            est = rct_only_subgroups(ds, "logistic")
        elif kind == "logistic_ipw":
            est = weighted_logistic_effects(ds)
        else:
            raise ConfigError(f"unknown estimator kind {kind!r}")
        self._cache[kind] = est
        return est

    def overall(self, kind: str) -> EffectEstimate:
        key = f"overall:{kind}"
        if key in self._cache:
            return self._cache[key]
        if kind == "diff_means":
            est = diff_means_overall(self.ds)
        elif kind == "ols":
            est = ols_overall_effect(self.ds)
        elif kind == "logistic":
            est = logistic_overall_effect(self.ds)
        else:
            raise ConfigError(f"unknown overall kind {kind!r}")
        self._cache[key] = est
        return est

    def ipw_weights(self) -> np.ndarray:
        if "ipw" not in self._cache:
            self._cache["ipw"] = ec_weights(fit_propensity(self.ds))
        return self._cache["ipw"]

    def bd_direction(self, initial_kind: str) -> np.ndarray:
        key = f"bd:{initial_kind}"
        if key in self._cache:
            return self._cache[key]
        pi = self.dc.pi
        if initial_kind == "diff_means_pooled":
            b = -self.dc.q_ratio
            denom = float(pi @ b)
            if abs(denom) <= 1e-10 * max(1.0, float(np.abs(b).max(initial=0.0))):
                raise DegenerateDirection("no external controls in any subgroup")
            u = b / denom
        elif initial_kind == "ols_pooled":
            _, u = bd_direction_linear(self.ds, pi)
        elif initial_kind in ("logistic_pooled", "logistic_ipw"):
            w = self.ipw_weights() if initial_kind == "logistic_ipw" else None
            spec = build_limit_map_spec(self.ds, w, pi)
            _, u = bd_direction_glm(spec)
        else:
            raise ConfigError(f"bias-directed mode undefined for initial {initial_kind!r}")
        self._cache[key] = u
        return u

    def bd_sigma(self, initial_kind: str) -> np.ndarray:
        u = self.bd_direction(initial_kind)
        return solve_sigma_from_b(u, self.dc.pi)

    def evaluate(self, cfg: EstimatorConfig) -> np.ndarray:
        if cfg.kind != "harmonized":
            return self.initial(cfg.kind).require_subgroups()
        initial = self.initial(cfg.initial)
        overall = self.overall(cfg.overall)
        if cfg.sigma_mode == "bd":
            try:
                if np.isinf(cfg.lam):
                    hc = HarmonizationConfig(lam=FULL, direction=self.bd_direction(cfg.initial))
                else:
                    hc = HarmonizationConfig(lam=cfg.lam, sigma=self.bd_sigma(cfg.initial))
            except DegenerateDirection:
                logger.warning("bias direction degenerate; falling back to "
                               "variance-directed harmonization")
                hc = HarmonizationConfig(lam=cfg.lam, sigma=vd_sigma(initial), mode="vd")
        elif cfg.sigma_mode == "vd":
            hc = HarmonizationConfig(lam=cfg.lam, sigma=vd_sigma(initial), mode="vd")
        else:  # fixed; "identity" is the explicit alias for the default matrix
            sigma = (np.asarray(cfg.sigma, dtype=float) if cfg.sigma is not None
                     else np.eye(self.ds.k))
            hc = HarmonizationConfig(lam=cfg.lam, sigma=sigma)
        return harmonize(initial, overall, self.dc.pi, hc).theta_k


# --- reports -------------------------------------------------------------------

@dataclass
class MonteCarloReport:
    """Per-estimator and per-interval operating characteristics."""

    scenario: str
    reps: int
    seed: int
    truth: np.ndarray
    estimator_stats: dict[str, dict]
    interval_stats: dict[str, dict]
    failures: list[tuple[int, str, str]]
    prevalence_source: str
    replicate_estimates: dict[str, np.ndarray] | None = None
    extra: dict = field(default_factory=dict)

    def to_long_rows(self) -> list[dict]:
        rows = []
        for name, st in self.estimator_stats.items():
            for metric in ("bias", "sd", "rmse"):
                # rmse noise is dominated by the sd component
                se = st["mc_se_bias"] if metric == "bias" else st["mc_se_sd"]
                for k in range(len(self.truth)):
                    rows.append(dict(scenario=self.scenario, estimator=name,
                                     subgroup=k + 1, metric=metric,
                                     value=float(st[metric][k]), mc_se=float(se[k])))
            rows.append(dict(scenario=self.scenario, estimator=name, subgroup=0,
                             metric="n_used", value=int(st["n_used"]), mc_se=0.0))
        for name, st in self.interval_stats.items():
            for k in range(len(self.truth)):
                rows.append(dict(scenario=self.scenario, estimator=f"interval:{name}",
                                 subgroup=k + 1, metric="coverage",
                                 value=float(st["coverage"][k]),
                                 mc_se=float(st["mc_se_coverage"][k])))
                rows.append(dict(scenario=self.scenario, estimator=f"interval:{name}",
                                 subgroup=k + 1, metric="mean_width",
                                 value=float(st["mean_width"][k]),
                                 mc_se=float(st["mc_se_width"][k])))
            rows.append(dict(scenario=self.scenario, estimator=f"interval:{name}",
                             subgroup=0, metric="n_used", value=int(st["n_used"]), mc_se=0.0))
        return rows

    def to_json_dict(self) -> dict:
        def arr(a):
            return [float(v) for v in np.asarray(a).ravel()]
        return {
            "scenario": self.scenario, "reps": self.reps, "seed": self.seed,
            "truth": arr(self.truth),
            "prevalence_source": self.prevalence_source,
            "estimators": {
                name: {key: (arr(val) if isinstance(val, np.ndarray) else val)
                       for key, val in st.items()}
                for name, st in self.estimator_stats.items()},
            "intervals": {
                name: {key: (arr(val) if isinstance(val, np.ndarray) else val)
                       for key, val in st.items()}
                for name, st in self.interval_stats.items()},
            "failures": [list(f) for f in self.failures],
            "extra": self.extra,
        }


def _aggregate(scenario: str, reps: int, seed: int, truth: np.ndarray,
               names: Sequence[str], est: np.ndarray,
               interval_methods: Sequence[str], cover: np.ndarray,
               width: np.ndarray, failures: list,
               prevalence_source: str, keep_replicates: bool) -> MonteCarloReport:
    est_stats = {}
    for i, name in enumerate(names):
        vals = est[:, i, :]
        ok = np.isfinite(vals).all(axis=1)
        used = vals[ok]
        n = len(used)
        if n < 2:
            raise NumericalError(f"estimator {name!r} failed in all but {n} replicates")
        bias = used.mean(axis=0) - truth
        sd = used.std(axis=0, ddof=1)
        est_stats[name] = dict(
            bias=bias, sd=sd, rmse=np.sqrt(bias ** 2 + sd ** 2),
            mc_se_bias=sd / np.sqrt(n), mc_se_sd=sd / np.sqrt(2.0 * (n - 1)),
            n_used=n, n_failed=int(reps - n))
    int_stats = {}
    for i, name in enumerate(interval_methods):
        cv = cover[:, i, :]
        ok = np.isfinite(cv).all(axis=1)
        n = int(ok.sum())
        if n == 0:
            raise NumericalError(f"interval {name!r} failed in every replicate")
        p = cv[ok].mean(axis=0)
        wd = width[ok][:, i, :]
        int_stats[name] = dict(
            coverage=p, mean_width=wd.mean(axis=0),
            mc_se_coverage=np.sqrt(p * (1 - p) / n),
            mc_se_width=wd.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(p),
            n_used=n, n_failed=int(reps - n))
    rep_est = None
    if keep_replicates:
        rep_est = {name: est[:, i, :].copy() for i, name in enumerate(names)}
    return MonteCarloReport(scenario=scenario, reps=reps, seed=seed, truth=truth,
                            estimator_stats=est_stats, interval_stats=int_stats,
                            failures=failures, prevalence_source=prevalence_source,
                            replicate_estimates=rep_est)


# --- Monte-Carlo driver ----------------------------------------------------------

def _interval_rows(ds, dc, spec, hcfg_builder, methods, alpha, bootstrap_r,
                   seed, rep, truth):
    cover = np.full((len(methods), spec.k), np.nan)
    width = np.full((len(methods), spec.k), np.nan)
    fails = []
    hcfg, theta_h = hcfg_builder()
    for i, method in enumerate(methods):
        try:
            if method == "analytic":
                sigma = hcfg.sigma if hcfg.sigma is not None else np.eye(spec.k)
                _, vh = analytic_bias_variance(dc, np.zeros(spec.k), sigma,
                                               hcfg.lam, spec.phi2)
                iv = analytic_interval(theta_h, vh, alpha)
            elif method == "cut":
                p1 = analyst1_posterior(ds, spec.phi2, flat_prior(2))
                p2 = analyst2_posterior(ds, spec.phi2, flat_prior(2 * spec.k))
                iv = cut_interval(cut_distribution(p1, p2, dc.pi), alpha)
            elif method == "bootstrap":
                iv = bootstrap_interval(ds, hcfg, r=bootstrap_r, alpha=alpha,
                                        seed=seed, replicate=rep)
            elif method == "rct_only":
                iv = rct_only_interval(ds, alpha)
            else:
                raise ConfigError(f"unknown interval method {method!r}")
            cover[i] = iv.covers(truth).astype(float)
            width[i] = iv.width
        except (NumericalError, DataError) as exc:
            fails.append((rep, f"interval:{method}", str(exc)))
    return cover, width, fails


def _scenario_batch(args) -> tuple:
    (spec, est_cfgs, methods, alpha, bootstrap_r, seed, truth, interval_cfg,
     rep_indices) = args
    n_est, n_int, k = len(est_cfgs), len(methods), spec.k
    est = np.full((len(rep_indices), n_est, k), np.nan)
    cover = np.full((len(rep_indices), n_int, k), np.nan)
    width = np.full((len(rep_indices), n_int, k), np.nan)
    failures = []
    mu_true = np.asarray(spec.mu) if spec.outcome_family == CONTINUOUS else None
    for row, rep in enumerate(rep_indices):
        ds = generate_scenario(spec, seed, rep)
        dc = compute_design_counts(ds, spec.prevalences)
        ctx = _ReplicateContext(ds, dc, mu_true)
        for i, cfg in enumerate(est_cfgs):
            try:
                est[row, i] = ctx.evaluate(cfg)
            except (NumericalError, DataError) as exc:
                failures.append((rep, cfg.name, str(exc)))
        if methods:
            def build():
                if interval_cfg.sigma_mode == "bd":
                    hc = HarmonizationConfig(lam=interval_cfg.lam,
                                             sigma=ctx.bd_sigma(interval_cfg.initial))
                elif interval_cfg.sigma_mode == "vd":
                    hc = HarmonizationConfig(lam=interval_cfg.lam,
                                             sigma=vd_sigma(ctx.initial(interval_cfg.initial)))
                else:
                    sig = (np.asarray(interval_cfg.sigma, float)
                           if interval_cfg.sigma is not None else np.eye(k))
                    hc = HarmonizationConfig(lam=interval_cfg.lam, sigma=sig)
                theta_h = harmonize(ctx.initial(interval_cfg.initial),
                                    ctx.overall(interval_cfg.overall), dc.pi, hc).theta_k
                return hc, theta_h
            try:
                cv, wd, fl = _interval_rows(ds, dc, spec, build, methods, alpha,
                                            bootstrap_r, seed, rep, truth)
                cover[row], width[row] = cv, wd
                failures.extend(fl)
            except (NumericalError, DataError) as exc:
                failures.append((rep, "intervals", str(exc)))
    return est, cover, width, failures


def _run_batches(batch_fn, common_args, reps: int, workers: int):
    indices = np.arange(reps)
    if workers <= 1:
        return [batch_fn((*common_args, indices))]
    chunks = np.array_split(indices, min(workers * 4, reps))
    results = [None] * len(chunks)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(batch_fn, (*common_args, chunk)): i
                   for i, chunk in enumerate(chunks) if len(chunk)}
        for fut, i in futures.items():
            results[i] = fut.result()
    return [r for r in results if r is not None]


def _stack_batches(results):
    est = np.concatenate([r[0] for r in results], axis=0)
    cover = np.concatenate([r[1] for r in results], axis=0)
    width = np.concatenate([r[2] for r in results], axis=0)
    failures = sorted((f for r in results for f in r[3]), key=lambda f: (f[0], f[1]))
    return est, cover, width, failures


def run_monte_carlo(spec: ScenarioSpec, estimators: Sequence, reps: int, seed: int,
                    intervals: Sequence[str] = (), alpha: float = 0.05,
                    bootstrap_r: int = 500, workers: int = 1,
                    keep_replicates: bool = False,
                    interval_estimator: str | None = None) -> MonteCarloReport:
    """Replicate the scenario and aggregate estimator and interval
    operating characteristics against the true subgroup effects."""
    if reps < 2:
        raise ConfigError("need at least 2 replicates")
    est_cfgs = [parse_estimator(e) if not isinstance(e, EstimatorConfig) else e
                for e in estimators]
    names = [c.name for c in est_cfgs]
    if len(set(names)) != len(names):
        raise ConfigError("estimator names must be unique")
    interval_cfg = None
    if intervals:
        if interval_estimator is not None:
            cands = [c for c in est_cfgs if c.name == interval_estimator]
        else:
            cands = [c for c in est_cfgs if c.kind == "harmonized"]
            # prefer full harmonization when a lambda grid is present
            full = [c for c in cands if np.isinf(c.lam)]
            cands = full or cands
        if not cands:
            raise ConfigError("interval methods need a harmonized estimator to target")
        interval_cfg = cands[0]
        if spec.outcome_family != CONTINUOUS and set(intervals) - {"rct_only"}:
            raise ConfigError("analytic/cut/bootstrap intervals are defined for the "
                              "continuous difference-of-means pipeline")
    truth = true_effects(spec, seed)
    common = (spec, est_cfgs, tuple(intervals), alpha, bootstrap_r, seed, truth,
              interval_cfg)
    results = _run_batches(_scenario_batch, common, reps, workers)
    est, cover, width, failures = _stack_batches(results)
    source = "user_supplied" if spec.prevalences is not None else "rct_empirical"
    return _aggregate(spec.name, reps, seed, truth, names, est, tuple(intervals),
                      cover, width, failures, source, keep_replicates)


# --- pool resampling --------------------------------------------------------------

def spike_effect(y: np.ndarray, w: np.ndarray, k: int, amounts,
                 rng: np.random.Generator) -> np.ndarray:
    """Raise the response rate of a binary arm by `amounts[k]` in
    expectation, flipping zeros to ones with the matching per-subgroup
    probability."""
    amounts = np.broadcast_to(np.asarray(amounts, dtype=float), (k,))
    if np.any(amounts < 0):
        raise InvalidEffect("spike amounts must be non-negative")
    y = y.copy()
    for j in range(k):
        m = w == j
        if not m.any() or amounts[j] == 0:
            continue
        rate = float(y[m].mean())
        if rate + amounts[j] > 1 + 1e-12:
            raise InvalidEffect(
                f"subgroup {j + 1}: target rate {rate + amounts[j]:.3f} exceeds 1")
        flip_p = min(1.0, amounts[j] / max(1e-300, 1.0 - rate)) if rate < 1 else 0.0
        zeros = m & (y == 0)
        y[zeros] = (rng.random(int(zeros.sum())) < flip_p).astype(float)
    return y


@dataclass(frozen=True)
class ResamplePools:
    """Source pools for in-silico trials: the actual trial control records
    and the external dataset."""

    y_ctrl: np.ndarray
    w_ctrl: np.ndarray
    x_ctrl: np.ndarray
    y_ec: np.ndarray
    w_ec: np.ndarray
    x_ec: np.ndarray
    k: int
    labels: tuple[str, ...]


def load_resample_pools(trial_csv: str, ec_csv: str, schema: CsvSchema,
                        subgroup_levels=None) -> ResamplePools:
    ds = load_dataset(trial_csv, ec_csv, schema, outcome_family=BINARY,
                      subgroup_levels=subgroup_levels)
    ctrl = ds.t_rct == 0
    if not ctrl.any():
        raise PoolTooSmall("trial file has no control records")
    if ds.n_ec == 0:
        raise PoolTooSmall("external file has no records")
    missing = [lab for j, lab in enumerate(ds.subgroup_labels)
               if not ((ds.w_rct[ctrl] == j).any() and (ds.w_ec == j).any())]
    if missing:
        raise PoolTooSmall(f"subgroups {missing} missing from a source pool")
    return ResamplePools(
        y_ctrl=ds.y_rct[ctrl], w_ctrl=ds.w_rct[ctrl], x_ctrl=ds.x_rct[ctrl],
        y_ec=ds.y_ec, w_ec=ds.w_ec, x_ec=ds.x_ec, k=ds.k, labels=ds.subgroup_labels)


DEFAULT_RESAMPLE_ESTIMATORS = (
    "logistic_pooled",
    "logistic_ipw",
    {"kind": "harmonized", "name": "harmonized_ipw", "initial": "logistic_ipw",
     "overall": "diff_means", "lambda": "full", "sigma_mode": "identity"},
    "logistic_rct",
)


def _resample_batch(args) -> tuple:
    (pools, est_cfgs, n_control, n_experimental, n_ec, seed, spike_amounts,
     fixed_pi, rep_indices) = args
    k = pools.k
    est = np.full((len(rep_indices), len(est_cfgs), k), np.nan)
    cover = np.zeros((len(rep_indices), 0, k))
    width = np.zeros((len(rep_indices), 0, k))
    failures = []
    d = pools.x_ctrl.shape[1]
    for row, rep in enumerate(rep_indices):
        rng = stream(seed, rep, ROLE_RESAMPLE)
        i_ctrl = rng.integers(0, len(pools.y_ctrl), n_control)
        i_exp = rng.integers(0, len(pools.y_ctrl), n_experimental)
        i_ec = rng.integers(0, len(pools.y_ec), n_ec)
        y_exp = pools.y_ctrl[i_exp]
        w_exp = pools.w_ctrl[i_exp]
        if spike_amounts is not None:
            try:
                y_exp = spike_effect(y_exp, w_exp, k, spike_amounts,
                                     stream(seed, rep, ROLE_SPIKE))
            except InvalidEffect as exc:
                failures.append((rep, "spike", str(exc)))
                continue
        y_r = np.concatenate([y_exp, pools.y_ctrl[i_ctrl]])
        w_r = np.concatenate([w_exp, pools.w_ctrl[i_ctrl]])
        t_r = np.concatenate([np.ones(n_experimental, dtype=np.int64),
                              np.zeros(n_control, dtype=np.int64)])
        x_r = np.concatenate([pools.x_ctrl[i_exp], pools.x_ctrl[i_ctrl]]) if d else None
        x_e = pools.x_ec[i_ec] if d else None
        try:
            ds = CombinedDataset.from_arrays(
                y_rct=y_r, t_rct=t_r, w_rct=w_r, y_ec=pools.y_ec[i_ec],
                w_ec=pools.w_ec[i_ec], k=k, x_rct=x_r, x_ec=x_e,
                outcome_family=BINARY, subgroup_labels=pools.labels)
            dc = compute_design_counts(ds, fixed_pi)
        except (DataError, NumericalError) as exc:
            failures.append((rep, "design", str(exc)))
            continue
        ctx = _ReplicateContext(ds, dc)
        for i, cfg in enumerate(est_cfgs):
            try:
                est[row, i] = ctx.evaluate(cfg)
            except (NumericalError, DataError) as exc:
                failures.append((rep, cfg.name, str(exc)))
    return est, cover, width, failures


def run_resampling(trial_csv: str, ec_csv: str, n_control: int = 100,
                   n_experimental: int = 200, n_ec: int = 600,
                   reps: int = 1000, estimators: Sequence | None = None,
                   seed: int = 0, schema: CsvSchema | None = None,
                   workers: int = 1, spike=None,
                   prevalence_mode: str = "replicate",
                   keep_replicates: bool = True) -> MonteCarloReport:
    """Generate in-silico trials by resampling both trial arms from the
    actual control pool (so true effects are zero) and external controls
    from the external pool, then compare estimators across replicates."""
    if prevalence_mode not in ("replicate", "pool"):
        raise ConfigError("prevalence_mode must be 'replicate' or 'pool'")
    schema = schema or CsvSchema()
    pools = load_resample_pools(trial_csv, ec_csv, schema)
    if min(n_control, n_experimental, n_ec) < 1 or reps < 2:
        raise ConfigError("resampling sizes and reps must be positive")
    est_cfgs = [parse_estimator(e) if not isinstance(e, EstimatorConfig) else e
                for e in (estimators or DEFAULT_RESAMPLE_ESTIMATORS)]
    names = [c.name for c in est_cfgs]
    fixed_pi = None
    if prevalence_mode == "pool":
        counts = np.bincount(pools.w_ctrl, minlength=pools.k).astype(float)
        fixed_pi = tuple(counts / counts.sum())
    spike_amounts = None if spike is None else np.asarray(spike, dtype=float)
    common = (pools, est_cfgs, n_control, n_experimental, n_ec, seed,
              spike_amounts, fixed_pi)
    results = _run_batches(_resample_batch, common, reps, workers)
    est, cover, width, failures = _stack_batches(results)
    truth = np.zeros(pools.k)
    report = _aggregate("resample", reps, seed, truth, names, est, (), cover,
                        width, failures,
                        "pool" if fixed_pi is not None else "replicate_empirical",
                        keep_replicates)
    report.extra.update(n_control=n_control, n_experimental=n_experimental,
                        n_ec=n_ec, subgroup_labels=list(pools.labels))
    return report
