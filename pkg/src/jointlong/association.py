"""Marginal association between the biomarker and the outcome.

The quantity of interest is the population-level difference

    beta_joint(a) = E[y(t) | v(s) = a + delta] - E[y(t) | v(s) = a],

for a hypothetical new subject whose random effects follow the fitted
covariance. Conditioning a Gaussian vector (b, v(s)) on the observed
biomarker value gives a closed-form conditional for the random
effects; the outer expectation over the outcome mean is then a Monte
Carlo average through the inverse link. Both expectations in a
difference share the same standard normal draws (common random
numbers), so structurally null configurations are zero to the last
bit, not merely to Monte Carlo noise.

Uncertainty comes from resampling the hyperparameters out of their
Gaussian approximation; each resample re-derives the fixed effects
with a single warm inner solve against the fit's stored dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .gaussian import MvnDist, condition, derive_rng, psd_factor
from .model import (
    Family,
    HyperVector,
    LongDataset,
    ModelKind,
    ModelSpec,
    SubjectRecord,
    design_matrix,
    inverse_link,
)

__all__ = ["AssocQuery", "AssocResult", "SurfaceResult", "marginal_mean", "beta_joint", "assoc_surface"]


@dataclass(frozen=True)
class AssocQuery:
    """One association question.

    ``s`` is the biomarker conditioning time, ``t`` the outcome time
    (equal for cross-sectional queries), ``a`` the biomarker value, and
    ``delta`` the increment. ``include_noise`` controls whether the
    conditioning variance var(v(s)) carries the measurement error term;
    conditioning on the observed noisy value is the default.
    """

    a: float
    s: float
    t: float
    delta: float = 1.0
    m_samples: int = 5000
    n_resamples: int = 200
    seed: int = 0
    include_noise: bool = True

    def __post_init__(self):
        for name in ("a", "s", "t", "delta"):
            if not math.isfinite(float(getattr(self, name))):
                raise ConfigError(f"association query field {name} must be finite")
        if not self.delta > 0.0:
            raise ConfigError("delta must be a positive increment")
        if self.m_samples < 2:
            raise ConfigError("m_samples must be at least 2")
        if self.n_resamples < 0:
            raise ConfigError("n_resamples must be nonnegative")


@dataclass(frozen=True)
class AssocResult:
    """Point estimate and uncertainty for one (s, t, a) cell."""

    beta_joint: float
    e_y_at_a: float
    e_y_at_a_plus_delta: float
    mc_standard_error: float
    variance: float
    ci_low: float
    ci_high: float
    n_resamples: int
    beta_joint_scaled: float | None = None
    resamples: tuple[float, ...] = ()


@dataclass(frozen=True)
class SurfaceResult:
    """Lagged association over a grid of (s, t) pairs at fixed a.

    ``time_averaged`` is the mean of the cells where the two grids
    share a value (the cross-sectional diagonal); NaN when the grids
    are disjoint.
    """

    grid_s: np.ndarray
    grid_t: np.ndarray
    a: float
    delta: float
    beta: np.ndarray
    ci_low: np.ndarray | None
    ci_high: np.ndarray | None
    time_averaged: float
    n_resamples: int


@dataclass(frozen=True)
class _Params:
    """Natural-scale parameters a generic-subject query needs."""

    beta_v: np.ndarray
    beta_y: np.ndarray
    d: np.ndarray
    sigma2: float
    gamma: float | None


_GENERIC = "a hypothetical average subject"


def _generic_subject() -> SubjectRecord:
    return SubjectRecord(
        subject_id=_GENERIC,
        cov_times=np.zeros(0), cov_values=np.zeros(0),
        out_times=np.zeros(0), out_values=np.zeros(0),
    )


def _mode_params(fit, spec: ModelSpec) -> _Params:
    hyper: HyperVector = fit.hyper_mode
    return _Params(
        beta_v=np.asarray(fit.latent_mode.beta_v, dtype=float),
        beta_y=np.asarray(fit.latent_mode.beta_y, dtype=float),
        d=hyper.d_matrix(),
        sigma2=hyper.sigma2,
        gamma=hyper.gamma,
    )


def _resampled_params(fit, spec: ModelSpec, n: int, seed: int) -> list[_Params]:
    """Hyper draws plus one warm inner re-solve each for fixed effects."""
    if n == 0:
        return []
    from .estimation import Workspace, _context, _newton

    template: HyperVector = fit.hyper_mode
    x_hat = template.to_array()
    z = derive_rng(seed, 1).standard_normal((n, x_hat.size))
    psis = x_hat + z @ psd_factor(fit.hyper_cov).T
    spec_eff = replace(spec, priors=fit.effective_priors)
    ws = Workspace(spec_eff, fit.dataset)
    warm = ws.pack(fit.latent_mode)
    out = []
    for r in range(n):
        hyper_r = template.with_array(psis[r])
        ctx = _context(spec_eff, hyper_r)
        inner = _newton(ws, ctx, fit.effective_priors, init=warm, tol=1e-6, max_iter=100)
        out.append(
            _Params(
                beta_v=inner.beta[: ws.qv].copy(),
                beta_y=inner.beta[ws.qv:].copy(),
                d=hyper_r.d_matrix(),
                sigma2=hyper_r.sigma2,
                gamma=hyper_r.gamma,
            )
        )
    return out


def _conditional_pair(
    params: _Params, spec: ModelSpec, s: float, a: float, delta: float, include_noise: bool
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Conditional means at a and a + delta plus the shared covariance."""
    generic = _generic_subject()
    x_s = design_matrix(spec.cov_fixed, generic, [s])[0]
    z_s = design_matrix(spec.cov_random, generic, [s])[0]
    p_v = spec.p_v
    p = spec.p_total
    mu_v = float(x_s @ params.beta_v)
    var_v = float(z_s @ params.d[:p_v, :p_v] @ z_s)
    if include_noise:
        var_v += params.sigma2
    cross = params.d[:, :p_v] @ z_s
    cov = np.zeros((p + 1, p + 1))
    cov[:p, :p] = params.d
    cov[:p, p] = cross
    cov[p, :p] = cross
    cov[p, p] = var_v
    mean = np.zeros(p + 1)
    mean[p] = mu_v
    joint = MvnDist(mean=mean, cov=cov)
    cond_a = condition(joint, [p], [a])
    cond_b = condition(joint, [p], [a + delta])
    return cond_a.mean, cond_b.mean, cond_a.cov


def _outcome_means(
    params: _Params, spec: ModelSpec, draws: np.ndarray, t: float
) -> np.ndarray:
    generic = _generic_subject()
    x_t = design_matrix(spec.out_fixed, generic, [t])[0]
    z_t = design_matrix(spec.out_random, generic, [t])[0]
    p_v = spec.p_v
    eta = float(x_t @ params.beta_y) + draws[:, p_v:] @ z_t
    if spec.kind is ModelKind.SCALED:
        if params.gamma is None:
            raise ConfigError("scaled kind association needs gamma")
        xv_t = design_matrix(spec.cov_fixed, generic, [t])[0]
        zv_t = design_matrix(spec.cov_random, generic, [t])[0]
        eta = eta + params.gamma * (float(xv_t @ params.beta_v) + draws[:, :p_v] @ zv_t)
    return inverse_link(spec.link, eta)


def _cell(
    params: _Params,
    spec: ModelSpec,
    s: float,
    t: float,
    a: float,
    delta: float,
    m: int,
    rng: np.random.Generator,
    include_noise: bool,
) -> tuple[float, float, float]:
    """(E[y | a], E[y | a + delta], MC standard error of the difference)."""
    mean_a, mean_b, cov = _conditional_pair(params, spec, s, a, delta, include_noise)
    factor = psd_factor(cov)
    z = rng.standard_normal((m, spec.p_total))
    base = z @ factor.T
    mu_a = _outcome_means(params, spec, mean_a + base, t)
    mu_b = _outcome_means(params, spec, mean_b + base, t)
    diff = mu_b - mu_a
    se = float(np.std(diff, ddof=1) / math.sqrt(m))
    return float(np.mean(mu_a)), float(np.mean(mu_b)), se


def _scale_factor(dataset: LongDataset | None) -> float | None:
    if dataset is None or dataset.outcome_range is None:
        return None
    lo, hi = dataset.outcome_range
    return hi - lo


def marginal_mean(fit, spec: ModelSpec, query: AssocQuery) -> float:
    """E[y(t) | v(s) = a] for a new subject, at the posterior mode.

    Uses the same draws as the corresponding :func:`beta_joint` call,
    so the two agree exactly under one seed.
    """
    params = _mode_params(fit, spec)
    rng = derive_rng(query.seed, 2, 0, 0, 0)
    ey_a, _, _ = _cell(
        params, spec, query.s, query.t, query.a, query.delta,
        query.m_samples, rng, query.include_noise,
    )
    return ey_a


def beta_joint(fit, spec: ModelSpec, query: AssocQuery) -> AssocResult:
    """Association coefficient at one (s, t, a) cell.

    Point estimate at the posterior mode with common random numbers
    across the two conditioning values; percentile intervals and
    variance over ``n_resamples`` hyperparameter draws, each with its
    own derived stream and re-derived fixed effects. With zero
    resamples the uncertainty fields are NaN.
    """
    params = _mode_params(fit, spec)
    rng = derive_rng(query.seed, 2, 0, 0, 0)
    ey_a, ey_b, se = _cell(
        params, spec, query.s, query.t, query.a, query.delta,
        query.m_samples, rng, query.include_noise,
    )
    point = ey_b - ey_a
    resample_vals: list[float] = []
    for r, pr in enumerate(_resampled_params(fit, spec, query.n_resamples, query.seed)):
        rng_r = derive_rng(query.seed, 2, 0, 0, r + 1)
        ra, rb, _ = _cell(
            pr, spec, query.s, query.t, query.a, query.delta,
            query.m_samples, rng_r, query.include_noise,
        )
        resample_vals.append(rb - ra)
    if resample_vals:
        arr = np.asarray(resample_vals)
        variance = float(np.var(arr, ddof=1)) if arr.size > 1 else 0.0
        ci_low, ci_high = (float(q) for q in np.percentile(arr, [2.5, 97.5]))
    else:
        variance = ci_low = ci_high = float("nan")
    scale = _scale_factor(getattr(fit, "dataset", None))
    return AssocResult(
        beta_joint=point,
        e_y_at_a=ey_a,
        e_y_at_a_plus_delta=ey_b,
        mc_standard_error=se,
        variance=variance,
        ci_low=ci_low,
        ci_high=ci_high,
        n_resamples=len(resample_vals),
        beta_joint_scaled=(point * scale if scale is not None else None),
        resamples=tuple(resample_vals),
    )


def assoc_surface(fit, spec: ModelSpec, grid_s, grid_t, query: AssocQuery) -> SurfaceResult:
    """beta_joint over a grid of biomarker and outcome times.

    Every cell and every resample has its own derived stream keyed by
    grid position, so the result is independent of evaluation order. A
    1 x 1 grid reproduces :func:`beta_joint` at that pair exactly under
    the same seed. Hyper resamples are drawn once and shared across
    cells, which keeps the per-draw fixed-effect re-solve out of the
    grid loop.
    """
    gs = np.atleast_1d(np.asarray(grid_s, dtype=float))
    gt = np.atleast_1d(np.asarray(grid_t, dtype=float))
    if gs.size == 0 or gt.size == 0:
        raise ConfigError("surface grids must be nonempty")
    params = _mode_params(fit, spec)
    draws = _resampled_params(fit, spec, query.n_resamples, query.seed)
    beta = np.zeros((gs.size, gt.size))
    res_beta = np.zeros((len(draws), gs.size, gt.size)) if draws else None
    for i, s in enumerate(gs):
        for j, t in enumerate(gt):
            rng = derive_rng(query.seed, 2, i, j, 0)
            ey_a, ey_b, _ = _cell(
                params, spec, s, t, query.a, query.delta,
                query.m_samples, rng, query.include_noise,
            )
            beta[i, j] = ey_b - ey_a
            for r, pr in enumerate(draws):
                rng_r = derive_rng(query.seed, 2, i, j, r + 1)
                ra, rb, _ = _cell(
                    pr, spec, s, t, query.a, query.delta,
                    query.m_samples, rng_r, query.include_noise,
                )
                res_beta[r, i, j] = rb - ra
    if draws:
        ci_low = np.percentile(res_beta, 2.5, axis=0)
        ci_high = np.percentile(res_beta, 97.5, axis=0)
    else:
        ci_low = ci_high = None
    shared = [(i, j) for i in range(gs.size) for j in range(gt.size) if gs[i] == gt[j]]
    if shared:
        time_avg = float(np.mean([beta[i, j] for i, j in shared]))
    else:
        time_avg = float("nan")
    return SurfaceResult(
        grid_s=gs, grid_t=gt, a=float(query.a), delta=float(query.delta),
        beta=beta, ci_low=ci_low, ci_high=ci_high,
        time_averaged=time_avg, n_resamples=len(draws),
    )
