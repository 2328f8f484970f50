"""Multivariate normal building blocks.

Everything in this module works on plain numpy arrays: Gaussian
conditioning, covariance assembly for the observed biomarker process,
seeded sampling, and a Wishart log density. Model-aware callers live
one layer up (see :mod:`jointlong.estimation` and
:mod:`jointlong.association`).

Stream discipline
-----------------
All randomness flows through :func:`derive_rng`. A root seed plus an
integer key tuple is fed to ``numpy.random.SeedSequence`` and keys a
Philox counter-based generator, so any worker, grid cell, or resample
index can rebuild its own stream independently of scheduling order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import multigammaln

from .errors import ConfigError, DegenerateCovarianceError

__all__ = [
    "MvnDist",
    "robust_cholesky",
    "psd_factor",
    "condition",
    "build_cov_v",
    "sample_mvn",
    "derive_rng",
    "wishart_logpdf",
]

#: base diagonal jitter, expressed as a fraction of mean(diag)
_JITTER_BASE = 1e-10
#: retries with 10x escalation before giving up
_JITTER_TRIES = 3


@dataclass(frozen=True)
class MvnDist:
    """A multivariate normal distribution, mean vector plus covariance.

    The covariance must be symmetric; positive definiteness is only
    checked where a factorization is actually needed, because several
    legitimate intermediate objects (conditional covariances near a
    deterministic limit, zeroed test configurations) are merely PSD.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ConfigError(
                f"covariance shape {cov.shape} does not match mean of size {mean.size}"
            )
        scale = 1.0 + float(np.max(np.abs(cov))) if cov.size else 1.0
        if cov.size and float(np.max(np.abs(cov - cov.T))) > 1e-8 * scale:
            raise ConfigError("covariance matrix is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size


def robust_cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with escalating diagonal jitter.

    On failure adds ``1e-10 * trace(a)/p`` to the diagonal and retries,
    scaling the jitter by 10 on each of up to three attempts. Raises
    :class:`DegenerateCovarianceError` if the matrix never factors
    (including the trace <= 0 case, where the jitter rule degenerates).
    """
    a = np.asarray(a, dtype=float)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    p = a.shape[0]
    base = _JITTER_BASE * float(np.trace(a)) / p
    if base > 0.0:
        eye = np.eye(p)
        for attempt in range(_JITTER_TRIES):
            try:
                return np.linalg.cholesky(a + (base * 10.0**attempt) * eye)
            except np.linalg.LinAlgError:
                continue
    raise DegenerateCovarianceError(
        f"matrix of order {p} is not positive definite after jitter retries"
    )


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """A factor F with F @ F.T == cov, tolerating semidefinite input.

    Tries the jittered Cholesky first; on degeneracy falls back to an
    eigendecomposition with negative eigenvalues clipped to zero. The
    zero matrix therefore yields a zero factor, which is what lets
    :func:`sample_mvn` return the mean replicated for a deterministic
    distribution.
    """
    try:
        return robust_cholesky(cov)
    except DegenerateCovarianceError:
        w, v = np.linalg.eigh(np.asarray(cov, dtype=float))
        return v * np.sqrt(np.clip(w, 0.0, None))


def condition(
    joint: MvnDist,
    observed_idx: np.ndarray,
    observed_values: np.ndarray,
) -> MvnDist:
    """Condition a joint Gaussian on exact values of some coordinates.

    With the usual partition (f = free, o = observed)

    .. math::

        \\mu_{f|o} = \\mu_f + \\Sigma_{fo} \\Sigma_{oo}^{-1} (a - \\mu_o),
        \\qquad
        \\Sigma_{f|o} = \\Sigma_{ff} - \\Sigma_{fo} \\Sigma_{oo}^{-1} \\Sigma_{of},

    computed through a Cholesky factor of the observed block, never a
    generic inverse. The returned distribution keeps the free
    coordinates in their original relative order.

    Raises
    ------
    ConfigError
        Empty, duplicate, or out-of-range indices, or nothing left free.
    DegenerateCovarianceError
        Observed block not positive definite after jitter.
    """
    idx = np.atleast_1d(np.asarray(observed_idx, dtype=int))
    vals = np.atleast_1d(np.asarray(observed_values, dtype=float))
    d = joint.dim
    if idx.size == 0:
        raise ConfigError("conditioning requires at least one observed coordinate")
    if idx.size != np.unique(idx).size:
        raise ConfigError("duplicate conditioning indices")
    if idx.min() < 0 or idx.max() >= d:
        raise ConfigError(f"conditioning index out of range for dimension {d}")
    if vals.size != idx.size:
        raise ConfigError("observed values do not match number of indices")
    free = np.setdiff1d(np.arange(d), idx)
    if free.size == 0:
        raise ConfigError("all coordinates observed, nothing left to condition")

    cov = joint.cov
    low = robust_cholesky(cov[np.ix_(idx, idx)])
    cross = cov[np.ix_(free, idx)]
    resid = vals - joint.mean[idx]
    # solve Sigma_oo x = resid and Sigma_oo X = cross.T via two triangular sweeps
    half_resid = solve_triangular(low, resid, lower=True)
    half_cross = solve_triangular(low, cross.T, lower=True)
    mean_c = joint.mean[free] + half_cross.T @ half_resid
    cov_c = cov[np.ix_(free, free)] - half_cross.T @ half_cross
    return MvnDist(mean=mean_c, cov=0.5 * (cov_c + cov_c.T))


def build_cov_v(spec, hyper, subject_design: np.ndarray, include_noise) -> np.ndarray:
    """Marginal covariance of biomarker values at a set of times.

    ``subject_design`` holds the biomarker random-effect design rows
    (one row per requested time), and the result is

    .. math:: Z D_v Z^T + \\sigma^2 \\operatorname{diag}(flags),

    where ``D_v`` is the biomarker block of the random-effects
    covariance held by ``hyper``. Rows with a False flag describe the
    noise-free level m(t) rather than a noisy measurement v(t); mixing
    the two supports covariances like cov(m(t), v(s)).
    """
    z = np.atleast_2d(np.asarray(subject_design, dtype=float))
    p_v = len(spec.cov_random.columns)
    if z.shape[1] != p_v:
        raise ConfigError(
            f"design has {z.shape[1]} columns but the biomarker process has {p_v} random effects"
        )
    flags = np.broadcast_to(np.asarray(include_noise, dtype=bool), (z.shape[0],))
    d_v = hyper.d_matrix()[:p_v, :p_v]
    out = z @ d_v @ z.T
    out[np.diag_indices_from(out)] += hyper.sigma2 * flags
    return 0.5 * (out + out.T)


def sample_mvn(dist: MvnDist, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` rows from ``dist`` using the supplied generator.

    Semidefinite covariances are handled by :func:`psd_factor`; in the
    fully degenerate case every row equals the mean. Identical
    (distribution, n, generator state) triples reproduce bit-identical
    output.
    """
    if n < 0:
        raise ConfigError("sample count must be nonnegative")
    z = rng.standard_normal((n, dist.dim))
    return dist.mean + z @ psd_factor(dist.cov).T


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by ``(seed, key)``.

    The split rule: the root seed is the entropy of a
    ``numpy.random.SeedSequence`` and the key tuple is its spawn key,
    which then keys a Philox counter-based bit generator. Equal
    arguments reproduce the stream exactly; any change to the seed or
    to one key component yields an independent stream. Worker
    processes, surface cells, and resample indices all derive their
    streams this way, so results never depend on scheduling order.
    """
    ss = np.random.SeedSequence(
        entropy=int(seed), spawn_key=tuple(int(k) for k in key)
    )
    return np.random.Generator(np.random.Philox(ss))


def wishart_logpdf(w: np.ndarray, df: float, scale: np.ndarray) -> float:
    """Log density of a Wishart distribution at matrix ``w``.

    Parametrized so that a draw W ~ Wishart_p(df, scale) has mean
    ``df * scale``. The log density is

    .. math::

        \\tfrac{df-p-1}{2}\\log|W| - \\tfrac12 \\mathrm{tr}(S^{-1}W)
        - \\tfrac{df\\,p}{2}\\log 2 - \\tfrac{df}{2}\\log|S|
        - \\log\\Gamma_p(df/2),

    evaluated through Cholesky factors of both matrices.

    Raises
    ------
    ConfigError
        If ``df <= p - 1`` (density not integrable) or shapes mismatch.
    DegenerateCovarianceError
        If either matrix fails to factor.
    """
    w = np.atleast_2d(np.asarray(w, dtype=float))
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    p = w.shape[0]
    if w.shape != (p, p) or scale.shape != (p, p):
        raise ConfigError("wishart_logpdf needs square matrices of equal order")
    if df <= p - 1:
        raise ConfigError(f"wishart degrees of freedom {df} must exceed {p - 1}")
    low_w = robust_cholesky(w)
    low_s = robust_cholesky(scale)
    logdet_w = 2.0 * float(np.sum(np.log(np.diag(low_w))))
    logdet_s = 2.0 * float(np.sum(np.log(np.diag(low_s))))
    # tr(S^{-1} W) = || L_s^{-1} L_w ||_F^2
    half = solve_triangular(low_s, low_w, lower=True)
    trace_term = float(np.sum(half * half))
    return (
        0.5 * (df - p - 1.0) * logdet_w
        - 0.5 * trace_term
        - 0.5 * df * p * np.log(2.0)
        - 0.5 * df * logdet_s
        - multigammaln(0.5 * df, p)
    )
