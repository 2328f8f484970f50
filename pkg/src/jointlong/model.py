"""Model definition layer: datasets, designs, links, likelihoods.

Two related joint models share this layer. Both couple a noisy Gaussian
longitudinal biomarker v to a longitudinal outcome y through subject
random effects:

* the *correlated* kind places one full covariance matrix over the
  stacked biomarker and outcome random effects, so the association is
  carried by the off-diagonal block of that matrix;
* the *scaled* kind forces the two random-effect blocks independent and
  instead adds a copy of the biomarker's noise-free linear predictor
  m(t) to the outcome predictor, scaled by a coefficient gamma.

Outcome families are Gaussian (identity link) and Beta (logit link,
mean/precision parametrization: a = mu*phi, b = (1-mu)*phi).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import digamma, expit, gammaln, polygamma

from .errors import ConfigError, DataError, DomainError

__all__ = [
    "ModelKind",
    "Family",
    "Link",
    "Process",
    "SubjectRecord",
    "LongDataset",
    "DesignRecipe",
    "PriorConfig",
    "ModelSpec",
    "HyperVector",
    "LatentField",
    "design_matrix",
    "linear_predictor",
    "inverse_link",
    "obs_loglik",
    "gaussian_loglik",
    "beta_loglik",
    "outcome_loglik",
    "outcome_eta_derivs",
]


class ModelKind(str, enum.Enum):
    CORRELATED = "correlated"
    SCALED = "scaled"


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    BETA = "beta"


class Link(str, enum.Enum):
    IDENTITY = "identity"
    LOGIT = "logit"


class Process(str, enum.Enum):
    COV = "cov"
    OUT = "out"


def _as_times(name: str, values) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.ndim != 1:
        raise DataError(f"{name} must be one-dimensional")
    if arr.size and not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SubjectRecord:
    """Observations for one subject, one row stream per process.

    Times must be strictly increasing within each process (ties are a
    data error; ingest sorts before construction). ``covariates`` holds
    named time-fixed exogenous values referenced by design recipes.
    """

    subject_id: str
    cov_times: np.ndarray
    cov_values: np.ndarray
    out_times: np.ndarray
    out_values: np.ndarray
    covariates: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("cov_times", "cov_values", "out_times", "out_values"):
            object.__setattr__(self, name, _as_times(name, getattr(self, name)))
        if self.cov_times.size != self.cov_values.size:
            raise DataError(f"subject {self.subject_id}: biomarker times/values mismatch")
        if self.out_times.size != self.out_values.size:
            raise DataError(f"subject {self.subject_id}: outcome times/values mismatch")
        for label, times in (("biomarker", self.cov_times), ("outcome", self.out_times)):
            if times.size > 1 and np.any(np.diff(times) <= 0.0):
                raise DataError(
                    f"subject {self.subject_id}: {label} times are not strictly increasing"
                )

    @property
    def n_cov(self) -> int:
        return self.cov_times.size

    @property
    def n_out(self) -> int:
        return self.out_times.size


@dataclass(frozen=True)
class LongDataset:
    """An ordered collection of subjects plus outcome-range metadata.

    ``outcome_range`` records the (lo, hi) interval outcome values were
    rescaled from at ingest; association results use it to report the
    coefficient back on the original measurement scale.
    """

    subjects: tuple[SubjectRecord, ...]
    outcome_range: tuple[float, float] | None = None

    def __post_init__(self):
        subjects = tuple(self.subjects)
        ids = [s.subject_id for s in subjects]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate subject ids in dataset")
        for s in subjects:
            if s.n_cov + s.n_out == 0:
                raise DataError(f"subject {s.subject_id} has no observations at all")
        if self.outcome_range is not None:
            lo, hi = map(float, self.outcome_range)
            if not hi > lo:
                raise DataError(f"outcome range ({lo}, {hi}) is empty")
            object.__setattr__(self, "outcome_range", (lo, hi))
        object.__setattr__(self, "subjects", subjects)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def subject_ids(self) -> tuple[str, ...]:
        return tuple(s.subject_id for s in self.subjects)


@dataclass(frozen=True)
class DesignRecipe:
    """Declarative design columns: ``const``, ``time``, or a covariate name.

    No data-dependent basis functions; a named column pulls the
    subject's time-fixed exogenous value. Unknown names fail at build
    time with a ConfigError naming the column.
    """

    columns: tuple[str, ...]

    def __post_init__(self):
        cols = tuple(str(c) for c in self.columns)
        if not cols:
            raise ConfigError("a design recipe needs at least one column")
        if len(set(cols)) != len(cols):
            raise ConfigError(f"duplicate design columns in {cols}")
        object.__setattr__(self, "columns", cols)

    @property
    def width(self) -> int:
        return len(self.columns)


def design_matrix(recipe: DesignRecipe, subject: SubjectRecord, times) -> np.ndarray:
    """Evaluate a recipe at arbitrary times for one subject."""
    t = np.atleast_1d(np.asarray(times, dtype=float))
    cols = []
    for name in recipe.columns:
        if name == "const":
            cols.append(np.ones_like(t))
        elif name == "time":
            cols.append(t)
        elif name in subject.covariates:
            cols.append(np.full_like(t, float(subject.covariates[name])))
        else:
            raise ConfigError(
                f"design column {name!r} is not a builtin and subject "
                f"{subject.subject_id} carries no covariate of that name"
            )
    return np.column_stack(cols) if cols else np.empty((t.size, 0))


_DEFAULT_RECIPE = DesignRecipe(("const", "time"))


@dataclass(frozen=True)
class PriorConfig:
    """Prior settings for estimation.

    Defaults: vague mean-zero normals on fixed effects (precision 1e-3)
    and on the scaling coefficient (precision 1e-4), Gamma(1, 5e-5) on
    the biomarker error precision, Gamma(1, 0.01) on the outcome
    dispersion, and a Wishart on each random-effect precision block
    with ``df = p (p + 1) / 2 + 1`` unless overridden.

    ``wishart_scale_diag`` is the diagonal of the matrix R in
    D^{-1} ~ Wishart(df, R^{-1}); entries are standard-deviation scale
    values, all ones by default. Length must equal the total number of
    random effects when given.
    """

    beta_precision: float = 1e-3
    gamma_mean: float = 0.0
    gamma_precision: float = 1e-4
    eps_shape: float = 1.0
    eps_rate: float = 5e-5
    phi_shape: float = 1.0
    phi_rate: float = 0.01
    wishart_df: float | None = None
    wishart_scale_diag: tuple[float, ...] | None = None

    def __post_init__(self):
        for name in ("beta_precision", "gamma_precision", "eps_shape", "eps_rate",
                     "phi_shape", "phi_rate"):
            if not getattr(self, name) > 0.0:
                raise ConfigError(f"prior setting {name} must be positive")
        if self.wishart_scale_diag is not None:
            diag = tuple(float(v) for v in self.wishart_scale_diag)
            if any(v <= 0.0 for v in diag):
                raise ConfigError("wishart_scale_diag entries must be positive")
            object.__setattr__(self, "wishart_scale_diag", diag)

    def df_for_block(self, p: int) -> float:
        if self.wishart_df is not None:
            if self.wishart_df <= p - 1:
                raise ConfigError(
                    f"wishart_df {self.wishart_df} too small for a block of size {p}"
                )
            return float(self.wishart_df)
        return p * (p + 1) / 2.0 + 1.0


@dataclass(frozen=True)
class ModelSpec:
    """Everything that defines one model apart from the data.

    The family/link pairing is fixed: Gaussian outcomes use the
    identity link and Beta outcomes the logit link. The scaled kind
    additionally requires the biomarker recipes to be evaluable at any
    outcome time, which holds for all recipes expressible here.
    """

    kind: ModelKind = ModelKind.CORRELATED
    family: Family = Family.BETA
    link: Link = Link.LOGIT
    cov_fixed: DesignRecipe = _DEFAULT_RECIPE
    cov_random: DesignRecipe = _DEFAULT_RECIPE
    out_fixed: DesignRecipe = _DEFAULT_RECIPE
    out_random: DesignRecipe = _DEFAULT_RECIPE
    priors: PriorConfig = PriorConfig()

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "link", Link(self.link))
        valid = {Family.GAUSSIAN: Link.IDENTITY, Family.BETA: Link.LOGIT}
        if self.link is not valid[self.family]:
            raise ConfigError(
                f"family {self.family.value} requires the {valid[self.family].value} link"
            )
        if self.priors.wishart_scale_diag is not None:
            if len(self.priors.wishart_scale_diag) != self.p_total:
                raise ConfigError(
                    f"wishart_scale_diag has {len(self.priors.wishart_scale_diag)} entries "
                    f"but the model carries {self.p_total} random effects"
                )

    @property
    def p_v(self) -> int:
        return self.cov_random.width

    @property
    def p_y(self) -> int:
        return self.out_random.width

    @property
    def p_total(self) -> int:
        return self.p_v + self.p_y

    @property
    def q_v(self) -> int:
        return self.cov_fixed.width

    @property
    def q_y(self) -> int:
        return self.out_fixed.width

    def hyper_blocks(self) -> tuple[int, ...]:
        """Cholesky blocks of the random-effects covariance.

        One full block for the correlated kind; independent biomarker
        and outcome blocks for the scaled kind (the cross block is
        structurally zero there, not merely shrunk).
        """
        if self.kind is ModelKind.CORRELATED:
            return (self.p_total,)
        return (self.p_v, self.p_y)


def _block_tril_indices(blocks: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of free strict lower-triangle entries."""
    rows, cols = [], []
    offset = 0
    for p in blocks:
        r, c = np.tril_indices(p, k=-1)
        rows.append(r + offset)
        cols.append(c + offset)
        offset += p
    return np.concatenate(rows).astype(int), np.concatenate(cols).astype(int)


@dataclass(frozen=True)
class HyperVector:
    """Unconstrained hyperparameters of one model.

    The random-effects covariance D is parametrized through a lower
    Cholesky factor with log diagonal; the scaled kind stores only the
    within-block strict lower triangle, so its cross block is exactly
    zero by construction. ``log_eps_precision`` is log(1/sigma^2) for
    the biomarker error, ``log_phi`` the log outcome dispersion (Beta
    precision, or the Gaussian outcome's error precision), and
    ``gamma`` the scaling coefficient (scaled kind only, None
    otherwise).
    """

    blocks: tuple[int, ...]
    log_chol_diag: np.ndarray
    chol_offdiag: np.ndarray
    log_eps_precision: float
    log_phi: float
    gamma: float | None = None

    def __post_init__(self):
        blocks = tuple(int(p) for p in self.blocks)
        if not blocks or any(p < 1 for p in blocks):
            raise ConfigError(f"invalid cholesky block sizes {blocks}")
        p = sum(blocks)
        diag = np.atleast_1d(np.asarray(self.log_chol_diag, dtype=float))
        off = np.asarray(self.chol_offdiag, dtype=float).reshape(-1)
        n_off = sum(b * (b - 1) // 2 for b in blocks)
        if diag.size != p:
            raise ConfigError(f"expected {p} log-diagonal entries, got {diag.size}")
        if off.size != n_off:
            raise ConfigError(f"expected {n_off} off-diagonal entries, got {off.size}")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "log_chol_diag", diag)
        object.__setattr__(self, "chol_offdiag", off)
        object.__setattr__(self, "log_eps_precision", float(self.log_eps_precision))
        object.__setattr__(self, "log_phi", float(self.log_phi))
        if self.gamma is not None:
            object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def p_total(self) -> int:
        return sum(self.blocks)

    @property
    def sigma2(self) -> float:
        """Biomarker measurement error variance."""
        return float(np.exp(-self.log_eps_precision))

    @property
    def phi(self) -> float:
        """Outcome dispersion on its natural scale."""
        return float(np.exp(self.log_phi))

    def d_chol(self) -> np.ndarray:
        """Lower Cholesky factor of D (block structure included)."""
        p = self.p_total
        low = np.zeros((p, p))
        low[np.diag_indices(p)] = np.exp(self.log_chol_diag)
        rows, cols = _block_tril_indices(self.blocks)
        low[rows, cols] = self.chol_offdiag
        return low

    def d_matrix(self) -> np.ndarray:
        """The random-effects covariance D."""
        low = self.d_chol()
        return low @ low.T

    # ---- flat packing for the outer optimizer ------------------------------

    def to_array(self) -> np.ndarray:
        parts = [self.log_chol_diag, self.chol_offdiag,
                 [self.log_eps_precision, self.log_phi]]
        if self.gamma is not None:
            parts.append([self.gamma])
        return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])

    def with_array(self, x: np.ndarray) -> "HyperVector":
        """A copy of this vector with values replaced from a flat array."""
        x = np.asarray(x, dtype=float).reshape(-1)
        p = self.p_total
        n_off = self.chol_offdiag.size
        expected = p + n_off + 2 + (1 if self.gamma is not None else 0)
        if x.size != expected:
            raise ConfigError(f"expected a flat vector of length {expected}, got {x.size}")
        return HyperVector(
            blocks=self.blocks,
            log_chol_diag=x[:p],
            chol_offdiag=x[p:p + n_off],
            log_eps_precision=float(x[p + n_off]),
            log_phi=float(x[p + n_off + 1]),
            gamma=float(x[-1]) if self.gamma is not None else None,
        )

    @classmethod
    def from_natural(
        cls,
        spec: ModelSpec,
        d: np.ndarray,
        sigma2: float,
        phi: float,
        gamma: float | None = None,
    ) -> "HyperVector":
        """Build from natural-scale values, enforcing block structure.

        For the scaled kind the cross block of ``d`` must already be
        zero (relative to the scale of the diagonal); anything else is
        a configuration error rather than a silent projection.
        """
        d = np.atleast_2d(np.asarray(d, dtype=float))
        blocks = spec.hyper_blocks()
        p = sum(blocks)
        if d.shape != (p, p):
            raise ConfigError(f"expected a {p}x{p} covariance, got {d.shape}")
        if not sigma2 > 0.0:
            raise ConfigError("sigma2 must be positive")
        if not phi > 0.0:
            raise ConfigError("phi must be positive")
        if spec.kind is ModelKind.SCALED:
            if gamma is None:
                raise ConfigError("the scaled kind requires a gamma value")
            p_v = spec.p_v
            cross = d[:p_v, p_v:]
            if np.max(np.abs(cross)) > 1e-10 * (1.0 + np.max(np.abs(np.diag(d)))):
                raise ConfigError(
                    "the scaled kind requires a block-diagonal covariance; "
                    "found nonzero biomarker/outcome cross terms"
                )
        elif gamma is not None:
            raise ConfigError("gamma is only defined for the scaled kind")
        diag_parts, off_parts = [], []
        offset = 0
        for size in blocks:
            block = d[offset:offset + size, offset:offset + size]
            low = np.linalg.cholesky(block)
            diag_parts.append(np.log(np.diag(low)))
            r, c = np.tril_indices(size, k=-1)
            off_parts.append(low[r, c])
            offset += size
        return cls(
            blocks=blocks,
            log_chol_diag=np.concatenate(diag_parts),
            chol_offdiag=(np.concatenate(off_parts) if off_parts else np.empty(0)),
            log_eps_precision=float(-np.log(sigma2)),
            log_phi=float(np.log(phi)),
            gamma=gamma,
        )


@dataclass(frozen=True)
class LatentField:
    """Fixed effects plus per-subject random-effect blocks.

    ``b`` maps subject id to the stacked (biomarker, outcome) block of
    length p_v + p_y. Lookups of unknown ids fail loudly.
    """

    beta_v: np.ndarray
    beta_y: np.ndarray
    b: Mapping[str, np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "beta_v", np.atleast_1d(np.asarray(self.beta_v, float)))
        object.__setattr__(self, "beta_y", np.atleast_1d(np.asarray(self.beta_y, float)))
        object.__setattr__(
            self, "b",
            {str(k): np.atleast_1d(np.asarray(v, float)) for k, v in dict(self.b).items()},
        )

    def block_for(self, subject_id: str) -> np.ndarray:
        try:
            return self.b[subject_id]
        except KeyError:
            raise DataError(f"latent field holds no block for subject {subject_id!r}") from None


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def linear_predictor(
    spec: ModelSpec,
    field: LatentField,
    subject: SubjectRecord,
    process: Process,
    times,
    gamma: float | None = None,
) -> np.ndarray:
    """Link-scale predictor for one subject at arbitrary times.

    For the biomarker process this is X^v beta_v + Z^v b_v. For the
    outcome it is X^y beta_y + Z^y b_y, plus gamma * m(t) under the
    scaled kind, where m(t) is the biomarker predictor evaluated at the
    outcome times. The predictor is linear in the latent field for any
    fixed gamma.
    """
    process = Process(process)
    t = np.atleast_1d(np.asarray(times, dtype=float))
    block = field.block_for(subject.subject_id)
    p_v = spec.p_v
    if block.size != spec.p_total:
        raise DataError(
            f"subject {subject.subject_id} block has size {block.size}, "
            f"expected {spec.p_total}"
        )

    def biomarker_part() -> np.ndarray:
        x = design_matrix(spec.cov_fixed, subject, t)
        z = design_matrix(spec.cov_random, subject, t)
        return x @ field.beta_v + z @ block[:p_v]

    if process is Process.COV:
        return biomarker_part()
    x = design_matrix(spec.out_fixed, subject, t)
    z = design_matrix(spec.out_random, subject, t)
    eta = x @ field.beta_y + z @ block[p_v:]
    if spec.kind is ModelKind.SCALED:
        if gamma is None:
            raise ConfigError("the scaled kind needs gamma to form the outcome predictor")
        eta = eta + float(gamma) * biomarker_part()
    return eta


def inverse_link(link: Link, eta) -> np.ndarray:
    """Map link-scale values to the mean scale.

    The logit branch uses the numerically stable expit, so the result
    is always inside (0, 1) up to floating point saturation at extreme
    arguments.
    """
    link = Link(link)
    eta = np.asarray(eta, dtype=float)
    if link is Link.IDENTITY:
        return eta.copy()
    return expit(eta)


def gaussian_loglik(y, eta, precision: float) -> np.ndarray:
    """Elementwise Gaussian log density with the given precision."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if not precision > 0.0:
        raise DomainError(f"gaussian precision {precision} must be positive")
    return -0.5 * precision * (y - eta) ** 2 + 0.5 * (np.log(precision) - np.log(2.0 * np.pi))


def beta_loglik(y, eta, phi: float) -> np.ndarray:
    """Elementwise Beta log density, mean/precision form on the logit scale.

    Shapes are a = expit(eta) * phi and b = expit(-eta) * phi; the
    second expit keeps 1 - mu accurate for large eta. Underflow of
    either shape to zero, or data outside the open unit interval, is a
    DomainError: the former marks a diverged optimization step, the
    latter data that skipped ingest clamping.
    """
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if not phi > 0.0:
        raise DomainError(f"beta dispersion {phi} must be positive")
    if y.size and (np.min(y) <= 0.0 or np.max(y) >= 1.0):
        raise DomainError("beta outcomes must lie strictly inside (0, 1)")
    a = expit(eta) * phi
    b = expit(-eta) * phi
    if y.size and (np.min(a) <= 0.0 or np.min(b) <= 0.0):
        raise DomainError("beta mean collapsed to the boundary (diverged predictor)")
    return (
        gammaln(phi) - gammaln(a) - gammaln(b)
        + (a - 1.0) * np.log(y) + (b - 1.0) * np.log1p(-y)
    )


def outcome_loglik(spec: ModelSpec, y, eta, phi: float) -> np.ndarray:
    """Family dispatch for the outcome process."""
    if spec.family is Family.GAUSSIAN:
        return gaussian_loglik(y, eta, phi)
    return beta_loglik(y, eta, phi)


def outcome_eta_derivs(spec: ModelSpec, y, eta, phi: float):
    """Value and first two derivatives of the outcome log density in eta.

    Used by the inner Newton solver. Gaussian: l1 = phi (y - eta),
    l2 = -phi. Beta: chain rule through mu = expit(eta) with
    dmu/deta = mu (1 - mu), all in the mean/precision parametrization.
    The Beta l2 is the observed curvature and can turn positive for
    near-boundary outcomes; the solver clips those rows, the density
    layer reports them as they are. Returns arrays shaped like ``eta``.
    """
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if spec.family is Family.GAUSSIAN:
        val = gaussian_loglik(y, eta, phi)
        l1 = phi * (y - eta)
        l2 = np.full_like(eta, -phi)
        return val, l1, l2
    mu = expit(eta)
    onem = expit(-eta)
    a = mu * phi
    b = onem * phi
    if y.size and (np.min(a) <= 0.0 or np.min(b) <= 0.0):
        raise DomainError("beta mean collapsed to the boundary (diverged predictor)")
    val = beta_loglik(y, eta, phi)
    dldmu = phi * (np.log(y) - np.log1p(-y) - digamma(a) + digamma(b))
    d2ldmu2 = -phi * phi * (polygamma(1, a) + polygamma(1, b))
    w = mu * onem
    l1 = dldmu * w
    l2 = d2ldmu2 * w * w + dldmu * w * (onem - mu)
    return val, l1, l2


def obs_loglik(
    spec: ModelSpec,
    field: LatentField,
    hyper: HyperVector,
    subject: SubjectRecord,
) -> float:
    """Total observation log likelihood of one subject.

    Biomarker rows are Gaussian around their predictor with variance
    sigma^2 from ``hyper``; outcome rows use the family density at the
    inverse-linked predictor with dispersion phi. The random-effects
    prior is *not* included here; it belongs to the joint posterior.
    """
    total = 0.0
    if subject.n_cov:
        eta_v = linear_predictor(spec, field, subject, Process.COV, subject.cov_times)
        precision = 1.0 / hyper.sigma2
        total += float(np.sum(gaussian_loglik(subject.cov_values, eta_v, precision)))
    if subject.n_out:
        eta_y = linear_predictor(
            spec, field, subject, Process.OUT, subject.out_times, gamma=hyper.gamma
        )
        total += float(np.sum(outcome_loglik(spec, subject.out_values, eta_y, hyper.phi)))
    return total
