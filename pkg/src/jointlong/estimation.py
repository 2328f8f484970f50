"""Nested Laplace estimation engine.

The latent field (all fixed effects plus every subject's random-effect
block) is integrated out by a Laplace approximation at its conditional
mode, found by Newton iteration with analytic gradient and Hessian. The
negative Hessian has an arrowhead structure: a dense block for the
fixed effects, one small diagonal block per subject, and thin coupling
blocks. Newton steps and log determinants go through block elimination
on that structure, so the cost per step is O(N p^3 + q^3) instead of a
dense factorization of the whole field.

The resulting log marginal posterior of the unconstrained
hyperparameters is maximized by BFGS with central finite-difference
gradients (no analytic outer derivatives). Hyperparameter uncertainty
comes from a finite-difference Hessian at the mode, mapped to the
natural scale through deterministic low-discrepancy draws.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field, replace
from typing import Mapping

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.special import expit, gammaln
from scipy.stats import norm, qmc

from .errors import ConfigError, DataError, NumericError
from .gaussian import derive_rng, psd_factor, robust_cholesky, wishart_logpdf
from .model import (
    DesignRecipe,
    Family,
    HyperVector,
    LatentField,
    LongDataset,
    ModelKind,
    ModelSpec,
    PriorConfig,
    SubjectRecord,
    design_matrix,
    outcome_eta_derivs,
    outcome_loglik,
)

__all__ = [
    "FitControl",
    "FitResult",
    "Summary",
    "InnerResult",
    "Workspace",
    "joint_log_posterior",
    "latent_gradient",
    "inner_mode",
    "log_marginal_hyper",
    "hyper_log_prior",
    "stage_one_sd_estimates",
    "fit",
]

log = logging.getLogger("jointlong")

_LOG_2PI = math.log(2.0 * math.pi)
_NEG_LARGE = -1.0e12


@dataclass(frozen=True)
class FitControl:
    """Optimizer and summary settings.

    The inner Newton solve stops at a gradient max-norm below
    ``inner_tol`` or ``inner_max_iter`` iterations; the outer BFGS uses
    central differences with step ``fd_step`` and stops at gradient
    max-norm ``outer_gtol`` or ``max_outer_iter`` iterations.
    ``diagnostics_draws`` posterior draws feed the information criteria
    when ``diagnostics`` is on; studies that only need modes switch it
    off to save a posterior pass per replication.
    """

    seed: int = 0
    inner_tol: float = 1e-6
    inner_max_iter: int = 100
    outer_gtol: float = 1e-4
    fd_step: float = 1e-4
    max_outer_iter: int = 200
    hessian_step: float = 5e-3
    hyper_draws: int = 4096
    diagnostics: bool = True
    diagnostics_draws: int = 2000
    init_hyper: HyperVector | None = None
    informative_priors: bool = False


@dataclass(frozen=True)
class Summary:
    """Location and spread of one scalar posterior marginal."""

    mode: float
    sd: float
    q025: float
    q500: float
    q975: float


class Workspace:
    """Padded design tensors and masks for one (spec, dataset) pair.

    Subjects are padded to the longest observation count per process;
    padded design rows are zero, padded outcome values sit at 0.5 so
    Beta densities stay finite there, and boolean masks remove padding
    from every reduction. Built once per fit and shared by all
    objective evaluations.
    """

    def __init__(self, spec: ModelSpec, dataset: LongDataset):
        self.spec = spec
        self.dataset = dataset
        self.ids = dataset.subject_ids
        subjects = dataset.subjects
        n = len(subjects)
        if n == 0:
            raise DataError("cannot build a workspace from an empty dataset")
        qv, qy, pv, py = spec.q_v, spec.q_y, spec.p_v, spec.p_y
        self.n = n
        self.qv, self.qy, self.pv, self.py = qv, qy, pv, py
        self.q = qv + qy
        self.p = pv + py
        nv = max(1, max(s.n_cov for s in subjects))
        ny = max(1, max(s.n_out for s in subjects))
        self.v_val = np.zeros((n, nv))
        self.v_mask = np.zeros((n, nv))
        self.xv = np.zeros((n, nv, qv))
        self.zv = np.zeros((n, nv, pv))
        pad_y = 0.5 if spec.family is Family.BETA else 0.0
        self.y_val = np.full((n, ny), pad_y)
        self.y_mask = np.zeros((n, ny))
        self.xy = np.zeros((n, ny, qy))
        self.zy = np.zeros((n, ny, py))
        self.scaled = spec.kind is ModelKind.SCALED
        self.xvt = np.zeros((n, ny, qv)) if self.scaled else None
        self.zvt = np.zeros((n, ny, pv)) if self.scaled else None
        for i, s in enumerate(subjects):
            if s.n_cov:
                k = s.n_cov
                self.v_val[i, :k] = s.cov_values
                self.v_mask[i, :k] = 1.0
                self.xv[i, :k] = design_matrix(spec.cov_fixed, s, s.cov_times)
                self.zv[i, :k] = design_matrix(spec.cov_random, s, s.cov_times)
            if s.n_out:
                k = s.n_out
                self.y_val[i, :k] = s.out_values
                self.y_mask[i, :k] = 1.0
                self.xy[i, :k] = design_matrix(spec.out_fixed, s, s.out_times)
                self.zy[i, :k] = design_matrix(spec.out_random, s, s.out_times)
                if self.scaled:
                    self.xvt[i, :k] = design_matrix(spec.cov_fixed, s, s.out_times)
                    self.zvt[i, :k] = design_matrix(spec.cov_random, s, s.out_times)
        self.n_v_obs = float(self.v_mask.sum())
        self.n_y_obs = float(self.y_mask.sum())
        self.latent_dim = self.q + n * self.p

    # ---- packing ----------------------------------------------------------

    def pack(self, field: LatentField) -> tuple[np.ndarray, np.ndarray]:
        if field.beta_v.size != self.qv or field.beta_y.size != self.qy:
            raise ConfigError("fixed-effect sizes do not match the model recipes")
        beta = np.concatenate([field.beta_v, field.beta_y])
        b = np.zeros((self.n, self.p))
        for i, sid in enumerate(self.ids):
            blk = field.block_for(sid)
            if blk.size != self.p:
                raise DataError(f"subject {sid} block has size {blk.size}, expected {self.p}")
            b[i] = blk
        return beta, b

    def unpack(self, beta: np.ndarray, b: np.ndarray) -> LatentField:
        return LatentField(
            beta_v=beta[: self.qv].copy(),
            beta_y=beta[self.qv:].copy(),
            b={sid: b[i].copy() for i, sid in enumerate(self.ids)},
        )


@dataclass
class _HyperCtx:
    """Natural-scale quantities cached for one hyper vector."""

    hyper: HyperVector
    d: np.ndarray
    d_inv: np.ndarray
    logdet_d: float
    tau_eps: float
    phi: float
    gamma: float


def _context(spec: ModelSpec, hyper: HyperVector) -> _HyperCtx:
    low = hyper.d_chol()
    d = low @ low.T
    eye = np.eye(low.shape[0])
    half = solve_triangular(low, eye, lower=True)
    d_inv = half.T @ half
    logdet_d = 2.0 * float(np.sum(np.log(np.diag(low))))
    gamma = float(hyper.gamma) if hyper.gamma is not None else 0.0
    if spec.kind is ModelKind.SCALED and hyper.gamma is None:
        raise ConfigError("the scaled kind requires a hyper vector carrying gamma")
    return _HyperCtx(
        hyper=hyper,
        d=d,
        d_inv=0.5 * (d_inv + d_inv.T),
        logdet_d=logdet_d,
        tau_eps=1.0 / hyper.sigma2,
        phi=hyper.phi,
        gamma=gamma,
    )


def _etas(ws: Workspace, ctx: _HyperCtx, beta: np.ndarray, b: np.ndarray):
    beta_v = beta[: ws.qv]
    beta_y = beta[ws.qv:]
    b_v = b[:, : ws.pv]
    b_y = b[:, ws.pv:]
    eta_v = ws.xv @ beta_v + np.einsum("nij,nj->ni", ws.zv, b_v)
    eta_y = ws.xy @ beta_y + np.einsum("nij,nj->ni", ws.zy, b_y)
    if ws.scaled:
        eta_y = eta_y + ctx.gamma * (ws.xvt @ beta_v + np.einsum("nij,nj->ni", ws.zvt, b_v))
    return eta_v, eta_y


def _loglik(ws: Workspace, ctx: _HyperCtx, eta_v: np.ndarray, eta_y: np.ndarray) -> float:
    """Masked observation log likelihood; -inf on domain failure."""
    r = ws.v_val - eta_v
    ll = -0.5 * ctx.tau_eps * float(np.sum(ws.v_mask * r * r))
    ll += 0.5 * (math.log(ctx.tau_eps) - _LOG_2PI) * ws.n_v_obs
    if ws.n_y_obs:
        spec = ws.spec
        if spec.family is Family.GAUSSIAN:
            ry = ws.y_val - eta_y
            ll += -0.5 * ctx.phi * float(np.sum(ws.y_mask * ry * ry))
            ll += 0.5 * (math.log(ctx.phi) - _LOG_2PI) * ws.n_y_obs
        else:
            mu = expit(eta_y)
            onem = expit(-eta_y)
            a = mu * ctx.phi
            bb = onem * ctx.phi
            masked = ws.y_mask > 0.0
            if a[masked].min() <= 0.0 or bb[masked].min() <= 0.0:
                return -np.inf
            point = (
                gammaln(ctx.phi) - gammaln(a) - gammaln(bb)
                + (a - 1.0) * np.log(ws.y_val) + (bb - 1.0) * np.log1p(-ws.y_val)
            )
            ll += float(np.sum(ws.y_mask * point))
    return ll if np.isfinite(ll) else -np.inf


def _joint_value(
    ws: Workspace, ctx: _HyperCtx, priors: PriorConfig, beta: np.ndarray, b: np.ndarray
) -> float:
    """Log p(data | field, hyper) + log p(field | hyper), no hyper prior."""
    eta_v, eta_y = _etas(ws, ctx, beta, b)
    ll = _loglik(ws, ctx, eta_v, eta_y)
    if not np.isfinite(ll):
        return -np.inf
    quad = float(np.einsum("np,pq,nq->", b, ctx.d_inv, b))
    pr_b = -0.5 * quad - 0.5 * ws.n * (ws.p * _LOG_2PI + ctx.logdet_d)
    tau_b = priors.beta_precision
    pr_beta = -0.5 * tau_b * float(beta @ beta) + 0.5 * ws.q * (math.log(tau_b) - _LOG_2PI)
    return ll + pr_b + pr_beta


def _obs_weights(ws: Workspace, ctx: _HyperCtx, eta_v: np.ndarray, eta_y: np.ndarray):
    """Per-observation first derivatives and curvature weights.

    Returns (w1_v, w2_v, w1_y, w2_y) with the masks already applied;
    w2 holds the negative second derivative, so positive values mean
    convex contributions to the precision.
    """
    w1_v = ctx.tau_eps * (ws.v_val - eta_v) * ws.v_mask
    w2_v = ctx.tau_eps * ws.v_mask
    if ws.n_y_obs:
        _, l1, l2 = outcome_eta_derivs(ws.spec, ws.y_val, eta_y, ctx.phi)
        w1_y = l1 * ws.y_mask
        w2_y = -l2 * ws.y_mask
    else:
        w1_y = np.zeros_like(eta_y)
        w2_y = np.zeros_like(eta_y)
    return w1_v, w2_v, w1_y, w2_y


def _coef_tensors(ws: Workspace, ctx: _HyperCtx):
    """Coefficient tensors mapping (beta, b_i) to each observation row.

    Biomarker rows never touch outcome coordinates and vice versa,
    except under the scaled kind where outcome rows pick up
    gamma-weighted copies of the biomarker designs.
    """
    n, nv, ny = ws.n, ws.xv.shape[1], ws.xy.shape[1]
    cb_cov = np.zeros((n, nv, ws.q))
    cb_cov[:, :, : ws.qv] = ws.xv
    cz_cov = np.zeros((n, nv, ws.p))
    cz_cov[:, :, : ws.pv] = ws.zv
    cb_out = np.zeros((n, ny, ws.q))
    cb_out[:, :, ws.qv:] = ws.xy
    cz_out = np.zeros((n, ny, ws.p))
    cz_out[:, :, ws.pv:] = ws.zy
    if ws.scaled:
        cb_out[:, :, : ws.qv] = ctx.gamma * ws.xvt
        cz_out[:, :, : ws.pv] = ctx.gamma * ws.zvt
    return cb_cov, cz_cov, cb_out, cz_out


def _grad_blocks(
    ws: Workspace,
    ctx: _HyperCtx,
    priors: PriorConfig,
    beta: np.ndarray,
    b: np.ndarray,
    want_hess: bool = True,
):
    """Gradient and (optionally) precision blocks of the joint posterior."""
    eta_v, eta_y = _etas(ws, ctx, beta, b)
    w1_v, w2_v, w1_y, w2_y = _obs_weights(ws, ctx, eta_v, eta_y)
    cb_cov, cz_cov, cb_out, cz_out = _coef_tensors(ws, ctx)

    g_beta = np.einsum("ni,nij->j", w1_v, cb_cov) + np.einsum("ni,nij->j", w1_y, cb_out)
    g_beta -= priors.beta_precision * beta
    g_b = np.einsum("ni,nij->nj", w1_v, cz_cov) + np.einsum("ni,nij->nj", w1_y, cz_out)
    g_b -= b @ ctx.d_inv
    if not want_hess:
        return g_beta, g_b, None

    p_bb = (
        np.einsum("ni,nij,nik->njk", w2_v, cz_cov, cz_cov, optimize=True)
        + np.einsum("ni,nij,nik->njk", w2_y, cz_out, cz_out, optimize=True)
        + ctx.d_inv
    )
    p_beta_b = (
        np.einsum("ni,nij,nik->njk", w2_v, cb_cov, cz_cov, optimize=True)
        + np.einsum("ni,nij,nik->njk", w2_y, cb_out, cz_out, optimize=True)
    )
    p_beta_beta = (
        np.einsum("ni,nij,nik->jk", w2_v, cb_cov, cb_cov, optimize=True)
        + np.einsum("ni,nij,nik->jk", w2_y, cb_out, cb_out, optimize=True)
        + priors.beta_precision * np.eye(ws.q)
    )
    precision = LatentPrecision(
        p_beta_beta=0.5 * (p_beta_beta + p_beta_beta.T),
        p_beta_b=p_beta_b,
        p_bb=0.5 * (p_bb + np.transpose(p_bb, (0, 2, 1))),
        ids=ws.ids,
        q=ws.q,
        p=ws.p,
    )
    return g_beta, g_b, precision


def _batched_cholesky(mats: np.ndarray) -> np.ndarray:
    """Batched lower Cholesky with the shared escalating-jitter policy."""
    try:
        return np.linalg.cholesky(mats)
    except np.linalg.LinAlgError:
        pass
    p = mats.shape[-1]
    base = 1e-10 * np.trace(mats, axis1=-2, axis2=-1) / p
    base = np.where(base > 0.0, base, np.finfo(float).tiny)
    eye = np.eye(p)
    for attempt in range(3):
        try:
            return np.linalg.cholesky(mats + (base * 10.0**attempt)[:, None, None] * eye)
        except np.linalg.LinAlgError:
            continue
    raise NumericError("a per-subject precision block stayed non positive definite")


@dataclass
class LatentPrecision:
    """Arrowhead precision of the latent field at a fixed point.

    Blocks: dense fixed-effect block ``p_beta_beta`` (q x q), one
    ``p_bb`` block per subject (p x p), and the coupling ``p_beta_b``
    (q x p per subject). All structured operations eliminate the
    subject blocks first.
    """

    p_beta_beta: np.ndarray
    p_beta_b: np.ndarray
    p_bb: np.ndarray
    ids: tuple[str, ...]
    q: int
    p: int

    def __post_init__(self):
        self._low_bb = _batched_cholesky(self.p_bb)
        # subject-block solves reused by every downstream operation
        self._bb_inv_bt = np.linalg.solve(self.p_bb, np.transpose(self.p_beta_b, (0, 2, 1)))
        schur = self.p_beta_beta - np.einsum("nqp,npr->qr", self.p_beta_b, self._bb_inv_bt)
        self._schur = 0.5 * (schur + schur.T)
        self._low_schur = robust_cholesky(self._schur)

    @property
    def dim(self) -> int:
        return self.q + len(self.ids) * self.p

    def solve(self, g_beta: np.ndarray, g_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Solve P [d_beta; d_b] = [g_beta; g_b] by block elimination."""
        bb_inv_g = np.linalg.solve(self.p_bb, g_b[..., None])[..., 0]
        rhs = g_beta - np.einsum("nqp,np->q", self.p_beta_b, bb_inv_g)
        half = solve_triangular(self._low_schur, rhs, lower=True)
        d_beta = solve_triangular(self._low_schur.T, half, lower=False)
        correction = np.einsum("npq,q->np", np.transpose(self.p_beta_b, (0, 2, 1)), d_beta)
        d_b = np.linalg.solve(self.p_bb, (g_b - correction)[..., None])[..., 0]
        return d_beta, d_b

    def logdet(self) -> float:
        """log det of the full latent precision."""
        diag_bb = np.diagonal(self._low_bb, axis1=-2, axis2=-1)
        return 2.0 * float(np.sum(np.log(diag_bb))) + 2.0 * float(
            np.sum(np.log(np.diag(self._low_schur)))
        )

    def cov_beta(self) -> np.ndarray:
        eye = np.eye(self.q)
        half = solve_triangular(self._low_schur, eye, lower=True)
        return half.T @ half

    def marginal_variances(self) -> tuple[np.ndarray, np.ndarray]:
        """Diagonal of the inverse: fixed-effect part and per-subject part.

        Uses Cov(b_i) = P_bb^-1 + (P_bb^-1 P_beta_b^T) Cov(beta)
        (P_beta_b P_bb^-1), which follows from the block inverse of the
        arrowhead matrix.
        """
        cov_beta = self.cov_beta()
        bb_inv = np.linalg.inv(self.p_bb)
        lever = self._bb_inv_bt  # (n, p, q)
        extra = np.einsum("npq,qr,npr->np", lever, cov_beta, lever, optimize=True)
        var_b = np.diagonal(bb_inv, axis1=-2, axis2=-1) + extra
        return np.diag(cov_beta).copy(), var_b

    def to_dense(self) -> np.ndarray:
        n = len(self.ids)
        dim = self.dim
        out = np.zeros((dim, dim))
        out[: self.q, : self.q] = self.p_beta_beta
        for i in range(n):
            sl = slice(self.q + i * self.p, self.q + (i + 1) * self.p)
            out[sl, sl] = self.p_bb[i]
            out[: self.q, sl] = self.p_beta_b[i]
            out[sl, : self.q] = self.p_beta_b[i].T
        return out


@dataclass
class InnerResult:
    """Outcome of one inner Newton solve at fixed hyperparameters."""

    field: LatentField
    precision: LatentPrecision
    value: float
    n_iter: int
    converged: bool
    grad_max: float
    beta: np.ndarray
    b: np.ndarray


def _newton(
    ws: Workspace,
    ctx: _HyperCtx,
    priors: PriorConfig,
    init: tuple[np.ndarray, np.ndarray] | None = None,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> InnerResult:
    if init is None:
        beta = np.zeros(ws.q)
        b = np.zeros((ws.n, ws.p))
    else:
        beta = init[0].copy()
        b = init[1].copy()
    value = _joint_value(ws, ctx, priors, beta, b)
    if not np.isfinite(value):
        beta = np.zeros(ws.q)
        b = np.zeros((ws.n, ws.p))
        value = _joint_value(ws, ctx, priors, beta, b)
        if not np.isfinite(value):
            raise NumericError("joint posterior is non-finite at the zero field")
    precision = None
    grad_max = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g_beta, g_b, precision = _grad_blocks(ws, ctx, priors, beta, b)
        grad_max = max(
            float(np.max(np.abs(g_beta))) if g_beta.size else 0.0,
            float(np.max(np.abs(g_b))) if g_b.size else 0.0,
        )
        if grad_max < tol:
            converged = True
            break
        d_beta, d_b = precision.solve(g_beta, g_b)
        step = 1.0
        accepted = False
        for _ in range(40):
            cand_val = _joint_value(ws, ctx, priors, beta + step * d_beta, b + step * d_b)
            if cand_val > value:
                beta = beta + step * d_beta
                b = b + step * d_b
                value = cand_val
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # no ascent left along the Newton direction; call it done
            converged = grad_max < max(tol * 1e3, 1e-3)
            break
    if precision is None:
        _, _, precision = _grad_blocks(ws, ctx, priors, beta, b)
    return InnerResult(
        field=ws.unpack(beta, b),
        precision=precision,
        value=value,
        n_iter=it,
        converged=converged,
        grad_max=grad_max,
        beta=beta,
        b=b,
    )


# ---------------------------------------------------------------------------
# hyperparameter prior
# ---------------------------------------------------------------------------

def _gamma_logpdf(x: float, shape: float, rate: float) -> float:
    return shape * math.log(rate) - gammaln(shape) + (shape - 1.0) * math.log(x) - rate * x


def hyper_log_prior(spec: ModelSpec, priors: PriorConfig, hyper: HyperVector) -> float:
    """Log prior of the unconstrained hyper vector, Jacobians included.

    Each random-effect precision block gets a Wishart prior
    D_block^{-1} ~ Wishart(df, R_block^{-1}) with R the diagonal matrix
    of prior scale values. The density is evaluated on the
    unconstrained Cholesky parametrization, so the change of variables
    psi -> L -> D -> D^{-1} contributes

        p log 2 - sum_j (p + j) log L_jj

    per block (columns j = 1..p). Error precision and outcome
    dispersion carry Gamma priors on the natural scale plus their log
    transforms' Jacobians; gamma is plain normal.
    """
    total = 0.0
    blocks = hyper.blocks
    p_total = sum(blocks)
    scale_diag = priors.wishart_scale_diag
    if scale_diag is None:
        scale_diag = tuple(1.0 for _ in range(p_total))
    if len(scale_diag) != p_total:
        raise ConfigError(
            f"wishart_scale_diag has {len(scale_diag)} entries, expected {p_total}"
        )
    low = hyper.d_chol()
    offset = 0
    for size in blocks:
        block_low = low[offset:offset + size, offset:offset + size]
        eye = np.eye(size)
        inv_half = solve_triangular(block_low, eye, lower=True)
        w = inv_half.T @ inv_half  # D_block^{-1}
        r_diag = np.asarray(scale_diag[offset:offset + size], dtype=float)
        df = priors.df_for_block(size)
        total += wishart_logpdf(w, df, np.diag(1.0 / r_diag))
        log_diag = np.log(np.diag(block_low))
        cols = np.arange(1, size + 1, dtype=float)
        total += size * math.log(2.0) - float(np.sum((size + cols) * log_diag))
        offset += size
    tau = math.exp(hyper.log_eps_precision)
    total += _gamma_logpdf(tau, priors.eps_shape, priors.eps_rate) + hyper.log_eps_precision
    phi = hyper.phi
    total += _gamma_logpdf(phi, priors.phi_shape, priors.phi_rate) + hyper.log_phi
    if spec.kind is ModelKind.SCALED:
        if hyper.gamma is None:
            raise ConfigError("scaled kind requires gamma in the hyper vector")
        tau_g = priors.gamma_precision
        total += (
            -0.5 * tau_g * (hyper.gamma - priors.gamma_mean) ** 2
            + 0.5 * (math.log(tau_g) - _LOG_2PI)
        )
    elif hyper.gamma is not None:
        raise ConfigError("gamma is only defined for the scaled kind")
    return float(total)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def joint_log_posterior(
    spec: ModelSpec, dataset: LongDataset, field: LatentField, hyper: HyperVector
) -> float:
    """Unnormalized log posterior of (field, hyper) given the data.

    Composition: observation log likelihood, random-effects prior,
    fixed-effect priors, and the hyper prior with all Jacobians. With
    no observations this collapses to the priors alone. Returns -inf
    when a diverged field pushes a Beta mean onto the boundary.
    """
    ws = Workspace(spec, dataset)
    ctx = _context(spec, hyper)
    beta, b = ws.pack(field)
    value = _joint_value(ws, ctx, spec.priors, beta, b)
    if not np.isfinite(value):
        return -np.inf
    return value + hyper_log_prior(spec, spec.priors, hyper)


def latent_gradient(
    spec: ModelSpec, dataset: LongDataset, field: LatentField, hyper: HyperVector
) -> LatentField:
    """Analytic gradient of the joint log posterior in the latent field.

    Returned in the same container shape as the field itself, which
    keeps finite-difference checks one zip away.
    """
    ws = Workspace(spec, dataset)
    ctx = _context(spec, hyper)
    beta, b = ws.pack(field)
    g_beta, g_b, _ = _grad_blocks(ws, ctx, spec.priors, beta, b, want_hess=False)
    return ws.unpack(g_beta, g_b)


def inner_mode(
    spec: ModelSpec,
    dataset: LongDataset,
    hyper: HyperVector,
    control: FitControl | None = None,
) -> InnerResult:
    """Conditional mode of the latent field at fixed hyperparameters.

    Newton iteration with analytic derivatives and halving line search;
    stops at gradient max-norm ``inner_tol``. The returned precision is
    the negative Hessian at the final point.
    """
    control = control or FitControl()
    ws = Workspace(spec, dataset)
    ctx = _context(spec, hyper)
    return _newton(
        ws, ctx, spec.priors, init=None,
        tol=control.inner_tol, max_iter=control.inner_max_iter,
    )


def _laplace_value(
    ws: Workspace,
    priors: PriorConfig,
    hyper: HyperVector,
    init: tuple[np.ndarray, np.ndarray] | None,
    tol: float,
    max_iter: int,
) -> tuple[float, InnerResult]:
    ctx = _context(ws.spec, hyper)
    inner = _newton(ws, ctx, priors, init=init, tol=tol, max_iter=max_iter)
    value = (
        inner.value
        + hyper_log_prior(ws.spec, priors, hyper)
        + 0.5 * ws.latent_dim * _LOG_2PI
        - 0.5 * inner.precision.logdet()
    )
    return float(value), inner


def log_marginal_hyper(spec: ModelSpec, dataset: LongDataset, hyper: HyperVector) -> float:
    """Laplace approximation of the log marginal posterior of ``hyper``.

    Integrates the whole latent field out of the joint posterior at its
    conditional mode:

        joint(mode) + dim/2 log(2 pi) - 1/2 log det(precision).

    Exact when every observation model is Gaussian, since the joint is
    then itself Gaussian in the field.
    """
    ws = Workspace(spec, dataset)
    value, _ = _laplace_value(ws, spec.priors, hyper, None, 1e-6, 100)
    return value


# ---------------------------------------------------------------------------
# initial values and stage-one scale estimates
# ---------------------------------------------------------------------------

def _working_outcome(spec: ModelSpec, values: np.ndarray) -> np.ndarray:
    if spec.family is Family.GAUSSIAN:
        return np.asarray(values, dtype=float)
    clipped = np.clip(np.asarray(values, dtype=float), 1e-6, 1.0 - 1e-6)
    return np.log(clipped) - np.log1p(-clipped)


def _subject_ols(design: np.ndarray, values: np.ndarray):
    """Least squares coefficients and residual variance, or None."""
    if values.size <= design.shape[1]:
        return None
    coef, *_ = np.linalg.lstsq(design, values, rcond=None)
    resid = values - design @ coef
    dof = values.size - design.shape[1]
    return coef, float(resid @ resid / dof)


def _eigclip(a: np.ndarray, floor: float) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.clip(w, floor, None)) @ v.T


def _moment_block(
    recipe: DesignRecipe,
    subjects,
    times_of,
    values_of,
    fallback_scale: float,
) -> tuple[np.ndarray, float]:
    """Crude covariance of per-subject OLS coefficients plus residual var."""
    coefs, resids = [], []
    for s in subjects:
        t = times_of(s)
        if t.size == 0:
            continue
        got = _subject_ols(design_matrix(recipe, s, t), values_of(s))
        if got is not None:
            coefs.append(got[0])
            resids.append(got[1])
    p = recipe.width
    if len(coefs) >= 3:
        block = np.cov(np.asarray(coefs).T) if p > 1 else np.atleast_2d(np.var(coefs, ddof=1))
        block = _eigclip(np.atleast_2d(block), 1e-5)
        resid = float(np.median(resids)) if resids else fallback_scale
    else:
        block = np.eye(p) * max(fallback_scale, 1e-3)
        resid = fallback_scale
    return block, max(resid, 1e-6)


def _default_init(spec: ModelSpec, dataset: LongDataset) -> HyperVector:
    """Data-driven starting hyper vector. Deterministic, heuristic only."""
    subjects = dataset.subjects
    all_v = np.concatenate([s.cov_values for s in subjects if s.n_cov]) if any(
        s.n_cov for s in subjects
    ) else np.zeros(0)
    var_v = float(np.var(all_v)) if all_v.size > 1 else 1.0
    d_v, resid_v = _moment_block(
        spec.cov_random, subjects,
        lambda s: s.cov_times, lambda s: s.cov_values,
        fallback_scale=max(0.25 * var_v, 1e-3),
    )
    work_of = lambda s: _working_outcome(spec, s.out_values)
    all_w = np.concatenate([work_of(s) for s in subjects if s.n_out]) if any(
        s.n_out for s in subjects
    ) else np.zeros(0)
    var_w = float(np.var(all_w)) if all_w.size > 1 else 1.0
    d_y, resid_w = _moment_block(
        spec.out_random, subjects,
        lambda s: s.out_times, work_of,
        fallback_scale=max(0.25 * var_w, 1e-3),
    )
    sigma2 = float(np.clip(resid_v, 1e-6, None))
    if spec.family is Family.GAUSSIAN:
        phi = float(np.clip(1.0 / resid_w, 1e-4, 1e8))
    else:
        mu_bar = float(expit(np.mean(all_w))) if all_w.size else 0.5
        spread = max(mu_bar * (1.0 - mu_bar), 1e-3)
        phi = float(np.clip(1.0 / (resid_w * spread) - 1.0, 2.0, 1000.0))
    gamma0 = None
    if spec.kind is ModelKind.SCALED:
        gamma0 = _init_gamma(spec, subjects, work_of)
    p_v = spec.p_v
    d_full = np.zeros((spec.p_total, spec.p_total))
    d_full[:p_v, :p_v] = d_v
    d_full[p_v:, p_v:] = d_y
    return HyperVector.from_natural(spec, d_full, sigma2, phi, gamma=gamma0)


def _init_gamma(spec: ModelSpec, subjects, work_of) -> float:
    """Pooled regression of the working outcome on its own design plus
    the subject-wise biomarker prediction; the extra coefficient seeds
    gamma."""
    rows, resp = [], []
    for s in subjects:
        if s.n_out == 0 or s.n_cov <= spec.p_v:
            continue
        got = _subject_ols(design_matrix(spec.cov_random, s, s.cov_times), s.cov_values)
        if got is None:
            continue
        m_hat = design_matrix(spec.cov_random, s, s.out_times) @ got[0]
        x = design_matrix(spec.out_fixed, s, s.out_times)
        rows.append(np.column_stack([x, m_hat]))
        resp.append(work_of(s))
    if not rows:
        return 0.0
    big_x = np.vstack(rows)
    big_y = np.concatenate(resp)
    if big_y.size <= big_x.shape[1]:
        return 0.0
    coef, *_ = np.linalg.lstsq(big_x, big_y, rcond=None)
    return float(coef[-1])


def _profile_lmm_ml(recipe: DesignRecipe, fixed: DesignRecipe, subjects, times_of, values_of):
    """Maximum likelihood for one plain Gaussian mixed model.

    Fixed effects are profiled out by generalized least squares at each
    candidate (D, sigma2); the profiled likelihood is maximized by BFGS
    on the Cholesky parametrization. Used only to scale informative
    priors, so speed wins over elegance.
    """
    data = []
    for s in subjects:
        t = times_of(s)
        if t.size == 0:
            continue
        data.append((
            design_matrix(fixed, s, t),
            design_matrix(recipe, s, t),
            np.asarray(values_of(s), dtype=float),
        ))
    p = recipe.width
    if len(data) < 3:
        raise DataError("too few subjects with observations for a stage-one fit")

    tril_r, tril_c = np.tril_indices(p, k=-1)

    def unpack(psi):
        low = np.zeros((p, p))
        low[np.diag_indices(p)] = np.exp(psi[:p])
        low[tril_r, tril_c] = psi[p:-1]
        return low @ low.T, math.exp(psi[-1])

    def negloglik(psi):
        d, s2 = unpack(psi)
        xtvx = 0.0
        xtvy = 0.0
        pieces = []
        try:
            for x, z, y in data:
                cov = z @ d @ z.T + s2 * np.eye(y.size)
                low = np.linalg.cholesky(cov)
                hx = solve_triangular(low, x, lower=True)
                hy = solve_triangular(low, y, lower=True)
                xtvx = xtvx + hx.T @ hx
                xtvy = xtvy + hx.T @ hy
                pieces.append((hx, hy, low))
            beta = np.linalg.solve(xtvx, xtvy)
        except np.linalg.LinAlgError:
            return 1e12
        ll = 0.0
        for hx, hy, low in pieces:
            r = hy - hx @ beta
            ll += -0.5 * float(r @ r) - float(np.sum(np.log(np.diag(low))))
            ll += -0.5 * hy.size * _LOG_2PI
        return -ll if np.isfinite(ll) else 1e12

    block0, resid0 = _moment_block(recipe, subjects, times_of, values_of, 0.1)
    low0 = robust_cholesky(block0)
    psi0 = np.concatenate([
        np.log(np.diag(low0)), low0[tril_r, tril_c], [math.log(resid0)]
    ])
    res = minimize(negloglik, psi0, method="BFGS", options={"maxiter": 200})
    d_hat, s2_hat = unpack(res.x)
    return d_hat, s2_hat


def stage_one_sd_estimates(spec: ModelSpec, dataset: LongDataset) -> np.ndarray:
    """Per-effect standard deviations from separate single-process fits.

    The biomarker process is fit as a plain Gaussian mixed model; the
    outcome is fit the same way on its working scale (logit-transformed
    for the Beta family). The square roots of the estimated random
    effect variances scale the Wishart prior in informative mode.
    """
    subjects = dataset.subjects
    d_v, _ = _profile_lmm_ml(
        spec.cov_random, spec.cov_fixed, subjects,
        lambda s: s.cov_times, lambda s: s.cov_values,
    )
    d_y, _ = _profile_lmm_ml(
        spec.out_random, spec.out_fixed, subjects,
        lambda s: s.out_times, lambda s: _working_outcome(spec, s.out_values),
    )
    sds = np.concatenate([np.sqrt(np.diag(d_v)), np.sqrt(np.diag(d_y))])
    return np.clip(sds, 1e-3, None)


# ---------------------------------------------------------------------------
# outer optimization helpers
# ---------------------------------------------------------------------------

def _central_grad(fun, x: np.ndarray, step: float) -> np.ndarray:
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        g[j] = (fun(x + e) - fun(x - e)) / (2.0 * step)
    return g


def _central_hessian(fun, x: np.ndarray, step: float) -> np.ndarray:
    """Symmetric second differences; 4 evaluations per off-diagonal pair."""
    n = x.size
    h = np.zeros((n, n))
    f0 = fun(x)
    for j in range(n):
        ej = np.zeros(n)
        ej[j] = step
        h[j, j] = (fun(x + ej) + fun(x - ej) - 2.0 * f0) / step**2
    for j in range(n):
        ej = np.zeros(n)
        ej[j] = step
        for k in range(j + 1, n):
            ek = np.zeros(n)
            ek[k] = step
            val = (
                fun(x + ej + ek) - fun(x + ej - ek) - fun(x - ej + ek) + fun(x - ej - ek)
            ) / (4.0 * step**2)
            h[j, k] = val
            h[k, j] = val
    return h


def _spd_inverse(a: np.ndarray) -> tuple[np.ndarray, bool]:
    """Inverse of a nominally SPD matrix, eigenvalue-clipped if needed."""
    try:
        low = robust_cholesky(a)
        eye = np.eye(a.shape[0])
        half = solve_triangular(low, eye, lower=True)
        return half.T @ half, True
    except NumericError:
        w, v = np.linalg.eigh(0.5 * (a + a.T))
        floor = max(np.max(np.abs(w)) * 1e-10, 1e-12)
        inv = (v / np.clip(w, floor, None)) @ v.T
        return 0.5 * (inv + inv.T), False


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

def _natural_names(spec: ModelSpec, template: HyperVector) -> list[str]:
    p = template.p_total
    names = [f"sigma_{j + 1}" for j in range(p)]
    rows, cols = _rho_pairs(template)
    names += [f"rho_{c + 1}{r + 1}" for r, c in zip(rows, cols)]
    names += ["sigma2_eps", "phi"]
    if template.gamma is not None:
        names += ["gamma", "exp_gamma"]
    return names


def _rho_pairs(template: HyperVector):
    from .model import _block_tril_indices

    return _block_tril_indices(template.blocks)


def _natural_draws(spec: ModelSpec, template: HyperVector, psis: np.ndarray) -> np.ndarray:
    """Map unconstrained draws (rows) to natural-scale columns."""
    p = template.p_total
    n_off = template.chol_offdiag.size
    s = psis.shape[0]
    low = np.zeros((s, p, p))
    idx = np.arange(p)
    low[:, idx, idx] = np.exp(psis[:, :p])
    rows, cols = _rho_pairs(template)
    if n_off:
        low[:, rows, cols] = psis[:, p:p + n_off]
    d = low @ np.transpose(low, (0, 2, 1))
    sds = np.sqrt(np.diagonal(d, axis1=1, axis2=2))
    cols_out = [sds]
    if len(rows):
        rho = d[:, rows, cols] / (sds[:, rows] * sds[:, cols])
        cols_out.append(rho)
    sigma2 = np.exp(-psis[:, p + n_off])[:, None]
    phi = np.exp(psis[:, p + n_off + 1])[:, None]
    cols_out += [sigma2, phi]
    if template.gamma is not None:
        gamma = psis[:, -1][:, None]
        cols_out += [gamma, np.exp(gamma)]
    return np.column_stack([np.atleast_2d(c) if c.ndim == 1 else c for c in cols_out])


def _hyper_summaries(
    spec: ModelSpec,
    template: HyperVector,
    x_hat: np.ndarray,
    hyper_cov: np.ndarray,
    n_draws: int,
    seed: int,
) -> dict[str, Summary]:
    names = _natural_names(spec, template)
    mode_row = _natural_draws(spec, template, x_hat[None, :])[0]
    m = max(1, int(math.ceil(math.log2(max(n_draws, 2)))))
    sob = qmc.Sobol(d=x_hat.size, scramble=True, seed=derive_rng(seed, 3))
    u = np.clip(sob.random_base2(m)[:n_draws], 1e-12, 1.0 - 1e-12)
    z = norm.ppf(u)
    psis = x_hat + z @ psd_factor(hyper_cov).T
    vals = _natural_draws(spec, template, psis)
    out: dict[str, Summary] = {}
    for j, name in enumerate(names):
        col = vals[:, j]
        q = np.percentile(col, [2.5, 50.0, 97.5])
        out[name] = Summary(
            mode=float(mode_row[j]),
            sd=float(np.std(col, ddof=1)),
            q025=float(q[0]),
            q500=float(q[1]),
            q975=float(q[2]),
        )
    return out


_Z975 = float(norm.ppf(0.975))


def _latent_summaries(ws: Workspace, inner: InnerResult) -> dict[str, Summary]:
    spec = ws.spec
    var_beta, var_b = inner.precision.marginal_variances()
    names: list[str] = []
    modes: list[float] = []
    sds: list[float] = []
    for j, col in enumerate(spec.cov_fixed.columns):
        names.append(f"beta_v[{col}]")
        modes.append(float(inner.beta[j]))
        sds.append(float(np.sqrt(var_beta[j])))
    for j, col in enumerate(spec.out_fixed.columns):
        names.append(f"beta_y[{col}]")
        modes.append(float(inner.beta[ws.qv + j]))
        sds.append(float(np.sqrt(var_beta[ws.qv + j])))
    effect_names = [f"v.{c}" for c in spec.cov_random.columns] + [
        f"y.{c}" for c in spec.out_random.columns
    ]
    for i, sid in enumerate(ws.ids):
        for j, eff in enumerate(effect_names):
            names.append(f"b[{sid}][{eff}]")
            modes.append(float(inner.b[i, j]))
            sds.append(float(np.sqrt(var_b[i, j])))
    out: dict[str, Summary] = {}
    for name, mode, sd in zip(names, modes, sds):
        out[name] = Summary(
            mode=mode, sd=sd,
            q025=mode - _Z975 * sd, q500=mode, q975=mode + _Z975 * sd,
        )
    return out


# ---------------------------------------------------------------------------
# the fit driver
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    """Everything a fit produces.

    ``hyper_mode`` is the unconstrained mode; ``hyper_summaries`` hold
    the natural-scale view (standard deviations, correlations, error
    variance, dispersion, and the scaling coefficient where present),
    with the reported mode equal to the transform of the unconstrained
    mode, not a resampled location. ``dataset`` and
    ``effective_priors`` are carried so downstream association
    resampling can re-solve the latent mode under exactly the priors
    the fit used.
    """

    latent_mode: LatentField
    latent_summaries: dict[str, Summary]
    hyper_mode: HyperVector
    hyper_cov: np.ndarray
    hyper_summaries: dict[str, Summary]
    latent_precision_at_mode: np.ndarray
    log_marginal: float
    n_inner_iterations: int
    n_outer_iterations: int
    converged: bool
    seed: int
    diagnostics: "object | None"
    dataset: LongDataset
    effective_priors: PriorConfig


def fit(spec: ModelSpec, dataset: LongDataset, control: FitControl | None = None) -> FitResult:
    """Full nested-Laplace fit of one model to one dataset.

    Deterministic for identical (spec, dataset, control): the optimizer
    path, the low-discrepancy summary draws, and any diagnostics stream
    all derive from ``control.seed``.
    """
    control = control or FitControl()
    ws = Workspace(spec, dataset)
    priors = spec.priors
    if control.informative_priors and priors.wishart_scale_diag is None:
        sds = stage_one_sd_estimates(spec, dataset)
        priors = replace(priors, wishart_scale_diag=tuple(float(v) for v in sds))
        log.info("informative prior scale: %s", np.round(sds, 4))
    template = control.init_hyper or _default_init(spec, dataset)
    x0 = template.to_array()

    state = {"warm": None, "inner": 0, "evals": 0}

    def objective(x: np.ndarray) -> float:
        hyper = template.with_array(x)
        try:
            value, inner = _laplace_value(
                ws, priors, hyper, state["warm"],
                control.inner_tol, control.inner_max_iter,
            )
        except NumericError:
            return -_NEG_LARGE
        state["warm"] = (inner.beta, inner.b)
        state["inner"] += inner.n_iter
        state["evals"] += 1
        if not np.isfinite(value):
            return -_NEG_LARGE
        return -value

    def gradient(x: np.ndarray) -> np.ndarray:
        return _central_grad(objective, x, control.fd_step)

    res = minimize(
        objective, x0, jac=gradient, method="BFGS",
        options={"gtol": control.outer_gtol, "maxiter": control.max_outer_iter},
    )
    x_hat = np.asarray(res.x, dtype=float)
    hyper_hat = template.with_array(x_hat)

    # reproducible final mode from a cold start, then curvature
    value_hat, inner_hat = _laplace_value(
        ws, priors, hyper_hat, None, control.inner_tol, control.inner_max_iter
    )
    hess = _central_hessian(objective, x_hat, control.hessian_step)
    hyper_cov, spd_ok = _spd_inverse(hess)

    grad_final = np.asarray(res.jac, dtype=float)
    grad_ok = bool(np.max(np.abs(grad_final)) <= 10.0 * control.outer_gtol)
    converged = bool((res.success or grad_ok) and inner_hat.converged and spd_ok)

    hyper_summaries = _hyper_summaries(
        spec, template, x_hat, hyper_cov, control.hyper_draws, control.seed
    )
    latent_summaries = _latent_summaries(ws, inner_hat)

    result = FitResult(
        latent_mode=inner_hat.field,
        latent_summaries=latent_summaries,
        hyper_mode=hyper_hat,
        hyper_cov=hyper_cov,
        hyper_summaries=hyper_summaries,
        latent_precision_at_mode=inner_hat.precision.to_dense(),
        log_marginal=float(value_hat),
        n_inner_iterations=int(state["inner"] + inner_hat.n_iter),
        n_outer_iterations=int(res.nit),
        converged=converged,
        seed=control.seed,
        diagnostics=None,
        dataset=dataset,
        effective_priors=priors,
    )
    if control.diagnostics:
        from .modeleval import compute_diagnostics

        result.diagnostics = compute_diagnostics(
            result, spec, dataset,
            n_posterior_draws=control.diagnostics_draws, seed=control.seed,
        )
    return result
