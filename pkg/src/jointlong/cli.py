"""Command-line front end: ingestion, config handling, four pipelines.

Subcommands: ``simulate`` (replicated generate/fit/associate study),
``fit`` (one model on one CSV), ``assoc`` (fit plus association curve
and lag surface), ``evaluate`` (information criteria per model kind).

Option precedence is flag > config file > built-in default. The config
file is YAML with sections ``model``, ``priors``, ``fit``, ``sim``,
``study``, ``assoc``, ``data``; unknown keys fail fast so typos cannot
silently fall back to defaults.

Every run writes ``manifest.json`` next to its outputs: command,
config digest, seed, package version, timestamps, sha256 of each input
file, and the output paths. Numeric CSV cells use repr round-trip
precision; only the stdout tables round for display.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical failure (and non-convergence under ``--strict``).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .association import AssocQuery, assoc_surface, beta_joint
from .errors import ConfigError, DataError, JointlongError, NumericError
from .estimation import FitControl, FitResult, fit
from .model import (
    Family,
    Link,
    LongDataset,
    ModelKind,
    ModelSpec,
    PriorConfig,
    SubjectRecord,
)
from .modeleval import compute_diagnostics
from .simgen import SimConfig, StudyConfig, StudyReport, run_study

__all__ = [
    "main",
    "ingest_csv",
    "ingest_csv_verbose",
    "IngestStats",
    "write_dataset_csv",
    "merge_options",
]

SCHEMA_VERSION = 1

_MISSING_TOKENS = {"", "na", "nan", "null", "none"}

# clamp margin for declared-range outcomes; values at or past the
# bounds cannot enter a Beta likelihood
_RANGE_MARGIN = 1e-6


@dataclasses.dataclass
class IngestStats:
    n_rows: int = 0
    n_used: int = 0
    n_skipped_empty: int = 0
    n_skipped_bad: int = 0
    n_clamped: int = 0


def _parse_float(token: str, line_no: int, column: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise DataError(f"line {line_no}: column {column!r} has non-numeric value {token!r}")


def ingest_csv_verbose(
    path,
    outcome_range: tuple[float, float] | None = None,
    skip_bad_rows: bool = False,
) -> tuple[LongDataset, IngestStats]:
    """Read a long-format CSV into a dataset, reporting row accounting.

    Expected header: subject_id, time, process, value with process one
    of ``cov``/``out``. Rows whose value cell is empty (or NA/NaN) are
    skipped and counted. Other malformed rows raise a DataError naming
    the line, or are counted and skipped under ``skip_bad_rows``.
    Duplicate (subject, process, time) triples are always an error.
    With a declared ``outcome_range`` (lo, hi), outcome values map to
    (v - lo) / (hi - lo) and are clamped into the open unit interval.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file {path} does not exist")
    stats = IngestStats()
    per_subject: dict[str, dict[str, list[tuple[float, float]]]] = {}
    order: list[str] = []
    seen: set[tuple[str, str, float]] = set()
    lo = hi = None
    if outcome_range is not None:
        lo, hi = (float(v) for v in outcome_range)
        if not hi > lo:
            raise ConfigError(f"outcome range ({lo}, {hi}) is empty")

    with path.open(newline="") as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        required = {"subject_id", "time", "process", "value"}
        if not required.issubset(header):
            raise DataError(
                f"{path} header {header} is missing columns {sorted(required - set(header))}"
            )
        for row in reader:
            line_no = reader.line_num
            stats.n_rows += 1
            raw_value = (row["value"] or "").strip()
            if raw_value.lower() in _MISSING_TOKENS:
                stats.n_skipped_empty += 1
                continue
            try:
                sid = (row["subject_id"] or "").strip()
                if not sid:
                    raise DataError(f"line {line_no}: empty subject_id")
                proc = (row["process"] or "").strip().lower()
                if proc not in ("cov", "out"):
                    raise DataError(f"line {line_no}: unknown process {row['process']!r}")
                t = _parse_float((row["time"] or "").strip(), line_no, "time")
                val = _parse_float(raw_value, line_no, "value")
            except DataError:
                if skip_bad_rows:
                    stats.n_skipped_bad += 1
                    continue
                raise
            key = (sid, proc, t)
            if key in seen:
                raise DataError(
                    f"line {line_no}: duplicate observation for subject {sid!r}, "
                    f"process {proc}, time {t}"
                )
            seen.add(key)
            if proc == "out" and lo is not None:
                val = (val - lo) / (hi - lo)
                clamped = min(max(val, _RANGE_MARGIN), 1.0 - _RANGE_MARGIN)
                if clamped != val:
                    stats.n_clamped += 1
                    val = clamped
            if sid not in per_subject:
                per_subject[sid] = {"cov": [], "out": []}
                order.append(sid)
            per_subject[sid][proc].append((t, val))
            stats.n_used += 1

    subjects = []
    for sid in order:
        cov = sorted(per_subject[sid]["cov"])
        out = sorted(per_subject[sid]["out"])
        subjects.append(
            SubjectRecord(
                subject_id=sid,
                cov_times=[t for t, _ in cov], cov_values=[v for _, v in cov],
                out_times=[t for t, _ in out], out_values=[v for _, v in out],
            )
        )
    dataset = LongDataset(
        subjects=tuple(subjects),
        outcome_range=(lo, hi) if lo is not None else None,
    )
    return dataset, stats


def ingest_csv(path, outcome_range=None, skip_bad_rows=False) -> LongDataset:
    dataset, _ = ingest_csv_verbose(path, outcome_range, skip_bad_rows)
    return dataset


def write_dataset_csv(dataset: LongDataset, path) -> None:
    """Long-format dump, subject-major, biomarker rows before outcome."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["subject_id", "time", "process", "value"])
        for s in dataset.subjects:
            for t, v in zip(s.cov_times, s.cov_values):
                writer.writerow([s.subject_id, repr(float(t)), "cov", repr(float(v))])
            for t, v in zip(s.out_times, s.out_values):
                writer.writerow([s.subject_id, repr(float(t)), "out", repr(float(v))])


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

_SECTION_KEYS = {
    "model": {"kind", "family"},
    "priors": {
        "beta_precision", "gamma_mean", "gamma_precision", "eps_shape", "eps_rate",
        "phi_shape", "phi_rate", "wishart_df", "wishart_scale_diag",
    },
    "fit": {
        "seed", "informative_priors", "max_outer_iter", "inner_max_iter",
        "outer_gtol", "inner_tol", "fd_step", "hessian_step", "hyper_draws",
        "diagnostics", "diagnostics_draws",
    },
    "sim": {
        "kind", "family", "n_subjects", "n_visits", "time_range", "beta_v", "beta_y",
        "d", "sigma2_eps", "phi", "gamma", "miss_outcome", "miss_cov", "seed",
        "noiseless_outcome", "anchor_outcome_trend",
    },
    "study": {
        "replications", "fit_kinds", "assoc_a", "assoc_delta", "assoc_m_samples",
        "grid", "informative_priors", "truth_m_samples", "jobs",
    },
    "assoc": {
        "a", "s", "t", "delta", "m_samples", "n_resamples", "seed",
        "include_noise", "grid_s", "grid_t",
    },
    "data": {"path", "outcome_lo", "outcome_hi", "skip_bad_rows"},
}


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    with path.open() as handle:
        raw = yaml.safe_load(handle) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping of sections")
    for section, body in raw.items():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"unknown config section {section!r}")
        if body is None:
            raw[section] = {}
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        unknown = set(body) - _SECTION_KEYS[section]
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)} in config section {section!r}")
    return raw


def merge_options(defaults: dict, config: dict | None, flags: dict | None) -> dict:
    """flag > config > default; flag entries holding None mean unset."""
    merged = dict(defaults)
    for source in (config or {}), (flags or {}):
        for key, value in source.items():
            if value is not None:
                merged[key] = value
    return merged


def _spec_from(options: dict, prior_opts: dict) -> ModelSpec:
    scale = prior_opts.get("wishart_scale_diag")
    if scale is not None:
        scale = tuple(float(v) for v in scale)
    priors = PriorConfig(
        beta_precision=float(prior_opts["beta_precision"]),
        gamma_mean=float(prior_opts["gamma_mean"]),
        gamma_precision=float(prior_opts["gamma_precision"]),
        eps_shape=float(prior_opts["eps_shape"]),
        eps_rate=float(prior_opts["eps_rate"]),
        phi_shape=float(prior_opts["phi_shape"]),
        phi_rate=float(prior_opts["phi_rate"]),
        wishart_df=None if prior_opts["wishart_df"] is None else float(prior_opts["wishart_df"]),
        wishart_scale_diag=scale,
    )
    family = Family(options["family"])
    link = Link.LOGIT if family is Family.BETA else Link.IDENTITY
    return ModelSpec(kind=ModelKind(options["kind"]), family=family, link=link, priors=priors)


_PRIOR_DEFAULTS = {
    "beta_precision": 1e-3, "gamma_mean": 0.0, "gamma_precision": 1e-4,
    "eps_shape": 1.0, "eps_rate": 5e-5, "phi_shape": 1.0, "phi_rate": 0.01,
    "wishart_df": None, "wishart_scale_diag": None,
}

_FIT_DEFAULTS = {
    "seed": 0, "informative_priors": False, "max_outer_iter": 200,
    "inner_max_iter": 100, "outer_gtol": 1e-4, "inner_tol": 1e-6,
    "fd_step": 1e-4, "hessian_step": 5e-3, "hyper_draws": 4096,
    "diagnostics": False, "diagnostics_draws": 2000,
}


def _control_from(options: dict) -> FitControl:
    return FitControl(
        seed=int(options["seed"]),
        inner_tol=float(options["inner_tol"]),
        inner_max_iter=int(options["inner_max_iter"]),
        outer_gtol=float(options["outer_gtol"]),
        fd_step=float(options["fd_step"]),
        max_outer_iter=int(options["max_outer_iter"]),
        hessian_step=float(options["hessian_step"]),
        hyper_draws=int(options["hyper_draws"]),
        diagnostics=bool(options["diagnostics"]),
        diagnostics_draws=int(options["diagnostics_draws"]),
        informative_priors=bool(options["informative_priors"]),
    )


def _sim_config_from(options: dict) -> SimConfig:
    kwargs = {}
    for field in dataclasses.fields(SimConfig):
        if field.name in options and options[field.name] is not None:
            kwargs[field.name] = options[field.name]
    if "time_range" in kwargs:
        kwargs["time_range"] = tuple(float(v) for v in kwargs["time_range"])
    if "d" in kwargs:
        kwargs["d"] = tuple(tuple(float(v) for v in row) for row in kwargs["d"])
    for name in ("beta_v", "beta_y"):
        if name in kwargs:
            kwargs[name] = tuple(float(v) for v in kwargs[name])
    return SimConfig(**kwargs)


def _parse_grid(text: str) -> tuple[float, ...]:
    """Either comma-separated values or lo:hi:count."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"grid {text!r} must be lo:hi:count or comma-separated")
        lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
        if count < 1:
            raise ConfigError("grid count must be at least 1")
        return tuple(float(v) for v in np.linspace(lo, hi, count))
    return tuple(float(v) for v in text.split(","))


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _utc_now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _config_digest(effective: dict) -> str:
    canon = json.dumps(effective, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()


class _Manifest:
    def __init__(self, command: str, effective: dict, seed: int | None, out_dir: Path):
        self.body = {
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "version": __version__,
            "seed": seed,
            "config_digest": _config_digest(effective),
            "started_utc": _utc_now(),
            "inputs": {},
            "outputs": [],
        }
        self.out_dir = out_dir

    def add_input(self, path) -> None:
        self.body["inputs"][str(path)] = _sha256(path)

    def add_output(self, path) -> None:
        self.body["outputs"].append(str(path))

    def write(self) -> Path:
        self.body["finished_utc"] = _utc_now()
        target = self.out_dir / "manifest.json"
        with target.open("w") as handle:
            json.dump(self.body, handle, indent=2, sort_keys=True)
            handle.write("\n")
        return target


def _write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _print_summary_table(title: str, summaries: dict, stream) -> None:
    print(title, file=stream)
    print(f"{'parameter':<14}{'mode':>12}{'2.5%':>12}{'97.5%':>12}", file=stream)
    for name, s in summaries.items():
        print(
            f"{name:<14}{s.mode:>12.4g}{s.q025:>12.4g}{s.q975:>12.4g}",
            file=stream,
        )


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def _effective_sections(args) -> dict:
    config = load_config(args.config) if args.config else {}
    return config


def _data_options(args, config: dict) -> dict:
    flags = {
        "path": getattr(args, "data", None),
        "outcome_lo": getattr(args, "outcome_lo", None),
        "outcome_hi": getattr(args, "outcome_hi", None),
        "skip_bad_rows": True if getattr(args, "skip_bad_rows", False) else None,
    }
    defaults = {"path": None, "outcome_lo": None, "outcome_hi": None, "skip_bad_rows": False}
    return merge_options(defaults, config.get("data"), flags)


def _load_dataset(args, config: dict, manifest: _Manifest) -> tuple[LongDataset, IngestStats]:
    data_opts = _data_options(args, config)
    if not data_opts["path"]:
        raise ConfigError("no input data: pass --data or set data.path in the config")
    outcome_range = None
    if (data_opts["outcome_lo"] is None) != (data_opts["outcome_hi"] is None):
        raise ConfigError("outcome_lo and outcome_hi must be given together")
    if data_opts["outcome_lo"] is not None:
        outcome_range = (float(data_opts["outcome_lo"]), float(data_opts["outcome_hi"]))
    dataset, stats = ingest_csv_verbose(
        data_opts["path"], outcome_range, bool(data_opts["skip_bad_rows"])
    )
    manifest.add_input(data_opts["path"])
    return dataset, stats


def _model_options(args, config: dict) -> tuple[dict, dict]:
    model_flags = {"kind": getattr(args, "kind", None), "family": getattr(args, "family", None)}
    model_opts = merge_options(
        {"kind": "correlated", "family": "beta"}, config.get("model"), model_flags
    )
    prior_opts = merge_options(_PRIOR_DEFAULTS, config.get("priors"), {})
    return model_opts, prior_opts


def _fit_options(args, config: dict) -> dict:
    flags = {
        "seed": getattr(args, "seed", None),
        "informative_priors": getattr(args, "informative_priors", None),
        "diagnostics": getattr(args, "diagnostics", None),
        "max_outer_iter": getattr(args, "max_outer_iter", None),
    }
    return merge_options(_FIT_DEFAULTS, config.get("fit"), flags)


def _run_fit(args, config: dict, manifest: _Manifest, want_diagnostics: bool | None = None):
    dataset, stats = _load_dataset(args, config, manifest)
    model_opts, prior_opts = _model_options(args, config)
    fit_opts = _fit_options(args, config)
    if want_diagnostics is not None:
        fit_opts["diagnostics"] = want_diagnostics
    spec = _spec_from(model_opts, prior_opts)
    control = _control_from(fit_opts)
    result = fit(spec, dataset, control)
    return spec, control, result, stats


def _fit_payload(spec: ModelSpec, control: FitControl, result: FitResult, stats: IngestStats) -> dict:
    hyper = {
        name: {
            "mode": float(s.mode), "sd": float(s.sd),
            "q025": float(s.q025), "q500": float(s.q500), "q975": float(s.q975),
        }
        for name, s in result.hyper_summaries.items()
    }
    fixed = {
        name: {
            "mode": float(s.mode), "sd": float(s.sd),
            "q025": float(s.q025), "q500": float(s.q500), "q975": float(s.q975),
        }
        for name, s in result.latent_summaries.items()
        if name.startswith("beta_")
    }
    return {
        "schema_version": SCHEMA_VERSION,
        "model": {
            "kind": spec.kind.value,
            "family": spec.family.value,
            "link": spec.link.value,
        },
        "seed": control.seed,
        "ingest": dataclasses.asdict(stats),
        "convergence": {
            "converged": bool(result.converged),
            "n_outer_iterations": int(result.n_outer_iterations),
            "n_inner_iterations": int(result.n_inner_iterations),
            "log_marginal": float(result.log_marginal),
        },
        "hyperparameters": hyper,
        "fixed_effects": fixed,
    }


def _write_fit_outputs(out_dir: Path, spec, control, result, stats, manifest) -> None:
    payload = _fit_payload(spec, control, result, stats)
    result_path = out_dir / "fit_result.yaml"
    with result_path.open("w") as handle:
        yaml.safe_dump(payload, handle, sort_keys=True)
    manifest.add_output(result_path)

    latent_path = out_dir / "latent_summaries.csv"
    _write_csv(
        latent_path,
        ["name", "mode", "sd", "q025", "q500", "q975"],
        [
            [name, s.mode, s.sd, s.q025, s.q500, s.q975]
            for name, s in result.latent_summaries.items()
        ],
    )
    manifest.add_output(latent_path)

    hyper_path = out_dir / "hyper_summaries.csv"
    _write_csv(
        hyper_path,
        ["name", "mode", "sd", "q025", "q500", "q975"],
        [
            [name, s.mode, s.sd, s.q025, s.q500, s.q975]
            for name, s in result.hyper_summaries.items()
        ],
    )
    manifest.add_output(hyper_path)


def _cmd_fit(args) -> int:
    config = _effective_sections(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest("fit", config, getattr(args, "seed", None), out_dir)
    spec, control, result, stats = _run_fit(args, config, manifest)
    _write_fit_outputs(out_dir, spec, control, result, stats, manifest)
    manifest.write()
    _print_summary_table("hyperparameter posterior summaries", result.hyper_summaries, sys.stdout)
    fixed = {k: v for k, v in result.latent_summaries.items() if k.startswith("beta_")}
    _print_summary_table("fixed effects", fixed, sys.stdout)
    print(f"log marginal: {result.log_marginal:.6g}  converged: {result.converged}")
    if args.strict and not result.converged:
        raise NumericError("fit did not converge (strict mode)")
    return 0


def _assoc_options(args, config: dict) -> dict:
    flags = {
        "a": getattr(args, "a", None),
        "s": getattr(args, "s", None),
        "t": getattr(args, "t", None),
        "delta": getattr(args, "delta", None),
        "m_samples": getattr(args, "m_samples", None),
        "n_resamples": getattr(args, "n_resamples", None),
        "seed": getattr(args, "assoc_seed", None),
        "grid_s": _parse_grid(args.grid_s) if getattr(args, "grid_s", None) else None,
        "grid_t": _parse_grid(args.grid_t) if getattr(args, "grid_t", None) else None,
    }
    defaults = {
        "a": 9.0, "s": None, "t": None, "delta": 1.0, "m_samples": 5000,
        "n_resamples": 200, "seed": 0, "include_noise": True,
        "grid_s": None, "grid_t": None,
    }
    return merge_options(defaults, config.get("assoc"), flags)


def _cmd_assoc(args) -> int:
    config = _effective_sections(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest("assoc", config, getattr(args, "seed", None), out_dir)
    spec, control, result, stats = _run_fit(args, config, manifest, want_diagnostics=False)
    opts = _assoc_options(args, config)

    grid_s = opts["grid_s"]
    grid_t = opts["grid_t"]
    if grid_s is None and opts["s"] is not None:
        grid_s = (float(opts["s"]),)
    if grid_t is None and opts["t"] is not None:
        grid_t = (float(opts["t"]),)
    if grid_s is None or grid_t is None:
        raise ConfigError("assoc needs grid_s/grid_t (or single s/t values)")

    query = AssocQuery(
        a=float(opts["a"]), s=float(grid_s[0]), t=float(grid_t[0]),
        delta=float(opts["delta"]), m_samples=int(opts["m_samples"]),
        n_resamples=int(opts["n_resamples"]), seed=int(opts["seed"]),
        include_noise=bool(opts["include_noise"]),
    )
    surface = assoc_surface(result, spec, grid_s, grid_t, query)

    surface_path = out_dir / "assoc_surface.csv"
    rows = []
    for i, s in enumerate(surface.grid_s):
        for j, t in enumerate(surface.grid_t):
            rows.append([
                s, t, surface.a, surface.beta[i, j],
                None if surface.ci_low is None else surface.ci_low[i, j],
                None if surface.ci_high is None else surface.ci_high[i, j],
            ])
    _write_csv(surface_path, ["s", "t", "a", "beta_joint", "ci_low", "ci_high"], rows)
    manifest.add_output(surface_path)

    curve_rows = []
    for i, s in enumerate(surface.grid_s):
        for j, t in enumerate(surface.grid_t):
            if s == t:
                curve_rows.append([
                    s, t, surface.a, surface.beta[i, j],
                    None if surface.ci_low is None else surface.ci_low[i, j],
                    None if surface.ci_high is None else surface.ci_high[i, j],
                ])
    curve_path = out_dir / "assoc_curve.csv"
    _write_csv(curve_path, ["s", "t", "a", "beta_joint", "ci_low", "ci_high"], curve_rows)
    manifest.add_output(curve_path)
    manifest.write()

    print(
        f"association surface: {surface.beta.shape[0]} x {surface.beta.shape[1]} cells, "
        f"{len(curve_rows)} cross-sectional points, time-averaged "
        f"beta_joint = {surface.time_averaged:.6g}"
    )
    if args.strict and not result.converged:
        raise NumericError("fit did not converge (strict mode)")
    return 0


def _cmd_evaluate(args) -> int:
    config = _effective_sections(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest("evaluate", config, getattr(args, "seed", None), out_dir)

    kinds = [k.strip() for k in (args.kinds or "correlated,scaled").split(",") if k.strip()]
    rows = []
    any_failed = False
    for kind in kinds:
        args.kind = kind
        spec, control, result, stats = _run_fit(args, config, manifest, want_diagnostics=False)
        diag = compute_diagnostics(
            result, spec, result.dataset,
            n_posterior_draws=int(args.draws), seed=control.seed,
        )
        any_failed = any_failed or not result.converged
        rows.append([
            kind, diag.marginal_likelihood, diag.dic_overall, diag.dic_outcome,
            diag.waic_overall, diag.waic_outcome,
        ])
        print(
            f"{kind}: mlik {diag.marginal_likelihood:.4f}  "
            f"DIC {diag.dic_overall:.2f}/{diag.dic_outcome:.2f}  "
            f"WAIC {diag.waic_overall:.2f}/{diag.waic_outcome:.2f}"
        )
    eval_path = out_dir / "evaluate.csv"
    _write_csv(
        eval_path,
        ["kind", "marginal_likelihood", "dic_overall", "dic_outcome",
         "waic_overall", "waic_outcome"],
        rows,
    )
    manifest.add_output(eval_path)
    manifest.write()
    if args.strict and any_failed:
        raise NumericError("at least one fit did not converge (strict mode)")
    return 0


def _study_options(args, config: dict) -> dict:
    flags = {
        "replications": getattr(args, "reps", None),
        "jobs": getattr(args, "jobs", None),
        "fit_kinds": [k for k in (args.fit_kinds or "").split(",") if k] or None
        if hasattr(args, "fit_kinds") else None,
    }
    env_jobs = os.environ.get("JOINTLONG_JOBS")
    defaults = {
        "replications": 1, "fit_kinds": None, "assoc_a": 9.0, "assoc_delta": 1.0,
        "assoc_m_samples": 5000, "grid": None, "informative_priors": True,
        "truth_m_samples": 200_000,
        "jobs": int(env_jobs) if env_jobs else 1,
    }
    return merge_options(defaults, config.get("study"), flags)


def _cmd_simulate(args) -> int:
    config = _effective_sections(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest("simulate", config, getattr(args, "seed", None), out_dir)

    sim_flags = {
        "kind": getattr(args, "kind", None),
        "n_subjects": getattr(args, "n_subjects", None),
        "seed": getattr(args, "seed", None),
    }
    sim_opts = merge_options({}, config.get("sim"), sim_flags)
    sim = _sim_config_from(sim_opts)
    study_opts = _study_options(args, config)
    fit_opts = _fit_options(args, config)
    control = _control_from(fit_opts)
    study = StudyConfig(
        sim=sim,
        replications=int(study_opts["replications"]),
        fit_kinds=tuple(study_opts["fit_kinds"]) if study_opts["fit_kinds"] else None,
        assoc_a=float(study_opts["assoc_a"]),
        assoc_delta=float(study_opts["assoc_delta"]),
        assoc_m_samples=int(study_opts["assoc_m_samples"]),
        grid=tuple(float(g) for g in study_opts["grid"]) if study_opts["grid"] else None,
        informative_priors=bool(study_opts["informative_priors"]),
        truth_m_samples=int(study_opts["truth_m_samples"]),
        jobs=int(study_opts["jobs"]),
        fit_control=control,
    )
    report = run_study(study)
    _write_study_outputs(out_dir, study, report, manifest)
    manifest.write()
    print(
        f"study complete: {study.replications} replications x {len(study.fit_kinds)} kinds, "
        f"{report.n_failed} failed"
    )
    if args.strict and report.n_failed:
        raise NumericError(f"{report.n_failed} replications failed (strict mode)")
    return 0


def _write_study_outputs(out_dir: Path, study: StudyConfig, report: StudyReport, manifest) -> None:
    from .simgen import generate

    data_dir = out_dir / "datasets"
    for rep in range(study.replications):
        dataset = generate(study.sim, rep)
        path = data_dir / f"rep_{rep:04d}.csv"
        write_dataset_csv(dataset, path)
        manifest.add_output(path)

    curve_rows = []
    for kind in study.fit_kinds:
        curves = report.curves(kind)
        if curves.shape[0] == 0:
            continue
        mean = curves.mean(axis=0)
        q05 = np.percentile(curves, 5.0, axis=0)
        q95 = np.percentile(curves, 95.0, axis=0)
        for g, m, lo, hi, tr in zip(report.grid, mean, q05, q95, report.truth):
            curve_rows.append([kind.value, g, m, lo, hi, tr])
    curves_path = out_dir / "study_curves.csv"
    _write_csv(curves_path, ["kind", "time", "mean", "q05", "q95", "truth"], curve_rows)
    manifest.add_output(curves_path)

    hyper_rows = []
    for rec in report.records:
        for name, mode in rec.hyper_modes.items():
            hyper_rows.append([rec.kind.value, rec.replication, name, mode])
    hyper_path = out_dir / "study_hyper_modes.csv"
    _write_csv(hyper_path, ["kind", "replication", "name", "mode"], hyper_rows)
    manifest.add_output(hyper_path)

    record_rows = [
        [
            rec.kind.value, rec.replication, rec.converged,
            rec.waic_overall, rec.waic_outcome, rec.dic_overall, rec.dic_outcome,
            rec.marginal_likelihood, rec.error or "",
        ]
        for rec in report.records
    ]
    records_path = out_dir / "study_records.csv"
    _write_csv(
        records_path,
        ["kind", "replication", "converged", "waic_overall", "waic_outcome",
         "dic_overall", "dic_outcome", "marginal_likelihood", "error"],
        record_rows,
    )
    manifest.add_output(records_path)


# ---------------------------------------------------------------------------
# argument parsing and entry point
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--out-dir", default=".", help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--strict", action="store_true",
                        help="treat non-convergence as a failure (exit 4)")


def _add_data_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", help="long-format CSV input")
    parser.add_argument("--outcome-lo", type=float, default=None)
    parser.add_argument("--outcome-hi", type=float, default=None)
    parser.add_argument("--skip-bad-rows", action="store_true")
    parser.add_argument("--kind", choices=["correlated", "scaled"], default=None)
    parser.add_argument("--family", choices=["gaussian", "beta"], default=None)
    parser.add_argument("--informative-priors", dest="informative_priors",
                        action="store_true", default=None)
    parser.add_argument("--max-outer-iter", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jointlong",
        description="joint longitudinal biomarker/outcome modeling",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="replicated generate/fit/associate study")
    _add_common(p_sim)
    p_sim.add_argument("--reps", type=int, default=None)
    p_sim.add_argument("--n-subjects", type=int, default=None)
    p_sim.add_argument("--kind", choices=["correlated", "scaled"], default=None)
    p_sim.add_argument("--fit-kinds", default=None,
                       help="comma-separated model kinds fitted per replication")
    p_sim.add_argument("--jobs", type=int, default=None)
    p_sim.set_defaults(func=_cmd_simulate)

    p_fit = sub.add_parser("fit", help="fit one model to one dataset")
    _add_common(p_fit)
    _add_data_flags(p_fit)
    p_fit.add_argument("--diagnostics", action="store_true", default=None)
    p_fit.set_defaults(func=_cmd_fit)

    p_assoc = sub.add_parser("assoc", help="fit, then association curve and lag surface")
    _add_common(p_assoc)
    _add_data_flags(p_assoc)
    p_assoc.add_argument("--a", type=float, default=None)
    p_assoc.add_argument("--delta", type=float, default=None)
    p_assoc.add_argument("--s", type=float, default=None)
    p_assoc.add_argument("--t", type=float, default=None)
    p_assoc.add_argument("--grid-s", default=None, help="comma list or lo:hi:count")
    p_assoc.add_argument("--grid-t", default=None, help="comma list or lo:hi:count")
    p_assoc.add_argument("--m-samples", type=int, default=None)
    p_assoc.add_argument("--resamples", dest="n_resamples", type=int, default=None)
    p_assoc.add_argument("--assoc-seed", type=int, default=None)
    p_assoc.set_defaults(func=_cmd_assoc)

    p_eval = sub.add_parser("evaluate", help="information criteria per model kind")
    _add_common(p_eval)
    _add_data_flags(p_eval)
    p_eval.add_argument("--kinds", default=None,
                        help="comma-separated kinds (default both)")
    p_eval.add_argument("--draws", type=int, default=2000)
    p_eval.set_defaults(func=_cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, JointlongError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
