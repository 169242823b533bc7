"""Pre-registered analysis protocols and the staged pipeline runner.

A protocol is a TOML file. Stages run in a fixed order (summary, design,
balance, lock, analysis) and outcomes become readable only after the lock.
"""

from __future__ import annotations

import copy
import csv
import io
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import scipy

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from ._canon import canonical_json, to_jsonable
from .balance import BalanceReport, balance_report
from .dataset import BlindedDataset, DesignLock, load_csv, summarize, unseal_outcomes
from .design import (
    FEV_TRIM_RULES,
    MATCH_COVARIATES,
    PARSIMONIOUS_TERMS,
    RICH_TERMS,
    AcceptanceCriterion,
    DesignResult,
    caliper_match,
    coarsened_stratify,
    design_none,
    discard_nonoverlap,
    fit_propensity,
    freeze,
    optimal_match,
    trim_by_ranges,
)
from .errors import BlindingViolationError, ConfigurationError, DataError, EmbedExpError
from .inference import (
    STATISTICS,
    ace_posterior,
    fisher_inference,
    interaction_screen,
    neyman_crude,
    ols_adjusted,
)
from .inference.results import InferenceResult

OUT_ENV = "EMBEDEXP_OUT"
DESIGN_METHODS = {
    "none": ("A",),
    "trim": ("B",),
    "stratify": ("C",),
    "caliper": ("D.1", "D.2"),
    "optimal": ("E",),
}
ANALYSES = ("crude", "adjusted", "interaction", "fisher", "fiducial", "bayes", "mixed")
MC_ANALYSES = {"fisher", "fiducial", "bayes", "mixed"}


@dataclass
class AnalysisSpec:
    kind: str
    experiment: str | None = None
    statistic: str | None = None
    level: float = 0.95

    @property
    def name(self) -> str:
        parts = [self.kind]
        if self.experiment:
            parts.append(self.experiment)
        if self.statistic and self.kind != "mixed":
            parts.append(self.statistic)
        return ":".join(parts)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "level": self.level}
        if self.experiment:
            d["experiment"] = self.experiment
        if self.statistic:
            d["statistic"] = self.statistic
        return d


@dataclass
class ProtocolConfig:
    """Validated protocol. ``source`` keeps the raw TOML text for the bundle."""

    data_path: Path
    schema: dict | None
    method: str
    design_params: dict
    analyses: list[AnalysisSpec]
    seed: int | None
    draws: int | None
    out: Path
    threads: int = 1
    balance_alpha: float = 0.05
    source: str = ""
    raw: dict = field(default_factory=dict)

    @property
    def experiments(self) -> tuple[str, ...]:
        return DESIGN_METHODS[self.method]

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "ProtocolConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid TOML: {exc}") from None
        return cls.from_dict(raw, base=path.parent, source=text, **overrides)

    @classmethod
    def from_dict(
        cls,
        raw: Mapping[str, Any],
        base: Path = Path("."),
        source: str = "",
        seed: int | None = None,
        draws: int | None = None,
        out: str | Path | None = None,
        threads: int | None = None,
    ) -> "ProtocolConfig":
        raw = copy.deepcopy(dict(raw))
        known = {"data", "design", "balance", "analysis", "seed", "draws", "out", "threads"}
        extra = set(raw) - known
        if extra:
            raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
        data = raw.get("data")
        if not isinstance(data, dict) or "path" not in data:
            raise ConfigurationError("config needs a [data] table with a 'path'")
        data_path = Path(data["path"])
        if not data_path.is_absolute():
            data_path = base / data_path
        schema = data.get("schema")
        if schema is not None and not isinstance(schema, dict):
            raise ConfigurationError("[data].schema must be a table")

        design = dict(raw.get("design", {}))
        method = design.pop("method", "none")
        if method not in DESIGN_METHODS:
            raise ConfigurationError(f"unknown design method {method!r}; expected one of {sorted(DESIGN_METHODS)}")
        _check_design_params(method, design)

        if seed is None:
            seed = raw.get("seed")
        if draws is None:
            draws = raw.get("draws")
        if threads is None:
            threads = raw.get("threads", 1)
        for name, v in (("seed", seed), ("draws", draws), ("threads", threads)):
            if v is not None and (not isinstance(v, int) or isinstance(v, bool) or v < 0):
                raise ConfigurationError(f"{name} must be a non-negative integer")
        if draws is not None and draws < 1:
            raise ConfigurationError("draws must be at least 1")
        if threads < 1:
            raise ConfigurationError("threads must be at least 1")

        if out is None:
            out = raw.get("out") or os.environ.get(OUT_ENV) or "embedexp-out"
        out = Path(out)

        experiments = DESIGN_METHODS[method]
        analyses = [_parse_analysis(a, method, experiments) for a in raw.get("analysis", [])]
        if any(a.kind in MC_ANALYSES for a in analyses) and (seed is None or draws is None):
            raise ConfigurationError("Monte-Carlo analyses need both 'seed' and 'draws'")
        alpha = raw.get("balance", {}).get("alpha", 0.05)
        if not 0 < alpha < 1:
            raise ConfigurationError("[balance].alpha must lie in (0, 1)")
        return cls(data_path, schema, method, design, analyses, seed, draws, out, threads, alpha, source, raw)

    def protocol_record(self, ds: BlindedDataset | None = None) -> dict:
        """What the lock freezes together with the design."""
        rec = {
            "design_method": self.method,
            "design_params": to_jsonable(self.design_params),
            "analyses": [a.to_dict() for a in self.analyses],
            "seed": self.seed,
            "draws": self.draws,
        }
        if ds is not None:
            rec["schema_fingerprint"] = ds.schema_fingerprint
            rec["n_units"] = len(ds)
        return rec


def _check_design_params(method: str, p: Mapping[str, Any]) -> None:
    allowed = {
        "none": set(),
        "trim": {"rules"},
        "stratify": {"bins"},
        "caliper": {"candidates", "alpha", "caliper_sd_multiple", "criterion"},
        "optimal": {"candidates", "alpha", "covariates"},
    }[method]
    extra = set(p) - allowed
    if extra:
        raise ConfigurationError(f"design method {method!r} does not take {sorted(extra)}")
    if "caliper_sd_multiple" in p and not (isinstance(p["caliper_sd_multiple"], (int, float)) and p["caliper_sd_multiple"] > 0):
        raise ConfigurationError("caliper_sd_multiple must be a positive number")
    if "candidates" in p and (not p["candidates"] or not all(isinstance(c, list) for c in p["candidates"])):
        raise ConfigurationError("candidates must be a non-empty list of term lists")


def _parse_analysis(a: Mapping[str, Any], method: str, experiments: tuple[str, ...]) -> AnalysisSpec:
    if not isinstance(a, Mapping) or "kind" not in a:
        raise ConfigurationError("each [[analysis]] entry needs a 'kind'")
    extra = set(a) - {"kind", "experiment", "statistic", "level"}
    if extra:
        raise ConfigurationError(f"unknown analysis keys: {sorted(extra)}")
    kind = a["kind"]
    if kind not in ANALYSES:
        raise ConfigurationError(f"unknown analysis {kind!r}; expected one of {list(ANALYSES)}")
    level = float(a.get("level", 0.95))
    if not 0 < level < 1:
        raise ConfigurationError("level must lie in (0, 1)")
    spec = AnalysisSpec(kind, a.get("experiment"), a.get("statistic"), level)
    if kind in ("fisher", "fiducial", "mixed"):
        if spec.statistic == "paired_t" and "E" not in experiments:
            raise ConfigurationError(
                f"paired_t needs the paired experiment E from an optimal design; design {method!r} gives {list(experiments)}"
            )
        randomizable = [e for e in experiments if e in ("D.1", "D.2", "E")]
        if spec.experiment is None:
            if not randomizable:
                raise ConfigurationError(
                    f"{kind} needs a matched design (caliper or optimal); design {method!r} gives {list(experiments)}"
                )
            spec.experiment = randomizable[0]
        if spec.experiment not in randomizable:
            raise ConfigurationError(
                f"{kind}: experiment {spec.experiment!r} is not available from design {method!r} ({list(experiments)})"
            )
        if kind == "mixed":
            if spec.statistic not in (None, "bayes_t"):
                raise ConfigurationError("mixed analysis always uses the bayes_t statistic")
            spec.statistic = "bayes_t"
        elif spec.statistic is None:
            spec.statistic = {"D.1": "welch_t", "D.2": "regression_t", "E": "paired_t"}[spec.experiment]
        if spec.statistic not in STATISTICS:
            raise ConfigurationError(f"unknown statistic {spec.statistic!r}")
        if spec.statistic == "paired_t" and spec.experiment != "E":
            raise ConfigurationError(
                f"paired_t needs the paired experiment E from an optimal design; got {spec.experiment} from {method!r}"
            )
    elif spec.experiment is not None or spec.statistic is not None:
        raise ConfigurationError(f"analysis {kind!r} takes no experiment or statistic")
    return spec


class StageError(EmbedExpError):
    """Wraps an error with the pipeline stage it came from, keeping its exit code."""

    def __init__(self, stage: str, err: EmbedExpError):
        super().__init__(f"[{stage}] {err}")
        self.stage = stage
        self.cause = err
        self.exit_code = err.exit_code


class _stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, et, ev, tb):
        if ev is None or isinstance(ev, StageError):
            return False
        if isinstance(ev, EmbedExpError):
            raise StageError(self.name, ev) from ev
        if isinstance(ev, FileNotFoundError):
            raise StageError(self.name, DataError(f"file not found: {ev.filename}")) from ev
        return False


def load_data(cfg: ProtocolConfig) -> BlindedDataset:
    with _stage("data"):
        return load_csv(cfg.data_path, cfg.schema)


def build_design(cfg: ProtocolConfig, ds: BlindedDataset) -> DesignResult:
    """Run the configured design method on blinded data."""
    p = cfg.design_params
    with _stage("design"):
        if cfg.method == "none":
            return design_none(ds)
        if cfg.method == "trim":
            return trim_by_ranges(ds, p.get("rules", FEV_TRIM_RULES))
        if cfg.method == "stratify":
            return coarsened_stratify(ds, p.get("bins"))
        candidates = [tuple(c) for c in p.get("candidates", [PARSIMONIOUS_TERMS, RICH_TERMS])]
        pm = fit_propensity(ds, candidates, p.get("alpha", 0.05))
        overlap = discard_nonoverlap(ds, pm)
        if cfg.method == "caliper":
            crit = AcceptanceCriterion.from_dict(p["criterion"]) if "criterion" in p else None
            return caliper_match(overlap, pm, p.get("caliper_sd_multiple", 1.0), crit)
        return optimal_match(overlap, tuple(p.get("covariates", MATCH_COVARIATES)), ds)


def design_summary(ds: BlindedDataset, design: DesignResult) -> dict:
    """Counts and summaries for the full sample and the design's retained units."""
    def row(sub: BlindedDataset) -> dict:
        s = summarize(sub)
        return {"n": len(sub), "treated_fraction": float(sub.treatment.mean()), "covariates": s.to_dict()}

    return {
        "method": design.method,
        "experiments": [e.kind for e in design.experiments],
        "all_units": row(ds),
        "retained": row(ds.subset(design.retained)),
        "n_pairs": len(design.pairs),
    }


def run_balance(cfg: ProtocolConfig, ds: BlindedDataset, design: DesignResult) -> BalanceReport:
    with _stage("balance"):
        return balance_report(design, ds, cfg.balance_alpha)


def make_lock(cfg: ProtocolConfig, ds: BlindedDataset, design: DesignResult) -> DesignLock:
    with _stage("lock"):
        return freeze(design, cfg.protocol_record(ds))


def check_lock(cfg: ProtocolConfig, ds: BlindedDataset, design: DesignResult, lock: DesignLock) -> None:
    """Refuse analysis unless the lock matches both the design and this protocol."""
    with _stage("lock"):
        lock.verify(design)
        current = to_jsonable(cfg.protocol_record(ds))
        if canonical_json(current) != canonical_json(lock.protocol):
            diff = sorted(k for k in set(current) | set(lock.protocol) if current.get(k) != lock.protocol.get(k))
            raise BlindingViolationError(f"protocol differs from the locked one in {diff}")


def run_analyses(cfg: ProtocolConfig, ds: BlindedDataset, design: DesignResult, lock: DesignLock) -> list[InferenceResult]:
    """Unseal outcomes under ``lock`` and run every listed analysis in order."""
    check_lock(cfg, ds, design, lock)
    with _stage("analysis"):
        ad = unseal_outcomes(ds, lock, design)
        out: list[InferenceResult] = []
        for k, a in enumerate(cfg.analyses):
            out.append(_run_one(a, ad, cfg, k))
        return out


def _run_one(a: AnalysisSpec, ad, cfg: ProtocolConfig, k: int) -> InferenceResult:
    seed = cfg.seed
    if a.kind == "crude":
        return neyman_crude(ad, a.level)
    if a.kind == "adjusted":
        return ols_adjusted(ad, level=a.level)
    if a.kind == "interaction":
        ps = interaction_screen(ad)
        base = ols_adjusted(ad)
        return InferenceResult("interaction", len(ad), base.estimate, details={"p_values": ps})
    if a.kind == "bayes":
        post = ace_posterior(ad, cfg.draws, seed, threads=cfg.threads)
        return InferenceResult(
            "bayes", len(ad), post.mean, (post.lower, post.upper), "posterior",
            draws=cfg.draws, seed=seed, details={"sd": post.sd}, raw_draws=post.draws,
        )
    res = fisher_inference(
        ad, a.experiment, a.statistic, cfg.draws, seed, fiducial=a.kind == "fiducial", level=a.level, threads=cfg.threads,
    )
    res.method = a.name
    return res


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def inference_csv(results: list[InferenceResult]) -> str:
    rows = [("method", "n", "estimate", "lower", "upper", "interval_kind", "p_value", "statistic")]
    for r in results:
        d = r.to_dict()
        lo, hi = d["interval"] if d["interval"] else ("", "")
        rows.append((d["method"], d["n"], d["estimate"], lo, hi, d["interval_kind"],
                     "" if d["p_value"] is None else d["p_value"], "" if d["statistic"] is None else d["statistic"]))
    return _csv(rows)


def versions() -> dict:
    return {
        "embedexp": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def write_design_outputs(out: Path, ds: BlindedDataset, design: DesignResult) -> dict:
    summary = design_summary(ds, design)
    write_text(out / "design.json", design.to_json() + "\n")
    write_text(out / "design_summary.json", canonical_json(to_jsonable(summary)) + "\n")
    return summary


def write_balance_outputs(out: Path, report: BalanceReport) -> dict:
    d = to_jsonable(report.to_dict())
    write_text(out / "balance.json", canonical_json(d) + "\n")
    write_text(out / "love.csv", report.love_csv())
    write_text(out / "ks.csv", report.ks_csv())
    if report.pair_distances is not None:
        write_text(out / "pair_distances.csv", report.histogram_csv())
    return d


def write_inference_outputs(out: Path, results: list[InferenceResult]) -> list[dict]:
    docs = [to_jsonable(r.to_dict()) for r in results]
    write_text(out / "inference.json", canonical_json(docs) + "\n")
    write_text(out / "inference.csv", inference_csv(results))
    for r in results:
        if r.raw_draws is not None:
            write_text(out / "draws" / (r.method.replace(":", "_").replace(".", "") + ".csv"), r.draws_csv())
    return docs


@dataclass
class ReportBundle:
    """Everything a full run produced, mirrored on disk under ``out``."""

    out: Path
    design: DesignResult
    design_summary: dict
    balance: dict
    lock: DesignLock
    results: list[InferenceResult]
    provenance: dict

    def to_dict(self) -> dict:
        return {
            "design_summary": self.design_summary,
            "balance": self.balance,
            "inference": [r.to_dict() for r in self.results],
            "provenance": self.provenance,
        }


def run_protocol(cfg: ProtocolConfig) -> ReportBundle:
    """All stages in order; writes the bundle under ``cfg.out``."""
    ds = load_data(cfg)
    design = build_design(cfg, ds)
    summary = write_design_outputs(cfg.out, ds, design)
    balance = write_balance_outputs(cfg.out, run_balance(cfg, ds, design))
    lock = make_lock(cfg, ds, design)
    write_text(cfg.out / "lock.json", canonical_json(lock.to_dict()) + "\n")
    results = run_analyses(cfg, ds, design, lock)
    write_inference_outputs(cfg.out, results)
    provenance = {
        "config": cfg.raw,
        "lock_hash": lock.content_hash,
        "design_id": lock.design_id,
        "seed": cfg.seed,
        "draws": cfg.draws,
        "versions": versions(),
    }
    write_text(cfg.out / "config.toml", cfg.source)
    bundle = ReportBundle(cfg.out, design, summary, balance, lock, results, provenance)
    write_text(cfg.out / "report.json", canonical_json(to_jsonable(bundle.to_dict())) + "\n")
    return bundle
