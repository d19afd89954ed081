"""Command-line pipeline runner.

Five subcommands cover the workflow end to end: ``synth`` writes a
synthetic cohort to disk, ``cv`` trains the cross-validated protocol,
``ablate`` repeats it per input modality, ``explain`` turns a finished
run directory into interpretation artifacts, and ``report`` aggregates
several run directories into one summary.

Configuration lives in a single JSON file; any field can be overridden
on the command line with repeated ``--set dotted.path=value`` flags
(flag beats file beats default). Machine-readable progress events go to
stderr as JSON lines, the human summary goes to stdout. Exit codes:
0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import interpret as itp
from . import training as tr
from .cohort import (
    CohortMatrix,
    DataError,
    SynthSpec,
    filter_genes,
    load_cohort,
    load_fold_manifest,
    synth_cohort,
    write_labels_tsv,
    write_matrix_tsv,
)
from .graphprior import (
    GraphError,
    PathwayPrior,
    build_prior,
    laplacian_encoding,
    map_memberships,
    parse_gmt,
    write_gmt,
)
from .metrics import CURVE_GRID, curve_band, pr_at_grid, roc_at_grid
from .model import ModelConfig, ModelError, load_checkpoint
from .training import TrainSpec, TrainingError

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass(frozen=True)
class InterpretOptions:
    """Attribution settings used by the explain command.

    ``baselines`` counts training samples drawn as attribution baselines;
    zero selects the all-zeros baseline instead.
    """

    baselines: int = 32
    steps: int = 50
    alpha: float = 0.05

    def validate(self) -> None:
        if self.baselines < 0:
            raise ConfigError("baselines must be >= 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must be in (0, 1)")


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run needs, resolved from file plus flags.

    Exactly one cohort source must be set: ``synth`` for a generated
    cohort or ``cohort`` (paths keyed mut/cnv/labels) plus ``pathways``
    for data on disk.
    """

    synth: SynthSpec | None = None
    cohort: dict[str, str] | None = None
    pathways: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSpec = field(default_factory=TrainSpec)
    out: str | None = None
    seeds: tuple[int, ...] = (42, 123)
    n_folds: int = 5
    jobs: int = 1
    prior_mode: str = "jaccard"
    prior_min_genes: int = 15
    interpret: InterpretOptions = field(default_factory=InterpretOptions)

    def validate(self) -> None:
        if (self.synth is None) == (self.cohort is None):
            raise ConfigError("exactly one of synth or cohort must be configured")
        if self.cohort is not None:
            missing = {"mut", "cnv", "labels"} - set(self.cohort)
            if missing:
                raise ConfigError(f"cohort paths missing {sorted(missing)}")
            extra = set(self.cohort) - {"mut", "cnv", "labels"}
            if extra:
                raise ConfigError(f"unknown cohort keys {sorted(extra)}")
            if self.pathways is None:
                raise ConfigError("cohort runs require a pathways file")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.prior_min_genes < 1:
            raise ConfigError("prior_min_genes must be >= 1")
        try:
            self.model.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.interpret.validate()

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "pathways": self.pathways,
            "model": dataclasses.asdict(self.model),
            "train": self.train.to_dict(),
            "out": self.out,
            "seeds": list(self.seeds),
            "n_folds": self.n_folds,
            "jobs": self.jobs,
            "prior_mode": self.prior_mode,
            "prior_min_genes": self.prior_min_genes,
            "interpret": dataclasses.asdict(self.interpret),
        }
        if self.synth is not None:
            out["synth"] = dataclasses.asdict(self.synth)
        if self.cohort is not None:
            out["cohort"] = dict(self.cohort)
        return out


def _build_section(cls: type, raw: Any, name: str) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(f"{name} must be a JSON object")
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - fields
    if unknown:
        raise ConfigError(f"unknown {name} fields {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad {name} section: {exc}") from exc


def config_from_dict(raw: dict[str, Any]) -> RunConfig:
    """Parse a raw JSON mapping into a validated RunConfig."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    if "synth" in raw:
        kwargs["synth"] = _build_section(SynthSpec, raw["synth"], "synth")
    if "cohort" in raw:
        if not isinstance(raw["cohort"], dict):
            raise ConfigError("cohort must be a JSON object")
        kwargs["cohort"] = {str(k): str(v) for k, v in raw["cohort"].items()}
    if "model" in raw:
        kwargs["model"] = _build_section(ModelConfig, raw["model"], "model")
    if "train" in raw:
        try:
            kwargs["train"] = TrainSpec.from_dict(raw["train"])
        except (TypeError, ValueError, TrainingError) as exc:
            raise ConfigError(f"bad train section: {exc}") from exc
    if "interpret" in raw:
        kwargs["interpret"] = _build_section(
            InterpretOptions, raw["interpret"], "interpret"
        )
    for key in ("pathways", "out", "prior_mode"):
        if key in raw and raw[key] is not None:
            kwargs[key] = str(raw[key])
    if "seeds" in raw:
        seeds = raw["seeds"]
        if not isinstance(seeds, list) or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in seeds
        ):
            raise ConfigError("seeds must be a list of integers")
        kwargs["seeds"] = tuple(seeds)
    for key in ("n_folds", "jobs", "prior_min_genes"):
        if key in raw:
            value = raw[key]
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{key} must be an integer")
            kwargs[key] = value
    config = RunConfig(**kwargs)
    config.validate()
    return config


def parse_override(text: str) -> tuple[list[str], Any]:
    """Split one ``dotted.path=value`` override; values parse as JSON
    literals and fall back to plain strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, value = text.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return path, parsed


def apply_overrides(raw: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    for text in overrides:
        path, value = parse_override(text)
        node = raw
        for part in path[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = {}
                node[part] = child
            node = child
        node[path[-1]] = value
    return raw


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Resolve the run configuration: defaults, then file, then flags."""
    raw: dict[str, Any] = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    apply_overrides(raw, list(getattr(args, "set", None) or []))
    if getattr(args, "out", None) is not None:
        raw["out"] = args.out
    if getattr(args, "seed_list", None) is not None:
        try:
            raw["seeds"] = [int(s) for s in args.seed_list.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad --seed-list: {exc}") from exc
    if getattr(args, "jobs", None) is not None:
        raw["jobs"] = args.jobs
    return config_from_dict(raw)


def emit(event: str, **payload: Any) -> None:
    """Write one machine-readable progress event to stderr."""
    print(json.dumps({"event": event, **payload}, sort_keys=True), file=sys.stderr)


def _require_out(config: RunConfig) -> Path:
    if config.out is None:
        raise ConfigError("an output directory is required (config out or --out)")
    return Path(config.out)


def _claim_dir(path: Path, force: bool) -> Path:
    # Refuse to write into a non-empty directory unless forced.
    if path.exists():
        if not path.is_dir():
            raise ConfigError(f"{path} exists and is not a directory")
        if any(path.iterdir()) and not force:
            raise ConfigError(f"{path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def prepare_inputs(
    config: RunConfig,
) -> tuple[CohortMatrix, PathwayPrior, Any]:
    """Materialize the cohort, pathway prior, and positional encoding.

    Setup failures here are configuration problems: infeasible synth
    specs, missing files, and priors too small for the encoder all
    surface as ConfigError.
    """
    try:
        if config.synth is not None:
            cohort, defs = synth_cohort(config.synth)
        else:
            paths = config.cohort or {}
            cohort = load_cohort(paths["mut"], paths["cnv"], paths["labels"])
            cohort = filter_genes(cohort)
            defs = parse_gmt(config.pathways)
        memberships = map_memberships(defs, cohort.gene_ids)
        prior = build_prior(
            memberships,
            cohort.n_genes,
            mode=config.prior_mode,
            min_genes=config.prior_min_genes,
        )
        enc = laplacian_encoding(prior, k=config.model.lpe_dims)
    except (DataError, GraphError, ModelError, OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cohort, prior, enc


def _fmt_mean_sd(entry: dict[str, float]) -> str:
    mean, sd = entry["mean"], entry["sd"]
    if np.isnan(mean):
        return "n/a"
    return f"{mean:.4f} +/- {sd:.4f}"


def _print_cv_summary(result: dict[str, Any], title: str) -> None:
    print(title)
    print("seed  fold  auroc   f1      epochs")
    for run in result["runs"]:
        auroc = run.metrics["auroc"]
        f1 = run.metrics["f1"]
        print(
            f"{run.base_seed:<5} {run.fold_index:<5} "
            f"{'n/a   ' if auroc is None else format(auroc, '.4f')} "
            f"{'n/a   ' if f1 is None else format(f1, '.4f')} "
            f"{run.epochs_trained}"
        )
    agg = result["aggregate"]
    print(
        "mean  auroc "
        + _fmt_mean_sd(agg["auroc"])
        + "  auprc "
        + _fmt_mean_sd(agg["auprc"])
        + "  f1 "
        + _fmt_mean_sd(agg["f1"])
    )


def cmd_synth(config: RunConfig, force: bool) -> int:
    if config.synth is None:
        raise ConfigError("synth requires a synth section in the config")
    out = _claim_dir(_require_out(config), force)
    try:
        cohort, defs = synth_cohort(config.synth)
    except DataError as exc:
        raise ConfigError(str(exc)) from exc
    write_matrix_tsv(out / "mut.tsv", cohort.patient_ids, cohort.gene_ids, cohort.mut)
    write_matrix_tsv(out / "cnv.tsv", cohort.patient_ids, cohort.gene_ids, cohort.cnv)
    write_labels_tsv(out / "labels.tsv", cohort.patient_ids, cohort.labels)
    write_gmt(out / "pathways.gmt", defs)
    spec_echo = json.dumps(dataclasses.asdict(config.synth), indent=2, sort_keys=True)
    (out / "synth_spec.json").write_text(spec_echo + "\n")
    emit("synth_done", out=str(out), patients=cohort.n_patients, genes=cohort.n_genes)
    print(f"wrote synthetic cohort to {out}")
    print(
        f"patients {cohort.n_patients}  genes {cohort.n_genes}  "
        f"pathways {len(defs)}  positives {int(cohort.labels.sum())}"
    )
    return EXIT_OK


def cmd_cv(config: RunConfig, force: bool) -> int:
    cohort, prior, enc = prepare_inputs(config)
    out = _claim_dir(_require_out(config), force)
    emit(
        "cv_start",
        out=str(out),
        seeds=list(config.seeds),
        n_folds=config.n_folds,
        jobs=config.jobs,
    )

    def progress(info: dict[str, Any]) -> None:
        emit(**info)

    result = tr.run_cv(
        cohort,
        prior,
        enc,
        config.model,
        config.train,
        seeds=config.seeds,
        n_folds=config.n_folds,
        jobs=config.jobs,
        out_dir=out,
        progress=progress,
    )
    echo = json.dumps(config.to_dict(), indent=2, sort_keys=True)
    (out / "run_config.json").write_text(echo + "\n")
    emit("cv_done", out=str(out), runs=len(result["runs"]))
    _print_cv_summary(result, f"cross-validation in {out}")
    return EXIT_OK


def cmd_ablate(config: RunConfig, force: bool) -> int:
    cohort, prior, enc = prepare_inputs(config)
    out = _claim_dir(_require_out(config), force)
    emit("ablate_start", out=str(out), seeds=list(config.seeds))
    result = tr.run_ablation(
        cohort,
        prior,
        enc,
        config.model,
        config.train,
        seeds=config.seeds,
        n_folds=config.n_folds,
        jobs=config.jobs,
        out_dir=out,
    )
    echo = json.dumps(config.to_dict(), indent=2, sort_keys=True)
    (out / "run_config.json").write_text(echo + "\n")
    emit("ablate_done", out=str(out))
    for modality, arm in result["arms"].items():
        _print_cv_summary(arm, f"modality {modality}")
    print(f"parameter count per arm: {result['comparison']['param_count']}")
    return EXIT_OK


def _load_fold_map(
    run_dir: Path, seeds: tuple[int, ...]
) -> dict[int, dict[int, Any]]:
    folds: dict[int, dict[int, Any]] = {}
    for seed in seeds:
        manifest = run_dir / f"folds_seed{seed}.json"
        if not manifest.is_file():
            raise TrainingError(f"missing fold manifest {manifest}")
        loaded = load_fold_manifest(manifest)
        folds[seed] = {fold.fold_index: fold for fold in loaded}
    return folds


def _heatmap_rows(ids: list[str], matrix: np.ndarray) -> list[str]:
    lines = ["pathway," + ",".join(ids)]
    for pid, row in zip(ids, matrix):
        lines.append(pid + "," + ",".join(repr(float(v)) for v in row))
    return lines


def write_heatmap_csv(path: Path, ids: list[str], matrix: np.ndarray) -> None:
    path.write_text("\n".join(_heatmap_rows(ids, matrix)) + "\n")


def write_signature_csv(
    path: Path,
    prior: PathwayPrior,
    gene_ids: list[str],
    alpha: dict[int, np.ndarray],
    ig: dict[int, np.ndarray],
) -> None:
    """Per-membership attention mass and per-gene attribution means."""
    lines = ["pathway,gene,alpha_pri,alpha_met,alpha_diff,ig_pri,ig_met,ig_diff"]
    for p, g in zip(prior.member_path, prior.member_gene):
        a0, a1 = float(alpha[0][p, g]), float(alpha[1][p, g])
        i0, i1 = float(ig[0][g]), float(ig[1][g])
        lines.append(
            f"{prior.pathway_ids[p]},{gene_ids[g]},"
            f"{a0!r},{a1!r},{(a1 - a0)!r},{i0!r},{i1!r},{(i1 - i0)!r}"
        )
    path.write_text("\n".join(lines) + "\n")


def _read_predictions(path: Path) -> dict[tuple[int, int], list[tuple[int, float]]]:
    groups: dict[tuple[int, int], list[tuple[int, float]]] = {}
    lines = path.read_text().splitlines()
    for line in lines[1:]:
        pid, fold, seed, score, label, pred = line.split(",")
        groups.setdefault((int(seed), int(fold)), []).append(
            (int(label), float(score))
        )
    return groups


def _bands_from_predictions(path: Path) -> dict[str, Any] | None:
    if not path.is_file():
        return None
    groups = _read_predictions(path)
    rocs, prs = [], []
    for rows in groups.values():
        labels = np.array([r[0] for r in rows])
        scores = np.array([r[1] for r in rows])
        if labels.min() == labels.max():
            continue
        rocs.append(roc_at_grid(labels, scores))
        prs.append(pr_at_grid(labels, scores))
    if not rocs:
        return None
    return {"roc": curve_band(rocs), "pr": curve_band(prs)}


def cmd_explain(config: RunConfig, run_dir_arg: str, force: bool) -> int:
    cohort, prior, enc = prepare_inputs(config)
    run_dir = Path(run_dir_arg)
    aggregate_path = run_dir / "metrics_aggregate.json"
    if not aggregate_path.is_file():
        raise TrainingError(f"{run_dir} does not look like a cv run directory")
    aggregate = json.loads(aggregate_path.read_text())
    seeds = tuple(aggregate["seeds"])
    folds = _load_fold_map(run_dir, seeds)
    out = Path(config.out) if config.out is not None else run_dir / "explain"
    _claim_dir(out, force)
    opts = config.interpret

    gene_tables: list[list[dict[str, Any]]] = []
    pathway_tables: list[list[dict[str, Any]]] = []
    deltas: list[np.ndarray] = []
    per_sample: list[np.ndarray] = []
    ct_labels: list[np.ndarray] = []
    alpha_runs: dict[int, list[np.ndarray]] = {0: [], 1: []}
    ig_runs: dict[int, list[np.ndarray]] = {0: [], 1: []}
    n_runs = 0
    for run in aggregate["runs"]:
        seed, fold_index = run["seed"], run["fold"]
        ckpt_path = run_dir / "runs" / f"seed{seed}_fold{fold_index}" / "checkpoint.bin"
        if not ckpt_path.is_file():
            raise TrainingError(f"missing checkpoint {ckpt_path}")
        ckpt = load_checkpoint(ckpt_path)
        fold = folds[seed][fold_index]
        baselines = None
        if opts.baselines > 0:
            baselines = itp.training_baselines(
                fold.train_idx, n=opts.baselines, seed=fold.seed
            )
        attr = itp.attribute_gradients(
            ckpt,
            cohort,
            prior,
            enc,
            idx=fold.test_idx,
            baselines=baselines,
            steps=opts.steps,
        )
        itp.save_attributions(out / f"attr_seed{seed}_fold{fold_index}.bin", attr)
        gene_tables.append(itp.rank_differential(attr, "gene", cohort.gene_ids))
        pathway_tables.append(
            itp.rank_differential(attr, "pathway", prior.pathway_ids)
        )
        deltas.append(attr.delta_pathway)
        ct = itp.crosstalk_matrices(ckpt, cohort, prior, enc, idx=fold.test_idx)
        per_sample.append(ct.per_sample)
        ct_labels.append(ct.labels)
        sig = itp.gene_signatures(ckpt, cohort, prior, enc, idx=fold.test_idx, attr=attr)
        for cls in (0, 1):
            alpha_runs[cls].append(sig.alpha_mean[cls])
            ig_runs[cls].append(sig.ig_mean[cls])
        n_runs += 1
        emit("explain_run_done", seed=seed, fold=fold_index)

    itp.write_rankings_csv(out / "rankings_genes.csv", itp.aggregate_rankings(gene_tables))
    itp.write_rankings_csv(
        out / "rankings_pathways.csv", itp.aggregate_rankings(pathway_tables)
    )

    pooled = np.concatenate(per_sample, axis=0)
    labels = np.concatenate(ct_labels, axis=0)
    mean_delta = np.mean(np.stack(deltas, axis=0), axis=0)
    class_means = {
        cls: itp.class_mean_stream(pooled, labels, cls) for cls in (0, 1)
    }
    write_heatmap_csv(out / "crosstalk_class0.csv", prior.pathway_ids, class_means[0])
    write_heatmap_csv(out / "crosstalk_class1.csv", prior.pathway_ids, class_means[1])
    write_heatmap_csv(
        out / "crosstalk_delta.csv",
        prior.pathway_ids,
        class_means[1] - class_means[0],
    )

    rewiring = itp.rewiring_test(pooled, labels, alpha=opts.alpha)
    pooled_ct = itp.CrosstalkResult(
        per_sample=pooled,
        labels=labels,
        class_mean=class_means,
        meta={"layer": "final", "heads": "mean"},
    )
    edges = itp.novel_edges(pooled_ct, prior, rewiring, mean_delta)
    itp.write_edge_table_csv(out / "edge_table.csv", edges)
    hubs = itp.hub_hierarchy(mean_delta, prior)
    itp.write_hub_json(out / "hubs.json", hubs)

    alpha_mean = {
        cls: np.mean(np.stack(alpha_runs[cls], axis=0), axis=0) for cls in (0, 1)
    }
    ig_mean = {
        cls: np.mean(np.stack(ig_runs[cls], axis=0), axis=0) for cls in (0, 1)
    }
    write_signature_csv(
        out / "signatures.csv", prior, cohort.gene_ids, alpha_mean, ig_mean
    )

    bands = _bands_from_predictions(run_dir / "predictions.csv")
    if bands is not None:
        tr.write_band_csv(out / "roc_band.csv", CURVE_GRID, *bands["roc"])
        tr.write_band_csv(out / "pr_band.csv", CURVE_GRID, *bands["pr"])

    summary = {
        "runs": n_runs,
        "alpha": opts.alpha,
        "significant_edges": int(rewiring.significant.sum()),
        "novel_edges": sum(e["new"] for e in edges),
        "hubs": [node["hub"] for node in hubs.hubs],
        "method": rewiring.method,
    }
    (out / "explain_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    emit("explain_done", out=str(out), runs=n_runs)
    print(f"interpretation artifacts in {out}")
    print(
        f"runs {n_runs}  significant edges {summary['significant_edges']}  "
        f"novel edges {summary['novel_edges']}  hubs {len(summary['hubs'])}"
    )
    return EXIT_OK


def cmd_report(run_dirs: list[str], out: str | None, force: bool) -> int:
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    rows = []
    for text in run_dirs:
        path = Path(text) / "metrics_aggregate.json"
        if not path.is_file():
            raise TrainingError(f"missing {path}")
        payload = json.loads(path.read_text())
        rows.append({"dir": text, "aggregate": payload["aggregate"],
                     "modality": payload.get("modality"),
                     "n_runs": len(payload.get("runs", []))})
    print("run directory summaries")
    for row in rows:
        agg = row["aggregate"]
        print(
            f"{row['dir']}  modality {row['modality']}  runs {row['n_runs']}  "
            f"auroc {_fmt_mean_sd(agg['auroc'])}  f1 {_fmt_mean_sd(agg['f1'])}"
        )
    if out is not None:
        out_path = Path(out)
        if out_path.exists() and not force:
            raise ConfigError(f"{out_path} exists; pass --force to overwrite")
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(
            json.dumps({"reports": rows}, indent=2, sort_keys=True) + "\n"
        )
        emit("report_done", out=str(out_path), runs=len(rows))
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration file")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument(
        "--seed-list", help="comma-separated replicate seeds (overrides config)"
    )
    parser.add_argument(
        "--jobs", type=int, help="parallel fold workers (overrides config)"
    )
    parser.add_argument(
        "--set",
        action="append",
        metavar="PATH=VALUE",
        help="dotted-path config override, e.g. model.embed_dim=32",
    )
    parser.add_argument(
        "--force", action="store_true", help="allow writing into a non-empty directory"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pathgt", description="pathway graph transformer pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("synth", "write a synthetic cohort to disk"),
        ("cv", "train the cross-validated protocol"),
        ("ablate", "run the input-modality ablation"),
        ("explain", "emit interpretation artifacts for a finished run"),
        ("report", "aggregate several run directories"),
    ):
        cmd = sub.add_parser(name, help=text)
        if name == "report":
            cmd.add_argument("run_dirs", nargs="*", help="cv output directories")
            cmd.add_argument("--out", help="summary JSON path")
            cmd.add_argument("--force", action="store_true")
        else:
            _add_common(cmd)
        if name == "explain":
            cmd.add_argument("--run", required=True, help="cv output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.run_dirs, args.out, args.force)
        config = load_run_config(args)
        if args.command == "synth":
            return cmd_synth(config, args.force)
        if args.command == "cv":
            return cmd_cv(config, args.force)
        if args.command == "ablate":
            return cmd_ablate(config, args.force)
        return cmd_explain(config, args.run, args.force)
    except ConfigError as exc:
        emit("error", kind="config", message=str(exc))
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - runtime failures end the process
        emit("error", kind="runtime", message=f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
