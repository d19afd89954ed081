"""Training protocol: class-weighted losses, AdamW with decoupled decay,
per-fold training with early stopping on validation AUROC, and the
cross-validation and ablation drivers.

Every run is deterministic: parameter initialization derives from the
training seed plus the fold seed, each epoch gets its own generator for
shuffling and forward-pass stochastics, and BLAS threading is pinned to
one thread so results do not depend on worker-process count.
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics as mx
from . import model as md
from .cohort import (CohortMatrix, FoldSplit, apply_norm_rows, fit_norm_stats,
                     make_folds, save_fold_manifest)
from .graphprior import PathwayPrior, SpectralEncoding

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

MODALITIES = ("full", "mut_only", "cnv_only", "none")


class TrainingError(RuntimeError):
    """Aborted or misconfigured training run."""


@dataclass
class TrainSpec:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 16
    max_epochs: int = 200
    min_epochs: int = 50
    patience: int = 25
    clip_norm: float = 2.0
    loss_kind: str = "weighted_ce"  # or "focal"
    focal_gamma: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise TrainingError("lr and clip_norm must be positive, weight_decay non-negative")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be at least 1")
        if not (1 <= self.min_epochs <= self.max_epochs):
            raise TrainingError("need 1 <= min_epochs <= max_epochs")
        if self.patience < 1:
            raise TrainingError("patience must be at least 1")
        if self.loss_kind not in ("weighted_ce", "focal"):
            raise TrainingError(f"unknown loss_kind {self.loss_kind!r}")
        if self.focal_gamma < 0:
            raise TrainingError("focal_gamma must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainingError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss


def class_weights(labels) -> np.ndarray:
    """Inverse-frequency weights N / (C * n_c) for the two classes."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=2)
    if counts[0] == 0 or counts[1] == 0:
        raise TrainingError(f"cannot weight classes with counts {counts.tolist()}")
    return labels.size / (2.0 * counts.astype(np.float64))


def loss_and_grad(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray,
                  kind: str = "weighted_ce", focal_gamma: float = 2.0):
    """Batch-mean loss and its exact gradient with respect to the logits.

    ``weighted_ce`` is class-weighted cross entropy; ``focal`` additionally
    damps well-classified samples by (1 - p_true)^gamma. At gamma 0 the
    focal loss reduces to the weighted cross entropy exactly.
    """
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not np.isfinite(z).all():
        raise TrainingError("non-finite logits reached the loss")
    n = labels.size
    rows = np.arange(n)
    lse = np.logaddexp(z[:, 0], z[:, 1])
    logp = z - lse[:, None]
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    onehot[rows, labels] = 1.0
    wy = weights[labels]
    pt = p[rows, labels]
    logpt = logp[rows, labels]

    if kind == "weighted_ce":
        loss = float((-wy * logpt).mean())
        dlogits = wy[:, None] * (p - onehot) / n
        return loss, dlogits
    if kind != "focal":
        raise TrainingError(f"unknown loss kind {kind!r}")

    miss = 1.0 - pt
    loss = float((wy * miss ** focal_gamma * (-logpt)).mean())
    if focal_gamma == 0.0:
        factor = np.ones_like(pt)
    else:
        # at pt == 1 both terms vanish for any positive gamma
        damp = np.zeros_like(pt)
        nz = miss > 0
        damp[nz] = focal_gamma * miss[nz] ** (focal_gamma - 1.0) * pt[nz] * logpt[nz]
        factor = miss ** focal_gamma - damp
    dlogits = (wy * factor)[:, None] * (p - onehot) / n
    return loss, dlogits


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> "OptState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   step=0)


def clip_global_norm(grads: dict[str, np.ndarray], clip_norm: float) -> bool:
    """Scale all gradients in place so their joint norm is at most the
    clip value. Returns whether clipping fired."""
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    total = np.sqrt(total)
    if total <= clip_norm:
        return False
    scale = clip_norm / total
    for g in grads.values():
        g *= np.asarray(scale, dtype=g.dtype)
    return True


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               opt: OptState, spec: TrainSpec, decay_names: set[str]) -> bool:
    """One update: clip, update moments, apply bias-corrected step with
    decoupled weight decay on the decay set only. Returns the clip flag."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name}; step aborted")
    clipped = clip_global_norm(grads, spec.clip_norm)
    opt.step += 1
    t = opt.step
    bias1 = 1.0 - ADAM_BETA1 ** t
    bias2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = grads[name]
        m, v = opt.m[name], opt.v[name]
        m[...] = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v[...] = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        update = (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
        if name in decay_names:
            update = update + spec.weight_decay * p
        p[...] = p - np.asarray(spec.lr, dtype=p.dtype) * update
    return clipped


# ---------------------------------------------------------------------------
# per-fold training


@dataclass
class FoldResult:
    base_seed: int
    fold_index: int
    checkpoint: md.Checkpoint
    log_rows: list[dict]
    threshold: float
    best_epoch: int
    epochs_trained: int
    metrics: dict
    confusion: dict
    flags: dict
    test_labels: np.ndarray
    test_scores: np.ndarray
    predictions: list[dict] = field(default_factory=list)


def modality_inputs(mut: np.ndarray, cnv_norm: np.ndarray, modality: str):
    """Zero out input channels after normalization for ablation arms."""
    if modality not in MODALITIES:
        raise TrainingError(f"unknown modality {modality!r}")
    if modality == "full":
        return mut, cnv_norm
    if modality == "mut_only":
        return mut, np.zeros_like(cnv_norm)
    if modality == "cnv_only":
        return np.zeros_like(mut), cnv_norm
    return np.zeros_like(mut), np.zeros_like(cnv_norm)


def _snapshot(state: md.ModelState, opt: OptState):
    return ({k: v.copy() for k, v in state.params.items()},
            {k: v.copy() for k, v in state.bn.items()},
            {k: v.copy() for k, v in opt.m.items()},
            {k: v.copy() for k, v in opt.v.items()},
            opt.step)


def _restore(state: md.ModelState, opt: OptState, snap) -> None:
    params, bn, m, v, step = snap
    for k in state.params:
        state.params[k][...] = params[k]
    for k in state.bn:
        state.bn[k][...] = bn[k]
    for k in opt.m:
        opt.m[k][...] = m[k]
        opt.v[k][...] = v[k]
    opt.step = step


def _test_report(labels: np.ndarray, scores: np.ndarray, tau: float):
    single_class = labels.min() == labels.max() if labels.size else True
    a = mx.auroc(labels, scores) if not single_class else float("nan")
    ap = mx.auprc(labels, scores) if not single_class else float("nan")
    binary = mx.binary_metrics(labels, scores, tau)
    flags = {
        "single_class_test": bool(single_class),
        "zero_predicted_positives": binary.pop("zero_predicted_positives"),
    }
    metrics = {
        "auroc": None if np.isnan(a) else float(a),
        "auprc": None if np.isnan(ap) else float(ap),
        **binary,
    }
    return metrics, mx.confusion_at(labels, scores, tau), flags


def train_fold(cohort: CohortMatrix, prior: PathwayPrior, enc: SpectralEncoding,
               config: md.ModelConfig, spec: TrainSpec, fold: FoldSplit,
               modality: str = "full") -> FoldResult:
    """Train one fold to the early-stopping criterion and score its test set.

    The best-validation-AUROC epoch is kept: parameters, batch-norm
    statistics, and optimizer moments are all restored from that epoch
    before threshold calibration and test evaluation.
    """
    spec.validate()
    config.validate()
    with threadpool_limits(limits=1):
        return _train_fold_body(cohort, prior, enc, config, spec, fold, modality)


def _train_fold_body(cohort, prior, enc, config, spec, fold, modality):
    labels = cohort.labels
    val_labels = labels[fold.val_idx]
    if val_labels.size == 0 or val_labels.min() == val_labels.max():
        raise TrainingError(
            f"fold {fold.fold_index}: validation split does not contain both classes")

    stats = fit_norm_stats(cohort, fold.train_idx, source_fold=fold.fold_index)
    cnv_norm = apply_norm_rows(stats, cohort.cnv)
    mut, cnv = modality_inputs(cohort.mut, cnv_norm, modality)

    effective_seed = spec.seed + fold.seed
    state = md.init_state(config, cohort.n_genes, prior.n_pathways,
                          seed=effective_seed, enc=enc)
    opt = OptState.fresh(state.params)
    weights = class_weights(labels[fold.train_idx])
    decay_names = md.decayed_params(config, cohort.n_genes, prior.n_pathways)

    best_auroc = -np.inf
    best_epoch = 0
    best_snap = None
    log_rows: list[dict] = []
    epoch = 0
    for epoch in range(1, spec.max_epochs + 1):
        rng = np.random.default_rng(effective_seed + epoch)
        order = fold.train_idx[rng.permutation(fold.train_idx.size)]
        loss_sum = 0.0
        n_seen = 0
        clipped_batches = 0
        n_batches = 0
        for start in range(0, order.size, spec.batch_size):
            sel = order[start:start + spec.batch_size]
            trace = md.forward(state, md.Batch(mut[sel], cnv[sel]), prior, enc,
                               training=True, rng=rng)
            loss, dlogits = loss_and_grad(trace.logits.data, labels[sel], weights,
                                          kind=spec.loss_kind,
                                          focal_gamma=spec.focal_gamma)
            grads = md.backward(state, trace, dlogits)
            clipped_batches += adamw_step(state.params, grads, opt, spec, decay_names)
            loss_sum += loss * sel.size
            n_seen += sel.size
            n_batches += 1

        val_scores = md.eval_scores(state, mut[fold.val_idx], cnv[fold.val_idx], prior, enc)
        val_auroc = mx.auroc(val_labels, val_scores)
        log_rows.append({
            "epoch": epoch,
            "train_loss": loss_sum / n_seen,
            "val_auroc": float(val_auroc),
            "lr": spec.lr,
            "clipped_fraction": clipped_batches / n_batches,
        })
        if val_auroc > best_auroc:
            best_auroc = val_auroc
            best_epoch = epoch
            best_snap = _snapshot(state, opt)
        if epoch >= spec.min_epochs and epoch - best_epoch >= spec.patience:
            break

    _restore(state, opt, best_snap)
    val_scores = md.eval_scores(state, mut[fold.val_idx], cnv[fold.val_idx], prior, enc)
    tau, _val_f1 = mx.calibrate_threshold(val_labels, val_scores)

    test_scores = md.eval_scores(state, mut[fold.test_idx], cnv[fold.test_idx], prior, enc)
    test_labels = labels[fold.test_idx]
    metrics, confusion, flags = _test_report(test_labels, test_scores, tau)

    ckpt = md.Checkpoint(
        config=config,
        n_genes=cohort.n_genes,
        n_pathways=prior.n_pathways,
        params=state.params,
        bn=state.bn,
        opt_m=opt.m,
        opt_v=opt.v,
        step=opt.step,
        norm_stats=stats,
        meta={
            "base_seed": fold.base_seed,
            "fold_index": fold.fold_index,
            "spec_seed": spec.seed,
            "modality": modality,
            "tau": tau,
            "best_epoch": best_epoch,
            "epochs_trained": epoch,
        },
    )
    predictions = [
        {"patient_id": cohort.patient_ids[i], "fold": fold.fold_index,
         "seed": fold.base_seed, "score": float(s), "label": int(labels[i]),
         "predicted": int(s >= tau)}
        for i, s in zip(fold.test_idx, test_scores)
    ]
    return FoldResult(
        base_seed=fold.base_seed,
        fold_index=fold.fold_index,
        checkpoint=ckpt,
        log_rows=log_rows,
        threshold=tau,
        best_epoch=best_epoch,
        epochs_trained=epoch,
        metrics=metrics,
        confusion=confusion,
        flags=flags,
        test_labels=test_labels,
        test_scores=test_scores,
        predictions=predictions,
    )


# ---------------------------------------------------------------------------
# checkpoint-driven evaluation


def checkpoint_scores(ckpt: md.Checkpoint, cohort: CohortMatrix,
                      prior: PathwayPrior, enc: SpectralEncoding,
                      idx=None) -> np.ndarray:
    """Class-1 probabilities for raw cohort rows, using the checkpoint's
    own normalization statistics and input modality."""
    if ckpt.norm_stats is not None and cohort.gene_ids != ckpt.norm_stats.gene_ids:
        raise TrainingError("cohort genes do not match the checkpoint normalization")
    idx = np.arange(cohort.n_patients) if idx is None else np.asarray(idx, dtype=np.int64)
    state = md.state_from_checkpoint(ckpt)
    enc.proj_w = state.params["pe.w"]
    enc.proj_b = state.params["pe.b"]
    cnv = apply_norm_rows(ckpt.norm_stats, cohort.cnv[idx]) if ckpt.norm_stats is not None \
        else cohort.cnv[idx]
    mut, cnv = modality_inputs(cohort.mut[idx], cnv, ckpt.meta.get("modality", "full"))
    with threadpool_limits(limits=1):
        return md.eval_scores(state, mut, cnv, prior, enc)


def evaluate(ckpt: md.Checkpoint, cohort: CohortMatrix, prior: PathwayPrior,
             enc: SpectralEncoding, idx=None, tau: float | None = None) -> dict:
    """Metrics for a checkpoint on raw cohort rows.

    A single-class subset leaves the ranking metrics as undefined markers;
    thresholded metrics are still reported.
    """
    idx = np.arange(cohort.n_patients) if idx is None else np.asarray(idx, dtype=np.int64)
    scores = checkpoint_scores(ckpt, cohort, prior, enc, idx)
    tau = float(ckpt.meta["tau"]) if tau is None else float(tau)
    metrics, confusion, flags = _test_report(cohort.labels[idx], scores, tau)
    return {"metrics": metrics, "confusion": confusion, "flags": flags,
            "threshold": tau, "scores": scores}


# ---------------------------------------------------------------------------
# cross-validation protocol


def _train_task(args):
    cohort, prior, enc, config, spec, fold, modality = args
    return train_fold(cohort, prior, enc, config, spec, fold, modality)


def run_cv(cohort: CohortMatrix, prior: PathwayPrior, enc: SpectralEncoding,
           config: md.ModelConfig, spec: TrainSpec, seeds=(42, 123),
           n_folds: int = 5, jobs: int = 1, out_dir=None,
           modality: str = "full", progress=None) -> dict:
    """Full protocol: stratified folds per seed, one trained model per
    (seed, fold) pair, run metrics plus pooled aggregate and curve bands.

    Results are ordered by (seed, fold) regardless of worker count, so the
    written artifacts are identical for any ``jobs``.
    """
    fold_map = {s: make_folds(cohort.labels, n_folds=n_folds, base_seed=s) for s in seeds}
    tasks = [(cohort, prior, enc, config, spec, fold, modality)
             for s in seeds for fold in fold_map[s]]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_task, tasks))
    else:
        results = []
        for task in tasks:
            results.append(_train_task(task))
            if progress is not None:
                r = results[-1]
                progress({"event": "fold_done", "seed": r.base_seed,
                          "fold": r.fold_index, "auroc": r.metrics["auroc"],
                          "epochs": r.epochs_trained})
    results.sort(key=lambda r: (r.base_seed, r.fold_index))

    metric_names = ["auroc", "auprc", "accuracy", "precision", "recall",
                    "specificity", "f1"]
    aggregate = {
        name: mx.mean_sd([r.metrics[name] if r.metrics[name] is not None else float("nan")
                          for r in results])
        for name in metric_names
    }
    roc_runs, pr_runs = [], []
    for r in results:
        if not r.flags["single_class_test"]:
            roc_runs.append(mx.roc_at_grid(r.test_labels, r.test_scores))
            pr_runs.append(mx.pr_at_grid(r.test_labels, r.test_scores))
    bands = {}
    if roc_runs:
        bands["roc"] = mx.curve_band(roc_runs)
        bands["pr"] = mx.curve_band(pr_runs)

    out = {"runs": results, "aggregate": aggregate, "bands": bands,
           "seeds": list(seeds), "n_folds": n_folds, "modality": modality}
    if out_dir is not None:
        write_cv_outputs(Path(out_dir), out, fold_map)
    return out


def run_ablation(cohort: CohortMatrix, prior: PathwayPrior, enc: SpectralEncoding,
                 config: md.ModelConfig, spec: TrainSpec, seeds=(42, 123),
                 n_folds: int = 5, jobs: int = 1, out_dir=None,
                 modalities=("full", "mut_only", "cnv_only"), progress=None) -> dict:
    """Input-modality ablation over identical folds and architectures.

    Every arm trains the same parameter count; arms differ only in which
    input channel is zeroed after normalization.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    arms = {}
    for modality in modalities:
        arms[modality] = run_cv(
            cohort, prior, enc, config, spec, seeds=seeds, n_folds=n_folds,
            jobs=jobs, out_dir=(out_dir / modality if out_dir else None),
            modality=modality, progress=progress)
    n_params = md.count_params(config, cohort.n_genes, prior.n_pathways)
    comparison = {
        "param_count": {m: n_params for m in modalities},
        "auroc": {m: arms[m]["aggregate"]["auroc"] for m in modalities},
    }
    if out_dir is not None:
        _write_json(out_dir / "ablation_summary.json", comparison)
    return {"arms": arms, "comparison": comparison}


# ---------------------------------------------------------------------------
# artifact writers


def _fmt(x) -> str:
    return repr(float(x))


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def run_metrics_payload(r: FoldResult) -> dict:
    return {
        "seed": r.base_seed,
        "fold": r.fold_index,
        "threshold": r.threshold,
        "best_epoch": r.best_epoch,
        "epochs_trained": r.epochs_trained,
        "metrics": r.metrics,
        "confusion": r.confusion,
        "flags": r.flags,
    }


def write_train_log_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_auroc,lr,clipped_fraction\n")
        for row in rows:
            fh.write(",".join([str(row["epoch"]), _fmt(row["train_loss"]),
                               _fmt(row["val_auroc"]), _fmt(row["lr"]),
                               _fmt(row["clipped_fraction"])]) + "\n")


def write_predictions_csv(path: Path, results: list[FoldResult]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("patient_id,fold,seed,score,label,predicted\n")
        for r in results:
            for row in r.predictions:
                fh.write(",".join([row["patient_id"], str(row["fold"]), str(row["seed"]),
                                   _fmt(row["score"]), str(row["label"]),
                                   str(row["predicted"])]) + "\n")


def write_band_csv(path: Path, grid: np.ndarray, mean: np.ndarray, sd: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("grid,mean,sd\n")
        for g, m, s in zip(grid, mean, sd):
            fh.write(f"{_fmt(g)},{_fmt(m)},{_fmt(s)}\n")


def write_cv_outputs(out_dir: Path, cv: dict, fold_map: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for seed, folds in fold_map.items():
        save_fold_manifest(out_dir / f"folds_seed{seed}.json", folds)
    for r in cv["runs"]:
        run_dir = out_dir / "runs" / f"seed{r.base_seed}_fold{r.fold_index}"
        run_dir.mkdir(parents=True, exist_ok=True)
        md.save_checkpoint(run_dir / "checkpoint.bin", r.checkpoint)
        write_train_log_csv(run_dir / "train_log.csv", r.log_rows)
        _write_json(run_dir / "metrics.json", run_metrics_payload(r))
    write_predictions_csv(out_dir / "predictions.csv", cv["runs"])
    _write_json(out_dir / "metrics_aggregate.json", {
        "aggregate": cv["aggregate"],
        "modality": cv["modality"],
        "n_folds": cv["n_folds"],
        "seeds": cv["seeds"],
        "runs": [run_metrics_payload(r) for r in cv["runs"]],
    })
    if "roc" in cv["bands"]:
        write_band_csv(out_dir / "roc_band.csv", mx.CURVE_GRID, *cv["bands"]["roc"])
        write_band_csv(out_dir / "pr_band.csv", mx.CURVE_GRID, *cv["bands"]["pr"])
