"""Cohort data handling: matrix IO, synthetic cohorts, normalization, folds.

A cohort is a pair of patient-by-gene matrices (binary somatic mutation
calls and continuous copy-number values) plus a binary label per patient.
Gene columns are shared between the two matrices and aligned by symbol.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent cohort input."""


@dataclass
class CohortMatrix:
    patient_ids: list[str]
    gene_ids: list[str]
    mut: np.ndarray  # (n_patients, n_genes) float64, values in {0, 1}
    cnv: np.ndarray  # (n_patients, n_genes) float64
    labels: np.ndarray  # (n_patients,) int64, values in {0, 1}

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)

    @property
    def n_genes(self) -> int:
        return len(self.gene_ids)

    def subset(self, idx) -> "CohortMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        return CohortMatrix(
            patient_ids=[self.patient_ids[i] for i in idx],
            gene_ids=list(self.gene_ids),
            mut=self.mut[idx].copy(),
            cnv=self.cnv[idx].copy(),
            labels=self.labels[idx].copy(),
        )


@dataclass
class NormStats:
    """Per-gene z-score parameters fit on one fold's training rows.

    ``std`` is the population standard deviation; the stabilizer ``eps``
    is added to it at apply time. ``source_fold`` records which fold the
    statistics came from so they are never applied across folds.
    """

    mean: np.ndarray
    std: np.ndarray
    eps: float
    gene_ids: list[str]
    source_fold: int


@dataclass
class SynthSpec:
    """Synthetic cohort layout.

    Pathways are consecutive windows of ``genes_per_pathway`` genes where
    adjacent windows share ``overlap_genes``. The first ``driver_pathways``
    windows carry the planted class signal. ``signal_in`` selects which
    modality carries it ("both", "cnv", or "mut").
    """

    n_patients: int = 600
    n_genes: int = 400
    n_pathways: int = 25
    genes_per_pathway: int = 16
    overlap_genes: int = 2
    effect_size: float = 3.0
    positive_fraction: float = 0.3
    driver_pathways: int = 2
    signal_in: str = "both"
    seed: int = 7


@dataclass
class FoldSplit:
    fold_index: int  # 1-based
    base_seed: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def seed(self) -> int:
        """Run seed for this fold: base seed plus 1-based fold index."""
        return self.base_seed + self.fold_index


BACKGROUND_MUTATION_RATE = 0.02
DRIVER_MUTATION_BOOST = 0.2


def _read_tsv_matrix(path, kind: str) -> tuple[list[str], list[str], np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DataError(f"{kind} matrix {path} is empty")
    header = lines[0].rstrip("\n").split("\t")
    genes = header[1:]
    if not genes:
        raise DataError(f"{kind} matrix {path} has no gene columns")
    if len(set(genes)) != len(genes):
        dup = sorted({g for g in genes if genes.count(g) > 1})[0]
        raise DataError(f"{kind} matrix {path} has duplicate gene column {dup!r}")
    patients = []
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != len(genes) + 1:
            raise DataError(
                f"{kind} matrix {path} line {ln}: expected {len(genes) + 1} fields, got {len(parts)}")
        patients.append(parts[0])
        try:
            rows.append([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise DataError(f"{kind} matrix {path} line {ln}: non-numeric value ({exc})") from None
    if not patients:
        raise DataError(f"{kind} matrix {path} has no patient rows")
    if len(set(patients)) != len(patients):
        dup = sorted({p for p in patients if patients.count(p) > 1})[0]
        raise DataError(f"{kind} matrix {path} has duplicate patient id {dup!r}")
    return patients, genes, np.asarray(rows, dtype=np.float64)


def _read_labels(path) -> dict[str, int]:
    out: dict[str, int] = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"labels file {path} line {ln}: expected 2 fields, got {len(parts)}")
        pid, raw = parts
        if ln == 1 and raw.strip() not in ("0", "1"):
            continue  # header line
        if raw.strip() not in ("0", "1"):
            raise DataError(f"labels file {path} line {ln}: label must be 0 or 1, got {raw!r}")
        if pid in out:
            raise DataError(f"labels file {path} has duplicate patient id {pid!r}")
        out[pid] = int(raw)
    if not out:
        raise DataError(f"labels file {path} has no label rows")
    return out


def load_cohort(mut_path, cnv_path, labels_path) -> CohortMatrix:
    """Load and align the two matrices and the label file.

    The mutation file fixes patient and gene order; the copy-number matrix
    is permuted to match. Any id-set mismatch between the three files is an
    error rather than an implicit intersection.
    """
    mut_pat, mut_genes, mut = _read_tsv_matrix(mut_path, "mutation")
    cnv_pat, cnv_genes, cnv = _read_tsv_matrix(cnv_path, "copy-number")
    labels_by_id = _read_labels(labels_path)

    bad = np.setdiff1d(np.unique(mut), [0.0, 1.0])
    if bad.size:
        raise DataError(f"non-binary mutation matrix: found value {bad[0]!r}")
    if not np.isfinite(cnv).all():
        raise DataError("copy-number matrix contains non-finite values")

    if set(mut_genes) != set(cnv_genes):
        missing = sorted(set(mut_genes) ^ set(cnv_genes))[0]
        raise DataError(f"gene columns differ between matrices (e.g. {missing!r})")
    if set(mut_pat) != set(cnv_pat):
        missing = sorted(set(mut_pat) ^ set(cnv_pat))[0]
        raise DataError(f"patient rows differ between matrices (e.g. {missing!r})")
    if set(mut_pat) != set(labels_by_id):
        missing = sorted(set(mut_pat) ^ set(labels_by_id))[0]
        raise DataError(f"patient ids differ between matrices and labels (e.g. {missing!r})")

    gene_pos = {g: i for i, g in enumerate(cnv_genes)}
    pat_pos = {p: i for i, p in enumerate(cnv_pat)}
    col_order = np.asarray([gene_pos[g] for g in mut_genes])
    row_order = np.asarray([pat_pos[p] for p in mut_pat])
    cnv = cnv[np.ix_(row_order, col_order)]

    labels = np.asarray([labels_by_id[p] for p in mut_pat], dtype=np.int64)
    return CohortMatrix(mut_pat, mut_genes, mut, cnv, labels)


def write_matrix_tsv(path, patient_ids, gene_ids, values) -> None:
    values = np.asarray(values)
    with open(path, "w") as fh:
        fh.write("patient_id\t" + "\t".join(gene_ids) + "\n")
        for pid, row in zip(patient_ids, values):
            fh.write(pid + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")


def write_labels_tsv(path, patient_ids, labels) -> None:
    with open(path, "w") as fh:
        fh.write("patient_id\tlabel\n")
        for pid, y in zip(patient_ids, labels):
            fh.write(f"{pid}\t{int(y)}\n")


def driver_mutation_rate(effect_size: float) -> float:
    """Mutation probability in driver genes for positive patients.

    Collapses to the background rate at zero effect size, which keeps the
    null cohort exchangeable between classes.
    """
    return BACKGROUND_MUTATION_RATE + DRIVER_MUTATION_BOOST * np.tanh(effect_size / 2.0)


def synth_cohort(spec: SynthSpec) -> tuple[CohortMatrix, list[tuple[str, str, list[str]]]]:
    """Generate a labeled cohort with planted driver-pathway signal.

    Returns the cohort and the pathway definitions as (id, description,
    gene symbol list) tuples, ready for GMT serialization.
    """
    if spec.signal_in not in ("both", "cnv", "mut"):
        raise DataError(f"signal_in must be both/cnv/mut, got {spec.signal_in!r}")
    if spec.genes_per_pathway < 15:
        raise DataError(f"genes_per_pathway must be at least 15, got {spec.genes_per_pathway}")
    if spec.overlap_genes >= spec.genes_per_pathway:
        raise DataError("overlap_genes must be smaller than genes_per_pathway")
    if spec.driver_pathways < 1 or spec.driver_pathways > spec.n_pathways:
        raise DataError("driver_pathways must be in [1, n_pathways]")
    if not (0.0 < spec.positive_fraction < 1.0):
        raise DataError("positive_fraction must be strictly between 0 and 1")
    stride = spec.genes_per_pathway - spec.overlap_genes
    needed = spec.n_pathways * stride + spec.overlap_genes
    if needed > spec.n_genes:
        raise DataError(
            f"infeasible layout: {spec.n_pathways} pathways of {spec.genes_per_pathway} genes "
            f"with overlap {spec.overlap_genes} need {needed} genes, have {spec.n_genes}")

    width = max(4, len(str(spec.n_genes)))
    gene_ids = [f"G{i + 1:0{width}d}" for i in range(spec.n_genes)]
    patient_ids = [f"P{i + 1:05d}" for i in range(spec.n_patients)]

    pathways = []
    for p in range(spec.n_pathways):
        start = p * stride
        members = gene_ids[start:start + spec.genes_per_pathway]
        pathways.append((f"PW{p + 1:03d}", f"synthetic pathway {p + 1}", members))

    rng = np.random.default_rng(spec.seed)
    n_pos = int(np.floor(spec.positive_fraction * spec.n_patients + 0.5))
    if n_pos == 0 or n_pos == spec.n_patients:
        raise DataError("positive_fraction leaves one class empty")
    labels = np.zeros(spec.n_patients, dtype=np.int64)
    labels[:n_pos] = 1
    labels = labels[rng.permutation(spec.n_patients)]

    driver_gene_idx = sorted({g for p in range(spec.driver_pathways)
                              for g in range(p * stride, p * stride + spec.genes_per_pathway)})
    driver_gene_idx = np.asarray(driver_gene_idx, dtype=np.int64)
    pos_rows = np.flatnonzero(labels == 1)

    mut = (rng.random((spec.n_patients, spec.n_genes)) < BACKGROUND_MUTATION_RATE).astype(np.float64)
    if spec.signal_in in ("both", "mut"):
        rate = driver_mutation_rate(spec.effect_size)
        block = (rng.random((pos_rows.size, driver_gene_idx.size)) < rate).astype(np.float64)
        mut[np.ix_(pos_rows, driver_gene_idx)] = block

    cnv = rng.standard_normal((spec.n_patients, spec.n_genes))
    if spec.signal_in in ("both", "cnv"):
        cnv[np.ix_(pos_rows, driver_gene_idx)] += spec.effect_size

    cohort = CohortMatrix(patient_ids, gene_ids, mut, cnv, labels)
    return cohort, pathways


def filter_genes(cohort: CohortMatrix, min_freq: float = 0.01,
                 cnv_alter_threshold: float = 0.5) -> CohortMatrix:
    """Drop genes altered in fewer than ``min_freq`` of patients.

    A gene is altered in a patient when it is mutated or its absolute raw
    copy-number value exceeds the threshold.
    """
    altered = (cohort.mut == 1.0) | (np.abs(cohort.cnv) > cnv_alter_threshold)
    freq = altered.mean(axis=0)
    keep = np.flatnonzero(freq >= min_freq)
    if keep.size == 0:
        raise DataError(f"no genes pass the {min_freq:g} alteration-frequency filter")
    return CohortMatrix(
        patient_ids=list(cohort.patient_ids),
        gene_ids=[cohort.gene_ids[i] for i in keep],
        mut=cohort.mut[:, keep].copy(),
        cnv=cohort.cnv[:, keep].copy(),
        labels=cohort.labels.copy(),
    )


def fit_norm_stats(cohort: CohortMatrix, train_idx, source_fold: int = 0,
                   eps: float = 1e-8) -> NormStats:
    """Per-gene copy-number mean and population standard deviation over the
    given training rows. Records which fold the statistics came from."""
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise DataError("norm stats need at least one training row")
    if train_idx.min() < 0 or train_idx.max() >= cohort.n_patients:
        raise DataError("train_idx outside the cohort")
    rows = cohort.cnv[train_idx].astype(np.float64)
    return NormStats(
        mean=rows.mean(axis=0),
        std=rows.std(axis=0, ddof=0),
        eps=eps,
        gene_ids=list(cohort.gene_ids),
        source_fold=source_fold,
    )


def apply_norm_rows(stats: NormStats, cnv: np.ndarray) -> np.ndarray:
    """Z-score copy-number rows already aligned to the statistics' genes."""
    cnv = np.asarray(cnv, dtype=np.float64)
    if cnv.shape[-1] != stats.mean.shape[0]:
        raise DataError(f"apply_norm: {cnv.shape[-1]} columns vs {stats.mean.shape[0]} statistics")
    return (cnv - stats.mean) / (stats.std + stats.eps)


def apply_norm(cohort: CohortMatrix, stats: NormStats) -> CohortMatrix:
    """Cohort copy with fold-normalized copy number; mutations untouched.

    The cohort's gene order must match the statistics exactly.
    """
    if cohort.gene_ids != stats.gene_ids:
        raise DataError("gene vocabulary does not match the normalization statistics")
    return CohortMatrix(
        patient_ids=list(cohort.patient_ids),
        gene_ids=list(cohort.gene_ids),
        mut=cohort.mut.copy(),
        cnv=apply_norm_rows(stats, cohort.cnv),
        labels=cohort.labels.copy(),
    )


def make_folds(labels: np.ndarray, n_folds: int = 5, base_seed: int = 42,
               val_fraction: float = 0.1) -> list[FoldSplit]:
    """Stratified cross-validation splits.

    Per class, patients are shuffled once with the base seed and dealt
    round-robin into test folds, so per-fold class counts differ by at most
    one. The validation set is then drawn per class from the non-test rows
    with a fold-specific seed (base seed + 1-based fold index).
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes = [0, 1]
    if n_folds < 2:
        raise DataError("need at least 2 folds")
    for c in classes:
        if int((labels == c).sum()) < n_folds:
            raise DataError(f"class {c} has fewer members than folds ({int((labels == c).sum())} < {n_folds})")

    rng = np.random.default_rng(base_seed)
    shuffled = {}
    fold_of = np.empty(labels.shape[0], dtype=np.int64)
    for c in classes:  # class 0 first: fixed draw order
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(members.size)]
        shuffled[c] = members
        fold_of[members] = np.arange(members.size) % n_folds

    folds = []
    for f in range(n_folds):
        fold_index = f + 1
        test = np.sort(np.flatnonzero(fold_of == f))
        vrng = np.random.default_rng(base_seed + fold_index)
        val_parts, train_parts = [], []
        for c in classes:
            rest = np.sort(np.asarray([i for i in np.flatnonzero(labels == c) if fold_of[i] != f]))
            n_val = int(np.floor(val_fraction * rest.size + 0.5))
            if n_val == 0:
                raise DataError(f"fold {fold_index}: validation split has no members of class {c}")
            picked = vrng.permutation(rest.size)[:n_val]
            mask = np.zeros(rest.size, dtype=bool)
            mask[picked] = True
            val_parts.append(rest[mask])
            train_parts.append(rest[~mask])
        folds.append(FoldSplit(
            fold_index=fold_index,
            base_seed=base_seed,
            train_idx=np.sort(np.concatenate(train_parts)),
            val_idx=np.sort(np.concatenate(val_parts)),
            test_idx=test,
        ))
    return folds


def save_fold_manifest(path, folds: list[FoldSplit]) -> None:
    payload = {
        "base_seed": folds[0].base_seed,
        "n_folds": len(folds),
        "folds": [
            {
                "fold_index": f.fold_index,
                "train": [int(i) for i in f.train_idx],
                "val": [int(i) for i in f.val_idx],
                "test": [int(i) for i in f.test_idx],
            }
            for f in folds
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_fold_manifest(path) -> list[FoldSplit]:
    payload = json.loads(Path(path).read_text())
    return [
        FoldSplit(
            fold_index=entry["fold_index"],
            base_seed=payload["base_seed"],
            train_idx=np.asarray(entry["train"], dtype=np.int64),
            val_idx=np.asarray(entry["val"], dtype=np.int64),
            test_idx=np.asarray(entry["test"], dtype=np.int64),
        )
        for entry in payload["folds"]
    ]
