"""Pathway graph prior: membership pooling layout, overlap adjacency,
and the spectral positional encoding over the pathway graph.

The prior is patient-independent: it is built once per cohort from the
filtered gene vocabulary and reused across folds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import serialize

DEGREE_EPS = 1e-8
ADJ_NORM_EPS = 1e-8


class GraphError(ValueError):
    """Malformed pathway definitions or prior construction failure."""


@dataclass
class PathwayPrior:
    """Pathway membership with overlap adjacency and a flat pooling layout.

    ``member_gene``/``member_path`` list every (pathway, gene) membership
    pair in pathway-major order with gene indices ascending inside each
    pathway; ``path_start``/``path_len`` delimit each pathway's slice.
    """

    pathway_ids: list[str]
    memberships: list[np.ndarray]  # per pathway, sorted gene indices
    n_genes: int
    adjacency: np.ndarray  # (P, P) symmetric, zero diagonal, max-normalized
    mode: str
    min_genes: int
    max_raw_jaccard: float

    member_gene: np.ndarray = None  # (M,)
    member_path: np.ndarray = None  # (M,)
    path_start: np.ndarray = None  # (P,)
    path_len: np.ndarray = None  # (P,)

    # scatter plan: membership rows regrouped by gene for gradient scatter-add
    scatter_order: np.ndarray = None
    scatter_start: np.ndarray = None
    scatter_gene: np.ndarray = None

    @property
    def n_pathways(self) -> int:
        return len(self.pathway_ids)

    @property
    def n_members(self) -> int:
        return int(self.member_gene.size)

    def membership_matrix(self) -> np.ndarray:
        """Dense (P, G) binary membership indicator, for tests and export."""
        m = np.zeros((self.n_pathways, self.n_genes), dtype=np.float64)
        for p, genes in enumerate(self.memberships):
            m[p, genes] = 1.0
        return m


def parse_gmt(path) -> list[tuple[str, str, list[str]]]:
    """Read GMT lines: pathway id, description, then member gene symbols."""
    entries = []
    seen = set()
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) < 3:
            raise GraphError(f"GMT {path} line {ln}: expected id, description and at least one gene")
        pid, desc, genes = parts[0], parts[1], parts[2:]
        if pid in seen:
            raise GraphError(f"GMT {path} line {ln}: duplicate pathway id {pid!r}")
        seen.add(pid)
        entries.append((pid, desc, genes))
    if not entries:
        raise GraphError(f"GMT {path} contains no pathways")
    return entries


def write_gmt(path, entries) -> None:
    with open(path, "w") as fh:
        for pid, desc, genes in entries:
            fh.write("\t".join([pid, desc, *genes]) + "\n")


def map_memberships(entries, gene_ids) -> list[tuple[str, np.ndarray]]:
    """Resolve gene symbols against a vocabulary, dropping unknown symbols.

    Duplicate symbols within one pathway collapse to one membership.
    """
    pos = {g: i for i, g in enumerate(gene_ids)}
    out = []
    for pid, _desc, genes in entries:
        idx = sorted({pos[g] for g in genes if g in pos})
        out.append((pid, np.asarray(idx, dtype=np.int64)))
    return out


def build_prior(memberships: list[tuple[str, np.ndarray]], n_genes: int,
                mode: str = "jaccard", min_genes: int = 15) -> PathwayPrior:
    """Build the pathway prior from index-mapped memberships.

    Pathways with fewer than ``min_genes`` member genes are dropped.
    In ``jaccard`` mode the adjacency is the pairwise Jaccard overlap with
    zero diagonal, symmetrized and scaled by its maximum; ``full`` mode is
    the complete graph.
    """
    if mode not in ("jaccard", "full"):
        raise GraphError(f"unknown prior mode {mode!r}")
    kept_ids, kept_sets = [], []
    for pid, idx in memberships:
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n_genes):
            raise GraphError(f"pathway {pid!r} has gene index outside the vocabulary")
        if idx.size >= min_genes:
            kept_ids.append(pid)
            kept_sets.append(np.unique(idx))
    P = len(kept_ids)
    if P < 2:
        raise GraphError(f"only {P} pathways survive the min_genes={min_genes} filter; need at least 2")

    indicator = np.zeros((P, n_genes), dtype=np.float64)
    for p, idx in enumerate(kept_sets):
        indicator[p, idx] = 1.0
    inter = indicator @ indicator.T
    sizes = indicator.sum(axis=1)
    union = sizes[:, None] + sizes[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = np.where(union > 0, inter / union, 0.0)
    np.fill_diagonal(raw, 0.0)
    max_raw = float(raw.max())

    if mode == "full":
        adj = np.ones((P, P), dtype=np.float64) - np.eye(P)
    else:
        adj = 0.5 * (raw + raw.T)
        adj = adj / (adj.max() + ADJ_NORM_EPS)

    member_gene = np.concatenate(kept_sets) if kept_sets else np.empty(0, dtype=np.int64)
    path_len = np.asarray([s.size for s in kept_sets], dtype=np.int64)
    path_start = np.concatenate(([0], np.cumsum(path_len)[:-1]))
    member_path = np.repeat(np.arange(P, dtype=np.int64), path_len)

    order = np.argsort(member_gene, kind="stable")
    sorted_gene = member_gene[order]
    starts = np.flatnonzero(np.concatenate(([True], sorted_gene[1:] != sorted_gene[:-1])))

    return PathwayPrior(
        pathway_ids=kept_ids,
        memberships=kept_sets,
        n_genes=n_genes,
        adjacency=adj,
        mode=mode,
        min_genes=min_genes,
        max_raw_jaccard=max_raw,
        member_gene=member_gene,
        member_path=member_path,
        path_start=path_start,
        path_len=path_len,
        scatter_order=order,
        scatter_start=starts,
        scatter_gene=sorted_gene[starts],
    )


def save_prior(csv_path, prior: PathwayPrior) -> None:
    """Adjacency as CSV plus a JSON sidecar with construction parameters."""
    with open(csv_path, "w") as fh:
        fh.write("pathway_id," + ",".join(prior.pathway_ids) + "\n")
        for pid, row in zip(prior.pathway_ids, prior.adjacency):
            fh.write(pid + "," + ",".join(repr(float(v)) for v in row) + "\n")
    sidecar = Path(str(csv_path) + ".json")
    sidecar.write_text(json.dumps({
        "mode": prior.mode,
        "min_genes": prior.min_genes,
        "max_raw_jaccard": prior.max_raw_jaccard,
    }, indent=2, sort_keys=True) + "\n")


def load_prior_adjacency(csv_path) -> tuple[list[str], np.ndarray, dict]:
    lines = Path(csv_path).read_text().splitlines()
    ids = lines[0].split(",")[1:]
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append([float(v) for v in parts[1:]])
    adj = np.asarray(rows, dtype=np.float64)
    meta = json.loads(Path(str(csv_path) + ".json").read_text())
    return ids, adj, meta


# ---------------------------------------------------------------------------
# spectral encoding


@dataclass
class SpectralEncoding:
    """Leading Laplacian eigenvectors plus a normalized degree channel.

    The projection to token width lives here too: ``proj_w``/``proj_b`` are
    registered by the model at initialization (they are aliases of the live
    parameter arrays, so training updates them in place).
    """

    eigvecs: np.ndarray  # (P, k) ascending eigenvalue order, f64
    eigvals: np.ndarray  # (k,)
    degree_feature: np.ndarray  # (P,) degree / (P + eps)
    k: int
    n_pathways: int
    proj_w: np.ndarray | None = None  # (k+1, d)
    proj_b: np.ndarray | None = None  # (d,)


def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-10,
                max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray, int]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues (unsorted), eigenvectors as columns, and the number
    of sweeps used. Convergence is the largest absolute off-diagonal entry
    falling below ``tol``; exceeding ``max_sweeps`` raises.
    """
    A = np.array(matrix, dtype=np.float64, copy=True)
    n = A.shape[0]
    if A.shape != (n, n):
        raise GraphError("jacobi_eigh expects a square matrix")
    if n == 1:
        return A.diagonal().copy(), np.eye(1), 0
    if not np.allclose(A, A.T, atol=1e-12):
        raise GraphError("jacobi_eigh expects a symmetric matrix")
    V = np.eye(n)
    strict = ~np.eye(n, dtype=bool)
    for sweep in range(max_sweeps):
        if np.abs(A[strict]).max() < tol:
            return A.diagonal().copy(), V, sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if t == 0.0:  # theta == 0 gives sign 0; rotate by 45 degrees
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p, row_q = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    if np.abs(A[strict]).max() < tol:
        return A.diagonal().copy(), V, max_sweeps
    raise RuntimeError(
        f"jacobi_eigh did not converge in {max_sweeps} sweeps "
        f"(residual {np.abs(A[strict]).max():.3e})")


def _canonical_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip each eigenvector so its first non-negligible entry is positive."""
    out = vecs.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-9)
        if nz.size and col[nz[0]] < 0:
            out[:, j] = -col
    return out


def laplacian_encoding(prior: PathwayPrior, k: int) -> SpectralEncoding:
    """First ``k`` eigenvectors of the symmetric normalized Laplacian.

    Degrees are clamped below at 1e-8 before the inverse square root, so
    isolated pathways are handled without special cases.
    """
    P = prior.n_pathways
    if not (0 < k < P):
        raise GraphError(f"k must satisfy 0 < k < {P}, got {k}")
    A = prior.adjacency
    deg = A.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(np.maximum(deg, DEGREE_EPS))
    lap = np.eye(P) - (inv_sqrt[:, None] * A) * inv_sqrt[None, :]
    lap = 0.5 * (lap + lap.T)  # keep exactly symmetric against rounding
    eigvals, eigvecs, _ = jacobi_eigh(lap)
    order = np.argsort(eigvals, kind="stable")
    eigvals = eigvals[order][:k]
    eigvecs = _canonical_signs(eigvecs[:, order][:, :k])
    return SpectralEncoding(
        eigvecs=eigvecs,
        eigvals=eigvals,
        degree_feature=deg / (P + DEGREE_EPS),
        k=k,
        n_pathways=P,
    )


def spectral_features(enc: SpectralEncoding, training: bool = False,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """(P, k+1) feature block: eigenvectors then the degree channel.

    During training each eigenvector column is multiplied by an independent
    random sign, which makes the downstream projection invariant to the
    arbitrary eigenvector orientation.
    """
    vecs = enc.eigvecs
    if training:
        if rng is None:
            raise GraphError("training-mode spectral features need an rng for sign flips")
        flips = rng.integers(0, 2, size=enc.k) * 2 - 1
        vecs = vecs * flips[None, :]
    return np.concatenate([vecs, enc.degree_feature[:, None]], axis=1)


def positional_features(enc: SpectralEncoding, training: bool = False,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Project spectral features to token width: (P, k+1) @ (k+1, d) + bias.

    Requires the projection to be registered on the encoding (the model
    does this at initialization and on checkpoint load).
    """
    if enc.proj_w is None or enc.proj_b is None:
        raise GraphError("positional projection not registered on this encoding")
    feats = spectral_features(enc, training=training, rng=rng)
    return feats @ enc.proj_w + enc.proj_b


def save_spectral(path, enc: SpectralEncoding) -> None:
    serialize.save_tensors(path, {
        "eigvecs": enc.eigvecs.astype(np.float64),
        "eigvals": enc.eigvals.astype(np.float64),
        "degree_feature": enc.degree_feature.astype(np.float64),
    }, meta={"P": enc.n_pathways, "k": enc.k})


def load_spectral(path) -> SpectralEncoding:
    tensors, meta = serialize.load_tensors(path)
    return SpectralEncoding(
        eigvecs=tensors["eigvecs"],
        eigvals=tensors["eigvals"],
        degree_feature=tensors["degree_feature"],
        k=int(meta["k"]),
        n_pathways=int(meta["P"]),
    )
