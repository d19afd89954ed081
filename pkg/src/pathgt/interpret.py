"""Post-hoc interpretation of trained checkpoints: integrated-gradient
attributions per gene and pathway, class-differential rankings, pathway
crosstalk rewiring with FDR control, novel-edge detection, hub hierarchy
extraction, and attention-based gene signatures.

Everything here is a pure function of an eval-mode checkpoint plus data.
Class means are accumulated sample-by-sample in float64 in cohort order,
so an independent streaming pass reproduces them bit-exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erfc

from . import model as md
from .cohort import CohortMatrix, apply_norm_rows
from .graphprior import PathwayPrior, SpectralEncoding
from .serialize import load_tensors, save_tensors
from .training import modality_inputs

PERM_BLOCK = 128


class InterpretError(RuntimeError):
    """Attribution or edge analysis failed or was misconfigured."""


def class_mean_stream(values: np.ndarray, labels: np.ndarray, cls: int) -> np.ndarray:
    """Mean over samples of one class, accumulated sequentially in float64."""
    rows = np.flatnonzero(np.asarray(labels) == cls)
    if rows.size == 0:
        raise InterpretError(f"no samples of class {cls}")
    acc = np.zeros(values.shape[1:], dtype=np.float64)
    for i in rows:
        acc += values[i]
    return acc / rows.size


def _prepare(ckpt: md.Checkpoint, cohort: CohortMatrix, prior: PathwayPrior,
             enc: SpectralEncoding, idx):
    """Model state plus normalized, modality-masked inputs for raw rows."""
    if ckpt.norm_stats is not None and cohort.gene_ids != ckpt.norm_stats.gene_ids:
        raise InterpretError("cohort genes do not match the checkpoint normalization")
    idx = np.arange(cohort.n_patients) if idx is None else np.asarray(idx, dtype=np.int64)
    state = md.state_from_checkpoint(ckpt)
    enc.proj_w = state.params["pe.w"]
    enc.proj_b = state.params["pe.b"]
    cnv = apply_norm_rows(ckpt.norm_stats, cohort.cnv[idx]) if ckpt.norm_stats is not None \
        else cohort.cnv[idx]
    mut, cnv = modality_inputs(cohort.mut[idx], cnv, ckpt.meta.get("modality", "full"))
    return state, mut, cnv, cohort.labels[idx], idx


# ---------------------------------------------------------------------------
# integrated gradients


def integrated_gradients_fn(grad_fn, x: np.ndarray, baseline: np.ndarray,
                            steps: int) -> np.ndarray:
    """Midpoint-rule path integral of ``grad_fn`` from baseline to x.

    For a linear score the integrand is constant, so any step count gives
    the exact attribution (x - baseline) * gradient.
    """
    if steps < 1:
        raise InterpretError(f"steps must be at least 1, got {steps}")
    x = np.asarray(x, dtype=np.float64)
    baseline = np.broadcast_to(np.asarray(baseline, dtype=np.float64), x.shape)
    diff = x - baseline
    acc = np.zeros_like(x)
    for s in range(1, steps + 1):
        t = (s - 0.5) / steps
        acc += np.asarray(grad_fn(baseline + t * diff), dtype=np.float64)
    return diff * (acc / steps)


def _logit_grads(state: md.ModelState, points: np.ndarray, prior: PathwayPrior,
                 enc: SpectralEncoding) -> np.ndarray:
    """Gradient of the class-1 logit with respect to every input coordinate."""
    n = points.shape[0]
    grads = np.empty_like(points)
    start = 0
    for trace, count in md.iter_eval_chunks(state, points[..., 0], points[..., 1], prior, enc):
        seed = np.zeros(trace.logits.data.shape, dtype=np.float32)
        seed[:count, 1] = 1.0
        md.backward(state, trace, seed)
        g = trace.inputs.grad[:count]
        if not np.isfinite(g).all():
            raise InterpretError("non-finite input gradient during attribution")
        grads[start:start + count] = g
        start += count
    assert start == n
    return grads


def pathway_means(phi_gene: np.ndarray, prior: PathwayPrior) -> np.ndarray:
    """Member-gene mean of per-gene attributions, exactly (1/|G_p|)*sum.

    Members are added one at a time in index order, so the result is
    reproducible by any plain accumulation over the same gene lists.
    """
    phi = np.asarray(phi_gene, dtype=np.float64)
    out = np.empty(phi.shape[:-1] + (prior.n_pathways,), dtype=np.float64)
    for p, genes in enumerate(prior.memberships):
        acc = np.zeros(phi.shape[:-1], dtype=np.float64)
        for g in genes:
            acc += phi[..., g]
        out[..., p] = acc / genes.size
    return out


@dataclass
class AttributionSet:
    """Signed per-sample attributions with class differentials.

    ``phi_gene`` sums the mutation and copy-number channels per gene;
    ``phi_pathway`` is the member mean. The differentials are class-1 mean
    minus class-0 mean and require both classes among the samples.
    """

    phi_gene: np.ndarray       # (B, G)
    phi_pathway: np.ndarray    # (B, P)
    labels: np.ndarray         # (B,)
    completeness_gap: np.ndarray  # (B,) sum of attributions minus logit gap
    logit_diff: np.ndarray     # (B,) f(x) - mean over baselines of f(baseline)
    provenance: dict = field(default_factory=dict)

    def _delta(self, values: np.ndarray) -> np.ndarray:
        return class_mean_stream(values, self.labels, 1) - class_mean_stream(values, self.labels, 0)

    @property
    def delta_gene(self) -> np.ndarray:
        return self._delta(self.phi_gene)

    @property
    def delta_pathway(self) -> np.ndarray:
        return self._delta(self.phi_pathway)


def training_baselines(train_idx, n: int = 32, seed: int = 0) -> np.ndarray:
    """Cohort row indices to use as reference baselines, drawn without
    replacement with the fold seed."""
    train_idx = np.asarray(train_idx, dtype=np.int64)
    rng = np.random.default_rng(seed)
    take = min(n, train_idx.size)
    return np.sort(rng.choice(train_idx, size=take, replace=False))


def attribute_gradients(ckpt: md.Checkpoint, cohort: CohortMatrix,
                        prior: PathwayPrior, enc: SpectralEncoding,
                        idx=None, baselines=None, steps: int = 50) -> AttributionSet:
    """Integrated gradients of the class-1 logit for raw cohort rows.

    ``baselines`` is either None for the all-zeros input or an array of
    cohort row indices; with several baselines the single-baseline
    attributions are averaged (expected gradients).
    """
    state, mut, cnv, labels, idx = _prepare(ckpt, cohort, prior, enc, idx)
    x = np.stack([np.asarray(mut, dtype=np.float64),
                  np.asarray(cnv, dtype=np.float64)], axis=-1)
    G = x.shape[1]
    if baselines is None:
        base_stack = np.zeros((1, G, 2))
        method = "integrated_gradients"
        baseline_kind = "zero"
    else:
        bstate, bmut, bcnv, _bl, bidx = _prepare(ckpt, cohort, prior, enc, baselines)
        del bstate
        base_stack = np.stack([np.asarray(bmut, dtype=np.float64),
                               np.asarray(bcnv, dtype=np.float64)], axis=-1)
        method = "expected_gradients"
        baseline_kind = "training_samples"

    grad_fn = lambda pts: _logit_grads(state, pts, prior, enc)
    attr = np.zeros_like(x)
    base_logits = []
    for b in base_stack:
        attr += integrated_gradients_fn(grad_fn, x, b[None], steps)
        base_logits.append(float(md.eval_logits(
            state, b[None, :, 0], b[None, :, 1], prior, enc).astype(np.float64)[0, 1]))
    attr /= base_stack.shape[0]

    fx = md.eval_logits(state, mut, cnv, prior, enc).astype(np.float64)[:, 1]
    logit_diff = fx - float(np.mean(base_logits))
    phi_gene = attr.sum(axis=-1)
    return AttributionSet(
        phi_gene=phi_gene,
        phi_pathway=pathway_means(phi_gene, prior),
        labels=np.asarray(labels, dtype=np.int64),
        completeness_gap=attr.sum(axis=(1, 2)) - logit_diff,
        logit_diff=logit_diff,
        provenance={
            "method": method,
            "baseline": baseline_kind,
            "n_baselines": int(base_stack.shape[0]),
            "steps": int(steps),
            "fold": ckpt.meta.get("fold_index"),
            "seed": ckpt.meta.get("base_seed"),
        },
    )


# ---------------------------------------------------------------------------
# differential rankings


def rank_differential(attr: AttributionSet, level: str, ids: list[str]) -> list[dict]:
    """Items sorted by class differential, largest first; ties break on id."""
    if level == "gene":
        delta = attr.delta_gene
    elif level == "pathway":
        delta = attr.delta_pathway
    else:
        raise InterpretError(f"level must be gene or pathway, got {level!r}")
    if len(ids) != delta.size:
        raise InterpretError(f"{len(ids)} ids for {delta.size} items")
    order = sorted(range(delta.size), key=lambda i: (-delta[i], ids[i]))
    return [{"id": ids[i], "delta": float(delta[i]), "rank": r + 1}
            for r, i in enumerate(order)]


def aggregate_rankings(tables: list[list[dict]], top_n: int = 20) -> list[dict]:
    """Pool per-fold ranking tables: mean differential, mean rank, and
    recurrence (folds where the item landed in the top ``top_n``)."""
    if not tables:
        raise InterpretError("no ranking tables to aggregate")
    stats: dict[str, dict] = {}
    for table in tables:
        for row in table:
            s = stats.setdefault(row["id"], {"delta": [], "rank": [], "hits": 0})
            s["delta"].append(row["delta"])
            s["rank"].append(row["rank"])
            s["hits"] += row["rank"] <= top_n
    rows = [{
        "id": item,
        "delta": float(np.mean(s["delta"])),
        "mean_rank": float(np.mean(s["rank"])),
        "recurrence": s["hits"],
        "fold_count": len(s["rank"]),
    } for item, s in stats.items()]
    rows.sort(key=lambda r: (-r["delta"], r["id"]))
    return rows


# ---------------------------------------------------------------------------
# pathway crosstalk


@dataclass
class CrosstalkResult:
    """Head-averaged final-layer attention, per sample and per class."""

    per_sample: np.ndarray           # (B, P, P) rows sum to 1
    labels: np.ndarray               # (B,)
    class_mean: dict[int, np.ndarray]
    meta: dict = field(default_factory=dict)


def crosstalk_matrices(ckpt: md.Checkpoint, cohort: CohortMatrix,
                       prior: PathwayPrior, enc: SpectralEncoding,
                       idx=None) -> CrosstalkResult:
    state, mut, cnv, labels, idx = _prepare(ckpt, cohort, prior, enc, idx)
    P = prior.n_pathways
    per = np.empty((mut.shape[0], P, P), dtype=np.float64)
    start = 0
    for trace, count in md.iter_eval_chunks(state, mut, cnv, prior, enc):
        per[start:start + count] = trace.attention[-1][:count].astype(np.float64).mean(axis=1)
        start += count
    class_mean = {c: class_mean_stream(per, labels, c)
                  for c in (0, 1) if (labels == c).any()}
    return CrosstalkResult(
        per_sample=per,
        labels=np.asarray(labels, dtype=np.int64),
        class_mean=class_mean,
        meta={"layer": "final", "heads": "mean"},
    )


def pathway_score_correlation(attr: AttributionSet) -> dict[int, np.ndarray]:
    """Secondary crosstalk mode: per-class correlation of pathway
    attribution scores across samples. Constant pathways get zero rows."""
    out = {}
    for c in (0, 1):
        rows = attr.phi_pathway[attr.labels == c]
        if rows.shape[0] < 2:
            raise InterpretError(f"need at least 2 samples of class {c} for correlation")
        sd = rows.std(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            corr = np.corrcoef(rows, rowvar=False)
        corr[~np.isfinite(corr)] = 0.0
        corr[sd == 0, :] = 0.0
        corr[:, sd == 0] = 0.0
        out[c] = corr
    return out


# ---------------------------------------------------------------------------
# rewiring statistics


def bh_adjust(p: np.ndarray) -> np.ndarray:
    """Benjamini-Hochberg step-up q-values: q_(i) = min_{j>=i} p_(j)*m/j,
    capped at 1."""
    p = np.asarray(p, dtype=np.float64)
    m = p.size
    order = np.argsort(p, kind="mergesort")
    # m/j first: the factor is >= 1 (exactly 1 at j = m), so rounding keeps q >= p
    scaled = p[order] * (m / np.arange(1, m + 1))
    q = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    out = np.empty_like(q)
    out[order] = q
    return out


@dataclass
class RewiringResult:
    delta: np.ndarray        # (P, P) class-1 mean minus class-0 mean
    p: np.ndarray            # (P, P), diagonal fixed at 1
    q: np.ndarray            # (P, P) BH-adjusted over directed off-diagonal edges
    significant: np.ndarray  # (P, P) bool, q < alpha off the diagonal
    alpha: float
    method: str


def rewiring_test(per_sample: np.ndarray, labels: np.ndarray, alpha: float = 0.05,
                  method: str = "welch", n_permutations: int = 1000,
                  seed: int = 0) -> RewiringResult:
    """Directed-edge class comparison with FDR control.

    ``welch`` uses a two-sided two-sample test with normal-approximate
    p-values; ``permutation`` compares |delta| against label shuffles.
    Edges with zero variance in both classes and equal means get p = 1.
    """
    per = np.asarray(per_sample, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    B, P, _ = per.shape
    n1 = int((labels == 1).sum())
    n0 = int((labels == 0).sum())
    if n1 < 2 or n0 < 2:
        raise InterpretError(f"need at least 2 samples per class, got {n0} and {n1}")

    mean1 = class_mean_stream(per, labels, 1)
    mean0 = class_mean_stream(per, labels, 0)
    delta = mean1 - mean0

    if method == "welch":
        v1 = per[labels == 1].var(axis=0, ddof=1)
        v0 = per[labels == 0].var(axis=0, ddof=1)
        se = np.sqrt(v1 / n1 + v0 / n0)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, np.abs(delta) / se,
                         np.where(delta == 0, 0.0, np.inf))
        p = erfc(z / np.sqrt(2.0))
    elif method == "permutation":
        flat = per.reshape(B, P * P)
        obs = np.abs(delta.reshape(P * P))
        rng = np.random.default_rng(seed)
        exceed = np.zeros(P * P, dtype=np.int64)
        done = 0
        while done < n_permutations:
            nb = min(PERM_BLOCK, n_permutations - done)
            shuffles = np.argsort(rng.random((nb, B)), axis=1)
            w = (labels[shuffles] == 1).astype(np.float64)
            d = w @ flat / n1 - (1.0 - w) @ flat / n0
            exceed += (np.abs(d) >= obs).sum(axis=0)
            done += nb
        p = ((1 + exceed) / (n_permutations + 1.0)).reshape(P, P)
    else:
        raise InterpretError(f"unknown rewiring method {method!r}")

    off = ~np.eye(P, dtype=bool)
    p = np.where(off, p, 1.0)
    q = np.ones_like(p)
    q[off] = bh_adjust(p[off])
    return RewiringResult(delta=delta, p=p, q=q,
                          significant=(q < alpha) & off, alpha=alpha, method=method)


# ---------------------------------------------------------------------------
# novel edges and hubs


def novel_edges(crosstalk: CrosstalkResult, prior: PathwayPrior,
                rewiring: RewiringResult, delta_pathway: np.ndarray,
                top_k: int = 20) -> list[dict]:
    """Directed pairs among the top rewired pathways, flagged as new when
    the prior has no such edge, sorted by learned class-1 weight.

    A pathway qualifies only with a positive attribution differential;
    fewer than two qualifying pathways give an empty table.
    """
    ids = prior.pathway_ids
    delta_pathway = np.asarray(delta_pathway, dtype=np.float64)
    order = sorted(range(prior.n_pathways), key=lambda i: (-delta_pathway[i], ids[i]))
    chosen = [i for i in order if delta_pathway[i] > 0][:top_k]
    if len(chosen) < 2:
        return []
    if 1 not in crosstalk.class_mean or 0 not in crosstalk.class_mean:
        raise InterpretError("novel-edge analysis needs both class matrices")
    met = crosstalk.class_mean[1]
    pri = crosstalk.class_mean[0]
    rows = []
    for i in chosen:
        for j in chosen:
            if i == j:
                continue
            base = float(prior.adjacency[i, j])
            rows.append({
                "source": ids[i],
                "target": ids[j],
                "learned": float(met[i, j]),
                "base": base,
                "new": int(base <= 0),
                "mean_met": float(met[i, j]),
                "mean_pri": float(pri[i, j]),
                "delta": float(rewiring.delta[i, j]),
                "p": float(rewiring.p[i, j]),
                "q": float(rewiring.q[i, j]),
            })
    rows.sort(key=lambda r: (-r["learned"], r["source"], r["target"]))
    return rows


@dataclass
class HubHierarchy:
    """Prior-connected crosstalk hubs built from clipped differentials."""

    s: np.ndarray      # (P,) max(delta_p, 0)
    E: np.ndarray      # (P, P) adjacency-weighted pair scores
    H: np.ndarray      # (P,) outgoing score sums
    hubs: list[dict] = field(default_factory=list)


def hub_hierarchy(delta_pathway: np.ndarray, prior: PathwayPrior,
                  top_hubs: int = 5, levels: int = 2) -> HubHierarchy:
    """Rank pathways by summed prior-connected crosstalk and expand each
    top hub breadth-first without revisiting pathways."""
    ids = prior.pathway_ids
    s = np.maximum(np.asarray(delta_pathway, dtype=np.float64), 0.0)
    E = prior.adjacency.astype(np.float64) * np.outer(s, s)
    H = E.sum(axis=1)

    roots = sorted((i for i in range(prior.n_pathways) if H[i] > 0),
                   key=lambda i: (-H[i], ids[i]))[:top_hubs]
    hubs = []
    for root in roots:
        visited = {root}
        node = {"hub": ids[root], "H": float(H[root]), "children": []}
        frontier = [(root, node)]
        for _level in range(levels):
            nxt = []
            for i, parent in frontier:
                neighbors = sorted((j for j in range(prior.n_pathways)
                                    if E[i, j] > 0 and j not in visited),
                                   key=lambda j: (-E[i, j], ids[j]))
                for j in neighbors:
                    visited.add(j)
                    child = {"pathway": ids[j], "E": float(E[i, j]), "children": []}
                    parent["children"].append(child)
                    nxt.append((j, child))
            frontier = nxt
        hubs.append(node)
    return HubHierarchy(s=s, E=E, H=H, hubs=hubs)


# ---------------------------------------------------------------------------
# gene signatures


@dataclass
class GeneSignature:
    """Class-mean pooling attention per pathway gene plus IG class means."""

    alpha_mean: dict[int, np.ndarray]  # class -> (P, G), zero off-membership
    alpha_diff: np.ndarray             # (P, G) class 1 minus class 0
    ig_mean: dict[int, np.ndarray]     # class -> (G,)
    ig_diff: np.ndarray                # (G,)


def gene_signatures(ckpt: md.Checkpoint, cohort: CohortMatrix, prior: PathwayPrior,
                    enc: SpectralEncoding, idx=None, attr: AttributionSet | None = None,
                    steps: int = 50, baselines=None) -> GeneSignature:
    """Within-pathway gene attention averaged per class, with per-gene
    integrated-gradient class means.

    Attention means are accumulated over the flat membership layout in
    sample order, so each pathway's row still sums to one per class.
    """
    state, mut, cnv, labels, idx = _prepare(ckpt, cohort, prior, enc, idx)
    for c in (0, 1):
        if not (labels == c).any():
            raise InterpretError(f"no samples of class {c}")

    flat = np.empty((mut.shape[0], prior.n_members), dtype=np.float64)
    start = 0
    for trace, count in md.iter_eval_chunks(state, mut, cnv, prior, enc):
        flat[start:start + count] = trace.pool_alpha[:count].astype(np.float64)
        start += count

    alpha_mean = {}
    for c in (0, 1):
        dense = np.zeros((prior.n_pathways, cohort.n_genes), dtype=np.float64)
        dense[prior.member_path, prior.member_gene] = class_mean_stream(flat, labels, c)
        alpha_mean[c] = dense

    if attr is None:
        attr = attribute_gradients(ckpt, cohort, prior, enc, idx=idx,
                                   baselines=baselines, steps=steps)
    ig_mean = {c: class_mean_stream(attr.phi_gene, attr.labels, c) for c in (0, 1)}
    return GeneSignature(
        alpha_mean=alpha_mean,
        alpha_diff=alpha_mean[1] - alpha_mean[0],
        ig_mean=ig_mean,
        ig_diff=ig_mean[1] - ig_mean[0],
    )


# ---------------------------------------------------------------------------
# artifacts


def _fmt(x) -> str:
    return repr(float(x))


def save_attributions(path, attr: AttributionSet) -> None:
    save_tensors(path, {
        "phi_gene": attr.phi_gene,
        "phi_pathway": attr.phi_pathway,
        "labels": attr.labels,
        "completeness_gap": attr.completeness_gap,
        "logit_diff": attr.logit_diff,
    }, meta={"provenance": attr.provenance})


def load_attributions(path) -> AttributionSet:
    tensors, meta = load_tensors(path)
    return AttributionSet(
        phi_gene=tensors["phi_gene"],
        phi_pathway=tensors["phi_pathway"],
        labels=tensors["labels"],
        completeness_gap=tensors["completeness_gap"],
        logit_diff=tensors["logit_diff"],
        provenance=meta.get("provenance", {}),
    )


def write_rankings_csv(path, rows: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("id,delta,mean_rank,recurrence,fold_count\n")
        for r in rows:
            fh.write(",".join([r["id"], _fmt(r["delta"]), _fmt(r["mean_rank"]),
                               str(r["recurrence"]), str(r["fold_count"])]) + "\n")


def write_edge_table_csv(path, rows: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("source,target,learned,base,new,mean_met,mean_pri,delta,p,q\n")
        for r in rows:
            fh.write(",".join([r["source"], r["target"], _fmt(r["learned"]),
                               _fmt(r["base"]), str(r["new"]), _fmt(r["mean_met"]),
                               _fmt(r["mean_pri"]), _fmt(r["delta"]),
                               _fmt(r["p"]), _fmt(r["q"])]) + "\n")


def write_hub_json(path, hub: HubHierarchy) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps({"hubs": hub.hubs}, indent=2, sort_keys=True) + "\n")
