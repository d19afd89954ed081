"""Acceptance gate: one test per shipping criterion, numbered 1 to 12.

Each test prints a single summary line with the measured quantities so
the run log doubles as the acceptance report. The two protocol-scale
fixtures (trained signal cohort, trained null cohort) are session-scoped
and shared across criteria, so the suite trains each protocol once.
"""

import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import pathgt.cli as cli
import pathgt.interpret as itp
import pathgt.metrics as mx
import pathgt.model as md
import pathgt.training as tr
from pathgt.cohort import SynthSpec, make_folds, synth_cohort
from pathgt.graphprior import build_prior, laplacian_encoding, map_memberships

JOBS = min(4, os.cpu_count() or 1)


def _note(text: str) -> None:
    print(text, file=sys.stderr, flush=True)


def small_prior(n_genes: int = 20, n_pathways: int = 5):
    """Ring of overlapping windows: every node has edges, tiny scale."""
    gene_ids = [f"G{i:04d}" for i in range(n_genes)]
    defs = []
    for p in range(n_pathways):
        start = p * (n_genes // n_pathways)
        members = [gene_ids[(start + j) % n_genes] for j in range(6)]
        defs.append((f"PW{p + 1:03d}", "", members))
    prior = build_prior(map_memberships(defs, gene_ids), n_genes, min_genes=2)
    return prior, gene_ids


# -- criterion 1 -------------------------------------------------------------


def test_criterion_01_gradient_correctness():
    """Analytic gradients match central differences on the pinned config."""
    start = time.perf_counter()
    step = 1e-4
    worst = 0.0
    for seed in range(5):
        prior, _ = small_prior(20, 5)
        config = md.ModelConfig(embed_dim=8, film_hidden=8, n_layers=1,
                                n_heads=2, lpe_dims=2, dropout=0.0)
        enc = laplacian_encoding(prior, k=config.lpe_dims)
        state = md.init_state(config, 20, prior.n_pathways, seed=seed,
                              dtype=np.float64, enc=enc)
        rng = np.random.default_rng(seed + 100)
        for name in state.params:
            state.params[name] += rng.normal(scale=0.05,
                                             size=state.params[name].shape)
        mut = (rng.random((4, 20)) < 0.3).astype(np.float64)
        cnv = rng.normal(size=(4, 20))
        probe = rng.normal(size=(4, 2))
        batch = md.Batch(mut, cnv)

        def loss() -> float:
            t = md.forward(state, batch, prior, enc, training=False)
            return float((t.logits.data * probe).sum())

        trace = md.forward(state, batch, prior, enc, training=False)
        grads = md.backward(state, trace, probe)
        for name in sorted(state.params):
            p = state.params[name]
            g = np.asarray(grads[name])
            for i in np.ndindex(p.shape):
                keep = p[i]
                p[i] = keep + step
                up = loss()
                p[i] = keep - step
                down = loss()
                p[i] = keep
                fd = (up - down) / (2.0 * step)
                an = float(g[i])
                # relative error floored at the step size: below that the
                # h^2 truncation term of the difference quotient dominates
                rel = abs(fd - an) / max(abs(fd), abs(an), step)
                worst = max(worst, rel)
    elapsed = time.perf_counter() - start
    print(f"criterion 1: max relative gradient error {worst:.3e} "
          f"over 5 seeds in {elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 60.0


# -- criterion 2 -------------------------------------------------------------


def test_criterion_02_simplex_invariants():
    """Pooling, attention, and readout weights are proper distributions."""
    checked = 0
    for model_seed in range(5):
        prior, _ = small_prior(30, 5)
        config = md.ModelConfig(embed_dim=8, film_hidden=8, n_layers=2,
                                n_heads=2, lpe_dims=2, dropout=0.1)
        enc = laplacian_encoding(prior, k=config.lpe_dims)
        state = md.init_state(config, 30, prior.n_pathways, seed=model_seed,
                              enc=enc)
        rng = np.random.default_rng(model_seed)
        for name in state.params:
            state.params[name] += rng.normal(
                scale=0.1, size=state.params[name].shape
            ).astype(state.params[name].dtype)
        member = np.zeros((prior.n_pathways, 30), dtype=bool)
        member[prior.member_path, prior.member_gene] = True
        for _ in range(20):
            mut = (rng.random((3, 30)) < 0.3).astype(np.float64)
            cnv = rng.normal(size=(3, 30))
            trace = md.forward(state, md.Batch(mut, cnv), prior, enc,
                               training=False)
            alpha = md.dense_alpha(prior, trace.pool_alpha)
            np.testing.assert_allclose(alpha.sum(axis=-1), 1.0, atol=1e-6)
            assert np.all(alpha[:, ~member] == 0.0)
            for attn in trace.attention:
                np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)
            np.testing.assert_allclose(trace.readout_weights.sum(axis=-1),
                                       1.0, atol=1e-6)
            checked += 1
    print(f"criterion 2: simplex invariants hold on {checked} forward passes")
    assert checked == 100


# -- criterion 3 -------------------------------------------------------------


def test_criterion_03_soft_mask_contract():
    """Non-edge attention odds are exactly exp(-10) with neutral content."""
    n_genes = 12
    gene_ids = [f"G{i:04d}" for i in range(n_genes)]
    defs = [
        ("PW001", "", gene_ids[0:5]),
        ("PW002", "", gene_ids[3:8]),   # overlaps PW001 and PW003
        ("PW003", "", gene_ids[6:11]),  # no overlap with PW001
    ]
    prior = build_prior(map_memberships(defs, gene_ids), n_genes, min_genes=2)
    assert prior.adjacency[0, 1] > 0 and prior.adjacency[1, 2] > 0
    assert prior.adjacency[0, 2] == 0.0

    config = md.ModelConfig(embed_dim=8, film_hidden=8, n_layers=1,
                            n_heads=2, lpe_dims=2, dropout=0.0)
    enc = laplacian_encoding(prior, k=config.lpe_dims)
    state = md.init_state(config, n_genes, prior.n_pathways, seed=3,
                          dtype=np.float64, enc=enc)
    rng = np.random.default_rng(0)
    for name in state.params:
        state.params[name] += rng.normal(scale=0.1,
                                         size=state.params[name].shape)
    # neutral content scores and neutral edge gains: the only difference
    # between pairs is the structural penalty
    state.params["layers.0.attn.wq"][:] = 0.0
    state.params["layers.0.edge_gain.w"][:] = 0.0
    state.params["layers.0.edge_gain.b"][:] = 0.0

    mut = (rng.random((5, n_genes)) < 0.4).astype(np.float64)
    cnv = rng.normal(size=(5, n_genes))
    trace = md.forward(state, md.Batch(mut, cnv), prior, enc, training=False)
    attn = trace.attention[0]  # (B, H, P, P)
    target = math.exp(-10.0)
    ratios = np.stack([
        attn[:, :, 0, 2] / attn[:, :, 0, 1],  # PW001 -> non-edge vs edge
        attn[:, :, 2, 0] / attn[:, :, 2, 1],  # PW003 -> non-edge vs edge
    ])
    worst = float(np.abs(ratios - target).max())
    print(f"criterion 3: non-edge/edge odds deviate from exp(-10) "
          f"by at most {worst:.2e}")
    assert worst < 1e-9


# -- shared protocol fixtures ------------------------------------------------


def _protocol_inputs(effect_size: float):
    spec = SynthSpec(effect_size=effect_size)
    cohort, defs = synth_cohort(spec)
    prior = build_prior(map_memberships(defs, cohort.gene_ids), cohort.n_genes)
    config = md.ModelConfig()
    enc = laplacian_encoding(prior, k=config.lpe_dims)
    return cohort, prior, enc, config


@pytest.fixture(scope="session")
def protocol_run():
    """Full default protocol on the planted-signal cohort, trained once."""
    cohort, prior, enc, config = _protocol_inputs(effect_size=3.0)
    spec = tr.TrainSpec()
    _note(f"[acceptance] training signal protocol (jobs={JOBS}) ...")
    start = time.perf_counter()
    result = tr.run_cv(cohort, prior, enc, config, spec, seeds=(42, 123),
                       n_folds=5, jobs=JOBS,
                       progress=lambda info: _note(f"[acceptance] {info}"))
    elapsed = time.perf_counter() - start
    _note(f"[acceptance] signal protocol done in {elapsed:.0f}s")
    return {"cohort": cohort, "prior": prior, "enc": enc, "config": config,
            "result": result, "elapsed": elapsed}


@pytest.fixture(scope="session")
def null_run():
    """Same protocol with no planted effect."""
    cohort, prior, enc, config = _protocol_inputs(effect_size=0.0)
    spec = tr.TrainSpec()
    _note("[acceptance] training null protocol ...")
    start = time.perf_counter()
    result = tr.run_cv(cohort, prior, enc, config, spec, seeds=(42, 123),
                       n_folds=5, jobs=JOBS,
                       progress=lambda info: _note(f"[acceptance] {info}"))
    _note(f"[acceptance] null protocol done in {time.perf_counter() - start:.0f}s")
    return {"cohort": cohort, "result": result}


# -- criterion 4 -------------------------------------------------------------


def test_criterion_04_ig_completeness(protocol_run):
    """Attribution sums reproduce the score difference."""
    run = protocol_run["result"]["runs"][0]
    cohort = protocol_run["cohort"]
    folds = make_folds(cohort.labels, n_folds=5, base_seed=run.base_seed)
    idx = folds[run.fold_index - 1].test_idx[:10]
    attr = itp.attribute_gradients(run.checkpoint, cohort,
                                   protocol_run["prior"], protocol_run["enc"],
                                   idx=idx, steps=200)
    bound = 0.01 * np.abs(attr.logit_diff) + 1e-4
    worst = float((np.abs(attr.completeness_gap) - bound).max())
    assert np.all(np.abs(attr.completeness_gap) <= bound)

    # linear scorer on a dyadic grid: quadrature error is exactly zero
    rng = np.random.default_rng(5)
    w = np.ldexp(1.0, rng.integers(-3, 4, size=(7, 2))) * rng.choice(
        [-1.0, 1.0], size=(7, 2))
    x = rng.integers(-8, 9, size=(3, 7, 2)) / 16.0
    base = rng.integers(-8, 9, size=(1, 7, 2)) / 16.0
    ig = itp.integrated_gradients_fn(
        lambda pts: np.broadcast_to(w, pts.shape), x, base, steps=37)
    gap = ig.sum(axis=(1, 2)) - ((x * w).sum(axis=(1, 2))
                                 - (base * w).sum(axis=(1, 2)))
    print(f"criterion 4: completeness margin {worst:.2e} (<=0 passes) on 10 "
          f"samples at 200 steps; linear-scorer gap {np.abs(gap).max():.1e}")
    assert np.all(gap == 0.0)


# -- criterion 5 -------------------------------------------------------------


def _auroc_pairs(labels: np.ndarray, scores: np.ndarray) -> float:
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (pos.size * neg.size)


def _bh_bruteforce(p: np.ndarray) -> np.ndarray:
    m = p.size
    order = np.argsort(p, kind="mergesort")
    q = np.empty(m)
    for pos_idx, j in enumerate(order):
        best = 1.0
        for later in range(pos_idx, m):
            candidate = p[order[later]] * (m / (later + 1))
            best = min(best, candidate)
        q[j] = min(best, 1.0)
    return q


def test_criterion_05_metric_oracles():
    rng = np.random.default_rng(17)
    for trial in range(50):
        n = int(rng.integers(10, 60))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = rng.integers(0, 8, size=n) / 7.0  # heavy ties
        assert mx.auroc(labels, scores) == _auroc_pairs(labels, scores)

    for trial in range(100):
        m = int(rng.integers(1, 40))
        p = rng.random(m)
        p[rng.random(m) < 0.3] = 0.25  # force ties
        np.testing.assert_array_equal(itp.bh_adjust(p), _bh_bruteforce(p))

    grid = np.arange(0.0, 1.0 + 1e-12, 1e-3)
    for trial in range(30):
        n = int(rng.integers(12, 80))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.random(n), 2)
        tau, _ = mx.calibrate_threshold(labels, scores)

        def exact_f1(t: float) -> float:
            c = mx.confusion_at(labels, scores, t)
            denom = 2 * c["tp"] + c["fp"] + c["fn"]
            return 0.0 if denom == 0 else 2.0 * c["tp"] / denom

        best_grid = max(exact_f1(t) for t in grid)
        assert exact_f1(tau) >= best_grid - 1e-12
    print("criterion 5: auroc == pair oracle (50 sets), bh == brute force "
          "(100 vectors), calibrated threshold beats 1e-3 grid (30 sets)")


# -- criterion 6 -------------------------------------------------------------


def test_criterion_06_parameter_count_oracle():
    config = md.ModelConfig()
    enumerated = md.count_params(config, 5000, 300)
    # independent tally, written out per architecture block
    gene_embeddings = 5000 * 64
    conditioning = 2 * 64 + 64 + 64 * 128 + 128
    pooling = 64 * 64 + 64 + 64 + 300 * 64
    positions = (16 + 1) * 64 + 64
    per_layer = (
        4 * 64 * 64            # q, k, v, o projections
        + 4 + 4                # per-head edge gains and biases
        + 64 * 256 + 256 + 256 * 64 + 64  # feed-forward
        + 4 * 64               # two token batch norms
        + 64 + 64 + 64 + 1     # edge feature mlp
        + 2                    # edge batch norm
    )
    readout = 64 * 32 + 32
    head = 64 * 64 + 64 + 2 * 64 + 64 * 2 + 2
    tally = (gene_embeddings + conditioning + pooling + positions
             + 2 * per_layer + readout + head)
    print(f"criterion 6: enumerated {enumerated} == hand tally {tally}, "
          f"band [300000, 625000]")
    assert enumerated == tally
    assert 400_000 * 0.75 <= enumerated <= 500_000 * 1.25


# -- criterion 7 -------------------------------------------------------------


def test_criterion_07_end_to_end_learning(protocol_run, null_run):
    runs = protocol_run["result"]["runs"]
    auroc = float(np.mean([r.metrics["auroc"] for r in runs]))
    f1 = float(np.mean([r.metrics["f1"] for r in runs]))
    elapsed = protocol_run["elapsed"]
    budget = 600.0 * (4.0 / JOBS)
    null_auroc = float(np.mean(
        [r.metrics["auroc"] for r in null_run["result"]["runs"]]))
    print(f"criterion 7: mean auroc {auroc:.4f} (>=0.95), mean f1 {f1:.4f} "
          f"(>=0.90); wall {elapsed:.0f}s raw on {JOBS} core(s), budget "
          f"{budget:.0f}s (600s at 4 cores); null auroc {null_auroc:.4f} "
          f"in [0.40, 0.60]")
    assert auroc >= 0.95
    assert f1 >= 0.90
    assert elapsed < budget
    assert 0.40 <= null_auroc <= 0.60


# -- criterion 8 -------------------------------------------------------------


def test_criterion_08_planted_signal_recovery(protocol_run):
    cohort = protocol_run["cohort"]
    prior = protocol_run["prior"]
    spec = SynthSpec()
    stride = spec.genes_per_pathway - spec.overlap_genes
    driver_genes = {cohort.gene_ids[g]
                    for p in range(spec.driver_pathways)
                    for g in range(p * stride, p * stride + spec.genes_per_pathway)}
    drivers = {"PW001", "PW002"}
    top_n = int(0.10 * cohort.n_genes)
    need = math.ceil(0.60 * len(driver_genes))

    hits = 0
    for run in protocol_run["result"]["runs"]:
        folds = make_folds(cohort.labels, n_folds=5, base_seed=run.base_seed)
        idx = folds[run.fold_index - 1].test_idx
        attr = itp.attribute_gradients(run.checkpoint, cohort, prior,
                                       protocol_run["enc"], idx=idx, steps=25)
        top3 = {row["id"] for row in
                itp.rank_differential(attr, "pathway", prior.pathway_ids)[:3]}
        topg = {row["id"] for row in
                itp.rank_differential(attr, "gene", cohort.gene_ids)[:top_n]}
        if drivers <= top3 and len(topg & driver_genes) >= need:
            hits += 1
        _note(f"[acceptance] recovery seed {run.base_seed} fold "
              f"{run.fold_index}: drivers in top3 {drivers <= top3}, "
              f"driver genes in top {top_n}: {len(topg & driver_genes)}"
              f"/{len(driver_genes)}")
    print(f"criterion 8: planted drivers recovered in {hits}/10 runs "
          f"(need >= 9)")
    assert hits >= 9


# -- criterion 9 -------------------------------------------------------------


def test_criterion_09_rewiring_fdr_under_null(protocol_run):
    run = protocol_run["result"]["runs"][0]
    cohort = protocol_run["cohort"]
    folds = make_folds(cohort.labels, n_folds=5, base_seed=run.base_seed)
    idx = folds[run.fold_index - 1].test_idx
    ct = itp.crosstalk_matrices(run.checkpoint, cohort, protocol_run["prior"],
                                protocol_run["enc"], idx=idx)
    P = ct.per_sample.shape[1]
    off = P * P - P
    rng = np.random.default_rng(11)
    fractions = []
    for _ in range(20):
        permuted = rng.permutation(ct.labels)
        res = itp.rewiring_test(ct.per_sample, permuted, alpha=0.05)
        fractions.append(res.significant.sum() / off)
    mean_frac = float(np.mean(fractions))
    print(f"criterion 9: mean significant fraction under permuted labels "
          f"{mean_frac:.4f} (<= 0.05, 20 permutations)")
    assert mean_frac <= 0.05


# -- criterion 10 ------------------------------------------------------------


def test_criterion_10_cv_determinism(tmp_path):
    config = {
        "synth": {"n_patients": 80, "n_genes": 43, "n_pathways": 3,
                  "genes_per_pathway": 15, "overlap_genes": 1,
                  "effect_size": 3.0, "positive_fraction": 0.4,
                  "driver_pathways": 1, "seed": 11},
        "model": {"embed_dim": 8, "film_hidden": 8, "n_layers": 1,
                  "n_heads": 2, "lpe_dims": 2, "dropout": 0.1},
        "train": {"max_epochs": 3, "min_epochs": 1, "patience": 2, "seed": 5},
        "seeds": [7], "n_folds": 2, "prior_min_genes": 5,
    }
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(config))
    for tag in ("a", "b"):
        rc = cli.main(["cv", "--config", str(cfg),
                       "--out", str(tmp_path / tag)])
        assert rc == 0
    compared = 0
    for rel in ("metrics_aggregate.json", "predictions.csv",
                "runs/seed7_fold1/metrics.json",
                "runs/seed7_fold2/metrics.json",
                "runs/seed7_fold1/checkpoint.bin",
                "runs/seed7_fold2/checkpoint.bin"):
        a = (tmp_path / "a" / rel).read_bytes()
        b = (tmp_path / "b" / rel).read_bytes()
        assert a == b, f"{rel} differs between executions"
        compared += 1
    print(f"criterion 10: {compared} metrics/prediction/checkpoint files "
          f"byte-identical across two cv executions")


# -- criterion 11 ------------------------------------------------------------


def test_criterion_11_batch_invariance_and_singleton():
    spec = SynthSpec(n_patients=50, n_genes=43, n_pathways=3,
                     genes_per_pathway=15, overlap_genes=1,
                     positive_fraction=0.4, driver_pathways=1, seed=2)
    cohort, defs = synth_cohort(spec)
    prior = build_prior(map_memberships(defs, cohort.gene_ids),
                        cohort.n_genes, min_genes=5)
    config = md.ModelConfig(embed_dim=8, film_hidden=8, n_layers=1,
                            n_heads=2, lpe_dims=2, dropout=0.1)
    enc = laplacian_encoding(prior, k=config.lpe_dims)
    state = md.init_state(config, cohort.n_genes, prior.n_pathways, seed=4,
                          enc=enc)
    rng = np.random.default_rng(8)
    for name in state.params:
        state.params[name] += rng.normal(
            scale=0.1, size=state.params[name].shape
        ).astype(state.params[name].dtype)

    full = md.eval_logits(state, cohort.mut, cohort.cnv, prior, enc)
    # singles, then a shuffled three-way split
    singles = np.vstack([
        md.eval_logits(state, cohort.mut[i:i + 1], cohort.cnv[i:i + 1],
                       prior, enc)
        for i in range(cohort.n_patients)
    ])
    np.testing.assert_array_equal(full, singles)
    perm = rng.permutation(cohort.n_patients)
    reassembled = np.empty_like(full)
    for part in np.array_split(perm, 3):
        reassembled[part] = md.eval_logits(state, cohort.mut[part],
                                           cohort.cnv[part], prior, enc)
    np.testing.assert_array_equal(full, reassembled)

    train_spec = tr.TrainSpec(batch_size=1, max_epochs=2, min_epochs=1,
                              patience=2, seed=0)
    folds = make_folds(cohort.labels, n_folds=2, base_seed=3)
    fold = tr.train_fold(cohort, prior, enc, config, train_spec, folds[0])
    losses = [row["train_loss"] for row in fold.log_rows]
    assert all(np.isfinite(losses))
    assert np.all(np.isfinite(fold.test_scores))
    print(f"criterion 11: eval logits bit-identical over {cohort.n_patients} "
          f"singletons and a shuffled split; batch-size-1 training finite "
          f"({len(losses)} epochs)")


# -- criterion 12 ------------------------------------------------------------


def test_criterion_12_ablation_discrimination():
    spec = SynthSpec(n_patients=240, n_genes=200, n_pathways=12,
                     genes_per_pathway=16, overlap_genes=2, effect_size=3.0,
                     positive_fraction=0.4, driver_pathways=2,
                     signal_in="cnv", seed=19)
    cohort, defs = synth_cohort(spec)
    prior = build_prior(map_memberships(defs, cohort.gene_ids), cohort.n_genes)
    config = md.ModelConfig(embed_dim=16, film_hidden=16, n_layers=1,
                            n_heads=2, lpe_dims=4, dropout=0.1)
    enc = laplacian_encoding(prior, k=config.lpe_dims)
    train_spec = tr.TrainSpec(lr=3e-4, max_epochs=30, min_epochs=8,
                              patience=8, seed=1)
    _note("[acceptance] training cnv-planted ablation arms ...")
    result = tr.run_ablation(cohort, prior, enc, config, train_spec,
                             seeds=(42,), n_folds=3, jobs=JOBS)
    counts = result["comparison"]["param_count"]
    assert counts["full"] == counts["mut_only"] == counts["cnv_only"]
    cnv_auroc = result["arms"]["cnv_only"]["aggregate"]["auroc"]["mean"]
    mut_auroc = result["arms"]["mut_only"]["aggregate"]["auroc"]["mean"]
    print(f"criterion 12: cnv_only auroc {cnv_auroc:.4f} vs mut_only "
          f"{mut_auroc:.4f} (gap >= 0.2); {counts['full']} parameters "
          f"in every arm")
    assert cnv_auroc - mut_auroc >= 0.2
