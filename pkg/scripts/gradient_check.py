#!/usr/bin/env python3
"""Verify analytic parameter gradients against central finite differences.

Builds a small random model in 64-bit precision, scores a fixed linear
functional of the logits in evaluation mode (batch-norm statistics
frozen), and compares every parameter coordinate. Prints the worst
relative error per tensor and exits nonzero if any exceeds the bound.
"""

import argparse
import sys
import time

import numpy as np

import pathgt.model as md
from pathgt.graphprior import build_prior, laplacian_encoding, map_memberships


def build_problem(seed: int, n_genes: int = 20, n_pathways: int = 5):
    gene_ids = [f"G{i:04d}" for i in range(n_genes)]
    defs = []
    for p in range(n_pathways):
        start = p * (n_genes // n_pathways)
        members = [gene_ids[(start + j) % n_genes] for j in range(6)]
        defs.append((f"PW{p + 1:03d}", "", members))
    prior = build_prior(map_memberships(defs, gene_ids), n_genes, min_genes=2)
    config = md.ModelConfig(embed_dim=8, film_hidden=8, n_layers=1, n_heads=2,
                            lpe_dims=2, dropout=0.0)
    enc = laplacian_encoding(prior, k=config.lpe_dims)
    state = md.init_state(config, n_genes, prior.n_pathways, seed=seed,
                          dtype=np.float64, enc=enc)
    rng = np.random.default_rng(seed + 1)
    for name in state.params:
        state.params[name] += rng.normal(scale=0.05, size=state.params[name].shape)
    mut = (rng.random((4, n_genes)) < 0.3).astype(np.float64)
    cnv = rng.normal(size=(4, n_genes))
    batch = md.Batch(mut, cnv)
    probe = rng.normal(size=(4, 2))
    return state, batch, prior, enc, probe


def scalar_loss(state, batch, prior, enc, probe) -> float:
    trace = md.forward(state, batch, prior, enc, training=False)
    return float((trace.logits.data * probe).sum())


def check_seed(seed: int, step: float, bound: float, verbose: bool) -> float:
    state, batch, prior, enc, probe = build_problem(seed)
    trace = md.forward(state, batch, prior, enc, training=False)
    grads = md.backward(state, trace, probe)
    worst_overall = 0.0
    for name in sorted(state.params):
        p = state.params[name]
        g = np.asarray(grads[name])
        worst = 0.0
        for i in np.ndindex(p.shape):
            keep = p[i]
            p[i] = keep + step
            up = scalar_loss(state, batch, prior, enc, probe)
            p[i] = keep - step
            down = scalar_loss(state, batch, prior, enc, probe)
            p[i] = keep
            fd = (up - down) / (2.0 * step)
            an = float(g[i])
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-4)
            worst = max(worst, rel)
        worst_overall = max(worst_overall, worst)
        if verbose or worst >= bound:
            print(f"  seed {seed}  {name:24s} worst rel {worst:.3e}")
    return worst_overall


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--step", type=float, default=1e-4)
    parser.add_argument("--bound", type=float, default=1e-4)
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args()

    start = time.perf_counter()
    worst = 0.0
    for seed in range(args.seeds):
        worst = max(worst, check_seed(seed, args.step, args.bound, args.verbose))
        print(f"seed {seed}: worst relative error so far {worst:.3e}")
    elapsed = time.perf_counter() - start
    print(f"max relative error {worst:.3e} over {args.seeds} seeds "
          f"in {elapsed:.1f}s (bound {args.bound:g})")
    return 0 if worst < args.bound else 1


if __name__ == "__main__":
    sys.exit(main())
