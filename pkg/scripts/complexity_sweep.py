#!/usr/bin/env python3
"""Attended-pair counts and wall time of dense, windowed and Top-K sparse attention.

For each square patch grid the script runs the three branches on one random
sequence and prints (or writes as CSV) the pair counts next to their closed
forms L^2, sum_w |w|^2 and L * min(K, L).
"""
from __future__ import annotations

import argparse
import csv
import sys
import time

from panokit.attention import (
    AttentionConfig,
    AttentionWeights,
    BlockParams,
    IndexerConfig,
    IndexerWeights,
    PositionBias,
    TokenSequence,
    gate_mlp,
    msa_block,
    psa,
    swa,
    window_bounds,
)
from panokit.numerics import SplitMix64


def timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sides", default="4,8,16,24,32", help="comma-separated patch-grid side lengths")
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--heads", type=int, default=4)
    parser.add_argument("--window", type=int, default=64)
    parser.add_argument("--top-k", type=int, default=128)
    parser.add_argument("--bottleneck", type=int, default=196)
    parser.add_argument("--workers", type=int, default=4)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--csv", help="write rows to this CSV file instead of stdout table")
    args = parser.parse_args()

    rows = []
    for side in (int(s) for s in args.sides.split(",")):
        L = side * side + 1
        rng = SplitMix64(args.seed + side)
        cfg = AttentionConfig(args.dim, args.heads, args.window, args.top_k)
        idx = IndexerConfig.from_bottleneck(args.dim, args.bottleneck)
        x = TokenSequence(rng.uniform(-1, 1, (L, args.dim)), has_cls=True)
        w_dense, w_local, w_sparse = (AttentionWeights.init(rng, args.dim) for _ in range(3))
        indexer = IndexerWeights.init(rng, args.dim, idx)
        pe, gate = PositionBias.init(rng, side, side), gate_mlp(rng)
        block = BlockParams.zeros(args.dim)

        _, t_dense = timed(lambda: msa_block(x, w_dense, cfg, block))
        (_, m_swa), t_swa = timed(lambda: swa(x, w_local, cfg, args.workers))
        (_, m_psa), t_psa = timed(lambda: psa(x, w_sparse, indexer, idx, pe, gate, cfg, workers=args.workers))
        rows.append({
            "L": L,
            "dense_pairs": L * L,
            "swa_pairs": m_swa.count,
            "swa_expected": sum((e - s) ** 2 for s, e in window_bounds(L, cfg.window_size)),
            "psa_pairs": m_psa.count,
            "psa_expected": L * min(cfg.top_k, L),
            "dense_s": round(t_dense, 4),
            "swa_s": round(t_swa, 4),
            "psa_s": round(t_psa, 4),
        })

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        return
    cols = list(rows[0])
    print("  ".join(f"{c:>12}" for c in cols))
    for r in rows:
        print("  ".join(f"{r[c]:>12}" for c in cols))
    bad = [r["L"] for r in rows if r["swa_pairs"] != r["swa_expected"] or r["psa_pairs"] != r["psa_expected"]]
    if bad:
        print(f"pair counts off their closed form at L = {bad}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
