"""Exit criteria of the toolkit, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are repeated together in an
"acceptance criteria" section at the end of the pytest run.
"""
import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

import oracles
from panokit import cli
from panokit.attention import (
    AttentionConfig,
    AttentionWeights,
    BlockParams,
    IndexerConfig,
    IndexerWeights,
    PositionBias,
    TokenSequence,
    gate_mlp,
    multi_head_attention,
    pha_trace,
    psa,
    psa_scores,
    swa,
    top_k_select,
    window_bounds,
)
from panokit.evalkit import QARecord, category_report, normalize_scores, read_jsonl
from panokit.numerics import (
    LinearLayer,
    SplitMix64,
    grad_check,
    layer_norm,
    layer_norm_backward,
    linear_backward,
    sigmoid,
    sigmoid_backward,
    softmax_rows,
    softmax_rows_backward,
)
from panokit.pnm import write_ppm
from panokit.projection import DEMO_YAWS, PanoramaSpec, ring_rig, solid_images, stitch
from panokit.scene import DepthMap, PolygonRegion, mean_depth, occlusion_order, polygon_overlap, visibility_bucket

pytestmark = pytest.mark.acceptance

FIXTURES = Path(__file__).parent / "fixtures"


def _positive_indexer(rng, d, idx):
    ix = IndexerWeights.init(rng, d, idx)
    for layer in (ix.q_index, ix.k_index):
        layer.weight *= 0.01
        layer.bias = np.abs(layer.bias) + 1.0
    return ix


# 1 -------------------------------------------------------------------------------


def test_criterion_01_dense_oracle_equivalence(criterion):
    start = time.perf_counter()
    L, d, heads = 64, 32, 4
    worst, min_sim = 0.0, math.inf
    for seed in (1, 2, 3):
        rng = SplitMix64(seed)
        cfg = AttentionConfig(d, heads, window_size=8, top_k=L)
        idx = IndexerConfig(4, 4, 4)
        x = TokenSequence(rng.uniform(-1, 1, (L, d)), has_cls=False)
        w = AttentionWeights.init(rng, d)
        ix = _positive_indexer(rng, d, idx)
        pe, gate = PositionBias.init(rng, 8, 8, has_cls=False), gate_mlp(rng)
        # gate bypassed, so the scores are the summed similarities themselves
        min_sim = min(min_sim, float(psa_scores(x, ix, idx, pe, gate, bypass_gate=True).min()))
        out, mask = psa(x, w, ix, idx, pe, gate, cfg, bypass_gate=True)
        q, k, v = w.project(x.hidden)
        dense = w.wo(multi_head_attention(q, k, v, heads))
        scalar = np.array(oracles.linear(oracles.multi_head(q.tolist(), k.tolist(), v.tolist(), heads), w.wo))
        worst = max(worst, np.abs(out - dense).max(), np.abs(out - scalar).max())
        assert mask.count == L * L
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and min_sim > 0 and elapsed < 5
    assert criterion(ok, f"max |PSA - dense| = {worst:.2e} (<= 1e-10), min similarity {min_sim:.3g}, {elapsed:.2f}s")


# 2 -------------------------------------------------------------------------------


def test_criterion_02_masked_dense_equivalence(criterion):
    start = time.perf_counter()
    L, d, heads = 32, 16, 4
    worst = 0.0
    for lw in (4, 8, 32):
        for has_cls in (False, True):
            rng = SplitMix64(100 + lw)
            x = TokenSequence(rng.uniform(-1, 1, (L, d)), has_cls=has_cls)
            w = AttentionWeights.init(rng, d)
            out, _ = swa(x, w, AttentionConfig(d, heads, window_size=lw))
            allowed = np.zeros((L, L), dtype=bool)
            for s in range(0, L, lw):
                allowed[s:s + lw, s:s + lw] = True
            q, k, v = w.project(x.hidden)
            dense = w.wo(multi_head_attention(q, k, v, heads, mask=allowed))
            worst = max(worst, np.abs(out - dense).max())
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 5
    assert criterion(ok, f"max |SWA - masked dense| = {worst:.2e} over L_w in {{4, 8, 32}}, {elapsed:.2f}s")


# 3 -------------------------------------------------------------------------------


def test_criterion_03_complexity_accounting(criterion):
    rng = np.random.default_rng(2024)
    mismatches = []
    for _ in range(20):
        L, lw, K = int(rng.integers(2, 80)), int(rng.integers(1, 40)), int(rng.integers(1, 100))
        srng = SplitMix64(int(rng.integers(0, 2**32)))
        d = 8
        cfg = AttentionConfig(d, 2, window_size=lw, top_k=K)
        idx = IndexerConfig(2, 2, 2)
        x = TokenSequence(srng.uniform(-1, 1, (L, d)), has_cls=False)
        _, m_swa = swa(x, AttentionWeights.init(srng, d), cfg)
        _, m_psa = psa(x, AttentionWeights.init(srng, d), IndexerWeights.init(srng, d, idx), idx,
                       PositionBias.init(srng, 1, L, has_cls=False), gate_mlp(srng), cfg)
        want_swa = sum((e - s) ** 2 for s, e in window_bounds(L, lw))
        if m_swa.count != want_swa or m_psa.count != L * min(K, L):
            mismatches.append((L, lw, K, m_swa.count, want_swa, m_psa.count))

    # scoring-only proxy at L = 4096 with one small selector head
    L, d, K = 4096, 8, 512
    srng = SplitMix64(4096)
    idx = IndexerConfig(1, 2, 2)
    x = TokenSequence(srng.uniform(-1, 1, (L, d)), has_cls=False)
    ix, pe, gate = IndexerWeights.init(srng, d, idx), PositionBias.init(srng, 32, 128, has_cls=False), gate_mlp(srng)
    t0 = time.perf_counter()
    selected = top_k_select(psa_scores(x, ix, idx, pe, gate, workers=4), K)
    t_psa = time.perf_counter() - t0
    t0 = time.perf_counter()
    dense_scores = x.hidden @ x.hidden.T
    t_dense = time.perf_counter() - t0
    psa_pairs, dense_pairs = selected.size, dense_scores.size
    distinct = bool((np.diff(selected, axis=1) > 0).all())  # K distinct keys per query
    ratio_ok = Fraction(psa_pairs, dense_pairs) == Fraction(K, L) and distinct
    ok = not mismatches and ratio_ok
    configs = "20/20 configs exact" if not mismatches else f"mismatches {mismatches[:3]}"
    assert criterion(ok, f"{configs}; L=4096 pairs {psa_pairs}/{dense_pairs} = {Fraction(psa_pairs, dense_pairs)} (K/L = "
                     f"{Fraction(K, L)}), scoring {t_psa:.2f}s vs dense dot products {t_dense:.2f}s")


# 4 -------------------------------------------------------------------------------


def test_criterion_04_gradient_checks(criterion):
    start = time.perf_counter()
    rng = SplitMix64(4)
    worst = {"softmax": 0.0, "layer_norm": 0.0, "linear": 0.0, "sigmoid": 0.0}
    for _ in range(10):
        x = rng.uniform(-2, 2, (3, 5))
        up = rng.uniform(-1, 1, (3, 5))
        worst["softmax"] = max(worst["softmax"], grad_check(
            lambda z: float(np.sum(up * softmax_rows(z))), softmax_rows_backward(x, up), x, 1e-5))
        worst["sigmoid"] = max(worst["sigmoid"], grad_check(
            lambda z: float(np.sum(up * sigmoid(z))), sigmoid_backward(x, up), x, 1e-5))
        gamma, beta = rng.uniform(0.5, 1.5, 5), rng.uniform(-1, 1, 5)
        worst["layer_norm"] = max(worst["layer_norm"], grad_check(
            lambda z: float(np.sum(up * layer_norm(z, gamma, beta))), layer_norm_backward(x, gamma, up), x, 1e-5))
        layer = LinearLayer.init(rng, 5, 3)
        up3 = rng.uniform(-1, 1, (3, 3))
        d_x, d_w, d_b = linear_backward(layer, x, up3)
        worst["linear"] = max(
            worst["linear"],
            grad_check(lambda z: float(np.sum(up3 * layer(z))), d_x, x, 1e-5),
            grad_check(lambda z: float(np.sum(up3 * LinearLayer(z, layer.bias)(x))), d_w, layer.weight, 1e-5),
            grad_check(lambda z: float(np.sum(up3 * LinearLayer(layer.weight, z)(x))), d_b, layer.bias, 1e-5),
        )
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-6 and elapsed < 5
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert criterion(ok, f"max relative error {detail} (<= 1e-6), {elapsed:.2f}s")


# 5 -------------------------------------------------------------------------------


def test_criterion_05_stitching_geometry(criterion):
    start = time.perf_counter()
    spec = PanoramaSpec(1024, 256, -math.pi / 4, math.pi / 4)
    rig = ring_rig(DEMO_YAWS, hfov_deg=90.0)
    palette = [(255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0), (0, 255, 255), (255, 0, 255)]
    pano = stitch(rig, solid_images(rig, palette), spec, workers=4)
    elapsed = time.perf_counter() - start
    coverage = float((pano.coverage != 255).mean())

    lon = np.degrees(spec.longitudes())
    row = pano.coverage[spec.height // 2].astype(int)
    seams = sorted(float(lon[c] + lon[c + 1]) / 2 for c in np.nonzero(np.diff(row))[0])
    step = 360.0 / spec.width
    target = [-150.0, -90.0, -30.0, 30.0, 90.0, 150.0]
    seams_ok = len(seams) == len(target) and all(abs(a - b) <= step for a, b in zip(seams, target))

    wrap_ok = np.array_equal(pano.pixels[:, 0], pano.pixels[:, -1])
    m = 37
    turned = ring_rig([y + m * step for y in DEMO_YAWS])
    shifted = stitch(turned, solid_images(turned, palette), spec, workers=4)
    shift_ok = np.array_equal(shifted.pixels, np.roll(pano.pixels, m, axis=1))

    ok = coverage == 1.0 and seams_ok and wrap_ok and shift_ok and elapsed < 10
    assert criterion(ok, f"coverage {coverage:.4%}, seams {[round(s, 2) for s in seams]} vs {target} "
                         f"({'ok' if seams_ok else 'mismatch'}), wrap {wrap_ok}, cyclic shift {shift_ok}, "
                         f"{elapsed:.2f}s")


# 6 -------------------------------------------------------------------------------


def test_criterion_06_metric_reproduction(criterion):
    def recs(scores):
        return [QARecord(str(i), "N1", "q", "a", score=s) for i, s in enumerate(scores)]

    exact = (normalize_scores(recs([5] * 5 + [1] * 5)) == 50.0
             and normalize_scores(recs([5] * 8)) == 100.0
             and normalize_scores(recs([1] * 8)) == 0.0)
    report = category_report(read_jsonl(FIXTURES / "scores_24.jsonl")).to_json()
    golden = json.loads((FIXTURES / "scores_24_report.json").read_text())
    diffs = [abs(report["categories"][c]["score"] - g["score"]) for c, g in golden["categories"].items()]
    diffs += [abs(report["subsets"][s] - golden["subsets"][s]) for s in "NOD"]
    diffs += [abs(report["avg"] - golden["avg"])]
    counts_ok = all(report["categories"][c]["count"] == g["count"] for c, g in golden["categories"].items())
    ok = exact and counts_ok and max(diffs) <= 1e-9
    assert criterion(ok, f"endpoints/midpoint exact {exact}, golden table max diff {max(diffs):.1e} (<= 1e-9)")


# 7 -------------------------------------------------------------------------------


def _star(rng, cx, cy, n, rmin, rmax):
    angles = (np.arange(n) + rng.uniform(0, 0.8, n)) * 2 * math.pi / n
    radii = rng.uniform(rmin, rmax, n)
    return PolygonRegion(np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1))


def _scan_mean_depth(verts, depth):
    vals = []
    n = len(verts)
    for j in range(depth.shape[0]):
        for i in range(depth.shape[1]):
            px, py = i + 0.5, j + 0.5
            inside = False
            for e in range(n):
                x1, y1 = verts[e]
                x2, y2 = verts[(e + 1) % n]
                if (y1 > py) != (y2 > py) and px < x1 + (py - y1) * (x2 - x1) / (y2 - y1):
                    inside = not inside
            if inside and not math.isnan(depth[j, i]):
                vals.append(float(depth[j, i]))
    return math.fsum(vals) / len(vals)


def test_criterion_07_geometry_oracles(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(77)
    H, W = 40, 60
    depth = rng.uniform(1.0, 80.0, (H, W))
    depth[rng.random((H, W)) < 0.05] = np.nan
    dm = DepthMap(depth)
    depth_mismatch = 0
    for _ in range(50):
        poly = _star(rng, rng.uniform(8, 52), rng.uniform(8, 32), int(rng.integers(4, 10)), 3, 8)
        if mean_depth(poly, dm) != _scan_mean_depth(poly.vertices, depth):
            depth_mismatch += 1

    asym_fail, pairs = 0, 0
    while pairs < 100:
        a = _star(rng, rng.uniform(0, 20), rng.uniform(0, 20), int(rng.integers(4, 8)), 4, 4.0001)
        b = _star(rng, rng.uniform(0, 20), rng.uniform(0, 20), int(rng.integers(4, 8)), 4, 4.0001)
        fwd = occlusion_order(a, b, 0, 1)
        if fwd is None:
            continue
        pairs += 1
        rev = occlusion_order(b, a, 1, 0)
        if rev is None or (rev.occluder, rev.occluded) != (fwd.occluder, fwd.occluded):
            asym_fail += 1

    sq_a = PolygonRegion([[0.3, 0.2], [1.3, 0.2], [1.3, 1.2], [0.3, 1.2]])
    sq_b = PolygonRegion([[0.8, 0.2], [1.8, 0.2], [1.8, 1.2], [0.8, 1.2]])
    errors = [abs(polygon_overlap(sq_a, sq_b, r).iou - 1 / 3) for r in (1, 2, 4, 8)]
    monotone = all(b <= a for a, b in zip(errors, errors[1:]))
    elapsed = time.perf_counter() - start
    ok = depth_mismatch == 0 and asym_fail == 0 and monotone and elapsed < 20
    assert criterion(ok, f"mean_depth mismatches {depth_mismatch}/50, antisymmetry failures {asym_fail}/100, "
                         f"IoU errors over r=1,2,4,8 {[round(e, 4) for e in errors]}, {elapsed:.2f}s")


# 8 -------------------------------------------------------------------------------


def test_criterion_08_visibility_buckets(criterion):
    fractions = [0.0, 0.399999, 0.40, 0.60, 0.80, 1.0]
    got = [visibility_bucket(f) for f in fractions]
    ok = got == [1, 1, 2, 3, 4, 4]
    assert criterion(ok, f"{fractions} -> {got}")


# 9 -------------------------------------------------------------------------------


def test_criterion_09_cli_determinism(criterion, tmp_path, capsys):
    img = tmp_path / "pano.ppm"
    write_ppm(img, np.random.default_rng(9).integers(0, 256, (112, 224, 3), dtype=np.uint8))
    blobs = []
    for run, workers in enumerate((1, 1, 4, 4)):
        out, mask = tmp_path / f"h{run}.txt", tmp_path / f"m{run}.pgm"
        code = cli.main(["attend", "--image", str(img), "--seed", "1234", "--window", "16", "--top-k", "24",
                         "--workers", str(workers), "--out", str(out), "--mask", str(mask)])
        assert code == 0
        blobs.append((out.read_bytes(), mask.read_bytes()))
    capsys.readouterr()
    ok = all(b == blobs[0] for b in blobs)
    assert criterion(ok, f"matrix and mask bytes identical across 2 runs x workers {{1, 4}}: {ok}")


# 10 ------------------------------------------------------------------------------


def test_criterion_10_pha_block_sanity(criterion):
    # eps far below the row variances, so normalised rows have unit variance to ~1e-12
    eps = 1e-12
    worst_mean = worst_var = 0.0
    finite = shapes = True
    for side in (2, 7, 14):
        L, d = side * side, 32
        rng = SplitMix64(side)
        cfg = AttentionConfig(d, 4, window_size=7, top_k=16, eps=eps)
        idx = IndexerConfig.from_bottleneck(d, 196, 4)
        block = BlockParams.init(rng, d)
        block.ln1_gamma, block.ln1_beta = rng.uniform(0.5, 1.5, d), rng.uniform(-0.5, 0.5, d)
        block.ln2_gamma, block.ln2_beta = rng.uniform(0.5, 1.5, d), rng.uniform(-0.5, 0.5, d)
        x = TokenSequence(rng.uniform(-1, 1, (L, d)), has_cls=False)
        t = pha_trace(x, AttentionWeights.init(rng, d), AttentionWeights.init(rng, d),
                      IndexerWeights.init(rng, d, idx), idx, PositionBias.init(rng, side, side, has_cls=False),
                      gate_mlp(rng), cfg, block)
        finite &= bool(np.isfinite(t.output).all())
        shapes &= t.output.shape == x.hidden.shape
        for norm in (t.norm1, t.norm2):
            worst_mean = max(worst_mean, float(np.abs(norm.mean(axis=1)).max()))
            worst_var = max(worst_var, float(np.abs(norm.var(axis=1) - 1).max()))
    ok = finite and shapes and worst_mean <= 1e-9 and worst_var <= 1e-6
    assert criterion(ok, f"finite {finite}, shape-preserving {shapes}, max |mean| {worst_mean:.1e} (<= 1e-9), "
                         f"max |var - 1| {worst_var:.1e} (<= 1e-6) at eps {eps:g}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
