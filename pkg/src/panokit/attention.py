"""Dense, windowed, and Top-K sparse self-attention plus the hybrid block.

Branches:

* ``dense_attention`` / ``msa_block``: plain multi-head attention in a
  post-LN transformer block.
* ``swa``: non-overlapping windows (stride equal to the window size).  The
  class token, when present, is row 0 and therefore belongs to the first
  window.  A short last window is kept as is (no padding).
* ``ssa_scores`` / ``psa_scores``: indexer score matrices; ``psa`` keeps, for
  every query, the Top-K keys of its score row and attends only to those.
* ``pha_block``: ``LN(SWA(h) + PSA(h) + h)`` followed by the FFN sub-block.

Query projections, key/value projections and the indexer projections are
computed once for the whole sequence.  Everything after that is evaluated per
query row (or per window) with a fixed operation order, so splitting rows over
``workers`` threads never changes a single bit of the output.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import (
    DimensionError,
    LinearLayer,
    Mlp,
    SplitMix64,
    as_matrix,
    layer_norm,
    relu,
    sigmoid,
    softmax_rows,
)
from .pnm import write_pgm

GATE_HIDDEN = 16


# ---------------------------------------------------------------------------
# configuration and parameter containers


@dataclass
class TokenSequence:
    hidden: np.ndarray
    has_cls: bool = True

    def __post_init__(self):
        self.hidden = as_matrix(self.hidden, "hidden")

    @property
    def length(self) -> int:
        return self.hidden.shape[0]


@dataclass
class AttentionConfig:
    d: int
    num_heads: int = 1
    window_size: int = 64
    top_k: int = 512
    eps: float = 1e-5

    def __post_init__(self):
        if self.d < 1 or self.num_heads < 1:
            raise ValueError("d and num_heads must be positive")
        if self.d % self.num_heads:
            raise ValueError(f"d={self.d} is not divisible by num_heads={self.num_heads}")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d // self.num_heads


@dataclass
class IndexerConfig:
    num_selector_heads: int = 4
    d_gate: int = 8
    d_index: int = 8
    bottleneck: int = 196

    def __post_init__(self):
        if min(self.num_selector_heads, self.d_gate, self.d_index, self.bottleneck) < 1:
            raise ValueError("indexer sizes must be positive")

    def check(self, d: int) -> None:
        if 2 * self.d_gate > d or 2 * self.d_index > d:
            raise ValueError(f"d_gate={self.d_gate} and d_index={self.d_index} must be at most d/2 = {d / 2}")

    @classmethod
    def from_bottleneck(cls, d: int, bottleneck: int = 196, num_selector_heads: int = 4) -> "IndexerConfig":
        """Split the per-head share of ``bottleneck`` evenly between gate and index dims, capped at d/2."""
        per_head = max(1, bottleneck // (2 * num_selector_heads))
        width = max(1, min(d // 2, per_head))
        return cls(num_selector_heads, width, width, bottleneck)


@dataclass
class AttentionWeights:
    wq: LinearLayer
    wk: LinearLayer
    wv: LinearLayer
    wo: LinearLayer

    def __post_init__(self):
        d = self.wq.in_dim
        for name in ("wq", "wk", "wv", "wo"):
            layer = getattr(self, name)
            if layer.in_dim != d or layer.out_dim != d:
                raise DimensionError(f"{name} must be {d}x{d}, got {layer.weight.shape}")

    @property
    def d(self) -> int:
        return self.wq.in_dim

    @classmethod
    def init(cls, rng: SplitMix64, d: int) -> "AttentionWeights":
        return cls(*(LinearLayer.init(rng, d, d) for _ in range(4)))

    @classmethod
    def zeros(cls, d: int) -> "AttentionWeights":
        return cls(*(LinearLayer.zeros(d, d) for _ in range(4)))

    def project(self, h: np.ndarray):
        return self.wq(h), self.wk(h), self.wv(h)


@dataclass
class IndexerWeights:
    """Selector projections: gate and index query/key maps plus the per-head query weighting."""

    q_gate: LinearLayer
    k_gate: LinearLayer
    q_index: LinearLayer
    k_index: LinearLayer
    head_weight: LinearLayer

    @classmethod
    def init(cls, rng: SplitMix64, d: int, cfg: IndexerConfig) -> "IndexerWeights":
        cfg.check(d)
        hg, hi = cfg.num_selector_heads * cfg.d_gate, cfg.num_selector_heads * cfg.d_index
        return cls(
            LinearLayer.init(rng, d, hg),
            LinearLayer.init(rng, d, hg),
            LinearLayer.init(rng, d, hi),
            LinearLayer.init(rng, d, hi),
            LinearLayer.init(rng, d, cfg.num_selector_heads),
        )


@dataclass
class PositionBias:
    """Learnable scalar bias for every (query, key) pair on a patch grid.

    Patch tokens are laid out row-major on a ``grid_rows x grid_cols`` grid.
    The bias depends on the row offset and on the column offset taken modulo
    the grid width, so the left and right panorama edges are neighbours.  Any
    pair touching the class token uses ``cls_value``.
    """

    grid_rows: int
    grid_cols: int
    table: np.ndarray
    cls_value: float = 0.0
    has_cls: bool = True

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.shape != (2 * self.grid_rows - 1, self.grid_cols):
            raise DimensionError(
                f"table must be {(2 * self.grid_rows - 1, self.grid_cols)}, got {self.table.shape}"
            )

    @property
    def length(self) -> int:
        return self.grid_rows * self.grid_cols + int(self.has_cls)

    @classmethod
    def init(cls, rng: SplitMix64, grid_rows: int, grid_cols: int, has_cls: bool = True) -> "PositionBias":
        table = rng.uniform(-1.0, 1.0, (2 * grid_rows - 1, grid_cols))
        return cls(grid_rows, grid_cols, table, float(rng.uniform(-1.0, 1.0, 1)[0]), has_cls)

    @classmethod
    def zeros(cls, grid_rows: int, grid_cols: int, has_cls: bool = True) -> "PositionBias":
        return cls(grid_rows, grid_cols, np.zeros((2 * grid_rows - 1, grid_cols)), 0.0, has_cls)

    def index(self, t: int, s: int):
        """Table coordinate for the pair (t, s), or ``None`` for the class-token entry."""
        off = int(self.has_cls)
        if t < off or s < off:
            return None
        rt, ct = divmod(t - off, self.grid_cols)
        rs, cs = divmod(s - off, self.grid_cols)
        return rs - rt + self.grid_rows - 1, (cs - ct) % self.grid_cols

    def lookup(self, t: int, s: int) -> float:
        ij = self.index(t, s)
        return self.cls_value if ij is None else float(self.table[ij])

    def matrix(self) -> np.ndarray:
        n = self.grid_rows * self.grid_cols
        pos = np.arange(n)
        r, c = np.divmod(pos, self.grid_cols)
        dr = r[None, :] - r[:, None] + self.grid_rows - 1
        dc = (c[None, :] - c[:, None]) % self.grid_cols
        patch = self.table[dr, dc]
        if not self.has_cls:
            return patch
        out = np.full((n + 1, n + 1), self.cls_value)
        out[1:, 1:] = patch
        return out


def gate_mlp(rng: SplitMix64, hidden: int = GATE_HIDDEN) -> Mlp:
    """Scalar-in, scalar-out gate network; the caller applies the sigmoid."""
    return Mlp.init(rng, [1, hidden, 1])


@dataclass
class BlockParams:
    """FFN and the two layer norms around the attention sub-block."""

    ffn: Mlp
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray

    @classmethod
    def init(cls, rng: SplitMix64, d: int) -> "BlockParams":
        return cls(Mlp.init(rng, [d, 4 * d, d]), np.ones(d), np.zeros(d), np.ones(d), np.zeros(d))

    @classmethod
    def zeros(cls, d: int) -> "BlockParams":
        ffn = Mlp([LinearLayer.zeros(d, 4 * d), LinearLayer.zeros(4 * d, d)])
        return cls(ffn, np.ones(d), np.zeros(d), np.ones(d), np.zeros(d))


# ---------------------------------------------------------------------------
# masks


@dataclass
class AttentionMask:
    pairs: np.ndarray

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=bool)
        if self.pairs.ndim != 2 or self.pairs.shape[0] != self.pairs.shape[1]:
            raise DimensionError(f"mask must be square, got {self.pairs.shape}")

    @property
    def count(self) -> int:
        return int(self.pairs.sum())

    def to_image(self) -> np.ndarray:
        return np.where(self.pairs, 255, 0).astype(np.uint8)


@dataclass
class HybridMask:
    """Union of a local-window mask and a sparse-selection mask."""

    local: AttentionMask
    sparse: AttentionMask

    @property
    def pairs(self) -> np.ndarray:
        return self.local.pairs | self.sparse.pairs

    @property
    def count(self) -> int:
        return int(self.pairs.sum())

    def to_image(self) -> np.ndarray:
        img = np.zeros(self.local.pairs.shape, dtype=np.uint8)
        img[self.local.pairs] = 128
        img[self.sparse.pairs] = 255
        return img


def export_mask(mask, path) -> None:
    """Write a mask as an 8-bit PGM: attended 255, unattended 0; hybrid local-only pairs 128."""
    write_pgm(path, mask.to_image())


# ---------------------------------------------------------------------------
# helpers


def _parallel_for(fn: Callable[[int], None], n: int, workers: int) -> None:
    if workers <= 1 or n <= 1:
        for i in range(n):
            fn(i)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(fn, range(n)))


def _heads(m: np.ndarray, num_heads: int, h: int) -> np.ndarray:
    dh = m.shape[-1] // num_heads
    return m[..., h * dh : (h + 1) * dh]


def _check_seq(x: TokenSequence, d: int) -> np.ndarray:
    if x.hidden.shape[1] != d:
        raise DimensionError(f"hidden states have {x.hidden.shape[1]} features, expected {d}")
    return x.hidden


# ---------------------------------------------------------------------------
# attention kernels


def dense_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Single-head ``softmax(q k^T / sqrt(d_head)) v``.

    ``mask`` (optional, boolean ``[Lq, Lk]``) marks allowed pairs; the rest get
    an additive ``-inf`` before the softmax.
    """
    q, k, v = as_matrix(q, "q"), as_matrix(k, "k"), as_matrix(v, "v")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"{k.shape[0]} keys but {v.shape[0]} values")
    logits = q @ k.T / math.sqrt(q.shape[1])
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    return softmax_rows(logits) @ v


def multi_head_attention(q, k, v, num_heads: int, mask: np.ndarray | None = None) -> np.ndarray:
    """Heads side by side over column blocks; returns the concatenation (before W_O)."""
    if q.shape[1] % num_heads:
        raise DimensionError(f"width {q.shape[1]} not divisible by {num_heads} heads")
    return np.concatenate(
        [dense_attention(_heads(q, num_heads, h), _heads(k, num_heads, h), _heads(v, num_heads, h), mask)
         for h in range(num_heads)],
        axis=1,
    )


def _attend_row(q_row: np.ndarray, k_sel: np.ndarray, v_sel: np.ndarray, num_heads: int) -> np.ndarray:
    dh = q_row.shape[0] // num_heads
    out = np.empty(q_row.shape[0])
    scale = math.sqrt(dh)
    for h in range(num_heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = k_sel[:, sl] @ q_row[sl] / scale
        z = np.exp(logits - logits.max())
        out[sl] = (z / z.sum()) @ v_sel[:, sl]
    return out


def _post_ln_block(attn_sum: np.ndarray, h: np.ndarray, block: BlockParams, eps: float) -> np.ndarray:
    h1 = layer_norm(attn_sum + h, block.ln1_gamma, block.ln1_beta, eps)
    return layer_norm(block.ffn(h1) + h1, block.ln2_gamma, block.ln2_beta, eps)


def msa_block(x: TokenSequence, w: AttentionWeights, cfg: AttentionConfig, block: BlockParams) -> TokenSequence:
    h = _check_seq(x, cfg.d)
    q, k, v = w.project(h)
    attn = w.wo(multi_head_attention(q, k, v, cfg.num_heads))
    return TokenSequence(_post_ln_block(attn, h, block, cfg.eps), x.has_cls)


def window_bounds(length: int, window_size: int) -> list[tuple[int, int]]:
    return [(s, min(s + window_size, length)) for s in range(0, length, window_size)]


def swa(x: TokenSequence, w_local: AttentionWeights, cfg: AttentionConfig, workers: int = 1):
    """Windowed attention; returns ``(output, mask)`` with the output already through W_O."""
    h = _check_seq(x, cfg.d)
    L = h.shape[0]
    q, k, v = w_local.project(h)
    windows = window_bounds(L, cfg.window_size)
    out = np.empty_like(h)
    pairs = np.zeros((L, L), dtype=bool)

    def run(i: int) -> None:
        s, e = windows[i]
        out[s:e] = multi_head_attention(q[s:e], k[s:e], v[s:e], cfg.num_heads)
        pairs[s:e, s:e] = True

    _parallel_for(run, len(windows), workers)
    return w_local.wo(out), AttentionMask(pairs)


def ssa_scores(x: TokenSequence, indexer: IndexerWeights, idx: IndexerConfig, workers: int = 1) -> np.ndarray:
    """``I[t, s] = sum_j w[t, j] * ReLU(q_I(t, j) . k_I(s, j))`` with ``w = h W_w`` used raw."""
    h = x.hidden
    H = idx.num_selector_heads
    qi, ki, wt = indexer.q_index(h), indexer.k_index(h), indexer.head_weight(h)
    if wt.shape[1] != H or qi.shape[1] != H * idx.d_index:
        raise DimensionError("indexer weights do not match the indexer config")
    L = h.shape[0]
    scores = np.empty((L, L))
    ki_heads = [_heads(ki, H, j) for j in range(H)]

    def row(t: int) -> None:
        acc = np.zeros(L)
        for j in range(H):
            acc += wt[t, j] * relu(ki_heads[j] @ _heads(qi[t], H, j))
        scores[t] = acc

    _parallel_for(row, L, workers)
    return scores


def psa_scores(
    x: TokenSequence,
    indexer: IndexerWeights,
    idx: IndexerConfig,
    pe: PositionBias,
    gate: Mlp,
    bypass_gate: bool = False,
    workers: int = 1,
) -> np.ndarray:
    """``I[t, s] = sum_j sigmoid(gate(q_G . k_G + PE[t, s])) * ReLU(q_I . k_I)``.

    Non-causal: every key is scored for every query.  ``bypass_gate`` fixes
    the gate factor to exactly 1.
    """
    h = x.hidden
    L = h.shape[0]
    H = idx.num_selector_heads
    if pe.length != L:
        raise DimensionError(f"position bias covers {pe.length} tokens, sequence has {L}")
    if gate.in_dim != 1 or gate.out_dim != 1:
        raise DimensionError("gate MLP must map scalars to scalars")
    qg, kg = indexer.q_gate(h), indexer.k_gate(h)
    qi, ki = indexer.q_index(h), indexer.k_index(h)
    if qg.shape[1] != H * idx.d_gate or qi.shape[1] != H * idx.d_index:
        raise DimensionError("indexer weights do not match the indexer config")
    bias = pe.matrix()
    kg_heads = [_heads(kg, H, j) for j in range(H)]
    ki_heads = [_heads(ki, H, j) for j in range(H)]
    scores = np.empty((L, L))

    def row(t: int) -> None:
        acc = np.zeros(L)
        for j in range(H):
            sim = relu(ki_heads[j] @ _heads(qi[t], H, j))
            if bypass_gate:
                acc += sim
            else:
                g = kg_heads[j] @ _heads(qg[t], H, j) + bias[t]
                acc += sigmoid(gate(g[:, None])[:, 0]) * sim
        scores[t] = acc

    _parallel_for(row, L, workers)
    return scores


def top_k_select(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``min(k, L)`` largest entries of each row, ascending.

    Ties at the threshold go to the lowest key index.  Returns an int array of
    shape ``[rows, min(k, L)]``.
    """
    scores = as_matrix(scores, "scores")
    if k < 1:
        raise ValueError("k must be >= 1")
    rows, L = scores.shape
    k = min(k, L)
    if k == L:
        return np.tile(np.arange(L), (rows, 1))
    thresh = np.partition(scores, L - k, axis=1)[:, L - k : L - k + 1]
    above = scores > thresh
    at = scores == thresh
    need = k - above.sum(axis=1, keepdims=True)
    chosen = above | (at & (np.cumsum(at, axis=1) <= need))
    return np.nonzero(chosen)[1].reshape(rows, k)


def sparse_attention(
    x: TokenSequence, w_sparse: AttentionWeights, selected: np.ndarray, cfg: AttentionConfig, workers: int = 1
):
    """Each query attends to its own key subset ``selected[t]``; returns ``(output, mask)``."""
    h = _check_seq(x, cfg.d)
    L = h.shape[0]
    q, k, v = w_sparse.project(h)
    out = np.empty_like(h)
    pairs = np.zeros((L, L), dtype=bool)

    def row(t: int) -> None:
        sel = selected[t]
        out[t] = _attend_row(q[t], k[sel], v[sel], cfg.num_heads)
        pairs[t, sel] = True

    _parallel_for(row, L, workers)
    return w_sparse.wo(out), AttentionMask(pairs)


def psa(
    x: TokenSequence,
    w_sparse: AttentionWeights,
    indexer: IndexerWeights,
    idx: IndexerConfig,
    pe: PositionBias,
    gate: Mlp,
    cfg: AttentionConfig,
    bypass_gate: bool = False,
    workers: int = 1,
):
    scores = psa_scores(x, indexer, idx, pe, gate, bypass_gate, workers)
    return sparse_attention(x, w_sparse, top_k_select(scores, cfg.top_k), cfg, workers)


def ssa(x: TokenSequence, w_sparse: AttentionWeights, indexer: IndexerWeights, idx: IndexerConfig,
        cfg: AttentionConfig, workers: int = 1):
    scores = ssa_scores(x, indexer, idx, workers)
    return sparse_attention(x, w_sparse, top_k_select(scores, cfg.top_k), cfg, workers)


def pha_block(
    x: TokenSequence,
    w_local: AttentionWeights,
    w_sparse: AttentionWeights,
    indexer: IndexerWeights,
    idx: IndexerConfig,
    pe: PositionBias,
    gate: Mlp,
    cfg: AttentionConfig,
    block: BlockParams,
    bypass_gate: bool = False,
    workers: int = 1,
    return_masks: bool = False,
):
    """Hybrid block: ``LN(SWA(h) + PSA(h) + h)`` then ``LN(FFN(.) + .)``.

    With ``return_masks`` the result is ``(sequence, HybridMask)``.
    """
    t = pha_trace(x, w_local, w_sparse, indexer, idx, pe, gate, cfg, block, bypass_gate, workers)
    out = TokenSequence(t.output, x.has_cls)
    return (out, t.masks) if return_masks else out


@dataclass
class PHATrace:
    """Intermediates of one hybrid block evaluation.

    ``norm1``/``norm2`` are the layer-norm rows before gamma and beta are
    applied, i.e. ``(x - mean) / sqrt(var + eps)``.
    """

    local: np.ndarray
    sparse: np.ndarray
    norm1: np.ndarray
    norm2: np.ndarray
    output: np.ndarray
    masks: HybridMask


def _standardise(m: np.ndarray, eps: float) -> np.ndarray:
    d = m.shape[1]
    return layer_norm(m, np.ones(d), np.zeros(d), eps)


def pha_trace(x, w_local, w_sparse, indexer, idx, pe, gate, cfg, block, bypass_gate=False, workers=1) -> PHATrace:
    """Same computation as ``pha_block`` with every intermediate kept."""
    h = _check_seq(x, cfg.d)
    local, m_local = swa(x, w_local, cfg, workers)
    sparse, m_sparse = psa(x, w_sparse, indexer, idx, pe, gate, cfg, bypass_gate, workers)
    norm1 = _standardise(local + sparse + h, cfg.eps)
    h1 = norm1 * block.ln1_gamma + block.ln1_beta
    norm2 = _standardise(block.ffn(h1) + h1, cfg.eps)
    out = norm2 * block.ln2_gamma + block.ln2_beta
    return PHATrace(local, sparse, norm1, norm2, out, HybridMask(m_local, m_sparse))


# ---------------------------------------------------------------------------
# bundled layer


@dataclass
class PHALayer:
    cfg: AttentionConfig
    idx: IndexerConfig
    w_local: AttentionWeights
    w_sparse: AttentionWeights
    indexer: IndexerWeights
    pe: PositionBias
    gate: Mlp
    block: BlockParams = field(repr=False)

    @classmethod
    def init(cls, rng: SplitMix64, cfg: AttentionConfig, idx: IndexerConfig,
             grid_rows: int, grid_cols: int, has_cls: bool = True) -> "PHALayer":
        return cls(
            cfg,
            idx,
            AttentionWeights.init(rng, cfg.d),
            AttentionWeights.init(rng, cfg.d),
            IndexerWeights.init(rng, cfg.d, idx),
            PositionBias.init(rng, grid_rows, grid_cols, has_cls),
            gate_mlp(rng),
            BlockParams.init(rng, cfg.d),
        )

    def __call__(self, x: TokenSequence, bypass_gate: bool = False, workers: int = 1):
        """Returns ``(sequence, HybridMask)``."""
        return pha_block(x, self.w_local, self.w_sparse, self.indexer, self.idx, self.pe, self.gate,
                         self.cfg, self.block, bypass_gate, workers, return_masks=True)

    def dense_reference(self, x: TokenSequence, workers: int = 1) -> TokenSequence:
        """Same block with the sparse branch replaced by full attention over ``w_sparse``."""
        h = _check_seq(x, self.cfg.d)
        local, _ = swa(x, self.w_local, self.cfg, workers)
        q, k, v = self.w_sparse.project(h)
        dense = self.w_sparse.wo(multi_head_attention(q, k, v, self.cfg.num_heads))
        return TokenSequence(_post_ln_block(local + dense, h, self.block, self.cfg.eps), x.has_cls)

    def tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}

        def put(prefix: str, layer: LinearLayer) -> None:
            out[f"{prefix}.weight"] = layer.weight
            if layer.bias is not None:
                out[f"{prefix}.bias"] = layer.bias

        for branch in ("w_local", "w_sparse"):
            for name in ("wq", "wk", "wv", "wo"):
                put(f"{branch}.{name}", getattr(getattr(self, branch), name))
        for name in ("q_gate", "k_gate", "q_index", "k_index", "head_weight"):
            put(f"indexer.{name}", getattr(self.indexer, name))
        out["pe.table"] = self.pe.table
        out["pe.cls"] = np.array([self.pe.cls_value])
        for i, layer in enumerate(self.gate.layers):
            put(f"gate.{i}", layer)
        for i, layer in enumerate(self.block.ffn.layers):
            put(f"ffn.{i}", layer)
        for name in ("ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta"):
            out[name] = getattr(self.block, name)
        return out
