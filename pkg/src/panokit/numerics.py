"""Dense float64 primitives shared by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64; vectors are
1-D arrays.  The helpers here check shapes eagerly so that a mismatch is
reported where it happens instead of surfacing as a broadcast error later.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "DimensionError",
    "NumericError",
    "SplitMix64",
    "LinearLayer",
    "Mlp",
    "as_matrix",
    "matmul",
    "softmax_rows",
    "layer_norm",
    "relu",
    "sigmoid",
    "mlp_forward",
    "grad_check",
    "softmax_rows_backward",
    "layer_norm_backward",
    "linear_backward",
    "sigmoid_backward",
    "format_matrix",
    "parse_matrix",
    "write_matrix",
    "read_matrix",
    "save_checkpoint",
    "load_checkpoint",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] == 0 or m.shape[1] == 0:
        raise DimensionError(f"{name} must be non-empty, got shape {m.shape}")
    return m


# ---------------------------------------------------------------------------
# deterministic initialisation

_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


class SplitMix64:
    """splitmix64 stream; the same seed yields bit-identical draws everywhere."""

    def __init__(self, seed: int):
        if not 0 <= seed <= _MASK64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = seed
        self._state = seed

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._state) + steps * np.uint64(_GAMMA)
        self._state = (self._state + n * _GAMMA) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        unit = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * unit).reshape(shape)


# ---------------------------------------------------------------------------
# layers


@dataclass
class LinearLayer:
    """``y = x @ weight + bias`` with ``weight`` stored as [in, out]."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weight = as_matrix(self.weight, "weight")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if self.bias.shape[0] != self.weight.shape[1]:
                raise DimensionError(
                    f"bias length {self.bias.shape[0]} does not match weight {self.weight.shape}"
                )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, rng: SplitMix64, in_dim: int, out_dim: int, bias: bool = True) -> "LinearLayer":
        bound = 1.0 / math.sqrt(in_dim)
        weight = rng.uniform(-bound, bound, (in_dim, out_dim))
        b = rng.uniform(-bound, bound, out_dim) if bias else None
        return cls(weight, b)

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, bias: bool = True) -> "LinearLayer":
        return cls(np.zeros((in_dim, out_dim)), np.zeros(out_dim) if bias else None)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


@dataclass
class Mlp:
    """Linear layers with ReLU in between and nothing after the last one."""

    layers: list[LinearLayer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("an MLP needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise DimensionError(
                    f"layer {i} outputs {a.out_dim} features but layer {i + 1} expects {b.in_dim}"
                )

    @classmethod
    def init(cls, rng: SplitMix64, dims: Iterable[int]) -> "Mlp":
        dims = list(dims)
        return cls([LinearLayer.init(rng, a, b) for a, b in zip(dims, dims[1:])])

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self, x)


# ---------------------------------------------------------------------------
# forward primitives


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    m = as_matrix(m)
    z = np.exp(m - m.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def layer_norm(m: np.ndarray, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Per-row normalisation with population variance, then ``gamma * x + beta``."""
    m = as_matrix(m)
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if gamma.shape[0] != m.shape[1] or beta.shape[0] != m.shape[1]:
        raise DimensionError(
            f"gamma/beta lengths {gamma.shape[0]}/{beta.shape[0]} do not match {m.shape[1]} columns"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = m.mean(axis=1, keepdims=True)
    centred = m - mu
    var = (centred * centred).mean(axis=1, keepdims=True)
    return centred / np.sqrt(var + eps) * gamma + beta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    x = as_matrix(x, "x")
    if x.shape[1] != net.in_dim:
        raise DimensionError(f"input has {x.shape[1]} features, MLP expects {net.in_dim}")
    for i, layer in enumerate(net.layers):
        x = layer(x)
        if i < len(net.layers) - 1:
            x = relu(x)
    return x


# ---------------------------------------------------------------------------
# analytic gradients (vector-Jacobian products), used by grad_check tests


def softmax_rows_backward(m: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    y = softmax_rows(m)
    return y * (upstream - (upstream * y).sum(axis=1, keepdims=True))


def layer_norm_backward(m: np.ndarray, gamma, upstream: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Gradient of ``sum(upstream * layer_norm(m, gamma, beta))`` w.r.t. ``m``."""
    m = as_matrix(m)
    n = m.shape[1]
    mu = m.mean(axis=1, keepdims=True)
    centred = m - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=1, keepdims=True) + eps)
    xhat = centred * inv_std
    g = upstream * np.asarray(gamma, dtype=np.float64).reshape(1, -1)
    return inv_std / n * (
        n * g - g.sum(axis=1, keepdims=True) - xhat * (g * xhat).sum(axis=1, keepdims=True)
    )


def linear_backward(layer: LinearLayer, x: np.ndarray, upstream: np.ndarray):
    """Returns ``(d_x, d_weight, d_bias)`` for ``layer(x)``."""
    d_x = upstream @ layer.weight.T
    d_w = as_matrix(x).T @ upstream
    d_b = upstream.sum(axis=0)
    return d_x, d_w, d_b


def sigmoid_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return upstream * s * (1.0 - s)


def grad_check(
    f: Callable[[np.ndarray], float],
    analytic_grad: np.ndarray,
    x: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max relative error between ``analytic_grad`` and central differences of ``f`` at ``x``.

    The relative error of each entry is ``|numeric - analytic| / max(|analytic|, 1e-8)``.
    """
    x = np.array(x, dtype=np.float64)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != x.shape:
        raise DimensionError(f"gradient shape {analytic_grad.shape} does not match x {x.shape}")
    worst = 0.0
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        f_plus = float(f(x))
        x[idx] = orig - h
        f_minus = float(f(x))
        x[idx] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError(f"f is not finite near x at index {idx}")
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic_grad[idx]
        worst = max(worst, abs(numeric - a) / max(abs(a), 1e-8))
    return worst


# ---------------------------------------------------------------------------
# text serialisation


def format_matrix(m: np.ndarray) -> str:
    m = as_matrix(m)
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    lines += [" ".join(format(float(v), ".17g") for v in row) for row in m]
    return "\n".join(lines) + "\n"


def _parse_matrix_lines(lines: list[str], start: int = 0) -> tuple[np.ndarray, int]:
    try:
        rows, cols = (int(t) for t in lines[start].split())
    except (IndexError, ValueError) as exc:
        raise ValueError(f"line {start + 1}: expected 'rows cols' header") from exc
    data = np.empty((rows, cols), dtype=np.float64)
    for r in range(rows):
        lineno = start + 1 + r
        if lineno >= len(lines):
            raise ValueError(f"matrix truncated: expected {rows} rows, got {r}")
        vals = lines[lineno].split()
        if len(vals) != cols:
            raise ValueError(f"line {lineno + 1}: expected {cols} values, got {len(vals)}")
        data[r] = [float(v) for v in vals]
    return data, start + 1 + rows


def parse_matrix(text: str) -> np.ndarray:
    m, _ = _parse_matrix_lines(text.splitlines())
    return m


def write_matrix(path, m: np.ndarray) -> None:
    Path(path).write_text(format_matrix(m))


def read_matrix(path) -> np.ndarray:
    return parse_matrix(Path(path).read_text())


_CKPT_MAGIC = "panokit-checkpoint 1"


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named matrices/vectors; each entry is ``<kind> <name>`` then a matrix block."""
    parts = [_CKPT_MAGIC + "\n"]
    for name, value in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"invalid tensor name {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 1:
            parts.append(f"vector {name}\n" + format_matrix(arr.reshape(1, -1)))
        elif arr.ndim == 2:
            parts.append(f"matrix {name}\n" + format_matrix(arr))
        else:
            raise DimensionError(f"{name}: only 1-D and 2-D tensors are supported")
    Path(path).write_text("".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a panokit checkpoint")
    out: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        kind, _, name = lines[i].partition(" ")
        if kind not in ("matrix", "vector") or not name:
            raise ValueError(f"line {i + 1}: expected 'matrix <name>' or 'vector <name>'")
        m, i = _parse_matrix_lines(lines, i + 1)
        out[name] = m.reshape(-1) if kind == "vector" else m
    return out
