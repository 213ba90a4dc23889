"""Noise-adaptive gating: per-token noise descriptors and learned gates.

Each token gets two descriptors measured on its receptive patch of the raw
input tile: the standard deviation of a Laplacian-filtered copy (high-pass
energy) and the standard deviation of the raw intensities. A two-layer MLP
squashes them to a gate in (0, 1). Gates act twice inside a transformer
block: as an additive log-bias on attention logits (pull weight toward
noisy keys) and as a convex residual blend (let clean tokens pass through).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tp
from .errors import ContractError, NumericError, ShapeError
from .tensor import Tensor
from .tokenizer import TokenizerConfig

GATE_LOG_EPS = 1e-6


@dataclass(frozen=True)
class GateConfig:
    features: int = 2
    hidden: int = 16
    strength: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if self.hidden < 1:
            raise ContractError("gate hidden width must be >= 1")
        if self.strength < 0:
            raise ContractError("gate strength must be >= 0")
        if self.features != 2:
            raise ContractError("descriptor extraction produces exactly 2 features")


@dataclass(frozen=True)
class NoiseDescriptor:
    """Per-token noise features, (N, F), non-negative and finite."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError(f"descriptors must be (N, F), got {self.values.shape}")
        if not np.isfinite(self.values.data).all():
            raise NumericError("noise descriptors contain non-finite values")


@dataclass(frozen=True)
class GateVector:
    """Per-token gates, (N, 1), values in [0, 1] (sigmoid output saturates in f32)."""

    g: Tensor

    def __post_init__(self):
        if self.g.ndim != 2 or self.g.shape[1] != 1:
            raise ShapeError(f"gates must be (N, 1), got {self.g.shape}")
        d = self.g.data
        if not np.isfinite(d).all() or d.min() < 0.0 or d.max() > 1.0:
            raise ContractError("gates must be finite and within [0, 1]")


@dataclass
class GateNetParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def _edge_pad(img: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(img, pad, mode="edge") if pad else img


def _laplacian(img: np.ndarray) -> np.ndarray:
    """4-neighbour Laplacian with edge replication.

    Summation is grouped as ((up+down)+(left+right)) - 4*center so a
    constant input yields exact zeros in floating point.
    """
    p = _edge_pad(img, 1)
    return (p[:-2, 1:-1] + p[2:, 1:-1]) + (p[1:-1, :-2] + p[1:-1, 2:]) - 4.0 * p[1:-1, 1:-1]


def _patch_rows(img: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Token receptive patches as rows, with edge padding instead of zeros."""
    p = _edge_pad(img, pad)
    win = np.lib.stride_tricks.sliding_window_view(p, (k, k))
    win = win[::stride, ::stride]
    return win.reshape(win.shape[0] * win.shape[1], k * k)


def _row_std(rows: np.ndarray) -> np.ndarray:
    # anchoring on the first entry makes a constant row an exact zero
    shifted = rows - rows[:, :1]
    mu = shifted.mean(axis=1, keepdims=True)
    return np.sqrt(((shifted - mu) ** 2).mean(axis=1))


def estimate_noise(image_tile: Tensor, token_grid: tuple[int, int], cfg: TokenizerConfig) -> NoiseDescriptor:
    """Measure per-token noise on the raw tile; constant under parameters.

    Descriptors are computed in float64 and returned as a constant float32
    tensor (no gradient path back to the image).
    """
    if image_tile.ndim != 3 or image_tile.shape[0] != 1:
        raise ShapeError(f"expected a (1, H, W) tile, got {image_tile.shape}")
    _, h, w = image_tile.shape
    if cfg.grid_for(h, w) != tuple(token_grid):
        raise ContractError(
            f"token grid {tuple(token_grid)} does not match tile {h}x{w} "
            f"under the unfold arithmetic {cfg.grid_for(h, w)}"
        )
    img = image_tile.data[0].astype(np.float64)
    if not np.isfinite(img).all():
        raise NumericError("noise estimation needs finite pixels")
    k, s, p = cfg.unfold_kernel, cfg.unfold_stride, cfg.unfold_pad
    lap_std = _row_std(_patch_rows(_laplacian(img), k, s, p))
    raw_std = _row_std(_patch_rows(img, k, s, p))
    values = np.stack([lap_std, raw_std], axis=1).astype(np.float32)
    return NoiseDescriptor(Tensor(values))


def compute_gates(desc: NoiseDescriptor, params: GateNetParams) -> GateVector:
    """Two-layer gate MLP: sigmoid(W2 tanh(W1 d + b1) + b2), one gate per token."""
    f = desc.values.shape[1]
    if params.w1.shape[0] != f:
        raise ShapeError(
            f"gate net expects {params.w1.shape[0]} features, descriptors have {f}"
        )
    hidden = tp.tanh(tp.add(tp.matmul(desc.values, params.w1), params.b1))
    return GateVector(tp.sigmoid(tp.add(tp.matmul(hidden, params.w2), params.b2)))


def apply_gates(attn_logits: Tensor, gates: GateVector, strength: float = 1.0) -> Tensor:
    """Bias attention logits toward high-gate keys: logits + s*ln(g + eps).

    The bias enters along the key axis, so a uniform gate vector shifts
    every row by a constant and leaves the post-softmax weights unchanged.
    """
    if strength < 0:
        raise ContractError("gate strength must be >= 0")
    if attn_logits.ndim != 3:
        raise ShapeError(f"attention logits must be (heads, N, N), got {attn_logits.shape}")
    n = attn_logits.shape[-1]
    if attn_logits.shape[-2] != n or gates.g.shape[0] != n:
        raise ShapeError(
            f"gate count {gates.g.shape[0]} does not match logits {attn_logits.shape}"
        )
    if strength == 0.0:
        return attn_logits
    bias = tp.log(tp.add(gates.g, GATE_LOG_EPS))
    bias_keys = tp.reshape(tp.transpose(bias, (1, 0)), (1, 1, n))
    return tp.add(attn_logits, tp.mul(bias_keys, float(strength)))


def blend_residual(attn_out: Tensor, identity_in: Tensor, gates: GateVector) -> Tensor:
    """Per-token convex mix: g*attn_out + (1-g)*identity_in."""
    if attn_out.shape != identity_in.shape:
        raise ShapeError(
            f"blend inputs differ: {attn_out.shape} vs {identity_in.shape}"
        )
    if gates.g.shape[0] != attn_out.shape[0]:
        raise ShapeError(
            f"gate count {gates.g.shape[0]} does not match tokens {attn_out.shape}"
        )
    g = gates.g
    return tp.add(tp.mul(g, attn_out), tp.mul(tp.sub(1.0, g), identity_in))


def uniform_gates(n: int, value: float = 0.5) -> GateVector:
    """Constant gate vector; used when gating is disabled (ablation)."""
    return GateVector(Tensor(np.full((n, 1), value, dtype=np.float32)))
