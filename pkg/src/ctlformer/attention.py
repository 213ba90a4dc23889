"""Local-global interactive self-attention over token grids.

Each block runs two multi-head attention branches over the same normalized
tokens: a full branch and a local branch whose logits are masked to a
Chebyshev window on the token grid. A learned scalar mixes the branches,
with the mixing weight flipped on alternate block indices so depth
alternates between local and global emphasis. Gates from the noise module
bias both branches' logits and blend the attention update against the
identity path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tp
from .errors import ContractError, ShapeError
from .gating import GateVector, apply_gates, blend_residual
from .tensor import Tensor
from .tokenizer import TokenMap

PARITY_CHOICES = ("local-first", "global-first")


@dataclass(frozen=True)
class AttentionConfig:
    dim: int = 128
    heads: int = 4
    window: int = 3
    alpha_init: float = 0.5
    block_parity: str = "local-first"
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads != 0:
            raise ContractError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.window < 1 or self.window % 2 == 0:
            raise ContractError(f"window must be odd and >= 1, got {self.window}")
        if not 0.0 <= self.alpha_init <= 1.0:
            raise ContractError(f"alpha_init must lie in [0, 1], got {self.alpha_init}")
        if self.block_parity not in PARITY_CHOICES:
            raise ContractError(f"block_parity must be one of {PARITY_CHOICES}")
        if self.mlp_ratio < 1:
            raise ContractError("mlp_ratio must be >= 1")


@dataclass
class BranchParams:
    """Projections of one attention branch."""

    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    o_w: Tensor
    o_b: Tensor


@dataclass
class BlockParams:
    norm1_gain: Tensor
    norm1_bias: Tensor
    local: BranchParams
    glob: BranchParams
    raw_alpha: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    def alpha(self) -> Tensor:
        """Branch mixing weight in (0, 1)."""
        return tp.sigmoid(self.raw_alpha)


@lru_cache(maxsize=16)
def _local_mask(grid_h: int, grid_w: int, window: int) -> np.ndarray | None:
    """Additive mask (0 allowed / -inf blocked) for a Chebyshev window.

    Returns None when the window already covers the whole grid, so the
    local branch runs the exact same ops as the full branch.
    """
    radius = (window - 1) // 2
    if radius >= max(grid_h, grid_w) - 1:
        return None
    n = grid_h * grid_w
    rows = np.arange(n) // grid_w
    cols = np.arange(n) % grid_w
    dr = np.abs(rows[:, None] - rows[None, :])
    dc = np.abs(cols[:, None] - cols[None, :])
    allowed = np.maximum(dr, dc) <= radius
    mask = np.where(allowed, 0.0, -np.inf).astype(np.float32)[None, :, :]
    mask.setflags(write=False)
    return mask


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return tp.transpose(tp.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return tp.reshape(tp.transpose(x, (1, 0, 2)), (n, h * dh))


def _attend(tokens: Tensor, params: BranchParams, heads: int,
            mask: np.ndarray | None = None,
            gates: GateVector | None = None, gate_strength: float = 0.0,
            return_weights: bool = False):
    """Multi-head scaled dot-product attention with optional mask and gate bias."""
    n, d = tokens.shape
    if d % heads != 0:
        raise ShapeError(f"token dim {d} is not divisible by {heads} heads")
    dh = d // heads
    q = _split_heads(tp.add(tp.matmul(tokens, params.q_w), params.q_b), heads)
    k = _split_heads(tp.add(tp.matmul(tokens, params.k_w), params.k_b), heads)
    v = _split_heads(tp.add(tp.matmul(tokens, params.v_w), params.v_b), heads)
    logits = tp.mul(tp.matmul(q, tp.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    if gates is not None:
        logits = apply_gates(logits, gates, gate_strength)
    weights = tp._softmax_raw(logits, mask, axis=-1)
    ctx = _merge_heads(tp.matmul(weights, v))
    out = tp.add(tp.matmul(ctx, params.o_w), params.o_b)
    if return_weights:
        return out, weights.data
    return out


def full_attention(tm: TokenMap, params: BranchParams, heads: int,
                   return_weights: bool = False):
    """Every token attends to every token."""
    return _attend(tm.tokens, params, heads, return_weights=return_weights)


def local_attention(tm: TokenMap, params: BranchParams, heads: int, window: int,
                    return_weights: bool = False):
    """Attention restricted to a (window x window) Chebyshev neighbourhood.

    A window covering the whole grid degenerates to full attention and is
    computed by the identical unmasked path.
    """
    if window < 1 or window % 2 == 0:
        raise ContractError(f"window must be odd and >= 1, got {window}")
    mask = _local_mask(tm.grid_h, tm.grid_w, window)
    return _attend(tm.tokens, params, heads, mask=mask, return_weights=return_weights)


def interact(local_out: Tensor, global_out: Tensor, alpha, block_index: int,
             cfg: AttentionConfig) -> Tensor:
    """Convex branch mix with parity-alternating emphasis.

    On blocks whose parity matches cfg.block_parity the local branch gets
    weight alpha; on the others it gets 1 - alpha.
    """
    if local_out.shape != global_out.shape:
        raise ShapeError(f"branch outputs differ: {local_out.shape} vs {global_out.shape}")
    if block_index < 0:
        raise ContractError("block_index must be >= 0")
    prefer_local = (block_index % 2 == 0) == (cfg.block_parity == "local-first")
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(np.float32(alpha))
    beta = alpha if prefer_local else tp.sub(1.0, alpha)
    return tp.add(tp.mul(beta, local_out), tp.mul(tp.sub(1.0, beta), global_out))


def _ffn(x: Tensor, params: BlockParams) -> Tensor:
    hidden = tp.gelu(tp.add(tp.matmul(x, params.ffn_w1), params.ffn_b1))
    return tp.add(tp.matmul(hidden, params.ffn_w2), params.ffn_b2)


def transformer_block(tm: TokenMap, params: BlockParams, gates: GateVector,
                      cfg: AttentionConfig, block_index: int,
                      gate_strength: float = 1.0) -> TokenMap:
    """Pre-norm block: gated dual-branch attention, then feed-forward.

    The attention update is blended against the identity path by the
    gates, so out = x + g * mix(local, global); the feed-forward residual
    is ungated. Grid dimensions pass through unchanged.
    """
    n = tm.tokens.shape[0]
    if gates.g.shape[0] != n:
        raise ContractError(f"gate count {gates.g.shape[0]} does not match {n} tokens")
    x = tm.tokens
    h = tp.layernorm(x, params.norm1_gain, params.norm1_bias)
    mask = _local_mask(tm.grid_h, tm.grid_w, cfg.window)
    lo = _attend(h, params.local, cfg.heads, mask=mask, gates=gates, gate_strength=gate_strength)
    go = _attend(h, params.glob, cfg.heads, mask=None, gates=gates, gate_strength=gate_strength)
    mixed = interact(lo, go, params.alpha(), block_index, cfg)
    a = blend_residual(tp.add(x, mixed), x, gates)
    y = tp.add(a, _ffn(tp.layernorm(a, params.norm2_gain, params.norm2_bias), params))
    return TokenMap(y, tm.grid_h, tm.grid_w, tm.scale_tag)
