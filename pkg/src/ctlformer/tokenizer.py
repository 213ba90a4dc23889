"""Image-to-token front end: conv stem, two scale branches, soft split.

Tokenization concatenates a fine and a coarse feature map along channels,
cuts the result into overlapping patches (unfold), and projects each patch
row to the embed dimension. Detokenization is the exact inverse shape-wise:
back-project tokens to patch rows, overlap-add them (fold), and divide by
the patch count map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tp
from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class TokenizerConfig:
    stem_channels: int = 32
    stem_kernel: int = 3
    fine_kernel: int = 3
    coarse_kernel: int = 5
    unfold_kernel: int = 7
    unfold_stride: int = 2
    unfold_pad: int = 3
    embed_dim: int = 128
    detok_channels: int = 32

    def __post_init__(self):
        if self.fine_kernel >= self.coarse_kernel:
            raise ContractError(
                f"fine_kernel ({self.fine_kernel}) must be smaller than "
                f"coarse_kernel ({self.coarse_kernel})"
            )
        if self.unfold_stride > self.unfold_kernel:
            raise ContractError(
                f"unfold_stride ({self.unfold_stride}) must not exceed "
                f"unfold_kernel ({self.unfold_kernel})"
            )
        for name in ("stem_channels", "stem_kernel", "fine_kernel", "unfold_kernel",
                     "unfold_stride", "embed_dim", "detok_channels"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.unfold_pad < 0:
            raise ContractError("unfold_pad must be >= 0")
        for name in ("stem_kernel", "fine_kernel", "coarse_kernel"):
            if getattr(self, name) % 2 == 0:
                raise ContractError(f"{name} must be odd so same-padding preserves size")

    @property
    def patch_len(self) -> int:
        """Length of one unfolded patch row: both branches' channels times k*k."""
        return 2 * self.stem_channels * self.unfold_kernel**2

    def grid_for(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.unfold_kernel, self.unfold_stride, self.unfold_pad
        return ((h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)


@dataclass(frozen=True)
class TokenMap:
    """A grid of tokens: (N, D) rows laid out row-major over grid_h x grid_w."""

    tokens: Tensor
    grid_h: int
    grid_w: int
    scale_tag: str = ""

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ShapeError(f"tokens must be 2-D (N, D), got {self.tokens.shape}")
        if self.grid_h * self.grid_w != self.tokens.shape[0]:
            raise ShapeError(
                f"token count {self.tokens.shape[0]} does not match grid "
                f"{self.grid_h}x{self.grid_w}"
            )


@dataclass
class TokenizerParams:
    """Learnable pieces of the front end; conv biases are stored (C,1,1)."""

    stem_w: Tensor
    stem_b: Tensor
    fine_w: Tensor
    fine_b: Tensor
    coarse_w: Tensor
    coarse_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    back_w: Tensor
    back_b: Tensor


def embed_stem(image: Tensor, params: TokenizerParams, cfg: TokenizerConfig) -> Tensor:
    """Stride-1 same-padded conv lifting the input to stem_channels maps."""
    if image.ndim != 3:
        raise ShapeError(f"embed_stem expects (C, H, W), got {image.shape}")
    _, h, w = image.shape
    if h < cfg.coarse_kernel or w < cfg.coarse_kernel:
        raise ShapeError(
            f"input {h}x{w} is smaller than the coarse kernel {cfg.coarse_kernel}"
        )
    out = tp.conv2d(image, params.stem_w, 1, (cfg.stem_kernel - 1) // 2)
    return tp.add(out, params.stem_b)


def multi_scale_features(feat: Tensor, params: TokenizerParams, cfg: TokenizerConfig) -> tuple[Tensor, Tensor]:
    """Parallel fine and coarse convolutions over the stem output, same size."""
    fine = tp.add(tp.conv2d(feat, params.fine_w, 1, (cfg.fine_kernel - 1) // 2), params.fine_b)
    coarse = tp.add(tp.conv2d(feat, params.coarse_w, 1, (cfg.coarse_kernel - 1) // 2), params.coarse_b)
    return fine, coarse


def tokenize(fine: Tensor, coarse: Tensor, params: TokenizerParams, cfg: TokenizerConfig) -> TokenMap:
    """Concatenate the two branches, soft-split into patches, project to D."""
    if fine.shape != coarse.shape:
        raise ShapeError(f"branch shapes differ: {fine.shape} vs {coarse.shape}")
    _, h, w = fine.shape
    gh, gw = cfg.grid_for(h, w)
    if gh < 1 or gw < 1:
        raise ContractError(f"input {h}x{w} yields an empty token grid under {cfg}")
    stacked = tp.concat([fine, coarse], axis=0)
    cols = tp.unfold(stacked, cfg.unfold_kernel, cfg.unfold_stride, cfg.unfold_pad)
    tokens = tp.add(tp.matmul(cols, params.proj_w), params.proj_b)
    return TokenMap(tokens, gh, gw, scale_tag="fine+coarse")


def detokenize(tm: TokenMap, target_shape: tuple[int, int, int], params: TokenizerParams,
               cfg: TokenizerConfig) -> Tensor:
    """Back-project tokens to patch rows and overlap-add them onto the target.

    Overlap counts are divided out, so patch contributions form a partition
    of unity. target_shape is (detok_channels, H, W) and must reproduce the
    token grid under the unfold arithmetic.
    """
    c, h, w = (int(v) for v in target_shape)
    if c != cfg.detok_channels:
        raise ShapeError(
            f"target channels {c} differ from detok_channels {cfg.detok_channels}"
        )
    if cfg.grid_for(h, w) != (tm.grid_h, tm.grid_w):
        raise ShapeError(
            f"target {h}x{w} implies grid {cfg.grid_for(h, w)}, token map has "
            f"{(tm.grid_h, tm.grid_w)}"
        )
    patches = tp.add(tp.matmul(tm.tokens, params.back_w), params.back_b)
    folded = tp.fold(patches, (c, h, w), cfg.unfold_kernel, cfg.unfold_stride, cfg.unfold_pad)
    cm = tp.count_map(h, w, cfg.unfold_kernel, cfg.unfold_stride, cfg.unfold_pad)
    if cm.min() < 1.0:
        raise ContractError(
            f"unfold geometry k={cfg.unfold_kernel} s={cfg.unfold_stride} "
            f"p={cfg.unfold_pad} leaves pixels of {h}x{w} uncovered"
        )
    inv = Tensor((1.0 / cm)[None, :, :])
    return tp.mul(folded, inv)
