"""Denoiser assembly: conv stem, token pipeline, gated blocks, conv head.

A single tile flows stem -> fine/coarse branches -> tokens (+position
embedding) -> noise gates -> a stack of gated local-global transformer
blocks -> detokenize -> 3x3 head conv predicting the noise map, which is
subtracted from the input when the model runs in residual mode.

Parameters live in a structured dataclass with a deterministic flat
name -> tensor view used for initialization order, checkpoints, and the
optimizer. Checkpoints are little-endian binary: magic "CTLF", u32
version, u64 step, u64 seed, length-prefixed JSON config, then per
parameter a length-prefixed name, u32 rank, u32 dims, and raw float32
data. Round trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tp
from .attention import AttentionConfig, BlockParams, BranchParams, transformer_block
from .errors import ContractError, FormatVersionError, IntegrityError, ShapeError
from .gating import (
    GateConfig,
    GateNetParams,
    compute_gates,
    estimate_noise,
    uniform_gates,
)
from .tensor import Tensor
from .tokenizer import (
    TokenMap,
    TokenizerConfig,
    TokenizerParams,
    detokenize,
    embed_stem,
    multi_scale_features,
    tokenize,
)

CHECKPOINT_MAGIC = b"CTLF"
CHECKPOINT_VERSION = 1
HEAD_KERNEL = 3
PARAM_BUDGET = 1_850_000

_BRANCH_FIELDS = (("q_proj", "q_w", "q_b"), ("k_proj", "k_w", "k_b"),
                  ("v_proj", "v_w", "v_b"), ("out_proj", "o_w", "o_b"))


@dataclass(frozen=True)
class ModelConfig:
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    depth: int = 4
    tile_size: int = 64
    residual: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ContractError(f"depth must be >= 1, got {self.depth}")
        if self.attention.dim != self.tokenizer.embed_dim:
            raise ContractError(
                f"attention dim {self.attention.dim} must equal token embed "
                f"dim {self.tokenizer.embed_dim}"
            )
        t = self.tokenizer
        if self.tile_size < t.coarse_kernel:
            raise ContractError(
                f"tile_size {self.tile_size} is smaller than the coarse "
                f"kernel {t.coarse_kernel}"
            )
        gh, gw = t.grid_for(self.tile_size, self.tile_size)
        if gh < 1 or gw < 1:
            raise ContractError(
                f"tile_size {self.tile_size} yields an empty token grid"
            )
        cm = tp.count_map(self.tile_size, self.tile_size, t.unfold_kernel,
                          t.unfold_stride, t.unfold_pad)
        if cm.min() < 1.0:
            raise ContractError(
                f"tile_size {self.tile_size} leaves pixels uncovered under "
                f"unfold k={t.unfold_kernel} s={t.unfold_stride} p={t.unfold_pad}"
            )

    def token_grid(self) -> tuple[int, int]:
        return self.tokenizer.grid_for(self.tile_size, self.tile_size)

    def token_count(self) -> int:
        gh, gw = self.token_grid()
        return gh * gw


@dataclass
class Parameters:
    """All learnable tensors, with a deterministic flat named view."""

    tok: TokenizerParams
    pos_embed: Tensor
    blocks: list[BlockParams]
    gate: GateNetParams
    head_w: Tensor
    head_b: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        out = {
            "stem.w": self.tok.stem_w, "stem.b": self.tok.stem_b,
            "fine.w": self.tok.fine_w, "fine.b": self.tok.fine_b,
            "coarse.w": self.tok.coarse_w, "coarse.b": self.tok.coarse_b,
            "token_proj.w": self.tok.proj_w, "token_proj.b": self.tok.proj_b,
            "pos_embed": self.pos_embed,
        }
        for i, blk in enumerate(self.blocks):
            base = f"block.{i}"
            out[f"{base}.norm1.gain"] = blk.norm1_gain
            out[f"{base}.norm1.bias"] = blk.norm1_bias
            for branch_name, branch in (("local", blk.local), ("glob", blk.glob)):
                for proj, w_attr, b_attr in _BRANCH_FIELDS:
                    out[f"{base}.{branch_name}.{proj}.w"] = getattr(branch, w_attr)
                    out[f"{base}.{branch_name}.{proj}.b"] = getattr(branch, b_attr)
            out[f"{base}.mix.raw_alpha"] = blk.raw_alpha
            out[f"{base}.norm2.gain"] = blk.norm2_gain
            out[f"{base}.norm2.bias"] = blk.norm2_bias
            out[f"{base}.ffn.fc1.w"] = blk.ffn_w1
            out[f"{base}.ffn.fc1.b"] = blk.ffn_b1
            out[f"{base}.ffn.fc2.w"] = blk.ffn_w2
            out[f"{base}.ffn.fc2.b"] = blk.ffn_b2
        out["gate.fc1.w"] = self.gate.w1
        out["gate.fc1.b"] = self.gate.b1
        out["gate.fc2.w"] = self.gate.w2
        out["gate.fc2.b"] = self.gate.b2
        out["detok_proj.w"] = self.tok.back_w
        out["detok_proj.b"] = self.tok.back_b
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def scalar_count(self) -> int:
        return sum(t.size for t in self.named_tensors().values())


def _shape_table(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Every parameter's (name, shape, init kind) in canonical order.

    Kinds: conv (fan-in normal), proj (truncated normal), bias (zeros),
    gain (ones), alpha (logit of alpha_init).
    """
    t, a = cfg.tokenizer, cfg.attention
    c, d = t.stem_channels, a.dim
    hid = a.mlp_ratio * d
    patch_out = t.detok_channels * t.unfold_kernel * t.unfold_kernel
    rows = [
        ("stem.w", (c, 1, t.stem_kernel, t.stem_kernel), "conv"),
        ("stem.b", (c, 1, 1), "bias"),
        ("fine.w", (c, c, t.fine_kernel, t.fine_kernel), "conv"),
        ("fine.b", (c, 1, 1), "bias"),
        ("coarse.w", (c, c, t.coarse_kernel, t.coarse_kernel), "conv"),
        ("coarse.b", (c, 1, 1), "bias"),
        ("token_proj.w", (t.patch_len, d), "proj"),
        ("token_proj.b", (d,), "bias"),
        ("pos_embed", (cfg.token_count(), d), "proj"),
    ]
    for i in range(cfg.depth):
        base = f"block.{i}"
        rows += [(f"{base}.norm1.gain", (d,), "gain"),
                 (f"{base}.norm1.bias", (d,), "bias")]
        for branch_name in ("local", "glob"):
            for proj, _, _ in _BRANCH_FIELDS:
                rows += [(f"{base}.{branch_name}.{proj}.w", (d, d), "proj"),
                         (f"{base}.{branch_name}.{proj}.b", (d,), "bias")]
        rows += [(f"{base}.mix.raw_alpha", (), "alpha"),
                 (f"{base}.norm2.gain", (d,), "gain"),
                 (f"{base}.norm2.bias", (d,), "bias"),
                 (f"{base}.ffn.fc1.w", (d, hid), "proj"),
                 (f"{base}.ffn.fc1.b", (hid,), "bias"),
                 (f"{base}.ffn.fc2.w", (hid, d), "proj"),
                 (f"{base}.ffn.fc2.b", (d,), "bias")]
    rows += [
        ("gate.fc1.w", (cfg.gate.features, cfg.gate.hidden), "proj"),
        ("gate.fc1.b", (cfg.gate.hidden,), "bias"),
        ("gate.fc2.w", (cfg.gate.hidden, 1), "proj"),
        ("gate.fc2.b", (1,), "bias"),
        ("detok_proj.w", (d, patch_out), "proj"),
        ("detok_proj.b", (patch_out,), "bias"),
        ("head.w", (1, t.detok_channels, HEAD_KERNEL, HEAD_KERNEL), "conv"),
        ("head.b", (1, 1, 1), "bias"),
    ]
    return rows


def param_count(cfg: ModelConfig) -> int:
    """Scalar parameter total implied by the config."""
    return sum(int(np.prod(shape, dtype=np.int64)) for _, shape, _ in _shape_table(cfg))


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x.astype(np.float32)


def _init_array(rng: np.random.Generator, shape, kind: str, alpha_init: float) -> np.ndarray:
    if kind == "conv":
        fan_in = int(np.prod(shape[1:], dtype=np.int64))
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape).astype(np.float32)
    if kind == "proj":
        return _trunc_normal(rng, shape, 0.02)
    if kind == "bias":
        return np.zeros(shape, np.float32)
    if kind == "gain":
        return np.ones(shape, np.float32)
    if kind == "alpha":
        a = min(max(alpha_init, 1e-6), 1.0 - 1e-6)
        return np.float32(math.log(a / (1.0 - a))).reshape(shape)
    raise ContractError(f"unknown init kind {kind!r}")


def _assemble(cfg: ModelConfig, flat: dict[str, Tensor]) -> Parameters:
    tok = TokenizerParams(
        stem_w=flat["stem.w"], stem_b=flat["stem.b"],
        fine_w=flat["fine.w"], fine_b=flat["fine.b"],
        coarse_w=flat["coarse.w"], coarse_b=flat["coarse.b"],
        proj_w=flat["token_proj.w"], proj_b=flat["token_proj.b"],
        back_w=flat["detok_proj.w"], back_b=flat["detok_proj.b"],
    )
    blocks = []
    for i in range(cfg.depth):
        base = f"block.{i}"
        branches = {}
        for branch_name in ("local", "glob"):
            kw = {}
            for proj, w_attr, b_attr in _BRANCH_FIELDS:
                kw[w_attr] = flat[f"{base}.{branch_name}.{proj}.w"]
                kw[b_attr] = flat[f"{base}.{branch_name}.{proj}.b"]
            branches[branch_name] = BranchParams(**kw)
        blocks.append(BlockParams(
            norm1_gain=flat[f"{base}.norm1.gain"],
            norm1_bias=flat[f"{base}.norm1.bias"],
            local=branches["local"], glob=branches["glob"],
            raw_alpha=flat[f"{base}.mix.raw_alpha"],
            norm2_gain=flat[f"{base}.norm2.gain"],
            norm2_bias=flat[f"{base}.norm2.bias"],
            ffn_w1=flat[f"{base}.ffn.fc1.w"], ffn_b1=flat[f"{base}.ffn.fc1.b"],
            ffn_w2=flat[f"{base}.ffn.fc2.w"], ffn_b2=flat[f"{base}.ffn.fc2.b"],
        ))
    gate = GateNetParams(w1=flat["gate.fc1.w"], b1=flat["gate.fc1.b"],
                         w2=flat["gate.fc2.w"], b2=flat["gate.fc2.b"])
    return Parameters(tok=tok, pos_embed=flat["pos_embed"], blocks=blocks,
                      gate=gate, head_w=flat["head.w"], head_b=flat["head.b"])


def init(cfg: ModelConfig, seed: int) -> Parameters:
    """Draw all parameters reproducibly, in canonical name order."""
    rng = np.random.default_rng(seed)
    flat = {}
    for name, shape, kind in _shape_table(cfg):
        data = _init_array(rng, shape, kind, cfg.attention.alpha_init)
        flat[name] = Tensor(data, requires_grad=True)
    return _assemble(cfg, flat)


def forward(params: Parameters, tile: Tensor, cfg: ModelConfig) -> Tensor:
    """Denoise one tile; output shape equals input shape.

    The stem path sees the tile scaled by 1/255 so activations stay O(1);
    the residual subtraction and the noise descriptors use the raw tile.
    """
    t = cfg.tile_size
    if tile.shape != (1, t, t):
        raise ShapeError(f"expected a (1, {t}, {t}) tile, got {tile.shape}")
    scaled = tp.mul(tile, np.float32(1.0 / 255.0))
    feat = tp.gelu(embed_stem(scaled, params.tok, cfg.tokenizer))
    fine, coarse = multi_scale_features(feat, params.tok, cfg.tokenizer)
    tm = tokenize(fine, coarse, params.tok, cfg.tokenizer)
    tm = TokenMap(tp.add(tm.tokens, params.pos_embed), tm.grid_h, tm.grid_w,
                  tm.scale_tag)
    if cfg.gate.enabled:
        desc = estimate_noise(tile, (tm.grid_h, tm.grid_w), cfg.tokenizer)
        gates = compute_gates(desc, params.gate)
        strength = cfg.gate.strength
    else:
        # ablation: gates pinned to the neutral 0.5, logit bias switched off
        gates = uniform_gates(tm.tokens.shape[0], 0.5)
        strength = 0.0
    for i, blk in enumerate(params.blocks):
        tm = transformer_block(tm, blk, gates, cfg.attention, i, strength)
    img = detokenize(tm, (cfg.tokenizer.detok_channels, t, t), params.tok,
                     cfg.tokenizer)
    # the net works in O(1) units; the predicted noise map is rescaled to
    # display units so a zero head still gives an exact identity
    noise = tp.mul(tp.add(tp.conv2d(img, params.head_w, 1, (HEAD_KERNEL - 1) // 2),
                          params.head_b), np.float32(255.0))
    return tp.sub(tile, noise) if cfg.residual else noise


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: Parameters
    config: ModelConfig
    step: int
    seed: int
    version: int = CHECKPOINT_VERSION


def _config_to_json(cfg: ModelConfig) -> bytes:
    return json.dumps(dataclasses.asdict(cfg), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


def _config_from_json(blob: bytes) -> ModelConfig:
    try:
        d = json.loads(blob.decode("utf-8"))
        return ModelConfig(
            tokenizer=TokenizerConfig(**d["tokenizer"]),
            attention=AttentionConfig(**d["attention"]),
            gate=GateConfig(**d["gate"]),
            depth=d["depth"], tile_size=d["tile_size"], residual=d["residual"],
        )
    except (ValueError, TypeError, KeyError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"checkpoint config record is invalid: {exc}") from exc


def save_checkpoint(params: Parameters, cfg: ModelConfig, path,
                    step: int = 0, seed: int = 0) -> None:
    named = params.named_tensors()
    cfg_blob = _config_to_json(cfg)
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<Q", int(step)),
             struct.pack("<Q", int(seed)),
             struct.pack("<I", len(cfg_blob)), cfg_blob,
             struct.pack("<I", len(named))]
    for name, tensor in named.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise IntegrityError(f"checkpoint truncated in {what}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_checkpoint(path, tile_size: int | None = None) -> Checkpoint:
    """Read a checkpoint; never returns partially loaded parameters.

    tile_size, when given, must agree with the stored config; a conflict
    is a contract error rather than a silent override.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic)")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatVersionError(
            f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    step = r.u64("step")
    seed = r.u64("seed")
    cfg_len = r.u32("config length")
    cfg = _config_from_json(r.take(cfg_len, "config"))
    if tile_size is not None and tile_size != cfg.tile_size:
        raise ContractError(
            f"requested tile size {tile_size} conflicts with checkpoint "
            f"tile size {cfg.tile_size}"
        )
    n_records = r.u32("record count")
    raw: dict[str, np.ndarray] = {}
    for _ in range(n_records):
        name_len = r.u32("record name length")
        if name_len > 4096:
            raise IntegrityError(f"implausible record name length {name_len}")
        name = r.take(name_len, "record name").decode("utf-8", errors="replace")
        rank = r.u32(f"rank of {name}")
        if rank > 8:
            raise IntegrityError(f"implausible rank {rank} for {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = r.take(4 * count, f"data of {name}")
        if name in raw:
            raise IntegrityError(f"duplicate parameter record {name}")
        raw[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
    if r.off != len(blob):
        raise IntegrityError(f"{len(blob) - r.off} trailing bytes after last record")
    flat: dict[str, Tensor] = {}
    for name, shape, _ in _shape_table(cfg):
        if name not in raw:
            raise IntegrityError(f"missing parameter record {name}")
        arr = raw.pop(name)
        if arr.shape != shape:
            raise IntegrityError(
                f"parameter record {name} has shape {arr.shape}, expected {shape}"
            )
        flat[name] = Tensor(arr, requires_grad=True)
    if raw:
        raise IntegrityError(f"unexpected parameter record {sorted(raw)[0]}")
    return Checkpoint(params=_assemble(cfg, flat), config=cfg, step=step,
                      seed=seed, version=version)
