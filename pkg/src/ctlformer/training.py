"""Deterministic training loop: adaptive-moment updates, logs, resume.

A training run is a pure function of (seed, corpus, config): each step's
batch is drawn from a fresh generator keyed by (seed, step), so a run
resumed from a checkpoint replays the exact batches an unbroken run would
have seen. Optimizer moments are persisted in a sidecar file next to the
checkpoint to make resumption bit-exact.

The loss is mean-squared error between the denoised tile and the clean
target, measured in display units.
"""

from __future__ import annotations

import csv
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tp
from .data import SliceImage, augment
from .errors import ContractError, IntegrityError, NumericError, ShapeError
from .metrics import MetricReport, build_report
from .model import ModelConfig, Parameters, forward, save_checkpoint
from .tensor import Tensor, backward
from .tiling import denoise_image

OPTIMIZER_MAGIC = b"CTLO"
OPTIMIZER_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; the moment constants follow common practice."""

    batch_size: int = 4
    learning_rate: float = 1e-4
    steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        # learning_rate 0 is allowed as a degenerate no-op used to verify
        # that the update path touches nothing when the step size vanishes
        if self.learning_rate < 0.0:
            raise ContractError(
                f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.steps < 0:
            raise ContractError(f"steps must be >= 0, got {self.steps}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError(
                f"moment decays must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0.0:
            raise ContractError(f"eps must be > 0, got {self.eps}")
        if self.checkpoint_interval < 1:
            raise ContractError(
                f"checkpoint_interval must be >= 1, got {self.checkpoint_interval}")


@dataclass
class AdamState:
    """First/second moment estimates plus the global step counter."""

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_adam_state(params: Parameters) -> AdamState:
    named = params.named_tensors()
    return AdamState(
        step=0,
        m={k: np.zeros(t.shape, np.float32) for k, t in named.items()},
        v={k: np.zeros(t.shape, np.float32) for k, t in named.items()},
    )


def apply_adam(params: Parameters, state: AdamState, cfg: TrainConfig) -> None:
    """One in-place bias-corrected moment update from the stored gradients.

    Parameters that received no gradient (e.g. the gate network when the
    gate is disabled) are left bit-identical, moments included.
    """
    named = params.named_tensors()
    if all(p.grad is None for p in named.values()):
        raise ContractError(
            "no parameter received a gradient; call backward() on the loss first")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in named.items():
        g = p.grad
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= np.float32(cfg.beta1)
        m += np.float32(1.0 - cfg.beta1) * g
        v *= np.float32(cfg.beta2)
        v += np.float32(1.0 - cfg.beta2) * (g * g)
        m_hat = m / np.float32(bc1)
        v_hat = v / np.float32(bc2)
        p.data -= np.float32(cfg.learning_rate) * m_hat / (np.sqrt(v_hat) + np.float32(cfg.eps))


def _zero_grads(params: Parameters) -> None:
    for p in params.named_tensors().values():
        p.grad = None


def batch_loss(params: Parameters, batch, model_cfg: ModelConfig) -> Tensor:
    """Mean over the batch of per-tile MSE in display units."""
    if not batch:
        raise ContractError("batch must contain at least one tile pair")
    t = model_cfg.tile_size
    per_tile = []
    for noisy, clean in batch:
        noisy_t = noisy if isinstance(noisy, Tensor) else Tensor(np.asarray(noisy, np.float32))
        clean_arr = clean.data if isinstance(clean, Tensor) else np.asarray(clean, np.float32)
        if noisy_t.shape != (1, t, t) or clean_arr.shape != (1, t, t):
            raise ShapeError(
                f"batch tiles must be (1, {t}, {t}), got {noisy_t.shape} and "
                f"{clean_arr.shape}")
        denoised = forward(params, noisy_t, model_cfg)
        diff = tp.sub(denoised, Tensor(clean_arr))
        per_tile.append(tp.reduce_mean(tp.mul(diff, diff)))
    total = per_tile[0]
    for extra in per_tile[1:]:
        total = tp.add(total, extra)
    return tp.mul(total, np.float32(1.0 / len(per_tile)))


def train_step(params: Parameters, state: AdamState, batch,
               cfg: TrainConfig, model_cfg: ModelConfig
               ) -> tuple[Parameters, AdamState, float]:
    """Forward, MSE loss, backward, moment update, grad reset."""
    loss = batch_loss(params, batch, model_cfg)
    loss_value = float(loss.item())
    backward(loss)
    if not np.isfinite(loss_value):
        culprit = "loss itself"
        for name, p in params.named_tensors().items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                culprit = name
                break
        _zero_grads(params)
        raise NumericError(
            f"non-finite loss {loss_value} at step {state.step + 1}; "
            f"first non-finite gradient: {culprit}")
    apply_adam(params, state, cfg)
    _zero_grads(params)
    return params, state, loss_value


# ---------------------------------------------------------------------------
# batch sampling


def sample_batch(pairs, tile: int, batch_size: int,
                 rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random slice, random square crop, shared random isometry per sample."""
    if not pairs:
        raise ContractError("cannot sample from an empty corpus")
    batch = []
    for _ in range(batch_size):
        clean, noisy = pairs[int(rng.integers(0, len(pairs)))]
        _, h, w = clean.pixels.shape
        if h < tile or w < tile:
            raise ContractError(
                f"slice {clean.patient_id}/{clean.slice_index} is {h}x{w}, "
                f"smaller than the {tile}px training tile")
        oy = int(rng.integers(0, h - tile + 1))
        ox = int(rng.integers(0, w - tile + 1))
        crop_c = SliceImage(
            Tensor(np.ascontiguousarray(
                clean.pixels.data[:, oy:oy + tile, ox:ox + tile])),
            clean.patient_id, clean.slice_index, "clean")
        crop_n = SliceImage(
            Tensor(np.ascontiguousarray(
                noisy.pixels.data[:, oy:oy + tile, ox:ox + tile])),
            noisy.patient_id, noisy.slice_index, "noisy")
        aug_c, aug_n = augment((crop_c, crop_n), int(rng.integers(0, 2**31)))
        batch.append((aug_n.pixels.data, aug_c.pixels.data))
    return batch


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Generator for one step, a pure function of (seed, step)."""
    return np.random.default_rng(np.random.SeedSequence([seed, step]))


# ---------------------------------------------------------------------------
# logging


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    wall_ms: float


@dataclass(frozen=True)
class EvalRecord:
    step: int
    ssim: float
    rmse: float
    psnr: float


@dataclass
class TrainLog:
    """Per-step losses plus optional held-out metric snapshots."""

    steps: list[StepRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)

    def append_step(self, record: StepRecord) -> None:
        if self.steps and record.step <= self.steps[-1].step:
            raise ContractError(
                f"step indices must increase: {record.step} after "
                f"{self.steps[-1].step}")
        self.steps.append(record)

    def append_eval(self, record: EvalRecord) -> None:
        if self.evals and record.step < self.evals[-1].step:
            raise ContractError("eval step indices must not decrease")
        self.evals.append(record)

    def to_csv(self) -> str:
        lines = ["step,loss,wall_ms"]
        for r in self.steps:
            lines.append(f"{r.step},{r.loss!r},{r.wall_ms:.3f}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="ascii")

    @staticmethod
    def read_csv(path) -> "TrainLog":
        log = TrainLog()
        with open(path, newline="", encoding="ascii") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["step", "loss", "wall_ms"]:
                raise IntegrityError(f"unexpected training log header {header}")
            for row in reader:
                if len(row) != 3:
                    raise IntegrityError(f"malformed training log row {row}")
                log.append_step(StepRecord(int(row[0]), float(row[1]), float(row[2])))
        return log


# ---------------------------------------------------------------------------
# optimizer state persistence (sidecar next to the checkpoint)


def optimizer_sidecar_path(ckpt_path) -> Path:
    return Path(str(ckpt_path) + ".opt")


def save_optimizer_state(state: AdamState, path) -> None:
    names = sorted(state.m)
    parts = [OPTIMIZER_MAGIC,
             struct.pack("<I", OPTIMIZER_VERSION),
             struct.pack("<Q", state.step),
             struct.pack("<I", 2 * len(names))]
    for name in names:
        for suffix, table in ((".m", state.m), (".v", state.v)):
            rec_name = (name + suffix).encode("utf-8")
            # asarray keeps rank-0 moments rank-0; tobytes copies to C order
            arr = np.asarray(table[name], dtype="<f4")
            parts.append(struct.pack("<I", len(rec_name)))
            parts.append(rec_name)
            parts.append(struct.pack("<I", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_optimizer_state(path, params: Parameters) -> AdamState:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise IntegrityError(f"optimizer state truncated in {what}")
        out = blob[off:off + n]
        off += n
        return out

    if take(4, "magic") != OPTIMIZER_MAGIC:
        raise IntegrityError("not an optimizer state file (bad magic)")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != OPTIMIZER_VERSION:
        raise IntegrityError(f"unsupported optimizer state version {version}")
    step = struct.unpack("<Q", take(8, "step counter"))[0]
    n_records = struct.unpack("<I", take(4, "record count"))[0]
    named = params.named_tensors()
    expected = {f"{k}{s}" for k in named for s in (".m", ".v")}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for _ in range(n_records):
        name_len = struct.unpack("<I", take(4, "record name length"))[0]
        if name_len > 4096:
            raise IntegrityError(f"implausible record name length {name_len}")
        name = take(name_len, "record name").decode("utf-8", errors="replace")
        rank = struct.unpack("<I", take(4, "record rank"))[0]
        if rank > 8:
            raise IntegrityError(f"implausible rank {rank} for record {name}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"shape of {name}"))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * count, f"data of {name}"),
                             dtype="<f4").reshape(shape).astype(np.float32)
        if name not in expected:
            raise IntegrityError(f"unexpected optimizer record {name}")
        base, suffix = name[:-2], name[-2:]
        table = m if suffix == ".m" else v
        if base in table:
            raise IntegrityError(f"duplicate optimizer record {name}")
        if named[base].shape != data.shape:
            raise IntegrityError(
                f"optimizer record {name} has shape {data.shape}, parameter "
                f"expects {named[base].shape}")
        table[base] = data
    if off != len(blob):
        raise IntegrityError(f"{len(blob) - off} trailing bytes in optimizer state")
    missing = (set(named) - set(m)) | (set(named) - set(v))
    if missing:
        raise IntegrityError(f"optimizer state missing moments for {sorted(missing)}")
    return AdamState(step=step, m=m, v=v)


# ---------------------------------------------------------------------------
# orchestration


def train(params: Parameters, model_cfg: ModelConfig, pairs,
          cfg: TrainConfig, *, state: AdamState | None = None,
          ckpt_path=None, log: TrainLog | None = None,
          log_path=None, progress=None) -> tuple[Parameters, AdamState, TrainLog]:
    """Run (or continue) a training loop up to cfg.steps total steps.

    Pass the state/log recovered from a checkpoint to resume; the step
    counter continues monotonically and batches replay exactly as an
    unbroken run would draw them.
    """
    if state is None:
        state = init_adam_state(params)
    if log is None:
        log = TrainLog()
    if state.step > cfg.steps:
        raise ContractError(
            f"checkpoint is already at step {state.step}, beyond the "
            f"requested total of {cfg.steps}")

    def checkpoint(step: int) -> None:
        if ckpt_path is None:
            return
        save_checkpoint(params, model_cfg, ckpt_path, step=step, seed=cfg.seed)
        save_optimizer_state(state, optimizer_sidecar_path(ckpt_path))
        if log_path is not None:
            log.write_csv(log_path)

    while state.step < cfg.steps:
        step = state.step + 1
        t0 = time.perf_counter()
        rng = step_rng(cfg.seed, step)
        batch = sample_batch(pairs, model_cfg.tile_size, cfg.batch_size, rng)
        params, state, loss_value = train_step(params, state, batch, cfg, model_cfg)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        log.append_step(StepRecord(step, loss_value, wall_ms))
        if progress is not None:
            progress(step, loss_value, wall_ms)
        if step % cfg.checkpoint_interval == 0 or step == cfg.steps:
            checkpoint(step)
    if cfg.steps == 0:
        checkpoint(0)
    return params, state, log


def evaluate(params: Parameters, model_cfg: ModelConfig, pairs,
             stride: int | None = None, blend: str = "cosine") -> MetricReport:
    """Tiled denoising of each held-out slice, scored against its clean twin."""
    if not pairs:
        raise ContractError("evaluation needs at least one (clean, noisy) pair")
    predictions = []
    references = []
    for clean, noisy in pairs:
        denoised = denoise_image(params, noisy.pixels, model_cfg,
                                 stride=stride, blend=blend)
        predictions.append(denoised)
        references.append(clean.pixels)
    return build_report(predictions, references)
