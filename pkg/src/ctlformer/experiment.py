"""Named model configurations, verification suites, and the desk-scale study.

Three reusable pieces live here:

* a registry of model sizes (``tiny`` for finite-difference sweeps,
  ``overfit`` for the fixed-batch memorization probe, ``experiment`` for
  the end-to-end study, ``default`` for the full-size budget);
* gradient verification: a per-operation finite-difference sweep and an
  every-parameter sweep over the tiny model;
* ``run_experiment``: build the synthetic corpus, hold out one patient,
  train a gated and an ungated model under identical seeds, and score
  both against the noisy baseline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tp
from .attention import AttentionConfig
from .data import build_corpus, split_patients
from .errors import ContractError
from .gating import GateConfig
from .metrics import MetricReport, build_report
from .model import ModelConfig, _assemble, init
from .tensor import GradCheckReport, Tensor, grad_check
from .tokenizer import TokenizerConfig
from .training import (TrainConfig, evaluate, init_adam_state, train,
                       train_step)

EXPERIMENT_HOLDOUT = "L506-syn"


# ---------------------------------------------------------------------------
# named configurations


def tiny_model_config() -> ModelConfig:
    """Smallest model that exercises every code path; used for FD sweeps."""
    return ModelConfig(
        tokenizer=TokenizerConfig(stem_channels=4, embed_dim=8, detok_channels=4),
        attention=AttentionConfig(dim=8, heads=2, mlp_ratio=2),
        depth=1, tile_size=16)


def small_model_config() -> ModelConfig:
    """A step up from tiny; fast enough for integration tests."""
    return ModelConfig(
        tokenizer=TokenizerConfig(stem_channels=8, embed_dim=16, detok_channels=8),
        attention=AttentionConfig(dim=16, heads=4, mlp_ratio=2),
        depth=2, tile_size=32)


def overfit_model_config() -> ModelConfig:
    """Wide single-block model that can memorize a fixed batch quickly."""
    return ModelConfig(
        tokenizer=TokenizerConfig(stem_channels=16, embed_dim=24, detok_channels=16),
        attention=AttentionConfig(dim=24, heads=4, mlp_ratio=2),
        depth=1, tile_size=16)


def experiment_model_config(gate_enabled: bool = True) -> ModelConfig:
    """Desk-scale denoiser used by the end-to-end study (~7 min on a CPU)."""
    return ModelConfig(
        tokenizer=TokenizerConfig(stem_channels=16, embed_dim=64, detok_channels=16),
        attention=AttentionConfig(dim=64, heads=4, mlp_ratio=2),
        gate=GateConfig(enabled=gate_enabled),
        depth=2, tile_size=32)


def default_model_config() -> ModelConfig:
    """Full-size configuration sized to the published parameter budget."""
    return ModelConfig()


CONFIG_CHOICES = {
    "tiny": tiny_model_config,
    "small": small_model_config,
    "overfit": overfit_model_config,
    "experiment": experiment_model_config,
    "default": default_model_config,
}


def named_config(name: str) -> ModelConfig:
    if name not in CONFIG_CHOICES:
        raise ContractError(
            f"unknown config {name!r}; choose from {sorted(CONFIG_CHOICES)}")
    return CONFIG_CHOICES[name]()


# ---------------------------------------------------------------------------
# fixed-batch memorization probe


def make_overfit_batch(tile: int = 16, sigma: float = 15.0, seed: int = 0,
                       count: int = 4) -> list[tuple[np.ndarray, np.ndarray]]:
    """A frozen batch of textured flat tiles with additive gaussian noise."""
    rng = np.random.default_rng(seed)
    batch = []
    for _ in range(count):
        clean = rng.uniform(40.0, 200.0) * np.ones((1, tile, tile), np.float32)
        clean += rng.uniform(0.0, 30.0, size=(1, tile, tile)).astype(np.float32)
        clean = np.clip(clean, 0.0, 255.0)
        noisy = np.clip(clean + rng.normal(0.0, sigma, size=(1, tile, tile)),
                        0.0, 255.0).astype(np.float32)
        batch.append((noisy, clean))
    return batch


def overfit_one_batch(steps: int = 500, learning_rate: float = 1e-4,
                      batch_seed: int = 0, init_seed: int = 1,
                      cfg: ModelConfig | None = None) -> list[float]:
    """Train on one fixed batch and return the per-step loss curve."""
    if cfg is None:
        cfg = overfit_model_config()
    batch = make_overfit_batch(tile=cfg.tile_size, seed=batch_seed)
    params = init(cfg, seed=init_seed)
    state = init_adam_state(params)
    tc = TrainConfig(batch_size=len(batch), learning_rate=learning_rate,
                     steps=steps, seed=0)
    losses = []
    for _ in range(steps):
        params, state, loss_value = train_step(params, state, batch, tc, cfg)
        losses.append(loss_value)
    return losses


# ---------------------------------------------------------------------------
# gradient verification


@dataclass(frozen=True)
class NamedCheck:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _sum_of(f):
    return lambda x: tp.reduce_sum(f(x))


def _op_check_table(seed: int):
    """(name, scalar function, input) for every differentiable operation."""
    rng = np.random.default_rng(seed)

    def arr(*shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, size=shape).astype(np.float32))

    a34 = arr(3, 4)
    b34 = arr(3, 4)
    m45 = arr(4, 5)
    gain = arr(6, lo=0.5, hi=1.5)
    bias = arr(6)
    w56 = arr(5, 6)
    img = arr(2, 6, 6)
    kern = arr(3, 2, 3, 3)
    conv_out_w = arr(3, 6, 6)
    conv_stride_w = arr(3, 2, 2)
    patches_rows = 4 * 4  # unfold of (2, 6, 6) with k=3, s=1, p=0
    patches = arr(patches_rows, 2 * 3 * 3)

    return [
        ("add", _sum_of(lambda x: tp.add(x, b34)), arr(3, 4)),
        ("sub", _sum_of(lambda x: tp.sub(x, b34)), arr(3, 4)),
        ("mul", _sum_of(lambda x: tp.mul(x, b34)), arr(3, 4)),
        ("neg", _sum_of(tp.neg), arr(3, 4)),
        ("matmul", _sum_of(lambda x: tp.matmul(x, m45)), arr(3, 4)),
        ("transpose", _sum_of(lambda x: tp.mul(tp.transpose(x), tp.transpose(a34))),
         arr(3, 4)),
        ("reshape", _sum_of(lambda x: tp.mul(tp.reshape(x, (4, 3)),
                                             tp.reshape(a34, (4, 3)))), arr(3, 4)),
        ("concat", _sum_of(lambda x: tp.mul(tp.concat([x, a34], axis=0),
                                            tp.concat([b34, b34], axis=0))),
         arr(3, 4)),
        ("reduce_sum", lambda x: tp.reduce_sum(tp.mul(tp.reduce_sum(x, axis=1),
                                                      Tensor(np.arange(3, dtype=np.float32)))),
         arr(3, 4)),
        ("reduce_mean", lambda x: tp.reduce_sum(
            tp.mul(tp.reduce_mean(x, axis=0),
                   Tensor(np.arange(4, dtype=np.float32)))), arr(3, 4)),
        ("softmax", _sum_of(lambda x: tp.mul(tp.softmax(x, axis=-1), b34)),
         arr(3, 4)),
        ("sigmoid", _sum_of(lambda x: tp.mul(tp.sigmoid(x), b34)), arr(3, 4)),
        ("tanh", _sum_of(lambda x: tp.mul(tp.tanh(x), b34)), arr(3, 4)),
        ("log", _sum_of(lambda x: tp.mul(tp.log(x), b34)), arr(3, 4, lo=0.5, hi=2.0)),
        ("gelu", _sum_of(lambda x: tp.mul(tp.gelu(x), b34)), arr(3, 4)),
        ("layernorm", _sum_of(lambda x: tp.mul(tp.layernorm(x, gain, bias),
                                               w56)), arr(5, 6)),
        ("conv2d", _sum_of(lambda x: tp.mul(tp.conv2d(x, kern, 1, 1),
                                            conv_out_w)), arr(2, 6, 6)),
        ("conv2d_kernel", _sum_of(lambda k: tp.mul(tp.conv2d(img, k, 2, 0),
                                                   conv_stride_w)), arr(3, 2, 3, 3)),
        ("unfold", _sum_of(lambda x: tp.mul(tp.unfold(x, 3, 1, 0), patches)),
         arr(2, 6, 6)),
        ("fold", _sum_of(lambda p: tp.mul(tp.fold(p, (2, 6, 6), 3, 1, 0), img)),
         arr(patches_rows, 2 * 3 * 3)),
    ]


def grad_check_ops(seed: int = 0, tol: float = 1e-3) -> list[NamedCheck]:
    """Finite-difference sweep over every primitive operation."""
    return [NamedCheck(name, grad_check(f, x, tol=tol))
            for name, f, x in _op_check_table(seed)]


def grad_check_model(cfg: ModelConfig | None = None, seed: int = 30,
                     tol: float = 1e-2,
                     names: list[str] | None = None) -> list[NamedCheck]:
    """Finite-difference check of every parameter of the full model.

    ``names`` restricts the sweep to a subset of parameters (for quick
    spot checks); the default sweeps every parameter.
    """
    from .model import forward
    if cfg is None:
        cfg = tiny_model_config()
    params = init(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    t = cfg.tile_size
    tile = Tensor(rng.uniform(0.0, 255.0, size=(1, t, t)).astype(np.float32))
    target = Tensor(rng.uniform(0.0, 255.0, size=(1, t, t)).astype(np.float32))
    named = params.named_tensors()
    selected = list(named) if names is None else list(names)
    unknown = [n for n in selected if n not in named]
    if unknown:
        raise ContractError(f"unknown parameter names {unknown}")

    def loss_with(name, leaf):
        flat = dict(named)
        flat[name] = leaf
        out = forward(_assemble(cfg, flat), tile, cfg)
        diff = tp.mul(tp.sub(out, target), np.float32(1.0 / 255.0))
        return tp.reduce_mean(tp.mul(diff, diff))

    return [NamedCheck(name, grad_check(lambda p, n=name: loss_with(n, p),
                                        named[name], tol=tol))
            for name in selected]


@dataclass(frozen=True)
class GradCheckSuite:
    ops: list[NamedCheck]
    params: list[NamedCheck]
    runtime_s: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.ops) and all(c.passed for c in self.params)

    def lines(self) -> list[str]:
        out = []
        for group, checks in (("op", self.ops), ("param", self.params)):
            for c in checks:
                status = "ok" if c.passed else "FAIL"
                out.append(f"{status:4s} {group:5s} {c.name:28s} "
                           f"max rel err {c.report.max_rel_error:.3e} "
                           f"(tol {c.report.tol:g})")
        out.append(f"{'PASS' if self.passed else 'FAIL'}: "
                   f"{len(self.ops)} ops, {len(self.params)} parameters, "
                   f"{self.runtime_s:.1f}s")
        return out


def grad_check_suite(config_name: str = "tiny", seed: int = 0) -> GradCheckSuite:
    """Per-op sweep plus an every-parameter sweep of the named model."""
    t0 = time.perf_counter()
    ops = grad_check_ops(seed=seed)
    params = grad_check_model(named_config(config_name), seed=seed + 30)
    return GradCheckSuite(ops=ops, params=params,
                          runtime_s=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# desk-scale end-to-end study


@dataclass(frozen=True)
class ExperimentSettings:
    patients: int = 10
    slices_per_patient: int = 20
    size: int = 128
    gaussian_sigma: float = 15.0
    streak_count: int = 4
    streak_amplitude: float = 25.0
    corpus_seed: int = 0
    holdout: str = EXPERIMENT_HOLDOUT
    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 1e-3
    train_seed: int = 0
    init_seed: int = 0
    checkpoint_interval: int = 500
    run_ablation: bool = True

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size,
                           learning_rate=self.learning_rate,
                           steps=self.steps, seed=self.train_seed,
                           checkpoint_interval=self.checkpoint_interval)


@dataclass(frozen=True)
class ExperimentResult:
    settings: ExperimentSettings
    baseline: MetricReport
    gated: MetricReport
    ungated: MetricReport | None
    ssim_gain: float
    rmse_drop_fraction: float
    gate_rmse_delta: float | None
    train_seconds: float
    total_seconds: float

    def summary_lines(self) -> list[str]:
        rows = [
            ("noisy input", self.baseline),
            ("denoised (gated)", self.gated),
        ]
        if self.ungated is not None:
            rows.append(("denoised (gate off)", self.ungated))
        out = [f"holdout patient: {self.settings.holdout}"]
        for label, rep in rows:
            out.append(f"{label:22s} SSIM {rep.ssim:.4f}  RMSE {rep.rmse:.4f}  "
                       f"PSNR {rep.psnr:.2f}")
        out.append(f"SSIM gain over noisy: {self.ssim_gain:+.4f}")
        out.append(f"RMSE drop: {100.0 * self.rmse_drop_fraction:.1f}%")
        if self.gate_rmse_delta is not None:
            out.append(f"gate ablation RMSE delta (ungated - gated): "
                       f"{self.gate_rmse_delta:+.4f}")
        out.append(f"training time: {self.train_seconds:.0f}s, "
                   f"total: {self.total_seconds:.0f}s")
        return out


def _split_pairs(pairs, holdout: str):
    cleans = [c for c, _ in pairs]
    train_slices, test_slices = split_patients(cleans, holdout)
    test_ids = {(s.patient_id, s.slice_index) for s in test_slices}
    train_pairs = [p for p in pairs
                   if (p[0].patient_id, p[0].slice_index) not in test_ids]
    test_pairs = [p for p in pairs
                  if (p[0].patient_id, p[0].slice_index) in test_ids]
    return train_pairs, test_pairs


def run_experiment(work_dir, settings: ExperimentSettings | None = None,
                   progress=None) -> ExperimentResult:
    """Corpus, patient split, gated + ungated training, metric comparison."""
    if settings is None:
        settings = ExperimentSettings()
    t_start = time.perf_counter()
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)

    def note(msg: str) -> None:
        if progress is not None:
            progress(msg)

    note(f"building corpus ({settings.patients}x{settings.slices_per_patient}, "
         f"{settings.size}px)")
    pairs = build_corpus(
        work_dir / "corpus", patients=settings.patients,
        slices_per_patient=settings.slices_per_patient, size=settings.size,
        master_seed=settings.corpus_seed,
        gaussian_sigma=settings.gaussian_sigma,
        streak_count=settings.streak_count,
        streak_amplitude=settings.streak_amplitude)
    train_pairs, test_pairs = _split_pairs(pairs, settings.holdout)

    baseline = build_report([n.pixels for _, n in test_pairs],
                            [c.pixels for c, _ in test_pairs])
    note(f"noisy baseline: SSIM {baseline.ssim:.4f} RMSE {baseline.rmse:.4f}")

    train_seconds = 0.0
    reports: dict[bool, MetricReport] = {}
    for gate_enabled in ((True, False) if settings.run_ablation else (True,)):
        label = "gated" if gate_enabled else "ungated"
        cfg = experiment_model_config(gate_enabled=gate_enabled)
        params = init(cfg, seed=settings.init_seed)
        tc = settings.train_config()
        log_progress = None
        if progress is not None:
            def log_progress(step, loss, wall, label=label):
                if step % 500 == 0 or step == tc.steps:
                    progress(f"{label}: step {step}/{tc.steps} loss {loss:.2f}")
        t0 = time.perf_counter()
        params, _, _ = train(
            params, cfg, train_pairs, tc,
            ckpt_path=work_dir / f"{label}.ckpt",
            log_path=work_dir / f"{label}.csv",
            progress=log_progress)
        train_seconds += time.perf_counter() - t0
        reports[gate_enabled] = evaluate(params, cfg, test_pairs)
        note(f"{label}: SSIM {reports[gate_enabled].ssim:.4f} "
             f"RMSE {reports[gate_enabled].rmse:.4f}")

    gated = reports[True]
    ungated = reports.get(False)
    return ExperimentResult(
        settings=settings,
        baseline=baseline,
        gated=gated,
        ungated=ungated,
        ssim_gain=gated.ssim - baseline.ssim,
        rmse_drop_fraction=(baseline.rmse - gated.rmse) / baseline.rmse,
        gate_rmse_delta=None if ungated is None else ungated.rmse - gated.rmse,
        train_seconds=train_seconds,
        total_seconds=time.perf_counter() - t_start,
    )
