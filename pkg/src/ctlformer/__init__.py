"""Low-dose CT denoiser: tokenized transformer with noise-adaptive gating.

Everything runs on a self-contained float32 reverse-mode autodiff core;
the only runtime dependency is numpy.
"""

from .attention import AttentionConfig, full_attention, interact, local_attention, transformer_block
from .data import (
    NoiseSpec,
    PhantomSpec,
    SliceImage,
    augment,
    build_corpus,
    export_pgm,
    generate_phantom,
    inject_noise,
    load_corpus,
    load_slice,
    save_slice,
    split_patients,
)
from .errors import (
    ContractError,
    CtlformerError,
    FormatVersionError,
    IntegrityError,
    NumericError,
    ShapeError,
)
from .experiment import (
    ExperimentResult,
    ExperimentSettings,
    GradCheckSuite,
    grad_check_suite,
    named_config,
    overfit_one_batch,
    run_experiment,
)
from .gating import GateConfig, apply_gates, compute_gates, estimate_noise, uniform_gates
from .metrics import MetricReport, build_report, psnr, report_table, rmse, ssim, window_to_display
from .model import (
    Checkpoint,
    ModelConfig,
    Parameters,
    forward,
    init,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .tensor import Tensor, backward, grad_check, no_grad
from .tiling import TilePlan, blend_window, denoise_image, plan, split, stitch
from .tokenizer import TokenizerConfig, detokenize, tokenize
from .training import (
    AdamState,
    TrainConfig,
    TrainLog,
    evaluate,
    load_optimizer_state,
    save_optimizer_state,
    train,
)

__version__ = "0.1.0"
