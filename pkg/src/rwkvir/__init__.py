"""Desk-scale RWKV-style image restoration.

A framework-free stack: a small float64 autodiff engine, linear-complexity
bidirectional WKV attention with a recurrent multi-scan wrapper, a
re-parameterized omnidirectional token shift, the 4-level U-shaped
restoration network, synthetic degradation data, metrics, receptive-field
diagnostics and a training/evaluation CLI.
"""

__version__ = "0.1.0"

from .blocks import (
    BlockParams,
    ChannelMixParams,
    SpatialMixParams,
    channel_mix,
    init_block,
    r_rwkv_block,
    spatial_mix,
)
from .data import (
    DegradationSpec,
    ImagePair,
    degrade,
    degrade_kspace,
    kspace_mask,
    load_pgm,
    parse_degradation,
    sample_patches,
    save_pgm,
    synthetic_phantom,
    write_synthetic_dataset,
)
from .erf import ErfMap, build_probe, erf_compare, erf_map
from .errors import ConfigError, DataError, FormatError, NumericError, ShapeError, StateError
from .metrics import MetricReport, psnr, rmse, ssim
from .model import (
    Model,
    ModelConfig,
    build,
    count_params,
    estimate_flops,
    load_checkpoint,
    model_config,
    save_checkpoint,
)
from .shift import (
    OmniShiftParams,
    QuadShiftParams,
    UniShiftParams,
    fuse,
    init_omni_shift,
    omni_shift_forward,
    quad_shift_forward,
    uni_shift_forward,
)
from .tensor import Tensor, no_grad
from .train import Adam, TrainConfig, TrainResult, cosine_lr, l1_loss, train, validate_psnr
from .wkv import (
    ScanOrder,
    WkvParams,
    bi_wkv,
    bi_wkv_oracle,
    bi_wkv_scan,
    re_wkv,
    uni_wkv,
    uni_wkv_oracle,
    uni_wkv_scan,
)
