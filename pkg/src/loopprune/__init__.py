"""loopprune: structured pruning of a CNN codec in-loop filter.

Core pieces: a deterministic rank-4 autodiff engine, the restoration
network, the three-step pruning loop, a block-DCT codec-artifact harness,
PSNR/BD metrics, and a CLI.  Scikit-learn style estimators wrap the
filter, pruner, and degrader for pipeline composition.
"""

from .autodiff import (
    Adam,
    Parameter,
    Rng,
    Tensor,
    adam_step,
    add,
    channel_scale,
    concat_channels,
    conv2d,
    dense,
    global_avg_pool,
    mae_loss,
    relu,
    residual_merge,
    sigmoid,
)
from .codec import (
    DatasetManifest,
    QuantSpec,
    dct8,
    degrade,
    extract_patches,
    gen_dataset,
    idct8,
    rate_proxy,
    read_pgm,
    write_pgm,
)
from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    CurveError,
    DimensionError,
    GraphError,
    LoopPruneError,
    NumericError,
    PlanError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .estimators import BlockDctDegrader, UclfFilter, UclfPruner
from .metrics import (
    BDResult,
    RDPoint,
    bd_metrics,
    psnr,
    render_report,
    time_inference,
)
from .model import (
    BlockSpec,
    ModelState,
    NetworkSpec,
    apply_model,
    block_forward,
    build_default_uclf,
    build_report,
    count_parameters,
    load_model,
    network_forward,
    save_model,
)
from .pruning import (
    ActivationStats,
    PruneConfig,
    PrunePlan,
    PruneTrace,
    apply_sparsity_pruning,
    apply_structured_pruning,
    collect_activation_stats,
    fine_tune,
    identify_redundant_channels,
    prune_loop,
    validation_psnr,
)

__version__ = "0.1.0"
