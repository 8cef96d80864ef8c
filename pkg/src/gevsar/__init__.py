"""Spatial extremes toolkit: simulate GEV-innovation SAR fields on a
lattice, estimate the model parameters with a trained convolutional
network, and validate estimates with a likelihood baseline,
quantile-regression intervals, and madogram/QQ diagnostics.
"""

from .dataset import (
    Dataset,
    NormStats,
    ParamRanges,
    denormalize_params,
    load_dataset,
    make_dataset,
    normalize_params,
    sample_params,
    save_dataset,
)
from .diagnostics import (
    AreResult,
    BiasCorrector,
    MadogramCurve,
    QqResult,
    are,
    empirical_madogram,
    fit_bias_corrector,
    median_iqr_standardize,
    qq_data,
    quantile_map,
    stack_madogram,
)
from .distributions import (
    GevParams,
    NuggetSpec,
    gev_cdf,
    gev_logpdf,
    gev_quantile,
    gev_sample,
    nugget_sample,
)
from .lattice import (
    FieldStack,
    LatticeConfig,
    ModelParams,
    SarMatrix,
    build_basis,
    build_sar,
    solve_coefficients,
    standardize_stack,
    synthesize_field,
    wendland,
)
from .mle import MleConfig, MleFit, fit_mle, nelder_mead, nll_no_nugget
from .network import (
    NetworkSpec,
    NetworkWeights,
    adam_step,
    backward,
    forward,
    forward_batch,
    init_weights,
    load_weights,
    mae_loss,
    save_weights,
)
from .quantile_uq import (
    QuantileModel,
    coverage_eval,
    fit_interval_models,
    fit_qr,
    predict_interval,
)
from .rng import substream
from .stackio import load_stack, save_stack
from .tiling import (
    GridStack,
    Tile,
    TileResult,
    estimate_tiles,
    ingest_grid,
    make_tiles,
    simulate_at_tile,
    smooth_surface,
    write_grid,
)
from .training import TrainConfig, TrainResult, estimate, estimate_batch, train

__version__ = "0.1.0"
