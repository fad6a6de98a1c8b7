"""Full-covariance Gaussian mixtures trained by EM over star joins."""

from .em import (
    GmmConfig,
    Responsibilities,
    TrainTrace,
    estep,
    feature_moments,
    init_params,
    mean_pass,
    mstep,
    sigma_pass,
    train_gmm,
)
from .params import (
    ComponentPrecision,
    GmmParams,
    RTupleCacheGMM,
    build_rtuple_cache,
    gaussian_logpdf,
    precompute_precision,
    quadform_blocks,
    quadform_direct,
    quadform_factorized,
    quadform_multiway,
    regularize,
)
