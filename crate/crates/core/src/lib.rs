//! Multilinear tensor regression for longitudinal relational data.

pub mod als;
pub mod baselines;
pub mod error;
pub mod eval;
pub mod features;
pub mod gibbs;
pub mod gls;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod tensor;

pub use als::{
    conditional_minimizer, fit_als, normalize_scale, predict, residual_tensor, AlsOptions,
    CrossMomentPair, FitReport, Init, Mask, RegressionDataset,
};
pub use baselines::{fit_additive, fit_rank_one_per_dyad, AdditiveFit, RankOneFits};
pub use error::{Error, ErrorKind, Result};
pub use eval::{
    compare_additive_multiplicative, cross_validate, make_splits, r_squared, CvEntry, CvOptions,
    DemeanMode, Fitter, Predictor, ScoreTable, SplitMode, SplitPlan,
};
pub use features::{
    build_features, ingest_events, quantile_transform, EventPanel, LabelOrdering, PredictorSpec,
    RelationalFeatures,
};
pub use gibbs::{
    gibbs_run, normalize_factors, posterior_update_mode, sample_inverse_wishart, sample_matrix_normal,
    sample_tau2, summarize, ChainStore, GibbsConfig, GibbsState, PosteriorSummary, PriorSpec,
    SummaryOptions,
};
pub use gls::{
    fit_gls, gls_conditional_update, mode_residual_correlation, sample_array_normal, sigma_mle_update,
    GlsFit, GlsOptions, ModeCorrelationDiagnostic, SeparableCovariance,
};
pub use linalg::inv_sqrt;
pub use tensor::{kronecker, tucker_product, FactorMatrix, KroneckerFactorSet, Tensor};
