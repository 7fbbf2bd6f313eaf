//! Label-conditional Gaussian environments: data generation, parameter
//! geometry with label-swap permutations, mixture fits on unlabeled context,
//! and permutation-aware test-time prediction.

pub mod dgp;
pub mod gmm;
pub mod icl;

pub use dgp::{
    in_voronoi_cell, in_voronoi_cell_weighted, voronoi_assign, voronoi_assign_weighted, EnvParams,
    EnvParamsData, Orientation, ParamVector, VoronoiAssignment, SPD_FLOOR,
};
pub use gmm::{fit_gmm_em, EmConfig, GmmFit};
pub use icl::{
    bayes_oracle_prob, fit_env_params_mle, fit_env_params_mle_with, fit_to_param_vector,
    match_and_orient, posterior_label0, predict_label0_prob, MatchedModel, MleEstimate,
    PosteriorMode, TrainedBundle,
};
