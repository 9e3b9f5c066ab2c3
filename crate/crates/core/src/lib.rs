//! Gaussian-process tensor factorization with tight variational bounds.
//!
//! Each tensor entry is modelled as a latent function of the concatenated
//! factor rows it indexes, with a sparse GP prior summarized by inducing
//! points. Continuous entries use Gaussian noise and binary entries a probit
//! link. Training maximizes a closed-form lower bound whose entry sums are
//! computed by a map/reduce engine.

pub mod checkpoint;
pub mod elbo;
pub mod error;
pub mod evaluate;
pub mod kernel;
pub mod model;
pub mod optimizer;
pub mod parallel;
pub mod probit;
pub mod sptensor;
pub mod synth;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use elbo::{
    compute_stats, conjugate_bound_check, fixed_point_solve, fixed_point_step, grad_binary, grad_continuous,
    optimal_qv, tight_elbo_binary, tight_elbo_continuous, FixedPointOutcome, QvPosterior, SufficientStats,
    TruncGaussMoments,
};
pub use error::{Error, Result};
pub use evaluate::{auc, mse, predict_binary_score, predict_continuous, PredictionSet};
pub use kernel::{ArdKernel, KernelParams};
pub use model::{init_state, FlatParams, LatentFactors, Likelihood, ModelState, Mode, ParamLayout};
pub use optimizer::{lbfgs_direction, train, Method, OptimConfig, TrainReport};
pub use parallel::{parallel_objective, Engine, FixedPointConfig, Objective};
pub use sptensor::{parse_coo, write_coo, EntryBatch, SparseTensor};
pub use synth::{generate, SynthConfig, SynthData};
