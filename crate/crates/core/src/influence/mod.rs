//! Last-layer influence functions.
//!
//! The influence of a training sample `z` on another sample `z'` is
//! `grad l(z')^T H^{-1} grad l(z)`, where `H` is the Hessian of the mean
//! training loss. Everything here restricts parameters to the classifier's
//! last layer, where the cross-entropy Hessian has a closed Kronecker form
//! and a dense Cholesky factorization is cheap.
//!
//! Self-influence `grad l(z)^T H^{-1} grad l(z)` approximates how much the
//! loss on `z` would rise if `z` were left out of training. Measured on a
//! model that has mostly learned a spurious shortcut (early GCE training),
//! it ranks bias-conflicting samples near the top.

mod hessian;
mod scores;
mod solve;

pub use hessian::{assemble_from_inputs, assemble_hessian, Damping, LastLayerHessian};
pub use scores::{
    bcsi_scores, cross_influence, gradnorm_scores, if_train, if_train_all, loss_scores,
    read_scores_csv, score_model, self_influence, self_influence_all, si_scores, train_detector,
    write_scores_csv, DetectorConfig, InfluenceRecord, Method, ModelScores, INFLUENCE_LOSS,
    SCORES_CSV_HEADER,
};
pub use solve::{
    conjugate_gradient, relative_residual, solve, Cholesky, HessianFactor, RESIDUAL_TOLERANCE,
};
