//! Small feedforward classifiers: initialization, forward passes, CE and
//! GCE objectives, deterministic mini-batch training, accuracies and
//! per-sample last-layer gradients.

mod grad;
mod loss;
mod metrics;
mod mlp;
mod train;

pub use grad::{last_layer_grad, last_layer_grad_from, LastLayerInputs};
pub use loss::{gce, softmax, softmax_ce, LossKind};
pub use metrics::{
    accuracy, accuracy_from_predictions, group_accuracy, group_counts, predictions, Group,
    GroupCount,
};
pub use mlp::{init_mlp, Forward, Layer, MlpParams};
pub use train::{
    add_scaled, loss_and_grad, train, Optimizer, OptimizerKind, TrainConfig, TrainHistory,
    Trainer,
};
