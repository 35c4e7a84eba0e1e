use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossKind;
use super::mlp::{Layer, MlpParams};
use super::metrics::{accuracy, Group};
use crate::datagen::BiasedDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::CrossEntropy,
            epochs: 20,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
            weight_decay: 0.0,
            optimizer: OptimizerKind::adam(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs < 1 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Per-epoch statistics. Accuracies are measured on the training set after
/// the epoch's last update; they are `None` when the set has no sample of
/// that kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub mean_loss: Vec<f64>,
    pub aligned_acc: Vec<Option<f64>>,
    pub conflicting_acc: Vec<Option<f64>>,
}

/// Mean loss and mean gradient over the samples at `indices`.
pub fn loss_and_grad(
    params: &MlpParams,
    ds: &BiasedDataset,
    indices: &[usize],
    loss: LossKind,
) -> Result<(f64, Vec<Layer>)> {
    if indices.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let x = ds.feature_rows(indices);
    if x.ncols() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            actual: x.ncols(),
        });
    }
    let trace = params.forward_trace(x);
    let n = indices.len() as f64;
    let mut logit_grads = Array2::zeros(trace.logits.dim());
    let mut total = 0.0;
    for (r, &i) in indices.iter().enumerate() {
        let logits = trace.logits.row(r);
        let (l, g, _) = loss.evaluate(logits.as_slice().unwrap(), ds.samples[i].label)?;
        total += l;
        logit_grads
            .row_mut(r)
            .iter_mut()
            .zip(g)
            .for_each(|(dst, v)| *dst = v / n);
    }
    let mean = total / n;
    if !mean.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            detail: format!("batch of {} samples", indices.len()),
        });
    }
    Ok((mean, params.backward(&trace, logit_grads)))
}

/// `acc += alpha * g`, layer by layer.
pub fn add_scaled(acc: &mut [Layer], g: &[Layer], alpha: f64) {
    for (a, g) in acc.iter_mut().zip(g) {
        a.weight.scaled_add(alpha, &g.weight);
        a.bias.scaled_add(alpha, &g.bias);
    }
}

/// First-order optimizer with its running state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    first: Vec<Layer>,
    second: Vec<Layer>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &MlpParams) -> Self {
        let zeros = || {
            params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.out_dim(), l.in_dim()))
                .collect()
        };
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (zeros(), zeros()),
        };
        Optimizer {
            kind,
            step: 0,
            first,
            second,
        }
    }

    /// One update. Weight decay is decoupled: parameters shrink by
    /// `lr * weight_decay` before the gradient step.
    pub fn apply(&mut self, params: &mut MlpParams, grads: &[Layer], lr: f64, weight_decay: f64) {
        self.step += 1;
        let shrink = 1.0 - lr * weight_decay;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.layers.iter_mut().zip(grads) {
                    if weight_decay > 0.0 {
                        p.weight *= shrink;
                        p.bias *= shrink;
                    }
                    p.weight.scaled_add(-lr, &g.weight);
                    p.bias.scaled_add(-lr, &g.bias);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: &f64| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p *= shrink;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                };
                for (((p, g), m), v) in params
                    .layers
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    Zip::from(&mut p.weight)
                        .and(&mut m.weight)
                        .and(&mut v.weight)
                        .and(&g.weight)
                        .for_each(update);
                    Zip::from(&mut p.bias)
                        .and(&mut m.bias)
                        .and(&mut v.bias)
                        .and(&g.bias)
                        .for_each(update);
                }
            }
        }
    }
}

/// Epoch-at-a-time training state, so callers can inspect intermediate
/// checkpoints of a single deterministic run.
pub struct Trainer<'a> {
    params: MlpParams,
    ds: &'a BiasedDataset,
    cfg: TrainConfig,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    epoch: usize,
    history: TrainHistory,
}

impl<'a> Trainer<'a> {
    pub fn new(params: MlpParams, ds: &'a BiasedDataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if ds.is_empty() {
            return Err(Error::Empty("training set"));
        }
        if ds.feature_dim != params.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: params.input_dim(),
                actual: ds.feature_dim,
            });
        }
        if ds.num_classes != params.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: params.num_classes(),
                actual: ds.num_classes,
            });
        }
        Ok(Trainer {
            optimizer: Optimizer::new(cfg.optimizer, &params),
            params,
            ds,
            cfg: cfg.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            order: (0..ds.len()).collect(),
            epoch: 0,
            history: TrainHistory::default(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    /// Runs one pass over a freshly shuffled training set.
    pub fn run_epoch(&mut self) -> Result<()> {
        self.order.sort_unstable();
        self.order.shuffle(&mut self.rng);
        let mut weighted_loss = 0.0;
        for (b, batch) in self.order.chunks(self.cfg.batch_size).enumerate() {
            let (loss, grads) = loss_and_grad(&self.params, self.ds, batch, self.cfg.loss)
                .map_err(|e| match e {
                    Error::NonFinite { what, detail } => Error::NonFinite {
                        what,
                        detail: format!("{detail}; epoch {}, batch {b}", self.epoch + 1),
                    },
                    other => other,
                })?;
            weighted_loss += loss * batch.len() as f64;
            self.optimizer
                .apply(&mut self.params, &grads, self.cfg.lr, self.cfg.weight_decay);
        }
        self.params.check_finite()?;
        self.epoch += 1;
        self.history
            .mean_loss
            .push(weighted_loss / self.ds.len() as f64);
        self.history
            .aligned_acc
            .push(accuracy(&self.params, self.ds, Group::Aligned).ok());
        self.history
            .conflicting_acc
            .push(accuracy(&self.params, self.ds, Group::Conflicting).ok());
        Ok(())
    }

    pub fn finish(self) -> (MlpParams, TrainHistory) {
        (self.params, self.history)
    }
}

/// Mini-batch training with per-epoch seeded shuffling. Deterministic in
/// `(params, ds, cfg)`.
pub fn train(
    params: MlpParams,
    ds: &BiasedDataset,
    cfg: &TrainConfig,
) -> Result<(MlpParams, TrainHistory)> {
    let mut trainer = Trainer::new(params, ds, cfg)?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{Sample, Split};
    use crate::nn::init_mlp;

    fn separable() -> BiasedDataset {
        let samples = (0..40)
            .map(|i| {
                let label = i % 2;
                let sign = if label == 0 { -1.0 } else { 1.0 };
                let t = (i / 2) as f64 / 20.0;
                Sample {
                    id: i as u64,
                    features: vec![sign * (0.5 + t), 1.0 - 2.0 * t],
                    label,
                    bias_attr: label,
                }
            })
            .collect();
        BiasedDataset::new(samples, 2, 0.0, Split::Train, 2).unwrap()
    }

    #[test]
    fn separable_set_is_fit() {
        let ds = separable();
        let cfg = TrainConfig {
            epochs: 50,
            lr: 0.01,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (params, hist) = train(init_mlp(&[2, 8, 2], 3).unwrap(), &ds, &cfg).unwrap();
        assert_eq!(accuracy(&params, &ds, Group::All).unwrap(), 1.0);
        assert_eq!(hist.mean_loss.len(), 50);
        assert!(hist.mean_loss[49] < hist.mean_loss[0]);
        assert_eq!(hist.conflicting_acc, vec![None; 50]);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = separable();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 5,
            loss: LossKind::gce(),
            ..TrainConfig::default()
        };
        let init = init_mlp(&[2, 4, 2], 1).unwrap();
        let a = train(init.clone(), &ds, &cfg).unwrap();
        let b = train(init, &ds, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_configs() {
        let ds = separable();
        let init = init_mlp(&[2, 4, 2], 1).unwrap();
        let zero_epochs = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train(init.clone(), &ds, &zero_epochs).is_err());
        let empty = ds.subset(&[]);
        assert!(matches!(
            train(init, &empty, &TrainConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn sgd_matches_hand_update() {
        let ds = separable();
        let mut params = init_mlp(&[2, 3, 2], 4).unwrap();
        let before = params.clone();
        let (_, g) = loss_and_grad(&params, &ds, &[0, 1], LossKind::CrossEntropy).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &params);
        opt.apply(&mut params, &g, 0.1, 0.5);
        let expected = &before.layers[0].weight * 0.95 - &(&g[0].weight * 0.1);
        assert!((&params.layers[0].weight - &expected)
            .iter()
            .all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let ds = separable();
        let params = init_mlp(&[2, 5, 3, 2], 12).unwrap();
        let idx: Vec<usize> = (0..6).collect();
        for kind in [LossKind::CrossEntropy, LossKind::gce()] {
            let (_, g) = loss_and_grad(&params, &ds, &idx, kind).unwrap();
            let h = 1e-5;
            for l in 0..params.layers.len() {
                for ((r, c), &analytic) in g[l].weight.indexed_iter() {
                    let mut up = params.clone();
                    up.layers[l].weight[[r, c]] += h;
                    let mut dn = params.clone();
                    dn.layers[l].weight[[r, c]] -= h;
                    let f = |p: &MlpParams| loss_and_grad(p, &ds, &idx, kind).unwrap().0;
                    let fd = (f(&up) - f(&dn)) / (2.0 * h);
                    assert!((fd - analytic).abs() < 1e-7, "layer {l} [{r},{c}]: {fd} vs {analytic}");
                }
            }
        }
    }
}
