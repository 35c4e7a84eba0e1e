use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hessian::{assemble_from_inputs, Damping, LastLayerHessian};
use super::solve::{dot, norm, HessianFactor};
use crate::datagen::{BiasedDataset, Sample};
use crate::error::{Error, Result};
use crate::nn::{
    init_mlp, last_layer_grad, LastLayerInputs, LossKind, MlpParams, OptimizerKind, TrainConfig,
    Trainer,
};

/// Scoring rule that produced an [`InfluenceRecord`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Loss,
    GradNorm,
    SelfInfluence,
    Bcsi,
    IfTrain,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Loss,
        Method::GradNorm,
        Method::SelfInfluence,
        Method::IfTrain,
        Method::Bcsi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Loss => "loss",
            Method::GradNorm => "grad_norm",
            Method::SelfInfluence => "self_influence",
            Method::Bcsi => "bcsi",
            Method::IfTrain => "if_train",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub sample_id: u64,
    pub score: f64,
    pub method: Method,
    pub run_seed: u64,
    pub epoch_t: usize,
}

fn check_same_space(params: &MlpParams, h: &HessianFactor<'_>) -> Result<()> {
    if params.last_layer_size() != h.dim() {
        return Err(Error::DimensionMismatch {
            expected: h.dim(),
            actual: params.last_layer_size(),
        });
    }
    Ok(())
}

/// `g^T H^{-1} g` for one sample's last-layer gradient `g`.
pub fn self_influence(
    params: &MlpParams,
    h: &HessianFactor<'_>,
    sample: &Sample,
    loss: LossKind,
) -> Result<f64> {
    check_same_space(params, h)?;
    let g = last_layer_grad(params, sample, loss)?;
    h.quadratic(&g)
}

/// `grad(z')^T H^{-1} grad(z)`; symmetric in `z` and `z'`.
pub fn cross_influence(
    params: &MlpParams,
    h: &HessianFactor<'_>,
    z: &Sample,
    z_prime: &Sample,
    loss: LossKind,
) -> Result<f64> {
    check_same_space(params, h)?;
    let g = last_layer_grad(params, z, loss)?;
    let g_prime = last_layer_grad(params, z_prime, loss)?;
    h.bilinear(&g_prime, &g)
}

/// Mean influence of `z` on the samples of `ds`, computed as
/// `grad(z)^T H^{-1} mean_grad` with a single solve.
pub fn if_train(
    params: &MlpParams,
    h: &HessianFactor<'_>,
    z: &Sample,
    ds: &BiasedDataset,
    loss: LossKind,
) -> Result<f64> {
    check_same_space(params, h)?;
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let inputs = LastLayerInputs::compute(params, ds)?;
    let v = h.solve(&mean_grad(&inputs, loss))?;
    Ok(dot(&last_layer_grad(params, z, loss)?, &v))
}

fn mean_grad(inputs: &LastLayerInputs, loss: LossKind) -> Vec<f64> {
    let n = inputs.len() as f64;
    let mut acc = vec![0.0; inputs.param_dim()];
    for i in 0..inputs.len() {
        acc.iter_mut()
            .zip(inputs.grad(i, loss))
            .for_each(|(a, g)| *a += g);
    }
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Self-influence of every sample behind `inputs`.
pub fn self_influence_all(
    inputs: &LastLayerInputs,
    h: &HessianFactor<'_>,
    loss: LossKind,
) -> Result<Vec<f64>> {
    (0..inputs.len())
        .into_par_iter()
        .map(|i| h.quadratic(&inputs.grad(i, loss)))
        .collect()
}

/// Training-set influence of every sample behind `inputs`.
pub fn if_train_all(
    inputs: &LastLayerInputs,
    h: &HessianFactor<'_>,
    loss: LossKind,
) -> Result<Vec<f64>> {
    if inputs.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let v = h.solve(&mean_grad(inputs, loss))?;
    Ok((0..inputs.len())
        .into_par_iter()
        .map(|i| dot(&inputs.grad(i, loss), &v))
        .collect())
}

fn records(
    ds: &BiasedDataset,
    scores: Vec<f64>,
    method: Method,
    run_seed: u64,
    epoch_t: usize,
) -> Result<Vec<InfluenceRecord>> {
    ds.samples
        .iter()
        .zip(scores)
        .map(|(s, score)| {
            if !score.is_finite() {
                return Err(Error::NonFinite {
                    what: "score",
                    detail: format!("{method} for sample {}", s.id),
                });
            }
            Ok(InfluenceRecord {
                sample_id: s.id,
                score,
                method,
                run_seed,
                epoch_t,
            })
        })
        .collect()
}

/// Per-sample cross-entropy of a trained model (`run_seed` and `epoch_t`
/// are left at zero).
pub fn loss_scores(params: &MlpParams, ds: &BiasedDataset) -> Result<Vec<InfluenceRecord>> {
    let inputs = LastLayerInputs::compute(params, ds)?;
    let scores = (0..inputs.len())
        .map(|i| -inputs.probs[[i, inputs.labels[i]]].ln())
        .collect();
    records(ds, scores, Method::Loss, 0, 0)
}

/// Per-sample L2 norm of the cross-entropy last-layer gradient.
pub fn gradnorm_scores(params: &MlpParams, ds: &BiasedDataset) -> Result<Vec<InfluenceRecord>> {
    let inputs = LastLayerInputs::compute(params, ds)?;
    let scores = (0..inputs.len())
        .map(|i| norm(&inputs.grad(i, LossKind::CrossEntropy)))
        .collect();
    records(ds, scores, Method::GradNorm, 0, 0)
}

/// How to train the model a detector scores with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub epochs: usize,
    /// Objective used to train the detection model.
    pub train_loss: LossKind,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub damping: Damping,
    /// Seeds both the initialization and the shuffling.
    pub seed: u64,
}

impl DetectorConfig {
    /// Early-stopped GCE model: five epochs, `q = 0.7`, Adam at `1e-3`.
    pub fn bcsi() -> Self {
        DetectorConfig {
            epochs: 5,
            train_loss: LossKind::gce(),
            lr: 1e-3,
            batch_size: 64,
            weight_decay: 0.0,
            optimizer: OptimizerKind::adam(),
            damping: Damping::default(),
            seed: 0,
        }
    }

    /// CE model trained to convergence.
    pub fn converged_ce() -> Self {
        DetectorConfig {
            epochs: 100,
            train_loss: LossKind::CrossEntropy,
            ..DetectorConfig::bcsi()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        DetectorConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.train_loss,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
            weight_decay: self.weight_decay,
            optimizer: self.optimizer,
        }
    }
}

/// The influence functional: gradients and Hessian of the cross-entropy,
/// regardless of which objective trained the model.
pub const INFLUENCE_LOSS: LossKind = LossKind::CrossEntropy;

/// Self-influence and train-set influence of a fixed model.
#[derive(Debug, Clone)]
pub struct ModelScores {
    pub self_influence: Vec<f64>,
    pub if_train: Vec<f64>,
    pub hessian: LastLayerHessian,
}

/// Scores every sample of `ds` against the model `params`.
pub fn score_model(params: &MlpParams, ds: &BiasedDataset, damping: Damping) -> Result<ModelScores> {
    let inputs = LastLayerInputs::compute(params, ds)?;
    let hessian = assemble_from_inputs(&inputs, INFLUENCE_LOSS, damping)?;
    let factor = hessian.factor()?;
    let self_influence = self_influence_all(&inputs, &factor, INFLUENCE_LOSS)?;
    let if_train = if_train_all(&inputs, &factor, INFLUENCE_LOSS)?;
    Ok(ModelScores {
        self_influence,
        if_train,
        hessian,
    })
}

/// Trains a fresh model of widths `dims` and returns its parameters.
pub fn train_detector(ds: &BiasedDataset, dims: &[usize], cfg: &DetectorConfig) -> Result<MlpParams> {
    let mut trainer = Trainer::new(init_mlp(dims, cfg.seed)?, ds, &cfg.train_config())?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.finish().0)
}

fn self_influence_records(
    ds: &BiasedDataset,
    dims: &[usize],
    cfg: &DetectorConfig,
    method: Method,
) -> Result<Vec<InfluenceRecord>> {
    let params = train_detector(ds, dims, cfg)?;
    let inputs = LastLayerInputs::compute(&params, ds)?;
    let hessian = assemble_from_inputs(&inputs, INFLUENCE_LOSS, cfg.damping)?;
    let scores = self_influence_all(&inputs, &hessian.factor()?, INFLUENCE_LOSS)?;
    records(ds, scores, method, cfg.seed, cfg.epochs)
}

/// Bias-conditioned self-influence: self-influence measured on a model
/// deliberately kept biased by a few epochs of GCE training (see
/// [`DetectorConfig::bcsi`]). Gradients and Hessian are those of the
/// cross-entropy at the trained parameters.
pub fn bcsi_scores(
    ds: &BiasedDataset,
    dims: &[usize],
    cfg: &DetectorConfig,
) -> Result<Vec<InfluenceRecord>> {
    self_influence_records(ds, dims, cfg, Method::Bcsi)
}

/// Plain self-influence on a model trained to convergence, the usual
/// mislabeled-sample detector (see [`DetectorConfig::converged_ce`]).
pub fn si_scores(
    ds: &BiasedDataset,
    dims: &[usize],
    cfg: &DetectorConfig,
) -> Result<Vec<InfluenceRecord>> {
    self_influence_records(ds, dims, cfg, Method::SelfInfluence)
}

pub const SCORES_CSV_HEADER: &str = "sample_id,method,epoch_t,run_seed,score";

/// Writes records as CSV with 17 significant digits per score.
pub fn write_scores_csv<W: Write>(mut out: W, records: &[InfluenceRecord]) -> Result<()> {
    writeln!(out, "{SCORES_CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{:.16e}",
            r.sample_id, r.method, r.epoch_t, r.run_seed, r.score
        )?;
    }
    Ok(())
}

pub fn read_scores_csv<R: BufRead>(input: R) -> Result<Vec<InfluenceRecord>> {
    let mut lines = input.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == SCORES_CSV_HEADER => {}
        Some(Err(e)) => return Err(e.into()),
        _ => return Err(Error::Format("missing score CSV header".into())),
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("score CSV line {}: bad {what}", n + 2));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(bad("column count"));
        }
        out.push(InfluenceRecord {
            sample_id: cols[0].parse().map_err(|_| bad("sample_id"))?,
            method: cols[1].parse()?,
            epoch_t: cols[2].parse().map_err(|_| bad("epoch_t"))?,
            run_seed: cols[3].parse().map_err(|_| bad("run_seed"))?,
            score: cols[4].parse().map_err(|_| bad("score"))?,
        });
    }
    Ok(out)
}
