//! Counterweight fine-tuning of a trained model on a pivotal set.
//!
//! Each iteration minimizes `CE(Z_P) + lambda * CE(Z_S)`, where `Z_P` is the
//! whole pivotal set and `Z_S` holds `|Z_P|` samples drawn uniformly with
//! replacement from the rest of the training set. All parameters are
//! updated with Adam under a cosine learning-rate schedule, optionally
//! after re-drawing the last layer.

use std::collections::HashMap;
use std::io::Write;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::BiasedDataset;
use crate::error::{Error, Result};
use crate::nn::{add_scaled, loss_and_grad, Layer, LossKind, MlpParams, Optimizer, OptimizerKind};
use crate::selection::PivotalSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    /// Weight of the remaining-set counterweight term.
    pub lambda: f64,
    pub n_iter: usize,
    pub lr: f64,
    /// The schedule anneals from `lr` to `lr * final_lr_factor`.
    pub final_lr_factor: f64,
    pub weight_decay: f64,
    pub reinit_last_layer: bool,
    pub seed: u64,
    /// Largest number of pivotal samples pushed through one forward pass;
    /// bigger sets are processed in chunks and recombined exactly.
    pub pivotal_chunk: usize,
    pub optimizer: OptimizerKind,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            lambda: 0.1,
            n_iter: 100,
            lr: 1e-3,
            final_lr_factor: 1e-3,
            weight_decay: 1e-4,
            reinit_last_layer: true,
            seed: 0,
            pivotal_chunk: 4096,
            optimizer: OptimizerKind::adam(),
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter < 1 {
            return Err(Error::invalid("n_iter", "must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda", "must be nonnegative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if !(self.final_lr_factor > 0.0 && self.final_lr_factor <= 1.0) {
            return Err(Error::invalid("final_lr_factor", "must be in (0, 1]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be nonnegative"));
        }
        if self.pivotal_chunk < 1 {
            return Err(Error::invalid("pivotal_chunk", "must be at least 1"));
        }
        Ok(())
    }

    /// Cosine-annealed rate for iteration `i` (0-based): `lr` at the first
    /// iteration, `lr * final_lr_factor` at the last.
    pub fn lr_at(&self, i: usize) -> f64 {
        if self.n_iter <= 1 {
            return self.lr;
        }
        let lo = self.lr * self.final_lr_factor;
        let t = i as f64 / (self.n_iter - 1) as f64;
        lo + 0.5 * (self.lr - lo) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Losses of one fine-tuning iteration, measured before its update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterTrace {
    pub iter: usize,
    pub lr: f64,
    pub loss_pivotal: f64,
    pub loss_remain: f64,
    pub loss_total: f64,
}

/// Re-draws the last layer with the initialization scheme of
/// [`init_mlp`](crate::nn::init_mlp); other layers are untouched.
pub fn reinit_last_layer(params: &MlpParams, seed: u64) -> MlpParams {
    let mut out = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (o, i) = (params.num_classes(), params.hidden_dim());
    *out.last_layer_mut() = Layer::init(&mut rng, o, i);
    out
}

fn pivotal_indices(ds: &BiasedDataset, pivotal: &PivotalSet) -> Result<(Vec<usize>, Vec<usize>)> {
    if pivotal.is_empty() {
        return Err(Error::Empty("pivotal set"));
    }
    let index: HashMap<u64, usize> = ds.samples.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    let mut in_pivotal = vec![false; ds.len()];
    let mut pivotal_idx = Vec::with_capacity(pivotal.len());
    for id in &pivotal.intersection {
        let &i = index.get(id).ok_or_else(|| {
            Error::invalid("pivotal", format!("sample {id} is not in the training set"))
        })?;
        if !in_pivotal[i] {
            in_pivotal[i] = true;
            pivotal_idx.push(i);
        }
    }
    let remain = (0..ds.len()).filter(|&i| !in_pivotal[i]).collect();
    Ok((pivotal_idx, remain))
}

/// Mean CE and gradient over `indices`, in chunks of at most `chunk`.
fn chunked_loss_and_grad(
    params: &MlpParams,
    ds: &BiasedDataset,
    indices: &[usize],
    chunk: usize,
) -> Result<(f64, Vec<Layer>)> {
    let n = indices.len() as f64;
    let mut chunks = indices.chunks(chunk);
    let first = chunks.next().expect("nonempty");
    let (loss, mut grads) = loss_and_grad(params, ds, first, LossKind::CrossEntropy)?;
    if first.len() == indices.len() {
        return Ok((loss, grads));
    }
    let w = first.len() as f64 / n;
    grads.iter_mut().for_each(|g| {
        g.weight *= w;
        g.bias *= w;
    });
    let mut total = loss * w;
    for c in chunks {
        let w = c.len() as f64 / n;
        let (l, g) = loss_and_grad(params, ds, c, LossKind::CrossEntropy)?;
        total += l * w;
        add_scaled(&mut grads, &g, w);
    }
    Ok((total, grads))
}

/// Fine-tunes every parameter of `params` on `pivotal` with the
/// remaining-set counterweight. Returns the new parameters and one trace
/// row per iteration.
pub fn finetune(
    params: &MlpParams,
    ds: &BiasedDataset,
    pivotal: &PivotalSet,
    cfg: &FineTuneConfig,
) -> Result<(MlpParams, Vec<IterTrace>)> {
    cfg.validate()?;
    let (pivotal_idx, remain_idx) = pivotal_indices(ds, pivotal)?;
    if remain_idx.is_empty() {
        warn!("pivotal set covers the whole training set; the counterweight term is zero");
    }
    let mut params = if cfg.reinit_last_layer {
        reinit_last_layer(params, cfg.seed)
    } else {
        params.clone()
    };
    let mut optimizer = Optimizer::new(cfg.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let n_p = pivotal_idx.len();
    let mut trace = Vec::with_capacity(cfg.n_iter);
    let mut drawn = Vec::with_capacity(n_p);

    for iter in 0..cfg.n_iter {
        let (loss_pivotal, mut grads) =
            chunked_loss_and_grad(&params, ds, &pivotal_idx, cfg.pivotal_chunk)?;
        let loss_remain = if remain_idx.is_empty() {
            0.0
        } else {
            drawn.clear();
            drawn.extend((0..n_p).map(|_| remain_idx[rng.random_range(0..remain_idx.len())]));
            let (l, g) = chunked_loss_and_grad(&params, ds, &drawn, cfg.pivotal_chunk)?;
            add_scaled(&mut grads, &g, cfg.lambda);
            l
        };
        let loss_total = loss_pivotal + cfg.lambda * loss_remain;
        if !loss_total.is_finite() {
            return Err(Error::NonFinite {
                what: "fine-tuning loss",
                detail: format!("iteration {iter}"),
            });
        }
        let lr = cfg.lr_at(iter);
        optimizer.apply(&mut params, &grads, lr, cfg.weight_decay);
        trace.push(IterTrace {
            iter,
            lr,
            loss_pivotal,
            loss_remain,
            loss_total,
        });
    }
    params.check_finite()?;
    Ok((params, trace))
}

pub const TRACE_CSV_HEADER: &str = "iter,lr,loss_pivotal,loss_remain,loss_total";

pub fn write_trace_csv<W: Write>(mut out: W, trace: &[IterTrace]) -> Result<()> {
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    for t in trace {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            t.iter, t.lr, t.loss_pivotal, t.loss_remain, t.loss_total
        )?;
    }
    Ok(())
}
