use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::datagen::BiasedDataset;
use crate::error::{Error, Result};
use crate::nn::{LastLayerInputs, LossKind, MlpParams};

/// How much to add to the Hessian diagonal before factorizing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Damping {
    /// A fixed value.
    Absolute(f64),
    /// A multiple of the mean diagonal entry, `factor * trace(H) / P`.
    RelativeTrace(f64),
}

impl Default for Damping {
    fn default() -> Self {
        Damping::RelativeTrace(1e-3)
    }
}

impl Damping {
    fn resolve(self, curvature: &Array2<f64>) -> Result<f64> {
        let value = match self {
            Damping::Absolute(v) => v,
            Damping::RelativeTrace(f) => {
                let p = curvature.nrows().max(1) as f64;
                f * curvature.diag().sum() / p
            }
        };
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::invalid("damping", format!("{value} must be nonnegative")));
        }
        Ok(value)
    }
}

/// Dense Hessian of the mean training loss with respect to the last layer,
/// plus damping on the diagonal. Uses the parameter layout of
/// [`LastLayerInputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct LastLayerHessian {
    pub matrix: Array2<f64>,
    /// Absolute value already added to the diagonal.
    pub damping: f64,
    pub n_samples: usize,
    pub loss: LossKind,
}

impl LastLayerHessian {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `value * I` of size `dim`.
    pub fn scaled_identity(dim: usize, value: f64) -> Self {
        LastLayerHessian {
            matrix: Array2::eye(dim) * value,
            damping: value,
            n_samples: 0,
            loss: LossKind::CrossEntropy,
        }
    }
}

/// Curvature of one sample's loss with respect to its logits.
///
/// CE: `diag(p) - p p^T`. GCE: `p_y^q [diag(p) - p p^T - q (p - e_y)(p - e_y)^T]`.
pub(crate) fn logit_curvature(p: &[f64], label: usize, loss: LossKind) -> Array2<f64> {
    let c = p.len();
    let mut a = Array2::from_shape_fn((c, c), |(i, j)| {
        let d = if i == j { p[i] } else { 0.0 };
        d - p[i] * p[j]
    });
    if let LossKind::Gce { q } = loss {
        let r: Vec<f64> = (0..c)
            .map(|k| p[k] - if k == label { 1.0 } else { 0.0 })
            .collect();
        let s = p[label].powf(q);
        a.indexed_iter_mut()
            .for_each(|((i, j), v)| *v = s * (*v - q * r[i] * r[j]));
    }
    a
}

/// Assembles `H = (1/N) sum_n A_n (x) [h_n; 1][h_n; 1]^T + damping * I`.
///
/// For a linear softmax head the Kronecker form is the exact Hessian of the
/// loss in the last-layer parameters. An empty dataset yields pure damping.
pub fn assemble_hessian(
    params: &MlpParams,
    ds: &BiasedDataset,
    loss: LossKind,
    damping: Damping,
) -> Result<LastLayerHessian> {
    let inputs = LastLayerInputs::compute(params, ds)?;
    assemble_from_inputs(&inputs, loss, damping)
}

pub fn assemble_from_inputs(
    inputs: &LastLayerInputs,
    loss: LossKind,
    damping: Damping,
) -> Result<LastLayerHessian> {
    loss.validate()?;
    let n = inputs.len();
    let hd = inputs.hidden_dim();
    let c = inputs.num_classes();
    let p_dim = (hd + 1) * c;
    let mut h = Array2::<f64>::zeros((p_dim, p_dim));

    if n > 0 {
        // Augmented inputs [h, 1].
        let mut aug = Array2::<f64>::ones((n, hd + 1));
        aug.slice_mut(ndarray::s![.., ..hd]).assign(&inputs.penultimate);

        // Per-sample logit curvature, scaled by 1/N.
        let curv: Vec<Array2<f64>> = (0..n)
            .map(|i| {
                logit_curvature(
                    inputs.probs.row(i).as_slice().unwrap(),
                    inputs.labels[i],
                    loss,
                ) / n as f64
            })
            .collect();

        let index = |k: usize, j: usize| if j < hd { k * hd + j } else { c * hd + k };
        for k in 0..c {
            for k2 in k..c {
                let w = ndarray::Array1::from_iter(curv.iter().map(|a| a[[k, k2]]));
                let weighted = &aug * &w.view().insert_axis(Axis(1));
                let block = weighted.t().dot(&aug);
                for ((j, j2), &v) in block.indexed_iter() {
                    h[[index(k, j), index(k2, j2)]] = v;
                    h[[index(k2, j2), index(k, j)]] = v;
                }
            }
        }
        let sym = (&h + &h.t()) * 0.5;
        h = sym;
    }

    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "Hessian entry",
            detail: format!("{n} samples"),
        });
    }
    let damping = damping.resolve(&h)?;
    h.diag_mut().iter_mut().for_each(|d| *d += damping);
    Ok(LastLayerHessian {
        matrix: h,
        damping,
        n_samples: n,
        loss,
    })
}
