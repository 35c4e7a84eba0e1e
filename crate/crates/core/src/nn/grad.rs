use ndarray::Array2;

use super::loss::{softmax, LossKind};
use super::mlp::MlpParams;
use crate::datagen::{BiasedDataset, Sample};
use crate::error::{Error, Result};

/// Everything the last layer sees for a dataset at fixed parameters: its
/// inputs `h` (one row per sample), the softmax outputs and the labels.
///
/// Last-layer parameter vectors use the layout
/// `[W[0,0..h], W[1,0..h], ..., W[C-1,0..h], b[0..C]]`, i.e. the row-major
/// weight followed by the bias, `(h + 1) * C` entries in total.
#[derive(Debug, Clone)]
pub struct LastLayerInputs {
    pub penultimate: Array2<f64>,
    pub probs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LastLayerInputs {
    pub fn compute(params: &MlpParams, ds: &BiasedDataset) -> Result<Self> {
        if ds.num_classes != params.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: params.num_classes(),
                actual: ds.num_classes,
            });
        }
        let (penultimate, logits) = if ds.is_empty() {
            (
                Array2::zeros((0, params.hidden_dim())),
                Array2::zeros((0, params.num_classes())),
            )
        } else {
            params.penultimate_and_logits(&ds.features_matrix())?
        };
        if penultimate.iter().any(|v| !v.is_finite()) || logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "activation",
                detail: "last-layer inputs".into(),
            });
        }
        let penultimate = penultimate.as_standard_layout().into_owned();
        let mut probs = logits.as_standard_layout().into_owned();
        for mut row in probs.rows_mut() {
            let p = softmax(&row.to_vec());
            row.iter_mut().zip(p).for_each(|(dst, v)| *dst = v);
        }
        Ok(LastLayerInputs {
            penultimate,
            probs,
            labels: ds.labels(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn hidden_dim(&self) -> usize {
        self.penultimate.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.ncols()
    }

    pub fn param_dim(&self) -> usize {
        (self.hidden_dim() + 1) * self.num_classes()
    }

    /// Gradient of sample `i`'s loss with respect to the last layer.
    pub fn grad(&self, i: usize, loss: LossKind) -> Vec<f64> {
        let h = self.penultimate.row(i);
        let p = self.probs.row(i);
        last_layer_grad_from(
            h.as_slice().unwrap(),
            p.as_slice().unwrap(),
            self.labels[i],
            loss,
        )
    }
}

/// Last-layer gradient from the layer input `h`, the softmax output `p` and
/// the label: `vec((p - e_y) h^T)` followed by `p - e_y`, scaled by `p_y^q`
/// for GCE.
pub fn last_layer_grad_from(h: &[f64], p: &[f64], label: usize, loss: LossKind) -> Vec<f64> {
    let hd = h.len();
    let c = p.len();
    let scale = loss.grad_scale(p[label]);
    let mut g = vec![0.0; (hd + 1) * c];
    for k in 0..c {
        let r = scale * (p[k] - if k == label { 1.0 } else { 0.0 });
        let row = &mut g[k * hd..(k + 1) * hd];
        row.iter_mut().zip(h).for_each(|(dst, &hj)| *dst = r * hj);
        g[c * hd + k] = r;
    }
    g
}

/// Gradient of one sample's loss with respect to the last layer's weight
/// and bias, flattened as described on [`LastLayerInputs`].
pub fn last_layer_grad(params: &MlpParams, sample: &Sample, loss: LossKind) -> Result<Vec<f64>> {
    loss.validate()?;
    if sample.label >= params.num_classes() {
        return Err(Error::LabelOutOfRange {
            label: sample.label,
            classes: params.num_classes(),
        });
    }
    let f = params.forward(&sample.features)?;
    let p = softmax(&f.logits);
    Ok(last_layer_grad_from(&f.penultimate, &p, sample.label, loss))
}
