use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"BFMP";
const CHECKPOINT_VERSION: u8 = 1;

/// One affine map `x -> W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Layer {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Uniform in `+-sqrt(6 / fan_in)`, zero bias.
    pub fn init<R: Rng>(rng: &mut R, out_dim: usize, in_dim: usize) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((out_dim, in_dim), || {
            rng.random_range(-bound..bound)
        });
        Layer {
            weight,
            bias: Array1::zeros(out_dim),
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Feedforward classifier: affine layers with ReLU between them and a
/// linear output layer producing one logit per class.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Output of a single-sample forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    /// Input to the last layer (the raw features for a one-layer net).
    pub penultimate: Vec<f64>,
}

/// Per-layer pre-activations and activations of a batch forward pass.
pub(crate) struct BatchTrace {
    /// `inputs[l]` is the input to layer `l`; `inputs[0]` is the batch.
    pub inputs: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

/// Creates a network with layer widths `dims = [d, h_1, ..., C]`.
pub fn init_mlp(dims: &[usize], seed: u64) -> Result<MlpParams> {
    if dims.len() < 2 {
        return Err(Error::invalid("dims", "need at least an input and an output width"));
    }
    if dims.iter().any(|&d| d < 1) {
        return Err(Error::invalid("dims", "every width must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims
        .windows(2)
        .map(|w| Layer::init(&mut rng, w[1], w[0]))
        .collect();
    Ok(MlpParams { layers })
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("layers", "need at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::DimensionMismatch {
                    expected: w[0].out_dim(),
                    actual: w[1].in_dim(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.out_dim() {
                return Err(Error::DimensionMismatch {
                    expected: l.out_dim(),
                    actual: l.bias.len(),
                });
            }
        }
        let params = MlpParams { layers };
        params.check_finite()?;
        Ok(params)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Layer::out_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.last_layer().out_dim()
    }

    /// Width of the representation feeding the last layer.
    pub fn hidden_dim(&self) -> usize {
        self.last_layer().in_dim()
    }

    pub fn last_layer(&self) -> &Layer {
        self.layers.last().expect("at least one layer")
    }

    pub fn last_layer_mut(&mut self) -> &mut Layer {
        self.layers.last_mut().expect("at least one layer")
    }

    /// Number of parameters in the last layer, `(hidden_dim + 1) * C`.
    pub fn last_layer_size(&self) -> usize {
        self.last_layer().param_count()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "parameter",
                    detail: format!("layer {i}"),
                });
            }
        }
        Ok(())
    }

    pub fn forward(&self, features: &[f64]) -> Result<Forward> {
        if features.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: features.len(),
            });
        }
        let mut a = Array1::from(features.to_vec());
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            a = (layer.weight.dot(&a) + &layer.bias).mapv(|v| v.max(0.0));
        }
        let out = &self.layers[last];
        let logits = out.weight.dot(&a) + &out.bias;
        Ok(Forward {
            logits: logits.to_vec(),
            penultimate: a.to_vec(),
        })
    }

    pub(crate) fn forward_trace(&self, x: Array2<f64>) -> BatchTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x;
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            let mut z = a.dot(&layer.weight.t()) + &layer.bias;
            relu_inplace(&mut z);
            inputs.push(a);
            a = z;
        }
        let out = &self.layers[last];
        let logits = a.dot(&out.weight.t()) + &out.bias;
        inputs.push(a);
        BatchTrace { inputs, logits }
    }

    /// Logits for a row-stacked batch.
    pub fn logits_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.penultimate_and_logits(x)?.1)
    }

    /// Last-layer inputs and logits for a row-stacked batch.
    pub fn penultimate_and_logits(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        let mut trace = self.forward_trace(x.to_owned());
        let h = trace.inputs.pop().expect("at least one layer");
        Ok((h, trace.logits))
    }

    /// Gradient of `sum_i logit_grads[i] . logits(x_i)` with respect to every
    /// parameter, given a forward trace of the same batch.
    pub(crate) fn backward(&self, trace: &BatchTrace, logit_grads: Array2<f64>) -> Vec<Layer> {
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = logit_grads;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[l];
            let weight = delta.t().dot(input);
            let bias = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut next = delta.dot(&layer.weight);
                // ReLU derivative: inputs[l] is the post-activation of layer l-1.
                next.zip_mut_with(input, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = next;
            }
            grads.push(Layer { weight, bias });
        }
        grads.reverse();
        grads
    }

    /// Predicted class: argmax of the logits, lowest index on ties.
    pub fn predict(&self, features: &[f64]) -> Result<usize> {
        Ok(argmax(self.forward(features)?.logits.iter().copied()))
    }

    pub fn predict_batch(&self, x: &Array2<f64>) -> Result<Vec<usize>> {
        let logits = self.logits_batch(x)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|row: ArrayView1<f64>| argmax(row.iter().copied()))
            .collect())
    }

    /// Serializes to the `BFMP` checkpoint format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        let dims = self.dims();
        w.u32(dims.len() as u32);
        for d in dims {
            w.u32(d as u32);
        }
        for l in &self.layers {
            w.f64s(l.weight.iter().copied());
            w.f64s(l.bias.iter().copied());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let n = r.u32()? as usize;
        if n < 2 {
            return Err(Error::Format(format!("checkpoint lists {n} widths")));
        }
        let dims = (0..n)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(n - 1);
        for w in dims.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            let weight = (0..in_dim * out_dim)
                .map(|_| r.f64())
                .collect::<Result<Vec<_>>>()?;
            let bias = (0..out_dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            layers.push(Layer {
                weight: Array2::from_shape_vec((out_dim, in_dim), weight)
                    .map_err(|e| Error::Format(e.to_string()))?,
                bias: Array1::from(bias),
            });
        }
        r.expect_end()?;
        MlpParams::new(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        MlpParams::from_bytes(&fs::read(path)?)
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn init_shapes_and_determinism() {
        let a = init_mlp(&[4, 8, 3], 1).unwrap();
        assert_eq!(a.layers.len(), 2);
        assert_eq!(a.layers[0].weight.dim(), (8, 4));
        assert_eq!(a.layers[1].weight.dim(), (3, 8));
        assert_eq!(a, init_mlp(&[4, 8, 3], 1).unwrap());
        assert_ne!(a, init_mlp(&[4, 8, 3], 2).unwrap());
        let bound = (6.0f64 / 4.0).sqrt();
        assert!(a.layers[0].weight.iter().all(|w| w.abs() <= bound));
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert!(init_mlp(&[4], 0).is_err());
        assert!(init_mlp(&[4, 0, 2], 0).is_err());
    }

    #[test]
    fn forward_cases() {
        let zero = MlpParams::new(vec![Layer::zeros(5, 3), Layer::zeros(2, 5)]).unwrap();
        let out = zero.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out.logits, vec![0.0, 0.0]);
        assert_eq!(out.penultimate.len(), 5);

        let single = MlpParams::new(vec![Layer {
            weight: array![[1.0, 2.0], [-1.0, 0.5], [0.0, 3.0]],
            bias: array![0.1, 0.2, 0.3],
        }])
        .unwrap();
        let out = single.forward(&[2.0, -1.0]).unwrap();
        assert_eq!(out.logits, vec![0.1, -2.5 + 0.2, -3.0 + 0.3]);
        assert_eq!(out.penultimate, vec![2.0, -1.0]);

        assert!(matches!(
            single.forward(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn batch_matches_single() {
        let p = init_mlp(&[3, 6, 4, 2], 9).unwrap();
        let x = array![[0.5, -1.0, 2.0], [1.5, 0.0, -0.3]];
        let (h, logits) = p.penultimate_and_logits(&x).unwrap();
        for r in 0..2 {
            let f = p.forward(x.row(r).as_slice().unwrap()).unwrap();
            for (a, b) in f.logits.iter().zip(logits.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in f.penultimate.iter().zip(h.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax([1.0, 3.0, 3.0].into_iter()), 1);
        assert_eq!(argmax([0.0, 0.0].into_iter()), 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_mlp(&[3, 4, 2], 5).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"BFMP");
        assert_eq!(MlpParams::from_bytes(&bytes).unwrap(), p);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(
            MlpParams::from_bytes(&bad),
            Err(Error::Checksum { .. })
        ));
    }
}
