//! Biased datasets: a synthetic Gaussian generator with a controllable
//! bias-conflicting ratio, colored-MNIST ingestion from IDX files, and the
//! `BFDS` binary dataset format.
//!
//! Every sample carries a task label `y` and a hidden bias attribute `b`.
//! The canonical bias of class `y` is `b = y`, so a sample is
//! *bias-aligned* when `b == y` and *bias-conflicting* otherwise. Training
//! code only ever reads features and labels; the bias attribute exists for
//! evaluation.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

const DATASET_MAGIC: &[u8; 4] = b"BFDS";
const DATASET_VERSION: u8 = 1;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// RGB triples used to tint grayscale digits; color `i` is the canonical
/// bias of digit `i`.
pub const COLOR_PALETTE: [[f64; 3]; 10] = [
    [1.0, 0.0, 0.0], // red
    [0.0, 1.0, 0.0], // green
    [0.0, 0.0, 1.0], // blue
    [1.0, 1.0, 0.0], // yellow
    [1.0, 0.0, 1.0], // magenta
    [0.0, 1.0, 1.0], // cyan
    [1.0, 0.5, 0.0], // orange
    [0.5, 0.0, 0.5], // purple
    [0.0, 0.5, 0.5], // teal
    [0.5, 0.5, 0.0], // olive
];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
    /// Evaluation only.
    pub bias_attr: usize,
}

impl Sample {
    pub fn is_conflicting(&self) -> bool {
        self.bias_attr != self.label
    }

    pub fn is_aligned(&self) -> bool {
        !self.is_conflicting()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            t => Err(Error::Format(format!("unknown split tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasedDataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    /// Nominal bias-conflicting ratio the set was drawn with.
    pub conflict_ratio: f64,
    pub split: Split,
    pub feature_dim: usize,
}

impl BiasedDataset {
    /// Builds a dataset, checking every sample against `num_classes` and
    /// `feature_dim`.
    pub fn new(
        samples: Vec<Sample>,
        num_classes: usize,
        conflict_ratio: f64,
        split: Split,
        feature_dim: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("num_classes", "must be at least 2"));
        }
        for s in &samples {
            if s.features.len() != feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: feature_dim,
                    actual: s.features.len(),
                });
            }
            for &v in [s.label, s.bias_attr].iter() {
                if v >= num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: v,
                        classes: num_classes,
                    });
                }
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "feature",
                    detail: format!("sample {}", s.id),
                });
            }
        }
        Ok(BiasedDataset {
            samples,
            num_classes,
            conflict_ratio,
            split,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn conflicting_count(&self) -> usize {
        self.samples.iter().filter(|s| s.is_conflicting()).count()
    }

    pub fn conflicting_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.conflicting_count() as f64 / self.len() as f64
    }

    /// Returns a dataset holding only the samples at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> BiasedDataset {
        BiasedDataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
            conflict_ratio: self.conflict_ratio,
            split: self.split,
            feature_dim: self.feature_dim,
        }
    }

    /// Row-stacks the features of the samples at `indices`.
    pub fn feature_rows(&self, indices: &[usize]) -> Array2<f64> {
        let mut x = Array2::zeros((indices.len(), self.feature_dim));
        for (r, &i) in indices.iter().enumerate() {
            x.row_mut(r)
                .iter_mut()
                .zip(&self.samples[i].features)
                .for_each(|(dst, &v)| *dst = v);
        }
        x
    }

    pub fn features_matrix(&self) -> Array2<f64> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.feature_rows(&all)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Keeps only the feature columns in `cols`.
    pub fn project(&self, cols: std::ops::Range<usize>) -> BiasedDataset {
        let dim = cols.len();
        BiasedDataset {
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    features: s.features[cols.clone()].to_vec(),
                    ..s.clone()
                })
                .collect(),
            feature_dim: dim,
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> BiasedDataset {
        BiasedDataset {
            samples: Vec::new(),
            num_classes: self.num_classes,
            conflict_ratio: self.conflict_ratio,
            split: self.split,
            feature_dim: self.feature_dim,
        }
    }

    /// Serializes to the `BFDS` format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
        w.u32(self.num_classes as u32);
        w.u32(self.feature_dim as u32);
        w.f64(self.conflict_ratio);
        w.u8(self.split.tag());
        w.u64(self.samples.len() as u64);
        for s in &self.samples {
            w.u64(s.id);
            w.u16(s.label as u16);
            w.u16(s.bias_attr as u16);
            w.f64s(s.features.iter().copied());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, DATASET_MAGIC, DATASET_VERSION)?;
        let num_classes = r.u32()? as usize;
        let feature_dim = r.u32()? as usize;
        let conflict_ratio = r.f64()?;
        let split = Split::from_tag(r.u8()?)?;
        let count = r.u64()? as usize;
        let per_sample = 12 + 8 * feature_dim;
        if per_sample.checked_mul(count) != Some(r.remaining()) {
            return Err(Error::Format(format!(
                "payload holds {} bytes, expected {count} samples of {per_sample} bytes",
                r.remaining()
            )));
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let id = r.u64()?;
            let label = r.u16()? as usize;
            let bias_attr = r.u16()? as usize;
            let features = (0..feature_dim)
                .map(|_| r.f64())
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                id,
                features,
                label,
                bias_attr,
            });
        }
        r.expect_end()?;
        BiasedDataset::new(samples, num_classes, conflict_ratio, split, feature_dim)
    }
}

pub fn save_dataset(ds: &BiasedDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ds.to_bytes())?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<BiasedDataset> {
    BiasedDataset::from_bytes(&fs::read(path)?)
}

/// Parameters of the synthetic Gaussian generator.
///
/// Features are `[signal block | bias block]`. The signal block of a class-`y`
/// sample is centered at `signal_margin * e_y`, the bias block at
/// `bias_margin * e_b`, both with isotropic noise `noise_sigma`. A larger bias
/// margin makes the bias the easier cue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_per_class: usize,
    pub num_classes: usize,
    pub d_signal: usize,
    pub d_bias: usize,
    pub signal_margin: f64,
    pub bias_margin: f64,
    pub noise_sigma: f64,
    pub conflict_ratio: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_per_class: 500,
            num_classes: 5,
            d_signal: 5,
            d_bias: 5,
            signal_margin: 1.0,
            bias_margin: 3.0,
            noise_sigma: 1.0,
            conflict_ratio: 0.05,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn feature_dim(&self) -> usize {
        self.d_signal + self.d_bias
    }

    /// Ratio at which the bias attribute is uniform and carries no label
    /// information.
    pub fn unbiased_ratio(num_classes: usize) -> f64 {
        (num_classes as f64 - 1.0) / num_classes as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", "must be at least 2"));
        }
        if self.num_classes > u16::MAX as usize {
            return Err(Error::invalid("num_classes", "must fit in u16"));
        }
        if self.n_per_class < 1 {
            return Err(Error::invalid("n_per_class", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.conflict_ratio) {
            return Err(Error::invalid(
                "conflict_ratio",
                format!("{} is outside [0, 1]", self.conflict_ratio),
            ));
        }
        if self.d_signal < self.num_classes {
            return Err(Error::invalid("d_signal", "must be at least num_classes"));
        }
        if self.d_bias < self.num_classes {
            return Err(Error::invalid("d_bias", "must be at least num_classes"));
        }
        for (field, v) in [
            ("signal_margin", self.signal_margin),
            ("bias_margin", self.bias_margin),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(field, format!("{v} must be positive")));
            }
        }
        if self.bias_margin <= self.signal_margin {
            return Err(Error::invalid(
                "bias_margin",
                "must exceed signal_margin so the bias is the easier cue",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum BiasDraw {
    /// Canonical bias with probability `1 - r`, otherwise one of the other classes.
    Ratio(f64),
    Uniform,
}

fn draw_bias<R: Rng>(rng: &mut R, label: usize, classes: usize, draw: BiasDraw) -> usize {
    match draw {
        BiasDraw::Uniform => rng.random_range(0..classes),
        BiasDraw::Ratio(r) => {
            // Always consume both draws so the stream layout does not depend on r.
            let u: f64 = rng.random();
            let other = rng.random_range(0..classes - 1);
            if u < r {
                if other >= label {
                    other + 1
                } else {
                    other
                }
            } else {
                label
            }
        }
    }
}

fn synthesize(
    cfg: &GenConfig,
    n_per_class: usize,
    draw: BiasDraw,
    split: Split,
    ratio: f64,
) -> Result<BiasedDataset> {
    cfg.validate()?;
    if n_per_class < 1 {
        return Err(Error::invalid("n_per_class", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Each split reads its own stream so a test set never replays training noise.
    rng.set_stream(u64::from(split.tag()));
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::invalid("noise_sigma", e.to_string()))?;
    let d = cfg.feature_dim();
    let c = cfg.num_classes;
    let mut samples = Vec::with_capacity(n_per_class * c);
    for label in 0..c {
        for _ in 0..n_per_class {
            let bias_attr = draw_bias(&mut rng, label, c, draw);
            let mut features = vec![0.0; d];
            for (j, f) in features.iter_mut().enumerate() {
                let center = if j < cfg.d_signal {
                    if j == label {
                        cfg.signal_margin
                    } else {
                        0.0
                    }
                } else if j - cfg.d_signal == bias_attr {
                    cfg.bias_margin
                } else {
                    0.0
                };
                *f = center + noise.sample(&mut rng);
            }
            samples.push(Sample {
                id: samples.len() as u64,
                features,
                label,
                bias_attr,
            });
        }
    }
    BiasedDataset::new(samples, c, ratio, split, d)
}

/// Draws a biased training set: `n_per_class` samples per class, each
/// bias-conflicting with probability `cfg.conflict_ratio`.
pub fn generate_synthetic(cfg: &GenConfig) -> Result<BiasedDataset> {
    synthesize(
        cfg,
        cfg.n_per_class,
        BiasDraw::Ratio(cfg.conflict_ratio),
        Split::Train,
        cfg.conflict_ratio,
    )
}

/// Draws a test set from the same class-conditional distributions but with
/// the bias attribute uniform over all classes, independent of the label.
pub fn generate_unbiased_test(cfg: &GenConfig, n_per_class: usize) -> Result<BiasedDataset> {
    synthesize(
        cfg,
        n_per_class,
        BiasDraw::Uniform,
        Split::Test,
        GenConfig::unbiased_ratio(cfg.num_classes),
    )
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("IDX header truncated".into()))
}

/// Builds a colored-digit dataset from in-memory IDX3 image and IDX1 label
/// files. Each grayscale pixel `p` becomes `p/255 * color` on three channel
/// planes; the color is the digit's own palette entry with probability
/// `1 - r`, otherwise one of the other nine.
pub fn color_bias_from_idx(
    image_bytes: &[u8],
    label_bytes: &[u8],
    r: f64,
    seed: u64,
) -> Result<BiasedDataset> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::invalid("r", format!("{r} is outside [0, 1]")));
    }
    let magic = be_u32(image_bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let magic = be_u32(label_bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n_images = be_u32(image_bytes, 4)? as usize;
    let rows = be_u32(image_bytes, 8)? as usize;
    let cols = be_u32(image_bytes, 12)? as usize;
    let n_labels = be_u32(label_bytes, 4)? as usize;
    if n_images != n_labels {
        return Err(Error::Format(format!(
            "{n_images} images but {n_labels} labels"
        )));
    }
    let pixels = rows * cols;
    let images = &image_bytes[16..];
    let labels = &label_bytes[8..];
    if images.len() != n_images * pixels {
        return Err(Error::Format(format!(
            "image payload is {} bytes, expected {}",
            images.len(),
            n_images * pixels
        )));
    }
    if labels.len() != n_labels {
        return Err(Error::Format(format!(
            "label payload is {} bytes, expected {n_labels}",
            labels.len()
        )));
    }

    let classes = COLOR_PALETTE.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_images);
    for (i, (image, &label)) in images.chunks_exact(pixels).zip(labels).enumerate() {
        let label = label as usize;
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let bias_attr = draw_bias(&mut rng, label, classes, BiasDraw::Ratio(r));
        let color = COLOR_PALETTE[bias_attr];
        let mut features = Vec::with_capacity(3 * pixels);
        for channel in color {
            features.extend(image.iter().map(|&p| channel * p as f64 / 255.0));
        }
        samples.push(Sample {
            id: i as u64,
            features,
            label,
            bias_attr,
        });
    }
    BiasedDataset::new(samples, classes, r, Split::Train, 3 * pixels)
}

/// File-based wrapper around [`color_bias_from_idx`].
pub fn load_idx_with_color_bias(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    r: f64,
    seed: u64,
) -> Result<BiasedDataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    color_bias_from_idx(&images, &labels, r, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(r: f64, seed: u64) -> GenConfig {
        GenConfig {
            n_per_class: 50,
            conflict_ratio: r,
            seed,
            ..GenConfig::default()
        }
    }

    /// Two-sided 3-sigma band of a Binomial(n, p) count.
    fn three_sigma(n: usize, p: f64) -> (f64, f64) {
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        (mean - 3.0 * sd, mean + 3.0 * sd)
    }

    #[test]
    fn zero_ratio_has_no_conflicts() {
        let ds = generate_synthetic(&small(0.0, 3)).unwrap();
        assert_eq!(ds.conflicting_count(), 0);
        assert_eq!(ds.len(), 250);
    }

    #[test]
    fn half_ratio_binary_is_balanced() {
        let cfg = GenConfig {
            num_classes: 2,
            d_signal: 2,
            d_bias: 2,
            n_per_class: 2000,
            conflict_ratio: 0.5,
            seed: 11,
            ..GenConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let (lo, hi) = three_sigma(4000, 0.5);
        let k = ds.conflicting_count() as f64;
        assert!(lo <= k && k <= hi, "{k}");
    }

    #[test]
    fn one_percent_count_within_binomial_band() {
        let cfg = GenConfig {
            n_per_class: 500,
            num_classes: 5,
            conflict_ratio: 0.01,
            seed: 7,
            ..GenConfig::default()
        };
        // mean 25, sd sqrt(2500 * 0.01 * 0.99) = 4.975; band [10.07, 39.92]
        let (lo, hi) = three_sigma(2500, 0.01);
        assert!((lo - 10.07).abs() < 0.01 && (hi - 39.92).abs() < 0.01);
        let k = generate_synthetic(&cfg).unwrap().conflicting_count();
        assert!((10..=40).contains(&k), "{k}");
    }

    #[test]
    fn unbiased_test_split_is_uniform() {
        for (c, expected) in [(2usize, 0.5), (10, 0.1)] {
            let cfg = GenConfig {
                num_classes: c,
                d_signal: c,
                d_bias: c,
                ..GenConfig::default()
            };
            let ds = generate_unbiased_test(&cfg, 1000).unwrap();
            assert_eq!(ds.split, Split::Test);
            let aligned = 1.0 - ds.conflicting_fraction();
            let n = ds.len();
            let (lo, hi) = three_sigma(n, expected);
            let k = aligned * n as f64;
            assert!(lo <= k && k <= hi, "C={c}: aligned {aligned}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_unbiased_test(&small(0.1, 5), 20).unwrap();
        let b = generate_unbiased_test(&small(0.1, 5), 20).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = generate_unbiased_test(&small(0.1, 6), 20).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate_synthetic(&small(1.5, 0)).is_err());
        assert!(generate_synthetic(&small(-0.1, 0)).is_err());
        let mut cfg = small(0.1, 0);
        cfg.n_per_class = 0;
        assert!(generate_synthetic(&cfg).is_err());
        let mut cfg = small(0.1, 0);
        cfg.signal_margin = 0.0;
        assert!(generate_synthetic(&cfg).is_err());
        let mut cfg = small(0.1, 0);
        cfg.bias_margin = 0.5;
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn features_are_centered_on_class_and_bias() {
        let cfg = GenConfig {
            n_per_class: 4000,
            num_classes: 3,
            d_signal: 3,
            d_bias: 3,
            conflict_ratio: 0.0,
            seed: 1,
            ..GenConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let class0: Vec<&Sample> = ds.samples.iter().filter(|s| s.label == 0).collect();
        let mean = |j: usize| class0.iter().map(|s| s.features[j]).sum::<f64>() / 4000.0;
        // standard error of each mean is 1/sqrt(4000) ~ 0.016
        assert!((mean(0) - 1.0).abs() < 0.08);
        assert!(mean(1).abs() < 0.08);
        assert!((mean(3) - 3.0).abs() < 0.08);
        assert!(mean(4).abs() < 0.08);
    }

    #[test]
    fn round_trip_and_error_paths() {
        let ds = generate_synthetic(&small(0.2, 9)).unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(BiasedDataset::from_bytes(&bytes).unwrap(), ds);

        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(
            BiasedDataset::from_bytes(truncated),
            Err(Error::Checksum { .. })
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            BiasedDataset::from_bytes(&bad_version),
            Err(Error::Version { found: 9, .. })
        ));

        let mut flipped = bytes;
        flipped[40] ^= 0xff;
        assert!(matches!(
            BiasedDataset::from_bytes(&flipped),
            Err(Error::Checksum { .. })
        ));
    }

    pub(crate) fn idx_pair(labels: &[u8], rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        images.extend_from_slice(&(rows as u32).to_be_bytes());
        images.extend_from_slice(&(cols as u32).to_be_bytes());
        for (i, _) in labels.iter().enumerate() {
            images.extend((0..rows * cols).map(|p| ((i * 31 + p * 7) % 256) as u8));
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        (images, lab)
    }

    #[test]
    fn idx_zero_ratio_is_fully_aligned() {
        let labels: Vec<u8> = (0..200).map(|i| (i % 10) as u8).collect();
        let (img, lab) = idx_pair(&labels, 4, 3);
        let ds = color_bias_from_idx(&img, &lab, 0.0, 1).unwrap();
        assert_eq!(ds.len(), 200);
        assert_eq!(ds.feature_dim, 36);
        assert_eq!(ds.conflicting_count(), 0);
        assert!(ds
            .samples
            .iter()
            .all(|s| s.features.iter().all(|&v| (0.0..=1.0).contains(&v))));
        // digit 3 is yellow: blue plane is dark, red and green planes equal
        let s = &ds.samples[3];
        assert_eq!(&s.features[..12], &s.features[12..24]);
        assert!(s.features[24..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn idx_conflict_count_within_binomial_band() {
        let labels: Vec<u8> = (0..6000).map(|i| (i % 10) as u8).collect();
        let (img, lab) = idx_pair(&labels, 2, 2);
        let ds = color_bias_from_idx(&img, &lab, 0.01, 42).unwrap();
        let (lo, hi) = three_sigma(6000, 0.01);
        let k = ds.conflicting_count() as f64;
        assert!(lo <= k && k <= hi, "{k}");
    }

    #[test]
    fn idx_errors() {
        let labels = [1u8, 2, 3];
        let (mut img, lab) = idx_pair(&labels, 2, 2);
        let (_, short_lab) = idx_pair(&labels[..2], 2, 2);
        assert!(matches!(
            color_bias_from_idx(&img, &short_lab, 0.1, 0),
            Err(Error::Format(_))
        ));
        img[3] = 0x04;
        assert!(matches!(
            color_bias_from_idx(&img, &lab, 0.1, 0),
            Err(Error::Format(_))
        ));
    }
}
