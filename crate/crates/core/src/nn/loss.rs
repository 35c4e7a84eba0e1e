use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training objective for a classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    CrossEntropy,
    /// Generalized cross-entropy `(1 - p_y^q) / q`.
    Gce { q: f64 },
}

impl LossKind {
    pub const DEFAULT_GCE_Q: f64 = 0.7;

    pub fn gce() -> Self {
        LossKind::Gce {
            q: Self::DEFAULT_GCE_Q,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::CrossEntropy => Ok(()),
            LossKind::Gce { q } if q > 0.0 && q <= 1.0 => Ok(()),
            LossKind::Gce { q } => Err(Error::invalid("q", format!("{q} is outside (0, 1]"))),
        }
    }

    /// Loss value, gradient with respect to the logits, and the softmax
    /// probabilities.
    pub fn evaluate(&self, logits: &[f64], label: usize) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let (probs, ce) = softmax_ce(logits, label)?;
        let mut grad = probs.clone();
        grad[label] -= 1.0;
        let loss = match *self {
            LossKind::CrossEntropy => ce,
            LossKind::Gce { q } => {
                let loss = gce(&probs, label, q)?;
                let scale = probs[label].powf(q);
                grad.iter_mut().for_each(|g| *g *= scale);
                loss
            }
        };
        Ok((loss, grad, probs))
    }

    /// Multiplier applied to the cross-entropy logit gradient `p - e_y`.
    pub(crate) fn grad_scale(&self, p_label: f64) -> f64 {
        match *self {
            LossKind::CrossEntropy => 1.0,
            LossKind::Gce { q } => p_label.powf(q),
        }
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Softmax probabilities and the cross-entropy `-log p_y`.
///
/// The loss is computed as `logsumexp(z) - z_y` so it stays accurate when
/// `p_y` is close to one.
pub fn softmax_ce(logits: &[f64], label: usize) -> Result<(Vec<f64>, f64)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite {
            what: "logit",
            detail: format!("{logits:?}"),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = shifted.iter().sum();
    let probs = shifted.iter().map(|e| e / sum).collect();
    // ln_1p keeps precision when the label holds the max and others are tiny.
    let loss = if logits[label] == max {
        (sum - 1.0).ln_1p()
    } else {
        sum.ln() - (logits[label] - max)
    };
    Ok((probs, loss))
}

/// Generalized cross-entropy `(1 - p_y^q) / q`.
pub fn gce(probs: &[f64], label: usize, q: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid("q", format!("{q} is outside (0, 1]")));
    }
    if label >= probs.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: probs.len(),
        });
    }
    Ok((1.0 - probs[label].powf(q)) / q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ce_examples() {
        let (p, loss) = softmax_ce(&[0.0, 0.0], 0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);

        let (_, loss) = softmax_ce(&[30.0, -30.0], 0).unwrap();
        assert!(loss < 1e-12 && loss >= 0.0);

        // -ln(e^3 / (e + e^2 + e^3)) = ln(1 + e^-1 + e^-2) = 0.40760596444438...
        let (_, loss) = softmax_ce(&[1.0, 2.0, 3.0], 2).unwrap();
        assert!((loss - 0.407_605_964_444_380_3).abs() < 1e-14, "{loss}");

        assert!(matches!(
            softmax_ce(&[0.0, 1.0], 2),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn gce_examples() {
        assert_eq!(gce(&[1.0, 0.0], 0, 0.7).unwrap(), 0.0);
        assert!((gce(&[0.3, 0.7], 0, 1.0).unwrap() - 0.7).abs() < 1e-15);
        // (1 - 0.5^0.7) / 0.7 = 0.54918256...
        let v = gce(&[0.5, 0.5], 0, 0.7).unwrap();
        assert!((v - 0.549_182_561_896_488_4).abs() < 1e-12, "{v}");
        assert!(gce(&[0.5, 0.5], 0, 0.0).is_err());
        assert!(gce(&[0.5, 0.5], 0, -1.0).is_err());
    }

    fn central_diff(kind: LossKind, logits: &[f64], label: usize, i: usize) -> f64 {
        let h = 1e-5;
        let mut up = logits.to_vec();
        let mut dn = logits.to_vec();
        up[i] += h;
        dn[i] -= h;
        let f = |z: &[f64]| kind.evaluate(z, label).unwrap().0;
        (f(&up) - f(&dn)) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn logit_gradients_match_finite_differences(
            logits in prop::collection::vec(-4.0f64..4.0, 2..6),
            label_seed in 0usize..100,
            q in 0.1f64..1.0,
        ) {
            let label = label_seed % logits.len();
            for kind in [LossKind::CrossEntropy, LossKind::Gce { q }] {
                let (_, grad, _) = kind.evaluate(&logits, label).unwrap();
                for i in 0..logits.len() {
                    let fd = central_diff(kind, &logits, label, i);
                    prop_assert!((fd - grad[i]).abs() < 1e-8, "{kind:?} {i}: {fd} vs {}", grad[i]);
                }
            }
        }

        #[test]
        fn softmax_is_stable_and_normalized(logits in prop::collection::vec(-1e4f64..1e4, 1..8)) {
            let (p, loss) = softmax_ce(&logits, 0).unwrap();
            prop_assert!(p.iter().all(|v| v.is_finite()));
            prop_assert!(loss.is_finite());
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn gce_decreasing_in_p(q in 0.05f64..=1.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let f = |p: f64| gce(&[p, 1.0 - p], 0, q).unwrap();
            prop_assert!(f(lo) >= f(hi));
        }
    }
}
