use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::mlp::MlpParams;
use crate::datagen::BiasedDataset;
use crate::error::{Error, Result};

/// Which samples an accuracy is measured over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    All,
    Aligned,
    Conflicting,
}

impl Group {
    fn admits(self, conflicting: bool) -> bool {
        match self {
            Group::All => true,
            Group::Aligned => !conflicting,
            Group::Conflicting => conflicting,
        }
    }
}

/// Hit counts of one `(label, bias_attr)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCount {
    pub correct: usize,
    pub total: usize,
}

impl GroupCount {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

pub fn predictions(params: &MlpParams, ds: &BiasedDataset) -> Result<Vec<usize>> {
    if ds.is_empty() {
        return Ok(Vec::new());
    }
    params.predict_batch(&ds.features_matrix())
}

/// Argmax accuracy over the selected subset of `ds`.
pub fn accuracy(params: &MlpParams, ds: &BiasedDataset, group: Group) -> Result<f64> {
    let preds = predictions(params, ds)?;
    accuracy_from_predictions(&preds, ds, group)
}

pub fn accuracy_from_predictions(preds: &[usize], ds: &BiasedDataset, group: Group) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (s, &p) in ds.samples.iter().zip(preds) {
        if group.admits(s.is_conflicting()) {
            total += 1;
            hit += usize::from(p == s.label);
        }
    }
    if total == 0 {
        return Err(Error::Empty("accuracy group"));
    }
    Ok(hit as f64 / total as f64)
}

/// Per-`(label, bias_attr)` counts; only cells with at least one sample are
/// present.
pub fn group_accuracy(
    params: &MlpParams,
    ds: &BiasedDataset,
) -> Result<BTreeMap<(usize, usize), GroupCount>> {
    let preds = predictions(params, ds)?;
    Ok(group_counts(&preds, ds))
}

pub fn group_counts(preds: &[usize], ds: &BiasedDataset) -> BTreeMap<(usize, usize), GroupCount> {
    let mut cells: BTreeMap<(usize, usize), GroupCount> = BTreeMap::new();
    for (s, &p) in ds.samples.iter().zip(preds) {
        let cell = cells.entry((s.label, s.bias_attr)).or_insert(GroupCount {
            correct: 0,
            total: 0,
        });
        cell.total += 1;
        cell.correct += usize::from(p == s.label);
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{Sample, Split};
    use crate::nn::mlp::Layer;
    use ndarray::array;

    fn ds(rows: &[(f64, usize, usize)]) -> BiasedDataset {
        let samples = rows
            .iter()
            .enumerate()
            .map(|(i, &(x, label, bias_attr))| Sample {
                id: i as u64,
                features: vec![x],
                label,
                bias_attr,
            })
            .collect();
        BiasedDataset::new(samples, 2, 0.5, Split::Test, 1).unwrap()
    }

    /// Predicts class 1 iff x > 0.
    fn sign_model() -> MlpParams {
        MlpParams::new(vec![Layer {
            weight: array![[-1.0], [1.0]],
            bias: array![0.0, 0.0],
        }])
        .unwrap()
    }

    #[test]
    fn constant_model_breaks_ties_to_zero() {
        let constant = MlpParams::new(vec![Layer::zeros(2, 1)]).unwrap();
        let d = ds(&[(1.0, 0, 0), (2.0, 1, 1), (3.0, 0, 1), (4.0, 1, 0)]);
        assert_eq!(accuracy(&constant, &d, Group::All).unwrap(), 0.5);
    }

    #[test]
    fn perfect_model_scores_one_everywhere() {
        let d = ds(&[(-1.0, 0, 0), (1.0, 1, 1), (-2.0, 0, 1), (2.0, 1, 0)]);
        let m = sign_model();
        for g in [Group::All, Group::Aligned, Group::Conflicting] {
            assert_eq!(accuracy(&m, &d, g).unwrap(), 1.0);
        }
        assert!(group_accuracy(&m, &d)
            .unwrap()
            .values()
            .all(|c| c.accuracy() == 1.0));
    }

    #[test]
    fn hand_built_fractions() {
        // predictions: 1, 0, 1, 1
        let d = ds(&[(0.5, 1, 1), (-0.5, 1, 0), (2.0, 0, 0), (3.0, 1, 1)]);
        let m = sign_model();
        assert_eq!(accuracy(&m, &d, Group::All).unwrap(), 0.5);
        assert_eq!(accuracy(&m, &d, Group::Aligned).unwrap(), 2.0 / 3.0);
        assert_eq!(accuracy(&m, &d, Group::Conflicting).unwrap(), 0.0);
        let cells = group_accuracy(&m, &d).unwrap();
        assert_eq!(cells[&(1, 1)], GroupCount { correct: 2, total: 2 });
        assert_eq!(cells[&(1, 0)], GroupCount { correct: 0, total: 1 });
        assert_eq!(cells[&(0, 0)], GroupCount { correct: 0, total: 1 });
        assert_eq!(cells.len(), 3);
    }

    #[test]
    fn empty_group_is_an_error() {
        let d = ds(&[(1.0, 1, 1)]);
        assert!(matches!(
            accuracy(&sign_model(), &d, Group::Conflicting),
            Err(Error::Empty(_))
        ));
    }
}
