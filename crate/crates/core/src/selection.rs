//! Pivotal-set construction: per-class top-k by score, repeated over
//! independently seeded detector runs and intersected.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::BiasedDataset;
use crate::error::{Error, Result};
use crate::influence::{bcsi_scores, DetectorConfig, InfluenceRecord, Method};

pub const DEFAULT_K: usize = 100;
pub const DEFAULT_RUNS: usize = 3;

/// Sample ids ordered by descending score, ties to the lower id.
pub fn rank_by_score(records: &[InfluenceRecord]) -> Vec<u64> {
    let mut sorted: Vec<&InfluenceRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.sample_id.cmp(&b.sample_id))
    });
    sorted.into_iter().map(|r| r.sample_id).collect()
}

/// For each class, the ids of its `k` highest-scoring samples (all of them
/// when the class is smaller), ordered by descending score with ties broken
/// toward the lower id.
pub fn topk_per_class(
    records: &[InfluenceRecord],
    ds: &BiasedDataset,
    k: usize,
) -> Result<Vec<Vec<u64>>> {
    if k < 1 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    let scores: HashMap<u64, f64> = records.iter().map(|r| (r.sample_id, r.score)).collect();
    let mut by_class: Vec<Vec<(f64, u64)>> = vec![Vec::new(); ds.num_classes];
    for s in &ds.samples {
        let score = *scores.get(&s.id).ok_or(Error::MissingScore(s.id))?;
        by_class[s.label].push((score, s.id));
    }
    Ok(by_class
        .into_iter()
        .map(|mut members| {
            members.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            members.into_iter().take(k).map(|(_, id)| id).collect()
        })
        .collect())
}

/// How [`detection_precision`] picks the samples it scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Every id passed in counts.
    SelectedSize,
    /// The ids are a full ranking; only the first `K` count, where `K` is
    /// the number of bias-conflicting samples in the dataset.
    GroundTruthCount,
}

/// Fraction of the counted ids that are bias-conflicting.
pub fn detection_precision(ids: &[u64], ds: &BiasedDataset, denominator: Denominator) -> Result<f64> {
    let counted = match denominator {
        Denominator::SelectedSize => ids,
        Denominator::GroundTruthCount => {
            let k = ds.conflicting_count();
            if k == 0 {
                return Err(Error::Empty("bias-conflicting ground truth"));
            }
            &ids[..k.min(ids.len())]
        }
    };
    if counted.is_empty() {
        return Err(Error::Empty("selection"));
    }
    let conflicting: HashSet<u64> = ds
        .samples
        .iter()
        .filter(|s| s.is_conflicting())
        .map(|s| s.id)
        .collect();
    let hits = counted.iter().filter(|id| conflicting.contains(id)).count();
    Ok(hits as f64 / counted.len() as f64)
}

/// Precision of a full ranking cut at the ground-truth conflict count.
pub fn ranking_precision(records: &[InfluenceRecord], ds: &BiasedDataset) -> Result<f64> {
    detection_precision(&rank_by_score(records), ds, Denominator::GroundTruthCount)
}

/// Top-k selections of several detector runs and their intersection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotalSet {
    pub k: usize,
    pub num_runs: usize,
    pub seeds: Vec<u64>,
    pub method: Method,
    /// `per_run[run][class]` lists the selected ids of that class.
    pub per_run: Vec<Vec<Vec<u64>>>,
    /// Sorted ids present in every intersected run.
    pub intersection: Vec<u64>,
    /// How many runs the intersection actually spans (fewer than
    /// `num_runs` only after the empty-intersection fallback).
    pub intersected_runs: usize,
}

impl PivotalSet {
    /// Intersects precomputed per-run selections. When all runs together
    /// share nothing, falls back to the first two runs.
    pub fn from_runs(per_run: Vec<Vec<Vec<u64>>>, k: usize, seeds: Vec<u64>, method: Method) -> Result<Self> {
        if per_run.is_empty() {
            return Err(Error::Empty("run list"));
        }
        if seeds.len() != per_run.len() {
            return Err(Error::DimensionMismatch {
                expected: per_run.len(),
                actual: seeds.len(),
            });
        }
        let union = |run: &Vec<Vec<u64>>| -> BTreeSet<u64> { run.iter().flatten().copied().collect() };
        let intersect = |runs: &[Vec<Vec<u64>>]| -> BTreeSet<u64> {
            let mut acc = union(&runs[0]);
            for run in &runs[1..] {
                let next = union(run);
                acc.retain(|id| next.contains(id));
            }
            acc
        };
        let mut intersected_runs = per_run.len();
        let mut ids = intersect(&per_run);
        if ids.is_empty() && per_run.len() > 2 {
            warn!(
                "pivotal intersection of {} runs is empty; falling back to the first two runs",
                per_run.len()
            );
            intersected_runs = 2;
            ids = intersect(&per_run[..2]);
        }
        if ids.is_empty() {
            warn!("pivotal set is empty");
        }
        Ok(PivotalSet {
            k,
            num_runs: per_run.len(),
            seeds,
            method,
            per_run,
            intersection: ids.into_iter().collect(),
            intersected_runs,
        })
    }

    pub fn len(&self) -> usize {
        self.intersection.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intersection.is_empty()
    }

    /// Union over classes of one run's selection.
    pub fn run_ids(&self, run: usize) -> Vec<u64> {
        let mut ids: Vec<u64> = self.per_run[run].iter().flatten().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// Selected-size precision of each run and of the intersection.
    pub fn precisions(&self, ds: &BiasedDataset) -> Result<(Vec<f64>, Option<f64>)> {
        let runs = (0..self.num_runs)
            .map(|r| detection_precision(&self.run_ids(r), ds, Denominator::SelectedSize))
            .collect::<Result<Vec<_>>>()?;
        let inter = if self.is_empty() {
            None
        } else {
            Some(detection_precision(
                &self.intersection,
                ds,
                Denominator::SelectedSize,
            )?)
        };
        Ok((runs, inter))
    }

    /// JSON document; precisions are included when `ds` has ground truth.
    pub fn to_json(&self, ds: Option<&BiasedDataset>) -> Result<String> {
        let (per_run_precision, intersection_precision) = match ds {
            Some(ds) => {
                let (r, i) = self.precisions(ds)?;
                (Some(r), i)
            }
            None => (None, None),
        };
        let doc = PivotalFile {
            k: self.k,
            num_runs: self.num_runs,
            seeds: self.seeds.clone(),
            method: self.method,
            per_run: self.per_run.clone(),
            intersection: self.intersection.clone(),
            intersected_runs: self.intersected_runs,
            per_run_precision,
            intersection_precision,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PivotalFile = serde_json::from_str(text)?;
        Ok(PivotalSet {
            k: doc.k,
            num_runs: doc.num_runs,
            seeds: doc.seeds,
            method: doc.method,
            per_run: doc.per_run,
            intersection: doc.intersection,
            intersected_runs: doc.intersected_runs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, ds: Option<&BiasedDataset>) -> Result<()> {
        fs::write(path, self.to_json(ds)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        PivotalSet::from_json(&fs::read_to_string(path)?)
    }
}

/// On-disk layout of a pivotal set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PivotalFile {
    pub k: usize,
    pub num_runs: usize,
    pub seeds: Vec<u64>,
    pub method: Method,
    pub per_run: Vec<Vec<Vec<u64>>>,
    pub intersection: Vec<u64>,
    pub intersected_runs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_run_precision: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intersection_precision: Option<f64>,
}

pub fn check_distinct_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::invalid("seeds", "need at least one seed"));
    }
    let unique: HashSet<u64> = seeds.iter().copied().collect();
    if unique.len() != seeds.len() {
        return Err(Error::invalid("seeds", "seeds must be distinct"));
    }
    Ok(())
}

/// Scores the training set once per seed with a fresh BCSI detector, takes
/// the per-class top `k` of each run and intersects them. The runs execute
/// in parallel; the result depends only on the inputs.
pub fn build_pivotal(
    ds: &BiasedDataset,
    dims: &[usize],
    cfg: &DetectorConfig,
    k: usize,
    seeds: &[u64],
) -> Result<(PivotalSet, Vec<Vec<InfluenceRecord>>)> {
    check_distinct_seeds(seeds)?;
    if k < 1 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    let scores: Vec<Vec<InfluenceRecord>> = seeds
        .par_iter()
        .map(|&seed| bcsi_scores(ds, dims, &cfg.with_seed(seed)))
        .collect::<Result<_>>()?;
    let per_run = scores
        .iter()
        .map(|records| topk_per_class(records, ds, k))
        .collect::<Result<Vec<_>>>()?;
    let set = PivotalSet::from_runs(per_run, k, seeds.to_vec(), Method::Bcsi)?;
    Ok((set, scores))
}
