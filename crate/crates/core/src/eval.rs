//! Accuracy reports, detector comparisons, precision-over-training curves,
//! score histograms and bias-ratio sweeps.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::BiasedDataset;
use crate::error::{Error, Result};
use crate::influence::{
    bcsi_scores, gradnorm_scores, loss_scores, score_model, DetectorConfig, InfluenceRecord,
    Method,
};
use crate::nn::{accuracy_from_predictions, group_counts, init_mlp, predictions, Group, MlpParams, Trainer};
use crate::pipeline::{run_pipeline, PipelineSettings};
use crate::selection::{check_distinct_seeds, ranking_precision, Denominator};

/// Mean and standard error of a list of per-seed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mean {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; zero for a single value.
    pub stderr: f64,
    pub values: Vec<f64>,
}

impl Mean {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Mean {
                mean: f64::NAN,
                stderr: f64::NAN,
                values,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Mean {
            mean,
            stderr,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub label: usize,
    pub bias_attr: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Accuracies of one model on one (normally unbiased) test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub unbiased_acc: f64,
    /// `None` when the test set has no sample of that kind.
    pub aligned_acc: Option<f64>,
    pub conflicting_acc: Option<f64>,
    /// Minimum over the nonempty `(label, bias_attr)` cells.
    pub worst_group_acc: f64,
    pub groups: Vec<GroupRow>,
}

pub fn evaluate_model(params: &MlpParams, test: &BiasedDataset) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let preds = predictions(params, test)?;
    let optional = |g| match accuracy_from_predictions(&preds, test, g) {
        Ok(a) => Ok(Some(a)),
        Err(Error::Empty(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let groups: Vec<GroupRow> = group_counts(&preds, test)
        .into_iter()
        .map(|((label, bias_attr), c)| GroupRow {
            label,
            bias_attr,
            correct: c.correct,
            total: c.total,
            accuracy: c.accuracy(),
        })
        .collect();
    let worst_group_acc = groups.iter().map(|g| g.accuracy).fold(f64::INFINITY, f64::min);
    Ok(EvalReport {
        unbiased_acc: accuracy_from_predictions(&preds, test, Group::All)?,
        aligned_acc: optional(Group::Aligned)?,
        conflicting_acc: optional(Group::Conflicting)?,
        worst_group_acc,
        groups,
    })
}

/// One line of a precision table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRow {
    pub method: String,
    pub mode: Denominator,
    #[serde(flatten)]
    pub precision: Mean,
}

/// Detectors to compare. Loss, gradient norm, self-influence and IF_train
/// all score the `converged` model; BCSI trains its own `bcsi` model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub bcsi: DetectorConfig,
    pub converged: DetectorConfig,
    pub seeds: Vec<u64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            bcsi: DetectorConfig::bcsi(),
            converged: DetectorConfig::converged_ce(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

fn detector_precisions(
    ds: &BiasedDataset,
    dims: &[usize],
    cfg: &CompareConfig,
    seed: u64,
) -> Result<BTreeMap<Method, f64>> {
    let converged = cfg.converged.with_seed(seed);
    let params = crate::influence::train_detector(ds, dims, &converged)?;
    let scores = score_model(&params, ds, converged.damping)?;
    let as_records = |values: &[f64], method| -> Vec<InfluenceRecord> {
        ds.samples
            .iter()
            .zip(values)
            .map(|(s, &score)| InfluenceRecord {
                sample_id: s.id,
                score,
                method,
                run_seed: seed,
                epoch_t: converged.epochs,
            })
            .collect()
    };
    let mut out = BTreeMap::new();
    out.insert(Method::Loss, ranking_precision(&loss_scores(&params, ds)?, ds)?);
    out.insert(Method::GradNorm, ranking_precision(&gradnorm_scores(&params, ds)?, ds)?);
    out.insert(
        Method::SelfInfluence,
        ranking_precision(&as_records(&scores.self_influence, Method::SelfInfluence), ds)?,
    );
    out.insert(
        Method::IfTrain,
        ranking_precision(&as_records(&scores.if_train, Method::IfTrain), ds)?,
    );
    let bcsi = bcsi_scores(ds, dims, &cfg.bcsi.with_seed(seed))?;
    out.insert(Method::Bcsi, ranking_precision(&bcsi, ds)?);
    Ok(out)
}

/// Precision at the ground-truth conflicting count for every [`Method`],
/// averaged over `cfg.seeds`. Rows follow [`Method::ALL`].
pub fn compare_detectors(
    ds: &BiasedDataset,
    dims: &[usize],
    cfg: &CompareConfig,
) -> Result<Vec<PrecisionRow>> {
    check_distinct_seeds(&cfg.seeds)?;
    let per_seed: Vec<BTreeMap<Method, f64>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| detector_precisions(ds, dims, cfg, seed))
        .collect::<Result<_>>()?;
    Ok(Method::ALL
        .iter()
        .map(|&m| PrecisionRow {
            method: m.to_string(),
            mode: Denominator::GroundTruthCount,
            precision: Mean::of(per_seed.iter().map(|p| p[&m]).collect()),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPoint {
    pub epoch: usize,
    pub self_influence: Mean,
    pub if_train: Mean,
}

/// Ground-truth-count precision of self-influence and IF_train measured on
/// checkpoints of one training run per seed. `cfg.epochs` is ignored; each
/// run trains to the largest requested epoch.
pub fn precision_vs_epoch(
    ds: &BiasedDataset,
    dims: &[usize],
    cfg: &DetectorConfig,
    epochs: &[usize],
    seeds: &[u64],
) -> Result<Vec<EpochPoint>> {
    check_distinct_seeds(seeds)?;
    if epochs.is_empty() {
        return Err(Error::invalid("epochs", "need at least one epoch"));
    }
    if epochs.contains(&0) {
        return Err(Error::invalid("epochs", "epochs start at 1"));
    }
    let last = *epochs.iter().max().expect("nonempty");
    let curves: Vec<BTreeMap<usize, (f64, f64)>> = seeds
        .par_iter()
        .map(|&seed| {
            let run = DetectorConfig {
                epochs: last,
                ..cfg.with_seed(seed)
            };
            let mut trainer = Trainer::new(init_mlp(dims, seed)?, ds, &run.train_config())?;
            let mut points = BTreeMap::new();
            for e in 1..=last {
                trainer.run_epoch()?;
                if epochs.contains(&e) {
                    let s = score_model(trainer.params(), ds, run.damping)?;
                    let prec = |v: &[f64], method| {
                        let recs: Vec<InfluenceRecord> = ds
                            .samples
                            .iter()
                            .zip(v)
                            .map(|(smp, &score)| InfluenceRecord {
                                sample_id: smp.id,
                                score,
                                method,
                                run_seed: seed,
                                epoch_t: e,
                            })
                            .collect();
                        ranking_precision(&recs, ds)
                    };
                    points.insert(
                        e,
                        (
                            prec(&s.self_influence, Method::SelfInfluence)?,
                            prec(&s.if_train, Method::IfTrain)?,
                        ),
                    );
                }
            }
            Ok(points)
        })
        .collect::<Result<_>>()?;
    Ok(epochs
        .iter()
        .map(|&e| EpochPoint {
            epoch: e,
            self_influence: Mean::of(curves.iter().map(|c| c[&e].0).collect()),
            if_train: Mean::of(curves.iter().map(|c| c[&e].1).collect()),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub aligned: usize,
    pub conflicting: usize,
}

/// Equal-width bins over `[min, max]` of the scores, counted separately for
/// aligned and conflicting samples. The maximum falls in the last bin; when
/// all scores are equal everything lands in the first.
pub fn histogram(records: &[InfluenceRecord], ds: &BiasedDataset, bins: usize) -> Result<Vec<HistBin>> {
    if records.is_empty() {
        return Err(Error::Empty("score records"));
    }
    if bins < 1 {
        return Err(Error::invalid("bins", "must be at least 1"));
    }
    let conflicting: BTreeMap<u64, bool> =
        ds.samples.iter().map(|s| (s.id, s.is_conflicting())).collect();
    let lo = records.iter().map(|r| r.score).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite {
            what: "score",
            detail: "histogram range".into(),
        });
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistBin> = (0..bins)
        .map(|b| HistBin {
            lo: lo + width * b as f64,
            hi: if b + 1 == bins { hi } else { lo + width * (b + 1) as f64 },
            aligned: 0,
            conflicting: 0,
        })
        .collect();
    for r in records {
        let &flag = conflicting
            .get(&r.sample_id)
            .ok_or(Error::MissingScore(r.sample_id))?;
        let b = if width > 0.0 {
            (((r.score - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        if flag {
            out[b].conflicting += 1;
        } else {
            out[b].aligned += 1;
        }
    }
    Ok(out)
}

pub const HISTOGRAM_CSV_HEADER: &str = "bin_lo,bin_hi,aligned,conflicting";

pub fn write_histogram_csv<W: Write>(mut out: W, bins: &[HistBin]) -> Result<()> {
    writeln!(out, "{HISTOGRAM_CSV_HEADER}")?;
    for b in bins {
        writeln!(out, "{:.16e},{:.16e},{},{}", b.lo, b.hi, b.aligned, b.conflicting)?;
    }
    Ok(())
}

pub const CURVE_CSV_HEADER: &str = "epoch,method,mean,stderr";

pub fn write_curve_csv<W: Write>(mut out: W, curve: &[EpochPoint]) -> Result<()> {
    writeln!(out, "{CURVE_CSV_HEADER}")?;
    for p in curve {
        for (m, v) in [("self_influence", &p.self_influence), ("if_train", &p.if_train)] {
            writeln!(out, "{},{m},{:.16e},{:.16e}", p.epoch, v.mean, v.stderr)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub conflict_ratio: f64,
    pub erm_acc: Mean,
    pub finetuned_acc: Mean,
    pub pivotal_precision: Mean,
    pub pivotal_size: Mean,
}

/// Runs the whole pipeline for every ratio and master seed and reports
/// ERM against fine-tuned unbiased accuracy.
pub fn bias_ratio_sweep(
    ratios: &[f64],
    settings: &PipelineSettings,
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    check_distinct_seeds(seeds)?;
    let cells: Vec<(usize, u64)> = (0..ratios.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<(f64, f64, f64, f64)> = cells
        .par_iter()
        .map(|&(i, seed)| {
            let cell = settings.with_conflict_ratio(ratios[i]).with_master_seed(seed);
            let out = run_pipeline(&cell)?;
            Ok((
                out.erm_eval.unbiased_acc,
                out.finetuned_eval.unbiased_acc,
                out.pivotal_precision.unwrap_or(0.0),
                out.pivotal.len() as f64,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(ratios
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let rows = &results[i * seeds.len()..(i + 1) * seeds.len()];
            SweepRow {
                conflict_ratio: r,
                erm_acc: Mean::of(rows.iter().map(|x| x.0).collect()),
                finetuned_acc: Mean::of(rows.iter().map(|x| x.1).collect()),
                pivotal_precision: Mean::of(rows.iter().map(|x| x.2).collect()),
                pivotal_size: Mean::of(rows.iter().map(|x| x.3).collect()),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub conflict_ratio: f64,
    pub num_classes: usize,
    pub train_size: usize,
    pub train_conflicting: usize,
    pub test_size: usize,
    pub seeds: Vec<u64>,
    pub settings: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub unbiased: f64,
    pub aligned: Option<f64>,
    pub conflicting: Option<f64>,
    pub worst_group: f64,
}

impl From<&EvalReport> for Accuracies {
    fn from(r: &EvalReport) -> Self {
        Accuracies {
            unbiased: r.unbiased_acc,
            aligned: r.aligned_acc,
            conflicting: r.conflicting_acc,
            worst_group: r.worst_group_acc,
        }
    }
}

/// The report document: `{meta, accuracies, groups, precision, sweep}`.
/// Accuracies and groups are keyed by model name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub meta: ReportMeta,
    pub accuracies: BTreeMap<String, Accuracies>,
    pub groups: BTreeMap<String, Vec<GroupRow>>,
    pub precision: Vec<PrecisionRow>,
    pub sweep: Vec<SweepRow>,
}

impl Report {
    pub fn add_model(&mut self, name: &str, eval: &EvalReport) {
        self.accuracies.insert(name.to_string(), eval.into());
        self.groups.insert(name.to_string(), eval.groups.clone());
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
