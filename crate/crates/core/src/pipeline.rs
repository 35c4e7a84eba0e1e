//! The end-to-end recipe: generate or load data, train a biased ERM model,
//! build a BCSI pivotal set, fine-tune, evaluate.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate_synthetic, generate_unbiased_test, load_idx_with_color_bias, BiasedDataset, GenConfig, COLOR_PALETTE};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport};
use crate::finetune::{finetune, FineTuneConfig, IterTrace};
use crate::influence::{DetectorConfig, InfluenceRecord};
use crate::nn::{init_mlp, train, MlpParams, TrainConfig};
use crate::selection::{build_pivotal, PivotalSet};

/// Where the training and test sets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        gen: GenConfig,
        test_per_class: usize,
    },
    /// Colored digits from IDX files. The test set gets uniform colors.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        conflict_ratio: f64,
        seed: u64,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<(BiasedDataset, BiasedDataset)> {
        match self {
            DataSource::Synthetic {
                gen,
                test_per_class,
            } => Ok((generate_synthetic(gen)?, generate_unbiased_test(gen, *test_per_class)?)),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                conflict_ratio,
                seed,
            } => {
                let uniform = GenConfig::unbiased_ratio(COLOR_PALETTE.len());
                Ok((
                    load_idx_with_color_bias(train_images, train_labels, *conflict_ratio, *seed)?,
                    load_idx_with_color_bias(test_images, test_labels, uniform, seed.wrapping_add(1))?,
                ))
            }
        }
    }

    pub fn conflict_ratio(&self) -> f64 {
        match self {
            DataSource::Synthetic { gen, .. } => gen.conflict_ratio,
            DataSource::Idx { conflict_ratio, .. } => *conflict_ratio,
        }
    }
}

/// Every knob of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub data: DataSource,
    /// Hidden widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub erm: TrainConfig,
    pub detector: DetectorConfig,
    /// Per-class top-k of each BCSI run.
    pub k: usize,
    /// One BCSI run per seed; the pivotal set is their intersection.
    pub run_seeds: Vec<u64>,
    pub finetune: FineTuneConfig,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self::toy()
    }
}

impl PipelineSettings {
    /// Synthetic five-class data at `r = 0.01` with a `[10, 100, 100, 5]`
    /// MLP. `k = 10` keeps the per-class selection near 2% of a class.
    pub fn toy() -> Self {
        PipelineSettings {
            data: DataSource::Synthetic {
                gen: GenConfig {
                    conflict_ratio: 0.01,
                    ..GenConfig::default()
                },
                test_per_class: 200,
            },
            hidden: vec![100, 100],
            erm: TrainConfig::default(),
            detector: DetectorConfig::bcsi(),
            k: 10,
            run_seeds: vec![1, 2, 3],
            finetune: FineTuneConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::invalid("model.hidden", "widths must be at least 1"));
        }
        if self.k < 1 {
            return Err(Error::invalid("bcsi.k", "must be at least 1"));
        }
        crate::selection::check_distinct_seeds(&self.run_seeds)
            .map_err(|_| Error::invalid("bcsi.seeds", "need at least one seed, all distinct"))?;
        self.erm.validate()?;
        self.finetune.validate()?;
        if let DataSource::Synthetic { gen, test_per_class } = &self.data {
            gen.validate()?;
            if *test_per_class < 1 {
                return Err(Error::invalid("data.test_per_class", "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Full layer widths for a dataset.
    pub fn dims(&self, ds: &BiasedDataset) -> Vec<usize> {
        let mut dims = vec![ds.feature_dim];
        dims.extend(&self.hidden);
        dims.push(ds.num_classes);
        dims
    }

    /// Rewrites every seed from one master seed: the data seed and the ERM
    /// and fine-tuning seeds become `seed`, and the BCSI run seeds are drawn
    /// from a generator keyed on it.
    pub fn with_master_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out.data {
            DataSource::Synthetic { gen, .. } => gen.seed = seed,
            DataSource::Idx { seed: s, .. } => *s = seed,
        }
        out.erm.seed = seed;
        out.finetune.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let mut runs: Vec<u64> = Vec::with_capacity(self.run_seeds.len());
        while runs.len() < self.run_seeds.len() {
            let s: u64 = rng.random();
            if !runs.contains(&s) {
                runs.push(s);
            }
        }
        out.run_seeds = runs;
        out
    }

    pub fn with_conflict_ratio(&self, r: f64) -> Self {
        let mut out = self.clone();
        match &mut out.data {
            DataSource::Synthetic { gen, .. } => gen.conflict_ratio = r,
            DataSource::Idx { conflict_ratio, .. } => *conflict_ratio = r,
        }
        out
    }
}

/// ERM: a fresh model trained with `settings.erm`, initialized from its seed.
pub fn train_erm(settings: &PipelineSettings, ds: &BiasedDataset) -> Result<MlpParams> {
    let init = init_mlp(&settings.dims(ds), settings.erm.seed)?;
    Ok(train(init, ds, &settings.erm)?.0)
}

pub fn pivotal_stage(
    settings: &PipelineSettings,
    ds: &BiasedDataset,
) -> Result<(PivotalSet, Vec<Vec<InfluenceRecord>>)> {
    build_pivotal(ds, &settings.dims(ds), &settings.detector, settings.k, &settings.run_seeds)
}

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub train: BiasedDataset,
    pub test: BiasedDataset,
    pub erm: MlpParams,
    pub pivotal: PivotalSet,
    pub scores: Vec<Vec<InfluenceRecord>>,
    /// Fraction of the pivotal set that is bias-conflicting.
    pub pivotal_precision: Option<f64>,
    pub finetuned: MlpParams,
    pub trace: Vec<IterTrace>,
    pub erm_eval: EvalReport,
    pub finetuned_eval: EvalReport,
}

pub fn run_pipeline(settings: &PipelineSettings) -> Result<PipelineOutcome> {
    settings.validate()?;
    let (train_ds, test_ds) = settings.data.load()?;
    let erm = train_erm(settings, &train_ds)?;
    let (pivotal, scores) = pivotal_stage(settings, &train_ds)?;
    let (_, pivotal_precision) = pivotal.precisions(&train_ds)?;
    let (finetuned, trace) = finetune(&erm, &train_ds, &pivotal, &settings.finetune)?;
    let erm_eval = evaluate_model(&erm, &test_ds)?;
    let finetuned_eval = evaluate_model(&finetuned, &test_ds)?;
    Ok(PipelineOutcome {
        train: train_ds,
        test: test_ds,
        erm,
        pivotal,
        scores,
        pivotal_precision,
        finetuned,
        trace,
        erm_eval,
        finetuned_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PipelineSettings {
        let mut s = PipelineSettings::toy();
        s.data = DataSource::Synthetic {
            gen: GenConfig {
                n_per_class: 60,
                conflict_ratio: 0.1,
                ..GenConfig::default()
            },
            test_per_class: 20,
        };
        s.hidden = vec![16];
        s.erm.epochs = 3;
        s.finetune.n_iter = 5;
        s
    }

    #[test]
    fn master_seed_rewrites_all_seeds() {
        let a = small().with_master_seed(11);
        let b = small().with_master_seed(11);
        assert_eq!(a, b);
        assert_eq!(a.erm.seed, 11);
        assert_eq!(a.finetune.seed, 11);
        assert_eq!(a.run_seeds.len(), 3);
        assert_ne!(a.run_seeds, small().with_master_seed(12).run_seeds);
    }

    #[test]
    fn end_to_end_is_deterministic() {
        let s = small();
        let a = run_pipeline(&s).unwrap();
        let b = run_pipeline(&s).unwrap();
        assert_eq!(a.finetuned, b.finetuned);
        assert_eq!(a.pivotal, b.pivotal);
        assert_eq!(a.trace.len(), 5);
        assert_eq!(s.dims(&a.train), vec![10, 16, 5]);
    }

    #[test]
    fn validation_names_fields() {
        let mut s = small();
        s.run_seeds = vec![1, 1];
        assert!(s.validate().unwrap_err().to_string().contains("bcsi.seeds"));
        let mut s = small();
        s.k = 0;
        assert!(s.validate().unwrap_err().to_string().contains("bcsi.k"));
    }
}
