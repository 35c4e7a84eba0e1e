use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use bcsi::datagen::{load_dataset, save_dataset, BiasedDataset};
use bcsi::eval::{
    bias_ratio_sweep, compare_detectors, evaluate_model, histogram, precision_vs_epoch, write_curve_csv,
    write_histogram_csv, CompareConfig, Mean, PrecisionRow, Report, ReportMeta,
};
use bcsi::finetune::{finetune, write_trace_csv};
use bcsi::influence::{bcsi_scores, read_scores_csv, write_scores_csv, DetectorConfig, InfluenceRecord, Method};
use bcsi::nn::MlpParams;
use bcsi::pipeline::{train_erm, DataSource};
use bcsi::selection::{topk_per_class, Denominator, PivotalSet};
use log::info;
use rayon::prelude::*;
use serde_json::json;

use crate::artifacts::{name, require, StageHashes};
use crate::config::CliConfig;
use crate::CliError;

pub struct Ctx {
    pub cfg: CliConfig,
    pub out: PathBuf,
    pub force: bool,
    pub hashes: StageHashes,
}

impl Ctx {
    pub fn new(cfg: CliConfig, out: PathBuf, force: bool) -> Result<Self, CliError> {
        std::fs::create_dir_all(&out)?;
        let hashes = StageHashes::of(&cfg);
        Ok(Ctx { cfg, out, force, hashes })
    }

    fn output(&self, stage: &str, hash: &str, ext: &str) -> PathBuf {
        self.out.join(name(stage, hash, ext))
    }

    fn input(&self, stage: &str, hash: &str, ext: &str) -> Result<PathBuf, CliError> {
        require(&self.out, stage, hash, ext, self.force)
    }

    fn train_set(&self) -> Result<BiasedDataset, CliError> {
        Ok(load_dataset(self.input("dataset", &self.hashes.data, "bfds")?)?)
    }

    fn test_set(&self) -> Result<BiasedDataset, CliError> {
        Ok(load_dataset(self.input("testset", &self.hashes.data, "bfds")?)?)
    }

    fn model(&self, stage: &str, hash: &str) -> Result<MlpParams, CliError> {
        Ok(MlpParams::load(self.input(stage, hash, "bfmp")?)?)
    }

    fn scores(&self) -> Result<Vec<InfluenceRecord>, CliError> {
        let path = self.input("scores", &self.hashes.scores, "csv")?;
        Ok(read_scores_csv(BufReader::new(File::open(path)?))?)
    }

    fn pivotal(&self) -> Result<PivotalSet, CliError> {
        Ok(PivotalSet::load(self.input("pivotal", &self.hashes.pivotal, "json")?)?)
    }
}

fn announce(path: &Path) {
    info!("wrote {}", path.display());
}

fn check_idx_paths(data: &DataSource) -> Result<(), CliError> {
    if let DataSource::Idx {
        train_images,
        train_labels,
        test_images,
        test_labels,
        ..
    } = data
    {
        for p in [train_images, train_labels, test_images, test_labels] {
            if !p.is_file() {
                return Err(CliError::Missing(p.clone()));
            }
        }
    }
    Ok(())
}

pub fn gen(ctx: &Ctx) -> Result<(BiasedDataset, BiasedDataset), CliError> {
    let data = &ctx.cfg.settings.data;
    check_idx_paths(data)?;
    let (train, test) = data.load()?;
    info!(
        "{} training samples ({} conflicting), {} test samples",
        train.len(),
        train.conflicting_count(),
        test.len()
    );
    for (ds, stage) in [(&train, "dataset"), (&test, "testset")] {
        let path = ctx.output(stage, &ctx.hashes.data, "bfds");
        save_dataset(ds, &path)?;
        announce(&path);
    }
    Ok((train, test))
}

pub fn train(ctx: &Ctx) -> Result<MlpParams, CliError> {
    let ds = ctx.train_set()?;
    let params = train_erm(&ctx.cfg.settings, &ds)?;
    let path = ctx.output("erm", &ctx.hashes.erm, "bfmp");
    params.save(&path)?;
    announce(&path);
    Ok(params)
}

pub fn score(ctx: &Ctx) -> Result<Vec<InfluenceRecord>, CliError> {
    let ds = ctx.train_set()?;
    let s = &ctx.cfg.settings;
    let dims = s.dims(&ds);
    let runs: Vec<Vec<InfluenceRecord>> = s
        .run_seeds
        .par_iter()
        .map(|&seed| bcsi_scores(&ds, &dims, &s.detector.with_seed(seed)))
        .collect::<bcsi::Result<_>>()?;
    let records: Vec<InfluenceRecord> = runs.into_iter().flatten().collect();
    let path = ctx.output("scores", &ctx.hashes.scores, "csv");
    let mut out = BufWriter::new(File::create(&path)?);
    write_scores_csv(&mut out, &records)?;
    out.flush()?;
    announce(&path);
    Ok(records)
}

pub fn pivotal(ctx: &Ctx) -> Result<PivotalSet, CliError> {
    let ds = ctx.train_set()?;
    let records = ctx.scores()?;
    let s = &ctx.cfg.settings;
    let per_run = s
        .run_seeds
        .iter()
        .map(|&seed| {
            let run: Vec<InfluenceRecord> = records.iter().filter(|r| r.run_seed == seed).cloned().collect();
            if run.is_empty() {
                return Err(bcsi::Error::Format(format!("scores file has no run with seed {seed}")));
            }
            topk_per_class(&run, &ds, s.k)
        })
        .collect::<bcsi::Result<Vec<_>>>()?;
    let set = PivotalSet::from_runs(per_run, s.k, s.run_seeds.clone(), Method::Bcsi)?;
    let path = ctx.output("pivotal", &ctx.hashes.pivotal, "json");
    set.save(&path, Some(&ds))?;
    announce(&path);
    Ok(set)
}

pub fn finetune_stage(ctx: &Ctx) -> Result<MlpParams, CliError> {
    let ds = ctx.train_set()?;
    let erm = ctx.model("erm", &ctx.hashes.erm)?;
    let set = ctx.pivotal()?;
    let (tuned, trace) = finetune(&erm, &ds, &set, &ctx.cfg.settings.finetune)?;
    let path = ctx.output("finetuned", &ctx.hashes.finetune, "bfmp");
    tuned.save(&path)?;
    announce(&path);
    let trace_path = ctx.output("trace", &ctx.hashes.finetune, "csv");
    let mut out = BufWriter::new(File::create(&trace_path)?);
    write_trace_csv(&mut out, &trace)?;
    out.flush()?;
    announce(&trace_path);
    Ok(tuned)
}

pub fn eval(ctx: &Ctx) -> Result<Report, CliError> {
    let train = ctx.train_set()?;
    let test = ctx.test_set()?;
    let erm = ctx.model("erm", &ctx.hashes.erm)?;
    let tuned = ctx.model("finetuned", &ctx.hashes.finetune)?;
    let set = ctx.pivotal()?;
    let records = ctx.scores()?;
    let s = &ctx.cfg.settings;
    let e = &ctx.cfg.eval;

    let (run_precision, pivotal_precision) = set.precisions(&train)?;
    let mut precision = vec![PrecisionRow {
        method: "bcsi_single_run".into(),
        mode: Denominator::SelectedSize,
        precision: Mean::of(run_precision),
    }];
    if let Some(p) = pivotal_precision {
        precision.push(PrecisionRow {
            method: "bcsi_pivotal".into(),
            mode: Denominator::SelectedSize,
            precision: Mean::of(vec![p]),
        });
    }
    let dims = s.dims(&train);
    if e.compare {
        let cmp = CompareConfig {
            bcsi: s.detector.clone(),
            converged: DetectorConfig {
                damping: s.detector.damping,
                ..DetectorConfig::converged_ce()
            },
            seeds: e.seeds.clone(),
        };
        precision.extend(compare_detectors(&train, &dims, &cmp)?);
    }
    if !e.epochs.is_empty() {
        let curve = precision_vs_epoch(&train, &dims, &DetectorConfig::converged_ce(), &e.epochs, &e.seeds)?;
        let path = ctx.output("curve", &ctx.hashes.report, "csv");
        let mut out = BufWriter::new(File::create(&path)?);
        write_curve_csv(&mut out, &curve)?;
        out.flush()?;
        announce(&path);
    }
    if e.histogram_bins > 0 {
        let first: Vec<InfluenceRecord> = records
            .iter()
            .filter(|r| r.run_seed == s.run_seeds[0])
            .cloned()
            .collect();
        let bins = histogram(&first, &train, e.histogram_bins)?;
        let path = ctx.output("histogram", &ctx.hashes.report, "csv");
        let mut out = BufWriter::new(File::create(&path)?);
        write_histogram_csv(&mut out, &bins)?;
        out.flush()?;
        announce(&path);
    }
    let sweep = if e.ratios.is_empty() {
        Vec::new()
    } else {
        bias_ratio_sweep(&e.ratios, s, &e.seeds)?
    };

    let mut report = Report {
        meta: ReportMeta {
            conflict_ratio: s.data.conflict_ratio(),
            num_classes: train.num_classes,
            train_size: train.len(),
            train_conflicting: train.conflicting_count(),
            test_size: test.len(),
            seeds: s.run_seeds.clone(),
            settings: json!({ "pipeline": s, "eval": e }),
        },
        accuracies: Default::default(),
        groups: Default::default(),
        precision,
        sweep,
    };
    report.add_model("erm", &evaluate_model(&erm, &test)?);
    report.add_model("finetuned", &evaluate_model(&tuned, &test)?);
    let path = ctx.output("report", &ctx.hashes.report, "json");
    report.save(&path)?;
    announce(&path);
    Ok(report)
}

/// Runs every stage in order and prints a short summary.
pub fn pipeline(ctx: &Ctx) -> Result<(), CliError> {
    gen(ctx)?;
    train(ctx)?;
    score(ctx)?;
    let set = pivotal(ctx)?;
    finetune_stage(ctx)?;
    let report = eval(ctx)?;
    let (_, precision) = set.precisions(&ctx.train_set()?)?;
    let erm = &report.accuracies["erm"];
    let tuned = &report.accuracies["finetuned"];
    let precision = precision.map_or_else(|| "n/a".to_string(), |p| p.to_string());
    println!("{:<30}{}", "ERM unbiased accuracy", erm.unbiased);
    println!("{:<30}{}", "fine-tuned unbiased accuracy", tuned.unbiased);
    println!("{:<30}{}", "pivotal precision", precision);
    println!("{:<30}{}", "pivotal size", set.len());
    println!("{:<30}{}", "report", ctx.output("report", &ctx.hashes.report, "json").display());
    Ok(())
}
