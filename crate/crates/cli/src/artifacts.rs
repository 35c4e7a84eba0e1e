//! Artifact names of the form `<stage>.<hash>.<ext>`.
//!
//! Each stage hashes the configuration sections it depends on, including
//! those of its upstream stages, so changing a setting renames exactly the
//! artifacts it affects.

use std::path::{Path, PathBuf};

use log::warn;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::CliConfig;
use crate::CliError;

const HASH_CHARS: usize = 12;

fn digest<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    let hex = format!("{:x}", Sha256::digest(text.as_bytes()));
    hex[..HASH_CHARS].to_string()
}

/// Config-hash prefixes of every stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageHashes {
    pub data: String,
    pub erm: String,
    pub scores: String,
    pub pivotal: String,
    pub finetune: String,
    pub report: String,
}

impl StageHashes {
    pub fn of(cfg: &CliConfig) -> Self {
        let s = &cfg.settings;
        let data = digest(&json!({ "data": s.data }));
        let erm = digest(&json!({ "data": data, "hidden": s.hidden, "erm": s.erm }));
        let scores = digest(&json!({
            "data": data,
            "hidden": s.hidden,
            "detector": s.detector,
            "run_seeds": s.run_seeds,
        }));
        let pivotal = digest(&json!({ "scores": scores, "k": s.k }));
        let finetune = digest(&json!({ "erm": erm, "pivotal": pivotal, "finetune": s.finetune }));
        let report = digest(&json!({ "finetune": finetune, "eval": cfg.eval }));
        StageHashes {
            data,
            erm,
            scores,
            pivotal,
            finetune,
            report,
        }
    }
}

pub fn name(stage: &str, hash: &str, ext: &str) -> String {
    format!("{stage}.{hash}.{ext}")
}

/// Resolves an input artifact. A file of the same stage made from another
/// configuration is refused unless `force` is set.
pub fn require(dir: &Path, stage: &str, hash: &str, ext: &str, force: bool) -> Result<PathBuf, CliError> {
    let expected = dir.join(name(stage, hash, ext));
    if expected.is_file() {
        return Ok(expected);
    }
    let mut others: Vec<PathBuf> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| {
                    n.starts_with(&format!("{stage}.")) && n.ends_with(&format!(".{ext}")) && n.split('.').count() == 3
                })
        })
        .collect();
    others.sort();
    match (others.pop(), force) {
        (None, _) => Err(CliError::Missing(expected)),
        (Some(found), false) => Err(CliError::Mismatch { expected, found }),
        (Some(found), true) => {
            warn!(
                "using {} although the configuration expects {} (--force)",
                found.display(),
                expected.display()
            );
            Ok(found)
        }
    }
}
