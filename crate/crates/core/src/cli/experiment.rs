//! Train-then-evaluate helpers shared by `ablate` and the acceptance suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, VariantConfig, VariantMode};
use crate::policy::{evaluate, EvalReport, PairedMatrix, Policy, RolloutConfig, SuiteTask};
use crate::simenv::Episode;
use crate::training::{train_episodes, RunOptions, Stage, TrainConfig, TrainJob};
use crate::{Error, Result};

/// The ablation grid: three modality mixes, with the track branch run with
/// and without its visibility head.
pub fn ablation_variants() -> Vec<VariantConfig> {
    vec![
        VariantConfig::new(VariantMode::Joint, true),
        VariantConfig::new(VariantMode::Joint, false),
        VariantConfig::new(VariantMode::LatentOnly, true),
        VariantConfig::new(VariantMode::TrackOnly, true),
        VariantConfig::new(VariantMode::TrackOnly, false),
    ]
}

pub fn parse_variant(label: &str) -> Result<VariantConfig> {
    ablation_variants()
        .into_iter()
        .find(|v| v.label() == label)
        .ok_or_else(|| Error::Config(format!("model.variant: unknown variant label {label}")))
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// One training run followed by a suite evaluation.
#[derive(Debug, Clone)]
pub struct TrainedEval {
    pub checkpoint: PathBuf,
    pub report: EvalReport,
}

/// Trains on `episodes` (from `init` when given) into `run_dir` and
/// evaluates the final checkpoint on `suite`.
#[allow(clippy::too_many_arguments)]
pub fn train_and_evaluate(
    model: &ModelConfig,
    train: &TrainConfig,
    episodes: &[Episode],
    init: Option<&Path>,
    run_dir: &Path,
    suite: &[SuiteTask],
    rollout: &RolloutConfig,
    threads: usize,
) -> Result<TrainedEval> {
    let job = TrainJob {
        stage: Stage::Finetune,
        datasets: vec![],
        model: model.clone(),
        train: train.clone(),
        init: init.map(Path::to_path_buf),
    };
    let out = train_episodes(&job, episodes, run_dir, &RunOptions::default())?;
    let policy = Policy::from_checkpoint(&out.final_checkpoint)?;
    let report = evaluate(&policy, &policy.id, &model.variant.label(), suite, rollout, threads)?;
    write_json(&run_dir.join("eval_report.json"), &report)?;
    Ok(TrainedEval {
        checkpoint: out.final_checkpoint,
        report,
    })
}

/// Several training seeds of several variants, all evaluated on the same
/// seed list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variants: Vec<String>,
    pub train_seeds: Vec<u64>,
    pub suite: Vec<String>,
    /// `variant -> task -> SR per training seed`.
    pub sr: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    /// `task -> training seed index -> paired outcome matrix`.
    pub paired: BTreeMap<String, Vec<PairedMatrix>>,
}

impl AblationSummary {
    pub fn from_reports(variants: &[String], train_seeds: &[u64], reports: &[Vec<EvalReport>]) -> Result<Self> {
        let suite = reports
            .first()
            .and_then(|r| r.first())
            .map(|r| r.suite.clone())
            .ok_or_else(|| Error::Config("ablation produced no reports".into()))?;
        let mut sr = BTreeMap::new();
        for (v, per_seed) in variants.iter().zip(reports) {
            let mut by_task = BTreeMap::new();
            for task in &suite {
                by_task.insert(task.clone(), per_seed.iter().map(|r| r.per_task[task].sr).collect());
            }
            sr.insert(v.clone(), by_task);
        }
        let mut paired = BTreeMap::new();
        for task in &suite {
            let mut per_seed = Vec::new();
            for k in 0..train_seeds.len() {
                let rs: Vec<&EvalReport> = reports.iter().map(|r| &r[k]).collect();
                per_seed.push(PairedMatrix::from_reports(&rs, task)?);
            }
            paired.insert(task.clone(), per_seed);
        }
        Ok(Self {
            variants: variants.to_vec(),
            train_seeds: train_seeds.to_vec(),
            suite,
            sr,
            paired,
        })
    }

    pub fn median_sr(&self, variant: &str, task: &str) -> f64 {
        median(&self.sr[variant][task])
    }

    /// Wins minus losses of `a` over `b`, pooled over training seeds.
    pub fn sign_margin(&self, task: &str, a: &str, b: &str) -> i64 {
        let ia = self.variants.iter().position(|v| v == a);
        let ib = self.variants.iter().position(|v| v == b);
        let (Some(ia), Some(ib)) = (ia, ib) else { return 0 };
        self.paired[task]
            .iter()
            .map(|m| {
                let (w, l, _) = m.sign_counts(ia, ib);
                w as i64 - l as i64
            })
            .sum()
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        for task in &self.suite {
            let _ = writeln!(s, "{task}");
            let _ = writeln!(s, "  {:<22} {:>9}  per-seed SR", "variant", "median SR");
            for v in &self.variants {
                let per: Vec<String> = self.sr[v][task].iter().map(|x| format!("{x:.2}")).collect();
                let _ = writeln!(s, "  {v:<22} {:>9.3}  {}", self.median_sr(v, task), per.join(" "));
            }
            if let Some(first) = self.variants.first() {
                for v in &self.variants[1..] {
                    let _ = writeln!(s, "  sign({first} - {v}) = {:+}", self.sign_margin(task, first, v));
                }
            }
        }
        s
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    crate::blob::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_odd_and_even() {
        assert_eq!(median(&[0.3, 0.1, 0.2]), 0.2);
        assert!((median(&[0.4, 0.1, 0.2, 0.3]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn variant_labels_round_trip() {
        for v in ablation_variants() {
            assert_eq!(parse_variant(&v.label()).unwrap(), v);
        }
        assert!(parse_variant("pixels").is_err());
    }
}
