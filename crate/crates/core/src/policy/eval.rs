use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::seed::{derive_seed, stream};
use crate::simenv::EnvConfig;
use crate::{Error, Result};

use super::{rollout, ChunkSource, RolloutConfig};

/// One named environment configuration of an evaluation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteTask {
    pub name: String,
    pub env: EnvConfig,
}

impl SuiteTask {
    pub fn new(name: impl Into<String>, env: EnvConfig) -> Self {
        Self { name: name.into(), env }
    }

    /// In-distribution, expanded initial object range, and the enlarged
    /// occluding gripper with a distractor, all derived from `base`.
    pub fn standard_suite(base: &EnvConfig) -> Vec<SuiteTask> {
        vec![
            Self::new("in_distribution", base.clone()),
            Self::new(
                "ood_expanded_init",
                EnvConfig {
                    ood_expanded_init: true,
                    ..base.clone()
                },
            ),
            Self::new(
                "occlusion_heavy",
                EnvConfig {
                    occlusion_heavy: true,
                    distractor: true,
                    ..base.clone()
                },
            ),
        ]
    }
}

/// Wilson score interval at 95%.
pub fn wilson_interval(successes: usize, n: usize) -> [f64; 2] {
    if n == 0 {
        return [0.0, 1.0];
    }
    let z = 1.959_963_984_540_054;
    let (nf, p) = (n as f64, successes as f64 / n as f64);
    let denom = 1.0 + z * z / nf;
    let center = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    [(center - half).max(0.0), (center + half).min(1.0)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    /// `successes / n`.
    pub sr: f64,
    pub n: usize,
    pub successes: usize,
    pub ci95: [f64; 2],
    /// Per-seed outcomes, aligned with the report's seed list.
    pub outcomes: Vec<bool>,
    pub steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub variant: String,
    pub suite: Vec<String>,
    pub seeds: Vec<u64>,
    pub per_task: BTreeMap<String, TaskResult>,
    /// Rows follow `suite`, columns follow `seeds`; 1 marks a success.
    pub paired_matrix: Vec<Vec<u8>>,
}

/// The shared seed list: identical for every variant evaluated with the
/// same rollout config, which makes comparisons paired.
pub fn evaluation_seeds(rc: &RolloutConfig) -> Vec<u64> {
    (0..rc.episodes as u64)
        .map(|i| derive_seed(rc.seed, &[stream::ROLLOUT, i]))
        .collect()
}

/// Rolls `source` out on every suite task for every evaluation seed.
/// `threads > 1` spreads seeds over worker threads; each rollout owns its
/// environment and rng, so results do not depend on the split.
pub fn evaluate(
    source: &dyn ChunkSource,
    checkpoint: &str,
    variant: &str,
    suite: &[SuiteTask],
    rc: &RolloutConfig,
    threads: usize,
) -> Result<EvalReport> {
    if suite.is_empty() {
        return Err(Error::Config("eval.suite: no tasks".into()));
    }
    let seeds = evaluation_seeds(rc);
    let mut per_task = BTreeMap::new();
    let mut matrix = Vec::new();
    for task in suite {
        let results = if threads > 1 {
            let chunk = seeds.len().div_ceil(threads);
            std::thread::scope(|s| {
                let handles: Vec<_> = seeds
                    .chunks(chunk)
                    .map(|part| {
                        s.spawn(move || part.iter().map(|&sd| rollout(&task.env, source, rc, sd)).collect::<Vec<_>>())
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("rollout thread panicked"))
                    .collect::<Result<Vec<_>>>()
            })?
        } else {
            seeds
                .iter()
                .map(|&sd| rollout(&task.env, source, rc, sd))
                .collect::<Result<Vec<_>>>()?
        };
        let outcomes: Vec<bool> = results.iter().map(|r| r.success).collect();
        let successes = outcomes.iter().filter(|&&o| o).count();
        let n = outcomes.len();
        matrix.push(outcomes.iter().map(|&o| o as u8).collect());
        per_task.insert(
            task.name.clone(),
            TaskResult {
                sr: successes as f64 / n as f64,
                n,
                successes,
                ci95: wilson_interval(successes, n),
                steps: results.iter().map(|r| r.steps).collect(),
                outcomes,
            },
        );
    }
    Ok(EvalReport {
        checkpoint: checkpoint.to_string(),
        variant: variant.to_string(),
        suite: suite.iter().map(|t| t.name.clone()).collect(),
        seeds,
        per_task,
        paired_matrix: matrix,
    })
}

impl EvalReport {
    /// Mean success rate over the suite's tasks.
    pub fn mean_sr(&self) -> f64 {
        self.per_task.values().map(|t| t.sr).sum::<f64>() / self.per_task.len().max(1) as f64
    }

    pub fn table(&self) -> String {
        let mut s = format!("{} ({})\n", self.variant, self.checkpoint);
        let _ = writeln!(s, "  {:<20} {:>6} {:>4} {:>17}", "task", "SR", "n", "95% CI");
        for name in &self.suite {
            let t = &self.per_task[name];
            let _ = writeln!(
                s,
                "  {name:<20} {:>6.3} {:>4} [{:.3}, {:.3}]",
                t.sr, t.n, t.ci95[0], t.ci95[1]
            );
        }
        s
    }
}

/// Per-seed outcomes of several variants on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedMatrix {
    pub task: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
    pub outcomes: Vec<Vec<bool>>,
}

impl PairedMatrix {
    /// Fails unless every report used the same seeds.
    pub fn from_reports(reports: &[&EvalReport], task: &str) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::Config("no reports to pair".into()))?;
        let mut outcomes = Vec::new();
        for r in reports {
            if r.seeds != first.seeds {
                return Err(Error::Config(format!(
                    "reports for {} and {} use different seed lists",
                    first.variant, r.variant
                )));
            }
            let t = r
                .per_task
                .get(task)
                .ok_or_else(|| Error::Config(format!("report for {} lacks task {task}", r.variant)))?;
            outcomes.push(t.outcomes.clone());
        }
        Ok(Self {
            task: task.to_string(),
            seeds: first.seeds.clone(),
            variants: reports.iter().map(|r| r.variant.clone()).collect(),
            outcomes,
        })
    }

    /// `(wins of a over b, losses, ties)` across seeds.
    pub fn sign_counts(&self, a: usize, b: usize) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for (x, y) in self.outcomes[a].iter().zip(&self.outcomes[b]) {
            match (x, y) {
                (true, false) => c.0 += 1,
                (false, true) => c.1 += 1,
                _ => c.2 += 1,
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ExpertOracle;

    #[test]
    fn wilson_matches_closed_form_cases() {
        let [lo, hi] = wilson_interval(20, 20);
        assert!((hi - 1.0).abs() < 1e-12 && (lo - 0.8389).abs() < 1e-3);
        let [lo, hi] = wilson_interval(10, 20);
        assert!((lo - 0.2993).abs() < 1e-3 && (hi - 0.7007).abs() < 1e-3);
    }

    #[test]
    fn reports_are_reproducible_and_paired() {
        let env = EnvConfig::push();
        let oracle = ExpertOracle {
            task: env.task,
            chunk: 8,
        };
        let rc = RolloutConfig {
            episodes: 4,
            ..RolloutConfig::default()
        };
        let suite = SuiteTask::standard_suite(&env);
        let a = evaluate(&oracle, "expert", "oracle", &suite, &rc, 1).unwrap();
        let b = evaluate(&oracle, "expert", "oracle", &suite, &rc, 3).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.per_task.len(), 3);
        for t in a.per_task.values() {
            assert_eq!(t.sr, t.successes as f64 / t.n as f64);
        }
        let m = PairedMatrix::from_reports(&[&a, &b], "in_distribution").unwrap();
        let (w, l, _) = m.sign_counts(0, 1);
        assert_eq!((w, l), (0, 0));
        let mut other = b.clone();
        other.seeds[0] += 1;
        assert!(PairedMatrix::from_reports(&[&a, &other], "in_distribution").is_err());
        assert!(a.table().contains("ood_expanded_init"));
    }
}
