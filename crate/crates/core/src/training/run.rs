use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grad::DType;
use crate::model::{load_checkpoint, save_checkpoint, ActionStats, CheckpointManifest, ModelConfig, ParamStore};
use crate::scheduler::{make_schedule, Schedule};
use crate::seed::{derive_seed, stream};
use crate::simenv::{load_dataset, Episode};
use crate::{Error, Result};

use super::{
    clip_global_norm, learning_rate, loss_and_grads, AdamW, ExamplePool, LossBreakdown, NoiseDraw, TrainBatch,
    TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Action-free videos, `L_V` only.
    Pretrain,
    /// Demonstrations, `L_D`.
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub stage: Stage,
    pub datasets: Vec<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Checkpoint to start from instead of a fresh initialization.
    pub init: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop (with a checkpoint) after this many updates, keeping the
    /// schedule of the full run.
    pub stop_after: Option<u64>,
    /// Continue from the newest checkpoint in the run directory.
    pub resume: bool,
    /// Assemble batches on a helper thread.
    pub fast: bool,
    /// Written to `config.json` instead of the job itself.
    pub config_echo: Option<serde_json::Value>,
}

/// One row of `curves.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
}

const CURVE_HEADER: &str =
    "step,total,action,obs,track,vis,action_sum,obs_sum,track_sum,vis_sum,lr,grad_norm";

impl CurveRow {
    fn to_csv(&self) -> String {
        let l = &self.loss;
        let mut s = format!("{},{}", self.step, l.total);
        let terms = [l.action, l.obs, l.track, l.vis];
        for t in terms {
            let _ = write!(s, ",{}", t.map(|t| t.mean.to_string()).unwrap_or_default());
        }
        for t in terms {
            let _ = write!(s, ",{}", t.map(|t| t.sum.to_string()).unwrap_or_default());
        }
        let _ = write!(s, ",{},{}", self.lr, self.grad_norm);
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub step: u64,
    /// Rows produced by this invocation.
    pub curve: Vec<CurveRow>,
    pub params: ParamStore<f32>,
    pub action_stats: ActionStats,
}

fn checkpoint_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step:08}"))
}

/// Newest complete checkpoint under `run_dir/checkpoints`.
pub fn latest_checkpoint(run_dir: &Path) -> Option<(u64, PathBuf)> {
    let dir = run_dir.join("checkpoints");
    std::fs::read_dir(&dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step = name.strip_prefix("step_")?.parse::<u64>().ok()?;
            e.path().join("manifest.json").exists().then(|| (step, e.path()))
        })
        .max_by_key(|(s, _)| *s)
}

struct EventLog {
    file: std::fs::File,
    path: PathBuf,
}

impl EventLog {
    fn open(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("events.log");
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { file, path })
    }

    fn log(&mut self, step: u64, msg: &str) -> Result<()> {
        writeln!(self.file, "step {step}: {msg}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Loads the job's datasets, checks they suit the stage, and trains.
pub fn train(job: &TrainJob, run_dir: &Path, opts: &RunOptions) -> Result<TrainOutcome> {
    if job.datasets.is_empty() {
        return Err(Error::Data("no datasets given".into()));
    }
    let mut episodes = Vec::new();
    for dir in &job.datasets {
        let ds = load_dataset(dir)?;
        match (job.stage, ds.manifest.action_free) {
            (Stage::Finetune, true) => {
                return Err(Error::Data(format!(
                    "{} is action-free; finetuning needs demonstrations",
                    dir.display()
                )))
            }
            (Stage::Pretrain, false) => {
                return Err(Error::Data(format!(
                    "{} has action labels; pretraining takes action-free datasets",
                    dir.display()
                )))
            }
            _ => {}
        }
        episodes.extend(ds.episodes);
    }
    train_episodes(job, &episodes, run_dir, opts)
}

/// Trains on in-memory episodes; `job.datasets` is only recorded.
pub fn train_episodes(job: &TrainJob, episodes: &[Episode], run_dir: &Path, opts: &RunOptions) -> Result<TrainOutcome> {
    let cfg = &job.model;
    let tc = &job.train;
    cfg.validate()?;
    tc.validate()?;
    if cfg.precision != DType::F32 {
        return Err(Error::Config("model.precision: training runs in f32".into()));
    }
    let pool = ExamplePool::new(episodes, cfg)?;
    match (job.stage, pool.action_free()) {
        (Stage::Finetune, true) => return Err(Error::Data("finetuning needs action-labelled episodes".into())),
        (Stage::Pretrain, false) => return Err(Error::Data("pretraining takes action-free episodes".into())),
        _ => {}
    }
    let stats = match job.stage {
        Stage::Finetune => ActionStats::from_episodes(episodes)?,
        Stage::Pretrain => ActionStats::identity(cfg.action_dim),
    };
    let sched = make_schedule(tc.diffusion_steps)?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;

    let mut lineage = Vec::new();
    let (mut params, mut opt, start) = match (opts.resume, latest_checkpoint(run_dir)) {
        (true, Some((step, dir))) => {
            let ck = load_checkpoint(&dir)?;
            if ck.manifest.model != *cfg {
                return Err(Error::Checkpoint(format!("{} was trained with a different model config", dir.display())));
            }
            let buffers = ck
                .optimizer
                .ok_or_else(|| Error::Checkpoint(format!("{} has no optimizer state", dir.display())))?;
            let mut opt = AdamW::new(&ck.params, tc.betas, tc.adam_eps, tc.weight_decay);
            opt.import(&ck.params, &buffers, step)?;
            lineage = ck.manifest.lineage;
            (ck.params, opt, step)
        }
        _ => {
            let params = match &job.init {
                Some(path) => {
                    let ck = load_checkpoint(path)?;
                    ck.params
                        .validate(cfg)
                        .map_err(|e| Error::Checkpoint(format!("{}: incompatible with the model config: {e}", path.display())))?;
                    lineage = ck.manifest.lineage.clone();
                    lineage.push(path.display().to_string());
                    ck.params
                }
                None => ParamStore::<f32>::init(cfg, derive_seed(tc.seed, &[stream::INIT])),
            };
            let opt = AdamW::new(&params, tc.betas, tc.adam_eps, tc.weight_decay);
            (params, opt, 0)
        }
    };

    let echo = opts
        .config_echo
        .clone()
        .unwrap_or_else(|| serde_json::to_value(job).expect("job serializes"));
    let config_path = run_dir.join("config.json");
    std::fs::write(&config_path, serde_json::to_vec_pretty(&echo).expect("json"))
        .map_err(|e| Error::io(&config_path, e))?;

    let curves_path = run_dir.join("curves.csv");
    let mut kept = vec![CURVE_HEADER.to_string()];
    if start > 0 {
        if let Ok(text) = std::fs::read_to_string(&curves_path) {
            kept.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= start))
                    .map(str::to_string),
            );
        }
    }
    let mut curves = std::fs::File::create(&curves_path).map_err(|e| Error::io(&curves_path, e))?;
    writeln!(curves, "{}", kept.join("\n")).map_err(|e| Error::io(&curves_path, e))?;
    let mut events = EventLog::open(run_dir)?;

    let end = opts.stop_after.map_or(tc.steps, |s| s.min(tc.steps));
    let schedule = tc.schedule_for(job.stage);
    events.log(
        start,
        &format!(
            "{} {} on {} anchors, steps {}..{end} of {}, {} parameters",
            if start > 0 { "resuming" } else { "starting" },
            job.stage.name(),
            pool.len(),
            start + 1,
            tc.steps,
            params.num_scalars()
        ),
    )?;

    let make = |step: u64| -> Result<(TrainBatch<f32>, NoiseDraw<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &[stream::BATCH, step]));
        let idx = pool.sample_indices(tc.batch_size, &mut rng);
        let batch = pool.assemble::<f32>(&idx, cfg, Some(&stats))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &[stream::NOISE, step]));
        let noise = NoiseDraw::sample(cfg, &sched, tc.batch_size, &mut rng);
        Ok((batch, noise))
    };

    let manifest = |step: u64, lineage: &[String]| CheckpointManifest {
        format_version: 0,
        model: cfg.clone(),
        num_train_steps: tc.diffusion_steps,
        step,
        stage: job.stage.name().into(),
        base_seed: tc.seed,
        lineage: lineage.to_vec(),
        action_stats: stats.clone(),
        params_sha256: String::new(),
        optimizer_sha256: None,
    };

    let mut rows = Vec::new();
    let mut body = |step: u64, batch: TrainBatch<f32>, noise: NoiseDraw<f32>| -> Result<()> {
        let lr = learning_rate(schedule, tc.lr, tc.warmup_steps, tc.steps, step);
        let mut sg = loss_and_grads(&params, cfg, &sched, &batch, &tc.weights, &noise)?;
        let norm = clip_global_norm(&mut sg.grads, tc.grad_clip);
        let row = CurveRow {
            step,
            loss: sg.breakdown,
            lr,
            grad_norm: norm,
        };
        if !sg.breakdown.total.is_finite() || !norm.is_finite() {
            let msg = format!("non-finite loss or gradient: {:?}, grad norm {norm}, lr {lr}", sg.breakdown);
            events.log(step, &format!("aborting: {msg}"))?;
            return Err(Error::Numeric(format!("step {step}: {msg}")));
        }
        opt.update(&mut params, &sg.grads, lr)?;
        writeln!(curves, "{}", row.to_csv()).map_err(|e| Error::io(&curves_path, e))?;
        if step % tc.log_every == 0 {
            log::info!("{} step {step}: loss {:.4} lr {lr:.2e} |g| {norm:.3}", job.stage.name(), row.loss.total);
        }
        rows.push(row);
        if step % tc.checkpoint_every == 0 || step == end {
            let dir = checkpoint_dir(run_dir, step);
            save_checkpoint(&dir, manifest(step, &lineage), &params, Some(&opt.export(&params)))?;
            events.log(step, &format!("checkpoint {}", dir.display()))?;
        }
        Ok(())
    };

    if opts.fast {
        std::thread::scope(|s| -> Result<()> {
            let (tx, rx) = std::sync::mpsc::sync_channel(2);
            let make = &make;
            s.spawn(move || {
                for step in start + 1..=end {
                    if tx.send((step, make(step))).is_err() {
                        break;
                    }
                }
            });
            for (step, item) in rx {
                let (batch, noise) = item?;
                body(step, batch, noise)?;
            }
            Ok(())
        })?;
    } else {
        for step in start + 1..=end {
            let (batch, noise) = make(step)?;
            body(step, batch, noise)?;
        }
    }
    drop(body);
    events.log(end, "done")?;

    let final_checkpoint = checkpoint_dir(run_dir, end);
    if !final_checkpoint.exists() {
        save_checkpoint(&final_checkpoint, manifest(end, &lineage), &params, Some(&opt.export(&params)))?;
    }
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        final_checkpoint,
        step: end,
        curve: rows,
        params,
        action_stats: stats,
    })
}

/// Diffusion schedule of a checkpointed run.
pub fn schedule_of(manifest: &CheckpointManifest) -> Result<Schedule> {
    make_schedule(manifest.num_train_steps)
}
