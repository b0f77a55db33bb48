//! Command-line entry point: dataset generation, training stages,
//! evaluation, ablation grids, imagination overlays and checkpoint
//! inspection.

mod config;
mod experiment;

pub use config::{DataConfig, RunConfig};
pub use experiment::{
    ablation_variants, median, parse_variant, train_and_evaluate, write_json, AblationSummary, TrainedEval,
};

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{inspect_checkpoint, ModelConfig};
use crate::policy::{evaluate, imagine, write_overlays, EvalReport, PairedMatrix, Policy, SuiteTask};
use crate::seed::{derive_seed, stream};
use crate::simenv::{expert_episode, generate_dataset, load_dataset, EnvConfig, TaskKind};
use crate::training::{train, RunOptions, Stage, TrainJob};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "trackwam", version, about = "Joint pixel, track and action diffusion on a planar sandbox")]
pub struct Cli {
    /// TOML (or JSON) run configuration layered over the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one field by dotted path, e.g. `--set train.steps=500`.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset of scripted expert episodes.
    GenData(GenDataArgs),
    /// Action-free pretraining on video datasets.
    Pretrain(TrainArgs),
    /// Training on demonstrations, optionally from a checkpoint.
    Finetune(TrainArgs),
    /// Closed-loop evaluation of one or more checkpoints on paired seeds.
    Eval(EvalArgs),
    /// Train and evaluate the variant grid on one demonstration dataset.
    Ablate(AblateArgs),
    /// Draw predicted tracks and decoded future frames.
    Imagine(ImagineArgs),
    /// Print a checkpoint's manifest, tensors and config differences.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Push,
    PickPlace,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drop action labels.
    #[arg(long)]
    pub action_free: bool,
    /// Draw objects from the expanded initial range.
    #[arg(long)]
    pub ood: bool,
    /// Enlarged occluding gripper plus a distractor object.
    #[arg(long)]
    pub occlusion: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directories.
    #[arg(long = "data", required = true)]
    pub data: Vec<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this checkpoint's parameters.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many updates, keeping the full run's schedule.
    #[arg(long)]
    pub stop_after: Option<u64>,
    /// Prefetch batches on a helper thread; not guaranteed bit-reproducible.
    #[arg(long)]
    pub fast: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SuiteArg {
    /// In-distribution, expanded initial range, occlusion-heavy.
    Standard,
    /// The configured environment only.
    Env,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directories; several are evaluated on the same seeds.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "standard")]
    pub suite: SuiteArg,
    /// Worker threads for rollouts (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Demonstration dataset.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training seeds per variant.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Variant labels; defaults to the full grid.
    #[arg(long = "variant")]
    pub variants: Vec<String>,
    /// `env` evaluates on the dataset's own environment.
    #[arg(long, value_enum, default_value = "env")]
    pub suite: SuiteArg,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct ImagineArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scenes, seeded from `data.seed`.
    #[arg(long, default_value_t = 4)]
    pub scenes: u64,
    /// Expert steps taken before imagining.
    #[arg(long, default_value_t = 6)]
    pub at_step: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
    /// Preset to diff the stored model config against.
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: PresetArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Desk,
    Reference,
    Tiny,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut sets = cli.sets.clone();
    if let Command::GenData(a) = &cli.command {
        sets.splice(0..0, gen_data_sets(a));
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &sets)?;
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(&cfg, a),
        Command::Pretrain(a) => cmd_train(&cfg, Stage::Pretrain, a),
        Command::Finetune(a) => cmd_train(&cfg, Stage::Finetune, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Ablate(a) => cmd_ablate(&cfg, a),
        Command::Imagine(a) => cmd_imagine(&cfg, a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

/// Dedicated gen-data flags as overrides; explicit `--set` flags win.
fn gen_data_sets(a: &GenDataArgs) -> Vec<String> {
    let mut s = Vec::new();
    match a.task {
        Some(TaskArg::Push) => s.push("env.task=\"push-to-goal\"".into()),
        Some(TaskArg::PickPlace) => s.push("env.task=\"pick-place\"".into()),
        None => {}
    }
    if let Some(n) = a.episodes {
        s.push(format!("data.episodes={n}"));
    }
    if let Some(seed) = a.seed {
        s.push(format!("data.seed={seed}"));
    }
    if a.action_free {
        s.push("data.action_free=true".into());
    }
    if a.ood {
        s.push("env.ood_expanded_init=true".into());
    }
    if a.occlusion {
        s.push("env.occlusion_heavy=true".into());
        s.push("env.distractor=true".into());
    }
    s
}

fn threads(n: usize) -> usize {
    if n > 0 {
        n
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_json(&dir.join("config.json"), &cfg.to_json())
}

fn cmd_gen_data(cfg: &RunConfig, a: &GenDataArgs) -> Result<()> {
    let m = generate_dataset(&cfg.env, cfg.data.episodes, cfg.data.action_free, cfg.data.seed, &a.out)?;
    echo_config(&a.out, cfg)?;
    println!(
        "wrote {} episodes to {} ({} resampled)",
        m.episode_count,
        a.out.display(),
        m.resampled_seeds.len()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, stage: Stage, a: &TrainArgs) -> Result<()> {
    let job = TrainJob {
        stage,
        datasets: a.data.clone(),
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        init: a.init.clone(),
    };
    let mut echo = cfg.to_json();
    echo["job"] = serde_json::json!({
        "stage": stage.name(),
        "datasets": a.data,
        "init": a.init,
    });
    let opts = RunOptions {
        stop_after: a.stop_after,
        resume: a.resume,
        fast: a.fast,
        config_echo: Some(echo),
    };
    let out = train(&job, &a.out, &opts)?;
    if let Some(last) = out.curve.last() {
        println!("step {}  loss {:.4}", last.step, last.loss.total);
    }
    println!("checkpoint {}", out.final_checkpoint.display());
    Ok(())
}

fn suite_for(arg: SuiteArg, env: &EnvConfig) -> Vec<SuiteTask> {
    match arg {
        SuiteArg::Standard => SuiteTask::standard_suite(env),
        SuiteArg::Env => vec![SuiteTask::new(task_name(env), env.clone())],
    }
}

fn task_name(env: &EnvConfig) -> String {
    let base = match env.task {
        TaskKind::PushToGoal => "push",
        TaskKind::PickPlace => "pick_place",
    };
    if env.occlusion_heavy {
        format!("{base}_occluded")
    } else {
        base.to_string()
    }
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    echo_config(&a.out, cfg)?;
    let suite = suite_for(a.suite, &cfg.env);
    let mut reports: Vec<EvalReport> = Vec::new();
    for (i, ck) in a.checkpoints.iter().enumerate() {
        let policy = Policy::from_checkpoint(ck)?;
        let r = evaluate(&policy, &policy.id, &policy.cfg.variant.label(), &suite, &cfg.rollout, threads(a.threads))?;
        print!("{}", r.table());
        write_json(&a.out.join(format!("report_{i:02}_{}.json", r.variant)), &r)?;
        reports.push(r);
    }
    if reports.len() > 1 {
        let refs: Vec<&EvalReport> = reports.iter().collect();
        for task in &reports[0].suite {
            write_json(&a.out.join(format!("paired_{task}.json")), &PairedMatrix::from_reports(&refs, task)?)?;
        }
    }
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, a: &AblateArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    if ds.manifest.action_free {
        return Err(Error::Data(format!("{} is action-free; ablation trains on demonstrations", a.data.display())));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    echo_config(&a.out, cfg)?;
    let variants = if a.variants.is_empty() {
        ablation_variants()
    } else {
        a.variants.iter().map(|l| parse_variant(l)).collect::<Result<_>>()?
    };
    let labels: Vec<String> = variants.iter().map(|v| v.label()).collect();
    let train_seeds: Vec<u64> = (0..a.seeds).map(|k| cfg.train.seed + k).collect();
    let suite = suite_for(a.suite, &ds.manifest.config);
    let mut reports = Vec::new();
    for v in &variants {
        let model = cfg.model.clone().with_variant(*v);
        let mut per_seed = Vec::new();
        for &seed in &train_seeds {
            let train = crate::training::TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let dir = a.out.join(v.label()).join(format!("seed_{seed}"));
            log::info!("ablation: training {} with seed {seed}", v.label());
            let te = train_and_evaluate(&model, &train, &ds.episodes, None, &dir, &suite, &cfg.rollout, threads(a.threads))?;
            per_seed.push(te.report);
        }
        reports.push(per_seed);
    }
    let summary = AblationSummary::from_reports(&labels, &train_seeds, &reports)?;
    let table = summary.table();
    print!("{table}");
    std::fs::write(a.out.join("ablation.txt"), &table).map_err(|e| Error::io(a.out.join("ablation.txt"), e))?;
    write_json(&a.out.join("ablation.json"), &summary)
}

fn cmd_imagine(cfg: &RunConfig, a: &ImagineArgs) -> Result<()> {
    let policy = Policy::from_checkpoint(&a.checkpoint)?;
    echo_config(&a.out, cfg)?;
    for i in 0..a.scenes {
        let ep = expert_episode(&cfg.env, derive_seed(cfg.data.seed, &[stream::EPISODE, i]))?;
        let t = a.at_step.min(ep.len());
        let prev = &ep.observations[t.saturating_sub(1)];
        let cur = &ep.observations[t];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.data.seed, &[stream::SAMPLER, i]));
        let im = imagine(prev, cur, &policy, &cfg.rollout, &mut rng)?;
        for p in write_overlays(&a.out, &format!("scene{i:02}"), &im)? {
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let preset = match a.preset {
        PresetArg::Desk => ModelConfig::desk(),
        PresetArg::Reference => ModelConfig::reference(),
        PresetArg::Tiny => ModelConfig::tiny(),
    };
    print!("{}", inspect_checkpoint(&a.checkpoint, &preset)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn gen_data_flags_resolve_through_the_config() {
        let cli = Cli::parse_from(["trackwam", "gen-data", "--out", "x", "--task", "pick-place", "--occlusion", "--episodes", "3"]);
        let Command::GenData(a) = &cli.command else { panic!() };
        let cfg = RunConfig::resolve(None, &gen_data_sets(a)).unwrap();
        assert_eq!(cfg.env.task, TaskKind::PickPlace);
        assert!(cfg.env.occlusion_heavy && cfg.env.distractor);
        assert_eq!(cfg.data.episodes, 3);
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Data("x".into())), 3);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 4);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), 1);
    }
}
