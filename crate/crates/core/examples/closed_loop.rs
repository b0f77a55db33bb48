//! Trains a desk model on scripted demonstrations and measures its
//! closed-loop success rate.
//!
//! `cargo run --release --example closed_loop -- [push|occlusion] [demos] [steps] [train-seed] [variant]`
//! where variant is one of joint, latent_only, track_only, joint_novis.

use std::time::Instant;

use trackwam::model::{ModelConfig, VariantConfig, VariantMode};
use trackwam::policy::{evaluate, Policy, RolloutConfig, SuiteTask};
use trackwam::seed::{derive_seed, stream};
use trackwam::simenv::{expert_episode, EnvConfig};
use trackwam::training::{train_episodes, RunOptions, Stage, TrainConfig, TrainJob};

fn main() -> trackwam::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let env = match arg(0, "push").as_str() {
        "occlusion" => EnvConfig::occlusion_pick_place(),
        _ => EnvConfig::push(),
    };
    let demos: u64 = arg(1, "50").parse().unwrap_or(50);
    let steps: u64 = arg(2, "2000").parse().unwrap_or(2000);
    let seed: u64 = arg(3, "0").parse().unwrap_or(0);
    let variant = match arg(4, "joint").as_str() {
        "latent_only" => VariantConfig::new(VariantMode::LatentOnly, true),
        "track_only" => VariantConfig::new(VariantMode::TrackOnly, true),
        "joint_novis" => VariantConfig::new(VariantMode::Joint, false),
        _ => VariantConfig::new(VariantMode::Joint, true),
    };

    let episodes = (0..demos)
        .map(|i| expert_episode(&env, derive_seed(seed, &[stream::EPISODE, i])))
        .collect::<trackwam::Result<Vec<_>>>()?;
    let job = TrainJob {
        stage: Stage::Finetune,
        datasets: vec![],
        model: ModelConfig::desk().with_variant(variant),
        train: TrainConfig {
            steps,
            seed,
            ..TrainConfig::desk()
        },
        init: None,
    };
    let dir = std::env::temp_dir().join(format!("trackwam_closed_loop_{}_{seed}", variant.label()));
    let _ = std::fs::remove_dir_all(&dir);
    let t0 = Instant::now();
    let out = train_episodes(&job, &episodes, &dir, &RunOptions::default())?;
    let train_secs = t0.elapsed().as_secs_f64();
    let policy = Policy::from_checkpoint(&out.final_checkpoint)?;
    let t1 = Instant::now();
    let suite = [SuiteTask::new("task", env)];
    let report = evaluate(&policy, &policy.id, &variant.label(), &suite, &RolloutConfig::default(), 1)?;
    print!("{}", report.table());
    println!("train {train_secs:.0}s  eval {:.0}s", t1.elapsed().as_secs_f64());
    Ok(())
}
