//! Trains a short joint run on push demonstrations, then writes predicted
//! track overlays and decoded future frames for a few fresh scenes.
//!
//! `cargo run --release --example imagine -- [steps]`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trackwam::model::ModelConfig;
use trackwam::policy::{imagine, write_overlays, Policy, RolloutConfig};
use trackwam::simenv::{expert_episode, EnvConfig};
use trackwam::training::{train_episodes, RunOptions, Stage, TrainConfig, TrainJob};

fn main() -> trackwam::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let env = EnvConfig::push();
    let demos = (0..50).map(|s| expert_episode(&env, s)).collect::<trackwam::Result<Vec<_>>>()?;
    let job = TrainJob {
        stage: Stage::Finetune,
        datasets: vec![],
        model: ModelConfig::desk(),
        train: TrainConfig { steps, ..TrainConfig::desk() },
        init: None,
    };
    let dir = std::env::temp_dir().join("trackwam_imagine");
    let _ = std::fs::remove_dir_all(&dir);
    let out = train_episodes(&job, &demos, &dir.join("run"), &RunOptions::default())?;
    let policy = Policy::from_checkpoint(&out.final_checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for scene in 0..3u64 {
        let ep = expert_episode(&env, 10_000 + scene)?;
        let t = 4.min(ep.len());
        let im = imagine(&ep.observations[t.saturating_sub(1)], &ep.observations[t], &policy, &RolloutConfig::default(), &mut rng)?;
        for p in write_overlays(&dir, &format!("scene{scene}"), &im)? {
            println!("{}", p.display());
        }
    }
    Ok(())
}
