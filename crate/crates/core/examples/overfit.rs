//! Trains the desk joint model on 8 push demonstrations and reports how far
//! the total noise-prediction loss falls.

use std::time::Instant;

use trackwam::model::ModelConfig;
use trackwam::simenv::{expert_episode, EnvConfig};
use trackwam::training::{train_episodes, RunOptions, Stage, TrainConfig, TrainJob};

fn main() -> trackwam::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let episodes = (0..8)
        .map(|s| expert_episode(&EnvConfig::push(), s))
        .collect::<trackwam::Result<Vec<_>>>()?;
    let job = TrainJob {
        stage: Stage::Finetune,
        datasets: vec![],
        model: ModelConfig::desk(),
        train: TrainConfig {
            steps,
            ..TrainConfig::desk()
        },
        init: None,
    };
    let dir = std::env::temp_dir().join("trackwam_overfit");
    let _ = std::fs::remove_dir_all(&dir);
    let t0 = Instant::now();
    let out = train_episodes(&job, &episodes, &dir, &RunOptions::default())?;
    let secs = t0.elapsed().as_secs_f64();
    let mean = |rows: &[trackwam::training::CurveRow]| rows.iter().map(|r| r.loss.total).sum::<f64>() / rows.len() as f64;
    let head = mean(&out.curve[..50.min(out.curve.len())]);
    let tail = mean(&out.curve[out.curve.len().saturating_sub(50)..]);
    println!("steps {steps}  {:.3} s/step  first-50 mean {head:.4}  last-50 mean {tail:.4}  ratio {:.3}", secs / steps as f64, tail / head);
    Ok(())
}
