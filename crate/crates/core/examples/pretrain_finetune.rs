//! Action-free pretraining on generated video, then finetuning on a handful
//! of demonstrations, compared with finetuning from scratch.
//!
//! `cargo run --release --example pretrain_finetune -- [videos] [demos] [pretrain-steps] [finetune-steps]`

use trackwam::model::ModelConfig;
use trackwam::policy::{evaluate, Policy, RolloutConfig, SuiteTask};
use trackwam::simenv::{generate_dataset, EnvConfig};
use trackwam::training::{train, RunOptions, Stage, TrainConfig, TrainJob};

fn main() -> trackwam::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let arg = |i: usize, d: u64| args.get(i).copied().unwrap_or(d);
    let (videos, demos, pre_steps, ft_steps) = (arg(0, 200), arg(1, 5), arg(2, 2000), arg(3, 1000));
    let env = EnvConfig::push();
    let root = std::env::temp_dir().join("trackwam_pretrain_finetune");
    let _ = std::fs::remove_dir_all(&root);
    generate_dataset(&env, videos as usize, true, 1, &root.join("video"))?;
    generate_dataset(&env, demos as usize, false, 2, &root.join("demos"))?;

    let job = |stage, data: &str, steps, init| TrainJob {
        stage,
        datasets: vec![root.join(data)],
        model: ModelConfig::desk(),
        train: TrainConfig { steps, ..TrainConfig::desk() },
        init,
    };
    let pre = train(&job(Stage::Pretrain, "video", pre_steps, None), &root.join("pretrain"), &RunOptions::default())?;
    let suite = [SuiteTask::new("push", env.clone())];
    for (label, init) in [("scratch", None), ("pretrained", Some(pre.final_checkpoint.clone()))] {
        let ft = train(&job(Stage::Finetune, "demos", ft_steps, init), &root.join(label), &RunOptions::default())?;
        let policy = Policy::from_checkpoint(&ft.final_checkpoint)?;
        let report = evaluate(&policy, &policy.id, label, &suite, &RolloutConfig::default(), 1)?;
        print!("{}", report.table());
    }
    Ok(())
}
