//! Short real training runs checking that predicted tracks and visibility
//! behave sensibly on held-out scenes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trackwam::model::ModelConfig;
use trackwam::policy::{imagine, Policy, RolloutConfig};
use trackwam::simenv::{expert_episode, render, reset, step, Action, EnvConfig, Episode};
use trackwam::trackspace::track_window;
use trackwam::training::{train_episodes, RunOptions, Stage, TrainConfig, TrainJob};

fn static_episode(env: &EnvConfig, seed: u64, len: usize) -> Episode {
    let mut states = vec![reset(env, seed).unwrap()];
    for _ in 0..len {
        states.push(step(states.last().unwrap(), Action::ZERO));
    }
    Episode {
        observations: states.iter().map(|s| render(s, env.resolution)).collect(),
        actions: vec![Action::ZERO; len],
        states,
        task: env.task,
        seed,
        success: false,
        action_free: false,
    }
}

fn trained(episodes: &[Episode], steps: u64, dir: &std::path::Path) -> Policy {
    let job = TrainJob {
        stage: Stage::Finetune,
        datasets: vec![],
        model: ModelConfig::desk(),
        train: TrainConfig { steps, ..TrainConfig::desk() },
        init: None,
    };
    let out = train_episodes(&job, episodes, dir, &RunOptions::default()).unwrap();
    Policy::from_checkpoint(&out.final_checkpoint).unwrap()
}

#[test]
fn static_scenes_predict_identity_tracks_and_full_visibility() {
    let env = EnvConfig::push();
    let eps: Vec<Episode> = (0..30).map(|s| static_episode(&env, s, 12)).collect();
    let dir = tempfile::tempdir().unwrap();
    let policy = trained(&eps, 600, dir.path());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut sq, mut n, mut min_vis) = (0.0, 0usize, f64::INFINITY);
    for s in 1000..1005 {
        let ep = static_episode(&env, s, 2);
        let im = imagine(&ep.observations[0], &ep.observations[1], &policy, &RolloutConfig::default(), &mut rng).unwrap();
        let tracks = im.tracks.unwrap();
        let np = im.queries.len();
        for (k, p) in tracks.chunks(2).enumerate() {
            let q = im.queries[k % np];
            sq += (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            n += 1;
        }
        min_vis = im.visibility.unwrap().into_iter().fold(min_vis, f64::min);
    }
    let rms = (sq / n as f64).sqrt();
    assert!(rms < 2.0, "static track RMS {rms:.3} px");
    assert!(min_vis > 0.9, "min static visibility {min_vis:.3}");
}

#[test]
fn hidden_points_get_lower_visibility_than_visible_ones() {
    let env = EnvConfig::occlusion_pick_place();
    let eps: Vec<Episode> = (0..50).map(|s| expert_episode(&env, s).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let policy = trained(&eps, 1500, dir.path());
    let cfg = &policy.cfg.track;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut hid, mut vis) = (Vec::new(), Vec::new());
    for s in 5000..5010 {
        let ep = expert_episode(&env, s).unwrap().padded(cfg.horizon + 12);
        for t in [2, 6, 10] {
            let w = track_window(&ep, t, cfg, env.resolution).unwrap();
            let im = imagine(&ep.observations[t - 1], &ep.observations[t], &policy, &RolloutConfig::default(), &mut rng).unwrap();
            for (p, &v) in im.visibility.unwrap().iter().zip(&w.visible) {
                if v == 1 { vis.push(*p) } else { hid.push(*p) }
            }
        }
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    assert!(!hid.is_empty(), "no hidden points in the held-out set");
    assert!(mean(&hid) < mean(&vis), "hidden {:.3} vs visible {:.3}", mean(&hid), mean(&vis));
}
