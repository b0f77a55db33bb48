//! Receding-horizon inference with a trained denoiser, closed-loop
//! evaluation in the sandbox, and imagined futures.

mod eval;
mod imagine;
mod rollout;

pub use eval::{evaluate, evaluation_seeds, wilson_interval, EvalReport, PairedMatrix, SuiteTask, TaskResult};
pub use imagine::{imagine, write_overlays, Imagination};
pub use rollout::{rollout, ChunkSource, ExpertOracle, RolloutResult};

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::grad::Graph;
use crate::model::{
    decode_action, forward, load_checkpoint, prepare_condition, tokens_to_obs, tokens_to_tracks,
    visibility_logit_indices, ActionStats, ForwardInputs, ModelConfig, ParamStore, LATENT_BOUND,
};
use crate::scheduler::{ddim_timestep_subset, make_schedule, ModalityTimesteps, Schedule};
use crate::simenv::Image;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    /// DDIM steps per plan.
    pub inference_steps: usize,
    /// Actions executed from each chunk before replanning.
    pub prefix: usize,
    /// Episode step limit; `None` uses the environment's limit.
    pub max_steps: Option<usize>,
    /// Rollouts per suite task.
    pub episodes: usize,
    /// Base of the paired evaluation seed list.
    pub seed: u64,
    /// Clamp each modality's clean estimate to the range its encoding can
    /// produce at every DDIM step.
    pub clip_sample: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            inference_steps: 10,
            prefix: 8,
            max_steps: None,
            episodes: 20,
            seed: 1000,
            clip_sample: true,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self, chunk: usize) -> Result<()> {
        if self.inference_steps == 0 {
            return Err(Error::Config("rollout.inference_steps: must be at least 1".into()));
        }
        if self.prefix == 0 || self.prefix > chunk {
            return Err(Error::Config(format!("rollout.prefix: {} must lie in 1..={chunk}", self.prefix)));
        }
        if self.episodes == 0 {
            return Err(Error::Config("rollout.episodes: must be positive".into()));
        }
        Ok(())
    }
}

/// A trained denoiser ready for sampling.
#[derive(Debug, Clone)]
pub struct Policy {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
    pub stats: ActionStats,
    pub sched: Schedule,
    /// Checkpoint path or another identifier for reports.
    pub id: String,
}

impl Policy {
    pub fn from_checkpoint(dir: &Path) -> Result<Self> {
        let ck = load_checkpoint(dir)?;
        let sched = make_schedule(ck.manifest.num_train_steps)?;
        Ok(Self {
            cfg: ck.manifest.model,
            params: ck.params,
            stats: ck.manifest.action_stats,
            sched,
            id: dir.display().to_string(),
        })
    }
}

/// Final clean estimates of one joint sampling chain.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    /// `[K]` actions in environment units.
    pub actions: Vec<[f64; 3]>,
    /// `[F, g, g, ch]` future latents, if the variant has obs tokens.
    pub obs: Option<Vec<f32>>,
    /// `[2, H_pp, H_g, W_g]` normalized track grid.
    pub tracks: Option<Vec<f32>>,
    /// `[H_p, N]` logits from the final denoising step.
    pub vis_logits: Option<Vec<f32>>,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) as f32)
        .collect()
}

/// Runs the DDIM subset jointly over every modality from unit Gaussian
/// noise. The only randomness is the initial draw from `rng`.
pub fn sample_joint<R: Rng + ?Sized>(
    policy: &Policy,
    o_prev: &Image,
    o_t: &Image,
    rc: &RolloutConfig,
    rng: &mut R,
) -> Result<JointSample> {
    let cfg = &policy.cfg;
    let v = cfg.variant;
    if policy.stats.dim() != cfg.action_dim {
        return Err(Error::Config(format!(
            "action statistics have {} dims, model.action_dim is {}",
            policy.stats.dim(),
            cfg.action_dim
        )));
    }
    let cond = prepare_condition::<f32>(o_prev, o_t, cfg.resolution)?;
    let mut xa = gaussian(rng, cfg.action_state_len());
    let mut xo = if v.has_obs() { gaussian(rng, cfg.obs_state_len()) } else { Vec::new() };
    let mut xp = if v.has_track() { gaussian(rng, cfg.track_state_len()) } else { Vec::new() };
    let subset = ddim_timestep_subset(policy.sched.num_train_steps(), rc.inference_steps)?;
    let mut vis = None;
    for (i, &tau) in subset.iter().enumerate() {
        let prev = subset.get(i + 1).copied();
        let mut g = Graph::<f32>::new();
        let p = policy.params.bind(&mut g, false);
        let taus = [ModalityTimesteps::uniform(tau)];
        let out = forward(
            &mut g,
            &p,
            cfg,
            &ForwardInputs {
                batch: 1,
                cond: &cond,
                actions: &xa,
                obs: &xo,
                tracks: &xp,
                taus: &taus,
                schedule: &policy.sched,
            },
        )?;
        let clip = |b: f64| rc.clip_sample.then_some(b);
        xa = policy.sched.ddim_step_clipped(&xa, g.value(out.eps_action).data(), tau, prev, clip(1.0))?;
        if let Some(e) = out.eps_obs {
            let eps = tokens_to_obs(cfg, g.value(e).data(), 1);
            xo = policy.sched.ddim_step_clipped(&xo, &eps, tau, prev, clip(LATENT_BOUND))?;
        }
        if let Some(e) = out.eps_track {
            let eps = tokens_to_tracks(cfg, g.value(e).data(), 1);
            xp = policy.sched.ddim_step_clipped(&xp, &eps, tau, prev, clip(1.0))?;
        }
        if prev.is_none() {
            vis = out.vis_logits.map(|l| {
                let d = g.value(l).data();
                visibility_logit_indices(cfg, 1).into_iter().map(|i| d[i]).collect()
            });
        }
    }
    if xa.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("sampled action chunk is not finite".into()));
    }
    Ok(JointSample {
        actions: decode_action(&xa, &policy.stats, cfg.chunk)?,
        obs: v.has_obs().then_some(xo),
        tracks: v.has_track().then_some(xp),
        vis_logits: vis,
    })
}

/// Action chunk `[K, 3]` for the observation pair; only the action branch
/// is decoded.
pub fn generate_chunk<R: Rng + ?Sized>(
    o_prev: &Image,
    o_t: &Image,
    policy: &Policy,
    rollout_cfg: &RolloutConfig,
    rng: &mut R,
) -> Result<Vec<[f64; 3]>> {
    Ok(sample_joint(policy, o_prev, o_t, rollout_cfg, rng)?.actions)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{VariantConfig, VariantMode};
    use crate::simenv::{render, reset, EnvConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn untrained(cfg: ModelConfig) -> Policy {
        let params = ParamStore::<f32>::init(&cfg, 0);
        Policy {
            params,
            stats: ActionStats {
                min: vec![-0.05, -0.05, 0.0],
                max: vec![0.05, 0.05, 1.0],
            },
            sched: make_schedule(100).unwrap(),
            id: "untrained".into(),
            cfg,
        }
    }

    fn frames() -> (Image, Image) {
        let s = reset(&EnvConfig::push(), 4).unwrap();
        let img = render(&s, 32);
        (img.clone(), img)
    }

    #[test]
    fn chunks_are_deterministic_and_shaped() {
        let policy = untrained(ModelConfig::desk());
        let (a, b) = frames();
        let rc = RolloutConfig::default();
        let c1 = generate_chunk(&a, &b, &policy, &rc, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c2 = generate_chunk(&a, &b, &policy, &rc, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(c1.len(), 8);
        assert!(c1.iter().flatten().all(|x| x.is_finite()));
        let c3 = generate_chunk(&a, &b, &policy, &rc, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(c1, c3);
    }

    #[test]
    fn track_only_variant_still_plans() {
        let cfg = ModelConfig::desk().with_variant(VariantConfig::new(VariantMode::TrackOnly, true));
        let policy = untrained(cfg);
        let (a, b) = frames();
        let rc = RolloutConfig { inference_steps: 3, ..RolloutConfig::default() };
        let s = sample_joint(&policy, &a, &b, &rc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.actions.len(), 8);
        assert!(s.obs.is_none());
        assert_eq!(s.vis_logits.unwrap().len(), 8 * 25);
    }

    #[test]
    fn rollout_config_bounds() {
        assert!(RolloutConfig::default().validate(8).is_ok());
        let rc = RolloutConfig {
            prefix: 9,
            ..RolloutConfig::default()
        };
        assert!(rc.validate(8).unwrap_err().to_string().contains("rollout.prefix"));
    }
}
