//! Loss assembly, the optimizer, and the training loop.

mod batch;
mod gradcheck;
mod loss;
mod optim;
mod run;

pub use batch::{ExamplePool, TrainBatch};
pub use gradcheck::{gradient_check, perturbed_params, random_train_batch, GradCheckReport, GRAD_CHECK_TOLERANCE};
pub use loss::{loss_demo, loss_video, modality_loss, visibility_loss, LossBreakdown, LossWeights, NoiseDraw, TermStat};
pub use optim::{clip_global_norm, learning_rate, AdamW, LrSchedule};
pub use run::{latest_checkpoint, schedule_of, train, train_episodes, CurveRow, RunOptions, Stage, TrainJob, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::grad::{Graph, Real};
use crate::model::{is_action_branch, ModelConfig, ParamStore};
use crate::scheduler::Schedule;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    /// Peak step size.
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub warmup_steps: u64,
    /// `None` picks constant for pretraining and cosine for finetuning.
    pub schedule: Option<LrSchedule>,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Diffusion training steps `T`.
    pub diffusion_steps: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-scale optimizer settings.
    pub fn reference() -> Self {
        Self {
            batch_size: 72,
            steps: 10_000,
            lr: 1e-4,
            weight_decay: 1e-6,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            warmup_steps: 1000,
            schedule: None,
            grad_clip: Some(1.0),
            seed: 0,
            checkpoint_every: 1000,
            log_every: 100,
            diffusion_steps: 100,
            weights: LossWeights::default(),
        }
    }

    /// Sandbox-scale settings: smaller batch, shorter warmup and a larger
    /// step size so runs converge within minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            steps: 2000,
            lr: 1e-3,
            warmup_steps: 100,
            checkpoint_every: 500,
            log_every: 50,
            ..Self::reference()
        }
    }

    pub fn schedule_for(&self, stage: Stage) -> LrSchedule {
        self.schedule.unwrap_or(match stage {
            Stage::Pretrain => LrSchedule::Constant,
            Stage::Finetune => LrSchedule::Cosine,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train.{m}")));
        if self.batch_size == 0 {
            return bad("batch_size: must be positive");
        }
        if self.steps == 0 {
            return bad("steps: must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr: must be a positive finite number");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay: must be nonnegative");
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("betas: each must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps: must be positive");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip: must be positive when set");
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("checkpoint_every/log_every: must be positive");
        }
        if self.diffusion_steps < 2 {
            return bad("diffusion_steps: need at least 2");
        }
        self.weights.validate()
    }
}

/// Loss breakdown and per-parameter gradients (aligned with the store).
#[derive(Debug, Clone)]
pub struct StepGrads<F> {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Vec<F>>,
}

/// Picks `L_D` or `L_V` from the batch kind and differentiates it. On
/// video batches the action branch is bound as constants, so its gradients
/// are exactly zero.
pub fn loss_and_grads<F: Real>(
    params: &ParamStore<F>,
    cfg: &ModelConfig,
    sched: &Schedule,
    batch: &TrainBatch<F>,
    weights: &LossWeights,
    noise: &NoiseDraw<F>,
) -> Result<StepGrads<F>> {
    let mut g = Graph::new();
    let video = batch.is_action_free();
    let p = if video {
        params.bind_with(&mut g, |n| !is_action_branch(n))
    } else {
        params.bind(&mut g, true)
    };
    let (loss, breakdown) = if video {
        loss_video(&mut g, &p, cfg, sched, batch, weights, noise)?
    } else {
        loss_demo(&mut g, &p, cfg, sched, batch, weights, noise)?
    };
    let mut gr = g.backward(loss);
    let grads = p
        .vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| gr.take(v).unwrap_or_else(|| vec![F::zero(); t.len()]))
        .collect();
    Ok(StepGrads { breakdown, grads })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::scheduler::make_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn analytic_gradients_match_central_differences() {
        let r = gradient_check(&ModelConfig::tiny(), 0, 3).unwrap();
        assert!(r.passes(), "{}", r.worst_summary());
        assert_eq!(r.per_tensor.len(), ParamStore::<f64>::init(&ModelConfig::tiny(), 0).names().len());
    }

    #[test]
    fn video_batches_leave_the_action_branch_untouched() {
        let cfg = ModelConfig::tiny();
        let sched = make_schedule(100).unwrap();
        let params = perturbed_params(&cfg, 4);
        let batch = random_train_batch(&cfg, 2, 5).strip_actions();
        let noise = NoiseDraw::sample(&cfg, &sched, 2, &mut ChaCha8Rng::seed_from_u64(6));
        let sg = loss_and_grads(&params, &cfg, &sched, &batch, &LossWeights::default(), &noise).unwrap();
        assert!(sg.breakdown.action.is_none());
        for (n, g) in params.names().iter().zip(&sg.grads) {
            let norm: f64 = g.iter().map(|x| x * x).sum();
            if is_action_branch(n) {
                assert_eq!(norm, 0.0, "{n}");
            } else if n.starts_with("head.") || n.starts_with("embed.obs") {
                assert!(norm > 0.0, "{n}");
            }
        }
    }

    #[test]
    fn latent_only_never_touches_track_parameters() {
        use crate::model::{VariantConfig, VariantMode};
        let cfg = ModelConfig::tiny().with_variant(VariantConfig::new(VariantMode::LatentOnly, true));
        let sched = make_schedule(100).unwrap();
        let params = perturbed_params(&cfg, 7);
        assert!(params.names().iter().all(|n| !n.contains("track") && !n.contains("vis")));
        let batch = random_train_batch(&cfg, 2, 8);
        let noise = NoiseDraw::sample(&cfg, &sched, 2, &mut ChaCha8Rng::seed_from_u64(9));
        let sg = loss_and_grads(&params, &cfg, &sched, &batch, &LossWeights::default(), &noise).unwrap();
        assert!(sg.breakdown.track.is_none() && sg.breakdown.vis.is_none());
        // a joint-shaped batch is inconsistent with this variant
        let joint = random_train_batch(&ModelConfig::tiny(), 2, 8);
        let noise = NoiseDraw::sample(&ModelConfig::tiny(), &sched, 2, &mut ChaCha8Rng::seed_from_u64(9));
        assert!(loss_and_grads(&params, &cfg, &sched, &joint, &LossWeights::default(), &noise).is_err());
    }

    #[test]
    fn fixed_batch_loss_is_bit_reproducible() {
        let cfg = ModelConfig::tiny();
        let sched = make_schedule(100).unwrap();
        let run = || {
            let params = ParamStore::<f32>::init(&cfg, 11);
            let b = random_train_batch(&cfg, 2, 12);
            let batch = TrainBatch {
                batch: 2,
                cond: b.cond.iter().map(|&x| x as f32).collect(),
                actions: b.actions.map(|a| a.iter().map(|&x| x as f32).collect()),
                obs: b.obs.iter().map(|&x| x as f32).collect(),
                tracks: b.tracks.iter().map(|&x| x as f32).collect(),
                visibility: b.visibility.iter().map(|&x| x as f32).collect(),
            };
            let noise = NoiseDraw::<f32>::sample(&cfg, &sched, 2, &mut ChaCha8Rng::seed_from_u64(13));
            let sg = loss_and_grads(&params, &cfg, &sched, &batch, &LossWeights::default(), &noise).unwrap();
            (sg.breakdown.total.to_bits(), sg.grads)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation_names_the_field() {
        let mut c = TrainConfig::desk();
        c.betas = [0.9, 1.0];
        assert!(c.validate().unwrap_err().to_string().contains("train.betas"));
        TrainConfig::reference().validate().unwrap();
        assert_eq!(TrainConfig::reference().lr, 1e-4);
    }
}
