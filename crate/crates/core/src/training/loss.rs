use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::grad::{bce_term, Graph, Real, Var};
use crate::model::{
    forward, obs_to_tokens, tracks_to_tokens, visibility_logit_indices, BoundParams, ForwardInputs, ModelConfig,
};
use crate::scheduler::{ModalityTimesteps, Schedule};
use crate::{Error, Result};

use super::batch::TrainBatch;

/// Per-term weights of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub action: f64,
    pub obs: f64,
    pub track: f64,
    pub vis: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            action: 1.0,
            obs: 1.0,
            track: 1.0,
            vis: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("action", self.action), ("obs", self.obs), ("track", self.track), ("vis", self.vis)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("train.weights.{name}: {w} is not a finite nonnegative weight")));
            }
        }
        Ok(())
    }
}

/// Timesteps and Gaussian noise for one batch. In video batches the action
/// noise is used directly as the placeholder action state.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw<F> {
    pub taus: Vec<ModalityTimesteps>,
    pub action: Vec<F>,
    pub obs: Vec<F>,
    pub track: Vec<F>,
}

impl<F: Real> NoiseDraw<F> {
    /// Independent per-element `(τ_a, τ_o, τ_p)` triples and unit noise.
    pub fn sample<R: Rng + ?Sized>(cfg: &ModelConfig, sched: &Schedule, batch: usize, rng: &mut R) -> Self {
        let taus = (0..batch).map(|_| sched.sample_timesteps(rng)).collect();
        let mut normal = |n: usize| -> Vec<F> {
            (0..n)
                .map(|_| F::of(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)))
                .collect()
        };
        let action = normal(batch * cfg.action_state_len());
        let obs = normal(if cfg.variant.has_obs() { batch * cfg.obs_state_len() } else { 0 });
        let track = normal(if cfg.variant.has_track() { batch * cfg.track_state_len() } else { 0 });
        Self {
            taus,
            action,
            obs,
            track,
        }
    }
}

/// Value of one loss term, as the per-element mean and the plain sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermStat {
    pub mean: f64,
    pub sum: f64,
}

/// Logged terms; a term is `None` when it is not part of the graph.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub action: Option<TermStat>,
    pub obs: Option<TermStat>,
    pub track: Option<TermStat>,
    pub vis: Option<TermStat>,
}

impl LossBreakdown {
    /// `Σ λ_m · term_m` recomputed from the logged means.
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        [(self.action, w.action), (self.obs, w.obs), (self.track, w.track), (self.vis, w.vis)]
            .iter()
            .filter_map(|(t, l)| t.map(|t| t.mean * l))
            .sum()
    }
}

/// Mean squared error over all elements.
pub fn modality_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "modality loss over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    let s: f64 = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len() as f64)
}

/// Mean binary cross entropy over `[H_p, N]` logits in the stable
/// `max(z, 0) - z·y + ln(1 + e^{-|z|})` form.
pub fn visibility_loss(logits: &[f64], targets: &[f64], horizon: usize, points: usize) -> Result<f64> {
    let n = horizon * points;
    if logits.len() != n || targets.len() != n || n == 0 {
        return Err(Error::Shape(format!(
            "visibility loss expects [{horizon}, {points}], got {} logits and {} targets",
            logits.len(),
            targets.len()
        )));
    }
    Ok(logits.iter().zip(targets).map(|(&z, &y)| bce_term(z, y)).sum::<f64>() / n as f64)
}

fn stat<F: Real>(g: &Graph<F>, v: Var, count: usize) -> TermStat {
    let mean = g.value(v).item().to_f64().unwrap_or(f64::NAN);
    TermStat {
        mean,
        sum: mean * count as f64,
    }
}

fn check_batch<F: Real>(cfg: &ModelConfig, batch: &TrainBatch<F>, noise: &NoiseDraw<F>) -> Result<()> {
    let v = cfg.variant;
    let b = batch.batch;
    let bad = |m: String| Err(Error::Data(format!("variant {} / batch mismatch: {m}", v.label())));
    if v.has_obs() != !batch.obs.is_empty() {
        return bad(format!("obs targets {}", batch.obs.len()));
    }
    if v.has_track() != !batch.tracks.is_empty() {
        return bad(format!("track targets {}", batch.tracks.len()));
    }
    if v.has_track() && batch.visibility.len() != b * cfg.track.horizon * cfg.track.num_points() {
        return bad(format!("visibility targets {}", batch.visibility.len()));
    }
    if noise.taus.len() != b
        || noise.action.len() != b * cfg.action_state_len()
        || noise.obs.len() != batch.obs.len()
        || noise.track.len() != batch.tracks.len()
    {
        return bad("noise draw does not match the batch".into());
    }
    Ok(())
}

fn noised<F: Real>(
    sched: &Schedule,
    x0: &[F],
    eps: &[F],
    taus: &[ModalityTimesteps],
    pick: impl Fn(&ModalityTimesteps) -> usize,
) -> Result<Vec<F>> {
    if x0.is_empty() {
        return Ok(Vec::new());
    }
    let n = x0.len() / taus.len();
    let mut out = Vec::with_capacity(x0.len());
    for (i, t) in taus.iter().enumerate() {
        out.extend(sched.add_noise(&x0[i * n..(i + 1) * n], &eps[i * n..(i + 1) * n], pick(t))?);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn joint_loss<F: Real>(
    g: &mut Graph<F>,
    p: &BoundParams,
    cfg: &ModelConfig,
    sched: &Schedule,
    batch: &TrainBatch<F>,
    weights: &LossWeights,
    noise: &NoiseDraw<F>,
    actions: Option<&[F]>,
) -> Result<(Var, LossBreakdown)> {
    check_batch(cfg, batch, noise)?;
    weights.validate()?;
    let b = batch.batch;
    let v = cfg.variant;
    let x_a = match actions {
        Some(a0) => noised(sched, a0, &noise.action, &noise.taus, |t| t.tau_a)?,
        None => noise.action.clone(),
    };
    let x_o = noised(sched, &batch.obs, &noise.obs, &noise.taus, |t| t.tau_o)?;
    let x_p = noised(sched, &batch.tracks, &noise.track, &noise.taus, |t| t.tau_p)?;
    let out = forward(
        g,
        p,
        cfg,
        &ForwardInputs {
            batch: b,
            cond: &batch.cond,
            actions: &x_a,
            obs: &x_o,
            tracks: &x_p,
            taus: &noise.taus,
            schedule: sched,
        },
    )?;

    let mut terms = Vec::new();
    let mut br = LossBreakdown::default();
    if actions.is_some() {
        let l = g.mse(out.eps_action, &noise.action);
        br.action = Some(stat(g, l, noise.action.len()));
        terms.push((l, F::of(weights.action)));
    }
    if let Some(eo) = out.eps_obs {
        let l = g.mse(eo, &obs_to_tokens(cfg, &noise.obs, b));
        br.obs = Some(stat(g, l, noise.obs.len()));
        terms.push((l, F::of(weights.obs)));
    }
    if let Some(ep) = out.eps_track {
        let l = g.mse(ep, &tracks_to_tokens(cfg, &noise.track, b));
        br.track = Some(stat(g, l, noise.track.len()));
        terms.push((l, F::of(weights.track)));
    }
    if let Some(vl) = out.vis_logits {
        debug_assert!(v.has_visibility());
        let idx = visibility_logit_indices(cfg, b);
        let n = idx.len();
        let z = g.gather(vl, idx, &[n]);
        let l = g.bce_with_logits(z, &batch.visibility);
        br.vis = Some(stat(g, l, n));
        terms.push((l, F::of(weights.vis)));
    }
    let total = g.weighted_sum(&terms);
    br.total = g.value(total).item().to_f64().unwrap_or(f64::NAN);
    Ok((total, br))
}

/// `L_D = λ_a L_a + λ_o L_o + λ_p L_p + λ_vis L_vis` on an action-labelled
/// batch. Terms of branches the variant lacks are not built.
pub fn loss_demo<F: Real>(
    g: &mut Graph<F>,
    p: &BoundParams,
    cfg: &ModelConfig,
    sched: &Schedule,
    batch: &TrainBatch<F>,
    weights: &LossWeights,
    noise: &NoiseDraw<F>,
) -> Result<(Var, LossBreakdown)> {
    let Some(a0) = batch.actions.as_deref() else {
        return Err(Error::Data("demonstration loss needs an action-labelled batch".into()));
    };
    if a0.len() != batch.batch * cfg.action_state_len() {
        return Err(Error::Data(format!("batch has {} action values", a0.len())));
    }
    joint_loss(g, p, cfg, sched, batch, weights, noise, Some(a0))
}

/// `L_V = λ_o L_o + λ_p L_p + λ_vis L_vis` on an action-free batch. The
/// action tokens hold `noise.action` as placeholders at `τ_a` and carry no
/// loss; bind the action branch as constants so it receives no update.
pub fn loss_video<F: Real>(
    g: &mut Graph<F>,
    p: &BoundParams,
    cfg: &ModelConfig,
    sched: &Schedule,
    batch: &TrainBatch<F>,
    weights: &LossWeights,
    noise: &NoiseDraw<F>,
) -> Result<(Var, LossBreakdown)> {
    if !batch.is_action_free() {
        return Err(Error::Data("video loss was given an action-labelled batch".into()));
    }
    joint_loss(g, p, cfg, sched, batch, weights, noise, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{is_action_branch, ModelConfig, ParamStore};
    use crate::scheduler::make_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_bce(z: f64, y: f64) -> f64 {
        let s = 1.0 / (1.0 + (-z).exp());
        -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
    }

    #[test]
    fn visibility_loss_edge_cases_and_oracle() {
        let y = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let z: Vec<f64> = y.iter().map(|&v| if v > 0.5 { 30.0 } else { -30.0 }).collect();
        assert!(visibility_loss(&z, &y, 2, 3).unwrap() < 1e-9);
        assert_eq!(visibility_loss(&[0.0; 6], &y, 2, 3).unwrap(), std::f64::consts::LN_2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z: Vec<f64> = (0..60).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let y: Vec<f64> = (0..60).map(|_| rng.gen_range(0..2) as f64).collect();
        let naive = z.iter().zip(&y).map(|(&a, &b)| naive_bce(a, b)).sum::<f64>() / 60.0;
        assert!((visibility_loss(&z, &y, 6, 10).unwrap() - naive).abs() < 1e-8);
        assert!(visibility_loss(&z, &y, 5, 10).is_err());
    }

    #[test]
    fn modality_loss_edge_cases_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..50).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..50).map(|_| rng.gen_range(-2.0..2.0)).collect();
        assert_eq!(modality_loss(&a, &a).unwrap(), 0.0);
        let shifted: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
        assert!((modality_loss(&shifted, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut naive = 0.0;
        for i in 0..50 {
            naive += (a[i] - b[i]).powi(2);
        }
        assert!((modality_loss(&a, &b).unwrap() - naive / 50.0).abs() < 1e-8);
        assert!(modality_loss(&a, &b[..3]).is_err());
    }

    #[test]
    fn zero_model_at_max_noise_has_unit_loss() {
        let sched = make_schedule(100).unwrap();
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut total = 0.0;
        let draws = 10_000;
        for _ in 0..draws {
            let mut d = NoiseDraw::<f64>::sample(&cfg, &sched, 1, &mut rng);
            d.taus[0] = ModalityTimesteps::uniform(99);
            total += modality_loss(&vec![0.0; d.action.len()], &d.action).unwrap();
        }
        assert!((total / draws as f64 - 1.0).abs() < 0.02);
    }

    fn setup() -> (ModelConfig, ParamStore<f64>, TrainBatch<f64>, NoiseDraw<f64>, Schedule) {
        let cfg = ModelConfig::tiny();
        let params = crate::training::perturbed_params(&cfg, 1);
        let batch = crate::training::random_train_batch(&cfg, 2, 2);
        let sched = make_schedule(100).unwrap();
        let noise = NoiseDraw::sample(&cfg, &sched, 2, &mut ChaCha8Rng::seed_from_u64(3));
        (cfg, params, batch, noise, sched)
    }

    #[test]
    fn total_is_the_weighted_sum_of_terms() {
        let (cfg, params, batch, noise, sched) = setup();
        let w = LossWeights {
            action: 1.0,
            obs: 0.5,
            track: 2.0,
            vis: 0.25,
        };
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let (_, br) = loss_demo(&mut g, &p, &cfg, &sched, &batch, &w, &noise).unwrap();
        assert!(br.action.is_some() && br.obs.is_some() && br.track.is_some() && br.vis.is_some());
        assert!((br.total - br.weighted(&w)).abs() < 1e-9);
        assert!(loss_video(&mut g, &p, &cfg, &sched, &batch, &w, &noise).is_err());
    }

    #[test]
    fn video_loss_equals_demo_loss_minus_action_term() {
        let (cfg, params, batch, noise, sched) = setup();
        let w = LossWeights::default();
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let (_, demo) = loss_demo(&mut g, &p, &cfg, &sched, &batch, &w, &noise).unwrap();
        // controlled noise: the placeholder equals the demo's noisy action state
        let mut video_noise = noise.clone();
        video_noise.action = noised(&sched, batch.actions.as_ref().unwrap(), &noise.action, &noise.taus, |t| t.tau_a).unwrap();
        let stripped = batch.clone().strip_actions();
        let mut g = Graph::new();
        let p = params.bind_with(&mut g, |n| !is_action_branch(n));
        let (_, video) = loss_video(&mut g, &p, &cfg, &sched, &stripped, &w, &video_noise).unwrap();
        assert!(video.action.is_none());
        assert!((video.total - (demo.total - demo.action.unwrap().mean)).abs() < 1e-6);
        assert!(loss_demo(&mut g, &p, &cfg, &sched, &stripped, &w, &noise).is_err());
    }

    #[test]
    fn weights_are_validated() {
        let w = LossWeights {
            vis: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().unwrap_err().to_string().contains("train.weights.vis"));
    }
}
