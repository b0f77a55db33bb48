//! Central-difference check of the full demonstration loss gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{loss_and_grads, loss_demo, LossWeights, NoiseDraw, TrainBatch};
use crate::grad::Graph;
use crate::model::{ModelConfig, ParamStore};
use crate::scheduler::make_schedule;
use crate::Result;

/// Largest accepted relative error per tensor.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-3;

/// Initial parameters plus small noise, so zero-initialized modulation
/// paths carry signal.
pub fn perturbed_params(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
    let mut p = ParamStore::<f64>::init(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let d = Normal::new(0.0, 0.1).expect("valid normal");
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += d.sample(&mut rng));
    }
    p
}

/// Uniform random inputs shaped for `cfg`, with binary visibility.
pub fn random_train_batch(cfg: &ModelConfig, b: usize, seed: u64) -> TrainBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let v = cfg.variant;
    let r = cfg.resolution;
    let cond = u(b * r * r * 8);
    let actions = Some(u(b * cfg.action_state_len()));
    let obs = if v.has_obs() { u(b * cfg.obs_state_len()) } else { vec![] };
    let tracks = if v.has_track() { u(b * cfg.track_state_len()) } else { vec![] };
    let visibility = if v.has_track() {
        u(b * cfg.track.horizon * cfg.track.num_points())
            .into_iter()
            .map(|x| if x > 0.0 { 1.0 } else { 0.0 })
            .collect()
    } else {
        vec![]
    };
    TrainBatch {
        batch: b,
        cond,
        actions,
        obs,
        tracks,
        visibility,
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(tensor name, relative error)` over the sampled entries.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_tensor.iter().map(|t| t.1).fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.per_tensor.iter().all(|t| t.1 < GRAD_CHECK_TOLERANCE)
    }

    pub fn worst_summary(&self) -> String {
        match self.per_tensor.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
            Some((n, e)) => format!("worst {n}: {e:.2e} over {} tensors", self.per_tensor.len()),
            None => "no tensors".into(),
        }
    }
}

fn total(params: &ParamStore<f64>, cfg: &ModelConfig, batch: &TrainBatch<f64>, noise: &NoiseDraw<f64>) -> Result<f64> {
    let sched = make_schedule(100)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    Ok(loss_demo(&mut g, &p, cfg, &sched, batch, &LossWeights::default(), noise)?.1.total)
}

/// Compares analytic gradients with central differences (step 1e-5) at
/// `samples` random entries of every parameter tensor, in double precision.
pub fn gradient_check(cfg: &ModelConfig, seed: u64, samples: usize) -> Result<GradCheckReport> {
    let sched = make_schedule(100)?;
    let params = perturbed_params(cfg, seed);
    let batch = random_train_batch(cfg, 2, seed + 1);
    let noise = NoiseDraw::sample(cfg, &sched, 2, &mut ChaCha8Rng::seed_from_u64(seed + 2));
    let sg = loss_and_grads(&params, cfg, &sched, &batch, &LossWeights::default(), &noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let h = 1e-5;
    let mut per_tensor = Vec::new();
    for (i, name) in params.names().iter().enumerate() {
        let len = params.tensors()[i].len();
        let (mut num, mut ana) = (Vec::new(), Vec::new());
        for _ in 0..samples.min(len) {
            let j = rng.gen_range(0..len);
            let mut p = params.clone();
            p.tensors_mut()[i].data_mut()[j] += h;
            let up = total(&p, cfg, &batch, &noise)?;
            p.tensors_mut()[i].data_mut()[j] -= 2.0 * h;
            let down = total(&p, cfg, &batch, &noise)?;
            num.push((up - down) / (2.0 * h));
            ana.push(sg.grads[i][j]);
        }
        let diff = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = num.iter().chain(&ana).map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
        per_tensor.push((name.clone(), diff / scale));
    }
    Ok(GradCheckReport { per_tensor })
}
