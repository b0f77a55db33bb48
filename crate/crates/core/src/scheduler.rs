//! Squared-cosine noise schedule, forward noising and deterministic DDIM.
//!
//! Index `tau` runs over `0..num_train_steps`; `tau = 0` is the least noised
//! step and `alpha_bars[tau] = f(tau + 1) / f(0)` before clipping, where
//! `f(t) = cos^2(((t / T + s) / (1 + s)) * pi / 2)`. Betas come from
//! consecutive ratios and are clipped at 0.999, so the last step never
//! reaches exactly zero signal. All coefficients stay in `f64`.

use rand::Rng;

use crate::grad::Real;
use crate::{Error, Result};

/// Offset `s` of the squared-cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip for every beta.
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    num_train_steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Per-modality diffusion timesteps for one training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalityTimesteps {
    pub tau_a: usize,
    pub tau_o: usize,
    pub tau_p: usize,
}

impl ModalityTimesteps {
    /// The same timestep for every modality.
    pub fn uniform(tau: usize) -> Self {
        Self {
            tau_a: tau,
            tau_o: tau,
            tau_p: tau,
        }
    }
}

fn cosine_f(t: f64, total: f64) -> f64 {
    let x = ((t / total + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

/// Builds the squared-cosine schedule with `num_train_steps` steps.
pub fn make_schedule(num_train_steps: usize) -> Result<Schedule> {
    if num_train_steps < 2 {
        return Err(Error::Config(format!(
            "num_train_steps must be at least 2, got {num_train_steps}"
        )));
    }
    let total = num_train_steps as f64;
    let betas: Vec<f64> = (0..num_train_steps)
        .map(|i| {
            let t1 = cosine_f(i as f64, total);
            let t2 = cosine_f((i + 1) as f64, total);
            (1.0 - t2 / t1).min(MAX_BETA)
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(Schedule {
        num_train_steps,
        betas,
        alphas,
        alpha_bars,
    })
}

impl Schedule {
    pub fn num_train_steps(&self) -> usize {
        self.num_train_steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, tau: usize) -> f64 {
        self.alpha_bars[tau]
    }

    fn check_tau(&self, tau: usize) -> Result<()> {
        if tau >= self.num_train_steps {
            return Err(Error::Config(format!(
                "timestep {tau} out of range 0..{}",
                self.num_train_steps
            )));
        }
        Ok(())
    }

    /// `sqrt(abar) * x0 + sqrt(1 - abar) * eps`.
    pub fn add_noise<F: Real>(&self, x0: &[F], eps: &[F], tau: usize) -> Result<Vec<F>> {
        self.check_tau(tau)?;
        if x0.len() != eps.len() {
            return Err(Error::Shape(format!(
                "add_noise: signal has {} elements, noise has {}",
                x0.len(),
                eps.len()
            )));
        }
        let ab = self.alpha_bars[tau];
        let (cs, cn) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
        Ok(x0.iter().zip(eps).map(|(&x, &e)| cs * x + cn * e).collect())
    }

    /// Clean-sample estimate implied by a noise prediction at `tau`.
    pub fn predict_x0<F: Real>(&self, x_tau: &[F], eps_hat: &[F], tau: usize) -> Result<Vec<F>> {
        self.check_tau(tau)?;
        if x_tau.len() != eps_hat.len() {
            return Err(Error::Shape("predict_x0: shape mismatch".into()));
        }
        let ab = self.alpha_bars[tau];
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x_tau
            .iter()
            .zip(eps_hat)
            .map(|(&x, &e)| F::of((x.to_f64().unwrap() - sn * e.to_f64().unwrap()) / sa))
            .collect())
    }

    /// One deterministic (eta = 0) DDIM update from `tau` to `tau_prev`.
    /// `tau_prev = None` targets the clean sample (`abar = 1`), which is how
    /// the final step of a chain lands on `x0`.
    pub fn ddim_step<F: Real>(
        &self,
        x_tau: &[F],
        eps_hat: &[F],
        tau: usize,
        tau_prev: Option<usize>,
    ) -> Result<Vec<F>> {
        self.ddim_step_clipped(x_tau, eps_hat, tau, tau_prev, None)
    }

    /// [`Schedule::ddim_step`] with the clean-sample estimate clamped to
    /// `[-bound, bound]` before re-noising. The noise direction keeps the
    /// model's estimate.
    pub fn ddim_step_clipped<F: Real>(
        &self,
        x_tau: &[F],
        eps_hat: &[F],
        tau: usize,
        tau_prev: Option<usize>,
        bound: Option<f64>,
    ) -> Result<Vec<F>> {
        self.check_tau(tau)?;
        if let Some(p) = tau_prev {
            if p >= tau {
                return Err(Error::Config(format!(
                    "ddim_step: previous timestep {p} must be below {tau}"
                )));
            }
        }
        if x_tau.len() != eps_hat.len() {
            return Err(Error::Shape(format!(
                "ddim_step: sample has {} elements, noise estimate has {}",
                x_tau.len(),
                eps_hat.len()
            )));
        }
        let ab = self.alpha_bars[tau];
        let ab_prev = tau_prev.map_or(1.0, |p| self.alpha_bars[p]);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        Ok(x_tau
            .iter()
            .zip(eps_hat)
            .map(|(&x, &e)| {
                let (x, e) = (x.to_f64().unwrap(), e.to_f64().unwrap());
                let mut x0 = (x - sn * e) / sa;
                if let Some(b) = bound {
                    x0 = x0.clamp(-b, b);
                }
                F::of(pa * x0 + pn * e)
            })
            .collect())
    }

    /// Three independent uniform draws over `0..T`.
    pub fn sample_timesteps<R: Rng + ?Sized>(&self, rng: &mut R) -> ModalityTimesteps {
        let t = self.num_train_steps;
        ModalityTimesteps {
            tau_a: rng.gen_range(0..t),
            tau_o: rng.gen_range(0..t),
            tau_p: rng.gen_range(0..t),
        }
    }
}

/// Evenly strided, strictly decreasing inference timesteps from `T - 1`
/// down to `0`. A single step uses only the largest index.
pub fn ddim_timestep_subset(num_train_steps: usize, num_inference_steps: usize) -> Result<Vec<usize>> {
    if num_inference_steps == 0 || num_inference_steps > num_train_steps {
        return Err(Error::Config(format!(
            "inference steps must be in 1..={num_train_steps}, got {num_inference_steps}"
        )));
    }
    if num_inference_steps == 1 {
        return Ok(vec![num_train_steps - 1]);
    }
    let last = (num_train_steps - 1) as f64;
    let n = (num_inference_steps - 1) as f64;
    Ok((0..num_inference_steps)
        .map(|i| (last * (1.0 - i as f64 / n)).round() as usize)
        .collect())
}

/// Runs a full DDIM chain over `subset`, calling `predict_eps(x, tau)` at
/// every step and finishing on the clean estimate.
pub fn ddim_sample<F: Real>(
    sched: &Schedule,
    subset: &[usize],
    x_init: Vec<F>,
    mut predict_eps: impl FnMut(&[F], usize) -> Result<Vec<F>>,
) -> Result<Vec<F>> {
    let mut x = x_init;
    for (i, &tau) in subset.iter().enumerate() {
        let eps = predict_eps(&x, tau)?;
        x = sched.ddim_step(&x, &eps, tau, subset.get(i + 1).copied())?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn rejects_short_schedules() {
        assert!(make_schedule(1).is_err());
        assert!(make_schedule(0).is_err());
        assert!(make_schedule(2).is_ok());
    }

    #[test]
    fn schedule_invariants_hold() {
        for t in [2, 10, 100, 1000] {
            let s = make_schedule(t).unwrap();
            let ab = s.alpha_bars();
            assert!(ab.windows(2).all(|w| w[1] < w[0]), "T={t} not decreasing");
            assert!(ab.iter().all(|&a| a > 0.0 && a <= 1.0));
            assert!(s.betas().iter().all(|&b| b > 0.0 && b <= MAX_BETA));
            let mut log_sum = 0.0;
            for (tau, a) in s.alphas().iter().enumerate() {
                log_sum += a.ln();
                assert!((log_sum.exp() - ab[tau]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn final_beta_is_clipped() {
        let s = make_schedule(100).unwrap();
        assert_eq!(s.betas()[99], MAX_BETA);
        assert!(s.alpha_bar(99) < s.alpha_bar(0));
    }

    #[test]
    fn add_noise_edge_cases() {
        let s = make_schedule(100).unwrap();
        let x0 = vec![0.5, -2.0, 3.0];
        let zero = vec![0.0; 3];
        let out = s.add_noise(&x0, &zero, 37).unwrap();
        let ab = s.alpha_bar(37);
        for (o, x) in out.iter().zip(&x0) {
            assert_eq!(*o, ab.sqrt() * x);
        }
        let eps = vec![1.0, -1.0, 0.25];
        let out = s.add_noise(&zero, &eps, 37).unwrap();
        for (o, e) in out.iter().zip(&eps) {
            assert_eq!(*o, (1.0 - ab).sqrt() * e);
        }
        assert!(s.add_noise(&x0, &eps[..2], 3).is_err());
        assert!(s.add_noise(&x0, &eps, 100).is_err());
    }

    #[test]
    fn add_noise_matches_duplicate_formula() {
        let s = make_schedule(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = gaussian(&mut rng, 64);
        let eps = gaussian(&mut rng, 64);
        let out = s.add_noise(&x0, &eps, 50).unwrap();
        // independent route: recompute abar from the closed form
        let f = |t: f64| ((t / 100.0 + 0.008) / 1.008 * std::f64::consts::PI / 2.0).cos().powi(2);
        let ab = f(51.0) / f(0.0);
        for i in 0..64 {
            let expect = x0[i] * ab.powf(0.5) + eps[i] * (1.0 - ab).powf(0.5);
            assert!((out[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_variance_matches_schedule() {
        // 10^4 draws of a 64-element noise vector around a fixed signal,
        // pooled over elements against the known mean sqrt(abar) * x0.
        let s = make_schedule(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = gaussian(&mut rng, 64);
        for tau in [0, 25, 50, 99] {
            let mean: Vec<f64> = x0.iter().map(|x| s.alpha_bar(tau).sqrt() * x).collect();
            let draws = 10_000;
            let mut acc = 0.0;
            for _ in 0..draws {
                let eps = gaussian(&mut rng, 64);
                let out = s.add_noise(&x0, &eps, tau).unwrap();
                acc += out.iter().zip(&mean).map(|(o, m)| (o - m).powi(2)).sum::<f64>();
            }
            let var = acc / (draws * 64) as f64;
            let expect = 1.0 - s.alpha_bar(tau);
            assert!((var / expect - 1.0).abs() < 0.02, "tau {tau}: {var} vs {expect}");
        }
    }

    #[test]
    fn ddim_step_exact_inversion() {
        let s = make_schedule(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = gaussian(&mut rng, 32);
        let eps = gaussian(&mut rng, 32);
        for tau in [1, 40, 99] {
            let xt = s.add_noise(&x0, &eps, tau).unwrap();
            let back = s.ddim_step(&xt, &eps, tau, None).unwrap();
            for (a, b) in back.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-10);
            }
            // stepping to index 0 lands on the index-0 marginal
            let to0 = s.ddim_step(&xt, &eps, tau, Some(0)).unwrap();
            let expect = s.add_noise(&x0, &eps, 0).unwrap();
            for (a, b) in to0.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ddim_step_noiseless_propagation() {
        let s = make_schedule(100).unwrap();
        let x0 = [1.0, -0.5, 2.0];
        let xt: Vec<f64> = x0.iter().map(|x| s.alpha_bar(60).sqrt() * x).collect();
        let out = s.ddim_step(&xt, &[0.0; 3], 60, Some(20)).unwrap();
        for (o, x) in out.iter().zip(&x0) {
            assert!((o - s.alpha_bar(20).sqrt() * x).abs() < 1e-12);
        }
    }

    #[test]
    fn clipped_step_bounds_the_clean_estimate() {
        let s = make_schedule(100).unwrap();
        let x0 = [3.0, -0.5, -7.0];
        let eps = [0.2, -1.0, 0.4];
        let xt = s.add_noise(&x0, &eps, 70).unwrap();
        let out = s.ddim_step_clipped(&xt, &eps, 70, None, Some(1.0)).unwrap();
        for (o, e) in out.iter().zip([1.0f64, -0.5, -1.0]) {
            assert!((o - e).abs() < 1e-12);
        }
        let loose = s.ddim_step_clipped(&xt, &eps, 70, Some(30), Some(10.0)).unwrap();
        assert_eq!(loose, s.ddim_step(&xt, &eps, 70, Some(30)).unwrap());
    }

    #[test]
    fn ddim_step_rejects_bad_order() {
        let s = make_schedule(100).unwrap();
        assert!(s.ddim_step(&[0.0], &[0.0], 10, Some(10)).is_err());
        assert!(s.ddim_step(&[0.0], &[0.0], 10, Some(11)).is_err());
        assert!(s.ddim_step(&[0.0], &[0.0, 1.0], 10, Some(1)).is_err());
    }

    #[test]
    fn timestep_subsets() {
        let sub = ddim_timestep_subset(100, 10).unwrap();
        assert_eq!(sub, vec![99, 88, 77, 66, 55, 44, 33, 22, 11, 0]);
        assert_eq!(ddim_timestep_subset(7, 7).unwrap(), vec![6, 5, 4, 3, 2, 1, 0]);
        assert_eq!(ddim_timestep_subset(100, 1).unwrap(), vec![99]);
        assert!(ddim_timestep_subset(100, 0).is_err());
        assert!(ddim_timestep_subset(100, 101).is_err());
        let odd = ddim_timestep_subset(100, 7).unwrap();
        assert!(odd.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(*odd.last().unwrap(), 0);
    }

    #[test]
    fn sampled_timesteps_are_uniform_and_independent() {
        let s = make_schedule(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let draws: Vec<ModalityTimesteps> = (0..n).map(|_| s.sample_timesteps(&mut rng)).collect();
        let sigma = ((100.0f64 * 100.0 - 1.0) / 12.0 / n as f64).sqrt();
        for pick in [|m: &ModalityTimesteps| m.tau_a, |m: &ModalityTimesteps| m.tau_o, |m: &ModalityTimesteps| m.tau_p] {
            let mean = draws.iter().map(|m| pick(m) as f64).sum::<f64>() / n as f64;
            assert!((mean - 49.5).abs() < 3.0 * sigma, "mean {mean}");
        }
        let (ma, mp) = (49.5, 49.5);
        let cov: f64 = draws.iter().map(|m| (m.tau_a as f64 - ma) * (m.tau_p as f64 - mp)).sum::<f64>();
        let va: f64 = draws.iter().map(|m| (m.tau_a as f64 - ma).powi(2)).sum();
        let vp: f64 = draws.iter().map(|m| (m.tau_p as f64 - mp).powi(2)).sum();
        assert!((cov / (va * vp).sqrt()).abs() < 0.02);

        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            assert_eq!(s.sample_timesteps(&mut r1), s.sample_timesteps(&mut r2));
        }
    }

    #[test]
    fn ddim_chain_is_bit_deterministic() {
        let s = make_schedule(100).unwrap();
        let sub = ddim_timestep_subset(100, 10).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let x = gaussian(&mut rng, 16);
            ddim_sample(&s, &sub, x, |x, tau| Ok(x.iter().map(|v| v * 0.3 + tau as f64 * 1e-3).collect())).unwrap()
        };
        assert_eq!(run(), run());
    }
}
