use serde::{Deserialize, Serialize};

use crate::grad::Real;
use crate::model::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Step size for the `step`-th update (1-based): linear warmup to `peak`
/// over `warmup` updates, then constant or cosine decay to zero at `total`.
pub fn learning_rate(schedule: LrSchedule, peak: f64, warmup: u64, total: u64, step: u64) -> f64 {
    if warmup > 0 && step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    match schedule {
        LrSchedule::Constant => peak,
        LrSchedule::Cosine => {
            let span = total.saturating_sub(warmup).max(1) as f64;
            let p = ((step - warmup) as f64 / span).min(1.0);
            0.5 * peak * (1.0 + (std::f64::consts::PI * p).cos())
        }
    }
}

/// Scales `grads` in place to global L2 norm at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [Vec<F>], max_norm: Option<f64>) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| {
            let x = g.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if let Some(m) = max_norm {
        if norm > m {
            let s = F::of(m / norm);
            grads.iter_mut().flatten().for_each(|g| *g = *g * s);
        }
    }
    norm
}

/// Adam with decoupled weight decay. Moments are kept per parameter tensor
/// in the parameter precision.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(params: &ParamStore<F>, betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![F::zero(); t.len()]).collect();
        Self {
            beta1: betas[0],
            beta2: betas[1],
            eps,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update; `grads` is aligned with the store order.
    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &[Vec<F>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (ob1, ob2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        let step_size = F::of(lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(self.eps);
        let decay = F::of(1.0 - lr * self.weight_decay);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let g = &grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + ob1 * g[j];
                v[j] = b2 * v[j] + ob2 * g[j] * g[j];
                let denom = (v[j] * inv_bc2).sqrt() + eps;
                *w = *w * decay - step_size * m[j] / denom;
            }
        }
        Ok(())
    }

    /// Moments as named buffers (`m.<param>`, `v.<param>`) for checkpoints.
    pub fn export(&self, params: &ParamStore<F>) -> Vec<(String, Vec<f32>)> {
        let conv = |x: &Vec<F>| x.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        let mut out = Vec::with_capacity(2 * params.len() + 1);
        for (i, n) in params.names().iter().enumerate() {
            out.push((format!("m.{n}"), conv(&self.m[i])));
            out.push((format!("v.{n}"), conv(&self.v[i])));
        }
        out
    }

    /// Restores moments written by [`AdamW::export`].
    pub fn import(&mut self, params: &ParamStore<F>, buffers: &[(String, Vec<f32>)], step: u64) -> Result<()> {
        let find = |key: String, len: usize| -> Result<Vec<F>> {
            let (_, v) = buffers
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {key}")))?;
            if v.len() != len {
                return Err(Error::Checkpoint(format!("optimizer buffer {key} has {} values, expected {len}", v.len())));
            }
            Ok(v.iter().map(|&x| F::of(x as f64)).collect())
        };
        for (i, (n, t)) in params.iter().enumerate() {
            self.m[i] = find(format!("m.{n}"), t.len())?;
            self.v[i] = find(format!("v.{n}"), t.len())?;
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tensor;

    #[test]
    fn warmup_reaches_half_peak_at_step_500() {
        let lr = learning_rate(LrSchedule::Constant, 1e-4, 1000, 100_000, 500);
        assert_eq!(lr, 0.5e-4);
        assert_eq!(learning_rate(LrSchedule::Constant, 1e-4, 1000, 100_000, 5000), 1e-4);
        let c = |s| learning_rate(LrSchedule::Cosine, 1.0, 10, 110, s);
        assert_eq!(c(10), 1.0);
        assert!((c(60) - 0.5).abs() < 1e-12);
        assert!(c(110).abs() < 1e-12);
        assert!(c(30) > c(31));
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![vec![3.0f64, 0.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, Some(1.0)), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut h = vec![vec![0.1f64]];
        clip_global_norm(&mut h, Some(1.0));
        assert_eq!(h[0][0], 0.1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = ParamStore::from_named(vec![("w".into(), Tensor::new(&[2], vec![1.0f64, -2.0]))]);
        let mut opt = AdamW::new(&p, [0.9, 0.999], 1e-8, 0.1);
        opt.update(&mut p, &[vec![0.5, -0.25]], 0.01).unwrap();
        // bias-corrected first step moves each weight by lr·sign(g) (up to eps)
        let w = p.get("w").unwrap().data();
        let expect0 = 1.0 * (1.0 - 0.01 * 0.1) - 0.01 * 0.5 / (0.5 + 1e-8);
        let expect1 = -2.0 * (1.0 - 0.01 * 0.1) + 0.01 * 0.25 / (0.25 + 1e-8);
        assert!((w[0] - expect0).abs() < 1e-12 && (w[1] - expect1).abs() < 1e-12);
    }

    #[test]
    fn export_import_restores_state() {
        let mut p = ParamStore::from_named(vec![("w".into(), Tensor::new(&[3], vec![0.5f32, 1.0, 2.0]))]);
        let mut a = AdamW::new(&p, [0.9, 0.999], 1e-8, 0.0);
        a.update(&mut p, &[vec![0.1, 0.2, -0.3]], 1e-3).unwrap();
        let mut b = AdamW::new(&p, [0.9, 0.999], 1e-8, 0.0);
        b.import(&p, &a.export(&p), a.step).unwrap();
        assert_eq!(a, b);
        assert!(b.import(&p, &[], 1).is_err());
    }
}
