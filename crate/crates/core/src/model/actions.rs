use serde::{Deserialize, Serialize};

use crate::grad::Real;
use crate::simenv::Episode;
use crate::{Error, Result};

/// Smallest per-dimension range treated as non-degenerate.
const MIN_SPAN: f64 = 1e-6;

/// Per-dimension min/max of the training actions; actions are mapped
/// affinely onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ActionStats {
    pub fn from_episodes<'a>(episodes: impl IntoIterator<Item = &'a Episode>) -> Result<Self> {
        let mut min = vec![f64::INFINITY; 3];
        let mut max = vec![f64::NEG_INFINITY; 3];
        let mut any = false;
        for ep in episodes {
            for a in &ep.actions {
                any = true;
                for (j, v) in a.to_array().into_iter().enumerate() {
                    min[j] = min[j].min(v);
                    max[j] = max[j].max(v);
                }
            }
        }
        if !any {
            return Err(Error::Data("no action-labelled transitions to compute action statistics".into()));
        }
        Ok(Self { min, max })
    }

    /// Stats that leave `[-1, 1]` data unchanged.
    pub fn identity(dim: usize) -> Self {
        Self {
            min: vec![-1.0; dim],
            max: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    fn span(&self, j: usize) -> f64 {
        (self.max[j] - self.min[j]).max(MIN_SPAN)
    }

    /// Normalizes a flat `[.., dim]` array.
    pub fn normalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = i % self.dim();
                2.0 * (v - self.min[j]) / self.span(j) - 1.0
            })
            .collect()
    }

    pub fn denormalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = i % self.dim();
                (v + 1.0) / 2.0 * self.span(j) + self.min[j]
            })
            .collect()
    }
}

/// Final clean estimate of the action state (`[K, A]`, normalized) to
/// environment units.
pub fn decode_action<F: Real>(x0: &[F], stats: &ActionStats, chunk: usize) -> Result<Vec<[f64; 3]>> {
    if stats.dim() != 3 || x0.len() != chunk * 3 {
        return Err(Error::Shape(format!(
            "action estimate has {} values for a {chunk}x{} chunk",
            x0.len(),
            stats.dim()
        )));
    }
    let v: Vec<f64> = x0.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
    Ok(stats
        .denormalize(&v)
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect())
}
