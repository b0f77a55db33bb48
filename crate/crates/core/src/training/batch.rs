use rand::Rng;

use crate::grad::Real;
use crate::model::{encode_obs_latent, prepare_condition, ActionStats, ModelConfig};
use crate::simenv::Episode;
use crate::trackspace::{track_window, tracks_to_grid};
use crate::{Error, Result};

/// Clean training targets for a batch, in the layouts `model::forward`
/// expects.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch<F> {
    pub batch: usize,
    /// `[B, R, R, 8]`.
    pub cond: Vec<F>,
    /// `[B, K, A]` normalized to `[-1, 1]`; `None` for video batches.
    pub actions: Option<Vec<F>>,
    /// `[B, F, g, g, ch]`; empty without obs tokens.
    pub obs: Vec<F>,
    /// `[B, 2, H_pp, H_g, W_g]`; empty without track tokens.
    pub tracks: Vec<F>,
    /// `[B, H_p, N]` in `{0, 1}`; empty without track tokens.
    pub visibility: Vec<F>,
}

impl<F: Real> TrainBatch<F> {
    pub fn is_action_free(&self) -> bool {
        self.actions.is_none()
    }

    pub fn strip_actions(mut self) -> Self {
        self.actions = None;
        self
    }
}

/// Every `(episode, anchor)` pair of a set of episodes, padded so each
/// anchor `t ∈ [0, T - 1]` has a full action chunk, future frames and
/// track window.
#[derive(Debug, Clone)]
pub struct ExamplePool {
    episodes: Vec<Episode>,
    anchors: Vec<(usize, usize)>,
    action_free: bool,
}

impl ExamplePool {
    pub fn new(episodes: &[Episode], cfg: &ModelConfig) -> Result<Self> {
        let Some(first) = episodes.first() else {
            return Err(Error::Data("no episodes to train on".into()));
        };
        let action_free = first.action_free;
        if episodes.iter().any(|e| e.action_free != action_free) {
            return Err(Error::Data("cannot mix action-free and action-labelled episodes in one pool".into()));
        }
        let res = first.observations[0].width;
        if res != cfg.resolution {
            return Err(Error::Config(format!(
                "model.resolution: {} but the episodes are rendered at {res}px",
                cfg.resolution
            )));
        }
        let extra = cfg.chunk.max(cfg.future_offset).max(cfg.track.horizon);
        let mut padded = Vec::with_capacity(episodes.len());
        let mut anchors = Vec::new();
        for (i, ep) in episodes.iter().enumerate() {
            if ep.is_empty() {
                continue;
            }
            let t = ep.len();
            anchors.extend((0..t).map(|a| (i, a)));
            padded.push(ep.padded(t - 1 + extra));
        }
        if anchors.is_empty() {
            return Err(Error::Data("every episode is empty".into()));
        }
        Ok(Self {
            episodes: padded,
            anchors,
            action_free,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn action_free(&self) -> bool {
        self.action_free
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    /// Uniform draw with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        (0..batch).map(|_| rng.gen_range(0..self.len())).collect()
    }

    /// Builds the batch for the given pool indices. `stats` is required
    /// unless the pool is action-free.
    pub fn assemble<F: Real>(
        &self,
        indices: &[usize],
        cfg: &ModelConfig,
        stats: Option<&ActionStats>,
    ) -> Result<TrainBatch<F>> {
        let v = cfg.variant;
        let res = cfg.resolution;
        let mut out = TrainBatch {
            batch: indices.len(),
            cond: Vec::new(),
            actions: (!self.action_free).then(Vec::new),
            obs: Vec::new(),
            tracks: Vec::new(),
            visibility: Vec::new(),
        };
        for &i in indices {
            let (e, t) = self.anchors[i];
            let ep = &self.episodes[e];
            let prev = &ep.observations[t.saturating_sub(1)];
            out.cond.extend(prepare_condition::<F>(prev, &ep.observations[t], res)?);
            if let Some(acts) = out.actions.as_mut() {
                let stats = stats.ok_or_else(|| Error::Data("action statistics missing".into()))?;
                let raw: Vec<f64> = ep.actions[t..t + cfg.chunk].iter().flat_map(|a| a.to_array()).collect();
                acts.extend(stats.normalize(&raw).into_iter().map(F::of));
            }
            if v.has_obs() {
                let first = t + cfg.future_offset + 1 - cfg.future_frames;
                for f in first..=t + cfg.future_offset {
                    out.obs.extend(encode_obs_latent::<F>(&ep.observations[f], cfg.latent_factor)?);
                }
            }
            if v.has_track() {
                let w = track_window(ep, t, &cfg.track, res)?;
                out.tracks.extend(tracks_to_grid(&w, &cfg.track, res)?.into_iter().map(F::of));
                out.visibility.extend(w.visible.iter().map(|&x| F::of(x as f64)));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::{expert_episode, EnvConfig};

    #[test]
    fn pool_covers_every_anchor_with_full_windows() {
        let cfg = ModelConfig::desk();
        let eps: Vec<Episode> = (0..2).map(|s| expert_episode(&EnvConfig::push(), s).unwrap()).collect();
        let pool = ExamplePool::new(&eps, &cfg).unwrap();
        assert_eq!(pool.len(), eps[0].len() + eps[1].len());
        let stats = ActionStats::from_episodes(&eps).unwrap();
        let all: Vec<usize> = (0..pool.len()).collect();
        let b = pool.assemble::<f32>(&all, &cfg, Some(&stats)).unwrap();
        let n = all.len();
        assert_eq!(b.cond.len(), n * 32 * 32 * 8);
        assert_eq!(b.actions.as_ref().unwrap().len(), n * cfg.action_state_len());
        assert_eq!(b.obs.len(), n * cfg.obs_state_len());
        assert_eq!(b.tracks.len(), n * cfg.track_state_len());
        assert_eq!(b.visibility.len(), n * cfg.track.horizon * cfg.track.num_points());
        assert!(b.actions.unwrap().iter().all(|x| (-1.0 - 1e-6..=1.0 + 1e-6).contains(&(*x as f64))));
    }

    #[test]
    fn first_anchor_duplicates_the_initial_frame() {
        let cfg = ModelConfig::desk();
        let ep = expert_episode(&EnvConfig::push(), 3).unwrap();
        let pool = ExamplePool::new(std::slice::from_ref(&ep), &cfg).unwrap();
        let b = pool.assemble::<f64>(&[0], &cfg, Some(&ActionStats::identity(3))).unwrap();
        for px in b.cond.chunks(8) {
            assert_eq!(px[0..3], px[3..6]);
        }
    }

    #[test]
    fn mixed_pools_are_rejected() {
        let cfg = ModelConfig::desk();
        let a = expert_episode(&EnvConfig::push(), 0).unwrap();
        let mut b = expert_episode(&EnvConfig::push(), 1).unwrap();
        b.action_free = true;
        b.actions.clear();
        assert!(ExamplePool::new(&[a, b], &cfg).is_err());
        assert!(ExamplePool::new(&[], &cfg).is_err());
    }
}
