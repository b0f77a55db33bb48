use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::seed::{derive_seed, stream};
use crate::simenv::{is_success, render, reset, scripted_expert, step, Action, EnvConfig, Image, TaskKind, WorldState};
use crate::{Error, Result};

use super::{generate_chunk, Policy, RolloutConfig};

/// Anything that proposes an action chunk from the current observations.
pub trait ChunkSource: Sync {
    fn chunk_len(&self) -> usize;

    /// Plans from `(o_prev, o_t)`; `seed` keys this plan's randomness.
    fn plan(&self, state: &WorldState, o_prev: &Image, o_t: &Image, rc: &RolloutConfig, seed: u64) -> Result<Vec<Action>>;

    /// Image resolution the source expects, if any.
    fn resolution(&self) -> Option<usize> {
        None
    }
}

impl ChunkSource for Policy {
    fn chunk_len(&self) -> usize {
        self.cfg.chunk
    }

    fn plan(&self, _: &WorldState, o_prev: &Image, o_t: &Image, rc: &RolloutConfig, seed: u64) -> Result<Vec<Action>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(generate_chunk(o_prev, o_t, self, rc, &mut rng)?
            .into_iter()
            .map(|a| Action::new(a[0], a[1], a[2]))
            .collect())
    }

    fn resolution(&self) -> Option<usize> {
        Some(self.cfg.resolution)
    }
}

/// Reads the true state and simulates the scripted expert `chunk` steps
/// ahead; calibrates the harness independently of learning.
#[derive(Debug, Clone, Copy)]
pub struct ExpertOracle {
    pub task: TaskKind,
    pub chunk: usize,
}

impl ChunkSource for ExpertOracle {
    fn chunk_len(&self) -> usize {
        self.chunk
    }

    fn plan(&self, state: &WorldState, _: &Image, _: &Image, _: &RolloutConfig, _: u64) -> Result<Vec<Action>> {
        let mut s = state.clone();
        Ok((0..self.chunk)
            .map(|_| {
                let a = scripted_expert(&s, self.task);
                s = step(&s, a);
                a
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub seed: u64,
    pub success: bool,
    /// Environment steps taken.
    pub steps: usize,
    /// Step index at which each plan was made.
    pub replans: Vec<usize>,
    pub states: Vec<WorldState>,
    pub actions: Vec<Action>,
}

/// Receding-horizon control: plan a chunk, execute its first `rc.prefix`
/// actions, replan from the new observations. Success is checked after
/// every step. At `t = 0` the previous frame duplicates the first one.
pub fn rollout(env: &EnvConfig, source: &dyn ChunkSource, rc: &RolloutConfig, seed: u64) -> Result<RolloutResult> {
    rc.validate(source.chunk_len())?;
    if let Some(r) = source.resolution() {
        if r != env.resolution {
            return Err(Error::Config(format!(
                "env.resolution: {} but the model expects {r}px",
                env.resolution
            )));
        }
    }
    let max = rc.max_steps.unwrap_or(env.max_episode_len);
    let mut s = reset(env, seed)?;
    let mut cur = render(&s, env.resolution);
    let mut prev = cur.clone();
    let mut out = RolloutResult {
        seed,
        success: is_success(&s, env.task),
        steps: 0,
        replans: Vec::new(),
        states: vec![s.clone()],
        actions: Vec::new(),
    };
    while !out.success && out.steps < max {
        let plan_seed = derive_seed(seed, &[stream::SAMPLER, out.replans.len() as u64]);
        log::debug!("seed {seed}: replanning at step {}", out.steps);
        out.replans.push(out.steps);
        let chunk = source.plan(&s, &prev, &cur, rc, plan_seed).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {}: {m}", out.steps)),
            other => Error::Env {
                step: out.steps,
                message: other.to_string(),
            },
        })?;
        if chunk.len() < rc.prefix {
            return Err(Error::Env {
                step: out.steps,
                message: format!("planner returned {} actions, prefix is {}", chunk.len(), rc.prefix),
            });
        }
        for &a in &chunk[..rc.prefix] {
            s = step(&s, a);
            out.steps += 1;
            out.actions.push(a.sanitized(s.params.max_delta));
            out.states.push(s.clone());
            prev = std::mem::replace(&mut cur, render(&s, env.resolution));
            if is_success(&s, env.task) {
                out.success = true;
                break;
            }
            if out.steps >= max {
                break;
            }
        }
    }
    Ok(out)
}
