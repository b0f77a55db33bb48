//! Procedural 2-D tabletop sandbox: physics, rendering, a scripted expert,
//! analytic point tracks and the on-disk dataset format.

pub mod dataset;
pub mod expert;
pub mod render;
pub mod tracks;
pub mod world;

pub use dataset::{generate_dataset, load_dataset, Dataset, DatasetManifest, EpisodeEntry};
pub use expert::{expert_episode, scripted_expert};
pub use render::{render, Entity, Image};
pub use tracks::{ground_truth_tracks, TrackTargets};
pub use world::{is_success, reset, step, Action, EnvConfig, TaskKind, WorldState};

/// One rollout: `T + 1` frames and states, `T` actions (none when the
/// episode is action-free).
#[derive(Debug, Clone)]
pub struct Episode {
    pub observations: Vec<Image>,
    pub actions: Vec<Action>,
    pub states: Vec<WorldState>,
    pub task: TaskKind,
    pub seed: u64,
    pub success: bool,
    pub action_free: bool,
}

impl Episode {
    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.states.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Action that leaves the world unchanged: no motion, grip kept as is.
    pub fn hold_action(state: &WorldState) -> Action {
        Action::new(0.0, 0.0, if state.grip_closed { 1.0 } else { 0.0 })
    }

    /// Extends the episode to at least `len` transitions by simulating hold
    /// actions, so fixed-length windows can cover its final frames.
    pub fn padded(&self, len: usize) -> Episode {
        let mut ep = self.clone();
        let resolution = ep.observations[0].width;
        while ep.len() < len {
            let last = ep.states.last().unwrap();
            let a = Self::hold_action(last);
            let next = step(last, a);
            if !ep.action_free {
                ep.actions.push(a);
            }
            ep.observations.push(render(&next, resolution));
            ep.states.push(next);
        }
        ep
    }
}
