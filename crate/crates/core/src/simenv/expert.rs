//! Waypoint controller used to produce demonstrations.

use super::world::{dist, is_success, step, Action, EnvConfig, TaskKind, WorldState};
use super::{render, Episode};
use crate::Result;

/// Extra standoff behind the object before a push starts.
const PRE_PUSH_GAP: f64 = 0.03;
/// Lateral tolerance (fraction of contact distance) to count as aligned.
const ALIGN_TOL: f64 = 0.3;
/// Extra clearance kept around the object while circling it.
const CLEARANCE: f64 = 0.04;
const RELEASE_TOL: f64 = 0.02;
/// Largest angle (radians) advanced per step while orbiting.
const ORBIT_STEP: f64 = 0.5;

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm(a: [f64; 2]) -> f64 {
    dot(a, a).sqrt()
}

/// Proportional step toward `target`, clipped per axis to `max_delta`.
fn toward(from: [f64; 2], target: [f64; 2], max_delta: f64, grip: f64) -> Action {
    let d = sub(target, from);
    Action::new(d[0], d[1], grip).sanitized(max_delta)
}

/// Distance from `c` to the segment `a..b`.
fn segment_dist(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 {
        (dot(sub(c, a), ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist([a[0] + ab[0] * t, a[1] + ab[1] * t], c)
}

fn push_action(s: &WorldState) -> Action {
    let p = s.params;
    let obj = &s.objects[0];
    let to_goal = sub(s.goal.center, obj.center);
    let d = norm(to_goal);
    if d < 1e-9 {
        return Action::ZERO;
    }
    let u = [to_goal[0] / d, to_goal[1] / d];
    let perp = [-u[1], u[0]];
    let contact = p.gripper_radius + obj.radius;
    let rel = sub(s.gripper, obj.center);
    let along = dot(rel, u);
    let lateral = dot(rel, perp);
    if along < -0.5 * contact && lateral.abs() < ALIGN_TOL * contact {
        // aligned behind the object: drive through it along the goal line,
        // slowing down near the goal
        let depth = p.max_delta.min(d);
        let target = [
            obj.center[0] - u[0] * (contact - depth),
            obj.center[1] - u[1] * (contact - depth),
        ];
        return toward(s.gripper, target, p.max_delta, 0.0);
    }
    let pre = [
        obj.center[0] - u[0] * (contact + PRE_PUSH_GAP),
        obj.center[1] - u[1] * (contact + PRE_PUSH_GAP),
    ];
    let target = if segment_dist(s.gripper, pre, obj.center) < contact + 0.5 * CLEARANCE {
        // orbit the object toward the pre-push angle in bounded arc steps
        let r = contact + CLEARANCE;
        let cur = rel[1].atan2(rel[0]);
        let goal_angle = (-u[1]).atan2(-u[0]);
        let mut delta = goal_angle - cur;
        delta = (delta + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
        let ang = cur + delta.clamp(-ORBIT_STEP, ORBIT_STEP);
        [obj.center[0] + r * ang.cos(), obj.center[1] + r * ang.sin()]
    } else {
        pre
    };
    toward(s.gripper, target, p.max_delta, 0.0)
}

fn pick_place_action(s: &WorldState) -> Action {
    let p = s.params;
    match s.held_object {
        Some(0) => {
            let d = dist(s.gripper, s.goal.center);
            if d < RELEASE_TOL {
                Action::new(0.0, 0.0, 0.0)
            } else {
                toward(s.gripper, s.goal.center, p.max_delta, 1.0)
            }
        }
        Some(_) => Action::new(0.0, 0.0, 0.0),
        None => {
            let obj = s.objects[0].center;
            if dist(s.gripper, obj) <= 0.5 * p.grasp_radius {
                if s.grip_closed {
                    // closed on nothing: open first
                    Action::new(0.0, 0.0, 0.0)
                } else {
                    Action::new(0.0, 0.0, 1.0)
                }
            } else {
                toward(s.gripper, obj, p.max_delta, 0.0)
            }
        }
    }
}

/// Deterministic scripted action for `task` in `state`.
pub fn scripted_expert(state: &WorldState, task: TaskKind) -> Action {
    if is_success(state, task) {
        return Action::ZERO;
    }
    match task {
        TaskKind::PushToGoal => push_action(state),
        TaskKind::PickPlace => pick_place_action(state),
    }
}

/// Rolls the expert from `reset(config, seed)` until success or the
/// episode limit.
pub fn expert_episode(config: &EnvConfig, seed: u64) -> Result<Episode> {
    let mut s = super::world::reset(config, seed)?;
    let mut states = vec![s.clone()];
    let mut observations = vec![render::render(&s, config.resolution)];
    let mut actions = Vec::new();
    while !is_success(&s, config.task) && actions.len() < config.max_episode_len {
        let a = scripted_expert(&s, config.task);
        s = step(&s, a);
        actions.push(a.sanitized(s.params.max_delta));
        observations.push(render::render(&s, config.resolution));
        states.push(s.clone());
    }
    let success = is_success(&s, config.task);
    Ok(Episode {
        observations,
        actions,
        states,
        task: config.task,
        seed,
        success,
        action_free: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::world::reset;

    #[test]
    fn push_expert_succeeds_on_95_percent() {
        let cfg = EnvConfig::push();
        let wins = (0..100)
            .filter(|&seed| expert_episode(&cfg, seed).unwrap().success)
            .count();
        assert!(wins >= 95, "push expert succeeded on {wins}/100");
    }

    #[test]
    fn pick_place_expert_succeeds_on_95_percent() {
        for cfg in [
            EnvConfig {
                task: TaskKind::PickPlace,
                ..EnvConfig::default()
            },
            EnvConfig::occlusion_pick_place(),
        ] {
            let wins = (0..100)
                .filter(|&seed| expert_episode(&cfg, seed).unwrap().success)
                .count();
            assert!(wins >= 95, "pick-place expert succeeded on {wins}/100");
        }
    }

    #[test]
    fn converged_expert_is_idle() {
        let mut s = reset(&EnvConfig::push(), 2).unwrap();
        s.objects[0].center = s.goal.center;
        s.gripper = [s.goal.center[0] - 0.12, s.goal.center[1]];
        let a = scripted_expert(&s, TaskKind::PushToGoal);
        assert!(a.dx.abs() < 1e-12 && a.dy.abs() < 1e-12);
    }

    #[test]
    fn carrying_moves_toward_goal() {
        let cfg = EnvConfig {
            task: TaskKind::PickPlace,
            ..EnvConfig::default()
        };
        let mut s = reset(&cfg, 5).unwrap();
        s.gripper = [0.1, 0.1];
        s.goal.center = [0.9, 0.7];
        s.grip_closed = true;
        s.held_object = Some(0);
        s.objects[0].center = s.gripper;
        let a = scripted_expert(&s, TaskKind::PickPlace);
        let g = sub(s.goal.center, s.gripper);
        assert!(a.dx * g[0] + a.dy * g[1] > 0.0);
        assert!(a.closes());
    }

    #[test]
    fn episode_lengths_are_consistent() {
        let ep = expert_episode(&EnvConfig::push(), 9).unwrap();
        assert_eq!(ep.observations.len(), ep.states.len());
        assert_eq!(ep.states.len(), ep.actions.len() + 1);
        assert_eq!(ep.success, is_success(ep.states.last().unwrap(), ep.task));
    }
}
