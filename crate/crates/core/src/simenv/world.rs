use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Offset of a held object's center from the gripper center.
pub const GRASP_OFFSET: [f64; 2] = [0.0, 0.0];

const SPAWN_MARGIN: f64 = 0.02;
const MAX_PLACEMENT_TRIES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    PushToGoal,
    PickPlace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorId {
    Target,
    Blue,
    Yellow,
    Distractor,
}

impl ColorId {
    pub fn index(self) -> u8 {
        match self {
            ColorId::Target => 0,
            ColorId::Blue => 1,
            ColorId::Yellow => 2,
            ColorId::Distractor => 3,
        }
    }

    pub fn from_index(i: u8) -> Option<Self> {
        Some(match i {
            0 => ColorId::Target,
            1 => ColorId::Blue,
            2 => ColorId::Yellow,
            3 => ColorId::Distractor,
            _ => return None,
        })
    }
}

/// Sandbox configuration. Distances are workspace units on `[0, 1]^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub resolution: usize,
    pub task: TaskKind,
    /// Task objects; object 0 is always the one that must reach the goal.
    pub num_objects: usize,
    pub gripper_radius: f64,
    pub object_radius: f64,
    pub goal_radius: f64,
    pub grasp_radius: f64,
    pub max_delta: f64,
    pub max_episode_len: usize,
    pub gripper_range: [f64; 2],
    pub object_range: [f64; 2],
    pub goal_range: [f64; 2],
    pub min_goal_distance: f64,
    /// Draw object positions from `expanded_object_range` instead.
    pub ood_expanded_init: bool,
    pub expanded_object_range: [f64; 2],
    /// Adds one extra object in the distractor color.
    pub distractor: bool,
    /// Doubles the gripper radius so a carried object is hidden under it.
    pub occlusion_heavy: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            task: TaskKind::PushToGoal,
            num_objects: 1,
            gripper_radius: 0.05,
            object_radius: 0.07,
            goal_radius: 0.08,
            grasp_radius: 0.06,
            max_delta: 0.05,
            max_episode_len: 80,
            gripper_range: [0.1, 0.9],
            object_range: [0.25, 0.75],
            goal_range: [0.2, 0.8],
            min_goal_distance: 0.25,
            ood_expanded_init: false,
            expanded_object_range: [0.1, 0.9],
            distractor: false,
            occlusion_heavy: false,
        }
    }
}

impl EnvConfig {
    pub fn push() -> Self {
        Self::default()
    }

    /// Pick-and-place with an enlarged gripper and one distractor.
    pub fn occlusion_pick_place() -> Self {
        Self {
            task: TaskKind::PickPlace,
            occlusion_heavy: true,
            distractor: true,
            ..Self::default()
        }
    }

    pub fn effective_gripper_radius(&self) -> f64 {
        if self.occlusion_heavy {
            2.0 * self.gripper_radius
        } else {
            self.gripper_radius
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("env.{m}")));
        if self.resolution < 16 {
            return bad("resolution must be at least 16");
        }
        if self.num_objects == 0 {
            return bad("num_objects must be positive");
        }
        for (name, r) in [
            ("gripper_radius", self.gripper_radius),
            ("object_radius", self.object_radius),
            ("goal_radius", self.goal_radius),
            ("grasp_radius", self.grasp_radius),
            ("max_delta", self.max_delta),
        ] {
            if !(r.is_finite() && r > 0.0) {
                return bad(&format!("{name} must be positive"));
            }
        }
        for (name, r) in [
            ("gripper_range", self.gripper_range),
            ("object_range", self.object_range),
            ("goal_range", self.goal_range),
            ("expanded_object_range", self.expanded_object_range),
        ] {
            if !(0.0 <= r[0] && r[0] < r[1] && r[1] <= 1.0) {
                return bad(&format!("{name} must satisfy 0 <= lo < hi <= 1"));
            }
        }
        if self.max_episode_len == 0 {
            return bad("max_episode_len must be positive");
        }
        Ok(())
    }

    fn active_object_range(&self) -> [f64; 2] {
        if self.ood_expanded_init {
            self.expanded_object_range
        } else {
            self.object_range
        }
    }
}

/// Kinematic constants carried with every state so `step` stays a pure
/// function of `(state, action)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub gripper_radius: f64,
    pub grasp_radius: f64,
    pub max_delta: f64,
    /// Whether the gripper disk pushes free objects. Pick-and-place grippers
    /// hover above the table and only the carried object makes contact.
    pub gripper_contact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub center: [f64; 2],
    pub radius: f64,
    pub z_order: i32,
    pub color: ColorId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper: [f64; 2],
    pub grip_closed: bool,
    pub held_object: Option<usize>,
    pub objects: Vec<ObjectState>,
    pub goal: Goal,
    pub step_index: usize,
    pub params: WorldParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub grip: f64,
}

impl Action {
    pub const ZERO: Action = Action {
        dx: 0.0,
        dy: 0.0,
        grip: 0.0,
    };

    pub fn new(dx: f64, dy: f64, grip: f64) -> Self {
        Self { dx, dy, grip }
    }

    /// Replaces non-finite components with zero and clips to the limits.
    pub fn sanitized(self, max_delta: f64) -> Self {
        let fix = |v: f64| if v.is_finite() { v } else { 0.0 };
        Self {
            dx: fix(self.dx).clamp(-max_delta, max_delta),
            dy: fix(self.dy).clamp(-max_delta, max_delta),
            grip: fix(self.grip).clamp(0.0, 1.0),
        }
    }

    pub fn closes(&self) -> bool {
        self.grip >= 0.5
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.dx, self.dy, self.grip]
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn uniform2(rng: &mut ChaCha8Rng, r: [f64; 2]) -> [f64; 2] {
    [rng.gen_range(r[0]..r[1]), rng.gen_range(r[0]..r[1])]
}

/// Samples an initial world. Deterministic in `(config, seed)`.
pub fn reset(config: &EnvConfig, seed: u64) -> Result<WorldState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs: Vec<ColorId> = (0..config.num_objects)
        .map(|i| match i {
            0 => ColorId::Target,
            i if i % 2 == 1 => ColorId::Blue,
            _ => ColorId::Yellow,
        })
        .collect();
    if config.distractor {
        specs.push(ColorId::Distractor);
    }
    let r = config.object_radius;
    let range = config.active_object_range();
    let mut objects: Vec<ObjectState> = Vec::with_capacity(specs.len());
    for (i, color) in specs.into_iter().enumerate() {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let c = uniform2(&mut rng, range);
            if objects.iter().all(|o| dist(o.center, c) > o.radius + r + SPAWN_MARGIN) {
                placed = Some(c);
                break;
            }
        }
        let center = placed.ok_or_else(|| {
            Error::Config(format!("env: could not place object {i} without overlap (seed {seed})"))
        })?;
        objects.push(ObjectState {
            center,
            radius: r,
            z_order: i as i32,
            color,
        });
    }
    let mut goal = None;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let c = uniform2(&mut rng, config.goal_range);
        let far_from_target = dist(c, objects[0].center) >= config.min_goal_distance;
        let clear_of_others = objects[1..]
            .iter()
            .all(|o| dist(o.center, c) > o.radius + config.goal_radius);
        if far_from_target && clear_of_others {
            goal = Some(c);
            break;
        }
    }
    let goal = goal.ok_or_else(|| Error::Config(format!("env: could not place goal (seed {seed})")))?;
    let rg = config.effective_gripper_radius();
    let mut gripper = None;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let c = uniform2(&mut rng, config.gripper_range);
        if objects.iter().all(|o| dist(o.center, c) > o.radius + rg + SPAWN_MARGIN) {
            gripper = Some(c);
            break;
        }
    }
    let gripper =
        gripper.ok_or_else(|| Error::Config(format!("env: could not place gripper (seed {seed})")))?;
    Ok(WorldState {
        gripper,
        grip_closed: false,
        held_object: None,
        objects,
        goal: Goal {
            center: goal,
            radius: config.goal_radius,
        },
        step_index: 0,
        params: WorldParams {
            gripper_radius: rg,
            grasp_radius: config.grasp_radius,
            max_delta: config.max_delta,
            gripper_contact: config.task == TaskKind::PushToGoal,
        },
    })
}

/// Moves `obj` out of a disk at `pusher` with radius `rp` along the
/// contact normal. Returns whether it moved.
fn separate(pusher: [f64; 2], rp: f64, obj: &mut ObjectState) -> bool {
    let d = dist(pusher, obj.center);
    let min = rp + obj.radius;
    if d >= min {
        return false;
    }
    let n = if d > 1e-12 {
        [(obj.center[0] - pusher[0]) / d, (obj.center[1] - pusher[1]) / d]
    } else {
        [1.0, 0.0]
    };
    obj.center = [pusher[0] + n[0] * min, pusher[1] + n[1] * min];
    true
}

/// Advances the world by one action.
///
/// Order: grip transition (grasp or release at the current pose), gripper
/// translation clamped to the workspace, carried object follows, then
/// overlap resolution pushes free objects along contact normals. Objects are
/// never clamped and may leave the workspace.
pub fn step(state: &WorldState, action: Action) -> WorldState {
    let p = state.params;
    let a = action.sanitized(p.max_delta);
    let mut s = state.clone();
    s.step_index += 1;
    let close = a.closes();
    if close && !s.grip_closed {
        s.held_object = s
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| (i, dist(o.center, s.gripper)))
            .filter(|&(_, d)| d <= p.grasp_radius)
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .map(|(i, _)| i);
    } else if !close && s.grip_closed {
        s.held_object = None;
    }
    s.grip_closed = close;
    s.gripper = [
        (s.gripper[0] + a.dx).clamp(0.0, 1.0),
        (s.gripper[1] + a.dy).clamp(0.0, 1.0),
    ];
    if let Some(h) = s.held_object {
        s.objects[h].center = [s.gripper[0] + GRASP_OFFSET[0], s.gripper[1] + GRASP_OFFSET[1]];
    }
    let mut pushers: Vec<([f64; 2], f64)> = Vec::new();
    if p.gripper_contact {
        pushers.push((s.gripper, p.gripper_radius));
    }
    if let Some(h) = s.held_object {
        pushers.push((s.objects[h].center, s.objects[h].radius));
    }
    let held = s.held_object;
    for k in 0..s.objects.len() {
        if Some(k) == held {
            continue;
        }
        for &(c, r) in &pushers {
            separate(c, r, &mut s.objects[k]);
        }
    }
    // one pass of free-object contacts; the later index yields
    for i in 0..s.objects.len() {
        for j in (i + 1)..s.objects.len() {
            if Some(j) == held {
                continue;
            }
            let (a, b) = s.objects.split_at_mut(j);
            separate(a[i].center, a[i].radius, &mut b[0]);
        }
    }
    s
}

/// Target object inside the goal disk (strictly); pick-and-place also
/// requires the gripper open.
pub fn is_success(state: &WorldState, task: TaskKind) -> bool {
    let inside = dist(state.objects[0].center, state.goal.center) < state.goal.radius;
    match task {
        TaskKind::PushToGoal => inside,
        TaskKind::PickPlace => inside && !state.grip_closed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic() {
        let cfg = EnvConfig::default();
        assert_eq!(reset(&cfg, 7).unwrap(), reset(&cfg, 7).unwrap());
        assert_ne!(reset(&cfg, 7).unwrap(), reset(&cfg, 8).unwrap());
    }

    #[test]
    fn reset_spawns_without_overlap() {
        let cfg = EnvConfig {
            num_objects: 3,
            distractor: true,
            ..EnvConfig::default()
        };
        for seed in 0..100 {
            let s = reset(&cfg, seed).unwrap();
            for i in 0..s.objects.len() {
                for j in (i + 1)..s.objects.len() {
                    let (a, b) = (&s.objects[i], &s.objects[j]);
                    assert!(dist(a.center, b.center) > a.radius + b.radius);
                }
                assert!(dist(s.objects[i].center, s.gripper) > s.objects[i].radius + s.params.gripper_radius);
            }
            let mut z: Vec<i32> = s.objects.iter().map(|o| o.z_order).collect();
            z.dedup();
            assert_eq!(z.len(), s.objects.len());
        }
    }

    #[test]
    fn ood_flag_expands_object_range() {
        let base = EnvConfig::default();
        let ood = EnvConfig {
            ood_expanded_init: true,
            ..EnvConfig::default()
        };
        let extent = |cfg: &EnvConfig| {
            let (mut lo, mut hi) = (f64::MAX, f64::MIN);
            for seed in 0..1000 {
                let s = reset(cfg, seed).unwrap();
                for v in s.objects[0].center {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            (lo, hi)
        };
        let (blo, bhi) = extent(&base);
        let (olo, ohi) = extent(&ood);
        assert!(blo >= 0.25 && bhi <= 0.75);
        assert!(olo >= 0.1 && ohi <= 0.9);
        assert!(olo < 0.15 && ohi > 0.85, "expanded range not exercised: {olo} {ohi}");
    }

    #[test]
    fn placement_failure_is_reported() {
        let cfg = EnvConfig {
            num_objects: 40,
            ..EnvConfig::default()
        };
        assert!(matches!(reset(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_action_is_a_fixed_point() {
        for cfg in [EnvConfig::push(), EnvConfig::occlusion_pick_place()] {
            let s = reset(&cfg, 3).unwrap();
            let n = step(&s, Action::ZERO);
            let mut expect = s.clone();
            expect.step_index += 1;
            assert_eq!(n, expect);
        }
    }

    #[test]
    fn grasp_attaches_and_co_moves() {
        let cfg = EnvConfig {
            task: TaskKind::PickPlace,
            ..EnvConfig::default()
        };
        let mut s = reset(&cfg, 1).unwrap();
        s.gripper = [s.objects[0].center[0] + 0.03, s.objects[0].center[1]];
        let s1 = step(&s, Action::new(0.0, 0.0, 1.0));
        assert_eq!(s1.held_object, Some(0));
        let s2 = step(&s1, Action::new(0.04, -0.02, 1.0));
        assert_eq!(s2.objects[0].center, s2.gripper);
        let s3 = step(&s2, Action::new(0.04, 0.0, 0.0));
        assert_eq!(s3.held_object, None);
        assert_eq!(s3.objects[0].center, s2.objects[0].center);
    }

    #[test]
    fn grasp_needs_object_in_radius() {
        let cfg = EnvConfig {
            task: TaskKind::PickPlace,
            ..EnvConfig::default()
        };
        let mut s = reset(&cfg, 1).unwrap();
        s.gripper = [s.objects[0].center[0] + 0.2, s.objects[0].center[1]];
        let s1 = step(&s, Action::new(0.0, 0.0, 1.0));
        assert!(s1.grip_closed);
        assert_eq!(s1.held_object, None);
    }

    #[test]
    fn scripted_push_drives_object_out_of_frame() {
        let cfg = EnvConfig::default();
        let mut s = reset(&cfg, 0).unwrap();
        s.objects[0].center = [0.8, 0.5];
        s.gripper = [0.6, 0.5];
        for _ in 0..20 {
            s = step(&s, Action::new(0.05, 0.0, 0.0));
        }
        // gripper clamps at the border, the object sits one contact distance past it
        assert_eq!(s.gripper[0], 1.0);
        let c = s.objects[0].center;
        assert!((c[0] - (1.0 + 0.05 + 0.07)).abs() < 1e-12);
        assert!(c[0] > 1.0, "object should have left [0,1]^2: {c:?}");
    }

    #[test]
    fn actions_are_sanitized() {
        let a = Action::new(f64::NAN, 3.0, 7.0).sanitized(0.05);
        assert_eq!(a, Action::new(0.0, 0.05, 1.0));
    }

    #[test]
    fn success_boundary_is_exclusive() {
        let mut s = reset(&EnvConfig::default(), 4).unwrap();
        s.objects[0].center = s.goal.center;
        assert!(is_success(&s, TaskKind::PushToGoal));
        s.objects[0].center = [s.goal.center[0] + s.goal.radius + 1e-9, s.goal.center[1]];
        assert!(!is_success(&s, TaskKind::PushToGoal));
        s.objects[0].center = s.goal.center;
        s.grip_closed = true;
        assert!(!is_success(&s, TaskKind::PickPlace));
    }
}
