//! Analytic point tracks: the sandbox knows every entity's rigid motion, so
//! tracks and visibility are exact rather than estimated.

use super::render::{owner_at, Entity};
use super::world::WorldState;
use crate::{Error, Result};

/// Tracks of `N` queries over `H_p` future frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackTargets {
    pub horizon: usize,
    pub num_points: usize,
    /// `[H_p, N, 2]` pixel coordinates `(x, y)`; may leave the image.
    pub coords: Vec<f64>,
    /// `[H_p, N]`, 1 when the tracked point is in frame and unoccluded.
    pub visible: Vec<u8>,
}

fn pixel_of(p: [f64; 2], resolution: usize) -> Option<(usize, usize)> {
    let r = resolution as f64;
    if p[0] >= 0.0 && p[1] >= 0.0 && p[0] < r && p[1] < r {
        Some((p[0] as usize, p[1] as usize))
    } else {
        None
    }
}

fn entity_position(state: &WorldState, e: Entity) -> [f64; 2] {
    match e {
        Entity::Background => [0.0, 0.0],
        Entity::Object(k) => state.objects[k].center,
        Entity::Gripper => state.gripper,
    }
}

/// Entity a pixel-space query binds to in the reference state.
pub fn bind_query(reference: &WorldState, q: [f64; 2], resolution: usize) -> Result<Entity> {
    let (px, py) = pixel_of(q, resolution)
        .ok_or_else(|| Error::Shape(format!("query {q:?} outside the {resolution}px reference image")))?;
    Ok(owner_at(reference, px, py, resolution))
}

/// Tracks `queries` (pixel coordinates in `states[0]`) through
/// `states[1..]`.
///
/// Each query binds to the topmost entity owning its pixel in the reference
/// frame and then follows that entity rigidly; background points stay put.
/// A point is visible iff it lies inside the image and its bound entity
/// owns the pixel it currently falls in.
pub fn ground_truth_tracks(
    states: &[WorldState],
    queries: &[[f64; 2]],
    resolution: usize,
) -> Result<TrackTargets> {
    if states.len() < 2 {
        return Err(Error::Shape(format!(
            "ground_truth_tracks needs a reference and at least one future state, got {}",
            states.len()
        )));
    }
    let reference = &states[0];
    let horizon = states.len() - 1;
    let n = queries.len();
    let scale = resolution as f64;
    let bindings = queries
        .iter()
        .map(|&q| bind_query(reference, q, resolution))
        .collect::<Result<Vec<_>>>()?;
    let mut coords = Vec::with_capacity(horizon * n * 2);
    let mut visible = Vec::with_capacity(horizon * n);
    for state in &states[1..] {
        if state.objects.len() != reference.objects.len() {
            return Err(Error::Shape("object count changed within a track window".into()));
        }
        for (&q, &e) in queries.iter().zip(&bindings) {
            let (c0, c) = (entity_position(reference, e), entity_position(state, e));
            let p = [q[0] + (c[0] - c0[0]) * scale, q[1] + (c[1] - c0[1]) * scale];
            coords.extend_from_slice(&p);
            let vis = pixel_of(p, resolution).is_some_and(|(px, py)| owner_at(state, px, py, resolution) == e);
            visible.push(vis as u8);
        }
    }
    Ok(TrackTargets {
        horizon,
        num_points: n,
        coords,
        visible,
    })
}
