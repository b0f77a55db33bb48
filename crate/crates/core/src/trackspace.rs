//! Point-track samples and their tensor layouts.
//!
//! A window anchored at frame `t` re-seeds a regular query grid on `o_t` and
//! follows it through frames `t+1..=t+H_p`. For the denoiser the `N = H_g·W_g`
//! points are folded back into their grid, giving a two-channel clip
//! `[2, H_pp, H_g, W_g]` of normalized coordinates (`H_pp` is `H_p` rounded
//! up to the temporal patch size, padded by repeating the last frame). That
//! clip is cut into non-overlapping `(p_t, p_h, p_w)` patches; tokens are
//! ordered time-major, then grid row, then grid column, and each patch is
//! flattened channel-major as `(c, dt, dh, dw)`.

use serde::{Deserialize, Serialize};

use crate::simenv::{ground_truth_tracks, Episode};
use crate::{Error, Result};

/// The track encoder only ever sees coordinates: x and y.
pub const TRACK_INPUT_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackConfig {
    /// Future frames tracked per window (`H_p`).
    pub horizon: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Patch extent over (time, grid row, grid column).
    pub patch: [usize; 3],
}

impl TrackConfig {
    pub fn desk() -> Self {
        Self {
            horizon: 8,
            grid_h: 5,
            grid_w: 5,
            patch: [2, 5, 5],
        }
    }

    pub fn reference() -> Self {
        Self {
            horizon: 19,
            grid_h: 25,
            grid_w: 25,
            patch: [2, 5, 5],
        }
    }

    pub fn num_points(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Smallest multiple of the temporal patch size covering the horizon.
    pub fn padded_horizon(&self) -> usize {
        self.horizon.div_ceil(self.patch[0]) * self.patch[0]
    }

    /// `L_p = (H_pp / p_t) · (H_g / p_h) · (W_g / p_w)`.
    pub fn num_tokens(&self) -> usize {
        (self.padded_horizon() / self.patch[0]) * (self.grid_h / self.patch[1]) * (self.grid_w / self.patch[2])
    }

    pub fn patch_volume(&self) -> usize {
        self.patch.iter().product()
    }

    /// Values per token entering the patch projection.
    pub fn token_input_dim(&self) -> usize {
        TRACK_INPUT_CHANNELS * self.patch_volume()
    }

    /// Shape of the normalized track grid `[2, H_pp, H_g, W_g]`.
    pub fn grid_shape(&self) -> [usize; 4] {
        [TRACK_INPUT_CHANNELS, self.padded_horizon(), self.grid_h, self.grid_w]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model.track.{m}")));
        if self.horizon == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return bad("horizon and grid dims must be positive".into());
        }
        if self.patch.contains(&0) {
            return bad("patch dims must be positive".into());
        }
        if self.grid_h % self.patch[1] != 0 || self.grid_w % self.patch[2] != 0 {
            return bad(format!(
                "patch: grid {}x{} is not divisible by patch {:?}",
                self.grid_h, self.grid_w, self.patch
            ));
        }
        Ok(())
    }
}

/// Cell-centered `h × w` grid of pixel-space queries, row-major.
pub fn make_query_grid(h: usize, w: usize, resolution: usize) -> Result<Vec<[f64; 2]>> {
    if h == 0 || w == 0 || h > resolution || w > resolution {
        return Err(Error::Config(format!(
            "query grid {h}x{w} does not fit a {resolution}px image"
        )));
    }
    let (sx, sy) = (resolution as f64 / w as f64, resolution as f64 / h as f64);
    Ok((0..h)
        .flat_map(|i| (0..w).map(move |j| [(j as f64 + 0.5) * sx, (i as f64 + 0.5) * sy]))
        .collect())
}

/// Tracks of one sliding window.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackWindow {
    pub reference_index: usize,
    pub horizon: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// `[H_p, N, 2]` pixel coordinates of frames `t+1..=t+H_p`.
    pub coords: Vec<f64>,
    /// `[H_p, N]`.
    pub visible: Vec<u8>,
}

impl TrackWindow {
    pub fn num_points(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Track window anchored at frame `t`.
pub fn track_window(episode: &Episode, t: usize, cfg: &TrackConfig, resolution: usize) -> Result<TrackWindow> {
    let end = t + cfg.horizon;
    if end >= episode.states.len() {
        return Err(Error::Shape(format!(
            "window at {t} needs frames up to {end}, episode has {}",
            episode.states.len()
        )));
    }
    let queries = make_query_grid(cfg.grid_h, cfg.grid_w, resolution)?;
    let tr = ground_truth_tracks(&episode.states[t..=end], &queries, resolution)?;
    Ok(TrackWindow {
        reference_index: t,
        horizon: cfg.horizon,
        grid_h: cfg.grid_h,
        grid_w: cfg.grid_w,
        coords: tr.coords,
        visible: tr.visible,
    })
}

/// One window per anchor `t = 0, stride, 2·stride, … ≤ T − H_p`, each with a
/// freshly seeded query grid.
pub fn build_sliding_windows(
    episode: &Episode,
    cfg: &TrackConfig,
    stride: usize,
    resolution: usize,
) -> Result<Vec<TrackWindow>> {
    if stride == 0 {
        return Err(Error::Config("track window stride must be positive".into()));
    }
    let frames = episode.states.len();
    if frames < cfg.horizon + 1 {
        log::warn!(
            "episode (seed {}) has {frames} frames, fewer than the {} a track window needs",
            episode.seed,
            cfg.horizon + 1
        );
        return Ok(Vec::new());
    }
    (0..=frames - 1 - cfg.horizon)
        .step_by(stride)
        .map(|t| track_window(episode, t, cfg, resolution))
        .collect()
}

/// Pixel coordinate to `[-1, 1]`; the image edges map to ±1 and nothing is
/// clamped.
pub fn normalize_coord(x: f64, resolution: usize) -> f64 {
    let half = resolution as f64 / 2.0;
    (x - half) / half
}

pub fn denormalize_coord(n: f64, resolution: usize) -> f64 {
    let half = resolution as f64 / 2.0;
    n * half + half
}

pub fn normalize_coords(p: &[f64], resolution: usize) -> Vec<f64> {
    p.iter().map(|&x| normalize_coord(x, resolution)).collect()
}

pub fn denormalize_coords(p: &[f64], resolution: usize) -> Vec<f64> {
    p.iter().map(|&x| denormalize_coord(x, resolution)).collect()
}

/// Normalized track clip `[2, H_pp, H_g, W_g]`, flattened.
pub fn tracks_to_grid(window: &TrackWindow, cfg: &TrackConfig, resolution: usize) -> Result<Vec<f64>> {
    let n = window.num_points();
    if window.horizon != cfg.horizon || window.grid_h != cfg.grid_h || window.grid_w != cfg.grid_w {
        return Err(Error::Shape(format!(
            "window ({}, {}x{}) does not match track config ({}, {}x{})",
            window.horizon, window.grid_h, window.grid_w, cfg.horizon, cfg.grid_h, cfg.grid_w
        )));
    }
    if window.coords.len() != window.horizon * n * 2 {
        return Err(Error::Shape(format!(
            "window has {} coordinates, expected {}",
            window.coords.len(),
            window.horizon * n * 2
        )));
    }
    let hpp = cfg.padded_horizon();
    let mut g = vec![0.0; 2 * hpp * n];
    for c in 0..2 {
        for f in 0..hpp {
            let src = f.min(cfg.horizon - 1);
            for i in 0..n {
                g[(c * hpp + f) * n + i] = normalize_coord(window.coords[(src * n + i) * 2 + c], resolution);
            }
        }
    }
    Ok(g)
}

/// Inverse of [`tracks_to_grid`]: drops temporal padding and returns pixel
/// coordinates `[H_p, N, 2]`.
pub fn grid_to_tracks(grid: &[f64], cfg: &TrackConfig, resolution: usize) -> Result<Vec<f64>> {
    let (n, hpp) = (cfg.num_points(), cfg.padded_horizon());
    if grid.len() != 2 * hpp * n {
        return Err(Error::Shape(format!("track grid has {} values, expected {}", grid.len(), 2 * hpp * n)));
    }
    let mut p = vec![0.0; cfg.horizon * n * 2];
    for f in 0..cfg.horizon {
        for i in 0..n {
            for c in 0..2 {
                p[(f * n + i) * 2 + c] = denormalize_coord(grid[(c * hpp + f) * n + i], resolution);
            }
        }
    }
    Ok(p)
}

/// `index[k]` is the position in a `[channels, H_pp, H_g, W_g]` clip of the
/// `k`-th value of the patch matrix `[L_p, channels · p_t · p_h · p_w]`.
pub fn patch_indices(cfg: &TrackConfig, channels: usize) -> Vec<usize> {
    let (hpp, gh, gw) = (cfg.padded_horizon(), cfg.grid_h, cfg.grid_w);
    let [pt, ph, pw] = cfg.patch;
    let mut idx = Vec::with_capacity(channels * hpp * gh * gw);
    for bt in 0..hpp / pt {
        for bh in 0..gh / ph {
            for bw in 0..gw / pw {
                for c in 0..channels {
                    for dt in 0..pt {
                        for dh in 0..ph {
                            for dw in 0..pw {
                                let (t, h, w) = (bt * pt + dt, bh * ph + dh, bw * pw + dw);
                                idx.push(((c * hpp + t) * gh + h) * gw + w);
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Inverse permutation of [`patch_indices`].
pub fn unpatch_indices(cfg: &TrackConfig, channels: usize) -> Vec<usize> {
    let fwd = patch_indices(cfg, channels);
    let mut inv = vec![0; fwd.len()];
    for (k, &g) in fwd.iter().enumerate() {
        inv[g] = k;
    }
    inv
}

/// Rearranges a `[channels, H_pp, H_g, W_g]` clip into patch rows.
pub fn patchify<T: Copy>(grid: &[T], cfg: &TrackConfig, channels: usize) -> Vec<T> {
    patch_indices(cfg, channels).into_iter().map(|g| grid[g]).collect()
}

pub fn unpatchify<T: Copy>(patches: &[T], cfg: &TrackConfig, channels: usize) -> Vec<T> {
    unpatch_indices(cfg, channels).into_iter().map(|k| patches[k]).collect()
}

/// For each `(τ < H_p, point)` the position of its visibility logit in the
/// one-channel token output `[L_p, p_t · p_h · p_w]`; padded frames are
/// skipped.
pub fn visibility_indices(cfg: &TrackConfig) -> Vec<usize> {
    let inv = unpatch_indices(cfg, 1);
    inv[..cfg.horizon * cfg.num_points()].to_vec()
}

/// `D_v`: per-token logits `[L_p, p_t · p_h · p_w]` to `[H_p, N]`.
pub fn decode_visibility<T: Copy>(token_logits: &[T], cfg: &TrackConfig) -> Vec<T> {
    visibility_indices(cfg).into_iter().map(|k| token_logits[k]).collect()
}

/// `D_p`: per-token normalized coordinates `[L_p, 2 · p_t · p_h · p_w]` to
/// pixel tracks `[H_p, N, 2]`.
pub fn decode_tracks(token_coords: &[f64], cfg: &TrackConfig, resolution: usize) -> Result<Vec<f64>> {
    if token_coords.len() != cfg.num_tokens() * cfg.token_input_dim() {
        return Err(Error::Shape(format!(
            "track tokens hold {} values, expected {}",
            token_coords.len(),
            cfg.num_tokens() * cfg.token_input_dim()
        )));
    }
    grid_to_tracks(&unpatchify(token_coords, cfg, TRACK_INPUT_CHANNELS), cfg, resolution)
}
