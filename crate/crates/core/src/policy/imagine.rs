use std::path::{Path, PathBuf};

use rand::Rng;

use crate::model::decode_obs_latent;
use crate::simenv::render::draw_line;
use crate::simenv::Image;
use crate::trackspace::{grid_to_tracks, make_query_grid};
use crate::{Error, Result};

use super::{sample_joint, Policy, RolloutConfig};

/// Decoded imagined futures for one observation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Imagination {
    pub reference: Image,
    /// Predicted future frames through the inverse latent map.
    pub frames: Vec<Image>,
    /// Query points `[N, 2]` in pixels on the reference frame.
    pub queries: Vec<[f64; 2]>,
    /// `[H_p, N, 2]` pixel coordinates.
    pub tracks: Option<Vec<f64>>,
    /// `[H_p, N]` visibility probabilities.
    pub visibility: Option<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Samples every modality and decodes the obs and track branches.
pub fn imagine<R: Rng + ?Sized>(
    o_prev: &Image,
    o_t: &Image,
    policy: &Policy,
    rc: &RolloutConfig,
    rng: &mut R,
) -> Result<Imagination> {
    let cfg = &policy.cfg;
    let s = sample_joint(policy, o_prev, o_t, rc, rng)?;
    let frames = match &s.obs {
        Some(obs) => obs
            .chunks(cfg.latent_frame_len())
            .map(|f| decode_obs_latent(f, cfg.resolution, cfg.latent_factor))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let tracks = match &s.tracks {
        Some(grid) => {
            let g: Vec<f64> = grid.iter().map(|&x| x as f64).collect();
            Some(grid_to_tracks(&g, &cfg.track, cfg.resolution)?)
        }
        None => None,
    };
    Ok(Imagination {
        reference: o_t.clone(),
        frames,
        queries: make_query_grid(cfg.track.grid_h, cfg.track.grid_w, cfg.resolution)?,
        tracks,
        visibility: s
            .vis_logits
            .map(|l| l.iter().map(|&z| sigmoid(z as f64)).collect()),
    })
}

/// Color from red (hidden) to green (visible).
fn visibility_color(p: f64) -> [u8; 3] {
    let p = p.clamp(0.0, 1.0);
    [(255.0 * (1.0 - p)) as u8, (255.0 * p) as u8, 40]
}

/// Writes `<stem>_tracks.png` (tracks over the reference frame, colored by
/// predicted visibility) and `<stem>_future<i>.png`; returns the paths.
pub fn write_overlays(dir: &Path, stem: &str, im: &Imagination) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    const SCALE: usize = 8;
    let mut written = Vec::new();
    let mut canvas = im.reference.upscale(SCALE);
    if let Some(tr) = &im.tracks {
        let n = im.queries.len();
        let horizon = tr.len() / (2 * n);
        let px = |p: [f64; 2]| [p[0] * SCALE as f64, p[1] * SCALE as f64];
        for i in 0..n {
            let mut last = im.queries[i];
            for f in 0..horizon {
                let k = f * n + i;
                let next = [tr[2 * k], tr[2 * k + 1]];
                let vis = im.visibility.as_ref().map_or(1.0, |v| v[k]);
                draw_line(&mut canvas, px(last), px(next), visibility_color(vis));
                last = next;
            }
        }
    }
    let path = dir.join(format!("{stem}_tracks.png"));
    canvas.save_png(&path)?;
    written.push(path);
    for (i, f) in im.frames.iter().enumerate() {
        let path = dir.join(format!("{stem}_future{i}.png"));
        f.upscale(SCALE).save_png(&path)?;
        written.push(path);
    }
    Ok(written)
}
