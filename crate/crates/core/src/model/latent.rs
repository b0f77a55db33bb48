//! Fixed image transforms: the frozen latent map for predicted frames and
//! the conditioning input layout.

use crate::grad::Real;
use crate::simenv::render::{Image, BACKGROUND};
use crate::{Error, Result};

use super::ModelConfig;

/// Per-RGB-channel offset: the background color maps to zero.
pub const LATENT_MEAN: [f64; 3] = [
    BACKGROUND[0] as f64 / 255.0,
    BACKGROUND[1] as f64 / 255.0,
    BACKGROUND[2] as f64 / 255.0,
];
pub const LATENT_STD: f64 = 0.5;
/// No encoded value exceeds this magnitude.
pub const LATENT_BOUND: f64 = 1.0 / LATENT_STD;

/// Space-to-depth by `factor` plus standardization: `[H, W, 3]` to
/// `[H/f, W/f, 3f²]`, channels ordered `(dy, dx, rgb)`.
pub fn encode_obs_latent<F: Real>(img: &Image, factor: usize) -> Result<Vec<F>> {
    if factor == 0 || img.width % factor != 0 || img.height % factor != 0 {
        return Err(Error::Shape(format!(
            "{}x{} image is not divisible by latent factor {factor}",
            img.width, img.height
        )));
    }
    let (gh, gw) = (img.height / factor, img.width / factor);
    let mut out = Vec::with_capacity(img.data.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = img.pixel(gx * factor + dx, gy * factor + dy);
                    for c in 0..3 {
                        out.push(F::of((p[c] as f64 / 255.0 - LATENT_MEAN[c]) / LATENT_STD));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`encode_obs_latent`], rounding to the nearest byte.
pub fn decode_obs_latent<F: Real>(latent: &[F], resolution: usize, factor: usize) -> Result<Image> {
    if factor == 0 || resolution % factor != 0 || latent.len() != resolution * resolution * 3 {
        return Err(Error::Shape(format!(
            "latent of {} values does not decode to {resolution}px with factor {factor}",
            latent.len()
        )));
    }
    let g = resolution / factor;
    let mut img = Image::filled(resolution, resolution, [0, 0, 0]);
    let mut i = 0;
    for gy in 0..g {
        for gx in 0..g {
            for dy in 0..factor {
                for dx in 0..factor {
                    let mut rgb = [0u8; 3];
                    for (c, v) in rgb.iter_mut().enumerate() {
                        let z = latent[i].to_f64().unwrap_or(0.0);
                        *v = ((z * LATENT_STD + LATENT_MEAN[c]) * 255.0).round().clamp(0.0, 255.0) as u8;
                        i += 1;
                    }
                    img.put(gx * factor + dx, gy * factor + dy, rgb);
                }
            }
        }
    }
    Ok(img)
}

/// `index[k]` locates the `k`-th value of the obs token matrix
/// `[F·(g/p)², p·p·ch]` inside the latent state `[F, g, g, ch]`. Tokens are
/// frame-major, then patch row, then patch column.
pub fn obs_patch_indices(cfg: &ModelConfig) -> Vec<usize> {
    let (g, p, ch) = (cfg.latent_grid(), cfg.latent_patch, cfg.latent_channels());
    let mut idx = Vec::with_capacity(cfg.obs_state_len());
    for f in 0..cfg.future_frames {
        for pr in 0..g / p {
            for pc in 0..g / p {
                for py in 0..p {
                    for px in 0..p {
                        let (y, x) = (pr * p + py, pc * p + px);
                        let base = ((f * g + y) * g + x) * ch;
                        idx.extend(base..base + ch);
                    }
                }
            }
        }
    }
    idx
}

/// Conditioning input `[H, W, 8]`: `o_{t-1}` and `o_t` RGB scaled to
/// `[-1, 1]`, then x and y pixel-center coordinates in `[-1, 1]`.
pub fn prepare_condition<F: Real>(prev: &Image, cur: &Image, resolution: usize) -> Result<Vec<F>> {
    for img in [prev, cur] {
        if img.width != resolution || img.height != resolution {
            return Err(Error::Shape(format!(
                "conditioning frame is {}x{}, model expects {resolution}x{resolution}",
                img.width, img.height
            )));
        }
    }
    let r = resolution as f64;
    let mut out = Vec::with_capacity(resolution * resolution * 8);
    for y in 0..resolution {
        for x in 0..resolution {
            for img in [prev, cur] {
                for v in img.pixel(x, y) {
                    out.push(F::of(v as f64 / 127.5 - 1.0));
                }
            }
            out.push(F::of((x as f64 + 0.5) / r * 2.0 - 1.0));
            out.push(F::of((y as f64 + 0.5) / r * 2.0 - 1.0));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::{expert_episode, EnvConfig};

    #[test]
    fn extreme_pixels_stay_within_the_latent_bound() {
        for rgb in [[0, 0, 0], [255, 255, 255], [255, 0, 255]] {
            let z = encode_obs_latent::<f64>(&Image::filled(4, 4, rgb), 2).unwrap();
            assert!(z.iter().all(|v| v.abs() <= LATENT_BOUND), "{rgb:?}");
        }
    }

    #[test]
    fn latent_round_trip_is_exact() {
        let ep = expert_episode(&EnvConfig::occlusion_pick_place(), 2).unwrap();
        for img in ep.observations.iter().step_by(5) {
            let z: Vec<f32> = encode_obs_latent(img, 4).unwrap();
            assert_eq!(z.len(), 8 * 8 * 48);
            assert_eq!(&decode_obs_latent(&z, 32, 4).unwrap(), img);
        }
        let bg = Image::filled(32, 32, BACKGROUND);
        let z: Vec<f64> = encode_obs_latent(&bg, 4).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-12));
        assert!(encode_obs_latent::<f32>(&Image::filled(30, 30, BACKGROUND), 4).is_err());
    }

    #[test]
    fn obs_patches_are_a_permutation() {
        for cfg in [ModelConfig::desk(), ModelConfig::tiny()] {
            let mut idx = obs_patch_indices(&cfg);
            assert_eq!(idx.len(), cfg.obs_tokens() * cfg.obs_patch_dim());
            idx.sort_unstable();
            assert!(idx.iter().enumerate().all(|(i, &v)| i == v));
        }
    }

    #[test]
    fn condition_layout() {
        let a = Image::filled(16, 16, [0, 0, 0]);
        let b = Image::filled(16, 16, [255, 255, 255]);
        let c: Vec<f64> = prepare_condition(&a, &b, 16).unwrap();
        assert_eq!(c.len(), 16 * 16 * 8);
        assert_eq!(&c[..6], &[-1.0, -1.0, -1.0, 1.0, 1.0, 1.0]);
        assert_eq!(c[6], -1.0 + 1.0 / 16.0);
        assert!(prepare_condition::<f32>(&a, &Image::filled(32, 32, [0; 3]), 16).is_err());
    }
}
