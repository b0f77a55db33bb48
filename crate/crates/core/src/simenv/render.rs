use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::world::{ColorId, WorldState};
use crate::{Error, Result};

pub const BACKGROUND: [u8; 3] = [48, 48, 56];
pub const GOAL: [u8; 3] = [60, 140, 60];
pub const GRIPPER_OPEN: [u8; 3] = [235, 235, 235];
pub const GRIPPER_CLOSED: [u8; 3] = [150, 150, 160];

pub fn object_color(c: ColorId) -> [u8; 3] {
    match c {
        ColorId::Target => [220, 60, 50],
        ColorId::Blue => [60, 90, 220],
        ColorId::Yellow => [220, 200, 60],
        ColorId::Distractor => [170, 70, 200],
    }
}

/// Row-major RGB8 image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Nearest-neighbour upscale, for legible debug images.
    pub fn upscale(&self, factor: usize) -> Image {
        let mut out = Image::filled(self.width * factor, self.height * factor, [0, 0, 0]);
        for y in 0..out.height {
            for x in 0..out.width {
                out.put(x, y, self.pixel(x / factor, y / factor));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let to_io = |e: png::EncodingError| {
            Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))
        };
        let mut w = enc.write_header().map_err(to_io)?;
        w.write_image_data(&self.data).map_err(to_io)?;
        w.finish().map_err(to_io)
    }
}

/// What a pixel shows. The goal patch is painted scenery and counts as
/// background: it never moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Entity {
    Background,
    Object(usize),
    Gripper,
}

/// Workspace coordinates of the center of pixel `(px, py)`.
pub fn pixel_center(px: usize, py: usize, resolution: usize) -> [f64; 2] {
    let r = resolution as f64;
    [(px as f64 + 0.5) / r, (py as f64 + 0.5) / r]
}

fn inside(p: [f64; 2], c: [f64; 2], r: f64) -> bool {
    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
    dx * dx + dy * dy <= r * r
}

/// Topmost entity covering workspace point `p`.
pub fn topmost_at(state: &WorldState, p: [f64; 2]) -> Entity {
    if inside(p, state.gripper, state.params.gripper_radius) {
        return Entity::Gripper;
    }
    state
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| inside(p, o.center, o.radius))
        .max_by_key(|(_, o)| o.z_order)
        .map_or(Entity::Background, |(i, _)| Entity::Object(i))
}

/// Owner of pixel `(px, py)`, decided at the pixel center.
pub fn owner_at(state: &WorldState, px: usize, py: usize, resolution: usize) -> Entity {
    topmost_at(state, pixel_center(px, py, resolution))
}

/// Painter's-algorithm rasterization: goal, objects by ascending z-order,
/// gripper last. No anti-aliasing.
pub fn render(state: &WorldState, resolution: usize) -> Image {
    let mut img = Image::filled(resolution, resolution, BACKGROUND);
    paint_disk(&mut img, state.goal.center, state.goal.radius, GOAL);
    let mut order: Vec<usize> = (0..state.objects.len()).collect();
    order.sort_by_key(|&i| state.objects[i].z_order);
    for i in order {
        let o = &state.objects[i];
        paint_disk(&mut img, o.center, o.radius, object_color(o.color));
    }
    let gc = if state.grip_closed {
        GRIPPER_CLOSED
    } else {
        GRIPPER_OPEN
    };
    paint_disk(&mut img, state.gripper, state.params.gripper_radius, gc);
    img
}

fn paint_disk(img: &mut Image, c: [f64; 2], r: f64, rgb: [u8; 3]) {
    let res = img.width;
    for py in 0..img.height {
        for px in 0..res {
            if inside(pixel_center(px, py, res), c, r) {
                img.put(px, py, rgb);
            }
        }
    }
}

/// Draws a 1-pixel line with simple DDA; used for track overlays.
pub fn draw_line(img: &mut Image, a: [f64; 2], b: [f64; 2], rgb: [u8; 3]) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t);
        if x >= 0.0 && y >= 0.0 && (x as usize) < img.width && (y as usize) < img.height {
            img.put(x as usize, y as usize, rgb);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::world::{reset, EnvConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_scene_is_uniform() {
        let mut s = reset(&EnvConfig::default(), 0).unwrap();
        s.objects.clear();
        s.goal.radius = 0.0;
        s.gripper = [5.0, 5.0];
        let img = render(&s, 32);
        assert!(img.data.chunks(3).all(|p| p == BACKGROUND));
    }

    #[test]
    fn covered_object_is_invisible() {
        let mut s = reset(&EnvConfig::default(), 0).unwrap();
        s.objects.truncate(1);
        s.objects[0].radius = 0.04;
        s.gripper = s.objects[0].center;
        s.params.gripper_radius = 0.06;
        let img = render(&s, 32);
        let red = object_color(ColorId::Target);
        assert!(img.data.chunks(3).all(|p| p != red));
    }

    #[test]
    fn pixel_ownership_matches_brute_force() {
        let cfg = EnvConfig {
            num_objects: 3,
            distractor: true,
            ..EnvConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for seed in 0..10 {
            let mut s = reset(&cfg, seed).unwrap();
            // force overlaps so z-order matters
            s.gripper = s.objects[1].center;
            s.objects[2].center[0] = s.objects[0].center[0] + rng.gen_range(-0.05..0.05);
            s.objects[2].center[1] = s.objects[0].center[1] + rng.gen_range(-0.05..0.05);
            let img = render(&s, 32);
            for py in 0..32 {
                for px in 0..32 {
                    // independent point-in-disk scan, top to bottom
                    let (x, y) = ((px as f64 + 0.5) / 32.0, (py as f64 + 0.5) / 32.0);
                    let hit = |c: [f64; 2], r: f64| (x - c[0]).hypot(y - c[1]) <= r + 1e-12;
                    let expect = if hit(s.gripper, s.params.gripper_radius) {
                        GRIPPER_OPEN
                    } else if let Some(o) = s
                        .objects
                        .iter()
                        .filter(|o| hit(o.center, o.radius))
                        .max_by_key(|o| o.z_order)
                    {
                        object_color(o.color)
                    } else if hit(s.goal.center, s.goal.radius) {
                        GOAL
                    } else {
                        BACKGROUND
                    };
                    assert_eq!(img.pixel(px, py), expect, "seed {seed} pixel ({px},{py})");
                }
            }
        }
    }
}
