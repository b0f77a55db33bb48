//! Runs the scripted expert on both tasks and saves a filmstrip of one
//! episode per task.

use trackwam::simenv::{expert_episode, EnvConfig, Image};

fn filmstrip(frames: &[Image], every: usize) -> Image {
    let picked: Vec<&Image> = frames.iter().step_by(every).collect();
    let (w, h) = (frames[0].width, frames[0].height);
    let mut out = Image::filled(w * picked.len(), h, [0, 0, 0]);
    for (k, f) in picked.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out.put(k * w + x, y, f.pixel(x, y));
            }
        }
    }
    out
}

fn main() -> trackwam::Result<()> {
    let dir = std::env::temp_dir().join("trackwam_sandbox");
    std::fs::create_dir_all(&dir).map_err(|e| trackwam::Error::io(&dir, e))?;
    for (name, env) in [("push", EnvConfig::push()), ("occluded_pick_place", EnvConfig::occlusion_pick_place())] {
        let eps = (0..100).map(|s| expert_episode(&env, s)).collect::<trackwam::Result<Vec<_>>>()?;
        let sr = eps.iter().filter(|e| e.success).count() as f64 / eps.len() as f64;
        let mean_len = eps.iter().map(|e| e.len()).sum::<usize>() as f64 / eps.len() as f64;
        println!("{name:<20} expert success {sr:.2}  mean length {mean_len:.1}");
        let path = dir.join(format!("{name}.png"));
        filmstrip(&eps[0].observations, 3).upscale(4).save_png(&path)?;
        println!("  {}", path.display());
    }
    Ok(())
}
