//! Ground-truth point tracks for one expert episode: per-window motion,
//! visibility and the token round-trip error.

use trackwam::simenv::{expert_episode, EnvConfig};
use trackwam::trackspace::{build_sliding_windows, decode_tracks, patchify, tracks_to_grid, TrackConfig};

fn main() -> trackwam::Result<()> {
    let env = EnvConfig::occlusion_pick_place();
    let cfg = TrackConfig::desk();
    let ep = expert_episode(&env, 3)?;
    let windows = build_sliding_windows(&ep, &cfg, 4, env.resolution)?;
    println!("{} frames, {} windows of {} points x {} steps", ep.states.len(), windows.len(), cfg.num_points(), cfg.horizon);
    for w in &windows {
        let n = w.num_points();
        let last = &w.coords[(cfg.horizon - 1) * n * 2..];
        let first = &w.coords[..n * 2];
        let moved = (0..n)
            .filter(|&i| (last[2 * i] - first[2 * i]).hypot(last[2 * i + 1] - first[2 * i + 1]) > 0.5)
            .count();
        let visible = w.visible.iter().filter(|&&v| v == 1).count() as f64 / w.visible.len() as f64;
        let tokens = patchify(&tracks_to_grid(w, &cfg, env.resolution)?, &cfg, 2);
        let back = decode_tracks(&tokens, &cfg, env.resolution)?;
        let err = back.iter().zip(&w.coords).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("t={:<3} moving points {moved:<3} visible {visible:.2}  round-trip max error {err:.1e} px", w.reference_index);
    }
    Ok(())
}
