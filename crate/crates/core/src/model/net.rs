use crate::grad::{ConvGeom, Graph, Real, Tensor, Var};
use crate::scheduler::{ModalityTimesteps, Schedule};
use crate::trackspace::{self, TRACK_INPUT_CHANNELS};
use crate::{Error, Result};

use super::latent::obs_patch_indices;
use super::params::BoundParams;
use super::{HeadTarget, Modality, ModelConfig};

const LN_EPS: f64 = 1e-6;

/// One batch of noisy diffusion states plus conditioning.
#[derive(Debug, Clone, Copy)]
pub struct ForwardInputs<'a, F> {
    pub batch: usize,
    /// `[B, R, R, 8]` from [`super::prepare_condition`].
    pub cond: &'a [F],
    /// `[B, K, A]` normalized noisy actions.
    pub actions: &'a [F],
    /// `[B, F, g, g, ch]` noisy latents; empty when the variant has no obs.
    pub obs: &'a [F],
    /// `[B, 2, H_pp, H_g, W_g]` noisy track grids; empty without tracks.
    pub tracks: &'a [F],
    pub taus: &'a [ModalityTimesteps],
    pub schedule: &'a Schedule,
}

/// Tape handles of the network outputs. Obs and track predictions stay in
/// token layout; use [`tokens_to_obs`] / [`tokens_to_tracks`] to fold them
/// back.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[B·K, A]`.
    pub eps_action: Var,
    /// `[B·L_o, p·p·ch]`.
    pub eps_obs: Option<Var>,
    /// `[B·L_p, 2·p_t·p_h·p_w]`.
    pub eps_track: Option<Var>,
    /// `[B·L_p, p_t·p_h·p_w]` visibility logits per patch cell.
    pub vis_logits: Option<Var>,
    /// Per-token AdaLN conditioning input `[B·L, d]`.
    pub cond_tokens: Var,
    /// Pooled conditioning feature `c_t`, `[B, d]`.
    pub cond: Var,
}

/// Sinusoidal embedding of a raw timestep index: `d/2` cosines then `d/2`
/// sines over a geometric frequency ladder from 1 down to 1/10000.
pub fn timestep_embedding(tau: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64).ln() * i as f64 / half as f64).exp())
        .collect();
    let t = tau as f64;
    freqs
        .iter()
        .map(|f| (t * f).cos())
        .chain(freqs.iter().map(|f| (t * f).sin()))
        .collect()
}

pub fn obs_to_tokens<F: Real>(cfg: &ModelConfig, obs: &[F], batch: usize) -> Vec<F> {
    let n = cfg.obs_state_len();
    let idx = obs_patch_indices(cfg);
    (0..batch)
        .flat_map(|b| idx.iter().map(move |&i| b * n + i))
        .map(|i| obs[i])
        .collect()
}

pub fn tokens_to_obs<F: Real>(cfg: &ModelConfig, tokens: &[F], batch: usize) -> Vec<F> {
    let n = cfg.obs_state_len();
    let idx = obs_patch_indices(cfg);
    let mut out = vec![F::zero(); batch * n];
    for b in 0..batch {
        for (k, &i) in idx.iter().enumerate() {
            out[b * n + i] = tokens[b * n + k];
        }
    }
    out
}

pub fn tracks_to_tokens<F: Real>(cfg: &ModelConfig, tracks: &[F], batch: usize) -> Vec<F> {
    let n = cfg.track_state_len();
    tracks
        .chunks(n)
        .take(batch)
        .flat_map(|g| trackspace::patchify(g, &cfg.track, TRACK_INPUT_CHANNELS))
        .collect()
}

pub fn tokens_to_tracks<F: Real>(cfg: &ModelConfig, tokens: &[F], batch: usize) -> Vec<F> {
    let n = cfg.track_state_len();
    tokens
        .chunks(n)
        .take(batch)
        .flat_map(|t| trackspace::unpatchify(t, &cfg.track, TRACK_INPUT_CHANNELS))
        .collect()
}

/// Flat positions in the visibility logits `[B·L_p, p_t·p_h·p_w]` of every
/// `(b, τ < H_p, point)`, matching targets laid out `[B, H_p, N]`.
pub fn visibility_logit_indices(cfg: &ModelConfig, batch: usize) -> Vec<usize> {
    let per = cfg.track.num_tokens() * cfg.track.patch_volume();
    let idx = trackspace::visibility_indices(&cfg.track);
    (0..batch)
        .flat_map(|b| idx.iter().map(move |&i| b * per + i))
        .collect()
}

/// `E_c`: strided 3×3 conv blocks with SiLU, global average pool, linear.
pub fn encode_condition<F: Real>(
    g: &mut Graph<F>,
    p: &BoundParams,
    cfg: &ModelConfig,
    cond: &[F],
    batch: usize,
) -> Result<Var> {
    let (r, cin) = (cfg.resolution, cfg.cond_in_channels());
    if cond.len() != batch * r * r * cin {
        return Err(Error::Shape(format!(
            "conditioning input has {} values, expected {batch}x{r}x{r}x{cin}",
            cond.len()
        )));
    }
    let mut x = g.constant(Tensor::new(&[batch, r, r, cin], cond.to_vec()));
    let (mut h, mut c) = (r, cin);
    for (i, &out) in cfg.cond_channels.iter().enumerate() {
        let geom = ConvGeom {
            batch,
            height: h,
            width: h,
            in_ch: c,
            out_ch: out,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let y = g.conv2d(x, p.get(&format!("cond.conv{i}.w")), p.get(&format!("cond.conv{i}.b")), geom);
        x = g.silu(y);
        h = geom.out_height();
        c = out;
    }
    let pooled = g.mean_mid(x, batch, h * h, c);
    Ok(g.linear(pooled, p.get("cond.proj.w"), Some(p.get("cond.proj.b"))))
}

fn segment<F: Real>(g: &mut Graph<F>, p: &BoundParams, name: &str, tokens: &[F], rows: usize, width: usize) -> Var {
    let x = g.constant(Tensor::new(&[rows, width], tokens.to_vec()));
    g.linear(x, p.get(&format!("embed.{name}.w")), Some(p.get(&format!("embed.{name}.b"))))
}

/// Token sequence `[B·L, d]` from token-layout inputs: per-modality linear
/// embeddings (registers are learned), plus positional and modality-type
/// embeddings.
pub fn embed_tokens<F: Real>(
    g: &mut Graph<F>,
    p: &BoundParams,
    cfg: &ModelConfig,
    batch: usize,
    actions: &[F],
    obs_tokens: &[F],
    track_tokens: &[F],
) -> Var {
    let d = cfg.hidden;
    let v = cfg.variant;
    let mut parts = Vec::new();
    let mut pos = Vec::new();
    let a = segment(g, p, "action", actions, batch * cfg.chunk, cfg.action_dim);
    parts.push(g.reshape(a, &[batch, cfg.chunk * d]));
    pos.push(p.get("pos.action"));
    if v.has_obs() {
        let lo = cfg.obs_tokens();
        let o = segment(g, p, "obs", obs_tokens, batch * lo, cfg.obs_patch_dim());
        parts.push(g.reshape(o, &[batch, lo * d]));
        pos.push(p.get("pos.obs"));
    }
    if v.has_track() {
        let lp = cfg.track_tokens();
        let t = segment(g, p, "track", track_tokens, batch * lp, cfg.track.token_input_dim());
        parts.push(g.reshape(t, &[batch, lp * d]));
        pos.push(p.get("pos.track"));
    }
    if cfg.registers > 0 {
        let rows = (0..batch).flat_map(|_| 0..cfg.registers).collect();
        let r = g.gather_rows(p.get("embed.register"), rows);
        parts.push(g.reshape(r, &[batch, cfg.registers * d]));
        pos.push(p.get("pos.register"));
    }
    let l = cfg.seq_len();
    let x = g.concat(&parts, batch);
    let x = g.reshape(x, &[batch * l, d]);
    let pos = g.concat(&pos, 1);
    let tags = cfg.token_tags().into_iter().map(|t| t as usize).collect();
    let types = g.gather_rows(p.get("type"), tags);
    let types = g.reshape(types, &[1, l * d]);
    let pos = g.add(pos, types);
    g.add_tiled(x, pos)
}

fn check_len<F>(what: &str, x: &[F], expected: usize) -> Result<()> {
    if x.len() != expected {
        return Err(Error::Shape(format!("{what} has {} values, expected {expected}", x.len())));
    }
    Ok(())
}

fn check_finite<F: Real>(what: &str, x: &[F]) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value in {what}")));
    }
    Ok(())
}

/// Full denoiser pass.
pub fn forward<F: Real>(
    g: &mut Graph<F>,
    p: &BoundParams,
    cfg: &ModelConfig,
    inp: &ForwardInputs<'_, F>,
) -> Result<ForwardOutput> {
    let b = inp.batch;
    let v = cfg.variant;
    let (d, l) = (cfg.hidden, cfg.seq_len());
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    check_len("action state", inp.actions, b * cfg.action_state_len())?;
    check_len("obs state", inp.obs, if v.has_obs() { b * cfg.obs_state_len() } else { 0 })?;
    check_len("track state", inp.tracks, if v.has_track() { b * cfg.track_state_len() } else { 0 })?;
    if inp.taus.len() != b {
        return Err(Error::Shape(format!("{} timestep triples for a batch of {b}", inp.taus.len())));
    }
    for (what, x) in [("conditioning", inp.cond), ("actions", inp.actions), ("obs", inp.obs), ("tracks", inp.tracks)] {
        check_finite(what, x)?;
    }

    let c = encode_condition(g, p, cfg, inp.cond, b)?;
    let obs_tokens = if v.has_obs() { obs_to_tokens(cfg, inp.obs, b) } else { Vec::new() };
    let track_tokens = if v.has_track() { tracks_to_tokens(cfg, inp.tracks, b) } else { Vec::new() };
    let mut x = embed_tokens(g, p, cfg, b, inp.actions, &obs_tokens, &track_tokens);

    // per-token conditioning: c_t plus the token's own modality timestep
    let mut temb = Vec::with_capacity(b * 3 * d);
    for t in inp.taus {
        for tau in [t.tau_a, t.tau_o, t.tau_p] {
            temb.extend(timestep_embedding(tau, d).into_iter().map(F::of));
        }
    }
    let temb = g.constant(Tensor::new(&[b * 3, d], temb));
    let h = g.linear(temb, p.get("time.fc1.w"), Some(p.get("time.fc1.b")));
    let h = g.silu(h);
    let h = g.linear(h, p.get("time.fc2.w"), Some(p.get("time.fc2.b")));
    let h = g.reshape(h, &[b, 3 * d]);
    let null = g.gather_rows(p.get("time.null"), vec![0; b]);
    let table = g.concat(&[h, null], b);
    let table = g.reshape(table, &[b * 4, d]);
    let tags = cfg.token_tags();
    let rows: Vec<usize> = (0..b).flat_map(|bi| tags.iter().map(move |&t| bi * 4 + t as usize)).collect();
    let tok_t = g.gather_rows(table, rows);
    let tok_c = g.gather_rows(c, (0..b).flat_map(|bi| std::iter::repeat(bi).take(l)).collect());
    let cond_tokens = g.add(tok_t, tok_c);
    let act = g.silu(cond_tokens);

    for i in 0..cfg.depth {
        let name = |s: &str| format!("block{i}.{s}");
        let m = g.linear(act, p.get(&name("ada.w")), Some(p.get(&name("ada.b"))));
        let chunk = |g: &mut Graph<F>, k: usize| g.slice_cols(m, 6 * d, k * d, d);
        let (sh1, sc1, ga1, sh2, sc2, ga2) =
            (chunk(g, 0), chunk(g, 1), chunk(g, 2), chunk(g, 3), chunk(g, 4), chunk(g, 5));

        let h = modulate(g, x, sh1, sc1);
        let qkv = g.linear(h, p.get(&name("qkv.w")), Some(p.get(&name("qkv.b"))));
        let att = g.attention(qkv, b, l, cfg.heads);
        let o = g.linear(att, p.get(&name("proj.w")), Some(p.get(&name("proj.b"))));
        let o = g.mul(ga1, o);
        x = g.add(x, o);

        let h = modulate(g, x, sh2, sc2);
        let h = g.linear(h, p.get(&name("fc1.w")), Some(p.get(&name("fc1.b"))));
        let h = g.gelu(h);
        let h = g.linear(h, p.get(&name("fc2.w")), Some(p.get(&name("fc2.b"))));
        let h = g.mul(ga2, h);
        x = g.add(x, h);
    }

    let m = g.linear(act, p.get("final.ada.w"), Some(p.get("final.ada.b")));
    let sh = g.slice_cols(m, 2 * d, 0, d);
    let sc = g.slice_cols(m, 2 * d, d, d);
    let hidden = modulate(g, x, sh, sc);

    let rows_of = |want: Modality| -> Vec<usize> {
        (0..b)
            .flat_map(|bi| {
                tags.iter()
                    .enumerate()
                    .filter(move |(_, &t)| t == want)
                    .map(move |(li, _)| bi * l + li)
            })
            .collect()
    };
    let head = |g: &mut Graph<F>, rows: Vec<usize>, name: &str| {
        let h = g.gather_rows(hidden, rows);
        g.linear(h, p.get(&format!("head.{name}.w")), Some(p.get(&format!("head.{name}.b"))))
    };
    let mut eps_action = head(g, rows_of(Modality::Action), "action");
    if cfg.action_target == HeadTarget::Sample {
        let taus: Vec<usize> = inp.taus.iter().map(|t| t.tau_a).collect();
        eps_action = sample_to_eps(g, eps_action, inp.actions, &taus, inp.schedule);
    }
    let sample = cfg.obs_track_target == HeadTarget::Sample;
    let eps_obs = v.has_obs().then(|| {
        let out = head(g, rows_of(Modality::Obs), "obs");
        if sample {
            let taus: Vec<usize> = inp.taus.iter().map(|t| t.tau_o).collect();
            sample_to_eps(g, out, &obs_tokens, &taus, inp.schedule)
        } else {
            out
        }
    });
    let (eps_track, vis_logits) = if v.has_track() {
        let rows = rows_of(Modality::Track);
        let mut t = head(g, rows.clone(), "track");
        if sample {
            let taus: Vec<usize> = inp.taus.iter().map(|t| t.tau_p).collect();
            t = sample_to_eps(g, t, &track_tokens, &taus, inp.schedule);
        }
        let vis = v.has_visibility().then(|| head(g, rows, "vis"));
        (Some(t), vis)
    } else {
        (None, None)
    };
    Ok(ForwardOutput {
        eps_action,
        eps_obs,
        eps_track,
        vis_logits,
        cond_tokens,
        cond: c,
    })
}

/// `(x_τ − √ᾱ x̂0) / √(1 − ᾱ)` per example, for `x̂0` rows laid out like
/// the noisy `tokens`.
fn sample_to_eps<F: Real>(g: &mut Graph<F>, x0: Var, tokens: &[F], taus: &[usize], sched: &Schedule) -> Var {
    let per = tokens.len() / taus.len();
    let (mut skip, mut coef) = (Vec::with_capacity(tokens.len()), Vec::with_capacity(tokens.len()));
    for (chunk, &tau) in tokens.chunks(per).zip(taus) {
        let ab = sched.alpha_bar(tau);
        let sigma = (1.0 - ab).sqrt();
        let inv = F::of(1.0 / sigma);
        skip.extend(chunk.iter().map(|&x| x * inv));
        coef.extend(std::iter::repeat(F::of(-ab.sqrt() / sigma)).take(per));
    }
    let shape = g.value(x0).shape().to_vec();
    let skip = g.constant(Tensor::new(&shape, skip));
    let coef = g.constant(Tensor::new(&shape, coef));
    let scaled = g.mul(coef, x0);
    g.add(skip, scaled)
}

/// `LN(x) · (1 + scale) + shift`.
fn modulate<F: Real>(g: &mut Graph<F>, x: Var, shift: Var, scale: Var) -> Var {
    let h = g.layer_norm(x, LN_EPS);
    let s = g.offset(scale, F::one());
    let h = g.mul(h, s);
    g.add(h, shift)
}
