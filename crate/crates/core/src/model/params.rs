use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::grad::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Normal(f64),
    /// One normal draw shared by every row.
    RepeatRow(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(out: &mut Vec<ParamSpec>, name: impl Into<String>, shape: &[usize], init: Init) {
    out.push(ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    });
}

fn xavier(inp: usize, out: usize) -> Init {
    Init::Normal((2.0 / (inp + out) as f64).sqrt())
}

fn linear(out: &mut Vec<ParamSpec>, name: &str, inp: usize, outp: usize, w: Init) {
    spec(out, format!("{name}.w"), &[inp, outp], w);
    spec(out, format!("{name}.b"), &[outp], Init::Zeros);
}

const EMBED_STD: f64 = 0.02;

/// Every parameter of a configuration, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.hidden;
    let v = cfg.variant;
    let mut s = Vec::new();
    let mut cin = cfg.cond_in_channels();
    for (i, &c) in cfg.cond_channels.iter().enumerate() {
        linear(&mut s, &format!("cond.conv{i}"), 9 * cin, c, Init::Normal((2.0 / (9 * cin) as f64).sqrt()));
        cin = c;
    }
    linear(&mut s, "cond.proj", cin, d, xavier(cin, d));
    linear(&mut s, "time.fc1", d, d, xavier(d, d));
    linear(&mut s, "time.fc2", d, d, xavier(d, d));
    spec(&mut s, "time.null", &[1, d], Init::Normal(EMBED_STD));
    linear(&mut s, "embed.action", cfg.action_dim, d, xavier(cfg.action_dim, d));
    if v.has_obs() {
        linear(&mut s, "embed.obs", cfg.obs_patch_dim(), d, xavier(cfg.obs_patch_dim(), d));
    }
    if v.has_track() {
        let pt = cfg.track.token_input_dim();
        linear(&mut s, "embed.track", pt, d, xavier(pt, d));
    }
    if cfg.registers > 0 {
        spec(&mut s, "embed.register", &[cfg.registers, d], Init::RepeatRow(EMBED_STD));
    }
    spec(&mut s, "pos.action", &[cfg.chunk, d], Init::Normal(EMBED_STD));
    if v.has_obs() {
        spec(&mut s, "pos.obs", &[cfg.obs_tokens(), d], Init::Normal(EMBED_STD));
    }
    if v.has_track() {
        spec(&mut s, "pos.track", &[cfg.track_tokens(), d], Init::Normal(EMBED_STD));
    }
    if cfg.registers > 0 {
        spec(&mut s, "pos.register", &[cfg.registers, d], Init::Normal(EMBED_STD));
    }
    spec(&mut s, "type", &[4, d], Init::Normal(EMBED_STD));
    let m = cfg.mlp_ratio * d;
    for i in 0..cfg.depth {
        let b = format!("block{i}");
        linear(&mut s, &format!("{b}.ada"), d, 6 * d, Init::Zeros);
        linear(&mut s, &format!("{b}.qkv"), d, 3 * d, xavier(d, d));
        linear(&mut s, &format!("{b}.proj"), d, d, xavier(d, d));
        linear(&mut s, &format!("{b}.fc1"), d, m, xavier(d, m));
        linear(&mut s, &format!("{b}.fc2"), m, d, xavier(m, d));
    }
    linear(&mut s, "final.ada", d, 2 * d, Init::Zeros);
    linear(&mut s, "head.action", d, cfg.action_dim, xavier(d, cfg.action_dim));
    if v.has_obs() {
        linear(&mut s, "head.obs", d, cfg.obs_patch_dim(), xavier(d, cfg.obs_patch_dim()));
    }
    if v.has_track() {
        let pt = cfg.track.token_input_dim();
        linear(&mut s, "head.track", d, pt, xavier(d, pt));
    }
    if v.has_visibility() {
        let pv = cfg.track.patch_volume();
        linear(&mut s, "head.vis", d, pv, xavier(d, pv));
    }
    s
}

/// Parameters that only the action tokens use.
pub fn is_action_branch(name: &str) -> bool {
    name.starts_with("embed.action.") || name.starts_with("head.action.") || name == "pos.action"
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let named = param_specs(cfg)
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Zeros => vec![F::zero(); n],
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("valid std");
                        (0..n).map(|_| F::of(dist.sample(&mut rng))).collect()
                    }
                    Init::RepeatRow(std) => {
                        let dist = Normal::new(0.0, std).expect("valid std");
                        let cols = *s.shape.last().unwrap();
                        let row: Vec<F> = (0..cols).map(|_| F::of(dist.sample(&mut rng))).collect();
                        row.iter().copied().cycle().take(n).collect()
                    }
                };
                (s.name, Tensor::new(&s.shape, data))
            })
            .collect();
        Self::from_named(named)
    }

    pub fn from_named(named: Vec<(String, Tensor<F>)>) -> Self {
        let (names, tensors): (Vec<_>, Vec<_>) = named.into_iter().unzip();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, tensors, index }
    }

    /// Checks names and shapes against the configuration.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        for s in &specs {
            let t = self
                .get(&s.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        if specs.len() != self.len() {
            let extra: Vec<&str> = self
                .names
                .iter()
                .filter(|n| !specs.iter().any(|s| &s.name == *n))
                .map(String::as_str)
                .collect();
            return Err(Error::Checkpoint(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Puts every parameter on the tape; `trainable(name)` decides whether
    /// it receives gradients.
    pub fn bind_with(&self, g: &mut Graph<F>, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .iter()
            .map(|(n, t)| {
                if trainable(n) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> BoundParams {
        self.bind_with(g, |_| trainable)
    }
}

/// Tape handles of a bound [`ParamStore`], aligned with its order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter {name} is not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{VariantConfig, VariantMode};
    use std::collections::BTreeSet;

    fn names(cfg: &ModelConfig) -> BTreeSet<String> {
        param_specs(cfg).into_iter().map(|s| s.name).collect()
    }

    #[test]
    fn init_is_deterministic_and_validates() {
        let cfg = ModelConfig::tiny();
        let a = ParamStore::<f64>::init(&cfg, 1);
        assert_eq!(a, ParamStore::<f64>::init(&cfg, 1));
        assert_ne!(a, ParamStore::<f64>::init(&cfg, 2));
        a.validate(&cfg).unwrap();
        assert!(a.tensors()[a.position("block0.ada.w").unwrap()].data().iter().all(|&x| x == 0.0));
        let reg = a.get("embed.register").unwrap().data();
        assert_eq!(reg[..16], reg[16..32]);
    }

    #[test]
    fn ablated_variants_have_strictly_fewer_parameters() {
        let joint = ModelConfig::desk();
        let jn = names(&joint);
        let count = |c: &ModelConfig| ParamStore::<f32>::init(c, 0).num_scalars();
        for (mode, vis, dropped) in [
            (VariantMode::LatentOnly, true, "track"),
            (VariantMode::TrackOnly, true, "obs"),
            (VariantMode::Joint, false, "vis"),
        ] {
            let c = joint.clone().with_variant(VariantConfig::new(mode, vis));
            let n = names(&c);
            assert!(n.is_subset(&jn));
            assert!(count(&c) < count(&joint));
            assert!(n.iter().all(|x| !x.contains(&format!(".{dropped}"))));
        }
    }

    #[test]
    fn validation_reports_mismatches() {
        let cfg = ModelConfig::tiny();
        let p = ParamStore::<f32>::init(&cfg, 0);
        let mut named: Vec<(String, Tensor<f32>)> =
            p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        named[0].1 = Tensor::zeros(&[1]);
        let err = ParamStore::from_named(named.clone()).validate(&cfg).unwrap_err();
        assert!(err.to_string().contains("cond.conv0.w"));
        named.remove(0);
        assert!(ParamStore::from_named(named).validate(&cfg).is_err());
    }
}
