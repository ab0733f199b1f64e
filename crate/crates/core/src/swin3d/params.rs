use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{ModelConfig, Variant};
use crate::autodiff::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, σ) resampled until inside ±2σ.
    TruncNormal(f64),
    /// Uniform(−b, b).
    Uniform(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, c_out: usize, c_in: usize, k: usize) {
    let fan_in = (c_in * k * k * k) as f64;
    out.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![c_out, c_in, k, k, k],
        init: Init::Uniform(1.0 / fan_in.sqrt()),
    });
    out.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: vec![c_out],
        init: Init::Zeros,
    });
}

fn linear_specs(out: &mut Vec<ParamSpec>, name: &str, c_in: usize, c_out: usize) {
    out.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![c_in, c_out],
        init: Init::TruncNormal(0.02),
    });
    out.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: vec![c_out],
        init: Init::Zeros,
    });
}

fn norm_specs(out: &mut Vec<ParamSpec>, name: &str, c: usize) {
    out.push(ParamSpec {
        name: format!("{name}.gamma"),
        shape: vec![c],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{name}.beta"),
        shape: vec![c],
        init: Init::Zeros,
    });
}

fn deep_specs(out: &mut Vec<ParamSpec>, cfg: &ModelConfig, prefix: &str) {
    let c = cfg.c_emb;
    let rows = (2 * cfg.window - 1).pow(3);
    for r in 0..cfg.k_rstb {
        for l in 0..cfg.l_stl {
            let p = format!("{prefix}.rstb{r}.stl{l}");
            norm_specs(out, &format!("{p}.norm1"), c);
            linear_specs(out, &format!("{p}.attn.qkv"), c, 3 * c);
            out.push(ParamSpec {
                name: format!("{p}.attn.rel_bias"),
                shape: vec![rows, cfg.heads],
                init: Init::TruncNormal(0.02),
            });
            linear_specs(out, &format!("{p}.attn.proj"), c, c);
            norm_specs(out, &format!("{p}.norm2"), c);
            linear_specs(out, &format!("{p}.mlp.fc1"), c, cfg.mlp_hidden());
            linear_specs(out, &format!("{p}.mlp.fc2"), cfg.mlp_hidden(), c);
        }
        conv_specs(out, &format!("{prefix}.rstb{r}.conv"), c, c, 3);
    }
    conv_specs(out, &format!("{prefix}.conv"), c, c, 3);
}

/// Prefixes of the deep extractors a configuration instantiates, in the
/// order (feature branch, volume branch).
pub fn deep_prefixes(cfg: &ModelConfig) -> (Option<&'static str>, Option<&'static str>) {
    match (cfg.variant, cfg.share_branch_weights) {
        (Variant::Full, false) => (Some("deep.feature"), Some("deep.volume")),
        (Variant::Full, true) => (Some("deep.shared"), Some("deep.shared")),
        (Variant::SrFeatures, _) => (Some("deep.feature"), None),
        (Variant::SrVolume, _) => (None, Some("deep.volume")),
        (Variant::SrAvg, _) => (Some("deep.shared"), None),
    }
}

/// Every trainable tensor of a configuration, in a stable order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.c_emb;
    let p = cfg.patch;
    let mut out = Vec::new();
    conv_specs(&mut out, "shallow.conv", c, 1, 3);
    let (use_feature, use_volume) = match cfg.variant {
        Variant::Full | Variant::SrAvg => (true, true),
        Variant::SrFeatures => (true, false),
        Variant::SrVolume => (false, true),
    };
    if use_feature {
        conv_specs(&mut out, "embed.feature", c, c, p);
    }
    if use_volume {
        conv_specs(&mut out, "embed.volume", c, 1, p);
    }
    let (a, b) = deep_prefixes(cfg);
    let mut seen = Vec::new();
    for prefix in [a, b].into_iter().flatten() {
        if !seen.contains(&prefix) {
            deep_specs(&mut out, cfg, prefix);
            seen.push(prefix);
        }
    }
    conv_specs(&mut out, "recon.conv3", c, c, 3);
    conv_specs(&mut out, "recon.conv1", 1, c, 1);
    out
}

/// Exact number of trainable scalars.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// Deterministic initialization from `seed`, drawing in spec order.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in param_specs(cfg) {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::ones(&spec.shape),
                Init::Uniform(b) => Tensor::uniform(&spec.shape, -b, b, &mut rng),
                Init::TruncNormal(std) => Tensor::from_fn(&spec.shape, |_| loop {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if z.abs() <= 2.0 {
                        break T::from_f64(z * std);
                    }
                }),
            };
            tensors.insert(spec.name, t);
        }
        Self { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    /// Zeroes every tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, v) in self.tensors.iter_mut() {
            if k.starts_with(prefix) {
                v.data_mut().fill(T::zero());
            }
        }
    }

    /// Checks names and shapes against a configuration.
    pub fn matches(&self, cfg: &ModelConfig) -> bool {
        let specs = param_specs(cfg);
        specs.len() == self.tensors.len()
            && specs
                .iter()
                .all(|s| self.tensors.get(&s.name).is_some_and(|t| t.shape() == s.shape.as_slice()))
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pointwise_conv_has_two_params() {
        let mut specs = Vec::new();
        conv_specs(&mut specs, "c", 1, 1, 1);
        let n: usize = specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        assert_eq!(n, 2);
    }

    #[test]
    fn bias_table_size_for_paper_window() {
        let cfg = ModelConfig::default();
        let specs = param_specs(&cfg);
        let table = specs.iter().find(|s| s.name.ends_with("attn.rel_bias")).unwrap();
        assert_eq!(table.shape.iter().product::<usize>(), 20_250);
    }

    #[test]
    fn variant_param_ordering() {
        let mut cfg = ModelConfig::toy();
        let full = param_count(&cfg);
        cfg.variant = Variant::SrAvg;
        let avg = param_count(&cfg);
        cfg.variant = Variant::SrFeatures;
        let feat = param_count(&cfg);
        cfg.variant = Variant::SrVolume;
        let vol = param_count(&cfg);
        assert!(full > avg && avg > feat && feat > vol);
        let mut shared = ModelConfig::toy();
        shared.share_branch_weights = true;
        assert_eq!(param_count(&shared), avg);
    }

    #[test]
    fn init_is_deterministic_and_matches_specs() {
        let cfg = ModelConfig::toy();
        let a = ParamStore::<f32>::init(&cfg, 3);
        assert_eq!(a, ParamStore::<f32>::init(&cfg, 3));
        assert_ne!(a, ParamStore::<f32>::init(&cfg, 4));
        assert!(a.matches(&cfg));
        assert_eq!(a.scalar_count(), param_count(&cfg));
    }
}
