//! Named parameter tensors and their initialisation.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{config_err, Result};
use crate::math;
use crate::tensor::Tensor;

/// Ordered collection of named parameters.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        if let Some(&i) = self.index.get(name) {
            self.tensors[i] = t;
            return;
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { index: self.index.clone(), vars }
    }

    /// Binds already-created tape variables, one per parameter in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != self.len() {
            return Err(config_err!("{} variables for {} parameters", vars.len(), self.len()));
        }
        Ok(Bound { index: self.index.clone(), vars })
    }

    /// Checks that `other` holds exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(config_err!("parameter name sets differ"));
        }
        for ((n, a), b) in self.names.iter().zip(&self.tensors).zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(config_err!("parameter {n}: shape {:?} vs {:?}", a.shape(), b.shape()));
            }
        }
        Ok(())
    }
}

/// Parameters as tape variables for one pass.
#[derive(Clone, Debug)]
pub struct Bound {
    index: BTreeMap<String, usize>,
    vars: Vec<Var>,
}

impl Bound {
    /// Variable for `name`.
    ///
    /// Panics on unknown names: those are programming errors, not data errors.
    pub fn get(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    /// Variables in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            z * std
        })
    }

    fn conv(&mut self, store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize) {
        let std = math::sqrt(2.0 / (cin * k * k) as f64);
        store.insert(&alloc::format!("{name}.weight"), self.normal(&[cout, cin, k, k], std));
        store.insert(&alloc::format!("{name}.bias"), Tensor::zeros(&[cout]));
    }
}

/// Freshly initialised parameters for `cfg`, fully determined by `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
    let mut s = ParamStore::new();
    let (dp, d, c) = (cfg.pyramid_dim, cfg.feature_dim, cfg.parts);
    let g = cfg.group_dim();

    init.conv(&mut s, "backbone.stem", cfg.stem_dim, 3, 3);
    init.conv(&mut s, "backbone.block1", cfg.block1_dim, cfg.stem_dim, 3);
    init.conv(&mut s, "backbone.block2", dp, cfg.block1_dim, 3);
    init.conv(&mut s, "backbone.block3", dp, dp, 3);
    init.conv(&mut s, "backbone.block4", dp, dp, 3);
    init.conv(&mut s, "backbone.p6", dp, dp, 3);
    init.conv(&mut s, "backbone.p7", dp, dp, 3);

    for l in 3..=5 {
        init.conv(&mut s, &alloc::format!("mask.lateral{l}"), d, dp, 1);
    }
    init.conv(&mut s, "mask.fuse", d, d, 3);

    init.conv(&mut s, "head.tower1", dp, dp, 3);
    init.conv(&mut s, "head.tower2", dp, dp, 3);
    let prior_bias = -math::ln((1.0 - cfg.prior_prob) / cfg.prior_prob);
    s.insert("head.center.weight", init.normal(&[1, dp, 1, 1], 0.01));
    s.insert("head.center.bias", Tensor::full(&[1], prior_bias));
    s.insert("head.box.weight", init.normal(&[4, dp, 1, 1], 0.01));
    s.insert("head.box.bias", Tensor::zeros(&[4]));
    s.insert("head.offset.weight", init.normal(&[2 * c, dp, 1, 1], 0.01));
    s.insert("head.offset.bias", Tensor::zeros(&[2 * c]));

    let zin = 2 * d;
    s.insert("parse.relation.weight", init.normal(&[1, zin], 0.1));
    s.insert("parse.relation.bias", Tensor::zeros(&[1]));
    s.insert("parse.readjust.weight", init.normal(&[d, c * d], math::sqrt(1.0 / (c * d) as f64)));
    s.insert("parse.readjust.bias", Tensor::zeros(&[d]));
    // Generator biases hold a He-initialised static kernel; the weights add a
    // small input-conditioned part on top.
    let vstd = 0.1 / math::sqrt(zin as f64);
    s.insert("parse.kernel_f.weight", init.normal(&[cfg.projector_params(), zin], vstd));
    let mut static_f = Vec::with_capacity(cfg.projector_params());
    let mut cin = d;
    for _ in 1..cfg.depth {
        static_f.extend(init.normal(&[cfg.width * cin], math::sqrt(2.0 / cin as f64)).into_data());
        static_f.extend(core::iter::repeat_n(0.0, cfg.width));
        cin = cfg.width;
    }
    s.insert("parse.kernel_f.bias", Tensor::new(&[cfg.projector_params()], static_f).expect("projector layout"));
    s.insert("parse.kernel_o.weight", init.normal(&[cfg.mask_kernel_params(), zin], vstd));
    let mut static_o = init.normal(&[c * g], math::sqrt(1.0 / g as f64)).into_data();
    static_o.extend(core::iter::repeat_n(0.0, c));
    s.insert("parse.kernel_o.bias", Tensor::new(&[cfg.mask_kernel_params()], static_o).expect("mask kernel layout"));
    for k in 0..c {
        // Identity on the group's features plus random geometry weights.
        let mut w = init.normal(&[g, g + 2, 1, 1], 0.1);
        for i in 0..g {
            w.data_mut()[i * (g + 2) + i] += 1.0;
        }
        for i in 0..g {
            for j in g..g + 2 {
                w.data_mut()[i * (g + 2) + j] *= 10.0;
            }
        }
        s.insert(&alloc::format!("parse.part{k}.weight"), w);
        s.insert(&alloc::format!("parse.part{k}.bias"), Tensor::zeros(&[g]));
    }
    s
}

/// Parameter count implied by `cfg`, computed from shapes alone.
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
    let (dp, d, c, g) = (cfg.pyramid_dim, cfg.feature_dim, cfg.parts, cfg.group_dim());
    let backbone = conv(cfg.stem_dim, 3, 3)
        + conv(cfg.block1_dim, cfg.stem_dim, 3)
        + conv(dp, cfg.block1_dim, 3)
        + 4 * conv(dp, dp, 3);
    let mask = 3 * conv(d, dp, 1) + conv(d, d, 3);
    let head = 2 * conv(dp, dp, 3) + conv(1, dp, 1) + conv(4, dp, 1) + conv(2 * c, dp, 1);
    let parse = (2 * d + 1)
        + (c * d * d + d)
        + (cfg.projector_params() * (2 * d + 1))
        + (cfg.mask_kernel_params() * (2 * d + 1))
        + c * conv(g, g + 2, 1);
    backbone + mask + head + parse
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_is_pure_function_of_config() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig { width: 20, depth: 3, feature_dim: 8, ..Default::default() },
            ModelConfig { parts: 4, width: 8, depth: 4, pyramid_dim: 12, ..Default::default() },
        ] {
            let p = init_params(&cfg, 1);
            assert_eq!(p.numel(), expected_param_count(&cfg));
            assert_eq!(init_params(&cfg, 99).numel(), p.numel());
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig::default();
        assert_eq!(init_params(&cfg, 3), init_params(&cfg, 3));
        assert_ne!(init_params(&cfg, 3), init_params(&cfg, 4));
    }

    #[test]
    fn center_bias_encodes_prior() {
        let p = init_params(&ModelConfig::default(), 0);
        let b = p.get("head.center.bias").unwrap().item();
        assert!((math::sigmoid(b) - 0.01).abs() < 1e-12);
    }
}
