//! Named, shaped, learnable arrays with deterministic initialization.
//!
//! The layout derived from a [`ModelConfig`] is the single source of truth
//! for parameter order: store construction, checkpoint manifests, parameter
//! counting and tape registration all iterate it in the same order.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, ValueId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn linear(specs: &mut Vec<ParamSpec>, name: &str, d_in: usize, d_out: usize) {
    specs.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![d_in, d_out],
        init: Init::Xavier {
            fan_in: d_in,
            fan_out: d_out,
        },
    });
    specs.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![1, d_out],
        init: Init::Zeros,
    });
}

fn norm(specs: &mut Vec<ParamSpec>, name: &str, d: usize) {
    specs.push(ParamSpec {
        name: format!("{name}.gain"),
        shape: vec![1, d],
        init: Init::Ones,
    });
    specs.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: vec![1, d],
        init: Init::Zeros,
    });
}

/// Ordered parameter manifest for a model configuration.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let ModelConfig {
        d_in,
        d_n,
        d_e,
        d_h,
        d_d,
        layers,
        k,
        t_p,
        t_f,
        ..
    } = *cfg;
    let mut specs = Vec::new();

    linear(&mut specs, "node_init.l1", d_in, d_n);
    linear(&mut specs, "node_init.l2", t_p * d_n, d_n);

    // Group threshold, stored unconstrained; tanh maps it into (-1, 1).
    // Initialized so the threshold starts at 0.5.
    specs.push(ParamSpec {
        name: "group_threshold".into(),
        shape: vec![1, 1],
        init: Init::Const(0.5f64.atanh()),
    });

    linear(&mut specs, "edge_init.l1", 2 * d_n, d_h);
    linear(&mut specs, "edge_init.l2", d_h, d_e);
    linear(&mut specs, "hyper_init.l1", d_n, d_h);
    linear(&mut specs, "hyper_init.l2", d_h, d_e);

    for l in 0..layers {
        let p = format!("pair.{l}");
        linear(&mut specs, &format!("{p}.attn.node_q"), d_n, d_n);
        linear(&mut specs, &format!("{p}.attn.node_k"), d_n, d_n);
        linear(&mut specs, &format!("{p}.attn.node_v"), d_n, d_n);
        linear(&mut specs, &format!("{p}.attn.edge_q"), d_e, d_n);
        linear(&mut specs, &format!("{p}.attn.edge_k"), d_e, d_n);
        linear(&mut specs, &format!("{p}.attn.edge_v"), d_e, d_n);
        linear(&mut specs, &format!("{p}.attn.out"), d_n, d_n);
        norm(&mut specs, &format!("{p}.node_norm1"), d_n);
        linear(&mut specs, &format!("{p}.node_ffn.l1"), d_n, d_h);
        linear(&mut specs, &format!("{p}.node_ffn.l2"), d_h, d_n);
        norm(&mut specs, &format!("{p}.node_norm2"), d_n);
        linear(&mut specs, &format!("{p}.message"), 2 * d_e + 2 * d_n, d_h);
        linear(&mut specs, &format!("{p}.edge_proj"), d_h, d_e);
        norm(&mut specs, &format!("{p}.edge_norm1"), d_e);
        linear(&mut specs, &format!("{p}.edge_ffn.l1"), d_e, d_h);
        linear(&mut specs, &format!("{p}.edge_ffn.l2"), d_h, d_e);
        norm(&mut specs, &format!("{p}.edge_norm2"), d_e);
    }

    for l in 0..layers {
        let p = format!("hyper.{l}");
        linear(&mut specs, &format!("{p}.attn.node_q"), d_n, d_n);
        linear(&mut specs, &format!("{p}.attn.node_k"), d_n, d_n);
        linear(&mut specs, &format!("{p}.attn.node_v"), d_n, d_n);
        linear(&mut specs, &format!("{p}.attn.group_q"), d_e, d_n);
        linear(&mut specs, &format!("{p}.attn.group_k"), d_e, d_n);
        linear(&mut specs, &format!("{p}.attn.group_v"), d_e, d_n);
        linear(&mut specs, &format!("{p}.attn.out"), d_n, d_n);
        norm(&mut specs, &format!("{p}.node_norm1"), d_n);
        linear(&mut specs, &format!("{p}.node_ffn.l1"), d_n, d_h);
        linear(&mut specs, &format!("{p}.node_ffn.l2"), d_h, d_n);
        norm(&mut specs, &format!("{p}.node_norm2"), d_n);
        linear(&mut specs, &format!("{p}.message"), d_e + d_n, d_h);
        linear(&mut specs, &format!("{p}.hyperedge_proj"), d_h, d_e);
        norm(&mut specs, &format!("{p}.hyperedge_norm1"), d_e);
        linear(&mut specs, &format!("{p}.hyperedge_ffn.l1"), d_e, d_h);
        linear(&mut specs, &format!("{p}.hyperedge_ffn.l2"), d_h, d_e);
        norm(&mut specs, &format!("{p}.hyperedge_norm2"), d_e);
    }

    for head in 0..k {
        let p = format!("decoder.{head}");
        linear(&mut specs, &format!("{p}.l1"), 3 * d_n, d_d);
        linear(&mut specs, &format!("{p}.l2"), d_d, d_d / 2);
        linear(&mut specs, &format!("{p}.l3"), d_d / 2, t_f * 2);
    }

    specs
}

#[derive(Clone, Debug)]
pub struct ParameterStore<F: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParameterStore<F> {
    /// Deterministic initialization: values are sampled in `f64` from a
    /// seeded stream and cast, so single- and double-precision stores built
    /// from the same seed agree to rounding.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = layout(cfg);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        let mut index = HashMap::with_capacity(specs.len());
        for spec in specs {
            let data: Vec<F> = match spec.init {
                Init::Xavier { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..spec.numel())
                        .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
                        .collect()
                }
                Init::Zeros => vec![F::ZERO; spec.numel()],
                Init::Ones => vec![F::ONE; spec.numel()],
                Init::Const(c) => vec![F::from_f64(c); spec.numel()],
            };
            index.insert(spec.name.clone(), names.len());
            names.push(spec.name);
            tensors.push(Tensor::new(spec.shape, data)?);
        }
        Ok(ParameterStore {
            names,
            tensors,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<F> {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<F> {
        &mut self.tensors[idx]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invariant(format!("unknown parameter: {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        Ok(&self.tensors[self.index_of(name)?])
    }

    /// Replace a parameter's values; the shape must match.
    pub fn set(&mut self, name: &str, tensor: Tensor<F>) -> Result<()> {
        let idx = self.index_of(name)?;
        if tensor.shape() != self.tensors[idx].shape() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.tensors[idx].shape(),
                tensor.shape()
            )));
        }
        self.tensors[idx] = tensor;
        Ok(())
    }

    /// All parameter values concatenated in manifest order, as f64.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_elements());
        for t in &self.tensors {
            out.extend(t.data().iter().map(|x| x.to_f64()));
        }
        out
    }

    /// Overwrite all values from a flat f64 slice in manifest order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_elements() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} elements, store holds {}",
                flat.len(),
                self.total_elements()
            )));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = F::from_f64(flat[offset]);
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParameterStore<G> {
        ParameterStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters registered on a tape, aligned with the store's manifest order.
pub struct TapeParams {
    ids: Vec<ValueId>,
}

impl TapeParams {
    /// Clone every parameter onto the tape as a gradient-tracked node.
    pub fn bind<F: Real>(tape: &mut Tape<F>, store: &ParameterStore<F>) -> Self {
        let ids = store
            .tensors()
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect();
        TapeParams { ids }
    }

    pub fn get<F: Real>(&self, store: &ParameterStore<F>, name: &str) -> Result<ValueId> {
        Ok(self.ids[store.index_of(name)?])
    }

    pub fn ids(&self) -> &[ValueId] {
        &self.ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_under_seed() {
        let cfg = ModelConfig::tiny();
        let a = ParameterStore::<f32>::init(&cfg, 9).unwrap();
        let b = ParameterStore::<f32>::init(&cfg, 9).unwrap();
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            assert_eq!(x.data(), y.data());
        }
        let c = ParameterStore::<f32>::init(&cfg, 10).unwrap();
        assert_ne!(a.tensors()[0].data(), c.tensors()[0].data());
    }

    #[test]
    fn single_and_double_stores_agree_to_rounding() {
        let cfg = ModelConfig::tiny();
        let single = ParameterStore::<f32>::init(&cfg, 3).unwrap();
        let double = ParameterStore::<f64>::init(&cfg, 3).unwrap();
        for (s, d) in single.tensors().iter().zip(double.tensors()) {
            for (&x, &y) in s.data().iter().zip(d.data()) {
                assert!((x as f64 - y).abs() <= y.abs() * 1e-7 + 1e-12);
            }
        }
    }

    #[test]
    fn layout_matches_store_totals() {
        let cfg = ModelConfig::tiny();
        let specs = layout(&cfg);
        let store = ParameterStore::<f64>::init(&cfg, 0).unwrap();
        let from_layout: usize = specs.iter().map(|s| s.numel()).sum();
        assert_eq!(from_layout, store.total_elements());
        assert_eq!(specs.len(), store.len());
    }

    #[test]
    fn threshold_initializes_to_half_after_tanh() {
        let cfg = ModelConfig::tiny();
        let store = ParameterStore::<f64>::init(&cfg, 0).unwrap();
        let raw = store.get("group_threshold").unwrap().data()[0];
        assert!((raw.tanh() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn flatten_set_flat_round_trip() {
        let cfg = ModelConfig::tiny();
        let mut store = ParameterStore::<f64>::init(&cfg, 4).unwrap();
        let flat = store.flatten();
        let mut perturbed = flat.clone();
        perturbed[10] += 0.25;
        store.set_flat(&perturbed).unwrap();
        assert_eq!(store.flatten(), perturbed);
        store.set_flat(&flat).unwrap();
        assert_eq!(store.flatten(), flat);
    }
}
