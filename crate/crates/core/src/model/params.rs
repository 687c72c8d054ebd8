//! Named learnable parameters and their initialization.
//!
//! The set of parameter names (and shapes) is a pure function of the model
//! configuration; initialization draws happen in declaration order from a
//! seeded generator, with aggregation parameters declared last so that
//! configurations differing only in the aggregation method share identical
//! draws for all common parameters.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::attention::MhWeights;
use super::layers::{FeedForwardWeights, NormWeights};
use super::{AggMethod, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
    UniformFanIn(usize),
    /// normal(0, std)
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: String, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec { name, shape: shape.to_vec(), init }
}

fn push_mh(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        specs.push(spec(format!("{prefix}.{w}"), &[d, d], Init::UniformFanIn(d)));
    }
}

fn push_ff(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize, d_ff: usize) {
    specs.push(spec(format!("{prefix}.w1"), &[d, d_ff], Init::UniformFanIn(d)));
    specs.push(spec(format!("{prefix}.b1"), &[d_ff], Init::Zeros));
    specs.push(spec(format!("{prefix}.w2"), &[d_ff, d], Init::UniformFanIn(d_ff)));
    specs.push(spec(format!("{prefix}.b2"), &[d], Init::Zeros));
}

fn push_norm(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    specs.push(spec(format!("{prefix}.g"), &[d], Init::Ones));
    specs.push(spec(format!("{prefix}.b"), &[d], Init::Zeros));
}

/// Every learnable tensor implied by `config`, in initialization order.
pub fn parameter_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let d = config.d_model;
    let mut specs = Vec::new();
    let embed_std = 1.0 / (d as f64).sqrt();
    specs.push(spec("embed.tok".into(), &[config.vocab_size, d], Init::Normal(embed_std)));

    for l in 0..config.n_enc {
        push_mh(&mut specs, &format!("enc.{l}.self"), d);
        push_ff(&mut specs, &format!("enc.{l}.ff"), d, config.d_ff);
        push_norm(&mut specs, &format!("enc.{l}.ln1"), d);
        push_norm(&mut specs, &format!("enc.{l}.ln2"), d);
    }
    for l in 0..config.n_dec {
        push_mh(&mut specs, &format!("dec.{l}.self"), d);
        push_mh(&mut specs, &format!("dec.{l}.cross"), d);
        push_ff(&mut specs, &format!("dec.{l}.ff"), d, config.d_ff);
        push_norm(&mut specs, &format!("dec.{l}.ln1"), d);
        push_norm(&mut specs, &format!("dec.{l}.ln2"), d);
        push_norm(&mut specs, &format!("dec.{l}.ln3"), d);
    }

    specs.push(spec("out.w".into(), &[d, config.vocab_size], Init::UniformFanIn(d)));
    specs.push(spec("out.b".into(), &[config.vocab_size], Init::Zeros));

    if config.use_pointer {
        specs.push(spec("ptr.w_gen".into(), &[d, 1], Init::UniformFanIn(d)));
        specs.push(spec("ptr.b_gen".into(), &[1], Init::Zeros));
        specs.push(spec("ptr.b_copy".into(), &[config.max_positions], Init::Zeros));
    }

    match config.agg_method {
        AggMethod::None | AggMethod::Add => {}
        AggMethod::Projection => {
            let l = config.agg_layers;
            specs.push(spec("agg.proj.w".into(), &[l * d, d], Init::UniformFanIn(l * d)));
            specs.push(spec("agg.proj.b".into(), &[d], Init::Zeros));
            push_mh(&mut specs, "agg.attn", d);
        }
        AggMethod::Attention => {
            for i in 0..=config.agg_layers {
                push_mh(&mut specs, &format!("agg.attn{i}"), d);
            }
        }
    }
    specs
}

/// Named learnable tensors of a model instance.
#[derive(Debug, Clone)]
pub struct ParameterSet<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    /// Draw fresh parameters for `config` from a seeded generator.
    pub fn init(config: &ModelConfig, seed: u64) -> ParameterSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = BTreeMap::new();
        for s in parameter_specs(config) {
            let numel: usize = s.shape.iter().product();
            let data: Vec<T> = match s.init {
                Init::UniformFanIn(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    (0..numel).map(|_| T::from_f(rng.gen_range(-bound..bound))).collect()
                }
                Init::Normal(std) => (0..numel)
                    .map(|_| {
                        // Box-Muller transform over two uniform draws
                        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                        let u2: f64 = rng.gen();
                        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                        T::from_f(z * std)
                    })
                    .collect(),
                Init::Zeros => vec![T::zero(); numel],
                Init::Ones => vec![T::one(); numel],
            };
            map.insert(s.name, Tensor::param(data, &s.shape));
        }
        ParameterSet { map }
    }

    /// Assemble a parameter set from named buffers (checkpoint restore),
    /// validating that names and shapes match `config` exactly.
    pub fn from_tensors(
        config: &ModelConfig,
        mut tensors: BTreeMap<String, (Vec<usize>, Vec<T>)>,
    ) -> Result<ParameterSet<T>> {
        let mut map = BTreeMap::new();
        for s in parameter_specs(config) {
            let (shape, data) = tensors.remove(&s.name).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter tensor: {}", s.name))
            })?;
            if shape != s.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {shape:?}, config implies {:?}",
                    s.name, s.shape
                )));
            }
            map.insert(s.name, Tensor::param(data, &shape));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!(
                "unexpected parameter tensor in checkpoint: {extra}"
            )));
        }
        Ok(ParameterSet { map })
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for t in self.map.values() {
            t.zero_grad();
        }
    }

    pub(crate) fn mh(&self, prefix: &str) -> MhWeights<T> {
        MhWeights {
            wq: self.get(&format!("{prefix}.wq")).clone(),
            wk: self.get(&format!("{prefix}.wk")).clone(),
            wv: self.get(&format!("{prefix}.wv")).clone(),
            wo: self.get(&format!("{prefix}.wo")).clone(),
        }
    }

    pub(crate) fn ff(&self, prefix: &str) -> FeedForwardWeights<T> {
        FeedForwardWeights {
            w1: self.get(&format!("{prefix}.w1")).clone(),
            b1: self.get(&format!("{prefix}.b1")).clone(),
            w2: self.get(&format!("{prefix}.w2")).clone(),
            b2: self.get(&format!("{prefix}.b2")).clone(),
        }
    }

    pub(crate) fn norm(&self, prefix: &str) -> NormWeights<T> {
        NormWeights {
            gain: self.get(&format!("{prefix}.g")).clone(),
            bias: self.get(&format!("{prefix}.b")).clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config(agg: AggMethod, pointer: bool) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc: 2,
            n_dec: 2,
            d_ff: 16,
            dropout: 0.0,
            agg_layers: 1,
            agg_method: agg,
            use_pointer: pointer,
            vocab_size: 20,
            max_positions: 16,
        }
    }

    #[test]
    fn names_are_unique_and_config_determined() {
        for agg in [AggMethod::None, AggMethod::Add, AggMethod::Projection, AggMethod::Attention] {
            let cfg = toy_config(agg, true);
            let specs = parameter_specs(&cfg);
            let mut names: Vec<&String> = specs.iter().map(|s| &s.name).collect();
            let total = names.len();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), total, "duplicate names for {agg:?}");
            assert_eq!(parameter_specs(&cfg), specs, "specs not deterministic");
        }
    }

    #[test]
    fn element_total_matches_analytic_count() {
        for agg in [AggMethod::None, AggMethod::Add, AggMethod::Projection, AggMethod::Attention] {
            for pointer in [false, true] {
                let cfg = toy_config(agg, pointer);
                let params = ParameterSet::<f32>::init(&cfg, 7);
                assert_eq!(params.total_elements(), cfg.parameter_count(), "{agg:?}/{pointer}");
            }
        }
    }

    #[test]
    fn shared_parameters_get_identical_draws_across_agg_methods() {
        let base = ParameterSet::<f64>::init(&toy_config(AggMethod::None, true), 42);
        let agg = ParameterSet::<f64>::init(&toy_config(AggMethod::Attention, true), 42);
        for (name, t) in base.iter() {
            assert_eq!(t.to_vec(), agg.get(name).to_vec(), "draws differ for {name}");
        }
    }

    #[test]
    fn restore_rejects_wrong_shape_naming_the_field() {
        let cfg = toy_config(AggMethod::None, false);
        let params = ParameterSet::<f32>::init(&cfg, 1);
        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = params
            .iter()
            .map(|(n, t)| (n.clone(), (t.shape().to_vec(), t.to_vec())))
            .collect();
        tensors.insert("out.b".into(), (vec![3], vec![0.0; 3]));
        let err = ParameterSet::<f32>::from_tensors(&cfg, tensors).unwrap_err();
        assert!(err.to_string().contains("out.b"), "{err}");
    }
}
