use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::numerics::{Array, Scalar};

pub const INIT_STD: f64 = 0.02;

pub const SHARED: &str = "shared";
pub const LM_HEAD: &str = "lm_head";
pub const ENC_REL_BIAS: &str = "encoder.rel_bias";
pub const DEC_SELF_REL_BIAS: &str = "decoder.self_rel_bias";
pub const DEC_CROSS_REL_BIAS: &str = "decoder.cross_rel_bias";
pub const ENC_FINAL_NORM: &str = "encoder.final_norm";
pub const DEC_FINAL_NORM: &str = "decoder.final_norm";

pub fn enc_layer(i: usize, name: &str) -> String {
    format!("encoder.layers.{i}.{name}")
}

pub fn dec_layer(i: usize, name: &str) -> String {
    format!("decoder.layers.{i}.{name}")
}

/// Every parameter name with its shape. With tied embeddings the output
/// projection is the `shared` table itself and has no entry of its own.
pub fn param_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let (v, d, f, h, nb) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.rel_pos_buckets);
    let mut s = BTreeMap::new();
    s.insert(SHARED.to_string(), vec![v, d]);
    if !cfg.tie_embeddings {
        s.insert(LM_HEAD.to_string(), vec![d, v]);
    }
    s.insert(ENC_REL_BIAS.to_string(), vec![nb, h]);
    s.insert(DEC_SELF_REL_BIAS.to_string(), vec![nb, h]);
    s.insert(DEC_CROSS_REL_BIAS.to_string(), vec![nb, h]);
    s.insert(ENC_FINAL_NORM.to_string(), vec![d]);
    s.insert(DEC_FINAL_NORM.to_string(), vec![d]);
    for i in 0..cfg.n_enc_layers {
        s.insert(enc_layer(i, "attn_norm"), vec![d]);
        for p in ["q", "k", "v", "o"] {
            s.insert(enc_layer(i, &format!("attn.{p}")), vec![d, d]);
        }
        s.insert(enc_layer(i, "ff_norm"), vec![d]);
        s.insert(enc_layer(i, "ff.wi"), vec![d, f]);
        s.insert(enc_layer(i, "ff.wo"), vec![f, d]);
    }
    for i in 0..cfg.n_dec_layers {
        s.insert(dec_layer(i, "self_norm"), vec![d]);
        s.insert(dec_layer(i, "cross_norm"), vec![d]);
        for p in ["q", "k", "v", "o"] {
            s.insert(dec_layer(i, &format!("self.{p}")), vec![d, d]);
            s.insert(dec_layer(i, &format!("cross.{p}")), vec![d, d]);
        }
        s.insert(dec_layer(i, "ff_norm"), vec![d]);
        s.insert(dec_layer(i, "ff.wi"), vec![d, f]);
        s.insert(dec_layer(i, "ff.wo"), vec![f, d]);
    }
    s
}

fn is_norm(name: &str) -> bool {
    name.ends_with("_norm")
}

fn is_rel_bias(name: &str) -> bool {
    name.ends_with("rel_bias")
}

/// Named weight arrays of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Array<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Wraps `tensors` after checking them against `cfg`.
    pub fn new(cfg: &ModelConfig, tensors: BTreeMap<String, Array<T>>) -> Result<Self, ModelError> {
        let expected = param_shapes(cfg);
        if expected.len() != tensors.len() {
            return Err(ModelError::Params(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            let t = tensors
                .get(name)
                .ok_or_else(|| ModelError::Params(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Params(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(ModelError::Params(format!("{name}: non-finite values")));
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> &Array<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Array<T>> {
        &self.tensors
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array<T>)> {
        self.tensors.iter_mut()
    }

    /// Output projection as `(table, transposed)`: the tied embedding is used
    /// as `[V, d]` transposed, an untied head as `[d, V]`.
    pub fn output_projection(&self) -> (&Array<T>, bool) {
        match self.tensors.get(LM_HEAD) {
            Some(head) => (head, false),
            None => (self.get(SHARED), true),
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Array::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Deterministic initialization: normal(0, 0.02) weights, unit norm gains,
/// zero relative-position bias tables.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<f32>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, INIT_STD as f32).expect("valid std");
    let mut tensors = BTreeMap::new();
    for (name, shape) in param_shapes(cfg) {
        let arr = if is_norm(&name) {
            Array::ones(&shape)
        } else if is_rel_bias(&name) {
            Array::zeros(&shape)
        } else {
            let n = shape.iter().product();
            Array::from_vec(&shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
                .expect("shape matches")
        };
        tensors.insert(name, arr);
    }
    ModelParams::new(cfg, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::tiny(300);
        assert_eq!(init_model(&cfg, 4).unwrap(), init_model(&cfg, 4).unwrap());
        assert_ne!(init_model(&cfg, 4).unwrap(), init_model(&cfg, 5).unwrap());
    }

    #[test]
    fn norm_gains_start_at_one_and_biases_at_zero() {
        let p = init_model(&ModelConfig::tiny(300), 0).unwrap();
        for (name, t) in p.tensors() {
            if is_norm(name) {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
            if is_rel_bias(name) {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn tied_head_aliases_embedding() {
        let p = init_model(&ModelConfig::tiny(300), 0).unwrap();
        let (head, transposed) = p.output_projection();
        assert!(transposed);
        assert!(std::ptr::eq(head, p.get(SHARED)));
        assert!(!p.tensors().contains_key(LM_HEAD));

        let untied = ModelConfig { tie_embeddings: false, ..ModelConfig::tiny(300) };
        let p = init_model(&untied, 0).unwrap();
        assert_eq!(p.output_projection().0.shape(), &[16, 300]);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ModelConfig { n_heads: 3, ..ModelConfig::tiny(300) };
        assert!(init_model(&cfg, 0).is_err());
        let cfg = ModelConfig { n_enc_layers: 0, ..ModelConfig::tiny(300) };
        assert!(init_model(&cfg, 0).is_err());
    }

    #[test]
    fn init_std_is_close_to_target() {
        let p = init_model(&ModelConfig::desk(1000), 1).unwrap();
        let w = p.get(SHARED).data();
        let mean = w.iter().map(|&x| x as f64).sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var.sqrt() - INIT_STD).abs() < 1e-3);
    }
}
