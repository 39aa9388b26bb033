use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Named parameter arrays, iterated in name order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    arrays: BTreeMap<String, Tensor>,
}

/// Layers whose output feeds a loss or a Gaussian head directly get a
/// variance-preserving init instead of the SiLU-gain one.
fn is_output_layer(name: &str, last_up: &str) -> bool {
    name.starts_with("prototype_prior.2.")
        || name.starts_with("prototype_posterior.2.")
        || name.contains(".mlp.1.")
        || name.starts_with("attention_prior.output.")
        || name == last_up
}

/// Starting log-variance of every Gaussian head.
pub const INITIAL_LOG_VARIANCE: f64 = -4.0;

fn is_gaussian_head_bias(name: &str) -> bool {
    name == "prototype_prior.2.bias" || name == "prototype_posterior.2.bias" || name.ends_with(".mlp.1.bias")
}

impl ParameterSet {
    /// Seeded random initialisation at `f32` precision. Biases start at zero
    /// except the log-variance halves of the Gaussian heads.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, 0x1417);
        let last_up = format!("decoder.up.{}.weight", cfg.downsample_layers - 1);
        let mut arrays = BTreeMap::new();
        for (name, shape) in cfg.parameter_shapes() {
            let len: usize = shape.iter().product();
            let data = if is_gaussian_head_bias(&name) {
                let mut b = vec![0.0; len];
                b[len / 2..].fill(INITIAL_LOG_VARIANCE);
                b
            } else if name.ends_with(".bias") {
                vec![0.0; len]
            } else {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let gain = if is_output_layer(&name, &last_up) { 1.0 } else { 2.0 };
                let std = (gain / fan_in as f64).sqrt();
                (0..len)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            };
            let mut t = Tensor::new(shape, data);
            t.round_to_f32();
            arrays.insert(name, t);
        }
        Ok(ParameterSet { arrays })
    }

    pub fn from_arrays(arrays: BTreeMap<String, Tensor>) -> Self {
        ParameterSet { arrays }
    }

    pub fn zeros_like(&self) -> Self {
        let arrays = self
            .arrays
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
        ParameterSet { arrays }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.arrays.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.arrays.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.arrays.values().map(Tensor::len).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.arrays.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.values().all(Tensor::is_finite)
    }

    /// Adds `other` element-wise; both sets must have identical layouts.
    pub fn add_assign(&mut self, other: &ParameterSet) {
        for ((ka, a), (kb, b)) in self.arrays.iter_mut().zip(&other.arrays) {
            assert_eq!(ka, kb, "parameter sets differ in layout");
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.arrays.values_mut().for_each(|t| t.scale(factor));
    }

    /// Checks names and shapes against `cfg`, reporting the first difference.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = cfg.parameter_shapes();
        for (name, shape) in &expected {
            match self.arrays.get(name) {
                None => {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: vec![],
                    })
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some((name, t)) = self
            .arrays
            .iter()
            .find(|(n, _)| !expected.iter().any(|(e, _)| e == *n))
        {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: vec![],
                found: t.shape().to_vec(),
            });
        }
        Ok(())
    }
}
