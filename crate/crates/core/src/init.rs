//! Parameter initializers.
//!
//! Every random initializer draws from its own ChaCha stream, so a
//! parameter's initial value depends only on `(seed, stream)` and not on the
//! order in which nodes are added. Two graphs that share a backbone therefore
//! get identical backbone weights from the same seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Shape, Tensor};

/// What a layer needs initialized: name, shape, and fan-in of each parameter.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Shape,
    pub fan_in: usize,
    pub is_bias: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Zeros,
    /// Weights ~ Normal(0, √(2 / fan_in)); biases zero.
    HeNormal { seed: u64, stream: u64 },
    /// Weights ~ Normal(0, std); biases zero.
    Normal { std: f64, seed: u64, stream: u64 },
    /// Weights and biases ~ Uniform(−scale, scale).
    Uniform { scale: f64, seed: u64, stream: u64 },
    /// Explicit values, one per parameter in declaration order.
    Values(Vec<Tensor>),
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Init {
    /// Produces one tensor per spec. `Values` must match shapes exactly.
    pub fn materialize(&self, specs: &[ParamSpec]) -> Result<Vec<Tensor>, String> {
        match self {
            Init::Values(values) => {
                if values.len() != specs.len() {
                    return Err(format!(
                        "expected {} parameter tensors, got {}",
                        specs.len(),
                        values.len()
                    ));
                }
                for (v, s) in values.iter().zip(specs) {
                    if v.shape() != &s.shape {
                        return Err(format!(
                            "parameter `{}` has shape {}, expected {}",
                            s.name,
                            v.shape(),
                            s.shape
                        ));
                    }
                }
                Ok(values.clone())
            }
            Init::Zeros => Ok(specs.iter().map(|s| Tensor::zeros(&s.shape)).collect()),
            Init::HeNormal { seed, stream } => {
                let mut rng = rng_for(*seed, *stream);
                Ok(specs
                    .iter()
                    .map(|s| {
                        if s.is_bias {
                            Tensor::zeros(&s.shape)
                        } else {
                            normal_tensor(&mut rng, &s.shape, (2.0 / s.fan_in as f64).sqrt())
                        }
                    })
                    .collect())
            }
            Init::Normal { std, seed, stream } => {
                let mut rng = rng_for(*seed, *stream);
                Ok(specs
                    .iter()
                    .map(|s| {
                        if s.is_bias {
                            Tensor::zeros(&s.shape)
                        } else {
                            normal_tensor(&mut rng, &s.shape, *std)
                        }
                    })
                    .collect())
            }
            Init::Uniform {
                scale,
                seed,
                stream,
            } => {
                let mut rng = rng_for(*seed, *stream);
                Ok(specs
                    .iter()
                    .map(|s| {
                        let data = (0..s.shape.numel())
                            .map(|_| rng.random_range(-*scale..=*scale))
                            .collect();
                        Tensor::new(s.shape.clone(), data).expect("length matches shape")
                    })
                    .collect())
            }
        }
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &Shape, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let data = (0..shape.numel()).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.clone(), data).expect("length matches shape")
}

/// A tensor of uniform values in `[-scale, scale]`, for tests and tools.
pub fn uniform_tensor(shape: &Shape, scale: f64, seed: u64, stream: u64) -> Tensor {
    let mut rng = rng_for(seed, stream);
    let data = (0..shape.numel())
        .map(|_| rng.random_range(-scale..=scale))
        .collect();
    Tensor::new(shape.clone(), data).expect("length matches shape")
}
