use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, WssError};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Gaussian with std `sqrt(2 / fan_in)`, where fan-in is the product of all but the first dim.
    pub fn he_normal(shape: &[usize], rng: &mut impl Rng) -> Self {
        let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
        let std = (2.0 / fan_in as f64).sqrt();
        let mut t = Self::zeros(shape);
        for v in t.data.iter_mut() {
            // Box-Muller
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            *v = (z * std) as f32;
        }
        t
    }
}

/// Named parameter tensors plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub architecture_id: String,
    pub tensors: BTreeMap<String, Tensor>,
    /// Per-channel mean subtracted from the input before the first layer.
    pub input_mean: [f32; 3],
}

impl NetworkParams {
    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
            .collect()
    }

    pub fn check_matches(&self, other: &BTreeMap<String, Tensor>) -> Result<()> {
        if self.tensors.len() != other.len() {
            return Err(WssError::shape("parameter collections differ in size"));
        }
        for (name, t) in &self.tensors {
            match other.get(name) {
                Some(o) if o.shape == t.shape => {}
                Some(o) => {
                    return Err(WssError::shape(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        o.shape, t.shape
                    )))
                }
                None => return Err(WssError::shape(format!("tensor `{name}` missing"))),
            }
        }
        Ok(())
    }
}

/// Deterministic per-tensor generator so that initialization of one tensor never depends on
/// which other tensors exist.
pub(crate) fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}
