//! Shared helpers for anything that owns trainable parameters.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

use crate::autodiff::{Param, ParamId};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub trait HasParams {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_ids(&self) -> BTreeSet<ParamId> {
        self.params().iter().map(|p| p.id).collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    fn param_bytes(&self) -> usize {
        self.params().iter().map(|p| p.value.size_bytes()).sum()
    }

    /// SHA-256 over ids, shapes and raw little-endian values.
    fn param_digest(&self) -> String {
        digest_params(self.params())
    }
}

pub fn digest_params<'a>(params: impl IntoIterator<Item = &'a Param>) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.id.0.to_le_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-a, a)).collect())
}
