//! Small dense-network engine: tensors, MLPs with hand-written reverse-mode
//! gradients, Adam, and a checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod dense;
pub mod gradcheck;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use dense::{time_embedding, Activation, Cache, DenseNet, Layer, NetSpec};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) mod testing {
    pub use super::gradcheck::{check_net_gradients, max_rel_error};
}

use crate::error::{Error, Result};
use crate::real::Real;

/// Anything with a flat, ordered list of parameter buffers.
pub trait Parameterized<F: Real> {
    fn param_slices(&self) -> Vec<&[F]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [F]>;
    fn param_names(&self) -> Vec<String>;

    fn num_params(&self) -> usize {
        self.param_slices().iter().map(|p| p.len()).sum()
    }

    /// Appends every buffer to `ck` as `f32`, prefixed with `prefix.`.
    fn save_params(&self, prefix: &str, ck: &mut Checkpoint) {
        for (name, p) in self.param_names().into_iter().zip(self.param_slices()) {
            ck.push(format!("{prefix}.{name}"), p.iter().map(|v| v.f64() as f32).collect());
        }
    }

    fn load_params(&mut self, prefix: &str, r: &mut checkpoint::BufferReader<'_>) -> Result<()> {
        let names = self.param_names();
        for (name, p) in names.into_iter().zip(self.param_slices_mut()) {
            let src = r.take(&format!("{prefix}.{name}"), p.len())?;
            for (d, &s) in p.iter_mut().zip(src) {
                *d = F::of(s as f64);
            }
        }
        Ok(())
    }
}

/// Gradients congruent with a [`Parameterized`] buffer list.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<F = f32> {
    pub bufs: Vec<Vec<F>>,
}

impl<F: Real> Grads<F> {
    pub fn zeros_like(params: &[&[F]]) -> Self {
        Grads {
            bufs: params.iter().map(|p| vec![F::zero(); p.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Grads<F>, scale: F) -> Result<()> {
        if self.bufs.len() != other.bufs.len() {
            return Err(Error::shape(self.bufs.len(), other.bufs.len()));
        }
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            if a.len() != b.len() {
                return Err(Error::shape(a.len(), b.len()));
            }
            for (x, &y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: F) {
        for b in &mut self.bufs {
            for x in b {
                *x *= s;
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x.f64() * x.f64())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().flat_map(|b| b.iter()).all(|x| x.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.bufs.iter().flat_map(|b| b.iter().map(|x| x.f64())).collect()
    }

    /// Concatenation of two congruent lists (e.g. several sub-networks).
    pub fn concat(mut self, other: Grads<F>) -> Self {
        self.bufs.extend(other.bufs);
        self
    }
}
