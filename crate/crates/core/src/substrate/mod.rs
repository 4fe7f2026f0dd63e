//! Minimal differentiable-computation layer.
//!
//! Values are `f64`; a [`Graph`] records ops eagerly and [`Graph::backward`]
//! returns gradients for parameter leaves drawn from a [`ParamStore`].

mod gemm;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use graph::{
    diag_gaussian_log_density, Gradients, Graph, Var, LAYER_NORM_EPS, MASK_LOGIT,
    PROJECTION_MIN_NORM,
};
pub use optim::Adam;
pub use params::{ParamId, ParamStore, StoreId};
pub use tensor::Tensor;

use crate::error::Result;

/// Mean over unmasked rows of `x: [T,d]`, as a plain vector.
pub fn masked_mean_pool(x: &Tensor, mask: &[bool]) -> Result<Vec<f64>> {
    let mut g = Graph::no_grad();
    let v = g.constant(x.clone());
    let out = g.masked_mean_rows(v, mask)?;
    Ok(g.value(out).data().to_vec())
}

/// Deterministic child seed from a base seed and a path of indices
/// (splitmix64 finalizer applied per component).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = base;
    for &p in path {
        h = h.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

#[cfg(test)]
mod tests;
