//! Dense f64 tensors, a single-use reverse-mode tape, a portable RNG and
//! AdamW. Everything trainable in the crate is built on these pieces.

pub mod gradcheck;
pub mod kernels;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use optim::AdamW;
pub use rng::{derive_seed, Rng};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Plain (untaped) cosine distance `1 - u.v / (|u| |v|)`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> crate::Result<f64> {
    if u.len() != v.len() {
        return Err(crate::Error::shape(format!(
            "cosine distance between vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = kernels::norm(u);
    let nv = kernels::norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(crate::Error::Degenerate(
            "cosine distance of a zero-norm vector".into(),
        ));
    }
    Ok(1.0 - kernels::dot(u, v) / (nu * nv))
}

/// GPT-style initialisation: weights drawn from N(0, 0.02^2).
pub fn init_normal(rng: &mut Rng, dims: &[usize], std: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.normal() * std).collect();
    Tensor::new(dims.to_vec(), data).expect("dims product matches data length")
}
