//! Central finite-difference oracles for taped gradients. They panic on
//! malformed graphs, which suits their use in test suites.

use super::{Rng, Tape, Tensor, Var};

/// Relative error `|a - n| / max(|a|, |n|)` over a whole gradient tensor.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Central finite differences of a scalar function of several tensors.
pub fn numeric_grads(
    inputs: &[Tensor],
    eps: f64,
    mut f: impl FnMut(&[Tensor]) -> f64,
) -> Vec<Vec<f64>> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for j in 0..g.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = f(&work);
            work[i].data_mut()[j] = orig - eps;
            let minus = f(&work);
            work[i].data_mut()[j] = orig;
            g[j] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// Builds the graph with every input as a trainable leaf, runs backward and
/// compares each input's gradient with central differences. Returns the
/// worst relative error.
pub fn check_grads(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &vars);
    tape.backward(root).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap().data().to_vec())
        .collect();
    let numeric = numeric_grads(inputs, 1e-5, |xs| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let r = build(&mut t, &vs);
        t.value(r).item()
    });
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

pub fn random_tensor(rng: &mut Rng, dims: &[usize], scale: f64) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.normal() * scale).collect()).unwrap()
}

/// Weighted sum with fixed random weights, turning any tensor into a scalar
/// whose gradient exercises every element differently.
pub fn probe(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let dims = tape.value(x).dims().to_vec();
    let mut rng = Rng::new(seed ^ 0x5eed);
    let w = random_tensor(&mut rng, &dims, 1.0);
    let n = w.numel();
    let wv = tape.constant(w.reshape(vec![n, 1]).unwrap());
    let flat_len = tape.value(x).numel();
    // Reshape x to 1 x n by gathering rows of a row view.
    let xr = {
        let rows = tape.value(x).rows();
        let cols = tape.value(x).cols();
        let parts: Vec<Var> = (0..rows)
            .map(|i| tape.slice_rows(x, i, 1).unwrap())
            .collect();
        let row = tape.concat_cols(&parts).unwrap();
        assert_eq!(rows * cols, flat_len);
        row
    };
    let p = tape.matmul(xr, wv).unwrap();
    tape.sum(p)
}
