//! Analytic gradients against central finite differences (eps 1e-5).

mod common;

use common::{check_grads, probe, random_tensor};
use vqrefine::numkernel::{kernels, Rng, Tape, Tensor, Var};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn assert_small(name: &str, err: f64, tol: f64) {
    assert!(err <= tol, "{name}: relative error {err:e} > {tol:e}");
}

#[test]
fn matmul_gradients() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let a = random_tensor(&mut rng, &[3, 4], 1.0);
        let b = random_tensor(&mut rng, &[4, 2], 1.0);
        let err = check_grads(&[a, b], |t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            probe(t, c, seed)
        });
        assert_small("matmul", err, 1e-6);
    }
}

#[test]
fn transposed_matmul_gradients() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let a = random_tensor(&mut rng, &[4, 3], 1.0);
        let b = random_tensor(&mut rng, &[2, 4], 1.0);
        for (at, bt) in [(true, true), (true, false), (false, true)] {
            let (x, y) = match (at, bt) {
                (true, true) => (a.clone(), b.clone()),
                (true, false) => (a.clone(), random_tensor(&mut rng, &[4, 2], 1.0)),
                _ => (random_tensor(&mut rng, &[3, 4], 1.0), b.clone()),
            };
            let err = check_grads(&[x, y], |t, v| {
                let c = t.matmul_t(v[0], v[1], at, bt).unwrap();
                probe(t, c, seed)
            });
            assert_small("matmul_t", err, 1e-6);
        }
    }
}

#[test]
fn softmax_gradients() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let a = random_tensor(&mut rng, &[2, 5], 1.0);
        let err = check_grads(std::slice::from_ref(&a), |t, v| {
            let s = t.softmax_rows(v[0]);
            probe(t, s, seed)
        });
        assert_small("softmax", err, 1e-6);
        let err = check_grads(&[a], |t, v| {
            let s = t.causal_softmax_rows(v[0], 1);
            probe(t, s, seed)
        });
        assert_small("causal softmax", err, 1e-6);
    }
}

#[test]
fn layernorm_gradients() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let x = random_tensor(&mut rng, &[4, 8], 1.0);
        let g = random_tensor(&mut rng, &[8], 1.0);
        let b = random_tensor(&mut rng, &[8], 1.0);
        let err = check_grads(&[x, g, b], |t, v| {
            let y = t.layernorm(v[0], v[1], v[2]).unwrap();
            probe(t, y, seed)
        });
        assert_small("layernorm", err, 1e-5);
    }
}

#[test]
fn gelu_gradients() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let x = random_tensor(&mut rng, &[7], 2.0);
        let err = check_grads(&[x], |t, v| {
            let y = t.gelu(v[0]);
            probe(t, y, seed)
        });
        assert_small("gelu", err, 1e-5);
    }
}

#[test]
fn loss_gradients() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let a = random_tensor(&mut rng, &[3, 5], 1.0);
        let b = random_tensor(&mut rng, &[3, 5], 1.0);
        let err = check_grads(&[a.clone(), b.clone()], |t, v| {
            t.cosine_distance(v[0], v[1]).unwrap()
        });
        assert_small("cosine", err, 1e-6);
        let err = check_grads(&[a.clone(), b], |t, v| {
            t.squared_distance(v[0], v[1]).unwrap()
        });
        assert_small("squared", err, 1e-6);
        let err = check_grads(&[a], |t, v| t.cross_entropy(v[0], &[4, 0, 2]).unwrap());
        assert_small("cross entropy", err, 1e-6);
    }
}

#[test]
fn structural_op_gradients() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let table = random_tensor(&mut rng, &[5, 3], 1.0);
        let x = random_tensor(&mut rng, &[4, 6], 1.0);
        let err = check_grads(&[table], |t, v| {
            let g = t.gather_rows(v[0], &[4, 1, 1, 0]).unwrap();
            probe(t, g, seed)
        });
        assert_small("gather", err, 1e-6);
        let err = check_grads(std::slice::from_ref(&x), |t, v| {
            let a = t.slice_cols(v[0], 1, 3).unwrap();
            let b = t.slice_cols(v[0], 4, 2).unwrap();
            let c = t.concat_cols(&[b, a]).unwrap();
            let r = t.slice_rows(c, 1, 2).unwrap();
            probe(t, r, seed)
        });
        assert_small("slices", err, 1e-6);
        for offset in [-1isize, 1, 2] {
            let err = check_grads(std::slice::from_ref(&x), |t, v| {
                let s = t.shift_rows(v[0], offset);
                let s = t.scale(s, -0.7);
                probe(t, s, seed)
            });
            assert_small("shift", err, 1e-6);
        }
    }
}

/// Multi-head causal attention block assembled from primitives.
fn attention_block(t: &mut Tape, v: &[Var], heads: usize) -> Var {
    let (x, wq, wk, wv, wo, g, b) = (v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
    let d = t.value(x).cols();
    let dh = d / heads;
    let q = t.matmul(x, wq).unwrap();
    let k = t.matmul(x, wk).unwrap();
    let vv = t.matmul(x, wv).unwrap();
    let mut outs = Vec::new();
    for h in 0..heads {
        let qh = t.slice_cols(q, h * dh, dh).unwrap();
        let kh = t.slice_cols(k, h * dh, dh).unwrap();
        let vh = t.slice_cols(vv, h * dh, dh).unwrap();
        let s = t.matmul_t(qh, kh, false, true).unwrap();
        let s = t.scale(s, 1.0 / (dh as f64).sqrt());
        let p = t.causal_softmax_rows(s, 0);
        outs.push(t.matmul(p, vh).unwrap());
    }
    let o = t.concat_cols(&outs).unwrap();
    let o = t.matmul(o, wo).unwrap();
    let r = t.add(x, o).unwrap();
    let y = t.layernorm(r, g, b).unwrap();
    let y = t.gelu(y);
    t.cosine_distance(y, v[7]).unwrap()
}

#[test]
fn composite_attention_block_gradients() {
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let (n, d) = (5, 8);
        let mut inputs = vec![random_tensor(&mut rng, &[n, d], 1.0)];
        for _ in 0..4 {
            inputs.push(random_tensor(&mut rng, &[d, d], 0.3));
        }
        inputs.push(random_tensor(&mut rng, &[d], 1.0));
        inputs.push(random_tensor(&mut rng, &[d], 0.5));
        inputs.push(random_tensor(&mut rng, &[n, d], 1.0));
        let err = check_grads(&inputs, |t, v| attention_block(t, v, 2));
        assert_small("attention block", err, 1e-4);
    }
}

/// Scalar DAG of scale/add/gelu nodes; the oracle sums products of local
/// derivatives over every root-to-leaf path.
#[test]
fn backward_equals_sum_of_path_products() {
    #[derive(Clone, Copy)]
    enum N {
        Leaf,
        Scale(usize, f64),
        Add(usize, usize),
        Gelu(usize),
    }
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed);
        let mut graph = vec![N::Leaf, N::Leaf];
        while graph.len() < 6 {
            let i = rng.below(graph.len());
            let j = rng.below(graph.len());
            graph.push(match rng.below(3) {
                0 => N::Scale(i, rng.normal()),
                1 => N::Add(i, j),
                _ => N::Gelu(i),
            });
        }
        let leaf_vals = [rng.normal(), rng.normal()];

        let mut tape = Tape::new();
        let mut vars: Vec<Var> = Vec::new();
        let mut vals: Vec<f64> = Vec::new();
        for node in &graph {
            let (v, x) = match *node {
                N::Leaf => {
                    let x = leaf_vals[vars.len()];
                    (tape.param(Tensor::scalar(x)), x)
                }
                N::Scale(i, f) => (tape.scale(vars[i], f), vals[i] * f),
                N::Add(i, j) => (tape.add(vars[i], vars[j]).unwrap(), vals[i] + vals[j]),
                N::Gelu(i) => (tape.gelu(vars[i]), kernels::gelu(vals[i])),
            };
            vars.push(v);
            vals.push(x);
        }
        let root = *vars.last().unwrap();
        tape.backward(root).unwrap();

        fn paths(graph: &[N], vals: &[f64], from: usize, to: usize) -> f64 {
            if from == to {
                return 1.0;
            }
            match graph[from] {
                N::Leaf => 0.0,
                N::Scale(i, f) => f * paths(graph, vals, i, to),
                N::Add(i, j) => paths(graph, vals, i, to) + paths(graph, vals, j, to),
                N::Gelu(i) => kernels::gelu_grad(vals[i]) * paths(graph, vals, i, to),
            }
        }
        for leaf in 0..2 {
            let oracle = paths(&graph, &vals, graph.len() - 1, leaf);
            let got = tape.grad(vars[leaf]).unwrap().item();
            assert!(
                (oracle - got).abs() <= 1e-12 * (1.0 + oracle.abs()),
                "seed {seed} leaf {leaf}: {got} vs {oracle}"
            );
        }
    }
}
