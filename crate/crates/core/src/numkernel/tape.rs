use super::kernels::{self, gemm};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool },
    Add { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    GatherRows { table: Var, ids: Vec<usize> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    ShiftRows { a: Var, offset: isize },
    Softmax { a: Var },
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    CosineDistance { a: Var, b: Var, dots: Vec<f64>, norms_a: Vec<f64>, norms_b: Vec<f64> },
    SquaredDistance { a: Var, b: Var },
    Sum { a: Var },
}

/// Runs `f` on the gradient slot of `v`, creating it if needed; skipped for
/// nodes that do not require a gradient.
fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
    if nodes[v.0].requires_grad {
        f(grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.dims())));
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Single-use reverse-mode tape.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// `backward` may run once; the tape is discarded afterwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: receives a gradient in backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the backward root with respect to `v`, once backward ran.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Matrix product of 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes its operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (ar, ac) = as_matrix(self.value(a));
        let (br, bc) = as_matrix(self.value(b));
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims differ: {m}x{k} times {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            a_t,
            self.value(b).data(),
            b_t,
            &mut out,
            1.0,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::MatMul { a, b, a_t, b_t },
            Tensor::new(vec![m, n], out)?,
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                va.dims(),
                vb.dims()
            )));
        }
        let mut out = va.clone();
        out.add_assign(vb.data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add { a, b }, out, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= factor);
        let rg = self.rg(a);
        self.push(Op::Scale { a, factor }, out, rg)
    }

    /// Row lookup: output row i is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = as_matrix(t);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape(format!(
                    "row {id} requested from a table of {rows} rows"
                )));
            }
            out.extend_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            Tensor::new(vec![ids.len(), cols], out)?,
            rg,
        ))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = as_matrix(t);
        if start + len > rows {
            return Err(Error::shape(format!(
                "row slice {start}..{} of a {rows}-row matrix",
                start + len
            )));
        }
        let out = t.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Op::SliceRows { a, start },
            Tensor::new(vec![len, cols], out)?,
            rg,
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = as_matrix(t);
        if start + len > cols {
            return Err(Error::shape(format!(
                "column slice {start}..{} of a {cols}-column matrix",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::SliceCols { a, start },
            Tensor::new(vec![rows, len], out)?,
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::shape("concat of zero parts"))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat parts disagree on row count"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            Tensor::new(vec![rows, total], out)?,
            rg,
        ))
    }

    /// Output row i is input row `i - offset`, zero where that row does not
    /// exist. Used for same-padded 1-D convolution taps.
    pub fn shift_rows(&mut self, a: Var, offset: isize) -> Var {
        let t = self.value(a);
        let (rows, cols) = as_matrix(t);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let src = i as isize - offset;
            if src >= 0 && (src as usize) < rows {
                out[i * cols..(i + 1) * cols].copy_from_slice(t.row(src as usize));
            }
        }
        let rg = self.rg(a);
        self.push(
            Op::ShiftRows { a, offset },
            Tensor::new(vec![rows, cols], out).expect("same shape"),
            rg,
        )
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_impl(a, None)
    }

    /// Row-wise softmax where row i only sees columns `0..=offset + i`.
    pub fn causal_softmax_rows(&mut self, a: Var, offset: usize) -> Var {
        self.softmax_impl(a, Some(offset))
    }

    fn softmax_impl(&mut self, a: Var, causal_offset: Option<usize>) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for i in 0..out.rows() {
            let visible = causal_offset.map_or(cols, |o| o + i + 1);
            kernels::softmax_prefix(out.row_mut(i), visible);
        }
        let rg = self.rg(a);
        self.push(Op::Softmax { a }, out, rg)
    }

    /// Row-wise layer normalisation (epsilon 1e-5) with affine gamma/beta.
    pub fn layernorm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let x = self.value(a);
        let (rows, d) = as_matrix(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != d || b.numel() != d {
            return Err(Error::shape(format!(
                "layernorm over width {d} with gamma {:?} and beta {:?}",
                g.dims(),
                b.dims()
            )));
        }
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for i in 0..rows {
            rstd[i] = kernels::layernorm_row(
                x.row(i),
                g.data(),
                b.data(),
                &mut out[i * d..(i + 1) * d],
                Some(&mut xhat[i * d..(i + 1) * d]),
            );
        }
        let value = Tensor::new(x.dims().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            },
            value,
            rg,
        ))
    }

    /// Elementwise tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = kernels::gelu(*x));
        let rg = self.rg(a);
        self.push(Op::Gelu { a }, out, rg)
    }

    /// Mean softmax cross-entropy of `logits` rows against target classes.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (rows, v) = as_matrix(l);
        if rows != targets.len() || rows == 0 {
            return Err(Error::shape(format!(
                "cross entropy over {rows} rows with {} targets",
                targets.len()
            )));
        }
        let mut probs = l.data().to_vec();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::shape(format!("target {t} outside {v} classes")));
            }
            let row = &mut probs[i * v..(i + 1) * v];
            let lse = kernels::logsumexp(row);
            total += lse - row[t];
            kernels::softmax_prefix(row, v);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(total / rows as f64),
            rg,
        ))
    }

    /// Mean over rows of `1 - cos(a_i, b_i)`.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::shape(format!(
                "cosine distance of {:?} and {:?}",
                ta.dims(),
                tb.dims()
            )));
        }
        let rows = ta.rows();
        let mut dots = Vec::with_capacity(rows);
        let mut norms_a = Vec::with_capacity(rows);
        let mut norms_b = Vec::with_capacity(rows);
        let mut total = 0.0;
        for i in 0..rows {
            let (ra, rb) = (ta.row(i), tb.row(i));
            let (na, nb) = (kernels::norm(ra), kernels::norm(rb));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Degenerate(format!(
                    "row {i} has zero norm in cosine distance"
                )));
            }
            let dot = kernels::dot(ra, rb);
            total += 1.0 - dot / (na * nb);
            dots.push(dot);
            norms_a.push(na);
            norms_b.push(nb);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::CosineDistance {
                a,
                b,
                dots,
                norms_a,
                norms_b,
            },
            Tensor::scalar(total / rows as f64),
            rg,
        ))
    }

    /// Mean over rows of `|a_i - b_i|^2`.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::shape(format!(
                "squared distance of {:?} and {:?}",
                ta.dims(),
                tb.dims()
            )));
        }
        let total: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rows = ta.rows();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::SquaredDistance { a, b },
            Tensor::scalar(total / rows as f64),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum { a }, Tensor::scalar(s), rg)
    }

    /// Reverse-mode accumulation from a scalar root. May run once per tape.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::contract("backward already ran on this tape"));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got dims {:?}",
                self.value(root).dims()
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).dims(), 1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.dims()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$t:ident| $body:expr) => {
                accumulate(nodes, grads, $v, |$t: &mut Tensor| {
                    $body;
                })
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, a_t, b_t } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, n) = (g.rows(), g.cols());
                let k = if *a_t { va.rows() } else { va.cols() };
                // C = op(A) op(B): d op(A) = G op(B)^T, d op(B) = op(A)^T G.
                with_grad!(*a, |ga| {
                    if *a_t {
                        // dA (k x m) = op(B) G^T
                        gemm(k, n, m, vb.data(), *b_t, g.data(), true, ga.data_mut(), 1.0, 1.0)
                    } else {
                        // dA (m x k) = G op(B)^T
                        gemm(m, n, k, g.data(), false, vb.data(), !*b_t, ga.data_mut(), 1.0, 1.0)
                    }
                });
                with_grad!(*b, |gb| {
                    if *b_t {
                        // dB (n x k) = G^T op(A)
                        gemm(n, m, k, g.data(), true, va.data(), *a_t, gb.data_mut(), 1.0, 1.0)
                    } else {
                        // dB (k x n) = op(A)^T G
                        gemm(k, m, n, va.data(), !*a_t, g.data(), false, gb.data_mut(), 1.0, 1.0)
                    }
                });
            }
            Op::Add { a, b } => {
                with_grad!(*a, |ga| ga.add_assign(g.data()));
                with_grad!(*b, |gb| gb.add_assign(g.data()));
            }
            Op::Scale { a, factor } => {
                with_grad!(*a, |ga| {
                    for (x, y) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += factor * y;
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                with_grad!(*table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        for (x, y) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                });
            }
            Op::SliceRows { a, start } => {
                with_grad!(*a, |ga| {
                    let c = g.cols();
                    let dst = &mut ga.data_mut()[start * c..start * c + g.numel()];
                    for (x, y) in dst.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                });
            }
            Op::SliceCols { a, start } => {
                with_grad!(*a, |ga| {
                    let len = g.cols();
                    for i in 0..g.rows() {
                        let dst = &mut ga.row_mut(i)[*start..start + len];
                        for (x, y) in dst.iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let mut col = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    with_grad!(p, |gp| {
                        for i in 0..g.rows() {
                            for (x, y) in gp.row_mut(i).iter_mut().zip(&g.row(i)[col..col + w]) {
                                *x += y;
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::ShiftRows { a, offset } => {
                with_grad!(*a, |ga| {
                    let rows = g.rows() as isize;
                    for i in 0..rows {
                        let src = i - offset;
                        if src >= 0 && src < rows {
                            for (x, y) in ga.row_mut(src as usize).iter_mut().zip(g.row(i as usize)) {
                                *x += y;
                            }
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let y = &node.value;
                with_grad!(*a, |ga| {
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let s = kernels::dot(yr, gr);
                        for ((x, yv), gv) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *x += yv * (gv - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = g.cols();
                let gm = nodes[gamma.0].value.data();
                with_grad!(*gamma, |gg| {
                    for i in 0..g.rows() {
                        for j in 0..d {
                            gg.data_mut()[j] += g.row(i)[j] * xhat[i * d + j];
                        }
                    }
                });
                with_grad!(*beta, |gb| {
                    for i in 0..g.rows() {
                        gb.add_assign(g.row(i));
                    }
                });
                with_grad!(*a, |ga| {
                    let mut dxhat = vec![0.0; d];
                    for i in 0..g.rows() {
                        let xh = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g.row(i)[j] * gm[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = kernels::dot(&dxhat, xh) / d as f64;
                        for (j, x) in ga.row_mut(i).iter_mut().enumerate() {
                            *x += rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let x = &nodes[a.0].value;
                with_grad!(*a, |ga| {
                    for ((o, xv), gv) in ga.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
                        *o += kernels::gelu_grad(*xv) * gv;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item() / targets.len() as f64;
                with_grad!(*logits, |gl| {
                    let v = gl.cols();
                    for (i, &t) in targets.iter().enumerate() {
                        let row = gl.row_mut(i);
                        for j in 0..v {
                            row[j] += scale * probs[i * v + j];
                        }
                        row[t] -= scale;
                    }
                });
            }
            Op::CosineDistance {
                a,
                b,
                dots,
                norms_a,
                norms_b,
            } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let rows = va.rows();
                let scale = g.item() / rows as f64;
                // d(1 - cos)/da = -(b / (|a||b|) - cos * a / |a|^2)
                let pass = |ga: &mut Tensor, x: &Tensor, y: &Tensor, nx: &[f64], ny: &[f64]| {
                    for i in 0..rows {
                        let cos = dots[i] / (nx[i] * ny[i]);
                        let inv = 1.0 / (nx[i] * ny[i]);
                        let inv_x2 = cos / (nx[i] * nx[i]);
                        for ((o, xv), yv) in ga.row_mut(i).iter_mut().zip(x.row(i)).zip(y.row(i)) {
                            *o -= scale * (yv * inv - xv * inv_x2);
                        }
                    }
                };
                with_grad!(*a, |ga| pass(ga, va, vb, norms_a, norms_b));
                with_grad!(*b, |gb| pass(gb, vb, va, norms_b, norms_a));
            }
            Op::SquaredDistance { a, b } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let scale = 2.0 * g.item() / va.rows() as f64;
                with_grad!(*a, |ga| {
                    for ((o, x), y) in ga.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        *o += scale * (x - y);
                    }
                });
                with_grad!(*b, |gb| {
                    for ((o, x), y) in gb.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        *o -= scale * (x - y);
                    }
                });
            }
            Op::Sum { a } => {
                let s = g.item();
                with_grad!(*a, |ga| ga.data_mut().iter_mut().for_each(|x| *x += s));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut t = Tape::new();
        let a = t.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = t.constant(Tensor::identity(2));
        let c = t.matmul(a, i).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = t.constant(mat(&[vec![1.0, 2.0]]));
        let z = t.constant(mat(&[vec![0.0], vec![0.0]]));
        let c = t.matmul(r, z).unwrap();
        assert_eq!(t.value(c).dims(), &[1, 1]);
        assert_eq!(t.value(c).item(), 0.0);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("2x3 times 2x3"), "{err}");
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut t = Tape::new();
        let a = t.constant(mat(&[vec![0.0, 0.0], vec![1000.0, 0.0]]));
        let s = t.softmax_rows(a);
        let v = t.value(s);
        assert_eq!(v.row(0), &[0.5, 0.5]);
        assert!((v.row(1)[0] - 1.0).abs() < 1e-15);
        assert!(v.row(1)[1] >= 0.0 && v.row(1)[1] < 1e-300);
        assert!(v.is_finite());
    }

    #[test]
    fn causal_softmax_masks_future_columns() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[3, 4]));
        let s = t.causal_softmax_rows(a, 1);
        let v = t.value(s);
        assert_eq!(v.row(0), &[0.5, 0.5, 0.0, 0.0]);
        assert_eq!(v.row(2), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn layernorm_examples() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[vec![3.0, 3.0, 3.0], vec![-1.0, 1.0, 0.0]]));
        let g = t.constant(Tensor::full(&[3], 1.0));
        let b = t.constant(Tensor::zeros(&[3]));
        let y = t.layernorm(x, g, b).unwrap();
        assert_eq!(t.value(y).row(0), &[0.0, 0.0, 0.0]);

        let x = t.constant(mat(&[vec![-1.0, 1.0]]));
        let g = t.constant(Tensor::full(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        let y = t.layernorm(x, g, b).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        let out = t.value(y).row(0);
        assert!((out[0] + s).abs() < 1e-15 && (out[1] - s).abs() < 1e-15);
    }

    #[test]
    fn gelu_fixed_points() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2], vec![0.0, 10.0]).unwrap());
        let y = t.gelu(x);
        assert_eq!(t.value(y).data()[0], 0.0);
        assert!((t.value(y).data()[1] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_distance_examples() {
        let cases = [
            (vec![3.0, 4.0], vec![3.0, 4.0], 0.0),
            (vec![1.0, 0.0], vec![0.0, 1.0], 1.0),
            (vec![1.0, 1.0], vec![1.0, 0.0], 1.0 - 1.0 / 2f64.sqrt()),
        ];
        for (u, v, want) in cases {
            let mut t = Tape::new();
            let a = t.constant(Tensor::new(vec![2], u).unwrap());
            let b = t.constant(Tensor::new(vec![2], v).unwrap());
            let c = t.cosine_distance(a, b).unwrap();
            assert!((t.value(c).item() - want).abs() < 1e-15);
        }
        assert!((0.292893 - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-6);
    }

    #[test]
    fn cosine_distance_zero_norm_errors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2]));
        let b = t.constant(Tensor::full(&[2], 1.0));
        assert!(matches!(t.cosine_distance(a, b), Err(Error::Degenerate(_))));
    }

    #[test]
    fn loss_at_minimum_has_zero_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap());
        let target = t.constant(Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap());
        let l = t.cosine_distance(w, target).unwrap();
        t.backward(l).unwrap();
        for g in t.grad(w).unwrap().data() {
            assert!(g.abs() < 1e-15, "{g}");
        }
    }

    #[test]
    fn backward_is_single_use() {
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(2.0));
        let s = t.sum(w);
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let w = t.param(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_match_node_dims_and_skip_constants() {
        let mut t = Tape::new();
        let w = t.param(Tensor::full(&[2, 3], 0.5));
        let c = t.constant(Tensor::full(&[3, 2], 1.0));
        let p = t.matmul(w, c).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap().dims(), &[2, 3]);
        assert_eq!(t.grad(p).unwrap().dims(), &[2, 2]);
        assert!(t.grad(c).is_none());
    }
}
