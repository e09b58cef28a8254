//! Slice-level kernels shared by the tape and the tape-free inference paths.

pub const LAYERNORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is m x k and
/// `op(b)` is k x n. With `a_t` set, `a` is stored k x m (likewise `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    alpha: f64,
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted slice lengths cover every index reachable from
    // the dimensions and strides handed to the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// In-place stabilised softmax over the first `visible` entries of `row`;
/// the remaining entries are set to zero.
pub fn softmax_prefix(row: &mut [f64], visible: usize) {
    let visible = visible.min(row.len());
    if visible == 0 {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let max = row[..visible].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in &mut row[..visible] {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in &mut row[..visible] {
        *x *= inv;
    }
    for x in &mut row[visible..] {
        *x = 0.0;
    }
}

/// Normalises one row, writing the affine output. Returns (xhat, rstd) via
/// the optional buffers so the tape can reuse them in backward.
pub fn layernorm_row(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
    xhat: Option<&mut [f64]>,
) -> f64 {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
    match xhat {
        Some(h) => {
            for i in 0..x.len() {
                h[i] = (x[i] - mean) * rstd;
                out[i] = h[i] * gamma[i] + beta[i];
            }
        }
        None => {
            for i in 0..x.len() {
                out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
            }
        }
    }
    rstd
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `log(sum(exp(xs)))`, stabilised.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Borrowed strided matrix view: element (i, j) is
/// `data[offset + i * rs + j * cs]`.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    /// Row-major `rows x cols` block starting at `offset` with row stride `rs`.
    pub fn rows_of(data: &'a [f64], offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        View { data, offset, rows, cols, rs, cs: 1 }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view exceeds its buffer");
        }
    }
}

/// `c = alpha * a * b + beta * c` on strided views; `c` is a row-major block
/// at `c_offset` with row stride `c_rs`.
pub fn gemm_view(a: View, b: View, c: &mut [f64], c_offset: usize, c_rs: usize, alpha: f64, beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm_view inner dims");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(c_offset + (m - 1) * c_rs + n <= c.len(), "gemm_view output exceeds buffer");
    // SAFETY: `check` and the assert above bound every index the kernel can
    // touch for the given dims and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_rs as isize,
            1,
        );
    }
}
