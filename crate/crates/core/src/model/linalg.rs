//! Dense row-major kernels used by the network.

/// General strided product `C = alpha * A * B + beta * C` with
/// `A: m x k`, `B: k x n`, `C: m x n`. Strides are in elements.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // bounds the kernel will touch
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm: A out of bounds");
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm: B out of bounds");
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc, "gemm: C out of bounds");
    if m == 1 || n == 1 || k <= 1 {
        gemm_loops(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
        return;
    }
    // SAFETY: the asserts above keep every accessed element inside the
    // slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Plain loops for vector-shaped products, where packing costs more than
/// the product itself.
#[allow(clippy::too_many_arguments)]
fn gemm_loops(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    for i in 0..m {
        for j in 0..n {
            let v = &mut c[i * rsc + j * csc];
            *v = if beta == 0.0 { 0.0 } else { beta * *v };
        }
    }
    if k == 0 {
        return;
    }
    if csa == 1 && rsb == 1 {
        for i in 0..m {
            let ar = &a[i * rsa..i * rsa + k];
            for j in 0..n {
                c[i * rsc + j * csc] += alpha * dot(ar, &b[j * csb..j * csb + k]);
            }
        }
    } else if csb == 1 && csc == 1 {
        for i in 0..m {
            let cr = &mut c[i * rsc..i * rsc + n];
            for p in 0..k {
                let s = alpha * a[i * rsa + p * csa];
                for (cv, bv) in cr.iter_mut().zip(&b[p * rsb..p * rsb + n]) {
                    *cv += s * bv;
                }
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * rsa + p * csa] * b[p * rsb + j * csb];
                }
                c[i * rsc + j * csc] += alpha * acc;
            }
        }
    }
}

/// `C (m x n) = A (m x k) * B (k x n)`, accumulating into C when `acc`.
pub fn mm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, acc: bool) {
    gemm(m, k, n, 1.0, a, k, 1, b, n, 1, if acc { 1.0 } else { 0.0 }, c, n, 1);
}

/// `C (k x n) = A^T * B` with `A: m x k`, `B: m x n`.
pub fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, acc: bool) {
    gemm(k, m, n, 1.0, a, 1, k, b, n, 1, if acc { 1.0 } else { 0.0 }, c, n, 1);
}

/// `C (m x k) = A * B^T` with `A: m x n`, `B: k x n`.
pub fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize, acc: bool) {
    gemm(m, n, k, 1.0, a, n, 1, b, 1, n, if acc { 1.0 } else { 0.0 }, c, k, 1);
}

/// Add `bias` to every row of `x` (rows of width `bias.len()`).
pub fn add_row_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Accumulate column sums of `dy` into `db`.
pub fn col_sums_into(dy: &[f64], db: &mut [f64]) {
    for row in dy.chunks_exact(db.len()) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(x)))`
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub const LN_EPS: f64 = 1e-5;

/// Per-row normalization statistics kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Layer normalization over rows of width `gain.len()`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, LnCache) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = gain[j] * xh + bias[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Backward of [`layer_norm`]; accumulates parameter grads and returns dx.
pub fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let d = gain.len();
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xh[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] = rs * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}
