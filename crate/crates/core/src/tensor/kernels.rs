//! Slice-level kernels behind the tape operations.

use crate::parallel::for_each_chunk;

/// `c[m,n] = a[m,k] · b[k,n]` for `batch` independent problems laid out
/// contiguously. `b_stride == 0` broadcasts one `b` across the batch, and
/// likewise for `a_stride`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_nn(
    a: &[f64],
    a_stride: usize,
    b: &[f64],
    b_stride: usize,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    if n == 0 {
        return c;
    }
    for_each_chunk(&mut c, n, batch * m * k * n, |row, out| {
        let bi = row / m;
        let i = row % m;
        let a_row = &a[bi * a_stride + i * k..bi * a_stride + (i + 1) * k];
        let b_mat = &b[bi * b_stride..bi * b_stride + k * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b_mat[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    c
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_nt(
    a: &[f64],
    a_stride: usize,
    b: &[f64],
    b_stride: usize,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    if n == 0 {
        return c;
    }
    for_each_chunk(&mut c, n, batch * m * k * n, |row, out| {
        let bi = row / m;
        let i = row % m;
        let a_row = &a[bi * a_stride + i * k..bi * a_stride + (i + 1) * k];
        let b_mat = &b[bi * b_stride..bi * b_stride + n * k];
        for (j, o) in out.iter_mut().enumerate() {
            let b_row = &b_mat[j * k..(j + 1) * k];
            *o = dot(a_row, b_row);
        }
    });
    c
}

/// `c[m,n] = a[k,m]ᵀ · b[k,n]`, optionally summing the product over the batch
/// (used when the right operand of the forward product was broadcast).
#[allow(clippy::too_many_arguments)]
pub fn matmul_tn(
    a: &[f64],
    a_stride: usize,
    b: &[f64],
    b_stride: usize,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    reduce_batch: bool,
) -> Vec<f64> {
    let out_batch = if reduce_batch { 1 } else { batch };
    let mut c = vec![0.0; out_batch * m * n];
    if n == 0 {
        return c;
    }
    for_each_chunk(&mut c, n, batch * m * k * n, |row, out| {
        let (bis, i) = if reduce_batch {
            (0..batch, row)
        } else {
            (row / m..row / m + 1, row % m)
        };
        for bi in bis {
            let a_mat = &a[bi * a_stride..bi * a_stride + k * m];
            let b_mat = &b[bi * b_stride..bi * b_stride + k * n];
            for p in 0..k {
                let av = a_mat[p * m + i];
                if av == 0.0 {
                    continue;
                }
                let b_row = &b_mat[p * n..(p + 1) * n];
                for (o, &bv) in out.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    });
    c
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for o in chunks * 4..a.len() {
        s += a[o] * b[o];
    }
    s
}

/// Generic axis permutation of a row-major array.
pub fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    if rank == 0 {
        out.push(data[0]);
        return (out, out_shape);
    }
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // advance the outer multi-index
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub const GELU_COEF: f64 = 0.044_715;
pub const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
