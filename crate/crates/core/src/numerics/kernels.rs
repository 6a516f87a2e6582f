//! Slice-level compute kernels shared by the autodiff graph and the
//! tape-free inference path.

use super::Scalar;

pub const RMS_NORM_EPS: f64 = 1e-6;

/// Additive logit offset for masked attention positions. Large enough that
/// `exp` underflows to exactly zero after max-subtraction in both precisions.
pub const MASK_NEG: f64 = -1e9;

/// `c (+)= op(a) @ op(b)` for row-major `a` and `b`, where `op` optionally
/// transposes. `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "matmul lhs length");
    assert_eq!(b.len(), k * n, "matmul rhs length");
    assert_eq!(c.len(), m * n, "matmul out length");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths were checked above and the three slices are distinct borrows.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

/// In-place numerically stable softmax over consecutive rows of width `cols`.
pub fn softmax_rows<T: Scalar>(x: &mut [T], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// In-place log-softmax over consecutive rows of width `cols`.
pub fn log_softmax_rows<T: Scalar>(x: &mut [T], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
}

/// `y = x / rms(x) * gain` per row; returns the per-row reciprocal rms.
pub fn rms_norm_rows<T: Scalar>(x: &[T], gain: &[T], y: &mut [T], eps: T) -> Vec<T> {
    let d = gain.len();
    let mut inv = Vec::with_capacity(x.len() / d.max(1));
    let dn = T::from_usize(d).unwrap();
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() / dn;
        let r = T::one() / (ms + eps).sqrt();
        for ((yv, &xv), &g) in yr.iter_mut().zip(xr).zip(gain) {
            *yv = xv * r * g;
        }
        inv.push(r);
    }
    inv
}

/// Permutes a row-major array of shape `shape` by `axes`, writing into `out`.
pub fn permute<T: Scalar>(x: &[T], shape: &[usize], axes: &[usize], out: &mut [T]) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = x[src];
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
