//! Raw slice kernels shared by forward and backward passes.

/// `c (+)= op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// A transposed operand is stored in the transposed layout, i.e. `a_t`
/// means `a` holds a `k × m` row-major matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above against the logical
    // dimensions and strides describe in-bounds row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major strides.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Swaps two axes; returns the new shape and data.
pub(crate) fn transpose(
    shape: &[usize],
    data: &[f64],
    ax0: usize,
    ax1: usize,
) -> (Vec<usize>, Vec<f64>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    let in_strides = strides(shape);
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(ax0, ax1);
    let mut out = Vec::with_capacity(data.len());
    // Pad to rank 3 so a single triple loop covers every case.
    let pad = 3 - out_shape.len();
    let mut dims = [1usize; 3];
    let mut st = [0usize; 3];
    for i in 0..out_shape.len() {
        dims[pad + i] = out_shape[i];
        st[pad + i] = perm_strides[i];
    }
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            let base = i * st[0] + j * st[1];
            for k in 0..dims[2] {
                out.push(data[base + k * st[2]]);
            }
        }
    }
    (out_shape, out)
}

/// In-place softmax along the middle index of an `(outer, len, inner)` view.
pub(crate) fn softmax(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| o * len * inner + i * inner + j;
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(data[idx(i)]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                let e = (data[idx(i)] - max).exp();
                data[idx(i)] = e;
                sum += e;
            }
            for i in 0..len {
                data[idx(i)] /= sum;
            }
        }
    }
}

/// In-place log-softmax along the middle index of an `(outer, len, inner)` view.
pub(crate) fn log_softmax(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| o * len * inner + i * inner + j;
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(data[idx(i)]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                sum += (data[idx(i)] - max).exp();
            }
            let lse = max + sum.ln();
            for i in 0..len {
                data[idx(i)] -= lse;
            }
        }
    }
}

/// Sums along the middle index of an `(outer, len, inner)` view.
pub(crate) fn sum_axis(data: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..len {
            let src = &data[(o * len + i) * inner..(o * len + i + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}
