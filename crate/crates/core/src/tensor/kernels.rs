//! Inner loops shared by forward and adjoint passes.

use super::Real;

/// `out += a · b` for `a: m×k`, `b: k×n`.
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: m×n`, `b: k×n`, giving `m×k`.
pub(crate) fn matmul_bt_acc<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    n: usize,
    k: usize,
) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(a_row, b_row);
        }
    }
}

/// `out += aᵀ · g` for `a: m×k`, `g: m×n`, giving `k×n`.
pub(crate) fn matmul_at_acc<T: Real>(
    a: &[T],
    g: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
    }
}

/// Eight independent partial sums so the loop vectorizes; the summation
/// order is fixed, so results stay deterministic.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let len = a.len().min(b.len());
    let (a, b) = (&a[..len], &b[..len]);
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        acc += x * y;
    }
    acc
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Max-subtracted softmax of `row` in place; entries with `keep[j] == false`
/// become exactly zero. A row with nothing kept becomes all zeros.
pub(crate) fn softmax_row<T: Real>(row: &mut [T], keep: Option<&[bool]>) {
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if keep.is_none_or(|k| k[j]) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if keep.is_none_or(|k| k[j]) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Adjoint of a softmax row: `dx = p ⊙ (dp − ⟨p, dp⟩)`, accumulated.
pub(crate) fn softmax_row_adjoint<T: Real>(p: &[T], dp: &[T], dx: &mut [T]) {
    let inner = dot(p, dp);
    for ((d, &pv), &g) in dx.iter_mut().zip(p).zip(dp) {
        *d += pv * (g - inner);
    }
}
