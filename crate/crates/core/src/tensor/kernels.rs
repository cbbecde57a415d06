use super::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c[m×p] += x[m×n] · y[p×n]ᵀ`
pub(crate) fn gemm_nt<T: Real>(x: &[T], y: &[T], c: &mut [T], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let x_row = &x[i * n..(i + 1) * n];
        for q in 0..p {
            let y_row = &y[q * n..(q + 1) * n];
            let mut acc = T::zero();
            for (&xv, &yv) in x_row.iter().zip(y_row) {
                acc += xv * yv;
            }
            c[i * p + q] += acc;
        }
    }
}

/// `c[k×n] += x[m×k]ᵀ · y[m×n]`
pub(crate) fn gemm_tn<T: Real>(x: &[T], y: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let y_row = &y[i * n..(i + 1) * n];
        for p in 0..k {
            let xip = x[i * k + p];
            if xip == T::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cj, &yj) in c_row.iter_mut().zip(y_row) {
                *cj += xip * yj;
            }
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let axis = rank - shape.len() + i;
        strides[axis] = if shape[i] == 1 && out[axis] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output position with the matching flat offsets of both operands.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for flat in 0..numel {
        f(flat, ia, ib);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            ia += sa[axis];
            ib += sb[axis];
            if idx[axis] < out[axis] {
                break;
            }
            ia -= sa[axis] * out[axis];
            ib -= sb[axis] * out[axis];
            idx[axis] = 0;
        }
    }
}

/// Sums `grad` (shaped `out`) down to `shape` along broadcast axes.
pub(crate) fn reduce_to<T: Real>(grad: &[T], out: &[usize], shape: &[usize]) -> Vec<T> {
    let n: usize = shape.iter().product();
    let mut res = vec![T::zero(); n];
    if grad.len() == n {
        res.copy_from_slice(grad);
        return res;
    }
    if out.ends_with(shape) {
        for (i, &g) in grad.iter().enumerate() {
            res[i % n] += g;
        }
        return res;
    }
    let s = broadcast_strides(shape, out);
    for_each_broadcast(out, &s, &s, |flat, ia, _| res[ia] += grad[flat]);
    res
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Materializes `data` (shaped `shape`) with axes reordered by `perm`.
pub(crate) fn permute<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let src = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let gather: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    for_each_broadcast(&out_shape, &gather, &gather, |_, i, _| out.push(data[i]));
    out
}
