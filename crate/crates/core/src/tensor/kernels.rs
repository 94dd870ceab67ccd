//! Raw loops behind tensor operations. Nothing here knows about graphs.

use super::Tensor;
use crate::error::{Error, Result};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Views `shape` as `[outer, shape[axis], inner]`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Usage(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numpy-style broadcast of two shapes (aligned on the trailing axis).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k + a.len() >= rank { a[k + a.len() - rank] } else { 1 };
        let db = if k + b.len() >= rank { b[k + b.len() - rank] } else { 1 };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` seen through the broadcast `out` shape (zero on
/// broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|k| {
            if k < pad || shape[k - pad] == 1 {
                0
            } else {
                own[k - pad]
            }
        })
        .collect()
}

/// Elementwise `f(a, b)` over the broadcast of both shapes.
pub(crate) fn zip_broadcast(
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    let n: usize = out_shape.iter().product();
    if a.shape() == out_shape && b.shape() == out_shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor {
            shape: out_shape.to_vec(),
            data,
        };
    }
    if b.len() == 1 && a.shape() == out_shape {
        let y = b.data[0];
        return Tensor {
            shape: out_shape.to_vec(),
            data: a.data.iter().map(|&x| f(x, y)).collect(),
        };
    }
    if a.len() == 1 && b.shape() == out_shape {
        let x = a.data[0];
        return Tensor {
            shape: out_shape.to_vec(),
            data: b.data.iter().map(|&y| f(x, y)).collect(),
        };
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut data = Vec::with_capacity(n);
    let rank = out_shape.len();
    let last = rank - 1;
    let inner = out_shape[last];
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let outer = n / inner.max(1);
    for _ in 0..outer {
        for k in 0..inner {
            data.push(f(a.data[oa + k * sa[last]], b.data[ob + k * sb[last]]));
        }
        // advance the odometer over all but the last axis
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor {
        shape: out_shape.to_vec(),
        data,
    }
}

/// Sums `t` down to `shape`, undoing a broadcast.
pub(crate) fn sum_to_shape(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let n_out: usize = shape.iter().product();
    if n_out == 1 {
        return Tensor {
            shape: shape.to_vec(),
            data: vec![t.sum()],
        };
    }
    let out_shape = t.shape();
    let so = broadcast_strides(shape, out_shape);
    let mut data = vec![0.0; n_out];
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &g in &t.data {
        data[off] += g;
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += so[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= so[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

pub(crate) fn permute(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::Usage(format!(
            "invalid permutation {axes:?} for rank {rank}"
        )));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape[a]).collect();
    let src = strides(&t.shape);
    let s: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
    let n = t.len();
    let mut data = Vec::with_capacity(n);
    if n == 0 {
        return Tensor::new(out_shape, data);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(t.data[off]);
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += s[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= s[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, data)
}

/// `c = beta * c + op(a) * op(b)` for one `m x k` by `k x n` product.
/// `a` is stored `m x k` (or `k x m` when `ta`), `b` is `k x n` (or `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above guarantees every index the kernel touches
    // (row/col strides derived from m, k, n) lies inside the three slices, and
    // `c` does not alias `a` or `b` because it is borrowed mutably.
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

/// Shape of one operand of a batched product: leading batch axes then the
/// stored matrix.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatSpec<'a> {
    pub shape: &'a [usize],
    pub trans: bool,
}

impl MatSpec<'_> {
    fn batch(&self) -> &[usize] {
        &self.shape[..self.shape.len() - 2]
    }
    /// (rows, cols) of op(x).
    fn dims(&self) -> (usize, usize) {
        let r = self.shape.len();
        let (a, b) = (self.shape[r - 2], self.shape[r - 1]);
        if self.trans {
            (b, a)
        } else {
            (a, b)
        }
    }
}

/// Output shape of a batched product. Batch axes must agree, or one side must be
/// a plain matrix shared across the other's batch.
pub(crate) fn matmul_shape(a: MatSpec<'_>, b: MatSpec<'_>) -> Option<Vec<usize>> {
    if a.shape.len() < 2 || b.shape.len() < 2 {
        return None;
    }
    let (m, ka) = a.dims();
    let (kb, n) = b.dims();
    if ka != kb {
        return None;
    }
    let batch = match (a.batch(), b.batch()) {
        (x, y) if x == y => x.to_vec(),
        (x, []) => x.to_vec(),
        ([], y) => y.to_vec(),
        _ => return None,
    };
    let mut out = batch;
    out.push(m);
    out.push(n);
    Some(out)
}

pub(crate) fn matmul(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    let sa = MatSpec { shape: a.shape(), trans: ta };
    let sb = MatSpec { shape: b.shape(), trans: tb };
    let shape = matmul_shape(sa, sb).ok_or_else(|| Error::dim("matmul", a.shape(), b.shape()))?;
    let mut out = Tensor::zeros(&shape);
    gemm_batched(a, ta, b, tb, &mut out, 0.0);
    Ok(out)
}

/// Batched product into `out`, which must already have the product's shape or,
/// when both operands are batched and `out` is a plain matrix, the sum over the
/// batch.
pub(crate) fn gemm_batched(a: &Tensor, ta: bool, b: &Tensor, tb: bool, out: &mut Tensor, beta: f64) {
    let sa = MatSpec { shape: a.shape(), trans: ta };
    let sb = MatSpec { shape: b.shape(), trans: tb };
    let (m, k) = sa.dims();
    let (_, n) = sb.dims();
    let na: usize = sa.batch().iter().product();
    let nb: usize = sb.batch().iter().product();
    let batched_a = !sa.batch().is_empty();
    let batched_b = !sb.batch().is_empty();
    let reduce = out.rank() == 2 && (batched_a || batched_b);

    // A batched, untransposed A times a shared matrix is one tall product.
    if batched_a && !batched_b && !ta && !reduce {
        gemm(na * m, k, n, &a.data, false, &b.data, tb, &mut out.data, beta);
        return;
    }
    // Shared-matrix gradient: sum_b A_b^T G_b is one product over the stacked rows.
    if reduce && batched_a && batched_b && ta && !tb && na == nb {
        // batches are stacked contiguously along the contracted axis
        gemm(m, k * na, n, &a.data, true, &b.data, false, &mut out.data, beta);
        return;
    }
    let count = na.max(nb);
    let (a_step, b_step) = (
        if batched_a { m * k } else { 0 },
        if batched_b { k * n } else { 0 },
    );
    for i in 0..count {
        let a_slice = &a.data[i * a_step..i * a_step + m * k];
        let b_slice = &b.data[i * b_step..i * b_step + k * n];
        if reduce {
            let beta_i = if i == 0 { beta } else { 1.0 };
            gemm(m, k, n, a_slice, ta, b_slice, tb, &mut out.data, beta_i);
        } else {
            let c = &mut out.data[i * m * n..(i + 1) * m * n];
            gemm(m, k, n, a_slice, ta, b_slice, tb, c, beta);
        }
    }
}

/// Softmax along `axis` with max subtraction.
pub(crate) fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(t.shape(), axis)?;
    let mut out = t.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mx = (0..n).map(|k| t.data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                // every entry masked: the row stays all-zero
                (0..n).for_each(|k| out.data[at(k)] = 0.0);
                continue;
            }
            let mut z = 0.0;
            for k in 0..n {
                let e = (t.data[at(k)] - mx).exp();
                out.data[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                out.data[at(k)] /= z;
            }
        }
    }
    Ok(out)
}
