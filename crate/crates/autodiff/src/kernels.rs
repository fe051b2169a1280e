//! Raw numeric kernels shared by the forward and reverse passes.

use crate::error::{AutodiffError, Result};
use crate::tensor::{numel, Tensor};

/// `c = op(a) @ op(b) + beta * c` on row-major buffers, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`. A transposed operand is stored in its
/// untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the three buffers, whose lengths are asserted above.
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

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn log_softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|v| *v -= lse);
}

/// Normalizes `row` in place and returns `1 / sqrt(var + eps)`.
pub(crate) fn layer_norm_row(row: &mut [f64], eps: f64) -> f64 {
    let w = row.len() as f64;
    let mean = row.iter().sum::<f64>() / w;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w;
    let inv_std = 1.0 / (var + eps).sqrt();
    row.iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
    inv_std
}

/// Sizes before, along and after `axis`.
fn split_at_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(AutodiffError::BadAxis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0].shape();
    let (outer, _, inner) = split_at_axis("concat", first, axis)?;
    let mut total = 0;
    for p in parts {
        let s = p.shape();
        let same_rest = s.len() == first.len()
            && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !same_rest {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                lhs: first.to_vec(),
                rhs: s.to_vec(),
            });
        }
        total += s[axis];
    }
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

pub(crate) fn slice(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, size, inner) = split_at_axis("slice", t.shape(), axis)?;
    if start + len > size {
        return Err(AutodiffError::InvalidArgument {
            op: "slice",
            reason: format!("range {start}..{} exceeds axis length {size}", start + len),
        });
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * size * inner + start * inner;
        out.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

/// Inverse of [`slice`]: places `part` into a zero tensor of `shape`.
pub(crate) fn scatter_slice(shape: &[usize], part: &Tensor, axis: usize, start: usize) -> Result<Tensor> {
    let (outer, size, inner) = split_at_axis("slice", shape, axis)?;
    let len = part.shape()[axis];
    let mut out = vec![0.0; numel(shape)];
    for o in 0..outer {
        let base = o * size * inner + start * inner;
        out[base..base + len * inner].copy_from_slice(&part.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(shape.to_vec(), out)
}

pub(crate) fn transpose_last(t: &Tensor) -> Result<Tensor> {
    let r = t.rank();
    if r < 2 {
        return Err(AutodiffError::BadAxis {
            op: "transpose",
            axis: 1,
            rank: r,
        });
    }
    let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
    let batch = numel(&t.shape()[..r - 2]);
    let mut out = vec![0.0; t.numel()];
    for b in 0..batch {
        let src = &t.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out)
}

/// Index correspondence between a broadcast source and its expanded target.
pub(crate) struct BroadcastMap {
    target: Vec<usize>,
    src_strides: Vec<usize>,
}

impl BroadcastMap {
    pub(crate) fn new(src: &[usize], target: &[usize]) -> Result<Self> {
        let err = || AutodiffError::ShapeMismatch {
            op: "broadcast_to",
            lhs: src.to_vec(),
            rhs: target.to_vec(),
        };
        if src.len() > target.len() {
            return Err(err());
        }
        let offset = target.len() - src.len();
        let mut natural = vec![0usize; src.len()];
        let mut acc = 1;
        for i in (0..src.len()).rev() {
            natural[i] = acc;
            acc *= src[i];
        }
        let mut src_strides = vec![0usize; target.len()];
        for (i, &t) in target.iter().enumerate() {
            if i < offset {
                continue;
            }
            let s = src[i - offset];
            if s == t {
                src_strides[i] = natural[i - offset];
            } else if s != 1 {
                return Err(err());
            }
        }
        Ok(Self {
            target: target.to_vec(),
            src_strides,
        })
    }

    /// Calls `f(target_index, source_index)` for every target element in order.
    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let total = numel(&self.target);
        if total == 0 {
            return;
        }
        let rank = self.target.len();
        let mut counter = vec![0usize; rank];
        let mut src = 0usize;
        for dst in 0..total {
            f(dst, src);
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                src += self.src_strides[ax];
                if counter[ax] < self.target[ax] {
                    break;
                }
                src -= self.src_strides[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
    }
}
