//! Row-major matrix kernels. All accumulate into `out` with a fixed loop
//! order so results do not depend on anything but the inputs.

use super::Real;

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn mm_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn mm_nt_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product over eight interleaved partial sums, combined in a fixed order.
#[inline]
fn dot<F: Real>(x: &[F], y: &[F]) -> F {
    const L: usize = 8;
    let mut acc = [F::zero(); L];
    let split = x.len() - x.len() % L;
    for (xc, yc) in x[..split].chunks_exact(L).zip(y[..split].chunks_exact(L)) {
        for l in 0..L {
            acc[l] += xc[l] * yc[l];
        }
    }
    let mut tail = F::zero();
    for (&a, &b) in x[split..].iter().zip(&y[split..]) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn mm_tn_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == F::zero() {
                continue;
            }
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// Splits a shape into (outer, extent, inner) around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes (right-aligned).
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

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` that broadcasts onto it.
pub(crate) fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; rank];
    for i in 0..in_shape.len() {
        if in_shape[i] != 1 {
            eff[i + offset] = in_strides[i];
        }
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            flat -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// How a broadcast operand lines up with the output.
#[derive(Clone, Debug)]
pub(crate) enum Bcast {
    Same,
    /// Operand shape is a suffix of the output shape: index = i % len.
    Suffix(usize),
    General(Vec<usize>),
}

impl Bcast {
    pub(crate) fn plan(out_shape: &[usize], in_shape: &[usize]) -> Self {
        if out_shape == in_shape {
            return Bcast::Same;
        }
        let n = in_shape.len();
        if n <= out_shape.len() && out_shape[out_shape.len() - n..] == *in_shape {
            return Bcast::Suffix(in_shape.iter().product());
        }
        Bcast::General(broadcast_map(out_shape, in_shape))
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(len) => i % len,
            Bcast::General(map) => map[i],
        }
    }
}

/// Generic axis permutation copy.
pub(crate) fn permute<F: Real>(data: &[F], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<F>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    // Innermost axis handled as a strided run for speed.
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let outer = total / run;
    for _ in 0..outer {
        if run_stride == 1 {
            out.extend_from_slice(&data[base..base + run]);
        } else {
            for j in 0..run {
                out.push(data[base + j * run_stride]);
            }
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[3, 1, 4], &[1, 5, 4]), Some(vec![3, 5, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn broadcast_map_middle_axis() {
        // out [2,3], in [2,1]
        assert_eq!(broadcast_map(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        // out [2,3], in [3]
        assert_eq!(broadcast_map(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn permute_transpose() {
        let data: Vec<f64> = (0..6).map(|x| x as f64).collect();
        let (s, out) = permute(&data, &[2, 3], &[1, 0]);
        assert_eq!(s, vec![3, 2]);
        assert_eq!(out, vec![0., 3., 1., 4., 2., 5.]);
        let data: Vec<f64> = (0..24).map(|x| x as f64).collect();
        let (s, out) = permute(&data, &[2, 3, 4], &[1, 0, 2]);
        assert_eq!(s, vec![3, 2, 4]);
        assert_eq!(&out[..8], &[0., 1., 2., 3., 12., 13., 14., 15.]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64).sin()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        mm_acc(&a, &b, &mut c, 2, 3, 4);
        // b transposed (4x3)
        let (_, bt) = permute(&b, &[3, 4], &[1, 0]);
        let mut c2 = vec![0.0; 8];
        mm_nt_acc(&a, &bt, &mut c2, 2, 3, 4);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
        // aᵀ stored as 3x2; mm_tn(at, b) should equal a·b
        let (_, at) = permute(&a, &[2, 3], &[1, 0]);
        let mut c3 = vec![0.0; 8];
        mm_tn_acc(&at, &b, &mut c3, 3, 2, 4);
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
