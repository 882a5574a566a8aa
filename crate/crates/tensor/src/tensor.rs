use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Scalar;

/// Dense, contiguous, row-major n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &head)
            .field("len", &self.data.len())
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a contiguous layout.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    let mut acc = 1;
    for (s, d) in out.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    out
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast `target` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast shape.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    if n == 0 {
        return;
    }
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..nd).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Samples `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self { shape, data }
    }

    /// Samples `U(-bound, bound)` entries.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape))
            .map(|_| T::of(rng.random_range(-bound..=bound)))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(numel(&shape), self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "accumulating mismatched shapes");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise binary op with numpy broadcasting.
    pub fn broadcast_zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        if self.shape == other.shape {
            return self.zip_map(other, f);
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape).unwrap_or_else(|| {
            panic!("cannot broadcast {:?} with {:?}", self.shape, other.shape)
        });
        let mut data = vec![T::zero(); numel(&out_shape)];
        if other.data.len() == 1 && out_shape == self.shape {
            let b = other.data[0];
            for (o, &a) in data.iter_mut().zip(&self.data) {
                *o = f(a, b);
            }
        } else if out_shape == self.shape && self.shape.ends_with(&other.shape) {
            let inner = other.data.len();
            for (chunk_o, chunk_a) in data.chunks_mut(inner).zip(self.data.chunks(inner)) {
                for ((o, &a), &b) in chunk_o.iter_mut().zip(chunk_a).zip(&other.data) {
                    *o = f(a, b);
                }
            }
        } else {
            let sa = broadcast_strides(&self.shape, &out_shape);
            let sb = broadcast_strides(&other.shape, &out_shape);
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                data[o] = f(self.data[ia], other.data[ib]);
            });
        }
        Self {
            shape: out_shape,
            data,
        }
    }

    /// Sums a broadcast result back down to `shape`.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let mut out = vec![T::zero(); numel(shape)];
        if shape.is_empty() || numel(shape) == 1 {
            out[0] = self.sum();
        } else if self.shape.ends_with(shape) {
            let inner = out.len();
            for chunk in self.data.chunks(inner) {
                for (o, &v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
        } else {
            let so = broadcast_strides(shape, &self.shape);
            let zero = vec![0; self.shape.len()];
            for_each_broadcast(&self.shape, &so, &zero, |i, io, _| {
                out[io] += self.data[i];
            });
        }
        Self {
            shape: shape.to_vec(),
            data: out,
        }
    }

    /// Reorders axes; `perm[i]` names the source axis of output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.shape.len(), "permutation rank mismatch");
        let src_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let gather: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let zero = vec![0; perm.len()];
        let mut data = vec![T::zero(); self.data.len()];
        for_each_broadcast(&out_shape, &gather, &zero, |o, i, _| {
            data[o] = self.data[i];
        });
        Self {
            shape: out_shape,
            data,
        }
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Self {
        let (outer, dim, inner) = split_at_axis(&self.shape, axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &self.data[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (x, &v) in dst.iter_mut().zip(src) {
                    *x += v;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Self { shape, data }
    }

    /// Repeats along a new axis inserted at `axis`.
    pub fn expand_axis(&self, axis: usize, size: usize) -> Self {
        let mut shape = self.shape.clone();
        shape.insert(axis, 1);
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(self.data.len() * size);
        for o in 0..outer {
            let src = &self.data[o * inner..(o + 1) * inner];
            for _ in 0..size {
                data.extend_from_slice(src);
            }
        }
        shape[axis] = size;
        Self { shape, data }
    }

    /// Matrix product over the last two axes with optional transposes.
    pub fn matmul(&self, other: &Self, trans_a: bool, trans_b: bool) -> Self {
        let (shape, data) = matmul_raw(
            &self.shape,
            &self.data,
            trans_a,
            &other.shape,
            &other.data,
            trans_b,
        );
        Self { shape, data }
    }
}

/// (product of axes before, axis size, product of axes after).
pub fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Batched matrix multiply.
///
/// `a` is `[..., m, k]` (or `[..., k, m]` when `trans_a`), `b` is either 2-D
/// (shared across the batch) or has the same batch axes as `a`.
pub(crate) fn matmul_raw<T: Scalar>(
    sa: &[usize],
    a: &[T],
    trans_a: bool,
    sb: &[usize],
    b: &[T],
    trans_b: bool,
) -> (Vec<usize>, Vec<T>) {
    assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2");
    let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
    assert_eq!(k, kb, "matmul inner dims differ: {sa:?} x {sb:?} (ta={trans_a}, tb={trans_b})");
    let batch_a = numel(&sa[..sa.len() - 2]);
    let mut out_shape = sa[..sa.len() - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![T::zero(); batch_a * m * n];
    let (brs, bcs) = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
    if sb.len() == 2 && !trans_a {
        // Fold the batch into the row dimension: one large product.
        unsafe {
            T::gemm(
                batch_a * m,
                k,
                n,
                T::one(),
                a.as_ptr(),
                ac as isize,
                1,
                b.as_ptr(),
                brs,
                bcs,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return (out_shape, out);
    }
    let batch_b = numel(&sb[..sb.len() - 2]);
    assert!(
        batch_b == 1 || (batch_b == batch_a && sa[..sa.len() - 2] == sb[..sb.len() - 2]),
        "matmul batch mismatch: {sa:?} x {sb:?}"
    );
    let (ars, acs) = if trans_a { (1, ac as isize) } else { (ac as isize, 1) };
    for i in 0..batch_a {
        let ao = &a[i * ar * ac..(i + 1) * ar * ac];
        let bo = if batch_b == 1 { b } else { &b[i * br * bc..(i + 1) * br * bc] };
        let co = &mut out[i * m * n..(i + 1) * m * n];
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                ao.as_ptr(),
                ars,
                acs,
                bo.as_ptr(),
                brs,
                bcs,
                T::zero(),
                co.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    (out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn broadcast_zip_and_sum_back() {
        let a = Tensor::<f64>::from_f64([2, 1, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = Tensor::<f64>::from_f64([2, 1], &[10., 20.]);
        let c = a.broadcast_zip(&b, |x, y| x + y);
        assert_eq!(c.shape(), &[2, 2, 3]);
        assert_eq!(
            c.data(),
            &[11., 12., 13., 21., 22., 23., 14., 15., 16., 24., 25., 26.]
        );
        let back = c.sum_to_shape(&[2, 1]);
        assert_eq!(back.data(), &[81., 141.]);
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let a = Tensor::<f64>::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]);
        let t = a.permute(&[1, 0]);
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn matmul_transposes() {
        let a = Tensor::<f64>::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = Tensor::<f64>::from_f64([3, 2], &[1., 0., 0., 1., 1., 1.]);
        let c = a.matmul(&b, false, false);
        assert_eq!(c.data(), &[4., 5., 10., 11.]);
        let bt = b.permute(&[1, 0]);
        assert_eq!(a.matmul(&bt, false, true).data(), c.data());
        let at = a.permute(&[1, 0]);
        assert_eq!(at.matmul(&b, true, false).data(), c.data());
    }

    #[test]
    fn sum_axis_middle() {
        let a = Tensor::<f64>::from_f64([2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        assert_eq!(a.sum_axis(1).data(), &[4., 6., 12., 14.]);
        assert_eq!(a.expand_axis(1, 2).sum_axis(1).data(), &[2., 4., 6., 8., 10., 12., 14., 16.]);
    }
}
