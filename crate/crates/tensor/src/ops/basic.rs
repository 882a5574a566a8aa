//! Elementwise, shape and reduction ops.

use crate::tensor::{numel, split_at_axis};
use crate::{Scalar, Tensor, Var};

impl<'g, T: Scalar> Var<'g, T> {
    fn binary(
        self,
        other: Var<'g, T>,
        f: impl Fn(T, T) -> T,
        grad_lhs: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + 'static,
        grad_rhs: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + 'static,
    ) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        let out = a.broadcast_zip(&b, f);
        let (ia, ib) = (self.id, other.id);
        self.graph.push_op(out, &[ia, ib], move |g, sink| {
            if sink.wants(ia) {
                sink.accumulate(ia, grad_lhs(g, &a, &b).sum_to_shape(a.shape()));
            }
            if sink.wants(ib) {
                sink.accumulate(ib, grad_rhs(g, &a, &b).sum_to_shape(b.shape()));
            }
        })
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |x, y| x + y, |g, _, _| g.clone(), |g, _, _| g.clone())
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |x, y| x - y, |g, _, _| g.clone(), |g, _, _| g.map(|v| -v))
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(
            other,
            |x, y| x * y,
            |g, _, b| g.broadcast_zip(b, |u, v| u * v),
            |g, a, _| g.broadcast_zip(a, |u, v| u * v),
        )
    }

    fn unary(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static, // (input, output) -> d output / d input
    ) -> Var<'g, T> {
        let x = self.value();
        let y = x.map(f);
        let ix = self.id;
        let y_saved = y.clone();
        self.graph.push_op(y, &[ix], move |g, sink| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y_saved.data())
                .map(|((&gv, &xv), &yv)| gv * df(xv, yv))
                .collect();
            sink.accumulate(ix, Tensor::new(x.shape().to_vec(), data));
        })
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::of(c);
        self.unary(move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::of(c);
        self.unary(move |v| v + c, |_, _| T::one())
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(|v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// Clamp to `[-1, 1]`; the derivative is 1 on the closed interval.
    pub fn hardtanh(self) -> Var<'g, T> {
        self.unary(
            |v| v.max(-T::one()).min(T::one()),
            |x, _| {
                if x.abs() <= T::one() {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|v| v.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, T> {
        self.unary(|v| v.ln(), |x, _| T::one() / x)
    }

    pub fn sqr(self) -> Var<'g, T> {
        self.unary(|v| v * v, |x, _| x + x)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(numel(shape), x.numel(), "reshape {:?} -> {shape:?}", x.shape());
        let in_shape = x.shape().to_vec();
        let out = x.as_ref().clone().reshape(shape.to_vec());
        let ix = self.id;
        self.graph.push_op(out, &[ix], move |g, sink| {
            sink.accumulate(ix, g.clone().reshape(in_shape.clone()));
        })
    }

    pub fn permute(self, perm: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let out = x.permute(perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let ix = self.id;
        self.graph.push_op(out, &[ix], move |g, sink| {
            sink.accumulate(ix, g.permute(&inverse));
        })
    }

    pub fn transpose(self, a: usize, b: usize) -> Var<'g, T> {
        let mut perm: Vec<usize> = (0..self.shape().len()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let (outer, dim, inner) = split_at_axis(&in_shape, axis);
        assert!(start + len <= dim, "narrow {start}+{len} beyond axis size {dim}");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let ix = self.id;
        self.graph.push_op(Tensor::new(out_shape, data), &[ix], move |g, sink| {
            let mut full = vec![T::zero(); numel(&in_shape)];
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                full[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            sink.accumulate(ix, Tensor::new(in_shape.clone(), full));
        })
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        let sizes: Vec<usize> = values
            .iter()
            .map(|v| {
                let s = v.shape();
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                for (d, (&x, &y)) in s.iter().zip(&first).enumerate() {
                    assert!(d == axis || x == y, "concat shape mismatch {s:?} vs {first:?}");
                }
                s[axis]
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &sz) in values.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let ids_c = ids.clone();
        graph.push_op(Tensor::new(out_shape, data), &ids, move |g, sink| {
            let mut offset = 0;
            for ((&id, &sz), shape) in ids_c.iter().zip(&sizes).zip(&shapes) {
                if sink.wants(id) {
                    let mut part = Vec::with_capacity(outer * sz * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&g.data()[base..base + sz * inner]);
                    }
                    sink.accumulate(id, Tensor::new(shape.clone(), part));
                }
                offset += sz;
            }
        })
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let ix = self.id;
        self.graph.push_op(Tensor::scalar(x.sum()), &[ix], move |g, sink| {
            sink.accumulate(ix, Tensor::full(shape.clone(), g.item()));
        })
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Var<'g, T> {
        let x = self.value();
        let size = x.shape()[axis];
        let out = x.sum_axis(axis);
        let ix = self.id;
        self.graph.push_op(out, &[ix], move |g, sink| {
            sink.accumulate(ix, g.expand_axis(axis, size));
        })
    }

    pub fn mean_axis(self, axis: usize) -> Var<'g, T> {
        let n = self.dim(axis) as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }
}
