//! Softmax family, normalisation, lookup and loss ops.

use rand::Rng;

use crate::{Scalar, Tensor, Var};

fn last_dim<T: Scalar>(t: &Tensor<T>) -> usize {
    *t.shape().last().expect("op needs rank >= 1")
}

fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = last_dim(x);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn log_softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = last_dim(x);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Row-wise log-softmax of a plain tensor (no graph).
pub fn log_softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    log_softmax_rows(x)
}

/// Row-wise softmax of a plain tensor (no graph).
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    softmax_rows(x)
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn softmax(self) -> Var<'g, T> {
        let y = softmax_rows(&self.value());
        let ys = y.clone();
        let ix = self.id;
        self.graph.push_op(y, &[ix], move |g, sink| {
            let d = last_dim(&ys);
            let mut dx = vec![T::zero(); ys.numel()];
            for ((dxr, yr), gr) in dx.chunks_mut(d).zip(ys.data().chunks(d)).zip(g.data().chunks(d)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((o, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            sink.accumulate(ix, Tensor::new(ys.shape().to_vec(), dx));
        })
    }

    pub fn log_softmax(self) -> Var<'g, T> {
        let y = log_softmax_rows(&self.value());
        let ys = y.clone();
        let ix = self.id;
        self.graph.push_op(y, &[ix], move |g, sink| {
            let d = last_dim(&ys);
            let mut dx = vec![T::zero(); ys.numel()];
            for ((dxr, yr), gr) in dx.chunks_mut(d).zip(ys.data().chunks(d)).zip(g.data().chunks(d)) {
                let s: T = gr.iter().copied().sum();
                for ((o, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                    *o = gv - yv.exp() * s;
                }
            }
            sink.accumulate(ix, Tensor::new(ys.shape().to_vec(), dx));
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let gm = gamma.value();
        let bt = beta.value();
        let d = last_dim(&x);
        assert_eq!(gm.numel(), d, "layer_norm gamma size");
        assert_eq!(bt.numel(), d, "layer_norm beta size");
        let rows = x.numel() / d;
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gm.data()[j] + bt.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        let (ix, ig, ib) = (self.id, gamma.id, beta.id);
        self.graph.push_op(Tensor::new(shape.clone(), out), &[ix, ig, ib], move |g, sink| {
            let gd = g.data();
            if sink.wants(ig) || sink.wants(ib) {
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] += gd[r * d + j] * xhat[r * d + j];
                        db[j] += gd[r * d + j];
                    }
                }
                sink.accumulate(ig, Tensor::new(gm.shape().to_vec(), dg));
                sink.accumulate(ib, Tensor::new(bt.shape().to_vec(), db));
            }
            if sink.wants(ix) {
                let mut dx = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let gy = gd[r * d + j] * gm.data()[j];
                        m1 += gy;
                        m2 += gy * xhat[r * d + j];
                    }
                    m1 /= dn;
                    m2 /= dn;
                    for j in 0..d {
                        let gy = gd[r * d + j] * gm.data()[j];
                        dx[r * d + j] = inv_std[r] * (gy - m1 - xhat[r * d + j] * m2);
                    }
                }
                sink.accumulate(ix, Tensor::new(shape.clone(), dx));
            }
        })
    }

    /// Row lookup into a `[V, D]` table; the output is `prefix ++ [D]`.
    ///
    /// Panics if an id is out of range; callers validate ids first.
    pub fn embedding(self, ids: &[usize], prefix: &[usize]) -> Var<'g, T> {
        let table = self.value();
        assert_eq!(table.ndim(), 2, "embedding table must be 2-D");
        let (v, d) = (table.shape()[0], table.shape()[1]);
        assert_eq!(ids.len(), prefix.iter().product::<usize>(), "ids do not fill prefix");
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range {v}");
            data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let ids = ids.to_vec();
        let it = self.id;
        self.graph.push_op(Tensor::new(shape, data), &[it], move |g, sink| {
            let mut dt = vec![T::zero(); v * d];
            for (row, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[id * d + j] += g.data()[row * d + j];
                }
            }
            sink.accumulate(it, Tensor::new(vec![v, d], dt));
        })
    }

    /// Mean cross-entropy of `[N, V]` logits against class ids.
    ///
    /// Rows whose target equals `ignore` are skipped. With `smoothing > 0` the
    /// target distribution puts `smoothing / V` on every class plus the
    /// remaining `1 - smoothing` on the true class.
    pub fn cross_entropy(self, targets: &[usize], ignore: Option<usize>, smoothing: f64) -> Var<'g, T> {
        let logits = self.value();
        assert_eq!(logits.ndim(), 2, "cross_entropy expects [N, V] logits");
        let (n, v) = (logits.shape()[0], logits.shape()[1]);
        assert_eq!(targets.len(), n, "one target per row");
        let logp = log_softmax_rows(&logits);
        let counted: Vec<bool> = targets.iter().map(|&t| Some(t) != ignore).collect();
        let count = counted.iter().filter(|&&c| c).count().max(1);
        let on = 1.0 - smoothing;
        let off = smoothing / v as f64;
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if !counted[r] {
                continue;
            }
            assert!(t < v, "target {t} out of range {v}");
            let row = &logp.data()[r * v..(r + 1) * v];
            let mut l = -on * row[t].as_f64();
            if off > 0.0 {
                l -= off * row.iter().map(|x| x.as_f64()).sum::<f64>();
            }
            total += l;
        }
        let loss = Tensor::scalar(T::of(total / count as f64));
        let targets = targets.to_vec();
        let il = self.id;
        self.graph.push_op(loss, &[il], move |g, sink| {
            let scale = g.item() / T::of(count as f64);
            let mut dx = vec![T::zero(); n * v];
            for r in 0..n {
                if !counted[r] {
                    continue;
                }
                let row = &logp.data()[r * v..(r + 1) * v];
                for j in 0..v {
                    let q = off + if j == targets[r] { on } else { 0.0 };
                    dx[r * v + j] = scale * (row[j].exp() - T::of(q));
                }
            }
            sink.accumulate(il, Tensor::new(vec![n, v], dx));
        })
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, rng: &mut R) -> Var<'g, T> {
        if p <= 0.0 {
            return self;
        }
        let x = self.value();
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mask = self.graph.constant(Tensor::new(x.shape().to_vec(), mask));
        self.mul(mask)
    }
}
