use crate::{Scalar, Tensor, Var};

/// Flattens all leading axes into rows: `[..., r, c] -> [prod * r, c]`.
fn as_rows<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let c = s[s.len() - 1];
    t.clone().reshape(vec![t.numel() / c, c])
}

impl<'g, T: Scalar> Var<'g, T> {
    /// `a @ b` over the last two axes; `b` may be 2-D and shared across the batch.
    pub fn matmul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.matmul_t(other, false, false)
    }

    /// `a @ b^T` over the last two axes.
    pub fn matmul_nt(self, other: Var<'g, T>) -> Var<'g, T> {
        self.matmul_t(other, false, true)
    }

    pub fn matmul_t(self, other: Var<'g, T>, trans_a: bool, trans_b: bool) -> Var<'g, T> {
        assert!(!(trans_a && trans_b), "matmul with both operands transposed is not supported");
        let a = self.value();
        let b = other.value();
        let out = a.matmul(&b, trans_a, trans_b);
        let (ia, ib) = (self.id, other.id);
        let shared_b = b.ndim() == 2 && a.ndim() > 2;
        self.graph.push_op(out, &[ia, ib], move |g, sink| {
            if sink.wants(ia) {
                let ga = match (trans_a, trans_b) {
                    (false, false) => g.matmul(&b, false, true),
                    (false, true) => g.matmul(&b, false, false),
                    (true, false) => {
                        if shared_b {
                            // dA_i = (dC_i B^T)^T for every batch entry.
                            g.matmul(&b, false, true).permute(&swap_last_two(g.ndim()))
                        } else {
                            b.matmul(g, false, true)
                        }
                    }
                    (true, true) => unreachable!(),
                };
                sink.accumulate(ia, ga);
            }
            if sink.wants(ib) {
                let gb = if shared_b {
                    let (a2, g2) = (as_rows(&a), as_rows(g));
                    match (trans_a, trans_b) {
                        (false, false) => a2.matmul(&g2, true, false),
                        (false, true) => g2.matmul(&a2, true, false),
                        (true, false) => {
                            // Sum over the batch of A_i dC_i.
                            let k = a.shape()[a.ndim() - 2];
                            let n = g.shape()[g.ndim() - 1];
                            let per = a.matmul(g, false, false);
                            let batches = per.numel() / (k * n);
                            per.reshape(vec![batches, k, n]).sum_axis(0)
                        }
                        (true, true) => unreachable!(),
                    }
                } else {
                    match (trans_a, trans_b) {
                        (false, false) => a.matmul(g, true, false),
                        (false, true) => g.matmul(&a, true, false),
                        (true, false) => a.matmul(g, false, false),
                        (true, true) => unreachable!(),
                    }
                };
                sink.accumulate(ib, gb);
            }
        })
    }
}

fn swap_last_two(nd: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..nd).collect();
    p.swap(nd - 1, nd - 2);
    p
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn shared_weight_gradient_sums_over_batch() {
        let g = Graph::<f64>::new();
        let x = g.var(Tensor::from_f64([2, 1, 2], &[1., 2., 3., 4.]));
        let w = g.var(Tensor::from_f64([2, 1], &[1., 1.]));
        let y = x.matmul(w).sum_all();
        assert_eq!(y.item(), 10.0);
        let grads = g.backward(y);
        assert_eq!(grads.get(w).unwrap().data(), &[4., 6.]);
        assert_eq!(grads.get(x).unwrap().data(), &[1., 1., 1., 1.]);
    }
}
