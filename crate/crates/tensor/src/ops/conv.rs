//! 2-D convolution (im2col + gemm) and pooling over NCHW tensors.

use crate::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        assert!(self.height + 2 * ph >= kh && self.width + 2 * pw >= kw, "kernel larger than input");
        ((self.height + 2 * ph - kh) / sh + 1, (self.width + 2 * pw - kw) / sw + 1)
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }
}

/// Unfolds one `[C, H, W]` image into `[C*kh*kw, Ho*Wo]` columns.
fn im2col<T: Scalar>(img: &[T], geo: &Conv2dGeometry, cols: &mut [T]) {
    let (ho, wo) = geo.out_hw();
    let (kh, kw) = geo.kernel;
    let (sh, sw) = geo.stride;
    let (ph, pw) = geo.padding;
    let (h, w) = (geo.height, geo.width);
    let p = ho * wo;
    for c in 0..geo.channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in line.iter_mut().enumerate() {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adds `[C*kh*kw, Ho*Wo]` columns back into a `[C, H, W]` image gradient.
fn col2im<T: Scalar>(cols: &[T], geo: &Conv2dGeometry, img: &mut [T]) {
    let (ho, wo) = geo.out_hw();
    let (kh, kw) = geo.kernel;
    let (sh, sw) = geo.stride;
    let (ph, pw) = geo.padding;
    let (h, w) = (geo.height, geo.width);
    let p = ho * wo;
    for c in 0..geo.channels {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    beta: T,
    c: &mut [T],
) {
    // SAFETY: slices cover the strided extents used below by construction at the call sites.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

impl<'g, T: Scalar> Var<'g, T> {
    /// Convolution of `[B, C, H, W]` input with `[O, C, kh, kw]` weights.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Var<'g, T> {
        let x = self.value();
        let w = weight.value();
        let xs = x.shape();
        let ws = w.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCHW");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
        let (b, o) = (xs[0], ws[0]);
        let geo = Conv2dGeometry {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: (ws[2], ws[3]),
            stride,
            padding,
        };
        let (ho, wo) = geo.out_hw();
        let p = ho * wo;
        let ckk = geo.col_rows();
        let img = geo.channels * geo.height * geo.width;
        let mut cols = vec![T::zero(); b * ckk * p];
        let mut out = vec![T::zero(); b * o * p];
        for bi in 0..b {
            let col = &mut cols[bi * ckk * p..(bi + 1) * ckk * p];
            im2col(&x.data()[bi * img..(bi + 1) * img], &geo, col);
            gemm_into(
                o,
                ckk,
                p,
                w.data(),
                (ckk as isize, 1),
                col,
                (p as isize, 1),
                T::zero(),
                &mut out[bi * o * p..(bi + 1) * o * p],
            );
        }
        let bias_val = bias.map(|bv| bv.value());
        if let Some(bv) = &bias_val {
            assert_eq!(bv.numel(), o, "conv2d bias size");
            for bi in 0..b {
                for oc in 0..o {
                    let add = bv.data()[oc];
                    for v in &mut out[(bi * o + oc) * p..(bi * o + oc + 1) * p] {
                        *v += add;
                    }
                }
            }
        }
        let mut inputs = vec![self.id, weight.id];
        if let Some(bv) = bias {
            inputs.push(bv.id);
        }
        let (ix, iw, ib) = (self.id, weight.id, bias.map(|v| v.id));
        let x_shape = xs.to_vec();
        let w_shape = ws.to_vec();
        self.graph.push_op(Tensor::new(vec![b, o, ho, wo], out), &inputs, move |g, sink| {
            let gd = g.data();
            if let Some(ib) = ib {
                if sink.wants(ib) {
                    let mut db = vec![T::zero(); o];
                    for bi in 0..b {
                        for (oc, d) in db.iter_mut().enumerate() {
                            *d += gd[(bi * o + oc) * p..(bi * o + oc + 1) * p].iter().copied().sum();
                        }
                    }
                    sink.accumulate(ib, Tensor::new(vec![o], db));
                }
            }
            if sink.wants(iw) {
                let mut dw = vec![T::zero(); o * ckk];
                for bi in 0..b {
                    // dW += G_b [O, P] * cols_b^T [P, CKK]
                    gemm_into(
                        o,
                        p,
                        ckk,
                        &gd[bi * o * p..(bi + 1) * o * p],
                        (p as isize, 1),
                        &cols[bi * ckk * p..(bi + 1) * ckk * p],
                        (1, p as isize),
                        T::one(),
                        &mut dw,
                    );
                }
                sink.accumulate(iw, Tensor::new(w_shape.clone(), dw));
            }
            if sink.wants(ix) {
                let wv = w.data();
                let mut dx = vec![T::zero(); b * img];
                let mut dcol = vec![T::zero(); ckk * p];
                for bi in 0..b {
                    // dcols = W^T [CKK, O] * G_b [O, P]
                    gemm_into(
                        ckk,
                        o,
                        p,
                        wv,
                        (1, ckk as isize),
                        &gd[bi * o * p..(bi + 1) * o * p],
                        (p as isize, 1),
                        T::zero(),
                        &mut dcol,
                    );
                    col2im(&dcol, &geo, &mut dx[bi * img..(bi + 1) * img]);
                }
                sink.accumulate(ix, Tensor::new(x_shape.clone(), dx));
            }
        })
    }

    /// Non-overlapping max pooling with window `(kh, kw)`; trailing rows/cols are dropped.
    pub fn max_pool2d(self, kh: usize, kw: usize) -> Var<'g, T> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "max_pool2d expects NCHW");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / kh, w / kw);
        assert!(ho > 0 && wo > 0, "pool window {kh}x{kw} larger than {h}x{w}");
        let mut out = vec![T::zero(); planes * ho * wo];
        let mut arg = vec![0usize; planes * ho * wo];
        for pl in 0..planes {
            let src = &x.data()[pl * h * w..(pl + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut bi = 0;
                    for i in 0..kh {
                        for j in 0..kw {
                            let idx = (oy * kh + i) * w + ox * kw + j;
                            if src[idx] > best {
                                best = src[idx];
                                bi = idx;
                            }
                        }
                    }
                    let o = (pl * ho + oy) * wo + ox;
                    out[o] = best;
                    arg[o] = pl * h * w + bi;
                }
            }
        }
        let ix = self.id;
        let n_in = x.numel();
        self.graph.push_op(Tensor::new(vec![s[0], s[1], ho, wo], out), &[ix], move |g, sink| {
            let mut dx = vec![T::zero(); n_in];
            for (&a, &gv) in arg.iter().zip(g.data()) {
                dx[a] += gv;
            }
            sink.accumulate(ix, Tensor::new(s.clone(), dx));
        })
    }
}
