//! Differentiable bilinear sampling at normalised grid locations.

use crate::{Scalar, Tensor, Var};

/// Maps a normalised coordinate in `[-1, 1]` to pixel units (corners aligned).
/// Values within a few ulps of an integer snap to it so lattice grids sample exactly.
#[inline]
fn to_pixel<T: Scalar>(v: T, size: usize) -> T {
    let p = (v + T::one()) * T::of((size as f64 - 1.0) / 2.0);
    let r = p.round();
    if (p - r).abs() <= T::epsilon() * T::of(8.0 * size as f64) {
        r
    } else {
        p
    }
}

struct Corner {
    y: isize,
    x: isize,
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Samples a `[B, C, H, W]` image at a `[B, h, w, 2]` grid of `(x, y)` points.
    ///
    /// Corners are aligned (`-1` is the first pixel centre, `+1` the last) and
    /// pixels outside the image read as zero. The result is `[B, C, h, w]`.
    pub fn grid_sample(self, grid: Var<'g, T>) -> Var<'g, T> {
        let img = self.value();
        let gr = grid.value();
        let is = img.shape().to_vec();
        let gs = gr.shape().to_vec();
        assert_eq!(is.len(), 4, "grid_sample image must be NCHW");
        assert!(gs.len() == 4 && gs[3] == 2, "grid must be [B, h, w, 2], got {gs:?}");
        assert_eq!(is[0], gs[0], "grid_sample batch mismatch");
        let (b, c, h, w) = (is[0], is[1], is[2], is[3]);
        let (oh, ow) = (gs[1], gs[2]);
        let mut out = vec![T::zero(); b * c * oh * ow];
        let at = |plane: &[T], y: isize, x: isize| -> T {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                T::zero()
            } else {
                plane[y as usize * w + x as usize]
            }
        };
        for bi in 0..b {
            for p in 0..oh * ow {
                let gx = gr.data()[(bi * oh * ow + p) * 2];
                let gy = gr.data()[(bi * oh * ow + p) * 2 + 1];
                let px = to_pixel(gx, w);
                let py = to_pixel(gy, h);
                let (x0, y0) = (px.floor(), py.floor());
                let (fx, fy) = (px - x0, py - y0);
                let c0 = Corner {
                    y: y0.to_isize().unwrap_or(isize::MIN / 2),
                    x: x0.to_isize().unwrap_or(isize::MIN / 2),
                };
                for ci in 0..c {
                    let plane = &img.data()[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    let v00 = at(plane, c0.y, c0.x);
                    let v01 = at(plane, c0.y, c0.x + 1);
                    let v10 = at(plane, c0.y + 1, c0.x);
                    let v11 = at(plane, c0.y + 1, c0.x + 1);
                    let top = v00 * (T::one() - fx) + v01 * fx;
                    let bot = v10 * (T::one() - fx) + v11 * fx;
                    out[(bi * c + ci) * oh * ow + p] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let (ii, ig) = (self.id, grid.id);
        self.graph.push_op(Tensor::new(vec![b, c, oh, ow], out), &[ii, ig], move |g, sink| {
            let want_img = sink.wants(ii);
            let want_grid = sink.wants(ig);
            let mut dimg = if want_img { vec![T::zero(); img.numel()] } else { Vec::new() };
            let mut dgrid = if want_grid { vec![T::zero(); gr.numel()] } else { Vec::new() };
            let sx = T::of((w as f64 - 1.0) / 2.0);
            let sy = T::of((h as f64 - 1.0) / 2.0);
            for bi in 0..b {
                for p in 0..oh * ow {
                    let gx = gr.data()[(bi * oh * ow + p) * 2];
                    let gy = gr.data()[(bi * oh * ow + p) * 2 + 1];
                    let px = to_pixel(gx, w);
                    let py = to_pixel(gy, h);
                    let (x0, y0) = (px.floor(), py.floor());
                    let (fx, fy) = (px - x0, py - y0);
                    let cy = y0.to_isize().unwrap_or(isize::MIN / 2);
                    let cx = x0.to_isize().unwrap_or(isize::MIN / 2);
                    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize;
                    let corners = [
                        (cy, cx, (T::one() - fy) * (T::one() - fx)),
                        (cy, cx + 1, (T::one() - fy) * fx),
                        (cy + 1, cx, fy * (T::one() - fx)),
                        (cy + 1, cx + 1, fy * fx),
                    ];
                    let mut dpx = T::zero();
                    let mut dpy = T::zero();
                    for ci in 0..c {
                        let gv = g.data()[(bi * c + ci) * oh * ow + p];
                        let base = (bi * c + ci) * h * w;
                        if want_img {
                            for &(y, x, wt) in &corners {
                                if inside(y, x) {
                                    dimg[base + y as usize * w + x as usize] += gv * wt;
                                }
                            }
                        }
                        if want_grid {
                            let plane = &img.data()[base..base + h * w];
                            let v = |y: isize, x: isize| {
                                if inside(y, x) {
                                    plane[y as usize * w + x as usize]
                                } else {
                                    T::zero()
                                }
                            };
                            let (v00, v01, v10, v11) = (v(cy, cx), v(cy, cx + 1), v(cy + 1, cx), v(cy + 1, cx + 1));
                            dpx += gv * ((v01 - v00) * (T::one() - fy) + (v11 - v10) * fy);
                            dpy += gv * ((v10 - v00) * (T::one() - fx) + (v11 - v01) * fx);
                        }
                    }
                    if want_grid {
                        dgrid[(bi * oh * ow + p) * 2] = dpx * sx;
                        dgrid[(bi * oh * ow + p) * 2 + 1] = dpy * sy;
                    }
                }
            }
            if want_img {
                sink.accumulate(ii, Tensor::new(img.shape().to_vec(), dimg));
            }
            if want_grid {
                sink.accumulate(ig, Tensor::new(gr.shape().to_vec(), dgrid));
            }
        })
    }
}
