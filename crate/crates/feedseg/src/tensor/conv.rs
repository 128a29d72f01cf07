//! 2-D convolution (im2col + gemm), max pooling and bilinear resizing.
//!
//! All three parallelize over batch samples: every sample owns a disjoint
//! output slice and per-sample weight-gradient partials are reduced in index
//! order, so thread count never changes the result.

use super::{GradFn, Scalar, Tape, Var};
use crate::par;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

/// Convolution geometry. `pad` is symmetric zero padding; `dilation` spreads
/// kernel taps; `groups` splits channels (groups == c_in gives depthwise).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dCfg {
    fn default() -> Self {
        Conv2dCfg {
            stride: 1,
            pad: 1,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dCfg {
    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        let eff = self.dilation * (kernel - 1) + 1;
        assert!(
            input + 2 * self.pad >= eff,
            "kernel does not fit: input {input}, pad {}, effective kernel {eff}",
            self.pad
        );
        (input + 2 * self.pad - eff) / self.stride + 1
    }
}

/// Scatter/gather geometry shared by the forward im2col and backward col2im.
struct ConvGeom {
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    cfg: Conv2dCfg,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// input (one group's channels, contiguous) -> column matrix.
    fn im2col<F: Scalar>(&self, input: &[F], col: &mut [F]) {
        let (h, w, oh, ow) = (self.h, self.w, self.oh, self.ow);
        let cfg = &self.cfg;
        for c in 0..self.cin_g {
            let plane = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * cfg.stride + ky * cfg.dilation) as isize - cfg.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            dst[oy * ow..(oy + 1) * ow].iter_mut().for_each(|v| *v = F::zero());
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix =
                                (ox * cfg.stride + kx * cfg.dilation) as isize - cfg.pad as isize;
                            dst[oy * ow + ox] = if ix < 0 || ix >= w as isize {
                                F::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// column-matrix gradient -> input gradient (accumulating scatter).
    fn col2im<F: Scalar>(&self, col: &[F], input_grad: &mut [F]) {
        let (h, w, oh, ow) = (self.h, self.w, self.oh, self.ow);
        let cfg = &self.cfg;
        for c in 0..self.cin_g {
            let plane = &mut input_grad[c * h * w..(c + 1) * h * w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * cfg.stride + ky * cfg.dilation) as isize - cfg.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix =
                                (ox * cfg.stride + kx * cfg.dilation) as isize - cfg.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            plane[iy as usize * w + ix as usize] =
                                plane[iy as usize * w + ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dFn {
    cfg: Conv2dCfg,
}

fn conv_geom(x_shape: &[usize], w_shape: &[usize], cfg: Conv2dCfg) -> ConvGeom {
    let (cin, h, w) = (x_shape[1], x_shape[2], x_shape[3]);
    let (cout, cin_g, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    assert_eq!(cin, cin_g * cfg.groups, "channel/group mismatch");
    assert_eq!(cout % cfg.groups, 0, "cout not divisible by groups");
    ConvGeom {
        cin_g,
        cout_g: cout / cfg.groups,
        kh,
        kw,
        h,
        w,
        oh: cfg.out_size(h, kh),
        ow: cfg.out_size(w, kw),
        cfg,
    }
}

fn conv2d_forward<F: Scalar>(
    x: &ArrayD<F>,
    wt: &ArrayD<F>,
    bias: Option<&ArrayD<F>>,
    cfg: Conv2dCfg,
) -> ArrayD<F> {
    let g = conv_geom(x.shape(), wt.shape(), cfg);
    let n = x.shape()[0];
    let cout = wt.shape()[0];
    let (in_per, out_per) = (x.len() / n, cout * g.oh * g.ow);
    let xs = x.as_slice().unwrap();
    let ws = wt.as_slice().unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[n, cout, g.oh, g.ow]));
    {
        let os = out.as_slice_mut().unwrap();
        par::for_each_chunk_mut(os, out_per, |i, out_i| {
            let xin = &xs[i * in_per..(i + 1) * in_per];
            let mut col = vec![F::zero(); g.col_rows() * g.col_cols()];
            for grp in 0..cfg.groups {
                g.im2col(&xin[grp * g.cin_g * g.h * g.w..], &mut col);
                let wmat = ArrayView2::from_shape(
                    (g.cout_g, g.col_rows()),
                    &ws[grp * g.cout_g * g.col_rows()..(grp + 1) * g.cout_g * g.col_rows()],
                )
                .unwrap();
                let cmat = ArrayView2::from_shape((g.col_rows(), g.col_cols()), &col[..]).unwrap();
                let mut omat = ArrayViewMut2::from_shape(
                    (g.cout_g, g.col_cols()),
                    &mut out_i[grp * g.cout_g * g.col_cols()..(grp + 1) * g.cout_g * g.col_cols()],
                )
                .unwrap();
                ndarray::linalg::general_mat_mul(F::one(), &wmat, &cmat, F::zero(), &mut omat);
            }
            if let Some(b) = bias {
                let bs = b.as_slice().unwrap();
                for c in 0..cout {
                    let bv = bs[c];
                    out_i[c * g.oh * g.ow..(c + 1) * g.oh * g.ow]
                        .iter_mut()
                        .for_each(|v| *v = *v + bv);
                }
            }
        });
    }
    out
}

impl<F: Scalar> GradFn<F> for Conv2dFn {
    fn backward(
        &self,
        gout: &ArrayD<F>,
        _v: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        let (x, wt) = (parents[0], parents[1]);
        let has_bias = parents.len() == 3;
        let g = conv_geom(x.shape(), wt.shape(), self.cfg);
        let n = x.shape()[0];
        let cout = wt.shape()[0];
        let (in_per, out_per) = (x.len() / n, gout.len() / n);
        let xs = x.as_slice().unwrap();
        let ws = wt.as_slice().unwrap();
        let gs = gout.as_slice().unwrap();

        let need_x = needs[0];
        let need_w = needs[1];
        // Per-sample partials, reduced in index order below.
        let partials = par::map_indexed(n, |i| {
            let xin = &xs[i * in_per..(i + 1) * in_per];
            let gi = &gs[i * out_per..(i + 1) * out_per];
            let mut col = vec![F::zero(); g.col_rows() * g.col_cols()];
            let mut gw_i = need_w.then(|| vec![F::zero(); ws.len()]);
            let mut gx_i = need_x.then(|| vec![F::zero(); in_per]);
            let mut gcol = vec![F::zero(); g.col_rows() * g.col_cols()];
            for grp in 0..self.cfg.groups {
                let gmat = ArrayView2::from_shape(
                    (g.cout_g, g.col_cols()),
                    &gi[grp * g.cout_g * g.col_cols()..(grp + 1) * g.cout_g * g.col_cols()],
                )
                .unwrap();
                if need_w {
                    g.im2col(&xin[grp * g.cin_g * g.h * g.w..], &mut col);
                    let cmat =
                        ArrayView2::from_shape((g.col_rows(), g.col_cols()), &col[..]).unwrap();
                    let gw = gw_i.as_mut().unwrap();
                    let mut wmat = ArrayViewMut2::from_shape(
                        (g.cout_g, g.col_rows()),
                        &mut gw[grp * g.cout_g * g.col_rows()..(grp + 1) * g.cout_g * g.col_rows()],
                    )
                    .unwrap();
                    ndarray::linalg::general_mat_mul(F::one(), &gmat, &cmat.t(), F::zero(), &mut wmat);
                }
                if need_x {
                    let wmat = ArrayView2::from_shape(
                        (g.cout_g, g.col_rows()),
                        &ws[grp * g.cout_g * g.col_rows()..(grp + 1) * g.cout_g * g.col_rows()],
                    )
                    .unwrap();
                    let gmat2 = ArrayView2::from_shape(
                        (g.cout_g, g.col_cols()),
                        &gi[grp * g.cout_g * g.col_cols()..(grp + 1) * g.cout_g * g.col_cols()],
                    )
                    .unwrap();
                    let mut gcmat =
                        ArrayViewMut2::from_shape((g.col_rows(), g.col_cols()), &mut gcol[..])
                            .unwrap();
                    ndarray::linalg::general_mat_mul(
                        F::one(),
                        &wmat.t(),
                        &gmat2,
                        F::zero(),
                        &mut gcmat,
                    );
                    g.col2im(&gcol, &mut gx_i.as_mut().unwrap()[grp * g.cin_g * g.h * g.w..]);
                }
            }
            (gx_i, gw_i)
        });

        let gx = need_x.then(|| {
            let mut out = ArrayD::zeros(IxDyn(x.shape()));
            let os = out.as_slice_mut().unwrap();
            for (i, (gx_i, _)) in partials.iter().enumerate() {
                os[i * in_per..(i + 1) * in_per].copy_from_slice(gx_i.as_ref().unwrap());
            }
            out
        });
        let gw = need_w.then(|| {
            let mut acc = vec![F::zero(); ws.len()];
            for (_, gw_i) in &partials {
                for (a, &b) in acc.iter_mut().zip(gw_i.as_ref().unwrap()) {
                    *a = *a + b;
                }
            }
            ArrayD::from_shape_vec(IxDyn(wt.shape()), acc).unwrap()
        });
        let mut out = vec![gx, gw];
        if has_bias {
            out.push(needs[2].then(|| {
                let mut gb = vec![F::zero(); cout];
                let per = g.oh * g.ow;
                for i in 0..n {
                    let gi = &gs[i * out_per..(i + 1) * out_per];
                    for (c, gbc) in gb.iter_mut().enumerate() {
                        *gbc = *gbc + gi[c * per..(c + 1) * per].iter().copied().sum();
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&[cout]), gb).unwrap()
            }));
        }
        out
    }
}

struct MaxPool2Fn {
    argmax: Vec<u32>, // flat input index per output element
    in_shape: Vec<usize>,
}

impl<F: Scalar> GradFn<F> for MaxPool2Fn {
    fn backward(
        &self,
        gout: &ArrayD<F>,
        _v: &ArrayD<F>,
        _p: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        vec![needs[0].then(|| {
            let mut gx = ArrayD::zeros(IxDyn(&self.in_shape));
            let s = gx.as_slice_mut().unwrap();
            for (&idx, &g) in self.argmax.iter().zip(gout.as_slice().unwrap()) {
                s[idx as usize] = s[idx as usize] + g;
            }
            gx
        })]
    }
}

/// Per-axis interpolation taps: dst index -> (lo, hi, weight of hi).
fn bilinear_taps<F: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, F)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = (o as f64 + 0.5) * scale - 0.5;
            let pos = pos.max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let w = if hi > lo { pos - lo as f64 } else { 0.0 };
            (lo, hi, F::f(w))
        })
        .collect()
}

struct BilinearFn {
    in_shape: Vec<usize>,
}

impl<F: Scalar> GradFn<F> for BilinearFn {
    fn backward(
        &self,
        gout: &ArrayD<F>,
        _v: &ArrayD<F>,
        _p: &[&ArrayD<F>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<F>>> {
        vec![needs[0].then(|| {
            let (h, w) = (self.in_shape[2], self.in_shape[3]);
            let (oh, ow) = (gout.shape()[2], gout.shape()[3]);
            let ty = bilinear_taps::<F>(h, oh);
            let tx = bilinear_taps::<F>(w, ow);
            let planes = self.in_shape[0] * self.in_shape[1];
            let mut gx = ArrayD::zeros(IxDyn(&self.in_shape));
            let gs = gout.as_slice().unwrap();
            let xs = gx.as_slice_mut().unwrap();
            par::for_each_chunk_mut(xs, h * w, |p, plane| {
                let gplane = &gs[p * oh * ow..(p + 1) * oh * ow];
                for oy in 0..oh {
                    let (y0, y1, wy) = ty[oy];
                    for ox in 0..ow {
                        let (x0, x1, wx) = tx[ox];
                        let g = gplane[oy * ow + ox];
                        let one = F::one();
                        plane[y0 * w + x0] = plane[y0 * w + x0] + g * (one - wy) * (one - wx);
                        plane[y0 * w + x1] = plane[y0 * w + x1] + g * (one - wy) * wx;
                        plane[y1 * w + x0] = plane[y1 * w + x0] + g * wy * (one - wx);
                        plane[y1 * w + x1] = plane[y1 * w + x1] + g * wy * wx;
                    }
                }
            });
            let _ = planes;
            gx
        })]
    }
}

/// Bilinear resize of a plain NCHW array (shared by the tape op and the
/// no-grad mask plumbing).
pub fn bilinear_resize_array<F: Scalar>(x: &ArrayD<F>, oh: usize, ow: usize) -> ArrayD<F> {
    let shape = x.shape();
    assert_eq!(shape.len(), 4, "bilinear expects NCHW");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let ty = bilinear_taps::<F>(h, oh);
    let tx = bilinear_taps::<F>(w, ow);
    let xs = x.as_slice().unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[n, c, oh, ow]));
    {
        let os = out.as_slice_mut().unwrap();
        par::for_each_chunk_mut(os, oh * ow, |p, plane| {
            let xplane = &xs[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1, wy) = ty[oy];
                for ox in 0..ow {
                    let (x0, x1, wx) = tx[ox];
                    let one = F::one();
                    let top = xplane[y0 * w + x0] * (one - wx) + xplane[y0 * w + x1] * wx;
                    let bot = xplane[y1 * w + x0] * (one - wx) + xplane[y1 * w + x1] * wx;
                    plane[oy * ow + ox] = top * (one - wy) + bot * wy;
                }
            }
        });
    }
    out
}

impl<F: Scalar> Tape<F> {
    /// 2-D convolution. `x` is NCHW, `weight` is (c_out, c_in/groups, kh, kw).
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, cfg: Conv2dCfg) -> Var {
        let value = conv2d_forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            cfg,
        );
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.push_op(value, parents, Box::new(Conv2dFn { cfg }))
    }

    /// 2x2 max pooling with stride 2.
    pub fn maxpool2(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let xs = v.as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[n, c, oh, ow]));
        let mut argmax = vec![0u32; n * c * oh * ow];
        {
            let os = out.as_slice_mut().unwrap();
            for p in 0..n * c {
                let plane = &xs[p * h * w..(p + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = F::neg_infinity();
                        let mut best_idx = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = (oy * 2 + dy) * w + ox * 2 + dx;
                                if plane[idx] > best {
                                    best = plane[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        os[p * oh * ow + oy * ow + ox] = best;
                        argmax[p * oh * ow + oy * ow + ox] = (p * h * w + best_idx) as u32;
                    }
                }
            }
        }
        self.push_op(
            out,
            vec![x],
            Box::new(MaxPool2Fn {
                argmax,
                in_shape: shape,
            }),
        )
    }

    /// Bilinear resize to `(oh, ow)`, align-corners false.
    pub fn bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let in_shape = self.shape(x).to_vec();
        let value = bilinear_resize_array(self.value(x), oh, ow);
        self.push_op(value, vec![x], Box::new(BilinearFn { in_shape }))
    }
}
