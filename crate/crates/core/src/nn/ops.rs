//! Differentiable operations on [`Var`].

use std::rc::Rc;

use ndarray::{Axis, IxDyn, Slice};

use super::gemm::{gemm, Mat};
use super::graph::{Tensor, Var};

fn contiguous(t: &Tensor) -> std::borrow::Cow<'_, [f64]> {
    match t.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(t.iter().copied().collect()),
    }
}

fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_shape_vec(IxDyn(shape), data).expect("shape and data length agree")
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Convolution geometry. Time (axis 2) is never strided so the output keeps
/// the input frame count when `pad_t == (kernel_t - 1) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride_f: usize,
    pub pad_t: usize,
    pub pad_f: usize,
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn ck(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `[lo, hi)` whose tap `b` lands inside the input.
    fn valid_cols(&self, b: usize) -> (usize, usize) {
        let (sf, pf) = (self.spec.stride_f, self.spec.pad_f);
        let lo = pf.saturating_sub(b).div_ceil(sf).min(self.wo);
        // iw = ow*sf + b - pf < w  <=>  ow*sf < w + pf - b
        let hi = if self.w + pf > b {
            (self.w + pf - b).div_ceil(sf).min(self.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let (ho, wo) = (self.ho, self.wo);
        let sf = self.spec.stride_f;
        for ci in 0..self.c {
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = ((ci * self.kh + a) * self.kw + b) * ho * wo;
                    let (lo, hi) = self.valid_cols(b);
                    for oh in 0..ho {
                        let dst = &mut col[row + oh * wo..row + (oh + 1) * wo];
                        let ih = (oh + a) as isize - self.spec.pad_t as isize;
                        if ih < 0 || ih >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        if lo == hi {
                            continue;
                        }
                        let base = (ci * self.h + ih as usize) * self.w;
                        let first = base + lo * sf + b - self.spec.pad_f;
                        if sf == 1 {
                            dst[lo..hi].copy_from_slice(&x[first..first + hi - lo]);
                        } else {
                            for (k, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = x[first + k * sf];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let (ho, wo) = (self.ho, self.wo);
        let sf = self.spec.stride_f;
        for ci in 0..self.c {
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = ((ci * self.kh + a) * self.kw + b) * ho * wo;
                    let (lo, hi) = self.valid_cols(b);
                    if lo == hi {
                        continue;
                    }
                    for oh in 0..ho {
                        let ih = (oh + a) as isize - self.spec.pad_t as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let base = (ci * self.h + ih as usize) * self.w;
                        let first = base + lo * sf + b - self.spec.pad_f;
                        let src = &col[row + oh * wo + lo..row + oh * wo + hi];
                        if sf == 1 {
                            for (d, s) in dx[first..first + hi - lo].iter_mut().zip(src) {
                                *d += s;
                            }
                        } else {
                            for (k, s) in src.iter().enumerate() {
                                dx[first + k * sf] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// The value as a standard-layout tensor, shared when it already is one.
fn standard(t: Rc<Tensor>) -> Rc<Tensor> {
    if t.is_standard_layout() {
        t
    } else {
        Rc::new(t.as_standard_layout().into_owned())
    }
}

fn slice(t: &Tensor) -> &[f64] {
    t.as_slice().expect("standard layout")
}

impl<'g> Var<'g> {
    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let out = &*a + &*b;
        self.graph().op(
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let out = &*a - &*b;
        self.graph().op(
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(-g)]),
        )
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let out = &*a * &*b;
        self.graph().op(
            out,
            &[self, other],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g * &*b),
                    need[1].then(|| g * &*a),
                ]
            }),
        )
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        let out = &*self.value() * k;
        self.graph()
            .op(out, &[self], Box::new(move |g, _| vec![Some(g * k)]))
    }

    /// `self + c` for a constant tensor of the same shape.
    pub fn add_const(self, c: &Tensor) -> Var<'g> {
        let a = self.value();
        assert_eq!(a.shape(), c.shape(), "add_const: shape mismatch");
        let out = &*a + c;
        self.graph()
            .op(out, &[self], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn sigmoid(self) -> Var<'g> {
        let y = Rc::new(self.value().mapv(sigmoid_scalar));
        let y2 = Rc::clone(&y);
        self.graph().op(
            (*y).clone(),
            &[self],
            Box::new(move |g, _| {
                let mut d = g.clone();
                d.zip_mut_with(&*y2, |d, &s| *d *= s * (1.0 - s));
                vec![Some(d)]
            }),
        )
    }

    /// Exponential linear unit (alpha = 1). Its derivative is continuous, so
    /// finite-difference checks do not trip on kinks.
    pub fn elu(self) -> Var<'g> {
        let x = self.value();
        let out = x.mapv(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut d = g.clone();
                d.zip_mut_with(&*x, |d, &v| {
                    if v <= 0.0 {
                        *d *= v.exp()
                    }
                });
                vec![Some(d)]
            }),
        )
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.raw_dim();
        let out = Tensor::from_elem(IxDyn(&[]), x.sum());
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| {
                let s = g.iter().copied().next().unwrap_or(0.0);
                vec![Some(Tensor::from_elem(shape.clone(), s))]
            }),
        )
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let old: Vec<usize> = x.shape().to_vec();
        assert_eq!(
            old.iter().product::<usize>(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let out = from_vec(shape, contiguous(&x).into_owned());
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(from_vec(&old, contiguous(g).into_owned()))]),
        )
    }

    pub fn permute(self, axes: &[usize]) -> Var<'g> {
        let x = self.value();
        let out = x
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| {
                vec![Some(
                    g.view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .into_owned(),
                )]
            }),
        )
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.raw_dim();
        let out = x
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        self.graph().op(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut d = Tensor::zeros(shape.clone());
                d.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![Some(d)]
            }),
        )
    }

    /// `self · w + b` over the last axis; `w` is (in, out), `b` is (out).
    pub fn linear(self, w: Var<'g>, b: Var<'g>) -> Var<'g> {
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        let in_dim = *x.shape().last().expect("linear: rank >= 1");
        assert_eq!(wv.ndim(), 2, "linear: weight must be 2-d");
        assert_eq!(wv.shape()[0], in_dim, "linear: input width mismatch");
        let out_dim = wv.shape()[1];
        assert_eq!(bv.shape(), &[out_dim], "linear: bias shape mismatch");
        let rows = x.len() / in_dim.max(1);
        let (xr, wr) = (standard(x.clone()), standard(wv.clone()));
        let mut out = vec![0.0; rows * out_dim];
        for row in out.chunks_mut(out_dim) {
            row.copy_from_slice(bv.as_slice().expect("bias is contiguous"));
        }
        gemm(
            Mat::new(slice(&xr), rows, in_dim),
            Mat::new(slice(&wr), in_dim, out_dim),
            &mut out,
            1.0,
        );
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().expect("rank >= 1") = out_dim;
        let in_shape = x.shape().to_vec();
        self.graph().op(
            from_vec(&out_shape, out),
            &[self, w, b],
            Box::new(move |g, need| {
                let gs = contiguous(g);
                let dx = need[0].then(|| {
                    let mut dx = vec![0.0; rows * in_dim];
                    gemm(
                        Mat::new(&gs, rows, out_dim),
                        Mat::new(slice(&wr), in_dim, out_dim).t(),
                        &mut dx,
                        0.0,
                    );
                    from_vec(&in_shape, dx)
                });
                let dw = need[1].then(|| {
                    let mut dw = vec![0.0; in_dim * out_dim];
                    gemm(
                        Mat::new(slice(&xr), rows, in_dim).t(),
                        Mat::new(&gs, rows, out_dim),
                        &mut dw,
                        0.0,
                    );
                    from_vec(&[in_dim, out_dim], dw)
                });
                let db = need[2].then(|| {
                    let mut db = vec![0.0; out_dim];
                    for row in gs.chunks(out_dim) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    from_vec(&[out_dim], db)
                });
                vec![dx, dw, db]
            }),
        )
    }

    /// 2-d convolution over (N, C, T, F) with weight (O, C, KT, KF) and
    /// bias (O).
    pub fn conv2d(self, w: Var<'g>, b: Var<'g>, spec: Conv2dSpec) -> Var<'g> {
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        assert_eq!(x.ndim(), 4, "conv2d: input must be (N, C, T, F)");
        assert_eq!(wv.ndim(), 4, "conv2d: weight must be (O, C, KT, KF)");
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kc, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(c, kc, "conv2d: channel mismatch");
        assert_eq!(bv.shape(), &[o], "conv2d: bias shape mismatch");
        assert!(h + 2 * spec.pad_t >= kh && wd + 2 * spec.pad_f >= kw, "conv2d: kernel larger than input");
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            ho: h + 2 * spec.pad_t - kh + 1,
            wo: (wd + 2 * spec.pad_f - kw) / spec.stride_f + 1,
            spec,
        };
        let (ck, hw) = (geom.ck(), geom.hw_out());
        let (xr, wr) = (standard(x.clone()), standard(wv.clone()));
        let bs = contiguous(&bv);
        let in_stride = c * h * wd;
        let mut out = vec![0.0; n * o * hw];
        let mut col = vec![0.0; ck * hw];
        let (xs, ws) = (slice(&xr), slice(&wr));
        for i in 0..n {
            geom.im2col(&xs[i * in_stride..(i + 1) * in_stride], &mut col);
            let dst = &mut out[i * o * hw..(i + 1) * o * hw];
            for (oc, row) in dst.chunks_mut(hw).enumerate() {
                row.fill(bs[oc]);
            }
            gemm(Mat::new(ws, o, ck), Mat::new(&col, ck, hw), dst, 1.0);
        }
        let out_shape = [n, o, geom.ho, geom.wo];
        self.graph().op(
            from_vec(&out_shape, out),
            &[self, w, b],
            Box::new(move |g, need| {
                let gs = contiguous(g);
                let (xs, ws) = (slice(&xr), slice(&wr));
                let mut dx = need[0].then(|| vec![0.0; n * in_stride]);
                let mut dw = need[1].then(|| vec![0.0; o * ck]);
                let mut col = if need[1] { vec![0.0; ck * hw] } else { Vec::new() };
                let mut dcol = if need[0] { vec![0.0; ck * hw] } else { Vec::new() };
                for i in 0..n {
                    let gi = &gs[i * o * hw..(i + 1) * o * hw];
                    if let Some(dw) = dw.as_mut() {
                        geom.im2col(&xs[i * in_stride..(i + 1) * in_stride], &mut col);
                        gemm(Mat::new(gi, o, hw), Mat::new(&col, ck, hw).t(), dw, 1.0);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(Mat::new(ws, o, ck).t(), Mat::new(gi, o, hw), &mut dcol, 0.0);
                        geom.col2im(&dcol, &mut dx[i * in_stride..(i + 1) * in_stride]);
                    }
                }
                let db = need[2].then(|| {
                    let mut db = vec![0.0; o];
                    for i in 0..n {
                        for (oc, row) in gs[i * o * hw..(i + 1) * o * hw].chunks(hw).enumerate() {
                            db[oc] += row.iter().sum::<f64>();
                        }
                    }
                    from_vec(&[o], db)
                });
                vec![
                    dx.map(|d| from_vec(&[n, c, h, wd], d)),
                    dw.map(|d| from_vec(&[o, kc, kh, kw], d)),
                    db,
                ]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of the last axis, cropped or
    /// edge-extended to `target` bins.
    pub fn upsample_last(self, target: usize) -> Var<'g> {
        let x = self.value();
        let src_w = *x.shape().last().expect("rank >= 1");
        assert!(src_w > 0, "upsample_last: empty axis");
        let rows = x.len() / src_w;
        let xs = contiguous(&x).into_owned();
        let index: Vec<usize> = (0..target).map(|j| (j / 2).min(src_w - 1)).collect();
        let mut out = Vec::with_capacity(rows * target);
        for row in xs.chunks(src_w) {
            out.extend(index.iter().map(|&j| row[j]));
        }
        let in_shape = x.shape().to_vec();
        let mut out_shape = in_shape.clone();
        *out_shape.last_mut().expect("rank >= 1") = target;
        self.graph().op(
            from_vec(&out_shape, out),
            &[self],
            Box::new(move |g, _| {
                let gs = contiguous(g);
                let mut d = vec![0.0; rows * src_w];
                for (drow, grow) in d.chunks_mut(src_w).zip(gs.chunks(target)) {
                    for (&j, v) in index.iter().zip(grow) {
                        drow[j] += v;
                    }
                }
                vec![Some(from_vec(&in_shape, d))]
            }),
        )
    }
}

/// Concatenates along `axis`.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Var<'g> {
    assert!(!parts.is_empty(), "concat: no inputs");
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    parts[0].graph().op(
        out,
        parts,
        Box::new(move |g, need| {
            let mut start = 0;
            widths
                .iter()
                .zip(need)
                .map(|(&w, &n)| {
                    let s = start;
                    start += w;
                    n.then(|| {
                        g.slice_axis(Axis(axis), Slice::from(s..s + w))
                            .as_standard_layout()
                            .into_owned()
                    })
                })
                .collect()
        }),
    )
}

/// Mean binary cross entropy `-[p ln q + (1-p) ln(1-q)]` of a constant
/// reference `target` (p) against `pred` (q). Both are clamped to
/// `[delta, 1 - delta]`; no gradient passes where `pred` is clamped.
pub fn bce_mean<'g>(target: &Tensor, pred: Var<'g>, delta: f64) -> Var<'g> {
    let q = pred.value();
    assert_eq!(target.shape(), q.shape(), "bce: shape mismatch");
    let n = q.len().max(1) as f64;
    let p = target.mapv(|v| v.clamp(delta, 1.0 - delta));
    let mut total = 0.0;
    for (&pv, &qv) in p.iter().zip(q.iter()) {
        let qc = qv.clamp(delta, 1.0 - delta);
        total -= pv * qc.ln() + (1.0 - pv) * (1.0 - qc).ln();
    }
    let out = Tensor::from_elem(IxDyn(&[]), total / n);
    pred.graph().op(
        out,
        &[pred],
        Box::new(move |g, _| {
            let s = g.iter().copied().next().unwrap_or(0.0) / n;
            let mut d = Tensor::zeros(q.raw_dim());
            ndarray::Zip::from(&mut d)
                .and(&*q)
                .and(&p)
                .for_each(|d, &qv, &pv| {
                    if qv > delta && qv < 1.0 - delta {
                        *d = s * ((1.0 - pv) / (1.0 - qv) - pv / qv);
                    }
                });
            vec![Some(d)]
        }),
    )
}

/// Mean squared error of `pred` against a constant `target`.
pub fn mse_mean<'g>(target: &Tensor, pred: Var<'g>) -> Var<'g> {
    let q = pred.value();
    assert_eq!(target.shape(), q.shape(), "mse: shape mismatch");
    let n = q.len().max(1) as f64;
    let diff = &*q - target;
    let out = Tensor::from_elem(IxDyn(&[]), diff.iter().map(|d| d * d).sum::<f64>() / n);
    pred.graph().op(
        out,
        &[pred],
        Box::new(move |g, _| {
            let s = g.iter().copied().next().unwrap_or(0.0);
            vec![Some(&diff * (2.0 * s / n))]
        }),
    )
}
