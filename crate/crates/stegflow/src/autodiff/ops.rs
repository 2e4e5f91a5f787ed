//! Linear-algebra and image ops for the tape.
//!
//! Conventions: token grids are 2-D `(rows, cols)`, images are 3-D `(C, H, W)`.
//! Convolutions use zero padding; resampling is nearest-neighbor unless a
//! bilinear grid is given explicitly.

use super::{accumulate, Scalar, Tensor};
use std::sync::Arc;
use crate::error::{Error, Result};
use crate::linalg;
use ndarray::{Array2, Array3, ArrayD, ArrayView2, Ix2, IxDyn};

fn as2<T: Scalar>(x: &ArrayD<T>) -> ArrayView2<'_, T> {
    x.view().into_dimensionality::<Ix2>().expect("expected 2-D")
}

/// Normalized 2-D Gaussian kernel.
pub fn gaussian_kernel_2d<T: Scalar>(size: usize, sigma: f64) -> Array2<T> {
    assert!(size % 2 == 1, "kernel size must be odd");
    let c = (size as f64 - 1.0) / 2.0;
    let mut k = Array2::<f64>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            k[[y, x]] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s = k.sum();
    k.mapv(|v| T::from_f(v / s))
}

impl<'t, T: Scalar> Tensor<'t, T> {
    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&self, rhs: Tensor<'t, T>) -> Tensor<'t, T> {
        let (a, b) = (self.value(), rhs.value());
        let (av, bv) = (as2(&a), as2(&b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dims differ");
        let out = av.dot(&bv).into_dyn();
        let (ia, ib) = (self.id(), rhs.id());
        let (na, nb) = (self.tape().needs_grad(ia), self.tape().needs_grad(ib));
        if !na && !nb {
            return self.tape().push_with(out, None, false);
        }
        self.tape().push(
            out,
            Some(Box::new(move |g, slots| {
                let gv = as2(&g);
                if na {
                    accumulate(slots, ia, gv.dot(&as2(&b).t()).into_dyn());
                }
                if nb {
                    accumulate(slots, ib, as2(&a).t().dot(&gv).into_dyn());
                }
            })),
        )
    }

    pub fn transpose2(&self) -> Tensor<'t, T> {
        let x = self.value();
        let out = as2(&x).t().to_owned().into_dyn();
        let ia = self.id();
        if !self.tape().needs_grad(ia) {
            return self.tape().push_with(out, None, false);
        }
        self.tape().push(
            out,
            Some(Box::new(move |g, slots| {
                accumulate(slots, ia, as2(&g).t().to_owned().into_dyn());
            })),
        )
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&self) -> Tensor<'t, T> {
        let x = self.value();
        let xv = as2(&x);
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|v| (v - max).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let out_rc = Arc::new(out.clone());
        let ia = self.id();
        if !self.tape().needs_grad(ia) {
            return self.tape().push_with(out.into_dyn(), None, false);
        }
        self.tape().push(
            out.into_dyn(),
            Some(Box::new(move |g, slots| {
                let gv = as2(&g);
                let y = &out_rc;
                let mut gx = Array2::<T>::zeros(gv.raw_dim());
                for (i, (grow, yrow)) in gv.rows().into_iter().zip(y.rows()).enumerate() {
                    let dot: T = grow
                        .iter()
                        .zip(yrow.iter())
                        .map(|(&gg, &yy)| gg * yy)
                        .sum();
                    for (j, (&gg, &yy)) in grow.iter().zip(yrow.iter()).enumerate() {
                        gx[[i, j]] = yy * (gg - dot);
                    }
                }
                accumulate(slots, ia, gx.into_dyn());
            })),
        )
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)` of a 2-D tensor.
    pub fn layernorm_rows(&self, eps: f64) -> Tensor<'t, T> {
        let x = self.value();
        let xv = as2(&x);
        let n = T::from_usize(xv.ncols()).unwrap();
        let epst = T::from_f(eps);
        let mut out = xv.to_owned();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = (var + epst).sqrt().recip();
            inv_std.push(is);
            row.mapv_inplace(|v| (v - mean) * is);
        }
        let y_rc = Arc::new(out.clone());
        let ia = self.id();
        if !self.tape().needs_grad(ia) {
            return self.tape().push_with(out.into_dyn(), None, false);
        }
        self.tape().push(
            out.into_dyn(),
            Some(Box::new(move |g, slots| {
                let gv = as2(&g);
                let mut gx = Array2::<T>::zeros(gv.raw_dim());
                for (i, (grow, yrow)) in gv.rows().into_iter().zip(y_rc.rows()).enumerate() {
                    let gmean = grow.sum() / n;
                    let gydot: T = grow
                        .iter()
                        .zip(yrow.iter())
                        .map(|(&gg, &yy)| gg * yy)
                        .sum::<T>()
                        / n;
                    for j in 0..gv.ncols() {
                        gx[[i, j]] = inv_std[i] * (grow[j] - gmean - yrow[j] * gydot);
                    }
                }
                accumulate(slots, ia, gx.into_dyn());
            })),
        )
    }

    /// `(m, n) * row(n)` broadcast multiply.
    pub fn mul_row(&self, row: Tensor<'t, T>) -> Tensor<'t, T> {
        let (a, r) = (self.value(), row.value());
        let av = as2(&a);
        assert_eq!(av.ncols(), r.len(), "mul_row: width mismatch");
        let rv = r.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let out = (&av * &rv).into_dyn();
        let (ia, ir) = (self.id(), row.id());
        let (na, nr) = (self.tape().needs_grad(ia), self.tape().needs_grad(ir));
        if !na && !nr {
            return self.tape().push_with(out, None, false);
        }
        self.tape().push(
            out,
            Some(Box::new(move |g, slots| {
                let gv = as2(&g);
                if nr {
                    let gr = (&gv * &as2(&a)).sum_axis(ndarray::Axis(0)).into_dyn();
                    accumulate(slots, ir, gr);
                }
                if na {
                    let rv = r.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    accumulate(slots, ia, (&gv * &rv).into_dyn());
                }
            })),
        )
    }

    /// `(m, n) + row(n)` broadcast add.
    pub fn add_row(&self, row: Tensor<'t, T>) -> Tensor<'t, T> {
        let (a, r) = (self.value(), row.value());
        let av = as2(&a);
        assert_eq!(av.ncols(), r.len(), "add_row: width mismatch");
        let rv = r.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let out = (&av + &rv).into_dyn();
        let (ia, ir) = (self.id(), row.id());
        let (na, nr) = (self.tape().needs_grad(ia), self.tape().needs_grad(ir));
        if !na && !nr {
            return self.tape().push_with(out, None, false);
        }
        self.tape().push(
            out,
            Some(Box::new(move |g, slots| {
                if nr {
                    accumulate(slots, ir, as2(&g).sum_axis(ndarray::Axis(0)).into_dyn());
                }
                if na {
                    accumulate(slots, ia, g);
                }
            })),
        )
    }

    /// Columns `[start, start + len)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor<'t, T> {
        let x = self.value();
        let xv = as2(&x);
        let (rows, cols) = (xv.nrows(), xv.ncols());
        assert!(start + len <= cols, "slice_cols out of range");
        let out = xv.slice(ndarray::s![.., start..start + len]).to_owned();
        let ia = self.id();
        if !self.tape().needs_grad(ia) {
            return self.tape().push_with(out.into_dyn(), None, false);
        }
        self.tape().push(
            out.into_dyn(),
            Some(Box::new(move |g, slots| {
                let mut gx = Array2::<T>::zeros((rows, cols));
                gx.slice_mut(ndarray::s![.., start..start + len])
                    .assign(&as2(&g));
                accumulate(slots, ia, gx.into_dyn());
            })),
        )
    }

    /// Per-patch flattening of `(C, H, W)` into `(n_patches, C*p*p)`,
    /// non-overlapping, patches in row-major order, inner layout `(c, py, px)`.
    pub fn patchify(&self, p: usize) -> Tensor<'t, T> {
        let x = self.value();
        let s = x.shape().to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h % p == 0 && w % p == 0, "patchify: side not divisible");
        let (gh, gw) = (h / p, w / p);
        let x_std = x.as_standard_layout();
        let xs = x_std.as_slice().expect("standard layout");
        let mut out = Array2::<T>::zeros((gh * gw, c * p * p));
        let os = out.as_slice_mut().expect("standard layout");
        let row_len = c * p * p;
        for py in 0..gh {
            for px in 0..gw {
                let row_base = (py * gw + px) * row_len;
                for ch in 0..c {
                    for iy in 0..p {
                        let src = (ch * h + py * p + iy) * w + px * p;
                        let dst = row_base + (ch * p + iy) * p;
                        os[dst..dst + p].copy_from_slice(&xs[src..src + p]);
                    }
                }
            }
        }
        let ia = self.id();
        if !self.tape().needs_grad(ia) {
            return self.tape().push_with(out.into_dyn(), None, false);
        }
        self.tape().push(
            out.into_dyn(),
            Some(Box::new(move |g, slots| {
                let g_std = g.as_standard_layout();
                let gsl = g_std.as_slice().expect("standard layout");
                let mut gx = ArrayD::<T>::zeros(IxDyn(&[c, h, w]));
                let gxs = gx.as_slice_mut().expect("standard layout");
                for py in 0..gh {
                    for px in 0..gw {
                        let row_base = (py * gw + px) * row_len;
                        for ch in 0..c {
                            for iy in 0..p {
                                let dst = (ch * h + py * p + iy) * w + px * p;
                                let src = row_base + (ch * p + iy) * p;
                                gxs[dst..dst + p].copy_from_slice(&gsl[src..src + p]);
                            }
                        }
                    }
                }
                accumulate(slots, ia, gx);
            })),
        )
    }

    /// Inverse of [`Tensor::patchify`]: `(n_patches, C*p*p)` back to `(C, H, W)`.
    pub fn unpatchify(&self, c: usize, h: usize, w: usize, p: usize) -> Tensor<'t, T> {
        let x = self.value();
        let xv = as2(&x);
        let (gh, gw) = (h / p, w / p);
        assert_eq!(xv.nrows(), gh * gw, "unpatchify: patch count mismatch");
        assert_eq!(xv.ncols(), c * p * p, "unpatchify: patch dim mismatch");
        let row_len = c * p * p;
        let x_std = x.as_standard_layout();
        let xs = x_std.as_slice().expect("standard layout");
        let mut out = ArrayD::<T>::zeros(IxDyn(&[c, h, w]));
        let os = out.as_slice_mut().expect("standard layout");
        for py in 0..gh {
            for px in 0..gw {
                let row_base = (py * gw + px) * row_len;
                for ch in 0..c {
                    for iy in 0..p {
                        let dst = (ch * h + py * p + iy) * w + px * p;
                        let src = row_base + (ch * p + iy) * p;
                        os[dst..dst + p].copy_from_slice(&xs[src..src + p]);
                    }
                }
            }
        }
        let ia = self.id();
        if !self.tape().needs_grad(ia) {
            return self.tape().push_with(out, None, false);
        }
        self.tape().push(
            out,
            Some(Box::new(move |g, slots| {
                let g_std = g.as_standard_layout();
                let gsl = g_std.as_slice().expect("standard layout");
                let mut gx = Array2::<T>::zeros((gh * gw, row_len));
                let gxs = gx.as_slice_mut().expect("standard layout");
                for py in 0..gh {
                    for px in 0..gw {
                        let row_base = (py * gw + px) * row_len;
                        for ch in 0..c {
                            for iy in 0..p {
                                let src = (ch * h + py * p + iy) * w + px * p;
                                let dst = row_base + (ch * p + iy) * p;
                                gxs[dst..dst + p].copy_from_slice(&gsl[src..src + p]);
                            }
                        }
                    }
                }
                accumulate(slots, ia, gx.into_dyn());
            })),
        )
    }

    /// 2-D convolution with zero padding: input `(C, H, W)`, weight
    /// `(O, C, k, k)`, output `(O, OH, OW)`.
    pub fn conv2d(&self, weight: Tensor<'t, T>, stride: usize, pad: usize) -> Tensor<'t, T> {
        let (x, w) = (self.value(), weight.value());
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, wc, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(wc, c, "conv2d: channel mismatch");
        assert_eq!(ws[3], k, "conv2d: non-square kernel");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;

        let col = im2col(&x, k, stride, pad, oh, ow);
        let w2 = w
            .view()
            .into_shape_with_order((o, c * k * k))
            .expect("conv2d weight reshape");
        let out2 = w2.dot(&col);
        let out = out2
            .into_shape_with_order(IxDyn(&[o, oh, ow]))
            .expect("conv2d out reshape");

        let (ia, iw) = (self.id(), weight.id());
        let (na, nw) = (self.tape().needs_grad(ia), self.tape().needs_grad(iw));
        if !na && !nw {
            return self.tape().push_with(out, None, false);
        }
        self.tape().push(
            out,
            Some(Box::new(move |g, slots| {
                let g_std = g.as_standard_layout();
                let g2 = g_std
                    .view()
                    .into_shape_with_order((o, oh * ow))
                    .expect("conv2d grad reshape");
                if nw {
                    // Weight gradient: recompute the column matrix.
                    let col = im2col(&x, k, stride, pad, oh, ow);
                    let gw2 = g2.dot(&col.t());
                    let gw = gw2
                        .into_shape_with_order(IxDyn(&[o, c, k, k]))
                        .expect("conv2d gw reshape");
                    accumulate(slots, iw, gw);
                }
                if na {
                    // Input gradient: fold columns back.
                    let w2 = w
                        .view()
                        .into_shape_with_order((o, c * k * k))
                        .expect("conv2d weight reshape");
                    let gcol = w2.t().dot(&g2);
                    let gx = col2im(&gcol, c, h, wd, k, stride, pad, oh, ow);
                    accumulate(slots, ia, gx);
                }
            })),
        )
    }

    /// Add a per-channel bias to a `(C, H, W)` tensor.
    pub fn bias_chw(&self, bias: Tensor<'t, T>) -> Tensor<'t, T> {
        let (x, b) = (self.value(), bias.value());
        let xs = x.shape().to_vec();
        assert_eq!(xs[0], b.len(), "bias_chw: channel mismatch");
        let mut out = x.as_ref().clone();
        for ch in 0..xs[0] {
            let bv = b[[ch]];
            out.index_axis_mut(ndarray::Axis(0), ch)
                .mapv_inplace(|v| v + bv);
        }
        let (ia, ib) = (self.id(), bias.id());
        let (na, nb) = (self.tape().needs_grad(ia), self.tape().needs_grad(ib));
        if !na && !nb {
            return self.tape().push_with(out, None, false);
        }
        self.tape().push(
            out,
            Some(Box::new(move |g, slots| {
                if nb {
                    let mut gb = ArrayD::<T>::zeros(IxDyn(&[xs[0]]));
                    for ch in 0..xs[0] {
                        gb[[ch]] = g.index_axis(ndarray::Axis(0), ch).sum();
                    }
                    accumulate(slots, ib, gb);
                }
                if na {
                    accumulate(slots, ia, g);
                }
            })),
        )
    }

    /// Per-channel correlation of `(C, H, W)` with a fixed `(k, k)` kernel,
    /// stride 1, zero padding `pad`; output is `(C, H+2p-k+1, W+2p-k+1)`.
    /// `pad = k/2` gives 'same', `pad = 0` gives 'valid'. The kernel carries
    /// no gradient.
    pub fn depthwise_conv(&self, kernel: &Array2<T>, pad: usize) -> Tensor<'t, T> {
        let x = self.value();
        let xs = x.shape().to_vec();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let k = kernel.nrows();
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than input");
        let kern = Arc::new(kernel.clone());
        let out = depthwise_apply(&x, &kern, pad);
        let ia = self.id();
        if !self.tape().needs_grad(ia) {
            return self.tape().push_with(out, None, false);
        }
        self.tape().push(
            out,
            Some(Box::new(move |g, slots| {
                // Correlation backward = correlation with the flipped kernel
                // at complementary padding.
                let mut flipped = Array2::<T>::zeros((k, k));
                for y in 0..k {
                    for xx in 0..k {
                        flipped[[y, xx]] = kern[[k - 1 - y, k - 1 - xx]];
                    }
                }
                let gx = depthwise_apply(&g, &Arc::new(flipped), k - 1 - pad);
                debug_assert_eq!(gx.shape(), &[c, h, w]);
                accumulate(slots, ia, gx);
            })),
        )
    }

    /// Same-size per-channel correlation (`pad = k/2`, odd kernels).
    pub fn depthwise_conv_same(&self, kernel: &Array2<T>) -> Tensor<'t, T> {
        self.depthwise_conv(kernel, kernel.nrows() / 2)
    }

    /// Channel `c` of a `(C, H, W)` tensor as `(H, W)`.
    pub fn channel(&self, idx: usize) -> Tensor<'t, T> {
        let x = self.value();
        let xs = x.shape().to_vec();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(idx < c, "channel out of range");
        let out = x.index_axis(ndarray::Axis(0), idx).to_owned().into_dyn();
        let ia = self.id();
        if !self.tape().needs_grad(ia) {
            return self.tape().push_with(out, None, false);
        }
        self.tape().push(
            out,
            Some(Box::new(move |g, slots| {
                let mut gx = ArrayD::<T>::zeros(IxDyn(&[c, h, w]));
                gx.index_axis_mut(ndarray::Axis(0), idx).assign(
                    &g.view().into_dimensionality::<Ix2>().expect("channel grad"),
                );
                accumulate(slots, ia, gx);
            })),
        )
    }

    /// Zero-pad the bottom/right of a `(C, H, W)` tensor.
    pub fn pad_bottom_right(&self, down: usize, right: usize) -> Tensor<'t, T> {
        let x = self.value();
        let xs = x.shape().to_vec();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let mut out = ArrayD::<T>::zeros(IxDyn(&[c, h + down, w + right]));
        out.slice_mut(ndarray::s![.., ..h, ..w])
            .assign(&x.view().into_dimensionality::<ndarray::Ix3>().unwrap());
        let ia = self.id();
        if !self.tape().needs_grad(ia) {
            return self.tape().push_with(out, None, false);
        }
        self.tape().push(
            out,
            Some(Box::new(move |g, slots| {
                let gx = g
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    .slice(ndarray::s![.., ..h, ..w])
                    .to_owned();
                accumulate(slots, ia, gx.into_dyn());
            })),
        )
    }

    /// Drop padding: keep the `(C, h, w)` top-left corner.
    pub fn crop_top_left(&self, h: usize, w: usize) -> Tensor<'t, T> {
        let x = self.value();
        let xs = x.shape().to_vec();
        let (c, fh, fw) = (xs[0], xs[1], xs[2]);
        assert!(h <= fh && w <= fw, "crop larger than input");
        let out = x
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .slice(ndarray::s![.., ..h, ..w])
            .to_owned();
        let ia = self.id();
        if !self.tape().needs_grad(ia) {
            return self.tape().push_with(out.into_dyn(), None, false);
        }
        self.tape().push(
            out.into_dyn(),
            Some(Box::new(move |g, slots| {
                let mut gx = ArrayD::<T>::zeros(IxDyn(&[c, fh, fw]));
                gx.slice_mut(ndarray::s![.., ..h, ..w]).assign(
                    &g.view().into_dimensionality::<ndarray::Ix3>().unwrap(),
                );
                accumulate(slots, ia, gx);
            })),
        )
    }

    /// Nearest-neighbor resample of `(C, H, W)` to `(C, h2, w2)`.
    pub fn resize_nearest(&self, h2: usize, w2: usize) -> Tensor<'t, T> {
        let x = self.value();
        let xs = x.shape().to_vec();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let ymap: Vec<usize> = (0..h2).map(|i| i * h / h2).collect();
        let xmap: Vec<usize> = (0..w2).map(|j| j * w / w2).collect();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[c, h2, w2]));
        for ch in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    out[[ch, i, j]] = x[[ch, ymap[i], xmap[j]]];
                }
            }
        }
        let ia = self.id();
        if !self.tape().needs_grad(ia) {
            return self.tape().push_with(out, None, false);
        }
        self.tape().push(
            out,
            Some(Box::new(move |g, slots| {
                let mut gx = ArrayD::<T>::zeros(IxDyn(&[c, h, w]));
                for ch in 0..c {
                    for i in 0..h2 {
                        for j in 0..w2 {
                            gx[[ch, ymap[i], xmap[j]]] += g[[ch, i, j]];
                        }
                    }
                }
                accumulate(slots, ia, gx);
            })),
        )
    }

    /// Bilinear resampling of `(C, H, W)` at source coordinates
    /// `grid[(i, j)] = (sy, sx)`, clamped to the image border. The grid is a
    /// fixed map; gradients flow to the pixels only.
    pub fn warp_bilinear(&self, grid: &Array3<f64>) -> Tensor<'t, T> {
        let x = self.value();
        let xs = x.shape().to_vec();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert_eq!(grid.shape(), &[h, w, 2], "warp grid shape");
        // Precompute tap indices and weights.
        let mut taps = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let sy = grid[[i, j, 0]].clamp(0.0, (h - 1) as f64);
                let sx = grid[[i, j, 1]].clamp(0.0, (w - 1) as f64);
                let y0 = sy.floor() as usize;
                let x0 = sx.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fy = sy - y0 as f64;
                let fx = sx - x0 as f64;
                taps.push((
                    [y0, y1, x0, x1],
                    [
                        T::from_f((1.0 - fy) * (1.0 - fx)),
                        T::from_f((1.0 - fy) * fx),
                        T::from_f(fy * (1.0 - fx)),
                        T::from_f(fy * fx),
                    ],
                ));
            }
        }
        let taps = Arc::new(taps);
        let mut out = ArrayD::<T>::zeros(IxDyn(&[c, h, w]));
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let ([y0, y1, x0, x1], wt) = &taps[i * w + j];
                    out[[ch, i, j]] = wt[0] * x[[ch, *y0, *x0]]
                        + wt[1] * x[[ch, *y0, *x1]]
                        + wt[2] * x[[ch, *y1, *x0]]
                        + wt[3] * x[[ch, *y1, *x1]];
                }
            }
        }
        let ia = self.id();
        if !self.tape().needs_grad(ia) {
            return self.tape().push_with(out, None, false);
        }
        self.tape().push(
            out,
            Some(Box::new(move |g, slots| {
                let mut gx = ArrayD::<T>::zeros(IxDyn(&[c, h, w]));
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let gv = g[[ch, i, j]];
                            let ([y0, y1, x0, x1], wt) = &taps[i * w + j];
                            gx[[ch, *y0, *x0]] += wt[0] * gv;
                            gx[[ch, *y0, *x1]] += wt[1] * gv;
                            gx[[ch, *y1, *x0]] += wt[2] * gv;
                            gx[[ch, *y1, *x1]] += wt[3] * gv;
                        }
                    }
                }
                accumulate(slots, ia, gx);
            })),
        )
    }

    /// Solve `A x = B` for square `A (n, n)` and `B (n, m)` by LU with partial
    /// pivoting. Differentiable in both `A` and `B`.
    pub fn solve_sq(&self, rhs: Tensor<'t, T>) -> Result<Tensor<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let av = as2(&a);
        let bv = as2(&b);
        assert_eq!(av.nrows(), av.ncols(), "solve_sq: A not square");
        assert_eq!(av.nrows(), bv.nrows(), "solve_sq: dim mismatch");
        let lu = linalg::LuFactors::factor(&av).ok_or(Error::SingularMatrix)?;
        let x = lu.solve(&bv);
        let x_rc = Arc::new(x.clone());
        let (ia, ib) = (self.id(), rhs.id());
        let (na, nb) = (self.tape().needs_grad(ia), self.tape().needs_grad(ib));
        if !na && !nb {
            return Ok(self.tape().push_with(x.into_dyn(), None, false));
        }
        Ok(self.tape().push(
            x.into_dyn(),
            Some(Box::new(move |g, slots| {
                // dB = A^-T g ; dA = -dB x^T
                let at = as2(&a).t().to_owned();
                let lut = linalg::LuFactors::factor(&at.view())
                    .expect("matrix factorized forward but not backward");
                let gb = lut.solve(&as2(&g));
                if na {
                    accumulate(slots, ia, (-gb.dot(&x_rc.t())).into_dyn());
                }
                if nb {
                    accumulate(slots, ib, gb.into_dyn());
                }
            })),
        ))
    }

    /// Channel mean of a `(3, H, W)` image.
    pub fn luminance(&self) -> Tensor<'t, T> {
        let x = self.value();
        let xs = x.shape().to_vec();
        assert_eq!(xs[0], 3, "luminance expects 3 channels");
        let (h, w) = (xs[1], xs[2]);
        let third = T::from_f(1.0 / 3.0);
        let mut out = ArrayD::<T>::zeros(IxDyn(&[h, w]));
        for i in 0..h {
            for j in 0..w {
                out[[i, j]] = (x[[0, i, j]] + x[[1, i, j]] + x[[2, i, j]]) * third;
            }
        }
        let ia = self.id();
        if !self.tape().needs_grad(ia) {
            return self.tape().push_with(out, None, false);
        }
        self.tape().push(
            out,
            Some(Box::new(move |g, slots| {
                let mut gx = ArrayD::<T>::zeros(IxDyn(&[3, h, w]));
                for ch in 0..3 {
                    for i in 0..h {
                        for j in 0..w {
                            gx[[ch, i, j]] = g[[i, j]] * third;
                        }
                    }
                }
                accumulate(slots, ia, gx);
            })),
        )
    }

    /// Unit-normalize each spatial position of `(C, H, W)` across channels.
    pub fn channel_l2norm(&self, eps: f64) -> Tensor<'t, T> {
        let x = self.value();
        let xs = x.shape().to_vec();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let epst = T::from_f(eps);
        let mut norms = Array2::<T>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let mut s = epst;
                for ch in 0..c {
                    let v = x[[ch, i, j]];
                    s = s + v * v;
                }
                norms[[i, j]] = s.sqrt();
            }
        }
        let norms = Arc::new(norms);
        let mut out = ArrayD::<T>::zeros(IxDyn(&[c, h, w]));
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[ch, i, j]] = x[[ch, i, j]] / norms[[i, j]];
                }
            }
        }
        let ia = self.id();
        if !self.tape().needs_grad(ia) {
            return self.tape().push_with(out, None, false);
        }
        self.tape().push(
            out,
            Some(Box::new(move |g, slots| {
                let mut gx = ArrayD::<T>::zeros(IxDyn(&[c, h, w]));
                for i in 0..h {
                    for j in 0..w {
                        let s = norms[[i, j]];
                        let mut dot = T::zero();
                        for ch in 0..c {
                            dot = dot + g[[ch, i, j]] * x[[ch, i, j]];
                        }
                        for ch in 0..c {
                            gx[[ch, i, j]] =
                                g[[ch, i, j]] / s - x[[ch, i, j]] * dot / (s * s * s);
                        }
                    }
                }
                accumulate(slots, ia, gx);
            })),
        )
    }
}

/// Concatenate 2-D tensors along columns.
pub fn concat_cols<'t, T: Scalar>(parts: &[Tensor<'t, T>]) -> Tensor<'t, T> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape();
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let rows = as2(&values[0]).nrows();
    let widths: Vec<usize> = values.iter().map(|v| as2(v).ncols()).collect();
    let total: usize = widths.iter().sum();
    let mut out = Array2::<T>::zeros((rows, total));
    let mut off = 0;
    for v in &values {
        let vv = as2(v);
        out.slice_mut(ndarray::s![.., off..off + vv.ncols()]).assign(&vv);
        off += vv.ncols();
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
    let needs: Vec<bool> = ids.iter().map(|&i| tape.needs_grad(i)).collect();
    if needs.iter().all(|&n| !n) {
        return tape.push_with(out.into_dyn(), None, false);
    }
    tape.push(
        out.into_dyn(),
        Some(Box::new(move |g, slots| {
            let gv = as2(&g);
            let mut off = 0;
            for ((idx, &wd), &need) in ids.iter().zip(widths.iter()).zip(needs.iter()) {
                if need {
                    let piece = gv.slice(ndarray::s![.., off..off + wd]).to_owned();
                    accumulate(slots, *idx, piece.into_dyn());
                }
                off += wd;
            }
        })),
    )
}

fn im2col<T: Scalar>(
    x: &ArrayD<T>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<T> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().expect("standard layout");
    let mut col = Array2::<T>::zeros((c * k * k, oh * ow));
    let cs = col.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let out_base = row * oh * ow;
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let sy = iy - pad;
                    let in_base = (ch * h + sy) * w;
                    let out_row = out_base + oy * ow;
                    if stride == 1 {
                        // Contiguous copy over the valid ox range.
                        let ox_lo = pad.saturating_sub(kx);
                        let ox_hi = (w + pad - kx).min(ow);
                        if ox_lo < ox_hi {
                            let src_lo = ox_lo + kx - pad;
                            cs[out_row + ox_lo..out_row + ox_hi].copy_from_slice(
                                &xs[in_base + src_lo..in_base + src_lo + (ox_hi - ox_lo)],
                            );
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = ox * stride + kx;
                            if ix < pad || ix >= w + pad {
                                continue;
                            }
                            cs[out_row + ox] = xs[in_base + ix - pad];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    gcol: &Array2<T>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ArrayD<T> {
    let mut gx = ArrayD::<T>::zeros(IxDyn(&[c, h, w]));
    let gs = gx.as_slice_mut().expect("standard layout");
    let gcol_std = gcol.as_standard_layout();
    let cs = gcol_std.as_slice().expect("standard layout");
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let col_base = row * oh * ow;
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let sy = iy - pad;
                    let out_base = (ch * h + sy) * w;
                    let col_row = col_base + oy * ow;
                    for ox in 0..ow {
                        let ix = ox * stride + kx;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        gs[out_base + ix - pad] += cs[col_row + ox];
                    }
                }
            }
        }
    }
    gx
}

fn depthwise_apply<T: Scalar>(x: &ArrayD<T>, kernel: &Arc<Array2<T>>, pad: usize) -> ArrayD<T> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let k = kernel.nrows();
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().expect("standard layout");
    let ks = kernel.as_slice().expect("standard layout");
    let mut out = ArrayD::<T>::zeros(IxDyn(&[c, oh, ow]));
    let os = out.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let kv = ks[ky * k + kx];
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let in_base = (ch * h + (iy - pad)) * w;
                    let out_base = (ch * oh + oy) * ow;
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (w + pad - kx).min(ow);
                    for ox in ox_lo..ox_hi {
                        os[out_base + ox] = os[out_base + ox] + kv * xs[in_base + ox + kx - pad];
                    }
                }
            }
        }
    }
    out
}

/// Stack `(H, W)` tensors into `(C, H, W)`.
pub fn stack_channels<'t, T: Scalar>(parts: &[Tensor<'t, T>]) -> Tensor<'t, T> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape();
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let (h, w) = {
        let s = values[0].shape();
        (s[0], s[1])
    };
    let c = parts.len();
    let mut out = ArrayD::<T>::zeros(IxDyn(&[c, h, w]));
    for (ch, v) in values.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&v.view().into_dimensionality::<Ix2>().unwrap());
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
    let needs: Vec<bool> = ids.iter().map(|&i| tape.needs_grad(i)).collect();
    if needs.iter().all(|&n| !n) {
        return tape.push_with(out, None, false);
    }
    tape.push(
        out,
        Some(Box::new(move |g, slots| {
            for ((ch, &idx), &need) in ids.iter().enumerate().zip(needs.iter()) {
                if need {
                    let piece = g.index_axis(ndarray::Axis(0), ch).to_owned();
                    accumulate(slots, idx, piece.into_dyn());
                }
            }
        })),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::{arr2, Array1, ArrayD};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite-difference check against the analytic gradient of a
    /// scalar-valued function of one input array.
    fn fd_check(
        shape: &[usize],
        seed: u64,
        f: impl for<'a> Fn(&'a Tape<f64>, Tensor<'a, f64>) -> Tensor<'a, f64>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_arr(shape, &mut rng);
        let tape = Tape::<f64>::new();
        let x = tape.leaf_grad(x0.clone());
        let y = f(&tape, x);
        assert_eq!(y.value().len(), 1, "fd_check needs a scalar output");
        let g = tape.backward(y);
        let ga = g.of(x).unwrap().clone();

        let eval = |arr: &ArrayD<f64>| -> f64 {
            let tape = Tape::<f64>::new();
            let x = tape.leaf_grad(arr.clone());
            f(&tape, x).scalar()
        };
        let h = 1e-5;
        let n = x0.len();
        let stride = (n / 7).max(1);
        for flat in (0..n).step_by(stride) {
            let mut up = x0.clone();
            let mut dn = x0.clone();
            up.as_slice_mut().unwrap()[flat] += h;
            dn.as_slice_mut().unwrap()[flat] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            let an = ga.as_slice().unwrap()[flat];
            assert!(
                (an - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                "flat {flat}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn matmul_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b0 = rand_arr(&[4, 3], &mut rng);
        fd_check(&[5, 4], 2, move |tape, x| {
            let b = tape.leaf_grad(b0.clone());
            x.matmul(b).square().mean_all()
        });
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf_grad(arr2(&[[0.3, -1.0, 2.0], [5.0, 5.0, 5.0]]).into_dyn());
        let y = x.softmax_rows();
        let v = y.value();
        for row in as2(&v).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        fd_check(&[3, 4], 3, |_tape, x| {
            x.softmax_rows().square().mean_all()
        });
    }

    #[test]
    fn layernorm_grad() {
        fd_check(&[3, 8], 4, |_tape, x| {
            x.layernorm_rows(1e-5).square().mean_all()
        });
    }

    #[test]
    fn conv2d_grad_input_and_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w0 = rand_arr(&[4, 2, 3, 3], &mut rng);
        fd_check(&[2, 6, 6], 6, move |tape, x| {
            let w = tape.leaf_grad(w0.clone());
            x.conv2d(w, 1, 1).square().mean_all()
        });
        let x0 = {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            rand_arr(&[2, 6, 6], &mut rng)
        };
        fd_check(&[4, 2, 3, 3], 8, move |tape, w| {
            let x = tape.leaf_grad(x0.clone());
            x.conv2d(w, 2, 1).square().mean_all()
        });
    }

    #[test]
    fn patchify_roundtrip_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = rand_arr(&[3, 8, 8], &mut rng);
        let tape = Tape::<f64>::new();
        let x = tape.leaf_grad(x0.clone());
        let rt = x.patchify(4).unpatchify(3, 8, 8, 4);
        assert_eq!(rt.value().as_ref(), &x0);
        fd_check(&[3, 8, 8], 10, |_tape, x| {
            x.patchify(4).square().mean_all()
        });
    }

    #[test]
    fn solve_matches_direct_inverse_and_grad() {
        let a0 = arr2(&[[4.0, 1.0], [2.0, 3.0]]).into_dyn();
        let b0 = arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn();
        let tape = Tape::<f64>::new();
        let a = tape.leaf_grad(a0.clone());
        let b = tape.leaf_grad(b0);
        let x = a.solve_sq(b).unwrap();
        let v = x.value();
        // A * X = I
        let prod = as2(&a0).dot(&as2(&v));
        assert!((prod[[0, 0]] - 1.0).abs() < 1e-12 && prod[[0, 1]].abs() < 1e-12);

        let b1 = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            rand_arr(&[3, 2], &mut rng)
        };
        fd_check(&[3, 3], 12, move |tape, a| {
            // Shift the diagonal away from singularity.
            let eye = tape.leaf_grad(ArrayD::from_shape_fn(IxDyn(&[3, 3]), |ix| {
                if ix[0] == ix[1] {
                    4.0
                } else {
                    0.0
                }
            }));
            let b = tape.leaf_grad(b1.clone());
            (a + eye).solve_sq(b).unwrap().square().mean_all()
        });
    }

    #[test]
    fn depthwise_blur_preserves_mass_interior() {
        let kernel = gaussian_kernel_2d::<f64>(5, 1.25);
        assert!((kernel.sum() - 1.0).abs() < 1e-12);
        let tape = Tape::<f64>::new();
        let x = tape.leaf_grad(ArrayD::from_elem(IxDyn(&[1, 9, 9]), 1.0));
        let y = x.depthwise_conv_same(&kernel);
        // Center pixel sees the whole kernel.
        assert!((y.value()[[0, 4, 4]] - 1.0).abs() < 1e-12);
        fd_check(&[2, 7, 7], 13, move |_tape, x| {
            x.depthwise_conv_same(&kernel).square().mean_all()
        });
    }

    #[test]
    fn warp_and_resize_grads() {
        let grid = Array3::from_shape_fn((5, 5, 2), |(i, j, k)| {
            if k == 0 {
                i as f64 + 0.3
            } else {
                j as f64 - 0.2
            }
        });
        fd_check(&[2, 5, 5], 14, move |_tape, x| {
            x.warp_bilinear(&grid).square().mean_all()
        });
        fd_check(&[2, 6, 6], 15, |_tape, x| {
            x.resize_nearest(9, 9).square().mean_all()
        });
    }

    #[test]
    fn channel_l2norm_unit_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x0 = rand_arr(&[4, 3, 3], &mut rng);
        let tape = Tape::<f64>::new();
        let x = tape.leaf_grad(x0);
        let y = x.channel_l2norm(1e-10);
        let v = y.value();
        let mut s = 0.0;
        for c in 0..4 {
            s += v[[c, 1, 1]] * v[[c, 1, 1]];
        }
        assert!((s - 1.0).abs() < 1e-6);
        fd_check(&[4, 3, 3], 17, |_tape, x| {
            x.channel_l2norm(1e-6).square().mean_all()
        });
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x0 = rand_arr(&[4, 6], &mut rng);
        let tape = Tape::<f64>::new();
        let x = tape.leaf_grad(x0.clone());
        let parts: Vec<_> = (0..3).map(|i| x.slice_cols(i * 2, 2)).collect();
        let rt = concat_cols(&parts);
        assert_eq!(rt.value().as_ref(), &x0);
        fd_check(&[4, 6], 19, |_tape, x| {
            let a = x.slice_cols(0, 3);
            let b = x.slice_cols(3, 3);
            concat_cols(&[b, a]).square().mean_all()
        });
    }

    #[test]
    fn channel_stack_pad_crop_valid_conv_grads() {
        fd_check(&[3, 5, 5], 21, |_tape, x| {
            let r = x.channel(0);
            let g = x.channel(1);
            let b = x.channel(2);
            stack_channels(&[g, b, r]).square().mean_all()
        });
        fd_check(&[2, 4, 4], 22, |_tape, x| {
            x.pad_bottom_right(3, 2)
                .crop_top_left(4, 4)
                .square()
                .mean_all()
        });
        let kernel = gaussian_kernel_2d::<f64>(3, 0.9);
        fd_check(&[2, 6, 6], 23, move |_tape, x| {
            x.depthwise_conv(&kernel, 0).square().mean_all()
        });
    }

    #[test]
    fn luminance_is_channel_mean() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf_grad(ArrayD::from_shape_fn(IxDyn(&[3, 2, 2]), |ix| {
            (ix[0] + 1) as f64
        }));
        let y = x.luminance();
        assert!((y.value()[[0, 0]] - 2.0).abs() < 1e-12);
        fd_check(&[3, 4, 4], 20, |_tape, x| x.luminance().square().mean_all());
        let _ = Array1::<f64>::zeros(1); // keep import used
    }
}
