//! Dense layers and 2-d (transposed) convolution via im2col + GEMM.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Unfold `image` (C x H x W) into `cols` ((C k k) x (Ho Wo)).
fn im2col<T: Scalar>(image: &[T], g: &Geometry, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let n_out = g.out_h * g.out_w;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *d = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `image`.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, image: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let n_out = g.out_h * g.out_w;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_args(op: &'static str, k: usize, stride: usize) -> Result<()> {
    if k == 0 || stride == 0 {
        return Err(TensorError::invalid(op, format!("kernel {k} and stride {stride} must be positive")));
    }
    Ok(())
}

fn check_bias<T: Scalar>(op: &'static str, b: &Tensor<T>, out_channels: usize) -> Result<()> {
    if b.shape() != [out_channels] {
        return Err(TensorError::shape(op, b.shape(), &[out_channels]));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// `x [M, K] * w [K, N] + b [N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [m, k] = self.value(x).dims2("linear")?;
        let [kw, n] = self.value(w).dims2("linear")?;
        if kw != k {
            return Err(TensorError::shape("linear", self.shape(x), self.shape(w)));
        }
        check_bias("linear", self.value(b), n)?;
        let mut out = vec![T::zero(); m * n];
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(n) {
            row.copy_from_slice(bias);
        }
        T::gemm(m, k, n, T::one(), self.value(x).data(), false, self.value(w).data(), false, T::one(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.record(
            value,
            vec![x, w, b],
            Box::new(move |args| {
                let (xv, wv, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
                let dx = args.needs[0].then(|| {
                    let mut dx = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g, false, wv, true, T::zero(), &mut dx);
                    Tensor::new(vec![m, k], dx).unwrap()
                });
                let dw = args.needs[1].then(|| {
                    let mut dw = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), xv, true, g, false, T::zero(), &mut dw);
                    Tensor::new(vec![k, n], dw).unwrap()
                });
                let db = args.needs[2].then(|| {
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks_exact(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    Tensor::new(vec![n], db).unwrap()
                });
                vec![dx, dw, db]
            }),
        ))
    }

    /// 2-d cross-correlation. `x [N, C, H, W]`, `w [O, C, k, k]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4("conv2d")?;
        let [o, cw, k, k2] = self.value(w).dims4("conv2d")?;
        if cw != c || k != k2 {
            return Err(TensorError::shape("conv2d", self.shape(x), self.shape(w)));
        }
        check_conv_args("conv2d", k, stride)?;
        check_bias("conv2d", self.value(b), o)?;
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(TensorError::invalid("conv2d", format!("kernel {k} larger than padded input {h}x{wd}")));
        }
        let g = Geometry {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
            out_h: conv_out(h, k, stride, pad),
            out_w: conv_out(wd, k, stride, pad),
        };
        let (rows, cols_n) = (g.col_rows(), g.col_cols());
        let mut out = vec![T::zero(); n * o * cols_n];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols_n] };
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        for i in 0..n {
            let img = &xv[i * c * h * wd..(i + 1) * c * h * wd];
            let dst = &mut out[i * o * cols_n..(i + 1) * o * cols_n];
            for (oc, plane) in dst.chunks_exact_mut(cols_n).enumerate() {
                plane.fill(bv[oc]);
            }
            let cols_ref = if g.is_pointwise() {
                img
            } else {
                im2col(img, &g, &mut cols);
                &cols
            };
            T::gemm(o, rows, cols_n, T::one(), wv, false, cols_ref, false, T::one(), dst);
        }
        let value = Tensor::new(vec![n, o, g.out_h, g.out_w], out)?;
        Ok(self.record(
            value,
            vec![x, w, b],
            Box::new(move |args| {
                let (xv, wv, gv) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
                let mut dx = args.needs[0].then(|| vec![T::zero(); n * c * h * wd]);
                let mut dw = args.needs[1].then(|| vec![T::zero(); o * rows]);
                let mut cols = vec![T::zero(); rows * cols_n];
                for i in 0..n {
                    let gy = &gv[i * o * cols_n..(i + 1) * o * cols_n];
                    if let Some(dw) = dw.as_mut() {
                        let img = &xv[i * c * h * wd..(i + 1) * c * h * wd];
                        let cols_ref = if g.is_pointwise() {
                            img
                        } else {
                            im2col(img, &g, &mut cols);
                            &cols
                        };
                        T::gemm(o, cols_n, rows, T::one(), gy, false, cols_ref, true, T::one(), dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dimg = &mut dx[i * c * h * wd..(i + 1) * c * h * wd];
                        if g.is_pointwise() {
                            T::gemm(rows, o, cols_n, T::one(), wv, true, gy, false, T::zero(), dimg);
                        } else {
                            T::gemm(rows, o, cols_n, T::one(), wv, true, gy, false, T::zero(), &mut cols);
                            col2im(&cols, &g, dimg);
                        }
                    }
                }
                let db = args.needs[2].then(|| {
                    let mut db = vec![T::zero(); o];
                    for i in 0..n {
                        for (oc, d) in db.iter_mut().enumerate() {
                            let s = (i * o + oc) * cols_n;
                            *d += gv[s..s + cols_n].iter().copied().sum::<T>();
                        }
                    }
                    Tensor::new(vec![o], db).unwrap()
                });
                vec![
                    dx.map(|d| Tensor::new(vec![n, c, h, wd], d).unwrap()),
                    dw.map(|d| Tensor::new(vec![o, c, k, k], d).unwrap()),
                    db,
                ]
            }),
        ))
    }

    /// Transposed convolution. `x [N, C, H, W]`, `w [C, O, k, k]`, `b [O]`;
    /// output side `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4("conv_transpose2d")?;
        let [cw, o, k, k2] = self.value(w).dims4("conv_transpose2d")?;
        if cw != c || k != k2 {
            return Err(TensorError::shape("conv_transpose2d", self.shape(x), self.shape(w)));
        }
        check_conv_args("conv_transpose2d", k, stride)?;
        check_bias("conv_transpose2d", self.value(b), o)?;
        let full_h = (h - 1) * stride + k;
        let full_w = (wd - 1) * stride + k;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(TensorError::invalid("conv_transpose2d", format!("padding {pad} consumes the whole output")));
        }
        // The forward pass is the input-adjoint of a conv2d over the output grid.
        let g = Geometry {
            channels: o,
            height: full_h - 2 * pad,
            width: full_w - 2 * pad,
            kernel: k,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        debug_assert_eq!(conv_out(g.height, k, stride, pad), h);
        let (rows, cols_n) = (g.col_rows(), g.col_cols());
        let (oh, ow) = (g.height, g.width);
        let mut out = vec![T::zero(); n * o * oh * ow];
        let mut cols = vec![T::zero(); rows * cols_n];
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        for i in 0..n {
            let img = &xv[i * c * cols_n..(i + 1) * c * cols_n];
            T::gemm(rows, c, cols_n, T::one(), wv, true, img, false, T::zero(), &mut cols);
            let dst = &mut out[i * o * oh * ow..(i + 1) * o * oh * ow];
            for (oc, plane) in dst.chunks_exact_mut(oh * ow).enumerate() {
                plane.fill(bv[oc]);
            }
            col2im(&cols, &g, dst);
        }
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        Ok(self.record(
            value,
            vec![x, w, b],
            Box::new(move |args| {
                let (xv, wv, gv) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
                let mut dx = args.needs[0].then(|| vec![T::zero(); n * c * cols_n]);
                let mut dw = args.needs[1].then(|| vec![T::zero(); c * rows]);
                let mut cols = vec![T::zero(); rows * cols_n];
                let mut db = vec![T::zero(); o];
                for i in 0..n {
                    let gy = &gv[i * o * oh * ow..(i + 1) * o * oh * ow];
                    for (oc, d) in db.iter_mut().enumerate() {
                        *d += gy[oc * oh * ow..(oc + 1) * oh * ow].iter().copied().sum::<T>();
                    }
                    im2col(gy, &g, &mut cols);
                    if let Some(dx) = dx.as_mut() {
                        let dimg = &mut dx[i * c * cols_n..(i + 1) * c * cols_n];
                        T::gemm(c, rows, cols_n, T::one(), wv, false, &cols, false, T::zero(), dimg);
                    }
                    if let Some(dw) = dw.as_mut() {
                        let img = &xv[i * c * cols_n..(i + 1) * c * cols_n];
                        T::gemm(c, cols_n, rows, T::one(), img, false, &cols, true, T::one(), dw);
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(vec![n, c, h, wd], d).unwrap()),
                    dw.map(|d| Tensor::new(vec![c, o, k, k], d).unwrap()),
                    args.needs[2].then(|| Tensor::new(vec![o], db).unwrap()),
                ]
            }),
        ))
    }
}
