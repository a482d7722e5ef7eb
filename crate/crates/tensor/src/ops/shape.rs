//! Layout ops: reshape, concat/slice along an axis, spatial resampling, and
//! pixel scatter/gather between row lists and images.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `(outer, axis_len, inner)` split of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x).to_vec();
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.record(value, vec![x], Box::new(move |args| vec![Some(args.grad.clone().reshape(&from).unwrap())])))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::shape("concat", &first, s));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &len) in xs.iter().zip(&sizes) {
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.record(
            value,
            xs.to_vec(),
            Box::new(move |args| {
                let g = args.grad.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(sizes.len());
                for (i, &len) in sizes.iter().enumerate() {
                    if !args.needs[i] {
                        grads.push(None);
                        offset += len;
                        continue;
                    }
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        part.extend_from_slice(&g[s..s + len * inner]);
                    }
                    grads.push(Some(Tensor::new(args.inputs[i].shape().to_vec(), part).unwrap()));
                    offset += len;
                }
                grads
            }),
        ))
    }

    /// `x[.., start..start + len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::invalid("slice", format!("range {start}..{} on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, full, inner) = split_at_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&d[s..s + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.record(
            value,
            vec![x],
            Box::new(move |args| {
                let mut gx = vec![T::zero(); outer * full * inner];
                let g = args.grad.data();
                for o in 0..outer {
                    let s = (o * full + start) * inner;
                    gx[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(shape.clone(), gx).unwrap())]
            }),
        ))
    }

    /// Mean over non-overlapping `factor x factor` blocks of an NCHW tensor.
    pub fn area_downsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("area_downsample")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(TensorError::invalid("area_downsample", format!("{h}x{w} not divisible by {factor}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let inv = T::from_f64(1.0 / (factor * factor) as f64);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for_each_block(n * c, oh, ow, factor, |fine, coarse| out[coarse] += d[fine]);
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.record(
            value,
            vec![x],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut gx = vec![T::zero(); n * c * h * w];
                for_each_block(n * c, oh, ow, factor, |fine, coarse| gx[fine] = g[coarse] * inv);
                vec![Some(Tensor::new(vec![n, c, h, w], gx).unwrap())]
            }),
        ))
    }

    /// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("upsample_nearest")?;
        if factor == 0 {
            return Err(TensorError::invalid("upsample_nearest", "factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for_each_block(n * c, h, w, factor, |fine, coarse| out[fine] = d[coarse]);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.record(
            value,
            vec![x],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut gx = vec![T::zero(); n * c * h * w];
                for_each_block(n * c, h, w, factor, |fine, coarse| gx[coarse] += g[fine]);
                vec![Some(Tensor::new(vec![n, c, h, w], gx).unwrap())]
            }),
        ))
    }

    /// One level of a smoothing pyramid: separable `[1, 3, 3, 1] / 8` blur
    /// centred between each pair of input pixels, clamped at the border, then
    /// decimated by two. Constants are preserved exactly.
    pub fn pyramid_down(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("pyramid_down")?;
        if h < 2 || w < 2 {
            return Err(TensorError::invalid("pyramid_down", format!("input {h}x{w} too small")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let taps = pyramid_taps(h, oh);
        let taps_w = pyramid_taps(w, ow);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for (oy, ty) in taps.iter().enumerate() {
                for (ox, tx) in taps_w.iter().enumerate() {
                    let mut acc = T::zero();
                    for &(iy, wy) in ty {
                        for &(ix, wx) in tx {
                            acc += T::from_f64(wy * wx) * d[(p * h + iy) * w + ix];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.record(
            value,
            vec![x],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for (oy, ty) in taps.iter().enumerate() {
                        for (ox, tx) in taps_w.iter().enumerate() {
                            let go = g[(p * oh + oy) * ow + ox];
                            for &(iy, wy) in ty {
                                for &(ix, wx) in tx {
                                    gx[(p * h + iy) * w + ix] += T::from_f64(wy * wx) * go;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, c, h, w], gx).unwrap())]
            }),
        ))
    }

    /// Scatter rows of `x [M, C]` into a zero image `[1, C, height, width]`
    /// at flat pixel indices `pixels[m]` (which must be distinct).
    pub fn scatter_rows(&mut self, x: Var, pixels: &[usize], height: usize, width: usize) -> Result<Var> {
        let [m, c] = self.value(x).dims2("scatter_rows")?;
        if pixels.len() != m {
            return Err(TensorError::invalid("scatter_rows", format!("{} pixel indices for {m} rows", pixels.len())));
        }
        if let Some(&p) = pixels.iter().find(|&&p| p >= height * width) {
            return Err(TensorError::invalid("scatter_rows", format!("pixel {p} outside {height}x{width}")));
        }
        let hw = height * width;
        let d = self.value(x).data();
        let mut out = vec![T::zero(); c * hw];
        for (row, &p) in pixels.iter().enumerate() {
            for ch in 0..c {
                out[ch * hw + p] = d[row * c + ch];
            }
        }
        let pixels = pixels.to_vec();
        let value = Tensor::new(vec![1, c, height, width], out)?;
        Ok(self.record(
            value,
            vec![x],
            Box::new(move |args| {
                let g = args.grad.data();
                let gx = Tensor::from_fn(&[m, c], |i| g[(i % c) * hw + pixels[i / c]]);
                vec![Some(gx)]
            }),
        ))
    }
}

/// Input taps `(index, weight)` for each output sample of [`Tape::pyramid_down`].
fn pyramid_taps(len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    const W: [f64; 4] = [0.125, 0.375, 0.375, 0.125];
    (0..out_len)
        .map(|o| {
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
            for (t, &wt) in W.iter().enumerate() {
                let i = (2 * o + t) as isize - 1;
                let i = i.clamp(0, len as isize - 1) as usize;
                match taps.iter_mut().find(|(j, _)| *j == i) {
                    Some(entry) => entry.1 += wt,
                    None => taps.push((i, wt)),
                }
            }
            taps
        })
        .collect()
}

/// Visit every `(fine, coarse)` flat index pair of `planes` images whose
/// coarse size is `ch x cw` and fine size `factor` times larger.
fn for_each_block(planes: usize, ch: usize, cw: usize, factor: usize, mut f: impl FnMut(usize, usize)) {
    let fw = cw * factor;
    for p in 0..planes {
        for cy in 0..ch {
            let coarse_row = (p * ch + cy) * cw;
            for dy in 0..factor {
                let fine_row = ((p * ch + cy) * factor + dy) * fw;
                for cx in 0..cw {
                    for dx in 0..factor {
                        f(fine_row + cx * factor + dx, coarse_row + cx);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_slice_recovers_parts() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[1, 3, 2, 2], |i| 100.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 5, 2, 2]);
        let back = tape.slice(c, 1, 2, 3).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 4], vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 4.0, 4.0]).unwrap());
        let y = tape.area_downsample(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 2.0]);
        assert!(tape.area_downsample(x, 3).is_err());
    }

    #[test]
    fn pyramid_preserves_constants() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 3, 8, 6], 0.3));
        let y = tape.pyramid_down(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 4, 3]);
        assert!(tape.value(y).data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn scatter_places_rows() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let img = tape.scatter_rows(x, &[3, 0], 2, 2).unwrap();
        assert_eq!(tape.value(img).data(), &[3.0, 0.0, 0.0, 1.0, 4.0, 0.0, 0.0, 2.0]);
    }
}
