use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Texel neighbourhood of one normalized lookup coordinate.
#[derive(Clone, Copy, Debug)]
struct Footprint<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    /// d(px)/du, zero when clamped.
    dx_du: T,
    dy_dv: T,
}

fn footprint<T: Scalar>(u: T, v: T, h: usize, w: usize) -> Footprint<T> {
    let axis = |coord: T, len: usize| {
        let scale = T::from_f64(len as f64);
        let half = T::from_f64(0.5);
        let raw = coord * scale - half;
        let hi = T::from_f64((len - 1) as f64);
        let (p, slope) = if raw <= T::zero() {
            (T::zero(), T::zero())
        } else if raw >= hi {
            (hi, T::zero())
        } else {
            (raw, scale)
        };
        let i0 = (p.to_f64().floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - T::from_f64(i0 as f64), slope)
    };
    let (x0, x1, fx, dx_du) = axis(u, w);
    let (y0, y1, fy, dy_dv) = axis(v, h);
    Footprint { x0, x1, y0, y1, fx, fy, dx_du, dy_dv }
}

impl<T: Scalar> Tape<T> {
    /// Bilinear lookup of `feat [C, H, W]` at `coords [M, 2]` holding `(u, v)`
    /// in `[0, 1]^2` (u along W, v along H, texel centres at `(i + 0.5) / W`).
    /// Coordinates outside the texel-centre range clamp to the border.
    /// Returns `[M, C]`.
    pub fn grid_sample_bilinear(&mut self, feat: Var, coords: Var) -> Result<Var> {
        let shape = self.shape(feat).to_vec();
        let [c, h, w] = match shape[..] {
            [c, h, w] => [c, h, w],
            _ => return Err(TensorError::invalid("grid_sample_bilinear", format!("feature map must be 3-d, got {shape:?}"))),
        };
        let [m, two] = self.value(coords).dims2("grid_sample_bilinear")?;
        if two != 2 {
            return Err(TensorError::shape("grid_sample_bilinear", self.shape(coords), &[m, 2]));
        }
        let cv = self.value(coords).data();
        if cv.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::invalid("grid_sample_bilinear", "non-finite coordinate"));
        }
        let fps: Vec<Footprint<T>> = cv.chunks_exact(2).map(|uv| footprint(uv[0], uv[1], h, w)).collect();
        let f = self.value(feat).data();
        let hw = h * w;
        let mut out = vec![T::zero(); m * c];
        for (row, fp) in fps.iter().enumerate() {
            let (wx0, wy0) = (T::one() - fp.fx, T::one() - fp.fy);
            let (i00, i01, i10, i11) = (fp.y0 * w + fp.x0, fp.y0 * w + fp.x1, fp.y1 * w + fp.x0, fp.y1 * w + fp.x1);
            for ch in 0..c {
                let p = &f[ch * hw..(ch + 1) * hw];
                out[row * c + ch] = wy0 * (wx0 * p[i00] + fp.fx * p[i01]) + fp.fy * (wx0 * p[i10] + fp.fx * p[i11]);
            }
        }
        let value = Tensor::new(vec![m, c], out)?;
        Ok(self.record(
            value,
            vec![feat, coords],
            Box::new(move |args| {
                let g = args.grad.data();
                let f = args.inputs[0].data();
                let dfeat = args.needs[0].then(|| {
                    let mut d = vec![T::zero(); c * hw];
                    for (row, fp) in fps.iter().enumerate() {
                        let (wx0, wy0) = (T::one() - fp.fx, T::one() - fp.fy);
                        for ch in 0..c {
                            let go = g[row * c + ch];
                            let p = &mut d[ch * hw..(ch + 1) * hw];
                            p[fp.y0 * w + fp.x0] += go * wy0 * wx0;
                            p[fp.y0 * w + fp.x1] += go * wy0 * fp.fx;
                            p[fp.y1 * w + fp.x0] += go * fp.fy * wx0;
                            p[fp.y1 * w + fp.x1] += go * fp.fy * fp.fx;
                        }
                    }
                    Tensor::new(vec![c, h, w], d).unwrap()
                });
                let dcoords = args.needs[1].then(|| {
                    let mut d = vec![T::zero(); m * 2];
                    for (row, fp) in fps.iter().enumerate() {
                        let (mut du, mut dv) = (T::zero(), T::zero());
                        for ch in 0..c {
                            let p = &f[ch * hw..(ch + 1) * hw];
                            let go = g[row * c + ch];
                            let (a, b) = (p[fp.y0 * w + fp.x0], p[fp.y0 * w + fp.x1]);
                            let (cc, dd) = (p[fp.y1 * w + fp.x0], p[fp.y1 * w + fp.x1]);
                            du += go * ((T::one() - fp.fy) * (b - a) + fp.fy * (dd - cc));
                            dv += go * ((T::one() - fp.fx) * (cc - a) + fp.fx * (dd - b));
                        }
                        d[row * 2] = du * fp.dx_du;
                        d[row * 2 + 1] = dv * fp.dy_dv;
                    }
                    Tensor::new(vec![m, 2], d).unwrap()
                });
                vec![dfeat, dcoords]
            }),
        ))
    }
}
