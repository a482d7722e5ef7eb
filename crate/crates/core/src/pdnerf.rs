//! Pose-conditioned radiance field rendered at reduced resolution.
//!
//! Rays are cast only where the dilated body is hit, samples are confined to
//! the spans the ray spends inside it, and each sample is described by its
//! local surface coordinate plus the pose feature found at its foot point.

use hvtr_tensor::{BackwardArgs, Bound, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::camera::Camera;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec3};
use crate::nn::Linear;
use crate::raster::NearFar;
use crate::surface::{to_uv, LocalCoord, TriangleBvh};

/// Frequency encoding `[x, sin(2^0 pi x), cos(2^0 pi x), ...]` per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositionalEncoder {
    pub freqs: usize,
    pub include_input: bool,
}

impl PositionalEncoder {
    pub fn new(freqs: usize, include_input: bool) -> Self {
        PositionalEncoder { freqs, include_input }
    }

    pub fn width(&self, in_dim: usize) -> usize {
        in_dim * (2 * self.freqs + self.include_input as usize)
    }

    pub fn encode_into(&self, x: &[f64], out: &mut Vec<f64>) {
        for &c in x {
            if self.include_input {
                out.push(c);
            }
            let mut f = std::f64::consts::PI;
            for _ in 0..self.freqs {
                let (s, co) = (f * c).sin_cos();
                out.push(s);
                out.push(co);
                f *= 2.0;
            }
        }
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width(x.len()));
        self.encode_into(x, &mut out);
        out
    }

    /// Encode each row of `rows` into a `[rows, width]` tensor.
    pub fn encode_rows<T: Scalar>(&self, rows: &[[f64; 3]]) -> Tensor<T> {
        let w = self.width(3);
        let mut data = Vec::with_capacity(rows.len() * w);
        for r in rows {
            self.encode_into(r, &mut data);
        }
        Tensor::new(vec![rows.len(), w], data.into_iter().map(T::from_f64).collect()).expect("encoding width")
    }
}

pub const FIELD_LAYERS: usize = 7;
/// 1-based index of the trunk layer that also receives the encoded input.
pub const FIELD_SKIP_LAYER: usize = 4;
const TRUNK_LAYERS: usize = 5;

/// The field MLP: five trunk layers with an input skip, a softplus density
/// head on the trunk, and a two-layer feature head that also sees the view
/// direction.
#[derive(Clone, Debug)]
pub struct RadianceField {
    pub pos_enc: PositionalEncoder,
    pub dir_enc: PositionalEncoder,
    trunk: Vec<Linear>,
    density: Linear,
    feature: Vec<Linear>,
    pub pose_channels: usize,
    pub feature_channels: usize,
    pub width: usize,
}

impl RadianceField {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, pose_channels: usize, rng: &mut R) -> Self {
        let pos_enc = PositionalEncoder::new(cfg.pos_freqs, true);
        let dir_enc = PositionalEncoder::new(cfg.dir_freqs, true);
        let w = cfg.mlp_width;
        let input = pos_enc.width(3) + pose_channels;
        let trunk = (0..TRUNK_LAYERS)
            .map(|i| {
                let fan_in = match i + 1 {
                    1 => input,
                    FIELD_SKIP_LAYER => w + input,
                    _ => w,
                };
                Linear::new(store, &format!("field.trunk{i}"), fan_in, w, rng)
            })
            .collect();
        let density = Linear::new(store, "field.density", w, 1, rng);
        let feature = vec![
            Linear::new(store, "field.feature0", w + dir_enc.width(3), w / 2, rng),
            Linear::new(store, "field.feature1", w / 2, cfg.feature_channels, rng),
        ];
        RadianceField { pos_enc, dir_enc, trunk, density, feature, pose_channels, feature_channels: cfg.feature_channels, width: w }
    }

    /// Fully-connected layers on the path to the appearance feature.
    pub fn num_layers(&self) -> usize {
        self.trunk.len() + self.feature.len()
    }

    pub fn skip_layer(&self) -> usize {
        FIELD_SKIP_LAYER
    }

    /// `coords` is the encoded `(u, v, h)` `[M, pos]`, `pose` the sampled
    /// pose feature `[M, pose_channels]`, `dirs` the encoded view direction
    /// `[M, dir]`. Returns density `[M, 1]` and feature `[M, feature]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, coords: Var, pose: Var, dirs: Var) -> Result<(Var, Var)> {
        if !tape.value(pose).all_finite() {
            return Err(Error::NonFinite("pose feature fed to the radiance field".into()));
        }
        let input = tape.concat(&[coords, pose], 1)?;
        let mut x = input;
        for (i, layer) in self.trunk.iter().enumerate() {
            if i + 1 == FIELD_SKIP_LAYER {
                x = tape.concat(&[x, input], 1)?;
            }
            let y = layer.forward(tape, p, x)?;
            x = tape.relu(y);
        }
        let sigma = self.density.forward(tape, p, x)?;
        let sigma = tape.softplus(sigma);
        let h = tape.concat(&[x, dirs], 1)?;
        let h = self.feature[0].forward(tape, p, h)?;
        let h = tape.relu(h);
        let xi = self.feature[1].forward(tape, p, h)?;
        let rgb = tape.slice(xi, 1, 0, 3)?;
        let rgb = tape.sigmoid(rgb);
        let xi = if self.feature_channels > 3 {
            let rest = tape.slice(xi, 1, 3, self.feature_channels - 3)?;
            tape.concat(&[rgb, rest], 1)?
        } else {
            rgb
        };
        Ok((sigma, xi))
    }
}

/// Samples along the rays of the hit pixels of a reduced-resolution view.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub width: usize,
    pub height: usize,
    pub per_ray: usize,
    /// Row-major pixel index of each ray.
    pub pixels: Vec<usize>,
    pub origins: Vec<Vec3>,
    pub dirs: Vec<Vec3>,
    /// Ray distances, `per_ray` per ray, strictly increasing.
    pub t: Vec<f64>,
    /// In-band spacing to the previous sample (to the band entry for the
    /// first sample).
    pub delta: Vec<f64>,
    pub points: Vec<Vec3>,
}

impl RaySamples {
    pub fn num_rays(&self) -> usize {
        self.pixels.len()
    }
}

/// Pixels with at least one inside span.
pub fn hit_pixels(nf: &NearFar) -> Vec<usize> {
    (0..nf.hit.len()).filter(|&p| nf.hit[p]).collect()
}

/// Number of samples placed in the near half of the band.
pub fn near_count(n: usize) -> usize {
    (2 * n).div_ceil(3).min(n)
}

/// Map an in-band arclength `s` to a ray distance through sorted spans.
fn band_to_ray(spans: &[(f64, f64)], s: f64) -> f64 {
    let mut acc = 0.0;
    for &(a, b) in spans {
        let len = b - a;
        if s <= acc + len {
            return a + (s - acc);
        }
        acc += len;
    }
    spans.last().map_or(0.0, |&(_, b)| b)
}

/// Stratified samples inside the dilated body for each pixel in `pixels`.
///
/// The band is the union of the spans the ray spends inside the dilated
/// mesh. Its first half receives `ceil(2N/3)` strata and the second half the
/// rest. With `rng` each stratum is jittered once; without it the stratum
/// midpoints are used.
pub fn sample_rays<R: Rng>(cam: &Camera, nf: &NearFar, pixels: &[usize], n: usize, mut rng: Option<&mut R>) -> Result<RaySamples> {
    if n == 0 {
        return Err(Error::invalid("sample count", "need at least one sample per ray"));
    }
    if nf.width != cam.width || nf.height != cam.height {
        return Err(Error::invalid("near/far buffers", format!("{}x{} for a {}x{} camera", nf.width, nf.height, cam.width, cam.height)));
    }
    let k_near = near_count(n);
    let r = cam.r();
    let mut out = RaySamples {
        width: cam.width,
        height: cam.height,
        per_ray: n,
        pixels: Vec::with_capacity(pixels.len()),
        origins: Vec::with_capacity(pixels.len()),
        dirs: Vec::with_capacity(pixels.len()),
        t: Vec::with_capacity(pixels.len() * n),
        delta: Vec::with_capacity(pixels.len() * n),
        points: Vec::with_capacity(pixels.len() * n),
    };
    let mut spans = Vec::new();
    for &p in pixels {
        if p >= nf.hit.len() || !nf.hit[p] {
            return Err(Error::invalid("ray pixel", format!("pixel {p} misses the dilated body")));
        }
        let (origin, dir) = cam.pixel_ray(p % cam.width, p / cam.width);
        // Buffers hold camera depth; convert to distance along the unit ray.
        let cos = (r * dir).z;
        spans.clear();
        spans.extend(nf.intervals[p].iter().map(|&(a, b)| (a / cos, b / cos)));
        let total: f64 = spans.iter().map(|(a, b)| b - a).sum();
        let half = total / 2.0;
        let mut prev = 0.0;
        for i in 0..n {
            let (lo, width) = if i < k_near {
                let w = half / k_near as f64;
                (w * i as f64, w)
            } else {
                let w = half / (n - k_near) as f64;
                (half + w * (i - k_near) as f64, w)
            };
            let frac = match rng.as_deref_mut() {
                // Strictly inside the stratum so spacings stay positive.
                Some(g) => (g.random::<u32>() as f64 + 0.5) / 4294967296.0,
                None => 0.5,
            };
            let s = lo + frac * width;
            let t = band_to_ray(&spans, s);
            out.t.push(t);
            out.delta.push(s - prev);
            out.points.push(origin + dir * t);
            prev = s;
        }
        out.pixels.push(p);
        out.origins.push(origin);
        out.dirs.push(dir);
    }
    Ok(out)
}

/// Local coordinates of every sample point against the undilated mesh.
#[derive(Clone, Debug)]
pub struct LocalSamples {
    pub coords: Vec<LocalCoord>,
    /// Atlas position of each sample's foot point.
    pub uv: Vec<[f64; 2]>,
}

pub fn localize(samples: &RaySamples, mesh: &Mesh, bvh: &TriangleBvh) -> LocalSamples {
    use rayon::prelude::*;
    let coords: Vec<LocalCoord> = samples.points.par_iter().map(|q| bvh.project(q, mesh)).collect();
    let uv = coords.iter().map(|lc| to_uv(lc, mesh)).collect();
    LocalSamples { coords, uv }
}

/// Compositing weights `T_n (1 - exp(-sigma_n delta_n))` of one ray and the
/// final transmittance.
pub fn composite_weights(sigma: &[f64], delta: &[f64]) -> (Vec<f64>, f64) {
    let mut trans = 1.0;
    let w = sigma
        .iter()
        .zip(delta)
        .map(|(&s, &d)| {
            let e = (-s * d).exp();
            let w = trans * (1.0 - e);
            trans *= e;
            w
        })
        .collect();
    (w, trans)
}

/// Composite `features` `[R*N, C]` with densities `sigma` `[R*N, 1]` into
/// `[R, C + 1]`: the accumulated feature followed by the accumulated alpha.
pub fn volume_render<T: Scalar>(tape: &mut Tape<T>, sigma: Var, features: Var, delta: &[f64], per_ray: usize) -> Result<Var> {
    let m = delta.len();
    let c = tape.shape(features).get(1).copied().unwrap_or(0);
    if per_ray == 0 || !m.is_multiple_of(per_ray) || tape.shape(sigma) != [m, 1] || tape.shape(features) != [m, c] {
        return Err(Error::invalid(
            "volume render",
            format!("sigma {:?}, features {:?} for {m} samples of {per_ray} per ray", tape.shape(sigma), tape.shape(features)),
        ));
    }
    if delta.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::invalid("volume render", "sample spacings must be positive"));
    }
    let rays = m / per_ray;
    let (sv, fv) = (tape.value(sigma).data(), tape.value(features).data());
    let mut out = vec![T::zero(); rays * (c + 1)];
    for r in 0..rays {
        let base = r * per_ray;
        let sig: Vec<f64> = sv[base..base + per_ray].iter().map(|&v| Scalar::to_f64(v)).collect();
        let (w, trans) = composite_weights(&sig, &delta[base..base + per_ray]);
        let row = &mut out[r * (c + 1)..(r + 1) * (c + 1)];
        for (n, wn) in w.iter().enumerate() {
            let f = &fv[(base + n) * c..(base + n + 1) * c];
            for k in 0..c {
                row[k] += T::from_f64(*wn * Scalar::to_f64(f[k]));
            }
        }
        row[c] = T::from_f64(1.0 - trans);
    }
    let value = Tensor::new(vec![rays, c + 1], out)?;
    let delta = delta.to_vec();
    Ok(tape.record(
        value,
        vec![sigma, features],
        Box::new(move |a: &BackwardArgs<'_, T>| {
            let (g, sv, fv) = (a.grad.data(), a.inputs[0].data(), a.inputs[1].data());
            let mut ds = vec![T::zero(); m];
            let mut df = vec![T::zero(); m * c];
            for r in 0..rays {
                let base = r * per_ray;
                let sig: Vec<f64> = sv[base..base + per_ray].iter().map(|&v| Scalar::to_f64(v)).collect();
                let d = &delta[base..base + per_ray];
                let (w, t_final) = composite_weights(&sig, d);
                let gr = &g[r * (c + 1)..(r + 1) * (c + 1)];
                let g_alpha = Scalar::to_f64(gr[c]);
                // c_n = g . xi_n
                let dots: Vec<f64> = (0..per_ray)
                    .map(|n| (0..c).map(|k| Scalar::to_f64(gr[k]) * Scalar::to_f64(fv[(base + n) * c + k])).sum())
                    .collect();
                // trans[n] = T_n, the transmittance in front of sample n.
                let mut trans = Vec::with_capacity(per_ray + 1);
                trans.push(1.0);
                for n in 0..per_ray {
                    trans.push(trans[n] * (-sig[n] * d[n]).exp());
                }
                let mut tail = 0.0;
                for n in (0..per_ray).rev() {
                    ds[base + n] = T::from_f64(d[n] * (trans[n + 1] * dots[n] - tail + g_alpha * t_final));
                    tail += w[n] * dots[n];
                    for k in 0..c {
                        df[(base + n) * c + k] = T::from_f64(w[n] * Scalar::to_f64(gr[k]));
                    }
                }
            }
            let s_shape = a.inputs[0].shape().to_vec();
            let f_shape = a.inputs[1].shape().to_vec();
            vec![
                a.needs[0].then(|| Tensor::new(s_shape, ds).expect("sigma grad")),
                a.needs[1].then(|| Tensor::new(f_shape, df).expect("feature grad")),
            ]
        }),
    ))
}

/// Reduced-resolution render of the field: feature image and alpha.
pub struct VolumeImage {
    /// `[1, C, h, w]`, zero on rays that miss the body.
    pub features: Var,
    /// `[1, 1, h, w]`.
    pub alpha: Var,
}

/// Field inputs derived from the sample geometry; constant for the tape.
pub struct FieldInputs<T> {
    pub coords: Tensor<T>,
    pub dirs: Tensor<T>,
    /// Atlas coordinates `[M, 2]` for sampling the pose feature map.
    pub uv: Tensor<T>,
}

impl<T: Scalar> FieldInputs<T> {
    pub fn new(field: &RadianceField, samples: &RaySamples, local: &LocalSamples) -> Self {
        let n = samples.per_ray;
        let q: Vec<[f64; 3]> = local.coords.iter().map(|lc| [lc.u, lc.v, lc.h]).collect();
        let d: Vec<[f64; 3]> = (0..samples.points.len()).map(|i| samples.dirs[i / n].into()).collect();
        let uv = local.uv.iter().flat_map(|t| [T::from_f64(t[0]), T::from_f64(t[1])]).collect();
        FieldInputs {
            coords: field.pos_enc.encode_rows(&q),
            dirs: field.dir_enc.encode_rows(&d),
            uv: Tensor::new(vec![local.uv.len(), 2], uv).expect("uv rows"),
        }
    }
}

/// Render the field for `samples`; `pose_map` is the `[1, C, U, U]` pose
/// feature map sampled at each sample's foot point.
pub fn render_field<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    field: &RadianceField,
    pose_map: Var,
    samples: &RaySamples,
    inputs: &FieldInputs<T>,
) -> Result<VolumeImage> {
    let (h, w, c) = (samples.height, samples.width, field.feature_channels);
    if samples.num_rays() == 0 {
        let features = tape.constant(Tensor::zeros(&[1, c, h, w]));
        let alpha = tape.constant(Tensor::zeros(&[1, 1, h, w]));
        return Ok(VolumeImage { features, alpha });
    }
    let shape = tape.shape(pose_map).to_vec();
    if shape.len() != 4 || shape[0] != 1 || shape[1] != field.pose_channels {
        return Err(Error::invalid("pose feature map", format!("{shape:?}, expected [1, {}, U, U]", field.pose_channels)));
    }
    let flat = tape.reshape(pose_map, &shape[1..])?;
    let uv = tape.constant(inputs.uv.clone());
    let z = tape.grid_sample_bilinear(flat, uv)?;
    let coords = tape.constant(inputs.coords.clone());
    let dirs = tape.constant(inputs.dirs.clone());
    let (sigma, xi) = field.forward(tape, p, coords, z, dirs)?;
    let rows = volume_render(tape, sigma, xi, &samples.delta, samples.per_ray)?;
    let img = tape.scatter_rows(rows, &samples.pixels, h, w)?;
    let features = tape.slice(img, 1, 0, c)?;
    let alpha = tape.slice(img, 1, c, 1)?;
    Ok(VolumeImage { features, alpha })
}

#[cfg(test)]
mod tests {
    use hvtr_tensor::gradcheck::{check_gradients, random_projection};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::body::{build_toy_humanoid, default_limbs, PoseParams, ShapeParams, Tessellation};
    use crate::raster::near_far_buffers;

    #[test]
    fn encoding_layout() {
        let e = PositionalEncoder::new(6, true);
        assert_eq!(e.width(3), 39);
        let z = e.encode(&[0.0]);
        assert_eq!(z[0], 0.0);
        for k in 0..6 {
            assert_eq!((z[1 + 2 * k], z[2 + 2 * k]), (0.0, 1.0));
        }
        let e = PositionalEncoder::new(2, false);
        let v = e.encode(&[0.25]);
        let pi = std::f64::consts::PI;
        let want = [(pi * 0.25).sin(), (pi * 0.25).cos(), (2.0 * pi * 0.25).sin(), (2.0 * pi * 0.25).cos()];
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig { mlp_width: 32, ..ModelConfig::default() }
    }

    #[test]
    fn zero_field_outputs_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let field = RadianceField::new(&mut store, &ModelConfig::default(), 48, &mut rng);
        assert_eq!(field.num_layers(), 7);
        assert_eq!(field.skip_layer(), 4);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let coords = tape.constant(Tensor::randn(&[5, 39], 1.0, &mut rng));
        let z = tape.constant(Tensor::randn(&[5, 48], 1.0, &mut rng));
        let d = tape.constant(Tensor::randn(&[5, 27], 1.0, &mut rng));
        let (s, xi) = field.forward(&mut tape, &p, coords, z, d).unwrap();
        assert_eq!(tape.shape(xi), &[5, 16]);
        for v in tape.value(s).data() {
            assert!((v - 2f64.ln()).abs() < 1e-12);
        }
        for row in tape.value(xi).data().chunks(16) {
            assert_eq!(&row[..3], &[0.5; 3]);
            assert!(row[3..].iter().all(|&v| v == 0.0));
        }
        let bad = tape.constant(Tensor::full(&[5, 48], f64::NAN));
        assert!(field.forward(&mut tape, &p, coords, bad, d).is_err());
    }

    #[test]
    fn density_gradient_in_pose_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let field = RadianceField::new(&mut store, &small_cfg(), 8, &mut rng);
        let coords = Tensor::randn(&[3, 39], 1.0, &mut rng);
        let dirs = Tensor::randn(&[3, 27], 1.0, &mut rng);
        let z = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let report = check_gradients(
            &[z],
            |tape, v| {
                let p = store.bind(tape, |_| false);
                let c = tape.constant(coords.clone());
                let d = tape.constant(dirs.clone());
                let (s, xi) = field.forward(tape, &p, c, v[0], d).unwrap();
                let a = random_projection(tape, s, 1);
                let b = random_projection(tape, xi, 2);
                tape.add(a, b).unwrap()
            },
            1e-6,
            1e-8,
            64,
        );
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn two_samples_of_ln2() {
        let l = 2f64.ln();
        let (w, t) = composite_weights(&[l, l], &[1.0, 1.0]);
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.25).abs() < 1e-12);
        assert!((1.0 - t - 0.75).abs() < 1e-12);
        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(Tensor::new(vec![2, 1], vec![l, 0.5 * l]).unwrap(), true);
        let f = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), true);
        let out = volume_render(&mut tape, s, f, &[1.0, 2.0], 2).unwrap();
        let v = tape.value(out).data();
        assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] - 0.25).abs() < 1e-12 && (v[2] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn saturation_and_empty_space() {
        let (w, t) = composite_weights(&[30.0], &[1.0]);
        assert!((w[0] - 1.0).abs() < 1e-12 && t < 1e-12);
        let (w, t) = composite_weights(&[0.0, 0.0], &[0.3, 0.2]);
        assert_eq!((w, t), (vec![0.0, 0.0], 1.0));
    }

    #[test]
    fn weights_sum_to_opacity_and_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let n = rng.random_range(1..16);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..20.0)).collect();
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.3)).collect();
            let (w, t) = composite_weights(&s, &d);
            let total: f64 = s.iter().zip(&d).map(|(a, b)| a * b).sum();
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - (1.0 - (-total).exp())).abs() < 1e-12);
            assert!((1.0 - t - w.iter().sum::<f64>()).abs() < 1e-12);
            let mut s2 = s.clone();
            s2[0] += 0.5;
            let (w2, _) = composite_weights(&s2, &d);
            assert!(w2[0] >= w[0]);
            assert!(w2[1..].iter().zip(&w[1..]).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn splitting_constant_segments_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 6;
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.2)).collect();
        let xi: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let render = |s: &[f64], d: &[f64], xi: &[f64]| {
            let (w, _) = composite_weights(s, d);
            w.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>()
        };
        let s2: Vec<f64> = s.iter().flat_map(|&v| [v, v]).collect();
        let d2: Vec<f64> = d.iter().flat_map(|&v| [v / 2.0, v / 2.0]).collect();
        let x2: Vec<f64> = xi.iter().flat_map(|&v| [v, v]).collect();
        assert!((render(&s, &d, &xi) - render(&s2, &d2, &x2)).abs() < 1e-12);
    }

    #[test]
    fn volume_render_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let delta: Vec<f64> = (0..12).map(|_| rng.random_range(0.05..0.5)).collect();
        let sigma = Tensor::<f64>::uniform(&[12, 1], 0.0, 4.0, &mut rng);
        let feat = Tensor::randn(&[12, 3], 1.0, &mut rng);
        let report = check_gradients(
            &[sigma, feat],
            |tape, v| {
                let y = volume_render(tape, v[0], v[1], &delta, 4).unwrap();
                random_projection(tape, y, 7)
            },
            1e-6,
            1e-8,
            64,
        );
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn near_biased_allocation() {
        assert_eq!(near_count(7), 5);
        assert_eq!(near_count(12), 8);
        assert_eq!(near_count(1), 1);
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), Vec3::y(), 4.0, 4, 4).unwrap();
        let mut nf = NearFar {
            width: 4,
            height: 4,
            near: vec![f64::INFINITY; 16],
            far: vec![f64::NEG_INFINITY; 16],
            hit: vec![false; 16],
            intervals: vec![Vec::new(); 16],
            stats: Default::default(),
        };
        // Pixel (2, 2) has its centre on the optical axis, so depth = distance.
        let p = 2 * 4 + 2;
        nf.hit[p] = true;
        nf.near[p] = 1.0;
        nf.far[p] = 2.0;
        nf.intervals[p] = vec![(1.0, 2.0)];
        let cam = Camera { cx: 2.5, cy: 2.5, ..cam };
        let s = sample_rays::<ChaCha8Rng>(&cam, &nf, &[p], 7, None).unwrap();
        assert_eq!(s.t.iter().filter(|&&t| (1.0..=1.5).contains(&t)).count(), 5);
        assert_eq!(s.t.iter().filter(|&&t| t > 1.5 && t <= 2.0).count(), 2);
        assert!(s.t.windows(2).all(|w| w[0] < w[1]));
        assert!(s.delta.iter().all(|&d| d > 0.0));
        assert!((s.delta[0] - (s.t[0] - 1.0)).abs() < 1e-12);
        let again = sample_rays::<ChaCha8Rng>(&cam, &nf, &[p], 7, None).unwrap();
        assert_eq!(s, again);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let j = sample_rays(&cam, &nf, &[p], 7, Some(&mut rng)).unwrap();
        assert!(j.t.windows(2).all(|w| w[0] < w[1]) && j.t[0] > 1.0 && j.t[6] < 2.0);
    }

    #[test]
    fn gaps_between_spans_are_skipped() {
        let spans = [(1.0, 1.5), (3.0, 3.5)];
        assert_eq!(band_to_ray(&spans, 0.25), 1.25);
        assert_eq!(band_to_ray(&spans, 0.75), 3.25);
    }

    #[test]
    fn samples_stay_inside_the_band() {
        let t = build_toy_humanoid(Tessellation::default(), &default_limbs()).unwrap();
        let mesh = t.pose(&PoseParams::identity(t.num_joints()), &ShapeParams::default()).unwrap();
        let d = 0.12;
        let dilated = mesh.dilate(d).unwrap();
        let cam = Camera::look_at(Vec3::new(0.3, 0.1, 3.0), Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, -1.0, 0.0), 150.0, 128, 128)
            .unwrap()
            .downsampled(4)
            .unwrap();
        let nf = near_far_buffers(&dilated, &cam);
        let px = hit_pixels(&nf);
        assert!(px.len() > 50);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_rays(&cam, &nf, &px, 7, Some(&mut rng)).unwrap();
        let bvh = TriangleBvh::build(&mesh).unwrap();
        let local = localize(&s, &mesh, &bvh);
        let worst = local.coords.iter().map(|c| c.h.abs()).fold(0.0, f64::max);
        assert!(worst <= d + 1e-3, "worst |h| {worst}");
    }
}
