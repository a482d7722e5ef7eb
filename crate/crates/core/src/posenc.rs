//! Pose encoding in UV space: the baked positional and normal maps, the
//! learnable geometry/texture latents, and the convolutional pose encoder
//! with its normal-prediction head.

use hvtr_tensor::{Bound, NormKind, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::config::{ModelConfig, NormChoice};
use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec3};
use crate::nn::{Conv, DecoderBlock, EncoderBlock, ResBlock};

/// Texels of seam padding grown around every chart.
pub const SEAM_DILATION: usize = 2;

pub const LATENT_GEOMETRY: &str = "latent.Z_G";
pub const LATENT_TEXTURE: &str = "latent.Z_T";

/// A 3-channel attribute baked into the UV atlas, `size x size` texels,
/// row `j` holding `v` in `[j, j+1) / size`.
#[derive(Clone, Debug, PartialEq)]
pub struct UvMap {
    pub size: usize,
    pub data: Vec<[f64; 3]>,
    /// Texels covered by a triangle or filled by seam dilation.
    pub valid: Vec<bool>,
    /// Texels covered by a triangle.
    pub covered: Vec<bool>,
}

impl UvMap {
    /// `[1, 3, size, size]` tensor, zero on invalid texels.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let n = self.size * self.size;
        Tensor::from_fn(&[1, 3, self.size, self.size], |i| T::from_f64(self.data[i % n][i / n]))
    }

    /// Per-element weight `[1, 3, size, size]`: 1 on valid texels.
    pub fn valid_weights<T: Scalar>(&self) -> Tensor<T> {
        let n = self.size * self.size;
        Tensor::from_fn(&[1, 3, self.size, self.size], |i| if self.valid[i % n] { T::one() } else { T::zero() })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Rasterize every face into the atlas, interpolating `attr` per vertex.
fn splat(mesh: &Mesh, size: usize, attr: &[Vec3], renormalize: bool) -> Result<UvMap> {
    let n = size * size;
    let mut owner = vec![usize::MAX; n];
    let mut data = vec![[0.0; 3]; n];
    let s = size as f64;
    let pos: Vec<[f64; 2]> = mesh.uvs.iter().map(|t| [t[0] * s, t[1] * s]).collect();
    let edge = |a: usize, b: usize, x: f64, y: f64| -> f64 {
        let (lo, hi, sg) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
        let (p, q) = (pos[lo], pos[hi]);
        sg * ((q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0]))
    };
    for (f, &[a, b, c]) in mesh.faces.iter().enumerate() {
        let area = edge(a, b, pos[c][0], pos[c][1]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        let sign = area.signum();
        let xs = [pos[a][0], pos[b][0], pos[c][0]];
        let ys = [pos[a][1], pos[b][1], pos[c][1]];
        let lo = |v: [f64; 3]| ((v.iter().copied().fold(f64::INFINITY, f64::min) - 0.5).ceil().max(0.0)) as usize;
        let hi = |v: [f64; 3]| (v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - 0.5).floor().min(s - 1.0);
        let (x1, y1) = (hi(xs), hi(ys));
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for ty in lo(ys)..=y1 as usize {
            'texel: for tx in lo(xs)..=x1 as usize {
                let (x, y) = (tx as f64 + 0.5, ty as f64 + 0.5);
                let mut w = [0.0; 3];
                for (k, (p, q)) in [(b, c), (c, a), (a, b)].into_iter().enumerate() {
                    let e = sign * edge(p, q, x, y);
                    if e < 0.0 {
                        continue 'texel;
                    }
                    if e == 0.0 {
                        let (dx, dy) = (sign * (pos[q][0] - pos[p][0]), sign * (pos[q][1] - pos[p][1]));
                        if !(dy < 0.0 || (dy == 0.0 && dx > 0.0)) {
                            continue 'texel;
                        }
                    }
                    w[k] = e;
                }
                let total = w[0] + w[1] + w[2];
                let t = ty * size + tx;
                if owner[t] != usize::MAX {
                    return Err(Error::AtlasOverlap { x: tx, y: ty, first: owner[t], second: f });
                }
                owner[t] = f;
                let mut v = (attr[a] * w[0] + attr[b] * w[1] + attr[c] * w[2]) / total;
                if renormalize {
                    let len = v.norm();
                    if !(len > 0.0) {
                        return Err(Error::NonFinite(format!("interpolated normal at texel ({tx}, {ty})")));
                    }
                    v /= len;
                }
                data[t] = [v.x, v.y, v.z];
            }
        }
    }
    let covered: Vec<bool> = owner.iter().map(|&o| o != usize::MAX).collect();
    let mut valid = covered.clone();
    // Grow each pass from the previous pass's valid set: edge neighbours
    // first, then diagonals.
    let offsets: [(isize, isize); 8] = [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (1, -1), (-1, 1), (1, 1)];
    for _ in 0..SEAM_DILATION {
        let prev = valid.clone();
        let prev_data = data.clone();
        for y in 0..size {
            for x in 0..size {
                let t = y * size + x;
                if prev[t] {
                    continue;
                }
                for (dx, dy) in offsets {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= size as isize || ny >= size as isize {
                        continue;
                    }
                    let nt = ny as usize * size + nx as usize;
                    if prev[nt] {
                        data[t] = prev_data[nt];
                        valid[t] = true;
                        break;
                    }
                }
            }
        }
    }
    Ok(UvMap { size, data, valid, covered })
}

/// Posed 3-D positions baked into the atlas.
pub fn bake_positional_map(mesh: &Mesh, size: usize) -> Result<UvMap> {
    splat(mesh, size, &mesh.positions, false)
}

/// Interpolated, renormalized vertex normals baked into the atlas.
pub fn bake_normal_map(mesh: &Mesh, size: usize) -> Result<UvMap> {
    if mesh.normals.len() != mesh.num_vertices() {
        return Err(Error::invalid("normal map", "mesh normals missing"));
    }
    splat(mesh, size, &mesh.normals, true)
}

pub fn norm_kind(choice: NormChoice) -> NormKind {
    match choice {
        NormChoice::Instance => NormKind::Instance,
        NormChoice::Batch => NormKind::Batch,
    }
}

/// Encoder widths of the pose network.
pub const POSE_ENCODER_CHANNELS: [usize; 3] = [16, 32, 64];
pub const POSE_RES_BLOCKS: usize = 2;

/// Pose encoder (3 encoder, 2 residual, 3 decoder blocks) with a normal head
/// (2 decoder blocks from the bottleneck), plus both UV latents.
#[derive(Clone, Debug)]
pub struct PoseEncoder {
    pub z_geometry: ParamId,
    pub z_texture: ParamId,
    enc: Vec<EncoderBlock>,
    res: Vec<ResBlock>,
    dec: Vec<DecoderBlock>,
    normal_dec: Vec<DecoderBlock>,
    normal_out: Conv,
    pub uv_size: usize,
    pub geo_channels: usize,
    pub latent_channels: usize,
}

pub struct PoseFeatures {
    /// Geometric features `[1, geo, U, U]`.
    pub geometry: Var,
    /// Predicted UV normals `[1, 3, U, U]`.
    pub normals: Var,
    /// Geometric features followed by the texture latent.
    pub features: Var,
}

impl PoseEncoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (u, c) = (cfg.uv_size, cfg.latent_channels);
        let z_geometry = store.add(LATENT_GEOMETRY, Tensor::randn(&[1, c, u, u], cfg.latent_init, rng));
        let z_texture = store.add(LATENT_TEXTURE, Tensor::randn(&[1, c, u, u], cfg.latent_init, rng));
        let kind = norm_kind(cfg.norm);
        let [c1, c2, c3] = POSE_ENCODER_CHANNELS;
        let enc = vec![
            EncoderBlock::new(store, "pose.enc0", 3 + c, c1, kind, rng),
            EncoderBlock::new(store, "pose.enc1", c1, c2, kind, rng),
            EncoderBlock::new(store, "pose.enc2", c2, c3, kind, rng),
        ];
        let res = (0..POSE_RES_BLOCKS).map(|i| ResBlock::new(store, &format!("pose.res{i}"), c3, kind, rng)).collect();
        let dec = vec![
            DecoderBlock::new(store, "pose.dec0", c3, c2, kind, rng),
            DecoderBlock::new(store, "pose.dec1", c2, c1, kind, rng),
            DecoderBlock::new(store, "pose.dec2", c1, cfg.geo_channels, kind, rng),
        ];
        let normal_dec = vec![DecoderBlock::new(store, "normal.dec0", c3, c2, kind, rng), DecoderBlock::new(store, "normal.dec1", c2, c1, kind, rng)];
        let normal_out = Conv::new(store, "normal.out", c1, 3, 1, 1, 0, rng);
        PoseEncoder {
            z_geometry,
            z_texture,
            enc,
            res,
            dec,
            normal_dec,
            normal_out,
            uv_size: u,
            geo_channels: cfg.geo_channels,
            latent_channels: c,
        }
    }

    /// Channels of the assembled pose feature map.
    pub fn feature_channels(&self) -> usize {
        self.geo_channels + self.latent_channels
    }

    /// `posmap` is `[1, 3, U, U]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, posmap: Var) -> Result<PoseFeatures> {
        let u = self.uv_size;
        if tape.shape(posmap) != [1, 3, u, u] {
            return Err(Error::invalid("pose encoder", format!("positional map {:?}, expected [1, 3, {u}, {u}]", tape.shape(posmap))));
        }
        let x = tape.concat(&[posmap, p.var(self.z_geometry)], 1)?;
        let mut x = x;
        for b in &self.enc {
            x = b.forward(tape, p, x)?;
        }
        for b in &self.res {
            x = b.forward(tape, p, x)?;
        }
        let bottleneck = x;
        for b in &self.dec {
            x = b.forward(tape, p, x)?;
        }
        let geometry = x;
        let mut n = bottleneck;
        for b in &self.normal_dec {
            n = b.forward(tape, p, n)?;
        }
        let n = tape.relu(n);
        let n = self.normal_out.forward(tape, p, n)?;
        let n = tape.tanh(n);
        // Two decoders reach U/2; the last doubling is nearest-neighbour.
        let normals = tape.upsample_nearest(n, 2)?;
        let features = tape.concat(&[geometry, p.var(self.z_texture)], 1)?;
        Ok(PoseFeatures { geometry, normals, features })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::body::{build_toy_humanoid, default_limbs, PoseParams, ShapeParams, Tessellation};
    use crate::mesh::{plane, uv_sphere, UvRect};

    #[test]
    fn plane_bakes_to_affine_ramp() {
        let size = 32;
        let m = plane(2.0, 4).unwrap();
        let map = bake_positional_map(&m, size).unwrap();
        assert!(map.covered.iter().all(|&c| c));
        for y in 0..size {
            for x in 0..size {
                let (s, t) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
                let want = [(s - 0.5) * 2.0, (t - 0.5) * 2.0, 0.0];
                let got = map.data[y * size + x];
                for k in 0..3 {
                    assert!((got[k] - want[k]).abs() < 1e-6);
                }
            }
        }
        let normals = bake_normal_map(&m.with_normals().unwrap(), size).unwrap();
        assert!(normals.data.iter().all(|n| (n[2] - 1.0).abs() < 1e-12));
    }

    #[test]
    fn translation_shifts_every_texel() {
        let t = build_toy_humanoid(Tessellation::default(), &default_limbs()).unwrap();
        let m = t.pose(&PoseParams::identity(15), &ShapeParams::default()).unwrap();
        let shift = Vec3::new(0.3, -0.2, 0.7);
        let a = bake_positional_map(&m, 128).unwrap();
        let b = bake_positional_map(&m.translated(shift), 128).unwrap();
        assert_eq!(a.valid, b.valid);
        for (p, q) in a.data.iter().zip(&b.data).zip(&a.valid).filter(|(_, &v)| v).map(|(x, _)| x) {
            for k in 0..3 {
                assert!((q[k] - p[k] - shift[k]).abs() < 1e-12);
            }
        }
        // Seam dilation adds a ring around the charts.
        assert!(a.valid_count() > a.covered.iter().filter(|&&c| c).count());
    }

    #[test]
    fn sphere_normals_are_radial() {
        let m = uv_sphere(Vec3::zeros(), 1.0, 64, 32, UvRect { u0: 0.05, v0: 0.05, u1: 0.95, v1: 0.95 }).unwrap().with_normals().unwrap();
        let pos = bake_positional_map(&m, 128).unwrap();
        let nrm = bake_normal_map(&m, 128).unwrap();
        for t in 0..128 * 128 {
            if nrm.valid[t] {
                let n = Vec3::from(nrm.data[t]);
                assert!((n.norm() - 1.0).abs() < 1e-5);
                if nrm.covered[t] {
                    let e = (n - Vec3::from(pos.data[t]).normalize()).norm();
                    assert!(e < 2e-2, "texel {t} err {e} n {n:?} p {:?}", pos.data[t]);
                }
            }
        }
    }

    #[test]
    fn overlapping_atlas_is_rejected() {
        let a = plane(1.0, 1).unwrap();
        let b = a.translated(Vec3::new(0.0, 0.0, 1.0));
        let m = Mesh::merge(&[a, b]).unwrap();
        assert!(matches!(bake_positional_map(&m, 8), Err(Error::AtlasOverlap { .. })));
    }

    #[test]
    fn encoder_shapes_and_latent_gradient() {
        let cfg = ModelConfig { uv_size: 32, ..ModelConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let enc = PoseEncoder::new(&mut store, &cfg, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let pm = tape.constant(Tensor::randn(&[1, 3, 32, 32], 1.0, &mut rng));
        let out = enc.forward(&mut tape, &p, pm).unwrap();
        assert_eq!(tape.shape(out.geometry), &[1, 32, 32, 32]);
        assert_eq!(tape.shape(out.normals), &[1, 3, 32, 32]);
        assert_eq!(tape.shape(out.features), &[1, 48, 32, 32]);
        assert!(tape.value(out.features).all_finite());
        // The last channels are the texture latent itself.
        let tail = tape.slice(out.features, 1, 32, 16).unwrap();
        assert_eq!(tape.value(tail), store.get(enc.z_texture));
        let target = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
        let l = tape.l1_loss(out.normals, target).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(p.var(enc.z_geometry)).unwrap();
        assert!(g.max_abs() > 0.0);
    }
}
