//! Image-space pathway: neural textures rendered through the rasterized UV
//! map, the textural encoder, fusion with the volumetric features, and the
//! convolutional renderer producing the final image and mask.

use hvtr_tensor::{Bound, NormKind, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::config::FusionMode;
use crate::error::{Error, Result};
use crate::nn::{Conv, DecoderBlock, EncoderBlock, ResBlock};
use crate::raster::RasterOutput;

/// Sample `uv_map` `[1, C, U, U]` at every covered pixel of `raster`;
/// uncovered pixels are zero. Output `[1, C, H, W]`.
pub fn feature_render<T: Scalar>(tape: &mut Tape<T>, uv_map: Var, raster: &RasterOutput) -> Result<Var> {
    let shape = tape.shape(uv_map).to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::invalid("uv feature map", format!("{shape:?}, expected [1, C, U, U]")));
    }
    let pixels: Vec<usize> = (0..raster.mask.len()).filter(|&p| raster.mask[p]).collect();
    if pixels.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[1, shape[1], raster.height, raster.width])));
    }
    let coords = pixels.iter().flat_map(|&p| [T::from_f64(raster.uv[p][0]), T::from_f64(raster.uv[p][1])]).collect();
    let coords = tape.constant(Tensor::new(vec![pixels.len(), 2], coords)?);
    let flat = tape.reshape(uv_map, &shape[1..])?;
    let rows = tape.grid_sample_bilinear(flat, coords)?;
    Ok(tape.scatter_rows(rows, &pixels, raster.height, raster.width)?)
}

/// Channel width of textural encoder block `i` of `levels`.
fn texture_width(i: usize, levels: usize, out: usize) -> usize {
    if i + 1 == levels {
        out
    } else {
        (16 << i).min(out)
    }
}

/// `levels` stride-2 encoder blocks, so the output matches the radiance
/// field's resolution when `2^levels` is its downsampling factor.
#[derive(Clone, Debug)]
pub struct TextureEncoder {
    blocks: Vec<EncoderBlock>,
    pub out_channels: usize,
}

impl TextureEncoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cin: usize, levels: usize, out: usize, kind: NormKind, rng: &mut R) -> Result<Self> {
        if !(2..=4).contains(&levels) {
            return Err(Error::invalid("textural encoder", format!("{levels} levels; the downsampling factor must be 4, 8 or 16")));
        }
        let mut blocks = Vec::with_capacity(levels);
        let mut c = cin;
        for i in 0..levels {
            let o = texture_width(i, levels, out);
            blocks.push(EncoderBlock::new(store, &format!("tex.enc{i}"), c, o, kind, rng));
            c = o;
        }
        Ok(TextureEncoder { blocks, out_channels: out })
    }

    pub fn levels(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.blocks.iter().try_fold(x, |x, b| b.forward(tape, p, x))
    }
}

/// Blends lifted volumetric features `X` with textural features `Y`.
#[derive(Clone, Debug)]
pub enum Fusion {
    /// `M * X + (1 - M) * Y` with `M = sigmoid(g(X + Y))`.
    Gated { squeeze: Conv, expand: Conv },
    /// 1x1 convolution over `[X, Y]`.
    Concat { project: Conv },
}

impl Fusion {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, mode: FusionMode, channels: usize, gate: usize, rng: &mut R) -> Self {
        match mode {
            FusionMode::Aff => Fusion::Gated {
                squeeze: Conv::new(store, "fuse.squeeze", channels, gate, 1, 1, 0, rng),
                expand: Conv::new(store, "fuse.expand", gate, channels, 1, 1, 0, rng),
            },
            FusionMode::Concat => Fusion::Concat { project: Conv::new(store, "fuse.project", 2 * channels, channels, 1, 1, 0, rng) },
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, y: Var) -> Result<Var> {
        if tape.shape(x) != tape.shape(y) {
            return Err(Error::invalid("fusion", format!("volumetric {:?} vs textural {:?}", tape.shape(x), tape.shape(y))));
        }
        match self {
            Fusion::Gated { squeeze, expand } => {
                let s = tape.add(x, y)?;
                let g = squeeze.forward(tape, p, s)?;
                let g = tape.relu(g);
                let g = expand.forward(tape, p, g)?;
                let m = tape.sigmoid(g);
                // y + m * (x - y)
                let diff = tape.sub(x, y)?;
                let mx = tape.mul(m, diff)?;
                Ok(tape.add(y, mx)?)
            }
            Fusion::Concat { project } => {
                let xy = tape.concat(&[x, y], 1)?;
                project.forward(tape, p, xy)
            }
        }
    }
}

pub const RENDER_RES_BLOCKS: usize = 5;
pub const RENDER_DECODERS: usize = 4;
const RENDER_DECODER_WIDTHS: [usize; RENDER_DECODERS] = [64, 64, 32, 32];

/// Convolutional renderer: `4 - levels` encoders, five residual blocks and
/// four decoders, so the output is 16 times the bottleneck and exactly the
/// target resolution.
#[derive(Clone, Debug)]
pub struct TexRenderer {
    enc: Vec<EncoderBlock>,
    res: Vec<ResBlock>,
    dec: Vec<DecoderBlock>,
    rgb: Conv,
    mask: Conv,
}

impl TexRenderer {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cin: usize, levels: usize, kind: NormKind, rng: &mut R) -> Self {
        let down = 4 - levels;
        let mut enc = Vec::with_capacity(down);
        let mut c = cin;
        for i in 0..down {
            enc.push(EncoderBlock::new(store, &format!("render.enc{i}"), c, 2 * cin, kind, rng));
            c = 2 * cin;
        }
        let res = (0..RENDER_RES_BLOCKS).map(|i| ResBlock::new(store, &format!("render.res{i}"), c, kind, rng)).collect();
        let mut dec = Vec::with_capacity(RENDER_DECODERS);
        for (i, &o) in RENDER_DECODER_WIDTHS.iter().enumerate() {
            dec.push(DecoderBlock::new(store, &format!("render.dec{i}"), c, o, kind, rng));
            c = o;
        }
        let rgb = Conv::new(store, "render.rgb", c, 3, 3, 1, 1, rng);
        let mask = Conv::new(store, "render.mask", c, 1, 3, 1, 1, rng);
        TexRenderer { enc, res, dec, rgb, mask }
    }

    /// Image `[1, 3, H, W]` and mask `[1, 1, H, W]`, both in `[0, 1]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let mut x = x;
        for b in &self.enc {
            x = b.forward(tape, p, x)?;
        }
        for b in &self.res {
            x = b.forward(tape, p, x)?;
        }
        for b in &self.dec {
            x = b.forward(tape, p, x)?;
        }
        let x = tape.relu(x);
        let rgb = self.rgb.forward(tape, p, x)?;
        let mask = self.mask.forward(tape, p, x)?;
        Ok((tape.sigmoid(rgb), tape.sigmoid(mask)))
    }
}

/// Textural encoder, fusion and renderer. Either branch may be absent.
#[derive(Clone, Debug)]
pub struct HybridRenderer {
    pub texture: Option<TextureEncoder>,
    /// 1x1 lift of the volumetric features to the textural width.
    pub lift: Option<Conv>,
    pub fusion: Option<Fusion>,
    pub renderer: TexRenderer,
    pub channels: usize,
    pub levels: usize,
}

pub struct HybridOutput {
    pub textural: Option<Var>,
    pub volumetric: Option<Var>,
    pub fused: Var,
    pub image: Var,
    pub mask: Var,
}

#[allow(clippy::too_many_arguments)]
impl HybridRenderer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        feature_in: Option<usize>,
        volume_in: Option<usize>,
        channels: usize,
        levels: usize,
        fusion: FusionMode,
        gate: usize,
        kind: NormKind,
        rng: &mut R,
    ) -> Result<Self> {
        if feature_in.is_none() && volume_in.is_none() {
            return Err(Error::invalid("hybrid renderer", "needs at least one branch"));
        }
        let texture = feature_in.map(|c| TextureEncoder::new(store, c, levels, channels, kind, rng)).transpose()?;
        let lift = volume_in.map(|c| Conv::new(store, "fuse.lift", c, channels, 1, 1, 0, rng));
        let fusion = (texture.is_some() && lift.is_some()).then(|| Fusion::new(store, fusion, channels, gate, rng));
        let renderer = TexRenderer::new(store, channels, levels, kind, rng);
        Ok(HybridRenderer { texture, lift, fusion, renderer, channels, levels })
    }

    /// `features` is the image-space neural texture `[1, C, H, W]`, `volume`
    /// the volumetric feature image `[1, c, H/S, W/S]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, features: Option<Var>, volume: Option<Var>) -> Result<HybridOutput> {
        let full = match (features, volume) {
            (Some(f), _) => tape.shape(f)[2..].to_vec(),
            (None, Some(v)) => tape.shape(v)[2..].iter().map(|d| d << self.levels).collect(),
            (None, None) => return Err(Error::invalid("hybrid renderer", "no inputs")),
        };
        let textural = match (&self.texture, features) {
            (Some(enc), Some(f)) => Some(enc.forward(tape, p, f)?),
            (None, None) => None,
            _ => return Err(Error::invalid("hybrid renderer", "textural input does not match the configured branches")),
        };
        let volumetric = match (&self.lift, volume) {
            (Some(lift), Some(v)) => Some(lift.forward(tape, p, v)?),
            (None, None) => None,
            _ => return Err(Error::invalid("hybrid renderer", "volumetric input does not match the configured branches")),
        };
        let low: Vec<usize> = full.iter().map(|d| d >> self.levels).collect();
        for v in [textural, volumetric].into_iter().flatten() {
            if tape.shape(v)[2..] != low[..] || tape.shape(v)[1] != self.channels {
                return Err(Error::invalid("hybrid renderer", format!("branch features {:?}, expected [1, {}, {low:?}]", tape.shape(v), self.channels)));
            }
        }
        let fused = match (&self.fusion, volumetric, textural) {
            (Some(f), Some(x), Some(y)) => f.forward(tape, p, x, y)?,
            (_, Some(x), None) => x,
            (_, None, Some(y)) => y,
            _ => unreachable!("branch presence checked above"),
        };
        let (image, mask) = self.renderer.forward(tape, p, fused)?;
        if tape.shape(image)[2..] != full[..] {
            return Err(Error::invalid("hybrid renderer", format!("rendered {:?}, expected {full:?}", tape.shape(image))));
        }
        Ok(HybridOutput { textural, volumetric, fused, image, mask })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::raster::RasterStats;

    fn raster_with(uv: Vec<[f64; 2]>, mask: Vec<bool>, w: usize, h: usize) -> RasterOutput {
        let n = w * h;
        RasterOutput {
            width: w,
            height: h,
            uv,
            depth: vec![1.0; n],
            normal: vec![[0.0; 3]; n],
            mask,
            face_id: vec![0; n],
            bary: vec![[0.0; 3]; n],
            stats: RasterStats::default(),
        }
    }

    #[test]
    fn constant_texture_fills_the_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (w, h) = (6, 5);
        let uv = (0..w * h).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
        let mask: Vec<bool> = (0..w * h).map(|p| p % 3 != 0).collect();
        let r = raster_with(uv, mask.clone(), w, h);
        let mut tape = Tape::<f64>::new();
        let tex = tape.constant(Tensor::full(&[1, 2, 8, 8], 0.7));
        let img = feature_render(&mut tape, tex, &r).unwrap();
        let v = tape.value(img).data();
        for c in 0..2 {
            for p in 0..w * h {
                assert_eq!(v[c * w * h + p], if mask[p] { 0.7 } else { 0.0 });
            }
        }
    }

    #[test]
    fn texel_spike_stays_in_its_footprint() {
        let u = 8;
        let (tx, ty) = (3, 5);
        let grid = 24;
        let uv: Vec<[f64; 2]> = (0..grid * grid).map(|p| [((p % grid) as f64 + 0.5) / grid as f64, ((p / grid) as f64 + 0.5) / grid as f64]).collect();
        let r = raster_with(uv.clone(), vec![true; grid * grid], grid, grid);
        let mut spike = Tensor::<f64>::zeros(&[1, 1, u, u]);
        spike.data_mut()[ty * u + tx] = 1.0;
        let mut tape = Tape::new();
        let tex = tape.constant(spike);
        let img = feature_render(&mut tape, tex, &r).unwrap();
        for (p, &v) in tape.value(img).data().iter().enumerate() {
            // Bilinear footprint: texel centres within one texel on both axes.
            let (x, y) = (uv[p][0] * u as f64 - 0.5, uv[p][1] * u as f64 - 0.5);
            let inside = (x - tx as f64).abs() < 1.0 && (y - ty as f64).abs() < 1.0;
            assert_eq!(v > 0.0, inside, "pixel {p}");
        }
    }

    #[test]
    fn zero_gate_averages_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let f = Fusion::new(&mut store, FusionMode::Aff, 4, 2, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let s = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&s)).unwrap();
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let xv = Tensor::randn(&[1, 4, 3, 3], 1.0, &mut rng);
        let yv = Tensor::randn(&[1, 4, 3, 3], 1.0, &mut rng);
        let (x, y) = (tape.constant(xv.clone()), tape.constant(yv.clone()));
        let out = f.forward(&mut tape, &p, x, y).unwrap();
        for ((o, a), b) in tape.value(out).data().iter().zip(xv.data()).zip(yv.data()) {
            assert!((o - (a + b) / 2.0).abs() < 1e-12);
        }
        let z = tape.constant(Tensor::zeros(&[1, 4, 2, 3]));
        assert!(f.forward(&mut tape, &p, x, z).is_err());
    }

    #[test]
    fn identity_concat_projection_passes_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let f = Fusion::new(&mut store, FusionMode::Concat, 3, 2, &mut rng);
        let w = store.id("fuse.project.weight").unwrap();
        store.set(w, Tensor::from_fn(&[3, 6, 1, 1], |i| if i / 6 == i % 6 { 1.0 } else { 0.0 })).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| true);
        let xv = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng);
        let x = tape.constant(xv.clone());
        let y = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let out = f.forward(&mut tape, &p, x, y).unwrap();
        assert_eq!(tape.value(out), &xv);
    }

    #[test]
    fn output_matches_target_resolution_for_every_factor() {
        for (s, levels) in [(4, 2), (8, 3), (16, 4)] {
            let mut rng = ChaCha8Rng::seed_from_u64(s as u64);
            let mut store = ParamStore::<f32>::new();
            let r = HybridRenderer::new(&mut store, Some(5), Some(4), 16, levels, FusionMode::Aff, 4, NormKind::Instance, &mut rng).unwrap();
            assert_eq!(r.texture.as_ref().unwrap().levels(), levels);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, |_| true);
            let f = tape.constant(Tensor::randn(&[1, 5, 64, 64], 1.0, &mut rng));
            let v = tape.constant(Tensor::randn(&[1, 4, 64 / s, 64 / s], 1.0, &mut rng));
            let out = r.forward(&mut tape, &p, Some(f), Some(v)).unwrap();
            assert_eq!(tape.shape(out.fused), &[1, 16, 64 / s, 64 / s]);
            assert_eq!(tape.shape(out.image), &[1, 3, 64, 64]);
            assert_eq!(tape.shape(out.mask), &[1, 1, 64, 64]);
            let all = tape.value(out.image).data().iter().chain(tape.value(out.mask).data());
            assert!(all.into_iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(TextureEncoder::new(&mut store, 3, 5, 8, NormKind::Instance, &mut rng).is_err());
    }
}
