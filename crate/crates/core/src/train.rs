//! Losses, the multi-scale patch discriminator, the end-to-end training step
//! with checkpointing, and evaluation.

use std::io::Write;
use std::path::Path;

use hvtr_tensor::{AdamConfig, AdamState, Bound, Checkpoint, NormKind, ParamStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{build_toy_humanoid, default_limbs, PoseParams, ShapeParams, SkinnedTemplate, Tessellation, NUM_SHAPE};
use crate::camera::Camera;
use crate::config::{LossWeights, RunConfig};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::imageio::ImageF32;
use crate::metrics::{mask_iou, mean_std, psnr, ssim};
use crate::model::{prepare_samples, Avatar, AvatarOutput, FrameGeometry};
use crate::pdnerf::{FieldInputs, RaySamples};
use crate::nn::{Conv, Norm};

/// Mean squared error of the first three feature channels against the
/// downsampled target, over hit pixels only.
pub fn loss_vol<T: Scalar>(tape: &mut Tape<T>, features: Var, target: &Tensor<T>, hit: &Tensor<T>) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 4 || target.shape() != [1, 3, shape[2], shape[3]] || hit.shape() != [1, 1, shape[2], shape[3]] {
        return Err(Error::invalid(
            "volume loss",
            format!("features {shape:?}, target {:?}, hit mask {:?}", target.shape(), hit.shape()),
        ));
    }
    let rgb = tape.slice(features, 1, 0, 3)?;
    let plane = hit.numel();
    let w = Tensor::from_fn(target.shape(), |i| hit.data()[i % plane]);
    let t = tape.constant(target.clone());
    Ok(tape.mse_loss_weighted(rgb, t, &w)?)
}

/// Mean L1 over valid texels.
pub fn loss_norm<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, valid: &Tensor<T>) -> Result<Var> {
    let t = tape.constant(target.clone());
    Ok(tape.l1_loss_weighted(pred, t, valid)?)
}

pub const PYRAMID_LEVELS: usize = 3;

/// Sum over a three-level smoothing pyramid of the mean L1 difference.
pub fn loss_feat_proxy<T: Scalar>(tape: &mut Tape<T>, image: Var, target: &Tensor<T>) -> Result<Var> {
    let mut a = image;
    let mut b = tape.constant(target.clone());
    let mut total = tape.l1_loss(a, b)?;
    for _ in 1..PYRAMID_LEVELS {
        a = tape.pyramid_down(a)?;
        b = tape.pyramid_down(b)?;
        let l = tape.l1_loss(a, b)?;
        total = tape.add(total, l)?;
    }
    Ok(total)
}

pub fn loss_l1<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let t = tape.constant(target.clone());
    Ok(tape.l1_loss(pred, t)?)
}

/// Least-squares GAN term `mean((out - target)^2)`.
pub fn lsgan<T: Scalar>(tape: &mut Tape<T>, out: Var, target: f64) -> Result<Var> {
    let t = tape.constant(Tensor::full(tape.shape(out), T::from_f64(target)));
    Ok(tape.mse_loss(out, t)?)
}

pub const LOSS_NAMES: [&str; 7] = ["vol", "norm", "feat", "mask", "pix", "adv", "face"];

/// Weighted sum of the loss parts in [`LOSS_NAMES`] order; the face term
/// never contributes.
pub fn total_loss(parts: &[f64; 7], w: &LossWeights) -> f64 {
    parts.iter().zip(w.as_array()).take(6).map(|(p, w)| p * w).sum()
}

pub const DISC_SCALES: usize = 2;
const DISC_WIDTHS: [usize; 3] = [16, 32, 64];

/// Patch discriminator: three stride-2 4x4 blocks with leaky ReLU, instance
/// norm on all but the first, and a 3x3 one-channel output.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    convs: Vec<Conv>,
    norms: Vec<Option<Norm>>,
    out: Conv,
}

impl PatchDiscriminator {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, rng: &mut R) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut c = cin;
        for (i, &o) in DISC_WIDTHS.iter().enumerate() {
            convs.push(Conv::new(store, &format!("{name}.conv{i}"), c, o, 4, 2, 1, rng));
            norms.push((i > 0).then(|| Norm::new(store, &format!("{name}.norm{i}"), o, NormKind::Instance)));
            c = o;
        }
        let out = Conv::new(store, &format!("{name}.out"), c, 1, 3, 1, 1, rng);
        PatchDiscriminator { convs, norms, out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut x = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            x = conv.forward(tape, p, x)?;
            if let Some(n) = norm {
                x = n.forward(tape, p, x)?;
            }
            x = tape.leaky_relu(x, 0.2);
        }
        self.out.forward(tape, p, x)
    }
}

/// Patch discriminators at full and half resolution.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub scales: Vec<PatchDiscriminator>,
}

impl Discriminator {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cin: usize, rng: &mut R) -> Self {
        Discriminator { scales: (0..DISC_SCALES).map(|s| PatchDiscriminator::new(store, &format!("disc{s}"), cin, rng)).collect() }
    }

    /// Patch scores per scale for `image` conditioned on `features`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, image: Var, features: Var) -> Result<Vec<Var>> {
        let mut x = tape.concat(&[image, features], 1)?;
        let mut out = Vec::with_capacity(self.scales.len());
        for (s, d) in self.scales.iter().enumerate() {
            if s > 0 {
                x = tape.area_downsample(x, 2)?;
            }
            out.push(d.forward(tape, p, x)?);
        }
        Ok(out)
    }
}

/// Generator and discriminator adversarial terms from per-scale scores.
pub fn adversarial<T: Scalar>(tape: &mut Tape<T>, fake: &[Var], real: Option<&[Var]>) -> Result<(Var, Option<Var>)> {
    let mut gen = None;
    let mut disc = None;
    for (s, &f) in fake.iter().enumerate() {
        let g = lsgan(tape, f, 1.0)?;
        gen = Some(match gen {
            Some(acc) => tape.add(acc, g)?,
            None => g,
        });
        if let Some(real) = real {
            let r = lsgan(tape, real[s], 1.0)?;
            let f0 = lsgan(tape, f, 0.0)?;
            let rf = tape.add(r, f0)?;
            let d = tape.scale(rf, 0.5);
            disc = Some(match disc {
                Some(acc) => tape.add(acc, d)?,
                None => d,
            });
        }
    }
    let gen = gen.ok_or_else(|| Error::invalid("adversarial loss", "no discriminator scales"))?;
    Ok((gen, disc))
}

/// Loss values of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub vol: f64,
    pub norm: f64,
    pub feat: f64,
    pub mask: f64,
    pub pix: f64,
    pub adv: f64,
    pub disc: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn parts(&self) -> [f64; 7] {
        [self.vol, self.norm, self.feat, self.mask, self.pix, self.adv, 0.0]
    }

    fn to_row(&self) -> [f64; 9] {
        [self.iter as f64, self.vol, self.norm, self.feat, self.mask, self.pix, self.adv, self.disc, self.total]
    }

    fn from_row(r: &[f64]) -> Self {
        LossRecord { iter: r[0] as usize, vol: r[1], norm: r[2], feat: r[3], mask: r[4], pix: r[5], adv: r[6], disc: r[7], total: r[8] }
    }
}

fn adam(cfg: &RunConfig, lr: f64) -> AdamConfig {
    AdamConfig { lr, beta1: cfg.optim.beta1, beta2: cfg.optim.beta2, eps: cfg.optim.eps }
}

/// Parameters of a generator built from `cfg`, optionally filled from a
/// checkpoint.
pub fn build_generator(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<(Avatar, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let model = Avatar::new(&mut store, cfg, rng)?;
    Ok((model, store))
}

fn fill_store(store: &mut ParamStore<f32>, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = format!("{prefix}/{}", store.name(id));
        let t: Tensor<f32> = ckpt.tensor(&name)?;
        store.set(id, t)?;
    }
    Ok(())
}

/// Ground truth for one view in tensor form.
pub struct Targets<T> {
    /// `[1, 3, H, W]`
    pub image: Tensor<T>,
    /// `[1, 1, H, W]`
    pub mask: Tensor<T>,
    /// Area-downsampled image at the field's resolution.
    pub low: Tensor<T>,
    /// Discriminator conditioning to use instead of the detached feature
    /// image. Finite-difference checks pin it so that both sides see the
    /// same stop-gradient function.
    pub frozen_condition: Option<Tensor<T>>,
}

impl<T: Scalar> Targets<T> {
    pub fn new(image: &ImageF32, mask: &ImageF32, downsample: usize) -> Result<Self> {
        Ok(Targets {
            image: image.to_tensor().cast(),
            mask: mask.to_tensor().cast(),
            low: image.area_downsample(downsample)?.to_tensor().cast(),
            frozen_condition: None,
        })
    }
}

pub struct GeneratorLoss {
    /// Unweighted active terms, named as in [`LOSS_NAMES`].
    pub terms: Vec<(&'static str, Var)>,
    pub total: Var,
    pub output: AvatarOutput,
}

/// Forward pass plus every active generator loss term and their weighted
/// sum. The discriminator only scores; its conditioning features are
/// detached.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    model: &Avatar,
    disc: Option<(&Discriminator, &Bound)>,
    geo: &FrameGeometry,
    samples: Option<(&RaySamples, &FieldInputs<T>)>,
    targets: &Targets<T>,
    w: &LossWeights,
) -> Result<GeneratorLoss> {
    let out = model.forward(tape, p, geo, samples)?;
    let mut terms = Vec::new();
    if let Some(vol) = &out.volume {
        terms.push(("vol", loss_vol(tape, vol.features, &targets.low, &geo.hit_mask().cast())?));
    }
    terms.push(("norm", loss_norm(tape, out.pose.normals, &geo.normals.cast(), &geo.normal_weights.cast())?));
    if let (Some(h), Some(fi)) = (&out.hybrid, out.feature_image) {
        terms.push(("feat", loss_feat_proxy(tape, h.image, &targets.image)?));
        terms.push(("mask", loss_l1(tape, h.mask, &targets.mask)?));
        terms.push(("pix", loss_l1(tape, h.image, &targets.image)?));
        if let Some((d, dp)) = disc {
            let cond = match &targets.frozen_condition {
                Some(c) => tape.constant(c.clone()),
                None => tape.detach(fi),
            };
            let scores = d.forward(tape, dp, h.image, cond)?;
            terms.push(("adv", adversarial(tape, &scores, None)?.0));
        }
    }
    let weights = w.as_array();
    let mut total: Option<Var> = None;
    for &(name, v) in &terms {
        let k = LOSS_NAMES.iter().position(|n| *n == name).expect("known loss name");
        let s = tape.scale(v, weights[k]);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("normal loss is always active");
    Ok(GeneratorLoss { terms, total, output: out })
}

/// Everything needed to continue training bit-exactly.
pub struct Trainer {
    pub cfg: RunConfig,
    pub data: Dataset,
    pub template: SkinnedTemplate,
    pub shape: ShapeParams,
    pub model: Avatar,
    pub store: ParamStore<f32>,
    pub disc: Option<Discriminator>,
    pub disc_store: ParamStore<f32>,
    pub opt: AdamState<f32>,
    pub disc_opt: AdamState<f32>,
    trainable: Vec<bool>,
    pub iteration: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pub trace: Vec<LossRecord>,
}

/// Tensors kept from the last step for inspection.
pub struct StepImages {
    pub image: Option<Tensor<f32>>,
    pub volume_rgb: Option<Tensor<f32>>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        let n = data.manifest.image_size;
        if !n.is_multiple_of(cfg.render.downsample) {
            return Err(Error::Config(format!("image size {n} is not a multiple of render.downsample {}", cfg.render.downsample)));
        }
        if cfg.train.mode.uses_renderer() && !n.is_multiple_of(16) {
            return Err(Error::Config(format!("image size {n} must be a multiple of 16 for the image renderer")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let (model, store) = build_generator(&cfg, &mut rng)?;
        let mut disc_store = ParamStore::new();
        let disc = model.hybrid.as_ref().map(|_| Discriminator::new(&mut disc_store, 3 + model.pose.feature_channels(), &mut rng));
        let trainable_ids = model.trainable(&store);
        let trainable = store.ids().map(|id| trainable_ids.contains(&id)).collect();
        let opt = AdamState::new(adam(&cfg, cfg.optim.lr), &store);
        let disc_opt = AdamState::new(adam(&cfg, cfg.optim.disc_lr), &disc_store);
        let order = data.shuffled(Split::Train, cfg.train.seed);
        if order.is_empty() {
            return Err(Error::data(&data.root, "dataset has no training views"));
        }
        Ok(Trainer {
            template: data.template()?,
            shape: data.shape()?,
            cfg,
            data,
            model,
            store,
            disc,
            disc_store,
            opt,
            disc_opt,
            trainable,
            iteration: 0,
            rng,
            order,
            trace: Vec::new(),
        })
    }

    /// Restore from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: &Path, data: Dataset) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        let cfg = RunConfig::from_toml(ckpt.meta("config")?)?;
        let mut t = Trainer::new(cfg, data)?;
        fill_store(&mut t.store, &ckpt, "gen")?;
        fill_store(&mut t.disc_store, &ckpt, "disc")?;
        let moments = |store: &ParamStore<f32>, tag: &str| -> Result<Vec<Tensor<f32>>> {
            store.ids().map(|id| Ok(ckpt.tensor(&format!("{tag}/{}", store.name(id)))?)).collect()
        };
        let parse = |key: &str| -> Result<u128> { ckpt.meta(key)?.parse::<u128>().map_err(|e| Error::Config(format!("checkpoint {key}: {e}"))) };
        t.opt.restore(parse("gen_adam_step")? as u64, moments(&t.store, "gen.m")?, moments(&t.store, "gen.v")?)?;
        t.disc_opt.restore(parse("disc_adam_step")? as u64, moments(&t.disc_store, "disc.m")?, moments(&t.disc_store, "disc.v")?)?;
        t.iteration = parse("iteration")? as usize;
        t.rng.set_word_pos(parse("rng_word_pos")?);
        if t.iteration > 0 {
            let trace: Tensor<f64> = ckpt.tensor("trace")?;
            t.trace = trace.data().chunks(9).map(LossRecord::from_row).collect();
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("config", self.cfg.to_toml());
        ckpt.set_meta("iteration", self.iteration);
        ckpt.set_meta("tessellation", serde_json::to_string(&self.data.manifest.tessellation).expect("tessellation serializes"));
        ckpt.set_meta("shape", serde_json::to_string(&self.data.manifest.shape).expect("shape serializes"));
        ckpt.set_meta("rng_seed", self.cfg.train.seed);
        ckpt.set_meta("rng_word_pos", self.rng.get_word_pos());
        ckpt.set_meta("gen_adam_step", self.opt.step_count());
        ckpt.set_meta("disc_adam_step", self.disc_opt.step_count());
        for (store, opt, tag) in [(&self.store, &self.opt, "gen"), (&self.disc_store, &self.disc_opt, "disc")] {
            for id in store.ids() {
                let name = store.name(id);
                ckpt.insert(format!("{tag}/{name}"), store.get(id));
                let (m, v) = opt.moments(id);
                ckpt.insert(format!("{tag}.m/{name}"), m);
                ckpt.insert(format!("{tag}.v/{name}"), v);
            }
        }
        if !self.trace.is_empty() {
            let rows: Vec<f64> = self.trace.iter().flat_map(|r| r.to_row()).collect();
            ckpt.insert("trace", &Tensor::new(vec![self.trace.len(), 9], rows)?);
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(ckpt.write(path)?)
    }

    /// View used at iteration `it`.
    pub fn view_at(&self, it: usize) -> usize {
        self.order[it % self.order.len()]
    }

    /// One generator update followed by one discriminator update. On a
    /// non-finite loss or gradient nothing is modified.
    pub fn step(&mut self) -> Result<LossRecord> {
        let it = self.iteration;
        let sample = self.data.load(self.view_at(it))?;
        let geo = FrameGeometry::new(&self.template, &sample.pose, &self.shape, &sample.camera, &self.cfg)?;
        let mut rng = self.rng.clone();
        let samples = match &self.model.field {
            Some(f) => Some(prepare_samples::<f32, _>(f, &geo, self.cfg.render.samples, Some(&mut rng))?),
            None => None,
        };
        let targets = Targets::new(&sample.image, &sample.mask, self.cfg.render.downsample)?;
        let mut tape = Tape::new();
        let trainable = &self.trainable;
        let p = self.store.bind(&mut tape, |id| trainable[id.0]);
        let dp = self.disc_store.bind(&mut tape, |_| false);
        let disc = self.disc.as_ref().map(|d| (d, &dp));
        let g = generator_loss(&mut tape, &p, &self.model, disc, &geo, samples.as_ref().map(|(s, i)| (s, i)), &targets, &self.cfg.loss)?;

        let mut rec = LossRecord { iter: it, ..LossRecord::default() };
        for &(name, v) in &g.terms {
            let value = tape.value(v).item().to_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("{name} loss at iteration {it}")));
            }
            match name {
                "vol" => rec.vol = value,
                "norm" => rec.norm = value,
                "feat" => rec.feat = value,
                "mask" => rec.mask = value,
                "pix" => rec.pix = value,
                _ => rec.adv = value,
            }
        }
        let total = g.total;
        let fake = match (&g.output.hybrid, g.output.feature_image) {
            (Some(h), Some(fi)) => Some((tape.value(h.image).clone(), tape.value(fi).clone(), targets.image)),
            _ => None,
        };
        rec.total = tape.value(total).item().to_f64();
        tape.backward(total)?;
        let grads = self.store.grads(&mut tape, &p);
        drop(tape);

        // Discriminator pass before any state changes, so a failure leaves
        // the trainer untouched.
        let disc_update = match (&self.disc, fake) {
            (Some(d), Some((image, features, gt))) => {
                let mut tape = Tape::new();
                let dp = self.disc_store.bind(&mut tape, |_| true);
                let f_img = tape.constant(image);
                let cond = tape.constant(features);
                let real = tape.constant(gt);
                let fake_scores = d.forward(&mut tape, &dp, f_img, cond)?;
                let real_scores = d.forward(&mut tape, &dp, real, cond)?;
                let (_, loss) = adversarial(&mut tape, &fake_scores, Some(&real_scores))?;
                let loss = loss.expect("real scores given");
                rec.disc = tape.value(loss).item().to_f64();
                if !rec.disc.is_finite() {
                    return Err(Error::NonFinite(format!("discriminator loss at iteration {it}")));
                }
                tape.backward(loss)?;
                Some(self.disc_store.grads(&mut tape, &dp))
            }
            _ => None,
        };
        for (id, g) in self.store.ids().zip(&grads) {
            if g.as_ref().is_some_and(|g| !g.all_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} at iteration {it}", self.store.name(id))));
            }
        }
        if let Some(dg) = &disc_update {
            for (id, g) in self.disc_store.ids().zip(dg) {
                if g.as_ref().is_some_and(|g| !g.all_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {} at iteration {it}", self.disc_store.name(id))));
                }
            }
        }
        self.opt.step(&mut self.store, &grads)?;
        if let Some(dg) = disc_update {
            self.disc_opt.step(&mut self.disc_store, &dg)?;
        }
        self.rng = rng;
        self.iteration += 1;
        self.trace.push(rec.clone());
        Ok(rec)
    }
}

/// Append-only JSON-lines loss log.
pub struct LossLog {
    file: std::fs::File,
}

impl LossLog {
    /// Open `path`, keeping exactly the records of `trace`.
    pub fn create(path: &Path, trace: &[LossRecord]) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        for r in trace {
            writeln!(file, "{}", serde_json::to_string(r).expect("record serializes"))?;
        }
        Ok(LossLog { file })
    }

    pub fn append(&mut self, r: &LossRecord) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(r).expect("record serializes"))?;
        Ok(())
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

/// Train until `iterations` total steps, writing checkpoints and the loss
/// log into `out`. `on_step` sees every record.
pub fn run_training(trainer: &mut Trainer, out: &Path, mut on_step: impl FnMut(&LossRecord)) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(CONFIG_ECHO_FILE), trainer.cfg.to_toml())?;
    let mut log = LossLog::create(&out.join(LOSS_LOG_FILE), &trainer.trace)?;
    let every = trainer.cfg.train.checkpoint_every;
    while trainer.iteration < trainer.cfg.train.iterations {
        let rec = trainer.step()?;
        log.append(&rec)?;
        on_step(&rec);
        if every > 0 && trainer.iteration.is_multiple_of(every) && trainer.iteration < trainer.cfg.train.iterations {
            trainer.save(&out.join(CHECKPOINT_FILE))?;
        }
    }
    trainer.save(&out.join(CHECKPOINT_FILE))
}

/// A trained generator ready for inference.
pub struct Renderer {
    pub cfg: RunConfig,
    pub model: Avatar,
    pub store: ParamStore<f32>,
    /// Body the model was trained on.
    pub template: SkinnedTemplate,
    pub shape: ShapeParams,
}

pub struct Rendered {
    pub image: Option<ImageF32>,
    pub mask: Option<ImageF32>,
    /// Reduced-resolution field colour and alpha.
    pub volume_rgb: Option<ImageF32>,
    pub volume_alpha: Option<ImageF32>,
    /// Pixels covered by the rasterized body.
    pub coverage: usize,
}

impl Renderer {
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        let cfg = RunConfig::from_toml(ckpt.meta("config")?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let (model, mut store) = build_generator(&cfg, &mut rng)?;
        fill_store(&mut store, &ckpt, "gen")?;
        let json_meta = |key: &str| -> Result<serde_json::Value> {
            serde_json::from_str(ckpt.meta(key)?).map_err(|e| Error::data(path, format!("checkpoint {key}: {e}")))
        };
        let tess: Tessellation = serde_json::from_value(json_meta("tessellation")?).map_err(|e| Error::data(path, e))?;
        let betas: [f64; NUM_SHAPE] = serde_json::from_value(json_meta("shape")?).map_err(|e| Error::data(path, e))?;
        let template = build_toy_humanoid(tess, &default_limbs())?;
        Ok(Renderer { cfg, model, store, template, shape: ShapeParams::new(betas)? })
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        Renderer {
            cfg: t.cfg.clone(),
            model: t.model.clone(),
            store: t.store.clone(),
            template: t.template.clone(),
            shape: t.shape.clone(),
        }
    }

    /// Deterministic render with stratum-midpoint samples. `shape` falls
    /// back to the training body.
    pub fn render(&self, pose: &PoseParams, shape: Option<&ShapeParams>, camera: &Camera) -> Result<Rendered> {
        let geo = FrameGeometry::new(&self.template, pose, shape.unwrap_or(&self.shape), camera, &self.cfg)?;
        self.render_geometry(&geo)
    }

    pub fn render_geometry(&self, geo: &FrameGeometry) -> Result<Rendered> {
        let samples = match &self.model.field {
            Some(f) => Some(prepare_samples::<f32, ChaCha8Rng>(f, geo, self.cfg.render.samples, None)?),
            None => None,
        };
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, |_| false);
        let out = self.model.forward(&mut tape, &p, geo, samples.as_ref().map(|(s, i)| (s, i)))?;
        let (mut volume_rgb, mut volume_alpha) = (None, None);
        if let Some(v) = &out.volume {
            let rgb = tape.slice(v.features, 1, 0, 3)?;
            volume_rgb = Some(ImageF32::from_tensor(tape.value(rgb))?);
            volume_alpha = Some(ImageF32::from_tensor(tape.value(v.alpha))?);
        }
        let img = |v: Var| ImageF32::from_tensor(tape.value(v));
        let (image, mask) = match &out.hybrid {
            Some(h) => (Some(img(h.image)?), Some(img(h.mask)?)),
            None => (None, None),
        };
        for i in [&image, &mask, &volume_rgb, &volume_alpha].into_iter().flatten() {
            if i.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("rendered image".into()));
            }
        }
        Ok(Rendered { image, mask, volume_rgb, volume_alpha, coverage: geo.raster.covered() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub view: usize,
    pub frame: usize,
    pub camera: usize,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub mask_iou: Option<f64>,
    /// Field colour against the area-downsampled ground truth.
    pub volume_psnr: Option<f64>,
    /// Volume loss over hit pixels with midpoint samples.
    pub volume_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub views: usize,
    pub rows: Vec<EvalRow>,
    pub psnr: Option<Aggregate>,
    pub ssim: Option<Aggregate>,
    pub mask_iou: Option<Aggregate>,
    pub volume_psnr: Option<Aggregate>,
    pub volume_loss: Option<Aggregate>,
}

/// Hit-masked colour error, the inference-time counterpart of [`loss_vol`].
fn masked_mse(pred: &ImageF32, target: &ImageF32, hit: &[bool]) -> Option<f64> {
    let c = pred.channels;
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, _) in hit.iter().enumerate().filter(|(_, h)| **h) {
        for ch in 0..c {
            sum += (pred.data[p * c + ch] as f64 - target.data[p * c + ch] as f64).powi(2);
        }
        n += c;
    }
    (n > 0).then(|| sum / n as f64)
}

fn aggregate(rows: &[EvalRow], f: impl Fn(&EvalRow) -> Option<f64>) -> Option<Aggregate> {
    let v: Vec<f64> = rows.iter().filter_map(f).collect();
    (!v.is_empty()).then(|| {
        let (mean, std) = mean_std(&v);
        Aggregate { mean, std }
    })
}

/// Metrics over `views` of `data` (a whole split when `views` is `None`).
pub fn evaluate(r: &Renderer, data: &Dataset, split: Split, views: Option<&[usize]>) -> Result<EvalReport> {
    let all = data.split(split);
    let views = views.unwrap_or(&all);
    let mut rows = Vec::with_capacity(views.len());
    for &v in views {
        let s = data.load(v)?;
        let geo = FrameGeometry::new(&r.template, &s.pose, &data.shape()?, &s.camera, &r.cfg)?;
        let out = r.render_geometry(&geo)?;
        let mut row = EvalRow {
            view: v,
            frame: s.frame,
            camera: s.camera_index,
            psnr: None,
            ssim: None,
            mask_iou: None,
            volume_psnr: None,
            volume_loss: None,
        };
        if let (Some(img), Some(mask)) = (&out.image, &out.mask) {
            row.psnr = Some(psnr(img, &s.image)?);
            row.ssim = Some(ssim(img, &s.image)?);
            row.mask_iou = Some(mask_iou(mask, &s.mask)?);
        }
        if let Some(vol) = &out.volume_rgb {
            let low = s.image.area_downsample(r.cfg.render.downsample)?;
            row.volume_psnr = Some(psnr(vol, &low)?);
            row.volume_loss = masked_mse(vol, &low, &geo.near_far.hit);
        }
        rows.push(row);
    }
    Ok(EvalReport {
        split,
        views: rows.len(),
        psnr: aggregate(&rows, |r| r.psnr),
        ssim: aggregate(&rows, |r| r.ssim),
        mask_iou: aggregate(&rows, |r| r.mask_iou),
        volume_psnr: aggregate(&rows, |r| r.volume_psnr),
        volume_loss: aggregate(&rows, |r| r.volume_loss),
        rows,
    })
}
