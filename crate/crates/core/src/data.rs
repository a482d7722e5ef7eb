//! Deterministic multi-camera sequences of the toy humanoid.
//!
//! Layout of a generated dataset:
//!
//! ```text
//! manifest.json
//! spec.toml            effective generation spec
//! cameras/cam_XX.json
//! poses/frame_XXXX.json
//! images/fXXXX_cXX.png
//! masks/fXXXX_cXX.png
//! ```

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use nalgebra::{Unit, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{build_toy_humanoid, default_limbs, PoseParams, ShapeParams, SkinnedTemplate, Tessellation};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imageio::ImageF32;
use crate::mesh::Vec3;
use crate::raster::{rasterize, RasterOutput};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Sinusoidal rotation of one joint about a fixed local axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointMotion {
    pub joint: String,
    pub axis: [f64; 3],
    /// Radians.
    pub amplitude: f64,
    /// Cycles per sequence.
    pub frequency: f64,
    pub phase: f64,
    /// Bend only to one side: the angle runs over `[0, amplitude]`.
    #[serde(default)]
    pub one_sided: bool,
}

impl JointMotion {
    fn new(joint: &str, axis: [f64; 3], amplitude: f64, frequency: f64, phase: f64, one_sided: bool) -> Self {
        JointMotion { joint: joint.to_string(), axis, amplitude, frequency, phase, one_sided }
    }

    fn angle(&self, time: f64, extra_phase: f64) -> f64 {
        let s = (TAU * self.frequency * time + self.phase + extra_phase).sin();
        if self.one_sided {
            self.amplitude * 0.5 * (1.0 + s)
        } else {
            self.amplitude * s
        }
    }
}

/// Cameras on a horizontal circle, all looking at the same point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    pub look_at: [f64; 3],
    /// Focal length in pixels.
    pub focal: f64,
    /// Angle of camera 0 around the vertical axis, radians.
    pub start_angle: f64,
    /// Cameras never used for training.
    pub test_cameras: Vec<usize>,
}

impl Default for CameraRing {
    fn default() -> Self {
        CameraRing { count: 5, radius: 3.0, height: 0.9, look_at: [0.0, 0.86, 0.0], focal: 180.0, start_angle: 0.0, test_cameras: vec![4] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceSpec {
    /// Training frames; novel-pose test frames are added on top.
    pub frames: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub ring: CameraRing,
    pub motions: Vec<JointMotion>,
    pub texture_seed: u64,
    /// Novel-pose test frames as a fraction of `frames`.
    pub test_fraction: f64,
    /// Phase offset of the novel-pose trajectory, radians per motion index.
    pub novel_phase: f64,
    /// Perturbs every motion's phase.
    pub seed: u64,
    pub shape: [f64; 3],
    pub tessellation: Tessellation,
    /// Direction towards the light, world space.
    pub light: [f64; 3],
    pub ambient: f64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        let m = JointMotion::new;
        let motions = vec![
            m("pelvis", [0.0, 1.0, 0.0], 0.45, 1.0, 0.0, false),
            m("spine", [1.0, 0.0, 0.0], 0.15, 2.0, 0.5, false),
            m("head", [0.0, 1.0, 0.0], 0.35, 3.0, 1.0, false),
            m("l_shoulder", [0.0, 0.0, 1.0], 0.7, 2.0, 0.0, false),
            m("r_shoulder", [0.0, 0.0, 1.0], 0.7, 2.0, PI, false),
            m("l_shoulder", [0.0, 1.0, 0.0], 0.5, 3.0, 0.3, false),
            m("r_shoulder", [0.0, 1.0, 0.0], 0.5, 3.0, 1.9, false),
            m("l_elbow", [0.0, 1.0, 0.0], 1.1, 4.0, 0.0, true),
            m("r_elbow", [0.0, -1.0, 0.0], 1.1, 4.0, 2.0, true),
            m("l_hip", [1.0, 0.0, 0.0], 0.5, 3.0, 0.0, false),
            m("r_hip", [1.0, 0.0, 0.0], 0.5, 3.0, PI, false),
            m("l_knee", [1.0, 0.0, 0.0], 0.9, 3.0, PI / 2.0, true),
            m("r_knee", [1.0, 0.0, 0.0], 0.9, 3.0, 3.0 * PI / 2.0, true),
        ];
        SequenceSpec {
            frames: 200,
            image_size: 128,
            ring: CameraRing::default(),
            motions,
            texture_seed: 7,
            test_fraction: 0.1,
            novel_phase: 1.3,
            seed: 0,
            shape: [0.0; 3],
            tessellation: Tessellation::default(),
            light: [0.4, 0.8, 0.6],
            ambient: 0.35,
        }
    }
}

impl SequenceSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SequenceSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 {
            return bad("spec.frames must be positive".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("spec.test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if self.image_size == 0 {
            return bad("spec.image_size must be positive".into());
        }
        let r = &self.ring;
        if r.count == 0 || r.test_cameras.iter().any(|&c| c >= r.count) || r.test_cameras.len() >= r.count {
            return bad("spec.ring needs at least one training camera and valid test camera indices".into());
        }
        if !(r.radius > 0.0 && r.focal > 0.0) {
            return bad("spec.ring radius and focal must be positive".into());
        }
        ShapeParams::new(self.shape)?;
        Ok(())
    }

    pub fn test_frames(&self) -> usize {
        (self.frames as f64 * self.test_fraction).ceil() as usize
    }

    pub fn template(&self) -> Result<SkinnedTemplate> {
        build_toy_humanoid(self.tessellation, &default_limbs())
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let r = &self.ring;
        let target = Vector3::from(r.look_at);
        (0..r.count)
            .map(|i| {
                let a = r.start_angle + TAU * i as f64 / r.count as f64;
                let eye = Vector3::new(r.radius * a.sin(), r.height, r.radius * a.cos());
                Camera::look_at(eye, target, Vector3::y(), r.focal, self.image_size, self.image_size)
            })
            .collect()
    }

    /// Pose of training frame `i`, or of novel-pose frame `i` when `novel`.
    pub fn pose(&self, template: &SkinnedTemplate, i: usize, novel: bool) -> Result<PoseParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let jitter: Vec<f64> = self.motions.iter().map(|_| if self.seed == 0 { 0.0 } else { rng.random_range(0.0..TAU) }).collect();
        let (time, count) = if novel { (i as f64 + 0.5, self.test_frames()) } else { (i as f64, self.frames) };
        let time = time / count as f64;
        let mut rot = vec![UnitQuaternion::identity(); template.num_joints()];
        for (k, m) in self.motions.iter().enumerate() {
            let j = template.joint_index(&m.joint).ok_or_else(|| Error::Config(format!("unknown joint `{}` in motion {k}", m.joint)))?;
            let axis = Unit::try_new(Vector3::from(m.axis), 1e-12).ok_or_else(|| Error::Config(format!("zero axis in motion {k}")))?;
            let extra = jitter[k] + if novel { self.novel_phase * (k + 1) as f64 } else { 0.0 };
            rot[j] *= UnitQuaternion::from_axis_angle(&axis, m.angle(time, extra));
        }
        let mut pose = PoseParams::identity(template.num_joints());
        for (j, q) in rot.into_iter().enumerate() {
            pose.set_rotation(j, q);
        }
        Ok(pose)
    }
}

/// Procedural albedo over the atlas: a base colour per chart cell with
/// stripes and square patches.
#[derive(Clone, Debug)]
pub struct ProceduralTexture {
    base: Vec<[f64; 3]>,
    stripe: Vec<[f64; 3]>,
    freq: Vec<f64>,
    tilt: Vec<f64>,
}

impl ProceduralTexture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let colour = |rng: &mut ChaCha8Rng| [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)];
        let mut base = Vec::new();
        let mut stripe = Vec::new();
        let mut freq = Vec::new();
        let mut tilt = Vec::new();
        for _ in 0..16 {
            base.push(colour(&mut rng));
            stripe.push(colour(&mut rng));
            freq.push(rng.random_range(2.0..6.0));
            tilt.push(rng.random_range(0.0..1.0));
        }
        ProceduralTexture { base, stripe, freq, tilt }
    }

    pub fn albedo(&self, uv: [f64; 2]) -> [f64; 3] {
        let (cx, cy) = (((uv[0] * 4.0) as usize).min(3), ((uv[1] * 4.0) as usize).min(3));
        let c = cy * 4 + cx;
        let (s, t) = (uv[0] * 4.0 - cx as f64, uv[1] * 4.0 - cy as f64);
        let band = ((t + self.tilt[c] * s) * self.freq[c]).fract() < 0.5;
        let patch = ((s * 6.0) as usize + (t * 6.0) as usize).is_multiple_of(5);
        if patch {
            let b = self.base[c];
            [1.0 - 0.7 * b[0], 1.0 - 0.7 * b[1], 1.0 - 0.7 * b[2]]
        } else if band {
            self.stripe[c]
        } else {
            self.base[c]
        }
    }
}

/// Shade a rasterized view: Lambertian with one directional light.
pub fn shade(raster: &RasterOutput, texture: &ProceduralTexture, light: Vec3, ambient: f64) -> (ImageF32, ImageF32) {
    let (w, h) = (raster.width, raster.height);
    let l = light.normalize();
    let mut img = ImageF32::new(w, h, 3);
    let mut mask = ImageF32::new(w, h, 1);
    for p in 0..w * h {
        if !raster.mask[p] {
            continue;
        }
        let n = Vec3::from(raster.normal[p]);
        let lit = ambient + (1.0 - ambient) * n.dot(&l).max(0.0);
        let a = texture.albedo(raster.uv[p]);
        for (out, a) in img.data[p * 3..p * 3 + 3].iter_mut().zip(a) {
            *out = (a * lit).clamp(0.0, 1.0) as f32;
        }
        mask.data[p] = 1.0;
    }
    (img, mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Training frames seen from training cameras.
    Train,
    /// Novel-pose frames seen from every camera.
    Test,
    /// Training frames seen from the held-out cameras.
    NovelView,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "novel_view" | "novel-view" => Ok(Split::NovelView),
            _ => Err(Error::Config(format!("unknown split `{s}` (train, test, novel_view)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub file: String,
    pub test: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub pose: String,
    pub novel: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub frame: usize,
    pub camera: usize,
    pub image: String,
    pub mask: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub image_size: usize,
    pub tessellation: Tessellation,
    pub shape: [f64; 3],
    pub cameras: Vec<CameraEntry>,
    pub frames: Vec<FrameEntry>,
    pub views: Vec<ViewEntry>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::data(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::data(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(path, e))
}

/// Render the sequence into `out` and write the manifest.
pub fn generate(spec: &SequenceSpec, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    for sub in ["cameras", "poses", "images", "masks"] {
        std::fs::create_dir_all(out.join(sub)).map_err(|e| Error::data(out.join(sub), e))?;
    }
    std::fs::write(out.join("spec.toml"), toml::to_string(spec).expect("spec serializes")).map_err(|e| Error::data(out, e))?;
    let template = spec.template()?;
    let cameras = spec.cameras()?;
    let shape = ShapeParams::new(spec.shape)?;
    let texture = ProceduralTexture::new(spec.texture_seed);
    let light = Vec3::from(spec.light);

    let mut manifest = Manifest {
        version: FORMAT_VERSION,
        image_size: spec.image_size,
        tessellation: spec.tessellation,
        shape: spec.shape,
        cameras: Vec::new(),
        frames: Vec::new(),
        views: Vec::new(),
    };
    for (c, cam) in cameras.iter().enumerate() {
        let file = format!("cameras/cam_{c:02}.json");
        write_json(&out.join(&file), cam)?;
        manifest.cameras.push(CameraEntry { file, test: spec.ring.test_cameras.contains(&c) });
    }
    let frames: Vec<(usize, bool)> = (0..spec.frames).map(|i| (i, false)).chain((0..spec.test_frames()).map(|i| (i, true))).collect();
    let mut poses = Vec::with_capacity(frames.len());
    for (f, &(i, novel)) in frames.iter().enumerate() {
        let pose = spec.pose(&template, i, novel)?;
        let file = format!("poses/frame_{f:04}.json");
        write_json(&out.join(&file), &pose)?;
        manifest.frames.push(FrameEntry { pose: file, novel });
        poses.push(pose);
    }
    for (f, &(_, novel)) in frames.iter().enumerate() {
        for (c, entry) in manifest.cameras.iter().enumerate() {
            let split = match (novel, entry.test) {
                (true, _) => Split::Test,
                (false, false) => Split::Train,
                (false, true) => Split::NovelView,
            };
            manifest.views.push(ViewEntry {
                frame: f,
                camera: c,
                image: format!("images/f{f:04}_c{c:02}.png"),
                mask: format!("masks/f{f:04}_c{c:02}.png"),
                split,
            });
        }
    }
    let meshes: Vec<_> = poses.par_iter().map(|p| template.pose(p, &shape)).collect::<Result<_>>()?;
    manifest.views.par_iter().try_for_each(|v| -> Result<()> {
        let raster = rasterize(&meshes[v.frame], &cameras[v.camera])?;
        let (img, mask) = shade(&raster, &texture, light, spec.ambient);
        img.save_png(&out.join(&v.image))?;
        mask.save_png(&out.join(&v.mask))
    })?;
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// One training or evaluation example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub frame: usize,
    pub camera_index: usize,
    pub pose: PoseParams,
    pub camera: Camera,
    pub image: ImageF32,
    pub mask: ImageF32,
}

/// A generated dataset opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub cameras: Vec<Camera>,
    pub poses: Vec<PoseParams>,
}

impl Dataset {
    /// Open from a manifest path or the directory holding it.
    pub fn open(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest: Manifest = read_json(&file)?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::data(&file, format!("format version {} (expected {FORMAT_VERSION})", manifest.version)));
        }
        let cameras = manifest.cameras.iter().map(|c| read_json::<Camera>(&root.join(&c.file))).collect::<Result<Vec<_>>>()?;
        for (c, cam) in cameras.iter().enumerate() {
            cam.validate().map_err(|e| Error::data(root.join(&manifest.cameras[c].file), e))?;
        }
        let poses = manifest.frames.iter().map(|f| read_json::<PoseParams>(&root.join(&f.pose))).collect::<Result<Vec<_>>>()?;
        for v in &manifest.views {
            if v.frame >= poses.len() || v.camera >= cameras.len() {
                return Err(Error::data(&file, format!("view {}/{} out of range", v.frame, v.camera)));
            }
        }
        Ok(Dataset { root, manifest, cameras, poses })
    }

    pub fn template(&self) -> Result<SkinnedTemplate> {
        build_toy_humanoid(self.manifest.tessellation, &default_limbs())
    }

    pub fn shape(&self) -> Result<ShapeParams> {
        ShapeParams::new(self.manifest.shape)
    }

    /// Indices into `manifest.views` of one split, in manifest order.
    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.views.len()).filter(|&i| self.manifest.views[i].split == split).collect()
    }

    /// The split in a seeded random order.
    pub fn shuffled(&self, split: Split, seed: u64) -> Vec<usize> {
        let mut v = self.split(split);
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        v
    }

    pub fn load(&self, view: usize) -> Result<Sample> {
        let v = &self.manifest.views[view];
        let image = ImageF32::load_png(&self.root.join(&v.image))?;
        let mask = ImageF32::load_png(&self.root.join(&v.mask))?;
        let n = self.manifest.image_size;
        if image.channels != 3 || mask.channels != 1 || (image.width, image.height) != (n, n) || (mask.width, mask.height) != (n, n) {
            return Err(Error::data(self.root.join(&v.image), "image or mask has the wrong size or channel count"));
        }
        Ok(Sample { frame: v.frame, camera_index: v.camera, pose: self.poses[v.frame].clone(), camera: self.cameras[v.camera].clone(), image, mask })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SequenceSpec {
        SequenceSpec { frames: 3, image_size: 32, ring: CameraRing { focal: 45.0, ..CameraRing::default() }, ..SequenceSpec::default() }
    }

    fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in ["", "cameras", "poses", "images", "masks"] {
            let mut names: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
            names.sort();
            for p in names {
                let bytes = std::fs::read(&p).unwrap();
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
            }
        }
        out
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate(&tiny(), a.path()).unwrap();
        generate(&tiny(), b.path()).unwrap();
        assert_eq!(files(a.path()), files(b.path()));
    }

    #[test]
    fn splits_and_masks_are_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny();
        let m = generate(&spec, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        assert_eq!(ds.split(Split::Train).len(), 3 * 4);
        assert_eq!(ds.split(Split::Test).len(), 5);
        assert_eq!(ds.split(Split::NovelView).len(), 3);
        let train: Vec<_> = ds.split(Split::Train).iter().map(|&i| (m.views[i].frame, m.views[i].camera)).collect();
        for &i in &ds.split(Split::Test) {
            assert!(!train.contains(&(m.views[i].frame, m.views[i].camera)));
        }
        // The test camera sits apart from every training camera.
        let test_cam = &ds.cameras[4];
        for c in &ds.cameras[..4] {
            assert!((c.center() - test_cam.center()).norm() > 0.5);
        }
        let template = ds.template().unwrap();
        let shape = ds.shape().unwrap();
        for &i in ds.split(Split::Train).iter().chain(&ds.split(Split::Test)) {
            let s = ds.load(i).unwrap();
            let raster = rasterize(&template.pose(&s.pose, &shape).unwrap(), &s.camera).unwrap();
            let on = s.mask.data.iter().filter(|&&v| v > 0.5).count();
            assert_eq!(on, raster.covered());
            for p in 0..32 * 32 {
                let black = s.image.data[p * 3..p * 3 + 3].iter().all(|&v| v == 0.0);
                assert_eq!(black, s.mask.data[p] == 0.0);
                assert!(s.image.data[p * 3..p * 3 + 3].iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        assert_eq!(ds.shuffled(Split::Train, 3), ds.shuffled(Split::Train, 3));
        assert_ne!(ds.shuffled(Split::Train, 3), ds.shuffled(Split::Train, 4));
    }

    #[test]
    fn texture_seed_changes_images_but_not_masks() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate(&tiny(), a.path()).unwrap();
        generate(&SequenceSpec { texture_seed: 99, ..tiny() }, b.path()).unwrap();
        let (fa, fb) = (files(a.path()), files(b.path()));
        for ((pa, ba), (_, bb)) in fa.iter().zip(&fb) {
            let name = pa.to_string_lossy();
            if name.starts_with("masks") || name.starts_with("poses") {
                assert_eq!(ba, bb, "{name}");
            }
        }
        assert!(fa.iter().zip(&fb).any(|((p, x), (_, y))| p.starts_with("images") && x != y));
    }

    #[test]
    fn poses_stay_unit_and_novel_frames_differ() {
        let spec = SequenceSpec::default();
        let t = spec.template().unwrap();
        for i in [0, 17, 150] {
            let p = spec.pose(&t, i, false).unwrap();
            assert!(p.unit_rotations().is_ok());
        }
        assert_eq!(spec.test_frames(), 20);
        assert_ne!(spec.pose(&t, 0, true).unwrap(), spec.pose(&t, 0, false).unwrap());
        let seeded = SequenceSpec { seed: 5, ..SequenceSpec::default() };
        assert_ne!(seeded.pose(&t, 3, false).unwrap(), spec.pose(&t, 3, false).unwrap());
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(SequenceSpec::from_toml("frames = 0\n").is_err());
        assert!(SequenceSpec::from_toml("test_fraction = 1.5\n").is_err());
        assert!(SequenceSpec::from_toml("framez = 3\n").is_err());
        assert_eq!(SequenceSpec::from_toml("").unwrap(), SequenceSpec::default());
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        assert!(generate(&tiny(), &blocker.join("sub")).is_err());
    }
}
