//! The complete generator: per-frame geometry preparation and the forward
//! pass from a posed body to the rendered image, mask and volumetric
//! diagnostics.

use hvtr_tensor::{Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::body::{PoseParams, ShapeParams, SkinnedTemplate};
use crate::camera::Camera;
use crate::config::{RunConfig, TrainMode};
use crate::error::Result;
use crate::hybrid::{feature_render, HybridOutput, HybridRenderer};
use crate::mesh::Mesh;
use crate::nn::ids_with_prefix;
use crate::pdnerf::{hit_pixels, localize, render_field, sample_rays, FieldInputs, RadianceField, RaySamples, VolumeImage};
use crate::posenc::{bake_normal_map, bake_positional_map, norm_kind, PoseEncoder, PoseFeatures, LATENT_GEOMETRY};
use crate::raster::{near_far_buffers, rasterize, NearFar, RasterOutput};
use crate::surface::TriangleBvh;

/// Everything derived from one (pose, shape, camera) triple that does not
/// depend on network parameters.
pub struct FrameGeometry {
    pub mesh: Mesh,
    pub bvh: TriangleBvh,
    /// `[1, 3, U, U]` posed positions.
    pub posmap: Tensor<f32>,
    /// `[1, 3, U, U]` posed normals and their validity weights.
    pub normals: Tensor<f32>,
    pub normal_weights: Tensor<f32>,
    pub raster: RasterOutput,
    pub low_camera: Camera,
    pub near_far: NearFar,
    pub hit: Vec<usize>,
}

impl FrameGeometry {
    pub fn new(template: &SkinnedTemplate, pose: &PoseParams, shape: &ShapeParams, camera: &Camera, cfg: &RunConfig) -> Result<Self> {
        let mesh = template.pose(pose, shape)?;
        let u = cfg.model.uv_size;
        let posmap = bake_positional_map(&mesh, u)?;
        let nmap = bake_normal_map(&mesh, u)?;
        let raster = rasterize(&mesh, camera)?;
        let low_camera = camera.downsampled(cfg.render.downsample)?;
        let near_far = near_far_buffers(&mesh.dilate(cfg.render.dilation)?, &low_camera);
        let hit = hit_pixels(&near_far);
        let bvh = TriangleBvh::build(&mesh)?;
        Ok(FrameGeometry {
            posmap: posmap.to_tensor(),
            normals: nmap.to_tensor(),
            normal_weights: nmap.valid_weights(),
            mesh,
            bvh,
            raster,
            low_camera,
            near_far,
            hit,
        })
    }

    /// Ray samples for every hit pixel; jittered when `rng` is given.
    pub fn sample<R: Rng>(&self, samples: usize, rng: Option<&mut R>) -> Result<RaySamples> {
        sample_rays(&self.low_camera, &self.near_far, &self.hit, samples, rng)
    }

    /// `[1, 1, h, w]` indicator of hit pixels at the field's resolution.
    pub fn hit_mask(&self) -> Tensor<f32> {
        let (w, h) = (self.near_far.width, self.near_far.height);
        Tensor::from_fn(&[1, 1, h, w], |p| if self.near_far.hit[p] { 1.0 } else { 0.0 })
    }
}

pub struct AvatarOutput {
    pub pose: PoseFeatures,
    /// Neural texture rendered to image space `[1, C, H, W]`.
    pub feature_image: Option<Var>,
    pub volume: Option<VolumeImage>,
    pub hybrid: Option<HybridOutput>,
}

#[derive(Clone, Debug)]
pub struct Avatar {
    pub mode: TrainMode,
    pub pose: PoseEncoder,
    pub field: Option<RadianceField>,
    pub hybrid: Option<HybridRenderer>,
}

impl Avatar {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mode = cfg.train.mode;
        let m = &cfg.model;
        let pose = PoseEncoder::new(store, m, rng);
        let pc = pose.feature_channels();
        let field = mode.uses_volume().then(|| RadianceField::new(store, m, pc, rng));
        let hybrid = if mode.uses_renderer() {
            let feature_in = mode.uses_texture().then_some(pc);
            let volume_in = mode.uses_volume().then_some(m.feature_channels);
            let kind = norm_kind(m.norm);
            Some(HybridRenderer::new(store, feature_in, volume_in, m.texture_channels, cfg.texture_levels(), cfg.fusion(), m.gate_channels, kind, rng)?)
        } else {
            None
        };
        Ok(Avatar { mode, pose, field, hybrid })
    }

    /// Parameters the optimizer updates in this mode.
    pub fn trainable<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        match self.mode {
            TrainMode::PdnerfOnly => ids_with_prefix(store, &["pose.", "normal.", "field.", LATENT_GEOMETRY]),
            _ => store.ids().collect(),
        }
    }

    /// Full forward pass. `samples` must come from `geo` and is required
    /// whenever the volumetric branch is active.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        geo: &FrameGeometry,
        samples: Option<(&RaySamples, &FieldInputs<T>)>,
    ) -> Result<AvatarOutput> {
        let posmap = tape.constant(geo.posmap.cast());
        let pose = self.pose.forward(tape, p, posmap)?;
        let volume = match (&self.field, samples) {
            (Some(field), Some((s, inputs))) => Some(render_field(tape, p, field, pose.features, s, inputs)?),
            (Some(_), None) => return Err(crate::error::Error::invalid("avatar", "volumetric branch needs ray samples")),
            (None, _) => None,
        };
        let (feature_image, hybrid) = match &self.hybrid {
            Some(h) => {
                let fi = feature_render(tape, pose.features, &geo.raster)?;
                let tex_in = h.texture.is_some().then_some(fi);
                let out = h.forward(tape, p, tex_in, volume.as_ref().map(|v| v.features))?;
                (Some(fi), Some(out))
            }
            None => (None, None),
        };
        Ok(AvatarOutput { pose, feature_image, volume, hybrid })
    }
}

/// Sample rays for `geo` and derive the field inputs in one go.
pub fn prepare_samples<T: Scalar, R: Rng>(
    field: &RadianceField,
    geo: &FrameGeometry,
    samples: usize,
    rng: Option<&mut R>,
) -> Result<(RaySamples, FieldInputs<T>)> {
    let s = geo.sample(samples, rng)?;
    let local = localize(&s, &geo.mesh, &geo.bvh);
    let inputs = FieldInputs::new(field, &s, &local);
    Ok((s, inputs))
}
