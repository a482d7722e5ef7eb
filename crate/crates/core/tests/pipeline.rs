//! End-to-end behaviour of training, checkpoints, rendering and evaluation
//! on a tiny dataset.

use hvtr_core::body::ShapeParams;
use hvtr_core::config::{RunConfig, TrainMode};
use hvtr_core::data::{generate, CameraRing, Dataset, SequenceSpec, Split};
use hvtr_core::metrics::{psnr, ssim};
use hvtr_core::posenc::LATENT_GEOMETRY;
use hvtr_core::train::{evaluate, LossRecord, Renderer, Trainer};
use hvtr_core::Error;
use tempfile::TempDir;

fn tiny_data() -> (TempDir, Dataset) {
    let dir = TempDir::new().unwrap();
    let spec = SequenceSpec { frames: 4, image_size: 32, ring: CameraRing { focal: 45.0, ..CameraRing::default() }, ..SequenceSpec::default() };
    generate(&spec, dir.path()).unwrap();
    let data = Dataset::open(dir.path()).unwrap();
    (dir, data)
}

fn tiny_config(mode: TrainMode) -> RunConfig {
    let mut cfg = RunConfig::preset("ours_4_4").unwrap();
    cfg.train.mode = mode;
    cfg.train.seed = 3;
    cfg.model.uv_size = 16;
    cfg.model.mlp_width = 16;
    cfg.model.geo_channels = 8;
    cfg.model.latent_channels = 4;
    cfg.model.feature_channels = 4;
    cfg.model.texture_channels = 8;
    cfg.model.gate_channels = 4;
    cfg
}

fn bits(trace: &[LossRecord]) -> Vec<u64> {
    trace.iter().flat_map(|r| r.parts().into_iter().chain([r.disc, r.total])).map(f64::to_bits).collect()
}

#[test]
fn resumed_training_continues_the_trace_exactly() {
    let (_dir, data) = tiny_data();
    let out = TempDir::new().unwrap();
    let ckpt = out.path().join("ckpt.json");

    let mut straight = Trainer::new(tiny_config(TrainMode::Full), data.clone()).unwrap();
    for _ in 0..6 {
        straight.step().unwrap();
    }

    let mut first = Trainer::new(tiny_config(TrainMode::Full), data.clone()).unwrap();
    for _ in 0..3 {
        first.step().unwrap();
    }
    first.save(&ckpt).unwrap();
    let mut resumed = Trainer::resume(&ckpt, data).unwrap();
    assert_eq!(resumed.iteration, 3);
    for _ in 0..3 {
        resumed.step().unwrap();
    }
    assert_eq!(bits(&resumed.trace), bits(&straight.trace));
}

#[test]
fn pdnerf_only_touches_geometry_branch_only() {
    let (_dir, data) = tiny_data();
    let mut t = Trainer::new(tiny_config(TrainMode::PdnerfOnly), data).unwrap();
    let before = t.store.clone();
    for _ in 0..3 {
        t.step().unwrap();
    }
    let allowed = ["pose.", "normal.", "field.", LATENT_GEOMETRY];
    let mut changed = 0;
    for id in t.store.ids() {
        let name = t.store.name(id);
        if t.store.get(id).data() != before.get(id).data() {
            assert!(allowed.iter().any(|p| name.starts_with(p)), "{name} changed");
            changed += 1;
        }
    }
    assert!(changed > 0);
    assert!(t.store.ids().all(|id| !t.store.name(id).starts_with("render")));
    for r in &t.trace {
        assert!(r.vol > 0.0 && r.norm > 0.0);
        assert_eq!([r.feat, r.mask, r.pix, r.adv, r.disc], [0.0; 5]);
    }
}

#[test]
fn unsupported_downsampling_is_a_config_error() {
    let text = "[render]\ndownsample = 5\n";
    assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))));
    assert!(matches!(RunConfig::preset("ours_5_7"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_toml("[render]\nsamplez = 3\n"), Err(Error::Config(_))));
}

#[test]
fn evaluation_shares_the_render_path() {
    let (_dir, data) = tiny_data();
    let mut t = Trainer::new(tiny_config(TrainMode::Full), data.clone()).unwrap();
    t.step().unwrap();
    let r = Renderer::from_trainer(&t);
    let report = evaluate(&r, &data, Split::Test, None).unwrap();
    assert_eq!(report.views, data.split(Split::Test).len());
    assert_eq!(report.rows.len(), report.views);

    let row = &report.rows[1];
    let s = data.load(row.view).unwrap();
    let out = r.render(&s.pose, None, &s.camera).unwrap();
    assert_eq!(row.psnr, Some(psnr(out.image.as_ref().unwrap(), &s.image).unwrap()));
    let zero = ShapeParams::new([0.0; 3]).unwrap();
    let again = r.render(&s.pose, Some(&zero), &s.camera).unwrap();
    assert_eq!(out.image.unwrap().data, again.image.unwrap().data);
    assert_eq!(ssim(&s.image, &s.image).unwrap(), 1.0);
}
