use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use hvtr_core::body::{PoseParams, ShapeParams, NUM_SHAPE};
use hvtr_core::camera::Camera;
use hvtr_core::config::{RunConfig, TrainMode};
use hvtr_core::data::{generate, Dataset, SequenceSpec, Split, MANIFEST_FILE};
use hvtr_core::surface::{project_point_bruteforce, TriangleBvh};
use hvtr_core::train::{evaluate, run_training, Renderer, Trainer, CHECKPOINT_FILE, CONFIG_ECHO_FILE};
use hvtr_core::Error;
use log::info;

/// Pose-conditioned avatar rendering: synthetic data, training, rendering
/// and evaluation.
#[derive(Parser)]
#[command(name = "hvtr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-camera sequence of the toy humanoid.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Render a trained model under new poses, cameras or body shapes.
    Render(RenderArgs),
    /// Compute image metrics of a trained model on one dataset split.
    Eval(EvalArgs),
    /// Print surface coordinates of query points for one posed frame.
    Probe(ProbeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Sequence description (TOML); built-in defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML); the `ours_8_12` preset when omitted.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Start from a named preset such as `ours_4_7`.
    #[arg(long)]
    preset: Option<String>,
    /// Dataset manifest or its directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    out: PathBuf,
    /// full, pdnerf-only, no-vol, no-tex or concat-fusion.
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint; its configuration wins.
    #[arg(long, conflicts_with_all = ["config", "preset", "mode", "seed"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A pose file, or a directory of pose files rendered in name order.
    #[arg(long)]
    pose: PathBuf,
    /// Camera file.
    #[arg(long)]
    camera: PathBuf,
    /// Shape coefficients, comma separated (girth, arm length, leg length).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    beta: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train, test or novel_view.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Report file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    /// Dataset providing the body template and shape.
    #[arg(long)]
    data: PathBuf,
    /// Frame index in the manifest.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Query point `x,y,z` in world metres; repeatable.
    #[arg(long = "point", value_delimiter = ',', allow_hyphen_values = true, required = true)]
    points: Vec<f64>,
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let mut spec = match &a.spec {
        Some(p) => SequenceSpec::load(p)?,
        None => SequenceSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let manifest = generate(&spec, &a.out)?;
    info!("wrote {} views", manifest.views.len());
    println!("{}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let data = Dataset::open(&a.data)?;
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::resume(ckpt, data)?,
        None => {
            let mut cfg = match (&a.config, &a.preset) {
                (Some(p), _) => RunConfig::load(p)?,
                (None, Some(name)) => RunConfig::preset(name)?,
                (None, None) => RunConfig::default(),
            };
            if let Some(mode) = a.mode {
                cfg.train.mode = mode;
            }
            if let Some(seed) = a.seed {
                cfg.train.seed = seed;
            }
            cfg.paths.data = Some(a.data.clone());
            cfg.paths.out = Some(a.out.clone());
            Trainer::new(cfg, data)?
        }
    };
    if let Some(n) = a.iterations {
        trainer.cfg.train.iterations = n;
    }
    trainer.cfg.validate()?;
    info!("training {:?} from iteration {} to {}", trainer.cfg.train.mode, trainer.iteration, trainer.cfg.train.iterations);
    run_training(&mut trainer, &a.out, |r| {
        if r.iter % 50 == 0 {
            info!("iter {:>5} total {:.5} vol {:.5} norm {:.5} pix {:.5} disc {:.5}", r.iter, r.total, r.vol, r.norm, r.pix, r.disc);
        }
    })?;
    println!("{}", a.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Error::data(path, e).into())
}

fn render(a: RenderArgs) -> anyhow::Result<()> {
    let r = Renderer::load(&a.checkpoint)?;
    let camera: Camera = read_json(&a.camera)?;
    camera.validate()?;
    let shape = match &a.beta {
        Some(b) => {
            let Ok(betas) = b.as_slice().try_into() else {
                bail!(Error::Config(format!("--beta takes {NUM_SHAPE} values, got {}", b.len())));
            };
            Some(ShapeParams::new(betas)?)
        }
        None => None,
    };
    let poses: Vec<PathBuf> = if a.pose.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&a.pose)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        v.retain(|p| p.extension().is_some_and(|e| e == "json"));
        v.sort();
        v
    } else {
        vec![a.pose.clone()]
    };
    if poses.is_empty() {
        bail!(Error::Config(format!("no pose files in {}", a.pose.display())));
    }
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join(CONFIG_ECHO_FILE), r.cfg.to_toml())?;
    for (i, p) in poses.iter().enumerate() {
        let pose: PoseParams = read_json(p)?;
        let out = r.render(&pose, shape.as_ref(), &camera)?;
        let named = |kind: &str| a.out.join(format!("{kind}_{i:04}.png"));
        for (kind, img) in [("image", &out.image), ("mask", &out.mask), ("volume_rgb", &out.volume_rgb), ("volume_alpha", &out.volume_alpha)] {
            if let Some(img) = img {
                img.save_png(&named(kind))?;
            }
        }
        info!("{} -> frame {i} ({} covered pixels)", p.display(), out.coverage);
    }
    println!("{}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let r = Renderer::load(&a.checkpoint)?;
    let data = Dataset::open(&a.data)?;
    let report = evaluate(&r, &data, a.split, None)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_ECHO_FILE), r.cfg.to_toml())?;
    }
    std::fs::write(&a.out, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", a.out.display()))?;
    let fmt = |x: &Option<hvtr_core::train::Aggregate>| x.as_ref().map_or("n/a".to_string(), |a| format!("{:.4} ± {:.4}", a.mean, a.std));
    println!(
        "{:?}: {} views, PSNR {}, SSIM {}, mask IoU {}, volume PSNR {}",
        report.split,
        report.views,
        fmt(&report.psnr),
        fmt(&report.ssim),
        fmt(&report.mask_iou),
        fmt(&report.volume_psnr)
    );
    Ok(())
}

fn probe(a: ProbeArgs) -> anyhow::Result<()> {
    if !a.points.len().is_multiple_of(3) {
        bail!(Error::Config(format!("--point takes x,y,z triples, got {} values", a.points.len())));
    }
    let data = Dataset::open(&a.data)?;
    let Some(pose) = data.poses.get(a.frame) else {
        bail!(Error::Config(format!("frame {} out of range ({} frames)", a.frame, data.poses.len())));
    };
    let mesh = data.template()?.pose(pose, &data.shape()?)?;
    let bvh = TriangleBvh::build(&mesh)?;
    for q in a.points.chunks(3) {
        let q = nalgebra::Vector3::new(q[0], q[1], q[2]);
        let (lc, visited) = bvh.project_counted(&q, &mesh);
        let brute = project_point_bruteforce(&q, &mesh);
        let uv = hvtr_core::surface::to_uv(&lc, &mesh);
        println!(
            "{}",
            serde_json::json!({
                "point": [q.x, q.y, q.z],
                "face": lc.face,
                "local_uv": [lc.u, lc.v],
                "h": lc.h,
                "atlas_uv": uv,
                "nodes_visited": visited,
                "bruteforce_face": brute.face,
                "bruteforce_h": brute.h,
            })
        );
    }
    Ok(())
}

/// Configuration and usage problems exit with 1, everything else with 2.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Invalid { .. }) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Probe(a) => probe(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
