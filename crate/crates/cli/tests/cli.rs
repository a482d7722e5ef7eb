use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SPEC: &str = "frames = 3\nimage_size = 32\n\n[ring]\nfocal = 45.0\n";

const CONFIG: &str = r#"
[render]
downsample = 4
samples = 4

[model]
uv_size = 16
latent_channels = 4
geo_channels = 8
feature_channels = 4
texture_channels = 8
mlp_width = 16
gate_channels = 4

[train]
iterations = 3
checkpoint_every = 2
seed = 1
"#;

fn hvtr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hvtr")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hvtr(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_data(root: &Path, name: &str, seed: Option<&str>) -> PathBuf {
    let spec = root.join("spec.toml");
    std::fs::write(&spec, SPEC).unwrap();
    let out = root.join(name);
    let mut args = vec!["gen-data", "--spec", p(&spec), "--out", p(&out)];
    if let Some(s) = seed {
        args.extend(["--seed", s]);
    }
    ok(&args);
    out
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn train(root: &Path, data: &Path) -> PathBuf {
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = root.join("run");
    ok(&["train", "--config", p(&cfg), "--data", p(data), "--out", p(&out)]);
    out
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let root = TempDir::new().unwrap();
    let a = gen_data(root.path(), "a", None);
    let b = gen_data(root.path(), "b", None);
    let c = gen_data(root.path(), "c", Some("9"));
    assert_eq!(read(&a.join("manifest.json")), read(&b.join("manifest.json")));
    let name = |d: &Path| {
        let mut v: Vec<_> = std::fs::read_dir(d.join("images")).unwrap().map(|e| e.unwrap().path()).collect();
        v.sort();
        v
    };
    assert!(!name(&a).is_empty());
    for (x, y) in name(&a).iter().zip(name(&b)) {
        assert_eq!(read(x), read(&y));
    }
    let differs = name(&a).iter().zip(name(&c)).any(|(x, y)| read(x) != read(&y));
    assert!(differs, "a new seed left every image unchanged");
}

#[test]
fn unwritable_output_fails_with_nonzero_exit() {
    let root = TempDir::new().unwrap();
    let blocker = root.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = hvtr(&["gen-data", "--out", p(&blocker.join("data"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    assert_eq!(hvtr(&["--help"]).status.code(), Some(0));
    assert_eq!(hvtr(&["train", "--bogus"]).status.code(), Some(1));
    let root = TempDir::new().unwrap();
    let data = gen_data(root.path(), "d", None);
    let cfg = root.path().join("bad.toml");
    std::fs::write(&cfg, "[render]\ndownsample = 5\n").unwrap();
    let out = hvtr(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&root.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("downsample"));
}

#[test]
fn train_resume_render_and_eval() {
    let root = TempDir::new().unwrap();
    let data = gen_data(root.path(), "d", None);
    let run = train(root.path(), &data);
    let ckpt = run.join("checkpoint.json");
    assert!(run.join("config.toml").exists());
    let log = String::from_utf8(read(&run.join("loss_log.jsonl"))).unwrap();
    assert_eq!(log.lines().count(), 3);

    // Resuming to five iterations keeps the first three records.
    let resumed = root.path().join("resumed");
    ok(&["train", "--resume", p(&ckpt), "--data", p(&data), "--out", p(&resumed), "--iterations", "5"]);
    let more = String::from_utf8(read(&resumed.join("loss_log.jsonl"))).unwrap();
    assert_eq!(more.lines().count(), 5);
    assert_eq!(more.lines().take(3).collect::<Vec<_>>(), log.lines().collect::<Vec<_>>());

    let pose = data.join("poses/frame_0000.json");
    let camera = data.join("cameras/cam_00.json");
    let render = |out: &str, beta: Option<&str>| {
        let out = root.path().join(out);
        let mut args = vec!["render", "--checkpoint", p(&ckpt), "--pose", p(&pose), "--camera", p(&camera), "--out", p(&out)];
        if let Some(b) = beta {
            args.extend(["--beta", b]);
        }
        (hvtr(&args), out)
    };
    let (plain, plain_dir) = render("plain", None);
    assert!(plain.status.success(), "{}", String::from_utf8_lossy(&plain.stderr));
    let (zero, zero_dir) = render("zero", Some("0,0,0"));
    assert!(zero.status.success());
    for kind in ["image", "mask", "volume_rgb", "volume_alpha"] {
        let f = format!("{kind}_0000.png");
        assert_eq!(read(&plain_dir.join(&f)), read(&zero_dir.join(&f)), "{kind}");
    }
    assert!(plain_dir.join("config.toml").exists());
    let (wide, _) = render("wide", Some("9,0,0"));
    assert_eq!(wide.status.code(), Some(1));

    let report = root.path().join("eval/report.json");
    ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&report)]);
    let json: serde_json::Value = serde_json::from_slice(&read(&report)).unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(&read(&data.join("manifest.json"))).unwrap();
    let test_views = manifest["views"].as_array().unwrap().iter().filter(|v| v["split"] == "test").count();
    assert_eq!(json["rows"].as_array().unwrap().len(), test_views);
    assert!(json["psnr"]["mean"].is_number() && json["volume_psnr"]["std"].is_number());
    assert!(root.path().join("eval/config.toml").exists());
}

#[test]
fn probe_matches_bruteforce() {
    let root = TempDir::new().unwrap();
    let data = gen_data(root.path(), "d", None);
    let out = ok(&["probe", "--data", p(&data), "--point", "0.1,1.0,0.2", "--point", "-0.3,0.5,0.0"]);
    let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for l in lines {
        assert_eq!(l["face"], l["bruteforce_face"]);
        assert!((l["h"].as_f64().unwrap() - l["bruteforce_h"].as_f64().unwrap()).abs() < 1e-9);
    }
}
