use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;
use vqstyle::image_io::load_image;
use vqstyle::persistence::RunConfig;
use vqstyle::pipeline::tiny_config;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqstyle")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    ckpt: PathBuf,
}

impl Fixture {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// A full pipeline run at toy size, shared by the tests that need a checkpoint.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let (content, style) = (root.join("content"), root.join("style"));
        ok(&["synth-data", "--kind", "blobs", "--count", "3", "--size", "16", "--out", s(&content), "--seed", "1"]);
        ok(&["synth-data", "--kind", "stripes", "--count", "2", "--size", "16", "--out", s(&style), "--seed", "2"]);
        let cfg = root.join("run.json");
        RunConfig { model: tiny_config(), ..RunConfig::default() }.save(&cfg).unwrap();
        let (vq, s1, s2) = (root.join("vq.ckpt"), root.join("s1.ckpt"), root.join("s2.ckpt"));
        let log = root.join("vq.csv");
        ok(&[
            "train-vqae", "--data", s(&content), "--config", s(&cfg), "--steps", "3", "--batch", "2",
            "--log", s(&log), "--out", s(&vq),
        ]);
        ok(&[
            "train-stage1", "--vqae", s(&vq), "--content", s(&content), "--style", s(&style),
            "--steps", "2", "--batch", "2", "--out", s(&s1),
        ]);
        ok(&[
            "train-stage2", "--ckpt", s(&s1), "--content", s(&content), "--style", s(&style),
            "--steps", "1", "--batch", "2", "--out", s(&s2),
        ]);
        Fixture { _dir: dir, root, ckpt: s2 }
    })
}

fn stylize(f: &Fixture, out: &str, styles: &[String], extra: &[&str]) -> PathBuf {
    let out = f.path(out);
    let content = f.path("content/blobs_1_0.ppm");
    let mut args = vec!["stylize", "--ckpt", s(&f.ckpt), "--content", s(&content), "--out", s(&out)];
    for st in styles {
        args.extend(["--style", st.as_str()]);
    }
    args.extend(extra);
    ok(&args);
    out
}

fn style_path(f: &Fixture, i: usize) -> String {
    s(&f.path(&format!("style/stripes_2_{i}.ppm"))).to_string()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(run(&["inspect-schedule", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn schedule_csv_ends_fully_corrupted() {
    let out = ok(&["inspect-schedule", "--T", "25", "--K", "64", "--u", "0.1"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,alpha_bar,gamma_bar,beta_bar,alpha,gamma,beta"));
    let last: Vec<f64> = lines.last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(last[0], 25.0);
    assert!(last[1].abs() < 1e-12);
    assert!((last[2] - 0.9).abs() < 1e-12);
    assert!((last[3] * 64.0 - 0.1).abs() < 1e-12);
    assert_eq!(text.lines().count(), 27);
}

#[test]
fn schedule_rejects_bad_replacement_share() {
    assert_eq!(run(&["inspect-schedule", "--u", "1.5"]).status.code(), Some(2));
}

#[test]
fn print_config_emits_json_and_stops() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never.ckpt");
    let o = ok(&["train-vqae", "--data", "/nonexistent", "--K", "32", "--steps", "7", "--out", s(&out), "--print-config"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["model"]["vq"]["vocab"], 32);
    assert_eq!(v["train"]["steps"], 7);
    assert_eq!(v["train"]["stage"], "vqae");
    assert!(!out.exists());
}

#[test]
fn training_writes_a_loss_log() {
    let f = fixture();
    let log = std::fs::read_to_string(f.path("vq.csv")).unwrap();
    let mut lines = log.lines();
    assert!(lines.next().unwrap().starts_with("step,total"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn weights_must_sum_to_one() {
    let f = fixture();
    let out = f.path("bad.png");
    let content = f.path("content/blobs_1_0.ppm");
    let (a, b) = (format!("{}:0.6", style_path(f, 0)), format!("{}:0.6", style_path(f, 1)));
    let r = run(&[
        "stylize", "--ckpt", s(&f.ckpt), "--content", s(&content), "--style", &a, "--style", &b, "--out", s(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn out_of_range_alpha_and_t_start_are_usage_errors() {
    let f = fixture();
    let content = f.path("content/blobs_1_0.ppm");
    let st = style_path(f, 0);
    let base = ["stylize", "--ckpt", s(&f.ckpt), "--content", s(&content), "--style", &st, "--out", "/tmp/unused.png"];
    let mut a = base.to_vec();
    a.extend(["--alpha", "1.5"]);
    assert_eq!(run(&a).status.code(), Some(2));
    let mut b = base.to_vec();
    b.extend(["--t-start", "99"]);
    assert_eq!(run(&b).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let r = run(&["stylize", "--ckpt", "/nonexistent.ckpt", "--content", "x.png", "--style", "y.png", "--out", "/tmp/z.png"]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn stylize_is_deterministic_and_keeps_dims() {
    let f = fixture();
    let st = vec![style_path(f, 0)];
    let a = stylize(f, "det_a.png", &st, &["--seed", "4"]);
    let b = stylize(f, "det_b.png", &st, &["--seed", "4"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let img = load_image(&a).unwrap();
    let content = load_image(f.path("content/blobs_1_0.ppm")).unwrap();
    assert_eq!((img.height(), img.width(), img.channels()), (content.height(), content.width(), 3));
}

#[test]
fn unit_weight_matches_plain_style() {
    let f = fixture();
    let plain = stylize(f, "plain.png", &[style_path(f, 1)], &["--seed", "9"]);
    let weighted = stylize(f, "weighted.png", &[format!("{}:1.0", style_path(f, 1))], &["--seed", "9"]);
    assert_eq!(std::fs::read(plain).unwrap(), std::fs::read(weighted).unwrap());
}

#[test]
fn blend_ignores_style_order() {
    let f = fixture();
    let (a, b) = (format!("{}:0.5", style_path(f, 0)), format!("{}:0.5", style_path(f, 1)));
    let ab = stylize(f, "ab.png", &[a.clone(), b.clone()], &["--seed", "3", "--alpha", "0.7"]);
    let ba = stylize(f, "ba.png", &[b, a], &["--seed", "3", "--alpha", "0.7"]);
    assert_eq!(std::fs::read(ab).unwrap(), std::fs::read(ba).unwrap());
}

#[test]
fn eval_writes_metrics_csv() {
    let f = fixture();
    let csv = f.path("eval.csv");
    let outs = f.path("eval_out");
    ok(&[
        "eval", "--ckpt", s(&f.ckpt), "--content", s(&f.path("content")), "--style", s(&f.path("style")),
        "--out-dir", s(&outs), "--csv", s(&csv), "--mode", "prior",
    ]);
    let text = std::fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "content,style,output,ssim,gram_dist,feat_dist");
    assert_eq!(lines.len(), 5);
    assert!(lines[3].starts_with("blobs_1_2.ppm,stripes_2_0.ppm,"));
    assert!(lines[4].starts_with("mean,,,"));
    assert_eq!(std::fs::read_dir(outs).unwrap().count(), 3);
}
