use std::path::Path;
use std::process::{Command, Output};

use uvpaint::geometry::save_obj;
use uvpaint::synth::cylinder_shell;

const TINY: &str = r#"
[data]
samples = 6
resolution = 32

[codec]
variant = "lossless"

[model]
base_width = 8
channel_mult = [1, 2]
emb_dim = 16
heads = 2
groups = 4

[train]
steps = 3
batch = 2
lr = 1e-3

[sample]
steps = 5

[eval]
max_samples = 3
"#;

fn uvpaint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uvpaint")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = uvpaint(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn last_stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or_default().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn summary(report: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(report).unwrap();
    let v: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    v["summary"].clone()
}

#[test]
fn bake_then_render_cylinder() {
    let dir = tempfile::tempdir().unwrap();
    let obj = dir.path().join("cyl.obj");
    save_obj(&cylinder_shell(4, 16), &obj).unwrap();
    let baked = dir.path().join("baked");
    ok(&["bake", "--mesh", p(&obj), "--resolution", "64", "--out", p(&baked)]);
    for f in ["position.uvpt", "mask.uvpt", "position.png", "mask.png"] {
        assert!(baked.join(f).exists(), "{f} missing");
    }
    let png = dir.path().join("view.png");
    ok(&[
        "render",
        "--mesh",
        p(&obj),
        "--texture",
        p(&baked.join("position.uvpt")),
        "--position-map",
        "--alpha",
        p(&baked.join("mask.uvpt")),
        "--resolution",
        "64",
        "--out",
        p(&png),
    ]);
    let img = image::open(&png).unwrap().to_rgb8();
    let garment = img.pixels().filter(|px| px.0 != [255, 255, 255]).count();
    assert!(garment > 200, "only {garment} non-background pixels");
}

#[test]
fn ground_truth_eval_matches_every_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--samples", "3", "--resolution", "64", "--out", p(&data)]);
    let report = dir.path().join("gt.jsonl");
    ok(&["eval", "--data", p(&data), "--ground-truth", "--out", p(&report)]);
    let s = summary(&report);
    assert_eq!(s["class_match_rate"], 1.0, "{s}");
}

#[test]
fn pipeline_runs_and_is_reproducible_single_threaded() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");
    ok(&["--threads", "1", "gen-data", "--config", p(&cfg), "--out", p(&data)]);
    let codec = root.join("codec.uvpk");
    ok(&["train-codec", "--config", p(&cfg), "--data", p(&data), "--out", p(&codec)]);
    let train = |out: &Path| {
        ok(&["--threads", "1", "train", "--config", p(&cfg), "--data", p(&data), "--codec", p(&codec), "--out", p(out)]);
    };
    train(&root.join("run_a"));
    train(&root.join("run_b"));
    let read = |f: &Path| std::fs::read(f).unwrap();
    assert_eq!(read(&root.join("run_a/denoiser.uvpk")), read(&root.join("run_b/denoiser.uvpk")));
    assert_eq!(read(&root.join("run_a/loss.jsonl")), read(&root.join("run_b/loss.jsonl")));

    let s0 = data.join("sample_00000");
    let sample = |out: &Path, seed: &str| {
        ok(&[
            "--threads",
            "1",
            "sample",
            "--config",
            p(&cfg),
            "--checkpoint",
            p(&root.join("run_a/denoiser.uvpk")),
            "--codec",
            p(&codec),
            "--reference",
            p(&s0.join("reference.uvpt")),
            "--position",
            p(&s0.join("position.uvpt")),
            "--mask",
            p(&s0.join("mask.uvpt")),
            "--label",
            "top",
            "--seed",
            seed,
            "--out",
            p(out),
        ]);
    };
    sample(&root.join("a.uvpt"), "7");
    sample(&root.join("b.uvpt"), "7");
    assert_eq!(read(&root.join("a.uvpt")), read(&root.join("b.uvpt")));
    assert_eq!(read(&root.join("a.json")), read(&root.join("b.json")));
    let side: serde_json::Value = serde_json::from_slice(&read(&root.join("a.json"))).unwrap();
    assert_eq!(side["seed"], 7);
    assert!(side["checkpoint_hash"].as_str().unwrap().len() == 64);
    assert!(root.join("a.png").exists());

    let report = root.join("eval.jsonl");
    ok(&[
        "eval",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--checkpoint",
        p(&root.join("run_a/denoiser.uvpk")),
        "--codec",
        p(&codec),
        "--out",
        p(&report),
    ]);
    let s = summary(&report);
    assert!(s["class_match_rate"].as_f64().is_some(), "{s}");
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), 4);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[data]\nsamples = 5\nresolution = 32\n").unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", p(&cfg), "--samples", "2", "--out", p(&data)]);
    let manifest = std::fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
}

#[test]
fn failures_exit_with_one_classified_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.obj");
    let out = uvpaint(&["bake", "--mesh", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(last_stderr_line(&out).starts_with("error[data]: "), "{}", last_stderr_line(&out));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nstepz = 3\n").unwrap();
    let out = uvpaint(&["gen-data", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(last_stderr_line(&out).starts_with("error[usage]: "));

    let out = uvpaint(&["sample", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    let out = uvpaint(&["--threads", "0", "gen-data", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_documents_every_command() {
    for cmd in ["bake", "gen-data", "train-codec", "train", "sample", "render", "eval"] {
        let out = ok(&[cmd, "--help"]);
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("--out"), "{cmd} help lacks --out");
        assert!(text.contains("--threads"), "{cmd} help lacks --threads");
    }
}
