use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diffcolor::PipelineConfig;

const PROMPT: &str = "A pink square and a yellow triangle on a purple background.";

fn asset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(name)
}

fn diffcolor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffcolor")).args(args).env_remove("DIFFCOLOR_BACKEND").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn colorize(out: &Path, extra: &[&str]) -> Output {
    let gray = asset("assets/sample_gray.png");
    let mut args = vec!["colorize", "--gray", gray.to_str().unwrap(), "--prompt", PROMPT, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    diffcolor(&args)
}

#[test]
fn bundled_config_is_the_toy_preset() {
    let cfg = PipelineConfig::load(asset("configs/toy-demo.toml")).unwrap();
    assert_eq!(cfg, PipelineConfig::toy_demo());
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(diffcolor(&["--help"]).status.code(), Some(0));
    assert_eq!(diffcolor(&["colorize", "--help"]).status.code(), Some(0));
    assert_eq!(diffcolor(&["--frobnicate"]).status.code(), Some(2));
    let gray = asset("assets/sample_gray.png");
    let o = diffcolor(&["colorize", "--gray", gray.to_str().unwrap(), "--out", "unused"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--prompt"), "{}", stderr(&o));
}

#[test]
fn colorize_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = asset("configs/toy-demo.toml");
    let negs = asset("configs/negatives.txt");
    for out in [&a, &b] {
        let o = colorize(
            out,
            &["--config", cfg.to_str().unwrap(), "--negatives", negs.to_str().unwrap(), "--steps", "40", "--seed", "3"],
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for name in ["x_pri.png", "x_pri_aligned.png", "training_log.jsonl", "manifest.json", "effective_config.json"] {
        assert!(a.join(name).is_file(), "{name} missing");
    }
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a.join("x_pri_aligned.png")), read(&b.join("x_pri_aligned.png")));
    assert_eq!(read(&a.join("training_log.jsonl")), read(&b.join("training_log.jsonl")));
    assert_eq!(std::fs::read_to_string(a.join("training_log.jsonl")).unwrap().lines().count(), 40);

    let effective = PipelineConfig::load(a.join("effective_config.json")).unwrap();
    assert_eq!((effective.stage1.steps, effective.stage1.seed), (40, 3));
    let manifest: serde_json::Value = serde_json::from_slice(&read(&a.join("manifest.json"))).unwrap();
    assert_eq!(manifest["prompt"], PROMPT);
    assert_eq!(manifest["files"].as_object().unwrap().len(), 4);
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.toml");
    std::fs::write(&cfg, "[stage1]\nsteps = 30\nlr = 1e30\nsample_steps = 5\ngrad_clip = 1e300\n").unwrap();
    let o = colorize(&dir.path().join("out"), &["--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn invalid_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = colorize(&dir.path().join("o"), &["--steps", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "# nothing\n").unwrap();
    let o = colorize(&dir.path().join("o"), &["--negatives", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = diffcolor(&["colorize", "--gray", "no/such.png", "--prompt", "x", "--out", "o"]);
    assert_eq!(o.status.code(), Some(2));

    let o = Command::new(env!("CARGO_BIN_EXE_diffcolor"))
        .args(["colorize", "--gray", asset("assets/sample_gray.png").to_str().unwrap(), "--prompt", "x", "--out"])
        .arg(dir.path().join("o"))
        .env("DIFFCOLOR_BACKEND", "stable-diffusion")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not available"));
}

#[test]
fn edit_session_build_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(colorize(&run, &["--steps", "40"]).status.code(), Some(0));
    let session = dir.path().join("session");
    let (image, gray) = (run.join("x_pri_aligned.png"), asset("assets/sample_gray.png"));
    let o = diffcolor(&[
        "edit-session",
        "build",
        "--image",
        image.to_str().unwrap(),
        "--gray",
        gray.to_str().unwrap(),
        "--prompt",
        PROMPT,
        "--objects",
        "square,triangle",
        "--out",
        session.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = session.to_str().unwrap();

    // η = 0 at the stored seed is the stored reconstruction
    let renders = dir.path().join("renders");
    let r = renders.to_str().unwrap();
    let o = diffcolor(&["edit-session", "render", "--session", s, "--eta", "0", "--out", r]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(renders.join("render_eta0.000_seed0.png")).unwrap(),
        std::fs::read(session.join("reconstruction.png")).unwrap()
    );

    let o = diffcolor(&["edit-session", "render", "--session", s, "--colors", "square=green", "--variants", "8", "--out", r]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut names: Vec<String> = std::fs::read_dir(&renders)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("variant"))
        .collect();
    names.sort();
    assert_eq!(names.len(), 8);
    let etas: Vec<f64> = names.iter().map(|n| n.split("_eta").nth(1).unwrap()[..5].parse().unwrap()).collect();
    assert_eq!(etas.first(), Some(&0.7));
    assert_eq!(etas.last(), Some(&0.975));
    assert!(etas.windows(2).all(|w| w[0] < w[1]));

    let o = diffcolor(&["edit-session", "render", "--session", s, "--colors", "giraffe=red", "--out", r]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("giraffe"));
    let o = diffcolor(&["edit-session", "render", "--session", s, "--colors", "square=red", "--eta", "1.5", "--out", r]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::remove_file(session.join("finetuned.ckpt")).unwrap();
    let o = diffcolor(&["edit-session", "render", "--session", s, "--out", r]);
    assert_eq!(o.status.code(), Some(4));
    let o = diffcolor(&["edit-session", "render", "--session", dir.path().join("nothing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

fn write_set(dir: &Path, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, s) in diffcolor::synthetic::colored_shapes(4, 32, seed).into_iter().enumerate() {
        s.image.save(dir.join(format!("{i}.png"))).unwrap();
    }
}

#[test]
fn eval_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (refs, other, out) = (dir.path().join("refs"), dir.path().join("other"), dir.path().join("report"));
    write_set(&refs, 1);
    write_set(&other, 2);
    let (r, o_, out_s) = (refs.to_str().unwrap(), other.to_str().unwrap(), out.to_str().unwrap());

    let o = diffcolor(&["eval", "--outputs", r, "--refs", r, "--out", out_s, "--label", "self"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("file,fid,psnr,ssim,lpips,clip"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("| self |"));

    let o = diffcolor(&["eval", "--outputs", o_, "--refs", r, "--out", out_s]);
    assert_eq!(o.status.code(), Some(0));

    std::fs::remove_file(other.join("3.png")).unwrap();
    let o = diffcolor(&["eval", "--outputs", r, "--refs", o_, "--out", out_s]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("3.png"));
}
