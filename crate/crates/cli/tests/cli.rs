use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use cdiff::data::load_demos;

fn cdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdiff"))
        .args(args)
        .env_remove("CDIFF_LLM_URL")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = cdiff(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    cdiff(args).status.code().unwrap()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Door models trained once per test binary with a cheap recipe.
fn door_models() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        ok(&["gen-demos", "--out", s(&dir), "--demos", "40"]);
        ok(&["train", "--out", s(&dir), "--train-steps", "3000", "--set", "dyn_steps=1000", "--conditional"]);
        dir
    })
}

#[test]
fn help_lists_every_flag() {
    let expect: &[(&str, &[&str])] = &[
        ("gen-demos", &["--demos", "--demo-seed"]),
        ("train", &["--demo-path", "--train-steps", "--horizon", "--conditional"]),
        ("plan", &["--mode", "--goal", "--seed", "--alpha", "--omega", "--model-dir", "--program"]),
        ("eval", &["--modes", "--goals", "--seeds", "--tries", "--alpha", "--program"]),
        ("guidance-gen", &["--fixture", "--instruction", "--max-rounds", "--two-stage"]),
        ("report", &["--input", "--format"]),
    ];
    for (cmd, flags) in expect {
        let help = ok(&[cmd, "--help"]);
        for f in flags.iter().chain(&["--config", "--set", "--out", "--env"]) {
            assert!(help.contains(f), "{cmd} --help lacks {f}");
        }
    }
    let top = ok(&["--help"]);
    for cmd in ["gen-demos", "train", "plan", "eval", "guidance-gen", "report"] {
        assert!(top.contains(cmd));
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&["plan", "--bogus"]), 2);
    assert_eq!(code(&["fly"]), 2);
    assert_eq!(code(&["gen-demos", "--env", "kitchen"]), 2);
    assert_eq!(code(&["plan", "--set", "colour=red"]), 2);
    assert_eq!(code(&["plan", "--set", "novalue"]), 2);
}

#[test]
fn gen_demos_writes_episodes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = ok(&["gen-demos", "--env", "door1d", "--out", s(&a), "--demos", "50"]);
    assert!(out.contains("episodes=50"));
    ok(&["gen-demos", "--env", "door1d", "--out", s(&b), "--demos", "50"]);
    assert_eq!(load_demos(&a.join("demos.cdd")).unwrap().episodes.len(), 50);
    assert_eq!(fs::read(a.join("demos.cdd")).unwrap(), fs::read(b.join("demos.cdd")).unwrap());
    // Same config and seeds give the same manifest, hashes included.
    let ma = fs::read_to_string(a.join("gen-demos.manifest.json")).unwrap();
    let mb = fs::read_to_string(b.join("gen-demos.manifest.json")).unwrap();
    assert_eq!(ma.replace(s(&a), "X"), mb.replace(s(&b), "X"));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "env = hammer1d\ndemos = 7\ndemo_seed = 3\n").unwrap();
    let out = ok(&["gen-demos", "-c", s(&cfg), "--out", s(dir.path()), "--demos", "2"]);
    assert!(out.contains("episodes=2"), "{out}");
    let m = fs::read_to_string(dir.path().join("gen-demos.manifest.json")).unwrap();
    assert!(m.contains("\"env\": \"hammer1d\"") && m.contains("\"demo_seed\": \"3\""));
    assert!(m.contains(s(&cfg)), "config file hash missing from manifest");
}

#[test]
fn train_writes_finite_decreasing_loss_log() {
    let dir = door_models();
    let log = fs::read_to_string(dir.join("train_loss.csv")).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("denoiser,"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 3000);
    assert!(losses.iter().all(|l| l.is_finite()));
    let tail: f64 = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
    assert!(tail < losses[0], "{} -> {tail}", losses[0]);
    for f in ["denoiser.cdn", "conditional.cdn", "dynamics.cdy", "models.json", "train.manifest.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn train_without_demos_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["train", "--out", s(dir.path())]), 3);
}

#[test]
fn plan_succeeds_on_training_goal_and_echoes_alpha() {
    let dir = door_models();
    let work = tempfile::tempdir().unwrap();
    let md = format!("model_dir={}", s(dir));
    let out = ok(&["plan", "--out", s(work.path()), "--set", &md, "--seed", "0"]);
    assert!(out.contains("success=true"), "{out}");
    let out = ok(&["plan", "--out", s(work.path()), "--set", &md, "--alpha", "12.5", "--seed", "1"]);
    assert!(out.contains("alpha=12.5"), "{out}");
    assert!(work.path().join("rollout.jsonl").exists());
    assert_eq!(code(&["plan", "--out", s(work.path()), "--set", &md, "--goal", "9"]), 2);
}

#[test]
fn cfree_needs_conditional_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["gen-demos", "--env", "hammer1d", "--out", s(p), "--demos", "2"]);
    ok(&[
        "train",
        "--env",
        "hammer1d",
        "--out",
        s(p),
        "--train-steps",
        "20",
        "--set",
        "dyn_steps=20",
        "--set",
        "hidden=16",
    ]);
    assert_eq!(code(&["plan", "--env", "hammer1d", "--out", s(p), "--mode", "cfree"]), 2);
    assert_eq!(code(&["plan", "--env", "disk", "--out", s(p)]), 2);
}

#[test]
fn eval_is_byte_reproducible_and_reports_round_trip() {
    let dir = door_models();
    let md = format!("model_dir={}", s(dir));
    let work = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = work.path().join(name);
        ok(&[
            "eval",
            "--out",
            s(&out),
            "--set",
            &md,
            "--modes",
            "full,inpaint,cfree",
            "--goals",
            "0.5236;1.5708",
            "--seeds",
            "2",
            "--tries",
            "2",
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["results.csv", "results.md", "rollouts.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    let echoed = ok(&["report", "--out", s(&a), "--format", "csv"]);
    assert_eq!(echoed, csv);
    let md_out = ok(&["report", "--out", s(&a)]);
    assert_eq!(md_out.lines().count(), 2 + 6);
}

#[test]
fn guidance_gen_with_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["guidance-gen", "--out", s(dir.path()), "--fixture", &fixture("door_repair.txt")]);
    assert!(out.contains("rounds=2"), "{out}");
    let script = fs::read_to_string(dir.path().join("guidance.gs")).unwrap();
    assert_eq!(script.lines().count(), 3);

    let single = dir.path().join("single.txt");
    fs::write(&single, "goal (phase = post): sqnorm(obs[H-1, 3] - goal[0])\n").unwrap();
    let out = ok(&["guidance-gen", "--out", s(dir.path()), "--fixture", s(&single)]);
    assert!(out.contains("rounds=1"), "{out}");

    assert_eq!(code(&["guidance-gen", "--out", s(dir.path()), "--fixture", &fixture("door_invalid.txt")]), 4);
    assert_eq!(code(&["guidance-gen", "--out", s(dir.path())]), 2);
    assert_eq!(code(&["guidance-gen", "--out", s(dir.path()), "--fixture", "/nonexistent/fixture.txt"]), 2);
}

#[test]
fn unreachable_endpoint_is_external_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cdiff"))
        .args(["guidance-gen", "--out", s(dir.path())])
        .env("CDIFF_LLM_URL", "http://127.0.0.1:9/v1/chat/completions")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}
