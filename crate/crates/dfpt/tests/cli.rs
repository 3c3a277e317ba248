use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dfpt::config::RunConfig;

const CONFIG: &str = "[data]\nper_class = 10\nsize = 8\n\n[pretrain]\nepochs = 1\nmilestones = []\n\n[train]\nepochs = 1\nmilestones = []\nbatch_size = 16\n";

fn dfpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfpt")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dfpt(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: PathBuf,
    teacher: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = root.join("c.cfg");
    std::fs::write(&cfg, CONFIG).unwrap();
    let t1 = root.join("runs/t1");
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&t1)]);
    Fixture {
        teacher: t1.join("teacher.ckpt"),
        _dir: dir,
        root,
        cfg,
    }
}

#[test]
fn pretrain_writes_self_describing_run_dir() {
    let f = fixture();
    let t1 = f.root.join("runs/t1");
    for file in ["teacher.ckpt", "metrics.csv", "config.toml"] {
        assert!(t1.join(file).is_file(), "{file}");
    }
    let resolved = std::fs::read_to_string(t1.join("config.toml")).unwrap();
    assert!(resolved.contains("[provenance]") && resolved.contains("teacher_lr_scale = "));
    let again = f.root.join("runs/t2");
    ok(&["pretrain", "--config", s(&f.cfg), "--out", s(&again)]);
    let last = |p: &Path| std::fs::read_to_string(p.join("metrics.csv")).unwrap().lines().last().unwrap().to_string();
    assert_eq!(last(&t1), last(&again));
}

#[test]
fn distill_artifacts_per_method() {
    let f = fixture();
    let d = f.root.join("runs/dfpt");
    let line = ok(&["distill", "--method", "dfpt", "--teacher", s(&f.teacher), "--config", s(&f.cfg), "--out", s(&d)]);
    assert!(line.contains("top1=") && line.contains("prompt_top1="), "{line}");
    for file in ["student.ckpt", "prompt.ckpt", "metrics.csv"] {
        assert!(d.join(file).is_file(), "{file}");
    }
    let k = f.root.join("runs/kd");
    ok(&["distill", "--method", "kd", "--teacher", s(&f.teacher), "--config", s(&f.cfg), "--out", s(&k)]);
    assert!(k.join("student.ckpt").is_file() && !k.join("prompt.ckpt").exists());

    let t = f.root.join("runs/dagger");
    ok(&[
        "distill", "--method", "dfpt-t", "--teacher-lr-scale", "0.02", "--teacher", s(&f.teacher), "--config",
        s(&f.cfg), "--out", s(&t),
    ]);
    let resolved = RunConfig::load(&t.join("config.toml")).unwrap();
    assert_eq!(resolved.train.teacher_lr_scale, 0.02);
    assert_eq!(resolved.train.method, "dfpt-t");
    let text = std::fs::read_to_string(t.join("config.toml")).unwrap();
    assert!(text.contains("teacher.ckpt"), "teacher input hash missing");
}

#[test]
fn exit_codes() {
    let f = fixture();
    let missing = dfpt(&["pretrain", "--config", "/nonexistent/c.cfg"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("Usage"));
    assert_eq!(dfpt(&["distill", "--bogus"]).status.code(), Some(2));

    let bad = f.root.join("bad.cfg");
    std::fs::write(&bad, format!("{CONFIG}[model]\nteacher = \"tiny-vgg-T\"\n")).unwrap();
    let out = f.root.join("runs/x");
    let mismatch = dfpt(&["distill", "--method", "kd", "--teacher", s(&f.teacher), "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(mismatch.status.code(), Some(3), "{}", String::from_utf8_lossy(&mismatch.stderr));

    let unknown = f.root.join("unknown.cfg");
    std::fs::write(&unknown, "[train]\nlamda = 0.5\n").unwrap();
    assert_eq!(dfpt(&["pretrain", "--config", s(&unknown)]).status.code(), Some(2));
}

#[test]
fn relative_run_dirs_use_root_env() {
    let f = fixture();
    let out = Command::new(env!("CARGO_BIN_EXE_dfpt"))
        .env("DFPT_RUN_ROOT", &f.root)
        .args(["pretrain", "--config", s(&f.cfg), "--out", "rel/t"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(f.root.join("rel/t/teacher.ckpt").is_file());
}

#[test]
fn gendata_eval_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["gendata", "--classes", "10", "--per-class", "20", "--size", "16", "--seed", "7", "--out", s(d)]);
    }
    for split in ["train", "test"] {
        assert_eq!(std::fs::read(a.join(split)).unwrap(), std::fs::read(b.join(split)).unwrap());
    }

    let f = fixture();
    let model = f.teacher.clone();
    let cfg = f.root.join("g.cfg");
    std::fs::write(&cfg, CONFIG.replace("size = 8", "size = 16").replace("per_class = 10", "per_class = 20")).unwrap();
    let t = f.root.join("runs/t16");
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&t)]);
    let line = ok(&["eval", "--model", s(&t.join("teacher.ckpt")), "--data", s(&a.join("test"))]);
    let v: f64 = line.trim().strip_prefix("top1=").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&v));
    assert!(model.is_file());

    let d = f.root.join("runs/p");
    ok(&["distill", "--method", "dfpt", "--teacher", s(&f.teacher), "--config", s(&f.cfg), "--out", s(&d)]);
    let svg = f.root.join("fig.svg");
    ok(&["plot", "--csv", s(&d.join("metrics.csv")), "--cols", "top1,prompt_top1", "--out", s(&svg)]);
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && text.matches("<polyline").count() == 2);
}

#[test]
fn analyze_reports() {
    let out = ok(&["analyze", "flops", "--arch", "resnet32x4", "--prompt", "r1=4,4,4,4", "r2=0.5", "k=3,5,7"]);
    let summary = out.lines().last().unwrap();
    assert!(summary.contains("prompt_params=172720") && summary.contains("fusion_params=87040"), "{summary}");

    let dir = tempfile::tempdir().unwrap();
    let rows = dir.path().join("rows.csv");
    std::fs::write(&rows, "method,teacher,student\nkd,79.42,73.33\ndfpt,79.42,75.10\n").unwrap();
    let csv = dir.path().join("gap.csv");
    let text = ok(&["analyze", "gap", "--rows", s(&rows), "--csv", s(&csv)]);
    assert!(text.contains("average"));
    assert!(std::fs::read_to_string(&csv).unwrap().contains("kd,79.42,73.33,6.09"));

    let f = fixture();
    let (a, b) = (f.root.join("runs/a"), f.root.join("runs/b"));
    for d in [&a, &b] {
        ok(&["distill", "--method", "dfpt", "--teacher", s(&f.teacher), "--config", s(&f.cfg), "--out", s(d)]);
    }
    let table = ok(&["analyze", "similarity", "--a", s(&a.join("metrics.csv")), "--b", s(&b.join("metrics.csv"))]);
    assert!(table.starts_with("epoch,a_kl_s_t"));
    assert!(table.lines().nth(1).unwrap().ends_with(",0,0"), "{table}");
}
