use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data]
normal_classes = [0, 1]
classes = 4
image_size = 8
train_per_class = 4
test_per_class = 2

[model]
depth = 1
dim = 8
heads = 2
patch = 2
proj_dim = 4

[schedule]
epochs = 1

[boundary]
pca_dims = 4
"#;

fn futureg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_futureg"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FUTUREG_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(futureg(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(futureg(&["gradcheck", "--module", "decoder"], dir.path()).status.code(), Some(1));
    assert_eq!(futureg(&["train", "--config", "missing.toml"], dir.path()).status.code(), Some(2));
    assert_eq!(futureg(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[model]\nheads = 3\ndim = 8\n").unwrap();
    let o = futureg(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_single_module_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = futureg(&["gradcheck", "--module", "cfg-refine"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("cfg-refine") && stdout(&o).contains("ok"));
}

#[test]
fn train_eval_score_round() {
    let dir = tiny_dir();
    let p = dir.path();
    let o = futureg(&["train", "--config", "tiny.toml", "--out", "run"], p);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.ckpt", "loss.csv", "loss.svg"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }

    let o = futureg(
        &["eval", "--checkpoint", "run/model.ckpt", "--out", "m.csv", "--error-maps", "maps"],
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("auroc "));
    let metrics = fs::read_to_string(p.join("m.csv")).unwrap();
    // 2 normal + 2 anomalous classes, 2 test images each, plus a header
    assert!(metrics.lines().count() > 8);
    assert_eq!(fs::read_dir(p.join("maps")).unwrap().count(), 8);

    let mut pgm = b"P5 8 8 255\n".to_vec();
    pgm.extend((0..64u8).map(|i| i * 4));
    fs::write(p.join("x.pgm"), pgm).unwrap();
    let o = futureg(&["score", "--checkpoint", "run/model.ckpt", "--image", "x.pgm", "--error-map", "e.csv"], p);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    assert!(line.starts_with("score ") && line.contains("predicted_class "));
    assert_eq!(fs::read_to_string(p.join("e.csv")).unwrap().lines().count(), 4);

    fs::write(p.join("big.pgm"), [b"P5 4 4 255\n".as_slice(), &[0u8; 16]].concat()).unwrap();
    let o = futureg(&["score", "--checkpoint", "run/model.ckpt", "--image", "big.pgm"], p);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn boundary_stats_from_checkpoint_and_files() {
    let dir = tiny_dir();
    let p = dir.path();
    assert!(futureg(&["train", "--config", "tiny.toml", "--out", "run"], p).status.success());
    let o = futureg(
        &["boundary-stats", "--checkpoint", "run/model.ckpt", "--dump-embeddings", "emb", "--out", "d1.csv"],
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("multi exceeds single"));
    let o = futureg(
        &[
            "boundary-stats",
            "--single",
            "emb/single.bin",
            "--multi",
            "emb/multi.bin",
            "--anomalies",
            "emb/anomalies.bin",
            "--components",
            "2",
            "--pca-dims",
            "4",
            "--out",
            "d2.csv",
        ],
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(p.join("d2.csv")).unwrap();
    assert!(csv.starts_with("id,single_density,single_log_density,multi_density,multi_log_density\n"));
    assert!(csv.contains("components,2"));
}

#[test]
fn entropy_orders_noise_above_digits() {
    let dir = tiny_dir();
    let p = dir.path();
    let mean = |o: &Output| -> f64 { stdout(o).split_whitespace().nth(2).unwrap().parse().unwrap() };
    let digits = futureg(&["entropy", "--config", "tiny.toml", "--out", "a.csv"], p);
    let noise = futureg(&["entropy", "--config", "tiny.toml", "--noise", "20", "--out", "b.csv"], p);
    assert!(digits.status.success() && noise.status.success());
    assert!(mean(&digits) < mean(&noise));
    assert!(fs::read_to_string(p.join("b.csv")).unwrap().starts_with("id,label,entropy\n"));
}

#[test]
fn seed_variable_overrides_config() {
    let dir = tiny_dir();
    let p = dir.path();
    let run = |seed: Option<&str>, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_futureg"));
        c.args(["entropy", "--config", "tiny.toml", "--noise", "5", "--out", out]).current_dir(p);
        match seed {
            Some(s) => c.env("FUTUREG_SEED", s),
            None => c.env_remove("FUTUREG_SEED"),
        };
        c.output().unwrap()
    };
    assert!(run(None, "a.csv").status.success());
    assert!(run(Some("3"), "b.csv").status.success());
    assert!(run(Some("4"), "c.csv").status.success());
    let read = |f: &str| fs::read_to_string(p.join(f)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
    assert_eq!(run(Some("x"), "d.csv").status.code(), Some(1));
}

#[test]
fn ablate_writes_one_row_per_setting() {
    let dir = tiny_dir();
    let p = dir.path();
    let o = futureg(&["ablate", "--config", "tiny.toml", "--axis", "cfg", "--out", "a.csv"], p);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(p.join("a.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains("cfg=on") && csv.contains("cfg=off"));
}
