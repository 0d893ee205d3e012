use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lilu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lilu")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lilu(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn ok_in(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_lilu")).current_dir(dir).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(args: &[&str]) -> i32 {
    lilu(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().display().to_string(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn generate(dir: &Path) {
    ok(&["generate", "--out", p(dir), "--grid", "5", "--train", "3", "--val", "2", "--test", "2", "--seed", "4"]);
}

/// generate, train for two epochs, evaluate. Paths are relative so the
/// run manifests of two roots can match.
fn pipeline(root: &Path) {
    ok_in(root, &["generate", "--out", "data", "--grid", "5", "--train", "3", "--val", "2", "--test", "2", "--seed", "4"]);
    ok_in(root, &["train", "--data", "data", "--out", "model", "--epochs", "2", "--seed", "1"]);
    ok_in(root, &["eval", "--data", "data", "--out", "eval", "--model", "model/model.json", "--no-timing"]);
}

#[test]
fn full_pipeline_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (x, y) = (tree(a.path()), tree(b.path()));
    assert_eq!(x.len(), y.len());
    for (p, q) in x.iter().zip(&y) {
        assert_eq!(p, q, "{} differs", p.0);
    }

    let model = a.path().join("model");
    for f in ["model.json", "last_model.json", "history.csv", "run_manifest.json"] {
        assert!(model.join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(model.join("history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,mean_train_loss,val_iterations"));
    assert_eq!(history.lines().count(), 3);

    let eval = a.path().join("eval");
    let report = fs::read_to_string(eval.join("report.csv")).unwrap();
    let methods: Vec<&str> = report.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["none", "jacobi", "ilu0", "learned"]);
    for m in &methods {
        assert!(eval.join(format!("hist_{m}.csv")).exists());
    }
    assert_eq!(fs::read_to_string(eval.join("cells.csv")).unwrap().lines().count(), 1 + 2 * 4);
}

#[test]
fn precond_list_selects_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data);
    let out = dir.path().join("eval");
    let printed = ok(&["eval", "--data", p(&data), "--out", p(&out), "--precond", "none,ilu0", "--no-spectral"]);
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    assert!(report.lines().nth(1).unwrap().starts_with("none,"));
    assert!(report.lines().nth(2).unwrap().starts_with("ilu0,"));
    assert!(printed.contains("ilu0"));
}

#[test]
fn zero_epochs_save_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data);
    let out = dir.path().join("model");
    ok(&["train", "--data", p(&data), "--out", p(&out), "--epochs", "0"]);
    let best = fs::read(out.join("model.json")).unwrap();
    assert_eq!(best, fs::read(out.join("last_model.json")).unwrap());
    assert_eq!(fs::read_to_string(out.join("history.csv")).unwrap().lines().count(), 1);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.cfg");
    fs::write(&cfg, "# desk set\ngrid = 4\ntrain = 2\nval = 1\ntest = 1\nseed = 9\n").unwrap();
    let out = dir.path().join("data");
    ok(&["generate", "--config", p(&cfg), "--out", p(&out), "--grid", "3"]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["config"]["grid"], "3");
    assert_eq!(manifest["config"]["seed"], "9");
    assert_eq!(manifest["config"]["train"], "2");

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "grid = 4\ncolour = blue\n").unwrap();
    assert_eq!(code(&["generate", "--config", p(&bad), "--out", p(&out)]), 2);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data);
    let out = p(dir.path());
    assert_eq!(code(&["train", "--data", p(&data), "--out", out, "--loss", "median"]), 2);
    assert_eq!(code(&["train", "--data", p(&data), "--out", out, "--lr", "-1"]), 2);
    assert_eq!(code(&["eval", "--data", p(&data), "--out", out, "--precond", "learned"]), 2);
    assert_eq!(code(&["eval", "--data", p(&data), "--out", out, "--precond", "ilu7"]), 2);
    assert_eq!(code(&["train", "--data", p(&dir.path().join("missing")), "--out", out]), 3);
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&["eval", "--data", p(&data), "--out", out, "--model", p(&missing)]), 3);
    assert_eq!(code(&["generate"]), 2);
}

#[test]
fn spectrum_dense_and_edges_only() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data);
    let out = dir.path().join("spec");
    ok(&["spectrum", "--data", p(&data), "--out", p(&out), "--precond", "none,ilu0"]);
    let sv = fs::read_to_string(out.join("sv_none.csv")).unwrap();
    assert_eq!(sv.lines().next(), Some("index,sigma"));
    assert_eq!(sv.lines().count(), 1 + 25);
    let edges = fs::read_to_string(out.join("edges.csv")).unwrap();
    assert_eq!(edges.lines().count(), 3);

    let capped = lilu(&["spectrum", "--data", p(&data), "--out", p(&out), "--dense-cap", "10"]);
    assert_eq!(capped.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&capped.stderr).contains("--edges-only"));

    let fast = dir.path().join("fast");
    ok(&["spectrum", "--data", p(&data), "--out", p(&fast), "--dense-cap", "10", "--edges-only", "--precond", "none"]);
    let edges = fs::read_to_string(fast.join("edges.csv")).unwrap();
    assert_eq!(edges.lines().next(), Some("method,sigma_min,sigma_max,sigma_min_converged,sigma_max_converged"));
    let row: Vec<&str> = edges.lines().nth(1).unwrap().split(',').collect();
    let (lo, hi): (f64, f64) = (row[1].parse().unwrap(), row[2].parse().unwrap());
    assert!(0.0 < lo && lo < hi);
}

#[test]
fn help_lists_the_subcommands() {
    let help = ok(&["--help"]);
    for sub in ["generate", "train", "eval", "spectrum"] {
        assert!(help.contains(sub));
    }
    assert!(ok(&["train", "--help"]).contains("--hutchinson-samples"));
}
