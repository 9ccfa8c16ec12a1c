use std::path::Path;
use std::process::{Command, Output};

fn fsda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsda"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn fsda")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn gen(dir: &Path, n: &str, rho: &str) -> String {
    let out = dir.join("bundle");
    let o = fsda(&["gen", "--n", n, "--band", "2", "--ma", "2", "--rho", rho, "--seed", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.to_str().unwrap().to_string()
}

#[test]
fn gen_writes_a_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let b = gen(dir.path(), "40", "0.6");
    for f in ["meta", "DA.mtx", "DG.mtx", "DH.mtx", "LA1.talf", "LA2.talf"] {
        assert!(Path::new(&b).join(f).is_file(), "{f} missing");
    }
}

#[test]
fn bad_usage_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    assert_eq!(code(&fsda(&["gen", "--n", "10", "--band", "1", "--ma", "1", "--rho", "0.5"])), 2);
    assert_eq!(code(&fsda(&["gen", "--n", "10", "--band", "1", "--ma", "1", "--rho", "1.5", "--out", out])), 2);
    assert_eq!(code(&fsda(&["gen", "--n", "10", "--band", "10", "--ma", "1", "--rho", "0.5", "--out", out])), 2);
    assert_eq!(code(&fsda(&["frobnicate"])), 2);
}

#[test]
fn solve_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let b = gen(dir.path(), "60", "0.6");
    let out = dir.path().join("sol");
    let o = fsda(&["solve", &b, "--check-dense", "--out", out.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}\n{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout.contains("converged at k ="));
    assert!(stdout.contains("dense residual"));
    for f in ["DH.mtx", "LH.talf", "KH.kern", "trace.csv", "cost.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("k,b_rres,lr_rres,"));
}

#[test]
fn solve_rejects_unreadable_bundles() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(code(&fsda(&["solve", missing.to_str().unwrap()])), 2);

    let b = gen(dir.path(), "20", "0.6");
    std::fs::write(Path::new(&b).join("DG.mtx"), "not a matrix\n").unwrap();
    assert_eq!(code(&fsda(&["solve", &b])), 2);
}

#[test]
fn solve_reports_iteration_limit() {
    let dir = tempfile::tempdir().unwrap();
    let b = gen(dir.path(), "40", "0.95");
    let cfg = dir.path().join("cfg");
    std::fs::write(&cfg, "# two steps only\nmax_iter = 2\n").unwrap();
    let o = fsda(&["solve", &b, "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::write(&cfg, "max_iter = zero\n").unwrap();
    assert_eq!(code(&fsda(&["solve", &b, "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn compare_checks_the_deviation() {
    let dir = tempfile::tempdir().unwrap();
    let b = gen(dir.path(), "30", "0.7");
    let o = fsda(&["compare", &b, "--max-k", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max deviation"));

    // Heavy truncation pushes the factored iterates away from the dense ones.
    let cfg = dir.path().join("cfg");
    std::fs::write(&cfg, "tau_g = 0.5\ntau_h = 0.5\n").unwrap();
    let o = fsda(&["compare", &b, "--max-k", "4", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 6, "{}", String::from_utf8_lossy(&o.stdout));
}
