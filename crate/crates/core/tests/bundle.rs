use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use fsda::oracle::{dare_residual, dense_solve};
use fsda::{gen_instance, read_problem, solve, write_problem, FsdaError, Role, SolverConfig};

fn sample() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/sample4")
}

fn copy_sample(to: &Path) {
    for e in fs::read_dir(sample()).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

#[test]
fn sample_bundle_reads_as_documented() {
    let p = read_problem(&sample()).unwrap();
    assert_eq!(p.n(), 4);
    assert_eq!(p.m_a(), 1);
    assert_eq!(p.meta.get("band").map(String::as_str), Some("1"));

    let a = DMatrix::from_fn(4, 4, |i, j| match j as isize - i as isize {
        0 => 0.5,
        1 => 0.1,
        -1 => -0.1,
        _ => 0.0,
    });
    let g = DMatrix::from_fn(4, 4, |i, j| match i.abs_diff(j) {
        0 => 1.0,
        1 => 0.25,
        _ => 0.0,
    });
    let h = DMatrix::identity(4, 4) * 2.0;
    let l1 = DVector::from_vec(vec![0.1, 0.0, 0.0, 0.1]);
    let l2 = DVector::from_vec(vec![0.0, 0.2, 0.0, 0.0]);
    assert_eq!(p.da0.to_dense(), a);
    assert_eq!(p.dg0.to_dense(), g);
    assert_eq!(p.dh0.to_dense(), h);
    assert_eq!(p.la10.data().column(0), l1);
    assert_eq!(p.la20.data().column(0), l2);
    assert_eq!(p.la10.segments()[0].role, Role::A1Tail);
    assert_eq!(p.la20.segments()[0].role, Role::A2Tail);
    assert_eq!(p.a_dense(), a + &l1 * l2.transpose());
}

#[test]
fn sample_bundle_solves() {
    let p = read_problem(&sample()).unwrap();
    let sol = solve(&p, &SolverConfig::default()).unwrap();
    assert!(sol.converged);
    let x = sol.x_dense().unwrap();
    let (want, _, _) = dense_solve(&p.a_dense(), &p.g_dense(), &p.h_dense()).unwrap();
    assert!((&x - &want).norm() <= 1e-10 * want.norm());
    assert!(dare_residual(&x, &p.a_dense(), &p.g_dense(), &p.h_dense()).unwrap() <= 1e-10 * x.norm());
}

#[test]
fn truncated_factor_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    copy_sample(dir.path());
    let path = dir.path().join("LA1.talf");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(read_problem(dir.path()).is_err());
}

#[test]
fn short_matrix_market_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    copy_sample(dir.path());
    let path = dir.path().join("DA.mtx");
    let text = fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text.lines().take(text.lines().count() - 2).collect();
    fs::write(&path, kept.join("\n")).unwrap();
    match read_problem(dir.path()) {
        Err(FsdaError::Parse { .. }) => {}
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn missing_bundle_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_problem(&dir.path().join("nope")), Err(FsdaError::Io(_))));
}

#[test]
fn generated_bundle_round_trips() {
    let p = gen_instance(40, 2, 2, 0.7, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_problem(&p, dir.path()).unwrap();
    let q = read_problem(dir.path()).unwrap();
    assert_eq!(p, q);
}

#[test]
fn meta_order_must_match() {
    let dir = tempfile::tempdir().unwrap();
    copy_sample(dir.path());
    fs::write(dir.path().join("meta"), "n=5\n").unwrap();
    assert!(matches!(read_problem(dir.path()), Err(FsdaError::Dimension(_))));
}
