//! Structured problem data, the synthetic instance generator and bundle IO.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::banded::BandedMatrix;
use crate::error::{FsdaError, Result};
use crate::factor::{Role, TallFactor};
use crate::io;
use crate::oracle::{convergence_report, DENSE_LIMIT};

/// `A = DA0 + LA10 LA20^T`, `G = DG0`, `H = DH0`.
#[derive(Clone, Debug, PartialEq)]
pub struct DareProblem {
    pub da0: BandedMatrix,
    pub dg0: BandedMatrix,
    pub dh0: BandedMatrix,
    pub la10: TallFactor,
    pub la20: TallFactor,
    pub meta: BTreeMap<String, String>,
}

impl DareProblem {
    pub fn new(
        da0: BandedMatrix,
        dg0: BandedMatrix,
        dh0: BandedMatrix,
        la10: DMatrix<f64>,
        la20: DMatrix<f64>,
    ) -> Result<Self> {
        let p = DareProblem {
            da0,
            dg0,
            dh0,
            la10: TallFactor::single(la10, Role::A1Tail, 0),
            la20: TallFactor::single(la20, Role::A2Tail, 0),
            meta: BTreeMap::new(),
        };
        p.validate()?;
        Ok(p)
    }

    /// Same as [`DareProblem::new`] for `A = DA0 + LA10 K LA20^T`; the kernel is
    /// absorbed into the second factor (`LA20 K^T`).
    pub fn with_kernel(
        da0: BandedMatrix,
        dg0: BandedMatrix,
        dh0: BandedMatrix,
        la10: DMatrix<f64>,
        ka0: &DMatrix<f64>,
        la20: DMatrix<f64>,
    ) -> Result<Self> {
        if ka0.nrows() != la10.ncols() || ka0.ncols() != la20.ncols() {
            return Err(FsdaError::Dimension("initial kernel does not match factors".into()));
        }
        let l2 = la20 * ka0.transpose();
        Self::new(da0, dg0, dh0, la10, l2)
    }

    /// Banded-only problem.
    pub fn banded(da0: BandedMatrix, dg0: BandedMatrix, dh0: BandedMatrix) -> Result<Self> {
        let n = da0.n();
        Self::new(da0, dg0, dh0, DMatrix::zeros(n, 0), DMatrix::zeros(n, 0))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.da0.n();
        if self.dg0.n() != n || self.dh0.n() != n || self.la10.n() != n || self.la20.n() != n {
            return Err(FsdaError::Dimension("problem parts differ in order".into()));
        }
        if self.la10.cols() != self.la20.cols() {
            return Err(FsdaError::Dimension(format!(
                "low-rank factors have {} and {} columns",
                self.la10.cols(),
                self.la20.cols()
            )));
        }
        if !self.dg0.is_symmetric() || !self.dh0.is_symmetric() {
            return Err(FsdaError::Dimension("DG0 and DH0 must be symmetric".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.da0.n()
    }

    pub fn m_a(&self) -> usize {
        self.la10.cols()
    }

    /// Largest half-bandwidth among the banded inputs.
    pub fn initial_bw(&self) -> usize {
        self.da0.half_bw().max(self.dg0.half_bw()).max(self.dh0.half_bw())
    }

    pub fn a_dense(&self) -> DMatrix<f64> {
        let mut a = self.da0.to_dense();
        if self.m_a() > 0 {
            a += self.la10.data() * self.la20.data().transpose();
        }
        a
    }

    pub fn g_dense(&self) -> DMatrix<f64> {
        self.dg0.to_dense()
    }

    pub fn h_dense(&self) -> DMatrix<f64> {
        self.dh0.to_dense()
    }
}

fn symmetric_part(m: &BandedMatrix) -> Result<BandedMatrix> {
    Ok(m.add(&m.transpose())?.scaled(0.5))
}

/// `c B B^T` with `B` lower banded of bandwidth `band`.
fn psd_band(rng: &mut ChaCha8Rng, n: usize, band: usize, c: f64) -> Result<BandedMatrix> {
    let mut b = BandedMatrix::with_bandwidths(n, band, 0);
    for i in 0..n {
        b.set(i, i, rng.gen_range(0.3..1.0));
        for d in 1..=band.min(i) {
            b.set(i, i - d, rng.gen_range(-1.0..1.0) * 0.3 / band as f64);
        }
    }
    symmetric_part(&b.mul(&b.transpose(), 0.0)?.scaled(c))
}

fn unit_columns(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<f64> {
    let mut l = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let scale = 0.1 / (n as f64).sqrt();
    for mut c in l.column_iter_mut() {
        let nrm = c.norm();
        c *= scale / nrm;
    }
    l
}

/// Growth rate of `|| A^k x ||` between iterations 100 and 300.
fn power_estimate(rng: &mut ChaCha8Rng, da: &BandedMatrix, l1: &DMatrix<f64>, l2: &DMatrix<f64>) -> Result<f64> {
    let n = da.n();
    let mut x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    x /= x.norm();
    let mut log_growth = 0.0;
    for it in 0..300 {
        let mut y = da.mul_dense(&x)?;
        if l1.ncols() > 0 {
            y += l1 * (l2.transpose() * &x);
        }
        let nrm = y.norm();
        if nrm == 0.0 {
            return Ok(0.0);
        }
        if it >= 100 {
            log_growth += nrm.ln();
        }
        x = y / nrm;
    }
    Ok((log_growth / 200.0).exp())
}

fn candidate(n: usize, band: usize, m_a: usize, rho: f64, rng: &mut ChaCha8Rng) -> Result<(DareProblem, f64)> {
    let mut da = BandedMatrix::with_bandwidths(n, band, band);
    let off = 0.2 / band.max(1) as f64;
    for i in 0..n {
        for j in i.saturating_sub(band)..=(i + band).min(n - 1) {
            let v: f64 = rng.gen_range(-1.0..1.0);
            da.set(i, j, if i == j { v } else { v * off });
        }
    }
    let l1 = unit_columns(rng, n, m_a);
    let l2 = unit_columns(rng, n, m_a);
    let mut est = 0.0;
    for _ in 0..2 {
        est = power_estimate(rng, &da, &l1, &l2)?;
        if est > 0.0 {
            da = da.scaled(rho / est);
        }
    }
    let dg = psd_band(rng, n, band, 0.5)?;
    let dh = psd_band(rng, n, band, 0.5)?;
    let p = DareProblem::new(da, dg, dh, l1, l2)?;
    Ok((p, est))
}

/// Deterministic synthetic instance; dense validation when `n <= 256`.
pub fn gen_instance(n: usize, band: usize, m_a: usize, rho_target: f64, seed: u64) -> Result<DareProblem> {
    if n < 2 || band >= n || band == 0 {
        return Err(FsdaError::Config(format!("need n >= 2 and 1 <= band < n, got n={n}, band={band}")));
    }
    if m_a >= n {
        return Err(FsdaError::Config(format!("m_a = {m_a} must be smaller than n = {n}")));
    }
    if !(rho_target > 0.0 && rho_target < 1.0) {
        return Err(FsdaError::Config(format!("rho_target must lie in (0, 1), got {rho_target}")));
    }
    const ATTEMPTS: usize = 10;
    let mut diagnostics = Vec::new();
    for attempt in 0..ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let (mut p, est) = candidate(n, band, m_a, rho_target, &mut rng)?;
        let mut meta = BTreeMap::new();
        meta.insert("n".to_string(), n.to_string());
        meta.insert("band".to_string(), band.to_string());
        meta.insert("m_a".to_string(), m_a.to_string());
        meta.insert("seed".to_string(), seed.to_string());
        meta.insert("rho_target".to_string(), format!("{rho_target:e}"));
        meta.insert("attempt".to_string(), attempt.to_string());
        meta.insert("rho_estimate".to_string(), format!("{est:e}"));
        if n <= DENSE_LIMIT {
            match convergence_report(&p.a_dense(), &p.g_dense(), &p.h_dense()) {
                Ok(r) if r.is_valid() => {
                    meta.insert("rho_s".to_string(), format!("{:e}", r.rho_s));
                    meta.insert("rho_t".to_string(), format!("{:e}", r.rho_t));
                }
                Ok(r) => {
                    diagnostics.push(format!("attempt {attempt}: rho_s={:.3e} rho_t={:.3e}", r.rho_s, r.rho_t));
                    continue;
                }
                Err(e) => {
                    diagnostics.push(format!("attempt {attempt}: {e}"));
                    continue;
                }
            }
        }
        p.meta = meta;
        return Ok(p);
    }
    Err(FsdaError::Generation {
        attempts: ATTEMPTS,
        diagnostics: diagnostics.join("; "),
    })
}

fn format_meta(meta: &BTreeMap<String, String>) -> String {
    meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn parse_meta(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut meta = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (k, v) = t.split_once('=').ok_or_else(|| FsdaError::Parse {
            file: origin.into(),
            location: format!("line {}", no + 1),
            msg: "expected key=value".into(),
        })?;
        meta.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(meta)
}

/// Writes `meta`, `DA.mtx`, `DG.mtx`, `DH.mtx`, `LA1.talf`, `LA2.talf` into `dir`.
pub fn write_problem(p: &DareProblem, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("meta"), format_meta(&p.meta))?;
    io::write_matrix_market(&p.da0, &dir.join("DA.mtx"))?;
    io::write_matrix_market(&p.dg0, &dir.join("DG.mtx"))?;
    io::write_matrix_market(&p.dh0, &dir.join("DH.mtx"))?;
    io::write_factor(&p.la10, &dir.join("LA1.talf"))?;
    io::write_factor(&p.la20, &dir.join("LA2.talf"))?;
    Ok(())
}

pub fn read_problem(dir: &Path) -> Result<DareProblem> {
    let meta_path = dir.join("meta");
    let meta = parse_meta(&fs::read_to_string(&meta_path)?, &meta_path.display().to_string())?;
    let p = DareProblem {
        da0: io::read_matrix_market(&dir.join("DA.mtx"))?,
        dg0: io::read_matrix_market(&dir.join("DG.mtx"))?,
        dh0: io::read_matrix_market(&dir.join("DH.mtx"))?,
        la10: io::read_factor(&dir.join("LA1.talf"))?,
        la20: io::read_factor(&dir.join("LA2.talf"))?,
        meta,
    };
    p.validate()?;
    if let Some(n) = p.meta.get("n") {
        if n.parse::<usize>().ok() != Some(p.n()) {
            return Err(FsdaError::Dimension(format!("meta says n = {n}, matrices have order {}", p.n())));
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_instance_is_valid() {
        let p = gen_instance(16, 1, 1, 0.5, 3).unwrap();
        let r = convergence_report(&p.a_dense(), &p.g_dense(), &p.h_dense()).unwrap();
        assert!(r.rho_s < 1.0 && r.rho_t < 1.0);
        assert_eq!(p.meta["n"], "16");
    }

    #[test]
    fn banded_only_instance() {
        let p = gen_instance(20, 2, 0, 0.6, 1).unwrap();
        assert_eq!(p.m_a(), 0);
        assert_eq!(p.la10.cols(), 0);
    }

    #[test]
    fn seed_determines_instance() {
        let a = gen_instance(24, 2, 2, 0.6, 42).unwrap();
        let b = gen_instance(24, 2, 2, 0.6, 42).unwrap();
        assert_eq!(io::encode_banded(&a.da0), io::encode_banded(&b.da0));
        assert_eq!(io::encode_factor(&a.la10), io::encode_factor(&b.la10));
        assert_eq!(a, b);
        let c = gen_instance(24, 2, 2, 0.6, 43).unwrap();
        assert_ne!(a.da0, c.da0);
    }

    #[test]
    fn psd_parts() {
        let p = gen_instance(30, 3, 1, 0.6, 5).unwrap();
        for m in [&p.dg0, &p.dh0] {
            assert!(m.is_symmetric());
            assert!(crate::oracle::min_eigenvalue(&m.to_dense()) >= 0.0);
            assert!(m.half_bw() <= 3);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(gen_instance(16, 1, 1, 1.5, 0).is_err());
        assert!(gen_instance(16, 16, 1, 0.5, 0).is_err());
        assert!(gen_instance(16, 1, 16, 0.5, 0).is_err());
    }

    #[test]
    fn kernel_absorbed_into_second_factor() {
        let n = 6;
        let l1 = DMatrix::from_fn(n, 2, |i, j| (i + j) as f64 * 0.1);
        let l2 = DMatrix::from_fn(n, 2, |i, j| (i * j) as f64 * 0.05 + 0.01);
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.25]);
        let z = BandedMatrix::zeros(n);
        let p = DareProblem::with_kernel(BandedMatrix::identity(n), z.clone(), z, l1.clone(), &k, l2.clone()).unwrap();
        let want = DMatrix::identity(n, n) + &l1 * &k * l2.transpose();
        assert!((p.a_dense() - want).amax() < 1e-15);
    }
}
