//! Dense reference computations for small problems.

use nalgebra::{DMatrix, Schur};

use crate::error::{FsdaError, Result};

/// Largest order the dense eigenvalue routines accept.
pub const DENSE_LIMIT: usize = 256;

#[derive(Clone, Debug)]
pub struct DenseIterates {
    /// Index `k` holds the `k`-th iterate; index 0 is the input.
    pub a: Vec<DMatrix<f64>>,
    pub g: Vec<DMatrix<f64>>,
    pub h: Vec<DMatrix<f64>>,
}

impl DenseIterates {
    pub fn len(&self) -> usize {
        self.a.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let lu = m.clone().lu();
    let u = lu.u();
    let tiny = f64::EPSILON * m.amax() * n as f64;
    if (0..n).any(|i| u[(i, i)].abs() <= tiny) {
        return Err(FsdaError::SingularKernel { what, size: n });
    }
    lu.solve(rhs).ok_or(FsdaError::SingularKernel { what, size: n })
}

/// One dense doubling step.
pub fn sda_step(a: &DMatrix<f64>, g: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let w = DMatrix::identity(n, n) + g * h;
    let wa = solve(&w, a, "I + G H")?;
    let wg = solve(&w, g, "I + G H")?;
    let a1 = a * &wa;
    let g1 = sym(g + a * wg * a.transpose());
    let h1 = sym(h + a.transpose() * h * &wa);
    Ok((a1, g1, h1))
}

pub fn dense_sda(a: &DMatrix<f64>, g: &DMatrix<f64>, h: &DMatrix<f64>, k_max: usize) -> Result<DenseIterates> {
    let mut it = DenseIterates {
        a: vec![a.clone()],
        g: vec![g.clone()],
        h: vec![h.clone()],
    };
    for _ in 0..k_max {
        let k = it.a.len() - 1;
        let (a1, g1, h1) = sda_step(&it.a[k], &it.g[k], &it.h[k])?;
        it.a.push(a1);
        it.g.push(g1);
        it.h.push(h1);
    }
    Ok(it)
}

/// `-X + A^T X (I + G X)^{-1} A + H`.
pub fn dare_residual_matrix(x: &DMatrix<f64>, a: &DMatrix<f64>, g: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let w = DMatrix::identity(n, n) + g * x;
    let wa = solve(&w, a, "I + G X")?;
    Ok(-x + a.transpose() * x * wa + h)
}

pub fn dare_residual(x: &DMatrix<f64>, a: &DMatrix<f64>, g: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<f64> {
    Ok(dare_residual_matrix(x, a, g, h)?.norm())
}

/// Runs the doubling recurrence until `H_k` settles; returns `(X, Y, steps)`.
pub fn dense_solve(a: &DMatrix<f64>, g: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, usize)> {
    const MAX_STEPS: usize = 60;
    let (mut a, mut g, mut h) = (a.clone(), g.clone(), h.clone());
    let mut change = f64::INFINITY;
    for k in 1..=MAX_STEPS {
        let (a1, g1, h1) = sda_step(&a, &g, &h)?;
        change = ((&h1 - &h).norm() / h1.norm().max(f64::MIN_POSITIVE))
            .max((&g1 - &g).norm() / g1.norm().max(f64::MIN_POSITIVE));
        let a_small = a1.norm() <= 1e-300 || a1.norm() <= f64::EPSILON * 1e-3 * (1.0 + a.norm());
        a = a1;
        g = g1;
        h = h1;
        if change <= 1e-15 || (a_small && change <= 1e-13) {
            return Ok((h, g, k));
        }
        if !change.is_finite() {
            break;
        }
    }
    Err(FsdaError::NotConverged {
        iterations: MAX_STEPS,
        change,
    })
}

pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() > DENSE_LIMIT {
        return Err(FsdaError::TooLarge {
            n: m.nrows(),
            limit: DENSE_LIMIT,
        });
    }
    if m.nrows() == 0 || m.amax() == 0.0 {
        return Ok(0.0);
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 100 * m.nrows().max(10)).ok_or(FsdaError::NotConverged {
        iterations: 100 * m.nrows().max(10),
        change: f64::NAN,
    })?;
    Ok(schur.complex_eigenvalues().iter().fold(0.0f64, |r, z| r.max(z.norm())))
}

#[derive(Clone, Debug)]
pub struct ConvergenceReport {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub rho_s: f64,
    pub rho_t: f64,
    pub steps: usize,
}

impl ConvergenceReport {
    pub fn is_valid(&self) -> bool {
        self.rho_s < 1.0 && self.rho_t < 1.0
    }
}

/// Stabilizing solutions of the equation and its dual, closed-loop matrices
/// `S = (I + G X)^{-1} A`, `T = (I + H Y)^{-1} A^T` and their spectral radii.
pub fn convergence_report(a: &DMatrix<f64>, g: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<ConvergenceReport> {
    let n = a.nrows();
    if n > DENSE_LIMIT {
        return Err(FsdaError::TooLarge { n, limit: DENSE_LIMIT });
    }
    let (x, y, steps) = dense_solve(a, g, h)?;
    let id = DMatrix::identity(n, n);
    let s = solve(&(&id + g * &x), a, "I + G X")?;
    let t = solve(&(&id + h * &y), &a.transpose(), "I + H Y")?;
    let rho_s = spectral_radius(&s)?;
    let rho_t = spectral_radius(&t)?;
    Ok(ConvergenceReport {
        x,
        y,
        s,
        t,
        rho_s,
        rho_t,
        steps,
    })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym(m.clone())
        .symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stable_case(n: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let a = DMatrix::from_fn(n, n, |i, j| match i as isize - j as isize {
            0 => 0.5,
            1 => 0.1,
            -1 => -0.1,
            _ => 0.0,
        });
        let g = DMatrix::from_fn(n, n, |i, j| if i == j { 0.8 } else if i.abs_diff(j) == 1 { 0.2 } else { 0.0 });
        let h = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else if i.abs_diff(j) == 1 { -0.3 } else { 0.0 });
        (a, g, h)
    }

    #[test]
    fn zero_a_is_stationary() {
        let (_, g, h) = stable_case(6);
        let it = dense_sda(&DMatrix::zeros(6, 6), &g, &h, 3).unwrap();
        for k in 1..=3 {
            assert_eq!(it.h[k], h);
            assert_eq!(it.g[k], g);
            assert_eq!(it.a[k].amax(), 0.0);
        }
    }

    #[test]
    fn pure_squaring() {
        let (a, _, _) = stable_case(5);
        let z = DMatrix::zeros(5, 5);
        let it = dense_sda(&a, &z, &z, 3).unwrap();
        let mut p = a.clone();
        for k in 1..=3 {
            p = &p * &p;
            assert!((&it.a[k] - &p).amax() < 1e-15);
        }
    }

    #[test]
    fn limit_solves_the_equation() {
        let (a, g, h) = stable_case(16);
        let it = dense_sda(&a, &g, &h, 8).unwrap();
        for k in 1..=8 {
            assert!(min_eigenvalue(&(&it.h[k] - &it.h[k - 1])) >= -1e-12);
        }
        let x = &it.h[8];
        assert!(dare_residual(x, &a, &g, &h).unwrap() <= 1e-12 * x.norm());
    }

    #[test]
    fn residual_trivial_cases() {
        let (_, g, h) = stable_case(4);
        let z = DMatrix::zeros(4, 4);
        assert_eq!(dare_residual(&h, &z, &g, &h).unwrap(), 0.0);
        assert!((dare_residual(&z, &stable_case(4).0, &g, &h).unwrap() - h.norm()).abs() < 1e-15);
    }

    #[test]
    fn zero_a_report() {
        let (_, g, h) = stable_case(4);
        let r = convergence_report(&DMatrix::zeros(4, 4), &g, &h).unwrap();
        assert_eq!(r.rho_s, 0.0);
        assert_eq!(r.rho_t, 0.0);
    }

    #[test]
    fn scalar_closed_form() {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        let r = convergence_report(&one(0.5), &one(1.0), &one(1.0)).unwrap();
        // -x + a^2 x / (1 + x) + 1 = 0 with a = 0.5 gives x^2 - 0.25 x - 1 = 0
        let x = (0.25 + (0.0625f64 + 4.0).sqrt()) / 2.0;
        assert!((r.x[(0, 0)] - x).abs() < 1e-14);
        assert!((r.rho_s - 0.5 / (1.0 + x)).abs() < 1e-14);
    }

    #[test]
    fn refuses_large_problems() {
        let m = DMatrix::zeros(DENSE_LIMIT + 1, DENSE_LIMIT + 1);
        assert!(matches!(spectral_radius(&m), Err(FsdaError::TooLarge { .. })));
    }
}
