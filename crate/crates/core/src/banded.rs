//! Banded matrices stored by diagonals.
//!
//! Diagonal `o` (with `-lower <= o <= upper`) lives in row `o + lower` of the
//! band array, indexed by matrix row: entry `(i, i + o)` sits at position `i`.
//! Slots that fall outside the matrix are kept at zero.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::cost::{self, Category};
use crate::error::{FsdaError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BandedMatrix {
    n: usize,
    lower: usize,
    upper: usize,
    bands: Vec<f64>,
    drop_tol: f64,
}

fn row_range(n: usize, o: isize) -> std::ops::Range<usize> {
    if o >= 0 {
        0..n.saturating_sub(o as usize)
    } else {
        ((-o) as usize).min(n)..n
    }
}

impl BandedMatrix {
    pub fn zeros(n: usize) -> Self {
        assert!(n > 0, "banded matrix needs n > 0");
        BandedMatrix {
            n,
            lower: 0,
            upper: 0,
            bands: vec![0.0; n],
            drop_tol: 0.0,
        }
    }

    pub fn with_bandwidths(n: usize, lower: usize, upper: usize) -> Self {
        assert!(n > 0, "banded matrix needs n > 0");
        let lower = lower.min(n - 1);
        let upper = upper.min(n - 1);
        BandedMatrix {
            n,
            lower,
            upper,
            bands: vec![0.0; (lower + upper + 1) * n],
            drop_tol: 0.0,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        m.bands.copy_from_slice(d);
        m
    }

    /// Builds a matrix from whole diagonals, `diags[t]` holding offset
    /// `t as isize - lower as isize`. Each diagonal has length `n`, indexed by row.
    pub fn from_diagonals(n: usize, lower: usize, upper: usize, diags: &[Vec<f64>]) -> Result<Self> {
        if n == 0 || lower > n - 1 || upper > n - 1 {
            return Err(FsdaError::Dimension(format!(
                "bandwidths ({lower}, {upper}) exceed n - 1 = {}",
                n.saturating_sub(1)
            )));
        }
        if diags.len() != lower + upper + 1 || diags.iter().any(|d| d.len() != n) {
            return Err(FsdaError::Dimension(
                "diagonal array does not match bandwidths".into(),
            ));
        }
        let mut m = Self::with_bandwidths(n, lower, upper);
        for (t, d) in diags.iter().enumerate() {
            let o = t as isize - lower as isize;
            for i in row_range(n, o) {
                m.bands[t * n + i] = d[i];
            }
        }
        Ok(m)
    }

    /// Copies the entries of `d` inside the given band; entries outside are ignored.
    pub fn from_dense_band(d: &DMatrix<f64>, lower: usize, upper: usize) -> Self {
        assert_eq!(d.nrows(), d.ncols(), "square matrix expected");
        let n = d.nrows();
        let mut m = Self::with_bandwidths(n, lower, upper);
        for o in -(m.lower as isize)..=(m.upper as isize) {
            let t = (o + m.lower as isize) as usize;
            for i in row_range(n, o) {
                m.bands[t * n + i] = d[(i, (i as isize + o) as usize)];
            }
        }
        m
    }

    /// Detects the bandwidth of `d` from its nonzero pattern.
    pub fn from_dense(d: &DMatrix<f64>) -> Self {
        let n = d.nrows();
        let (mut lower, mut upper) = (0, 0);
        for j in 0..n {
            for i in 0..n {
                if d[(i, j)] != 0.0 {
                    if i > j {
                        lower = lower.max(i - j);
                    } else {
                        upper = upper.max(j - i);
                    }
                }
            }
        }
        Self::from_dense_band(d, lower, upper)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lower_bw(&self) -> usize {
        self.lower
    }

    pub fn upper_bw(&self) -> usize {
        self.upper
    }

    /// `max(lower_bw, upper_bw)`.
    pub fn half_bw(&self) -> usize {
        self.lower.max(self.upper)
    }

    pub fn drop_tol(&self) -> f64 {
        self.drop_tol
    }

    /// Number of band slots that correspond to actual matrix positions.
    pub fn stored_entries(&self) -> usize {
        (-(self.lower as isize)..=(self.upper as isize))
            .map(|o| self.n - o.unsigned_abs())
            .sum()
    }

    /// Diagonal with offset `o`, indexed by row. Out-of-matrix slots are zero.
    pub fn diagonal(&self, o: isize) -> &[f64] {
        let t = (o + self.lower as isize) as usize;
        &self.bands[t * self.n..(t + 1) * self.n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let o = j as isize - i as isize;
        if o > self.upper as isize || -o > self.lower as isize {
            0.0
        } else {
            self.bands[(o + self.lower as isize) as usize * self.n + i]
        }
    }

    /// Sets an entry inside the current band.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let o = j as isize - i as isize;
        assert!(
            o <= self.upper as isize && -o <= self.lower as isize,
            "({i}, {j}) lies outside the band"
        );
        self.bands[(o + self.lower as isize) as usize * self.n + i] = v;
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for o in -(self.lower as isize)..=(self.upper as isize) {
            let diag = self.diagonal(o);
            for i in row_range(self.n, o) {
                d[(i, (i as isize + o) as usize)] = diag[i];
            }
        }
        d
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let mut t = Self::with_bandwidths(n, self.upper, self.lower);
        t.drop_tol = self.drop_tol;
        for o in -(self.lower as isize)..=(self.upper as isize) {
            let src = self.diagonal(o);
            let dst_t = (-o + t.lower as isize) as usize;
            for i in row_range(n, o) {
                let j = (i as isize + o) as usize;
                t.bands[dst_t * n + j] = src[i];
            }
        }
        t
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut m = self.clone();
        m.bands.iter_mut().for_each(|v| *v *= s);
        m
    }

    /// Re-embeds the matrix in a wider band (never narrower).
    fn widened(&self, lower: usize, upper: usize) -> Self {
        if lower == self.lower && upper == self.upper {
            return self.clone();
        }
        let n = self.n;
        let mut m = Self::with_bandwidths(n, lower.max(self.lower), upper.max(self.upper));
        m.drop_tol = self.drop_tol;
        for o in -(self.lower as isize)..=(self.upper as isize) {
            let src = (o + self.lower as isize) as usize;
            let dst = (o + m.lower as isize) as usize;
            m.bands[dst * n..(dst + 1) * n].copy_from_slice(&self.bands[src * n..(src + 1) * n]);
        }
        m
    }

    /// Exact sum; bandwidths are the elementwise maximum. No pruning.
    pub fn add(&self, b: &BandedMatrix) -> Result<Self> {
        if self.n != b.n {
            return Err(FsdaError::Dimension(format!(
                "band_add: {} vs {}",
                self.n, b.n
            )));
        }
        let mut m = self.widened(b.lower, b.upper);
        let n = self.n;
        for o in -(b.lower as isize)..=(b.upper as isize) {
            let src = b.diagonal(o);
            let dst = (o + m.lower as isize) as usize;
            for i in row_range(n, o) {
                m.bands[dst * n + i] += src[i];
            }
        }
        m.drop_tol = self.drop_tol.max(b.drop_tol);
        Ok(m)
    }

    pub fn sub(&self, b: &BandedMatrix) -> Result<Self> {
        self.add(&b.scaled(-1.0))
    }

    /// Product followed by pruning at `drop`.
    pub fn mul(&self, b: &BandedMatrix, drop: f64) -> Result<Self> {
        if self.n != b.n {
            return Err(FsdaError::Dimension(format!(
                "band_mul: {} vs {}",
                self.n, b.n
            )));
        }
        let n = self.n;
        let (la, ua, lb, ub) = (
            self.lower as isize,
            self.upper as isize,
            b.lower as isize,
            b.upper as isize,
        );
        let lower = (la + lb).min(n as isize - 1);
        let upper = (ua + ub).min(n as isize - 1);
        let mut out = vec![0.0; (lower + upper + 1) as usize * n];
        let flops: usize = out
            .par_chunks_mut(n)
            .enumerate()
            .map(|(t, c)| {
                let s = t as isize - lower;
                let mut count = 0;
                for p in -la..=ua {
                    let q = s - p;
                    if q < -lb || q > ub {
                        continue;
                    }
                    let a = self.diagonal(p);
                    let bd = b.diagonal(q);
                    let lo = 0.max(-p).max(-s) as usize;
                    let hi = (n as isize).min(n as isize - p).min(n as isize - s);
                    if hi <= lo as isize {
                        continue;
                    }
                    let hi = hi as usize;
                    for i in lo..hi {
                        c[i] += a[i] * bd[(i as isize + p) as usize];
                    }
                    count += hi - lo;
                }
                count
            })
            .sum();
        cost::record(Category::BandMul, 2 * flops as u64);
        let m = BandedMatrix {
            n,
            lower: lower as usize,
            upper: upper as usize,
            bands: out,
            drop_tol: drop,
        };
        Ok(m.pruned(drop))
    }

    /// Zeros every entry with `|v| <= drop` and trims vanished outer diagonals.
    pub fn pruned(mut self, drop: f64) -> Self {
        if drop > 0.0 {
            for v in self.bands.iter_mut() {
                if v.abs() <= drop {
                    *v = 0.0;
                }
            }
        }
        self.drop_tol = self.drop_tol.max(drop);
        let n = self.n;
        let zero_diag = |m: &BandedMatrix, o: isize| m.diagonal(o).iter().all(|&v| v == 0.0);
        let mut lower = self.lower;
        while lower > 0 && zero_diag(&self, -(lower as isize)) {
            lower -= 1;
        }
        let mut upper = self.upper;
        while upper > 0 && zero_diag(&self, upper as isize) {
            upper -= 1;
        }
        if lower == self.lower && upper == self.upper {
            return self;
        }
        let start = (self.lower - lower) * n;
        let end = start + (lower + upper + 1) * n;
        BandedMatrix {
            n,
            lower,
            upper,
            bands: self.bands[start..end].to_vec(),
            drop_tol: self.drop_tol,
        }
    }

    /// Drops diagonals beyond `max_bw`. Returns the clipped matrix and the
    /// largest magnitude that was discarded.
    pub fn clipped(self, max_bw: usize) -> (Self, f64) {
        if self.lower <= max_bw && self.upper <= max_bw {
            return (self, 0.0);
        }
        let n = self.n;
        let lower = self.lower.min(max_bw);
        let upper = self.upper.min(max_bw);
        let mut lost: f64 = 0.0;
        for o in -(self.lower as isize)..=(self.upper as isize) {
            if o < -(lower as isize) || o > upper as isize {
                lost = self.diagonal(o).iter().fold(lost, |m, v| m.max(v.abs()));
            }
        }
        let start = (self.lower - lower) * n;
        let end = start + (lower + upper + 1) * n;
        let m = BandedMatrix {
            n,
            lower,
            upper,
            bands: self.bands[start..end].to_vec(),
            drop_tol: self.drop_tol,
        };
        (m, lost)
    }

    pub fn frobenius(&self) -> f64 {
        self.bands.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.bands.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Exact symmetry check.
    pub fn is_symmetric(&self) -> bool {
        if self.lower != self.upper {
            return false;
        }
        (1..=self.upper as isize).all(|o| {
            let up = self.diagonal(o);
            let lo = self.diagonal(-o);
            row_range(self.n, o).all(|i| up[i] == lo[i + o as usize])
        })
    }

    /// `self * x` for a dense `n x m` block. Columns are independent and may be
    /// computed in parallel; each column's arithmetic is fixed.
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.mul_dense_counted(x, Category::BandMul)
    }

    pub(crate) fn mul_dense_counted(&self, x: &DMatrix<f64>, cat: Category) -> Result<DMatrix<f64>> {
        let n = self.n;
        if x.nrows() != n {
            return Err(FsdaError::Dimension(format!(
                "band times tall: band is {n}x{n}, block has {} rows",
                x.nrows()
            )));
        }
        let m = x.ncols();
        cost::record(cat, 2 * (self.stored_entries() * m) as u64);
        let mut y = DMatrix::zeros(n, m);
        if m == 0 {
            return Ok(y);
        }
        y.as_mut_slice()
            .par_chunks_mut(n)
            .zip(x.as_slice().par_chunks(n))
            .for_each(|(yc, xc)| {
                for o in -(self.lower as isize)..=(self.upper as isize) {
                    let d = self.diagonal(o);
                    for i in row_range(n, o) {
                        yc[i] += d[i] * xc[(i as isize + o) as usize];
                    }
                }
            });
        Ok(y)
    }
}

/// LU factorization with partial pivoting in LAPACK-style band storage.
///
/// `ab` is column-major with leading dimension `2 kl + ku + 1`; entry `(i, j)` of
/// the working matrix sits in row `kl + ku + i - j`.
#[derive(Clone, Debug)]
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    ab: Vec<f64>,
    ipiv: Vec<usize>,
}

impl BandLu {
    pub fn factor(m: &BandedMatrix) -> Result<Self> {
        let n = m.n;
        let (kl, ku) = (m.lower, m.upper);
        let kv = kl + ku;
        let ld = 2 * kl + ku + 1;
        let mut ab = vec![0.0; ld * n];
        for o in -(kl as isize)..=(ku as isize) {
            let d = m.diagonal(o);
            for i in row_range(n, o) {
                let j = (i as isize + o) as usize;
                ab[j * ld + kv + i - j] = d[i];
            }
        }
        let scale = m.max_abs();
        let tiny = f64::EPSILON * scale;
        let mut ipiv = vec![0; n];
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let col = j * ld;
            let mut jp = 0;
            let mut best = ab[col + kv].abs();
            for t in 1..=km {
                let v = ab[col + kv + t].abs();
                if v > best {
                    best = v;
                    jp = t;
                }
            }
            ipiv[j] = j + jp;
            if best <= tiny || best == 0.0 {
                return Err(FsdaError::SingularPivot {
                    index: j,
                    value: best,
                });
            }
            ju = ju.max((j + ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    let r1 = c * ld + kv + j - c;
                    let r2 = r1 + jp;
                    ab.swap(r1, r2);
                }
            }
            if km > 0 {
                let piv = ab[col + kv];
                for t in 1..=km {
                    ab[col + kv + t] /= piv;
                }
                for c in j + 1..=ju {
                    let u = ab[c * ld + kv + j - c];
                    if u != 0.0 {
                        for t in 1..=km {
                            let l = ab[col + kv + t];
                            ab[c * ld + kv + j + t - c] -= l * u;
                        }
                    }
                }
            }
        }
        Ok(BandLu { n, kl, ku, ab, ipiv })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        let kv = self.kl + self.ku;
        let ld = 2 * self.kl + self.ku + 1;
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                b.swap(j, p);
            }
            let km = self.kl.min(n - 1 - j);
            let bj = b[j];
            if bj != 0.0 {
                for t in 1..=km {
                    b[j + t] -= self.ab[j * ld + kv + t] * bj;
                }
            }
        }
        for j in (0..n).rev() {
            b[j] /= self.ab[j * ld + kv];
            let bj = b[j];
            if bj != 0.0 {
                for i in j.saturating_sub(kv)..j {
                    b[i] -= self.ab[j * ld + kv + i - j] * bj;
                }
            }
        }
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.n {
            return Err(FsdaError::Dimension(format!(
                "band_solve: matrix is {n}x{n}, rhs has {} rows",
                rhs.nrows(),
                n = self.n
            )));
        }
        let mut x = rhs.clone();
        if x.ncols() > 0 {
            x.as_mut_slice()
                .par_chunks_mut(self.n)
                .for_each(|c| self.solve_in_place(c));
        }
        Ok(x)
    }
}

pub fn band_solve(m: &BandedMatrix, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    BandLu::factor(m)?.solve(rhs)
}

#[derive(Clone, Debug)]
pub struct InverseApprox {
    pub inv: BandedMatrix,
    /// Largest entry above `drop` that fell outside `max_bw`.
    pub clipped_max: f64,
    /// `max |m * inv - I|`.
    pub residual_max: f64,
}

/// Explicit banded approximation of `m^{-1}` from column-wise LU solves.
pub fn band_inv_approx(m: &BandedMatrix, drop: f64, max_bw: usize) -> Result<InverseApprox> {
    let n = m.n;
    let lu = BandLu::factor(m)?;
    let max_bw = max_bw.min(n - 1);
    let cols: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            lu.solve_in_place(&mut e);
            let mut lost: f64 = 0.0;
            for (i, v) in e.iter_mut().enumerate() {
                if v.abs() <= drop {
                    *v = 0.0;
                } else if i.abs_diff(j) > max_bw {
                    lost = lost.max(v.abs());
                    *v = 0.0;
                }
            }
            (e, lost)
        })
        .collect();
    cost::record(Category::BandMul, (2 * n * n * (2 * m.lower + m.upper + 1)) as u64);
    let mut lower = 0;
    let mut upper = 0;
    let mut clipped_max: f64 = 0.0;
    for (j, (c, lost)) in cols.iter().enumerate() {
        clipped_max = clipped_max.max(*lost);
        for (i, &v) in c.iter().enumerate() {
            if v != 0.0 {
                if i > j {
                    lower = lower.max(i - j);
                } else {
                    upper = upper.max(j - i);
                }
            }
        }
    }
    let mut inv = BandedMatrix::with_bandwidths(n, lower, upper);
    inv.drop_tol = drop;
    for (j, (c, _)) in cols.iter().enumerate() {
        let i_lo = j.saturating_sub(upper);
        let i_hi = (j + lower).min(n - 1);
        for i in i_lo..=i_hi {
            if c[i] != 0.0 {
                inv.set(i, j, c[i]);
            }
        }
    }
    let check = m.mul(&inv, 0.0)?.sub(&BandedMatrix::identity(n))?;
    let residual_max = check.max_abs();
    if clipped_max > drop {
        log::warn!(
            "banded inverse clipped at bandwidth {max_bw}: discarded entries up to {clipped_max:.3e}"
        );
    }
    Ok(InverseApprox {
        inv,
        clipped_max,
        residual_max,
    })
}

/// The eight banded helpers of one doubling step.
#[derive(Clone, Debug)]
pub struct HelperSet {
    /// `(I + DG DH)^{-1}`
    pub gh: BandedMatrix,
    /// `(I + DH DG)^{-1}`
    pub hg: BandedMatrix,
    /// `GH * DG`
    pub ghg: BandedMatrix,
    /// `HG * DH`
    pub hgh: BandedMatrix,
    /// `DA * GH`
    pub agh: BandedMatrix,
    /// `DA * GHG`
    pub aghg: BandedMatrix,
    /// `DA^T * HG`
    pub athg: BandedMatrix,
    /// `DA^T * HGH`
    pub athgh: BandedMatrix,
    /// Largest magnitude discarded by the bandwidth cap across all helpers.
    pub clipped_max: f64,
    pub inverse_residual: f64,
}

impl HelperSet {
    /// Largest half-bandwidth among the helpers that multiply tall factors.
    pub fn factor_bw(&self) -> usize {
        [&self.agh, &self.aghg, &self.athg, &self.athgh]
            .iter()
            .map(|m| m.half_bw())
            .max()
            .unwrap_or(0)
    }
}

fn capped(m: BandedMatrix, max_bw: usize, lost: &mut f64) -> BandedMatrix {
    let (m, l) = m.clipped(max_bw);
    *lost = lost.max(l);
    m
}

pub fn make_gh_helpers(
    da: &BandedMatrix,
    dg: &BandedMatrix,
    dh: &BandedMatrix,
    drop: f64,
    max_bw: usize,
) -> Result<HelperSet> {
    let n = da.n;
    if dg.n != n || dh.n != n {
        return Err(FsdaError::Dimension("helper inputs differ in size".into()));
    }
    let id = BandedMatrix::identity(n);
    let mid = id.add(&dg.mul(dh, drop)?)?;
    let gh_inv = band_inv_approx(&mid, drop, max_bw)?;
    let mut lost = gh_inv.clipped_max;
    let mut inverse_residual = gh_inv.residual_max;
    let gh = gh_inv.inv;
    let hg = if dg.is_symmetric() && dh.is_symmetric() {
        gh.transpose()
    } else {
        let mid2 = id.add(&dh.mul(dg, drop)?)?;
        let r = band_inv_approx(&mid2, drop, max_bw)?;
        lost = lost.max(r.clipped_max);
        inverse_residual = inverse_residual.max(r.residual_max);
        r.inv
    };
    let ghg = capped(gh.mul(dg, drop)?, max_bw, &mut lost);
    let hgh = capped(hg.mul(dh, drop)?, max_bw, &mut lost);
    let dat = da.transpose();
    let agh = capped(da.mul(&gh, drop)?, max_bw, &mut lost);
    let aghg = capped(da.mul(&ghg, drop)?, max_bw, &mut lost);
    let athg = capped(dat.mul(&hg, drop)?, max_bw, &mut lost);
    let athgh = capped(dat.mul(&hgh, drop)?, max_bw, &mut lost);

    #[cfg(debug_assertions)]
    if n <= 256 && lost == 0.0 && drop <= 1e-14 {
        let other = dh.mul(&gh, 0.0)?;
        let diff = hgh.sub(&other)?.max_abs();
        let scale = 1.0 + hgh.max_abs();
        debug_assert!(
            diff <= 1e-12 * scale,
            "HG*DH and DH*GH disagree by {diff:e}"
        );
    }

    Ok(HelperSet {
        gh,
        hg,
        ghg,
        hgh,
        agh,
        aghg,
        athg,
        athgh,
        clipped_max: lost,
        inverse_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_band(n: usize, l: usize, u: usize, seed: u64, dominant: bool) -> BandedMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = BandedMatrix::with_bandwidths(n, l, u);
        for i in 0..n {
            for j in i.saturating_sub(l)..=(i + u).min(n - 1) {
                let v: f64 = rng.gen_range(-1.0..1.0);
                m.set(i, j, v);
            }
            if dominant {
                m.set(i, i, 4.0 + rng.gen_range(0.0..1.0));
            }
        }
        m
    }

    fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax()
    }

    #[test]
    fn add_zero_is_identity() {
        let a = random_band(8, 1, 1, 1, false);
        let z = BandedMatrix::zeros(8);
        assert_eq!(a.add(&z).unwrap().to_dense(), a.to_dense());
    }

    #[test]
    fn tridiagonal_plus_diagonal() {
        let a = random_band(8, 1, 1, 2, false);
        let d = BandedMatrix::from_diagonal(&[1.0; 8]);
        let s = a.add(&d).unwrap();
        assert_eq!((s.lower_bw(), s.upper_bw()), (1, 1));
        for i in 0..8 {
            assert_eq!(s.get(i, i), a.get(i, i) + 1.0);
        }
    }

    #[test]
    fn add_matches_dense() {
        let a = random_band(8, 1, 1, 3, false);
        let b = random_band(8, 1, 1, 4, false);
        let s = a.add(&b).unwrap();
        assert_eq!(s.to_dense(), a.to_dense() + b.to_dense());
    }

    #[test]
    fn add_rejects_mismatch() {
        let a = BandedMatrix::zeros(4);
        let b = BandedMatrix::zeros(5);
        assert!(matches!(a.add(&b), Err(FsdaError::Dimension(_))));
    }

    #[test]
    fn identity_times_b() {
        let b = random_band(8, 2, 1, 5, false);
        let p = BandedMatrix::identity(8).mul(&b, 0.0).unwrap();
        assert_eq!(p.to_dense(), b.to_dense());
    }

    #[test]
    fn tridiagonal_product_is_pentadiagonal() {
        let a = random_band(8, 1, 1, 6, false);
        let b = random_band(8, 1, 1, 7, false);
        let p = a.mul(&b, 0.0).unwrap();
        assert_eq!((p.lower_bw(), p.upper_bw()), (2, 2));
        assert!(max_diff(&p.to_dense(), &(a.to_dense() * b.to_dense())) < 1e-15);
    }

    #[test]
    fn product_with_zero() {
        let a = random_band(8, 2, 2, 8, false);
        let z = BandedMatrix::with_bandwidths(8, 1, 1);
        let p = a.mul(&z, 0.0).unwrap();
        assert_eq!((p.lower_bw(), p.upper_bw()), (0, 0));
        assert_eq!(p.max_abs(), 0.0);
    }

    #[test]
    fn bandwidth_capped_at_n_minus_one() {
        let a = random_band(5, 3, 3, 9, false);
        let p = a.mul(&a, 0.0).unwrap();
        assert!(p.lower_bw() <= 4 && p.upper_bw() <= 4);
        assert!(max_diff(&p.to_dense(), &(a.to_dense() * a.to_dense())) < 1e-14);
    }

    #[test]
    fn transpose_is_exact() {
        let a = random_band(9, 1, 3, 10, false);
        assert_eq!(a.transpose().to_dense(), a.to_dense().transpose());
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let rhs = DMatrix::from_fn(6, 2, |i, j| (i + 3 * j) as f64);
        let x = band_solve(&BandedMatrix::identity(6), &rhs).unwrap();
        assert_eq!(x, rhs);
        let two = BandedMatrix::from_diagonal(&[2.0; 6]);
        let x = band_solve(&two, &DMatrix::from_element(6, 1, 1.0)).unwrap();
        assert!(x.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn solve_recovers_constructed_solution() {
        let m = random_band(40, 1, 1, 11, true);
        let y = DMatrix::from_fn(40, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let rhs = m.to_dense() * &y;
        let x = band_solve(&m, &rhs).unwrap();
        assert!(max_diff(&x, &y) <= 1e-12 * y.amax());
    }

    #[test]
    fn solve_with_pivoting() {
        // zero leading diagonal entry forces a row interchange
        let mut m = random_band(12, 2, 1, 12, false);
        m.set(0, 0, 0.0);
        let y = DMatrix::from_fn(12, 1, |i, _| i as f64 + 1.0);
        let rhs = m.to_dense() * &y;
        let x = band_solve(&m, &rhs).unwrap();
        let dense = m.to_dense().lu().solve(&rhs).unwrap();
        assert!(max_diff(&x, &dense) <= 1e-9 * dense.amax());
    }

    #[test]
    fn singular_pivot_is_named() {
        let mut m = BandedMatrix::identity(5);
        m.set(3, 3, 0.0);
        match BandLu::factor(&m) {
            Err(FsdaError::SingularPivot { index, .. }) => assert_eq!(index, 3),
            other => panic!("expected singular pivot, got {other:?}"),
        }
    }

    #[test]
    fn inverse_of_identity_and_diagonal() {
        let r = band_inv_approx(&BandedMatrix::identity(7), 0.0, 6).unwrap();
        assert_eq!(r.inv.to_dense(), DMatrix::identity(7, 7));
        let d: Vec<f64> = (1..=7).map(|i| i as f64).collect();
        let r = band_inv_approx(&BandedMatrix::from_diagonal(&d), 0.0, 6).unwrap();
        assert_eq!((r.inv.lower_bw(), r.inv.upper_bw()), (0, 0));
        for i in 0..7 {
            assert!((r.inv.get(i, i) - 1.0 / d[i]).abs() < 1e-16);
        }
    }

    #[test]
    fn inverse_of_dominant_tridiagonal() {
        let m = random_band(16, 1, 1, 13, true);
        let r = band_inv_approx(&m, 1e-12, 15).unwrap();
        let dense = m.to_dense().try_inverse().unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let v = r.inv.get(i, j);
                if v != 0.0 {
                    assert!((v - dense[(i, j)]).abs() < 1e-14);
                }
            }
        }
        assert!(r.residual_max < 1e-8);
    }

    #[test]
    fn inverse_clipping_reports_loss() {
        let m = random_band(16, 1, 1, 14, true);
        let r = band_inv_approx(&m, 0.0, 1).unwrap();
        assert!(r.inv.lower_bw() <= 1 && r.inv.upper_bw() <= 1);
        assert!(r.clipped_max > 0.0);
    }

    #[test]
    fn pruning_tightens_bandwidth() {
        let mut m = BandedMatrix::with_bandwidths(6, 2, 2);
        m.set(0, 0, 1.0);
        m.set(1, 2, 1e-20);
        let p = m.pruned(1e-16);
        assert_eq!((p.lower_bw(), p.upper_bw()), (0, 0));
    }

    #[test]
    fn helpers_degenerate_without_g_and_h() {
        let da = random_band(10, 1, 1, 15, false);
        let z = BandedMatrix::zeros(10);
        let h = make_gh_helpers(&da, &z, &z, 0.0, 9).unwrap();
        assert_eq!(h.gh.to_dense(), DMatrix::identity(10, 10));
        assert_eq!(h.hg.to_dense(), DMatrix::identity(10, 10));
        assert_eq!(h.ghg.max_abs(), 0.0);
        assert_eq!(h.hgh.max_abs(), 0.0);
        assert_eq!(h.agh.to_dense(), da.to_dense());
        assert_eq!(h.athg.to_dense(), da.to_dense().transpose());
    }

    #[test]
    fn helpers_vanish_with_zero_a() {
        let dg = random_band(10, 1, 1, 16, false);
        let dh = random_band(10, 1, 1, 17, false);
        let h = make_gh_helpers(&BandedMatrix::zeros(10), &dg.scaled(0.1), &dh.scaled(0.1), 0.0, 9)
            .unwrap();
        for m in [&h.agh, &h.aghg, &h.athg, &h.athgh] {
            assert_eq!(m.max_abs(), 0.0);
        }
    }

    #[test]
    fn helpers_match_dense_formulas() {
        let n = 16;
        let da = random_band(n, 1, 1, 18, false);
        let dg = random_band(n, 1, 1, 19, false).scaled(0.3);
        let dh = random_band(n, 1, 1, 20, false).scaled(0.3);
        let h = make_gh_helpers(&da, &dg, &dh, 0.0, n - 1).unwrap();
        let (a, g, hh) = (da.to_dense(), dg.to_dense(), dh.to_dense());
        let id = DMatrix::<f64>::identity(n, n);
        let gh = (&id + &g * &hh).try_inverse().unwrap();
        let hg = (&id + &hh * &g).try_inverse().unwrap();
        let expect = [
            (&h.gh, gh.clone()),
            (&h.hg, hg.clone()),
            (&h.ghg, &gh * &g),
            (&h.hgh, &hg * &hh),
            (&h.agh, &a * &gh),
            (&h.aghg, &a * &gh * &g),
            (&h.athg, a.transpose() * &hg),
            (&h.athgh, a.transpose() * &hg * &hh),
        ];
        for (got, want) in expect {
            assert!(max_diff(&got.to_dense(), &want) < 1e-10);
        }
    }
}
