//! Truncation and compression of the growing factor blocks.

use nalgebra::DMatrix;

use crate::config::SolverConfig;
use crate::cost::{self, Category};
use crate::engine::FsdaState;
use crate::error::Result;
use crate::factor::{BlockKernel, Role, Segment, TallFactor};

#[derive(Clone, Debug)]
pub struct PtcOutcome {
    /// Orthonormal `n x r` basis.
    pub q: DMatrix<f64>,
    /// `r x m` factor with `q u` approximating the block in its original column order.
    pub u: DMatrix<f64>,
    pub rank: usize,
    /// Spectral norm of the part left untriangularized.
    pub discarded_norm: f64,
    pub tau: f64,
    /// The rank cap stopped the factorization while the next pivot was still above `tau |R11|`.
    pub capped: bool,
    pub perm: Vec<usize>,
}

fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    let g = if a.ncols() <= a.nrows() {
        a.transpose() * a
    } else {
        a * a.transpose()
    };
    let top = g.symmetric_eigenvalues().iter().fold(0.0f64, |m, &v| m.max(v));
    top.max(0.0).sqrt()
}

/// Householder QR with column pivoting that stops once the next pivot drops to
/// `tau |R11|` or `m_max` columns have been taken.
pub fn ptc_qr(block: &DMatrix<f64>, tau: f64, m_max: usize) -> PtcOutcome {
    let (n, m) = (block.nrows(), block.ncols());
    let mut a = block.clone();
    let mut perm: Vec<usize> = (0..m).collect();
    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut r11 = 0.0;
    let mut capped = false;
    let mut flops = 0u64;
    for j in 0..n.min(m) {
        let (mut p, mut best) = (j, -1.0);
        for c in j..m {
            let v = a.view((j, c), (n - j, 1)).norm_squared();
            if v > best {
                best = v;
                p = c;
            }
        }
        flops += 2 * ((n - j) * (m - j)) as u64;
        let nrm = best.sqrt();
        if j == 0 {
            r11 = nrm;
        }
        if nrm == 0.0 || nrm <= tau * r11 {
            break;
        }
        if j >= m_max {
            capped = true;
            log::warn!("rank cap {m_max} reached with pivot {nrm:.3e} above tolerance");
            break;
        }
        if p != j {
            a.swap_columns(j, p);
            perm.swap(j, p);
        }
        let x0 = a[(j, j)];
        let alpha = if x0 >= 0.0 { -nrm } else { nrm };
        let mut v: Vec<f64> = (j..n).map(|i| a[(i, j)]).collect();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let beta = if vv > 0.0 { 2.0 / vv } else { 0.0 };
        for c in j + 1..m {
            let s: f64 = v.iter().enumerate().map(|(t, vi)| vi * a[(j + t, c)]).sum();
            if s != 0.0 {
                let f = beta * s;
                for (t, vi) in v.iter().enumerate() {
                    a[(j + t, c)] -= f * vi;
                }
            }
        }
        flops += 4 * ((n - j) * (m - j)) as u64;
        a[(j, j)] = alpha;
        for i in j + 1..n {
            a[(i, j)] = 0.0;
        }
        reflectors.push((v, beta));
    }
    let rank = reflectors.len();
    let mut u = DMatrix::zeros(rank, m);
    for c in 0..m {
        for i in 0..rank.min(c + 1) {
            u[(i, perm[c])] = a[(i, c)];
        }
    }
    let mut q = DMatrix::zeros(n, rank);
    for i in 0..rank {
        q[(i, i)] = 1.0;
    }
    for (j, (v, beta)) in reflectors.iter().enumerate().rev() {
        for c in 0..rank {
            let s: f64 = v.iter().enumerate().map(|(t, vi)| vi * q[(j + t, c)]).sum();
            if s != 0.0 {
                let f = beta * s;
                for (t, vi) in v.iter().enumerate() {
                    q[(j + t, c)] -= f * vi;
                }
            }
        }
    }
    flops += 4 * (n * rank * rank) as u64;
    cost::record(Category::Qr, flops);
    let trailing = if rank < n && rank < m {
        a.view((rank, rank), (n - rank, m - rank)).into_owned()
    } else {
        DMatrix::zeros(0, 0)
    };
    PtcOutcome {
        q,
        u,
        rank,
        discarded_norm: spectral_norm(&trailing),
        tau,
        capped,
        perm,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PtcReport {
    /// Widths of the G2/H2 blocks handed to the factorization.
    pub width_g: usize,
    pub width_h: usize,
    pub rank_g: usize,
    pub rank_h: usize,
    pub discarded_g: f64,
    pub discarded_h: f64,
    pub capped: bool,
}

fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(r, c);
    let (mut i, mut j) = (0, 0);
    for b in blocks {
        out.view_mut((i, j), (b.nrows(), b.ncols())).copy_from(*b);
        i += b.nrows();
        j += b.ncols();
    }
    out
}

fn replace_middle(f: &TallFactor, role: Role, q: &DMatrix<f64>, birth_k: usize) -> Result<TallFactor> {
    let range = f.role_range(role);
    let n = f.n();
    let left = f.columns(0..range.start);
    let right = f.columns(range.end..f.cols());
    let mut data = DMatrix::zeros(n, left.ncols() + q.ncols() + right.ncols());
    data.columns_mut(0, left.ncols()).copy_from(&left);
    data.columns_mut(left.ncols(), q.ncols()).copy_from(q);
    data.columns_mut(left.ncols() + q.ncols(), right.ncols()).copy_from(&right);
    let mut segs = Vec::new();
    let mut placed = false;
    for s in f.segments() {
        if s.role == role {
            if !placed && q.ncols() > 0 {
                segs.push(Segment::new(q.ncols(), role, birth_k));
            }
            placed = true;
        } else {
            segs.push(*s);
        }
    }
    TallFactor::new(data, segs)
}

fn congruence(u: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    cost::record(
        Category::Qr,
        cost::gemm(u.nrows(), u.ncols(), k.ncols()) + cost::gemm(u.nrows(), k.ncols(), v.nrows()),
    );
    u * k * v.transpose()
}

/// Compresses the G2/H2 blocks and maps the kernels through the triangular factors.
pub fn apply_ptc(s: &FsdaState, cfg: &SolverConfig) -> Result<(FsdaState, PtcReport)> {
    let m_max = cfg.m_max_for(s.m_a);
    let g2 = s.lg.role_block(Role::G2);
    let h2 = s.lh.role_block(Role::H2);
    let (og, oh) = rayon::join(|| ptc_qr(&g2, cfg.tau_g, m_max), || ptc_qr(&h2, cfg.tau_h, m_max));

    let lg = replace_middle(&s.lg, Role::G2, &og.q, s.k)?;
    let lh = replace_middle(&s.lh, Role::H2, &oh.q, s.k)?;
    let la1 = replace_middle(&s.la1, Role::G2, &og.q, s.k)?;
    let la2 = replace_middle(&s.la2, Role::H2, &oh.q, s.k)?;

    let eye = |w: usize| DMatrix::<f64>::identity(w, w);
    let w1 = s.lg.role_width(Role::G1);
    let w3 = s.lg.role_width(Role::G3);
    let v1 = s.lh.role_width(Role::H1);
    let v3 = s.lh.role_width(Role::H3);
    let t1 = s.la1.role_width(Role::A1Tail);
    let t2 = s.la2.role_width(Role::A2Tail);
    let ug = block_diag(&[&eye(w1), &og.u, &eye(w3)]);
    let uh = block_diag(&[&eye(v1), &oh.u, &eye(v3)]);
    let ua1 = block_diag(&[&og.u, &eye(t1)]);
    let ua2 = block_diag(&[&oh.u, &eye(t2)]);
    let kg = congruence(&ug, s.kg.data(), &ug);
    let kh = congruence(&uh, s.kh.data(), &uh);
    let ka = congruence(&ua1, s.ka.data(), &ua2);
    let kg = (&kg + kg.transpose()) * 0.5;
    let kh = (&kh + kh.transpose()) * 0.5;

    let report = PtcReport {
        width_g: g2.ncols(),
        width_h: h2.ncols(),
        rank_g: og.rank,
        rank_h: oh.rank,
        discarded_g: og.discarded_norm,
        discarded_h: oh.discarded_norm,
        capped: og.capped || oh.capped,
    };
    let next = FsdaState {
        kg: BlockKernel::aligned(kg, &lg, &lg)?,
        kh: BlockKernel::aligned(kh, &lh, &lh)?,
        ka: BlockKernel::aligned(ka, &la1, &la2)?,
        lg,
        lh,
        la1,
        la2,
        ..s.clone()
    };
    Ok((next, report))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MonitorReport {
    /// Segments removed, with their widths.
    pub deleted: Vec<(Role, usize)>,
    /// Entries set to zero in the G1/H1/G3/H3 blocks.
    pub zeroed: usize,
}

impl MonitorReport {
    pub fn deleted_width(&self, role: Role) -> usize {
        self.deleted.iter().filter(|(r, _)| *r == role).map(|(_, w)| w).sum()
    }
}

fn without_role(f: &TallFactor, role: Role) -> Result<TallFactor> {
    let r = f.role_range(role);
    let data = f.data().clone().remove_columns(r.start, r.len());
    TallFactor::new(data, f.segments().iter().copied().filter(|s| s.role != role).collect())
}

fn zero_small(f: &TallFactor, roles: &[Role], tol: f64) -> Result<(TallFactor, usize)> {
    if tol <= 0.0 {
        return Ok((f.clone(), 0));
    }
    let mut data = f.data().clone();
    let mut count = 0;
    for &role in roles {
        for c in f.role_range(role) {
            for v in data.column_mut(c).iter_mut() {
                if *v != 0.0 && v.abs() < tol {
                    *v = 0.0;
                    count += 1;
                }
            }
        }
    }
    Ok((TallFactor::new(data, f.segments().to_vec())?, count))
}

/// Drops trailing blocks whose norm fell below the truncation tolerance and
/// zeros tiny entries of the head and tail blocks.
pub fn monitor_prune(s: &FsdaState, cfg: &SolverConfig) -> Result<(FsdaState, MonitorReport)> {
    let mut report = MonitorReport::default();
    let mut lg = s.lg.clone();
    let mut lh = s.lh.clone();
    let mut la1 = s.la1.clone();
    let mut la2 = s.la2.clone();
    let mut kg = s.kg.data().clone();
    let mut kh = s.kh.data().clone();
    let mut ka = s.ka.data().clone();

    let small = |f: &TallFactor, role: Role, tau: f64| {
        let w = f.role_width(role);
        w > 0 && f.role_block(role).norm() < tau
    };
    if small(&lg, Role::G3, cfg.tau_g) {
        let r = lg.role_range(Role::G3);
        kg = kg.remove_rows(r.start, r.len()).remove_columns(r.start, r.len());
        report.deleted.push((Role::G3, r.len()));
        lg = without_role(&lg, Role::G3)?;
    }
    if small(&lh, Role::H3, cfg.tau_h) {
        let r = lh.role_range(Role::H3);
        kh = kh.remove_rows(r.start, r.len()).remove_columns(r.start, r.len());
        report.deleted.push((Role::H3, r.len()));
        lh = without_role(&lh, Role::H3)?;
    }
    if small(&la1, Role::A1Tail, cfg.tau_g) {
        let r = la1.role_range(Role::A1Tail);
        ka = ka.remove_rows(r.start, r.len());
        report.deleted.push((Role::A1Tail, r.len()));
        la1 = without_role(&la1, Role::A1Tail)?;
    }
    if small(&la2, Role::A2Tail, cfg.tau_h) {
        let r = la2.role_range(Role::A2Tail);
        ka = ka.remove_columns(r.start, r.len());
        report.deleted.push((Role::A2Tail, r.len()));
        la2 = without_role(&la2, Role::A2Tail)?;
    }
    let (lg, zg) = zero_small(&lg, &[Role::G1, Role::G3], cfg.tol)?;
    let (lh, zh) = zero_small(&lh, &[Role::H1, Role::H3], cfg.tol)?;
    report.zeroed = zg + zh;

    let next = FsdaState {
        kg: BlockKernel::aligned(kg, &lg, &lg)?,
        kh: BlockKernel::aligned(kh, &lh, &lh)?,
        ka: BlockKernel::aligned(ka, &la1, &la2)?,
        lg,
        lh,
        la1,
        la2,
        ..s.clone()
    };
    Ok((next, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn orthonormal(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        random(n, m, seed).qr().q()
    }

    #[test]
    fn orthonormal_input_keeps_full_rank() {
        let x = orthonormal(20, 5, 1);
        let o = ptc_qr(&x, 1e-12, 100);
        assert_eq!(o.rank, 5);
        assert!((&o.q * &o.u - &x).norm() <= 1e-12);
        assert!((o.q.transpose() * &o.q - DMatrix::identity(5, 5)).amax() < 1e-12);
    }

    #[test]
    fn duplicated_pair_has_rank_one() {
        let v = random(10, 1, 2);
        let x = DMatrix::from_fn(10, 2, |i, _| v[(i, 0)]);
        let o = ptc_qr(&x, 1e-12, 100);
        assert_eq!(o.rank, 1);
        assert!((&o.q * &o.u - &x).norm() <= 1e-14 * x.norm());
    }

    #[test]
    fn graded_spectrum_truncates() {
        let u = orthonormal(32, 6, 3);
        let v = orthonormal(6, 6, 4);
        let sv = [1.0, 1e-1, 1e-9, 1e-10, 1e-11, 1e-12];
        let x = &u * DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&sv)) * v.transpose();
        let o = ptc_qr(&x, 1e-6, 100);
        // singular value oracle on the same block
        let svd = x.clone().svd(false, false);
        let svd_rank = svd.singular_values.iter().filter(|&&s| s > 1e-6 * svd.singular_values[0]).count();
        assert_eq!(o.rank, svd_rank);
        assert_eq!(o.rank, 2);
        assert!((&o.q * &o.u - &x).norm() <= 1e-6 * x.norm());
    }

    #[test]
    fn rank_cap_is_hard() {
        let x = random(12, 6, 5);
        let o = ptc_qr(&x, 0.0, 3);
        assert_eq!(o.rank, 3);
        assert!(o.capped);
        assert!(o.discarded_norm > 0.0);
    }

    #[test]
    fn empty_block_has_rank_zero() {
        let o = ptc_qr(&DMatrix::zeros(7, 0), 1e-12, 10);
        assert_eq!(o.rank, 0);
        assert_eq!(o.q.ncols(), 0);
    }
}
