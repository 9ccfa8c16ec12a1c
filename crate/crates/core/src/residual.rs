//! Residual evaluation and the outer solve loop.
//!
//! For `X = DHk + LH KH LH^T` the residual of the equation splits exactly into
//! a banded part `DR` and a low-rank part `LR KR LR^T`. The banded part is cheap
//! and gates the low-rank evaluation.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;

use crate::banded::{band_inv_approx, BandedMatrix};
use crate::config::{Denominator, SolverConfig};
use crate::cost::{self, Category};
use crate::engine::{advance, grid, hcat, sym, FsdaState, StepReport, Widths};
use crate::error::{FsdaError, Result};
use crate::factor::{merge_columns, BlockKernel, Move, Role, Segment, TallFactor};
use crate::problem::DareProblem;
use crate::reduction::ptc_qr;

/// Banded part of the residual and the helpers the low-rank part reuses.
#[derive(Clone, Debug)]
pub struct BandedResidual {
    pub dr: BandedMatrix,
    pub b_rres: f64,
    /// `(I + DHk DG0)^{-1}`
    pub hg: BandedMatrix,
    /// `(I + DHk DG0)^{-1} DHk`
    pub hgh: BandedMatrix,
    /// `DG0 (I + DHk DG0)^{-1}`
    pub ghg: BandedMatrix,
}

pub fn banded_residual(s: &FsdaState, p: &DareProblem, cfg: &SolverConfig) -> Result<BandedResidual> {
    let drop = cfg.band_drop;
    let n = p.n();
    let id = BandedMatrix::identity(n);
    let dhk = &s.dh;
    let middle = id.add(&dhk.mul(&p.dg0, drop)?)?;
    let hg = band_inv_approx(&middle, drop, s.max_bw)?.inv;
    let (hgh, _) = hg.mul(dhk, drop)?.clipped(s.max_bw);
    let (ghg, _) = p.dg0.mul(&hg, drop)?.clipped(s.max_bw);
    let hgh = hgh.add(&hgh.transpose())?.scaled(0.5);
    let quad = p.da0.transpose().mul(&hgh.mul(&p.da0, drop)?, drop)?;
    let dr = p.dh0.sub(dhk)?.add(&quad)?.pruned(cfg.tol);

    let other = match cfg.denominator {
        Denominator::Verbatim => &p.dh0,
        Denominator::Gh => &p.dg0,
    };
    let inner = id.add(&other.mul(dhk, drop)?)?.frobenius();
    let na = p.da0.frobenius();
    let nh = dhk.frobenius();
    let denom = p.dh0.frobenius() + nh + if inner > 0.0 { na * na * nh / inner } else { 0.0 };
    let num = dr.frobenius();
    let b_rres = if num == 0.0 { 0.0 } else { num / denom };
    Ok(BandedResidual {
        dr,
        b_rres,
        hg,
        hgh,
        ghg,
    })
}

#[derive(Clone, Debug)]
pub struct LowRankResidual {
    pub lr_rres: f64,
    /// Deflated low-rank factor of the residual.
    pub factor: TallFactor,
    pub kernel: BlockKernel,
    /// Numerical rank of the factor at `tau_r`.
    pub rank: usize,
    /// Whether a copy of `LA20` was found inside `LH` and merged.
    pub deflated: bool,
}

/// Solves `m x = rhs`, refusing a numerically singular `m`.
fn left_solve(m: DMatrix<f64>, rhs: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let size = m.nrows();
    if size == 0 {
        return Ok(rhs.clone());
    }
    let scale = m.amax();
    let lu = m.lu();
    let u = lu.u();
    if (0..size).any(|i| u[(i, i)].abs() <= f64::EPSILON * scale * size as f64) {
        return Err(FsdaError::SingularKernel { what, size });
    }
    lu.solve(rhs).ok_or(FsdaError::SingularKernel { what, size })
}

fn gram(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    cost::record(Category::Residual, cost::gemm(a.ncols(), a.nrows(), b.ncols()));
    a.transpose() * b
}

/// Position of an `LA20` copy inside `LH`: only the shared block born in the
/// first step is taken over verbatim, later ones are compressed.
fn l20_copy(s: &FsdaState, p: &DareProblem) -> Option<usize> {
    let m = p.m_a();
    if m == 0 {
        return None;
    }
    let mut off = 0;
    for seg in s.lh.segments() {
        if seg.role == Role::H2 && seg.birth_k == 1 && seg.width >= m {
            let block = s.lh.columns(off..off + m);
            if &block == p.la20.data() {
                return Some(off);
            }
        }
        off += seg.width;
    }
    None
}

pub fn lowrank_residual(
    s: &FsdaState,
    p: &DareProblem,
    cfg: &SolverConfig,
    br: &BandedResidual,
) -> Result<LowRankResidual> {
    let n = p.n();
    let m_a = p.m_a();
    let mh = s.lh.cols();
    if m_a == 0 && mh == 0 {
        return Ok(LowRankResidual {
            lr_rres: 0.0,
            factor: TallFactor::empty(n),
            kernel: BlockKernel::zeros(0, 0),
            rank: 0,
            deflated: false,
        });
    }
    let lh = s.lh.data();
    let kh = s.kh.data();
    let l10 = p.la10.data();
    let l20 = p.la20.data();
    let c = |b: &BandedMatrix, x: &DMatrix<f64>| b.mul_dense_counted(x, Category::Residual);

    let ghg_lh = c(&br.ghg, lh)?;
    let hg_lh = c(&br.hg, lh)?;
    let hgh_l10 = c(&br.hgh, l10)?;
    let middle = DMatrix::identity(mh, mh) + kh * gram(lh, &ghg_lh);
    let kt = sym(left_solve(middle, kh, "residual kernel")?);
    let m1 = gram(l10, &hg_lh);
    let kt_athg = &m1 * &kt;
    let kt_athgha = sym(gram(l10, &hgh_l10) + &kt_athg * m1.transpose());

    let dat = p.da0.transpose();
    let p_blk = c(&dat, &hgh_l10)?;
    let q_blk = c(&dat, &hg_lh)?;

    let data = hcat(&[l20, &p_blk, &q_blk, lh]);
    let mut segs = vec![
        Segment::new(m_a, Role::A2Tail, 0),
        Segment::new(m_a, Role::RBlock, s.k),
        Segment::new(mh, Role::RBlock, s.k),
    ];
    segs.extend_from_slice(s.lh.segments());
    segs.retain(|x| x.width > 0);
    let lr = TallFactor::new(data, segs)?;
    let id = DMatrix::identity(m_a, m_a);
    let kr = grid(
        &[m_a, m_a, mh, mh],
        &[m_a, m_a, mh, mh],
        &[
            (0, 0, kt_athgha),
            (0, 1, id.clone()),
            (0, 2, kt_athg.clone()),
            (1, 0, id),
            (2, 0, kt_athg.transpose()),
            (2, 2, kt),
            (3, 3, -kh.clone()),
        ],
    );
    let kr = BlockKernel::aligned(kr, &lr, &lr)?;

    let (factor, kernel, deflated) = match l20_copy(s, p) {
        Some(off) => {
            let dst = 2 * m_a + mh + off;
            let (f, k) = merge_columns(&lr, &kr, &[Move::new(0, dst, m_a)])?;
            (f, k, true)
        }
        None => (lr, kr, false),
    };

    let out = ptc_qr(factor.data(), cfg.tau_r, factor.cols());
    let kn = kernel.data().norm();
    let lr_rres = if out.rank == 0 || kn == 0.0 {
        0.0
    } else {
        let u = &out.u;
        let un = u.norm();
        (u * kernel.data() * u.transpose()).norm() / (un * un * kn)
    };
    Ok(LowRankResidual {
        lr_rres,
        factor,
        kernel,
        rank: out.rank,
        deflated,
    })
}

/// One row of the iteration trace.
#[derive(Clone, Debug)]
pub struct ResidualReport {
    pub k: usize,
    pub b_rres: f64,
    /// Present only when `b_rres <= eps_b`.
    pub lr_rres: Option<f64>,
    pub widths: Widths,
    pub bw_a: usize,
    pub bw_g: usize,
    pub bw_h: usize,
    /// Frobenius-norm estimate of `A_k`.
    pub a_norm: f64,
    pub elapsed_s: f64,
}

/// Records which residual stage ran at which iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CallEvent {
    Banded { k: usize, b_rres: f64 },
    LowRank { k: usize, b_rres: f64 },
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub dh: BandedMatrix,
    pub lh: TallFactor,
    pub kh: BlockKernel,
    /// Iteration the returned iterate comes from.
    pub k: usize,
    pub converged: bool,
    pub history: Vec<ResidualReport>,
    pub steps: Vec<StepReport>,
    pub call_log: Vec<CallEvent>,
}

impl Solution {
    /// `DH + LH KH LH^T` as a dense matrix.
    pub fn x_dense(&self) -> Result<DMatrix<f64>> {
        crate::factor::reconstruct(&self.dh, &self.lh, &self.kh, &self.lh)
    }
}

/// Sort key for picking the best iterate when the run does not converge.
fn score(r: &ResidualReport) -> (f64, f64) {
    (r.lr_rres.unwrap_or(f64::INFINITY), r.b_rres)
}

pub fn solve(p: &DareProblem, cfg: &SolverConfig) -> Result<Solution> {
    cfg.validate()?;
    p.validate()?;
    let t0 = Instant::now();
    let mut state = FsdaState::seed(p, cfg);
    let mut history = Vec::new();
    let mut steps = Vec::new();
    let mut call_log = Vec::new();
    let mut best: Option<(usize, FsdaState)> = None;
    let mut converged = false;

    for _ in 0..cfg.max_iter {
        let (next, mut rep) = advance(&state, cfg)?;
        state = next;
        let k = state.k;
        let mut eval = || -> Result<(f64, Option<f64>)> {
            let br = banded_residual(&state, p, cfg)?;
            call_log.push(CallEvent::Banded { k, b_rres: br.b_rres });
            if br.b_rres > cfg.eps_b {
                return Ok((br.b_rres, None));
            }
            call_log.push(CallEvent::LowRank { k, b_rres: br.b_rres });
            let lr = lowrank_residual(&state, p, cfg, &br)?;
            Ok((br.b_rres, Some(lr.lr_rres)))
        };
        let (b_rres, lr_rres) = eval().map_err(|e| e.at_iteration(k))?;
        rep.cost.residual += cost::take().total();
        steps.push(rep);
        let report = ResidualReport {
            k,
            b_rres,
            lr_rres,
            widths: state.widths(),
            bw_a: state.da.half_bw(),
            bw_g: state.dg.half_bw(),
            bw_h: state.dh.half_bw(),
            a_norm: state.a_norm(),
            elapsed_s: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "k={k} B_RRes={b_rres:.3e} LR_RRes={} widths={:?}",
            lr_rres.map_or("-".to_string(), |v| format!("{v:.3e}")),
            report.widths
        );
        let better = match &best {
            None => true,
            Some((i, _)) => score(&report) <= score(&history[*i]),
        };
        history.push(report);
        if better {
            best = Some((history.len() - 1, state.clone()));
        }
        if lr_rres.is_some_and(|v| v <= cfg.eps_l) {
            converged = true;
            break;
        }
    }

    let final_state = if converged {
        state
    } else {
        match best {
            Some((_, s)) => s,
            None => state,
        }
    };
    if !converged {
        log::warn!("no convergence within {} iterations", cfg.max_iter);
    }
    Ok(Solution {
        k: final_state.k,
        dh: final_state.dh,
        lh: final_state.lh,
        kh: final_state.kh,
        converged,
        history,
        steps,
        call_log,
    })
}

fn sci(v: f64) -> String {
    format!("{v:e}")
}

/// `k,b_rres,lr_rres,m_g,m_h,m_a1,m_a2,bw_a,bw_g,bw_h,elapsed_s`; `lr_rres` is
/// empty where it was not evaluated.
pub fn write_trace(history: &[ResidualReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "k", "b_rres", "lr_rres", "m_g", "m_h", "m_a1", "m_a2", "bw_a", "bw_g", "bw_h", "elapsed_s",
    ])?;
    for r in history {
        w.write_record([
            r.k.to_string(),
            sci(r.b_rres),
            r.lr_rres.map(sci).unwrap_or_default(),
            r.widths.m_g.to_string(),
            r.widths.m_h.to_string(),
            r.widths.m_a1.to_string(),
            r.widths.m_a2.to_string(),
            r.bw_a.to_string(),
            r.bw_g.to_string(),
            r.bw_h.to_string(),
            sci(r.elapsed_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-iteration operation counts next to the factor-product row bound.
pub fn write_cost(steps: &[StepReport], n: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "k",
        "band_mul",
        "factor_g",
        "factor_h",
        "factor_product",
        "factor_bound",
        "factor_bw",
        "theta",
        "kernel",
        "qr",
        "residual",
        "peak_factor_values",
    ])?;
    for s in steps {
        let c = &s.cost;
        let bound = cost::factor_row_bound(n, s.factor_bw, s.prior.m_g, s.prior.m_h, s.prior.m_a());
        w.write_record([
            s.k.to_string(),
            c.band_mul.to_string(),
            c.factor_g.to_string(),
            c.factor_h.to_string(),
            c.factor_product().to_string(),
            bound.to_string(),
            s.factor_bw.to_string(),
            c.theta.to_string(),
            c.kernel.to_string(),
            c.qr.to_string(),
            c.residual.to_string(),
            c.peak_factor_values.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
