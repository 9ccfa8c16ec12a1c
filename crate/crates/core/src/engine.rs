//! One doubling step on the factored iterates.
//!
//! Iterates are kept as
//!
//! ```text
//! A_k = DA + LA1 KA LA2^T,   G_k = DG + LG KG LG^T,   H_k = DH + LH KH LH^T
//! ```
//!
//! with factors in the deflated layout
//! `LG = [G1 | G2 | G3]`, `LA1 = [G2 | A1tail]`, `LH = [H1 | H2 | H3]`,
//! `LA2 = [H2 | A2tail]`. The state before the first step has empty `LG`, `LH`,
//! `LA1 = L10`, `LA2 = L20` and `KA = I`, so the first step needs no special case.

use nalgebra::DMatrix;

use crate::banded::{make_gh_helpers, BandedMatrix, HelperSet};
use crate::config::SolverConfig;
use crate::cost::{self, Category, CostCounters};
use crate::error::{FsdaError, Result};
use crate::factor::{
    drop_cols, drop_rows, fold_cols, fold_rows, hstack, merge_columns, merge_columns_two_sided, reconstruct,
    BlockKernel, Move, Role, Segment, TallFactor,
};
use crate::problem::DareProblem;
use crate::reduction::{apply_ptc, monitor_prune, MonitorReport, PtcReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Widths {
    pub m_g: usize,
    pub m_h: usize,
    pub m_a1: usize,
    pub m_a2: usize,
}

impl Widths {
    /// `max(m_a1, m_a2)`.
    pub fn m_a(&self) -> usize {
        self.m_a1.max(self.m_a2)
    }
}

#[derive(Clone, Debug)]
pub struct FsdaState {
    pub k: usize,
    pub da: BandedMatrix,
    pub dg: BandedMatrix,
    pub dh: BandedMatrix,
    pub lg: TallFactor,
    pub lh: TallFactor,
    pub la1: TallFactor,
    pub la2: TallFactor,
    pub kg: BlockKernel,
    pub kh: BlockKernel,
    pub ka: BlockKernel,
    /// Bandwidth cap in force for this run.
    pub max_bw: usize,
    /// Column count of the original low-rank part.
    pub m_a: usize,
}

impl FsdaState {
    pub fn n(&self) -> usize {
        self.da.n()
    }

    pub fn widths(&self) -> Widths {
        Widths {
            m_g: self.lg.cols(),
            m_h: self.lh.cols(),
            m_a1: self.la1.cols(),
            m_a2: self.la2.cols(),
        }
    }

    pub fn a_dense(&self) -> Result<DMatrix<f64>> {
        reconstruct(&self.da, &self.la1, &self.ka, &self.la2)
    }

    pub fn g_dense(&self) -> Result<DMatrix<f64>> {
        reconstruct(&self.dg, &self.lg, &self.kg, &self.lg)
    }

    pub fn h_dense(&self) -> Result<DMatrix<f64>> {
        reconstruct(&self.dh, &self.lh, &self.kh, &self.lh)
    }

    /// `||DA||_F + ||LA1 KA LA2^T||_F`, the latter through small Gram matrices.
    pub fn a_norm(&self) -> f64 {
        let low = if self.la1.cols() > 0 && self.la2.cols() > 0 {
            let g1 = self.la1.data().transpose() * self.la1.data();
            let g2 = self.la2.data().transpose() * self.la2.data();
            let k = self.ka.data();
            (g1 * k * g2 * k.transpose()).trace().max(0.0).sqrt()
        } else {
            0.0
        };
        self.da.frobenius() + low
    }

    /// Checks ledgers against kernels, the deflated layout and kernel symmetry.
    pub fn check(&self) -> Result<()> {
        let fail = |msg: String| Err(FsdaError::Dimension(msg));
        let n = self.n();
        for f in [&self.lg, &self.lh, &self.la1, &self.la2] {
            if f.n() != n {
                return fail(format!("factor has {} rows, expected {n}", f.n()));
            }
        }
        let aligned = |k: &BlockKernel, r: &TallFactor, c: &TallFactor| {
            let rb: Vec<usize> = r.segments().iter().map(|s| s.width).collect();
            let cb: Vec<usize> = c.segments().iter().map(|s| s.width).collect();
            k.row_blocks() == rb.as_slice() && k.col_blocks() == cb.as_slice()
        };
        if !aligned(&self.kg, &self.lg, &self.lg)
            || !aligned(&self.kh, &self.lh, &self.lh)
            || !aligned(&self.ka, &self.la1, &self.la2)
        {
            return fail("kernel partition does not match factor ledger".into());
        }
        if self.lg.role_block(Role::G2) != self.la1.role_block(Role::G2)
            || self.lh.role_block(Role::H2) != self.la2.role_block(Role::H2)
        {
            return fail("shared G2/H2 blocks differ between factors".into());
        }
        if !self.kg.is_symmetric(1e-13) || !self.kh.is_symmetric(1e-13) {
            return fail("KG or KH lost symmetry".into());
        }
        Ok(())
    }

    /// State before the first step.
    pub fn seed(p: &DareProblem, cfg: &SolverConfig) -> Self {
        let n = p.n();
        let m_a = p.m_a();
        let la1 = p.la10.retagged(Role::A1Tail, 0);
        let la2 = p.la20.retagged(Role::A2Tail, 0);
        let ka = BlockKernel::aligned(DMatrix::identity(m_a, m_a), &la1, &la2)
            .expect("identity kernel matches seed factors");
        FsdaState {
            k: 0,
            da: p.da0.clone(),
            dg: p.dg0.clone(),
            dh: p.dh0.clone(),
            lg: TallFactor::empty(n),
            lh: TallFactor::empty(n),
            la1,
            la2,
            kg: BlockKernel::zeros(0, 0),
            kh: BlockKernel::zeros(0, 0),
            ka,
            max_bw: cfg.max_bw_for(n, p.initial_bw()),
            m_a,
        }
    }
}

/// The new banded parts and the helpers that produced them.
#[derive(Clone, Debug)]
pub struct BandedStep {
    pub dg: BandedMatrix,
    pub dh: BandedMatrix,
    pub da: BandedMatrix,
    pub helpers: HelperSet,
    /// Largest magnitude removed by the bandwidth cap on the iterates.
    pub clipped_max: f64,
}

fn symmetrized(m: BandedMatrix) -> Result<BandedMatrix> {
    Ok(m.add(&m.transpose())?.scaled(0.5))
}

pub(crate) fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

pub fn banded_step(s: &FsdaState, cfg: &SolverConfig) -> Result<BandedStep> {
    let drop = cfg.band_drop;
    let h = make_gh_helpers(&s.da, &s.dg, &s.dh, drop, s.max_bw)?;
    let dat = s.da.transpose();
    let mut lost: f64 = 0.0;
    let mut finish = |m: BandedMatrix| {
        let (m, l) = m.pruned(cfg.tol).clipped(s.max_bw);
        lost = lost.max(l);
        m
    };
    let dg = finish(symmetrized(s.dg.add(&h.aghg.mul(&dat, drop)?)?)?);
    let dh = finish(symmetrized(s.dh.add(&h.athgh.mul(&s.da, drop)?)?)?);
    let da = finish(h.agh.mul(&s.da, drop)?);
    if lost > cfg.tol {
        log::warn!("bandwidth cap {} discarded iterate entries up to {lost:.3e}", s.max_bw);
    }
    Ok(BandedStep {
        dg,
        dh,
        da,
        clipped_max: lost.max(h.clipped_max),
        helpers: h,
    })
}

#[derive(Clone, Debug)]
pub struct ThetaSet {
    /// `LH^T GHG LH`
    pub h: DMatrix<f64>,
    /// `LG^T HGH LG`
    pub g: DMatrix<f64>,
    /// `LH^T GH LG`
    pub hg: DMatrix<f64>,
    /// `LA2^T GH LA1`
    pub a: DMatrix<f64>,
    /// `LA1^T HGH LA1`
    pub a1: DMatrix<f64>,
    /// `LA2^T GHG LA2`
    pub a2: DMatrix<f64>,
    /// `LA1^T HG LH`
    pub a1_h: DMatrix<f64>,
    /// `LA1^T HGH LG`
    pub a1_g: DMatrix<f64>,
    /// `LA2^T GHG LH`
    pub a2_h: DMatrix<f64>,
    /// `LA2^T GH LG`
    pub a2_g: DMatrix<f64>,
}

fn gram(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    cost::record(Category::Theta, cost::gemm(a.ncols(), a.nrows(), b.ncols()));
    a.transpose() * b
}

pub fn compute_thetas(s: &FsdaState, h: &HelperSet) -> Result<ThetaSet> {
    let (lg, lh, la1, la2) = (s.lg.data(), s.lh.data(), s.la1.data(), s.la2.data());
    let t = |b: &BandedMatrix, x: &DMatrix<f64>| b.mul_dense_counted(x, Category::Theta);
    let ghg_lh = t(&h.ghg, lh)?;
    let hgh_lg = t(&h.hgh, lg)?;
    let gh_lg = t(&h.gh, lg)?;
    let gh_la1 = t(&h.gh, la1)?;
    let hgh_la1 = t(&h.hgh, la1)?;
    let ghg_la2 = t(&h.ghg, la2)?;
    Ok(ThetaSet {
        h: gram(lh, &ghg_lh),
        g: gram(lg, &hgh_lg),
        hg: gram(lh, &gh_lg),
        a: gram(la2, &gh_la1),
        a1: gram(la1, &hgh_la1),
        a2: gram(la2, &ghg_la2),
        a1_h: gram(lh, &gh_la1).transpose(),
        a1_g: gram(la1, &hgh_lg),
        a2_h: gram(la2, &ghg_lh),
        a2_g: gram(la2, &gh_lg),
    })
}

#[derive(Clone, Debug)]
pub struct KernelComponents {
    /// Rows ordered (G, H), columns (H, G).
    pub k_gh: DMatrix<f64>,
    /// Rows and columns ordered (G, H).
    pub k_ghg: DMatrix<f64>,
    /// Rows and columns ordered (H, G).
    pub k_hgh: DMatrix<f64>,
    pub k_aghg: DMatrix<f64>,
    pub k_athgh: DMatrix<f64>,
    pub k_aghgat: DMatrix<f64>,
    pub k_athgha: DMatrix<f64>,
    pub k_agh: DMatrix<f64>,
    pub k_atgh: DMatrix<f64>,
    pub k_agha: DMatrix<f64>,
}

pub(crate) fn hcat(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let r = blocks[0].nrows();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(r, c);
    let mut off = 0;
    for b in blocks {
        out.view_mut((0, off), (r, b.ncols())).copy_from(*b);
        off += b.ncols();
    }
    out
}

/// Dense block matrix from a grid; `None` entries are zero blocks.
pub(crate) fn grid(rows: &[usize], cols: &[usize], blocks: &[(usize, usize, DMatrix<f64>)]) -> DMatrix<f64> {
    let ro: Vec<usize> = rows.iter().scan(0, |a, &w| { let o = *a; *a += w; Some(o) }).collect();
    let co: Vec<usize> = cols.iter().scan(0, |a, &w| { let o = *a; *a += w; Some(o) }).collect();
    let mut out = DMatrix::zeros(rows.iter().sum(), cols.iter().sum());
    for (i, j, b) in blocks {
        debug_assert_eq!((b.nrows(), b.ncols()), (rows[*i], cols[*j]));
        out.view_mut((ro[*i], co[*j]), (rows[*i], cols[*j])).copy_from(b);
    }
    out
}

fn mm(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    cost::record(Category::Kernel, cost::gemm(a.nrows(), a.ncols(), b.ncols()));
    a * b
}

/// Solves `x m = c` for `x` by LU of `m^T`, refusing numerically singular `m`.
pub(crate) fn right_solve(c: &DMatrix<f64>, m: DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let size = m.nrows();
    if size == 0 {
        return Ok(c.clone());
    }
    cost::record(Category::Kernel, (2 * size * size * size / 3 + 2 * size * size * c.nrows()) as u64);
    let scale = m.amax();
    let lu = m.transpose().lu();
    let u = lu.u();
    let tiny = f64::EPSILON * scale * size as f64;
    if (0..size).any(|i| u[(i, i)].abs() <= tiny) {
        return Err(FsdaError::SingularKernel { what, size });
    }
    let xt = lu
        .solve(&c.transpose())
        .ok_or(FsdaError::SingularKernel { what, size })?;
    Ok(xt.transpose())
}

pub fn kernel_components(s: &FsdaState, th: &ThetaSet) -> Result<KernelComponents> {
    let mg = s.lg.cols();
    let mh = s.lh.cols();
    let m = mg + mh;
    let kg = s.kg.data();
    let kh = s.kh.data();
    let ka = s.ka.data();

    // T Dk with T = [[-ThH, ThHG], [ThHG^T, ThG]] and Dk = diag(-KH, KG), rows/cols (H, G)
    let t = grid(
        &[mh, mg],
        &[mh, mg],
        &[
            (0, 0, -th.h.clone()),
            (0, 1, th.hg.clone()),
            (1, 0, th.hg.transpose()),
            (1, 1, th.g.clone()),
        ],
    );
    let dk = grid(&[mh, mg], &[mh, mg], &[(0, 0, -kh.clone()), (1, 1, kg.clone())]);
    let middle = DMatrix::identity(m, m) + mm(&t, &dk);
    let c0 = grid(&[mg, mh], &[mh, mg], &[(0, 1, kg.clone()), (1, 0, kh.clone())]);
    let k_gh = right_solve(&c0, middle, "kernel middle")?;

    // column swap (H, G) -> (G, H) with the G block negated
    let k_ghg = hcat(&[&(-k_gh.columns(mh, mg).into_owned()), &k_gh.columns(0, mh).into_owned()]);
    // row swap (G, H) -> (H, G) with the H block negated
    let mut k_hgh = DMatrix::zeros(m, m);
    k_hgh.rows_mut(0, mh).copy_from(&(-k_gh.rows(mg, mh).into_owned()));
    k_hgh.rows_mut(mh, mg).copy_from(&k_gh.rows(0, mg));

    let t2 = hcat(&[&th.a2_g, &th.a2_h]);
    let t1 = hcat(&[&th.a1_h, &th.a1_g]);
    let kat = ka.transpose();

    let k_aghg = -mm(&mm(ka, &t2), &k_ghg);
    let k_athgh = -mm(&mm(&kat, &t1), &k_hgh);
    let k_aghgat = mm(&mm(ka, &th.a2), &kat) + mm(&mm(&k_aghg, &t2.transpose()), &kat);
    let k_athgha = mm(&mm(&kat, &th.a1), ka) + mm(&mm(&k_athgh, &t1.transpose()), ka);
    let k_agh = -mm(&mm(ka, &t2), &k_gh);
    let k_atgh = -mm(&mm(&kat, &t1), &k_gh.transpose());
    let k_agha = mm(&mm(ka, &th.a), ka) + mm(&mm(&k_agh, &t1.transpose()), ka);

    Ok(KernelComponents {
        k_gh,
        k_ghg,
        k_hgh,
        k_aghg,
        k_athgh,
        k_aghgat: sym(k_aghgat),
        k_athgha: sym(k_athgha),
        k_agh,
        k_atgh,
        k_agha,
    })
}

/// Widths of the prior state's ledger, used for block offsets.
#[derive(Clone, Copy, Debug)]
struct Layout {
    /// G1, G2, G3, A1tail
    w1: usize,
    r: usize,
    w3: usize,
    t1: usize,
    /// H1, H2, H3, A2tail
    v1: usize,
    s: usize,
    v3: usize,
    t2: usize,
}

impl Layout {
    fn of(st: &FsdaState) -> Self {
        Layout {
            w1: st.lg.role_width(Role::G1),
            r: st.lg.role_width(Role::G2),
            w3: st.lg.role_width(Role::G3),
            t1: st.la1.role_width(Role::A1Tail),
            v1: st.lh.role_width(Role::H1),
            s: st.lh.role_width(Role::H2),
            v3: st.lh.role_width(Role::H3),
            t2: st.la2.role_width(Role::A2Tail),
        }
    }
    fn mg(&self) -> usize {
        self.w1 + self.r + self.w3
    }
    fn mh(&self) -> usize {
        self.v1 + self.s + self.v3
    }
    fn ma1(&self) -> usize {
        self.r + self.t1
    }
    fn ma2(&self) -> usize {
        self.s + self.t2
    }

    /// Duplicate blocks of `[LG | LA1 | AGH LG | AGHG LH | AGHG LA2]`.
    fn g_moves(&self) -> Vec<Move> {
        let o3 = 2 * self.mg() + self.ma1();
        let o4 = o3 + self.mh();
        vec![Move::new(self.w1, self.mg(), self.r), Move::new(o4, o3 + self.v1, self.s)]
    }

    /// Duplicate blocks of `[LH | LA2 | AtHG LH | AtHGH LG | AtHGH LA1]`.
    fn h_moves(&self) -> Vec<Move> {
        let o3 = 2 * self.mh() + self.ma2();
        let o4 = o3 + self.mg();
        vec![Move::new(self.v1, self.mh(), self.s), Move::new(o4, o3 + self.w1, self.r)]
    }

    /// Duplicate block of `[LA1 | AGH LG | AGHG LH | AGH LA1]`.
    fn a1_moves(&self) -> Vec<Move> {
        let m = self.ma1();
        vec![Move::new(m + self.mg() + self.mh(), m + self.w1, self.r)]
    }

    /// Duplicate block of `[LA2 | AtHG LH | AtHGH LG | AtHG LA2]`.
    fn a2_moves(&self) -> Vec<Move> {
        let m = self.ma2();
        vec![Move::new(m + self.mh() + self.mg(), m + self.v1, self.s)]
    }
}

/// Kernels of the next iterate before any duplicate columns are removed.
struct FullKernels {
    kg: DMatrix<f64>,
    kh: DMatrix<f64>,
    ka: DMatrix<f64>,
}

fn full_kernels(s: &FsdaState, kc: &KernelComponents, l: &Layout) -> FullKernels {
    let (mg, mh, ma1, ma2) = (l.mg(), l.mh(), l.ma1(), l.ma2());
    let ka = s.ka.data();
    let kg = grid(
        &[mg, ma1, mg + mh, ma2],
        &[mg, ma1, mg + mh, ma2],
        &[
            (0, 0, s.kg.data().clone()),
            (1, 1, kc.k_aghgat.clone()),
            (1, 2, kc.k_aghg.clone()),
            (1, 3, ka.clone()),
            (2, 1, kc.k_aghg.transpose()),
            (2, 2, -kc.k_ghg.clone()),
            (3, 1, ka.transpose()),
        ],
    );
    let kh = grid(
        &[mh, ma2, mh + mg, ma1],
        &[mh, ma2, mh + mg, ma1],
        &[
            (0, 0, s.kh.data().clone()),
            (1, 1, kc.k_athgha.clone()),
            (1, 2, kc.k_athgh.clone()),
            (1, 3, ka.transpose()),
            (2, 1, kc.k_athgh.transpose()),
            (2, 2, -kc.k_hgh.clone()),
            (3, 1, ka.clone()),
        ],
    );
    let kan = grid(
        &[ma1, mg + mh, ma1],
        &[ma2, mh + mg, ma2],
        &[
            (0, 0, kc.k_agha.clone()),
            (0, 1, kc.k_agh.clone()),
            (0, 2, ka.clone()),
            (1, 0, kc.k_atgh.transpose()),
            (1, 1, -kc.k_gh.clone()),
            (2, 0, ka.clone()),
        ],
    );
    FullKernels { kg, kh, ka: kan }
}

fn tall(d: DMatrix<f64>, segs: Vec<Segment>) -> Result<TallFactor> {
    TallFactor::new(d, segs.into_iter().filter(|s| s.width > 0).collect())
}

/// Builds the next iterate directly in the deflated layout.
pub fn assemble_next(s: &FsdaState, step: &BandedStep, kc: &KernelComponents) -> Result<FsdaState> {
    let k = s.k + 1;
    let l = Layout::of(s);
    let h = &step.helpers;
    let fg = |b: &BandedMatrix, x: &DMatrix<f64>| b.mul_dense_counted(x, Category::FactorG);
    let fh = |b: &BandedMatrix, x: &DMatrix<f64>| b.mul_dense_counted(x, Category::FactorH);
    let a2t = s.la2.role_block(Role::A2Tail);
    let a1t = s.la1.role_block(Role::A1Tail);

    let agh_lg = fg(&h.agh, s.lg.data())?;
    let aghg_lh = fg(&h.aghg, s.lh.data())?;
    let g3 = fg(&h.aghg, &a2t)?;
    let a1_tail = fg(&h.agh, &a1t)?;
    let athg_lh = fh(&h.athg, s.lh.data())?;
    let athgh_lg = fh(&h.athgh, s.lg.data())?;
    let h3 = fh(&h.athgh, &a1t)?;
    let a2_tail = fh(&h.athg, &a2t)?;

    let g2 = hcat(&[s.la1.data(), &agh_lg, &aghg_lh]);
    let h2 = hcat(&[s.la2.data(), &athg_lh, &athgh_lg]);

    let mut g1_segs = s.lg.role_segments(Role::G1);
    g1_segs.extend(s.lg.role_segments(Role::G3).into_iter().map(|x| Segment::new(x.width, Role::G1, x.birth_k)));
    let mut h1_segs = s.lh.role_segments(Role::H1);
    h1_segs.extend(s.lh.role_segments(Role::H3).into_iter().map(|x| Segment::new(x.width, Role::H1, x.birth_k)));

    let mut g_segs = g1_segs;
    g_segs.push(Segment::new(g2.ncols(), Role::G2, k));
    g_segs.push(Segment::new(g3.ncols(), Role::G3, k));
    let mut h_segs = h1_segs;
    h_segs.push(Segment::new(h2.ncols(), Role::H2, k));
    h_segs.push(Segment::new(h3.ncols(), Role::H3, k));

    let lg = tall(
        hcat(&[&s.lg.role_block(Role::G1), &s.lg.role_block(Role::G3), &g2, &g3]),
        g_segs,
    )?;
    let lh = tall(
        hcat(&[&s.lh.role_block(Role::H1), &s.lh.role_block(Role::H3), &h2, &h3]),
        h_segs,
    )?;
    let la1 = tall(
        hcat(&[&g2, &a1_tail]),
        vec![Segment::new(g2.ncols(), Role::G2, k), Segment::new(a1_tail.ncols(), Role::A1Tail, k)],
    )?;
    let la2 = tall(
        hcat(&[&h2, &a2_tail]),
        vec![Segment::new(h2.ncols(), Role::H2, k), Segment::new(a2_tail.ncols(), Role::A2Tail, k)],
    )?;

    let full = full_kernels(s, kc, &l);
    let (gm, hm, a1m, a2m) = (l.g_moves(), l.h_moves(), l.a1_moves(), l.a2_moves());
    let mut kg = full.kg;
    fold_rows(&mut kg, &gm);
    fold_cols(&mut kg, &gm);
    let kg = sym(drop_cols(drop_rows(kg, &gm), &gm));
    let mut kh = full.kh;
    fold_rows(&mut kh, &hm);
    fold_cols(&mut kh, &hm);
    let kh = sym(drop_cols(drop_rows(kh, &hm), &hm));
    let mut ka = full.ka;
    fold_rows(&mut ka, &a1m);
    fold_cols(&mut ka, &a2m);
    let ka = drop_cols(drop_rows(ka, &a1m), &a2m);

    let kg = BlockKernel::aligned(kg, &lg, &lg)?;
    let kh = BlockKernel::aligned(kh, &lh, &lh)?;
    let ka = BlockKernel::aligned(ka, &la1, &la2)?;
    cost::note_factor_values(((lg.cols() + lh.cols() + la1.cols() + la2.cols()) * lg.n()) as u64);

    Ok(FsdaState {
        k,
        da: step.da.clone(),
        dg: step.dg.clone(),
        dh: step.dh.clone(),
        lg,
        lh,
        la1,
        la2,
        kg,
        kh,
        ka,
        max_bw: s.max_bw,
        m_a: s.m_a,
    })
}

/// Next factors and kernels with every duplicated column still present.
#[derive(Clone, Debug)]
pub struct Undeflated {
    pub lg: TallFactor,
    pub lh: TallFactor,
    pub la1: TallFactor,
    pub la2: TallFactor,
    pub kg: BlockKernel,
    pub kh: BlockKernel,
    pub ka: BlockKernel,
    g_moves: Vec<Move>,
    h_moves: Vec<Move>,
    a1_moves: Vec<Move>,
    a2_moves: Vec<Move>,
}

/// The full next-iterate factors, column blocks in formula order. Kept as a
/// reference for the deflated assembly.
pub fn assemble_undeflated(s: &FsdaState, step: &BandedStep, kc: &KernelComponents) -> Result<Undeflated> {
    let l = Layout::of(s);
    let h = &step.helpers;
    let band = |b: &BandedMatrix, f: &TallFactor| -> Result<TallFactor> {
        TallFactor::new(b.mul_dense(f.data())?, f.segments().to_vec())
    };
    let lg = hstack(&[&s.lg, &s.la1, &band(&h.agh, &s.lg)?, &band(&h.aghg, &s.lh)?, &band(&h.aghg, &s.la2)?])?;
    let lh = hstack(&[&s.lh, &s.la2, &band(&h.athg, &s.lh)?, &band(&h.athgh, &s.lg)?, &band(&h.athgh, &s.la1)?])?;
    let la1 = hstack(&[&s.la1, &band(&h.agh, &s.lg)?, &band(&h.aghg, &s.lh)?, &band(&h.agh, &s.la1)?])?;
    let la2 = hstack(&[&s.la2, &band(&h.athg, &s.lh)?, &band(&h.athgh, &s.lg)?, &band(&h.athg, &s.la2)?])?;
    let full = full_kernels(s, kc, &l);
    Ok(Undeflated {
        kg: BlockKernel::aligned(full.kg, &lg, &lg)?,
        kh: BlockKernel::aligned(full.kh, &lh, &lh)?,
        ka: BlockKernel::aligned(full.ka, &la1, &la2)?,
        lg,
        lh,
        la1,
        la2,
        g_moves: l.g_moves(),
        h_moves: l.h_moves(),
        a1_moves: l.a1_moves(),
        a2_moves: l.a2_moves(),
    })
}

impl Undeflated {
    /// Removes the duplicate columns through verified merges.
    pub fn deflate(&self) -> Result<Undeflated> {
        let (lg, kg) = merge_columns(&self.lg, &self.kg, &self.g_moves)?;
        let (lh, kh) = merge_columns(&self.lh, &self.kh, &self.h_moves)?;
        let (la1, ka, la2) =
            merge_columns_two_sided(&self.la1, &self.ka, &self.la2, &self.a1_moves, &self.a2_moves)?;
        Ok(Undeflated {
            lg,
            lh,
            la1,
            la2,
            kg,
            kh,
            ka,
            g_moves: vec![],
            h_moves: vec![],
            a1_moves: vec![],
            a2_moves: vec![],
        })
    }

    /// Pre-deflation widths `(m_g, m_h, m_a1, m_a2)`.
    pub fn widths(&self) -> Widths {
        Widths {
            m_g: self.lg.cols(),
            m_h: self.lh.cols(),
            m_a1: self.la1.cols(),
            m_a2: self.la2.cols(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub k: usize,
    /// Widths of the iterate the step started from.
    pub prior: Widths,
    /// Widths right after assembly, before compression.
    pub assembled: Widths,
    pub ptc: Option<PtcReport>,
    pub monitor: MonitorReport,
    /// Half-bandwidth of the helpers that multiplied tall factors.
    pub factor_bw: usize,
    pub clipped_max: f64,
    pub inverse_residual: f64,
    pub cost: CostCounters,
}

/// Stages of one step, exposed so tests can observe the iterate between them.
pub struct StepParts {
    pub step: BandedStep,
    pub thetas: ThetaSet,
    pub kernels: KernelComponents,
    /// Deflated, before compression.
    pub assembled: FsdaState,
}

pub fn step_parts(s: &FsdaState, cfg: &SolverConfig) -> Result<StepParts> {
    let step = banded_step(s, cfg)?;
    let thetas = compute_thetas(s, &step.helpers)?;
    let kernels = kernel_components(s, &thetas)?;
    let assembled = assemble_next(s, &step, &kernels)?;
    Ok(StepParts {
        step,
        thetas,
        kernels,
        assembled,
    })
}

/// One full step: banded update, kernels, deflated assembly, and from the
/// second step on compression and the monitoring prune.
pub fn advance(s: &FsdaState, cfg: &SolverConfig) -> Result<(FsdaState, StepReport)> {
    let k = s.k + 1;
    let _ = cost::take();
    let run = || -> Result<(FsdaState, StepReport)> {
        let parts = step_parts(s, cfg)?;
        let assembled = parts.assembled.widths();
        let (next, ptc, monitor) = if k >= 2 {
            let (st, ptc) = apply_ptc(&parts.assembled, cfg)?;
            let (st, mon) = monitor_prune(&st, cfg)?;
            (st, Some(ptc), mon)
        } else {
            (parts.assembled, None, MonitorReport::default())
        };
        let report = StepReport {
            k,
            prior: s.widths(),
            assembled,
            ptc,
            monitor,
            factor_bw: parts.step.helpers.factor_bw(),
            clipped_max: parts.step.clipped_max,
            inverse_residual: parts.step.helpers.inverse_residual,
            cost: CostCounters::default(),
        };
        Ok((next, report))
    };
    let (next, mut report) = run().map_err(|e| e.at_iteration(k))?;
    report.cost = cost::take();
    Ok((next, report))
}

/// The iterate at `k = 1`.
pub fn init_state(p: &DareProblem, cfg: &SolverConfig) -> Result<FsdaState> {
    let seed = FsdaState::seed(p, cfg);
    Ok(advance(&seed, cfg)?.0)
}
