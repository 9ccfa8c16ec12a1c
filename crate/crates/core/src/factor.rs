//! Tall factors with a segment ledger, and block kernels.

use std::ops::Range;

use nalgebra::DMatrix;

use crate::banded::BandedMatrix;
use crate::error::{FsdaError, Result};

/// Provenance tag of a column block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    G1,
    G2,
    G3,
    A2Tail,
    H1,
    H2,
    H3,
    A1Tail,
    RBlock,
}

impl Role {
    pub fn code(self) -> u32 {
        match self {
            Role::G1 => 0,
            Role::G2 => 1,
            Role::G3 => 2,
            Role::A2Tail => 3,
            Role::H1 => 4,
            Role::H2 => 5,
            Role::H3 => 6,
            Role::A1Tail => 7,
            Role::RBlock => 8,
        }
    }

    pub fn from_code(c: u32) -> Option<Role> {
        Some(match c {
            0 => Role::G1,
            1 => Role::G2,
            2 => Role::G3,
            3 => Role::A2Tail,
            4 => Role::H1,
            5 => Role::H2,
            6 => Role::H3,
            7 => Role::A1Tail,
            8 => Role::RBlock,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub width: usize,
    pub role: Role,
    pub birth_k: usize,
}

impl Segment {
    pub fn new(width: usize, role: Role, birth_k: usize) -> Self {
        Segment {
            width,
            role,
            birth_k,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TallFactor {
    data: DMatrix<f64>,
    segments: Vec<Segment>,
}

impl TallFactor {
    pub fn new(data: DMatrix<f64>, segments: Vec<Segment>) -> Result<Self> {
        let total: usize = segments.iter().map(|s| s.width).sum();
        if total != data.ncols() {
            return Err(FsdaError::Dimension(format!(
                "segment widths sum to {total}, factor has {} columns",
                data.ncols()
            )));
        }
        Ok(TallFactor { data, segments })
    }

    /// One segment covering all columns (none if the block is empty).
    pub fn single(data: DMatrix<f64>, role: Role, birth_k: usize) -> Self {
        let segments = if data.ncols() > 0 {
            vec![Segment::new(data.ncols(), role, birth_k)]
        } else {
            Vec::new()
        };
        TallFactor { data, segments }
    }

    pub fn empty(n: usize) -> Self {
        TallFactor {
            data: DMatrix::zeros(n, 0),
            segments: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Column span covered by all segments carrying `role` (they are contiguous
    /// in canonical order). Empty range at the natural position if absent.
    pub fn role_range(&self, role: Role) -> Range<usize> {
        let mut start = None;
        let mut end = 0;
        let mut off = 0;
        for s in &self.segments {
            if s.role == role {
                if start.is_none() {
                    start = Some(off);
                }
                end = off + s.width;
            }
            off += s.width;
        }
        match start {
            Some(s) => s..end,
            None => 0..0,
        }
    }

    pub fn role_width(&self, role: Role) -> usize {
        self.segments
            .iter()
            .filter(|s| s.role == role)
            .map(|s| s.width)
            .sum()
    }

    pub fn role_block(&self, role: Role) -> DMatrix<f64> {
        let r = self.role_range(role);
        self.columns(r)
    }

    pub fn columns(&self, r: Range<usize>) -> DMatrix<f64> {
        self.data.columns(r.start, r.len()).into_owned()
    }

    pub fn role_segments(&self, role: Role) -> Vec<Segment> {
        self.segments.iter().copied().filter(|s| s.role == role).collect()
    }

    /// Same data, every segment relabelled.
    pub fn retagged(&self, role: Role, birth_k: usize) -> Self {
        TallFactor::single(self.data.clone(), role, birth_k)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.norm()
    }

    pub fn map_data(&self, f: impl FnOnce(&DMatrix<f64>) -> DMatrix<f64>) -> Result<Self> {
        TallFactor::new(f(&self.data), self.segments.clone())
    }
}

/// Concatenates factors column-wise, concatenating their ledgers.
pub fn hstack(parts: &[&TallFactor]) -> Result<TallFactor> {
    let n = match parts.first() {
        Some(p) => p.n(),
        None => return Err(FsdaError::Dimension("hstack of nothing".into())),
    };
    if let Some(p) = parts.iter().find(|p| p.n() != n) {
        return Err(FsdaError::Dimension(format!(
            "hstack rows: {n} vs {}",
            p.n()
        )));
    }
    let m: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = DMatrix::zeros(n, m);
    let mut off = 0;
    let mut segments = Vec::new();
    for p in parts {
        data.columns_mut(off, p.cols()).copy_from(&p.data);
        off += p.cols();
        segments.extend(p.segments.iter().copied().filter(|s| s.width > 0));
    }
    TallFactor::new(data, segments)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockKernel {
    data: DMatrix<f64>,
    row_blocks: Vec<usize>,
    col_blocks: Vec<usize>,
}

impl BlockKernel {
    pub fn new(data: DMatrix<f64>, row_blocks: Vec<usize>, col_blocks: Vec<usize>) -> Result<Self> {
        if row_blocks.iter().sum::<usize>() != data.nrows()
            || col_blocks.iter().sum::<usize>() != data.ncols()
        {
            return Err(FsdaError::Dimension(format!(
                "kernel partition {:?} x {:?} does not cover {}x{}",
                row_blocks,
                col_blocks,
                data.nrows(),
                data.ncols()
            )));
        }
        Ok(BlockKernel {
            data,
            row_blocks,
            col_blocks,
        })
    }

    /// Kernel partitioned to match the ledgers of `rows` and `cols`.
    pub fn aligned(data: DMatrix<f64>, rows: &TallFactor, cols: &TallFactor) -> Result<Self> {
        let rb = rows.segments().iter().map(|s| s.width).collect();
        let cb = cols.segments().iter().map(|s| s.width).collect();
        BlockKernel::new(data, rb, cb)
    }

    pub fn plain(data: DMatrix<f64>) -> Self {
        let rb = if data.nrows() > 0 { vec![data.nrows()] } else { vec![] };
        let cb = if data.ncols() > 0 { vec![data.ncols()] } else { vec![] };
        BlockKernel {
            data,
            row_blocks: rb,
            col_blocks: cb,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        BlockKernel::plain(DMatrix::zeros(rows, cols))
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn row_blocks(&self) -> &[usize] {
        &self.row_blocks
    }

    pub fn col_blocks(&self) -> &[usize] {
        &self.col_blocks
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.data.nrows() == self.data.ncols()
            && (&self.data - self.data.transpose()).amax() <= tol * (1.0 + self.data.amax())
    }
}

/// Moves the duplicate block `src` onto `dst` (equal lengths).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Move {
    pub src: Range<usize>,
    pub dst: Range<usize>,
}

impl Move {
    pub fn new(src: usize, dst: usize, len: usize) -> Self {
        Move {
            src: src..src + len,
            dst: dst..dst + len,
        }
    }
}

pub(crate) const DUPLICATE_TOL: f64 = 1e-13;

fn check_moves(f: &TallFactor, moves: &[Move]) -> Result<()> {
    let mut used: Vec<Range<usize>> = Vec::new();
    for mv in moves {
        if mv.src.len() != mv.dst.len() || mv.src.end > f.cols() || mv.dst.end > f.cols() {
            return Err(FsdaError::Dimension(format!(
                "move {:?} -> {:?} does not fit {} columns",
                mv.src,
                mv.dst,
                f.cols()
            )));
        }
        for r in [&mv.src, &mv.dst] {
            if !r.is_empty() && used.iter().any(|u| u.start < r.end && r.start < u.end) {
                return Err(FsdaError::Dimension(format!("overlapping move ranges at {r:?}")));
            }
        }
        used.push(mv.src.clone());
        used.push(mv.dst.clone());
        for c in 0..mv.src.len() {
            let s = f.data.column(mv.src.start + c);
            let d = f.data.column(mv.dst.start + c);
            let deviation = (s - d).norm();
            let tolerance = DUPLICATE_TOL * d.norm().max(s.norm());
            if deviation > tolerance {
                return Err(FsdaError::MergeMismatch {
                    column: mv.src.start + c,
                    deviation,
                    tolerance,
                });
            }
        }
    }
    Ok(())
}

/// Adds kernel rows `src` into rows `dst` for every move.
pub(crate) fn fold_rows(k: &mut DMatrix<f64>, moves: &[Move]) {
    for mv in moves {
        for c in 0..mv.src.len() {
            let row = k.row(mv.src.start + c).into_owned();
            let mut dst = k.row_mut(mv.dst.start + c);
            dst += row;
        }
    }
}

pub(crate) fn fold_cols(k: &mut DMatrix<f64>, moves: &[Move]) {
    for mv in moves {
        for c in 0..mv.src.len() {
            let col = k.column(mv.src.start + c).into_owned();
            let mut dst = k.column_mut(mv.dst.start + c);
            dst += col;
        }
    }
}

fn deleted(moves: &[Move]) -> Vec<usize> {
    let mut idx: Vec<usize> = moves.iter().flat_map(|m| m.src.clone()).collect();
    idx.sort_unstable();
    idx
}

pub(crate) fn drop_rows(k: DMatrix<f64>, moves: &[Move]) -> DMatrix<f64> {
    let del = deleted(moves);
    if del.is_empty() {
        return k;
    }
    k.remove_rows_at(&del)
}

pub(crate) fn drop_cols(k: DMatrix<f64>, moves: &[Move]) -> DMatrix<f64> {
    let del = deleted(moves);
    if del.is_empty() {
        return k;
    }
    k.remove_columns_at(&del)
}

/// Removes columns and shrinks the ledger; segments that become empty vanish.
pub(crate) fn drop_factor_cols(f: &TallFactor, moves: &[Move]) -> TallFactor {
    let del = deleted(moves);
    if del.is_empty() {
        return f.clone();
    }
    let data = f.data.clone().remove_columns_at(&del);
    let mut segments = Vec::new();
    let mut off = 0;
    for s in &f.segments {
        let gone = del.iter().filter(|&&c| c >= off && c < off + s.width).count();
        if s.width > gone {
            segments.push(Segment::new(s.width - gone, s.role, s.birth_k));
        }
        off += s.width;
    }
    TallFactor { data, segments }
}

/// Coalesces duplicate columns of a factor used symmetrically (`F K F^T`).
///
/// The source columns are deleted; the kernel rows and columns at the source
/// are summed into those at the destination, then deleted.
pub fn merge_columns(f: &TallFactor, k: &BlockKernel, moves: &[Move]) -> Result<(TallFactor, BlockKernel)> {
    if k.rows() != f.cols() || k.cols() != f.cols() {
        return Err(FsdaError::Dimension(format!(
            "kernel {}x{} against factor with {} columns",
            k.rows(),
            k.cols(),
            f.cols()
        )));
    }
    if moves.is_empty() {
        return Ok((f.clone(), k.clone()));
    }
    check_moves(f, moves)?;
    let mut kd = k.data.clone();
    fold_rows(&mut kd, moves);
    fold_cols(&mut kd, moves);
    let kd = drop_cols(drop_rows(kd, moves), moves);
    let f2 = drop_factor_cols(f, moves);
    let k2 = BlockKernel::aligned(kd, &f2, &f2)?;
    Ok((f2, k2))
}

/// Two-sided variant for `L1 K L2^T` with independent row and column moves.
pub fn merge_columns_two_sided(
    l1: &TallFactor,
    k: &BlockKernel,
    l2: &TallFactor,
    row_moves: &[Move],
    col_moves: &[Move],
) -> Result<(TallFactor, BlockKernel, TallFactor)> {
    if k.rows() != l1.cols() || k.cols() != l2.cols() {
        return Err(FsdaError::Dimension(format!(
            "kernel {}x{} against factors with {} and {} columns",
            k.rows(),
            k.cols(),
            l1.cols(),
            l2.cols()
        )));
    }
    check_moves(l1, row_moves)?;
    check_moves(l2, col_moves)?;
    let mut kd = k.data.clone();
    fold_rows(&mut kd, row_moves);
    fold_cols(&mut kd, col_moves);
    let kd = drop_cols(drop_rows(kd, row_moves), col_moves);
    let a = drop_factor_cols(l1, row_moves);
    let b = drop_factor_cols(l2, col_moves);
    let k2 = BlockKernel::aligned(kd, &a, &b)?;
    Ok((a, k2, b))
}

/// `dense(d) + l1 k l2^T`.
pub fn reconstruct(d: &BandedMatrix, l1: &TallFactor, k: &BlockKernel, l2: &TallFactor) -> Result<DMatrix<f64>> {
    let n = d.n();
    if l1.n() != n || l2.n() != n || k.rows() != l1.cols() || k.cols() != l2.cols() {
        return Err(FsdaError::Dimension(format!(
            "reconstruct: band {n}, factors {}x{} and {}x{}, kernel {}x{}",
            l1.n(),
            l1.cols(),
            l2.n(),
            l2.cols(),
            k.rows(),
            k.cols()
        )));
    }
    let mut x = d.to_dense();
    if l1.cols() > 0 && l2.cols() > 0 {
        x += l1.data() * k.data() * l2.data().transpose();
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(n: usize, m: usize, seed: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |i, j| (((i + 1) * 31 + (j + 1) * 17 + seed * 7) % 23) as f64 / 23.0 - 0.5)
    }

    #[test]
    fn hstack_single_and_empty() {
        let x = TallFactor::single(block(8, 3, 1), Role::G2, 1);
        assert_eq!(hstack(&[&x]).unwrap(), x);
        let e = TallFactor::empty(8);
        assert_eq!(hstack(&[&x, &e]).unwrap(), x);
    }

    #[test]
    fn hstack_two_blocks() {
        let a = TallFactor::single(block(8, 2, 1), Role::G1, 1);
        let b = TallFactor::single(block(8, 2, 2), Role::G2, 2);
        let s = hstack(&[&a, &b]).unwrap();
        assert_eq!(s.cols(), 4);
        assert_eq!(s.segments().len(), 2);
        assert_eq!(s.columns(2..4), block(8, 2, 2));
        assert!(hstack(&[&a, &TallFactor::empty(7)]).is_err());
    }

    #[test]
    fn empty_moves_change_nothing() {
        let f = TallFactor::single(block(6, 3, 3), Role::G2, 1);
        let k = BlockKernel::plain(block(3, 3, 4));
        let (f2, k2) = merge_columns(&f, &k, &[]).unwrap();
        assert_eq!((f2, k2), (f, k));
    }

    #[test]
    fn split_weight_merges_back() {
        let v = block(6, 1, 5);
        let mut both = DMatrix::zeros(6, 2);
        both.column_mut(0).copy_from(&v.column(0));
        both.column_mut(1).copy_from(&v.column(0));
        let f = TallFactor::new(
            both,
            vec![Segment::new(1, Role::G1, 1), Segment::new(1, Role::G2, 1)],
        )
        .unwrap();
        let k = BlockKernel::plain(DMatrix::from_row_slice(2, 2, &[0.25, 0.5, 0.5, 0.75]));
        let (f2, k2) = merge_columns(&f, &k, &[Move::new(1, 0, 1)]).unwrap();
        assert_eq!(f2.cols(), 1);
        assert_eq!(k2.data()[(0, 0)], 2.0);
        let before = f.data() * k.data() * f.data().transpose();
        let after = f2.data() * k2.data() * f2.data().transpose();
        assert!((&before - &after).amax() <= 4.0 * f64::EPSILON * before.amax());
    }

    #[test]
    fn mismatch_names_column() {
        let mut d = block(6, 2, 6);
        d[(0, 1)] += 1.0;
        let f = TallFactor::single(d, Role::G2, 1);
        let k = BlockKernel::zeros(2, 2);
        match merge_columns(&f, &k, &[Move::new(1, 0, 1)]) {
            Err(FsdaError::MergeMismatch { column, deviation, .. }) => {
                assert_eq!(column, 1);
                assert!(deviation > 0.5);
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn ledger_shrinks_by_deleted_width() {
        let g = block(8, 2, 7);
        let data = DMatrix::from_fn(8, 5, |i, j| g[(i, [0, 1, 0, 1, 0][j] % 2)] * if j == 4 { 2.0 } else { 1.0 });
        let f = TallFactor::new(
            data,
            vec![
                Segment::new(2, Role::G1, 1),
                Segment::new(2, Role::G2, 2),
                Segment::new(1, Role::G3, 2),
            ],
        )
        .unwrap();
        let k = BlockKernel::aligned(DMatrix::identity(5, 5), &f, &f).unwrap();
        let (f2, k2) = merge_columns(&f, &k, &[Move::new(2, 0, 2)]).unwrap();
        assert_eq!(f.cols() - f2.cols(), 2);
        assert_eq!(f2.role_width(Role::G2), 0);
        assert!(k2.is_symmetric(0.0));
    }

    #[test]
    fn reconstruct_cases() {
        let d = BandedMatrix::identity(5);
        let e = TallFactor::empty(5);
        assert_eq!(
            reconstruct(&d, &e, &BlockKernel::zeros(0, 0), &e).unwrap(),
            DMatrix::identity(5, 5)
        );
        let u = block(5, 1, 8);
        let v = block(5, 1, 9);
        let z = BandedMatrix::zeros(5);
        let r = reconstruct(
            &z,
            &TallFactor::single(u.clone(), Role::G2, 0),
            &BlockKernel::plain(DMatrix::identity(1, 1)),
            &TallFactor::single(v.clone(), Role::H2, 0),
        )
        .unwrap();
        assert_eq!(r, &u * v.transpose());
    }

    #[test]
    fn reconstruct_matches_naive() {
        let n = 7;
        let d = BandedMatrix::from_dense_band(&block(n, n, 10), 1, 2);
        let l1 = TallFactor::single(block(n, 3, 11), Role::G2, 1);
        let l2 = TallFactor::single(block(n, 2, 12), Role::H2, 1);
        let k = BlockKernel::plain(block(3, 2, 13));
        let r = reconstruct(&d, &l1, &k, &l2).unwrap();
        let mut naive = d.to_dense();
        for i in 0..n {
            for j in 0..n {
                for a in 0..3 {
                    for b in 0..2 {
                        naive[(i, j)] += l1.data()[(i, a)] * k.data()[(a, b)] * l2.data()[(j, b)];
                    }
                }
            }
        }
        assert!((r - naive).amax() < 1e-14);
    }
}
