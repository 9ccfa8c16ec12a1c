//! Per-iteration operation tallies.
//!
//! Counting is thread-local so concurrent solves on different threads do not
//! mix their numbers. Flop counts are computed from operand shapes at the call
//! site, before any work is farmed out to the thread pool.

use std::cell::RefCell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    BandMul,
    /// Band-times-tall products that build the next G-side factor blocks.
    FactorG,
    /// Band-times-tall products that build the next H-side factor blocks.
    FactorH,
    Theta,
    Kernel,
    Qr,
    Residual,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostCounters {
    pub band_mul: u64,
    pub factor_g: u64,
    pub factor_h: u64,
    pub theta: u64,
    pub kernel: u64,
    pub qr: u64,
    pub residual: u64,
    /// Largest number of f64 values held in tall factors at once.
    pub peak_factor_values: u64,
}

impl CostCounters {
    pub fn factor_product(&self) -> u64 {
        self.factor_g + self.factor_h
    }

    pub fn total(&self) -> u64 {
        self.band_mul
            + self.factor_g
            + self.factor_h
            + self.theta
            + self.kernel
            + self.qr
            + self.residual
    }
}

thread_local! {
    static COUNTERS: RefCell<CostCounters> = RefCell::new(CostCounters::default());
}

pub fn record(cat: Category, flops: u64) {
    COUNTERS.with(|c| {
        let mut c = c.borrow_mut();
        match cat {
            Category::BandMul => c.band_mul += flops,
            Category::FactorG => c.factor_g += flops,
            Category::FactorH => c.factor_h += flops,
            Category::Theta => c.theta += flops,
            Category::Kernel => c.kernel += flops,
            Category::Qr => c.qr += flops,
            Category::Residual => c.residual += flops,
        }
    });
}

pub fn note_factor_values(values: u64) {
    COUNTERS.with(|c| {
        let mut c = c.borrow_mut();
        c.peak_factor_values = c.peak_factor_values.max(values);
    });
}

/// Returns the tallies accumulated on this thread and resets them.
pub fn take() -> CostCounters {
    COUNTERS.with(|c| std::mem::take(&mut *c.borrow_mut()))
}

/// Row formula for the factor products of one iteration:
/// `2 N b (m_g + m_h + m_a)` with the widths of the previous iterate.
pub fn factor_row_bound(n: usize, b: usize, m_g: usize, m_h: usize, m_a: usize) -> u64 {
    2 * n as u64 * b.max(1) as u64 * (m_g + m_h + m_a) as u64
}

/// Flops of a dense `r x s` times `s x t` product.
pub(crate) fn gemm(r: usize, s: usize, t: usize) -> u64 {
    2 * (r * s * t) as u64
}
