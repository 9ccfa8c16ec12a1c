//! Solver tolerances and limits, read from `key=value` text.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{FsdaError, Result};

/// Which matrix enters the last denominator term of the banded residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Denominator {
    /// `||I + DH0 DHk||`, as printed.
    #[default]
    Verbatim,
    /// `||I + DG0 DHk||`.
    Gh,
}

impl FromStr for Denominator {
    type Err = FsdaError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "verbatim" => Ok(Denominator::Verbatim),
            "GH" | "gh" => Ok(Denominator::Gh),
            other => Err(FsdaError::Config(format!(
                "denominator must be `verbatim` or `GH`, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Denominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Denominator::Verbatim => "verbatim",
            Denominator::Gh => "GH",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Entries of the banded iterates and of the G1/H1/G3/H3 blocks below this are removed.
    pub tol: f64,
    pub tau_g: f64,
    pub tau_h: f64,
    pub tau_r: f64,
    pub eps_b: f64,
    pub eps_l: f64,
    /// Rank cap for the compressed blocks; `None` means `40 * m_a`.
    pub m_max: Option<usize>,
    pub max_iter: usize,
    /// Drop tolerance inside helper products and banded inverses.
    pub band_drop: f64,
    /// Bandwidth cap; `None` means `min(n - 1, max(32, 8 * initial bandwidth))`.
    /// Entries below `band_drop` are pruned first, so the cap rarely binds.
    pub max_bw: Option<usize>,
    pub denominator: Denominator,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-15,
            tau_g: 1e-12,
            tau_h: 1e-12,
            tau_r: 1e-12,
            eps_b: 1e-10,
            eps_l: 1e-10,
            m_max: None,
            max_iter: 30,
            band_drop: 1e-15,
            max_bw: None,
            denominator: Denominator::Verbatim,
        }
    }
}

fn parse_limit(key: &str, v: &str) -> Result<Option<usize>> {
    match v {
        "auto" => Ok(None),
        "inf" => Ok(Some(usize::MAX)),
        _ => v
            .parse()
            .map(Some)
            .map_err(|_| FsdaError::Config(format!("{key}: expected integer, `inf` or `auto`, got `{v}`"))),
    }
}

fn show_limit(v: Option<usize>) -> String {
    match v {
        None => "auto".into(),
        Some(usize::MAX) => "inf".into(),
        Some(x) => x.to_string(),
    }
}

impl SolverConfig {
    /// No dropping, no truncation, no caps.
    pub fn lossless() -> Self {
        SolverConfig {
            tol: 0.0,
            tau_g: 0.0,
            tau_h: 0.0,
            tau_r: 0.0,
            band_drop: 0.0,
            m_max: Some(usize::MAX),
            max_bw: Some(usize::MAX),
            ..SolverConfig::default()
        }
    }

    /// Effective rank cap for a problem with `m_a` low-rank columns.
    pub fn m_max_for(&self, m_a: usize) -> usize {
        self.m_max.unwrap_or((40 * m_a).max(1))
    }

    /// Effective bandwidth cap for order `n` and initial half-bandwidth `b0`.
    pub fn max_bw_for(&self, n: usize, b0: usize) -> usize {
        self.max_bw.unwrap_or((8 * b0.max(1)).max(32)).min(n.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("tol", self.tol),
            ("tau_g", self.tau_g),
            ("tau_h", self.tau_h),
            ("tau_r", self.tau_r),
            ("eps_b", self.eps_b),
            ("eps_l", self.eps_l),
            ("band_drop", self.band_drop),
        ];
        for (k, v) in reals {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(FsdaError::Config(format!("{k} must be a finite non-negative number, got {v}")));
            }
        }
        if self.max_iter == 0 {
            return Err(FsdaError::Config("max_iter must be positive".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let real = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| FsdaError::Config(format!("{key}: expected a number, got `{v}`")))
        };
        match key {
            "tol" => self.tol = real(value)?,
            "tau_g" => self.tau_g = real(value)?,
            "tau_h" => self.tau_h = real(value)?,
            "tau_r" => self.tau_r = real(value)?,
            "eps_b" => self.eps_b = real(value)?,
            "eps_l" => self.eps_l = real(value)?,
            "band_drop" => self.band_drop = real(value)?,
            "m_max" => self.m_max = parse_limit(key, value)?,
            "max_bw" => self.max_bw = parse_limit(key, value)?,
            "max_iter" => {
                self.max_iter = value
                    .parse()
                    .map_err(|_| FsdaError::Config(format!("max_iter: expected integer, got `{value}`")))?
            }
            "denominator" => self.denominator = value.parse()?,
            _ => return Err(FsdaError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = SolverConfig::default();
        cfg.update_from(text, origin)?;
        Ok(cfg)
    }

    /// Applies the `key=value` lines of `text` on top of the current values.
    pub fn update_from(&mut self, text: &str, origin: &str) -> Result<()> {
        let cfg = self;
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| FsdaError::Parse {
                file: origin.into(),
                location: format!("line {}", no + 1),
                msg: "expected key=value".into(),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| FsdaError::Parse {
                file: origin.into(),
                location: format!("line {}", no + 1),
                msg: e.to_string(),
            })?;
        }
        cfg.validate()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        format!(
            "tol={:e}\ntau_g={:e}\ntau_h={:e}\ntau_r={:e}\neps_b={:e}\neps_l={:e}\nm_max={}\nmax_iter={}\nband_drop={:e}\nmax_bw={}\ndenominator={}\n",
            self.tol,
            self.tau_g,
            self.tau_h,
            self.tau_r,
            self.eps_b,
            self.eps_l,
            show_limit(self.m_max),
            self.max_iter,
            self.band_drop,
            show_limit(self.max_bw),
            self.denominator
        )
    }
}
