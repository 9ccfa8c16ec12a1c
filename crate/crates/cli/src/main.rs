use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use fsda::oracle::{dare_residual, dense_sda, DENSE_LIMIT};
use fsda::residual::{write_cost, write_trace};
use fsda::{advance, gen_instance, io, read_problem, solve, write_problem, Denominator, FsdaError, FsdaState, SolverConfig};

const EXIT_USAGE: u8 = 2;
const EXIT_GENERATION: u8 = 3;
const EXIT_MAX_ITER: u8 = 4;
const EXIT_BREAKDOWN: u8 = 5;
const EXIT_DEVIATION: u8 = 6;

#[derive(Parser)]
#[command(name = "fsda", version, about = "Factorized doubling solver for banded-plus-low-rank DAREs")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random valid problem bundle.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        band: usize,
        #[arg(long)]
        ma: usize,
        /// Target spectral radius of A, in (0, 1).
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a problem bundle.
    Solve {
        bundle: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory, default `<bundle>/solution`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also evaluate the residual of the result densely (small n only).
        #[arg(long)]
        check_dense: bool,
        #[arg(long)]
        denominator: Option<Denominator>,
    },
    /// Run the factored and the dense recurrence side by side.
    Compare {
        bundle: PathBuf,
        #[arg(long, default_value_t = 5)]
        max_k: usize,
        #[arg(long, default_value_t = 1e-10)]
        threshold: f64,
        /// Overrides on top of the lossless settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn fail(code: u8) -> impl FnOnce(anyhow::Error) -> Failure {
    move |err| Failure { code, err }
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    fail(EXIT_USAGE)(e.into())
}

/// Numerical failures map to the breakdown code, everything else to usage.
fn classify(e: FsdaError) -> Failure {
    let code = match &e {
        FsdaError::Io(_) | FsdaError::Csv(_) | FsdaError::Parse { .. } | FsdaError::Config(_) => EXIT_USAGE,
        FsdaError::Dimension(_) | FsdaError::TooLarge { .. } => EXIT_USAGE,
        _ => EXIT_BREAKDOWN,
    };
    Failure { code, err: e.into() }
}

fn cmd_gen(n: usize, band: usize, ma: usize, rho: f64, seed: u64, out: &Path) -> Result<u8, Failure> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(usage(anyhow!("--rho must lie in (0, 1), got {rho}")));
    }
    if n < 2 || band == 0 || band >= n || ma >= n {
        return Err(usage(anyhow!("need n >= 2, 1 <= band < n and ma < n")));
    }
    let p = gen_instance(n, band, ma, rho, seed).map_err(|e| fail(EXIT_GENERATION)(e.into()))?;
    write_problem(&p, out).map_err(|e| usage(anyhow::Error::from(e).context("writing bundle")))?;
    println!("wrote {}", out.display());
    for (k, v) in &p.meta {
        println!("  {k} = {v}");
    }
    Ok(0)
}

fn load_config(base: SolverConfig, path: Option<&Path>) -> Result<SolverConfig, Failure> {
    let mut cfg = base;
    if let Some(path) = path {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(fail(EXIT_USAGE))?;
        cfg.update_from(&text, &path.display().to_string()).map_err(usage)?;
    }
    Ok(cfg)
}

fn cmd_solve(
    bundle: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    check_dense: bool,
    denominator: Option<Denominator>,
) -> Result<u8, Failure> {
    let p = read_problem(bundle)
        .with_context(|| format!("reading bundle {}", bundle.display()))
        .map_err(fail(EXIT_USAGE))?;
    let mut cfg = load_config(SolverConfig::default(), config)?;
    if let Some(d) = denominator {
        cfg.denominator = d;
    }
    let sol = solve(&p, &cfg).map_err(classify)?;

    let out = out.map(Path::to_path_buf).unwrap_or_else(|| bundle.join("solution"));
    let write = || -> fsda::Result<()> {
        fs::create_dir_all(&out)?;
        io::write_matrix_market(&sol.dh, &out.join("DH.mtx"))?;
        io::write_factor(&sol.lh, &out.join("LH.talf"))?;
        io::write_kernel(&sol.kh, &out.join("KH.kern"))?;
        write_trace(&sol.history, &out.join("trace.csv"))?;
        write_cost(&sol.steps, p.n(), &out.join("cost.csv"))?;
        Ok(())
    };
    write().map_err(classify)?;

    for r in &sol.history {
        println!(
            "k={:>2}  B_RRes={:.3e}  LR_RRes={}  m_g={} m_h={}",
            r.k,
            r.b_rres,
            r.lr_rres.map_or("-".into(), |v| format!("{v:.3e}")),
            r.widths.m_g,
            r.widths.m_h
        );
    }
    if check_dense {
        if p.n() > DENSE_LIMIT {
            eprintln!("--check-dense skipped: n = {} exceeds {DENSE_LIMIT}", p.n());
        } else {
            let x = sol.x_dense().map_err(classify)?;
            let r = dare_residual(&x, &p.a_dense(), &p.g_dense(), &p.h_dense()).map_err(classify)?;
            println!("dense residual ||D(X)||_F / ||X||_F = {:.3e}", r / x.norm());
        }
    }
    println!("results in {}", out.display());
    if sol.converged {
        println!("converged at k = {}", sol.k);
        Ok(0)
    } else {
        eprintln!("not converged after {} iterations; best iterate k = {} written", cfg.max_iter, sol.k);
        Ok(EXIT_MAX_ITER)
    }
}

fn cmd_compare(bundle: &Path, max_k: usize, threshold: f64, config: Option<&Path>) -> Result<u8, Failure> {
    let p = read_problem(bundle)
        .with_context(|| format!("reading bundle {}", bundle.display()))
        .map_err(fail(EXIT_USAGE))?;
    if p.n() > DENSE_LIMIT {
        return Err(usage(anyhow!("compare needs n <= {DENSE_LIMIT}, got {}", p.n())));
    }
    let cfg = load_config(SolverConfig::lossless(), config)?;
    let dense = dense_sda(&p.a_dense(), &p.g_dense(), &p.h_dense(), max_k).map_err(classify)?;
    let a0 = dense.a[0].norm();
    let rel = |x: &nalgebra::DMatrix<f64>, y: &nalgebra::DMatrix<f64>| (x - y).norm() / y.norm().max(f64::MIN_POSITIVE);

    println!("{:>3} {:>11} {:>11} {:>11} {:>11} {:>8}", "k", "dev_A", "dev_G", "dev_H", "|A_k|/|A_0|", "exponent");
    let mut s = FsdaState::seed(&p, &cfg);
    let mut worst = (0.0f64, 0usize);
    let mut prev_ratio: Option<f64> = None;
    for k in 1..=max_k {
        s = advance(&s, &cfg).map_err(classify)?.0;
        let da = rel(&s.a_dense().map_err(classify)?, &dense.a[k]);
        let dg = rel(&s.g_dense().map_err(classify)?, &dense.g[k]);
        let dh = rel(&s.h_dense().map_err(classify)?, &dense.h[k]);
        let ratio = dense.a[k].norm() / a0;
        let exponent = match prev_ratio {
            Some(r) if r > 0.0 && r < 1.0 && ratio > 0.0 => format!("{:.3}", ratio.ln() / r.ln()),
            _ => "-".into(),
        };
        println!("{k:>3} {da:>11.3e} {dg:>11.3e} {dh:>11.3e} {ratio:>11.3e} {exponent:>8}");
        let dev = da.max(dg).max(dh);
        if dev > worst.0 {
            worst = (dev, k);
        }
        prev_ratio = Some(ratio);
    }
    if worst.0 > threshold {
        eprintln!("deviation {:.3e} at k = {} exceeds threshold {threshold:e}", worst.0, worst.1);
        return Ok(EXIT_DEVIATION);
    }
    println!("max deviation {:.3e} within threshold {threshold:e}", worst.0);
    Ok(0)
}

fn init_threads() {
    if let Ok(v) = std::env::var("FSDA_THREADS") {
        match v.parse::<usize>() {
            Ok(t) if t > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
                    log::warn!("could not size the thread pool: {e}");
                }
            }
            _ => log::warn!("ignoring FSDA_THREADS={v}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    init_threads();
    let result = match &cli.cmd {
        Command::Gen { n, band, ma, rho, seed, out } => cmd_gen(*n, *band, *ma, *rho, *seed, out),
        Command::Solve {
            bundle,
            config,
            out,
            check_dense,
            denominator,
        } => cmd_solve(bundle, config.as_deref(), out.as_deref(), *check_dense, *denominator),
        Command::Compare {
            bundle,
            max_k,
            threshold,
            config,
        } => cmd_compare(bundle, *max_k, *threshold, config.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
