//! `surme` — simulate, fit, diagnose and compare SUR systems with
//! mismeasured covariates.
//!
//! Exit codes: 0 success, 1 usage, 2 input/validation failure, 3 numerical
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::{Args, Parser, Subcommand};

use surme_core::diagnostics::{kde_density, series_diagnostics};
use surme_core::gibbs::{gibbs_sur, gibbs_surme, McmcConfig};
use surme_core::io;
use surme_core::mfvb::cavi_fit;
use surme_core::model::FitReport;
use surme_core::simulate::{fit_sur_fgls, generate_dataset, DgpConfig, EstimatorKind};
use surme_core::stats::RngStream;
use surme_core::Error;

#[derive(Parser)]
#[command(
    name = "surme",
    about = "Seemingly unrelated regressions with mismeasured covariates",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets from the built-in two-equation process.
    Simulate(SimulateArgs),
    /// Fit one dataset with a chosen estimator.
    Fit(FitArgs),
    /// Chain diagnostics (autocorrelations, inefficiency factors, Geweke CD)
    /// for every column of a stored draw matrix.
    Diagnose(DiagnoseArgs),
    /// DIC comparison table for two fits.
    Compare(CompareArgs),
    /// Kernel density of one chain column on an equally spaced grid.
    Density(DensityArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Canned design cell: I-1 (sz2=1, Rz=.8), I-2 (.0625, .8),
    /// II-1 (1, .5714), II-2 (.0625, .5714) or `custom`.
    #[arg(long, default_value = "I-1")]
    case: String,
    /// Latent variance for --case custom.
    #[arg(long)]
    sigma_z2: Option<f64>,
    /// Reliability ratio for --case custom.
    #[arg(long)]
    rz: Option<f64>,
    #[arg(long, default_value_t = 300)]
    n: usize,
    /// Number of replicated datasets; with 1 the files land in --out, with
    /// more each replication gets a rep_### subdirectory.
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// gibbs-surme | gibbs-sur | mfvb | fgls
    #[arg(long)]
    method: String,
    /// Dataset manifest (TOML).
    #[arg(long)]
    data: PathBuf,
    /// Prior file (TOML); reference priors when omitted.
    #[arg(long)]
    priors: Option<PathBuf>,
    #[arg(long, default_value_t = 51_000)]
    draws: usize,
    #[arg(long, default_value_t = 1_000)]
    burnin: usize,
    #[arg(long, default_value_t = 100)]
    thin: usize,
    /// MFVB relative ELBO tolerance.
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    #[arg(long, default_value_t = 5_000)]
    max_cycles: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    chain: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Fit output directory (or report.toml path), repeated.
    #[arg(long = "fit", num_args = 1, required = true)]
    fits: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DensityArgs {
    #[arg(long)]
    chain: PathBuf,
    /// Column name, e.g. gamma_1 or sigma_eps_1_2.
    #[arg(long)]
    param: String,
    #[arg(long, default_value_t = 512)]
    grid: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, everything else is a
            // usage error.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::NotPositiveDefinite { .. } | Error::Rank(_) | Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Fit(args) => fit(args),
        Command::Diagnose(args) => diagnose(args),
        Command::Compare(args) => compare(args),
        Command::Density(args) => density(args),
    }
}

fn simulate(args: SimulateArgs) -> Result<(), Error> {
    let cfg = match args.case.as_str() {
        "custom" => {
            let sigma_z2 = args.sigma_z2.ok_or_else(|| {
                Error::domain("--case custom requires --sigma-z2")
            })?;
            let rz = args
                .rz
                .ok_or_else(|| Error::domain("--case custom requires --rz"))?;
            DgpConfig::custom(args.n, sigma_z2, rz)
        }
        label => DgpConfig::by_label(label, args.n).ok_or_else(|| {
            Error::domain(format!(
                "unknown case `{label}` (expected I-1, I-2, II-1, II-2 or custom)"
            ))
        })?,
    };
    cfg.validate()?;
    if args.reps == 0 {
        return Err(Error::domain("--reps must be at least 1"));
    }

    let master = RngStream::new(args.seed);
    if args.reps == 1 {
        let mut rng = master.substream(0);
        let data = generate_dataset(&cfg, &mut rng)?;
        let manifest = io::save_dataset(&data, &args.out)?;
        println!("wrote {}", manifest.display());
        return Ok(());
    }

    // Replications are independent; fan out over a worker pool capped by
    // SURME_THREADS, with per-replication substreams for reproducibility.
    let next = AtomicUsize::new(0);
    let workers = std::env::var("SURME_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|v| v.get())
                .unwrap_or(1)
        })
        .min(args.reps);
    let errors: Vec<Option<Error>> = {
        let slots: Vec<std::sync::Mutex<Option<Error>>> =
            (0..args.reps).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let rep = next.fetch_add(1, Ordering::Relaxed);
                    if rep >= args.reps {
                        break;
                    }
                    let mut rng = master.substream(rep as u64);
                    let dir = args.out.join(format!("rep_{:03}", rep + 1));
                    let outcome = generate_dataset(&cfg, &mut rng)
                        .and_then(|data| io::save_dataset(&data, &dir).map(|_| ()));
                    if let Err(e) = outcome {
                        *slots[rep].lock().unwrap() = Some(e);
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.into_inner().unwrap()).collect()
    };
    for e in errors.into_iter().flatten() {
        return Err(e);
    }
    println!(
        "wrote {} replications under {}",
        args.reps,
        args.out.display()
    );
    Ok(())
}

fn parse_method(label: &str) -> Result<EstimatorKind, Error> {
    match label {
        "gibbs-surme" => Ok(EstimatorKind::GibbsSurme),
        "gibbs-sur" => Ok(EstimatorKind::GibbsSur),
        "mfvb" => Ok(EstimatorKind::Mfvb),
        "fgls" => Ok(EstimatorKind::Fgls),
        other => Err(Error::domain(format!(
            "unknown method `{other}` (expected gibbs-surme, gibbs-sur, mfvb or fgls)"
        ))),
    }
}

fn fit(args: FitArgs) -> Result<(), Error> {
    let method = parse_method(&args.method)?;
    let data = io::load_dataset(&args.data)?;
    // The manifest decides whether the exposure regression is in play; a
    // prior file can still override it.
    let exposure = io::load_manifest(&args.data)?.exposure;
    let priors = io::load_priors(args.priors.as_deref(), data.m(), data.k_total(), exposure)?;
    std::fs::create_dir_all(&args.out)?;

    let run_config = io::RunConfig {
        method,
        draws: args.draws,
        burnin: args.burnin,
        thin: args.thin,
        tol: args.tol,
        max_cycles: args.max_cycles,
        seed: args.seed,
        priors: args.priors.clone(),
        out: args.out.clone(),
    };
    std::fs::write(
        args.out.join("run_config.toml"),
        toml::to_string_pretty(&run_config)
            .map_err(|e| Error::parse(format!("run config: {e}")))?,
    )?;

    let report: FitReport = match method {
        EstimatorKind::Fgls => fit_sur_fgls(&data)?,
        EstimatorKind::Mfvb => {
            let (state, report) = cavi_fit(&data, &priors, args.tol, args.max_cycles)?;
            io::write_elbo_trace(&state.elbo_trace, &args.out.join("elbo_trace.csv"))?;
            report
        }
        EstimatorKind::GibbsSurme | EstimatorKind::GibbsSur => {
            let mcmc = McmcConfig {
                draws: args.draws,
                burnin: args.burnin,
                thin: args.thin,
                seed: args.seed,
                store_latent: false,
            };
            let (chain, report) = if method == EstimatorKind::GibbsSurme {
                gibbs_surme(&data, &priors, &mcmc)?
            } else {
                gibbs_sur(&data, &priors, &mcmc)?
            };
            io::write_chain(&(&chain).into(), &args.out.join("chain.csv"))?;
            if let (Some(mean), Some(var)) = (&chain.z_mean, &chain.z_var) {
                io::write_z_summary(mean, var, &args.out.join("z_summary.csv"))?;
            }
            report
        }
    };
    let report_path = args.out.join("report.toml");
    io::save_report(&report, &report_path)?;
    println!("wrote {}", report_path.display());
    Ok(())
}

fn diagnose(args: DiagnoseArgs) -> Result<(), Error> {
    let table = io::read_chain(&args.chain)?;
    if table.draws.is_empty() {
        return Err(Error::domain("empty chain file"));
    }
    let diags: Vec<_> = table
        .columns
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let series: Vec<f64> = table.draws.iter().map(|r| r[j]).collect();
            series_diagnostics(name, &series, 1)
        })
        .collect();
    #[derive(serde::Serialize)]
    struct DiagnoseOut<'a> {
        chain: String,
        draws: usize,
        diagnostics: &'a [surme_core::diagnostics::ChainDiag],
    }
    let out = DiagnoseOut {
        chain: args.chain.display().to_string(),
        draws: table.draws.len(),
        diagnostics: &diags,
    };
    std::fs::write(
        &args.out,
        toml::to_string_pretty(&out).map_err(|e| Error::parse(format!("diagnose: {e}")))?,
    )?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn report_path_of(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("report.toml")
    } else {
        p.to_path_buf()
    }
}

fn compare(args: CompareArgs) -> Result<(), Error> {
    if args.fits.len() < 2 {
        return Err(Error::domain("compare needs at least two --fit arguments"));
    }
    let mut rows = Vec::new();
    for p in &args.fits {
        let path = report_path_of(p);
        let report = io::load_report(&path)?;
        let scores = report.scores.ok_or_else(|| {
            Error::domain(format!(
                "{}: report carries no model scores (was this a Gibbs fit?)",
                path.display()
            ))
        })?;
        rows.push((p.display().to_string(), report.method.clone(), scores));
    }
    let mut text = String::from("fit\tmethod\tmean_deviance\tp_d\tdic\n");
    for (name, method, s) in &rows {
        text.push_str(&format!(
            "{name}\t{method}\t{:.4}\t{:.4}\t{:.4}\n",
            s.mean_deviance, s.p_d, s.dic
        ));
    }
    let best = rows
        .iter()
        .min_by(|a, b| a.2.dic.partial_cmp(&b.2.dic).unwrap())
        .unwrap();
    text.push_str(&format!("# lowest DIC: {} ({})\n", best.0, best.1));
    std::fs::write(&args.out, text)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn density(args: DensityArgs) -> Result<(), Error> {
    let table = io::read_chain(&args.chain)?;
    let j = table
        .columns
        .iter()
        .position(|c| c == &args.param)
        .ok_or_else(|| {
            Error::domain(format!(
                "chain has no column `{}` (available: {})",
                args.param,
                table.columns.join(", ")
            ))
        })?;
    let series: Vec<f64> = table.draws.iter().map(|r| r[j]).collect();
    let (grid, dens) = kde_density(&series, args.grid)?;
    io::write_density(&grid, &dens, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
