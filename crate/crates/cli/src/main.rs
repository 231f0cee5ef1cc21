use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tikreg::error::Error;
use tikreg::experiments::{
    build_from_training, rate_sibling, run_study, runs_to_csv, solve_once, training_set,
    StudyConfig, StudyKind,
};
use tikreg::textfmt::TextDoc;
use tikreg::training::TrainingSet;
use tikreg::verify::run_invariant_suite;

#[derive(Parser, Debug)]
#[command(
    name = "tikreg",
    version,
    about = "Tikhonov regularization rate studies for 1-D elliptic inverse problems"
)]
struct Cli {
    /// Study config (`[section]` headers, `key = value`, `#` comments)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress output on stdout
    #[arg(long, global = true)]
    quiet: bool,
    /// Worker threads for ladder points
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a training set from the [problem] and [surrogate] sections
    Generate,
    /// Build a linear or neural surrogate
    Build {
        /// Training set written by `generate`; generated from the config if absent
        #[arg(long)]
        training: Option<PathBuf>,
    },
    /// Run a single inverse solve at [regularization] delta
    Solve {
        /// Overrides the noise level
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Run the rate study selected by [study] kind
    Study,
    /// Run the invariant suite
    Verify,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

fn load_config(cli: &Cli, required: bool) -> Result<StudyConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => StudyConfig::load(p)?,
        None if required => return Err(Error::ConfigInvalid("--config is required".into())),
        None => StudyConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = Some(j);
    }
    if cli.out.is_some() {
        cfg.output = cli.out.clone();
    }
    cfg.validate_common()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Generate => {
            let cfg = load_config(cli, false)?;
            let ts = training_set(&cfg)?;
            emit(cli.out.as_deref(), &ts.to_doc().to_text())?;
            if !cli.quiet && cli.out.is_some() {
                println!(
                    "training set: {} pairs on {} cells",
                    ts.rank(),
                    ts.pairs[0].0.n_cells()
                );
            }
        }
        Command::Build { training } => {
            let cfg = load_config(cli, false)?;
            let ts = match training {
                Some(p) => TrainingSet::from_doc(&TextDoc::read_file(p)?)?,
                None => training_set(&cfg)?,
            };
            let built = build_from_training(&cfg, &ts)?;
            emit(cli.out.as_deref(), &built.to_doc().to_text())?;
            if !cli.quiet && cli.out.is_some() {
                if let tikreg::experiments::BuiltSurrogate::Neural(s) = &built {
                    let d = s.diagnostics;
                    println!(
                        "neural surrogate rank {}: rho_bound {:e} (nu_N {:e}, q_N {:e}, r_N {:e})",
                        d.rank, d.rho_bound, d.nu_n, d.q_n, d.r_n
                    );
                } else {
                    println!("linear surrogate rank {}", ts.rank());
                }
            }
        }
        Command::Solve { delta } => {
            let mut cfg = load_config(cli, true)?;
            if let Some(d) = delta {
                cfg.regularization.delta = *d;
            }
            let run = solve_once(&cfg)?;
            emit(
                cli.out.as_deref(),
                &runs_to_csv(std::slice::from_ref(&run))?,
            )?;
            if !cli.quiet && cli.out.is_some() {
                println!(
                    "{} {} delta {:e}: error {} after {} iterations{}",
                    run.problem,
                    run.surrogate,
                    run.delta,
                    run.error_x
                        .map(|e| format!("{e:e}"))
                        .unwrap_or_else(|| "n/a".into()),
                    run.iterations,
                    if run.converged {
                        ""
                    } else {
                        " (iteration limit)"
                    }
                );
            }
        }
        Command::Study => {
            let cfg = load_config(cli, true)?;
            let table = run_study(&cfg)?;
            if !cli.quiet {
                print!("{}", table.summary());
                if let Some(p) = &cfg.output {
                    if cfg.study == StudyKind::RegRate {
                        println!(
                            "runs: {}, rates: {}",
                            p.display(),
                            rate_sibling(p).display()
                        );
                    } else {
                        println!("rates: {}", p.display());
                    }
                }
            }
            if cfg.output.is_none() {
                emit(None, &table.to_csv()?)?;
            }
        }
        Command::Verify => unreachable!("handled in main"),
    }
    Ok(())
}

fn verify() -> ExitCode {
    let outcomes = run_invariant_suite();
    for o in &outcomes {
        println!("{}", o.line());
    }
    if outcomes.iter().all(|o| o.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    if matches!(cli.command, Command::Verify) {
        return verify();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tikreg: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
