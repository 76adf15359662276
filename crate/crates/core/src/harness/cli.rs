//! Command-line entry point.

use super::bounds::{bound_inputs, bound_table, render_table};
use super::config::SimulationConfig;
use super::output::{read_column, read_diagnostics, read_finals, write_ensemble, write_sweep_csv};
use super::run::{run_ensemble, run_ensemble_with_threads, substitute, Ensemble, SweepAxis};
use super::{HarnessError, EXIT_CONFIG};
use crate::analysis::{bound_report, kde, norm};
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Parser)]
#[command(name = "quorum", about = "Quorum-coupled multi-agent SGD experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct EnsembleOpts {
    /// Configuration file (TOML).
    config: PathBuf,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Runs the full-scale protocol (250 runs of 1000 agents).
    #[arg(long)]
    full_scale: bool,
    /// Worker threads; defaults to one per core.
    #[arg(long)]
    threads: Option<usize>,
    /// Records wall-clock time in summary.json.
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Runs one ensemble and writes its output directory.
    Run(EnsembleOpts),
    /// Runs one ensemble per value of an axis.
    Sweep {
        #[command(flatten)]
        opts: EnsembleOpts,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Prints the closed-form bounds for a configuration.
    Bounds {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Density estimate of one column of a CSV file.
    Kde {
        samples: PathBuf,
        #[arg(long, default_value = "coord_0")]
        column: String,
        #[arg(long)]
        bandwidth: Option<f64>,
        /// Output CSV (grid, density); stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compares an ensemble directory's statistics with the bounds.
    Report {
        dir: PathBuf,
        /// Output JSON; defaults to report.json in the ensemble directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path, seed: Option<u64>, full_scale: bool) -> Result<SimulationConfig, HarnessError> {
    let mut config = SimulationConfig::from_file(path).map_err(|e| match e {
        HarnessError::Io(io) => HarnessError::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    })?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if full_scale {
        config = config.full_scale();
    }
    config.validate()?;
    Ok(config)
}

fn ensemble(config: &SimulationConfig, threads: Option<usize>) -> Result<Ensemble, HarnessError> {
    match threads {
        Some(t) => run_ensemble_with_threads(config, t),
        None => run_ensemble(config),
    }
}

/// Runs one ensemble into `dir` and returns it with its bound table.
fn run_into(
    config: &SimulationConfig,
    dir: &Path,
    opts: &EnsembleOpts,
) -> Result<(Ensemble, Vec<super::BoundRow>), HarnessError> {
    let start = Instant::now();
    let e = ensemble(config, opts.threads)?;
    let elapsed = start.elapsed().as_secs_f64();
    let bounds = bound_table(config, &config.build()?)?;
    write_ensemble(dir, config, &e, &bounds, opts.timing.then_some(elapsed))?;
    Ok((e, bounds))
}

fn execute(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Run(opts) => {
            let config = load(&opts.config, opts.seed, opts.full_scale)?;
            let (e, _) = run_into(&config, &opts.out, &opts)?;
            println!(
                "{} runs, {} diverged, output in {}",
                e.summary.runs,
                e.summary.diverged,
                opts.out.display()
            );
        }
        Command::Sweep { opts, axis, values } => {
            let base = load(&opts.config, opts.seed, opts.full_scale)?;
            std::fs::create_dir_all(&opts.out)?;
            let mut results = Vec::new();
            for (i, &v) in values.iter().enumerate() {
                let config = substitute(&base, axis, v)?;
                let dir = opts.out.join(format!("{}_{i:03}", axis.name()));
                let (e, bounds) = run_into(&config, &dir, &opts)?;
                results.push((v, e, bounds));
            }
            let rows: Vec<_> = results.iter().map(|(v, e, b)| (*v, e, b.as_slice())).collect();
            write_sweep_csv(&opts.out.join("sweep.csv"), axis, &rows)?;
            println!("{} values, output in {}", values.len(), opts.out.display());
        }
        Command::Bounds { config, seed } => {
            let config = load(&config, seed, false)?;
            let built = config.build()?;
            let inputs = bound_inputs(&config, &built)?;
            print!("{}", render_table(&inputs, &bound_table(&config, &built)?));
        }
        Command::Kde { samples, column, bandwidth, out } => {
            let values = read_column(&samples, &column)?;
            let d = kde(&values, bandwidth)?;
            let mut w = match &out {
                Some(path) => csv::Writer::from_writer(Box::new(std::fs::File::create(path)?) as Box<dyn std::io::Write>),
                None => csv::Writer::from_writer(Box::new(std::io::stdout()) as Box<dyn std::io::Write>),
            };
            w.write_record(["grid", "density"])?;
            for (x, y) in d.grid.iter().zip(&d.density) {
                w.write_record([super::fmt_float(*x), super::fmt_float(*y)])?;
            }
            w.flush()?;
        }
        Command::Report { dir, out } => {
            let config = load(&dir.join("config.toml"), None, false)?;
            let built = config.build()?;
            let inputs = bound_inputs(&config, &built)?;
            let diags = read_diagnostics(&dir.join("diagnostics.csv"))?;
            let distances = built.objective.minimizer().map(|opt| {
                read_finals(&dir.join("finals_quorum.csv")).map(|rows| {
                    rows.iter()
                        .map(|x| norm(&x.iter().zip(&opt).map(|(a, b)| a - b).collect::<Vec<_>>()))
                        .collect::<Vec<_>>()
                })
            });
            let distances = distances.transpose()?;
            let report = bound_report(&diags, &inputs, config.burn_in, distances.as_deref())?;
            for r in &report.rows {
                let bound = r.bound.map_or_else(|| "n/a".to_string(), |b| format!("{b:.6e}"));
                let verdict = match r.pass {
                    Some(true) => "within bound",
                    Some(false) => "EXCEEDS bound",
                    None => r.note.as_deref().unwrap_or("not applicable"),
                };
                println!("{:<14} {:.6e}  bound {bound}  {verdict}", r.quantity, r.empirical);
            }
            let path = out.unwrap_or_else(|| dir.join("report.json"));
            std::fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs the command. Returns
/// the process exit status: 0 on success, 2 for usage or configuration
/// errors, 3 for I/O errors.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
