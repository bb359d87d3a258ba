use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prism_core::budget::{scaling_table, write_scaling_csv};
use prism_core::report::{iqm_csv, mask_diagnostics, parse_snapshots_csv, run_ablation, RunMetrics};
use prism_core::train::{run_seeds, write_metrics_csv, RunConfig};
use prism_core::{Error, Result};

#[derive(Parser)]
#[command(name = "prism", version, about = "Spectral parameter sharing for cooperative multi-agent Q-learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write the metrics CSV.
    Train(TrainArgs),
    /// Parameter and overhead table for each masking scheme.
    Budget(BudgetArgs),
    /// Summaries of training output.
    #[command(subcommand)]
    Report(ReportCommand),
    /// Run a sweep grid and write one consolidated CSV.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Metrics CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Mask snapshot CSV (`step,agent,index,value`), first seed only.
    #[arg(long)]
    masks: Option<PathBuf>,
}

#[derive(Args)]
struct BudgetArgs {
    /// Width of square `d x d` layers; ignored when `--arch` is given.
    #[arg(long, default_value_t = 64)]
    d: usize,
    /// Number of square layers used with `--d`.
    #[arg(long, default_value_t = 1)]
    layers: usize,
    /// Explicit layers as `in x out` pairs, e.g. `75x64,64x64,64x5`.
    #[arg(long, value_delimiter = ',')]
    arch: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
    agents: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Per-step IQM and 95% bootstrap interval of a metrics CSV.
    Iqm {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Heatmap and pairwise L1 distance CSVs from mask snapshots.
    Masks {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output prefix; writes `<prefix>_heatmap.csv` and `<prefix>_distances.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io(format!("{}: {e}", p.display()))),
        None => Ok(io::stdout().lock().write_all(text.as_bytes())?),
    }
}

fn parse_arch(items: &[String]) -> Result<Vec<(usize, usize)>> {
    items
        .iter()
        .map(|s| {
            let (a, b) = s.split_once('x').ok_or_else(|| Error::Config(format!("layer `{s}` is not `in x out`")))?;
            let num = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad layer size in `{s}`")));
            Ok((num(a)?, num(b)?))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = RunConfig::parse(&read(&args.config)?)?;
            let runs = run_seeds(&cfg)?;
            let mut csv = Vec::new();
            write_metrics_csv(&runs, &mut csv)?;
            emit(&String::from_utf8(csv).expect("CSV is UTF-8"), args.out.as_deref())?;
            if let Some(path) = args.masks {
                let snaps = &runs[0].masks;
                if snaps.is_empty() {
                    return Err(Error::Config(format!("{} has no spectral masks to snapshot", cfg.scheme)));
                }
                let (heat, _) = mask_diagnostics(snaps)?;
                emit(&heat, Some(&path))?;
            }
        }
        Command::Budget(args) => {
            let arch = if args.arch.is_empty() { vec![(args.d, args.d); args.layers] } else { parse_arch(&args.arch)? };
            let rows = scaling_table(&arch, args.rho, &args.agents)?;
            let mut csv = Vec::new();
            write_scaling_csv(&rows, &mut csv)?;
            emit(&String::from_utf8(csv).expect("CSV is UTF-8"), args.out.as_deref())?;
        }
        Command::Report(ReportCommand::Iqm { input, seed, out }) => {
            let metrics = RunMetrics::from_csv(input.display().to_string(), &read(&input)?)?;
            emit(&iqm_csv(&metrics, seed)?, out.as_deref())?;
        }
        Command::Report(ReportCommand::Masks { input, out }) => {
            let snaps = parse_snapshots_csv(&read(&input)?)?;
            let (heat, dist) = mask_diagnostics(&snaps)?;
            match out {
                Some(prefix) => {
                    let p = prefix.display();
                    emit(&heat, Some(Path::new(&format!("{p}_heatmap.csv"))))?;
                    emit(&dist, Some(Path::new(&format!("{p}_distances.csv"))))?;
                }
                None => emit(&dist, None)?,
            }
        }
        Command::Ablate { grid, out } => emit(&run_ablation(&read(&grid)?)?, out.as_deref())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("prism: {e}");
            ExitCode::FAILURE
        }
    }
}
