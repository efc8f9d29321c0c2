use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use giga::channel_file::{normalize_columns, parse_channel, write_channel};
use giga::detector::trace_csv;
use giga::sim::{
    complexity_table, oracle_check, ChannelSource, DetectorKind, Experiment, SimConfig,
};
use giga::system::levels_per_component;

#[derive(Parser)]
#[command(name = "giga", version, about = "Grouped MIMO detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// BER over an SNR grid for every configured detector.
    Sweep(SweepArgs),
    /// Per-iteration convergence trace of GIGA on one realization.
    Trace(TraceArgs),
    /// Per-iteration multiplication counts for a list of group counts.
    Complexity(ComplexityArgs),
    /// Small-instance equivalence checks of the fast paths.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Validate a channel file and rewrite it in canonical form.
    ImportChannel(ImportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Detector {
    Giga,
    Lmmse,
    ExactOracle,
}

impl From<Detector> for DetectorKind {
    fn from(d: Detector) -> Self {
        match d {
            Detector::Giga => DetectorKind::Giga,
            Detector::Lmmse => DetectorKind::Lmmse,
            Detector::ExactOracle => DetectorKind::ExactOracle,
        }
    }
}

/// Overrides applied on top of the config file, or of the defaults.
#[derive(Args)]
struct ConfigArgs {
    /// TOML file with `SimConfig` fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_r: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    mod_order: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    u_list: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    snr_db: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    damping: Option<f64>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_enum, value_delimiter = ',')]
    detectors: Option<Vec<Detector>>,
    /// Enumerate the group projections instead of using the Gaussian surrogate.
    #[arg(long)]
    exact_projection: bool,
    /// Reuse this channel for every trial.
    #[arg(long)]
    channel_file: Option<PathBuf>,
    #[arg(long, requires = "channel_file")]
    normalize_columns: bool,
    #[arg(long)]
    workers: Option<usize>,
    /// Fill the wall_ms column; the CSV is then no longer reproducible.
    #[arg(long)]
    wall_time: bool,
}

impl ConfigArgs {
    fn resolve(&self, seed: Option<u64>) -> Result<SimConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                SimConfig::parse_toml(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => SimConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            )*};
        }
        set!(n_r, k, mod_order, u_list, snr_db, trials, damping, t_max, epsilon);
        if let Some(d) = &self.detectors {
            cfg.detectors = d.iter().map(|&d| d.into()).collect();
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if self.exact_projection {
            cfg.exact_projection = true;
        }
        if let Some(path) = &self.channel_file {
            cfg.channel = ChannelSource::File {
                path: path.clone(),
                normalize_columns: self.normalize_columns,
            };
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        if self.wall_time {
            cfg.record_wall_time = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Base seed; every trial derives its own streams from it.
    #[arg(long)]
    seed: u64,
    /// BER table; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tab-separated snr_db vs BER per series.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Flagged and unconverged trial counts.
    #[arg(long)]
    flags: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    trial: u64,
    /// Defaults to the first grid point.
    #[arg(long, allow_negative_numbers = true)]
    snr: Option<f64>,
    /// Group count; defaults to the first entry of the U list.
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ComplexityArgs {
    #[arg(long)]
    k: u64,
    #[arg(long)]
    n_r: u64,
    /// Levels per real component, e.g. 8 for 64-QAM.
    #[arg(long, conflicts_with = "mod_order")]
    levels: Option<u64>,
    #[arg(long)]
    mod_order: Option<usize>,
    /// Defaults to every power of two dividing 2 N_r.
    #[arg(long, value_delimiter = ',')]
    u_list: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ImportArgs {
    input: PathBuf,
    #[arg(long)]
    normalize_columns: bool,
    /// Canonical copy of the channel.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sweep(args: SweepArgs) -> Result<()> {
    let cfg = args.config.resolve(Some(args.seed))?;
    let exp = Experiment::new(cfg)?;
    let report = exp.sweep()?;
    emit(args.out.as_deref(), &report.to_csv())?;
    if let Some(p) = &args.plot {
        emit(Some(p), &report.to_plot_tsv())?;
    }
    if let Some(p) = &args.flags {
        emit(Some(p), &report.flags_csv())?;
    }
    for r in report
        .rows
        .iter()
        .filter(|r| r.flagged > 0 || r.unconverged > 0)
    {
        eprintln!(
            "{} at {} dB: {} flagged, {} unconverged of {} trials",
            r.series.label(),
            r.snr_db,
            r.flagged,
            r.unconverged,
            r.flagged + r.trials
        );
    }
    Ok(())
}

fn trace(args: TraceArgs) -> Result<()> {
    let mut cfg = args.config.resolve(args.seed)?;
    if !cfg.detectors.contains(&DetectorKind::Giga) {
        cfg.detectors.insert(0, DetectorKind::Giga);
    }
    let groups = args
        .groups
        .or_else(|| cfg.u_list.first().copied())
        .context("no group count given")?;
    let snr = args.snr.unwrap_or(cfg.snr_db[0]);
    let exp = Experiment::new(cfg)?;
    let (result, state) = exp.trace(args.trial, snr, groups)?;
    emit(
        args.out.as_deref(),
        &trace_csv(&state.trace, exp.config().epsilon),
    )?;
    eprintln!(
        "{} iterations, converged: {}",
        result.iterations_used, result.converged
    );
    Ok(())
}

fn complexity(args: ComplexityArgs) -> Result<()> {
    let levels = match (args.levels, args.mod_order) {
        (Some(l), _) => l,
        (None, Some(m)) => levels_per_component(m)? as u64,
        (None, None) => bail!("give --levels or --mod-order"),
    };
    let u_list = args.u_list.unwrap_or_else(|| {
        let rows = 2 * args.n_r;
        std::iter::successors(Some(1u64), |u| u.checked_mul(2))
            .take_while(|&u| u <= rows)
            .filter(|u| rows.is_multiple_of(*u))
            .collect()
    });
    let report = complexity_table(args.k, args.n_r, levels, &u_list)?;
    emit(args.out.as_deref(), &report.to_csv())?;
    if let Some(best) = report.argmin() {
        eprintln!("minimum C_U = {} at U = {}", best.c_u, best.groups);
    }
    Ok(())
}

fn oracle(seed: u64) -> Result<bool> {
    let mut ok = true;
    for check in oracle_check(seed)? {
        println!(
            "{:<22} {:>4} instances  max error {:.3e}  tolerance {:.0e}  {}",
            check.name,
            check.instances,
            check.max_error,
            check.tolerance,
            if check.passed() { "pass" } else { "FAIL" }
        );
        ok &= check.passed();
    }
    Ok(ok)
}

fn import_channel(args: ImportArgs) -> Result<()> {
    let text = fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let mut h = parse_channel(&text)?;
    if args.normalize_columns {
        normalize_columns(&mut h);
    }
    let norms: Vec<f64> = h.column_iter().map(|c| c.norm_squared()).collect();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    eprintln!(
        "{} antennas x {} users; column energy mean {:.4}, min {:.4}, max {:.4}",
        h.nrows(),
        h.ncols(),
        mean,
        norms.iter().cloned().fold(f64::INFINITY, f64::min),
        norms.iter().cloned().fold(0.0, f64::max)
    );
    if let Some(out) = &args.out {
        emit(Some(out), &write_channel(&h))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Sweep(a) => sweep(a).map(|_| true),
        Command::Trace(a) => trace(a).map(|_| true),
        Command::Complexity(a) => complexity(a).map(|_| true),
        Command::OracleCheck { seed } => oracle(seed),
        Command::ImportChannel(a) => import_channel(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
