use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::channel_file::{normalize_columns, parse_channel};
use crate::detector::{
    mpm_indices, run_giga, DetectionResult, GigaConfig, GigaState, ProjectionMode,
};
use crate::error::{Error, Result};
use crate::geometry::exact_posterior;
use crate::lmmse::lmmse_detect;
use crate::system::{lift_to_real, make_alphabet, Alphabet, ComplexSystem, RealSystem};

use super::config::{ChannelSource, DetectorKind, SimConfig};
use super::{
    bit_errors, gen_channel_iid, gen_unit_noise, noise_var_from_snr, trial_rng, StreamPurpose,
};

/// A detector curve: GIGA at one group count, or an ungrouped detector
/// (`groups == 0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Series {
    pub detector: DetectorKind,
    pub groups: usize,
}

impl Series {
    pub fn label(&self) -> String {
        match self.detector {
            DetectorKind::Giga => format!("giga_U{}", self.groups),
            other => other.label().to_string(),
        }
    }
}

/// Result of one detector on one realization.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Counted {
        errors: u64,
        /// Detected level index per real component.
        decisions: Vec<usize>,
        /// Zero for non-iterative detectors.
        iterations: usize,
        converged: bool,
        wall_ns: u64,
    },
    /// The detector returned an error; excluded from BER.
    Flagged(Error),
}

/// Outcomes of every series at every SNR point for one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub trial: u64,
    pub sent: Vec<usize>,
    /// Indexed by `snr_index * series.len() + series_index`.
    pub outcomes: Vec<Outcome>,
}

/// Random draws of one trial that do not depend on the SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub channel: DMatrix<Complex64>,
    /// Level index per real component, real parts first.
    pub symbol_indices: Vec<usize>,
    /// `CN(0, 1)` noise, scaled per SNR point.
    pub unit_noise: DVector<Complex64>,
}

/// A validated configuration with its channel source resolved.
#[derive(Debug, Clone)]
pub struct Experiment {
    cfg: SimConfig,
    series: Vec<Series>,
    alphabet: Alphabet,
    bits_per_trial: u64,
    fixed_channel: Option<DMatrix<Complex64>>,
}

impl Experiment {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let fixed_channel = match &cfg.channel {
            ChannelSource::IidGaussian => None,
            ChannelSource::File {
                path,
                normalize_columns: norm,
            } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
                let mut h = parse_channel(&text)?;
                if h.shape() != (cfg.n_r, cfg.k) {
                    return Err(Error::InvalidConfig(format!(
                        "channel file is {}x{}, config expects {}x{}",
                        h.nrows(),
                        h.ncols(),
                        cfg.n_r,
                        cfg.k
                    )));
                }
                if *norm {
                    normalize_columns(&mut h);
                }
                Some(h)
            }
        };
        Self::with_channel(cfg, fixed_channel)
    }

    /// Uses `channel` for every trial instead of the configured source.
    pub fn with_channel(cfg: SimConfig, fixed_channel: Option<DMatrix<Complex64>>) -> Result<Self> {
        cfg.validate()?;
        if let Some(h) = &fixed_channel {
            if h.shape() != (cfg.n_r, cfg.k) {
                return Err(Error::DimensionMismatch(format!(
                    "channel is {}x{}, config expects {}x{}",
                    h.nrows(),
                    h.ncols(),
                    cfg.n_r,
                    cfg.k
                )));
            }
        }
        let mut series = Vec::new();
        for &d in &cfg.detectors {
            match d {
                DetectorKind::Giga => series.extend(cfg.u_list.iter().map(|&groups| Series {
                    detector: d,
                    groups,
                })),
                _ => series.push(Series {
                    detector: d,
                    groups: 0,
                }),
            }
        }
        Ok(Self {
            alphabet: make_alphabet(cfg.mod_order)?,
            bits_per_trial: cfg.bits_per_trial()?,
            series,
            fixed_channel,
            cfg,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn series(&self) -> &[Series] {
        &self.series
    }

    pub fn bits_per_trial(&self) -> u64 {
        self.bits_per_trial
    }

    pub fn realization(&self, trial: u64) -> Realization {
        let (seed, n_r, k) = (self.cfg.seed, self.cfg.n_r, self.cfg.k);
        let channel = match &self.fixed_channel {
            Some(h) => h.clone(),
            None => gen_channel_iid(n_r, k, &mut trial_rng(seed, trial, StreamPurpose::Channel)),
        };
        let mut rng = trial_rng(seed, trial, StreamPurpose::Symbols);
        let levels = self.alphabet.len();
        let symbol_indices = (0..2 * k).map(|_| rng.random_range(0..levels)).collect();
        let unit_noise = gen_unit_noise(n_r, &mut trial_rng(seed, trial, StreamPurpose::Noise));
        Realization {
            channel,
            symbol_indices,
            unit_noise,
        }
    }

    /// Real-valued system seen by every detector at `snr_db`.
    pub fn system(&self, real: &Realization, snr_db: f64) -> Result<RealSystem> {
        let k = self.cfg.k;
        let x = DVector::from_fn(k, |i, _| {
            Complex64::new(
                self.alphabet.point(real.symbol_indices[i]),
                self.alphabet.point(real.symbol_indices[k + i]),
            )
        });
        let noise_var = noise_var_from_snr(snr_db, k);
        let y = &real.channel * x + &real.unit_noise * Complex64::from(noise_var.sqrt());
        let sys = ComplexSystem::new(real.channel.clone(), y, noise_var, self.cfg.mod_order)?;
        lift_to_real(&sys, None)
    }

    pub fn giga_config(&self, groups: usize) -> GigaConfig {
        let mut g = GigaConfig::new(groups);
        g.damping = self.cfg.damping;
        g.max_iters = self.cfg.t_max;
        g.tolerance = self.cfg.epsilon;
        g.parallel = false;
        if self.cfg.exact_projection {
            g.mode = ProjectionMode::ExactOracle;
        }
        g
    }

    /// Runs GIGA on one realization with per-iteration decisions recorded.
    pub fn trace(
        &self,
        trial: u64,
        snr_db: f64,
        groups: usize,
    ) -> Result<(DetectionResult, GigaState)> {
        let sys = self.system(&self.realization(trial), snr_db)?;
        let mut cfg = self.giga_config(groups);
        cfg.record_decisions = true;
        run_giga(&sys, &cfg)
    }

    fn detect(&self, series: Series, sys: &RealSystem) -> Result<(Vec<usize>, usize, bool)> {
        match series.detector {
            DetectorKind::Giga => {
                let (res, _) = run_giga(sys, &self.giga_config(series.groups))?;
                Ok((res.decision_indices, res.iterations_used, res.converged))
            }
            DetectorKind::Lmmse => Ok((lmmse_detect(sys)?.decision_indices, 0, true)),
            DetectorKind::ExactOracle => {
                Ok((mpm_indices(&exact_posterior(sys)?.marginals.probs), 0, true))
            }
        }
    }

    /// Every series at every SNR point on the trial's shared realization.
    pub fn run_trial(&self, trial: u64) -> Result<TrialOutcome> {
        let real = self.realization(trial);
        let mut outcomes = Vec::with_capacity(self.cfg.snr_db.len() * self.series.len());
        for &snr in &self.cfg.snr_db {
            let sys = self.system(&real, snr)?;
            for &s in &self.series {
                let start = self.cfg.record_wall_time.then(Instant::now);
                let outcome = match self.detect(s, &sys) {
                    Ok((decisions, iterations, converged)) => Outcome::Counted {
                        errors: bit_errors(&real.symbol_indices, &decisions),
                        decisions,
                        iterations,
                        converged,
                        wall_ns: start.map_or(0, |t| t.elapsed().as_nanos() as u64),
                    },
                    Err(e) => Outcome::Flagged(e),
                };
                outcomes.push(outcome);
            }
        }
        Ok(TrialOutcome {
            trial,
            sent: real.symbol_indices,
            outcomes,
        })
    }

    pub fn sweep(&self) -> Result<BerReport> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.cfg.workers {
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
        let per_trial: Vec<Vec<Tally>> = pool.install(|| {
            (0..self.cfg.trials)
                .into_par_iter()
                .map(|t| {
                    self.run_trial(t).map(|o| {
                        o.outcomes
                            .iter()
                            .map(|x| Tally::of(x, self.bits_per_trial))
                            .collect()
                    })
                })
                .collect::<Result<_>>()
        })?;
        let cells = self.cfg.snr_db.len() * self.series.len();
        let mut totals = vec![Tally::default(); cells];
        for trial in &per_trial {
            for (acc, t) in totals.iter_mut().zip(trial) {
                acc.add(t);
            }
        }
        let mut rows = Vec::with_capacity(cells);
        for (si, &series) in self.series.iter().enumerate() {
            for (pi, &snr_db) in self.cfg.snr_db.iter().enumerate() {
                let t = &totals[pi * self.series.len() + si];
                rows.push(BerRow {
                    series,
                    snr_db,
                    trials: t.trials,
                    bits: t.bits,
                    errors: t.errors,
                    iterations: t.iterations,
                    flagged: t.flagged,
                    unconverged: t.unconverged,
                    wall_ns: self.cfg.record_wall_time.then_some(t.wall_ns),
                });
            }
        }
        Ok(BerReport { rows })
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    trials: u64,
    bits: u64,
    errors: u64,
    iterations: u64,
    flagged: u64,
    unconverged: u64,
    wall_ns: u128,
}

impl Tally {
    fn of(outcome: &Outcome, bits: u64) -> Self {
        match outcome {
            Outcome::Counted {
                errors,
                iterations,
                converged,
                wall_ns,
                ..
            } => Tally {
                trials: 1,
                bits,
                errors: *errors,
                iterations: *iterations as u64,
                unconverged: u64::from(!converged),
                wall_ns: u128::from(*wall_ns),
                ..Tally::default()
            },
            Outcome::Flagged(_) => Tally {
                flagged: 1,
                ..Tally::default()
            },
        }
    }

    fn add(&mut self, o: &Tally) {
        self.trials += o.trials;
        self.bits += o.bits;
        self.errors += o.errors;
        self.iterations += o.iterations;
        self.flagged += o.flagged;
        self.unconverged += o.unconverged;
        self.wall_ns += o.wall_ns;
    }
}

/// Aggregate of one series at one SNR point.
#[derive(Debug, Clone, PartialEq)]
pub struct BerRow {
    pub series: Series,
    pub snr_db: f64,
    /// Trials that produced decisions.
    pub trials: u64,
    pub bits: u64,
    pub errors: u64,
    /// Sum of iterations over counted trials.
    pub iterations: u64,
    pub flagged: u64,
    /// Counted trials that hit `t_max` before converging.
    pub unconverged: u64,
    pub wall_ns: Option<u128>,
}

impl BerRow {
    pub fn ber(&self) -> Option<f64> {
        (self.bits > 0).then(|| self.errors as f64 / self.bits as f64)
    }

    pub fn mean_iters(&self) -> Option<f64> {
        (self.series.detector == DetectorKind::Giga && self.trials > 0)
            .then(|| self.iterations as f64 / self.trials as f64)
    }

    /// Mean wall time per counted detection.
    pub fn wall_ms(&self) -> Option<f64> {
        match self.wall_ns {
            Some(ns) if self.trials > 0 => Some(ns as f64 / self.trials as f64 / 1e6),
            _ => None,
        }
    }
}

fn opt(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map(f).unwrap_or_default()
}

/// Rows ordered by series, then by SNR point.
#[derive(Debug, Clone, PartialEq)]
pub struct BerReport {
    pub rows: Vec<BerRow>,
}

impl BerReport {
    pub fn row(&self, detector: DetectorKind, groups: usize, snr_db: f64) -> Option<&BerRow> {
        self.rows.iter().find(|r| {
            r.series.detector == detector && r.series.groups == groups && r.snr_db == snr_db
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("detector,U,snr_db,bits,errors,ber,mean_iters,wall_ms\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.series.detector.label(),
                r.series.groups,
                r.snr_db,
                r.bits,
                r.errors,
                opt(r.ber(), |b| format!("{b:.6e}")),
                opt(r.mean_iters(), |m| format!("{m:.3}")),
                opt(r.wall_ms(), |w| format!("{w:.3}")),
            );
        }
        out
    }

    /// Trials excluded from BER and trials that ran out of iterations.
    pub fn flags_csv(&self) -> String {
        let mut out = String::from("detector,U,snr_db,counted,flagged,unconverged\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.series.detector.label(),
                r.series.groups,
                r.snr_db,
                r.trials,
                r.flagged,
                r.unconverged
            );
        }
        out
    }

    /// Tab-separated `snr_db` column followed by one BER column per series.
    pub fn to_plot_tsv(&self) -> String {
        let mut series: Vec<Series> = Vec::new();
        let mut snrs: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !series.contains(&r.series) {
                series.push(r.series);
            }
            if !snrs.contains(&r.snr_db) {
                snrs.push(r.snr_db);
            }
        }
        let mut out = String::from("snr_db");
        for s in &series {
            out.push('\t');
            out.push_str(&s.label());
        }
        out.push('\n');
        for &snr in &snrs {
            out.push_str(&snr.to_string());
            for s in &series {
                out.push('\t');
                let ber = self.row(s.detector, s.groups, snr).and_then(BerRow::ber);
                out.push_str(&ber.map_or_else(|| "nan".to_string(), |b| format!("{b:.6e}")));
            }
            out.push('\n');
        }
        out
    }

    pub fn total_flagged(&self) -> u64 {
        self.rows.iter().map(|r| r.flagged).sum()
    }
}

pub fn run_trial(cfg: &SimConfig, trial: u64) -> Result<TrialOutcome> {
    Experiment::new(cfg.clone())?.run_trial(trial)
}

pub fn sweep(cfg: &SimConfig) -> Result<BerReport> {
    Experiment::new(cfg.clone())?.sweep()
}
