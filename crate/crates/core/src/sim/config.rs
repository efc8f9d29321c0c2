use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{check_enumeration, ENUMERATION_CAP};
use crate::system::levels_per_component;

use super::MAX_TRIALS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    Giga,
    Lmmse,
    ExactOracle,
}

impl DetectorKind {
    pub fn label(self) -> &'static str {
        match self {
            DetectorKind::Giga => "giga",
            DetectorKind::Lmmse => "lmmse",
            DetectorKind::ExactOracle => "exact-oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ChannelSource {
    /// Fresh `CN(0, 1/n_r)` channel per trial.
    IidGaussian,
    /// One imported channel reused by every trial.
    File {
        path: PathBuf,
        #[serde(default)]
        normalize_columns: bool,
    },
}

/// One BER experiment. Field names match the TOML keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_r: usize,
    pub k: usize,
    pub mod_order: usize,
    pub u_list: Vec<usize>,
    pub snr_db: Vec<f64>,
    pub trials: u64,
    pub seed: u64,
    pub damping: f64,
    pub t_max: usize,
    pub epsilon: f64,
    pub detectors: Vec<DetectorKind>,
    /// Run GIGA with enumerated instead of Gaussian-surrogate projections.
    pub exact_projection: bool,
    pub channel: ChannelSource,
    /// Thread count for the trial pool; `None` lets rayon decide.
    pub workers: Option<usize>,
    /// Fill the `wall_ms` column. Timing makes the CSV nondeterministic.
    pub record_wall_time: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_r: 64,
            k: 8,
            mod_order: 4,
            u_list: vec![16],
            snr_db: vec![4.0, 8.0, 12.0],
            trials: 1000,
            seed: 0,
            damping: 0.3,
            t_max: 50,
            epsilon: 1e-6,
            detectors: vec![DetectorKind::Giga, DetectorKind::Lmmse],
            exact_projection: false,
            channel: ChannelSource::IidGaussian,
            workers: None,
            record_wall_time: false,
        }
    }
}

impl SimConfig {
    /// Parses and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg = Self::parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without validating, for callers that adjust fields first.
    /// Missing keys take their default values.
    pub fn parse_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Levels per real component.
    pub fn levels(&self) -> Result<usize> {
        levels_per_component(self.mod_order)
    }

    /// Bits carried by one trial's symbol vector.
    pub fn bits_per_trial(&self) -> Result<u64> {
        Ok(2 * self.k as u64 * u64::from(self.levels()?.trailing_zeros()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_r == 0 || self.k == 0 {
            return bad(format!(
                "n_r = {} and k = {} must be positive",
                self.n_r, self.k
            ));
        }
        let levels = self.levels()?;
        if !levels.is_power_of_two() {
            return bad(format!(
                "mod_order {} has {} levels per component; Gray labelling needs a power of two",
                self.mod_order, levels
            ));
        }
        if self.trials == 0 || self.trials > MAX_TRIALS {
            return bad(format!(
                "trials = {} must be in 1..={}",
                self.trials, MAX_TRIALS
            ));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return bad("snr_db must be a non-empty list of finite values".into());
        }
        if self.detectors.is_empty() {
            return bad("no detectors selected".into());
        }
        for (i, d) in self.detectors.iter().enumerate() {
            if self.detectors[..i].contains(d) {
                return bad(format!("detector {} listed twice", d.label()));
            }
        }
        let rows = 2 * self.n_r;
        if self.detectors.contains(&DetectorKind::Giga) {
            if self.u_list.is_empty() {
                return bad("u_list is empty but giga is selected".into());
            }
            for (i, &u) in self.u_list.iter().enumerate() {
                if u == 0 || !rows.is_multiple_of(u) {
                    return Err(Error::InvalidGrouping { groups: u, rows });
                }
                if self.u_list[..i].contains(&u) {
                    return bad(format!("U = {u} listed twice"));
                }
            }
            if !(self.damping > 0.0 && self.damping <= 1.0) {
                return bad(format!("damping {} outside (0, 1]", self.damping));
            }
            if self.t_max == 0 {
                return bad("t_max must be at least 1".into());
            }
            if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
                return bad(format!("epsilon {} must be positive", self.epsilon));
            }
        }
        let needs_enumeration = self.detectors.contains(&DetectorKind::ExactOracle)
            || (self.exact_projection && self.detectors.contains(&DetectorKind::Giga));
        if needs_enumeration {
            check_enumeration(levels, 2 * self.k, ENUMERATION_CAP)?;
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        Ok(())
    }
}
