//! Monte Carlo experiments: random realizations, BER sweeps, the
//! per-iteration cost model and the small-instance oracle suite.
//!
//! Every random draw comes from a ChaCha8 stream keyed by
//! `(seed, trial, purpose)`, so a trial's realization does not depend on
//! scheduling, on the SNR grid or on which detectors are enabled.

mod complexity;
mod config;
mod oracle;
mod sweep;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use complexity::{complexity_table, ComplexityReport, ComplexityRow};
pub use config::{ChannelSource, DetectorKind, SimConfig};
pub use oracle::{oracle_check, OracleCheck};
pub use sweep::{run_trial, sweep, BerReport, BerRow, Experiment, Outcome, Series, TrialOutcome};

/// Purpose tags mixed into the per-trial stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamPurpose {
    Channel = 1,
    Symbols = 2,
    Noise = 3,
}

/// Largest trial index that fits in the stream id next to the purpose byte.
pub const MAX_TRIALS: u64 = 1 << 56;

/// Generator for one `(seed, trial, purpose)` triple.
pub fn trial_rng(seed: u64, trial: u64, purpose: StreamPurpose) -> ChaCha8Rng {
    debug_assert!(trial < MAX_TRIALS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((trial << 8) | purpose as u64);
    rng
}

/// `CN(0, 1)` sample.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// `n_r x k` channel with i.i.d. `CN(0, 1/n_r)` entries, filled column by column.
pub fn gen_channel_iid<R: Rng + ?Sized>(n_r: usize, k: usize, rng: &mut R) -> DMatrix<Complex64> {
    let scale = (1.0 / n_r as f64).sqrt();
    let mut h = DMatrix::zeros(n_r, k);
    for c in 0..k {
        for r in 0..n_r {
            h[(r, c)] = complex_normal(rng) * scale;
        }
    }
    h
}

/// `n` i.i.d. `CN(0, 1)` samples.
pub fn gen_unit_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<Complex64> {
    let mut w = DVector::zeros(n);
    for x in w.iter_mut() {
        *x = complex_normal(rng);
    }
    w
}

/// Per-antenna complex noise variance for `SNR = K / noise_var`.
pub fn noise_var_from_snr(snr_db: f64, users: usize) -> f64 {
    users as f64 / 10f64.powf(snr_db / 10.0)
}

/// Binary-reflected Gray label of a level index.
pub fn gray(index: usize) -> usize {
    index ^ (index >> 1)
}

/// Bits carried by one real component of an `levels`-ary alphabet.
pub fn bits_per_component(levels: usize) -> u32 {
    debug_assert!(levels.is_power_of_two());
    levels.trailing_zeros()
}

/// Gray-labelled bit errors between two index vectors.
pub fn bit_errors(sent: &[usize], detected: &[usize]) -> u64 {
    sent.iter()
        .zip(detected)
        .map(|(&a, &b)| u64::from((gray(a) ^ gray(b)).count_ones()))
        .sum()
}
