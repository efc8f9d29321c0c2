//! Fully factorized distributions over the real alphabet, parameterized by
//! their e-affine coordinates (EACS), plus exhaustive enumeration of the
//! joint posterior used as the correctness oracle.
//!
//! Row `k` of an EACS array holds the coordinates of symbol `k` for levels
//! `1..L`; level 0 is the reference and has no coordinate. A marginal row is
//! the softmax of `(0, d[k, 1] + theta[k, 1], ..., d[k, L-1] + theta[k, L-1])`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::system::{Alphabet, NaturalPrior, RealSystem, PROB_FLOOR};

/// Default bound on the number of joint states visited by enumeration.
pub const ENUMERATION_CAP: u64 = 1 << 20;

/// E-affine coordinates, `symbols x (levels - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Eacs {
    pub theta: DMatrix<f64>,
}

impl Eacs {
    pub fn zeros(symbols: usize, levels: usize) -> Self {
        Self {
            theta: DMatrix::zeros(symbols, levels - 1),
        }
    }

    pub fn from_matrix(theta: DMatrix<f64>) -> Self {
        Self { theta }
    }

    pub fn symbols(&self) -> usize {
        self.theta.nrows()
    }

    pub fn levels(&self) -> usize {
        self.theta.ncols() + 1
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|x| x.is_finite())
    }

    /// Largest absolute coordinate difference.
    pub fn sup_distance(&self, other: &Eacs) -> f64 {
        self.theta
            .iter()
            .zip(other.theta.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Per-symbol probabilities, `symbols x levels`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMarginals {
    pub probs: DMatrix<f64>,
}

impl DiscreteMarginals {
    pub fn symbols(&self) -> usize {
        self.probs.nrows()
    }

    pub fn levels(&self) -> usize {
        self.probs.ncols()
    }

    pub fn sup_distance(&self, other: &DiscreteMarginals) -> f64 {
        (&self.probs - &other.probs).amax()
    }
}

/// Per-symbol mean and variance under a factorized distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

fn check_shapes(theta: &Eacs, d: &NaturalPrior) -> Result<()> {
    if theta.theta.shape() != d.d.shape() {
        return Err(Error::DimensionMismatch(format!(
            "EACS is {:?}, prior is {:?}",
            theta.theta.shape(),
            d.d.shape()
        )));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `ln(1 + sum_l exp(d_l + theta_l))`.
pub fn free_energy(theta_row: &[f64], d_row: &[f64]) -> f64 {
    let logits = std::iter::once(0.0).chain(theta_row.iter().zip(d_row).map(|(t, d)| t + d));
    log_sum_exp(logits)
}

/// Normalized log-probabilities of every level, one row per symbol.
pub fn log_marginals(theta: &Eacs, d: &NaturalPrior) -> Result<DMatrix<f64>> {
    check_shapes(theta, d)?;
    let (symbols, levels) = (theta.symbols(), theta.levels());
    let mut out = DMatrix::zeros(symbols, levels);
    for k in 0..symbols {
        let logit = |l: usize| {
            if l == 0 {
                0.0
            } else {
                theta.theta[(k, l - 1)] + d.d[(k, l - 1)]
            }
        };
        let max = (0..levels).map(logit).fold(f64::NEG_INFINITY, f64::max);
        let norm = max
            + (0..levels)
                .map(|l| (logit(l) - max).exp())
                .sum::<f64>()
                .ln();
        for l in 0..levels {
            out[(k, l)] = logit(l) - norm;
        }
    }
    Ok(out)
}

pub fn theta_to_marginals(theta: &Eacs, d: &NaturalPrior) -> Result<DiscreteMarginals> {
    check_shapes(theta, d)?;
    let (symbols, levels) = (theta.symbols(), theta.levels());
    let mut probs = DMatrix::zeros(symbols, levels);
    let mut weights = vec![0.0; levels];
    for k in 0..symbols {
        let mut max = 0.0f64;
        for l in 1..levels {
            max = max.max(theta.theta[(k, l - 1)] + d.d[(k, l - 1)]);
        }
        weights[0] = (-max).exp();
        for l in 1..levels {
            weights[l] = (theta.theta[(k, l - 1)] + d.d[(k, l - 1)] - max).exp();
        }
        let z: f64 = weights.iter().sum();
        for l in 0..levels {
            probs[(k, l)] = weights[l] / z;
        }
    }
    Ok(DiscreteMarginals { probs })
}

pub fn marginals_to_theta(m: &DiscreteMarginals, d: &NaturalPrior) -> Result<Eacs> {
    if m.symbols() != d.symbols() || m.levels() != d.levels() {
        return Err(Error::DimensionMismatch(format!(
            "marginals are {:?}, prior is {:?}",
            m.probs.shape(),
            d.d.shape()
        )));
    }
    for k in 0..m.symbols() {
        for l in 0..m.levels() {
            let p = m.probs[(k, l)];
            if !(p > PROB_FLOOR) {
                return Err(Error::ProbabilityUnderflow {
                    symbol: k,
                    level: l,
                    value: p,
                });
            }
        }
    }
    let theta = DMatrix::from_fn(d.symbols(), d.levels() - 1, |k, l| {
        (m.probs[(k, l + 1)] / m.probs[(k, 0)]).ln() - d.d[(k, l)]
    });
    Ok(Eacs { theta })
}

pub fn marginal_moments(theta: &Eacs, d: &NaturalPrior, alphabet: &Alphabet) -> Result<MomentPair> {
    if theta.levels() != alphabet.len() {
        return Err(Error::DimensionMismatch(format!(
            "EACS has {} levels, alphabet has {}",
            theta.levels(),
            alphabet.len()
        )));
    }
    check_shapes(theta, d)?;
    let s = alphabet.points();
    let symbols = theta.symbols();
    let mut mean = DVector::zeros(symbols);
    let mut var = DVector::zeros(symbols);
    let mut w = vec![0.0; s.len()];
    for k in 0..symbols {
        let mut max = 0.0f64;
        for l in 1..s.len() {
            max = max.max(theta.theta[(k, l - 1)] + d.d[(k, l - 1)]);
        }
        w[0] = (-max).exp();
        for l in 1..s.len() {
            w[l] = (theta.theta[(k, l - 1)] + d.d[(k, l - 1)] - max).exp();
        }
        let z: f64 = w.iter().sum();
        let mu: f64 = s.iter().zip(&w).map(|(x, p)| x * p).sum::<f64>() / z;
        // centered form keeps the variance non-negative
        let v: f64 = s
            .iter()
            .zip(&w)
            .map(|(x, p)| (x - mu) * (x - mu) * p)
            .sum::<f64>()
            / z;
        mean[k] = mu;
        var[k] = v;
    }
    Ok(MomentPair { mean, var })
}

/// `D(p || q)` with the convention `0 ln 0 = 0`.
///
/// Summed as `p ln(p/q) - p + q`, whose terms are individually non-negative
/// and whose total equals the divergence for normalized inputs.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!(
            "support sizes {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi < 0.0 || qi < 0.0 || !pi.is_finite() || !qi.is_finite() {
            return Err(Error::DimensionMismatch(format!(
                "entry {i} is not a probability ({pi}, {qi})"
            )));
        }
        if pi == 0.0 {
            total += qi;
            continue;
        }
        if qi == 0.0 {
            return Err(Error::DimensionMismatch(format!(
                "q vanishes at {i} where p = {pi}"
            )));
        }
        total += (pi * (pi / qi).ln() - pi + qi).max(0.0);
    }
    Ok(total)
}

/// Number of joint states `levels^symbols`, checked against `cap`.
pub fn check_enumeration(levels: usize, symbols: usize, cap: u64) -> Result<usize> {
    let states = (levels as u128)
        .checked_pow(symbols as u32)
        .unwrap_or(u128::MAX);
    if states > cap as u128 {
        return Err(Error::EnumerationCap { states, cap });
    }
    Ok(states as usize)
}

/// Unnormalized log weights `sum_k natural[k, s_k] - |y - G s|^2 / (2 noise_var)`
/// of every joint state, where `natural[k, 0] = 0`.
///
/// States are visited in lexicographic order over level indices with symbol 0
/// most significant, which fixes the summation order of everything built on
/// top of this.
pub fn joint_log_weights(
    g: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_var: f64,
    natural: &DMatrix<f64>,
    alphabet: &Alphabet,
    cap: u64,
) -> Result<Vec<f64>> {
    let symbols = g.ncols();
    let levels = alphabet.len();
    if natural.nrows() != symbols || natural.ncols() + 1 != levels || y.len() != g.nrows() {
        return Err(Error::DimensionMismatch(
            "enumeration inputs disagree".into(),
        ));
    }
    let states = check_enumeration(levels, symbols, cap)?;
    let s = alphabet.points();
    let mut digits = vec![0usize; symbols];
    let mut weights = Vec::with_capacity(states);
    let mut residual = DVector::zeros(y.len());
    for _ in 0..states {
        residual.copy_from(y);
        let mut prior = 0.0;
        for (k, &l) in digits.iter().enumerate() {
            residual.axpy(-s[l], &g.column(k), 1.0);
            if l > 0 {
                prior += natural[(k, l - 1)];
            }
        }
        weights.push(prior - residual.norm_squared() / (2.0 * noise_var));
        for k in (0..symbols).rev() {
            digits[k] += 1;
            if digits[k] < levels {
                break;
            }
            digits[k] = 0;
        }
    }
    Ok(weights)
}

/// Log-marginals `ln p_k(s_l)` of the normalized joint defined by `weights`.
pub fn log_marginals_from_weights(weights: &[f64], symbols: usize, levels: usize) -> DMatrix<f64> {
    let mut max = DMatrix::from_element(symbols, levels, f64::NEG_INFINITY);
    visit_states(weights, symbols, levels, |k, l, w| {
        max[(k, l)] = f64::max(max[(k, l)], w)
    });
    let mut sums = DMatrix::<f64>::zeros(symbols, levels);
    visit_states(weights, symbols, levels, |k, l, w| {
        sums[(k, l)] += (w - max[(k, l)]).exp()
    });
    let log_z = log_sum_exp(weights.iter().copied());
    DMatrix::from_fn(symbols, levels, |k, l| {
        max[(k, l)] + sums[(k, l)].ln() - log_z
    })
}

fn visit_states(
    weights: &[f64],
    symbols: usize,
    levels: usize,
    mut f: impl FnMut(usize, usize, f64),
) {
    let mut digits = vec![0usize; symbols];
    for &w in weights {
        for (k, &l) in digits.iter().enumerate() {
            f(k, l, w);
        }
        for k in (0..symbols).rev() {
            digits[k] += 1;
            if digits[k] < levels {
                break;
            }
            digits[k] = 0;
        }
    }
}

/// The exhaustively enumerated posterior of a real system.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactPosterior {
    /// Normalized joint probabilities in lexicographic state order.
    pub table: Vec<f64>,
    pub marginals: DiscreteMarginals,
}

pub fn exact_posterior(sys: &RealSystem) -> Result<ExactPosterior> {
    exact_posterior_capped(sys, ENUMERATION_CAP)
}

pub fn exact_posterior_capped(sys: &RealSystem, cap: u64) -> Result<ExactPosterior> {
    let weights = joint_log_weights(
        &sys.g,
        &sys.y,
        sys.noise_var,
        &sys.prior.d,
        &sys.alphabet,
        cap,
    )?;
    let log_z = log_sum_exp(weights.iter().copied());
    let table = weights.iter().map(|w| (w - log_z).exp()).collect();
    let marginals = log_marginals_from_weights(&weights, sys.symbols(), sys.levels()).map(f64::exp);
    Ok(ExactPosterior {
        table,
        marginals: DiscreteMarginals { probs: marginals },
    })
}
