use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{run_giga, GigaConfig, ProjectionMode};
use crate::error::{Error, Result};
use crate::geometry::{exact_posterior, marginal_moments, theta_to_marginals, Eacs};
use crate::projection::{a_u_direct, a_u_woodbury, sherman_morrison_inverse, surrogate_moments};
use crate::system::{make_alphabet, NaturalPrior, RealSystem};

/// Largest deviation of a fast path from its brute-force reference.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| uniform(rng, -1.0, 1.0))
}

fn relative(err: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    err.amax() / reference.amax().max(f64::MIN_POSITIVE)
}

/// One exact-projection GIGA step with a single group and no damping against
/// the enumerated posterior.
fn exact_single_group(rng: &mut ChaCha8Rng) -> Result<OracleCheck> {
    let alphabet = make_alphabet(4)?;
    let mut worst = 0.0f64;
    for i in 0..50 {
        let symbols = 2 * (1 + i % 2);
        let rows = rng.random_range(1..=4);
        let g = random_matrix(rng, rows, symbols);
        let y = DVector::from_fn(rows, |_, _| uniform(rng, -1.5, 1.5));
        let prior = NaturalPrior {
            d: DMatrix::from_fn(symbols, 1, |_, _| uniform(rng, -1.0, 1.0)),
        };
        let sys = RealSystem::new(g, y, uniform(rng, 0.1, 2.0), alphabet.clone(), prior)?;
        let mut cfg = GigaConfig::new(1);
        cfg.mode = ProjectionMode::ExactOracle;
        cfg.damping = 1.0;
        cfg.max_iters = 1;
        let (res, _) = run_giga(&sys, &cfg)?;
        let reference = exact_posterior(&sys)?.marginals;
        worst = worst.max(res.marginals.sup_distance(&reference));
    }
    Ok(OracleCheck {
        name: "exact-single-group",
        instances: 50,
        max_error: worst,
        tolerance: 1e-9,
    })
}

/// Closed-form mixture moments against enumeration of the other symbols.
fn surrogate_mixture(rng: &mut ChaCha8Rng) -> Result<OracleCheck> {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let alphabet = make_alphabet(if i % 2 == 0 { 4 } else { 16 })?;
        let levels = alphabet.len();
        let symbols = 2 * rng.random_range(1..=2);
        let rows = rng.random_range(1..=4);
        let g = random_matrix(rng, rows, symbols);
        let noise_var = uniform(rng, 0.05, 1.0);
        let theta = Eacs::from_matrix(DMatrix::from_fn(symbols, levels - 1, |_, _| {
            uniform(rng, -2.0, 2.0)
        }));
        let prior = NaturalPrior::zeros(symbols, levels);
        let probs = theta_to_marginals(&theta, &prior)?.probs;
        let moments = marginal_moments(&theta, &prior, &alphabet)?;
        let k = rng.random_range(0..symbols);
        let s_k = alphabet.point(rng.random_range(0..levels));
        let (mean, cov) = surrogate_moments(&g, noise_var, &moments, k, s_k);

        let others: Vec<usize> = (0..symbols).filter(|&j| j != k).collect();
        let mut ref_mean = DVector::zeros(rows);
        let mut ref_second = DMatrix::zeros(rows, rows);
        let mut idx = vec![0usize; others.len()];
        loop {
            let mut p = 1.0;
            let mut x = g.column(k) * s_k;
            for (slot, &j) in others.iter().enumerate() {
                p *= probs[(j, idx[slot])];
                x += g.column(j) * alphabet.point(idx[slot]);
            }
            ref_mean += &x * p;
            ref_second += &x * x.transpose() * p;
            let mut pos = others.len();
            while pos > 0 {
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < levels {
                    break;
                }
                idx[pos] = 0;
            }
            if idx.iter().all(|&v| v == 0) {
                break;
            }
        }
        let ref_cov = ref_second - &ref_mean * ref_mean.transpose()
            + DMatrix::identity(rows, rows) * noise_var;
        worst = worst
            .max((mean - ref_mean).amax())
            .max((cov - ref_cov).amax());
    }
    Ok(OracleCheck {
        name: "surrogate-moments",
        instances: 100,
        max_error: worst,
        tolerance: 1e-10,
    })
}

/// Rank-one downdate of an inverse against a fresh inversion.
fn rank_one_update(rng: &mut ChaCha8Rng) -> Result<OracleCheck> {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=16);
        let b = random_matrix(rng, n, n);
        let cov = &b * b.transpose() + DMatrix::identity(n, n) * uniform(rng, 0.1, 1.0);
        let a_u = cov
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Factorization("oracle inverse".into()))?;
        let g = DVector::from_fn(n, |_, _| uniform(rng, -1.0, 1.0));
        // keep cov - v g g^T comfortably positive definite
        let v = uniform(rng, 0.05, 0.9) / g.dot(&(&a_u * &g));
        let fast = sherman_morrison_inverse(&a_u, &g, v)?;
        let reference = (cov - &g * g.transpose() * v)
            .try_inverse()
            .ok_or_else(|| Error::Factorization("oracle inverse".into()))?;
        worst = worst.max(relative(&(fast - &reference), &reference));
    }
    Ok(OracleCheck {
        name: "sherman-morrison",
        instances: 200,
        max_error: worst,
        tolerance: 1e-8,
    })
}

/// The two ways of forming the inverse group covariance.
fn inverse_paths(rng: &mut ChaCha8Rng) -> Result<OracleCheck> {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=16);
        let m = rng.random_range(1..=16);
        let g = random_matrix(rng, n, m);
        let v = DVector::from_fn(m, |_, _| uniform(rng, 0.05, 1.0));
        let noise_var = uniform(rng, 0.1, 1.0);
        let direct = a_u_direct(&g, noise_var, &v)?;
        let woodbury = a_u_woodbury(&g, noise_var, &v)?;
        worst = worst.max(relative(&(woodbury - &direct), &direct));
    }
    Ok(OracleCheck {
        name: "direct-vs-woodbury",
        instances: 200,
        max_error: worst,
        tolerance: 1e-8,
    })
}

/// Runs the small-instance equivalence suite with a fixed seed.
pub fn oracle_check(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        exact_single_group(&mut rng)?,
        surrogate_mixture(&mut rng)?,
        rank_one_update(&mut rng)?,
        inverse_paths(&mut rng)?,
    ])
}
