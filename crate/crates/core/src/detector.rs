//! The grouped fixed-point detector.
//!
//! Each iteration projects every group's auxiliary distribution onto the
//! factorized manifold, extracts the group's contribution
//! `xi_u = theta_0u - theta_u`, and applies the damped updates
//!
//! ```text
//! theta_u <- a * sum_{u' != u} xi_u' + (1 - a) * theta_u
//! theta_0 <- a * sum_u xi_u          + (1 - a) * theta_0
//! ```
//!
//! until the sup-norm change of `theta_0` drops below the tolerance.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{theta_to_marginals, DiscreteMarginals, Eacs};
use crate::projection::{approx_projection, exact_projection, GroupContext};
use crate::system::{make_grouping, Alphabet, Grouping, RealSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMode {
    /// Gaussian-surrogate projection, polynomial cost.
    Approximate,
    /// Exhaustive enumeration; only for tiny systems.
    ExactOracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GigaConfig {
    pub groups: usize,
    pub damping: f64,
    pub max_iters: usize,
    /// Convergence threshold on the sup-norm change of `theta_0`.
    pub tolerance: f64,
    pub mode: ProjectionMode,
    /// Store the hard decisions of every iteration in the trace.
    pub record_decisions: bool,
    /// Project groups on the rayon pool. Results do not depend on this.
    pub parallel: bool,
    /// Initial `theta_0`; each `theta_u` then starts at `(U-1)/U` of it.
    pub warm_start: Option<Eacs>,
}

impl GigaConfig {
    pub fn new(groups: usize) -> Self {
        Self {
            groups,
            damping: 0.3,
            max_iters: 50,
            tolerance: 1e-6,
            mode: ProjectionMode::Approximate,
            record_decisions: false,
            parallel: true,
            warm_start: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    /// 1-based iteration number.
    pub iteration: usize,
    pub delta_sup: f64,
    /// Sup-norm of each group's extracted term `xi_u`.
    pub xi_sup: Vec<f64>,
    pub decisions: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GigaState {
    pub theta0: Eacs,
    pub theta_u: Vec<Eacs>,
    pub iteration: usize,
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub marginals: DiscreteMarginals,
    pub decision_indices: Vec<usize>,
    pub real_decisions: Vec<f64>,
    pub complex_decisions: Vec<Complex64>,
    pub iterations_used: usize,
    pub converged: bool,
}

/// Per-row argmax; ties resolve to the lowest level index.
pub fn mpm_indices(probs: &DMatrix<f64>) -> Vec<usize> {
    probs
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (l, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = l;
                }
            }
            best
        })
        .collect()
}

pub fn mpm_decide(marginals: &DiscreteMarginals, alphabet: &Alphabet) -> Vec<f64> {
    mpm_indices(&marginals.probs)
        .into_iter()
        .map(|i| alphabet.point(i))
        .collect()
}

/// `s_k + j s_{K+k}` for the first half `k < K`.
pub fn assemble_complex(real_decisions: &[f64]) -> Result<Vec<Complex64>> {
    if !real_decisions.len().is_multiple_of(2) {
        return Err(Error::DimensionMismatch(format!(
            "{} real decisions cannot be paired",
            real_decisions.len()
        )));
    }
    let k = real_decisions.len() / 2;
    Ok((0..k)
        .map(|i| Complex64::new(real_decisions[i], real_decisions[k + i]))
        .collect())
}

/// Single-owner detector state for one received vector.
pub struct GigaDetector<'a> {
    sys: &'a RealSystem,
    grouping: Grouping,
    cfg: GigaConfig,
    state: GigaState,
}

impl<'a> GigaDetector<'a> {
    pub fn new(sys: &'a RealSystem, cfg: GigaConfig) -> Result<Self> {
        cfg.validate()?;
        let grouping = make_grouping(sys, cfg.groups)?;
        let (symbols, levels) = (sys.symbols(), sys.levels());
        let (theta0, theta_u) = match &cfg.warm_start {
            Some(start) => {
                if start.theta.shape() != (symbols, levels - 1) || !start.is_finite() {
                    return Err(Error::DimensionMismatch(
                        "warm start must be a finite EACS of the system's shape".into(),
                    ));
                }
                let share = (cfg.groups - 1) as f64 / cfg.groups as f64;
                let per_group = Eacs::from_matrix(&start.theta * share);
                (start.clone(), vec![per_group; cfg.groups])
            }
            None => (
                Eacs::zeros(symbols, levels),
                vec![Eacs::zeros(symbols, levels); cfg.groups],
            ),
        };
        Ok(Self {
            sys,
            grouping,
            cfg,
            state: GigaState {
                theta0,
                theta_u,
                iteration: 0,
                trace: Vec::new(),
            },
        })
    }

    pub fn state(&self) -> &GigaState {
        &self.state
    }

    fn context(&self, u: usize) -> GroupContext<'_> {
        GroupContext {
            y: &self.grouping.sub_received[u],
            g: &self.grouping.sub_channels[u],
            noise_var: self.sys.noise_var,
            alphabet: &self.sys.alphabet,
            prior: &self.sys.prior,
        }
    }

    fn project(&self, u: usize) -> Result<Eacs> {
        let ctx = self.context(u);
        let theta_u = &self.state.theta_u[u];
        let out = match self.cfg.mode {
            ProjectionMode::Approximate => approx_projection(&ctx, theta_u).map(|(t, _)| t),
            ProjectionMode::ExactOracle => exact_projection(&ctx, theta_u),
        };
        out.map_err(|e| Error::Projection {
            iteration: self.state.iteration + 1,
            group: u,
            source: Box::new(e),
        })
    }

    /// Runs one iteration and returns the sup-norm change of `theta_0`.
    pub fn step(&mut self) -> Result<f64> {
        let groups = self.cfg.groups;
        let projected: Vec<Result<Eacs>> = if self.cfg.parallel && groups > 1 {
            (0..groups)
                .into_par_iter()
                .map(|u| self.project(u))
                .collect()
        } else {
            (0..groups).map(|u| self.project(u)).collect()
        };
        let mut xi = Vec::with_capacity(groups);
        for (u, p) in projected.into_iter().enumerate() {
            xi.push(p?.theta - &self.state.theta_u[u].theta);
        }

        // fixed u-order reduction
        let mut total = DMatrix::zeros(xi[0].nrows(), xi[0].ncols());
        for x in &xi {
            total += x;
        }

        let alpha = self.cfg.damping;
        let iteration = self.state.iteration + 1;
        for (theta_u, x) in self.state.theta_u.iter_mut().zip(&xi) {
            theta_u.theta = (&total - x) * alpha + &theta_u.theta * (1.0 - alpha);
        }
        let theta0 = Eacs::from_matrix(&total * alpha + &self.state.theta0.theta * (1.0 - alpha));
        if !theta0.is_finite() || self.state.theta_u.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged { iteration });
        }
        let delta = theta0.sup_distance(&self.state.theta0);
        self.state.theta0 = theta0;
        self.state.iteration = iteration;

        let decisions = if self.cfg.record_decisions {
            Some(mpm_indices(
                &theta_to_marginals(&self.state.theta0, &self.sys.prior)?.probs,
            ))
        } else {
            None
        };
        self.state.trace.push(TraceEntry {
            iteration,
            delta_sup: delta,
            xi_sup: xi.iter().map(|x| x.amax()).collect(),
            decisions,
        });
        Ok(delta)
    }

    /// Iterates to convergence or `max_iters`, then decides.
    pub fn run(mut self) -> Result<(DetectionResult, GigaState)> {
        let mut converged = false;
        while self.state.iteration < self.cfg.max_iters {
            if self.step()? < self.cfg.tolerance {
                converged = true;
                break;
            }
        }
        let result = self.decide(converged)?;
        Ok((result, self.state))
    }

    pub fn decide(&self, converged: bool) -> Result<DetectionResult> {
        let marginals = theta_to_marginals(&self.state.theta0, &self.sys.prior)?;
        let decision_indices = mpm_indices(&marginals.probs);
        let real_decisions: Vec<f64> = decision_indices
            .iter()
            .map(|&i| self.sys.alphabet.point(i))
            .collect();
        let complex_decisions = assemble_complex(&real_decisions)?;
        Ok(DetectionResult {
            marginals,
            decision_indices,
            real_decisions,
            complex_decisions,
            iterations_used: self.state.iteration,
            converged,
        })
    }
}

pub fn run_giga(sys: &RealSystem, cfg: &GigaConfig) -> Result<(DetectionResult, GigaState)> {
    GigaDetector::new(sys, cfg.clone())?.run()
}

/// Trace as CSV rows `iter,delta_sup,converged`.
pub fn trace_csv(trace: &[TraceEntry], tolerance: f64) -> String {
    let mut out = String::from("iter,delta_sup,converged\n");
    for entry in trace {
        let _ = writeln!(
            out,
            "{},{:e},{}",
            entry.iteration,
            entry.delta_sup,
            entry.delta_sup < tolerance
        );
    }
    out
}
