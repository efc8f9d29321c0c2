//! Transmission model: complex-to-real lifting, QAM alphabets, prior natural
//! parameters and the uniform partition of the received signal into groups.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Probabilities below this are raised to it before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-300;

/// Tolerance on the row sums of user-supplied priors.
const PRIOR_SUM_TOL: f64 = 1e-9;

/// Complex baseband model `y = G s + z` with `z ~ CN(0, noise_var I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSystem {
    pub channel: DMatrix<Complex64>,
    pub received: DVector<Complex64>,
    pub noise_var: f64,
    pub mod_order: usize,
}

impl ComplexSystem {
    pub fn new(
        channel: DMatrix<Complex64>,
        received: DVector<Complex64>,
        noise_var: f64,
        mod_order: usize,
    ) -> Result<Self> {
        if channel.nrows() == 0 || channel.ncols() == 0 {
            return Err(Error::DimensionMismatch(
                "channel must be at least 1x1".into(),
            ));
        }
        if received.len() != channel.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "received has {} entries, channel has {} rows",
                received.len(),
                channel.nrows()
            )));
        }
        check_noise_var(noise_var)?;
        levels_per_component(mod_order)?;
        Ok(Self {
            channel,
            received,
            noise_var,
            mod_order,
        })
    }

    pub fn antennas(&self) -> usize {
        self.channel.nrows()
    }

    pub fn users(&self) -> usize {
        self.channel.ncols()
    }
}

/// The real alphabet shared by the in-phase and quadrature components.
///
/// Levels are the odd integers `-(L-1), ..., -1, 1, ..., L-1` scaled so that
/// the induced square QAM constellation has unit average power.
#[derive(Debug, Clone, PartialEq)]
pub struct Alphabet {
    points: Vec<f64>,
}

impl Alphabet {
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> f64 {
        self.points[index]
    }

    pub fn max_abs(&self) -> f64 {
        self.points.iter().fold(0.0, |m, p| m.max(p.abs()))
    }

    /// Index of the closest level; ties go to the smaller index.
    pub fn nearest_index(&self, x: f64) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let dist = (x - p) * (x - p);
            if dist < best_dist {
                best = i;
                best_dist = dist;
            }
        }
        best
    }

    /// All `L^2` complex constellation points, real part major.
    pub fn constellation(&self) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.len() * self.len());
        for &re in &self.points {
            for &im in &self.points {
                out.push(Complex64::new(re, im));
            }
        }
        out
    }
}

/// Natural parameters `d[k, l] = ln(p_k(s_l) / p_k(s_0))` of the prior,
/// one row per real symbol and one column per non-reference level.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalPrior {
    pub d: DMatrix<f64>,
}

impl NaturalPrior {
    pub fn zeros(symbols: usize, levels: usize) -> Self {
        Self {
            d: DMatrix::zeros(symbols, levels - 1),
        }
    }

    pub fn symbols(&self) -> usize {
        self.d.nrows()
    }

    pub fn levels(&self) -> usize {
        self.d.ncols() + 1
    }
}

/// Real-valued counterpart of a [`ComplexSystem`], ready for detection.
#[derive(Debug, Clone, PartialEq)]
pub struct RealSystem {
    pub g: DMatrix<f64>,
    pub y: DVector<f64>,
    pub noise_var: f64,
    pub alphabet: Alphabet,
    pub prior: NaturalPrior,
}

impl RealSystem {
    /// Builds a real system directly, checking shapes. `g` must have an even
    /// number of columns (real parts of all users, then imaginary parts).
    pub fn new(
        g: DMatrix<f64>,
        y: DVector<f64>,
        noise_var: f64,
        alphabet: Alphabet,
        prior: NaturalPrior,
    ) -> Result<Self> {
        if g.nrows() == 0 || g.ncols() == 0 {
            return Err(Error::DimensionMismatch("channel must be non-empty".into()));
        }
        if y.len() != g.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "y has {} entries, G has {} rows",
                y.len(),
                g.nrows()
            )));
        }
        if prior.symbols() != g.ncols() || prior.levels() != alphabet.len() {
            return Err(Error::DimensionMismatch(format!(
                "prior is {}x{}, expected {}x{}",
                prior.d.nrows(),
                prior.d.ncols(),
                g.ncols(),
                alphabet.len() - 1
            )));
        }
        check_noise_var(noise_var)?;
        Ok(Self {
            g,
            y,
            noise_var,
            alphabet,
            prior,
        })
    }

    /// Number of real symbols (2K for a lifted system).
    pub fn symbols(&self) -> usize {
        self.g.ncols()
    }

    /// Number of real observations (2N_r for a lifted system).
    pub fn observations(&self) -> usize {
        self.g.nrows()
    }

    pub fn levels(&self) -> usize {
        self.alphabet.len()
    }
}

/// Uniform contiguous partition of the real received components.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    pub groups: usize,
    pub group_size: usize,
    pub index_sets: Vec<Range<usize>>,
    pub sub_received: Vec<DVector<f64>>,
    pub sub_channels: Vec<DMatrix<f64>>,
}

fn check_noise_var(noise_var: f64) -> Result<()> {
    if noise_var > 0.0 && noise_var.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidNoiseVariance(noise_var))
    }
}

/// `sqrt(mod_order)`, or an error if `mod_order` is not a perfect square >= 4.
pub fn levels_per_component(mod_order: usize) -> Result<usize> {
    if mod_order < 4 {
        return Err(Error::InvalidModOrder(mod_order));
    }
    let mut l = (mod_order as f64).sqrt().round() as usize;
    while l * l > mod_order {
        l -= 1;
    }
    while (l + 1) * (l + 1) <= mod_order {
        l += 1;
    }
    if l * l != mod_order {
        return Err(Error::InvalidModOrder(mod_order));
    }
    Ok(l)
}

pub fn make_alphabet(mod_order: usize) -> Result<Alphabet> {
    let l = levels_per_component(mod_order)?;
    // mean of (2i - L + 1)^2 over i is (L^2 - 1) / 3
    let scale = (1.5 / ((l * l - 1) as f64)).sqrt();
    let points = (0..l)
        .map(|i| (2.0 * i as f64 - (l as f64 - 1.0)) * scale)
        .collect();
    Ok(Alphabet { points })
}

/// Uniform per-component prior, `users x levels`.
pub fn uniform_priors(users: usize, levels: usize) -> DMatrix<f64> {
    DMatrix::from_element(users, levels, 1.0 / levels as f64)
}

fn validate_prior_rows(priors: &DMatrix<f64>) -> Result<()> {
    for (r, row) in priors.row_iter().enumerate() {
        let mut sum = 0.0;
        for &p in row.iter() {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::InvalidPrior(format!(
                    "row {r} has non-positive or non-finite entry {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PRIOR_SUM_TOL {
            return Err(Error::InvalidPrior(format!("row {r} sums to {sum}")));
        }
    }
    Ok(())
}

/// Natural parameters of a prior given as one probability row per symbol.
pub fn prior_natural_params(priors: &DMatrix<f64>) -> Result<NaturalPrior> {
    if priors.ncols() < 2 {
        return Err(Error::InvalidPrior("need at least two levels".into()));
    }
    validate_prior_rows(priors)?;
    let d = DMatrix::from_fn(priors.nrows(), priors.ncols() - 1, |k, l| {
        priors[(k, l + 1)].max(PROB_FLOOR).ln() - priors[(k, 0)].max(PROB_FLOOR).ln()
    });
    Ok(NaturalPrior { d })
}

/// Stacks real parts over imaginary parts.
pub fn lift_vector(v: &DVector<Complex64>) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(2 * n, |i, _| if i < n { v[i].re } else { v[i - n].im })
}

/// `[Re G, -Im G; Im G, Re G]`.
pub fn lift_matrix(g: &DMatrix<Complex64>) -> DMatrix<f64> {
    let (n, k) = g.shape();
    DMatrix::from_fn(2 * n, 2 * k, |i, j| {
        let z = g[(i % n, j % k)];
        match (i < n, j < k) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    })
}

/// Lifts a complex system. `priors` holds one row per user over the real
/// alphabet and is applied to both the real and imaginary component; `None`
/// means uniform.
pub fn lift_to_real(sys: &ComplexSystem, priors: Option<&DMatrix<f64>>) -> Result<RealSystem> {
    let alphabet = make_alphabet(sys.mod_order)?;
    check_noise_var(sys.noise_var)?;
    let users = sys.users();
    let uniform;
    let priors = match priors {
        Some(p) => p,
        None => {
            uniform = uniform_priors(users, alphabet.len());
            &uniform
        }
    };
    if priors.nrows() != users || priors.ncols() != alphabet.len() {
        return Err(Error::InvalidPrior(format!(
            "expected {}x{} prior, got {}x{}",
            users,
            alphabet.len(),
            priors.nrows(),
            priors.ncols()
        )));
    }
    let per_user = prior_natural_params(priors)?;
    let d = DMatrix::from_fn(2 * users, alphabet.len() - 1, |k, l| {
        per_user.d[(k % users, l)]
    });
    RealSystem::new(
        lift_matrix(&sys.channel),
        lift_vector(&sys.received),
        sys.noise_var / 2.0,
        alphabet,
        NaturalPrior { d },
    )
}

pub fn make_grouping(sys: &RealSystem, groups: usize) -> Result<Grouping> {
    let rows = sys.observations();
    if groups == 0 || !rows.is_multiple_of(groups) {
        return Err(Error::InvalidGrouping { groups, rows });
    }
    let group_size = rows / groups;
    let index_sets: Vec<Range<usize>> = (0..groups)
        .map(|u| u * group_size..(u + 1) * group_size)
        .collect();
    let sub_received = index_sets
        .iter()
        .map(|r| sys.y.rows(r.start, group_size).into_owned())
        .collect();
    let sub_channels = index_sets
        .iter()
        .map(|r| sys.g.rows(r.start, group_size).into_owned())
        .collect();
    Ok(Grouping {
        groups,
        group_size,
        index_sets,
        sub_received,
        sub_channels,
    })
}
