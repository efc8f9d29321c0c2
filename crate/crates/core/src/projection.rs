//! m-projection of a single group's auxiliary distribution onto the
//! factorized manifold.
//!
//! The auxiliary distribution of group `u` keeps the exact likelihood term of
//! that group's observations and summarizes every other group by the EACS
//! `theta_u`. Its m-projection matches marginals, so the projected EACS is
//! `ln(p_k(s_l) / p_k(s_0)) - d[k, l]` of the auxiliary marginals.
//!
//! [`exact_projection`] computes those marginals by enumeration.
//! [`approx_projection`] replaces, for each symbol `k`, the mixture formed by
//! the other symbols plus noise with the Gaussian of equal mean and
//! covariance. The covariance is a rank-one downdate of a single matrix per
//! group, so one `N_u x N_u` inverse (`A_u`) serves all `2K` symbols.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{
    joint_log_weights, log_marginals_from_weights, marginal_moments, Eacs, MomentPair,
    ENUMERATION_CAP,
};
use crate::system::{Alphabet, NaturalPrior, PROB_FLOOR};

/// Lower bound applied to per-symbol variances before building covariances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Smallest accepted Sherman-Morrison denominator `1 - v g^T A g`.
pub const SM_DENOMINATOR_MIN: f64 = 1e-12;

/// Observations and channel rows of one group, with the shared model data.
#[derive(Debug, Clone, Copy)]
pub struct GroupContext<'a> {
    pub y: &'a DVector<f64>,
    pub g: &'a DMatrix<f64>,
    pub noise_var: f64,
    pub alphabet: &'a Alphabet,
    pub prior: &'a NaturalPrior,
}

impl GroupContext<'_> {
    fn check(&self, theta: &Eacs) -> Result<()> {
        if self.g.nrows() != self.y.len() {
            return Err(Error::DimensionMismatch(format!(
                "group has {} observations but {} channel rows",
                self.y.len(),
                self.g.nrows()
            )));
        }
        if theta.theta.shape() != self.prior.d.shape()
            || theta.symbols() != self.g.ncols()
            || theta.levels() != self.alphabet.len()
        {
            return Err(Error::DimensionMismatch(format!(
                "EACS {:?}, prior {:?}, channel {:?}, {} levels",
                theta.theta.shape(),
                self.prior.d.shape(),
                self.g.shape(),
                self.alphabet.len()
            )));
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(Error::InvalidNoiseVariance(self.noise_var));
        }
        Ok(())
    }
}

/// Which formula produced `A_u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InversePath {
    /// Invert the `N_u x N_u` covariance directly.
    DirectInverse,
    /// Woodbury identity through a `2K x 2K` inner system.
    Woodbury,
}

/// Real-multiplication counts of the two ways to form `A_u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexityEstimate {
    pub p: u64,
    pub q: u64,
    pub chosen_path: InversePath,
}

impl ComplexityEstimate {
    /// Costs for `symbols` real symbols (2K) and a group of `group_size` rows.
    /// Ties go to the direct inverse.
    pub fn new(symbols: u64, group_size: u64) -> Self {
        let (n, m) = (group_size, symbols);
        let p = n * n * n + m * n * n;
        let q = m * m * m + 2 * m * m * n + m * n * n;
        let chosen_path = if p <= q {
            InversePath::DirectInverse
        } else {
            InversePath::Woodbury
        };
        Self { p, q, chosen_path }
    }

    pub fn min_cost(&self) -> u64 {
        self.p.min(self.q)
    }
}

/// Every intermediate of one approximate projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWorkspace {
    /// Means and floored variances of the symbols under `theta_u`.
    pub moments: MomentPair,
    /// `y_u - G_u mu_u`.
    pub residual: DVector<f64>,
    /// Column `k` is `a_k = residual + g_k mu_k`.
    pub a: DMatrix<f64>,
    pub complexity: ComplexityEstimate,
    pub a_u: DMatrix<f64>,
    /// Column `k` is `A_u g_k`.
    pub a_g: DMatrix<f64>,
    /// `1 - v_k g_k^T A_u g_k`.
    pub sm_denominators: DVector<f64>,
    /// Mean of the per-symbol Gaussian likelihood in `s_k`.
    pub surrogate_mean: DVector<f64>,
    /// Its variance; infinite for an all-zero channel column.
    pub surrogate_var: DVector<f64>,
}

/// `L^-T L^-1` from the Cholesky factor `L`; symmetric by construction.
fn spd_inverse(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let chol = Cholesky::new(m)
        .ok_or_else(|| Error::Factorization(format!("{what} is not positive definite")))?;
    // only the lower triangle of the factor is meaningful
    let l = chol.l_dirty().as_slice();
    // column j of W = L^-1 by forward substitution against e_j
    let mut w = vec![0.0; n * n];
    for (j, wj) in w.chunks_exact_mut(n).enumerate() {
        wj[j] = 1.0;
        for p in j..n {
            let lp = &l[p * n..(p + 1) * n];
            let x = wj[p] / lp[p];
            wj[p] = x;
            for (t, lv) in wj[p + 1..].iter_mut().zip(&lp[p + 1..]) {
                *t -= x * lv;
            }
        }
    }
    let mut inv = DMatrix::zeros(n, n);
    for j in 0..n {
        let wj = &w[j * n..(j + 1) * n];
        for i in 0..=j {
            let wi = &w[i * n..(i + 1) * n];
            let s: f64 = wi[j..].iter().zip(&wj[j..]).map(|(a, b)| a * b).sum();
            inv[(i, j)] = s;
            inv[(j, i)] = s;
        }
    }
    Ok(inv)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        for i in 0..j {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// `a * b` over the contiguous column-major storage; cheaper than a packed
/// GEMM at group sizes.
fn product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = vec![0.0; n * b.ncols()];
    for (oj, bj) in out
        .chunks_exact_mut(n)
        .zip(b.as_slice().chunks_exact(b.nrows()))
    {
        for (ap, &s) in a.as_slice().chunks_exact(n).zip(bj) {
            for (o, x) in oj.iter_mut().zip(ap) {
                *o += s * x;
            }
        }
    }
    DMatrix::from_vec(n, b.ncols(), out)
}

/// `(G diag(v) G^T + noise_var I)^-1` by direct inversion.
pub fn a_u_direct(g: &DMatrix<f64>, noise_var: f64, v: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = g.nrows();
    // lower triangle only; the factorization never reads the upper one
    let mut cov = vec![0.0; n * n];
    for (col, &vp) in g.as_slice().chunks_exact(n).zip(v.iter()) {
        for (j, cj) in cov.chunks_exact_mut(n).enumerate() {
            let s = vp * col[j];
            for (c, gi) in cj[j..].iter_mut().zip(&col[j..]) {
                *c += s * gi;
            }
        }
    }
    for j in 0..n {
        cov[j + n * j] += noise_var;
    }
    spd_inverse(DMatrix::from_vec(n, n, cov), "group covariance")
}

/// The same matrix through the Woodbury identity:
/// `I / s - G (diag(v)^-1 + G^T G / s)^-1 G^T / s^2` with `s = noise_var`.
pub fn a_u_woodbury(g: &DMatrix<f64>, noise_var: f64, v: &DVector<f64>) -> Result<DMatrix<f64>> {
    let mut inner = g.tr_mul(g) / noise_var;
    for i in 0..inner.nrows() {
        inner[(i, i)] += 1.0 / v[i];
    }
    let inner_inv = spd_inverse(inner, "Woodbury inner matrix")?;
    let mut a = -(product(g, &inner_inv) * g.transpose()) / (noise_var * noise_var);
    for i in 0..a.nrows() {
        a[(i, i)] += 1.0 / noise_var;
    }
    symmetrize(&mut a);
    Ok(a)
}

/// Forms `A_u` by whichever path has the lower multiplication count.
pub fn build_a_u(
    g: &DMatrix<f64>,
    noise_var: f64,
    v: &DVector<f64>,
) -> Result<(ComplexityEstimate, DMatrix<f64>)> {
    if v.len() != g.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} variances for {} channel columns",
            v.len(),
            g.ncols()
        )));
    }
    if !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(Error::InvalidNoiseVariance(noise_var));
    }
    let v = v.map(|x| x.max(VARIANCE_FLOOR));
    let est = ComplexityEstimate::new(g.ncols() as u64, g.nrows() as u64);
    let a = match est.chosen_path {
        InversePath::DirectInverse => a_u_direct(g, noise_var, &v)?,
        InversePath::Woodbury => a_u_woodbury(g, noise_var, &v)?,
    };
    Ok((est, a))
}

/// `(A_u^-1 - v g g^T)^-1 = A_u + v / (1 - v g^T A_u g) (A_u g)(A_u g)^T`.
pub fn sherman_morrison_inverse(
    a_u: &DMatrix<f64>,
    g: &DVector<f64>,
    v: f64,
) -> Result<DMatrix<f64>> {
    let a_g = a_u * g;
    let denominator = 1.0 - v * g.dot(&a_g);
    if !(denominator >= SM_DENOMINATOR_MIN) {
        return Err(Error::SingularUpdate {
            symbol: None,
            denominator,
        });
    }
    Ok(a_u + (&a_g * a_g.transpose()) * (v / denominator))
}

/// Mean and covariance of `sum_{j != k} g_j s_j + g_k s_k + w` when the
/// `s_j` are independent with the given moments and `w ~ N(0, noise_var I)`.
pub fn surrogate_moments(
    g: &DMatrix<f64>,
    noise_var: f64,
    moments: &MomentPair,
    k: usize,
    s_k: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = g.nrows();
    let mut mean = g.column(k) * s_k;
    let mut cov = DMatrix::identity(n, n) * noise_var;
    for j in (0..g.ncols()).filter(|&j| j != k) {
        let gj = g.column(j);
        mean.axpy(moments.mean[j], &gj, 1.0);
        cov.ger(moments.var[j], &gj, &gj, 1.0);
    }
    (mean, cov)
}

/// Projected EACS from the per-symbol Gaussian likelihood `N(s; mean, var)`:
/// `theta0[l] = (s_0 - s_l)(s_0 + s_l - 2 mean) / (2 var) + theta[l]`.
fn project_row(alphabet: &Alphabet, mean: f64, var: f64, theta: &mut DMatrix<f64>, k: usize) {
    let s0 = alphabet.point(0);
    for l in 0..theta.ncols() {
        let sl = alphabet.point(l + 1);
        theta[(k, l)] += (s0 - sl) * ((s0 + sl) - 2.0 * mean) / (2.0 * var);
    }
}

/// Approximate m-projection through the Gaussian surrogate.
pub fn approx_projection(
    ctx: &GroupContext<'_>,
    theta_u: &Eacs,
) -> Result<(Eacs, ProjectionWorkspace)> {
    ctx.check(theta_u)?;
    let symbols = ctx.g.ncols();

    let mut moments = marginal_moments(theta_u, ctx.prior, ctx.alphabet)?;
    moments
        .var
        .iter_mut()
        .for_each(|v| *v = v.max(VARIANCE_FLOOR));

    let residual = ctx.y - ctx.g * &moments.mean;
    let mut a = DMatrix::zeros(ctx.g.nrows(), symbols);
    for k in 0..symbols {
        let mut col = a.column_mut(k);
        col.copy_from(&residual);
        col.axpy(moments.mean[k], &ctx.g.column(k), 1.0);
    }

    let (complexity, a_u) = build_a_u(ctx.g, ctx.noise_var, &moments.var)?;
    let a_g = product(&a_u, ctx.g);

    let mut sm_denominators = DVector::zeros(symbols);
    let mut surrogate_mean = DVector::zeros(symbols);
    let mut surrogate_var = DVector::zeros(symbols);
    let mut theta0 = theta_u.theta.clone();
    for k in 0..symbols {
        let v = moments.var[k];
        let g_k = ctx.g.column(k);
        let b = a_g.column(k);
        let gamma = g_k.dot(&b);
        let denominator = 1.0 - v * gamma;
        sm_denominators[k] = denominator;
        if !(denominator >= SM_DENOMINATOR_MIN) {
            return Err(Error::SingularUpdate {
                symbol: Some(k),
                denominator,
            });
        }
        if gamma == 0.0 {
            // the group carries no information about this symbol
            surrogate_var[k] = f64::INFINITY;
            continue;
        }
        // Sherman-Morrison applied to g_k and a_k without forming the matrix:
        // V^-1 x = A x + coef (A g)(A g)^T x
        let coef = v / denominator;
        let b_dot_a = b.dot(&residual) + gamma * moments.mean[k];
        let g_vinv_g = gamma + coef * gamma * gamma;
        let g_vinv_a = b_dot_a + coef * gamma * b_dot_a;
        let var = 1.0 / g_vinv_g;
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::NonPositiveSurrogateVariance {
                symbol: k,
                value: var,
            });
        }
        let mean = var * g_vinv_a;
        surrogate_var[k] = var;
        surrogate_mean[k] = mean;
        project_row(ctx.alphabet, mean, var, &mut theta0, k);
    }

    let workspace = ProjectionWorkspace {
        moments,
        residual,
        a,
        complexity,
        a_u,
        a_g,
        sm_denominators,
        surrogate_mean,
        surrogate_var,
    };
    Ok((Eacs::from_matrix(theta0), workspace))
}

/// Exact m-projection by enumerating all joint states.
pub fn exact_projection(ctx: &GroupContext<'_>, theta_u: &Eacs) -> Result<Eacs> {
    exact_projection_capped(ctx, theta_u, ENUMERATION_CAP)
}

pub fn exact_projection_capped(ctx: &GroupContext<'_>, theta_u: &Eacs, cap: u64) -> Result<Eacs> {
    ctx.check(theta_u)?;
    let natural = &theta_u.theta + &ctx.prior.d;
    let weights = joint_log_weights(ctx.g, ctx.y, ctx.noise_var, &natural, ctx.alphabet, cap)?;
    let symbols = ctx.g.ncols();
    let levels = ctx.alphabet.len();
    let log_m = log_marginals_from_weights(&weights, symbols, levels);
    let log_floor = PROB_FLOOR.ln();
    for k in 0..symbols {
        for l in 0..levels {
            if !(log_m[(k, l)] > log_floor) {
                return Err(Error::ProbabilityUnderflow {
                    symbol: k,
                    level: l,
                    value: log_m[(k, l)].exp(),
                });
            }
        }
    }
    let theta = DMatrix::from_fn(symbols, levels - 1, |k, l| {
        log_m[(k, l + 1)] - log_m[(k, 0)] - ctx.prior.d[(k, l)]
    });
    Ok(Eacs::from_matrix(theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{kl_divergence, theta_to_marginals};
    use crate::system::make_alphabet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Instance {
        y: DVector<f64>,
        g: DMatrix<f64>,
        noise_var: f64,
        alphabet: Alphabet,
        prior: NaturalPrior,
    }

    impl Instance {
        fn random(rng: &mut ChaCha8Rng, rows: usize, symbols: usize, order: usize) -> Self {
            let alphabet = make_alphabet(order).unwrap();
            let l = alphabet.len();
            Self {
                y: DVector::from_fn(rows, |_, _| rng.random_range(-1.5..1.5)),
                g: DMatrix::from_fn(rows, symbols, |_, _| rng.random_range(-1.0..1.0)),
                noise_var: rng.random_range(0.2..1.0),
                prior: NaturalPrior {
                    d: DMatrix::from_fn(symbols, l - 1, |_, _| rng.random_range(-0.5..0.5)),
                },
                alphabet,
            }
        }

        fn ctx(&self) -> GroupContext<'_> {
            GroupContext {
                y: &self.y,
                g: &self.g,
                noise_var: self.noise_var,
                alphabet: &self.alphabet,
                prior: &self.prior,
            }
        }
    }

    fn random_theta(rng: &mut ChaCha8Rng, symbols: usize, levels: usize) -> Eacs {
        Eacs::from_matrix(DMatrix::from_fn(symbols, levels - 1, |_, _| {
            rng.random_range(-1.0..1.0)
        }))
    }

    #[test]
    fn complexity_examples() {
        let e = ComplexityEstimate::new(480, 128);
        assert_eq!((e.p, e.q), (9_961_472, 177_438_720));
        assert_eq!(e.chosen_path, InversePath::DirectInverse);
        let e = ComplexityEstimate::new(2, 100);
        assert_eq!((e.p, e.q), (1_020_000, 20_808));
        assert_eq!(e.chosen_path, InversePath::Woodbury);
    }

    #[test]
    fn path_follows_cost_comparison() {
        // P = Q needs N_u / 2K to be the golden ratio, so integer ties never
        // occur; the crossover sits between consecutive group sizes.
        for m in 1..200u64 {
            for n in 1..200u64 {
                let e = ComplexityEstimate::new(m, n);
                let direct = e.p <= e.q;
                assert_eq!(e.chosen_path == InversePath::DirectInverse, direct);
                let golden = (1.0 + 5f64.sqrt()) / 2.0;
                assert_eq!(direct, (n as f64) < golden * m as f64);
            }
        }
    }

    #[test]
    fn zero_channel_gives_scaled_identity() {
        let g = DMatrix::zeros(3, 4);
        let v = DVector::from_element(4, 0.3);
        let a1 = a_u_direct(&g, 0.5, &v).unwrap();
        let a2 = a_u_woodbury(&g, 0.5, &v).unwrap();
        let expected = DMatrix::identity(3, 3) * 2.0;
        assert!((a1 - &expected).amax() < 1e-15);
        assert!((a2 - &expected).amax() < 1e-15);
    }

    #[test]
    fn paths_agree_and_are_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..10);
            let m = rng.random_range(1..10);
            let g = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
            let v = DVector::from_fn(m, |_, _| rng.random_range(0.01..1.0));
            let s = rng.random_range(0.1..2.0);
            let a1 = a_u_direct(&g, s, &v).unwrap();
            let a2 = a_u_woodbury(&g, s, &v).unwrap();
            assert!((&a1 - &a2).amax() <= 1e-8 * a1.amax());
            assert!((&a1 - a1.transpose()).amax() < 1e-10);
            assert!(Cholesky::new(a1).is_some());
        }
    }

    #[test]
    fn sherman_morrison_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let spd = &b * b.transpose() + DMatrix::identity(4, 4);
        let a = spd.clone().try_inverse().unwrap();
        let g = DVector::from_fn(4, |_, _| rng.random_range(-0.5..0.5));

        assert_eq!(sherman_morrison_inverse(&a, &g, 0.0).unwrap(), a);

        let v = 0.7;
        let downdated = &spd - (&g * g.transpose()) * v;
        let sm = sherman_morrison_inverse(&a, &g, v).unwrap();
        let direct = downdated.clone().try_inverse().unwrap();
        assert!((&sm - direct).amax() < 1e-9);
        assert!((sm * downdated - DMatrix::identity(4, 4)).amax() < 1e-8);
    }

    #[test]
    fn sherman_morrison_rejects_singular_downdate() {
        let a = DMatrix::identity(2, 2);
        let g = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(
            sherman_morrison_inverse(&a, &g, 1.0),
            Err(Error::SingularUpdate { symbol: None, .. })
        ));
    }

    #[test]
    fn collapsed_marginals_leave_noise_only_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inst = Instance::random(&mut rng, 4, 3, 4);
        let theta = Eacs::from_matrix(DMatrix::from_fn(3, 1, |k, _| {
            if k % 2 == 0 {
                80.0
            } else {
                -80.0
            }
        }));
        let (_, ws) = approx_projection(&inst.ctx(), &theta).unwrap();
        assert!(ws.moments.var.iter().all(|&v| v == VARIANCE_FLOOR));
        for k in 0..3 {
            let expected = inst.noise_var / inst.g.column(k).norm_squared();
            assert!((ws.surrogate_var[k] - expected).abs() <= 1e-9 * expected);
        }
    }

    /// Enumerates the other symbols to get the exact mean and covariance of
    /// the mixture seen by symbol `k`.
    fn enumerated_mixture_moments(
        inst: &Instance,
        theta: &Eacs,
        k: usize,
        s_k: f64,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let probs = theta_to_marginals(theta, &inst.prior).unwrap().probs;
        let (n, m) = inst.g.shape();
        let l = inst.alphabet.len();
        let others: Vec<usize> = (0..m).filter(|&j| j != k).collect();
        let states = l.pow(others.len() as u32);
        let mut mean = DVector::zeros(n);
        let mut second = DMatrix::zeros(n, n);
        for idx in 0..states {
            let mut rem = idx;
            let mut p = 1.0;
            let mut x = inst.g.column(k) * s_k;
            for &j in &others {
                let level = rem % l;
                rem /= l;
                p *= probs[(j, level)];
                x += inst.g.column(j) * inst.alphabet.point(level);
            }
            mean += &x * p;
            second += (&x * x.transpose()) * p;
        }
        let cov = second - &mean * mean.transpose() + DMatrix::identity(n, n) * inst.noise_var;
        (mean, cov)
    }

    #[test]
    fn surrogate_moments_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let rows = rng.random_range(1..=4);
            let symbols = rng.random_range(1..=4);
            let order = if rng.random_bool(0.5) { 4 } else { 16 };
            let inst = Instance::random(&mut rng, rows, symbols, order);
            let theta = random_theta(&mut rng, symbols, inst.alphabet.len());
            let moments = marginal_moments(&theta, &inst.prior, &inst.alphabet).unwrap();
            for k in 0..symbols {
                for &s_k in inst.alphabet.points() {
                    let (m1, c1) = surrogate_moments(&inst.g, inst.noise_var, &moments, k, s_k);
                    let (m2, c2) = enumerated_mixture_moments(&inst, &theta, k, s_k);
                    assert!((m1 - m2).amax() < 1e-10);
                    assert!((c1 - c2).amax() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn workspace_inverse_matches_surrogate_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let inst = Instance::random(&mut rng, 4, 3, 16);
        let theta = random_theta(&mut rng, 3, 4);
        let (_, ws) = approx_projection(&inst.ctx(), &theta).unwrap();
        for k in 0..3 {
            let (_, cov) = surrogate_moments(&inst.g, inst.noise_var, &ws.moments, k, 0.0);
            let g_k = inst.g.column(k).into_owned();
            let sm = sherman_morrison_inverse(&ws.a_u, &g_k, ws.moments.var[k]).unwrap();
            assert!((sm * cov - DMatrix::identity(4, 4)).amax() < 1e-10);
        }
    }

    /// Evaluates the per-symbol Gaussian surrogate directly: invert the
    /// covariance explicitly, score every level, normalize.
    fn surrogate_probabilities(inst: &Instance, theta: &Eacs, k: usize) -> Vec<f64> {
        let moments = marginal_moments(theta, &inst.prior, &inst.alphabet).unwrap();
        let (_, cov) = surrogate_moments(&inst.g, inst.noise_var, &moments, k, 0.0);
        let vinv = cov.try_inverse().unwrap();
        let g_k = inst.g.column(k).into_owned();
        let mut a_k = inst.y.clone();
        for j in (0..inst.g.ncols()).filter(|&j| j != k) {
            a_k -= inst.g.column(j) * moments.mean[j];
        }
        let quad = g_k.dot(&(&vinv * &g_k));
        let center = g_k.dot(&(&vinv * &a_k)) / quad;
        let logits: Vec<f64> = (0..inst.alphabet.len())
            .map(|l| {
                let prior = if l == 0 {
                    0.0
                } else {
                    inst.prior.d[(k, l - 1)] + theta.theta[(k, l - 1)]
                };
                prior - quad / 2.0 * (inst.alphabet.point(l) - center).powi(2)
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }

    #[test]
    fn projected_eacs_reproduces_surrogate_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..40 {
            let rows = rng.random_range(1..=6);
            let symbols = rng.random_range(1..=5);
            let order = [4, 16, 64][rng.random_range(0..3)];
            let inst = Instance::random(&mut rng, rows, symbols, order);
            let theta = random_theta(&mut rng, symbols, inst.alphabet.len());
            let (theta0, _) = approx_projection(&inst.ctx(), &theta).unwrap();
            let m = theta_to_marginals(&theta0, &inst.prior).unwrap();
            for k in 0..symbols {
                let expected = surrogate_probabilities(&inst, &theta, k);
                for (l, e) in expected.iter().enumerate() {
                    assert!((m.probs[(k, l)] - e).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn single_row_group_matches_scalar_derivation() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..20 {
            let inst = Instance::random(&mut rng, 1, 4, 16);
            let theta = random_theta(&mut rng, 4, 4);
            let (theta0, ws) = approx_projection(&inst.ctx(), &theta).unwrap();
            let g = inst.g.row(0);
            let v = &ws.moments.var;
            let mu = &ws.moments.mean;
            for k in 0..4 {
                let var_y: f64 = (0..4)
                    .filter(|&j| j != k)
                    .map(|j| v[j] * g[j] * g[j])
                    .sum::<f64>()
                    + inst.noise_var;
                let a: f64 = inst.y[0]
                    - (0..4)
                        .filter(|&j| j != k)
                        .map(|j| g[j] * mu[j])
                        .sum::<f64>();
                let var = var_y / (g[k] * g[k]);
                let mean = a / g[k];
                assert!((ws.surrogate_var[k] - var).abs() < 1e-10 * var);
                assert!((ws.surrogate_mean[k] - mean).abs() < 1e-10 * (1.0 + mean.abs()));
                let s0 = inst.alphabet.point(0);
                for l in 1..4 {
                    let sl = inst.alphabet.point(l);
                    let expected =
                        (s0 - sl) * (s0 + sl - 2.0 * mean) / (2.0 * var) + theta.theta[(k, l - 1)];
                    assert!((theta0.theta[(k, l - 1)] - expected).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn symbol_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let inst = Instance::random(&mut rng, 5, 6, 16);
        let theta = random_theta(&mut rng, 6, 4);
        let (theta0, _) = approx_projection(&inst.ctx(), &theta).unwrap();
        let perm = [3usize, 5, 0, 1, 4, 2];
        let shuffled = Instance {
            y: inst.y.clone(),
            g: DMatrix::from_fn(5, 6, |i, j| inst.g[(i, perm[j])]),
            noise_var: inst.noise_var,
            alphabet: inst.alphabet.clone(),
            prior: NaturalPrior {
                d: DMatrix::from_fn(6, 3, |k, l| inst.prior.d[(perm[k], l)]),
            },
        };
        let theta_s = Eacs::from_matrix(DMatrix::from_fn(6, 3, |k, l| theta.theta[(perm[k], l)]));
        let (theta0_s, _) = approx_projection(&shuffled.ctx(), &theta_s).unwrap();
        for k in 0..6 {
            assert!((theta0_s.theta.row(k) - theta0.theta.row(perm[k])).amax() < 1e-10);
        }
    }

    #[test]
    fn zero_column_leaves_symbol_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut inst = Instance::random(&mut rng, 3, 3, 4);
        inst.g.column_mut(1).fill(0.0);
        let theta = random_theta(&mut rng, 3, 2);
        let (theta0, ws) = approx_projection(&inst.ctx(), &theta).unwrap();
        assert_eq!(theta0.theta.row(1), theta.theta.row(1));
        assert!(ws.surrogate_var[1].is_infinite());
    }

    #[test]
    fn workspace_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let inst = Instance::random(&mut rng, 6, 4, 16);
        let theta = random_theta(&mut rng, 4, 4);
        let (_, ws) = approx_projection(&inst.ctx(), &theta).unwrap();
        assert!((&ws.a_u - ws.a_u.transpose()).amax() < 1e-10);
        assert!(ws.surrogate_var.iter().all(|&v| v > 0.0));
        assert!(ws.moments.var.iter().all(|&v| v >= VARIANCE_FLOOR));
        for k in 0..4 {
            let expected = &ws.residual + inst.g.column(k) * ws.moments.mean[k];
            assert!((ws.a.column(k) - expected).amax() < 1e-14);
        }
    }

    #[test]
    fn exact_projection_uninformative_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let mut inst = Instance::random(&mut rng, 3, 3, 16);
        inst.noise_var = 1e14;
        let theta = random_theta(&mut rng, 3, 4);
        let theta0 = exact_projection(&inst.ctx(), &theta).unwrap();
        assert!(theta0.sup_distance(&theta) < 1e-6);
    }

    #[test]
    fn exact_projection_minimizes_kl_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..3 {
            let inst = Instance::random(&mut rng, 3, 2, 4);
            let theta = random_theta(&mut rng, 2, 2);
            let theta0 = exact_projection(&inst.ctx(), &theta).unwrap();

            // joint of the auxiliary distribution, lexicographic order
            let natural = &theta.theta + &inst.prior.d;
            let w = joint_log_weights(
                &inst.g,
                &inst.y,
                inst.noise_var,
                &natural,
                &inst.alphabet,
                16,
            )
            .unwrap();
            let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = w.iter().map(|x| (x - max).exp()).sum();
            let p: Vec<f64> = w.iter().map(|x| (x - max).exp() / z).collect();

            let kl_at = |t0: f64, t1: f64| {
                let m = theta_to_marginals(
                    &Eacs::from_matrix(DMatrix::from_row_slice(2, 1, &[t0, t1])),
                    &inst.prior,
                )
                .unwrap()
                .probs;
                let q = [
                    m[(0, 0)] * m[(1, 0)],
                    m[(0, 0)] * m[(1, 1)],
                    m[(0, 1)] * m[(1, 0)],
                    m[(0, 1)] * m[(1, 1)],
                ];
                kl_divergence(&p, &q).unwrap()
            };
            let mut best = (f64::INFINITY, 0.0, 0.0);
            let center = (theta0.theta[(0, 0)], theta0.theta[(1, 0)]);
            for i in -40..=40 {
                for j in -40..=40 {
                    let t = (center.0 + 0.05 * i as f64, center.1 + 0.05 * j as f64);
                    let kl = kl_at(t.0, t.1);
                    if kl < best.0 {
                        best = (kl, t.0, t.1);
                    }
                }
            }
            assert!((best.1 - center.0).abs() < 0.05 / 2.0 + 1e-12);
            assert!((best.2 - center.1).abs() < 0.05 / 2.0 + 1e-12);
            assert!(kl_at(center.0, center.1) <= best.0);
        }
    }

    #[test]
    fn exact_projection_reports_underflow() {
        let alphabet = make_alphabet(4).unwrap();
        let prior = NaturalPrior::zeros(1, 2);
        let y = DVector::from_element(1, 100.0);
        let g = DMatrix::from_element(1, 1, 100.0);
        let ctx = GroupContext {
            y: &y,
            g: &g,
            noise_var: 1e-3,
            alphabet: &alphabet,
            prior: &prior,
        };
        assert!(matches!(
            exact_projection(&ctx, &Eacs::zeros(1, 2)),
            Err(Error::ProbabilityUnderflow {
                symbol: 0,
                level: 0,
                ..
            })
        ));
    }
}
