//! Linear MMSE equalizer followed by per-component nearest-point slicing.

use nalgebra::{Cholesky, DVector};
use num_complex::Complex64;

use crate::detector::assemble_complex;
use crate::error::{Error, Result};
use crate::system::RealSystem;

#[derive(Debug, Clone, PartialEq)]
pub struct LmmseResult {
    /// `(G^T G + noise_var I)^-1 G^T y`.
    pub soft: DVector<f64>,
    pub decision_indices: Vec<usize>,
    pub real_decisions: Vec<f64>,
    pub complex_decisions: Vec<Complex64>,
}

/// Solves the normal equations through a Cholesky factorization and slices
/// each component to the nearest alphabet point.
pub fn lmmse_detect(sys: &RealSystem) -> Result<LmmseResult> {
    let g = &sys.g;
    let mut normal = g.transpose() * g;
    for i in 0..normal.nrows() {
        normal[(i, i)] += sys.noise_var;
    }
    let rhs = g.transpose() * &sys.y;
    let soft = Cholesky::new(normal)
        .ok_or_else(|| Error::Factorization("LMMSE normal matrix is not positive definite".into()))?
        .solve(&rhs);
    if soft.iter().any(|x| !x.is_finite()) {
        return Err(Error::Factorization(
            "LMMSE solve produced non-finite values".into(),
        ));
    }
    let decision_indices: Vec<usize> = soft
        .iter()
        .map(|&x| sys.alphabet.nearest_index(x))
        .collect();
    let real_decisions: Vec<f64> = decision_indices
        .iter()
        .map(|&i| sys.alphabet.point(i))
        .collect();
    let complex_decisions = assemble_complex(&real_decisions)?;
    Ok(LmmseResult {
        soft,
        decision_indices,
        real_decisions,
        complex_decisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{make_alphabet, NaturalPrior};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_channel_halves_the_observation() {
        let alphabet = make_alphabet(16).unwrap();
        let s: Vec<f64> = [0, 3, 1, 2].iter().map(|&i| alphabet.point(i)).collect();
        let y = DVector::from_vec(s.clone());
        let sys = RealSystem::new(
            DMatrix::identity(4, 4),
            y,
            1.0,
            alphabet.clone(),
            NaturalPrior::zeros(4, 4),
        )
        .unwrap();
        let out = lmmse_detect(&sys).unwrap();
        for (k, &x) in s.iter().enumerate() {
            assert!((out.soft[k] - x / 2.0).abs() < 1e-15);
            assert_eq!(
                out.real_decisions[k],
                alphabet.point(alphabet.nearest_index(x / 2.0))
            );
        }
        assert_eq!(out.complex_decisions.len(), 2);
    }

    #[test]
    fn noiseless_orthonormal_channel_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let alphabet = make_alphabet(64).unwrap();
        let raw = DMatrix::from_fn(12, 6, |_, _| rng.random_range(-1.0..1.0));
        let q = raw.qr().q();
        let idx: Vec<usize> = (0..6)
            .map(|_| rng.random_range(0..alphabet.len()))
            .collect();
        let s = DVector::from_iterator(6, idx.iter().map(|&i| alphabet.point(i)));
        let y = &q * &s;
        let sys = RealSystem::new(q, y, 1e-14, alphabet, NaturalPrior::zeros(6, 8)).unwrap();
        let out = lmmse_detect(&sys).unwrap();
        assert!((&out.soft - &s).amax() < 1e-10);
        assert_eq!(out.decision_indices, idx);
    }

    #[test]
    fn solve_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let alphabet = make_alphabet(4).unwrap();
            let g = DMatrix::from_fn(8, 4, |_, _| rng.random_range(-1.0..1.0));
            let y = DVector::from_fn(8, |_, _| rng.random_range(-2.0..2.0));
            let noise_var = rng.random_range(0.05..2.0);
            let sys = RealSystem::new(
                g.clone(),
                y.clone(),
                noise_var,
                alphabet,
                NaturalPrior::zeros(4, 2),
            )
            .unwrap();
            let out = lmmse_detect(&sys).unwrap();
            let inv = (g.transpose() * &g + DMatrix::identity(4, 4) * noise_var)
                .try_inverse()
                .unwrap();
            let oracle = inv * g.transpose() * y;
            assert!((&out.soft - oracle).amax() < 1e-10);
        }
    }

    #[test]
    fn non_finite_channel_is_a_factorization_error() {
        let alphabet = make_alphabet(4).unwrap();
        let g = DMatrix::from_element(2, 2, f64::NAN);
        let sys = RealSystem::new(
            g,
            DVector::zeros(2),
            1.0,
            alphabet,
            NaturalPrior::zeros(2, 2),
        )
        .unwrap();
        assert!(matches!(lmmse_detect(&sys), Err(Error::Factorization(_))));
    }

    #[test]
    fn midpoint_ties_go_to_the_lower_point() {
        let alphabet = make_alphabet(4).unwrap();
        let sys = RealSystem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            1.0,
            alphabet,
            NaturalPrior::zeros(2, 2),
        )
        .unwrap();
        let out = lmmse_detect(&sys).unwrap();
        assert_eq!(out.decision_indices, vec![0, 0]);
    }
}
