#![no_main]

//! Decodes a tiny real system from raw bytes and runs both detectors.
//! Errors are fine; panics and non-normalized marginals are not.

use giga::detector::{run_giga, GigaConfig};
use giga::lmmse::lmmse_detect;
use giga::system::{make_alphabet, NaturalPrior, RealSystem};
use libfuzzer_sys::fuzz_target;
use nalgebra::{DMatrix, DVector};

fuzz_target!(|data: &[u8]| {
    let [shape, groups, iters, rest @ ..] = data else {
        return;
    };
    let rows = 2 * (1 + (shape & 3) as usize);
    let cols = 2 * (1 + ((shape >> 2) & 1) as usize);
    let mod_order = if shape & 0x10 == 0 { 4 } else { 16 };
    let mut vals = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut next = || vals.next().unwrap_or(0.5);
    let g = DMatrix::from_fn(rows, cols, |_, _| next());
    let y = DVector::from_fn(rows, |_, _| next());
    let noise_var = next();
    let alphabet = make_alphabet(mod_order).unwrap();
    let prior = NaturalPrior::zeros(cols, alphabet.len());
    let Ok(sys) = RealSystem::new(g, y, noise_var, alphabet, prior) else {
        return;
    };

    let _ = lmmse_detect(&sys);
    let divisors: Vec<usize> = (1..=rows).filter(|u| rows.is_multiple_of(*u)).collect();
    let mut cfg = GigaConfig::new(divisors[*groups as usize % divisors.len()]);
    cfg.max_iters = 1 + (*iters as usize % 8);
    cfg.parallel = false;
    if let Ok((res, _)) = run_giga(&sys, &cfg) {
        for r in res.marginals.probs.row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-9, "row sums to {}", r.sum());
        }
    }
});
