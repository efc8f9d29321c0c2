//! Text format for externally generated channel matrices.
//!
//! ```text
//! nr=2 k=1
//! 0 0 0.5 -0.25
//! 1 0 1.0 0.0
//! ```
//!
//! The header is followed by exactly `nr * k` entry lines `row col re im`.
//! Indices are zero-based and entries must appear in row-major order, so a
//! duplicate, a gap or a reordering is reported at the offending line.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Upper bound on `nr * k` accepted from a header.
pub const MAX_ENTRIES: usize = 1 << 24;

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::ChannelFile {
        line,
        msg: msg.into(),
    }
}

fn parse_dim(token: Option<&str>, key: &str) -> Result<usize> {
    let token = token.ok_or_else(|| err(1, format!("missing `{key}=` field")))?;
    let value = token
        .strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| err(1, format!("expected `{key}=<n>`, found `{token}`")))?;
    let n: usize = value
        .parse()
        .map_err(|_| err(1, format!("`{value}` is not a valid {key}")))?;
    if n == 0 {
        return Err(err(1, format!("{key} must be positive")));
    }
    Ok(n)
}

fn parse_f64(token: &str, line: usize) -> Result<f64> {
    let x: f64 = token
        .parse()
        .map_err(|_| err(line, format!("`{token}` is not a number")))?;
    if !x.is_finite() {
        return Err(err(line, format!("non-finite value `{token}`")));
    }
    Ok(x)
}

fn parse_index(token: &str, line: usize) -> Result<usize> {
    token
        .parse()
        .map_err(|_| err(line, format!("`{token}` is not an index")))
}

/// Parses a channel file into an `nr x k` complex matrix.
pub fn parse_channel(text: &str) -> Result<DMatrix<Complex64>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file"))?;
    let mut fields = header.split_whitespace();
    let nr = parse_dim(fields.next(), "nr")?;
    let k = parse_dim(fields.next(), "k")?;
    if let Some(extra) = fields.next() {
        return Err(err(1, format!("unexpected header field `{extra}`")));
    }
    let total = nr
        .checked_mul(k)
        .filter(|&t| t <= MAX_ENTRIES)
        .ok_or_else(|| err(1, format!("{nr}x{k} exceeds {MAX_ENTRIES} entries")))?;

    let mut entries = Vec::with_capacity(total);
    for (lineno, line) in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(err(lineno, "blank line"));
        }
        if tokens.len() != 4 {
            return Err(err(
                lineno,
                format!("expected `row col re im`, found {} fields", tokens.len()),
            ));
        }
        let row = parse_index(tokens[0], lineno)?;
        let col = parse_index(tokens[1], lineno)?;
        if row >= nr || col >= k {
            return Err(err(
                lineno,
                format!("entry ({row}, {col}) outside {nr}x{k}"),
            ));
        }
        let pos = row * k + col;
        let expected = entries.len();
        if pos < expected {
            return Err(err(
                lineno,
                format!("duplicate or out-of-order entry ({row}, {col})"),
            ));
        }
        if pos > expected {
            return Err(err(
                lineno,
                format!("missing entry ({}, {})", expected / k, expected % k),
            ));
        }
        entries.push(Complex64::new(
            parse_f64(tokens[2], lineno)?,
            parse_f64(tokens[3], lineno)?,
        ));
    }
    if entries.len() != total {
        let next = entries.len();
        return Err(err(
            next + 2,
            format!("missing entry ({}, {})", next / k, next % k),
        ));
    }
    Ok(DMatrix::from_row_slice(nr, k, &entries))
}

/// Serializes a channel in the format accepted by [`parse_channel`].
/// Values use the shortest representation that round-trips exactly.
pub fn write_channel(channel: &DMatrix<Complex64>) -> String {
    let (nr, k) = channel.shape();
    let mut out = format!("nr={nr} k={k}\n");
    for r in 0..nr {
        for c in 0..k {
            let z = channel[(r, c)];
            let _ = writeln!(out, "{r} {c} {:?} {:?}", z.re, z.im);
        }
    }
    out
}

/// Scales every column to unit Euclidean norm. Zero columns are left as is.
pub fn normalize_columns(channel: &mut DMatrix<Complex64>) {
    for mut col in channel.column_iter_mut() {
        let norm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm > 0.0 {
            col.iter_mut().for_each(|z| *z /= norm);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_small_file() {
        let g = parse_channel("nr=2 k=1\n0 0 0.5 -0.25\n1 0 1 0\n").unwrap();
        assert_eq!(g.shape(), (2, 1));
        assert_eq!(g[(0, 0)], Complex64::new(0.5, -0.25));
        assert_eq!(g[(1, 0)], Complex64::new(1.0, 0.0));
    }

    fn line_of(text: &str) -> usize {
        match parse_channel(text) {
            Err(Error::ChannelFile { line, .. }) => line,
            other => panic!("expected a channel file error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_input() {
        assert_eq!(line_of(""), 1);
        assert_eq!(line_of("k=1 nr=1\n0 0 1 1\n"), 1);
        assert_eq!(line_of("nr=0 k=1\n"), 1);
        assert_eq!(line_of("nr=1 k=1 x=2\n0 0 1 1\n"), 1);
        // duplicate
        assert_eq!(line_of("nr=1 k=2\n0 0 1 1\n0 0 1 1\n"), 3);
        // gap
        assert_eq!(line_of("nr=2 k=1\n1 0 1 1\n"), 2);
        // missing at the end
        assert_eq!(line_of("nr=2 k=1\n0 0 1 1\n"), 3);
        // out of range, wrong arity, junk, non-finite, trailing extra entry
        assert_eq!(line_of("nr=1 k=1\n0 1 1 1\n"), 2);
        assert_eq!(line_of("nr=1 k=1\n0 0 1\n"), 2);
        assert_eq!(line_of("nr=1 k=1\n0 0 x 1\n"), 2);
        assert_eq!(line_of("nr=1 k=1\n0 0 inf 1\n"), 2);
        assert_eq!(line_of("nr=1 k=1\n0 0 1 1\n0 0 1 1\n"), 3);
        assert_eq!(line_of("nr=1 k=1\n\n0 0 1 1\n"), 2);
        assert_eq!(line_of("nr=99999999 k=99999999\n"), 1);
    }

    #[test]
    fn normalizes_columns() {
        let mut g = DMatrix::from_row_slice(
            2,
            2,
            &[
                Complex64::new(3.0, 0.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, 4.0),
                Complex64::new(0.0, 0.0),
            ],
        );
        normalize_columns(&mut g);
        assert!((g[(0, 0)].re - 0.6).abs() < 1e-15);
        assert!((g[(1, 0)].im - 0.8).abs() < 1e-15);
        assert_eq!(g[(0, 1)], Complex64::new(0.0, 0.0));
    }

    proptest! {
        #[test]
        fn write_then_parse_is_identity(
            nr in 1usize..6,
            k in 1usize..4,
            seed in proptest::collection::vec(-1e3f64..1e3, 48),
        ) {
            let g = DMatrix::from_fn(nr, k, |r, c| {
                Complex64::new(seed[2 * (r * k + c)], seed[2 * (r * k + c) + 1])
            });
            prop_assert_eq!(parse_channel(&write_channel(&g)).unwrap(), g);
        }

        #[test]
        fn arbitrary_text_never_panics(text in "\\PC{0,200}") {
            let _ = parse_channel(&text);
        }
    }
}
