use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::projection::{ComplexityEstimate, InversePath};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexityRow {
    pub groups: u64,
    pub group_size: u64,
    pub p: u64,
    pub q: u64,
    pub path: InversePath,
    /// Real multiplications per iteration.
    pub c_u: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplexityReport {
    pub users: u64,
    pub antennas: u64,
    pub levels: u64,
    pub rows: Vec<ComplexityRow>,
}

impl ComplexityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("U,N_u,P,Q,path,C_U\n");
        for r in &self.rows {
            let path = match r.path {
                InversePath::DirectInverse => "direct",
                InversePath::Woodbury => "woodbury",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.groups, r.group_size, r.p, r.q, path, r.c_u
            );
        }
        out
    }

    /// Row with the smallest `C_U`; the first one on ties.
    pub fn argmin(&self) -> Option<&ComplexityRow> {
        self.rows
            .iter()
            .reduce(|best, r| if r.c_u < best.c_u { r } else { best })
    }
}

fn overflow() -> Error {
    Error::InvalidConfig("cost model overflows 64-bit integers".into())
}

/// Per-iteration cost
/// `C_U = U min(P, Q) + 12 K N_r N_u + 4 K U L` with `N_u = 2 N_r / U`,
/// evaluated in exact integer arithmetic.
pub fn complexity_table(
    users: u64,
    antennas: u64,
    levels: u64,
    groups: &[u64],
) -> Result<ComplexityReport> {
    if users == 0 || antennas == 0 || levels < 2 {
        return Err(Error::InvalidConfig(format!(
            "need K >= 1, N_r >= 1, L >= 2; got {users}, {antennas}, {levels}"
        )));
    }
    let rows_total = antennas.checked_mul(2).ok_or_else(overflow)?;
    let symbols = users.checked_mul(2).ok_or_else(overflow)?;
    // keeps every intermediate of the P and Q formulas inside u64
    if rows_total > 1 << 20 || symbols > 1 << 20 {
        return Err(overflow());
    }
    let mut rows = Vec::with_capacity(groups.len());
    for &u in groups {
        if u == 0 || rows_total % u != 0 {
            return Err(Error::InvalidGrouping {
                groups: u as usize,
                rows: rows_total as usize,
            });
        }
        let n_u = rows_total / u;
        let est = ComplexityEstimate::new(symbols, n_u);
        let c_u = (|| {
            let projection = u.checked_mul(est.min_cost())?;
            let statistics = 12u64
                .checked_mul(users)?
                .checked_mul(antennas)?
                .checked_mul(n_u)?;
            let marginals = 4u64
                .checked_mul(users)?
                .checked_mul(u)?
                .checked_mul(levels)?;
            projection.checked_add(statistics)?.checked_add(marginals)
        })()
        .ok_or_else(overflow)?;
        rows.push(ComplexityRow {
            groups: u,
            group_size: n_u,
            p: est.p,
            q: est.q,
            path: est.chosen_path,
            c_u,
        });
    }
    Ok(ComplexityReport {
        users,
        antennas,
        levels,
        rows,
    })
}
