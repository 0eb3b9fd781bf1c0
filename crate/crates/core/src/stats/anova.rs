//! Sequential F-tests on a cell-demeaned factorial design.
//!
//! A random intercept per cell is approximated by demeaning the outcome and
//! every model column within the cell, i.e. by cell fixed effects. Terms that
//! are constant within every cell are absorbed and reported without a test.

use std::hash::Hash;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use super::regression::{demean, group_index};
use super::{floor_p, StatsError};

pub const ANOVA_LABEL: &str = "fixed-effects approximation (cell-demeaned, sequential F)";

const FACTOR_NAMES: [&str; 4] = ["structure", "a", "lambda_gen", "log10_n"];

/// Numeric codings of the four design factors, one entry per replicate.
/// `structure` is 0 for broad–weak and 1 for sink.
#[derive(Clone, Copy, Debug)]
pub struct AnovaFactors<'a> {
    pub structure: &'a [f64],
    pub a: &'a [f64],
    pub lambda_gen: &'a [f64],
    pub log10_n: &'a [f64],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnovaTerm {
    pub term: String,
    pub df: usize,
    pub sum_sq: f64,
    pub f: Option<f64>,
    pub p_value: Option<f64>,
    pub p_value_raw: Option<f64>,
    pub absorbed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnovaTable {
    pub terms: Vec<AnovaTerm>,
    pub df_resid: f64,
    pub rss: f64,
    pub n: usize,
    pub n_cells: usize,
    pub label: String,
}

impl AnovaTable {
    pub fn term(&self, name: &str) -> Option<&AnovaTerm> {
        self.terms.iter().find(|t| t.term == name)
    }
}

/// Full factorial `structure × a × lambda_gen × log10_n`, terms entered in
/// the usual order (main effects, then two-way, three-way, four-way).
pub fn cell_demeaned_anova<C: Eq + Hash + Clone>(
    y: &[f64],
    factors: AnovaFactors<'_>,
    cells: &[C],
) -> Result<AnovaTable, StatsError> {
    let n = y.len();
    let cols = [factors.structure, factors.a, factors.lambda_gen, factors.log10_n];
    if cells.len() != n || cols.iter().any(|c| c.len() != n) {
        return Err(StatsError::LengthMismatch);
    }
    if y.iter().chain(cols.iter().flat_map(|c| c.iter())).any(|v| !v.is_finite()) {
        return Err(StatsError::InvalidInput("non-finite value in design".into()));
    }
    let (cidx, clist) = group_index(cells);
    let nc = clist.len();
    let mut sizes = vec![0usize; nc];
    cidx.iter().for_each(|&c| sizes[c] += 1);
    if sizes.iter().any(|&s| s < 2) {
        return Err(StatsError::RankDeficient("every cell needs at least 2 replicates".into()));
    }

    let mut masks: Vec<u32> = (1u32..16).collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));

    let yd = demean(y, &cidx, nc);
    let y_ss: f64 = yd.iter().map(|v| v * v).sum();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut raw_terms = Vec::new();
    for mask in masks {
        let name = (0..4)
            .filter(|b| mask >> b & 1 == 1)
            .map(|b| FACTOR_NAMES[b])
            .collect::<Vec<_>>()
            .join(":");
        let raw: Vec<f64> = (0..n)
            .map(|i| (0..4).filter(|b| mask >> b & 1 == 1).map(|b| cols[b][i]).product())
            .collect();
        let raw_norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut r = demean(&raw, &cidx, nc);
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = r.iter().zip(b).map(|(u, v)| u * v).sum();
                r.iter_mut().zip(b).for_each(|(u, v)| *u -= d * v);
            }
        }
        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if raw_norm == 0.0 || rn <= 1e-9 * raw_norm {
            raw_terms.push((name, None));
            continue;
        }
        r.iter_mut().for_each(|u| *u /= rn);
        let proj: f64 = r.iter().zip(&yd).map(|(u, v)| u * v).sum();
        basis.push(r);
        raw_terms.push((name, Some(proj * proj)));
    }

    let p = basis.len();
    let df_resid = n as f64 - nc as f64 - p as f64;
    if df_resid < 1.0 {
        return Err(StatsError::TooFewObservations {
            needed: nc + p + 1,
            got: n,
        });
    }
    let explained: f64 = raw_terms.iter().filter_map(|(_, s)| *s).sum();
    let rss = (y_ss - explained).max(0.0);
    let exact_fit = rss <= 1e-24 * y_ss.max(f64::MIN_POSITIVE);
    let fdist = FisherSnedecor::new(1.0, df_resid).expect("df > 0");
    let mse = rss / df_resid;

    let terms = raw_terms
        .into_iter()
        .map(|(term, ss)| match ss {
            None => AnovaTerm {
                term,
                df: 0,
                sum_sq: 0.0,
                f: None,
                p_value: None,
                p_value_raw: None,
                absorbed: true,
            },
            Some(ss) => {
                let (f, pr) = if exact_fit {
                    if ss > 0.0 {
                        (f64::INFINITY, 0.0)
                    } else {
                        (0.0, 1.0)
                    }
                } else {
                    let f = ss / mse;
                    (f, fdist.sf(f))
                };
                AnovaTerm {
                    term,
                    df: 1,
                    sum_sq: ss,
                    f: Some(f),
                    p_value: Some(floor_p(pr)),
                    p_value_raw: Some(pr),
                    absorbed: false,
                }
            }
        })
        .collect();
    Ok(AnovaTable {
        terms,
        df_resid,
        rss,
        n,
        n_cells: nc,
        label: ANOVA_LABEL.into(),
    })
}
