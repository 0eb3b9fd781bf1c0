//! Statistical procedures used by the empirical and simulation reports.
//!
//! Two-sided tests throughout. Reported p-values are floored at
//! [`P_VALUE_FLOOR`]; the unfloored value is kept next to it.

mod anova;
mod hypothesis;
mod regression;

pub use anova::{cell_demeaned_anova, AnovaFactors, AnovaTable, AnovaTerm};
pub use hypothesis::{
    two_sample_proportion_test, welch_t, wilcoxon_rank_sum, wilcoxon_rank_sum_with, WilcoxonMethod,
};
pub use regression::{
    block_demeaned_regression, component_regression, magnitude_regression, ols,
    residualize_within_slice, RegressionFit, SliceFit, SliceRegressions, TermSummary,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest reported p-value.
pub const P_VALUE_FLOOR: f64 = 2.2e-16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("all pooled values are identical")]
    DegenerateSample,
    #[error("zero variance")]
    ZeroVariance,
    #[error("pooled proportion is 0 or 1")]
    DegenerateProportions,
    #[error("design is rank deficient: {0}")]
    RankDeficient(String),
    #[error("slice {0} has fewer than 3 observations")]
    SliceTooSmall(String),
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("input lengths differ")]
    LengthMismatch,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("reference group {0:?} not present")]
    UnknownGroup(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    /// Floored at [`P_VALUE_FLOOR`].
    pub p_value: f64,
    pub p_value_raw: f64,
    pub method: String,
    /// Point estimate the interval refers to, when the test has one.
    pub estimate: Option<f64>,
    pub effect_ci: Option<(f64, f64)>,
    pub df: Option<f64>,
}

pub(crate) fn floor_p(p: f64) -> f64 {
    p.clamp(0.0, 1.0).max(P_VALUE_FLOOR)
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with `n − 1` denominator.
pub(crate) fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

fn is_constant(x: &[f64]) -> bool {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let scale = lo.abs().max(hi.abs());
    hi - lo <= 1e-12 * scale || hi == lo
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch);
    }
    if x.len() < 2 {
        return Err(StatsError::TooFewObservations {
            needed: 2,
            got: x.len(),
        });
    }
    if is_constant(x) || is_constant(y) {
        return Err(StatsError::ZeroVariance);
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Mid-ranks (1-based); tied values share the average of their positions.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + (j + 1)) as f64;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Sizes of the tie groups in `x` (singletons included).
pub(crate) fn tie_sizes(x: &[f64]) -> Vec<usize> {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j + 1 < s.len() && s[j + 1] == s[i] {
            j += 1;
        }
        out.push(j - i + 1);
        i = j + 1;
    }
    out
}

/// Pearson correlation of mid-ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch);
    }
    if x.len() < 3 {
        return Err(StatsError::TooFewObservations {
            needed: 3,
            got: x.len(),
        });
    }
    pearson(&midranks(x), &midranks(y))
}

/// Spearman correlation with a t-approximation p-value on `n − 2` df.
pub fn spearman_test(x: &[f64], y: &[f64]) -> Result<TestResult, StatsError> {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let r = spearman(x, y)?;
    let df = (x.len() - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        2.0 * dist.sf(t.abs())
    };
    Ok(TestResult {
        statistic: r,
        p_value: floor_p(p),
        p_value_raw: p,
        method: "spearman (t approximation)".into(),
        estimate: Some(r),
        effect_ci: None,
        df: Some(df),
    })
}

/// Benjamini–Hochberg adjusted p-values, returned in input order.
pub fn bh_fdr(pvals: &[f64]) -> Result<Vec<f64>, StatsError> {
    if let Some(p) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::InvalidInput(format!("p-value {p} outside [0, 1]")));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]));
    let mut adj = vec![0.0; m];
    let mut running = 1.0f64;
    for (pos, &i) in order.iter().enumerate().rev() {
        let v = pvals[i] * m as f64 / (pos + 1) as f64;
        running = running.min(v);
        adj[i] = running.min(1.0);
    }
    Ok(adj)
}
