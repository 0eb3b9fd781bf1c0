//! Least squares with within-group demeaning.
//!
//! Fixed effects for blocks (or cells) are handled by demeaning every column
//! within its group before fitting, which gives the same slopes as including
//! one indicator per group. The residual degrees of freedom are charged for
//! the absorbed group means.

use std::collections::HashMap;
use std::hash::Hash;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{bh_fdr, floor_p, StatsError};

/// A column is aliased when its residual after projecting out earlier
/// columns is below this fraction of its raw norm.
const ALIAS_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub terms: Vec<String>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    /// Floored at the reporting floor.
    pub p_values: Vec<f64>,
    pub p_values_raw: Vec<f64>,
    pub n: usize,
    pub df_resid: f64,
    pub rss: f64,
    pub scheme: String,
    /// Terms dropped because demeaning left them aliased.
    pub absorbed: Vec<String>,
}

impl RegressionFit {
    pub fn index(&self, term: &str) -> Option<usize> {
        self.terms.iter().position(|t| t == term)
    }

    pub fn estimate(&self, term: &str) -> Option<f64> {
        self.index(term).map(|i| self.estimates[i])
    }

    pub fn p_value(&self, term: &str) -> Option<f64> {
        self.index(term).map(|i| self.p_values[i])
    }
}

pub(crate) struct Column {
    pub name: String,
    pub values: Vec<f64>,
    /// Norm before any demeaning, for the alias test.
    pub raw_norm: f64,
    /// Whether the column may be dropped as absorbed instead of failing.
    pub droppable: bool,
}

impl Column {
    pub fn new(name: impl Into<String>, values: Vec<f64>, raw_norm: f64, droppable: bool) -> Self {
        Self {
            name: name.into(),
            values,
            raw_norm,
            droppable,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Core least-squares fit. `absorbed_df` is subtracted from the residual
/// degrees of freedom on top of the fitted coefficients.
pub(crate) fn fit_columns(
    y: &[f64],
    columns: Vec<Column>,
    absorbed_df: usize,
    scheme: &str,
) -> Result<RegressionFit, StatsError> {
    let n = y.len();
    if columns.iter().any(|c| c.values.len() != n) {
        return Err(StatsError::LengthMismatch);
    }
    if y.iter().chain(columns.iter().flat_map(|c| &c.values)).any(|v| !v.is_finite()) {
        return Err(StatsError::InvalidInput("non-finite value in regression".into()));
    }

    // Greedy alias detection by modified Gram–Schmidt in column order.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept: Vec<Column> = Vec::new();
    let mut absorbed = Vec::new();
    for col in columns {
        let mut r = col.values.clone();
        for b in &basis {
            let d: f64 = r.iter().zip(b).map(|(u, v)| u * v).sum();
            r.iter_mut().zip(b).for_each(|(u, v)| *u -= d * v);
        }
        let rn = norm(&r);
        let scale = col.raw_norm.max(norm(&col.values));
        if scale == 0.0 || rn <= ALIAS_TOL * scale {
            if col.droppable {
                absorbed.push(col.name);
                continue;
            }
            return Err(StatsError::RankDeficient(format!(
                "term {:?} has no independent variation",
                col.name
            )));
        }
        r.iter_mut().for_each(|u| *u /= rn);
        basis.push(r);
        kept.push(col);
    }

    let p = kept.len();
    let df = n as f64 - p as f64 - absorbed_df as f64;
    if df < 1.0 {
        return Err(StatsError::TooFewObservations {
            needed: p + absorbed_df + 1,
            got: n,
        });
    }
    let x = DMatrix::from_fn(n, p, |i, j| kept[j].values[i]);
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &yv;
    let inv = xtx
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| xtx.clone().try_inverse())
        .ok_or_else(|| StatsError::RankDeficient("normal equations are singular".into()))?;
    let beta = &inv * xty;
    let resid = &yv - &x * &beta;
    let rss = resid.norm_squared();
    let sigma2 = rss / df;
    let tdist = StudentsT::new(0.0, 1.0, df).expect("df ≥ 1");

    let mut out = RegressionFit {
        terms: kept.iter().map(|c| c.name.clone()).collect(),
        estimates: beta.iter().copied().collect(),
        std_errors: Vec::with_capacity(p),
        t_values: Vec::with_capacity(p),
        p_values: Vec::with_capacity(p),
        p_values_raw: Vec::with_capacity(p),
        n,
        df_resid: df,
        rss,
        scheme: scheme.to_string(),
        absorbed,
    };
    for j in 0..p {
        let se = (inv[(j, j)] * sigma2).max(0.0).sqrt();
        let est = beta[j];
        let (t, pv) = if se > 0.0 {
            let t = est / se;
            (t, (2.0 * tdist.sf(t.abs())).min(1.0))
        } else if est == 0.0 {
            (0.0, 1.0)
        } else {
            (est.signum() * f64::INFINITY, 0.0)
        };
        out.std_errors.push(se);
        out.t_values.push(t);
        out.p_values.push(floor_p(pv));
        out.p_values_raw.push(pv);
    }
    Ok(out)
}

/// Ordinary least squares of `y` on named columns, with an intercept.
pub fn ols(y: &[f64], columns: &[(&str, &[f64])]) -> Result<RegressionFit, StatsError> {
    let n = y.len();
    let mut cols = vec![Column::new("intercept", vec![1.0; n], (n as f64).sqrt(), false)];
    for (name, v) in columns {
        cols.push(Column::new(*name, v.to_vec(), norm(v), false));
    }
    fit_columns(y, cols, 0, "ols")
}

/// Maps labels to dense group indices in order of first appearance.
pub(crate) fn group_index<L: Eq + Hash + Clone>(labels: &[L]) -> (Vec<usize>, Vec<L>) {
    let mut map: HashMap<L, usize> = HashMap::new();
    let mut order = Vec::new();
    let idx = labels
        .iter()
        .map(|l| {
            *map.entry(l.clone()).or_insert_with(|| {
                order.push(l.clone());
                order.len() - 1
            })
        })
        .collect();
    (idx, order)
}

pub(crate) fn demean(v: &[f64], groups: &[usize], n_groups: usize) -> Vec<f64> {
    let mut sum = vec![0.0; n_groups];
    let mut cnt = vec![0usize; n_groups];
    for (&g, &x) in groups.iter().zip(v) {
        sum[g] += x;
        cnt[g] += 1;
    }
    v.iter()
        .zip(groups)
        .map(|(&x, &g)| x - sum[g] / cnt[g] as f64)
        .collect()
}

/// Within-block interaction model
/// `y_dm ~ x_dm + group + x_dm:group (+ accuracy_dm)` with block fixed
/// effects absorbed by demeaning.
///
/// Term names are `x`, `group[g]`, `x:group[g]` (the slope difference from
/// the reference group) and `accuracy`. Group indicators that demeaning
/// annihilates are listed in `absorbed`.
pub fn block_demeaned_regression<B, G>(
    y: &[f64],
    x: &[f64],
    accuracy: Option<&[f64]>,
    blocks: &[B],
    groups: &[G],
    reference_group: &G,
) -> Result<RegressionFit, StatsError>
where
    B: Eq + Hash + Clone,
    G: Eq + Hash + Clone + Ord + std::fmt::Display,
{
    let n = y.len();
    if x.len() != n || blocks.len() != n || groups.len() != n || accuracy.is_some_and(|a| a.len() != n) {
        return Err(StatsError::LengthMismatch);
    }
    if !groups.contains(reference_group) {
        return Err(StatsError::UnknownGroup(reference_group.to_string()));
    }
    let (bidx, blist) = group_index(blocks);
    let nb = blist.len();
    let dm = |v: &[f64]| demean(v, &bidx, nb);

    let mut others: Vec<G> = groups.iter().filter(|g| *g != reference_group).cloned().collect();
    others.sort();
    others.dedup();

    let x_dm = dm(x);
    let mut cols = vec![Column::new("x", x_dm.clone(), norm(x), false)];
    for g in &others {
        let ind: Vec<f64> = groups.iter().map(|h| (h == g) as u8 as f64).collect();
        cols.push(Column::new(format!("group[{g}]"), dm(&ind), norm(&ind), true));
    }
    for g in &others {
        let inter: Vec<f64> = groups
            .iter()
            .zip(&x_dm)
            .map(|(h, &v)| if h == g { v } else { 0.0 })
            .collect();
        cols.push(Column::new(format!("x:group[{g}]"), dm(&inter), norm(&inter), false));
    }
    if let Some(a) = accuracy {
        cols.push(Column::new("accuracy", dm(a), norm(a), false));
    }
    let scheme = if accuracy.is_some() {
        "within-block demeaned, accuracy-controlled"
    } else {
        "within-block demeaned"
    };
    fit_columns(&dm(y), cols, nb, scheme)
}

/// Residuals of `y` after OLS on `accuracy` with an intercept, fitted
/// separately within each slice. A slice with constant accuracy is only
/// centred.
pub fn residualize_within_slice<S: Eq + Hash + Clone + std::fmt::Debug>(
    y: &[f64],
    accuracy: &[f64],
    slices: &[S],
) -> Result<Vec<f64>, StatsError> {
    if accuracy.len() != y.len() || slices.len() != y.len() {
        return Err(StatsError::LengthMismatch);
    }
    let (sidx, slist) = group_index(slices);
    let mut out = vec![0.0; y.len()];
    for (s, label) in slist.iter().enumerate() {
        let members: Vec<usize> = (0..y.len()).filter(|&i| sidx[i] == s).collect();
        if members.len() < 3 {
            return Err(StatsError::SliceTooSmall(format!("{label:?}")));
        }
        let ys: Vec<f64> = members.iter().map(|&i| y[i]).collect();
        let xs: Vec<f64> = members.iter().map(|&i| accuracy[i]).collect();
        let m = members.len() as f64;
        let (my, mx) = (ys.iter().sum::<f64>() / m, xs.iter().sum::<f64>() / m);
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        for (k, &i) in members.iter().enumerate() {
            out[i] = ys[k] - my - slope * (xs[k] - mx);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceFit {
    pub slice: String,
    pub fit: RegressionFit,
    /// BH-adjusted p-values across slices, aligned with `fit.terms`.
    pub p_fdr: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermSummary {
    pub term: String,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub n_significant: usize,
    pub n_slices: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRegressions {
    pub model: String,
    pub slices: Vec<SliceFit>,
}

impl SliceRegressions {
    /// Median, range and FDR-significant count per non-intercept term.
    pub fn summarize(&self, alpha: f64) -> Vec<TermSummary> {
        let Some(first) = self.slices.first() else {
            return Vec::new();
        };
        first
            .fit
            .terms
            .iter()
            .filter(|t| *t != "intercept")
            .map(|term| {
                let mut est = Vec::new();
                let mut sig = 0;
                for s in &self.slices {
                    if let Some(i) = s.fit.index(term) {
                        est.push(s.fit.estimates[i]);
                        sig += (s.p_fdr[i] < alpha) as usize;
                    }
                }
                est.sort_by(f64::total_cmp);
                let m = est.len();
                let median = if m % 2 == 1 {
                    est[m / 2]
                } else {
                    0.5 * (est[m / 2 - 1] + est[m / 2])
                };
                TermSummary {
                    term: term.clone(),
                    median,
                    min: est[0],
                    max: est[m - 1],
                    n_significant: sig,
                    n_slices: m,
                }
            })
            .collect()
    }
}

fn per_slice<S: Eq + Hash + Clone + std::fmt::Display>(
    model: &str,
    y: &[f64],
    columns: &[(&str, Vec<f64>)],
    slices: &[S],
) -> Result<SliceRegressions, StatsError> {
    if slices.len() != y.len() || columns.iter().any(|(_, v)| v.len() != y.len()) {
        return Err(StatsError::LengthMismatch);
    }
    let (sidx, slist) = group_index(slices);
    let mut fits = Vec::with_capacity(slist.len());
    for (s, label) in slist.iter().enumerate() {
        let members: Vec<usize> = (0..y.len()).filter(|&i| sidx[i] == s).collect();
        let ys: Vec<f64> = members.iter().map(|&i| y[i]).collect();
        let sub: Vec<(&str, Vec<f64>)> = columns
            .iter()
            .map(|(n, v)| (*n, members.iter().map(|&i| v[i]).collect()))
            .collect();
        let refs: Vec<(&str, &[f64])> = sub.iter().map(|(n, v)| (*n, v.as_slice())).collect();
        let fit = ols(&ys, &refs).map_err(|e| match e {
            StatsError::RankDeficient(m) => StatsError::RankDeficient(format!("slice {label}: {m}")),
            other => other,
        })?;
        fits.push(SliceFit {
            slice: label.to_string(),
            p_fdr: vec![0.0; fit.terms.len()],
            fit,
        });
    }
    let n_terms = fits.first().map_or(0, |f| f.fit.terms.len());
    for t in 0..n_terms {
        let raw: Vec<f64> = fits.iter().map(|f| f.fit.p_values_raw[t]).collect();
        for (f, q) in fits.iter_mut().zip(bh_fdr(&raw)?) {
            f.p_fdr[t] = floor_p(q);
        }
    }
    Ok(SliceRegressions {
        model: model.to_string(),
        slices: fits,
    })
}

fn offset(is_sink: &[bool]) -> Vec<f64> {
    is_sink.iter().map(|&s| s as u8 as f64).collect()
}

/// Per-slice `y ~ breadth + strength + breadth:strength + structure_offset`,
/// where the offset is 1 for sink replicates.
pub fn component_regression<S: Eq + Hash + Clone + std::fmt::Display>(
    residual_y: &[f64],
    breadth: &[f64],
    strength: &[f64],
    is_sink: &[bool],
    slices: &[S],
) -> Result<SliceRegressions, StatsError> {
    if breadth.len() != strength.len() || is_sink.len() != breadth.len() {
        return Err(StatsError::LengthMismatch);
    }
    let inter: Vec<f64> = breadth.iter().zip(strength).map(|(b, s)| b * s).collect();
    per_slice(
        "components",
        residual_y,
        &[
            ("breadth", breadth.to_vec()),
            ("strength", strength.to_vec()),
            ("breadth:strength", inter),
            ("structure_offset", offset(is_sink)),
        ],
        slices,
    )
}

/// Per-slice `y ~ magnitude + structure_offset`.
pub fn magnitude_regression<S: Eq + Hash + Clone + std::fmt::Display>(
    residual_y: &[f64],
    magnitude: &[f64],
    is_sink: &[bool],
    slices: &[S],
) -> Result<SliceRegressions, StatsError> {
    if is_sink.len() != magnitude.len() {
        return Err(StatsError::LengthMismatch);
    }
    per_slice(
        "magnitude",
        residual_y,
        &[("magnitude", magnitude.to_vec()), ("structure_offset", offset(is_sink))],
        slices,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_group_recovers_exact_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blocks: Vec<usize> = (0..60).map(|i| i % 6).collect();
        let x: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().zip(&blocks).map(|(x, b)| 2.0 * x + 10.0 * *b as f64).collect();
        let groups = vec!["h"; 60];
        let fit = block_demeaned_regression(&y, &x, None, &blocks, &groups, &"h").unwrap();
        assert!((fit.estimate("x").unwrap() - 2.0).abs() < 1e-9);
        assert_eq!(fit.df_resid, 60.0 - 1.0 - 6.0);
    }

    #[test]
    fn slope_difference_between_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 400;
        let blocks: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let groups: Vec<&str> = (0..n).map(|i| if i % 2 == 0 { "a" } else { "b" }).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let slope = if groups[i] == "a" { 1.0 } else { 3.0 };
                slope * x[i] + blocks[i] as f64 + 0.01 * rng.random_range(-1.0..1.0)
            })
            .collect();
        let fit = block_demeaned_regression(&y, &x, None, &blocks, &groups, &"a").unwrap();
        let d = fit.estimate("x:group[b]").unwrap();
        let se = fit.std_errors[fit.index("x:group[b]").unwrap()];
        assert!((d - 2.0).abs() < 4.0 * se.max(1e-3));
        assert!(fit.p_value("x:group[b]").unwrap() < 1e-10);
        assert_eq!(
            block_demeaned_regression(&y, &x, None, &blocks, &groups, &"c"),
            Err(StatsError::UnknownGroup("c".into()))
        );
    }

    #[test]
    fn residualized_slices_sum_to_zero() {
        let slices = [0, 0, 0, 0, 1, 1, 1, 1, 1];
        let acc = [0.5, 0.6, 0.7, 0.8, 0.1, 0.2, 0.3, 0.5, 0.9];
        let y: Vec<f64> = acc.iter().map(|a| 5.0 * a).collect();
        let r = residualize_within_slice(&y, &acc, &slices).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12));

        let y2 = [1.0, -2.0, 4.0, 0.5, 3.0, 3.5, -1.0, 2.0, 0.0];
        let r2 = residualize_within_slice(&y2, &acc, &slices).unwrap();
        for s in 0..2 {
            let sum: f64 = (0..9).filter(|&i| slices[i] == s).map(|i| r2[i]).sum();
            assert!(sum.abs() < 1e-9);
        }
        assert!(matches!(
            residualize_within_slice(&y2[..5], &acc[..5], &slices[..5]),
            Err(StatsError::SliceTooSmall(_))
        ));
    }

    #[test]
    fn residualize_with_flat_accuracy_centres() {
        let y = [1.0, 2.0, 6.0];
        let r = residualize_within_slice(&y, &[0.4; 3], &["s"; 3]).unwrap();
        assert_eq!(r, vec![-2.0, -1.0, 3.0]);
    }

    #[test]
    fn component_model_recovers_synthetic_breadth_effect() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 240;
        let slices: Vec<String> = (0..n).map(|i| format!("s{}", i % 3)).collect();
        let breadth: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let strength: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.3)).collect();
        let sink: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let y: Vec<f64> = breadth.iter().map(|b| -b + 1e-3 * rng.random_range(-1.0..1.0)).collect();
        let reg = component_regression(&y, &breadth, &strength, &sink, &slices).unwrap();
        assert_eq!(reg.slices.len(), 3);
        for s in &reg.slices {
            assert!((s.fit.estimate("breadth").unwrap() + 1.0).abs() < 0.01);
            assert!(s.fit.estimate("strength").unwrap().abs() < 0.05);
            assert!(s.fit.estimate("structure_offset").unwrap().abs() < 0.01);
        }
        let summary = reg.summarize(0.05);
        let b = summary.iter().find(|t| t.term == "breadth").unwrap();
        assert_eq!(b.n_significant, 3);
    }
}
