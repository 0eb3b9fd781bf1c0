//! Analyses of per-block records: group contrasts, asymmetry–frontier
//! correlations and block-demeaned regressions.

use std::collections::HashMap;

use asymrd::stats::{block_demeaned_regression, spearman_test, welch_t, wilcoxon_rank_sum};

use super::{bh_opt, fdr_of, numeric_columns, test_cells, Emitter};
use crate::config::Config;
use crate::error::CliError;
use crate::table::{num, opt, Table, NA};

pub const EMPIRICAL_ANALYSES: [&str; 3] = ["group_comparisons", "correlations", "block_regressions"];

const COMPARED: [&str; 9] = [
    "frobenius_index",
    "offdiag_frobenius",
    "f_pairs",
    "mean_delta",
    "accuracy",
    "beta_abs",
    "kappa",
    "auc",
    "s_star",
];
const ASYM: [&str; 3] = ["frobenius_index", "f_pairs", "mean_delta"];
const RD: [&str; 3] = ["auc", "beta_abs", "kappa"];

pub(crate) struct BlockRows {
    groups: Vec<String>,
    /// `(experiment, condition)`, the demeaning unit.
    blocks: Vec<(String, String)>,
    collapsed: Vec<bool>,
    values: HashMap<String, Vec<Option<f64>>>,
}

impl BlockRows {
    pub fn parse(t: &Table) -> Result<Self, CliError> {
        let (g, e, c, col) = (t.col("system_group")?, t.col("experiment")?, t.col("condition")?, t.col("collapse")?);
        let mut out = Self {
            groups: Vec::new(),
            blocks: Vec::new(),
            collapsed: Vec::new(),
            values: numeric_columns(
                t,
                &["system_group", "experiment", "condition", "model_instance", "fit_stop_reason", "flags"],
            )?,
        };
        for r in &t.rows {
            out.groups.push(t.str(r, g).to_string());
            out.blocks.push((t.str(r, e).to_string(), t.str(r, c).to_string()));
            // Blocks that failed before the gate count as unusable.
            out.collapsed.push(t.bool(r, col)?.unwrap_or(true));
        }
        Ok(out)
    }

    fn column(&self, name: &str) -> Result<&[Option<f64>], CliError> {
        self.values
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| CliError::Data(format!("missing column {name:?}")))
    }

    /// Usable rows of `group` (all groups when `None`) with every column finite.
    fn usable(&self, group: Option<&str>, cols: &[&str]) -> Result<Vec<usize>, CliError> {
        let cols: Vec<&[Option<f64>]> = cols.iter().map(|c| self.column(c)).collect::<Result<_, _>>()?;
        Ok((0..self.groups.len())
            .filter(|&i| {
                !self.collapsed[i]
                    && group.is_none_or(|g| self.groups[i] == g)
                    && cols.iter().all(|c| c[i].is_some_and(f64::is_finite))
            })
            .collect())
    }

    fn has_group(&self, g: &str) -> bool {
        (0..self.groups.len()).any(|i| !self.collapsed[i] && self.groups[i] == g)
    }

    fn distinct_groups(&self) -> Vec<String> {
        let mut g = self.groups.clone();
        g.sort();
        g.dedup();
        g
    }

    fn values_at(&self, col: &str, idx: &[usize]) -> Result<Vec<f64>, CliError> {
        let c = self.column(col)?;
        Ok(idx.iter().map(|&i| c[i].unwrap()).collect())
    }
}

pub(crate) fn run(analysis: &str, rows: &BlockRows, cfg: &Config, em: &mut Emitter) -> Result<(), CliError> {
    match analysis {
        "group_comparisons" => group_comparisons(rows, cfg, em),
        "correlations" => correlations(rows, em),
        "block_regressions" => block_regressions(rows, cfg, em),
        other => Err(CliError::UnknownAnalysis(other.to_string())),
    }
}

/// The reference group and its comparison groups, each with usable blocks.
fn comparison_groups(rows: &BlockRows, cfg: &Config) -> Result<(String, Vec<String>), CliError> {
    let reference = cfg.report.reference_group.clone();
    let missing = |g: &str| {
        CliError::UnknownAnalysis(format!("group comparison names {g:?}, which has no usable blocks"))
    };
    if !rows.has_group(&reference) {
        return Err(missing(&reference));
    }
    let others = if cfg.report.groups.is_empty() {
        rows.distinct_groups()
            .into_iter()
            .filter(|g| *g != reference && rows.has_group(g))
            .collect()
    } else {
        cfg.report.groups.clone()
    };
    if let Some(g) = others.iter().find(|g| !rows.has_group(g)) {
        return Err(missing(g));
    }
    Ok((reference, others))
}

fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    Some(if m % 2 == 1 { v[m / 2] } else { 0.5 * (v[m / 2 - 1] + v[m / 2]) })
}

/// Wilcoxon and Welch contrasts of each comparison group against the
/// reference, with BH applied per test family across the table.
fn group_comparisons(rows: &BlockRows, cfg: &Config, em: &mut Emitter) -> Result<(), CliError> {
    let (reference, others) = comparison_groups(rows, cfg)?;
    let mut keys = Vec::new();
    let (mut wil, mut wel) = (Vec::new(), Vec::new());
    for g in &others {
        for metric in COMPARED {
            let x = rows.values_at(metric, &rows.usable(Some(&reference), &[metric])?)?;
            let y = rows.values_at(metric, &rows.usable(Some(g), &[metric])?)?;
            wil.push(wilcoxon_rank_sum(&x, &y));
            wel.push(welch_t(&x, &y));
            keys.push((g.clone(), metric, x, y));
        }
    }
    let (q_wil, q_wel) = (fdr_of(&wil)?, fdr_of(&wel)?);
    let mut out = Vec::new();
    for (i, (g, metric, x, y)) in keys.iter().enumerate() {
        let mut row = vec![
            reference.clone(),
            g.clone(),
            metric.to_string(),
            x.len().to_string(),
            y.len().to_string(),
            opt(median(x)),
            opt(median(y)),
        ];
        row.extend(test_cells(&wil[i]));
        row.push(opt(q_wil[i]));
        row.extend(test_cells(&wel[i]));
        let w = wel[i].as_ref().ok();
        row.push(opt(w.and_then(|t| t.df)));
        row.push(opt(w.and_then(|t| t.estimate)));
        row.push(opt(w.and_then(|t| t.effect_ci).map(|c| c.0)));
        row.push(opt(w.and_then(|t| t.effect_ci).map(|c| c.1)));
        row.push(opt(q_wel[i]));
        out.push(row);
    }
    em.emit(
        "group_comparisons.csv",
        &[
            "reference_group",
            "group",
            "metric",
            "n_reference",
            "n_group",
            "median_reference",
            "median_group",
            "wilcoxon_u",
            "wilcoxon_p",
            "wilcoxon_p_raw",
            "wilcoxon_method",
            "wilcoxon_p_fdr",
            "welch_t",
            "welch_p",
            "welch_p_raw",
            "welch_method",
            "welch_df",
            "mean_difference",
            "ci_low",
            "ci_high",
            "welch_p_fdr",
        ],
        &out,
    )
}

/// Spearman correlation of every asymmetry index with every frontier metric,
/// pooled and within each group.
fn correlations(rows: &BlockRows, em: &mut Emitter) -> Result<(), CliError> {
    let subsets: Vec<Option<String>> = std::iter::once(None).chain(rows.distinct_groups().into_iter().map(Some)).collect();
    let mut keys = Vec::new();
    let mut tests = Vec::new();
    for g in &subsets {
        for asym in ASYM {
            for rd in RD {
                let idx = rows.usable(g.as_deref(), &[asym, rd])?;
                tests.push(spearman_test(&rows.values_at(asym, &idx)?, &rows.values_at(rd, &idx)?));
                keys.push((g.clone().unwrap_or_else(|| "all".into()), asym, rd, idx.len()));
            }
        }
    }
    let fdr = fdr_of(&tests)?;
    let out: Vec<Vec<String>> = keys
        .into_iter()
        .zip(&tests)
        .zip(fdr)
        .map(|((k, t), q)| {
            let mut row = vec![k.0, k.1.to_string(), k.2.to_string(), k.3.to_string()];
            row.extend(test_cells(t));
            row.push(opt(q));
            row
        })
        .collect();
    em.emit(
        "correlations.csv",
        &["subset", "asymmetry_metric", "rd_metric", "n", "rho", "p_value", "p_value_raw", "method", "p_fdr"],
        &out,
    )
}

/// `rd ~ asym × group` within (experiment, condition) blocks, with and
/// without accuracy as a covariate. BH runs over every coefficient.
fn block_regressions(rows: &BlockRows, cfg: &Config, em: &mut Emitter) -> Result<(), CliError> {
    let reference = &cfg.report.reference_group;
    if !rows.has_group(reference) {
        return Err(CliError::UnknownAnalysis(format!(
            "block regression reference group {reference:?} has no usable blocks"
        )));
    }
    let mut out: Vec<Vec<String>> = Vec::new();
    let mut raw = Vec::new();
    for rd in RD {
        for asym in ["frobenius_index", "f_pairs"] {
            let idx = rows.usable(None, &[rd, asym, "accuracy"])?;
            let y = rows.values_at(rd, &idx)?;
            let x = rows.values_at(asym, &idx)?;
            let acc = rows.values_at("accuracy", &idx)?;
            let blocks: Vec<&(String, String)> = idx.iter().map(|&i| &rows.blocks[i]).collect();
            let groups: Vec<&String> = idx.iter().map(|&i| &rows.groups[i]).collect();
            for controlled in [false, true] {
                let fit = block_demeaned_regression(
                    &y,
                    &x,
                    controlled.then_some(acc.as_slice()),
                    &blocks,
                    &groups,
                    &reference,
                );
                let head = [rd.to_string(), asym.to_string(), controlled.to_string()];
                match fit {
                    Ok(f) => {
                        for (t, term) in f.terms.iter().enumerate() {
                            let mut row = head.to_vec();
                            row.extend([
                                term.clone(),
                                num(f.estimates[t]),
                                num(f.std_errors[t]),
                                num(f.t_values[t]),
                                num(f.p_values[t]),
                            ]);
                            raw.push(Some(f.p_values_raw[t]));
                            row.extend([f.n.to_string(), f.scheme.clone(), f.absorbed.join(";")]);
                            out.push(row);
                        }
                    }
                    Err(e) => {
                        let mut row = head.to_vec();
                        row.extend([NA; 5].map(String::from));
                        row.extend([idx.len().to_string(), format!("not fitted: {e}"), String::new()]);
                        raw.push(None);
                        out.push(row);
                    }
                }
            }
        }
    }
    let q = bh_opt(&raw)?;
    for (row, q) in out.iter_mut().zip(q) {
        row.insert(8, opt(q));
    }
    em.emit(
        "block_regressions.csv",
        &[
            "rd_metric",
            "asymmetry_metric",
            "accuracy_controlled",
            "term",
            "estimate",
            "std_error",
            "t",
            "p_value",
            "p_fdr",
            "n",
            "scheme",
            "absorbed",
        ],
        &out,
    )
}
