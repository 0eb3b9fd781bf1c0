//! Per-block empirical pipeline: normalize, gate on collapse, then
//! asymmetry, MAP fit and frontier signatures of the fitted costs.

use std::path::Path;

use asymrd::asymmetry::{self, AsymmetrySummary};
use asymrd::channels::{
    accuracy, collapse_flag, mutual_information, normalize_rows, BlockKey, CollapseDiagnostics,
    ConfusionCounts,
};
use asymrd::fit::map_fit_distortion;
use asymrd::rd::{operating_point_slope, signatures, trace_frontier, DistortionMatrix, RdSignatures};
use rayon::prelude::*;

use crate::config::Config;
use crate::error::CliError;
use crate::table::{num, opt, opt_bool, opt_int, write_table};

#[derive(Clone, Debug, PartialEq)]
pub struct FitSummary {
    pub converged: bool,
    pub stop_reason: String,
    pub log_posterior: f64,
    pub iterations: usize,
    pub rho_hat: DistortionMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockRecord {
    pub block: BlockKey,
    pub n_trials: u64,
    /// Original indices of the classes kept after zero-row handling.
    pub retained: Vec<usize>,
    pub collapse: Option<CollapseDiagnostics>,
    pub accuracy: Option<f64>,
    pub asym: Option<AsymmetrySummary>,
    pub asym_smoothed: Option<AsymmetrySummary>,
    pub r_star: Option<f64>,
    pub fit: Option<FitSummary>,
    pub signatures: Option<RdSignatures>,
    pub frontier_unconverged: usize,
    pub s_star: Option<f64>,
    pub flags: Vec<String>,
}

impl BlockRecord {
    fn empty(counts: &ConfusionCounts) -> Self {
        Self {
            block: counts.block.clone(),
            n_trials: counts.total(),
            retained: Vec::new(),
            collapse: None,
            accuracy: None,
            asym: None,
            asym_smoothed: None,
            r_star: None,
            fit: None,
            signatures: None,
            frontier_unconverged: 0,
            s_star: None,
            flags: Vec::new(),
        }
    }

    pub fn collapsed(&self) -> bool {
        self.collapse.is_some_and(|c| c.flagged)
    }
}

/// Restricts counts to `retained` on both axes.
fn restrict(counts: &ConfusionCounts, retained: &[usize]) -> Result<ConfusionCounts, String> {
    if retained.len() == counts.k() {
        return Ok(counts.clone());
    }
    let flat = retained
        .iter()
        .flat_map(|&i| retained.iter().map(move |&j| counts.get(i, j)))
        .collect();
    ConfusionCounts::new(retained.len(), flat, counts.block.clone()).map_err(|e| e.to_string())
}

pub fn analyze_block(counts: &ConfusionCounts, cfg: &Config) -> BlockRecord {
    let mut rec = BlockRecord::empty(counts);
    let an = &cfg.analysis;
    let normalized = match normalize_rows(counts, cfg.input.zero_rows) {
        Ok(n) => n,
        Err(e) => {
            rec.flags.push(format!("normalize: {e}"));
            return rec;
        }
    };
    rec.retained = normalized.retained.clone();
    let channel = normalized.channel;
    let diag = collapse_flag(&channel);
    rec.collapse = Some(diag);
    if diag.flagged {
        rec.flags.push("collapsed".into());
        return rec;
    }

    let counts = match restrict(counts, &normalized.retained) {
        Ok(c) => c,
        Err(e) => {
            rec.flags.push(format!("restrict: {e}"));
            return rec;
        }
    };
    rec.accuracy = Some(accuracy(&channel));
    rec.asym = Some(asymmetry::summarize(&channel, an.epsilon));
    match asymmetry::smoothed_summary(&counts, an.laplace_alpha, an.epsilon) {
        Ok(s) => rec.asym_smoothed = Some(s),
        Err(e) => rec.flags.push(format!("smoothed_asymmetry: {e}")),
    }
    let r_star = mutual_information(&channel);
    rec.r_star = Some(r_star);

    let fit = match map_fit_distortion(&counts, &cfg.fit) {
        Ok(f) => f,
        Err(e) => {
            rec.flags.push(format!("fit: {e}"));
            return rec;
        }
    };
    if !fit.converged {
        rec.flags.push(format!("fit_not_converged: {}", fit.stop_reason));
    }
    let prior = channel.prior();
    match trace_frontier(&fit.rho_hat, &an.lambda_grid.values(), prior, an.ba) {
        Ok(f) => {
            rec.frontier_unconverged = f.n_unconverged();
            match signatures(&f) {
                Ok(s) => rec.signatures = Some(s),
                Err(e) => rec.flags.push(format!("signatures: {e}")),
            }
        }
        Err(e) => rec.flags.push(format!("frontier: {e}")),
    }
    match operating_point_slope(&fit.rho_hat, r_star, prior, an.root, an.ba) {
        Ok(op) => rec.s_star = Some(op.lambda),
        Err(e) => rec.flags.push(format!("operating_point: {e}")),
    }
    rec.fit = Some(FitSummary {
        converged: fit.converged,
        stop_reason: fit.stop_reason,
        log_posterior: fit.log_posterior,
        iterations: fit.iterations,
        rho_hat: fit.rho_hat,
    });
    rec
}

/// Runs every block on the rayon pool; output order follows input order.
pub fn analyze_blocks(blocks: &[ConfusionCounts], cfg: &Config) -> Result<Vec<BlockRecord>, CliError> {
    if blocks.is_empty() {
        return Err(CliError::Data("no blocks to analyze".into()));
    }
    Ok(blocks.par_iter().map(|b| analyze_block(b, cfg)).collect())
}

pub const RECORD_HEADER: [&str; 31] = [
    "system_group",
    "experiment",
    "condition",
    "model_instance",
    "n_trials",
    "k_retained",
    "collapse",
    "mean_row_entropy",
    "mean_row_max",
    "accuracy",
    "frobenius_index",
    "offdiag_frobenius",
    "n_pairs",
    "f_pairs",
    "mean_delta",
    "smoothed_frobenius_index",
    "smoothed_offdiag_frobenius",
    "smoothed_f_pairs",
    "smoothed_mean_delta",
    "r_star",
    "fit_converged",
    "fit_stop_reason",
    "fit_log_posterior",
    "fit_iterations",
    "beta",
    "beta_abs",
    "kappa",
    "auc",
    "frontier_unconverged",
    "s_star",
    "flags",
];

fn record_row(r: &BlockRecord) -> Vec<String> {
    let b = &r.block;
    let asym = r.asym.as_ref();
    let sm = r.asym_smoothed.as_ref();
    let sig = r.signatures.as_ref();
    let fit = r.fit.as_ref();
    vec![
        b.system_group.clone(),
        b.experiment.clone(),
        b.condition.clone(),
        b.model_instance.clone(),
        r.n_trials.to_string(),
        r.retained.len().to_string(),
        opt_bool(r.collapse.map(|c| c.flagged)),
        opt(r.collapse.map(|c| c.mean_row_entropy)),
        opt(r.collapse.map(|c| c.mean_row_max)),
        opt(r.accuracy),
        opt(asym.map(|a| a.frobenius_index)),
        opt(asym.and_then(|a| a.offdiag_frobenius)),
        opt_int(asym.map(|a| a.n_pairs)),
        opt(asym.map(|a| a.f_pairs)),
        opt(asym.and_then(|a| a.mean_delta)),
        opt(sm.map(|a| a.frobenius_index)),
        opt(sm.and_then(|a| a.offdiag_frobenius)),
        opt(sm.map(|a| a.f_pairs)),
        opt(sm.and_then(|a| a.mean_delta)),
        opt(r.r_star),
        opt_bool(fit.map(|f| f.converged)),
        fit.map_or_else(|| crate::table::NA.to_string(), |f| f.stop_reason.clone()),
        opt(fit.map(|f| f.log_posterior)),
        opt_int(fit.map(|f| f.iterations)),
        opt(sig.map(|s| s.beta)),
        opt(sig.map(|s| s.beta_abs)),
        opt(sig.map(|s| s.kappa)),
        opt(sig.map(|s| s.auc)),
        r.frontier_unconverged.to_string(),
        opt(r.s_star),
        r.flags.join(";"),
    ]
}

pub fn write_records(path: &Path, records: &[BlockRecord]) -> Result<(), CliError> {
    let rows: Vec<_> = records.iter().map(record_row).collect();
    write_table(path, &RECORD_HEADER, &rows)
}

/// Long-form fitted costs: one row per retained (stimulus, response) pair.
pub fn write_rho_hat(path: &Path, records: &[BlockRecord], classes: &[String]) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for r in records {
        let Some(fit) = &r.fit else { continue };
        let b = &r.block;
        for (ii, &i) in r.retained.iter().enumerate() {
            for (jj, &j) in r.retained.iter().enumerate() {
                rows.push(vec![
                    b.system_group.clone(),
                    b.experiment.clone(),
                    b.condition.clone(),
                    b.model_instance.clone(),
                    classes[i].clone(),
                    classes[j].clone(),
                    num(fit.rho_hat.get(ii, jj)),
                ]);
            }
        }
    }
    let header = [
        "system_group",
        "experiment",
        "condition",
        "model_instance",
        "stimulus_class",
        "response_class",
        "rho_hat",
    ];
    write_table(path, &header, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use asymrd::channels::ZeroRowPolicy;

    fn cfg(k: usize) -> Config {
        let mut c = Config {
            classes: (0..k).map(|i| format!("c{i}")).collect(),
            ..Config::default()
        };
        c.analysis.lambda_grid.n = 20;
        c
    }

    fn block(k: usize, flat: Vec<u64>) -> ConfusionCounts {
        ConfusionCounts::new(k, flat, BlockKey::new("g", "e", "c", "").unwrap()).unwrap()
    }

    #[test]
    fn identity_block_is_collapsed_and_not_fitted() {
        let mut flat = vec![0; 9];
        for i in 0..3 {
            flat[i * 3 + i] = 40;
        }
        let r = analyze_block(&block(3, flat), &cfg(3));
        assert!(r.collapsed());
        assert!(r.fit.is_none() && r.signatures.is_none() && r.asym.is_none());
        assert_eq!(record_row(&r).len(), RECORD_HEADER.len());
    }

    #[test]
    fn symmetric_block_has_no_asymmetry() {
        let r = analyze_block(&block(3, vec![30, 6, 4, 6, 30, 4, 4, 4, 32]), &cfg(3));
        let a = r.asym.unwrap();
        assert!(a.frobenius_index.abs() < 1e-12);
        assert_eq!(a.n_pairs, 0);
        assert!(r.fit.is_some(), "{:?}", r.flags);
    }

    #[test]
    fn dropped_classes_shrink_the_fit() {
        let mut c = cfg(3);
        c.input.zero_rows = ZeroRowPolicy::DropClass;
        let r = analyze_block(&block(3, vec![30, 10, 0, 8, 32, 0, 0, 0, 0]), &c);
        assert_eq!(r.retained, vec![0, 1]);
        assert_eq!(r.fit.as_ref().unwrap().rho_hat.k(), 2);

        let strict = analyze_block(&block(3, vec![30, 10, 0, 8, 32, 0, 0, 0, 0]), &cfg(3));
        assert!(strict.flags[0].starts_with("normalize"), "{:?}", strict.flags);
    }
}
