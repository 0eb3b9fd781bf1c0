//! Grid simulation: one results row per replicate plus the long-form cost
//! and count matrices behind it.

use std::path::{Path, PathBuf};

use asymrd::asymmetry::AsymmetrySummary;
use asymrd::rd::{DistortionMatrix, RdSignatures};
use asymrd::simgen::{run_grid, Execution, SimResult};

use crate::config::Config;
use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::table::{num, opt, opt_bool, opt_int, write_table};

pub const RESULTS_FILE: &str = "sim_results.csv";
pub const MATRICES_FILE: &str = "sim_matrices.csv";

pub fn results_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "replicate_id",
        "structure",
        "a",
        "lambda_gen",
        "n_per_row",
        "k",
        "n_sinks",
        "seed",
        "clipped",
        "generation_converged",
        "collapse",
        "mean_row_entropy",
        "mean_row_max",
        "accuracy",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for prefix in ["", "smoothed_"] {
        for f in ["frobenius_index", "offdiag_frobenius", "n_pairs", "f_pairs", "mean_delta"] {
            h.push(format!("{prefix}{f}"));
        }
    }
    for prefix in ["true_", "hat_"] {
        for f in ["beta", "beta_abs", "kappa", "auc", "n_segments", "frontier_unconverged"] {
            h.push(format!("{prefix}{f}"));
        }
    }
    for f in [
        "fit_converged",
        "fit_log_posterior",
        "fit_iterations",
        "corr_sym",
        "corr_antisym",
        "strict_pass",
        "r_star",
        "s_star_true",
        "s_star_hat",
        "flags",
    ] {
        h.push(f.to_string());
    }
    h
}

fn asym_cells(a: &AsymmetrySummary) -> [String; 5] {
    [
        num(a.frobenius_index),
        opt(a.offdiag_frobenius),
        a.n_pairs.to_string(),
        num(a.f_pairs),
        opt(a.mean_delta),
    ]
}

fn signature_cells(s: Option<&RdSignatures>, unconverged: Option<usize>) -> [String; 6] {
    [
        opt(s.map(|s| s.beta)),
        opt(s.map(|s| s.beta_abs)),
        opt(s.map(|s| s.kappa)),
        opt(s.map(|s| s.auc)),
        opt_int(s.map(|s| s.n_segments)),
        opt_int(unconverged),
    ]
}

pub fn result_row(id: usize, r: &SimResult) -> Vec<String> {
    let c = &r.config;
    let mut row = vec![
        id.to_string(),
        c.structure.label().to_string(),
        num(c.a),
        num(c.lambda_gen),
        c.n_per_row.to_string(),
        c.k.to_string(),
        c.n_sinks.to_string(),
        c.seed.to_string(),
        r.clipped.to_string(),
        r.generation_converged.to_string(),
        r.collapse.to_string(),
        num(r.collapse_diagnostics.mean_row_entropy),
        num(r.collapse_diagnostics.mean_row_max),
        num(r.accuracy_proxy),
    ];
    row.extend(asym_cells(&r.asym));
    row.extend(asym_cells(&r.asym_smoothed));
    row.extend(signature_cells(r.signatures_true.as_ref(), Some(r.frontier_true_unconverged)));
    let hat_ran = r.rho_hat.is_some();
    row.extend(signature_cells(
        r.signatures_hat.as_ref(),
        hat_ran.then_some(r.frontier_hat_unconverged),
    ));
    let rec = r.recovery.as_ref();
    row.extend([
        opt_bool(r.fit_converged),
        opt(r.fit_log_posterior),
        opt_int(r.fit_iterations),
        opt(rec.and_then(|x| x.corr_sym)),
        opt(rec.and_then(|x| x.corr_antisym)),
        opt_bool(rec.map(|x| x.strict_pass)),
        num(r.r_star),
        opt(r.s_star_true),
        opt(r.s_star_hat),
        r.flags.join(";"),
    ]);
    row
}

fn matrix_rows(id: usize, name: &str, k: usize, get: impl Fn(usize, usize) -> String, out: &mut Vec<Vec<String>>) {
    for i in 0..k {
        for j in 0..k {
            out.push(vec![id.to_string(), name.to_string(), i.to_string(), j.to_string(), get(i, j)]);
        }
    }
}

fn rho_cell(m: &DistortionMatrix) -> impl Fn(usize, usize) -> String + '_ {
    move |i, j| num(m.get(i, j))
}

pub fn write_results(out: &Path, results: &[SimResult]) -> Result<Vec<PathBuf>, CliError> {
    let header = results_header();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<_> = results.iter().enumerate().map(|(i, r)| result_row(i, r)).collect();
    let results_path = out.join(RESULTS_FILE);
    write_table(&results_path, &header_refs, &rows)?;

    let mut mrows = Vec::new();
    for (id, r) in results.iter().enumerate() {
        let k = r.config.k;
        matrix_rows(id, "rho_true", k, rho_cell(&r.rho_true), &mut mrows);
        if let Some(h) = &r.rho_hat {
            matrix_rows(id, "rho_hat", k, rho_cell(h), &mut mrows);
        }
        matrix_rows(id, "counts", k, |i, j| r.counts.get(i, j).to_string(), &mut mrows);
    }
    let matrices_path = out.join(MATRICES_FILE);
    write_table(&matrices_path, &["replicate_id", "matrix", "row", "col", "value"], &mrows)?;
    Ok(vec![results_path, matrices_path])
}

/// Runs the configured grid and writes results, matrices and manifest to
/// `out`. The config's `parallel` flag picks the scheduler; rows are
/// identical either way.
pub fn simulate(cfg: &Config, out: &Path) -> Result<Vec<SimResult>, CliError> {
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    let settings = cfg.sim.settings(&cfg.fit);
    let exec = if cfg.sim.parallel {
        Execution::Parallel
    } else {
        Execution::Serial
    };
    let results = run_grid(&cfg.sim.grid, &settings, exec).map_err(|e| CliError::Config(e.to_string()))?;
    let files = write_results(out, &results)?;
    RunManifest::new("simulate", cfg, vec![cfg.sim.grid.seed_root]).finish(out, &files)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use asymrd::simgen::Structure;

    fn tiny() -> Config {
        let mut cfg = Config::default();
        let g = &mut cfg.sim.grid;
        g.structures = vec![Structure::BroadWeak];
        g.a_values = vec![0.5];
        g.lambda_gens = vec![2.0];
        g.n_per_rows = vec![200];
        g.n_seeds = 2;
        g.k = 4;
        cfg.sim.lambda_grid.n = 12;
        cfg
    }

    #[test]
    fn minimal_grid_gives_one_row_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let results = simulate(&tiny(), dir.path()).unwrap();
        assert_eq!(results.len(), 2);
        let t = crate::table::Table::read(&dir.path().join(RESULTS_FILE)).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.header, results_header());
        assert!(t.rows.iter().all(|r| r.len() == t.header.len()));
        // No bare NaN or inf anywhere.
        for r in &t.rows {
            assert!(r.iter().all(|c| !c.contains("NaN") && !c.contains("inf")));
        }
        assert!(dir.path().join(crate::table::MANIFEST_FILE).exists());
    }
}
