//! Statistics tables and plot-ready series from a results table.
//!
//! The table kind is detected from its columns: simulation results carry
//! `replicate_id`, block records carry `system_group`.

mod empirical;
mod sim;

use std::path::{Path, PathBuf};

use asymrd::stats::{StatsError, TestResult, P_VALUE_FLOOR};

use crate::config::Config;
use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::table::{num, write_table, Table, NA};

pub use empirical::EMPIRICAL_ANALYSES;
pub use sim::SIM_ANALYSES;

/// Collects written files so the manifest can digest them.
pub(crate) struct Emitter<'a> {
    out: &'a Path,
    files: Vec<PathBuf>,
}

impl<'a> Emitter<'a> {
    fn new(out: &'a Path) -> Self {
        Self { out, files: Vec::new() }
    }

    pub(crate) fn emit(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let path = self.out.join(name);
        write_table(&path, header, rows)?;
        self.files.push(path);
        Ok(())
    }
}

/// `[statistic, p, p_raw, method]` for a test that may have failed; the
/// failure text goes into the method cell.
pub(crate) fn test_cells(r: &Result<TestResult, StatsError>) -> [String; 4] {
    match r {
        Ok(t) => [num(t.statistic), num(t.p_value), num(t.p_value_raw), t.method.clone()],
        Err(e) => [NA.into(), NA.into(), NA.into(), format!("not tested: {e}")],
    }
}

/// BH over the p-values that exist; `None` stays `None`.
pub(crate) fn bh_opt(raw: &[Option<f64>]) -> Result<Vec<Option<f64>>, CliError> {
    let present: Vec<f64> = raw.iter().flatten().copied().collect();
    let adj = asymrd::stats::bh_fdr(&present).map_err(|e| CliError::Data(e.to_string()))?;
    let mut it = adj.into_iter();
    Ok(raw
        .iter()
        .map(|p| p.map(|_| it.next().expect("one per p-value").max(P_VALUE_FLOOR)))
        .collect())
}

pub(crate) fn fdr_of(results: &[Result<TestResult, StatsError>]) -> Result<Vec<Option<f64>>, CliError> {
    let raw: Vec<Option<f64>> = results.iter().map(|r| r.as_ref().ok().map(|t| t.p_value_raw)).collect();
    bh_opt(&raw)
}

/// Table cell as an optional number; booleans become 0/1.
pub(crate) fn cell_value(s: &str) -> Result<Option<f64>, String> {
    match s {
        NA | "" => Ok(None),
        "true" => Ok(Some(1.0)),
        "false" => Ok(Some(0.0)),
        s => s.parse().map(Some).map_err(|_| format!("not a number: {s:?}")),
    }
}

/// Every column except `skip`, parsed with [`cell_value`].
pub(crate) fn numeric_columns(
    t: &Table,
    skip: &[&str],
) -> Result<std::collections::HashMap<String, Vec<Option<f64>>>, CliError> {
    let mut values = std::collections::HashMap::new();
    for (c, name) in t.header.iter().enumerate() {
        if skip.contains(&name.as_str()) {
            continue;
        }
        let col = t
            .rows
            .iter()
            .map(|r| cell_value(t.str(r, c)).map_err(|e| CliError::Data(format!("column {name:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        values.insert(name.clone(), col);
    }
    Ok(values)
}

fn select<'s>(requested: &'s [String], known: &[&'s str], kind: &str) -> Result<Vec<&'s str>, CliError> {
    if requested.is_empty() {
        return Ok(known.to_vec());
    }
    requested
        .iter()
        .map(|r| {
            if known.contains(&r.as_str()) {
                Ok(r.as_str())
            } else {
                Err(CliError::UnknownAnalysis(format!(
                    "{r:?} is not available for {kind} tables (known: {})",
                    known.join(", ")
                )))
            }
        })
        .collect()
}

/// Runs the configured analyses on `input` and writes their tables, plus a
/// manifest, to `out`.
pub fn report(input: &Path, cfg: &Config, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let table = Table::read(input)?;
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    let mut em = Emitter::new(out);
    if table.has("replicate_id") {
        let analyses = select(&cfg.report.analyses, &SIM_ANALYSES, "simulation")?;
        let rows = sim::SimRows::parse(&table)?;
        for a in analyses {
            sim::run(a, &rows, cfg, &mut em)?;
        }
    } else if table.has("system_group") {
        let analyses = select(&cfg.report.analyses, &EMPIRICAL_ANALYSES, "block-record")?;
        let rows = empirical::BlockRows::parse(&table)?;
        for a in analyses {
            empirical::run(a, &rows, cfg, &mut em)?;
        }
    } else {
        return Err(CliError::Data(format!(
            "{}: neither a simulation results table nor block records",
            input.display()
        )));
    }
    let mut manifest = RunManifest::new("report", cfg, Vec::new());
    manifest.add_input(input)?;
    let files = em.files;
    manifest.finish(out, &files)?;
    Ok(files)
}
