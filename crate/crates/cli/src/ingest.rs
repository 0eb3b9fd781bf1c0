//! Long-form confusion tables: one row per (block, stimulus, response) cell.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use asymrd::channels::{BlockKey, ConfusionCounts};
use thiserror::Error;

use crate::error::CliError;
use crate::table::write_table;

pub const SCHEMA: [&str; 7] = [
    "system_group",
    "experiment",
    "condition",
    "model_instance",
    "stimulus_class",
    "response_class",
    "count",
];

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("schema mismatch at line {line}: {reason}")]
    SchemaMismatch { line: u64, reason: String },
    #[error("unknown class {label:?} at line {line}")]
    UnknownClass { line: u64, label: String },
    #[error("block {0} has no trials")]
    EmptyBlock(String),
}

fn block_label(b: &BlockKey) -> String {
    format!("{}/{}/{}/{}", b.system_group, b.experiment, b.condition, b.model_instance)
}

/// Accumulates a long-form table into one `ConfusionCounts` per block,
/// ordered by block key. Duplicate cells are summed.
pub fn ingest_confusions(path: &Path, classes: &[String]) -> Result<Vec<ConfusionCounts>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(CliError::csv(path))?;
    let mismatch = |line: u64, reason: String| IngestError::SchemaMismatch { line, reason };

    let header = reader.headers().map_err(CliError::csv(path))?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names != SCHEMA {
        return Err(mismatch(1, format!("expected header {}, got {}", SCHEMA.join(","), names.join(","))).into());
    }

    let k = classes.len();
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let lookup = |label: &str, line: u64| {
        index
            .get(label)
            .copied()
            .ok_or_else(|| IngestError::UnknownClass { line, label: label.to_string() })
    };

    let mut blocks: BTreeMap<BlockKey, Vec<u64>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(CliError::csv(path))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != SCHEMA.len() {
            return Err(mismatch(line, format!("expected {} fields, got {}", SCHEMA.len(), rec.len())).into());
        }
        let key = BlockKey::new(&rec[0], &rec[1], &rec[2], &rec[3]).map_err(|e| mismatch(line, e.to_string()))?;
        let (s, r) = (lookup(&rec[4], line)?, lookup(&rec[5], line)?);
        let count: u64 = rec[6]
            .parse()
            .map_err(|_| mismatch(line, format!("count {:?} is not a nonnegative integer", &rec[6])))?;
        let cells = blocks.entry(key).or_insert_with(|| vec![0; k * k]);
        cells[s * k + r] = cells[s * k + r]
            .checked_add(count)
            .ok_or_else(|| mismatch(line, "count overflow".into()))?;
    }

    blocks
        .into_iter()
        .map(|(key, cells)| {
            if cells.iter().all(|&c| c == 0) {
                return Err(IngestError::EmptyBlock(block_label(&key)).into());
            }
            ConfusionCounts::new(k, cells, key).map_err(|e| CliError::Data(e.to_string()))
        })
        .collect()
}

/// Writes blocks in the ingest schema, omitting zero cells.
pub fn write_confusions(path: &Path, blocks: &[ConfusionCounts], classes: &[String]) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for b in blocks {
        if b.k() != classes.len() {
            return Err(CliError::Data(format!(
                "block {} has K = {} but {} classes are declared",
                block_label(&b.block),
                b.k(),
                classes.len()
            )));
        }
        let key = &b.block;
        for (i, stim) in classes.iter().enumerate() {
            for (j, resp) in classes.iter().enumerate() {
                let n = b.get(i, j);
                if n > 0 {
                    rows.push(vec![
                        key.system_group.clone(),
                        key.experiment.clone(),
                        key.condition.clone(),
                        key.model_instance.clone(),
                        stim.clone(),
                        resp.clone(),
                        n.to_string(),
                    ]);
                }
            }
        }
    }
    write_table(path, &SCHEMA, &rows)
}

/// Parses `system_group/experiment/condition/model_instance`; the model
/// instance may be empty.
pub fn parse_block_selector(s: &str) -> Result<BlockKey, CliError> {
    let parts: Vec<&str> = s.split('/').collect();
    match parts.as_slice() {
        [g, e, c] => BlockKey::new(*g, *e, *c, ""),
        [g, e, c, m] => BlockKey::new(*g, *e, *c, *m),
        _ => return Err(CliError::Config(format!("block selector {s:?}: expected group/experiment/condition[/model]"))),
    }
    .map_err(|e| CliError::Config(format!("block selector {s:?}: {e}")))
}
