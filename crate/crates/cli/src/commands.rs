//! Subcommand bodies, shared by the binary and the integration tests.

use std::path::{Path, PathBuf};

use crate::analyze::{analyze_blocks, write_records, write_rho_hat};
use crate::config::Config;
use crate::error::CliError;
use crate::ingest::{ingest_confusions, parse_block_selector};
use crate::manifest::RunManifest;
use crate::simulate::simulate;

pub const RECORDS_FILE: &str = "block_records.csv";
pub const RHO_HAT_FILE: &str = "block_rho_hat.csv";
pub const FIT_RECORD_FILE: &str = "fit_record.csv";
pub const FIT_RHO_HAT_FILE: &str = "fit_rho_hat.csv";

/// Loads `--config` (defaults when absent) and applies `--seed`.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config, CliError> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.sim.grid.seed_root = s;
    }
    Ok(cfg)
}

fn input_path(flag: Option<&Path>, cfg: &Config) -> Result<PathBuf, CliError> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.input.path.clone())
        .ok_or_else(|| CliError::Config("no input: pass --input or set [input] path".into()))
}

fn create(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(CliError::io(out))
}

pub fn run_analyze(cfg: &Config, input: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let input = input_path(input, cfg)?;
    let blocks = ingest_confusions(&input, &cfg.classes)?;
    let records = analyze_blocks(&blocks, cfg)?;
    create(out)?;
    let files = [out.join(RECORDS_FILE), out.join(RHO_HAT_FILE)];
    write_records(&files[0], &records)?;
    write_rho_hat(&files[1], &records, &cfg.classes)?;
    let mut m = RunManifest::new("analyze", cfg, Vec::new());
    m.add_input(&input)?;
    m.finish(out, &files)?;
    Ok(())
}

/// Fits one block: the one named by `[input] block`, or the only block in
/// the file.
pub fn run_fit(cfg: &Config, input: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let input = input_path(input, cfg)?;
    let blocks = ingest_confusions(&input, &cfg.classes)?;
    let chosen = match &cfg.input.block {
        Some(sel) => {
            let key = parse_block_selector(sel)?;
            blocks
                .into_iter()
                .find(|b| b.block == key)
                .ok_or_else(|| CliError::Data(format!("block {sel:?} not found in {}", input.display())))?
        }
        None if blocks.len() == 1 => blocks.into_iter().next().expect("one block"),
        None => {
            return Err(CliError::Config(format!(
                "{} holds {} blocks; set [input] block to pick one",
                input.display(),
                blocks.len()
            )))
        }
    };
    let records = analyze_blocks(std::slice::from_ref(&chosen), cfg)?;
    create(out)?;
    let files = [out.join(FIT_RECORD_FILE), out.join(FIT_RHO_HAT_FILE)];
    write_records(&files[0], &records)?;
    write_rho_hat(&files[1], &records, &cfg.classes)?;
    let mut m = RunManifest::new("fit", cfg, Vec::new());
    m.add_input(&input)?;
    m.finish(out, &files)?;
    Ok(())
}

/// Runs the grid from `cfg`, or from the config snapshot in `manifest`.
pub fn run_simulate(cfg: &Config, manifest: Option<&Path>, out: &Path) -> Result<usize, CliError> {
    let cfg = match manifest {
        Some(m) => RunManifest::load(m)?.config,
        None => cfg.clone(),
    };
    Ok(simulate(&cfg, out)?.len())
}

pub fn run_report(cfg: &Config, input: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let input = input_path(input, cfg)?;
    crate::report::report(&input, cfg, out)
}
