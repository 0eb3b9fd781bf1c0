//! TOML configuration shared by every subcommand. Every key is optional;
//! `asymrd --help` prints the defaults.

use std::path::{Path, PathBuf};

use asymrd::asymmetry::{DEFAULT_LAPLACE_ALPHA, EPSILON_EMPIRICAL, EPSILON_SIMULATION};
use asymrd::channels::ZeroRowPolicy;
use asymrd::fit::FitConfig;
use asymrd::rd::{log_spaced, BaOptions, RootOptions};
use asymrd::simgen::{AntisymScale, GridSpec, SimSettings};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// The 16 entry-level categories of the human/model generalisation data.
pub const DEFAULT_CLASSES: [&str; 16] = [
    "airplane", "bear", "bicycle", "bird", "boat", "bottle", "car", "cat", "chair", "clock", "dog",
    "elephant", "keyboard", "knife", "oven", "truck",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Class vocabulary; fixes K and the matrix order for every block.
    pub classes: Vec<String>,
    pub input: InputSection,
    pub analysis: AnalysisSection,
    pub fit: FitConfig,
    pub sim: SimSection,
    pub report: ReportSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            input: InputSection::default(),
            analysis: AnalysisSection::default(),
            fit: FitConfig::default(),
            sim: SimSection::default(),
            report: ReportSection::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputSection {
    pub path: Option<PathBuf>,
    pub zero_rows: ZeroRowPolicy,
    /// `system_group/experiment/condition/model_instance` selecting one block
    /// for `fit`.
    pub block: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self { lo: 0.1, hi: 1e3, n: 60 }
    }
}

impl LambdaGrid {
    pub fn values(&self) -> Vec<f64> {
        log_spaced(self.lo, self.hi, self.n)
    }

    fn validate(&self, section: &str) -> Result<(), CliError> {
        if !(self.lo > 0.0 && self.hi > self.lo && self.hi.is_finite() && self.n >= 3) {
            return Err(CliError::Config(format!(
                "[{section}.lambda_grid] needs 0 < lo < hi and n ≥ 3"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub epsilon: f64,
    pub laplace_alpha: f64,
    pub lambda_grid: LambdaGrid,
    pub ba: BaOptions,
    pub root: RootOptions,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            epsilon: EPSILON_EMPIRICAL,
            laplace_alpha: DEFAULT_LAPLACE_ALPHA,
            lambda_grid: LambdaGrid::default(),
            ba: BaOptions::default(),
            root: RootOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub grid: GridSpec,
    pub antisym_scale: AntisymScale,
    pub rho_sym_range: (f64, f64),
    pub epsilon: f64,
    pub laplace_alpha: f64,
    pub lambda_grid: LambdaGrid,
    pub ba: BaOptions,
    pub root: RootOptions,
    /// Run replicates on the rayon pool. Output is identical either way.
    pub parallel: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        let s = SimSettings::default();
        Self {
            grid: GridSpec::default(),
            antisym_scale: s.antisym_scale,
            rho_sym_range: s.rho_sym_range,
            epsilon: EPSILON_SIMULATION,
            laplace_alpha: s.laplace_alpha,
            lambda_grid: LambdaGrid::default(),
            ba: s.ba,
            root: s.root,
            parallel: true,
        }
    }
}

impl SimSection {
    pub fn settings(&self, fit: &FitConfig) -> SimSettings {
        SimSettings {
            antisym_scale: self.antisym_scale,
            rho_sym_range: self.rho_sym_range,
            lambda_grid: self.lambda_grid.values(),
            ba: self.ba,
            root: self.root,
            fit: *fit,
            epsilon: self.epsilon,
            laplace_alpha: self.laplace_alpha,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureSource {
    /// Signatures of the generating costs.
    #[default]
    True,
    /// Signatures of the fitted costs.
    Hat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Analyses to run; empty means every analysis that fits the table.
    pub analyses: Vec<String>,
    pub alpha: f64,
    /// Which frontier the simulation regressions use.
    pub signature_source: SignatureSource,
    pub reference_group: String,
    /// Groups compared with the reference; empty means all others.
    pub groups: Vec<String>,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            analyses: Vec::new(),
            alpha: 0.05,
            signature_source: SignatureSource::True,
            reference_group: "human".into(),
            groups: Vec::new(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.classes.len() < 2 {
            return bad("classes: need at least two labels".into());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.classes.iter().find(|c| !seen.insert(c.as_str())) {
            return bad(format!("classes: duplicate label {dup:?}"));
        }
        self.analysis.lambda_grid.validate("analysis")?;
        self.sim.lambda_grid.validate("sim")?;
        if !(self.analysis.epsilon >= 0.0 && self.sim.epsilon >= 0.0) {
            return bad("epsilon must be nonnegative".into());
        }
        if !(self.analysis.laplace_alpha > 0.0 && self.sim.laplace_alpha > 0.0) {
            return bad("laplace_alpha must be positive".into());
        }
        let (lo, hi) = self.sim.rho_sym_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return bad("sim.rho_sym_range must satisfy 0 ≤ lo ≤ hi".into());
        }
        let g = &self.sim.grid;
        if g.is_empty() {
            return bad("sim.grid is empty".into());
        }
        if g.a_values.iter().any(|a| !(*a >= 0.0 && a.is_finite()))
            || g.lambda_gens.iter().any(|l| !(*l > 0.0 && l.is_finite()))
            || g.n_per_rows.contains(&0)
        {
            return bad("sim.grid: need a ≥ 0, lambda_gen > 0, n_per_row ≥ 1".into());
        }
        if g.k < 2 || !(1..g.k).contains(&g.n_sinks) {
            return bad("sim.grid: need k ≥ 2 and 1 ≤ n_sinks < k".into());
        }
        if !(self.report.alpha > 0.0 && self.report.alpha < 1.0) {
            return bad("report.alpha must lie in (0, 1)".into());
        }
        Ok(())
    }
}
