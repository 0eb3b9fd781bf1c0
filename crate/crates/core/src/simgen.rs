//! The broad–weak vs. sink simulation.
//!
//! Each replicate builds `ρ_true = max(ρ_sym + a·A, 0)`, draws counts from the
//! Blahut–Arimoto channel at `λ_gen` under a uniform stimulus prior, and runs
//! the same pipeline as empirical data: collapse gate, MAP fit, frontier
//! signatures, asymmetry and recovery diagnostics.
//!
//! Seeds form a tree. `ρ_sym` depends only on the replicate seed and `A` on
//! the replicate seed and structure, so cells that differ only in `a`, `λ_gen`
//! or `N` share ground-truth draws. Sampling streams additionally depend on
//! every cell coordinate. Nothing depends on execution order.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asymmetry::{self, AsymmetrySummary, EPSILON_SIMULATION};
use crate::channels::{
    accuracy, collapse_flag, mutual_information, normalize_rows, BlockKey, CollapseDiagnostics,
    ConfusionCounts, ZeroRowPolicy,
};
use crate::fit::{map_fit_distortion, recovery_diagnostics, FitConfig, RecoveryDiagnostics};
use crate::matrix::SquareMatrix;
use crate::rd::{
    ba_channel, default_lambda_grid, operating_point_slope, signatures, trace_frontier, BaOptions,
    DistortionMatrix, RdError, RdSignatures, RootOptions,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    BroadWeak,
    Sink,
}

impl Structure {
    pub fn label(self) -> &'static str {
        match self {
            Self::BroadWeak => "broad_weak",
            Self::Sink => "sink",
        }
    }

    fn code(self) -> u64 {
        match self {
            Self::BroadWeak => 1,
            Self::Sink => 2,
        }
    }
}

impl std::str::FromStr for Structure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "broad_weak" => Ok(Self::BroadWeak),
            "sink" => Ok(Self::Sink),
            other => Err(format!("unknown structure {other:?} (expected broad_weak or sink)")),
        }
    }
}

/// How the skew-symmetric direction `A` is scaled before multiplying by `a`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AntisymScale {
    /// `‖A‖_F = 1`.
    #[default]
    UnitFrobenius,
    /// `max |A_ij| = 1`.
    UnitMaxAbs,
    /// Raw construction (sink entries ±1, broad–weak entries `(G_ij − G_ji)/2`).
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub structure: Structure,
    pub a: f64,
    pub lambda_gen: f64,
    pub n_per_row: u64,
    pub k: usize,
    pub n_sinks: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.a >= 0.0 && self.a.is_finite()) {
            return Err(SimError::InvalidConfig(format!("a = {} must be ≥ 0", self.a)));
        }
        if !(self.lambda_gen > 0.0 && self.lambda_gen.is_finite()) {
            return Err(SimError::InvalidConfig(format!(
                "lambda_gen = {} must be > 0",
                self.lambda_gen
            )));
        }
        if self.n_per_row == 0 {
            return Err(SimError::InvalidConfig("n_per_row must be ≥ 1".into()));
        }
        if self.k < 2 {
            return Err(SimError::InvalidConfig("K must be ≥ 2".into()));
        }
        if self.structure == Structure::Sink && !(1..self.k).contains(&self.n_sinks) {
            return Err(SimError::InvalidConfig(format!(
                "n_sinks = {} must lie in [1, K)",
                self.n_sinks
            )));
        }
        Ok(())
    }
}

/// Pipeline knobs shared by every replicate of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub antisym_scale: AntisymScale,
    /// Support of the uniform off-diagonal draws of `ρ_sym`.
    pub rho_sym_range: (f64, f64),
    pub lambda_grid: Vec<f64>,
    pub ba: BaOptions,
    pub root: RootOptions,
    pub fit: FitConfig,
    pub epsilon: f64,
    pub laplace_alpha: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            antisym_scale: AntisymScale::default(),
            rho_sym_range: (0.5, 1.5),
            lambda_grid: default_lambda_grid(),
            ba: BaOptions::default(),
            root: RootOptions::default(),
            fit: FitConfig::default(),
            epsilon: EPSILON_SIMULATION,
            laplace_alpha: asymmetry::DEFAULT_LAPLACE_ALPHA,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Rd(#[from] RdError),
}

const TAG_SYM: u64 = 0x5359_4d4d;
const TAG_ANTI: u64 = 0x414e_5449;
const TAG_SAMPLE: u64 = 0x5341_4d50;
const TAG_REPLICATE: u64 = 0x5245_504c;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into `root` through splitmix64 one word at a time.
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(root), |h, &p| splitmix64(h ^ splitmix64(p)))
}

/// Seed of the `index`-th replicate under a grid root seed.
pub fn replicate_seed(root: u64, index: u64) -> u64 {
    derive_seed(root, &[TAG_REPLICATE, index])
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Symmetric cost matrix with off-diagonal entries `(U_ij + U_ji)/2`,
/// `U ~ Uniform[0.5, 1.5]`.
pub fn make_rho_sym(seed: u64, k: usize) -> DistortionMatrix {
    make_rho_sym_in(seed, k, (0.5, 1.5))
}

pub fn make_rho_sym_in(seed: u64, k: usize, (lo, hi): (f64, f64)) -> DistortionMatrix {
    assert!(k >= 2 && lo >= 0.0 && hi >= lo);
    let mut r = rng(derive_seed(seed, &[TAG_SYM]));
    let mut u = SquareMatrix::zeros(k);
    for i in 0..k {
        for j in 0..k {
            if i != j {
                u[(i, j)] = r.random_range(lo..=hi);
            }
        }
    }
    let mut m = SquareMatrix::zeros(k);
    for i in 0..k {
        for j in i + 1..k {
            let s = 0.5 * (u[(i, j)] + u[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    DistortionMatrix::from_matrix_unchecked(m)
}

/// Indices of the sink classes used by [`make_antisym`] for this seed.
pub fn sink_classes(seed: u64, k: usize, n_sinks: usize) -> Vec<usize> {
    let mut r = rng(derive_seed(seed, &[TAG_ANTI, Structure::Sink.code()]));
    let mut s = sample_indices(&mut r, k, n_sinks).into_vec();
    s.sort_unstable();
    s
}

/// Skew-symmetric direction `A`, scaled per `scale`.
///
/// Broad–weak: `A = (G − Gᵀ)/2` with standard-normal `G`. Sink: for every
/// non-sink `i` and sink `s`, `A_is = −1` and `A_si = +1`, so confusing a
/// class into a sink gets cheaper.
pub fn make_antisym(
    structure: Structure,
    seed: u64,
    k: usize,
    n_sinks: usize,
    scale: AntisymScale,
) -> SquareMatrix {
    let mut a = SquareMatrix::zeros(k);
    match structure {
        Structure::BroadWeak => {
            let mut r = rng(derive_seed(seed, &[TAG_ANTI, structure.code()]));
            let mut g = SquareMatrix::zeros(k);
            for i in 0..k {
                for j in 0..k {
                    if i != j {
                        g[(i, j)] = r.sample(StandardNormal);
                    }
                }
            }
            for i in 0..k {
                for j in i + 1..k {
                    let v = 0.5 * (g[(i, j)] - g[(j, i)]);
                    a[(i, j)] = v;
                    a[(j, i)] = -v;
                }
            }
        }
        Structure::Sink => {
            let sinks = sink_classes(seed, k, n_sinks);
            for i in (0..k).filter(|i| !sinks.contains(i)) {
                for &s in &sinks {
                    a[(i, s)] = -1.0;
                    a[(s, i)] = 1.0;
                }
            }
        }
    }
    let divisor = match scale {
        AntisymScale::UnitFrobenius => a.frobenius_norm(),
        AntisymScale::UnitMaxAbs => a.as_slice().iter().fold(0.0, |m: f64, v| m.max(v.abs())),
        AntisymScale::Raw => 1.0,
    };
    if divisor > 0.0 && divisor != 1.0 {
        // Scaling each entry separately keeps A = −Aᵀ exact.
        a.as_mut_slice().iter_mut().for_each(|v| *v /= divisor);
    }
    a
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposedRho {
    pub rho: DistortionMatrix,
    /// Off-diagonal entries of `ρ_sym + a·A` that were negative.
    pub clipped: usize,
}

/// `ρ_true = max(ρ_sym + a·A, 0)` with zero diagonal.
pub fn compose_rho_true(rho_sym: &DistortionMatrix, antisym: &SquareMatrix, a: f64) -> ComposedRho {
    let k = rho_sym.k();
    assert_eq!(antisym.dim(), k, "dimension mismatch");
    let mut m = SquareMatrix::zeros(k);
    let mut clipped = 0;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let v = rho_sym.get(i, j) + a * antisym[(i, j)];
            if v < 0.0 {
                clipped += 1;
            } else {
                m[(i, j)] = v;
            }
        }
    }
    ComposedRho {
        rho: DistortionMatrix::from_matrix_unchecked(m),
        clipped,
    }
}

/// One multinomial draw per row by sequential binomials.
fn draw_multinomial(r: &mut ChaCha8Rng, n: u64, probs: &[f64], out: &mut [u64]) {
    let mut remaining = n;
    let mut mass = 1.0;
    let last = probs.len() - 1;
    for (j, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            out[j] = 0;
            continue;
        }
        if j == last {
            out[j] = remaining;
            break;
        }
        let cond = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let x = Binomial::new(remaining, cond).expect("probability in [0, 1]").sample(r);
        out[j] = x;
        remaining -= x;
        mass -= p;
    }
}

/// Counts drawn from an explicit channel, one multinomial per row.
pub fn sample_from_channel(channel: &SquareMatrix, n_per_row: u64, seed: u64) -> ConfusionCounts {
    let k = channel.dim();
    let mut r = rng(seed);
    let mut flat = vec![0u64; k * k];
    for i in 0..k {
        draw_multinomial(&mut r, n_per_row, channel.row(i), &mut flat[i * k..(i + 1) * k]);
    }
    ConfusionCounts::new(k, flat, BlockKey::simulated()).expect("rows sum to n_per_row ≥ 1")
}

/// BA channel at `lambda_gen` under a uniform prior, then one multinomial
/// draw of `n_per_row` trials per row.
pub fn sample_counts(
    rho_true: &DistortionMatrix,
    lambda_gen: f64,
    n_per_row: u64,
    seed: u64,
    ba: BaOptions,
) -> Result<ConfusionCounts, RdError> {
    let k = rho_true.k();
    let sol = ba_channel(rho_true, lambda_gen, &vec![1.0 / k as f64; k], ba)?;
    Ok(sample_from_channel(sol.channel.matrix(), n_per_row, seed))
}

fn sampling_seed(cfg: &SimConfig) -> u64 {
    derive_seed(
        cfg.seed,
        &[
            TAG_SAMPLE,
            cfg.structure.code(),
            cfg.a.to_bits(),
            cfg.lambda_gen.to_bits(),
            cfg.n_per_row,
        ],
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub config: SimConfig,
    pub rho_true: DistortionMatrix,
    pub clipped: usize,
    pub rho_hat: Option<DistortionMatrix>,
    pub generation_converged: bool,
    pub counts: ConfusionCounts,
    pub signatures_true: Option<RdSignatures>,
    pub signatures_hat: Option<RdSignatures>,
    pub frontier_true_unconverged: usize,
    pub frontier_hat_unconverged: usize,
    /// Asymmetry of the sampled confusion channel.
    pub asym: AsymmetrySummary,
    /// Same summary on the add-α smoothed counts.
    pub asym_smoothed: AsymmetrySummary,
    pub accuracy_proxy: f64,
    pub collapse: bool,
    pub collapse_diagnostics: CollapseDiagnostics,
    pub recovery: Option<RecoveryDiagnostics>,
    pub fit_converged: Option<bool>,
    pub fit_log_posterior: Option<f64>,
    pub fit_iterations: Option<usize>,
    /// Empirical operating rate `I(X;Y)` of the sampled counts, nats.
    pub r_star: f64,
    pub s_star_true: Option<f64>,
    pub s_star_hat: Option<f64>,
    /// Stage failures, in pipeline order.
    pub flags: Vec<String>,
}

/// Runs one replicate end to end. Stage failures become entries in `flags`.
pub fn run_replicate(cfg: &SimConfig, settings: &SimSettings) -> Result<SimResult, SimError> {
    cfg.validate()?;
    let k = cfg.k;
    let mut flags = Vec::new();

    let rho_sym = make_rho_sym_in(cfg.seed, k, settings.rho_sym_range);
    let antisym = make_antisym(cfg.structure, cfg.seed, k, cfg.n_sinks, settings.antisym_scale);
    let ComposedRho { rho: rho_true, clipped } = compose_rho_true(&rho_sym, &antisym, cfg.a);
    let uniform = vec![1.0 / k as f64; k];

    let (gen_channel, generation_converged) =
        match ba_channel(&rho_true, cfg.lambda_gen, &uniform, settings.ba) {
            Ok(sol) => (sol.channel, true),
            Err(RdError::NotConverged(sol)) => {
                flags.push("generation_not_converged".to_string());
                (sol.channel, false)
            }
            Err(e) => return Err(e.into()),
        };
    let counts = sample_from_channel(gen_channel.matrix(), cfg.n_per_row, sampling_seed(cfg));

    let sampled = normalize_rows(&counts, ZeroRowPolicy::Error)
        .expect("every row has n_per_row ≥ 1 trials")
        .channel;
    let collapse_diagnostics = collapse_flag(&sampled);
    let collapse = collapse_diagnostics.flagged;
    let asym = asymmetry::summarize(&sampled, settings.epsilon);
    let asym_smoothed = asymmetry::smoothed_summary(&counts, settings.laplace_alpha, settings.epsilon)
        .expect("smoothing a valid table");
    let accuracy_proxy = accuracy(&sampled);
    let r_star = mutual_information(&sampled);

    let frontier_signatures = |rho: &DistortionMatrix, tag: &str, flags: &mut Vec<String>| {
        match trace_frontier(rho, &settings.lambda_grid, &uniform, settings.ba) {
            Ok(f) => {
                let unconverged = f.n_unconverged();
                match signatures(&f) {
                    Ok(s) => (Some(s), unconverged),
                    Err(e) => {
                        flags.push(format!("{tag}_signatures: {e}"));
                        (None, unconverged)
                    }
                }
            }
            Err(e) => {
                flags.push(format!("{tag}_frontier: {e}"));
                (None, 0)
            }
        }
    };
    let operating = |rho: &DistortionMatrix, tag: &str, flags: &mut Vec<String>| {
        match operating_point_slope(rho, r_star, &uniform, settings.root, settings.ba) {
            Ok(op) => Some(op.lambda),
            Err(e) => {
                flags.push(format!("{tag}_operating_point: {e}"));
                None
            }
        }
    };

    let (signatures_true, frontier_true_unconverged) = frontier_signatures(&rho_true, "true", &mut flags);
    let s_star_true = operating(&rho_true, "true", &mut flags);

    let mut result = SimResult {
        config: *cfg,
        rho_true,
        clipped,
        rho_hat: None,
        generation_converged,
        counts,
        signatures_true,
        signatures_hat: None,
        frontier_true_unconverged,
        frontier_hat_unconverged: 0,
        asym,
        asym_smoothed,
        accuracy_proxy,
        collapse,
        collapse_diagnostics,
        recovery: None,
        fit_converged: None,
        fit_log_posterior: None,
        fit_iterations: None,
        r_star,
        s_star_true,
        s_star_hat: None,
        flags: Vec::new(),
    };
    if collapse {
        result.flags = flags;
        return Ok(result);
    }

    match map_fit_distortion(&result.counts, &settings.fit) {
        Ok(fit) => {
            let (sig, unconv) = frontier_signatures(&fit.rho_hat, "hat", &mut flags);
            result.signatures_hat = sig;
            result.frontier_hat_unconverged = unconv;
            result.s_star_hat = operating(&fit.rho_hat, "hat", &mut flags);
            result.recovery = Some(recovery_diagnostics(&result.rho_true, &fit.rho_hat));
            result.fit_converged = Some(fit.converged);
            result.fit_log_posterior = Some(fit.log_posterior);
            result.fit_iterations = Some(fit.iterations);
            if !fit.converged {
                flags.push(format!("fit_not_converged: {}", fit.stop_reason));
            }
            result.rho_hat = Some(fit.rho_hat);
        }
        Err(e) => flags.push(format!("fit: {e}")),
    }
    result.flags = flags;
    Ok(result)
}

/// Cartesian grid over structure × a × λ_gen × N × replicate seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub structures: Vec<Structure>,
    pub a_values: Vec<f64>,
    pub lambda_gens: Vec<f64>,
    pub n_per_rows: Vec<u64>,
    pub n_seeds: u64,
    pub seed_root: u64,
    pub k: usize,
    pub n_sinks: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            structures: vec![Structure::BroadWeak, Structure::Sink],
            a_values: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.5],
            lambda_gens: vec![0.2, 0.5, 1.0, 2.0, 5.0],
            n_per_rows: vec![50, 200, 1000],
            n_seeds: 10,
            seed_root: 20_260_101,
            k: 16,
            n_sinks: 2,
        }
    }
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.structures.len()
            * self.a_values.len()
            * self.lambda_gens.len()
            * self.n_per_rows.len()
            * self.n_seeds as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every replicate config, ordered structure → a → λ_gen → N → seed.
    pub fn configs(&self) -> Vec<SimConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &structure in &self.structures {
            for &a in &self.a_values {
                for &lambda_gen in &self.lambda_gens {
                    for &n_per_row in &self.n_per_rows {
                        for s in 0..self.n_seeds {
                            out.push(SimConfig {
                                structure,
                                a,
                                lambda_gen,
                                n_per_row,
                                k: self.k,
                                n_sinks: self.n_sinks,
                                seed: replicate_seed(self.seed_root, s),
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Serial,
    Parallel,
}

/// Runs every replicate of the grid; rows come back in [`GridSpec::configs`]
/// order regardless of scheduling.
pub fn run_grid(grid: &GridSpec, settings: &SimSettings, exec: Execution) -> Result<Vec<SimResult>, SimError> {
    if grid.is_empty() {
        return Err(SimError::InvalidConfig("empty grid".into()));
    }
    let configs = grid.configs();
    for c in &configs {
        c.validate()?;
    }
    match exec {
        Execution::Serial => configs.iter().map(|c| run_replicate(c, settings)).collect(),
        Execution::Parallel => configs.par_iter().map(|c| run_replicate(c, settings)).collect(),
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KneeError {
    #[error("need at least 5 points, got {0}")]
    TooFewPoints(usize),
    #[error("x values must be strictly increasing and finite")]
    NotIncreasing,
    #[error("two-segment fit improves SSE by only {:.1}%", .improvement * 100.0)]
    NoKnee { improvement: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KneeFit {
    pub a_knee: f64,
    pub sse_linear: f64,
    pub sse_two_segment: f64,
    /// `(sse_linear − sse_two_segment) / sse_linear`.
    pub improvement: f64,
}

/// Minimum relative SSE improvement for a knee to count.
pub const KNEE_MIN_IMPROVEMENT: f64 = 0.05;

fn least_squares_sse(rows: &[Vec<f64>], ys: &[f64]) -> f64 {
    use nalgebra::{DMatrix, DVector};
    let n = ys.len();
    let p = rows[0].len();
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    let y = DVector::from_column_slice(ys);
    let beta = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-14)
        .expect("svd with both factors");
    (y - x * beta).norm_squared()
}

/// Breakpoint of the best continuous two-segment linear fit
/// `y = b0 + b1·x + b2·(x − c)₊` over interior `c ∈ xs`.
pub fn knee_point(xs: &[f64], ys: &[f64]) -> Result<KneeFit, KneeError> {
    assert_eq!(xs.len(), ys.len(), "length mismatch");
    if xs.len() < 5 {
        return Err(KneeError::TooFewPoints(xs.len()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) || xs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(KneeError::NotIncreasing);
    }
    let linear: Vec<Vec<f64>> = xs.iter().map(|&x| vec![1.0, x]).collect();
    let sse_linear = least_squares_sse(&linear, ys);
    let scale: f64 = ys.iter().map(|y| y * y).sum::<f64>().max(f64::MIN_POSITIVE);

    let mut best: Option<(f64, f64)> = None;
    for &c in &xs[1..xs.len() - 1] {
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![1.0, x, (x - c).max(0.0)]).collect();
        let sse = least_squares_sse(&rows, ys);
        // Strict improvement beyond rounding, so ties keep the smaller c.
        if best.is_none_or(|(_, b)| sse < b - 1e-12 * scale) {
            best = Some((c, sse));
        }
    }
    let (a_knee, sse_two) = best.expect("at least three interior points");
    let improvement = if sse_linear <= 1e-24 * scale {
        0.0
    } else {
        (sse_linear - sse_two) / sse_linear
    };
    if improvement < KNEE_MIN_IMPROVEMENT {
        return Err(KneeError::NoKnee { improvement });
    }
    Ok(KneeFit {
        a_knee,
        sse_linear,
        sse_two_segment: sse_two,
        improvement,
    })
}
