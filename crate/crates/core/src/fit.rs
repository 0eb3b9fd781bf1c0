//! MAP inference of a latent distortion matrix.
//!
//! The likelihood of a confusion table under a candidate cost matrix ρ is the
//! row-conditioned multinomial likelihood of the Blahut–Arimoto channel for ρ
//! at a fixed inverse temperature (the scale is absorbed into ρ). Off-diagonal
//! costs are parameterized as `ρ_ij = exp(θ_ij)` with an independent Gaussian
//! prior on θ, so every iterate is a valid distortion matrix.
//!
//! Gradients are available two ways. The default differentiates through the
//! fixed point: with `p = F(p, ρ)` the BA marginal map and `J = ∂F/∂p`,
//!
//! ```text
//! (I − J)ᵀ v = ∂L/∂p
//! dL/dρ_ab = λ [ r_a q_ab − N_ab + π_a q_ab (Σ_y q_ay v_y − v_b) ]
//! ```
//!
//! where `r` are row totals and π the prior. Central differences on θ are
//! kept as a slower reference.

mod lbfgs;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::{
    collapse_flag, normalize_rows, Channel, smoothed_channel, ChannelError, ConfusionCounts, ZeroRowPolicy,
};
use crate::matrix::SquareMatrix;
use crate::rd::{ba_warm, BaOptions, DistortionMatrix};
use crate::stats::{pearson, StatsError};

use lbfgs::{LbfgsOptions, StopReason};

/// Strict recovery requires the symmetric components to correlate above this.
pub const STRICT_RECOVERY_THRESHOLD: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("input channel is collapsed (mean row entropy {mean_row_entropy:.3e}, mean row max {mean_row_max:.6})")]
    CollapsedInput {
        mean_row_entropy: f64,
        mean_row_max: f64,
    },
    #[error("objective is not finite at the {0}")]
    NonFinite(&'static str),
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Implicit differentiation through the BA fixed point.
    #[default]
    Analytic,
    /// Central differences on θ.
    CentralDifference,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `θ = log(−log(max(C̃, 1e-6)) + 1e-6)` on the add-α smoothed channel.
    #[default]
    SmoothedNegLog,
    /// Costs under which the add-α smoothed channel is itself a BA fixed
    /// point, floored at `1e-4`. Also the fallback when the configured seed
    /// starts at a non-finite objective; equal costs are the last resort.
    FixedPointInversion,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Weight on `Σ θ²`.
    pub prior_strength: f64,
    pub fit_lambda: f64,
    /// Tolerance on the infinity norm of the per-trial gradient.
    pub grad_tol: f64,
    /// Relative objective change that counts as stalled-but-converged.
    pub ftol: f64,
    pub max_iter: usize,
    pub max_evals: usize,
    pub lbfgs_memory: usize,
    pub gradient: GradientMode,
    pub fd_step: f64,
    pub init: InitScheme,
    pub init_alpha: f64,
    pub ba: BaOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            prior_strength: 1e-3,
            fit_lambda: 1.0,
            grad_tol: 1e-7,
            ftol: 1e-12,
            max_iter: 1000,
            max_evals: 5000,
            lbfgs_memory: 10,
            gradient: GradientMode::Analytic,
            fd_step: 1e-5,
            init: InitScheme::SmoothedNegLog,
            init_alpha: 0.5,
            ba: BaOptions { tol: 1e-8, max_iter: 1000 },
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::InvalidConfig(m.to_string()));
        if !(self.fit_lambda > 0.0 && self.fit_lambda.is_finite()) {
            return bad("fit_lambda must be positive");
        }
        if !(self.prior_strength >= 0.0 && self.prior_strength.is_finite()) {
            return bad("prior_strength must be nonnegative");
        }
        if !(self.grad_tol > 0.0 && self.ftol >= 0.0 && self.fd_step > 0.0 && self.ba.tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.max_iter == 0 || self.max_evals == 0 || self.lbfgs_memory == 0 || self.ba.max_iter == 0 {
            return bad("iteration limits must be positive");
        }
        if !(self.init_alpha > 0.0) {
            return bad("init_alpha must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub rho_hat: DistortionMatrix,
    pub log_posterior: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    pub stop_reason: String,
    pub iterations: usize,
    pub evaluations: usize,
    /// Infinity norm of the per-trial gradient at the returned point.
    pub grad_inf: f64,
    /// Log posterior after each accepted step.
    pub trace: Vec<f64>,
}

/// `Σ N_ij log q(j|i)` for the BA channel of `rho` at `lambda`, with the
/// row-mass prior. Cells with zero count contribute nothing.
pub fn channel_log_likelihood(
    counts: &ConfusionCounts,
    rho: &DistortionMatrix,
    lambda: f64,
    ba: BaOptions,
) -> f64 {
    let prior = row_mass(counts);
    let sol = ba_warm(rho, lambda, &prior, None, ba);
    let st = state_from_marginal(rho, lambda, &sol.output_marginal);
    log_lik(counts, &st.q)
}

fn row_mass(counts: &ConfusionCounts) -> Vec<f64> {
    let rs = counts.row_sums();
    let tot = counts.total() as f64;
    rs.iter().map(|&r| r as f64 / tot).collect()
}

/// A consistent `(p, q)` pair: `q` is the BA conditional computed from `p`.
struct BaState {
    p: Vec<f64>,
    w: Vec<f64>,
    z: Vec<f64>,
    q: Vec<f64>,
}

fn state_from_marginal(rho: &DistortionMatrix, lambda: f64, p: &[f64]) -> BaState {
    let k = rho.k();
    let w: Vec<f64> = rho.matrix().as_slice().iter().map(|&r| (-lambda * r).exp()).collect();
    let mut z = vec![0.0; k];
    let mut q = vec![0.0; k * k];
    for x in 0..k {
        let mut zx = 0.0;
        for y in 0..k {
            let v = p[y] * w[x * k + y];
            q[x * k + y] = v;
            zx += v;
        }
        z[x] = zx;
        if zx > 0.0 {
            q[x * k..(x + 1) * k].iter_mut().for_each(|v| *v /= zx);
        }
    }
    BaState {
        p: p.to_vec(),
        w,
        z,
        q,
    }
}

/// Rounds of BA + polish when dead outputs violate the KKT conditions.
const KKT_ROUNDS: usize = 3;
/// Mass given to a wrongly dead output before re-solving.
const REVIVE_MASS: f64 = 1e-3;
const NEWTON_STEPS: usize = 12;

/// `c_y = Σ_x π_x w_xy / Z_x`; the marginal map is `T(p)_y = p_y c_y`.
fn column_factors(st: &BaState, prior: &[f64]) -> Vec<f64> {
    let k = st.p.len();
    (0..k)
        .map(|y| {
            (0..k)
                .filter(|&x| st.z[x] > 0.0)
                .map(|x| prior[x] * st.w[x * k + y] / st.z[x])
                .sum()
        })
        .collect()
}

/// `I − ∂T/∂p` at the state's marginal.
fn identity_minus_jacobian(st: &BaState, prior: &[f64], c: &[f64]) -> DMatrix<f64> {
    let k = st.p.len();
    let (p, w, z) = (&st.p, &st.w, &st.z);
    DMatrix::from_fn(k, k, |y, zz| {
        let mut s = 0.0;
        for x in 0..k {
            if z[x] > 0.0 {
                s += prior[x] * w[x * k + y] * w[x * k + zz] / (z[x] * z[x]);
            }
        }
        let j = if y == zz { c[y] } else { 0.0 } - p[y] * s;
        (if y == zz { 1.0 } else { 0.0 }) - j
    })
}

fn fixed_point_residual(st: &BaState, c: &[f64]) -> f64 {
    st.p
        .iter()
        .zip(c)
        .fold(0.0, |m: f64, (p, c)| m.max((p * (1.0 - c)).abs()))
}

/// Newton iterations on `p = T(p)` from a BA iterate. Outputs whose mass is
/// decaying collapse to (near) zero in a step or two instead of geometrically.
fn polish_fixed_point(rho: &DistortionMatrix, lambda: f64, prior: &[f64], p0: &[f64]) -> BaState {
    let mut st = state_from_marginal(rho, lambda, p0);
    let mut c = column_factors(&st, prior);
    let mut resid = fixed_point_residual(&st, &c);
    for _ in 0..NEWTON_STEPS {
        if resid < 1e-16 {
            break;
        }
        let r = DVector::from_iterator(st.p.len(), st.p.iter().zip(&c).map(|(p, c)| p * (1.0 - c)));
        let Some(step) = identity_minus_jacobian(&st, prior, &c).lu().solve(&r) else {
            break;
        };
        let mut p: Vec<f64> = st.p.iter().zip(step.iter()).map(|(p, d)| (p - d).max(0.0)).collect();
        let total: f64 = p.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            break;
        }
        p.iter_mut().for_each(|v| *v /= total);
        let next = state_from_marginal(rho, lambda, &p);
        let c_next = column_factors(&next, prior);
        let r_next = fixed_point_residual(&next, &c_next);
        if !(r_next < resid) {
            break;
        }
        (st, c, resid) = (next, c_next, r_next);
    }
    st
}

/// Outputs with negligible mass whose `c_y` exceeds one: BA would grow them.
fn kkt_violations(st: &BaState, prior: &[f64]) -> Vec<usize> {
    column_factors(st, prior)
        .iter()
        .enumerate()
        .filter(|&(y, &c)| st.p[y] < 1e-12 && c > 1.0 + 1e-9)
        .map(|(y, _)| y)
        .collect()
}

fn log_lik(counts: &ConfusionCounts, q: &[f64]) -> f64 {
    counts
        .as_flat()
        .iter()
        .zip(q)
        .filter(|(n, _)| **n > 0)
        .map(|(&n, &qv)| n as f64 * qv.ln())
        .sum()
}

fn off_diagonal_index(k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

fn rho_from_theta(k: usize, idx: &[(usize, usize)], theta: &[f64]) -> DistortionMatrix {
    let mut m = SquareMatrix::zeros(k);
    for (&(i, j), &t) in idx.iter().zip(theta) {
        m[(i, j)] = t.exp();
    }
    DistortionMatrix::from_matrix_unchecked(m)
}

/// Shared state for objective evaluations within one fit.
struct Problem<'a> {
    counts: &'a ConfusionCounts,
    cfg: FitConfig,
    k: usize,
    idx: Vec<(usize, usize)>,
    prior: Vec<f64>,
    row_tot: Vec<f64>,
    col_tot: Vec<f64>,
    n_total: f64,
    warm: Option<Vec<f64>>,
}

impl<'a> Problem<'a> {
    fn new(counts: &'a ConfusionCounts, cfg: FitConfig) -> Self {
        let k = counts.k();
        let row_tot: Vec<f64> = counts.row_sums().iter().map(|&v| v as f64).collect();
        let mut col_tot = vec![0.0; k];
        for i in 0..k {
            for (j, c) in col_tot.iter_mut().enumerate() {
                *c += counts.get(i, j) as f64;
            }
        }
        Self {
            counts,
            cfg,
            k,
            idx: off_diagonal_index(k),
            prior: row_mass(counts),
            row_tot,
            col_tot,
            n_total: counts.total() as f64,
            warm: None,
        }
    }

    fn solve(&mut self, theta: &[f64]) -> (DistortionMatrix, BaState) {
        let rho = rho_from_theta(self.k, &self.idx, theta);
        let lambda = self.cfg.fit_lambda;
        let mut start = self.warm.clone();
        let mut st = None;
        for _ in 0..KKT_ROUNDS {
            let sol = ba_warm(&rho, lambda, &self.prior, start.as_deref(), self.cfg.ba);
            let polished = polish_fixed_point(&rho, lambda, &self.prior, &sol.output_marginal);
            let revive = kkt_violations(&polished, &self.prior);
            let done = revive.is_empty();
            if !done {
                let mut p = polished.p.clone();
                revive.iter().for_each(|&y| p[y] = p[y].max(REVIVE_MASS));
                let s: f64 = p.iter().sum();
                p.iter_mut().for_each(|v| *v /= s);
                start = Some(p);
            }
            st = Some(polished);
            if done {
                break;
            }
        }
        (rho, st.expect("at least one round"))
    }

    fn penalty(&self, theta: &[f64]) -> f64 {
        self.cfg.prior_strength * theta.iter().map(|t| t * t).sum::<f64>()
    }

    /// Log posterior without touching the warm start.
    fn log_posterior_cold(&mut self, theta: &[f64]) -> f64 {
        let saved = self.warm.clone();
        let (_, st) = self.solve(theta);
        self.warm = saved;
        log_lik(self.counts, &st.q) - self.penalty(theta)
    }

    /// Log posterior and its θ-gradient. Updates the warm start when finite.
    fn evaluate(&mut self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let (rho, st) = self.solve(theta);
        let value = log_lik(self.counts, &st.q) - self.penalty(theta);
        if !value.is_finite() {
            return value;
        }
        match self.cfg.gradient {
            GradientMode::Analytic => self.analytic_gradient(&rho, &st, theta, grad),
            GradientMode::CentralDifference => {
                self.warm = Some(st.p.clone());
                let h = self.cfg.fd_step;
                let mut t = theta.to_vec();
                for i in 0..t.len() {
                    let orig = t[i];
                    t[i] = orig + h;
                    let fp = self.log_posterior_cold(&t);
                    t[i] = orig - h;
                    let fm = self.log_posterior_cold(&t);
                    t[i] = orig;
                    grad[i] = (fp - fm) / (2.0 * h);
                }
            }
        }
        self.warm = Some(st.p);
        value
    }

    fn analytic_gradient(&self, rho: &DistortionMatrix, st: &BaState, theta: &[f64], grad: &mut [f64]) {
        let k = self.k;
        let lambda = self.cfg.fit_lambda;
        let (p, w, z, q) = (&st.p, &st.w, &st.z, &st.q);

        // Explicit ∂L/∂p and the Jacobian of the marginal map.
        let c = column_factors(st, &self.prior);
        let mut g_p = vec![0.0; k];
        for y in 0..k {
            let mut s_r = 0.0;
            for x in 0..k {
                if z[x] > 0.0 {
                    s_r += self.row_tot[x] * w[x * k + y] / z[x];
                }
            }
            let explicit = if self.col_tot[y] > 0.0 {
                self.col_tot[y] / p[y]
            } else {
                0.0
            };
            g_p[y] = explicit - s_r;
        }
        let a = identity_minus_jacobian(st, &self.prior, &c).transpose();
        let b = DVector::from_vec(g_p);
        let v = a
            .clone()
            .lu()
            .solve(&b)
            .filter(|v| v.iter().all(|x| x.is_finite()))
            .or_else(|| a.svd(true, true).solve(&b, 1e-12).ok())
            .unwrap_or_else(|| DVector::zeros(k));

        let s: Vec<f64> = (0..k)
            .map(|x| (0..k).map(|y| q[x * k + y] * v[y]).sum())
            .collect();
        for (gi, (&(aa, bb), &t)) in grad.iter_mut().zip(self.idx.iter().zip(theta)) {
            let qab = q[aa * k + bb];
            let n_ab = self.counts.get(aa, bb) as f64;
            let d_rho = lambda * (self.row_tot[aa] * qab - n_ab + self.prior[aa] * qab * (s[aa] - v[bb]));
            *gi = d_rho * rho.get(aa, bb) - 2.0 * self.cfg.prior_strength * t;
        }
    }
}

/// Floor on initial costs from the inversion scheme.
const INIT_RHO_FLOOR: f64 = 1e-4;
/// Identity weight mixed into the inverted channel so that the diagonal keeps
/// its advantage even when every row looks like the marginal.
const INIT_IDENTITY_MIX: f64 = 0.1;

fn initial_theta(counts: &ConfusionCounts, cfg: &FitConfig, scheme: InitScheme) -> Result<Vec<f64>, FitError> {
    let sm = smoothed_channel(counts, cfg.init_alpha)?;
    let idx = off_diagonal_index(counts.k());
    Ok(match scheme {
        InitScheme::SmoothedNegLog => idx
            .into_iter()
            .map(|(i, j)| (-(sm.get(i, j).max(1e-6)).ln() + 1e-6).ln())
            .collect(),
        InitScheme::FixedPointInversion => {
            // q_ij = p_j e^{−λρ_ij} / Z_i holds exactly for
            // ρ_ij = [log(C_ii/p_i) − log(C_ij/p_j)] / λ with p = πC.
            let k = counts.k();
            let mixed = sm
                .matrix()
                .scale(1.0 - INIT_IDENTITY_MIX)
                .add_scaled(&SquareMatrix::identity(k), INIT_IDENTITY_MIX);
            let target = Channel::from_parts_unchecked(mixed, row_mass(counts));
            let p = target.output_marginal();
            idx.into_iter()
                .map(|(i, j)| {
                    let gain = (target.get(i, i) / p[i]).ln() - (target.get(i, j) / p[j]).ln();
                    (gain / cfg.fit_lambda).max(INIT_RHO_FLOOR).ln()
                })
                .collect()
        }
    })
}

/// Equal off-diagonal costs, starting from the accuracy-matched level and
/// doubling until the objective is finite. Both seeds above can put the BA
/// optimum on a dead output that still has counts, and small equal costs
/// collapse the BA channel onto the marginal.
fn uniform_theta(counts: &ConfusionCounts, cfg: &FitConfig, prob: &mut Problem) -> Vec<f64> {
    let k = counts.k();
    let acc = (0..k)
        .map(|i| {
            let row = counts.row(i);
            row[i] as f64 / row.iter().sum::<u64>().max(1) as f64
        })
        .sum::<f64>()
        / k as f64;
    let acc = acc.clamp(1.0 / k as f64, 0.99);
    let mut rho = (((k - 1) as f64 * acc / (1.0 - acc)).ln() / cfg.fit_lambda).max(1.0);
    let mut theta = vec![rho.ln(); k * (k - 1)];
    for _ in 0..6 {
        if prob.log_posterior_cold(&theta).is_finite() {
            break;
        }
        rho *= 2.0;
        theta.fill(rho.ln());
    }
    theta
}

/// Fits ρ̂ by maximizing the log posterior
/// `Σ N_ij log q_λ(j|i) − prior_strength · Σ_{i≠j} θ_ij²`.
///
/// Returns the best iterate with `converged = false` when the optimizer
/// stops on an iteration limit or a failed line search.
pub fn map_fit_distortion(counts: &ConfusionCounts, cfg: &FitConfig) -> Result<FitResult, FitError> {
    cfg.validate()?;
    let norm = normalize_rows(counts, ZeroRowPolicy::Error)?;
    let diag = collapse_flag(&norm.channel);
    if diag.flagged {
        return Err(FitError::CollapsedInput {
            mean_row_entropy: diag.mean_row_entropy,
            mean_row_max: diag.mean_row_max,
        });
    }

    let mut prob = Problem::new(counts, *cfg);
    let mut theta0 = initial_theta(counts, cfg, cfg.init)?;
    if cfg.init != InitScheme::FixedPointInversion && !prob.log_posterior_cold(&theta0).is_finite() {
        // The seed's BA optimum leaves observed responses with zero mass.
        theta0 = initial_theta(counts, cfg, InitScheme::FixedPointInversion)?;
    }
    if !prob.log_posterior_cold(&theta0).is_finite() {
        theta0 = uniform_theta(counts, cfg, &mut prob);
    }
    let scale = prob.n_total;
    let mut objective = |theta: &[f64], grad: &mut [f64]| {
        let v = prob.evaluate(theta, grad);
        grad.iter_mut().for_each(|g| *g = -*g / scale);
        -v / scale
    };
    let out = lbfgs::minimize(
        &mut objective,
        theta0,
        LbfgsOptions {
            memory: cfg.lbfgs_memory,
            max_iter: cfg.max_iter,
            max_evals: cfg.max_evals,
            grad_tol: cfg.grad_tol,
            ftol: cfg.ftol,
        },
    );
    if !out.f.is_finite() {
        return Err(FitError::NonFinite("initial point"));
    }

    let k = counts.k();
    let rho_hat = rho_from_theta(k, &off_diagonal_index(k), &out.x);
    if !rho_hat.matrix().is_finite() {
        return Err(FitError::NonFinite("optimum"));
    }
    let log_posterior = -out.f * scale;
    let penalty = cfg.prior_strength * out.x.iter().map(|t| t * t).sum::<f64>();
    Ok(FitResult {
        rho_hat,
        log_posterior,
        log_likelihood: log_posterior + penalty,
        converged: out.reason.converged(),
        stop_reason: stop_label(out.reason).to_string(),
        iterations: out.iterations,
        evaluations: out.evaluations,
        grad_inf: out.grad_inf,
        trace: out.trace.iter().map(|f| -f * scale).collect(),
    })
}

fn stop_label(r: StopReason) -> &'static str {
    match r {
        StopReason::GradientTolerance => "gradient_tolerance",
        StopReason::FunctionTolerance => "function_tolerance",
        StopReason::MaxIterations => "max_iterations",
        StopReason::MaxEvaluations => "max_evaluations",
        StopReason::LineSearchFailed => "line_search_failed",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryDiagnostics {
    /// `None` when either symmetric component is constant.
    pub corr_sym: Option<f64>,
    /// `None` when either antisymmetric component is constant.
    pub corr_antisym: Option<f64>,
    pub strict_pass: bool,
    pub sym_zero_variance: bool,
    pub antisym_zero_variance: bool,
}

/// Correlates the symmetric and antisymmetric parts of two cost matrices over
/// their strict upper triangles.
pub fn recovery_diagnostics(rho_true: &DistortionMatrix, rho_hat: &DistortionMatrix) -> RecoveryDiagnostics {
    assert_eq!(rho_true.k(), rho_hat.k(), "dimension mismatch");
    let corr = |a: &SquareMatrix, b: &SquareMatrix| -> Result<f64, StatsError> {
        pearson(&a.upper_triangle(), &b.upper_triangle())
    };
    let (t, h) = (rho_true.matrix(), rho_hat.matrix());
    let sym = corr(&t.symmetric_part(), &h.symmetric_part());
    let anti = corr(&t.antisymmetric_part(), &h.antisymmetric_part());
    let corr_sym = sym.as_ref().ok().copied();
    RecoveryDiagnostics {
        corr_sym,
        corr_antisym: anti.as_ref().ok().copied(),
        strict_pass: corr_sym.is_some_and(|c| c > STRICT_RECOVERY_THRESHOLD),
        sym_zero_variance: matches!(sym, Err(StatsError::ZeroVariance)),
        antisym_zero_variance: matches!(anti, Err(StatsError::ZeroVariance)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::BlockKey;
    use crate::rd::ba_channel;

    fn counts(k: usize, flat: Vec<u64>) -> ConfusionCounts {
        ConfusionCounts::new(k, flat, BlockKey::simulated()).unwrap()
    }

    #[test]
    fn off_diagonal_dominant_rows_still_fit() {
        // Both seeded starts leave a response with counts at zero BA mass.
        let c = counts(3, vec![21, 32, 10, 34, 21, 2, 2, 15, 21]);
        let mut prob = Problem::new(&c, FitConfig::default());
        for s in [InitScheme::SmoothedNegLog, InitScheme::FixedPointInversion] {
            let t = initial_theta(&c, &FitConfig::default(), s).unwrap();
            assert!(!prob.log_posterior_cold(&t).is_finite());
        }
        let fit = map_fit_distortion(&c, &FitConfig::default()).unwrap();
        assert!(fit.log_likelihood.is_finite());
    }

    #[test]
    fn near_chance_rows_still_fit() {
        // Tiny equal costs would send every row to the heaviest response.
        let c = counts(3, vec![21, 5, 17, 15, 20, 23, 22, 37, 22]);
        let fit = map_fit_distortion(&c, &FitConfig::default()).unwrap();
        assert!(fit.log_likelihood.is_finite());
    }

    fn sample_rho() -> DistortionMatrix {
        DistortionMatrix::from_rows(&[
            [0.0, 1.2, 0.4, 2.0],
            [0.3, 0.0, 1.1, 0.9],
            [1.7, 0.2, 0.0, 0.6],
            [0.8, 1.4, 0.5, 0.0],
        ])
        .unwrap()
    }

    /// Costs large enough that every output keeps BA mass at λ = 1.
    fn full_support_rho() -> DistortionMatrix {
        DistortionMatrix::from_rows(&[
            [0.0, 2.4, 1.8, 3.0],
            [1.6, 0.0, 2.2, 2.9],
            [2.7, 1.5, 0.0, 2.0],
            [2.1, 2.8, 1.7, 0.0],
        ])
        .unwrap()
    }

    fn toy_counts() -> ConfusionCounts {
        counts(4, vec![60, 12, 20, 8, 15, 50, 10, 25, 5, 30, 55, 10, 18, 6, 22, 54])
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let c = toy_counts();
        let cfg = FitConfig {
            ba: BaOptions {
                tol: 1e-14,
                max_iter: 100_000,
            },
            ..FitConfig::default()
        };
        let theta: Vec<f64> = off_diagonal_index(4)
            .iter()
            .map(|&(i, j)| full_support_rho().get(i, j).ln())
            .collect();
        let mut ga = vec![0.0; theta.len()];
        let mut gc = vec![0.0; theta.len()];
        Problem::new(&c, cfg).evaluate(&theta, &mut ga);
        Problem::new(
            &c,
            FitConfig {
                gradient: GradientMode::CentralDifference,
                ..cfg
            },
        )
        .evaluate(&theta, &mut gc);
        let scale = gc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in ga.iter().zip(&gc) {
            assert!((a - b).abs() < 1e-5 * scale, "analytic {a} vs numeric {b}");
        }
    }

    #[test]
    fn likelihood_is_multinomial_up_to_constant() {
        use statrs::function::gamma::ln_gamma;
        let c = counts(2, vec![70, 30, 20, 80]);
        let rho = DistortionMatrix::from_rows(&[[0.0, 0.7], [1.3, 0.0]]).unwrap();
        let tight = BaOptions {
            tol: 1e-15,
            max_iter: 1_000_000,
        };
        let ll = channel_log_likelihood(&c, &rho, 1.0, tight);
        let sol = ba_channel(&rho, 1.0, &[0.5, 0.5], tight).unwrap();
        let q = sol.channel.matrix();
        // Row-wise multinomial log-mass minus its combinatorial constant.
        let mut log_mass = 0.0;
        let mut constant = 0.0;
        for i in 0..2 {
            let r = c.row(i).iter().sum::<u64>() as f64;
            constant += ln_gamma(r + 1.0);
            for j in 0..2 {
                let n = c.get(i, j) as f64;
                constant -= ln_gamma(n + 1.0);
                log_mass += n * q[(i, j)].ln();
            }
        }
        log_mass += constant;
        assert!((ll - (log_mass - constant)).abs() < 1e-9, "{ll} vs {}", log_mass - constant);
    }

    #[test]
    fn fit_recovers_generating_costs_with_many_trials() {
        // Expected counts from a known channel; the MLE is the generator.
        let rho = full_support_rho();
        let prior = [0.25; 4];
        let sol = ba_channel(&rho, 1.0, &prior, BaOptions::default()).unwrap();
        assert!(sol.output_marginal.iter().all(|&p| p > 1e-2));
        let flat: Vec<u64> = sol
            .channel
            .matrix()
            .as_slice()
            .iter()
            .map(|v| (v * 1e6).round() as u64)
            .collect();
        let c = counts(4, flat);
        let fit = map_fit_distortion(&c, &FitConfig::default()).unwrap();
        assert!(fit.rho_hat.matrix().max_abs_diff(rho.matrix()) < 1e-2, "{:?}", fit.rho_hat);
        let diag = recovery_diagnostics(&rho, &fit.rho_hat);
        assert!(diag.corr_sym.unwrap() > 0.99 && diag.corr_antisym.unwrap() > 0.99);
        assert!(diag.strict_pass);
    }

    #[test]
    fn newton_polish_finishes_a_loose_ba_iterate() {
        let rho = full_support_rho();
        let prior = [0.1, 0.2, 0.3, 0.4];
        let loose = ba_warm(&rho, 1.0, &prior, None, BaOptions { tol: 1e-3, max_iter: 10_000 });
        let tight = ba_warm(&rho, 1.0, &prior, None, BaOptions { tol: 1e-15, max_iter: 100_000 });
        let st = polish_fixed_point(&rho, 1.0, &prior, &loose.output_marginal);
        let c = column_factors(&st, &prior);
        assert!(fixed_point_residual(&st, &c) < 1e-15);
        let diff = st.p.iter().zip(&tight.output_marginal).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn newton_polish_zeroes_decaying_outputs() {
        // Output 2 is cheap only for a rare input, so it is dead at the optimum.
        let rho = DistortionMatrix::from_rows(&[[0.0, 1.0, 5.0], [1.0, 0.0, 5.0], [0.5, 0.5, 0.0]]).unwrap();
        let prior = [0.49, 0.49, 0.02];
        let sol = ba_warm(&rho, 1.0, &prior, None, BaOptions { tol: 1e-6, max_iter: 10_000 });
        assert!(sol.output_marginal[2] > 0.0);
        let st = polish_fixed_point(&rho, 1.0, &prior, &sol.output_marginal);
        assert!(st.p[2] < 1e-20, "{}", st.p[2]);
        assert!(kkt_violations(&st, &prior).is_empty());
    }

    #[test]
    fn inversion_seed_is_a_fixed_point() {
        let c = toy_counts();
        let cfg = FitConfig::default();
        let theta = initial_theta(&c, &cfg, InitScheme::FixedPointInversion).unwrap();
        assert!(theta.iter().all(|t| t.exp() > INIT_RHO_FLOOR), "no cost hits the floor here");
        let mut prob = Problem::new(&c, cfg);
        let (_, st) = prob.solve(&theta);
        let mixed = smoothed_channel(&c, cfg.init_alpha)
            .unwrap()
            .matrix()
            .scale(1.0 - INIT_IDENTITY_MIX)
            .add_scaled(&SquareMatrix::identity(4), INIT_IDENTITY_MIX);
        let q = SquareMatrix::from_flat(4, st.q.clone()).unwrap();
        assert!(q.max_abs_diff(&mixed) < 1e-9);
    }

    #[test]
    fn accepted_iterates_never_decrease_log_posterior() {
        let fit = map_fit_distortion(&toy_counts(), &FitConfig::default()).unwrap();
        assert!(fit.trace.windows(2).all(|w| w[1] >= w[0]));
        assert!(fit.converged, "{}", fit.stop_reason);
        let m = fit.rho_hat.matrix();
        assert!((0..4).all(|i| m[(i, i)] == 0.0));
        assert!(m.as_slice().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn symmetric_binary_counts_give_equal_costs() {
        let fit = map_fit_distortion(&counts(2, vec![900, 100, 100, 900]), &FitConfig::default()).unwrap();
        let (a, b) = (fit.rho_hat.get(0, 1), fit.rho_hat.get(1, 0));
        assert!((a - b).abs() / (0.5 * (a + b)) < 0.1);
    }

    #[test]
    fn collapsed_input_is_rejected() {
        let r = map_fit_distortion(&counts(2, vec![100, 0, 0, 100]), &FitConfig::default());
        assert!(matches!(r, Err(FitError::CollapsedInput { .. })));
    }

    #[test]
    fn recovery_reference_cases() {
        let t = sample_rho();
        let same = recovery_diagnostics(&t, &t);
        assert!((same.corr_sym.unwrap() - 1.0).abs() < 1e-12);
        assert!((same.corr_antisym.unwrap() - 1.0).abs() < 1e-12);
        assert!(same.strict_pass);

        let tr = recovery_diagnostics(&t, &t.transpose());
        assert!((tr.corr_sym.unwrap() - 1.0).abs() < 1e-12);
        assert!((tr.corr_antisym.unwrap() + 1.0).abs() < 1e-12);

        let sym = DistortionMatrix::new(t.matrix().symmetric_part()).unwrap();
        let d = recovery_diagnostics(&sym, &t);
        assert_eq!(d.corr_antisym, None);
        assert!(d.antisym_zero_variance);
    }
}
