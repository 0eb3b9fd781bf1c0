//! Rate–distortion frontiers by Blahut–Arimoto.
//!
//! For a cost matrix ρ and inverse temperature λ the optimal channel is the
//! fixed point of
//!
//! ```text
//! q(y|x) ∝ p(y) exp(−λ ρ(x, y)),     p(y) = Σ_x p(x) q(y|x).
//! ```
//!
//! Sweeping λ over a log-spaced grid traces the parametric curve `R(D)`,
//! which is summarized by the median finite-difference slope (β), the sample
//! variance of those slopes (κ) and the trapezoidal area under the curve.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::{mutual_information_parts, Channel};
use crate::matrix::SquareMatrix;

/// Segments whose distortion change is below this are skipped when taking
/// slopes, and points closer than this in D are merged for the area.
pub const DEGENERATE_SEGMENT_TOL: f64 = 1e-12;

/// Warm starts never hand a column less mass than this, so a column that died
/// at small λ can come back at large λ.
const WARM_START_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RdError {
    #[error("Blahut–Arimoto did not converge in {} sweeps", .0.iterations)]
    NotConverged(Box<BaSolution>),
    #[error("inverse temperature must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("invalid lambda grid: {0}")]
    InvalidGrid(String),
    #[error("invalid distortion matrix: {0}")]
    InvalidDistortion(String),
    #[error("prior does not match the distortion matrix: {0}")]
    InvalidPrior(String),
    #[error("frontier has only {usable} usable segments; at least 2 are needed")]
    DegenerateFrontier { usable: usize },
    #[error("target rate {target} nats is outside the reachable range [{low}, {high}) on the bracket")]
    OutOfBracket { target: f64, low: f64, high: f64 },
}

/// Nonnegative K×K cost matrix with zero diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionMatrix(SquareMatrix);

impl DistortionMatrix {
    pub fn new(m: SquareMatrix) -> Result<Self, RdError> {
        for i in 0..m.dim() {
            if m[(i, i)] != 0.0 {
                return Err(RdError::InvalidDistortion(format!(
                    "diagonal entry {i} is {}",
                    m[(i, i)]
                )));
            }
        }
        if let Some(v) = m.as_slice().iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(RdError::InvalidDistortion(format!("entry {v} is negative or non-finite")));
        }
        Ok(Self(m))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, RdError> {
        let m = SquareMatrix::from_rows(rows)
            .ok_or_else(|| RdError::InvalidDistortion("rows are not square".into()))?;
        Self::new(m)
    }

    /// Off-diagonal 1, diagonal 0.
    pub fn hamming(k: usize) -> Self {
        Self(SquareMatrix::from_fn(k, |i, j| if i == j { 0.0 } else { 1.0 }))
    }

    pub fn zeros(k: usize) -> Self {
        Self(SquareMatrix::zeros(k))
    }

    /// Callers guarantee the invariants.
    pub(crate) fn from_matrix_unchecked(m: SquareMatrix) -> Self {
        debug_assert!((0..m.dim()).all(|i| m[(i, i)] == 0.0));
        Self(m)
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.0.dim()
    }

    #[inline]
    pub fn matrix(&self) -> &SquareMatrix {
        &self.0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// `c·ρ` for `c ≥ 0`.
    pub fn scaled(&self, c: f64) -> Self {
        assert!(c >= 0.0 && c.is_finite());
        Self(self.0.scale(c))
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }
}

/// Solver settings shared by every Blahut–Arimoto call.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaOptions {
    /// Converged when the largest change in `q` between sweeps is below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for BaOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaSolution {
    pub channel: Channel,
    /// Output marginal of `channel` under its prior.
    pub output_marginal: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl BaSolution {
    /// `I(X;Y)` in nats.
    pub fn rate(&self) -> f64 {
        mutual_information_parts(self.channel.matrix(), self.channel.prior())
    }

    /// `Σ_x p(x) Σ_y q(y|x) ρ(x, y)`.
    pub fn distortion(&self, rho: &DistortionMatrix) -> f64 {
        expected_distortion(self.channel.matrix(), self.channel.prior(), rho)
    }
}

pub fn expected_distortion(q: &SquareMatrix, prior: &[f64], rho: &DistortionMatrix) -> f64 {
    q.rows()
        .zip(rho.matrix().rows())
        .zip(prior)
        .map(|((qr, rr), &px)| px * qr.iter().zip(rr).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

fn check_inputs(rho: &DistortionMatrix, lambda: f64, prior: &[f64]) -> Result<(), RdError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(RdError::InvalidLambda(lambda));
    }
    if prior.len() != rho.k() {
        return Err(RdError::InvalidPrior(format!(
            "length {} for K = {}",
            prior.len(),
            rho.k()
        )));
    }
    let s: f64 = prior.iter().sum();
    if prior.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
        return Err(RdError::InvalidPrior(format!("not a distribution (sum {s})")));
    }
    Ok(())
}

/// Runs one Blahut–Arimoto solve from the given initial output marginal.
/// `monitor` receives `(sweep, D + R/λ)` after each sweep.
pub(crate) fn solve_from(
    rho: &DistortionMatrix,
    lambda: f64,
    prior: &[f64],
    init: &[f64],
    opts: BaOptions,
    mut monitor: Option<&mut dyn FnMut(usize, f64)>,
) -> BaSolution {
    let k = rho.k();
    let r = rho.matrix().as_slice();
    let w: Vec<f64> = r.iter().map(|&v| (-lambda * v).exp()).collect();

    let mut p: Vec<f64> = init.to_vec();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);

    let mut q = vec![0.0; k * k];
    let mut q_prev = vec![f64::NAN; k * k];
    let mut p_next = vec![0.0; k];
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=opts.max_iter.max(1) {
        iterations = it;
        p_next.iter_mut().for_each(|v| *v = 0.0);
        for x in 0..k {
            let wr = &w[x * k..(x + 1) * k];
            let qr = &mut q[x * k..(x + 1) * k];
            let mut z = 0.0;
            for y in 0..k {
                let v = p[y] * wr[y];
                qr[y] = v;
                z += v;
            }
            if z > 0.0 && z.is_finite() {
                let inv = 1.0 / z;
                qr.iter_mut().for_each(|v| *v *= inv);
            } else {
                // Every supported column underflowed; redo the row in logs.
                let rr = &r[x * k..(x + 1) * k];
                log_domain_row(&p, rr, lambda, qr);
            }
            let px = prior[x];
            for y in 0..k {
                p_next[y] += px * qr[y];
            }
        }
        let delta = q
            .iter()
            .zip(&q_prev)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, |m: f64, d| if d.is_nan() { f64::INFINITY } else { m.max(d) });
        std::mem::swap(&mut p, &mut p_next);
        if let Some(cb) = monitor.as_deref_mut() {
            let qm = SquareMatrix::from_flat(k, q.clone()).expect("k*k buffer");
            let rate = mutual_information_parts(&qm, prior);
            let dist = expected_distortion(&qm, prior, rho);
            cb(it, dist + rate / lambda);
        }
        if delta < opts.tol {
            converged = true;
            break;
        }
        std::mem::swap(&mut q, &mut q_prev);
    }

    let channel = Channel::from_parts_unchecked(
        SquareMatrix::from_flat(k, q).expect("k*k buffer"),
        prior.to_vec(),
    );
    BaSolution {
        channel,
        output_marginal: p,
        converged,
        iterations,
    }
}

fn log_domain_row(p: &[f64], rho_row: &[f64], lambda: f64, out: &mut [f64]) {
    let logs: Vec<f64> = p
        .iter()
        .zip(rho_row)
        .map(|(&py, &r)| if py > 0.0 { py.ln() - lambda * r } else { f64::NEG_INFINITY })
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        // No supported column at all: fall back to the cheapest response.
        let best = rho_row
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        out.iter_mut().enumerate().for_each(|(i, v)| *v = (i == best) as u8 as f64);
        return;
    }
    let mut z = 0.0;
    for (o, l) in out.iter_mut().zip(&logs) {
        *o = (l - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|v| *v /= z);
}

fn uniform(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

fn floored(p: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = p.iter().map(|&x| x.max(WARM_START_FLOOR)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Blahut–Arimoto optimal channel for `ρ` at inverse temperature `lambda`,
/// started from the uniform output marginal.
///
/// A run that exhausts `opts.max_iter` returns
/// [`RdError::NotConverged`] carrying the last iterate.
pub fn ba_channel(
    rho: &DistortionMatrix,
    lambda: f64,
    prior: &[f64],
    opts: BaOptions,
) -> Result<BaSolution, RdError> {
    check_inputs(rho, lambda, prior)?;
    let sol = solve_from(rho, lambda, prior, &uniform(rho.k()), opts, None);
    if sol.converged {
        Ok(sol)
    } else {
        Err(RdError::NotConverged(Box::new(sol)))
    }
}

/// Like [`ba_channel`], warm-started from `init` and reporting `D + R/λ`
/// after every sweep. Returns the solution whether or not it converged.
pub fn ba_channel_monitored(
    rho: &DistortionMatrix,
    lambda: f64,
    prior: &[f64],
    init: Option<&[f64]>,
    opts: BaOptions,
    monitor: &mut dyn FnMut(usize, f64),
) -> Result<BaSolution, RdError> {
    check_inputs(rho, lambda, prior)?;
    let start = init.map(floored).unwrap_or_else(|| uniform(rho.k()));
    Ok(solve_from(rho, lambda, prior, &start, opts, Some(monitor)))
}

/// Warm-started solve that never fails on non-convergence; used by fitting
/// and sweeps that record the flag themselves.
pub(crate) fn ba_warm(
    rho: &DistortionMatrix,
    lambda: f64,
    prior: &[f64],
    init: Option<&[f64]>,
    opts: BaOptions,
) -> BaSolution {
    let start = init.map(floored).unwrap_or_else(|| uniform(rho.k()));
    let mut sol = solve_from(rho, lambda, prior, &start, opts, None);
    // An output that died at the previous λ regrows from the floor so slowly
    // that the q-change test passes early. Lift any output the KKT conditions
    // say should grow and solve again.
    for _ in 0..REVIVE_ROUNDS {
        let grow = dead_but_growing(rho, lambda, prior, &sol.output_marginal);
        if grow.is_empty() {
            break;
        }
        let mut p = sol.output_marginal.clone();
        grow.iter().for_each(|&y| p[y] = p[y].max(REVIVE_MASS));
        let iterations = sol.iterations;
        sol = solve_from(rho, lambda, prior, &p, opts, None);
        sol.iterations += iterations;
    }
    sol
}

const REVIVE_ROUNDS: usize = 3;
const REVIVE_MASS: f64 = 1e-3;

/// Outputs below `1e-6` mass with `c_y = Σ_x π_x e^{−λρ_xy} / Z_x > 1`.
fn dead_but_growing(rho: &DistortionMatrix, lambda: f64, prior: &[f64], p: &[f64]) -> Vec<usize> {
    let k = rho.k();
    let m = rho.matrix();
    let z: Vec<f64> = (0..k)
        .map(|x| (0..k).map(|y| p[y] * (-lambda * m[(x, y)]).exp()).sum())
        .collect();
    (0..k)
        .filter(|&y| {
            p[y] < 1e-6 && {
                let c: f64 = (0..k).map(|x| prior[x] * (-lambda * m[(x, y)]).exp() / z[x]).sum();
                c.is_finite() && c > 1.0 + 1e-9
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub lambda: f64,
    /// Nats.
    pub rate: f64,
    pub distortion: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdFrontier {
    points: Vec<RdPoint>,
    prior: Vec<f64>,
}

impl RdFrontier {
    /// Wraps precomputed points; λ must be strictly increasing.
    pub fn from_points(points: Vec<RdPoint>, prior: Vec<f64>) -> Result<Self, RdError> {
        if points.windows(2).any(|w| !(w[1].lambda > w[0].lambda)) {
            return Err(RdError::InvalidGrid("lambda must be strictly increasing".into()));
        }
        Ok(Self { points, prior })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn all_converged(&self) -> bool {
        self.points.iter().all(|p| p.converged)
    }

    pub fn n_unconverged(&self) -> usize {
        self.points.iter().filter(|p| !p.converged).count()
    }
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else {
                10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

/// 60 log-spaced points on `[0.1, 1000]`.
pub fn default_lambda_grid() -> Vec<f64> {
    log_spaced(0.1, 1e3, 60)
}

/// Solves Blahut–Arimoto at each grid value, warm-starting each from the
/// previous output marginal. Unconverged points are kept and flagged.
pub fn trace_frontier(
    rho: &DistortionMatrix,
    lambda_grid: &[f64],
    prior: &[f64],
    opts: BaOptions,
) -> Result<RdFrontier, RdError> {
    if lambda_grid.is_empty() {
        return Err(RdError::InvalidGrid("empty".into()));
    }
    if lambda_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(RdError::InvalidGrid("lambda must be strictly increasing".into()));
    }
    for &l in lambda_grid {
        check_inputs(rho, l, prior)?;
    }
    let mut points = Vec::with_capacity(lambda_grid.len());
    let mut warm: Option<Vec<f64>> = None;
    for &lambda in lambda_grid {
        let sol = ba_warm(rho, lambda, prior, warm.as_deref(), opts);
        points.push(RdPoint {
            lambda,
            rate: sol.rate(),
            distortion: sol.distortion(rho),
            converged: sol.converged,
            iterations: sol.iterations,
        });
        warm = Some(sol.output_marginal);
    }
    Ok(RdFrontier {
        points,
        prior: prior.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdSignatures {
    /// Median of the local slopes ΔR/ΔD; negative along a proper frontier.
    pub beta: f64,
    pub beta_abs: f64,
    /// Sample (n − 1) variance of the local slopes.
    pub kappa: f64,
    /// Trapezoidal area under R(D), points ordered by ascending D.
    pub auc: f64,
    /// Number of slopes entering β and κ.
    pub n_segments: usize,
}

/// Extracts β, κ and the area from a traced frontier.
///
/// Finite differences are taken between consecutive points in λ order;
/// segments with `|ΔD| < 1e-12` are skipped.
pub fn signatures(frontier: &RdFrontier) -> Result<RdSignatures, RdError> {
    let pts = frontier.points();
    let mut slopes: Vec<f64> = pts
        .windows(2)
        .filter_map(|w| {
            let dd = w[1].distortion - w[0].distortion;
            (dd.abs() >= DEGENERATE_SEGMENT_TOL).then(|| (w[1].rate - w[0].rate) / dd)
        })
        .collect();
    if slopes.len() < 2 {
        return Err(RdError::DegenerateFrontier {
            usable: slopes.len(),
        });
    }
    let n = slopes.len();
    let mean = slopes.iter().sum::<f64>() / n as f64;
    let kappa = slopes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    slopes.sort_by(f64::total_cmp);
    let beta = if n % 2 == 1 {
        slopes[n / 2]
    } else {
        0.5 * (slopes[n / 2 - 1] + slopes[n / 2])
    };
    Ok(RdSignatures {
        beta,
        beta_abs: beta.abs(),
        kappa,
        auc: frontier_area(pts),
        n_segments: n,
    })
}

fn frontier_area(pts: &[RdPoint]) -> f64 {
    let mut sorted: Vec<(f64, f64)> = pts.iter().map(|p| (p.distortion, p.rate)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut kept: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
    for pt in sorted {
        match kept.last() {
            Some(last) if pt.0 - last.0 < DEGENERATE_SEGMENT_TOL => {}
            _ => kept.push(pt),
        }
    }
    kept.windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum()
}

/// Settings for [`operating_point_slope`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RootOptions {
    pub bracket: (f64, f64),
    /// Accept when `|R(λ) − target| <` this (nats).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RootOptions {
    fn default() -> Self {
        Self {
            bracket: (1e-3, 1e5),
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub lambda: f64,
    pub rate: f64,
    pub iterations: usize,
}

/// Finds λ* with `I(X;Y)` of the optimal channel equal to `target_rate`, by
/// bisection on `log λ`. `R(λ)` is nondecreasing so the bracket test decides
/// reachability.
pub fn operating_point_slope(
    rho: &DistortionMatrix,
    target_rate: f64,
    prior: &[f64],
    root: RootOptions,
    ba: BaOptions,
) -> Result<OperatingPoint, RdError> {
    let (lo, hi) = root.bracket;
    check_inputs(rho, lo, prior)?;
    check_inputs(rho, hi, prior)?;
    if !(hi > lo) {
        return Err(RdError::InvalidGrid("bracket must satisfy lo < hi".into()));
    }
    let rate_at = |l: f64| ba_warm(rho, l, prior, None, ba).rate();
    let (r_lo, r_hi) = (rate_at(lo), rate_at(hi));
    let out = || RdError::OutOfBracket {
        target: target_rate,
        low: r_lo,
        high: r_hi,
    };
    if !target_rate.is_finite() || target_rate >= r_hi {
        return Err(out());
    }
    if target_rate <= r_lo {
        return if r_lo - target_rate <= root.tol {
            Ok(OperatingPoint {
                lambda: lo,
                rate: r_lo,
                iterations: 0,
            })
        } else {
            Err(out())
        };
    }
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut best = OperatingPoint {
        lambda: hi,
        rate: r_hi,
        iterations: 0,
    };
    for it in 1..=root.max_iter {
        let mid = 0.5 * (a + b);
        let lambda = mid.exp();
        let r = rate_at(lambda);
        best = OperatingPoint {
            lambda,
            rate: r,
            iterations: it,
        };
        if (r - target_rate).abs() < root.tol {
            break;
        }
        if r < target_rate {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(best)
}
