//! Two-sample location and proportion tests.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::{floor_p, mean, midranks, sample_variance, tie_sizes, StatsError, TestResult};

/// Pooled sizes up to this are enumerated exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Exact for pooled n ≤ 12, normal approximation above.
    Auto,
    Exact,
    Normal,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Two-sided Wilcoxon rank-sum (Mann–Whitney) test. The statistic is
/// `U = R_x − n_x(n_x + 1)/2`.
pub fn wilcoxon_rank_sum(x: &[f64], y: &[f64]) -> Result<TestResult, StatsError> {
    wilcoxon_rank_sum_with(x, y, WilcoxonMethod::Auto)
}

pub fn wilcoxon_rank_sum_with(
    x: &[f64],
    y: &[f64],
    method: WilcoxonMethod,
) -> Result<TestResult, StatsError> {
    if x.is_empty() || y.is_empty() {
        return Err(StatsError::TooFewObservations {
            needed: 1,
            got: x.len().min(y.len()),
        });
    }
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::InvalidInput("non-finite observation".into()));
    }
    if pooled.iter().all(|&v| v == pooled[0]) {
        return Err(StatsError::DegenerateSample);
    }
    let (nx, ny) = (x.len(), y.len());
    let n = nx + ny;
    let ranks = midranks(&pooled);
    let rx: f64 = ranks[..nx].iter().sum();
    let u = rx - (nx * (nx + 1)) as f64 / 2.0;

    let exact = match method {
        WilcoxonMethod::Auto => n <= WILCOXON_EXACT_MAX_N,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    if exact && n > 24 {
        return Err(StatsError::InvalidInput(format!(
            "exact enumeration limited to pooled n ≤ 24, got {n}"
        )));
    }
    let (p, label) = if exact {
        (exact_p(&ranks, nx, rx), "wilcoxon rank-sum (exact)")
    } else {
        let ties: f64 = tie_sizes(&pooled)
            .iter()
            .map(|&t| (t * t * t - t) as f64)
            .sum();
        let (nxf, nyf, nf) = (nx as f64, ny as f64, n as f64);
        let var = nxf * nyf / 12.0 * ((nf + 1.0) - ties / (nf * (nf - 1.0)));
        let z = ((u - nxf * nyf / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
        (
            (2.0 * std_normal().sf(z)).min(1.0),
            "wilcoxon rank-sum (normal, tie and continuity corrected)",
        )
    };
    Ok(TestResult {
        statistic: u,
        p_value: floor_p(p),
        p_value_raw: p,
        method: label.into(),
        estimate: None,
        effect_ci: None,
        df: None,
    })
}

/// Share of the `C(n, n_x)` rank assignments at least as far from the null
/// mean as the observed rank sum.
fn exact_p(ranks: &[f64], nx: usize, rx: f64) -> f64 {
    let n = ranks.len();
    let centre = nx as f64 * (n as f64 + 1.0) / 2.0;
    let observed = (rx - centre).abs() - 1e-9;
    let (mut hits, mut total) = (0u64, 0u64);
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != nx {
            continue;
        }
        total += 1;
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if (s - centre).abs() >= observed {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

/// Welch two-sample t-test with Satterthwaite degrees of freedom and a 95%
/// interval for `mean(x) − mean(y)`.
pub fn welch_t(x: &[f64], y: &[f64]) -> Result<TestResult, StatsError> {
    if x.len() < 2 || y.len() < 2 {
        return Err(StatsError::TooFewObservations {
            needed: 2,
            got: x.len().min(y.len()),
        });
    }
    let (vx, vy) = (sample_variance(x), sample_variance(y));
    if vx == 0.0 || vy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (ax, ay) = (vx / nx, vy / ny);
    let se = (ax + ay).sqrt();
    let diff = mean(x) - mean(y);
    let t = diff / se;
    let df = (ax + ay).powi(2) / (ax * ax / (nx - 1.0) + ay * ay / (ny - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    let crit = dist.inverse_cdf(0.975);
    Ok(TestResult {
        statistic: t,
        p_value: floor_p(p),
        p_value_raw: p,
        method: "welch t (satterthwaite df)".into(),
        estimate: Some(diff),
        effect_ci: Some((diff - crit * se, diff + crit * se)),
        df: Some(df),
    })
}

/// Pooled two-proportion z-test of `k1/n1` against `k2/n2`. The interval is
/// the unpooled Wald interval for the difference.
pub fn two_sample_proportion_test(k1: u64, n1: u64, k2: u64, n2: u64) -> Result<TestResult, StatsError> {
    if n1 == 0 || n2 == 0 || k1 > n1 || k2 > n2 {
        return Err(StatsError::InvalidInput(format!(
            "counts {k1}/{n1} and {k2}/{n2} are not proportions"
        )));
    }
    let (p1, p2) = (k1 as f64 / n1 as f64, k2 as f64 / n2 as f64);
    let pooled = (k1 + k2) as f64 / (n1 + n2) as f64;
    if pooled <= 0.0 || pooled >= 1.0 {
        return Err(StatsError::DegenerateProportions);
    }
    let (f1, f2) = (n1 as f64, n2 as f64);
    let se0 = (pooled * (1.0 - pooled) * (1.0 / f1 + 1.0 / f2)).sqrt();
    let z = (p1 - p2) / se0;
    let p = (2.0 * std_normal().sf(z.abs())).min(1.0);
    let se = (p1 * (1.0 - p1) / f1 + p2 * (1.0 - p2) / f2).sqrt();
    let crit = std_normal().inverse_cdf(0.975);
    let diff = p1 - p2;
    Ok(TestResult {
        statistic: z,
        p_value: floor_p(p),
        p_value_raw: p,
        method: "two-sample proportion z (pooled)".into(),
        estimate: Some(diff),
        effect_ci: Some((diff - crit * se, diff + crit * se)),
        df: None,
    })
}
