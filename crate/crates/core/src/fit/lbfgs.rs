//! Limited-memory BFGS with a backtracking Armijo line search.
//!
//! Minimizes; callers negate when maximizing. Only strictly improving steps
//! are accepted, so the sequence of accepted objective values is monotone.

#[derive(Clone, Copy, Debug)]
pub(crate) struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    pub max_evals: usize,
    /// Stop when the infinity norm of the gradient falls below this.
    pub grad_tol: f64,
    /// Stop when the relative decrease over one iteration falls below this.
    pub ftol: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum StopReason {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    MaxEvaluations,
    LineSearchFailed,
}

impl StopReason {
    pub(crate) fn converged(self) -> bool {
        matches!(self, Self::GradientTolerance | Self::FunctionTolerance)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_inf: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub reason: StopReason,
    /// Objective after each accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `eval(x, grad)` returns the objective and fills `grad`. Non-finite values
/// are treated as infeasible and shrink the step.
pub(crate) fn minimize(
    eval: &mut dyn FnMut(&[f64], &mut [f64]) -> f64,
    x0: Vec<f64>,
    opts: LbfgsOptions,
) -> LbfgsOutcome {
    const C1: f64 = 1e-4;
    const SHRINK: f64 = 0.5;
    const MAX_BACKTRACK: usize = 50;

    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut f = eval(&x, &mut g);
    let mut evaluations = 1;
    let mut trace = vec![f];

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iterations = 0;

    let finish = |x, f, g: &[f64], iterations, evaluations, reason, trace| LbfgsOutcome {
        x,
        f,
        grad_inf: inf_norm(g),
        iterations,
        evaluations,
        reason,
        trace,
    };

    if !f.is_finite() {
        return finish(x, f, &g, 0, evaluations, StopReason::LineSearchFailed, trace);
    }

    loop {
        if inf_norm(&g) <= opts.grad_tol {
            return finish(x, f, &g, iterations, evaluations, StopReason::GradientTolerance, trace);
        }
        if iterations >= opts.max_iter {
            return finish(x, f, &g, iterations, evaluations, StopReason::MaxIterations, trace);
        }

        // Two-loop recursion for d = −H g.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            alpha[i] = rho_hist[i] * dot(&s_hist[i], &d);
            for (dj, yj) in d.iter_mut().zip(&y_hist[i]) {
                *dj -= alpha[i] * yj;
            }
        }
        let gamma = if m > 0 {
            dot(&s_hist[m - 1], &y_hist[m - 1]) / dot(&y_hist[m - 1], &y_hist[m - 1])
        } else {
            1.0 / inf_norm(&g).max(1.0)
        };
        d.iter_mut().for_each(|v| *v *= gamma);
        for i in 0..m {
            let b = rho_hist[i] * dot(&y_hist[i], &d);
            for (dj, sj) in d.iter_mut().zip(&s_hist[i]) {
                *dj += (alpha[i] - b) * sj;
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            d = g.iter().map(|v| -v / inf_norm(&g).max(1.0)).collect();
            slope = dot(&g, &d);
        }

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACK {
            if evaluations >= opts.max_evals {
                return finish(x, f, &g, iterations, evaluations, StopReason::MaxEvaluations, trace);
            }
            for i in 0..n {
                x_new[i] = x[i] + t * d[i];
            }
            let f_new = eval(&x_new, &mut g_new);
            evaluations += 1;
            if f_new.is_finite() && f_new < f && f_new <= f + C1 * t * slope {
                accepted = true;
                iterations += 1;
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
                    if s_hist.len() == opts.memory {
                        s_hist.remove(0);
                        y_hist.remove(0);
                        rho_hist.remove(0);
                    }
                    s_hist.push(s);
                    y_hist.push(y);
                    rho_hist.push(1.0 / sy);
                }
                let rel = (f - f_new) / f.abs().max(1.0);
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                f = f_new;
                trace.push(f);
                if rel < opts.ftol {
                    return finish(x, f, &g, iterations, evaluations, StopReason::FunctionTolerance, trace);
                }
                break;
            }
            t *= SHRINK;
        }
        if !accepted {
            return finish(x, f, &g, iterations, evaluations, StopReason::LineSearchFailed, trace);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> LbfgsOptions {
        LbfgsOptions {
            memory: 8,
            max_iter: 500,
            max_evals: 5000,
            grad_tol: 1e-10,
            ftol: 0.0,
        }
    }

    #[test]
    fn minimizes_rosenbrock() {
        let mut f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let out = minimize(&mut f, vec![-1.2, 1.0], opts());
        assert!(out.reason.converged(), "{:?}", out.reason);
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
        assert!(out.trace.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn backs_off_from_infeasible_region() {
        // log barrier at x = 0, minimum at x = 1.
        let mut f = |x: &[f64], g: &mut [f64]| {
            g[0] = 1.0 - 1.0 / x[0];
            if x[0] <= 0.0 {
                f64::NAN
            } else {
                x[0] - x[0].ln()
            }
        };
        let out = minimize(&mut f, vec![10.0], opts());
        assert!((out.x[0] - 1.0).abs() < 1e-6);
    }
}
