//! Limited-memory BFGS with a strong-Wolfe line search.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbfgsOptions {
    /// Number of stored curvature pairs.
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop once `‖∇f‖∞` falls below this.
    pub gradient_tolerance: f64,
    /// Stop once the relative decrease of `f` over one step falls below this.
    pub value_tolerance: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 500,
            gradient_tolerance: 1e-9,
            value_tolerance: 1e-14,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    ValueTolerance,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbfgsReport {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub reason: StopReason,
}

impl LbfgsReport {
    /// True for the two tolerance-based stops.
    pub fn converged(&self) -> bool {
        matches!(
            self.reason,
            StopReason::GradientTolerance | StopReason::ValueTolerance
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `f`, which returns the value and gradient at a point.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> LbfgsReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    let mut evaluations = 1;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    let report = |x: Vec<f64>, value, g: &[f64], iterations, evaluations, reason| LbfgsReport {
        x,
        value,
        gradient_norm: inf_norm(g),
        iterations,
        evaluations,
        reason,
    };

    for iter in 0..opts.max_iterations {
        if inf_norm(&g) <= opts.gradient_tolerance || n == 0 {
            return report(x, fx, &g, iter, evaluations, StopReason::GradientTolerance);
        }
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = rho_hist[i] * dot(&s_hist[i], &d);
            for (dj, yj) in d.iter_mut().zip(&y_hist[i]) {
                *dj -= alpha[i] * yj;
            }
        }
        if k > 0 {
            let gamma = dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]);
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..k {
            let beta = rho_hist[i] * dot(&y_hist[i], &d);
            for (dj, sj) in d.iter_mut().zip(&s_hist[i]) {
                *dj += (alpha[i] - beta) * sj;
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            // curvature information went bad; restart from steepest descent
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let step0 = if k == 0 {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };
        let ls = line_search(&mut f, &x, fx, &g, &d, slope, step0, opts);
        evaluations += ls.evaluations;
        let Some((step, f_new, g_new)) = ls.result else {
            return report(x, fx, &g, iter, evaluations, StopReason::LineSearchFailed);
        };
        let s: Vec<f64> = d.iter().map(|v| v * step).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        let decrease = fx - f_new;
        fx = f_new;
        g = g_new;
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if s_hist.len() == opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            rho_hist.push(1.0 / sy);
            s_hist.push(s);
            y_hist.push(y);
        }
        if decrease.abs() <= opts.value_tolerance * fx.abs().max(1e-300) || decrease == 0.0 {
            let reason = if inf_norm(&g) <= opts.gradient_tolerance {
                StopReason::GradientTolerance
            } else {
                StopReason::ValueTolerance
            };
            return report(x, fx, &g, iter + 1, evaluations, reason);
        }
    }
    let reason = if inf_norm(&g) <= opts.gradient_tolerance {
        StopReason::GradientTolerance
    } else {
        StopReason::MaxIterations
    };
    report(x, fx, &g, opts.max_iterations, evaluations, reason)
}

struct LineSearch {
    result: Option<(f64, f64, Vec<f64>)>,
    evaluations: usize,
}

/// Bracketing phase followed by zoom, accepting the first step that
/// satisfies both strong Wolfe conditions.
#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    f: &mut F,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    slope0: f64,
    step0: f64,
    opts: &LbfgsOptions,
) -> LineSearch
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let _ = g0;
    let mut evaluations = 0;
    let mut eval = |step: f64, evaluations: &mut usize| {
        *evaluations += 1;
        let xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + step * b).collect();
        let (v, g) = f(&xt);
        let s = dot(&g, d);
        (v, g, s)
    };

    let mut lo = (0.0, f0, slope0);
    let mut step = step0;
    let mut hi: Option<(f64, f64, f64)> = None;
    for i in 0..opts.max_line_search {
        let (v, g, s) = eval(step, &mut evaluations);
        if !v.is_finite() {
            hi = Some((step, f64::INFINITY, 0.0));
            break;
        }
        if v > f0 + opts.c1 * step * slope0 || (i > 0 && v >= lo.1) {
            hi = Some((step, v, s));
            break;
        }
        if s.abs() <= -opts.c2 * slope0 {
            return LineSearch {
                result: Some((step, v, g)),
                evaluations,
            };
        }
        if s >= 0.0 {
            hi = Some(lo);
            lo = (step, v, s);
            break;
        }
        lo = (step, v, s);
        step *= 2.0;
    }
    let Some(mut hi) = hi else {
        return LineSearch {
            result: None,
            evaluations,
        };
    };
    // zoom between lo and hi
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for _ in 0..opts.max_line_search {
        let (a_lo, f_lo, s_lo) = lo;
        let (a_hi, f_hi, _) = hi;
        let width = a_hi - a_lo;
        // quadratic interpolation through f_lo, slope s_lo and f_hi
        let mut trial = if f_hi.is_finite() {
            let denom = 2.0 * (f_hi - f_lo - s_lo * width);
            if denom.abs() > 0.0 {
                a_lo - s_lo * width * width / denom
            } else {
                a_lo + 0.5 * width
            }
        } else {
            a_lo + 0.5 * width
        };
        let (min_t, max_t) = if a_lo < a_hi { (a_lo, a_hi) } else { (a_hi, a_lo) };
        let margin = 0.1 * (max_t - min_t);
        if !(trial > min_t + margin && trial < max_t - margin) {
            trial = a_lo + 0.5 * width;
        }
        let (v, g, s) = eval(trial, &mut evaluations);
        if v.is_finite() && v <= f0 + opts.c1 * trial * slope0 {
            if best.as_ref().map_or(true, |b| v < b.1) {
                best = Some((trial, v, g.clone()));
            }
        }
        if !v.is_finite() || v > f0 + opts.c1 * trial * slope0 || v >= f_lo {
            hi = (trial, v, s);
        } else {
            if s.abs() <= -opts.c2 * slope0 {
                return LineSearch {
                    result: Some((trial, v, g)),
                    evaluations,
                };
            }
            if s * (a_hi - a_lo) >= 0.0 {
                hi = lo;
            }
            lo = (trial, v, s);
        }
        if (hi.0 - lo.0).abs() < 1e-16 * lo.0.abs().max(1.0) {
            break;
        }
    }
    // Fall back to the best sufficient-decrease point seen; losing the
    // curvature condition only weakens the next quasi-Newton update.
    LineSearch {
        result: best,
        evaluations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let mut v = 0.0;
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() - 1 {
            let a = x[i + 1] - x[i] * x[i];
            let b = 1.0 - x[i];
            v += 100.0 * a * a + b * b;
            g[i] += -400.0 * x[i] * a - 2.0 * b;
            g[i + 1] += 200.0 * a;
        }
        (v, g)
    }

    #[test]
    fn quadratic_converges_to_minimum() {
        let target = [1.0, -2.0, 3.0, 0.5];
        let scale = [1.0, 10.0, 100.0, 0.1];
        let f = |x: &[f64]| {
            let mut v = 0.0;
            let mut g = vec![0.0; 4];
            for i in 0..4 {
                let d = x[i] - target[i];
                v += scale[i] * d * d;
                g[i] = 2.0 * scale[i] * d;
            }
            (v, g)
        };
        let r = minimize(f, &[0.0; 4], &LbfgsOptions::default());
        assert!(r.converged(), "{:?}", r.reason);
        for i in 0..4 {
            assert!((r.x[i] - target[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn rosenbrock_10d() {
        let opts = LbfgsOptions {
            max_iterations: 2000,
            ..Default::default()
        };
        let r = minimize(rosenbrock, &[-1.2; 10], &opts);
        assert!(r.value < 1e-12, "value {}", r.value);
        assert!(r.x.iter().all(|v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn already_optimal_stops_immediately() {
        let r = minimize(|x: &[f64]| (x[0] * x[0], vec![2.0 * x[0]]), &[0.0], &LbfgsOptions::default());
        assert_eq!(r.iterations, 0);
        assert_eq!(r.evaluations, 1);
    }
}
