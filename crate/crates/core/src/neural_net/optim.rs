//! First-order (Adam) and quasi-Newton (L-BFGS) minimizers over flat
//! parameter vectors.

use crate::error::{Error, Result};

/// Adam moment estimates. One state per parameter vector being optimized.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction, in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grad: &[f64],
    lr: f64,
) -> Result<()> {
    if params.len() != state.m.len() || grad.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            expected: state.m.len(),
            got: if params.len() != state.m.len() {
                params.len()
            } else {
                grad.len()
            },
        });
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grad[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Options for [`lbfgs_minimize`].
#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    /// Number of curvature pairs kept.
    pub memory: usize,
    /// Trial step length of the very first line search. Later iterations
    /// start from the unit quasi-Newton step.
    pub initial_step: f64,
    /// Stop when the gradient infinity-norm drops below this.
    pub grad_tol: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant of the weak Wolfe condition.
    pub c2: f64,
    /// Give up on a line search after this many trial points.
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            memory: 10,
            initial_step: 1.0,
            grad_tol: 1e-10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 60,
        }
    }
}

/// Result of an L-BFGS run.
#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    /// `trace[0]` is the initial loss, `trace[k]` the loss after the k-th
    /// accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// True when the gradient tolerance was reached.
    pub converged: bool,
}

fn check_finite(f: f64, g: &[f64], phase: &str, iteration: usize) -> Result<()> {
    if !f.is_finite() {
        return Err(Error::NanLoss {
            phase: phase.to_string(),
            iteration,
        });
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NanGradient {
            phase: phase.to_string(),
            iteration,
        });
    }
    Ok(())
}

/// Minimize `objective` (returning loss and gradient) with limited-memory
/// BFGS and a backtracking Armijo line search.
///
/// Stops at `max_iters`, at the gradient tolerance, or when the line search
/// cannot find any decrease (a flat or non-smooth spot); all three are normal
/// outcomes. Non-finite losses or gradients abort with an error naming the
/// iteration.
pub fn lbfgs_minimize<F>(
    mut objective: F,
    x0: Vec<f64>,
    opts: &LbfgsOptions,
    phase: &str,
) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0;
    let (mut f, mut g) = objective(&x)?;
    check_finite(f, &g, phase, 0)?;
    let mut trace = vec![f];
    let mut s_list: Vec<Vec<f64>> = Vec::new();
    let mut y_list: Vec<Vec<f64>> = Vec::new();
    let mut rho: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iters {
        if g.iter().map(|v| v.abs()).fold(0.0, f64::max) <= opts.grad_tol {
            converged = true;
            break;
        }

        // Two-loop recursion for d = -H g.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = vec![0.0; s_list.len()];
        for i in (0..s_list.len()).rev() {
            let a = rho[i] * dot(&s_list[i], &d);
            alphas[i] = a;
            axpy(-a, &y_list[i], &mut d);
        }
        if let (Some(s), Some(y)) = (s_list.last(), y_list.last()) {
            let gamma = dot(s, y) / dot(y, y).max(1e-300);
            for v in &mut d {
                *v *= gamma;
            }
        }
        for i in 0..s_list.len() {
            let b = rho[i] * dot(&y_list[i], &d);
            axpy(alphas[i] - b, &s_list[i], &mut d);
        }

        let mut gd = dot(&g, &d);
        if gd >= 0.0 {
            // Not a descent direction; drop the memory and fall back to
            // steepest descent.
            s_list.clear();
            y_list.clear();
            rho.clear();
            d = g.iter().map(|v| -v).collect();
            gd = -dot(&g, &g);
        }

        // Weak-Wolfe line search by bisection: besides sufficient decrease
        // it enforces the curvature condition, so every accepted step yields
        // a well-posed (s, y) pair and the memory never goes stale.
        let mut alpha = if iter == 0 { opts.initial_step } else { 1.0 };
        let mut lo = 0.0;
        let mut hi = f64::INFINITY;
        let mut accepted = None;
        let mut xt = vec![0.0; n];
        for _ in 0..opts.max_line_search {
            for i in 0..n {
                xt[i] = x[i] + alpha * d[i];
            }
            let (ft, gt) = objective(&xt)?;
            check_finite(ft, &gt, phase, iter + 1)?;
            if ft > f + opts.c1 * alpha * gd {
                hi = alpha;
            } else if dot(&gt, &d) < opts.c2 * gd {
                lo = alpha;
            } else {
                accepted = Some((ft, gt));
                break;
            }
            alpha = if hi.is_finite() {
                0.5 * (lo + hi)
            } else {
                2.0 * alpha
            };
        }
        if accepted.is_none() && lo > 0.0 {
            // Curvature never satisfied but sufficient decrease was: take the
            // best decrease point rather than giving up.
            alpha = lo;
            for i in 0..n {
                xt[i] = x[i] + alpha * d[i];
            }
            let (ft, gt) = objective(&xt)?;
            check_finite(ft, &gt, phase, iter + 1)?;
            accepted = Some((ft, gt));
        }
        let Some((ft, gt)) = accepted else {
            break;
        };

        let s: Vec<f64> = (0..n).map(|i| xt[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| gt[i] - g[i]).collect();
        let sy = dot(&s, &y);
        let sn = dot(&s, &s).sqrt();
        let yn = dot(&y, &y).sqrt();
        if sy > 1e-12 * sn * yn {
            if s_list.len() == opts.memory {
                s_list.remove(0);
                y_list.remove(0);
                rho.remove(0);
            }
            rho.push(1.0 / sy);
            s_list.push(s);
            y_list.push(y);
        }

        x.copy_from_slice(&xt);
        f = ft;
        g = gt;
        trace.push(f);
        iterations = iter + 1;
    }

    Ok(LbfgsOutcome {
        x,
        f,
        trace,
        iterations,
        converged,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn adam_single_step_matches_hand_calculation() {
        let mut state = AdamState::new(1);
        let mut x = vec![1.0];
        adam_step(&mut state, &mut x, &[2.0], 0.05).unwrap();
        // m = 0.1*2 = 0.2, v = 0.001*4 = 0.004
        // m_hat = 0.2/0.1 = 2, v_hat = 0.004/0.001 = 4
        let expected = 1.0 - 0.05 * 2.0 / (2.0 + 1e-8);
        assert_relative_eq!(x[0], expected, max_relative = 1e-15);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_descends_on_quadratic() {
        let mut state = AdamState::new(1);
        let mut x = vec![1.0f64];
        let mut prev = x[0].abs();
        for _ in 0..20 {
            let g = 2.0 * x[0];
            adam_step(&mut state, &mut x, &[g], 0.05).unwrap();
            assert!(
                x[0].abs() < prev,
                "|x| should shrink every step, got {} after {}",
                x[0].abs(),
                prev
            );
            prev = x[0].abs();
        }
    }

    #[test]
    fn adam_rejects_mismatched_lengths() {
        let mut state = AdamState::new(2);
        let mut x = vec![1.0];
        assert!(adam_step(&mut state, &mut x, &[1.0], 0.1).is_err());
    }

    #[test]
    fn lbfgs_minimizes_rosenbrock() {
        let rosen = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (1.0, 100.0);
            let f = (a - x[0]).powi(2) + b * (x[1] - x[0] * x[0]).powi(2);
            let g = vec![
                -2.0 * (a - x[0]) - 4.0 * b * x[0] * (x[1] - x[0] * x[0]),
                2.0 * b * (x[1] - x[0] * x[0]),
            ];
            Ok((f, g))
        };
        let opts = LbfgsOptions {
            max_iters: 200,
            grad_tol: 1e-10,
            ..Default::default()
        };
        let out = lbfgs_minimize(rosen, vec![-1.2, 1.0], &opts, "rosenbrock").unwrap();
        assert!(out.converged, "gradient norm should reach tolerance");
        assert_relative_eq!(out.x[0], 1.0, max_relative = 1e-6);
        assert_relative_eq!(out.x[1], 1.0, max_relative = 1e-6);
        // Armijo guarantees monotone decrease.
        for w in out.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        // Trace bookkeeping: last entry is the final loss.
        assert_relative_eq!(out.trace.last().unwrap(), &out.f, max_relative = 1e-15);
    }

    #[test]
    fn lbfgs_reports_nan_iteration() {
        let mut count = 0;
        let bad = move |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            count += 1;
            if count > 2 {
                Ok((f64::NAN, vec![0.0]))
            } else {
                Ok((x[0] * x[0], vec![2.0 * x[0]]))
            }
        };
        let err = lbfgs_minimize(bad, vec![1.0], &LbfgsOptions::default(), "test-phase")
            .unwrap_err();
        match err {
            Error::NanLoss { phase, iteration } => {
                assert_eq!(phase, "test-phase");
                assert!(iteration > 0);
            }
            other => panic!("expected NanLoss, got {other:?}"),
        }
    }

    #[test]
    fn lbfgs_initial_step_seeds_first_trial() {
        // On f = x^2/2 the descent direction from x=1 is -1, so the first
        // trial point of the first line search must be 1 - initial_step.
        let trials = std::rc::Rc::new(std::cell::RefCell::new(Vec::new()));
        let t = trials.clone();
        let quad = move |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            t.borrow_mut().push(x[0]);
            Ok((0.5 * x[0] * x[0], vec![x[0]]))
        };
        let opts = LbfgsOptions {
            max_iters: 1,
            initial_step: 1e-3,
            ..Default::default()
        };
        lbfgs_minimize(quad, vec![1.0], &opts, "quad").unwrap();
        let trials = trials.borrow();
        // trials[0] is the initial evaluation, trials[1] the first trial.
        assert_relative_eq!(trials[1], 1.0 - 1e-3, max_relative = 1e-12);
    }
}
