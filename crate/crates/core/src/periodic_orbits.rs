//! Periodic-orbit solvers for parametrized ODE systems: single-orbit
//! shooting, pseudo-arclength branch continuation with fold detection, and
//! feedback-stabilized capture of unstable cycles.
//!
//! Plain simulation only reaches attractors. Everything here exists to reach
//! the rest: unstable cycles for training data, and whole solution branches
//! so the saddle-node of a reference model can serve as ground truth.

use crate::dataset::{LcoRecord, Provenance};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Vector field `dx/dt = f(mu, x)` with an explicit bifurcation parameter.
pub type ParamRhs<'a> = &'a dyn Fn(f64, &[f64], &mut [f64]);

/// Vector field with an additive scalar control input (a force on one
/// equation), `dx/dt = f(mu, x, u)`.
pub type ForcedRhs<'a> = &'a dyn Fn(f64, &[f64], f64, &mut [f64]);

pub(crate) struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }
}

/// One classical RK4 step of a (possibly time-dependent) field, in place.
pub(crate) fn rk4_step(
    f: &dyn Fn(f64, &[f64], &mut [f64]),
    t: f64,
    x: &mut [f64],
    h: f64,
    s: &mut Rk4Scratch,
) {
    f(t, x, &mut s.k1);
    for i in 0..x.len() {
        s.tmp[i] = x[i] + 0.5 * h * s.k1[i];
    }
    f(t + 0.5 * h, &s.tmp, &mut s.k2);
    for i in 0..x.len() {
        s.tmp[i] = x[i] + 0.5 * h * s.k2[i];
    }
    f(t + 0.5 * h, &s.tmp, &mut s.k3);
    for i in 0..x.len() {
        s.tmp[i] = x[i] + h * s.k3[i];
    }
    f(t + h, &s.tmp, &mut s.k4);
    for i in 0..x.len() {
        x[i] += h / 6.0 * (s.k1[i] + 2.0 * s.k2[i] + 2.0 * s.k3[i] + s.k4[i]);
    }
}

/// Endpoint of the flow after time `t`, using `n` uniform RK4 steps.
pub(crate) fn flow(rhs: ParamRhs, mu: f64, x0: &[f64], t: f64, n: usize) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut s = Rk4Scratch::new(x.len());
    let h = t / n as f64;
    let f = |_t: f64, x: &[f64], out: &mut [f64]| rhs(mu, x, out);
    for j in 0..n {
        rk4_step(&f, j as f64 * h, &mut x, h, &mut s);
    }
    x
}

/// Integrate from `x0` and sample the full state at `t_j = j dt`,
/// `j < n_samples`, with `substeps` RK4 steps per sample interval.
pub(crate) fn record_window(
    rhs: ParamRhs,
    mu: f64,
    x0: &[f64],
    dt: f64,
    n_samples: usize,
    substeps: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut x = x0.to_vec();
    let mut s = Rk4Scratch::new(x.len());
    let h = dt / substeps as f64;
    let f = |_t: f64, x: &[f64], out: &mut [f64]| rhs(mu, x, out);
    let mut t = Vec::with_capacity(n_samples);
    let mut rows = Vec::with_capacity(n_samples);
    for j in 0..n_samples {
        t.push(j as f64 * dt);
        rows.push(x.clone());
        if j + 1 < n_samples {
            for k in 0..substeps {
                rk4_step(&f, j as f64 * dt + k as f64 * h, &mut x, h, &mut s);
            }
        }
    }
    (t, rows)
}

/// Step count giving a uniform step near 2e-4 time units, clamped so short
/// and very long periods both stay accurate and affordable.
fn integration_steps(period: f64) -> usize {
    ((period / 2e-4).ceil() as usize).clamp(1000, 300_000)
}

/// A converged periodic solution of `dx/dt = f(mu, x)`.
#[derive(Debug, Clone)]
pub struct PeriodicOrbit {
    pub x0: Vec<f64>,
    pub period: f64,
    /// Floquet multiplier magnitudes, largest first. The trivial unit
    /// multiplier is included and carries finite-difference noise of order
    /// 1e-5.
    pub multipliers: Vec<f64>,
    pub stable: bool,
    pub residual: f64,
}

fn multiplier_magnitudes(m: &DMatrix<f64>) -> Vec<f64> {
    let mut mags: Vec<f64> = m.complex_eigenvalues().iter().map(|c| c.norm()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
    mags
}

const UNSTABLE_MULTIPLIER_TOL: f64 = 1e-3;

fn monodromy(rhs: ParamRhs, mu: f64, x0: &[f64], period: f64, n: usize, xt: &[f64]) -> DMatrix<f64> {
    let d = x0.len();
    let mut m = DMatrix::zeros(d, d);
    for col in 0..d {
        let h = 1e-7 * (1.0 + x0[col].abs());
        let mut xp = x0.to_vec();
        xp[col] += h;
        let xpt = flow(rhs, mu, &xp, period, n);
        for i in 0..d {
            m[(i, col)] = (xpt[i] - xt[i]) / h;
        }
    }
    m
}

fn shooting_residual(rhs: ParamRhs, mu: f64, x0: &[f64], period: f64, n: usize) -> (DVector<f64>, Vec<f64>) {
    let d = x0.len();
    let xt = flow(rhs, mu, x0, period, n);
    let mut f = DVector::zeros(d + 1);
    for i in 0..d {
        f[i] = xt[i] - x0[i];
    }
    let mut dx = vec![0.0; d];
    rhs(mu, x0, &mut dx);
    // Phase anchor: the first state starts at an extremum.
    f[d] = dx[0];
    (f, xt)
}

/// Newton shooting for a periodic orbit near `(state_guess, period_guess)`.
///
/// Unknowns are the initial state and the period; the closure condition
/// `x(T) = x(0)` is augmented with a phase anchor pinning the first state's
/// derivative to zero at t = 0. The monodromy matrix comes from finite
/// differences of the flow map, and its eigenvalue magnitudes decide the
/// stability label (unstable when any multiplier exceeds 1 + 1e-3).
pub fn shoot_periodic(
    rhs: ParamRhs,
    mu: f64,
    state_guess: &[f64],
    period_guess: f64,
) -> Result<PeriodicOrbit> {
    let d = state_guess.len();
    if !(period_guess > 0.0) || d < 2 {
        return Err(Error::InvalidParams(
            "shooting needs a positive period guess and at least two states".into(),
        ));
    }
    let mut x0 = state_guess.to_vec();
    let mut period = period_guess;
    let mut res = f64::INFINITY;
    for iter in 0..50 {
        let n = integration_steps(period);
        let (f, xt) = shooting_residual(rhs, mu, &x0, period, n);
        res = f.amax();
        if res <= 1e-9 {
            reject_equilibrium(rhs, mu, &x0)?;
            let m = monodromy(rhs, mu, &x0, period, n, &xt);
            let multipliers = multiplier_magnitudes(&m);
            let stable = !multipliers
                .iter()
                .any(|&v| v > 1.0 + UNSTABLE_MULTIPLIER_TOL);
            return Ok(PeriodicOrbit {
                x0,
                period,
                multipliers,
                stable,
                residual: res,
            });
        }

        let mut jac = DMatrix::zeros(d + 1, d + 1);
        let mut dx0 = vec![0.0; d];
        rhs(mu, &x0, &mut dx0);
        for col in 0..d {
            let h = 1e-7 * (1.0 + x0[col].abs());
            let mut xp = x0.clone();
            xp[col] += h;
            let xpt = flow(rhs, mu, &xp, period, n);
            for i in 0..d {
                jac[(i, col)] = (xpt[i] - xt[i]) / h - if i == col { 1.0 } else { 0.0 };
            }
            let mut dxp = vec![0.0; d];
            rhs(mu, &xp, &mut dxp);
            jac[(d, col)] = (dxp[0] - dx0[0]) / h;
        }
        let mut dxt = vec![0.0; d];
        rhs(mu, &xt, &mut dxt);
        for i in 0..d {
            jac[(i, d)] = dxt[i];
        }

        let delta = jac.lu().solve(&(-&f)).ok_or(Error::NoConvergence {
            what: "shooting",
            iters: iter,
            residual: res,
        })?;

        // Damped update: back off while the residual gets worse.
        let mut scale = 1.0;
        loop {
            let cand_period = period + scale * delta[d];
            if cand_period > 0.05 * period_guess && cand_period < 20.0 * period_guess {
                let cand: Vec<f64> = (0..d).map(|i| x0[i] + scale * delta[i]).collect();
                let n_c = integration_steps(cand_period);
                let (fc, _) = shooting_residual(rhs, mu, &cand, cand_period, n_c);
                if fc.amax() < res || scale <= 1.0 / 32.0 {
                    x0 = cand;
                    period = cand_period;
                    break;
                }
            } else if scale <= 1.0 / 32.0 {
                return Err(Error::NoConvergence {
                    what: "shooting",
                    iters: iter,
                    residual: res,
                });
            }
            scale *= 0.5;
        }
    }
    Err(Error::NoConvergence {
        what: "shooting",
        iters: 50,
        residual: res,
    })
}

/// The shooting equations are satisfied by any equilibrium at any period, so
/// Newton can fall onto one; a converged point whose vector field vanishes
/// entirely is not a cycle.
fn reject_equilibrium(rhs: ParamRhs, mu: f64, x0: &[f64]) -> Result<()> {
    let mut dx = vec![0.0; x0.len()];
    rhs(mu, x0, &mut dx);
    let speed = dx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = x0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if speed <= 1e-7 * (1.0 + scale) {
        return Err(Error::NoLco(scale));
    }
    Ok(())
}

/// Quadratic refinement of a sampled extremum: fit a parabola through the
/// discrete argmax/argmin and its neighbours and return the vertex value.
pub(crate) fn refined_extremum(values: &[f64], maximum: bool) -> f64 {
    let n = values.len();
    let idx = if maximum {
        (0..n).max_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap())
    } else {
        (0..n).min_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap())
    }
    .unwrap();
    if idx == 0 || idx == n - 1 {
        return values[idx];
    }
    let (ym, y0, yp) = (values[idx - 1], values[idx], values[idx + 1]);
    let denom = ym - 2.0 * y0 + yp;
    if denom.abs() < 1e-300 {
        return y0;
    }
    let delta = 0.5 * (ym - yp) / denom;
    y0 - 0.25 * (ym - yp) * delta
}

/// Peak-to-peak half amplitude of one component over one period of an orbit,
/// with parabolic peak refinement so the value is insensitive to the sample
/// grid.
fn orbit_amplitude(rhs: ParamRhs, mu: f64, orbit_x0: &[f64], period: f64, component: usize) -> f64 {
    let n = 256;
    let (_, rows) = record_window(rhs, mu, orbit_x0, period / n as f64, n + 1, 4);
    let vals: Vec<f64> = rows.iter().map(|r| r[component]).collect();
    0.5 * (refined_extremum(&vals, true) - refined_extremum(&vals, false))
}

/// Uniform sampling of one full period of a shooting solution, as a dataset
/// record. The grid spacing is adjusted so an integer number of intervals
/// closes the period exactly; the stability label comes from the Floquet
/// multipliers, so the "degenerate" use on a stable cycle simply returns a
/// stable record.
pub fn find_unstable_lco_shooting(
    rhs: ParamRhs,
    mu: f64,
    period_guess: f64,
    state_guess: &[f64],
    dt: f64,
    observe: &[usize],
) -> Result<LcoRecord> {
    let orbit = shoot_periodic(rhs, mu, state_guess, period_guess)?;
    let n = ((orbit.period / dt).round() as usize).max(8);
    let dt_grid = orbit.period / n as f64;
    let (t, rows) = record_window(rhs, mu, &orbit.x0, dt_grid, n + 1, 4);
    Ok(LcoRecord {
        mu,
        stable: orbit.stable,
        t,
        samples: rows
            .iter()
            .map(|r| observe.iter().map(|&i| r[i]).collect())
            .collect(),
        provenance: Provenance::Shooting,
    })
}

/// One point of a continued solution branch.
#[derive(Debug, Clone)]
pub struct BranchPoint {
    pub mu: f64,
    pub x0: Vec<f64>,
    pub period: f64,
    pub stable: bool,
    pub max_multiplier: f64,
    /// Half peak-to-peak amplitude of the monitored component.
    pub amplitude: f64,
}

/// A continued branch of periodic orbits, with the fold location (where the
/// branch turns around in `mu`) if one was crossed.
#[derive(Debug, Clone)]
pub struct Branch {
    pub points: Vec<BranchPoint>,
    pub fold_mu: Option<f64>,
}

/// Knobs for `trace_branch`.
#[derive(Debug, Clone)]
pub struct TraceOptions {
    /// Initial pseudo-arclength step.
    pub ds: f64,
    pub ds_min: f64,
    pub ds_max: f64,
    /// Weight of the parameter direction in the arclength metric; below 1
    /// favours resolving the state over racing along mu.
    pub mu_weight: f64,
    /// Tracing stops when mu leaves [mu_min, mu_max].
    pub mu_min: f64,
    pub mu_max: f64,
    pub max_points: usize,
    /// State component whose amplitude is monitored.
    pub amplitude_index: usize,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            ds: 0.1,
            ds_min: 1e-4,
            ds_max: 0.4,
            mu_weight: 0.3,
            mu_min: f64::NEG_INFINITY,
            mu_max: f64::INFINITY,
            max_points: 400,
            amplitude_index: 0,
        }
    }
}

struct ExtendedSystem<'a> {
    rhs: ParamRhs<'a>,
    dim: usize,
}

impl ExtendedSystem<'_> {
    /// Residual of the fixed-mu shooting equations at y = (x0, T, mu);
    /// the arclength constraint row is appended by the caller.
    fn residual(&self, y: &DVector<f64>) -> (DVector<f64>, Vec<f64>) {
        let d = self.dim;
        let x0 = y.as_slice()[..d].to_vec();
        let period = y[d];
        let mu = y[d + 1];
        let n = integration_steps(period);
        let (f, xt) = shooting_residual(self.rhs, mu, &x0, period, n);
        (f, xt)
    }
}

/// Pseudo-arclength continuation of a periodic-orbit branch from a converged
/// seed. Steps in a weighted (state, period, mu) space so the branch can be
/// followed around folds; a sign change in the mu-tangent is refined into
/// `fold_mu` by a local parabolic fit of mu against arclength.
pub fn trace_branch(
    rhs: ParamRhs,
    mu_seed: f64,
    seed: &PeriodicOrbit,
    opts: &TraceOptions,
) -> Result<Branch> {
    let d = seed.x0.len();
    let sys = ExtendedSystem { rhs, dim: d };
    let nvar = d + 2;
    let weight = |i: usize| if i == d + 1 { opts.mu_weight } else { 1.0 };

    let mut y = DVector::zeros(nvar);
    for i in 0..d {
        y[i] = seed.x0[i];
    }
    y[d] = seed.period;
    y[d + 1] = mu_seed;

    // First step is natural continuation in -mu.
    let mut tangent = DVector::zeros(nvar);
    tangent[d + 1] = -1.0 / opts.mu_weight;

    let mut points = Vec::new();
    let mut arclens = Vec::new();
    let mut s_total = 0.0;
    let push_point = |points: &mut Vec<BranchPoint>, y: &DVector<f64>| {
        let x0 = y.as_slice()[..d].to_vec();
        let (period, mu) = (y[d], y[d + 1]);
        let n = integration_steps(period);
        let xt = flow(rhs, mu, &x0, period, n);
        let m = monodromy(rhs, mu, &x0, period, n, &xt);
        let multipliers = multiplier_magnitudes(&m);
        let max_multiplier = multipliers[0];
        let stable = !multipliers
            .iter()
            .any(|&v| v > 1.0 + UNSTABLE_MULTIPLIER_TOL);
        let amplitude = orbit_amplitude(rhs, mu, &x0, period, opts.amplitude_index);
        points.push(BranchPoint {
            mu,
            x0,
            period,
            stable,
            max_multiplier,
            amplitude,
        });
    };
    push_point(&mut points, &y);
    arclens.push(0.0);

    let mut ds = opts.ds;
    while points.len() < opts.max_points {
        let y_pred = &y + &tangent * ds;
        match correct_on_hyperplane(&sys, &y_pred, &tangent, &weight) {
            // A correction much larger than the step means Newton left the
            // local branch (typically landing on a coexisting orbit), so the
            // result cannot be trusted as a neighbour of the last point.
            Ok((y_new, _)) if weighted_norm(&(&y_new - &y_pred), &weight) > 4.0 * ds => {
                ds *= 0.5;
                if ds < opts.ds_min {
                    break;
                }
            }
            Ok((y_new, iters)) => {
                let mut step = &y_new - &y;
                let step_norm = weighted_norm(&step, &weight);
                s_total += step_norm;
                arclens.push(s_total);
                step /= step_norm;
                // Keep the orientation consistent so the trace cannot double
                // back on itself.
                if weighted_dot(&step, &tangent, &weight) < 0.0 {
                    step = -step;
                }
                tangent = step;
                y = y_new;
                push_point(&mut points, &y);
                if iters <= 3 {
                    ds = (ds * 1.4).min(opts.ds_max);
                }
                if y[d + 1] < opts.mu_min || y[d + 1] > opts.mu_max {
                    break;
                }
            }
            Err(_) => {
                ds *= 0.5;
                if ds < opts.ds_min {
                    break;
                }
            }
        }
    }

    if points.len() < 3 {
        return Err(Error::NoConvergence {
            what: "branch continuation",
            iters: points.len(),
            residual: ds,
        });
    }

    let fold_mu = locate_fold(&points, &arclens);
    Ok(Branch { points, fold_mu })
}

fn weighted_dot(a: &DVector<f64>, b: &DVector<f64>, weight: &dyn Fn(usize) -> f64) -> f64 {
    (0..a.len())
        .map(|i| {
            let w = weight(i);
            a[i] * b[i] * w * w
        })
        .sum()
}

fn weighted_norm(a: &DVector<f64>, weight: &dyn Fn(usize) -> f64) -> f64 {
    weighted_dot(a, a, weight).sqrt()
}

fn correct_on_hyperplane(
    sys: &ExtendedSystem,
    y_pred: &DVector<f64>,
    tangent: &DVector<f64>,
    weight: &dyn Fn(usize) -> f64,
) -> Result<(DVector<f64>, usize)> {
    let d = sys.dim;
    let nvar = d + 2;
    let mut y = y_pred.clone();
    for iter in 0..12 {
        if !(y[d] > 0.0) {
            return Err(Error::NoConvergence {
                what: "branch corrector",
                iters: iter,
                residual: f64::NAN,
            });
        }
        let (f, xt) = sys.residual(&y);
        let diff = &y - y_pred;
        let constraint = weighted_dot(&diff, tangent, weight);
        let res = f.amax().max(constraint.abs());
        if res <= 1e-9 {
            reject_equilibrium(sys.rhs, y[d + 1], &y.as_slice()[..d])?;
            return Ok((y, iter));
        }

        let mut jac = DMatrix::zeros(nvar, nvar);
        let x0 = y.as_slice()[..d].to_vec();
        let (period, mu) = (y[d], y[d + 1]);
        let n = integration_steps(period);
        let mut dx0 = vec![0.0; d];
        (sys.rhs)(mu, &x0, &mut dx0);
        for col in 0..d {
            let h = 1e-7 * (1.0 + x0[col].abs());
            let mut xp = x0.clone();
            xp[col] += h;
            let xpt = flow(sys.rhs, mu, &xp, period, n);
            for i in 0..d {
                jac[(i, col)] = (xpt[i] - xt[i]) / h - if i == col { 1.0 } else { 0.0 };
            }
            let mut dxp = vec![0.0; d];
            (sys.rhs)(mu, &xp, &mut dxp);
            jac[(d, col)] = (dxp[0] - dx0[0]) / h;
        }
        let mut dxt = vec![0.0; d];
        (sys.rhs)(mu, &xt, &mut dxt);
        for i in 0..d {
            jac[(i, d)] = dxt[i];
        }
        let h_mu = 1e-6 * (1.0 + mu.abs());
        let xt_mu = flow(sys.rhs, mu + h_mu, &x0, period, n);
        for i in 0..d {
            jac[(i, d + 1)] = (xt_mu[i] - xt[i]) / h_mu;
        }
        let mut dx_mu = vec![0.0; d];
        (sys.rhs)(mu + h_mu, &x0, &mut dx_mu);
        jac[(d, d + 1)] = (dx_mu[0] - dx0[0]) / h_mu;
        for i in 0..nvar {
            let w = weight(i);
            jac[(d + 1, i)] = tangent[i] * w * w;
        }

        let mut g = DVector::zeros(nvar);
        for i in 0..=d {
            g[i] = f[i];
        }
        g[d + 1] = constraint;
        let delta = jac.lu().solve(&(-&g)).ok_or(Error::NoConvergence {
            what: "branch corrector",
            iters: iter,
            residual: res,
        })?;
        y += delta;
    }
    Err(Error::NoConvergence {
        what: "branch corrector",
        iters: 12,
        residual: f64::NAN,
    })
}

/// Find a turning point of mu along the branch and refine it with a parabola
/// through the three surrounding samples of mu(arclength).
fn locate_fold(points: &[BranchPoint], arclens: &[f64]) -> Option<f64> {
    for k in 1..points.len() - 1 {
        let before = points[k].mu - points[k - 1].mu;
        let after = points[k + 1].mu - points[k].mu;
        if before * after < 0.0 {
            let (s0, s1, s2) = (arclens[k - 1], arclens[k], arclens[k + 1]);
            let (m0, m1, m2) = (points[k - 1].mu, points[k].mu, points[k + 1].mu);
            // Lagrange parabola mu(s), vertex at ds/dmu = 0.
            let d0 = m0 / ((s0 - s1) * (s0 - s2));
            let d1 = m1 / ((s1 - s0) * (s1 - s2));
            let d2 = m2 / ((s2 - s0) * (s2 - s1));
            let a = d0 + d1 + d2;
            let b = -(d0 * (s1 + s2) + d1 * (s0 + s2) + d2 * (s0 + s1));
            if a.abs() < 1e-300 {
                return Some(m1);
            }
            let s_star = -b / (2.0 * a);
            if !(s0..=s2).contains(&s_star) {
                return Some(m1);
            }
            let mu_star = d0 * (s_star - s1) * (s_star - s2)
                + d1 * (s_star - s0) * (s_star - s2)
                + d2 * (s_star - s0) * (s_star - s1);
            return Some(mu_star);
        }
    }
    None
}

/// Proportional-derivative gains for feedback stabilization.
#[derive(Debug, Clone, Copy)]
pub struct PdGains {
    pub k_p: f64,
    pub k_d: f64,
}

/// Single-harmonic reference trajectory for the controlled coordinate.
#[derive(Debug, Clone, Copy)]
pub struct HarmonicTarget {
    pub offset: f64,
    pub cos_amp: f64,
    pub sin_amp: f64,
    pub omega: f64,
}

impl HarmonicTarget {
    pub fn from_amplitude(amp: f64, omega: f64) -> Self {
        Self {
            offset: 0.0,
            cos_amp: amp,
            sin_amp: 0.0,
            omega,
        }
    }
}

/// Capture an unstable cycle by simulating under PD feedback toward a
/// harmonic target, iteratively replacing the target amplitude, offset and
/// frequency with the measured fundamental of the achieved response until
/// the two agree. The target phase is re-anchored to the state at the start
/// of every iteration, which keeps the reference from slewing against the
/// response while the frequency estimate settles. At the fixed point the
/// control signal is residual; the run is accepted only if its power is
/// below 1% of the fed-back response power, so the recorded orbit is the
/// free system's cycle up to that residual.
#[allow(clippy::too_many_arguments)]
pub fn find_unstable_lco_pd(
    rhs_forced: ForcedRhs,
    mu: f64,
    gains: PdGains,
    target_guess: HarmonicTarget,
    x_init: &[f64],
    pos_idx: usize,
    vel_idx: usize,
    dt: f64,
    settle_time: f64,
    record_time: f64,
    observe: &[usize],
) -> Result<LcoRecord> {
    let dim = x_init.len();
    let substeps = 4usize;
    let h = dt / substeps as f64;
    let n_rec = (record_time / dt).round() as usize;
    if n_rec < 16 {
        return Err(Error::InvalidParams(
            "recording window too short for harmonic fitting".into(),
        ));
    }
    let n_settle = (settle_time / h).round() as usize;
    let mut x = x_init.to_vec();
    let mut amp = (target_guess.cos_amp.powi(2) + target_guess.sin_amp.powi(2)).sqrt();
    let mut offset = target_guess.offset;
    let mut omega = target_guess.omega;
    if !(omega > 0.0) || !(amp > 0.0) {
        return Err(Error::InvalidParams(
            "target guess needs a positive frequency and amplitude".into(),
        ));
    }
    let mut scratch = Rk4Scratch::new(dim);
    let mut last_window: Option<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> = None;
    let mut converged = false;

    for _ in 0..60 {
        // Re-anchor the target phase to the present state and restart the
        // clock, so frequency estimation error cannot slew the reference
        // against the response as wall time accumulates.
        let p0 = x[pos_idx] - offset;
        let v0 = x[vel_idx];
        let phi = (-v0 / omega).atan2(p0);
        let (a, o, w) = (amp, offset, omega);
        let closed = move |tau: f64, x: &[f64], out: &mut [f64]| {
            let (s, c) = (w * tau + phi).sin_cos();
            let u = gains.k_p * (o + a * c - x[pos_idx]) - gains.k_d * (a * w * s + x[vel_idx]);
            rhs_forced(mu, x, u, out);
        };
        let mut tau = 0.0;
        for _ in 0..n_settle {
            rk4_step(&closed, tau, &mut x, h, &mut scratch);
            tau += h;
        }
        let mut t_grid = Vec::with_capacity(n_rec);
        let mut rows = Vec::with_capacity(n_rec);
        let mut controls = Vec::with_capacity(n_rec);
        for _ in 0..n_rec {
            let (s, c) = (omega * tau + phi).sin_cos();
            controls.push(
                gains.k_p * (offset + amp * c - x[pos_idx])
                    - gains.k_d * (amp * omega * s + x[vel_idx]),
            );
            t_grid.push(tau);
            rows.push(x.clone());
            for _ in 0..substeps {
                rk4_step(&closed, tau, &mut x, h, &mut scratch);
                tau += h;
            }
        }
        if x.iter().any(|v| !v.is_finite() || v.abs() > 1e6) {
            return Err(Error::NotStabilized(format!(
                "response diverged at mu = {mu}"
            )));
        }

        let pos: Vec<f64> = rows.iter().map(|r| r[pos_idx]).collect();
        let rough_mean = pos.iter().sum::<f64>() / pos.len() as f64;
        let crossings = upward_crossings(&t_grid, &pos, rough_mean);
        if crossings.len() < 3 {
            return Err(Error::NotStabilized(
                "response shows no sustained oscillation".into(),
            ));
        }
        let period = (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64;
        let omega_meas = std::f64::consts::TAU / period;

        // Means and harmonic fits over a partial period are biased, so
        // measure on the largest whole number of periods in the window.
        let span = t_grid[n_rec - 1] - t_grid[0];
        let whole = (span / period).floor().max(1.0);
        let t_cut = t_grid[0] + whole * period;
        let n_cut = t_grid
            .iter()
            .take_while(|&&t| t <= t_cut + 0.5 * dt)
            .count()
            .min(n_rec);
        let mean = pos[..n_cut].iter().sum::<f64>() / n_cut as f64;
        let (cos_amp, sin_amp) = fundamental_fit(&t_grid[..n_cut], &pos[..n_cut], mean, omega_meas);
        let amp_meas = (cos_amp * cos_amp + sin_amp * sin_amp).sqrt();

        let scale = amp_meas.max(amp).max(1e-12);
        let drift = ((amp_meas - amp).abs() / scale)
            .max((omega_meas - omega).abs() / omega)
            .max((mean - offset).abs() / scale);
        amp = amp_meas;
        offset = mean;
        omega += 0.5 * (omega_meas - omega);
        t_grid.truncate(n_cut);
        rows.truncate(n_cut);
        controls.truncate(n_cut);
        last_window = Some((t_grid, rows, controls));
        if drift < 1e-3 {
            converged = true;
            break;
        }
    }

    if !converged {
        return Err(Error::NotStabilized(
            "target iteration did not converge".into(),
        ));
    }
    let (t_grid, rows, controls) = last_window.unwrap();
    let pos_mean =
        rows.iter().map(|r| r[pos_idx]).sum::<f64>() / rows.len() as f64;
    let control_power = controls.iter().map(|u| u * u).sum::<f64>() / controls.len() as f64;
    let response_power = rows
        .iter()
        .map(|r| {
            let v = gains.k_p * (r[pos_idx] - pos_mean) + gains.k_d * r[vel_idx];
            v * v
        })
        .sum::<f64>()
        / rows.len() as f64;
    let ratio = control_power / response_power;
    if !(ratio < 1e-2) {
        return Err(Error::Invasive(ratio));
    }

    let t0 = t_grid[0];
    Ok(LcoRecord {
        mu,
        stable: false,
        t: t_grid.iter().map(|t| t - t0).collect(),
        samples: rows
            .iter()
            .map(|r| observe.iter().map(|&i| r[i]).collect())
            .collect(),
        provenance: Provenance::StabilizedFeedback,
    })
}

/// Interpolated times of upward mean-crossings of a sampled signal.
pub(crate) fn upward_crossings(t: &[f64], x: &[f64], level: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for j in 0..x.len().saturating_sub(1) {
        if x[j] < level && x[j + 1] >= level {
            let frac = (level - x[j]) / (x[j + 1] - x[j]);
            out.push(t[j] + frac * (t[j + 1] - t[j]));
        }
    }
    out
}

/// Least-squares cosine/sine amplitudes of `x - mean` at a fixed frequency.
fn fundamental_fit(t: &[f64], x: &[f64], mean: f64, omega: f64) -> (f64, f64) {
    let (mut scc, mut sss, mut scs, mut bc, mut bs) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (tj, xj) in t.iter().zip(x) {
        let (s, c) = (omega * tj).sin_cos();
        let r = xj - mean;
        scc += c * c;
        sss += s * s;
        scs += c * s;
        bc += r * c;
        bs += r * s;
    }
    let det = scc * sss - scs * scs;
    if det.abs() < 1e-300 {
        return (0.0, 0.0);
    }
    ((bc * sss - bs * scs) / det, (bs * scc - bc * scs) / det)
}
