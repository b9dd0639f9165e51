//! Three-stage model fitting: affine map first, then the network correction
//! jointly with the normal-form parameters, then the oscillation speed.
//!
//! Each stage minimizes with ADAM followed by L-BFGS over a flat parameter
//! vector. Gradients are exact (reverse-mode through the least-squares
//! descriptor fit and a discrete adjoint of the RK4 phase integration), so
//! the optimizers see the same function the evaluation metrics report.

use crate::coordinate_map::{
    fit_auxiliary_maps, invertibility_report, match_initial_phase, predicted_orbit,
    CoordinateMap, LinearMap, MuScaling,
};
use crate::dataset::{LcoRecord, TrainingDataset};
use crate::error::{Error, Result};
use crate::model::HybridModel;
use crate::neural_net::optim::{adam_step, lbfgs_minimize, AdamState, LbfgsOptions};
use crate::neural_net::{MlpCache, MlpNetwork};
use crate::normal_form::{
    radius_sensitivity, saddle_node_mu, stability_matched_radius, Criticality, NormalFormParams,
};
use crate::orbit_geometry::{
    descriptor_distance, fourier_basis_entry, fourier_basis_entry_dtheta, orbit_descriptor,
    orbit_descriptor_with_center, shape_loss,
};
use crate::speed_model::{
    downsample_indices, predict_timeseries, speed_loss, SpeedMode, SpeedModel,
};
use nalgebra::{Cholesky, DMatrix, DVector};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::time::Instant;

/// Iteration budget of one optimization stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub adam_iters: usize,
    pub adam_lr: f64,
    pub lbfgs_iters: usize,
    /// Trial step length of the first L-BFGS line search.
    pub lbfgs_step: f64,
}

impl StageSchedule {
    fn validate(&self, name: &str) -> Result<()> {
        if !(self.adam_lr > 0.0) || !(self.lbfgs_step > 0.0) {
            return Err(Error::InvalidParams(format!(
                "{name}: learning rates must be positive, got adam_lr = {}, lbfgs_step = {}",
                self.adam_lr, self.lbfgs_step
            )));
        }
        Ok(())
    }
}

/// Architecture of the speed correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpeedConfig {
    /// Network reads the planar state `(u1, u2, scaled mu)` directly.
    Direct { hidden: Vec<usize> },
    /// Network emits per-orbit harmonic coefficients from `(r, scaled mu)`.
    Harmonic { n_h: usize, hidden: Vec<usize> },
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub criticality: Criticality,
    /// Descriptor harmonics.
    pub n_h: usize,
    /// Samples per predicted orbit.
    #[serde(default = "default_n_points")]
    pub n_points: usize,
    /// Hidden widths of the coordinate-map network.
    pub map_hidden: Vec<usize>,
    pub speed: SpeedConfig,
    pub stage1: StageSchedule,
    pub stage2: StageSchedule,
    pub stage3: StageSchedule,
    pub seed: u64,
    /// Starting Hopf location. When absent it is placed midway between the
    /// measured-mu boundary nearest the Hopf point and `mu0_bound`.
    #[serde(default)]
    pub mu0_init: Option<f64>,
    /// Bound on the Hopf location beyond the measured mu values: an upper
    /// bound for subcritical data, a lower bound for supercritical
    /// (defaulting to 0 there).
    #[serde(default)]
    pub mu0_bound: Option<f64>,
    /// Starting cubic coefficient; sign must match the criticality.
    #[serde(default)]
    pub a2_init: Option<f64>,
    /// Per-record sample cap of the speed stage.
    #[serde(default = "default_downsample")]
    pub downsample: usize,
    #[serde(default = "default_nonsingularity_weight")]
    pub nonsingularity_weight: f64,
    /// Weight of the centroid-alignment term of the shape objective.
    #[serde(default = "default_centroid_weight")]
    pub centroid_weight: f64,
}

fn default_n_points() -> usize {
    100
}

fn default_downsample() -> usize {
    1000
}

fn default_nonsingularity_weight() -> f64 {
    1e6
}

fn default_centroid_weight() -> f64 {
    1.0
}

impl TrainingConfig {
    /// Settings of the Van der Pol runs.
    pub fn vdp() -> Self {
        Self {
            criticality: Criticality::Supercritical,
            n_h: 10,
            n_points: 100,
            map_hidden: vec![32, 32],
            speed: SpeedConfig::Harmonic {
                n_h: 10,
                hidden: vec![32, 32],
            },
            stage1: StageSchedule {
                adam_iters: 200,
                adam_lr: 0.02,
                lbfgs_iters: 300,
                lbfgs_step: 1e-2,
            },
            stage2: StageSchedule {
                adam_iters: 300,
                adam_lr: 0.01,
                lbfgs_iters: 1000,
                lbfgs_step: 1e-5,
            },
            stage3: StageSchedule {
                adam_iters: 2000,
                adam_lr: 0.01,
                lbfgs_iters: 1000,
                lbfgs_step: 1e-5,
            },
            seed: 1,
            mu0_init: None,
            mu0_bound: Some(0.0),
            a2_init: None,
            downsample: 1000,
            nonsingularity_weight: 1e6,
            centroid_weight: 1.0,
        }
    }

    /// Settings of the aeroelastic runs. The starting cubic coefficient is
    /// sized so the fold of the starting normal form sits below every
    /// measured airspeed; with the blanket default of 1 no record would lie
    /// on an existing branch and the shape objective would be flat.
    pub fn aero() -> Self {
        Self {
            criticality: Criticality::Subcritical,
            n_h: 10,
            n_points: 100,
            map_hidden: vec![21, 21],
            speed: SpeedConfig::Direct {
                hidden: vec![31, 31],
            },
            stage1: StageSchedule {
                adam_iters: 200,
                adam_lr: 0.02,
                lbfgs_iters: 300,
                lbfgs_step: 1e-2,
            },
            stage2: StageSchedule {
                adam_iters: 400,
                adam_lr: 0.01,
                lbfgs_iters: 0,
                lbfgs_step: 1e-5,
            },
            stage3: StageSchedule {
                adam_iters: 300,
                adam_lr: 0.01,
                lbfgs_iters: 1000,
                lbfgs_step: 1e-3,
            },
            seed: 1,
            mu0_init: None,
            mu0_bound: Some(19.0),
            a2_init: Some(4.0),
            downsample: 1000,
            nonsingularity_weight: 1e6,
            centroid_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_h == 0 {
            return Err(Error::InvalidParams(
                "descriptor needs at least one harmonic".into(),
            ));
        }
        if self.n_points < 2 * self.n_h + 1 {
            return Err(Error::InvalidParams(format!(
                "{} orbit samples cannot determine {} descriptor coefficients",
                self.n_points,
                2 * self.n_h + 1
            )));
        }
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        self.stage3.validate("stage3")?;
        if let SpeedConfig::Harmonic { n_h, .. } = self.speed {
            if n_h == 0 {
                return Err(Error::InvalidParams(
                    "harmonic speed correction needs n_h >= 1".into(),
                ));
            }
        }
        if self.downsample == 0 {
            return Err(Error::InvalidParams(
                "downsample limit must be at least 1".into(),
            ));
        }
        if self.nonsingularity_weight < 0.0 || self.centroid_weight < 0.0 {
            return Err(Error::InvalidParams(
                "penalty weights must be non-negative".into(),
            ));
        }
        if let Some(a2) = self.a2_init {
            let ok = match self.criticality {
                Criticality::Subcritical => a2 > 0.0,
                Criticality::Supercritical => a2 < 0.0,
            };
            if !ok {
                return Err(Error::InvalidParams(format!(
                    "a2_init = {a2} contradicts the configured criticality"
                )));
            }
        }
        Ok(())
    }
}

/// Loss history of one stage. `adam` holds the loss after each ADAM step,
/// `lbfgs` after each accepted L-BFGS step, so the lengths equal the
/// iterations actually executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub initial_loss: f64,
    pub adam: Vec<f64>,
    pub lbfgs: Vec<f64>,
    pub final_loss: f64,
}

/// What a training run did, written alongside the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    pub config: TrainingConfig,
    pub dataset_fingerprint: String,
    pub stage1: Option<StageTrace>,
    pub stage2: Option<StageTrace>,
    pub stage3: Option<StageTrace>,
    pub mu0: Option<f64>,
    pub a2: Option<f64>,
    pub omega0: Option<f64>,
    pub final_shape_loss: Option<f64>,
    pub final_speed_loss: Option<f64>,
    pub wall_seconds: f64,
}

impl TrainingReport {
    fn empty(cfg: &TrainingConfig) -> Self {
        Self {
            config: cfg.clone(),
            dataset_fingerprint: String::new(),
            stage1: None,
            stage2: None,
            stage3: None,
            mu0: None,
            a2: None,
            omega0: None,
            final_shape_loss: None,
            final_speed_loss: None,
            wall_seconds: 0.0,
        }
    }
}

/// Worker count honoring the `HOPF_HYBRID_THREADS` cap.
pub fn thread_cap() -> usize {
    match std::env::var("HOPF_HYBRID_THREADS") {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n >= 1).unwrap_or(1),
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

fn map_sizes(hidden: &[usize]) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(3);
    sizes.extend_from_slice(hidden);
    sizes.push(2);
    sizes
}

fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] on positive values.
fn inv_softplus(a: f64) -> f64 {
    if a > 30.0 {
        a
    } else {
        a.exp_m1().ln()
    }
}

/// Starting normal form resolved from the config and the measured mu range.
fn initial_normal_form(ds: &TrainingDataset, cfg: &TrainingConfig) -> Result<NormalFormParams> {
    let mus = ds.mu_values();
    let min_mu = mus.iter().copied().fold(f64::INFINITY, f64::min);
    let max_mu = mus.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mu0 = match (cfg.mu0_init, cfg.criticality) {
        (Some(v), _) => v,
        (None, Criticality::Subcritical) => {
            let bound = cfg.mu0_bound.ok_or_else(|| {
                Error::InvalidParams(
                    "subcritical runs need mu0_init or mu0_bound (an upper bound on the Hopf location)"
                        .into(),
                )
            })?;
            if bound <= max_mu {
                return Err(Error::InvalidParams(format!(
                    "mu0_bound = {bound} must exceed the largest measured mu = {max_mu}"
                )));
            }
            0.5 * (max_mu + bound)
        }
        (None, Criticality::Supercritical) => {
            let bound = cfg.mu0_bound.unwrap_or(0.0);
            if bound >= min_mu {
                return Err(Error::InvalidParams(format!(
                    "mu0_bound = {bound} must lie below the smallest measured mu = {min_mu}"
                )));
            }
            0.5 * (min_mu + bound)
        }
    };
    let a2 = cfg.a2_init.unwrap_or(match cfg.criticality {
        Criticality::Subcritical => 1.0,
        Criticality::Supercritical => -1.0,
    });
    match cfg.criticality {
        Criticality::Subcritical => NormalFormParams::subcritical(mu0, a2),
        Criticality::Supercritical => NormalFormParams::supercritical(mu0, a2),
    }
}

/// One record reduced to the quantities the shape objective needs.
struct MeasuredRecord {
    mu: f64,
    stable: bool,
    coeffs: DVector<f64>,
    centroid: [f64; 2],
    coeff_norm: f64,
    winding: f64,
}

fn measure_records(ds: &TrainingDataset, n_h: usize) -> Result<Vec<MeasuredRecord>> {
    ds.records
        .iter()
        .map(|rec| {
            let orbit = rec.planar_orbit()?;
            let (d, centroid) = orbit_descriptor_with_center(&orbit, n_h)?;
            let coeffs = DVector::from_vec(d.coeff_vector());
            let coeff_norm = coeffs.norm();
            Ok(MeasuredRecord {
                mu: rec.mu,
                stable: rec.stable,
                coeffs,
                centroid,
                coeff_norm,
                winding: orbit.winding(centroid),
            })
        })
        .collect()
}

/// Gradient of the shape objective grouped by destination.
struct MapGrad {
    linear: [[f64; 3]; 2],
    offset: [f64; 2],
    nn: Vec<f64>,
    mu0: f64,
    a2: f64,
}

impl MapGrad {
    fn zeros(n_nn: usize) -> Self {
        Self {
            linear: [[0.0; 3]; 2],
            offset: [0.0; 2],
            nn: vec![0.0; n_nn],
            mu0: 0.0,
            a2: 0.0,
        }
    }
}

/// The descriptor-matching objective of stages 1 and 2, differentiable in
/// every map and normal-form parameter.
///
/// Per record: map the branch circle through the coordinate map, fit the
/// radius series about the image centroid by least squares, and take the
/// Euclidean distance to the measured coefficients plus a weighted centroid
/// gap. Records whose branch does not exist at the current normal form, or
/// whose image degenerates (collapsed radius, singular fit), contribute
/// their measured coefficient norm with zero gradient, which caps the loss
/// a missing orbit can add while keeping the objective finite.
struct ShapeProblem<'a> {
    measured: &'a [MeasuredRecord],
    n_points: usize,
    n_h: usize,
    centroid_weight: f64,
    nonsingularity_weight: f64,
}

/// Determinant magnitude below which the linear block is penalized.
const DET_FLOOR: f64 = 1e-6;
/// Phase-speed floor of the training objective; values below are clamped
/// and penalized.
const SPEED_FLOOR: f64 = 1e-6;
const SPEED_PENALTY_WEIGHT: f64 = 1e3;
/// Ridge of the auxiliary-map regression.
const AUX_RIDGE: f64 = 1e-8;

impl ShapeProblem<'_> {
    fn objective(&self, map: &CoordinateMap, p: &NormalFormParams) -> (f64, MapGrad) {
        let mut grad = MapGrad::zeros(map.nn.param_count());
        let mut cache = MlpCache::for_network(&map.nn);
        let mut loss = 0.0;
        for rec in self.measured {
            loss += self.record_term(rec, map, p, &mut cache, &mut grad);
        }
        let det = map.linear.det2();
        if det.abs() < DET_FLOOR {
            loss += self.nonsingularity_weight * (DET_FLOOR - det.abs());
            let s = -self.nonsingularity_weight * det.signum();
            let r = &map.linear.rows;
            grad.linear[0][0] += s * r[1][1];
            grad.linear[0][1] -= s * r[1][0];
            grad.linear[1][0] -= s * r[0][1];
            grad.linear[1][1] += s * r[0][0];
        }
        (loss, grad)
    }

    fn record_term(
        &self,
        rec: &MeasuredRecord,
        map: &CoordinateMap,
        p: &NormalFormParams,
        cache: &mut MlpCache,
        grad: &mut MapGrad,
    ) -> f64 {
        let n = self.n_points;
        let m = 2 * self.n_h + 1;
        let Some(sens) = radius_sensitivity(p, rec.mu, rec.stable) else {
            return rec.coeff_norm;
        };
        let r = sens.radius;

        let mut circle = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for k in 0..n {
            let psi = TAU * k as f64 / n as f64;
            let (s, c) = psi.sin_cos();
            circle.push((c, s));
            zs.push(map.forward_cached(r * c, r * s, rec.mu, cache));
        }
        let inv_n = 1.0 / n as f64;
        let mut chat = [0.0; 2];
        for z in &zs {
            chat[0] += z[0];
            chat[1] += z[1];
        }
        chat[0] *= inv_n;
        chat[1] *= inv_n;

        let tiny = 1e-12 * (1.0 + chat[0].abs() + chat[1].abs());
        let mut thetas = vec![0.0; n];
        let mut radii = vec![0.0; n];
        let mut dxy = vec![[0.0; 2]; n];
        for k in 0..n {
            let d = [zs[k][0] - chat[0], zs[k][1] - chat[1]];
            let rr = d[0].hypot(d[1]);
            if rr < tiny {
                return rec.coeff_norm;
            }
            dxy[k] = d;
            radii[k] = rr;
            thetas[k] = d[1].atan2(d[0]);
        }

        let mut basis = DMatrix::<f64>::zeros(n, m);
        for k in 0..n {
            for j in 0..m {
                basis[(k, j)] = fourier_basis_entry(j, self.n_h, thetas[k]);
            }
        }
        let gram = basis.transpose() * &basis;
        let rhs = basis.transpose() * DVector::from_column_slice(&radii);
        let Some(chol) = Cholesky::new(gram) else {
            return rec.coeff_norm;
        };
        let coeffs = chol.solve(&rhs);

        let diff = &coeffs - &rec.coeffs;
        let dist = diff.norm();
        let mut term = dist;

        // dL/dz_k, assembled in pieces: through the fitted coefficients
        // (radius and angle of each sample), then the centroid chain rule,
        // then the centroid-alignment addend.
        let mut gpts = vec![[0.0; 2]; n];
        if dist > 1e-15 {
            let w = chol.solve(&(diff / dist));
            let ac = &basis * &coeffs;
            let aw = &basis * &w;
            for k in 0..n {
                let mut awp = 0.0;
                let mut acp = 0.0;
                for j in 0..m {
                    let bp = fourier_basis_entry_dtheta(j, self.n_h, thetas[k]);
                    awp += bp * w[j];
                    acp += bp * coeffs[j];
                }
                let rbar = aw[k];
                let tbar = (radii[k] - ac[k]) * awp - aw[k] * acp;
                let rr = radii[k];
                let d = dxy[k];
                gpts[k][0] = rbar * d[0] / rr - tbar * d[1] / (rr * rr);
                gpts[k][1] = rbar * d[1] / rr + tbar * d[0] / (rr * rr);
            }
            let mut gm = [0.0; 2];
            for g in &gpts {
                gm[0] += g[0];
                gm[1] += g[1];
            }
            gm[0] *= inv_n;
            gm[1] *= inv_n;
            for g in &mut gpts {
                g[0] -= gm[0];
                g[1] -= gm[1];
            }
        }

        let dc = [chat[0] - rec.centroid[0], chat[1] - rec.centroid[1]];
        let ndc = dc[0].hypot(dc[1]);
        term += self.centroid_weight * ndc;
        if ndc > 1e-15 {
            let gc = [
                self.centroid_weight * dc[0] / ndc * inv_n,
                self.centroid_weight * dc[1] / ndc * inv_n,
            ];
            for g in &mut gpts {
                g[0] += gc[0];
                g[1] += gc[1];
            }
        }

        // Pull the point gradients back through the map, collecting the
        // radius direction for the normal-form parameters on the way.
        let lr = &map.linear.rows;
        let mu_in = map.mu_scaling.apply(rec.mu);
        let mut rbar = 0.0;
        for k in 0..n {
            let g = gpts[k];
            if g[0] == 0.0 && g[1] == 0.0 {
                continue;
            }
            let (c, s) = circle[k];
            let (u1, u2) = (r * c, r * s);
            map.nn.forward_cached(&[u1, u2, mu_in], cache);
            let mut ig = [0.0; 3];
            map.nn.backward(cache, &g, &mut grad.nn, Some(&mut ig));
            grad.linear[0][0] += g[0] * u1;
            grad.linear[0][1] += g[0] * u2;
            grad.linear[0][2] += g[0] * rec.mu;
            grad.linear[1][0] += g[1] * u1;
            grad.linear[1][1] += g[1] * u2;
            grad.linear[1][2] += g[1] * rec.mu;
            grad.offset[0] += g[0];
            grad.offset[1] += g[1];
            let du1 = g[0] * lr[0][0] + g[1] * lr[1][0] + ig[0];
            let du2 = g[0] * lr[0][1] + g[1] * lr[1][1] + ig[1];
            rbar += du1 * c + du2 * s;
        }
        grad.mu0 += rbar * sens.d_mu0;
        grad.a2 += rbar * sens.d_a2;
        term
    }
}

/// ADAM then L-BFGS on one objective; the closure returns loss and gradient.
fn run_schedule<F>(
    mut eval: F,
    x0: Vec<f64>,
    sched: &StageSchedule,
    phase: &str,
) -> Result<(Vec<f64>, StageTrace)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let finite = |f: f64, g: &[f64], iteration: usize| -> Result<()> {
        if !f.is_finite() {
            return Err(Error::NanLoss {
                phase: phase.to_string(),
                iteration,
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NanGradient {
                phase: phase.to_string(),
                iteration,
            });
        }
        Ok(())
    };

    let mut x = x0;
    let (initial_loss, mut g) = eval(&x)?;
    finite(initial_loss, &g, 0)?;
    let mut f = initial_loss;
    let mut adam = Vec::with_capacity(sched.adam_iters);
    let mut state = AdamState::new(x.len());
    for it in 0..sched.adam_iters {
        adam_step(&mut state, &mut x, &g, sched.adam_lr)?;
        let (fi, gi) = eval(&x)?;
        finite(fi, &gi, it + 1)?;
        f = fi;
        g = gi;
        adam.push(fi);
    }
    let mut lbfgs = Vec::new();
    if sched.lbfgs_iters > 0 {
        let opts = LbfgsOptions {
            max_iters: sched.lbfgs_iters,
            initial_step: sched.lbfgs_step,
            ..LbfgsOptions::default()
        };
        let out = lbfgs_minimize(&mut eval, x, &opts, phase)?;
        x = out.x;
        f = out.f;
        lbfgs = out.trace[1..].to_vec();
    }
    Ok((
        x,
        StageTrace {
            initial_loss,
            adam,
            lbfgs,
            final_loss: f,
        },
    ))
}

fn unpack_stage1(template: &CoordinateMap, x: &[f64]) -> CoordinateMap {
    let mut map = template.clone();
    map.linear.rows = [[x[0], x[1], x[2]], [x[3], x[4], x[5]]];
    map.offset = [x[6], x[7]];
    map
}

/// Fit the affine part of the map with the network zeroed and the normal
/// form frozen at its starting values.
pub fn stage1_fit_linear(
    ds: &TrainingDataset,
    cfg: &TrainingConfig,
) -> Result<(CoordinateMap, StageTrace)> {
    cfg.validate()?;
    ds.validate()?;
    let measured = measure_records(ds, cfg.n_h)?;
    let p = initial_normal_form(ds, cfg)?;
    stage1_inner(&measured, ds, cfg, &p)
}

fn stage1_inner(
    measured: &[MeasuredRecord],
    ds: &TrainingDataset,
    cfg: &TrainingConfig,
    p: &NormalFormParams,
) -> Result<(CoordinateMap, StageTrace)> {
    // Data-driven start: amplitude-matched scaling, orientation from the
    // measured winding, offset at the mean centroid.
    let mut sum_scale = 0.0;
    let mut n_scale = 0usize;
    let mut wind = 0.0;
    let mut c_mean = [0.0; 2];
    for rec in measured {
        if let Some(sens) = radius_sensitivity(p, rec.mu, rec.stable) {
            if sens.radius > 0.0 {
                sum_scale += rec.coeffs[0] / sens.radius;
                n_scale += 1;
            }
        }
        wind += rec.winding.signum();
        c_mean[0] += rec.centroid[0];
        c_mean[1] += rec.centroid[1];
    }
    if n_scale == 0 {
        return Err(Error::InvalidParams(
            "no measured record lies on a branch of the starting normal form; \
             adjust mu0_init, mu0_bound, or a2_init"
                .into(),
        ));
    }
    let scale = sum_scale / n_scale as f64;
    let flip = if wind < 0.0 { -1.0 } else { 1.0 };
    let inv_n = 1.0 / measured.len() as f64;
    let template = CoordinateMap::new(
        LinearMap {
            rows: [[scale, 0.0, 0.0], [0.0, flip * scale, 0.0]],
        },
        [c_mean[0] * inv_n, c_mean[1] * inv_n],
        MlpNetwork::zeroed(&map_sizes(&cfg.map_hidden))?,
        MuScaling::from_values(&ds.mu_values()),
    )?;

    let problem = ShapeProblem {
        measured,
        n_points: cfg.n_points,
        n_h: cfg.n_h,
        centroid_weight: cfg.centroid_weight,
        nonsingularity_weight: cfg.nonsingularity_weight,
    };
    let mut x0 = Vec::with_capacity(8);
    x0.extend_from_slice(&template.linear.rows[0]);
    x0.extend_from_slice(&template.linear.rows[1]);
    x0.extend_from_slice(&template.offset);
    let eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let map = unpack_stage1(&template, x);
        let (f, g) = problem.objective(&map, p);
        let mut gx = Vec::with_capacity(8);
        gx.extend_from_slice(&g.linear[0]);
        gx.extend_from_slice(&g.linear[1]);
        gx.extend_from_slice(&g.offset);
        Ok((f, gx))
    };
    let (x, trace) = run_schedule(eval, x0, &cfg.stage1, "stage1")?;
    Ok((unpack_stage1(&template, &x), trace))
}

fn unpack_stage2(
    template: &CoordinateMap,
    x: &[f64],
    n_nn: usize,
    criticality: Criticality,
) -> (CoordinateMap, NormalFormParams) {
    let mut map = template.clone();
    map.nn
        .set_params(&x[..n_nn])
        .expect("stage-2 vector sized to the network");
    let mu0 = x[n_nn];
    let (a2, quintic_enabled) = match criticality {
        Criticality::Subcritical => (softplus(x[n_nn + 1]), true),
        Criticality::Supercritical => (-softplus(x[n_nn + 1]), false),
    };
    (
        map,
        NormalFormParams {
            mu0,
            a2,
            quintic_enabled,
            criticality,
        },
    )
}

/// Fit the network correction together with `mu0` and `a2`; the affine part
/// stays frozen. The cubic coefficient is optimized through softplus so its
/// sign cannot flip.
pub fn stage2_fit_nn(
    ds: &TrainingDataset,
    cfg: &TrainingConfig,
    stage1_map: &CoordinateMap,
) -> Result<(CoordinateMap, NormalFormParams, StageTrace)> {
    cfg.validate()?;
    ds.validate()?;
    let measured = measure_records(ds, cfg.n_h)?;
    let p0 = initial_normal_form(ds, cfg)?;
    stage2_inner(&measured, cfg, stage1_map, &p0)
}

fn stage2_inner(
    measured: &[MeasuredRecord],
    cfg: &TrainingConfig,
    stage1_map: &CoordinateMap,
    p0: &NormalFormParams,
) -> Result<(CoordinateMap, NormalFormParams, StageTrace)> {
    let mut nn = MlpNetwork::glorot(&map_sizes(&cfg.map_hidden), cfg.seed)?;
    nn.zero_last_layer();
    let mut template = stage1_map.clone();
    template.nn = nn;
    let n_nn = template.nn.param_count();
    let sign = match cfg.criticality {
        Criticality::Subcritical => 1.0,
        Criticality::Supercritical => -1.0,
    };

    let problem = ShapeProblem {
        measured,
        n_points: cfg.n_points,
        n_h: cfg.n_h,
        centroid_weight: cfg.centroid_weight,
        nonsingularity_weight: cfg.nonsingularity_weight,
    };
    let mut x0 = template.nn.params().to_vec();
    x0.push(p0.mu0);
    x0.push(inv_softplus(p0.a2.abs()));
    let eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (map, p) = unpack_stage2(&template, x, n_nn, cfg.criticality);
        let (f, g) = problem.objective(&map, &p);
        let mut gx = g.nn;
        gx.push(g.mu0);
        gx.push(g.a2 * sign * sigmoid(x[n_nn + 1]));
        Ok((f, gx))
    };
    let (x, trace) = run_schedule(eval, x0, &cfg.stage2, "stage2")?;
    let (map, p) = unpack_stage2(&template, &x, n_nn, cfg.criticality);
    p.validate()?;
    Ok((map, p, trace))
}

/// One record prepared for the speed objective: branch radius, matched
/// initial phase, and the (possibly downsampled) time grid and samples.
struct SpeedTerm {
    mu: f64,
    r: f64,
    theta0: f64,
    t: Vec<f64>,
    z: Vec<[f64; 2]>,
}

fn speed_terms(
    ds: &TrainingDataset,
    map: &CoordinateMap,
    p: &NormalFormParams,
    cfg: &TrainingConfig,
) -> Result<Vec<SpeedTerm>> {
    ds.records
        .iter()
        .map(|rec| {
            let r = stability_matched_radius(p, rec.mu, rec.stable).ok_or({
                Error::MissingBranch {
                    mu: rec.mu,
                    wanted: if rec.stable { "stable" } else { "unstable" },
                }
            })?;
            let z0 = [rec.samples[0][0], rec.samples[0][1]];
            let theta0 = match_initial_phase(map, p, z0, rec.mu, rec.stable, cfg.n_points)?;
            let idx = downsample_indices(rec.n_samples(), cfg.downsample);
            Ok(SpeedTerm {
                mu: rec.mu,
                r,
                theta0,
                t: idx.iter().map(|&j| rec.t[j]).collect(),
                z: idx
                    .iter()
                    .map(|&j| [rec.samples[j][0], rec.samples[j][1]])
                    .collect(),
            })
        })
        .collect()
}

/// Time-domain speed objective: integrate the phase with RK4 on each
/// record's grid and sum the point gaps to the measurements. Gradients come
/// from the discrete adjoint of the exact same RK4 steps.
///
/// Stage values below [`SPEED_FLOOR`] are clamped there and penalized
/// linearly, keeping the integration defined while pushing the speed
/// positive. The penalty is differentiated in the parameters at the frozen
/// stage angles (its indirect dependence through earlier stages is dropped;
/// the term vanishes identically wherever the model is valid).
struct SpeedProblem<'a> {
    terms: &'a [SpeedTerm],
    map: &'a CoordinateMap,
}

impl SpeedProblem<'_> {
    fn objective(&self, speed: &SpeedModel) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; 1 + speed.nn.param_count()];
        let mut nn_cache = MlpCache::for_network(&speed.nn);
        let mut map_cache = MlpCache::for_network(&self.map.nn);
        let mut loss = 0.0;
        for term in self.terms {
            loss += self.term_loss(term, speed, &mut nn_cache, &mut map_cache, &mut grad);
        }
        (loss, grad)
    }

    fn term_loss(
        &self,
        term: &SpeedTerm,
        speed: &SpeedModel,
        nn_cache: &mut MlpCache,
        map_cache: &mut MlpCache,
        grad: &mut [f64],
    ) -> f64 {
        let nt = term.t.len();
        let r = term.r;
        let mu_scaled = speed.mu_scaling.apply(term.mu);
        let (harmonic, coeffs) = match speed.mode {
            SpeedMode::Direct => (None, Vec::new()),
            SpeedMode::Harmonic { n_h } => (
                Some(n_h),
                speed.nn.forward_cached(&[r, mu_scaled], nn_cache).to_vec(),
            ),
        };
        let mut gcoeffs = vec![0.0; coeffs.len()];

        let raw_speed = |theta: f64, cache: &mut MlpCache| -> f64 {
            match harmonic {
                None => {
                    let x = [r * theta.cos(), r * theta.sin(), mu_scaled];
                    speed.omega0 + speed.nn.forward_cached(&x, cache)[0]
                }
                Some(n_h) => {
                    let mut w = speed.omega0;
                    for (k, c) in coeffs.iter().enumerate() {
                        w += c * fourier_basis_entry(k, n_h, theta);
                    }
                    w
                }
            }
        };
        let speed_dtheta = |theta: f64, cache: &mut MlpCache| -> f64 {
            match harmonic {
                None => {
                    let (s, c) = theta.sin_cos();
                    speed.nn.forward_cached(&[r * c, r * s, mu_scaled], cache);
                    let mut ig = [0.0; 3];
                    speed.nn.backward_input_only(cache, &[1.0], &mut ig);
                    ig[0] * (-r * s) + ig[1] * (r * c)
                }
                Some(n_h) => coeffs
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c * fourier_basis_entry_dtheta(k, n_h, theta))
                    .sum(),
            }
        };

        // Forward RK4, recording stage angles and clamp flags.
        let mut theta = vec![0.0; nt];
        theta[0] = term.theta0;
        let mut stage_theta = vec![[0.0; 4]; nt.saturating_sub(1)];
        let mut clamped = vec![[false; 4]; nt.saturating_sub(1)];
        let mut penalty = 0.0;
        for j in 0..nt - 1 {
            let h = term.t[j + 1] - term.t[j];
            let th0 = theta[j];
            let mut pts = [0.0; 4];
            let mut ks = [0.0; 4];
            for i in 0..4 {
                pts[i] = match i {
                    0 => th0,
                    1 => th0 + 0.5 * h * ks[0],
                    2 => th0 + 0.5 * h * ks[1],
                    _ => th0 + h * ks[2],
                };
                let raw = raw_speed(pts[i], nn_cache);
                if raw < SPEED_FLOOR {
                    penalty += SPEED_PENALTY_WEIGHT * (SPEED_FLOOR - raw);
                    clamped[j][i] = true;
                    grad[0] -= SPEED_PENALTY_WEIGHT;
                    match harmonic {
                        None => {
                            // Cache still holds the forward pass at pts[i].
                            speed.nn.backward(
                                nn_cache,
                                &[-SPEED_PENALTY_WEIGHT],
                                &mut grad[1..],
                                None,
                            );
                        }
                        Some(n_h) => {
                            for (k, gc) in gcoeffs.iter_mut().enumerate() {
                                *gc -= SPEED_PENALTY_WEIGHT
                                    * fourier_basis_entry(k, n_h, pts[i]);
                            }
                        }
                    }
                    ks[i] = SPEED_FLOOR;
                } else {
                    ks[i] = raw;
                }
            }
            stage_theta[j] = pts;
            theta[j + 1] = th0 + h / 6.0 * (ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3]);
        }

        // Point losses and their angle gradients.
        let mut data_loss = 0.0;
        let mut dtheta = vec![0.0; nt];
        for (k, &th) in theta.iter().enumerate() {
            let (s, c) = th.sin_cos();
            let (u1, u2) = (r * c, r * s);
            let zhat = self.map.forward_cached(u1, u2, term.mu, map_cache);
            let dx = zhat[0] - term.z[k][0];
            let dy = zhat[1] - term.z[k][1];
            let dist = dx.hypot(dy);
            data_loss += dist;
            if dist > 1e-15 {
                let jac = self.map.jacobian_u_cached(u1, u2, term.mu, map_cache);
                let du = [-r * s, r * c];
                dtheta[k] = (dx * (jac[0][0] * du[0] + jac[0][1] * du[1])
                    + dy * (jac[1][0] * du[0] + jac[1][1] * du[1]))
                    / dist;
            }
        }

        // Reverse sweep: lam carries dL/dtheta_j backwards through the steps.
        let mut lam = 0.0;
        for j in (0..nt - 1).rev() {
            lam += dtheta[j + 1];
            let h = term.t[j + 1] - term.t[j];
            let pts = stage_theta[j];
            let mut omp = [0.0; 4];
            for i in 0..4 {
                if !clamped[j][i] {
                    omp[i] = speed_dtheta(pts[i], nn_cache);
                }
            }
            let kb4 = lam * h / 6.0;
            let kb3 = lam * h / 3.0 + kb4 * omp[3] * h;
            let kb2 = lam * h / 3.0 + kb3 * omp[2] * (0.5 * h);
            let kb1 = lam * h / 6.0 + kb2 * omp[1] * (0.5 * h);
            let kbs = [kb1, kb2, kb3, kb4];
            for i in 0..4 {
                if clamped[j][i] {
                    continue;
                }
                grad[0] += kbs[i];
                match harmonic {
                    None => {
                        let (s, c) = pts[i].sin_cos();
                        speed
                            .nn
                            .forward_cached(&[r * c, r * s, mu_scaled], nn_cache);
                        speed.nn.backward(nn_cache, &[kbs[i]], &mut grad[1..], None);
                    }
                    Some(n_h) => {
                        for (k, gc) in gcoeffs.iter_mut().enumerate() {
                            *gc += kbs[i] * fourier_basis_entry(k, n_h, pts[i]);
                        }
                    }
                }
            }
            lam += kb1 * omp[0] + kb2 * omp[1] + kb3 * omp[2] + kb4 * omp[3];
        }

        if harmonic.is_some() {
            speed.nn.forward_cached(&[r, mu_scaled], nn_cache);
            speed.nn.backward(nn_cache, &gcoeffs, &mut grad[1..], None);
        }
        data_loss + penalty
    }
}

/// Fundamental frequency of the first record's first column: Hann window,
/// zero-padded FFT, parabolic refinement of the dominant peak.
fn omega0_from_fft(rec: &LcoRecord) -> Result<f64> {
    let n = rec.n_samples();
    if n < 8 || rec.t.len() < 2 {
        return Err(Error::InvalidInput(
            "frequency estimation needs at least 8 samples".into(),
        ));
    }
    let dt = rec.t[1] - rec.t[0];
    let mean = rec.samples.iter().map(|s| s[0]).sum::<f64>() / n as f64;
    let m = (8 * n).next_power_of_two();
    let mut buf = vec![Complex::new(0.0, 0.0); m];
    for (k, s) in rec.samples.iter().enumerate() {
        let w = 0.5 - 0.5 * (TAU * k as f64 / (n - 1) as f64).cos();
        buf[k] = Complex::new((s[0] - mean) * w, 0.0);
    }
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);
    let half = m / 2;
    let (mut kmax, mut amax) = (0usize, 0.0);
    for (k, v) in buf.iter().enumerate().take(half).skip(1) {
        let a = v.norm_sqr();
        if a > amax {
            amax = a;
            kmax = k;
        }
    }
    if kmax == 0 || amax <= 0.0 {
        return Err(Error::InvalidInput(
            "no spectral peak in the first record".into(),
        ));
    }
    let delta = if kmax + 1 < half {
        let la = buf[kmax - 1].norm_sqr().max(1e-300).ln();
        let lb = amax.ln();
        let lc = buf[kmax + 1].norm_sqr().max(1e-300).ln();
        let denom = la - 2.0 * lb + lc;
        if denom.abs() > 1e-12 {
            (0.5 * (la - lc) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    } else {
        0.0
    };
    Ok(TAU * (kmax as f64 + delta) / (m as f64 * dt))
}

fn unpack_speed(template: &SpeedModel, x: &[f64]) -> SpeedModel {
    let mut speed = template.clone();
    speed.omega0 = x[0];
    speed
        .nn
        .set_params(&x[1..])
        .expect("stage-3 vector sized to the network");
    speed
}

/// Value and gradient of the stage-three objective at the packed vector
/// `x = [omega0, network params...]`, holding the map and normal form
/// frozen. The gradient is the discrete adjoint of the exact RK4 steps the
/// value uses, so finite differences of the value must reproduce it.
pub fn speed_objective(
    ds: &TrainingDataset,
    cfg: &TrainingConfig,
    map: &CoordinateMap,
    p: &NormalFormParams,
    template: &SpeedModel,
    x: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let expected = 1 + template.nn.param_count();
    if x.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: x.len(),
        });
    }
    let terms = speed_terms(ds, map, p, cfg)?;
    let problem = SpeedProblem {
        terms: &terms,
        map,
    };
    Ok(problem.objective(&unpack_speed(template, x)))
}

/// Fit the speed model against the frozen map and normal form.
pub fn stage3_fit_speed(
    ds: &TrainingDataset,
    cfg: &TrainingConfig,
    map: &CoordinateMap,
    p: &NormalFormParams,
) -> Result<(SpeedModel, StageTrace)> {
    cfg.validate()?;
    ds.validate()?;
    let omega0 = omega0_from_fft(&ds.records[0])?;
    let (mode, sizes) = match &cfg.speed {
        SpeedConfig::Direct { hidden } => {
            let mut sizes = vec![3];
            sizes.extend_from_slice(hidden);
            sizes.push(1);
            (SpeedMode::Direct, sizes)
        }
        SpeedConfig::Harmonic { n_h, hidden } => {
            let mut sizes = vec![2];
            sizes.extend_from_slice(hidden);
            sizes.push(2 * n_h + 1);
            (SpeedMode::Harmonic { n_h: *n_h }, sizes)
        }
    };
    let mut nn = MlpNetwork::glorot(&sizes, cfg.seed.wrapping_add(0x5eed))?;
    nn.zero_last_layer();
    let template = SpeedModel::new(omega0, nn, mode, map.mu_scaling)?;

    let terms = speed_terms(ds, map, p, cfg)?;
    let problem = SpeedProblem {
        terms: &terms,
        map,
    };
    let mut x0 = vec![omega0];
    x0.extend_from_slice(template.nn.params());
    let eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let speed = unpack_speed(&template, x);
        Ok(problem.objective(&speed))
    };
    let (x, trace) = run_schedule(eval, x0, &cfg.stage3, "stage3")?;
    Ok((unpack_speed(&template, &x), trace))
}

/// Run the full pipeline. The report is returned even when a stage fails,
/// holding everything completed up to that point.
pub fn train_full(
    ds: &TrainingDataset,
    cfg: &TrainingConfig,
) -> (Result<HybridModel>, TrainingReport) {
    let t0 = Instant::now();
    let mut report = TrainingReport::empty(cfg);
    let result = train_full_inner(ds, cfg, &mut report);
    report.wall_seconds = t0.elapsed().as_secs_f64();
    (result, report)
}

fn train_full_inner(
    ds: &TrainingDataset,
    cfg: &TrainingConfig,
    report: &mut TrainingReport,
) -> Result<HybridModel> {
    cfg.validate()?;
    ds.validate()?;
    report.dataset_fingerprint = ds.fingerprint();
    let measured = measure_records(ds, cfg.n_h)?;
    let p0 = initial_normal_form(ds, cfg)?;
    report.mu0 = Some(p0.mu0);
    report.a2 = Some(p0.a2);

    let (map1, trace1) = stage1_inner(&measured, ds, cfg, &p0)?;
    report.stage1 = Some(trace1);

    let (map2, p2, trace2) = stage2_inner(&measured, cfg, &map1, &p0)?;
    report.stage2 = Some(trace2);
    report.mu0 = Some(p2.mu0);
    report.a2 = Some(p2.a2);

    let aux = fit_auxiliary_maps(ds, &map2, AUX_RIDGE)?;

    let (speed, trace3) = stage3_fit_speed(ds, cfg, &map2, &p2)?;
    report.stage3 = Some(trace3);
    report.omega0 = Some(speed.omega0);

    let xi_u = shape_loss(ds, &map2, &p2, cfg.n_points, cfg.n_h)?;
    let xi_omega = speed_loss(ds, &map2, &p2, &speed, cfg.downsample, cfg.n_points)?;
    report.final_shape_loss = Some(xi_u);
    report.final_speed_loss = Some(xi_omega);

    Ok(HybridModel::new(
        p2,
        map2,
        speed,
        aux,
        report.dataset_fingerprint.clone(),
        cfg.clone(),
    ))
}

/// One cross-validation fold: the model retrained without record
/// `held_out` and its errors on that record. Failures are recorded, not
/// fatal, so the remaining folds still run.
#[derive(Debug, Clone, Serialize)]
pub struct FoldOutcome {
    pub held_out: usize,
    pub mu: f64,
    pub stable: bool,
    #[serde(skip)]
    pub model: Option<HybridModel>,
    pub mu0: Option<f64>,
    pub a2: Option<f64>,
    pub omega0: Option<f64>,
    pub saddle_node: Option<f64>,
    /// Descriptor distance to the held-out orbit over its mean radius.
    pub held_out_shape_error: Option<f64>,
    /// Time-series RMS error over the held-out record, relative to its mean
    /// radius.
    pub held_out_nrmse: Option<f64>,
    pub min_abs_det: Option<f64>,
    pub error: Option<String>,
}

/// Retrain once per record with that record held out. Folds run on up to
/// [`thread_cap`] threads; fold `i` uses seed `cfg.seed + 1 + i`.
pub fn leave_one_out(ds: &TrainingDataset, cfg: &TrainingConfig) -> Result<Vec<FoldOutcome>> {
    cfg.validate()?;
    ds.validate()?;
    let n = ds.records.len();
    if n < 2 {
        return Err(Error::InvalidInput(
            "cross-validation needs at least 2 records".into(),
        ));
    }
    let workers = thread_cap().min(n).max(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(vec![None::<FoldOutcome>; n]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let outcome = run_fold(ds, cfg, i);
                results.lock().expect("fold results lock")[i] = Some(outcome);
            });
        }
    });
    Ok(results
        .into_inner()
        .expect("fold results lock")
        .into_iter()
        .map(|o| o.expect("every fold index visited"))
        .collect())
}

fn run_fold(ds: &TrainingDataset, cfg: &TrainingConfig, i: usize) -> FoldOutcome {
    let rec = &ds.records[i];
    let mut out = FoldOutcome {
        held_out: i,
        mu: rec.mu,
        stable: rec.stable,
        model: None,
        mu0: None,
        a2: None,
        omega0: None,
        saddle_node: None,
        held_out_shape_error: None,
        held_out_nrmse: None,
        min_abs_det: None,
        error: None,
    };
    let mut reduced = ds.clone();
    reduced.records.remove(i);
    let mut fold_cfg = cfg.clone();
    fold_cfg.seed = cfg.seed.wrapping_add(1 + i as u64);
    let model = match train_full(&reduced, &fold_cfg).0 {
        Ok(m) => m,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    out.mu0 = Some(model.normal_form.mu0);
    out.a2 = Some(model.normal_form.a2);
    out.omega0 = Some(model.speed.omega0);
    out.saddle_node = saddle_node_mu(&model.normal_form).ok();
    if let Err(e) = fold_metrics(ds, i, &model, cfg, &mut out) {
        out.error = Some(e.to_string());
    }
    out.model = Some(model);
    out
}

fn fold_metrics(
    ds: &TrainingDataset,
    i: usize,
    model: &HybridModel,
    cfg: &TrainingConfig,
    out: &mut FoldOutcome,
) -> Result<()> {
    let rec = &ds.records[i];
    let orbit = rec.planar_orbit()?;
    let measured = orbit_descriptor(&orbit, cfg.n_h)?;
    let a0 = measured.a[0].max(1e-300);
    let pred = predicted_orbit(&model.map, &model.normal_form, rec.mu, rec.stable, cfg.n_points)?;
    let pd = orbit_descriptor(&pred, cfg.n_h)?;
    out.held_out_shape_error = Some(descriptor_distance(&measured, &pd)? / a0);

    let z0 = [rec.samples[0][0], rec.samples[0][1]];
    let ts = predict_timeseries(
        &model.map,
        &model.normal_form,
        &model.speed,
        &model.aux,
        rec.mu,
        rec.stable,
        z0,
        &rec.t,
        cfg.n_points,
    )?;
    let mut se = 0.0;
    let mut count = 0usize;
    for (row, sample) in ts.z.iter().zip(&rec.samples) {
        for (v, s) in row.iter().zip(sample.iter()) {
            let d = v - s;
            se += d * d;
            count += 1;
        }
    }
    out.held_out_nrmse = Some((se / count as f64).sqrt() / a0);

    let mus = ds.mu_values();
    let lo = mus.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mus.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rep = invertibility_report(&model.map, &model.normal_form, (lo, hi), 15, 16, 32)?;
    out.min_abs_det = Some(rep.min_abs_det);
    Ok(())
}
