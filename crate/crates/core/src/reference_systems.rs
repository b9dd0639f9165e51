//! Reference oscillators and training-data generation.
//!
//! Two ground-truth systems: a Van der Pol oscillator (supercritical Hopf,
//! stable cycles only) and a three-degree-of-freedom aeroelastic flutter
//! model (subcritical Hopf followed by a saddle-node of cycles, so stable
//! and unstable cycles coexist). Data generation simulates the stable
//! cycles and solves for the unstable ones, producing labelled records.

use crate::dataset::{LcoRecord, Provenance, TrainingDataset};
use crate::error::{Error, Result};
use crate::periodic_orbits::{
    flow, record_window, refined_extremum, shoot_periodic, trace_branch, upward_crossings,
    Branch, PeriodicOrbit, TraceOptions,
};
use nalgebra::{Complex, DMatrix, Matrix3, Vector3};
use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

/// Van der Pol vector field.
pub fn vdp_rhs(z1: f64, z2: f64, mu: f64) -> (f64, f64) {
    (z2, 2.0 * mu * z2 - z1 * z1 * z2 - z1)
}

/// The same field in the `(mu, state, out)` shape the orbit solvers expect.
pub fn vdp_ode(mu: f64, x: &[f64], out: &mut [f64]) {
    let (d1, d2) = vdp_rhs(x[0], x[1], mu);
    out[0] = d1;
    out[1] = d2;
}

/// Structural and aerodynamic constants of the 3-DOF flutter model. The
/// airspeed is the bifurcation parameter and is passed separately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AeroParams {
    /// Wing semi-chord (m).
    pub b: f64,
    /// Elastic-axis position relative to the semi-chord (nd).
    pub a: f64,
    /// Air density (kg/m^3).
    pub rho: f64,
    /// Wing mass (kg).
    pub m_w: f64,
    /// Mass of wing and support (kg).
    pub m_t: f64,
    /// Wing moment of inertia about the elastic axis (kg m^2).
    pub i_alpha: f64,
    /// Pitch linear damping (kg m^2/s).
    pub c_alpha: f64,
    /// Heave linear damping (kg/s).
    pub c_h: f64,
    /// Pitch linear stiffness (N/rad).
    pub k_alpha: f64,
    /// Pitch quadratic stiffness (N/rad^2).
    pub k_alpha2: f64,
    /// Pitch cubic stiffness (N/rad^3).
    pub k_alpha3: f64,
    /// Heave linear stiffness (N/m).
    pub k_h: f64,
    /// Distance between centre of gravity and elastic axis (nd).
    pub x_alpha: f64,
    /// Aeroelastic coefficients c0..c4 (nd).
    pub c: [f64; 5],
}

impl Default for AeroParams {
    fn default() -> Self {
        Self {
            b: 0.15,
            a: -0.5,
            rho: 1.204,
            m_w: 5.3,
            m_t: 16.9,
            i_alpha: 0.1726,
            c_alpha: 0.5628,
            c_h: 15.443,
            k_alpha: 54.1162,
            k_alpha2: 751.6,
            k_alpha3: 5006.7,
            k_h: 3529.4,
            x_alpha: 0.234,
            c: [1.0, 0.165, 0.0455, 0.335, 0.3],
        }
    }
}

impl AeroParams {
    pub fn c_hat(&self) -> f64 {
        self.c[0] - self.c[1] - self.c[3]
    }

    pub fn mass_matrix(&self) -> Matrix3<f64> {
        let coupling = self.m_w * self.x_alpha * self.b - self.a * PI * self.rho * self.b.powi(3);
        Matrix3::new(
            self.m_t + PI * self.rho * self.b * self.b,
            coupling,
            0.0,
            coupling,
            self.i_alpha + PI * (0.125 + self.a * self.a) * self.rho * self.b.powi(4),
            0.0,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn damping_matrix(&self, u: f64) -> Matrix3<f64> {
        let (b, a, rho) = (self.b, self.a, self.rho);
        let ch = self.c_hat();
        let c = &self.c;
        let lag = c[1] * c[2] + c[3] * c[4];
        Matrix3::new(
            self.c_h + 2.0 * PI * rho * b * u * ch,
            (1.0 + ch * (1.0 - 2.0 * a)) * PI * rho * b * b * u,
            2.0 * PI * rho * u * u * b * lag,
            -2.0 * PI * (a + 0.5) * rho * b * b * ch * u,
            self.c_alpha + (0.5 - a) * (1.0 - ch * (1.0 + 2.0 * a)) * PI * rho * b.powi(3) * u,
            -2.0 * PI * rho * b * b * u * u * (a + 0.5) * lag,
            -1.0 / b,
            a - 0.5,
            (c[2] + c[4]) * u / b,
        )
    }

    pub fn stiffness_matrix(&self, u: f64) -> Matrix3<f64> {
        let (b, a, rho) = (self.b, self.a, self.rho);
        let ch = self.c_hat();
        let c = &self.c;
        let lag = c[2] * c[4] * (c[1] + c[3]);
        Matrix3::new(
            self.k_h,
            2.0 * PI * rho * b * u * u * ch,
            2.0 * PI * rho * u.powi(3) * lag,
            0.0,
            self.k_alpha - 2.0 * PI * (0.5 + a) * rho * ch * b * b * u * u,
            -2.0 * PI * rho * b * u.powi(3) * (a + 0.5) * lag,
            0.0,
            -u / b,
            c[2] * c[4] * u * u / (b * b),
        )
    }

    /// Pitch restoring nonlinearity, entering the second equation only.
    fn pitch_nonlinearity(&self, alpha: f64) -> f64 {
        self.k_alpha2 * alpha * alpha + self.k_alpha3 * alpha.powi(3)
    }
}

/// The flutter model in first-order form, with the mass matrix factored
/// once. State layout: `(h, alpha, w, h', alpha', w')`.
#[derive(Debug, Clone)]
pub struct AeroSystem {
    pub params: AeroParams,
    minv: Matrix3<f64>,
}

impl AeroSystem {
    pub fn new(params: AeroParams) -> Result<Self> {
        let minv = params.mass_matrix().try_inverse().ok_or_else(|| {
            Error::InvalidParams("aeroelastic mass matrix is singular".into())
        })?;
        Ok(Self { params, minv })
    }

    /// `dx/dt` at airspeed `mu`.
    pub fn rhs(&self, mu: f64, x: &[f64], out: &mut [f64]) {
        self.rhs_forced(mu, x, 0.0, out);
    }

    /// Same with an external force `u` applied to the heave equation.
    pub fn rhs_forced(&self, mu: f64, x: &[f64], u: f64, out: &mut [f64]) {
        let d = self.params.damping_matrix(mu);
        let k = self.params.stiffness_matrix(mu);
        let pos = Vector3::new(x[0], x[1], x[2]);
        let vel = Vector3::new(x[3], x[4], x[5]);
        let mut load = d * vel + k * pos;
        load[0] -= u;
        load[1] += self.params.pitch_nonlinearity(x[1]);
        let acc = -(self.minv * load);
        out[0] = x[3];
        out[1] = x[4];
        out[2] = x[5];
        out[3] = acc[0];
        out[4] = acc[1];
        out[5] = acc[2];
    }

    /// Linearization about the resting state as a 6x6 first-order matrix.
    pub fn linear_matrix(&self, mu: f64) -> DMatrix<f64> {
        let mk = -self.minv * self.params.stiffness_matrix(mu);
        let md = -self.minv * self.params.damping_matrix(mu);
        let mut a = DMatrix::zeros(6, 6);
        for i in 0..3 {
            a[(i, i + 3)] = 1.0;
            for j in 0..3 {
                a[(i + 3, j)] = mk[(i, j)];
                a[(i + 3, j + 3)] = md[(i, j)];
            }
        }
        a
    }

    /// Largest real part over the linearization's eigenvalues, with the
    /// angular frequency of that mode.
    pub fn growth_rate(&self, mu: f64) -> (f64, f64) {
        let eigs = self.linear_matrix(mu).complex_eigenvalues();
        let lead: Complex<f64> = *eigs
            .iter()
            .max_by(|a, b| a.re.partial_cmp(&b.re).unwrap())
            .unwrap();
        (lead.re, lead.im.abs())
    }

    /// Locate the Hopf point (eigenvalue crossing of the resting state) by
    /// bisection on the airspeed, returning `(mu0, omega)` with the flutter
    /// frequency at the crossing.
    pub fn hopf_point(&self, mut lo: f64, mut hi: f64) -> Result<(f64, f64)> {
        let f_lo = self.growth_rate(lo).0;
        let f_hi = self.growth_rate(hi).0;
        if f_lo >= 0.0 || f_hi <= 0.0 {
            return Err(Error::InvalidParams(format!(
                "airspeeds [{lo}, {hi}] do not bracket an eigenvalue crossing \
                 (growth rates {f_lo:.3e}, {f_hi:.3e})"
            )));
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.growth_rate(mid).0 < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mu0 = 0.5 * (lo + hi);
        Ok((mu0, self.growth_rate(mu0).1))
    }
}

/// One evaluation of the flutter field, for spot checks; hot paths should
/// build an `AeroSystem` once instead.
pub fn aero_rhs(state: &[f64; 6], mu: f64, p: &AeroParams) -> Result<[f64; 6]> {
    let sys = AeroSystem::new(*p)?;
    let mut out = [0.0; 6];
    sys.rhs(mu, state, &mut out);
    Ok(out)
}

/// Average interval between upward mean-crossings of a sampled signal, or
/// `None` when fewer than two crossings are present.
pub fn estimate_period(t: &[f64], x: &[f64]) -> Option<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let crossings = upward_crossings(t, x, mean);
    if crossings.len() < 2 {
        return None;
    }
    Some((crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64)
}

/// Grid-insensitive half peak-to-peak amplitude of one observed column.
pub fn record_amplitude(rec: &LcoRecord, col: usize) -> f64 {
    let vals: Vec<f64> = rec.samples.iter().map(|s| s[col]).collect();
    0.5 * (refined_extremum(&vals, true) - refined_extremum(&vals, false))
}

fn window_amplitude(rows: &[Vec<f64>], col: usize) -> f64 {
    let vals: Vec<f64> = rows.iter().map(|r| r[col]).collect();
    0.5 * (refined_extremum(&vals, true) - refined_extremum(&vals, false))
}

fn observe_rows(rows: &[Vec<f64>], observe: &[usize]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| observe.iter().map(|&i| r[i]).collect())
        .collect()
}

/// Settle onto an attracting cycle and record it.
///
/// Integrates past the transient, then compares the amplitude over two
/// consecutive record-length windows: a drift above 0.5% means the
/// transient has not died out (`NotSettled`), an amplitude below 1e-6 means
/// there is no cycle to record (`NoLco`). The returned record holds the
/// second window, sampled at `dt` with `substeps` integrator steps per
/// sample.
#[allow(clippy::too_many_arguments)]
pub fn simulate_lco(
    rhs: &dyn Fn(f64, &[f64], &mut [f64]),
    mu: f64,
    x0: &[f64],
    dt: f64,
    settle_time: f64,
    record_time: f64,
    substeps: usize,
    observe: &[usize],
) -> Result<LcoRecord> {
    let n_samples = (record_time / dt).round() as usize;
    if n_samples < 8 {
        return Err(Error::InvalidParams(
            "recording window shorter than 8 samples".into(),
        ));
    }
    let h = dt / substeps as f64;
    let settled = flow(&rhs, mu, x0, settle_time, (settle_time / h).round() as usize);
    let (_, probe) = record_window(&rhs, mu, &settled, dt, n_samples, substeps);
    let (t, rows) = record_window(&rhs, mu, probe.last().unwrap(), dt, n_samples, substeps);
    let amp_probe = window_amplitude(&probe, observe[0]);
    let amp = window_amplitude(&rows, observe[0]);
    if amp < 1e-6 {
        return Err(Error::NoLco(amp));
    }
    let drift = (amp - amp_probe).abs() / amp;
    if drift > 0.005 {
        return Err(Error::NotSettled(100.0 * drift));
    }
    Ok(LcoRecord {
        mu,
        stable: true,
        t,
        samples: observe_rows(&rows, observe),
        provenance: Provenance::Simulated,
    })
}

/// Van der Pol data-generation settings. Defaults: six parameter values
/// with uniform spacing 0.18, ten seconds per record at 50 Hz, long settle
/// so records start on the cycle.
#[derive(Debug, Clone)]
pub struct VdpDatasetConfig {
    pub mu_values: Vec<f64>,
    pub dt: f64,
    pub settle_time: f64,
    pub record_time: f64,
}

impl Default for VdpDatasetConfig {
    fn default() -> Self {
        Self {
            mu_values: vec![0.1, 0.28, 0.46, 0.64, 0.82, 1.0],
            dt: 0.02,
            settle_time: 100.0,
            record_time: 10.0,
        }
    }
}

/// Simulate the Van der Pol cycles listed in the config into a dataset.
pub fn make_vdp_dataset(cfg: &VdpDatasetConfig) -> Result<TrainingDataset> {
    let mut records = Vec::new();
    for &mu in &cfg.mu_values {
        records.push(simulate_lco(
            &vdp_ode,
            mu,
            &[2.0, 0.0],
            cfg.dt,
            cfg.settle_time,
            cfg.record_time,
            4,
            &[0, 1],
        )?);
    }
    let mut units = BTreeMap::new();
    units.insert("t".into(), "s".into());
    units.insert("z1".into(), "nd".into());
    units.insert("z2".into(), "nd".into());
    Ok(TrainingDataset {
        system: "van_der_pol".into(),
        m: 2,
        units,
        records,
    })
}

/// Aeroelastic data-generation settings. The default parameter values sit
/// inside the coexistence window between the saddle-node (about 15 m/s) and
/// the Hopf point (about 18.3 m/s), interleaving stable and unstable
/// records. Observed states are heave and pitch; the aerodynamic lag state
/// can be included to exercise datasets with more than two columns.
#[derive(Debug, Clone)]
pub struct AeroDatasetConfig {
    pub params: AeroParams,
    pub stable_mu: Vec<f64>,
    pub unstable_mu: Vec<f64>,
    pub dt: f64,
    pub record_time: f64,
    pub include_flow_state: bool,
}

impl Default for AeroDatasetConfig {
    fn default() -> Self {
        Self {
            params: AeroParams::default(),
            stable_mu: vec![15.4, 16.0, 16.8, 17.6],
            unstable_mu: vec![15.4, 16.0, 16.8, 17.6],
            dt: 0.001,
            record_time: 1.0,
            include_flow_state: false,
        }
    }
}

/// Trace the flutter model's cycle branch through the fold.
///
/// Seeds from the stable cycle just above the Hopf point (where it is the
/// only attractor, so plain settling finds it) and continues toward lower
/// airspeed; the branch turns at the saddle-node and climbs back along the
/// unstable side until the cycles shrink into the Hopf point.
pub fn aero_reference_branch(sys: &AeroSystem) -> Result<Branch> {
    let (mu0, omega) = sys.hopf_point(14.0, 20.0)?;
    let mu_seed = mu0 + 0.33;
    let rhs = |m: f64, x: &[f64], out: &mut [f64]| sys.rhs(m, x, out);
    let settled = simulate_lco(
        &rhs,
        mu_seed,
        &[0.01, 0.1, 0.0, 0.0, 0.0, 0.0],
        0.001,
        60.0,
        2.0,
        2,
        &[0, 1, 2, 3, 4, 5],
    )?;
    let col0: Vec<f64> = settled.samples.iter().map(|s| s[0]).collect();
    let period_guess = estimate_period(&settled.t, &col0).unwrap_or(TAU / omega);
    let anchor = (0..settled.samples.len())
        .max_by(|&i, &j| col0[i].partial_cmp(&col0[j]).unwrap())
        .unwrap();
    let seed = shoot_periodic(&rhs, mu_seed, &settled.samples[anchor], period_guess)?;
    let opts = TraceOptions {
        ds: 0.12,
        ds_max: 0.3,
        mu_weight: 0.3,
        mu_min: 13.5,
        mu_max: mu_seed + 0.5,
        max_points: 300,
        amplitude_index: 0,
        ..TraceOptions::default()
    };
    trace_branch(&rhs, mu_seed, &seed, &opts)
}

/// Converge the cycle of the requested stability at an exact airspeed,
/// seeded from the nearest matching point of a traced branch.
pub fn aero_orbit_at(
    sys: &AeroSystem,
    branch: &Branch,
    mu: f64,
    stable: bool,
) -> Result<PeriodicOrbit> {
    let wanted = if stable { "stable" } else { "unstable" };
    let nearest = branch
        .points
        .iter()
        .filter(|p| p.stable == stable)
        .min_by(|a, b| {
            (a.mu - mu).abs().partial_cmp(&(b.mu - mu).abs()).unwrap()
        })
        .ok_or(Error::MissingBranch { mu, wanted })?;
    let rhs = |m: f64, x: &[f64], out: &mut [f64]| sys.rhs(m, x, out);
    let orbit = shoot_periodic(&rhs, mu, &nearest.x0, nearest.period)?;
    if orbit.stable != stable {
        return Err(Error::MissingBranch { mu, wanted });
    }
    Ok(orbit)
}

/// Generate the flutter dataset: stable records by simulation from on-cycle
/// initial conditions, unstable records by integrating the shooting
/// solution over the requested window.
pub fn make_aero_dataset(cfg: &AeroDatasetConfig) -> Result<TrainingDataset> {
    let sys = AeroSystem::new(cfg.params)?;
    let branch = aero_reference_branch(&sys)?;
    let rhs = |m: f64, x: &[f64], out: &mut [f64]| sys.rhs(m, x, out);
    let observe: &[usize] = if cfg.include_flow_state {
        &[0, 1, 2]
    } else {
        &[0, 1]
    };
    let n_samples = (cfg.record_time / cfg.dt).round() as usize;
    let mut records = Vec::new();
    for (&mu, stable) in cfg
        .stable_mu
        .iter()
        .map(|m| (m, true))
        .chain(cfg.unstable_mu.iter().map(|m| (m, false)))
    {
        let orbit = aero_orbit_at(&sys, &branch, mu, stable)?;
        let (t, rows) = record_window(&rhs, mu, &orbit.x0, cfg.dt, n_samples, 2);
        records.push(LcoRecord {
            mu,
            stable,
            t,
            samples: observe_rows(&rows, observe),
            provenance: if stable {
                Provenance::Simulated
            } else {
                Provenance::Shooting
            },
        });
    }
    let mut units = BTreeMap::new();
    units.insert("t".into(), "s".into());
    units.insert("z1".into(), "m".into());
    units.insert("z2".into(), "rad".into());
    if cfg.include_flow_state {
        units.insert("z3".into(), "nd".into());
    }
    Ok(TrainingDataset {
        system: "aeroelastic".into(),
        m: observe.len(),
        units,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orbit_geometry::{descriptor_distance, orbit_descriptor, PlanarOrbit};
    use crate::periodic_orbits::{find_unstable_lco_pd, HarmonicTarget, PdGains};
    use approx::assert_relative_eq;
    use std::sync::OnceLock;

    #[test]
    fn vdp_field_spot_values() {
        assert_eq!(vdp_rhs(0.0, 0.0, 0.7), (0.0, 0.0));
        assert_eq!(vdp_rhs(1.0, 0.0, 0.5), (0.0, -1.0));
        // Divergence of the flow at the origin is 2 mu.
        let h = 1e-6;
        let (_, up) = vdp_rhs(0.0, h, 0.3);
        let (_, dn) = vdp_rhs(0.0, -h, 0.3);
        assert_relative_eq!((up - dn) / (2.0 * h), 0.6, max_relative = 1e-8);
    }

    #[test]
    fn vdp_cycle_amplitude_matches_weak_coupling_estimate() {
        let rec = simulate_lco(&vdp_ode, 0.1, &[2.0, 0.0], 0.02, 100.0, 10.0, 4, &[0, 1]).unwrap();
        assert_eq!(rec.n_samples(), 500);
        assert!(rec.stable);
        // Energy balance on z1 = A cos t gives A = sqrt(8 mu).
        let expected = (8.0f64 * 0.1).sqrt();
        let amp = record_amplitude(&rec, 0);
        assert!(
            (amp - expected).abs() / expected < 0.02,
            "amplitude {amp} vs {expected}"
        );
    }

    #[test]
    fn vdp_relaxation_period_exceeds_linear_period() {
        let rec = simulate_lco(&vdp_ode, 0.82, &[2.0, 0.0], 0.02, 100.0, 20.0, 4, &[0, 1]).unwrap();
        let col0: Vec<f64> = rec.samples.iter().map(|s| s[0]).collect();
        let period = estimate_period(&rec.t, &col0).expect("no full period recorded");
        assert!(period > TAU, "period {period}");
    }

    #[test]
    fn halving_the_sample_step_leaves_the_amplitude_alone() {
        let coarse =
            simulate_lco(&vdp_ode, 0.46, &[2.0, 0.0], 0.02, 40.0, 10.0, 4, &[0, 1]).unwrap();
        let fine =
            simulate_lco(&vdp_ode, 0.46, &[2.0, 0.0], 0.01, 40.0, 10.0, 4, &[0, 1]).unwrap();
        let (a, b) = (record_amplitude(&coarse, 0), record_amplitude(&fine, 0));
        assert!(
            ((a - b) / b).abs() < 1e-6,
            "amplitude moved by {:.3e}",
            ((a - b) / b).abs()
        );
    }

    #[test]
    fn resting_aerofoil_stays_at_rest() {
        let out = aero_rhs(&[0.0; 6], 16.0, &AeroParams::default()).unwrap();
        assert_eq!(out, [0.0; 6]);
    }

    #[test]
    fn pitch_nonlinearity_enters_only_the_pitch_equation() {
        let p = AeroParams::default();
        let sys = AeroSystem::new(p).unwrap();
        let mu = 16.0;
        let alpha = 0.07;
        let state = [0.0, alpha, 0.0, 0.0, 0.0, 0.0];
        let mut full = [0.0; 6];
        sys.rhs(mu, &state, &mut full);
        let lin = sys.linear_matrix(mu);
        let m = p.mass_matrix();
        // M (accel - linear accel) must equal the negated nonlinear load.
        let mut gap = Vector3::zeros();
        for i in 0..3 {
            let lin_acc: f64 = (0..6).map(|j| lin[(i + 3, j)] * state[j]).sum();
            gap[i] = full[i + 3] - lin_acc;
        }
        let load = m * gap;
        assert!(load[0].abs() < 1e-9);
        assert!(load[2].abs() < 1e-9);
        assert_relative_eq!(
            load[1],
            -(p.k_alpha2 * alpha * alpha + p.k_alpha3 * alpha.powi(3)),
            max_relative = 1e-9
        );
    }

    #[test]
    fn flutter_onset_is_bracketed() {
        let sys = AeroSystem::new(AeroParams::default()).unwrap();
        assert!(sys.growth_rate(14.0).0 < 0.0);
        assert!(sys.growth_rate(19.0).0 > 0.0);
        let (mu0, omega) = sys.hopf_point(14.0, 20.0).unwrap();
        assert!(
            (mu0 - 18.28).abs() <= 0.05,
            "Hopf point at {mu0}, expected near 18.28"
        );
        assert!(omega > 0.0);
    }

    #[test]
    fn still_air_structure_is_damped() {
        let sys = AeroSystem::new(AeroParams::default()).unwrap();
        let a = sys.linear_matrix(0.0);
        // Heave/pitch block only: the aerodynamic lag state is inert without
        // airflow.
        let idx = [0usize, 1, 3, 4];
        let mut sub = DMatrix::zeros(4, 4);
        for (r, &i) in idx.iter().enumerate() {
            for (c, &j) in idx.iter().enumerate() {
                sub[(r, c)] = a[(i, j)];
            }
        }
        for eig in sub.complex_eigenvalues().iter() {
            assert!(eig.re < 0.0, "undamped structural mode {eig}");
        }
    }

    fn shared_branch() -> &'static (AeroSystem, Branch) {
        static BRANCH: OnceLock<(AeroSystem, Branch)> = OnceLock::new();
        BRANCH.get_or_init(|| {
            let sys = AeroSystem::new(AeroParams::default()).unwrap();
            let branch = aero_reference_branch(&sys).unwrap();
            (sys, branch)
        })
    }

    #[test]
    fn cycle_branch_folds_where_the_identified_model_says() {
        let (_, branch) = shared_branch();
        let fold = branch.fold_mu.expect("no fold detected");
        assert!(
            (14.9..=15.35).contains(&fold),
            "fold at {fold}, expected near 15.1"
        );
        assert!(branch.points.iter().any(|p| p.stable));
        assert!(branch.points.iter().any(|p| !p.stable));
    }

    #[test]
    fn coexisting_cycles_are_ordered_and_recordable() {
        let (sys, branch) = shared_branch();
        let stable = aero_orbit_at(sys, branch, 15.5, true).unwrap();
        let unstable = aero_orbit_at(sys, branch, 15.6, false).unwrap();
        assert!(stable.stable && !unstable.stable);
        let rhs = |m: f64, x: &[f64], out: &mut [f64]| sys.rhs(m, x, out);

        let amp_stable = {
            let (_, rows) = record_window(&rhs, 15.5, &stable.x0, stable.period / 256.0, 257, 4);
            window_amplitude(&rows, 0)
        };
        let amp_unstable = {
            let (_, rows) =
                record_window(&rhs, 15.6, &unstable.x0, unstable.period / 256.0, 257, 4);
            window_amplitude(&rows, 0)
        };
        assert!(amp_unstable > 0.0);
        assert!(
            amp_unstable < amp_stable,
            "unstable {amp_unstable} vs stable {amp_stable}"
        );

        // The cycle frequency stays near the flutter frequency of the
        // resting state.
        let (_, omega) = sys.hopf_point(14.0, 20.0).unwrap();
        let linear_period = TAU / omega;
        assert!(
            (unstable.period - linear_period).abs() / linear_period < 0.2,
            "period {} vs linear {linear_period}",
            unstable.period
        );
    }

    #[test]
    fn generated_flutter_dataset_has_the_advertised_shape() {
        let (_, _) = shared_branch();
        let cfg = AeroDatasetConfig::default();
        let ds = make_aero_dataset(&cfg).unwrap();
        ds.validate().unwrap();
        assert_eq!(ds.records.len(), 8);
        assert_eq!(ds.m, 2);
        assert!(ds.records.iter().all(|r| r.n_samples() == 1000));
        assert_eq!(ds.records.iter().filter(|r| r.stable).count(), 4);

        // Subcritical ordering: every unstable cycle is smaller than the
        // stable cycle at the nearest airspeed, and unstable amplitudes
        // shrink toward the Hopf point.
        let stable: Vec<(f64, f64)> = ds
            .records
            .iter()
            .filter(|r| r.stable)
            .map(|r| (r.mu, record_amplitude(r, 0)))
            .collect();
        let mut last_unstable = f64::INFINITY;
        for rec in ds.records.iter().filter(|r| !r.stable) {
            let amp = record_amplitude(rec, 0);
            let nearest = stable
                .iter()
                .min_by(|a, b| {
                    (a.0 - rec.mu).abs().partial_cmp(&(b.0 - rec.mu).abs()).unwrap()
                })
                .unwrap();
            assert!(amp < nearest.1, "ordering violated at mu = {}", rec.mu);
            assert!(amp < last_unstable, "unstable branch not shrinking");
            last_unstable = amp;
        }
    }

    #[test]
    fn pd_stabilization_reproduces_the_shooting_orbit() {
        let (sys, branch) = shared_branch();
        let mu = 15.6;
        let orbit = aero_orbit_at(sys, branch, mu, false).unwrap();
        let rhs = |m: f64, x: &[f64], out: &mut [f64]| sys.rhs(m, x, out);
        let (_, rows) = record_window(&rhs, mu, &orbit.x0, orbit.period / 512.0, 513, 2);
        let reference: Vec<[f64; 2]> = rows.iter().map(|r| [r[0], r[1]]).collect();

        let h_mean = rows.iter().map(|r| r[0]).sum::<f64>() / rows.len() as f64;
        let rhs_forced =
            |m: f64, x: &[f64], u: f64, out: &mut [f64]| sys.rhs_forced(m, x, u, out);
        // Seed from the heave peak of the reference orbit, where the
        // velocity vanishes and a cosine target is in phase.
        let peak = (0..rows.len())
            .max_by(|&i, &j| rows[i][0].partial_cmp(&rows[j][0]).unwrap())
            .unwrap();
        let x_init = rows[peak].clone();
        let mut target =
            HarmonicTarget::from_amplitude(rows[peak][0] - h_mean, TAU / orbit.period);
        target.offset = h_mean;
        let rec = find_unstable_lco_pd(
            &rhs_forced,
            mu,
            PdGains { k_p: 2000.0, k_d: 100.0 },
            target,
            &x_init,
            0,
            3,
            0.001,
            3.0,
            2.0,
            &[0, 1],
        )
        .unwrap();
        assert!(!rec.stable);
        assert!(matches!(rec.provenance, Provenance::StabilizedFeedback));

        let d_ref = orbit_descriptor(&PlanarOrbit::new(reference).unwrap(), 10).unwrap();
        let pd_points: Vec<[f64; 2]> = rec.samples.iter().map(|s| [s[0], s[1]]).collect();
        let d_pd = orbit_descriptor(&PlanarOrbit::new(pd_points).unwrap(), 10).unwrap();
        let dist = descriptor_distance(&d_ref, &d_pd).unwrap();
        assert!(
            dist <= 0.01 * d_ref.a[0],
            "descriptor distance {dist} vs a0 {}",
            d_ref.a[0]
        );
    }

    #[test]
    fn degenerate_feedback_fails_honestly() {
        let (sys, branch) = shared_branch();
        let mu = 15.6;
        let orbit = aero_orbit_at(sys, branch, mu, false).unwrap();
        let rhs = |m: f64, x: &[f64], out: &mut [f64]| sys.rhs(m, x, out);
        let (_, rows) = record_window(&rhs, mu, &orbit.x0, orbit.period / 128.0, 129, 2);
        let h_amp = window_amplitude(&rows, 0);
        let rhs_forced =
            |m: f64, x: &[f64], u: f64, out: &mut [f64]| sys.rhs_forced(m, x, u, out);
        let target = HarmonicTarget::from_amplitude(h_amp, TAU / orbit.period);
        let mut x_init = vec![0.0; 6];
        x_init[0] = h_amp;

        // Zero gains reduce to plain simulation, which leaves the unstable
        // cycle; wrong-sign gains actively repel it.
        for gains in [
            PdGains { k_p: 0.0, k_d: 0.0 },
            PdGains { k_p: -2000.0, k_d: -100.0 },
        ] {
            let res = find_unstable_lco_pd(
                &rhs_forced,
                mu,
                gains,
                target,
                &x_init,
                0,
                3,
                0.001,
                3.0,
                2.0,
                &[0, 1],
            );
            assert!(res.is_err(), "gains {gains:?} unexpectedly succeeded");
        }
    }

    #[test]
    fn vdp_dataset_matches_published_shape() {
        let cfg = VdpDatasetConfig {
            mu_values: vec![0.1, 0.46],
            settle_time: 60.0,
            ..VdpDatasetConfig::default()
        };
        let ds = make_vdp_dataset(&cfg).unwrap();
        ds.validate().unwrap();
        assert_eq!(ds.records.len(), 2);
        assert!(ds.records.iter().all(|r| r.n_samples() == 500 && r.stable));
        assert_eq!(ds.m, 2);
    }
}
