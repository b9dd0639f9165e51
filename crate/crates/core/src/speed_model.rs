//! Oscillation speed around a limit cycle.
//!
//! The normal form fixes each cycle's radius but says nothing about how fast
//! the phase advances, which is what time-series prediction needs. The speed
//! model provides `dtheta/dt = Omega(r, theta, mu) > 0`: a base angular
//! frequency plus a learnt correction, either a network evaluated at the
//! moving point or a network emitting the harmonic coefficients of a
//! theta-periodic correction for the orbit's `(r, mu)`.

use crate::coordinate_map::{
    eval_auxiliary, match_initial_phase, AuxiliaryMap, CoordinateMap, MuScaling,
};
use crate::dataset::TrainingDataset;
use crate::error::{Error, Result};
use crate::neural_net::{MlpCache, MlpNetwork};
use crate::normal_form::{stability_matched_radius, NormalFormParams};
use crate::orbit_geometry::fourier_basis_entry;
use serde::{Deserialize, Serialize};

/// How the network feeds into the speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedMode {
    /// `Omega = omega0 + N(r cos theta, r sin theta, mu)`, network 3 -> 1.
    Direct,
    /// `Omega = omega0 + c(r, mu) . [1, cos k theta, sin k theta]` with the
    /// coefficients from a network 2 -> 2 n_h + 1. One network call serves a
    /// whole orbit.
    Harmonic { n_h: usize },
}

/// Base frequency plus learnt correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedModel {
    pub omega0: f64,
    pub nn: MlpNetwork,
    pub mode: SpeedMode,
    pub mu_scaling: MuScaling,
}

impl SpeedModel {
    pub fn new(
        omega0: f64,
        nn: MlpNetwork,
        mode: SpeedMode,
        mu_scaling: MuScaling,
    ) -> Result<Self> {
        let (want_in, want_out) = match mode {
            SpeedMode::Direct => (3, 1),
            SpeedMode::Harmonic { n_h } => {
                if n_h == 0 {
                    return Err(Error::InvalidParams(
                        "harmonic speed mode needs n_h >= 1".into(),
                    ));
                }
                (2, 2 * n_h + 1)
            }
        };
        if nn.input_dim() != want_in || nn.output_dim() != want_out {
            return Err(Error::InvalidParams(format!(
                "speed network must be {} -> {}, got {} -> {}",
                want_in,
                want_out,
                nn.input_dim(),
                nn.output_dim()
            )));
        }
        Ok(Self {
            omega0,
            nn,
            mode,
            mu_scaling,
        })
    }

    /// Constant speed `omega0` with a zeroed correction network.
    pub fn constant(omega0: f64, hidden: &[usize]) -> Result<Self> {
        let mut sizes = vec![3];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self::new(
            omega0,
            MlpNetwork::zeroed(&sizes)?,
            SpeedMode::Direct,
            MuScaling::identity(),
        )
    }

    /// Phase speed at one point of the cycle.
    pub fn omega(&self, r: f64, theta: f64, mu: f64) -> f64 {
        OrbitSpeed::new(self, r, mu).omega(theta)
    }

    /// Phase speed, rejecting non-positive values.
    pub fn omega_checked(&self, r: f64, theta: f64, mu: f64) -> Result<f64> {
        let w = self.omega(r, theta, mu);
        if w <= 0.0 {
            return Err(Error::NonPositiveSpeed {
                omega: w,
                theta,
                mu,
            });
        }
        Ok(w)
    }

    /// Cycle period `T = integral dtheta / Omega` by trapezoid refinement
    /// (spectrally accurate for the periodic integrand).
    pub fn period(&self, r: f64, mu: f64) -> Result<f64> {
        let orbit = OrbitSpeed::new(self, r, mu);
        let eval = |theta: f64| -> Result<f64> {
            let w = orbit.omega(theta);
            if w <= 0.0 {
                return Err(Error::NonPositiveSpeed {
                    omega: w,
                    theta,
                    mu,
                });
            }
            Ok(1.0 / w)
        };
        let mut n = 64usize;
        let mut prev = f64::NAN;
        while n <= (1 << 20) {
            let mut sum = 0.0;
            for j in 0..n {
                sum += eval(std::f64::consts::TAU * j as f64 / n as f64)?;
            }
            let t = std::f64::consts::TAU * sum / n as f64;
            if (t - prev).abs() <= 1e-12 * t.abs() {
                return Ok(t);
            }
            prev = t;
            n *= 2;
        }
        Err(Error::NoConvergence {
            what: "period quadrature",
            iters: 20,
            residual: prev,
        })
    }
}

/// Speed evaluator specialized to one orbit `(r, mu)`. In harmonic mode the
/// network runs once here and each `omega` call is just a short cosine sum.
pub struct OrbitSpeed<'a> {
    speed: &'a SpeedModel,
    r: f64,
    mu_scaled: f64,
    /// Precomputed harmonic coefficients, empty in direct mode.
    coeffs: Vec<f64>,
    cache: std::cell::RefCell<MlpCache>,
}

impl<'a> OrbitSpeed<'a> {
    pub fn new(speed: &'a SpeedModel, r: f64, mu: f64) -> Self {
        let mu_scaled = speed.mu_scaling.apply(mu);
        let coeffs = match speed.mode {
            SpeedMode::Direct => Vec::new(),
            SpeedMode::Harmonic { .. } => speed.nn.forward(&[r, mu_scaled]),
        };
        Self {
            speed,
            r,
            mu_scaled,
            coeffs,
            cache: std::cell::RefCell::new(MlpCache::for_network(&speed.nn)),
        }
    }

    pub fn omega(&self, theta: f64) -> f64 {
        match self.speed.mode {
            SpeedMode::Direct => {
                let x = [self.r * theta.cos(), self.r * theta.sin(), self.mu_scaled];
                let mut cache = self.cache.borrow_mut();
                self.speed.omega0 + self.speed.nn.forward_cached(&x, &mut cache)[0]
            }
            SpeedMode::Harmonic { n_h } => {
                let mut w = self.speed.omega0;
                for (k, c) in self.coeffs.iter().enumerate() {
                    w += c * fourier_basis_entry(k, n_h, theta);
                }
                w
            }
        }
    }
}

/// Integrate `dtheta/dt = Omega` over the given time grid with classical
/// RK4, one step per grid interval. Returns theta at every grid time,
/// starting from `theta0`. Errors if the speed turns non-positive at any
/// stage evaluation.
pub fn integrate_phase(
    speed: &SpeedModel,
    r: f64,
    mu: f64,
    theta0: f64,
    t: &[f64],
) -> Result<Vec<f64>> {
    if t.is_empty() {
        return Err(Error::InvalidInput("empty time grid".into()));
    }
    let orbit = OrbitSpeed::new(speed, r, mu);
    let stage = |theta: f64| -> Result<f64> {
        let w = orbit.omega(theta);
        if w <= 0.0 {
            return Err(Error::NonPositiveSpeed {
                omega: w,
                theta,
                mu,
            });
        }
        Ok(w)
    };
    let mut thetas = Vec::with_capacity(t.len());
    let mut theta = theta0;
    thetas.push(theta);
    for w in t.windows(2) {
        let h = w[1] - w[0];
        let k1 = stage(theta)?;
        let k2 = stage(theta + 0.5 * h * k1)?;
        let k3 = stage(theta + 0.5 * h * k2)?;
        let k4 = stage(theta + h * k3)?;
        theta += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        thetas.push(theta);
    }
    Ok(thetas)
}

/// A predicted oscillation: phase trajectory and reconstructed observations.
#[derive(Debug, Clone)]
pub struct PredictedTimeSeries {
    pub t: Vec<f64>,
    pub theta: Vec<f64>,
    /// One row per time, first two states from the coordinate map, further
    /// states from the auxiliary maps.
    pub z: Vec<Vec<f64>>,
    pub mu: f64,
    pub stable: bool,
}

/// Predict the measured signal at `mu` on the chosen branch, phase-anchored
/// to the measured initial point `z_init`.
pub fn predict_timeseries(
    map: &CoordinateMap,
    p: &NormalFormParams,
    speed: &SpeedModel,
    aux: &[AuxiliaryMap],
    mu: f64,
    stable: bool,
    z_init: [f64; 2],
    t: &[f64],
    n_points: usize,
) -> Result<PredictedTimeSeries> {
    let r = stability_matched_radius(p, mu, stable).ok_or(Error::MissingBranch {
        mu,
        wanted: if stable { "stable" } else { "unstable" },
    })?;
    let theta0 = match_initial_phase(map, p, z_init, mu, stable, n_points)?;
    let theta = integrate_phase(speed, r, mu, theta0, t)?;
    let mut cache = MlpCache::for_network(&map.nn);
    let z = theta
        .iter()
        .map(|&th| {
            let (u1, u2) = (r * th.cos(), r * th.sin());
            let planar = map.forward_cached(u1, u2, mu, &mut cache);
            let mut row = vec![planar[0], planar[1]];
            for a in aux {
                row.push(eval_auxiliary(a, u1, u2, mu));
            }
            row
        })
        .collect();
    Ok(PredictedTimeSeries {
        t: t.to_vec(),
        theta,
        z,
        mu,
        stable,
    })
}

/// Stride a record down to at most `limit` samples (keeping the first).
pub(crate) fn downsample_indices(n: usize, limit: usize) -> Vec<usize> {
    let stride = n.div_ceil(limit.max(1)).max(1);
    (0..n).step_by(stride).collect()
}

/// Total time-domain mismatch of the speed model over a dataset: for each
/// record, integrate the phase from the matched initial angle and sum the
/// Euclidean gaps between predicted and measured planar points at every
/// (possibly downsampled) sample time.
pub fn speed_loss(
    ds: &TrainingDataset,
    map: &CoordinateMap,
    p: &NormalFormParams,
    speed: &SpeedModel,
    downsample_limit: usize,
    n_points: usize,
) -> Result<f64> {
    ds.validate()?;
    let mut total = 0.0;
    let mut cache = MlpCache::for_network(&map.nn);
    for rec in &ds.records {
        let r = stability_matched_radius(p, rec.mu, rec.stable).ok_or(Error::MissingBranch {
            mu: rec.mu,
            wanted: if rec.stable { "stable" } else { "unstable" },
        })?;
        let idx = downsample_indices(rec.n_samples(), downsample_limit);
        let z0 = [rec.samples[0][0], rec.samples[0][1]];
        let theta0 = match_initial_phase(map, p, z0, rec.mu, rec.stable, n_points)?;
        let t_grid: Vec<f64> = idx.iter().map(|&j| rec.t[j]).collect();
        let theta = integrate_phase(speed, r, rec.mu, theta0, &t_grid)?;
        for (&j, &th) in idx.iter().zip(&theta) {
            let zhat = map.forward_cached(r * th.cos(), r * th.sin(), rec.mu, &mut cache);
            let dx = zhat[0] - rec.samples[j][0];
            let dy = zhat[1] - rec.samples[j][1];
            total += (dx * dx + dy * dy).sqrt();
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{LcoRecord, Provenance};
    use approx::assert_relative_eq;

    fn harmonic_speed(omega0: f64, n_h: usize, coeffs: &[(usize, f64)]) -> SpeedModel {
        let mut nn = MlpNetwork::zeroed(&[2, 4, 2 * n_h + 1]).unwrap();
        let total = nn.param_count();
        let out = 2 * n_h + 1;
        for &(k, v) in coeffs {
            nn.params_mut()[total - out + k] = v;
        }
        SpeedModel::new(omega0, nn, SpeedMode::Harmonic { n_h }, MuScaling::identity()).unwrap()
    }

    #[test]
    fn zeroed_networks_give_constant_speed() {
        let s = SpeedModel::constant(1.7, &[8, 8]).unwrap();
        assert_eq!(s.omega(1.0, 0.3, 5.0), 1.7);
        let s = harmonic_speed(2.2, 10, &[]);
        assert_eq!(s.omega(0.5, 1.0, 0.0), 2.2);
    }

    #[test]
    fn dimension_checks() {
        let nn = MlpNetwork::zeroed(&[3, 4, 2]).unwrap();
        assert!(SpeedModel::new(1.0, nn, SpeedMode::Direct, MuScaling::identity()).is_err());
        let nn = MlpNetwork::zeroed(&[2, 4, 20]).unwrap();
        assert!(SpeedModel::new(
            1.0,
            nn,
            SpeedMode::Harmonic { n_h: 10 },
            MuScaling::identity()
        )
        .is_err());
    }

    #[test]
    fn period_matches_analytic_values() {
        let s = SpeedModel::constant(1.7, &[4]).unwrap();
        assert_relative_eq!(
            s.period(1.0, 0.0).unwrap(),
            std::f64::consts::TAU / 1.7,
            max_relative = 1e-12
        );

        // Omega = 2 + 0.5 cos(theta): period 2 pi / sqrt(a^2 - b^2).
        let s = harmonic_speed(2.0, 3, &[(1, 0.5)]);
        let expected = std::f64::consts::TAU / (4.0f64 - 0.25).sqrt();
        assert_relative_eq!(s.period(1.0, 0.0).unwrap(), expected, max_relative = 1e-10);
    }

    #[test]
    fn phase_integration_is_consistent_with_period() {
        let s = harmonic_speed(2.0, 3, &[(1, 0.5), (4, -0.2)]);
        let t_period = s.period(0.8, 0.0).unwrap();
        let n = 4000;
        let t: Vec<f64> = (0..=n).map(|j| t_period * j as f64 / n as f64).collect();
        let theta = integrate_phase(&s, 0.8, 0.0, 0.37, &t).unwrap();
        // After exactly one period the phase must have advanced by 2 pi.
        assert_relative_eq!(
            theta.last().unwrap() - 0.37,
            std::f64::consts::TAU,
            max_relative = 1e-8
        );

        // RK4 on a constant speed is exact.
        let c = SpeedModel::constant(1.3, &[4]).unwrap();
        let t: Vec<f64> = (0..50).map(|j| 0.07 * j as f64).collect();
        let theta = integrate_phase(&c, 1.0, 0.0, -0.4, &t).unwrap();
        for (j, th) in theta.iter().enumerate() {
            assert_relative_eq!(*th, -0.4 + 1.3 * t[j], max_relative = 1e-13, epsilon = 1e-13);
        }
    }

    #[test]
    fn halving_the_step_barely_moves_the_integral() {
        let s = harmonic_speed(2.0, 5, &[(1, 0.4), (2, 0.1), (7, -0.15)]);
        let n = 500;
        let t: Vec<f64> = (0..=n).map(|j| 0.01 * j as f64).collect();
        let coarse = integrate_phase(&s, 1.1, 0.0, 0.0, &t).unwrap();
        let t_fine: Vec<f64> = (0..=2 * n).map(|j| 0.005 * j as f64).collect();
        let fine = integrate_phase(&s, 1.1, 0.0, 0.0, &t_fine).unwrap();
        let drift = (coarse.last().unwrap() - fine.last().unwrap()).abs()
            / fine.last().unwrap().abs();
        assert!(drift < 1e-8, "relative step-halving drift {drift:.3e}");
    }

    #[test]
    fn non_positive_speed_is_an_error() {
        let s = harmonic_speed(0.1, 2, &[(1, 0.5)]);
        assert!(matches!(
            s.omega_checked(1.0, std::f64::consts::PI, 0.0),
            Err(Error::NonPositiveSpeed { .. })
        ));
        assert!(matches!(
            s.period(1.0, 0.0),
            Err(Error::NonPositiveSpeed { .. })
        ));
        let t: Vec<f64> = (0..10).map(|j| 0.1 * j as f64).collect();
        assert!(matches!(
            integrate_phase(&s, 1.0, 0.0, std::f64::consts::PI, &t),
            Err(Error::NonPositiveSpeed { .. })
        ));
    }

    #[test]
    fn predicted_series_matches_analytic_circle() {
        let map = CoordinateMap::affine_identity(&[4]).unwrap();
        let p = NormalFormParams::supercritical(0.0, -1.0).unwrap();
        let speed = SpeedModel::constant(1.9, &[4]).unwrap();
        let mu = 0.64f64;
        let r = mu.sqrt();
        let theta0 = 0.81f64;
        let z_init = [r * theta0.cos(), r * theta0.sin()];
        let t: Vec<f64> = (0..200).map(|j| 0.03 * j as f64).collect();
        let ts = predict_timeseries(&map, &p, &speed, &[], mu, true, z_init, &t, 100).unwrap();
        for (j, row) in ts.z.iter().enumerate() {
            let th = theta0 + 1.9 * t[j];
            assert_relative_eq!(row[0], r * th.cos(), epsilon = 1e-8);
            assert_relative_eq!(row[1], r * th.sin(), epsilon = 1e-8);
        }
    }

    #[test]
    fn speed_loss_vanishes_on_self_generated_data() {
        let map = CoordinateMap::affine_identity(&[4]).unwrap();
        let p = NormalFormParams::supercritical(0.0, -1.0).unwrap();
        let speed = SpeedModel::constant(1.9, &[4]).unwrap();
        let mut records = Vec::new();
        for mu in [0.3f64, 0.7] {
            let r = mu.sqrt();
            let t: Vec<f64> = (0..300).map(|j| 0.02 * j as f64).collect();
            let samples = t
                .iter()
                .map(|&tt| {
                    let th = 0.5 + 1.9 * tt;
                    vec![r * th.cos(), r * th.sin()]
                })
                .collect();
            records.push(LcoRecord {
                mu,
                stable: true,
                t,
                samples,
                provenance: Provenance::Simulated,
            });
        }
        let ds = TrainingDataset {
            system: "circle".into(),
            m: 2,
            units: Default::default(),
            records,
        };
        let loss = speed_loss(&ds, &map, &p, &speed, 1000, 100).unwrap();
        assert!(loss < 1e-6, "self-consistency loss {loss}");

        let wrong = SpeedModel::constant(2.1, &[4]).unwrap();
        let loss_wrong = speed_loss(&ds, &map, &p, &wrong, 1000, 100).unwrap();
        assert!(loss_wrong > 1.0);
    }

    #[test]
    fn downsampling_keeps_first_sample_and_bounds_count() {
        let idx = downsample_indices(2500, 1000);
        assert_eq!(idx[0], 0);
        assert!(idx.len() <= 1000);
        assert_eq!(downsample_indices(300, 1000).len(), 300);
    }
}
