//! Parameter-dependent map from normal-form coordinates to observations.
//!
//! The map `z = T_L(u1, u2, mu) + T_s + N(u1, u2, mu)` sends points of the
//! normal-form plane to the first two observed states. `T_L` is an affine
//! block (a 3x3 matrix whose third row is frozen to (0, 0, 1) so `mu` passes
//! through unchanged), `T_s` a translation, and `N` a small network that
//! supplies whatever the linear part cannot. With the network zeroed the map
//! is exactly affine, which is how training stage one initializes it.

use crate::dataset::TrainingDataset;
use crate::error::{Error, Result};
use crate::neural_net::{MlpCache, MlpNetwork};
use crate::normal_form::{lco_radii, stability_matched_radius, NormalFormParams};
use crate::orbit_geometry::{wrap_angle, PlanarOrbit};
use serde::{Deserialize, Serialize};

/// Affine normalization applied to `mu` before it enters a network input.
/// The linear map consumes raw `mu`; only network inputs are normalized, so
/// parameters in physical units (tens of m/s) do not saturate tanh layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuScaling {
    pub reference: f64,
    pub scale: f64,
}

impl MuScaling {
    pub fn identity() -> Self {
        Self {
            reference: 0.0,
            scale: 1.0,
        }
    }

    /// Center on the mean and scale by the half-span of the given values.
    pub fn from_values(mus: &[f64]) -> Self {
        if mus.is_empty() {
            return Self::identity();
        }
        let lo = mus.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = mus.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            reference: 0.5 * (lo + hi),
            scale: (0.5 * (hi - lo)).max(1e-6),
        }
    }

    pub fn apply(&self, mu: f64) -> f64 {
        (mu - self.reference) / self.scale
    }
}

/// The trainable affine block: rows one and two of the 3x3 matrix. Row three
/// is fixed at (0, 0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    /// Row-major: `rows[i] = [L_i1, L_i2, L_i3]`, output i from
    /// `(u1, u2, mu)`.
    pub rows: [[f64; 3]; 2],
}

impl LinearMap {
    pub fn identity() -> Self {
        Self {
            rows: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn apply(&self, u1: f64, u2: f64, mu: f64) -> [f64; 2] {
        [
            self.rows[0][0] * u1 + self.rows[0][1] * u2 + self.rows[0][2] * mu,
            self.rows[1][0] * u1 + self.rows[1][1] * u2 + self.rows[1][2] * mu,
        ]
    }

    /// Determinant of the planar (u1, u2) block.
    pub fn det2(&self) -> f64 {
        self.rows[0][0] * self.rows[1][1] - self.rows[0][1] * self.rows[1][0]
    }
}

/// Full coordinate map: affine block, translation, network correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateMap {
    pub linear: LinearMap,
    pub offset: [f64; 2],
    /// Correction network, 3 inputs `(u1, u2, scaled mu)`, 2 outputs.
    pub nn: MlpNetwork,
    pub mu_scaling: MuScaling,
}

impl CoordinateMap {
    pub fn new(
        linear: LinearMap,
        offset: [f64; 2],
        nn: MlpNetwork,
        mu_scaling: MuScaling,
    ) -> Result<Self> {
        if nn.input_dim() != 3 || nn.output_dim() != 2 {
            return Err(Error::InvalidParams(format!(
                "coordinate map network must be 3 -> 2, got {} -> {}",
                nn.input_dim(),
                nn.output_dim()
            )));
        }
        Ok(Self {
            linear,
            offset,
            nn,
            mu_scaling,
        })
    }

    /// Identity affine map with a zeroed network of the given hidden sizes.
    pub fn affine_identity(hidden: &[usize]) -> Result<Self> {
        let mut sizes = vec![3];
        sizes.extend_from_slice(hidden);
        sizes.push(2);
        Self::new(
            LinearMap::identity(),
            [0.0, 0.0],
            MlpNetwork::zeroed(&sizes)?,
            MuScaling::identity(),
        )
    }

    pub fn forward(&self, u1: f64, u2: f64, mu: f64) -> [f64; 2] {
        let mut cache = MlpCache::for_network(&self.nn);
        self.forward_cached(u1, u2, mu, &mut cache)
    }

    /// Forward pass reusing caller-provided network scratch.
    pub fn forward_cached(&self, u1: f64, u2: f64, mu: f64, cache: &mut MlpCache) -> [f64; 2] {
        let lin = self.linear.apply(u1, u2, mu);
        let x = [u1, u2, self.mu_scaling.apply(mu)];
        let n = self.nn.forward_cached(&x, cache);
        [
            lin[0] + self.offset[0] + n[0],
            lin[1] + self.offset[1] + n[1],
        ]
    }

    /// Jacobian of the output w.r.t. `(u1, u2)` at fixed `mu`.
    pub fn jacobian_u(&self, u1: f64, u2: f64, mu: f64) -> [[f64; 2]; 2] {
        let mut cache = MlpCache::for_network(&self.nn);
        self.jacobian_u_cached(u1, u2, mu, &mut cache)
    }

    pub fn jacobian_u_cached(
        &self,
        u1: f64,
        u2: f64,
        mu: f64,
        cache: &mut MlpCache,
    ) -> [[f64; 2]; 2] {
        let x = [u1, u2, self.mu_scaling.apply(mu)];
        let mut jac = [
            [self.linear.rows[0][0], self.linear.rows[0][1]],
            [self.linear.rows[1][0], self.linear.rows[1][1]],
        ];
        for (i, row) in jac.iter_mut().enumerate() {
            self.nn.forward_cached(&x, cache);
            let mut input_grad = [0.0; 3];
            let upstream = if i == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
            self.nn
                .backward_input_only(cache, &upstream, &mut input_grad);
            row[0] += input_grad[0];
            row[1] += input_grad[1];
        }
        jac
    }

    /// Invert the map at fixed `mu` by Newton iteration.
    ///
    /// Without a caller guess the affine part provides one. Fails with
    /// `SingularJacobian` when the local Jacobian degenerates and
    /// `NoConvergence` when 50 iterations do not reach a residual of
    /// 1e-12 relative to `|z|`.
    pub fn inverse(&self, z: [f64; 2], mu: f64, guess: Option<[f64; 2]>) -> Result<[f64; 2]> {
        let mut u = match guess {
            Some(g) => g,
            None => {
                let det = self.linear.det2();
                if det.abs() < 1e-12 {
                    [0.0, 0.0]
                } else {
                    let rhs = [
                        z[0] - self.offset[0] - self.linear.rows[0][2] * mu,
                        z[1] - self.offset[1] - self.linear.rows[1][2] * mu,
                    ];
                    [
                        (self.linear.rows[1][1] * rhs[0] - self.linear.rows[0][1] * rhs[1]) / det,
                        (-self.linear.rows[1][0] * rhs[0] + self.linear.rows[0][0] * rhs[1]) / det,
                    ]
                }
            }
        };
        let mut cache = MlpCache::for_network(&self.nn);
        let tol = 1e-12 * (z[0].abs() + z[1].abs()).max(1.0);
        let max_iters = 50;
        for _ in 0..max_iters {
            let f = self.forward_cached(u[0], u[1], mu, &mut cache);
            let res = [f[0] - z[0], f[1] - z[1]];
            if res[0].abs().max(res[1].abs()) <= tol {
                return Ok(u);
            }
            let j = self.jacobian_u_cached(u[0], u[1], mu, &mut cache);
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det.abs() < 1e-14 {
                return Err(Error::SingularJacobian(det.abs()));
            }
            u[0] -= (j[1][1] * res[0] - j[0][1] * res[1]) / det;
            u[1] -= (-j[1][0] * res[0] + j[0][0] * res[1]) / det;
        }
        let f = self.forward_cached(u[0], u[1], mu, &mut cache);
        let res = ((f[0] - z[0]).powi(2) + (f[1] - z[1]).powi(2)).sqrt();
        Err(Error::NoConvergence {
            what: "coordinate map inversion",
            iters: max_iters,
            residual: res,
        })
    }
}

fn branch_name(stable: bool) -> &'static str {
    if stable {
        "stable"
    } else {
        "unstable"
    }
}

/// Image of the normal-form circle of the requested branch: `n_points`
/// equispaced angles mapped through the coordinate map.
pub fn predicted_orbit(
    map: &CoordinateMap,
    p: &NormalFormParams,
    mu: f64,
    stable: bool,
    n_points: usize,
) -> Result<PlanarOrbit> {
    let r = stability_matched_radius(p, mu, stable).ok_or(Error::MissingBranch {
        mu,
        wanted: branch_name(stable),
    })?;
    let mut cache = MlpCache::for_network(&map.nn);
    let points = (0..n_points)
        .map(|j| {
            let psi = std::f64::consts::TAU * j as f64 / n_points as f64;
            map.forward_cached(r * psi.cos(), r * psi.sin(), mu, &mut cache)
        })
        .collect();
    PlanarOrbit::new(points)
}

/// Find the normal-form angle whose mapped image lies at the same angle
/// (about the predicted orbit's centroid) as the measurement `z_init`.
///
/// This anchors phase-space predictions to a measured initial condition:
/// time series prediction starts the phase variable here. Newton on the
/// wrapped angle mismatch, seeded from a coarse scan, with a bisection
/// fallback; converged when the mismatch drops below 1e-10 rad.
pub fn match_initial_phase(
    map: &CoordinateMap,
    p: &NormalFormParams,
    z_init: [f64; 2],
    mu: f64,
    stable: bool,
    n_points: usize,
) -> Result<f64> {
    let r = stability_matched_radius(p, mu, stable).ok_or(Error::MissingBranch {
        mu,
        wanted: branch_name(stable),
    })?;
    let center = predicted_orbit(map, p, mu, stable, n_points)?.centroid();
    let beta = (z_init[1] - center[1]).atan2(z_init[0] - center[0]);
    let mut cache = MlpCache::for_network(&map.nn);

    let g = |phi: f64, cache: &mut MlpCache| -> (f64, f64) {
        let (s, c) = phi.sin_cos();
        let z = map.forward_cached(r * c, r * s, mu, cache);
        let v = [z[0] - center[0], z[1] - center[1]];
        let jac = map.jacobian_u_cached(r * c, r * s, mu, cache);
        let du = [-r * s, r * c];
        let vp = [
            jac[0][0] * du[0] + jac[0][1] * du[1],
            jac[1][0] * du[0] + jac[1][1] * du[1],
        ];
        let norm2 = v[0] * v[0] + v[1] * v[1];
        let mismatch = wrap_angle(v[1].atan2(v[0]) - beta);
        let slope = (v[0] * vp[1] - v[1] * vp[0]) / norm2.max(1e-300);
        (mismatch, slope)
    };

    const TOL: f64 = 1e-10;

    // Coarse scan for a Newton seed.
    let coarse = 16;
    let mut phi0 = 0.0;
    let mut best = f64::INFINITY;
    for j in 0..coarse {
        let phi = std::f64::consts::TAU * j as f64 / coarse as f64;
        let (m, _) = g(phi, &mut cache);
        if m.abs() < best {
            best = m.abs();
            phi0 = phi;
        }
    }
    let mut phi = phi0;
    for _ in 0..30 {
        let (m, slope) = g(phi, &mut cache);
        if m.abs() <= TOL {
            return Ok(wrap_angle(phi));
        }
        if slope.abs() < 1e-14 {
            break;
        }
        phi -= m / slope;
    }

    // Fallback: bracket a true zero crossing (excluding the +-pi wrap) on a
    // dense grid and bisect.
    let dense = 64;
    let vals: Vec<(f64, f64)> = (0..=dense)
        .map(|j| {
            let phi = std::f64::consts::TAU * j as f64 / dense as f64;
            (phi, g(phi, &mut cache).0)
        })
        .collect();
    for w in vals.windows(2) {
        let (phi_a, ga) = w[0];
        let (phi_b, gb) = w[1];
        if ga == 0.0 {
            return Ok(wrap_angle(phi_a));
        }
        if ga * gb < 0.0 && (ga - gb).abs() < std::f64::consts::PI {
            let (mut a, mut fa, mut b) = (phi_a, ga, phi_b);
            for _ in 0..100 {
                let mid = 0.5 * (a + b);
                let fm = g(mid, &mut cache).0;
                if fm.abs() <= TOL {
                    return Ok(wrap_angle(mid));
                }
                if fa * fm < 0.0 {
                    b = mid;
                } else {
                    a = mid;
                    fa = fm;
                }
            }
        }
    }
    Err(Error::NoConvergence {
        what: "initial phase matching",
        iters: 30,
        residual: best,
    })
}

/// Summary of the map's local invertibility over the region training
/// exercises.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvertibilityReport {
    pub min_abs_det: f64,
    /// `(u1, u2, mu)` where the minimum was found.
    pub min_at: [f64; 3],
    /// True when the Jacobian determinant changes sign anywhere on the grid,
    /// meaning the map folds over itself.
    pub sign_changes: bool,
    pub n_samples: usize,
}

/// Scan the Jacobian determinant over an annulus around the normal-form
/// cycles: radii from half the smallest branch radius to 1.2 times the
/// largest, full angle sweep, across `n_mu` parameter values in `mu_range`.
pub fn invertibility_report(
    map: &CoordinateMap,
    p: &NormalFormParams,
    mu_range: (f64, f64),
    n_mu: usize,
    n_radii: usize,
    n_angles: usize,
) -> Result<InvertibilityReport> {
    if n_mu < 2 || n_radii < 2 || n_angles < 4 {
        return Err(Error::InvalidInput(
            "invertibility grid needs n_mu >= 2, n_radii >= 2, n_angles >= 4".into(),
        ));
    }
    let mut cache = MlpCache::for_network(&map.nn);
    let mut report = InvertibilityReport {
        min_abs_det: f64::INFINITY,
        min_at: [f64::NAN; 3],
        sign_changes: false,
        n_samples: 0,
    };
    let mut first_sign = 0.0;
    for i in 0..n_mu {
        let mu = mu_range.0 + (mu_range.1 - mu_range.0) * i as f64 / (n_mu - 1) as f64;
        let sols = lco_radii(p, mu);
        if sols.is_empty() {
            continue;
        }
        let r_min = sols.iter().map(|s| s.radius).fold(f64::INFINITY, f64::min);
        let r_max = sols.iter().map(|s| s.radius).fold(0.0, f64::max);
        let (lo, hi) = (0.5 * r_min, 1.2 * r_max);
        for a in 0..n_radii {
            let r = lo + (hi - lo) * a as f64 / (n_radii - 1) as f64;
            for b in 0..n_angles {
                let psi = std::f64::consts::TAU * b as f64 / n_angles as f64;
                let (u1, u2) = (r * psi.cos(), r * psi.sin());
                let j = map.jacobian_u_cached(u1, u2, mu, &mut cache);
                let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
                report.n_samples += 1;
                if first_sign == 0.0 && det != 0.0 {
                    first_sign = det.signum();
                } else if det * first_sign < 0.0 {
                    report.sign_changes = true;
                }
                if det.abs() < report.min_abs_det {
                    report.min_abs_det = det.abs();
                    report.min_at = [u1, u2, mu];
                }
            }
        }
    }
    if report.n_samples == 0 {
        return Err(Error::InvalidInput(
            "no limit cycles exist anywhere in the requested mu range".into(),
        ));
    }
    Ok(report)
}

/// Cubic polynomial regression from `(u1, u2, mu)` to one extra observed
/// state, used to reconstruct states beyond the first two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryMap {
    /// Coefficients for [`aux_features`], length 11.
    pub coeffs: Vec<f64>,
    /// Ridge parameter used in the fit.
    pub ridge: f64,
}

/// Feature vector `[1, u1, u2, mu, u1^2, u1 u2, u2^2, u1^3, u1^2 u2,
/// u1 u2^2, u2^3]`.
pub fn aux_features(u1: f64, u2: f64, mu: f64) -> [f64; 11] {
    [
        1.0,
        u1,
        u2,
        mu,
        u1 * u1,
        u1 * u2,
        u2 * u2,
        u1 * u1 * u1,
        u1 * u1 * u2,
        u1 * u2 * u2,
        u2 * u2 * u2,
    ]
}

/// Evaluate an auxiliary map at a normal-form point.
pub fn eval_auxiliary(aux: &AuxiliaryMap, u1: f64, u2: f64, mu: f64) -> f64 {
    aux_features(u1, u2, mu)
        .iter()
        .zip(&aux.coeffs)
        .map(|(f, c)| f * c)
        .sum()
}

/// Ridge-fit one auxiliary map per observed state beyond the first two.
///
/// Every sample of every record is inverse-mapped to normal-form
/// coordinates (warm-starting Newton from the previous sample), then each
/// extra state is regressed on the cubic features. Returns an empty list for
/// planar datasets.
pub fn fit_auxiliary_maps(
    ds: &TrainingDataset,
    map: &CoordinateMap,
    ridge: f64,
) -> Result<Vec<AuxiliaryMap>> {
    ds.validate()?;
    if ds.m <= 2 {
        return Ok(Vec::new());
    }
    let n_extra = ds.m - 2;
    let n_total: usize = ds.records.iter().map(|r| r.n_samples()).sum();
    let mut features = nalgebra::DMatrix::zeros(n_total, 11);
    let mut targets = nalgebra::DMatrix::zeros(n_total, n_extra);
    let mut row = 0;
    for rec in &ds.records {
        let mut guess: Option<[f64; 2]> = None;
        for s in &rec.samples {
            let u = map
                .inverse([s[0], s[1]], rec.mu, guess)
                .map_err(|e| Error::InverseFailed {
                    index: row,
                    source: Box::new(e),
                })?;
            guess = Some(u);
            let f = aux_features(u[0], u[1], rec.mu);
            for (k, &fv) in f.iter().enumerate() {
                features[(row, k)] = fv;
            }
            for k in 0..n_extra {
                targets[(row, k)] = s[2 + k];
            }
            row += 1;
        }
    }
    let mut normal = features.transpose() * &features;
    for k in 0..11 {
        normal[(k, k)] += ridge;
    }
    let rhs = features.transpose() * targets;
    let chol = normal
        .cholesky()
        .ok_or(Error::RankDeficient(f64::INFINITY))?;
    let solution = chol.solve(&rhs);
    Ok((0..n_extra)
        .map(|k| AuxiliaryMap {
            coeffs: solution.column(k).iter().copied().collect(),
            ridge,
        })
        .collect())
}
