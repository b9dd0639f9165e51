//! Orbit shapes as truncated Fourier series of the polar radius.
//!
//! A planar limit cycle that is star-shaped about its centroid is fully
//! described by `R(theta) = a0 + sum_k a_k cos(k theta) + b_k sin(k theta)`.
//! The coefficient vector is a compact, sampling-invariant descriptor: orbits
//! measured at different rates or phases map to the same coefficients, and
//! the Euclidean distance between coefficient vectors is the shape error used
//! for training and validation.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// A sampled closed orbit in the plane, points in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarOrbit {
    pub points: Vec<[f64; 2]>,
}

impl PlanarOrbit {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "an orbit needs at least 3 points, got {}",
                points.len()
            )));
        }
        Ok(Self { points })
    }

    /// Arithmetic mean of the sample points.
    pub fn centroid(&self) -> [f64; 2] {
        let n = self.points.len() as f64;
        let (mut cx, mut cy) = (0.0, 0.0);
        for p in &self.points {
            cx += p[0];
            cy += p[1];
        }
        [cx / n, cy / n]
    }

    /// Signed winding of the samples about `center`, in radians. Positive is
    /// counter-clockwise.
    pub fn winding(&self, center: [f64; 2]) -> f64 {
        let mut total = 0.0;
        let mut prev = None;
        for p in &self.points {
            let ang = (p[1] - center[1]).atan2(p[0] - center[0]);
            if let Some(last) = prev {
                total += wrap_angle(ang - last);
            }
            prev = Some(ang);
        }
        total
    }
}

/// Wrap to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut w = a % two_pi;
    if w <= -std::f64::consts::PI {
        w += two_pi;
    } else if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

/// Truncated Fourier series of the polar radius about some center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitDescriptor {
    /// Harmonic count; `a` has length `n_h + 1` (constant term first) and
    /// `b` length `n_h`.
    pub n_h: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl OrbitDescriptor {
    /// Flat coefficient vector `[a0, a1.., b1..]` of length `2 n_h + 1`.
    pub fn coeff_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.n_h + 1);
        v.extend_from_slice(&self.a);
        v.extend_from_slice(&self.b);
        v
    }

    pub fn from_coeff_vector(n_h: usize, coeffs: &[f64]) -> Result<Self> {
        if coeffs.len() != 2 * n_h + 1 {
            return Err(Error::DimensionMismatch {
                expected: 2 * n_h + 1,
                got: coeffs.len(),
            });
        }
        Ok(Self {
            n_h,
            a: coeffs[..n_h + 1].to_vec(),
            b: coeffs[n_h + 1..].to_vec(),
        })
    }
}

/// Condition number above which the least-squares fit is refused.
const CONDITION_LIMIT: f64 = 1e12;

/// Basis entry `k` of the radius series at angle `theta`:
/// `[1, cos(theta).., cos(n_h theta), sin(theta).., sin(n_h theta)]`.
pub(crate) fn fourier_basis_entry(k: usize, n_h: usize, theta: f64) -> f64 {
    if k == 0 {
        1.0
    } else if k <= n_h {
        (k as f64 * theta).cos()
    } else {
        ((k - n_h) as f64 * theta).sin()
    }
}

/// Derivative of [`fourier_basis_entry`] w.r.t. `theta`.
pub(crate) fn fourier_basis_entry_dtheta(k: usize, n_h: usize, theta: f64) -> f64 {
    if k == 0 {
        0.0
    } else if k <= n_h {
        let kk = k as f64;
        -kk * (kk * theta).sin()
    } else {
        let kk = (k - n_h) as f64;
        kk * (kk * theta).cos()
    }
}

/// Convert an orbit to polar samples `(theta, R)` about `center`, sorted by
/// angle.
///
/// Errors when the radius is multi-valued in some angular bin (the orbit is
/// not star-shaped about the center, so no radius function exists) or when
/// the samples fail to wind once around the center. A folded orbit, such as
/// a figure-eight whose far lobe is seen edge-on from the center, trips the
/// star-shape scan; a curve that sweeps less than a full turn trips the
/// coverage check.
pub fn to_polar(
    orbit: &PlanarOrbit,
    center: [f64; 2],
    n_h: usize,
) -> Result<Vec<(f64, f64)>> {
    let n = orbit.points.len();
    let mut polar: Vec<(f64, f64)> = Vec::with_capacity(n);
    for p in &orbit.points {
        let dx = p[0] - center[0];
        let dy = p[1] - center[1];
        polar.push((dy.atan2(dx), (dx * dx + dy * dy).sqrt()));
    }

    polar.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Multi-valued-radius scan. A fold puts samples from separate branches
    // into the same angular bin, and the branches are radially separated: the
    // bin's sorted radii show a gap of a sizable fraction of the orbit's
    // radial span. A merely steep radius function fills its bins with a
    // continuum of radii instead, so no such gap opens however large the
    // in-bin range gets.
    let n_bins = (4 * n_h).max(8);
    let bin_width = std::f64::consts::TAU / n_bins as f64;
    let r_min = polar.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let r_max = polar.iter().map(|s| s.1).fold(0.0, f64::max);
    let span = (r_max - r_min).max(1e-12 * r_max.max(1e-300));
    let mut bins: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    for &(theta, r) in &polar {
        let mut bin = ((theta + std::f64::consts::PI) / bin_width) as usize;
        if bin >= n_bins {
            bin = n_bins - 1;
        }
        bins[bin].push(r);
    }
    for (bin, radii) in bins.iter_mut().enumerate() {
        radii.sort_by(|a, b| a.total_cmp(b));
        for pair in radii.windows(2) {
            let spread = pair[1] - pair[0];
            if spread > 0.25 * span {
                return Err(Error::NonStarShaped { bin, spread });
            }
        }
    }

    let coverage = orbit.winding(center).abs();
    let required = std::f64::consts::TAU - (4.0 * std::f64::consts::TAU / n as f64).max(0.2);
    if coverage < required {
        return Err(Error::InsufficientCoverage { coverage, required });
    }

    Ok(polar)
}

/// Least-squares Fourier fit of polar samples.
///
/// Solved through the SVD; a design matrix with condition number beyond 1e12
/// (clustered angles, too few samples) is refused rather than silently
/// producing garbage coefficients.
pub fn fourier_fit(samples: &[(f64, f64)], n_h: usize) -> Result<OrbitDescriptor> {
    if n_h == 0 {
        return Err(Error::InvalidParams("harmonic count must be >= 1".into()));
    }
    let m = 2 * n_h + 1;
    if samples.len() < m {
        return Err(Error::RankDeficient(f64::INFINITY));
    }
    let a_mat = DMatrix::from_fn(samples.len(), m, |j, k| {
        fourier_basis_entry(k, n_h, samples[j].0)
    });
    let rhs = DVector::from_fn(samples.len(), |j, _| samples[j].1);
    let svd = a_mat.svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    let cond = if s_min > 0.0 {
        s_max / s_min
    } else {
        f64::INFINITY
    };
    if !cond.is_finite() || cond > CONDITION_LIMIT {
        return Err(Error::RankDeficient(cond));
    }
    let coeffs = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::InvalidInput(format!("svd solve failed: {e}")))?;
    Ok(OrbitDescriptor {
        n_h,
        a: coeffs.as_slice()[..n_h + 1].to_vec(),
        b: coeffs.as_slice()[n_h + 1..].to_vec(),
    })
}

/// Evaluate the radius series at `theta`.
pub fn fourier_eval(d: &OrbitDescriptor, theta: f64) -> f64 {
    let mut r = d.a[0];
    for k in 1..=d.n_h {
        let kt = k as f64 * theta;
        r += d.a[k] * kt.cos() + d.b[k - 1] * kt.sin();
    }
    r
}

/// Derivative `dR/dtheta` of the radius series.
pub fn fourier_eval_dtheta(d: &OrbitDescriptor, theta: f64) -> f64 {
    let mut r = 0.0;
    for k in 1..=d.n_h {
        let kk = k as f64;
        let kt = kk * theta;
        r += -d.a[k] * kk * kt.sin() + d.b[k - 1] * kk * kt.cos();
    }
    r
}

/// Euclidean distance between coefficient vectors.
pub fn descriptor_distance(d1: &OrbitDescriptor, d2: &OrbitDescriptor) -> Result<f64> {
    if d1.n_h != d2.n_h {
        return Err(Error::HarmonicMismatch(d1.n_h, d2.n_h));
    }
    let mut sum = 0.0;
    for (x, y) in d1.coeff_vector().iter().zip(d2.coeff_vector()) {
        sum += (x - y) * (x - y);
    }
    Ok(sum.sqrt())
}

/// Descriptor of an orbit about its canonical center, returning both.
///
/// The center starts at the sample centroid and is shifted by the fitted
/// first-harmonic vector until that harmonic vanishes. A time-sampled record
/// rarely covers a whole number of cycles, so part of the curve carries
/// double sampling weight and the raw centroid is dragged toward it, by as
/// much as a fifth of the radius for a half-cycle overhang; a center defined
/// through the fitted series instead of the sample density gives the same
/// descriptor for the same curve no matter how it was sampled.
pub fn orbit_descriptor_with_center(
    orbit: &PlanarOrbit,
    n_h: usize,
) -> Result<(OrbitDescriptor, [f64; 2])> {
    let mut center = orbit.centroid();
    let mut shift = f64::INFINITY;
    for _ in 0..60 {
        let polar = to_polar(orbit, center, n_h)?;
        let d = fourier_fit(&polar, n_h)?;
        shift = d.a[1].hypot(d.b[0]);
        if shift <= 1e-13 * d.a[0].abs().max(1e-300) {
            return Ok((d, center));
        }
        center[0] += d.a[1];
        center[1] += d.b[0];
    }
    Err(Error::NoConvergence {
        what: "descriptor center refinement",
        iters: 60,
        residual: shift,
    })
}

/// Descriptor of an orbit about its canonical center.
pub fn orbit_descriptor(orbit: &PlanarOrbit, n_h: usize) -> Result<OrbitDescriptor> {
    orbit_descriptor_with_center(orbit, n_h).map(|(d, _)| d)
}

/// Total shape mismatch between a dataset's measured orbits and the orbits
/// the map predicts at the same parameter values: the sum over records of the
/// descriptor distance.
///
/// This is the strict evaluation form. A record whose branch does not exist
/// under `p`, or whose predicted orbit cannot be described, is an error here;
/// the corresponding optimisation objective replaces those cases with finite
/// penalties.
pub fn shape_loss(
    ds: &crate::dataset::TrainingDataset,
    map: &crate::coordinate_map::CoordinateMap,
    p: &crate::normal_form::NormalFormParams,
    n_points: usize,
    n_h: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for rec in &ds.records {
        let measured = orbit_descriptor(&rec.planar_orbit()?, n_h)?;
        let orbit =
            crate::coordinate_map::predicted_orbit(map, p, rec.mu, rec.stable, n_points)?;
        let predicted = orbit_descriptor(&orbit, n_h)?;
        total += descriptor_distance(&measured, &predicted)?;
    }
    Ok(total)
}
