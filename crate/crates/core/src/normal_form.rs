//! Polar Hopf normal form with cubic and optional quintic amplitude terms.
//!
//! The mechanistic half of the hybrid model: amplitude dynamics
//! `dr/dt = (mu - mu0) r + a2 r^3 - r^5` (the quintic term is optional) with
//! the phase handled separately by a speed model. Limit-cycle radii and their
//! stability follow in closed form from the quadratic in `q = r^2`, which is
//! what makes this family cheap enough to embed inside a training loop.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which side of the Hopf point the limit cycles sit on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criticality {
    /// Stable cycles for `mu > mu0`, none below. Requires `a2 < 0`.
    Supercritical,
    /// Stable/unstable cycle pair in `[mu0 - a2^2/4, mu0)`. Requires `a2 > 0`
    /// and the quintic term.
    Subcritical,
}

/// Parameters of the amplitude equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalFormParams {
    /// Bifurcation-parameter value of the Hopf point.
    pub mu0: f64,
    /// Cubic coefficient.
    pub a2: f64,
    /// Include the `-r^5` saturation term.
    pub quintic_enabled: bool,
    pub criticality: Criticality,
}

/// One limit cycle of the amplitude equation at a fixed `mu`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LcoSolution {
    pub radius: f64,
    pub stable: bool,
    pub mu: f64,
}

/// Radius and its derivatives w.r.t. `mu0` and `a2`, used when the normal
/// form itself is being fitted.
#[derive(Debug, Clone, Copy)]
pub struct RadiusSensitivity {
    pub radius: f64,
    pub d_mu0: f64,
    pub d_a2: f64,
}

/// Roots closer together than this (relative to the cubic coefficient) are
/// reported as a single saddle-node double root.
const COALESCENCE_RTOL: f64 = 1e-8;
/// `q = r^2` below this is the trivial equilibrium, not a cycle.
const Q_POSITIVE_TOL: f64 = 1e-12;

impl NormalFormParams {
    /// Supercritical form: `a2 < 0`, quintic term off.
    pub fn supercritical(mu0: f64, a2: f64) -> Result<Self> {
        let p = Self {
            mu0,
            a2,
            quintic_enabled: false,
            criticality: Criticality::Supercritical,
        };
        p.validate()?;
        Ok(p)
    }

    /// Subcritical form: `a2 > 0` with the quintic saturation term.
    pub fn subcritical(mu0: f64, a2: f64) -> Result<Self> {
        let p = Self {
            mu0,
            a2,
            quintic_enabled: true,
            criticality: Criticality::Subcritical,
        };
        p.validate()?;
        Ok(p)
    }

    /// Check the internal consistency of the fields.
    pub fn validate(&self) -> Result<()> {
        if !self.mu0.is_finite() || !self.a2.is_finite() {
            return Err(Error::InvalidParams(format!(
                "non-finite normal form parameters: mu0 = {}, a2 = {}",
                self.mu0, self.a2
            )));
        }
        match self.criticality {
            Criticality::Subcritical => {
                if !self.quintic_enabled {
                    return Err(Error::InvalidParams(
                        "subcritical form requires the quintic term".into(),
                    ));
                }
                if self.a2 <= 0.0 {
                    return Err(Error::InvalidParams(format!(
                        "subcritical form requires a2 > 0, got {}",
                        self.a2
                    )));
                }
            }
            Criticality::Supercritical => {
                if self.a2 >= 0.0 {
                    return Err(Error::InvalidParams(format!(
                        "supercritical form requires a2 < 0, got {}",
                        self.a2
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Radial velocity `dr/dt` at radius `r` and parameter `mu`.
pub fn radial_flow(p: &NormalFormParams, r: f64, mu: f64) -> f64 {
    let q = r * r;
    let quintic = if p.quintic_enabled { q * q } else { 0.0 };
    r * ((mu - p.mu0) + p.a2 * q - quintic)
}

/// Analytic `d(dr/dt)/dr` at radius `r`, for stability classification.
pub fn radial_flow_derivative(p: &NormalFormParams, r: f64, mu: f64) -> f64 {
    let q = r * r;
    let quintic = if p.quintic_enabled { 5.0 * q * q } else { 0.0 };
    (mu - p.mu0) + 3.0 * p.a2 * q - quintic
}

enum QuinticRoots {
    None,
    /// Saddle-node double root in `q`.
    Double(f64),
    Pair {
        lo: f64,
        hi: f64,
    },
}

/// Roots of `q^2 - a2 q - (mu - mu0) = 0`. The coalescence tolerance also
/// absorbs the ~1 ulp cancellation noise the discriminant picks up when `mu`
/// sits exactly on the fold.
fn quintic_roots(p: &NormalFormParams, mu: f64) -> QuinticRoots {
    let dm = mu - p.mu0;
    let disc = p.a2 * p.a2 + 4.0 * dm;
    let coal = COALESCENCE_RTOL * p.a2.abs().max(1.0);
    let scale = p.a2 * p.a2 + (4.0 * dm).abs();
    let tol = (coal * coal).max(32.0 * f64::EPSILON * scale);
    if disc <= tol {
        if disc >= -tol {
            QuinticRoots::Double(p.a2 / 2.0)
        } else {
            QuinticRoots::None
        }
    } else {
        let sq = disc.sqrt();
        QuinticRoots::Pair {
            lo: (p.a2 - sq) / 2.0,
            hi: (p.a2 + sq) / 2.0,
        }
    }
}

/// All limit cycles at `mu`, sorted by increasing radius.
///
/// A saddle-node double root (discriminant within tolerance of zero) is
/// reported once with `stable = false`.
pub fn lco_radii(p: &NormalFormParams, mu: f64) -> Vec<LcoSolution> {
    let dm = mu - p.mu0;
    let mut out = Vec::new();
    if p.quintic_enabled {
        match quintic_roots(p, mu) {
            QuinticRoots::None => {}
            QuinticRoots::Double(q) => {
                if q > Q_POSITIVE_TOL {
                    out.push(LcoSolution {
                        radius: q.sqrt(),
                        stable: false,
                        mu,
                    });
                }
            }
            QuinticRoots::Pair { lo, hi } => {
                // On a root, d(rdot)/dr = 2 q (a2 - 2q): the larger root is
                // always the stable one, the smaller always unstable.
                for (q, stable) in [(lo, false), (hi, true)] {
                    if q > Q_POSITIVE_TOL {
                        out.push(LcoSolution {
                            radius: q.sqrt(),
                            stable,
                            mu,
                        });
                    }
                }
            }
        }
    } else {
        // a2 q + (mu - mu0) = 0, stability sign = sign(a2)
        let q = -dm / p.a2;
        if q > Q_POSITIVE_TOL {
            out.push(LcoSolution {
                radius: q.sqrt(),
                stable: p.a2 < 0.0,
                mu,
            });
        }
    }
    out.sort_by(|a, b| a.radius.total_cmp(&b.radius));
    out
}

/// Parameter value of the saddle-node (fold) of cycles, `mu0 - a2^2 / 4`.
/// Only the subcritical form has one.
pub fn saddle_node_mu(p: &NormalFormParams) -> Result<f64> {
    match p.criticality {
        Criticality::Subcritical => Ok(p.mu0 - p.a2 * p.a2 / 4.0),
        Criticality::Supercritical => Err(Error::InvalidParams(
            "supercritical form has no saddle-node of cycles".into(),
        )),
    }
}

/// Sample all branches over a grid of `mu` values.
pub fn radius_branch(p: &NormalFormParams, mu_grid: &[f64]) -> Vec<(f64, Vec<LcoSolution>)> {
    mu_grid.iter().map(|&mu| (mu, lco_radii(p, mu))).collect()
}

/// Radius of the branch with the requested stability, if it exists at `mu`.
/// A saddle-node double root counts as neither branch.
pub fn stability_matched_radius(p: &NormalFormParams, mu: f64, stable: bool) -> Option<f64> {
    if p.quintic_enabled {
        if let QuinticRoots::Double(_) = quintic_roots(p, mu) {
            return None;
        }
    }
    lco_radii(p, mu)
        .iter()
        .find(|s| s.stable == stable)
        .map(|s| s.radius)
}

/// Radius plus parameter sensitivities for the requested branch.
///
/// The square-root denominator is clamped at 1e-12 so gradients stay finite
/// arbitrarily close to the fold.
pub fn radius_sensitivity(
    p: &NormalFormParams,
    mu: f64,
    stable: bool,
) -> Option<RadiusSensitivity> {
    let r = stability_matched_radius(p, mu, stable)?;
    let (dq_dmu0, dq_da2) = if p.quintic_enabled {
        let disc = p.a2 * p.a2 + 4.0 * (mu - p.mu0);
        let sq = disc.max(0.0).sqrt().max(1e-12);
        let sigma = if stable { 1.0 } else { -1.0 };
        (-sigma / sq, 0.5 * (1.0 + sigma * p.a2 / sq))
    } else {
        let q = (p.mu0 - mu) / p.a2;
        (1.0 / p.a2, -q / p.a2)
    };
    let denom = (2.0 * r).max(1e-12);
    Some(RadiusSensitivity {
        radius: r,
        d_mu0: dq_dmu0 / denom,
        d_a2: dq_da2 / denom,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn subcritical_example() -> NormalFormParams {
        NormalFormParams::subcritical(18.28, 3.65).unwrap()
    }

    #[test]
    fn constructors_enforce_sign_conventions() {
        assert!(NormalFormParams::supercritical(0.0, -1.0).is_ok());
        assert!(NormalFormParams::supercritical(0.0, 1.0).is_err());
        assert!(NormalFormParams::subcritical(18.0, 3.65).is_ok());
        assert!(NormalFormParams::subcritical(18.0, -3.65).is_err());
        let mut p = subcritical_example();
        p.quintic_enabled = false;
        assert!(p.validate().is_err());
    }

    #[test]
    fn supercritical_radius_matches_closed_form() {
        let p = NormalFormParams::supercritical(0.0, -1.0).unwrap();
        let sols = lco_radii(&p, 0.5);
        assert_eq!(sols.len(), 1);
        assert_relative_eq!(sols[0].radius, 0.5f64.sqrt(), max_relative = 1e-15);
        assert!(sols[0].stable);
        assert!(lco_radii(&p, 0.0).is_empty());
        assert!(lco_radii(&p, -0.3).is_empty());
    }

    #[test]
    fn subcritical_pair_in_coexistence_window() {
        let p = subcritical_example();
        let mu = 16.0;
        let disc = p.a2 * p.a2 + 4.0 * (mu - p.mu0);
        let q_lo = (p.a2 - disc.sqrt()) / 2.0;
        let q_hi = (p.a2 + disc.sqrt()) / 2.0;
        let sols = lco_radii(&p, mu);
        assert_eq!(sols.len(), 2);
        assert_relative_eq!(sols[0].radius, q_lo.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(sols[1].radius, q_hi.sqrt(), max_relative = 1e-12);
        assert!(!sols[0].stable);
        assert!(sols[1].stable);

        // Above mu0 only the large-amplitude branch survives.
        let above = lco_radii(&p, 19.0);
        assert_eq!(above.len(), 1);
        assert!(above[0].stable);
        let at_hopf = lco_radii(&p, p.mu0);
        assert_eq!(at_hopf.len(), 1);
        assert_relative_eq!(at_hopf[0].radius, p.a2.sqrt(), max_relative = 1e-12);

        // Below the fold nothing oscillates.
        assert!(lco_radii(&p, 14.0).is_empty());
    }

    #[test]
    fn saddle_node_location_and_double_root() {
        let p = NormalFormParams::subcritical(0.0, 2.0).unwrap();
        assert_relative_eq!(saddle_node_mu(&p).unwrap(), -1.0, max_relative = 1e-15);

        let p = subcritical_example();
        let mu_s = saddle_node_mu(&p).unwrap();
        assert_relative_eq!(mu_s, 14.949375, max_relative = 1e-12);
        let sols = lco_radii(&p, mu_s);
        assert_eq!(sols.len(), 1);
        assert!(!sols[0].stable);
        assert!((sols[0].radius - (p.a2 / 2.0).sqrt()).abs() < 1e-9);

        let sup = NormalFormParams::supercritical(0.0, -1.0).unwrap();
        assert!(saddle_node_mu(&sup).is_err());
    }

    #[test]
    fn stability_flags_match_finite_difference_sign() {
        // Oracle: centered finite difference of the radial flow at each root.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let h = 1e-6;
        for _ in 0..300 {
            let mu0 = rng.random_range(-1.0..19.0);
            let a2 = rng.random_range(0.5..4.0);
            let p = NormalFormParams::subcritical(mu0, a2).unwrap();
            let mu_s = saddle_node_mu(&p).unwrap();
            let mu = rng.random_range(mu_s - 1.0..mu0 + 1.0);
            for sol in lco_radii(&p, mu) {
                let fd =
                    (radial_flow(&p, sol.radius + h, mu) - radial_flow(&p, sol.radius - h, mu))
                        / (2.0 * h);
                let analytic = radial_flow_derivative(&p, sol.radius, mu);
                if fd.abs() > 1e-4 {
                    assert_eq!(sol.stable, fd < 0.0, "p = {p:?}, mu = {mu}");
                    assert_relative_eq!(analytic, fd, max_relative = 1e-5);
                }
            }
        }
    }

    #[test]
    fn solution_counts_partition_the_parameter_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let mu0 = rng.random_range(-1.0..19.0);
            let a2 = rng.random_range(0.5..4.0);
            let p = NormalFormParams::subcritical(mu0, a2).unwrap();
            let mu_s = saddle_node_mu(&p).unwrap();
            let mu = loop {
                let cand = rng.random_range(mu_s - 1.0..mu0 + 1.0);
                if (cand - mu_s).abs() > 1e-7 && (cand - mu0).abs() > 1e-7 {
                    break cand;
                }
            };
            let n = lco_radii(&p, mu).len();
            let expected = if mu < mu_s {
                0
            } else if mu < mu0 {
                2
            } else {
                1
            };
            assert_eq!(n, expected, "p = {p:?}, mu = {mu}");
        }
    }

    #[test]
    fn long_integration_converges_to_stable_radius() {
        // Oracle: integrate the scalar amplitude ODE and watch it settle.
        let rk4 = |p: &NormalFormParams, mu: f64, mut r: f64, dt: f64, steps: usize| {
            for _ in 0..steps {
                let k1 = radial_flow(p, r, mu);
                let k2 = radial_flow(p, r + 0.5 * dt * k1, mu);
                let k3 = radial_flow(p, r + 0.5 * dt * k2, mu);
                let k4 = radial_flow(p, r + dt * k3, mu);
                r += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            r
        };
        let p = subcritical_example();
        let mu = 16.5;
        let sols = lco_radii(&p, mu);
        let (unstable, stable) = (sols[0], sols[1]);
        let settled = rk4(&p, mu, stable.radius + 0.3, 1e-3, 300_000);
        assert_relative_eq!(settled, stable.radius, max_relative = 1e-9);
        let settled = rk4(&p, mu, unstable.radius + 1e-3, 1e-3, 300_000);
        assert_relative_eq!(settled, stable.radius, max_relative = 1e-9);
        let decayed = rk4(&p, mu, unstable.radius - 1e-3, 1e-3, 300_000);
        assert!(decayed < 1e-3);
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let p = subcritical_example();
        let h = 1e-6;
        for (mu, stable) in [(16.0, true), (16.0, false), (17.9, true), (15.2, false)] {
            let s = radius_sensitivity(&p, mu, stable).unwrap();
            let rp = stability_matched_radius(
                &NormalFormParams::subcritical(p.mu0 + h, p.a2).unwrap(),
                mu,
                stable,
            )
            .unwrap();
            let rm = stability_matched_radius(
                &NormalFormParams::subcritical(p.mu0 - h, p.a2).unwrap(),
                mu,
                stable,
            )
            .unwrap();
            assert_relative_eq!(s.d_mu0, (rp - rm) / (2.0 * h), max_relative = 1e-5);
            let rp = stability_matched_radius(
                &NormalFormParams::subcritical(p.mu0, p.a2 + h).unwrap(),
                mu,
                stable,
            )
            .unwrap();
            let rm = stability_matched_radius(
                &NormalFormParams::subcritical(p.mu0, p.a2 - h).unwrap(),
                mu,
                stable,
            )
            .unwrap();
            assert_relative_eq!(s.d_a2, (rp - rm) / (2.0 * h), max_relative = 1e-5);
        }

        let p = NormalFormParams::supercritical(0.02, -1.1).unwrap();
        let s = radius_sensitivity(&p, 0.6, true).unwrap();
        let f = |mu0: f64, a2: f64| {
            stability_matched_radius(
                &NormalFormParams::supercritical(mu0, a2).unwrap(),
                0.6,
                true,
            )
            .unwrap()
        };
        assert_relative_eq!(
            s.d_mu0,
            (f(0.02 + h, -1.1) - f(0.02 - h, -1.1)) / (2.0 * h),
            max_relative = 1e-5
        );
        assert_relative_eq!(
            s.d_a2,
            (f(0.02, -1.1 + h) - f(0.02, -1.1 - h)) / (2.0 * h),
            max_relative = 1e-5
        );
    }

    #[test]
    fn missing_branches_are_none() {
        let p = subcritical_example();
        assert!(stability_matched_radius(&p, 19.0, false).is_none());
        assert!(stability_matched_radius(&p, 14.0, true).is_none());
        assert!(stability_matched_radius(&p, saddle_node_mu(&p).unwrap(), true).is_none());
        let sup = NormalFormParams::supercritical(0.0, -1.0).unwrap();
        assert!(stability_matched_radius(&sup, 0.5, false).is_none());
    }
}
