//! The assembled model, its versioned file format, and the predictions
//! exported from it: bifurcation diagrams, orbits, and evaluation metrics.

use crate::coordinate_map::{
    eval_auxiliary, invertibility_report, predicted_orbit, AuxiliaryMap, CoordinateMap,
};
use crate::dataset::{atomic_write, TrainingDataset};
use crate::error::{Error, Result};
use crate::normal_form::{
    lco_radii, saddle_node_mu, stability_matched_radius, Criticality, NormalFormParams,
};
use crate::orbit_geometry::{
    descriptor_distance, orbit_descriptor, shape_loss, PlanarOrbit,
};
use crate::speed_model::{predict_timeseries, speed_loss, SpeedMode, SpeedModel};
use crate::training::TrainingConfig;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::path::Path;

/// Version stamp of the model file layout.
pub const FORMAT_VERSION: u32 = 1;

/// Normal form, coordinate map, speed model, and auxiliary observable maps,
/// together with the provenance needed to reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridModel {
    pub format_version: u32,
    pub normal_form: NormalFormParams,
    pub map: CoordinateMap,
    pub speed: SpeedModel,
    #[serde(default)]
    pub aux: Vec<AuxiliaryMap>,
    pub dataset_fingerprint: String,
    pub config: TrainingConfig,
}

impl HybridModel {
    pub fn new(
        normal_form: NormalFormParams,
        map: CoordinateMap,
        speed: SpeedModel,
        aux: Vec<AuxiliaryMap>,
        dataset_fingerprint: String,
        config: TrainingConfig,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            normal_form,
            map,
            speed,
            aux,
            dataset_fingerprint,
            config,
        }
    }

    /// Cross-field consistency, re-checked after deserialization because the
    /// fields are public.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedFormat {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        self.normal_form.validate()?;
        self.config.validate()?;
        if self.map.nn.input_dim() != 3 || self.map.nn.output_dim() != 2 {
            return Err(Error::InvalidParams(format!(
                "coordinate-map network must be 3 -> 2, got {} -> {}",
                self.map.nn.input_dim(),
                self.map.nn.output_dim()
            )));
        }
        let (want_in, want_out) = match self.speed.mode {
            SpeedMode::Direct => (3, 1),
            SpeedMode::Harmonic { n_h } => (2, 2 * n_h + 1),
        };
        if self.speed.nn.input_dim() != want_in || self.speed.nn.output_dim() != want_out {
            return Err(Error::InvalidParams(format!(
                "speed network must be {} -> {}, got {} -> {}",
                want_in,
                want_out,
                self.speed.nn.input_dim(),
                self.speed.nn.output_dim()
            )));
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline. The field order is fixed and
    /// floats use the shortest round-trip form, so write, read, write
    /// produces identical bytes.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parse a model file, checking the format version before the layout so
    /// a newer file fails with the version message rather than a field
    /// error.
    pub fn from_json(s: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(s)?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::InvalidInput("model file lacks format_version".into()))?;
        if found != FORMAT_VERSION as u64 {
            return Err(Error::UnsupportedFormat {
                found: found.try_into().unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            });
        }
        let model: Self = serde_json::from_value(value)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// One sampled point of a bifurcation diagram. Marker rows pin the exact
/// parameter values where branches are born or meet.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagramRow {
    pub mu: f64,
    /// "stable" or "unstable".
    pub branch: &'static str,
    /// Largest distance of the predicted orbit from its centroid.
    pub amp_max: f64,
    /// Mean radius (constant descriptor coefficient) of the predicted orbit.
    pub a0: f64,
    /// "hopf" or "saddle_node" on the rows sitting exactly at those points.
    pub marker: Option<&'static str>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BifurcationDiagram {
    pub mu0: f64,
    pub saddle_node_mu: Option<f64>,
    pub rows: Vec<DiagramRow>,
}

impl BifurcationDiagram {
    /// Whether any sampled point carries an actual cycle, as opposed to a
    /// diagram made only of boundary markers.
    pub fn has_branch_rows(&self) -> bool {
        self.rows.iter().any(|r| r.marker.is_none())
    }
}

fn branch_label(stable: bool) -> &'static str {
    if stable {
        "stable"
    } else {
        "unstable"
    }
}

/// Amplitude measures of the image of the radius-`r` cycle at `mu`.
fn circle_amplitudes(
    map: &CoordinateMap,
    r: f64,
    mu: f64,
    n_points: usize,
    n_h: usize,
) -> Result<(f64, f64)> {
    let points: Vec<[f64; 2]> = (0..n_points)
        .map(|j| {
            let psi = TAU * j as f64 / n_points as f64;
            map.forward(r * psi.cos(), r * psi.sin(), mu)
        })
        .collect();
    let orbit = PlanarOrbit::new(points)?;
    let c = orbit.centroid();
    let amp_max = orbit
        .points
        .iter()
        .map(|z| (z[0] - c[0]).hypot(z[1] - c[1]))
        .fold(0.0, f64::max);
    let a0 = orbit_descriptor(&orbit, n_h)?.a[0];
    Ok((amp_max, a0))
}

/// Sample every branch of the model over `steps` equally spaced parameter
/// values. The exact Hopf point and, for subcritical models, the exact
/// saddle-node are inserted into the grid so the exported branches
/// terminate precisely where the normal form says they do.
pub fn bifurcation_diagram(
    model: &HybridModel,
    mu_min: f64,
    mu_max: f64,
    steps: usize,
) -> Result<BifurcationDiagram> {
    if !mu_min.is_finite() || !mu_max.is_finite() || mu_min > mu_max {
        return Err(Error::InvalidInput(format!(
            "bad parameter range [{mu_min}, {mu_max}]"
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidInput("steps must be at least 1".into()));
    }
    let p = &model.normal_form;
    let n_points = model.config.n_points;
    let n_h = model.config.n_h;

    let mut grid: Vec<f64> = if steps == 1 {
        vec![mu_min]
    } else {
        (0..steps)
            .map(|k| mu_min + (mu_max - mu_min) * k as f64 / (steps - 1) as f64)
            .collect()
    };
    let in_range = |mu: f64| mu >= mu_min && mu <= mu_max;
    let fold = saddle_node_mu(p).ok();
    if in_range(p.mu0) {
        grid.push(p.mu0);
    }
    if let Some(ms) = fold {
        if in_range(ms) {
            grid.push(ms);
        }
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut rows = Vec::new();
    for &mu in &grid {
        if fold == Some(mu) {
            // Double root: both branches end here at the same radius.
            let r = (p.a2 / 2.0).sqrt();
            let (amp_max, a0) = circle_amplitudes(&model.map, r, mu, n_points, n_h)?;
            for stable in [true, false] {
                rows.push(DiagramRow {
                    mu,
                    branch: branch_label(stable),
                    amp_max,
                    a0,
                    marker: Some("saddle_node"),
                });
            }
            continue;
        }
        for sol in lco_radii(p, mu) {
            let (amp_max, a0) =
                circle_amplitudes(&model.map, sol.radius, mu, n_points, n_h)?;
            rows.push(DiagramRow {
                mu,
                branch: branch_label(sol.stable),
                amp_max,
                a0,
                marker: None,
            });
        }
    }
    if in_range(p.mu0) {
        // The branch born at the Hopf point shrinks to zero amplitude there.
        let stable_at_hopf = matches!(p.criticality, Criticality::Supercritical);
        rows.push(DiagramRow {
            mu: p.mu0,
            branch: branch_label(stable_at_hopf),
            amp_max: 0.0,
            a0: 0.0,
            marker: Some("hopf"),
        });
    }
    rows.sort_by(|a, b| {
        a.mu.total_cmp(&b.mu)
            .then(a.branch.cmp(b.branch))
            .then(a.amp_max.total_cmp(&b.amp_max))
    });
    Ok(BifurcationDiagram {
        mu0: p.mu0,
        saddle_node_mu: fold,
        rows,
    })
}

/// `{:.16e}`: 17 significant digits, enough to reconstruct the exact float.
fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_diagram_csv(path: &Path, diagram: &BifurcationDiagram) -> Result<()> {
    let mut out = String::from("mu,branch,amp_max,a0,marker\n");
    for row in &diagram.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_float(row.mu),
            row.branch,
            fmt_float(row.amp_max),
            fmt_float(row.a0),
            row.marker.unwrap_or("")
        ));
    }
    atomic_write(path, out.as_bytes())
}

/// The predicted cycle at `mu` in observable coordinates: the parameter
/// angle of each sample and the full observable vector (planar coordinates
/// first, auxiliary observables after).
pub fn predicted_observables(
    model: &HybridModel,
    mu: f64,
    stable: bool,
    n_points: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let r = stability_matched_radius(&model.normal_form, mu, stable).ok_or({
        Error::MissingBranch {
            mu,
            wanted: if stable { "stable" } else { "unstable" },
        }
    })?;
    let mut thetas = Vec::with_capacity(n_points);
    let mut rows = Vec::with_capacity(n_points);
    for j in 0..n_points {
        let psi = TAU * j as f64 / n_points as f64;
        let (u1, u2) = (r * psi.cos(), r * psi.sin());
        let z = model.map.forward(u1, u2, mu);
        let mut row = vec![z[0], z[1]];
        for aux in &model.aux {
            row.push(eval_auxiliary(aux, u1, u2, mu));
        }
        thetas.push(psi);
        rows.push(row);
    }
    Ok((thetas, rows))
}

/// CSV of observable rows against a leading coordinate column (time or
/// angle), with the parameter value repeated in the last column.
pub fn write_series_csv(
    path: &Path,
    coord_name: &str,
    coord: &[f64],
    rows: &[Vec<f64>],
    mu: f64,
) -> Result<()> {
    let width = rows.first().map_or(2, Vec::len);
    let mut out = String::from(coord_name);
    for j in 0..width {
        out.push_str(&format!(",z{}_hat", j + 1));
    }
    out.push_str(",mu\n");
    for (c, row) in coord.iter().zip(rows) {
        out.push_str(&fmt_float(*c));
        for v in row {
            out.push(',');
            out.push_str(&fmt_float(*v));
        }
        out.push(',');
        out.push_str(&fmt_float(mu));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Per-record errors of a model against a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub mu: f64,
    pub stable: bool,
    /// Distance between measured and predicted orbit descriptors.
    pub descriptor_distance: f64,
    /// The same distance relative to the measured mean radius.
    pub rel_descriptor_error: f64,
    /// Time-series RMS error relative to the measured mean radius.
    pub nrmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub shape_loss: f64,
    pub speed_loss: f64,
    pub records: Vec<RecordMetrics>,
    /// Smallest |det J| over the sampled training annulus.
    pub min_abs_det: f64,
    /// Whether the dataset is the one the model was trained on.
    pub fingerprint_match: bool,
}

/// Recompute every reported metric of `model` against `ds`.
pub fn evaluate_model(model: &HybridModel, ds: &TrainingDataset) -> Result<EvalMetrics> {
    ds.validate()?;
    model.validate()?;
    let cfg = &model.config;
    let shape = shape_loss(ds, &model.map, &model.normal_form, cfg.n_points, cfg.n_h)?;
    let speed = speed_loss(
        ds,
        &model.map,
        &model.normal_form,
        &model.speed,
        cfg.downsample,
        cfg.n_points,
    )?;

    let mut records = Vec::with_capacity(ds.records.len());
    for rec in &ds.records {
        let orbit = rec.planar_orbit()?;
        let measured = orbit_descriptor(&orbit, cfg.n_h)?;
        let a0 = measured.a[0].max(1e-300);
        let pred = predicted_orbit(
            &model.map,
            &model.normal_form,
            rec.mu,
            rec.stable,
            cfg.n_points,
        )?;
        let dist = descriptor_distance(&measured, &orbit_descriptor(&pred, cfg.n_h)?)?;

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
        records.push(RecordMetrics {
            mu: rec.mu,
            stable: rec.stable,
            descriptor_distance: dist,
            rel_descriptor_error: dist / a0,
            nrmse: (se / count as f64).sqrt() / a0,
        });
    }

    let mus = ds.mu_values();
    let lo = mus.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mus.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rep = invertibility_report(&model.map, &model.normal_form, (lo, hi), 15, 16, 32)?;

    Ok(EvalMetrics {
        shape_loss: shape,
        speed_loss: speed,
        records,
        min_abs_det: rep.min_abs_det,
        fingerprint_match: ds.fingerprint() == model.dataset_fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordinate_map::{LinearMap, MuScaling};
    use crate::dataset::{LcoRecord, Provenance};
    use crate::neural_net::MlpNetwork;
    use crate::training::{SpeedConfig, StageSchedule, TrainingConfig};
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;

    fn small_config() -> TrainingConfig {
        let quick = StageSchedule {
            adam_iters: 5,
            adam_lr: 0.01,
            lbfgs_iters: 5,
            lbfgs_step: 1e-4,
        };
        TrainingConfig {
            criticality: Criticality::Supercritical,
            n_h: 3,
            n_points: 48,
            map_hidden: vec![4],
            speed: SpeedConfig::Direct { hidden: vec![4] },
            stage1: quick,
            stage2: quick,
            stage3: quick,
            seed: 1,
            mu0_init: Some(0.0),
            mu0_bound: None,
            a2_init: Some(-1.0),
            downsample: 100,
            nonsingularity_weight: 1e6,
            centroid_weight: 1.0,
        }
    }

    fn supercritical_model() -> HybridModel {
        // Scaled rotation: circles map to circles, so descriptors are exact
        // at any harmonic count and the metrics below are pure numerics.
        let map = CoordinateMap::new(
            LinearMap {
                rows: [[1.3, 0.1, 0.0], [-0.1, 1.3, 0.0]],
            },
            [0.2, -0.1],
            MlpNetwork::zeroed(&[3, 4, 2]).unwrap(),
            MuScaling::identity(),
        )
        .unwrap();
        HybridModel::new(
            NormalFormParams::supercritical(0.1, -1.0).unwrap(),
            map,
            SpeedModel::constant(1.5, &[4]).unwrap(),
            Vec::new(),
            "test-fingerprint".into(),
            small_config(),
        )
    }

    fn subcritical_model() -> HybridModel {
        let map = CoordinateMap::affine_identity(&[4]).unwrap();
        let mut cfg = small_config();
        cfg.criticality = Criticality::Subcritical;
        cfg.a2_init = Some(2.0);
        cfg.mu0_init = Some(1.0);
        HybridModel::new(
            NormalFormParams::subcritical(1.0, 2.0).unwrap(),
            map,
            SpeedModel::constant(1.0, &[4]).unwrap(),
            Vec::new(),
            "test-fingerprint".into(),
            cfg,
        )
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let model = supercritical_model();
        let json = model.to_json().unwrap();
        assert!(json.ends_with('\n'));
        let back = HybridModel::from_json(&json).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_json().unwrap(), json);
    }

    #[test]
    fn save_load_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = supercritical_model();
        model.save(&path).unwrap();
        let loaded = HybridModel::load(&path).unwrap();
        assert_eq!(loaded, model);
    }

    #[test]
    fn version_and_shape_checks_reject_bad_files() {
        let model = supercritical_model();
        let json = model.to_json().unwrap();
        let bumped = json.replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(
            HybridModel::from_json(&bumped),
            Err(Error::UnsupportedFormat {
                found: 2,
                expected: 1
            })
        ));
        assert!(HybridModel::from_json("{ not json").is_err());
        assert!(HybridModel::from_json("{}").is_err());

        let mut mangled = model.clone();
        mangled.speed.mode = SpeedMode::Harmonic { n_h: 2 };
        assert!(mangled.validate().is_err());
    }

    #[test]
    fn supercritical_diagram_has_one_branch_from_the_hopf_point() {
        let model = supercritical_model();
        let d = bifurcation_diagram(&model, -0.5, 1.1, 9).unwrap();
        assert_eq!(d.mu0, 0.1);
        assert_eq!(d.saddle_node_mu, None);
        assert!(d.has_branch_rows());

        let hopf: Vec<_> = d.rows.iter().filter(|r| r.marker == Some("hopf")).collect();
        assert_eq!(hopf.len(), 1);
        assert_eq!(hopf[0].mu, 0.1);
        assert_eq!(hopf[0].amp_max, 0.0);
        assert_eq!(hopf[0].branch, "stable");

        for r in &d.rows {
            assert_eq!(r.branch, "stable");
            assert!(r.mu >= 0.1, "no rows below the Hopf point, got {}", r.mu);
        }
        // Amplitudes grow along the branch.
        let amps: Vec<f64> = d.rows.iter().map(|r| r.amp_max).collect();
        for w in amps.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert!(d.rows.windows(2).all(|w| w[0].mu <= w[1].mu));

        let single = bifurcation_diagram(&model, 0.9, 0.9, 1).unwrap();
        assert_eq!(single.rows.len(), 1);
        assert!(bifurcation_diagram(&model, 0.5, 0.4, 5).is_err());
        assert!(bifurcation_diagram(&model, 0.4, 0.5, 0).is_err());
    }

    #[test]
    fn subcritical_diagram_terminates_branches_at_fold_and_hopf() {
        let model = subcritical_model();
        let p = &model.normal_form;
        let fold = saddle_node_mu(p).unwrap();
        let d = bifurcation_diagram(&model, fold - 0.5, 2.0, 11).unwrap();
        assert_eq!(d.saddle_node_mu, Some(fold));

        let fold_rows: Vec<_> = d
            .rows
            .iter()
            .filter(|r| r.marker == Some("saddle_node"))
            .collect();
        assert_eq!(fold_rows.len(), 2);
        assert_eq!(fold_rows[0].mu, fold);
        assert_relative_eq!(
            fold_rows[0].amp_max,
            (p.a2 / 2.0).sqrt(),
            max_relative = 1e-12
        );
        assert_eq!(fold_rows[0].amp_max, fold_rows[1].amp_max);
        assert_ne!(fold_rows[0].branch, fold_rows[1].branch);

        let hopf: Vec<_> = d.rows.iter().filter(|r| r.marker == Some("hopf")).collect();
        assert_eq!(hopf.len(), 1);
        assert_eq!(hopf[0].branch, "unstable");
        assert_eq!(hopf[0].amp_max, 0.0);

        // Coexistence window: both branches present, stable one larger.
        let mid = 0.5 * (fold + p.mu0);
        let d2 = bifurcation_diagram(&model, mid, mid, 1).unwrap();
        assert_eq!(d2.rows.len(), 2);
        let stable = d2.rows.iter().find(|r| r.branch == "stable").unwrap();
        let unstable = d2.rows.iter().find(|r| r.branch == "unstable").unwrap();
        assert!(stable.amp_max > unstable.amp_max);

        // No cycles below the fold at all.
        let d3 = bifurcation_diagram(&model, fold - 2.0, fold - 1.0, 5).unwrap();
        assert!(d3.rows.is_empty());
        assert!(!d3.has_branch_rows());
    }

    #[test]
    fn diagram_csv_is_parseable_and_lf_terminated() {
        let model = subcritical_model();
        let d = bifurcation_diagram(&model, 0.0, 2.0, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diagram.csv");
        write_diagram_csv(&path, &d).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains('\r'));
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "mu,branch,amp_max,a0,marker");
        let mut n = 0;
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 5);
            let mu: f64 = fields[0].parse().unwrap();
            assert_eq!(mu, d.rows[n].mu, "17 digits reconstruct the value");
            assert!(matches!(fields[1], "stable" | "unstable"));
            n += 1;
        }
        assert_eq!(n, d.rows.len());
    }

    #[test]
    fn predicted_observables_follow_the_map() {
        let model = supercritical_model();
        let mu = 0.6;
        let (thetas, rows) = predicted_observables(&model, mu, true, 32).unwrap();
        assert_eq!(thetas.len(), 32);
        assert_eq!(rows.len(), 32);
        let r = stability_matched_radius(&model.normal_form, mu, true).unwrap();
        for (th, row) in thetas.iter().zip(&rows) {
            let z = model.map.forward(r * th.cos(), r * th.sin(), mu);
            assert_eq!(row.as_slice(), &z[..]);
        }
        assert!(matches!(
            predicted_observables(&model, 0.6, false, 32),
            Err(Error::MissingBranch { .. })
        ));
    }

    #[test]
    fn series_csv_layout_matches_row_width() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ts.csv");
        let rows = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        write_series_csv(&path, "t", &[0.0, 0.5], &rows, 0.7).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,z1_hat,z2_hat,z3_hat,mu");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), 5);
        assert_eq!(first[3].parse::<f64>().unwrap(), 3.0);
        assert_eq!(first[4].parse::<f64>().unwrap(), 0.7);
    }

    #[test]
    fn evaluate_model_scores_its_own_predictions() {
        let model = supercritical_model();
        let p = &model.normal_form;
        let omega = model.speed.omega0;
        let records: Vec<LcoRecord> = [0.4, 0.8]
            .iter()
            .map(|&mu| {
                let r = stability_matched_radius(p, mu, true).unwrap();
                // 1.4 cycles at omega = 1.5, enough for a closed descriptor.
                let t: Vec<f64> = (0..120).map(|k| 0.05 * k as f64).collect();
                let samples = t
                    .iter()
                    .map(|&tk| {
                        let th = omega * tk;
                        let z = model.map.forward(r * th.cos(), r * th.sin(), mu);
                        vec![z[0], z[1]]
                    })
                    .collect();
                LcoRecord {
                    mu,
                    stable: true,
                    t,
                    samples,
                    provenance: Provenance::Simulated,
                }
            })
            .collect();
        let mut units = BTreeMap::new();
        units.insert("t".into(), "s".into());
        let ds = TrainingDataset {
            system: "synthetic".into(),
            m: 2,
            units,
            records,
        };
        let metrics = evaluate_model(&model, &ds).unwrap();
        assert_eq!(metrics.records.len(), 2);
        // The dataset was produced by this exact model, so every error is
        // numerical noise.
        assert!(metrics.shape_loss < 1e-8, "shape {}", metrics.shape_loss);
        assert!(metrics.speed_loss < 1e-6, "speed {}", metrics.speed_loss);
        for rm in &metrics.records {
            assert!(rm.rel_descriptor_error < 1e-8);
            assert!(rm.nrmse < 1e-6);
        }
        assert!(metrics.min_abs_det > 0.0);
        assert!(!metrics.fingerprint_match);

        let mut stamped = model.clone();
        stamped.dataset_fingerprint = ds.fingerprint();
        assert!(evaluate_model(&stamped, &ds).unwrap().fingerprint_match);
    }
}
