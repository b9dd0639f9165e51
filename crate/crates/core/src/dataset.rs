//! Measured limit-cycle records and their on-disk form.
//!
//! A dataset is a handful of steady-state oscillation recordings, each taken
//! at one value of the bifurcation parameter with a known stability label.
//! On disk: one CSV per record (time plus `m` observed states) and a JSON
//! manifest tying them together. All numeric text uses `.` decimals and 17
//! significant digits so files round-trip bit-exactly.

use crate::error::{Error, Result};
use crate::neural_net::{f64_from_string, f64_to_string};
use crate::orbit_geometry::PlanarOrbit;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

/// Where a record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Plain simulation settled onto a stable cycle.
    Simulated,
    /// Newton shooting on the full system (works on unstable cycles).
    Shooting,
    /// Stabilizing feedback wrapped around the physical system.
    StabilizedFeedback,
    Experimental,
}

/// One steady-state oscillation recording.
#[derive(Debug, Clone, PartialEq)]
pub struct LcoRecord {
    /// Bifurcation-parameter value the record was taken at.
    pub mu: f64,
    /// Stability of the underlying cycle.
    pub stable: bool,
    /// Sample times, uniformly spaced in practice.
    pub t: Vec<f64>,
    /// One row per sample time, `m` observed states each.
    pub samples: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

impl LcoRecord {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// The first two observed states as a planar orbit.
    pub fn planar_orbit(&self) -> Result<PlanarOrbit> {
        PlanarOrbit::new(self.samples.iter().map(|s| [s[0], s[1]]).collect())
    }
}

/// A set of records of one system, the training input.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDataset {
    /// Free-form system label carried through to trained models.
    pub system: String,
    /// Number of observed states per sample.
    pub m: usize,
    /// Unit strings per column, informational only.
    pub units: BTreeMap<String, String>,
    pub records: Vec<LcoRecord>,
}

impl TrainingDataset {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 observed states, got {}",
                self.m
            )));
        }
        if self.records.is_empty() {
            return Err(Error::InvalidInput("dataset has no records".into()));
        }
        for (i, rec) in self.records.iter().enumerate() {
            if !rec.mu.is_finite() {
                return Err(Error::InvalidInput(format!("record {i}: non-finite mu")));
            }
            if rec.samples.len() < 3 {
                return Err(Error::InvalidInput(format!(
                    "record {i}: only {} samples",
                    rec.samples.len()
                )));
            }
            if rec.t.len() != rec.samples.len() {
                return Err(Error::DimensionMismatch {
                    expected: rec.samples.len(),
                    got: rec.t.len(),
                });
            }
            for s in &rec.samples {
                if s.len() != self.m {
                    return Err(Error::DimensionMismatch {
                        expected: self.m,
                        got: s.len(),
                    });
                }
            }
            if rec.t.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidInput(format!(
                    "record {i}: sample times not strictly increasing"
                )));
            }
        }
        Ok(())
    }

    /// Parameter values of all records, in record order.
    pub fn mu_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mu).collect()
    }

    /// SHA-256 over the little-endian bit patterns of every number in the
    /// dataset, in a fixed order (per record: mu, stability byte, sample
    /// times, then samples row-major), prefixed by the system label and
    /// state count. Identifies a dataset independent of file layout.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system.as_bytes());
        h.update((self.m as u64).to_le_bytes());
        h.update((self.records.len() as u64).to_le_bytes());
        for rec in &self.records {
            h.update(rec.mu.to_bits().to_le_bytes());
            h.update([rec.stable as u8]);
            h.update((rec.t.len() as u64).to_le_bytes());
            for &t in &rec.t {
                h.update(t.to_bits().to_le_bytes());
            }
            for row in &rec.samples {
                for &v in row {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

/// Write `bytes` to `path` via a temp file in the same directory plus an
/// atomic rename, so readers never observe a half-written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = path.file_name().unwrap_or_default().to_os_string();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp_path = dir.join(tmp);
    {
        let mut f = std::fs::File::create(&tmp_path)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp_path, path)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    file: String,
    mu: String,
    stable: bool,
    provenance: Provenance,
    n_samples: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    system: String,
    m: usize,
    units: BTreeMap<String, String>,
    records: Vec<ManifestRecord>,
}

const DATASET_FORMAT_VERSION: u32 = 1;

/// Write a dataset as `manifest.json` plus `record_NN.csv` files in `dir`
/// (created if missing).
pub fn write_dataset(dir: &Path, ds: &TrainingDataset) -> Result<()> {
    ds.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        system: ds.system.clone(),
        m: ds.m,
        units: ds.units.clone(),
        records: Vec::new(),
    };
    for (i, rec) in ds.records.iter().enumerate() {
        let file = format!("record_{i:02}.csv");
        let mut csv = String::new();
        csv.push('t');
        for k in 1..=ds.m {
            csv.push_str(&format!(",z{k}"));
        }
        csv.push('\n');
        for (t, row) in rec.t.iter().zip(&rec.samples) {
            csv.push_str(&f64_to_string(*t));
            for v in row {
                csv.push(',');
                csv.push_str(&f64_to_string(*v));
            }
            csv.push('\n');
        }
        atomic_write(&dir.join(&file), csv.as_bytes())?;
        manifest.records.push(ManifestRecord {
            file,
            mu: f64_to_string(rec.mu),
            stable: rec.stable,
            provenance: rec.provenance,
            n_samples: rec.n_samples(),
        });
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    atomic_write(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(())
}

fn parse_float(s: &str, what: &str) -> Result<f64> {
    f64_from_string(s.trim())
        .map_err(|e| Error::InvalidInput(format!("bad {what} value {s:?}: {e}")))
}

/// Read a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<TrainingDataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::UnsupportedFormat {
            found: manifest.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let mut records = Vec::new();
    for mrec in &manifest.records {
        let text = std::fs::read_to_string(dir.join(&mrec.file))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidInput(format!("{}: empty file", mrec.file)))?;
        let n_cols = header.split(',').count();
        if n_cols != manifest.m + 1 {
            return Err(Error::DimensionMismatch {
                expected: manifest.m + 1,
                got: n_cols,
            });
        }
        let mut t = Vec::new();
        let mut samples = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let t_field = fields
                .next()
                .ok_or_else(|| Error::InvalidInput(format!("{}: empty row", mrec.file)))?;
            t.push(parse_float(t_field, "time")?);
            let row = fields
                .map(|f| parse_float(f, "state"))
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != manifest.m {
                return Err(Error::DimensionMismatch {
                    expected: manifest.m,
                    got: row.len(),
                });
            }
            samples.push(row);
        }
        records.push(LcoRecord {
            mu: parse_float(&mrec.mu, "mu")?,
            stable: mrec.stable,
            t,
            samples,
            provenance: mrec.provenance,
        });
    }
    let ds = TrainingDataset {
        system: manifest.system,
        m: manifest.m,
        units: manifest.units,
        records,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_dataset() -> TrainingDataset {
        let mut units = BTreeMap::new();
        units.insert("mu".to_string(), "-".to_string());
        let make = |mu: f64, stable: bool| {
            let n = 40;
            let t: Vec<f64> = (0..n).map(|j| 0.05 * j as f64).collect();
            let samples = t
                .iter()
                .map(|&tt| vec![(tt + mu).cos(), (tt + mu).sin(), 0.1 * tt.sin()])
                .collect();
            LcoRecord {
                mu,
                stable,
                t,
                samples,
                provenance: Provenance::Simulated,
            }
        };
        TrainingDataset {
            system: "toy".to_string(),
            m: 3,
            units,
            records: vec![make(0.3, true), make(0.7, false)],
        }
    }

    #[test]
    fn round_trip_is_exact_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
        assert_eq!(ds.fingerprint(), back.fingerprint());

        // Writing the reread dataset must reproduce the files byte for byte.
        let first = std::fs::read(dir.path().join("record_00.csv")).unwrap();
        let manifest_first = std::fs::read(dir.path().join("manifest.json")).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(dir2.path(), &back).unwrap();
        assert_eq!(
            first,
            std::fs::read(dir2.path().join("record_00.csv")).unwrap()
        );
        assert_eq!(
            manifest_first,
            std::fs::read(dir2.path().join("manifest.json")).unwrap()
        );
    }

    #[test]
    fn fingerprint_tracks_content() {
        let ds = toy_dataset();
        let fp = ds.fingerprint();
        assert_eq!(fp.len(), 64);
        let mut changed = ds.clone();
        changed.records[0].samples[5][1] += 1e-15;
        assert_ne!(fp, changed.fingerprint());
        let mut relabeled = ds.clone();
        relabeled.records[1].stable = true;
        assert_ne!(fp, relabeled.fingerprint());
    }

    #[test]
    fn validation_catches_ragged_rows() {
        let mut ds = toy_dataset();
        ds.records[0].samples[3].pop();
        assert!(ds.validate().is_err());
        let mut ds = toy_dataset();
        ds.records[0].t[5] = ds.records[0].t[4];
        assert!(ds.validate().is_err());
        let mut ds = toy_dataset();
        ds.m = 1;
        assert!(ds.validate().is_err());
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &toy_dataset()).unwrap();
        let manifest_path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(&manifest_path, text).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::UnsupportedFormat { found: 99, .. })
        ));
    }
}
