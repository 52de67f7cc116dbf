//! Plain JSON and CSV artifact formats.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::FitPeak;
use crate::peaks::{MeasuredPeak, ScanRecord};
use crate::tensor::FieldVector;
use crate::transitions::{SpectrumTrace, TransitionPeak};

pub const FREQUENCY_UNIT: &str = "GHz";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, message: impl ToString) -> Error {
    Error::Format {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = to_json_string(value)?;
    fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&s).map_err(|e| format_err(path, e))
}

/// Where and with what an artifact was produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_digest: String,
    #[serde(default)]
    pub input_digests: BTreeMap<String, String>,
    #[serde(default)]
    pub threads: usize,
}

/// Every file written by the command-line tool wraps its payload here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document<T, C = serde_json::Value> {
    pub provenance: Provenance,
    pub unit: String,
    pub field_unit: String,
    pub angle_unit: String,
    pub config: C,
    pub data: T,
}

impl<T, C> Document<T, C> {
    pub fn new(provenance: Provenance, config: C, data: T) -> Self {
        Self {
            provenance,
            unit: FREQUENCY_UNIT.into(),
            field_unit: "T".into(),
            angle_unit: "deg".into(),
            config,
            data,
        }
    }

    pub fn check_units(&self, path: &Path) -> Result<()> {
        if self.unit != FREQUENCY_UNIT || self.field_unit != "T" || self.angle_unit != "deg" {
            return Err(format_err(
                path,
                format!("unsupported units ({}, {}, {})", self.unit, self.field_unit, self.angle_unit),
            ));
        }
        Ok(())
    }
}

/// Transitions at one field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakList {
    #[serde(rename = "B_T")]
    pub field: FieldVector,
    pub peaks: Vec<TransitionPeak>,
}

/// Extracted peaks of one scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPeaks {
    pub scan_id: String,
    #[serde(rename = "B_T")]
    pub field: FieldVector,
    pub peaks: Vec<MeasuredPeak>,
    /// Generating `(gi, ei)` per peak, present for simulated data only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hints: Vec<Option<(usize, usize)>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PeaksFile {
    pub scans: Vec<ScanPeaks>,
}

impl PeaksFile {
    pub fn n_peaks(&self) -> usize {
        self.scans.iter().map(|s| s.peaks.len()).sum()
    }

    /// Flattens to fit input. Hints are attached only when `use_hints`.
    pub fn fit_peaks(&self, use_hints: bool) -> Vec<FitPeak> {
        let mut out = Vec::with_capacity(self.n_peaks());
        for scan in &self.scans {
            for (k, p) in scan.peaks.iter().enumerate() {
                out.push(FitPeak {
                    peak: p.clone(),
                    field: scan.field,
                    hint: if use_hints { scan.hints.get(k).copied().flatten() } else { None },
                });
            }
        }
        out
    }

    /// Groups fit peaks by scan id, keeping first-seen order.
    pub fn from_fit_peaks(peaks: &[FitPeak]) -> Self {
        let mut scans: Vec<ScanPeaks> = Vec::new();
        for p in peaks {
            let pos = match scans.iter().position(|s| s.scan_id == p.peak.scan_id) {
                Some(k) => k,
                None => {
                    scans.push(ScanPeaks {
                        scan_id: p.peak.scan_id.clone(),
                        field: p.field,
                        peaks: Vec::new(),
                        hints: Vec::new(),
                    });
                    scans.len() - 1
                }
            };
            scans[pos].peaks.push(p.peak.clone());
            scans[pos].hints.push(p.hint);
        }
        for s in &mut scans {
            if s.hints.iter().all(Option::is_none) {
                s.hints.clear();
            }
        }
        Self { scans }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanSidecar {
    #[serde(rename = "B_T")]
    pub field: FieldVector,
    pub scan_id: String,
    #[serde(rename = "laser_range_GHz", default, skip_serializing_if = "Option::is_none")]
    pub laser_range: Option<(f64, f64)>,
}

pub fn write_trace_csv(path: &Path, trace: &SpectrumTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e))?;
    w.write_record(["f_GHz", "signal"]).map_err(|e| format_err(path, e))?;
    for (f, s) in trace.frequencies.iter().zip(&trace.signal) {
        w.write_record([f.to_string(), s.to_string()]).map_err(|e| format_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_trace_csv(path: &Path) -> Result<SpectrumTrace> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    let headers = r.headers().map_err(|e| format_err(path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "f_GHz" || &headers[1] != "signal" {
        return Err(format_err(path, "expected header f_GHz,signal"));
    }
    let mut freq = Vec::new();
    let mut sig = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| format_err(path, e))?;
        let parse = |k: usize| -> Result<f64> {
            rec[k]
                .trim()
                .parse::<f64>()
                .map_err(|e| format_err(path, format!("row {:?}: {e}", rec.position().map(|p| p.line()))))
        };
        freq.push(parse(0)?);
        sig.push(parse(1)?);
    }
    SpectrumTrace::new(freq, sig).map_err(|e| format_err(path, e))
}

/// Sidecar path of a scan CSV: same stem, `.json` extension.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub fn write_scan(csv_path: &Path, scan: &ScanRecord) -> Result<()> {
    write_trace_csv(csv_path, &scan.trace)?;
    write_json(
        &sidecar_path(csv_path),
        &ScanSidecar {
            field: scan.field,
            scan_id: scan.scan_id.clone(),
            laser_range: scan.laser_range,
        },
    )
}

pub fn read_scan(csv_path: &Path) -> Result<ScanRecord> {
    let trace = read_trace_csv(csv_path)?;
    let side_path = sidecar_path(csv_path);
    let side: ScanSidecar = read_json(&side_path)?;
    let mut scan = ScanRecord::new(side.scan_id, side.field, trace).map_err(|e| format_err(&side_path, e))?;
    scan.laser_range = side.laser_range;
    Ok(scan)
}

/// All `*.csv` scans in a directory, sorted by file name.
pub fn scan_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitter::synthetic_peaks;
    use crate::presets;
    use crate::transitions::compute_transitions;
    use crate::Vector3;

    #[test]
    fn trace_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let t = SpectrumTrace::new(vec![0.0, 0.1, 0.2], vec![1.0 / 3.0, -2.5e-9, 7.0]).unwrap();
        write_trace_csv(&p, &t).unwrap();
        assert_eq!(read_trace_csv(&p).unwrap(), t);
    }

    #[test]
    fn scan_roundtrip_and_missing_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scan7.csv");
        let t = SpectrumTrace::new(vec![1.0, 1.5, 2.0], vec![0.0, 1.0, 0.0]).unwrap();
        let mut scan = ScanRecord::new("scan7", FieldVector::new(0.1, 0.2, 0.3).unwrap(), t.clone()).unwrap();
        scan.laser_range = Some((1.0, 2.0));
        write_scan(&p, &scan).unwrap();
        assert_eq!(read_scan(&p).unwrap(), scan);
        let lone = dir.path().join("lone.csv");
        write_trace_csv(&lone, &t).unwrap();
        match read_scan(&lone) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("lone.json")),
            other => panic!("{other:?}"),
        }
        assert_eq!(scan_paths(dir.path()).unwrap().len(), 2);
    }

    #[test]
    fn bad_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "freq,sig\n1,2\n").unwrap();
        assert!(matches!(read_trace_csv(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn peaks_file_roundtrip() {
        let sys = presets::er_si_system();
        let dirs = vec![Vector3::z(), Vector3::new(1.0, 1.0, 0.0).normalize()];
        let peaks = synthetic_peaks(&sys, &dirs, 0.4, 0.03, 0.5, 3).unwrap();
        let file = PeaksFile::from_fit_peaks(&peaks);
        assert_eq!(file.scans.len(), 2);
        let s = to_json_string(&file).unwrap();
        let back: PeaksFile = serde_json::from_str(&s).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.fit_peaks(true), peaks);
        assert!(back.fit_peaks(false).iter().all(|p| p.hint.is_none()));
    }

    #[test]
    fn peak_list_roundtrip_has_unit_keys() {
        let sys = presets::er_si_system();
        let b = FieldVector::new(0.0, 0.0, 0.4).unwrap();
        let list = PeakList {
            field: b,
            peaks: compute_transitions(&sys, &b).unwrap(),
        };
        let doc = Document::new(Provenance::default(), serde_json::Value::Null, list);
        let s = to_json_string(&doc).unwrap();
        assert!(s.contains("\"B_T\"") && s.contains("\"f_GHz\"") && s.contains("\"I_rel\""));
        let back: Document<PeakList> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.data.peaks.len(), 256);
    }

    #[test]
    fn system_params_roundtrip() {
        let sys = presets::er_si_system();
        let s = to_json_string(&sys).unwrap();
        assert!(s.contains("values_zyx") && s.contains("euler_deg"));
        let back: crate::SystemParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, sys);
    }

    #[test]
    fn unit_check() {
        let mut doc = Document::new(Provenance::default(), (), 1u8);
        assert!(doc.check_units(Path::new("x")).is_ok());
        doc.unit = "MHz".into();
        assert!(doc.check_units(Path::new("x")).is_err());
    }
}
