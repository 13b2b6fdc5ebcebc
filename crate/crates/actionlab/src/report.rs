//! Run artifacts and their consolidation: a manifest and a typed JSON
//! report per run, CSV series for plotting, and a pooling merge that
//! combines per-seed series from compatible runs into one summary with
//! tighter standard errors.

use crate::asymptotics::{
    mean_and_stderr, FamilyEstimate, HomogenizationCurve, PanelEstimate, SecondOrderAudit,
};
use crate::config::ExperimentKind;
use crate::diagnostics::MGrowthAudit;
use crate::FORMAT_VERSION;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("no manifests found under the results directory")]
    Empty,
    #[error("incompatible runs cannot be merged: {details}")]
    Incompatible { details: String },
}

/// Run manifest. Everything except the two timing fields is a pure
/// function of the configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub experiment: ExperimentKind,
    pub config_hash: String,
    pub compat_hash: String,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<String>,
    pub created_unix_ms: u64,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedValue {
    pub seed: u64,
    pub value: f64,
}

/// Typed result of one run, embedded in report.json with the raw per-seed
/// series so later merges can pool exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum ReportPayload {
    EnvSample {
        seed: u64,
        point_count: usize,
        content_hash: String,
    },
    Solve {
        target: Vec<f64>,
        horizon: f64,
        values: Vec<SeedValue>,
    },
    Shape {
        family: FamilyEstimate,
    },
    Grad {
        family: FamilyEstimate,
    },
    Panel {
        panel: PanelEstimate,
    },
    Homog {
        curve: HomogenizationCurve,
    },
    Audit {
        second_order: SecondOrderAudit,
        growth: MGrowthAudit,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub config_hash: String,
    pub compat_hash: String,
    pub payload: ReportPayload,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ReportError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ReportError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

/// Minimal CSV writer for numeric series; floats print in shortest
/// round-trip form, so identical numbers give identical bytes.
pub struct Csv {
    text: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Csv {
        Csv {
            text: format!("{}\n", header.join(",")),
            columns: header.len(),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        assert_eq!(cells.len(), self.columns, "csv row width");
        let _ = writeln!(self.text, "{}", cells.join(","));
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

pub fn cell_f(x: f64) -> String {
    format!("{x}")
}

pub fn cell_list(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x}")).collect();
    format!("[{}]", parts.join(" "))
}

/// One pooled summary line; label encodes the key inside the experiment
/// (frame, cell, epsilon, checkpoint).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub label: String,
    pub horizon: f64,
    pub n: usize,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub format_version: u32,
    pub compat_hash: String,
    pub runs: usize,
    pub rows: Vec<SummaryRow>,
}

pub fn summary_csv(summary: &Summary) -> String {
    let mut csv = Csv::new(&["experiment", "label", "horizon", "n", "mean", "std_error"]);
    for row in &summary.rows {
        csv.row(&[
            row.experiment.clone(),
            row.label.clone(),
            cell_f(row.horizon),
            row.n.to_string(),
            cell_f(row.mean),
            cell_f(row.std_error),
        ]);
    }
    csv.into_string()
}

/// Loads every manifest/report pair directly in `dir` or one level below,
/// in sorted path order.
pub fn load_runs(dir: &Path) -> Result<Vec<(Manifest, Report)>, ReportError> {
    let mut candidates = vec![dir.to_path_buf()];
    let entries = std::fs::read_dir(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut subdirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    candidates.extend(subdirs);

    let mut runs = Vec::new();
    for cand in candidates {
        let manifest_path = cand.join("manifest.json");
        if !manifest_path.is_file() {
            continue;
        }
        let manifest: Manifest = read_json(&manifest_path)?;
        let report: Report = read_json(&cand.join("report.json"))?;
        runs.push((manifest, report));
    }
    if runs.is_empty() {
        return Err(ReportError::Empty);
    }
    Ok(runs)
}

fn pool(
    rows: &mut Vec<SummaryRow>,
    experiment: &str,
    label: String,
    horizon: f64,
    series: &[f64],
) {
    let (mean, std_error) = mean_and_stderr(series);
    rows.push(SummaryRow {
        experiment: experiment.to_string(),
        label,
        horizon,
        n: series.len(),
        mean,
        std_error,
    });
}

/// Merges compatible runs into one pooled summary. Runs must share the
/// seed-independent configuration hash; per-seed series concatenate in run
/// order, and means and standard errors are recomputed from the pool.
pub fn merge_reports(runs: &[(Manifest, Report)]) -> Result<Summary, ReportError> {
    if runs.is_empty() {
        return Err(ReportError::Empty);
    }
    let compat = &runs[0].1.compat_hash;
    let mut conflicts: Vec<String> = runs
        .iter()
        .filter(|(_, r)| &r.compat_hash != compat)
        .map(|(m, r)| format!("{} run {} has hash {}", m.experiment.name(), m.config_hash, r.compat_hash))
        .collect();
    if !conflicts.is_empty() {
        conflicts.insert(0, format!("expected hash {compat}"));
        return Err(ReportError::Incompatible {
            details: conflicts.join("; "),
        });
    }

    let mut rows = Vec::new();
    match &runs[0].1.payload {
        ReportPayload::EnvSample { .. } => {
            let mut counts = Vec::new();
            for (_, r) in runs {
                if let ReportPayload::EnvSample { point_count, .. } = &r.payload {
                    counts.push(*point_count as f64);
                }
            }
            pool(&mut rows, "env-sample", "point_count".to_string(), 0.0, &counts);
        }
        ReportPayload::Solve { target, horizon, .. } => {
            let mut series = Vec::new();
            for (_, r) in runs {
                if let ReportPayload::Solve { values, .. } = &r.payload {
                    series.extend(values.iter().map(|sv| sv.value));
                }
            }
            pool(
                &mut rows,
                "solve",
                format!("target={}", cell_list(target)),
                *horizon,
                &series,
            );
        }
        ReportPayload::Shape { family } | ReportPayload::Grad { family } => {
            let gradient_run = matches!(&runs[0].1.payload, ReportPayload::Grad { .. });
            let name = if gradient_run { "grad" } else { "shape" };
            for (fi, shape) in family.shapes.iter().enumerate() {
                let mut series = Vec::new();
                for (_, r) in runs {
                    let fam = match &r.payload {
                        ReportPayload::Shape { family } | ReportPayload::Grad { family } => family,
                        _ => continue,
                    };
                    series.extend(fam.shapes[fi].per_seed.iter().copied());
                }
                pool(
                    &mut rows,
                    name,
                    format!(
                        "v={} alpha={} beta={}",
                        cell_list(&shape.frame.v),
                        shape.frame.alpha,
                        shape.frame.beta
                    ),
                    family.horizon,
                    &series,
                );
            }
            if let Some(grads) = &family.gradients {
                for (gi, grad) in grads.iter().enumerate() {
                    for axis in 0..grad.mean.len() {
                        let mut series = Vec::new();
                        for (_, r) in runs {
                            let fam = match &r.payload {
                                ReportPayload::Shape { family }
                                | ReportPayload::Grad { family } => family,
                                _ => continue,
                            };
                            if let Some(gs) = &fam.gradients {
                                series.extend(gs[gi].per_seed.iter().map(|g| g[axis]));
                            }
                        }
                        pool(
                            &mut rows,
                            name,
                            format!(
                                "grad v={} axis={axis}",
                                cell_list(&grad.frame.v)
                            ),
                            family.horizon,
                            &series,
                        );
                    }
                }
            }
        }
        ReportPayload::Panel { panel } => {
            for (ci, cell) in panel.cells.iter().enumerate() {
                let mut series = Vec::new();
                for (_, r) in runs {
                    if let ReportPayload::Panel { panel } = &r.payload {
                        series.extend(panel.cells[ci].per_seed.iter().copied());
                    }
                }
                pool(
                    &mut rows,
                    "panel",
                    format!("alpha={} beta={}", cell.alpha, cell.beta),
                    panel.horizon,
                    &series,
                );
            }
        }
        ReportPayload::Homog { curve } => {
            for (pi, point) in curve.points.iter().enumerate() {
                let mut series = Vec::new();
                for (_, r) in runs {
                    if let ReportPayload::Homog { curve } = &r.payload {
                        series.extend(curve.points[pi].per_seed.iter().copied());
                    }
                }
                pool(
                    &mut rows,
                    "homog",
                    format!("epsilon={}", point.epsilon),
                    curve.macro_time,
                    &series,
                );
            }
        }
        ReportPayload::Audit { second_order, growth } => {
            for (pi, point) in second_order.points.iter().enumerate() {
                let mut kin_series = Vec::new();
                let mut field_series = Vec::new();
                for (_, r) in runs {
                    if let ReportPayload::Audit { second_order, .. } = &r.payload {
                        kin_series.extend(second_order.points[pi].per_seed_kinetic.iter());
                        field_series.extend(second_order.points[pi].per_seed_field.iter());
                    }
                }
                pool(
                    &mut rows,
                    "audit",
                    format!("kinetic_bound T={}", point.horizon),
                    point.horizon,
                    &kin_series,
                );
                pool(
                    &mut rows,
                    "audit",
                    format!("field_bound T={}", point.horizon),
                    point.horizon,
                    &field_series,
                );
            }
            for (pi, point) in growth.points.iter().enumerate() {
                let mut series = Vec::new();
                for (_, r) in runs {
                    if let ReportPayload::Audit { growth, .. } = &r.payload {
                        series.extend(growth.points[pi].per_seed_ratio.iter().copied());
                    }
                }
                pool(
                    &mut rows,
                    "audit",
                    format!("box_growth T={}", point.horizon),
                    point.horizon,
                    &series,
                );
            }
        }
    }
    Ok(Summary {
        format_version: FORMAT_VERSION,
        compat_hash: compat.clone(),
        runs: runs.len(),
        rows,
    })
}

pub fn unix_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asymptotics::ShapeEstimate;
    use crate::solver::Frame;

    fn shape_report(per_seed: Vec<f64>, compat: &str) -> (Manifest, Report) {
        let (mean, std_error) = mean_and_stderr(&per_seed);
        let family = FamilyEstimate {
            horizon: 10.0,
            seeds: (0..per_seed.len() as u64).collect(),
            shapes: vec![ShapeEstimate {
                frame: Frame::moving(vec![0.5]),
                per_seed,
                mean,
                std_error,
            }],
            gradients: None,
        };
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            experiment: ExperimentKind::Shape,
            config_hash: "cfg".to_string(),
            compat_hash: compat.to_string(),
            seeds: family.seeds.clone(),
            artifacts: vec![],
            created_unix_ms: 0,
            wall_time_ms: 0,
        };
        let report = Report {
            format_version: FORMAT_VERSION,
            config_hash: "cfg".to_string(),
            compat_hash: compat.to_string(),
            payload: ReportPayload::Shape { family },
        };
        (manifest, report)
    }

    #[test]
    fn single_run_summary_echoes_the_run() {
        let run = shape_report(vec![0.1, 0.3], "aa");
        let summary = merge_reports(&[run.clone()]).unwrap();
        assert_eq!(summary.rows.len(), 1);
        let row = &summary.rows[0];
        if let ReportPayload::Shape { family } = &run.1.payload {
            assert_eq!(row.mean, family.shapes[0].mean);
            assert_eq!(row.std_error, family.shapes[0].std_error);
            assert_eq!(row.n, 2);
        }
    }

    #[test]
    fn pooling_disjoint_seeds_tightens_the_error() {
        let a = shape_report(vec![0.10, 0.30], "aa");
        let b = shape_report(vec![0.12, 0.28], "aa");
        let single = merge_reports(&[a.clone()]).unwrap();
        let pooled = merge_reports(&[a, b]).unwrap();
        assert_eq!(pooled.rows[0].n, 4);
        assert!(pooled.rows[0].std_error < single.rows[0].std_error);
    }

    #[test]
    fn mixed_hashes_are_rejected_with_details() {
        let a = shape_report(vec![0.1], "aa");
        let b = shape_report(vec![0.2], "bb");
        match merge_reports(&[a, b]) {
            Err(ReportError::Incompatible { details }) => {
                assert!(details.contains("aa") && details.contains("bb"));
            }
            other => panic!("expected incompatibility, got {other:?}"),
        }
    }

    #[test]
    fn csv_output_is_deterministic() {
        let a = shape_report(vec![0.10, 0.30], "aa");
        let s1 = summary_csv(&merge_reports(&[a.clone()]).unwrap());
        let s2 = summary_csv(&merge_reports(&[a]).unwrap());
        assert_eq!(s1, s2);
        assert!(s1.starts_with("experiment,label,horizon,n,mean,std_error\n"));
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path().join("run-1");
        std::fs::create_dir_all(&run_dir).unwrap();
        let (manifest, report) = shape_report(vec![0.5, 0.7], "cc");
        write_json(&run_dir.join("manifest.json"), &manifest).unwrap();
        write_json(&run_dir.join("report.json"), &report).unwrap();
        let runs = load_runs(dir.path()).unwrap();
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].0.compat_hash, "cc");
        let summary = merge_reports(&runs).unwrap();
        assert_eq!(summary.rows[0].n, 2);
        assert!(load_runs(&dir.path().join("missing")).is_err());
    }
}
