//! Command line front end: each experiment runs from a TOML configuration
//! and writes a manifest, a typed JSON report, and plot-ready CSV series
//! into its output directory; the report subcommand pools compatible runs.
//! Exit codes: 0 success, 2 configuration error, 3 numerical or I/O error.

use crate::asymptotics::{
    estimate_family, family_window, homogenization_curve, panel_alpha_beta, second_order_audit,
    FamilyEstimate,
};
use crate::config::{load_config, ConfigError, ExperimentKind, RunConfig};
use crate::diagnostics::m_growth_audit;
use crate::environment::{sample_environment, Potential};
use crate::kinetics::KineticEnergy;
use crate::report::{
    cell_f, cell_list, merge_reports, summary_csv, unix_ms, write_json, Csv, Manifest, Report,
    ReportError, ReportPayload, SeedValue, Summary,
};
use crate::solver::{solve, Frame, GridPath, SolverError};
use crate::FORMAT_VERSION;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{0}")]
    Run(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Report(ReportError::Incompatible { .. }) => 2,
            _ => 3,
        }
    }
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "actionlab",
    version,
    about = "Minimal-action experiments in Poisson random potentials"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Path to the TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config and the environment default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample one environment and export its bump points.
    EnvSample(RunArgs),
    /// Point-to-point minimal actions to a fixed target across replicates.
    Solve(RunArgs),
    /// Normalized loop actions over a family of frame velocities.
    Shape(RunArgs),
    /// Shape estimates with envelope gradients along minimizers.
    Grad(RunArgs),
    /// Loop actions over a kinetic/potential weight lattice.
    Panel(RunArgs),
    /// Scaled actions along a macroscopic ray for shrinking epsilon.
    Homog(RunArgs),
    /// Second-order and box-growth audits along loop minimizers.
    Audit(RunArgs),
    /// Pool compatible run directories into one summary.
    Report {
        /// Directory holding run subdirectories (or one run itself).
        #[arg(long)]
        dir: PathBuf,
        /// Where to write summary.json and summary.csv; defaults to dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::EnvSample(args) => run_experiment(ExperimentKind::EnvSample, args),
        Command::Solve(args) => run_experiment(ExperimentKind::Solve, args),
        Command::Shape(args) => run_experiment(ExperimentKind::Shape, args),
        Command::Grad(args) => run_experiment(ExperimentKind::Grad, args),
        Command::Panel(args) => run_experiment(ExperimentKind::Panel, args),
        Command::Homog(args) => run_experiment(ExperimentKind::Homog, args),
        Command::Audit(args) => run_experiment(ExperimentKind::Audit, args),
        Command::Report { dir, out } => run_report(&dir, out.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_out_dir(kind: ExperimentKind, flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.output_dir {
        return p.clone();
    }
    if let Some(root) = std::env::var_os("ACTIONLAB_OUT_ROOT") {
        return Path::new(&root).join(kind.name());
    }
    PathBuf::from("actionlab-runs").join(kind.name())
}

struct RunWriter {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl RunWriter {
    fn new(dir: PathBuf) -> Result<RunWriter, CliError> {
        std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(RunWriter { dir, artifacts: Vec::new() })
    }

    fn write(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).map_err(|source| CliError::Io { path, source })?;
        self.artifacts.push(name.to_string());
        Ok(())
    }
}

fn run_experiment(kind: ExperimentKind, args: RunArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(declared) = cfg.experiment {
        if declared != kind {
            return Err(ConfigError::Invalid {
                field: "experiment".to_string(),
                message: format!(
                    "config declares {} but the {} subcommand was invoked",
                    declared.name(),
                    kind.name()
                ),
            }
            .into());
        }
    }
    cfg.experiment = Some(kind);
    cfg.validate(kind)?;

    let out_dir = resolve_out_dir(kind, args.out.as_deref(), &cfg);
    let mut writer = RunWriter::new(out_dir)?;
    let started = unix_ms();
    let clock = Instant::now();

    let payload = compute(kind, &cfg, &mut writer)?;

    let report = Report {
        format_version: FORMAT_VERSION,
        config_hash: cfg.config_hash(),
        compat_hash: cfg.compat_hash(),
        payload,
    };
    write_json(&writer.dir.join("report.json"), &report)?;
    writer.artifacts.push("report.json".to_string());

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        experiment: kind,
        config_hash: report.config_hash.clone(),
        compat_hash: report.compat_hash.clone(),
        seeds: cfg.replication.seeds(),
        artifacts: writer.artifacts.clone(),
        created_unix_ms: started,
        wall_time_ms: clock.elapsed().as_millis() as u64,
    };
    write_json(&writer.dir.join("manifest.json"), &manifest)?;

    println!(
        "{}: wrote {} artifacts to {}",
        kind.name(),
        manifest.artifacts.len() + 1,
        writer.dir.display()
    );
    Ok(())
}

fn compute(
    kind: ExperimentKind,
    cfg: &RunConfig,
    writer: &mut RunWriter,
) -> Result<ReportPayload, CliError> {
    let grid = cfg.grid.to_spec();
    let spec = &cfg.environment;
    let kin = &cfg.kinetics;
    let repl = &cfg.replication;
    let p = &cfg.params;
    let d = grid.dimension;

    match kind {
        ExperimentKind::EnvSample => {
            let seed = repl.seeds()[0];
            let window = family_window(spec, &grid, &[Frame::rest(d)], 0.0);
            let cloud = sample_environment(spec, &window, seed).map_err(run_err)?;
            writer.write("environment.json", &cloud.to_json())?;
            let mut header = vec!["t".to_string()];
            header.extend((0..d).map(|a| format!("x{a}")));
            header.extend(["amplitude", "r_t", "r_x"].map(String::from));
            let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
            let mut csv = Csv::new(&header_refs);
            for point in cloud.points() {
                let mut row = vec![cell_f(point.t)];
                row.extend(point.x.iter().map(|c| cell_f(*c)));
                row.push(cell_f(point.mark.amplitude));
                row.push(cell_f(point.mark.r_t));
                row.push(cell_f(point.mark.r_x));
                csv.row(&row);
            }
            writer.write("points.csv", &csv.into_string())?;
            Ok(ReportPayload::EnvSample {
                seed,
                point_count: cloud.points().len(),
                content_hash: cloud.content_hash(),
            })
        }
        ExperimentKind::Solve => {
            let target = p.target.clone().expect("validated");
            let frame = Frame { v: vec![0.0; d], alpha: p.alpha, beta: p.beta };
            let window = family_window(spec, &grid, std::slice::from_ref(&frame), 0.0);
            let seeds = repl.seeds();
            let rows: Result<Vec<(f64, Option<GridPath>)>, SolverError> = seeds
                .par_iter()
                .enumerate()
                .map(|(i, &seed)| {
                    (|| -> Result<(f64, Option<GridPath>), SolverError> {
                        let pot =
                            Potential::Cloud(sample_environment(spec, &window, seed)?);
                        let stack = solve(&pot, kin, &grid, &frame)?;
                        let value = stack.point_to_point_action(&target)?;
                        let path = if i == 0 {
                            Some(stack.extract_minimizer(&target)?)
                        } else {
                            None
                        };
                        Ok((value, path))
                    })()
                    .map_err(SolverError::seeded(seed))
                })
                .collect();
            let rows = rows.map_err(run_err)?;

            let mut csv = Csv::new(&["seed", "action"]);
            let mut values = Vec::with_capacity(seeds.len());
            for (seed, (value, _)) in seeds.iter().zip(&rows) {
                csv.row(&[seed.to_string(), cell_f(*value)]);
                values.push(SeedValue { seed: *seed, value: *value });
            }
            writer.write("solve.csv", &csv.into_string())?;

            if let Some(path) = &rows[0].1 {
                let mut header = vec!["slice".to_string(), "t".to_string()];
                header.extend((0..d).map(|a| format!("x{a}")));
                let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
                let mut csv = Csv::new(&header_refs);
                for (i, node) in path.nodes.iter().enumerate() {
                    let k = path.start_slice + i;
                    let mut row = vec![k.to_string(), cell_f(k as f64 * grid.dt)];
                    row.extend(node.iter().map(|c| cell_f(*c as f64 * grid.dx)));
                    csv.row(&row);
                }
                writer.write("minimizer.csv", &csv.into_string())?;
            }
            Ok(ReportPayload::Solve {
                target,
                horizon: grid.horizon(),
                values,
            })
        }
        ExperimentKind::Shape | ExperimentKind::Grad => {
            let with_gradients = kind == ExperimentKind::Grad || p.with_gradients;
            let frames: Vec<Frame> = p
                .velocities
                .iter()
                .map(|v| Frame { v: v.clone(), alpha: p.alpha, beta: p.beta })
                .collect();
            let family =
                estimate_family(spec, kin, &grid, &frames, repl, with_gradients)
                    .map_err(run_err)?;
            write_family_csvs(writer, &family)?;
            Ok(match kind {
                ExperimentKind::Grad => ReportPayload::Grad { family },
                _ => ReportPayload::Shape { family },
            })
        }
        ExperimentKind::Panel => {
            let v = &p.velocities[0];
            let panel =
                panel_alpha_beta(spec, kin, &grid, v, &p.alphas, &p.betas, repl)
                    .map_err(run_err)?;
            let mut csv = Csv::new(&["alpha", "beta", "seed", "action", "kinetic_part", "field_part"]);
            for cell in &panel.cells {
                for (i, seed) in panel.seeds.iter().enumerate() {
                    csv.row(&[
                        cell_f(cell.alpha),
                        cell_f(cell.beta),
                        seed.to_string(),
                        cell_f(cell.per_seed[i]),
                        cell_f(cell.per_seed_kinetic[i]),
                        cell_f(cell.per_seed_field[i]),
                    ]);
                }
            }
            writer.write("panel.csv", &csv.into_string())?;
            let mut csv = Csv::new(&["alpha", "beta", "n", "mean", "std_error"]);
            for cell in &panel.cells {
                csv.row(&[
                    cell_f(cell.alpha),
                    cell_f(cell.beta),
                    cell.per_seed.len().to_string(),
                    cell_f(cell.mean),
                    cell_f(cell.std_error),
                ]);
            }
            writer.write("panel_summary.csv", &csv.into_string())?;
            Ok(ReportPayload::Panel { panel })
        }
        ExperimentKind::Homog => {
            let curve = homogenization_curve(
                spec,
                kin,
                &grid,
                p.macro_time.expect("validated"),
                p.macro_position.as_ref().expect("validated"),
                &p.epsilons,
                repl,
            )
            .map_err(run_err)?;
            let mut csv = Csv::new(&["epsilon", "slice", "seed", "scaled_action"]);
            for point in &curve.points {
                for (i, seed) in curve.seeds.iter().enumerate() {
                    csv.row(&[
                        cell_f(point.epsilon),
                        point.slice.to_string(),
                        seed.to_string(),
                        cell_f(point.per_seed[i]),
                    ]);
                }
            }
            writer.write("homog.csv", &csv.into_string())?;
            let mut csv = Csv::new(&["epsilon", "slice", "n", "mean", "std_error"]);
            for point in &curve.points {
                csv.row(&[
                    cell_f(point.epsilon),
                    point.slice.to_string(),
                    point.per_seed.len().to_string(),
                    cell_f(point.mean),
                    cell_f(point.std_error),
                ]);
            }
            writer.write("homog_summary.csv", &csv.into_string())?;
            Ok(ReportPayload::Homog { curve })
        }
        ExperimentKind::Audit => {
            let frame = match p.velocities.first() {
                Some(v) => Frame { v: v.clone(), alpha: p.alpha, beta: p.beta },
                None => Frame { v: vec![0.0; d], alpha: p.alpha, beta: p.beta },
            };
            let delta0 = p.delta0.unwrap_or_else(KineticEnergy::default_delta0);
            let second_order =
                second_order_audit(spec, kin, &grid, &frame, delta0, &p.checkpoints, repl)
                    .map_err(run_err)?;
            let growth = m_growth_audit(spec, kin, &grid, &frame, &p.checkpoints, repl)
                .map_err(run_err)?;

            let mut csv = Csv::new(&["slice", "horizon", "seed", "kinetic_bound", "field_bound"]);
            for point in &second_order.points {
                for (i, seed) in second_order.seeds.iter().enumerate() {
                    csv.row(&[
                        point.slice.to_string(),
                        cell_f(point.horizon),
                        seed.to_string(),
                        cell_f(point.per_seed_kinetic[i]),
                        cell_f(point.per_seed_field[i]),
                    ]);
                }
            }
            writer.write("second_order.csv", &csv.into_string())?;

            let mut csv = Csv::new(&["slice", "horizon", "seed", "box_ratio"]);
            for point in &growth.points {
                for (i, seed) in growth.seeds.iter().enumerate() {
                    csv.row(&[
                        point.slice.to_string(),
                        cell_f(point.horizon),
                        seed.to_string(),
                        cell_f(point.per_seed_ratio[i]),
                    ]);
                }
            }
            writer.write("m_growth.csv", &csv.into_string())?;

            let mut csv = Csv::new(&[
                "slice",
                "horizon",
                "kinetic_mean",
                "kinetic_max",
                "field_mean",
                "field_max",
                "box_ratio_mean",
                "box_ratio_max",
                "bounded",
            ]);
            for (so, mg) in second_order.points.iter().zip(&growth.points) {
                csv.row(&[
                    so.slice.to_string(),
                    cell_f(so.horizon),
                    cell_f(so.kinetic_mean),
                    cell_f(so.kinetic_max),
                    cell_f(so.field_mean),
                    cell_f(so.field_max),
                    cell_f(mg.mean_ratio),
                    cell_f(mg.max_ratio),
                    growth.bounded.to_string(),
                ]);
            }
            writer.write("audit_summary.csv", &csv.into_string())?;
            Ok(ReportPayload::Audit { second_order, growth })
        }
    }
}

fn write_family_csvs(writer: &mut RunWriter, family: &FamilyEstimate) -> Result<(), CliError> {
    let mut csv = Csv::new(&["v", "alpha", "beta", "seed", "action_per_time"]);
    for shape in &family.shapes {
        for (i, seed) in family.seeds.iter().enumerate() {
            csv.row(&[
                cell_list(&shape.frame.v),
                cell_f(shape.frame.alpha),
                cell_f(shape.frame.beta),
                seed.to_string(),
                cell_f(shape.per_seed[i]),
            ]);
        }
    }
    writer.write("shape.csv", &csv.into_string())?;

    let mut csv = Csv::new(&["v", "alpha", "beta", "n", "mean", "std_error"]);
    for shape in &family.shapes {
        csv.row(&[
            cell_list(&shape.frame.v),
            cell_f(shape.frame.alpha),
            cell_f(shape.frame.beta),
            shape.per_seed.len().to_string(),
            cell_f(shape.mean),
            cell_f(shape.std_error),
        ]);
    }
    writer.write("shape_summary.csv", &csv.into_string())?;

    if let Some(grads) = &family.gradients {
        let mut csv = Csv::new(&["v", "seed", "axis", "gradient"]);
        for grad in grads {
            for (i, seed) in family.seeds.iter().enumerate() {
                for (axis, g) in grad.per_seed[i].iter().enumerate() {
                    csv.row(&[
                        cell_list(&grad.frame.v),
                        seed.to_string(),
                        axis.to_string(),
                        cell_f(*g),
                    ]);
                }
            }
        }
        writer.write("gradient.csv", &csv.into_string())?;

        let mut csv = Csv::new(&["v", "axis", "n", "mean", "std_error"]);
        for grad in grads {
            for axis in 0..grad.mean.len() {
                csv.row(&[
                    cell_list(&grad.frame.v),
                    axis.to_string(),
                    grad.per_seed.len().to_string(),
                    cell_f(grad.mean[axis]),
                    cell_f(grad.std_error[axis]),
                ]);
            }
        }
        writer.write("gradient_summary.csv", &csv.into_string())?;
    }
    Ok(())
}

fn run_report(dir: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let runs = crate::report::load_runs(dir)?;
    let summary: Summary = merge_reports(&runs)?;
    let out_dir = out.unwrap_or(dir).to_path_buf();
    std::fs::create_dir_all(&out_dir).map_err(|source| CliError::Io {
        path: out_dir.clone(),
        source,
    })?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    let csv_path = out_dir.join("summary.csv");
    std::fs::write(&csv_path, summary_csv(&summary)).map_err(|source| CliError::Io {
        path: csv_path,
        source,
    })?;
    println!(
        "report: pooled {} runs into {} rows at {}",
        summary.runs,
        summary.rows.len(),
        out_dir.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_directory_precedence() {
        let cfg_text = r#"
[environment]
dimension = 1
intensity = 0.0
amplitude = { kind = "constant", value = 1.0 }
temporal_radius = { kind = "constant", value = 1.0 }
spatial_radius = { kind = "constant", value = 1.0 }

[kinetics]
kind = "quadratic"
scale = 1.0

[grid]
dimension = 1
dt = 0.1
dx = 0.05
steps = 10
velocity_window = 2

[replication]
replicates = 1
base_seed = 1
"#;
        let mut cfg: RunConfig = toml::from_str(cfg_text).unwrap();
        let flag = PathBuf::from("/tmp/flagged");
        assert_eq!(
            resolve_out_dir(ExperimentKind::Shape, Some(&flag), &cfg),
            flag
        );
        cfg.output_dir = Some(PathBuf::from("/tmp/from-config"));
        assert_eq!(
            resolve_out_dir(ExperimentKind::Shape, None, &cfg),
            PathBuf::from("/tmp/from-config")
        );
        cfg.output_dir = None;
        let fallback = resolve_out_dir(ExperimentKind::Shape, None, &cfg);
        assert!(fallback.ends_with("shape"));
    }

    #[test]
    fn error_codes_separate_config_from_numerics() {
        let config_err: CliError = ConfigError::Invalid {
            field: "grid".to_string(),
            message: "bad".to_string(),
        }
        .into();
        assert_eq!(config_err.exit_code(), 2);
        assert_eq!(CliError::Run("boom".to_string()).exit_code(), 3);
        let incompat: CliError = ReportError::Incompatible {
            details: "x".to_string(),
        }
        .into();
        assert_eq!(incompat.exit_code(), 2);
    }
}
