//! Run configuration: one TOML file names the environment law, kinetic
//! energy, grid, replication, and experiment parameters. Validation happens
//! before any compute and names the offending field; two hashes of the
//! canonical form tie every artifact back to its configuration.

use crate::asymptotics::Replication;
use crate::environment::{EnvError, EnvironmentSpec};
use crate::kinetics::KineticEnergy;
use crate::solver::GridSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config field {field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    EnvSample,
    Solve,
    Shape,
    Grad,
    Panel,
    Homog,
    Audit,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::EnvSample => "env-sample",
            ExperimentKind::Solve => "solve",
            ExperimentKind::Shape => "shape",
            ExperimentKind::Grad => "grad",
            ExperimentKind::Panel => "panel",
            ExperimentKind::Homog => "homog",
            ExperimentKind::Audit => "audit",
        }
    }
}

/// Grid section; the spatial half extent defaults to the full reachability
/// cone steps * velocity_window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dimension: usize,
    pub dt: f64,
    pub dx: f64,
    pub steps: usize,
    pub velocity_window: usize,
    #[serde(default)]
    pub half_extent_nodes: Option<usize>,
}

impl GridConfig {
    pub fn to_spec(&self) -> GridSpec {
        GridSpec {
            dimension: self.dimension,
            dt: self.dt,
            dx: self.dx,
            steps: self.steps,
            velocity_window: self.velocity_window,
            half_extent_nodes: self
                .half_extent_nodes
                .unwrap_or(self.steps * self.velocity_window),
        }
    }
}

/// Experiment parameters; which fields matter depends on the experiment
/// kind, and validation enforces presence and commensurability per kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentParams {
    /// Frame velocities for shape, grad, panel (single entry), and audit.
    pub velocities: Vec<Vec<f64>>,
    pub alpha: f64,
    pub beta: f64,
    /// Weight lattice for the panel experiment.
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub with_gradients: bool,
    /// Final-slice target position for the solve experiment.
    pub target: Option<Vec<f64>>,
    pub macro_time: Option<f64>,
    pub macro_position: Option<Vec<f64>>,
    pub epsilons: Vec<f64>,
    /// Checkpoint slices for the audit experiment.
    pub checkpoints: Vec<usize>,
    pub delta0: Option<f64>,
    pub sub_density: usize,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        ExperimentParams {
            velocities: Vec::new(),
            alpha: 1.0,
            beta: 1.0,
            alphas: Vec::new(),
            betas: Vec::new(),
            with_gradients: false,
            target: None,
            macro_time: None,
            macro_position: None,
            epsilons: Vec::new(),
            checkpoints: Vec::new(),
            delta0: None,
            sub_density: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// May be omitted in the file when the subcommand names the experiment.
    #[serde(default)]
    pub experiment: Option<ExperimentKind>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub environment: EnvironmentSpec,
    pub kinetics: KineticEnergy,
    pub grid: GridConfig,
    pub replication: Replication,
    #[serde(default)]
    pub params: ExperimentParams,
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(toml::from_str(&text)?)
}

fn near_integer(x: f64) -> bool {
    (x - x.round()).abs() <= 1e-9 * x.abs().max(1.0)
}

impl RunConfig {
    /// Full validation for the given experiment kind. Errors name the
    /// offending field in section.field form.
    pub fn validate(&self, kind: ExperimentKind) -> Result<(), ConfigError> {
        self.environment.validate().map_err(|e| match e {
            EnvError::InvalidSpec { field, message } => {
                invalid(&format!("environment.{field}"), message)
            }
            other => invalid("environment", other.to_string()),
        })?;
        self.kinetics
            .validate()
            .map_err(|e| invalid("kinetics", e.to_string()))?;
        let grid = self.grid.to_spec();
        grid.validate().map_err(|e| invalid("grid", e.to_string()))?;
        if self.environment.dimension != grid.dimension {
            return Err(invalid(
                "grid.dimension",
                format!(
                    "grid dimension {} does not match environment dimension {}",
                    grid.dimension, self.environment.dimension
                ),
            ));
        }
        if self.replication.replicates == 0 {
            return Err(invalid("replication.replicates", "must be at least 1"));
        }
        let p = &self.params;
        if !(p.alpha > 0.0) || !p.alpha.is_finite() {
            return Err(invalid("params.alpha", "must be finite and positive"));
        }
        if !(p.beta >= 0.0) || !p.beta.is_finite() {
            return Err(invalid("params.beta", "must be finite and nonnegative"));
        }
        let check_velocity = |i: usize, v: &Vec<f64>| -> Result<(), ConfigError> {
            let field = format!("params.velocities[{i}]");
            if v.len() != grid.dimension {
                return Err(invalid(&field, "dimension does not match the grid"));
            }
            if v.iter().any(|w| !w.is_finite()) {
                return Err(invalid(&field, "must be finite"));
            }
            for w in v {
                if !near_integer(w * grid.dt / grid.dx) {
                    return Err(invalid(
                        &field,
                        format!(
                            "velocity component {w} is not commensurate: v*dt/dx = {} \
                             must be an integer so targets sit on the node lattice",
                            w * grid.dt / grid.dx
                        ),
                    ));
                }
            }
            Ok(())
        };
        match kind {
            ExperimentKind::EnvSample => {}
            ExperimentKind::Solve => {
                let target = p
                    .target
                    .as_ref()
                    .ok_or_else(|| invalid("params.target", "required for solve"))?;
                if target.len() != grid.dimension {
                    return Err(invalid("params.target", "dimension does not match the grid"));
                }
                for (a, x) in target.iter().enumerate() {
                    let rel = x / grid.dx;
                    if !near_integer(rel) {
                        return Err(invalid(
                            "params.target",
                            format!("coordinate {a} is off the node lattice"),
                        ));
                    }
                    if rel.round().abs() > grid.half_extent_nodes as f64 {
                        return Err(invalid(
                            "params.target",
                            format!("coordinate {a} lies outside the grid extent"),
                        ));
                    }
                }
            }
            ExperimentKind::Shape | ExperimentKind::Grad => {
                if p.velocities.is_empty() {
                    return Err(invalid("params.velocities", "required for shape and grad"));
                }
                for (i, v) in p.velocities.iter().enumerate() {
                    check_velocity(i, v)?;
                }
            }
            ExperimentKind::Panel => {
                if p.velocities.len() != 1 {
                    return Err(invalid(
                        "params.velocities",
                        "panel takes exactly one frame velocity",
                    ));
                }
                check_velocity(0, &p.velocities[0])?;
                if p.alphas.is_empty() || p.betas.is_empty() {
                    return Err(invalid("params.alphas", "panel needs alphas and betas"));
                }
                if p.alphas.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
                    return Err(invalid("params.alphas", "must be finite and positive"));
                }
                if p.betas.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
                    return Err(invalid("params.betas", "must be finite and nonnegative"));
                }
            }
            ExperimentKind::Homog => {
                let t = p
                    .macro_time
                    .ok_or_else(|| invalid("params.macro_time", "required for homog"))?;
                if !(t > 0.0) || !t.is_finite() {
                    return Err(invalid("params.macro_time", "must be finite and positive"));
                }
                let x = p
                    .macro_position
                    .as_ref()
                    .ok_or_else(|| invalid("params.macro_position", "required for homog"))?;
                if x.len() != grid.dimension || x.iter().any(|c| !c.is_finite()) {
                    return Err(invalid(
                        "params.macro_position",
                        "must be finite and match the grid dimension",
                    ));
                }
                if p.epsilons.is_empty() {
                    return Err(invalid("params.epsilons", "required for homog"));
                }
                for (i, eps) in p.epsilons.iter().enumerate() {
                    let field = format!("params.epsilons[{i}]");
                    if !(*eps > 0.0) || !eps.is_finite() {
                        return Err(invalid(&field, "must be finite and positive"));
                    }
                    let slices = t / (eps * grid.dt);
                    if !near_integer(slices) {
                        return Err(invalid(
                            &field,
                            format!("macro_time / (epsilon * dt) = {slices} is not a slice count"),
                        ));
                    }
                    if slices.round() < 1.0 || slices.round() > grid.steps as f64 {
                        return Err(invalid(
                            &field,
                            format!("rescaled horizon needs slice {slices} beyond the grid"),
                        ));
                    }
                    for (a, c) in x.iter().enumerate() {
                        let rel = c / (eps * grid.dx);
                        if !near_integer(rel) {
                            return Err(invalid(
                                &field,
                                format!("macro coordinate {a} rescales off the node lattice"),
                            ));
                        }
                        if rel.round().abs() > grid.half_extent_nodes as f64 {
                            return Err(invalid(
                                &field,
                                format!("macro coordinate {a} rescales outside the grid extent"),
                            ));
                        }
                    }
                }
            }
            ExperimentKind::Audit => {
                if p.velocities.len() > 1 {
                    return Err(invalid(
                        "params.velocities",
                        "audit takes at most one frame velocity",
                    ));
                }
                if let Some(v) = p.velocities.first() {
                    check_velocity(0, v)?;
                }
                if p.checkpoints.is_empty()
                    || p.checkpoints.iter().any(|k| *k < 1 || *k > grid.steps)
                {
                    return Err(invalid(
                        "params.checkpoints",
                        "required for audit, each in 1..=steps",
                    ));
                }
                if let Some(d0) = p.delta0 {
                    if !(d0 > 0.0) || !d0.is_finite() {
                        return Err(invalid("params.delta0", "must be finite and positive"));
                    }
                }
            }
        }
        if p.sub_density == 0 {
            return Err(invalid("params.sub_density", "must be at least 1"));
        }
        Ok(())
    }

    fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hash of the complete configuration, embedded in every artifact.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash with replication and output location blanked: runs sharing it
    /// estimate the same quantities and may be pooled.
    pub fn compat_hash(&self) -> String {
        let mut neutral = self.clone();
        neutral.replication = Replication::new(1, 0);
        neutral.output_dir = None;
        let mut hasher = Sha256::new();
        hasher.update(neutral.canonical_json().as_bytes());
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
experiment = "shape"

[environment]
dimension = 1
intensity = 1.0
amplitude = { kind = "uniform", lo = -1.0, hi = 1.0 }
temporal_radius = { kind = "constant", value = 1.0 }
spatial_radius = { kind = "constant", value = 1.0 }
max_temporal_radius = 1.0
max_spatial_radius = 1.0

[kinetics]
kind = "quadratic"
scale = 1.0

[grid]
dimension = 1
dt = 0.1
dx = 0.05
steps = 100
velocity_window = 3

[replication]
replicates = 4
base_seed = 7

[params]
velocities = [[0.0], [0.5]]
"#;

    #[test]
    fn example_config_parses_and_validates() {
        let cfg: RunConfig = toml::from_str(EXAMPLE).unwrap();
        assert_eq!(cfg.experiment, Some(ExperimentKind::Shape));
        cfg.validate(ExperimentKind::Shape).unwrap();
        assert_eq!(cfg.grid.to_spec().half_extent_nodes, 300);
        let again: RunConfig = toml::from_str(EXAMPLE).unwrap();
        assert_eq!(cfg.config_hash(), again.config_hash());
    }

    #[test]
    fn compat_hash_ignores_seeds_but_config_hash_does_not() {
        let a: RunConfig = toml::from_str(EXAMPLE).unwrap();
        let mut b = a.clone();
        b.replication = Replication::new(9, 999);
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.compat_hash(), b.compat_hash());
        let mut c = a.clone();
        c.params.alpha = 1.25;
        assert_ne!(a.compat_hash(), c.compat_hash());
    }

    #[test]
    fn invalid_fields_are_named() {
        let mut cfg: RunConfig = toml::from_str(EXAMPLE).unwrap();
        cfg.environment.intensity = -1.0;
        match cfg.validate(ExperimentKind::Shape) {
            Err(ConfigError::Invalid { field, .. }) => {
                assert_eq!(field, "environment.intensity")
            }
            other => panic!("expected named field error, got {other:?}"),
        }

        let mut cfg: RunConfig = toml::from_str(EXAMPLE).unwrap();
        cfg.params.velocities = vec![vec![0.3]];
        match cfg.validate(ExperimentKind::Shape) {
            Err(ConfigError::Invalid { field, message }) => {
                assert_eq!(field, "params.velocities[0]");
                assert!(message.contains("commensurate"));
            }
            other => panic!("expected commensurability error, got {other:?}"),
        }

        let cfg: RunConfig = toml::from_str(EXAMPLE).unwrap();
        match cfg.validate(ExperimentKind::Homog) {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "params.macro_time"),
            other => panic!("expected missing macro_time, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{EXAMPLE}\nnot_a_field = 3\n");
        assert!(toml::from_str::<RunConfig>(&text).is_err());
    }

    #[test]
    fn misaligned_homog_epsilons_are_rejected() {
        let mut cfg: RunConfig = toml::from_str(EXAMPLE).unwrap();
        cfg.params.macro_time = Some(1.0);
        cfg.params.macro_position = Some(vec![0.5]);
        cfg.params.epsilons = vec![1.0, 0.3];
        match cfg.validate(ExperimentKind::Homog) {
            Err(ConfigError::Invalid { field, .. }) => {
                assert_eq!(field, "params.epsilons[1]")
            }
            other => panic!("expected epsilon alignment error, got {other:?}"),
        }
    }
}
