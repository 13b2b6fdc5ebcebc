//! Large-horizon experiments: shape-function estimates over frame families,
//! gradient estimates along minimizers, weight panels, homogenization
//! curves, and second-order audits. Replicates share one environment per
//! seed across every frame (common random numbers), and all aggregation
//! follows the fixed seed order, so reruns reproduce results bit for bit.

use crate::environment::{sample_environment, EnvironmentSpec, PoissonCloud, Potential, Window};
use crate::kinetics::{discrete_legendre, KineticEnergy, KineticsError};
use crate::rng::{stream_rng, STREAM_REPLICATE};
use crate::solver::{
    build_field_table, mid_position, mid_time, solve_with_table, step_velocity, Frame, GridPath,
    GridSpec, SolverError,
};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Replicate schedule: how many independent environments and the seed that
/// derives their per-replicate seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Replication {
    pub replicates: usize,
    pub base_seed: u64,
}

impl Replication {
    pub fn new(replicates: usize, base_seed: u64) -> Replication {
        Replication { replicates, base_seed }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.replicates)
            .map(|i| stream_rng(self.base_seed, STREAM_REPLICATE, i as u64).next_u64())
            .collect()
    }

    fn validate(&self) -> Result<(), SolverError> {
        if self.replicates == 0 {
            return Err(SolverError::BadExperiment(
                "replicates must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Normalized loop action for one frame: per-replicate values of B/T plus
/// their mean and standard error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeEstimate {
    pub frame: Frame,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
}

/// Gradient of the normalized loop action for one frame, estimated along
/// the extracted minimizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub frame: Frame,
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
}

/// Shape and optional gradient estimates for a frame family under common
/// random numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyEstimate {
    pub horizon: f64,
    pub seeds: Vec<u64>,
    pub shapes: Vec<ShapeEstimate>,
    pub gradients: Option<Vec<GradientEstimate>>,
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Sampling window large enough that every field, gradient, and envelope
/// query of a solve in any of the frames stays in the exactness region.
/// extra widens the shear margin, which the second-order audit needs for
/// its unit-ball perturbations.
pub(crate) fn family_window(
    spec: &EnvironmentSpec,
    grid: &GridSpec,
    frames: &[Frame],
    extra: f64,
) -> Window {
    let d = grid.dimension;
    let reach = grid.half_extent_nodes as f64 * grid.dx;
    let mut lo = Vec::with_capacity(d);
    let mut hi = Vec::with_capacity(d);
    for a in 0..d {
        let vmax = frames.iter().map(|f| f.v[a].abs()).fold(0.0, f64::max);
        let half = reach + spec.max_temporal_radius * (vmax + extra) + 1e-6;
        lo.push(-half);
        hi.push(half);
    }
    Window::boxed(0.0, grid.horizon(), lo, hi)
}

fn check_family(
    spec: &EnvironmentSpec,
    kin: &KineticEnergy,
    grid: &GridSpec,
    frames: &[Frame],
    repl: &Replication,
) -> Result<(), SolverError> {
    spec.validate()?;
    kin.validate()?;
    grid.validate()?;
    repl.validate()?;
    if spec.dimension != grid.dimension {
        return Err(SolverError::BadExperiment(format!(
            "environment dimension {} does not match grid dimension {}",
            spec.dimension, grid.dimension
        )));
    }
    if frames.is_empty() {
        return Err(SolverError::BadExperiment("frame family is empty".to_string()));
    }
    for frame in frames {
        frame.validate(grid.dimension)?;
    }
    Ok(())
}

/// Envelope-form gradient of the loop objective in the frame velocity,
/// evaluated along a fixed path: (1/T) sum dt (alpha grad L(u+v) + beta
/// Theta_v at the step midpoint).
fn path_gradient(
    pot: &Potential,
    kin: &KineticEnergy,
    grid: &GridSpec,
    frame: &Frame,
    path: &GridPath,
) -> Result<Vec<f64>, SolverError> {
    let d = grid.dimension;
    let mut acc = vec![0.0; d];
    let mut offset = vec![0i64; d];
    let mut sum = vec![0i64; d];
    let mut vel = vec![0.0; d];
    let mut mid = vec![0.0; d];
    for (i, pair) in path.nodes.windows(2).enumerate() {
        let k = path.start_slice + i;
        for a in 0..d {
            offset[a] = pair[1][a] - pair[0][a];
            sum[a] = pair[1][a] + pair[0][a];
        }
        step_velocity(grid, frame, &offset, &mut vel);
        mid_position(grid.dx, &sum, &mut mid);
        let grad_l = kin.grad(&vel);
        let theta = pot.eval_theta_sheared(&frame.v, mid_time(grid.dt, k), &mid)?;
        for a in 0..d {
            acc[a] += grid.dt * (frame.alpha * grad_l[a] + frame.beta * theta[a]);
        }
    }
    let t = (path.nodes.len() - 1) as f64 * grid.dt;
    for a in &mut acc {
        *a /= t;
    }
    Ok(acc)
}

/// Estimates the normalized loop action for every frame over shared
/// environments, one per replicate. With gradients enabled, the minimizer
/// of each (seed, frame) solve is extracted and the envelope gradient
/// accumulated along it.
pub fn estimate_family(
    spec: &EnvironmentSpec,
    kin: &KineticEnergy,
    grid: &GridSpec,
    frames: &[Frame],
    repl: &Replication,
    with_gradients: bool,
) -> Result<FamilyEstimate, SolverError> {
    check_family(spec, kin, grid, frames, repl)?;
    let window = family_window(spec, grid, frames, 0.0);
    let seeds = repl.seeds();
    let origin = vec![0.0; grid.dimension];

    type SeedRow = (Vec<f64>, Vec<Vec<f64>>);
    let rows: Result<Vec<SeedRow>, SolverError> = seeds
        .par_iter()
        .map(|&seed| {
            (|| -> Result<SeedRow, SolverError> {
                let pot = Potential::Cloud(sample_environment(spec, &window, seed)?);
                let mut values = Vec::with_capacity(frames.len());
                let mut grads = Vec::new();
                for frame in frames {
                    let table = build_field_table(&pot, grid, frame)?;
                    let stack = solve_with_table(&pot, kin, grid, frame, &table)?;
                    values.push(stack.point_to_point_action(&origin)? / grid.horizon());
                    if with_gradients {
                        let path = stack.extract_minimizer(&origin)?;
                        grads.push(path_gradient(&pot, kin, grid, frame, &path)?);
                    }
                }
                Ok((values, grads))
            })()
            .map_err(SolverError::seeded(seed))
        })
        .collect();
    let rows = rows?;

    let mut shapes = Vec::with_capacity(frames.len());
    let mut gradients = if with_gradients { Some(Vec::new()) } else { None };
    for (fi, frame) in frames.iter().enumerate() {
        let per_seed: Vec<f64> = rows.iter().map(|r| r.0[fi]).collect();
        let (mean, std_error) = mean_and_stderr(&per_seed);
        shapes.push(ShapeEstimate { frame: frame.clone(), per_seed, mean, std_error });
        if let Some(gs) = gradients.as_mut() {
            let per_seed: Vec<Vec<f64>> = rows.iter().map(|r| r.1[fi].clone()).collect();
            let d = grid.dimension;
            let mut mean = vec![0.0; d];
            let mut std_error = vec![0.0; d];
            for a in 0..d {
                let axis: Vec<f64> = per_seed.iter().map(|g| g[a]).collect();
                let (m, s) = mean_and_stderr(&axis);
                mean[a] = m;
                std_error[a] = s;
            }
            gs.push(GradientEstimate { frame: frame.clone(), per_seed, mean, std_error });
        }
    }
    Ok(FamilyEstimate {
        horizon: grid.horizon(),
        seeds,
        shapes,
        gradients,
    })
}

/// Single-frame shape estimate.
pub fn estimate_shape(
    spec: &EnvironmentSpec,
    kin: &KineticEnergy,
    grid: &GridSpec,
    frame: &Frame,
    repl: &Replication,
) -> Result<ShapeEstimate, SolverError> {
    let family = estimate_family(spec, kin, grid, std::slice::from_ref(frame), repl, false)?;
    Ok(family.shapes.into_iter().next().expect("one frame in, one estimate out"))
}

/// Single-frame gradient estimate.
pub fn estimate_gradient(
    spec: &EnvironmentSpec,
    kin: &KineticEnergy,
    grid: &GridSpec,
    frame: &Frame,
    repl: &Replication,
) -> Result<GradientEstimate, SolverError> {
    let family = estimate_family(spec, kin, grid, std::slice::from_ref(frame), repl, true)?;
    Ok(family
        .gradients
        .expect("gradients requested")
        .into_iter()
        .next()
        .expect("one frame in, one estimate out"))
}

/// One cell of a kinetic/potential weight panel. kinetic_part and
/// field_part are the unweighted integrals along that cell's minimizer, so
/// value ~ alpha * kinetic_part + beta * field_part up to rounding and the
/// cell value is concave in (alpha, beta) as a minimum of linear forms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelCell {
    pub alpha: f64,
    pub beta: f64,
    pub per_seed: Vec<f64>,
    pub per_seed_kinetic: Vec<f64>,
    pub per_seed_field: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelEstimate {
    pub horizon: f64,
    pub v: Vec<f64>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Row-major over (alpha, beta).
    pub cells: Vec<PanelCell>,
}

impl PanelEstimate {
    pub fn cell(&self, ai: usize, bi: usize) -> &PanelCell {
        &self.cells[ai * self.betas.len() + bi]
    }
}

/// Loop values over an (alpha, beta) lattice at a fixed frame velocity.
/// The field table depends only on the velocity, so each replicate builds
/// one table and reuses it for every cell.
pub fn panel_alpha_beta(
    spec: &EnvironmentSpec,
    kin: &KineticEnergy,
    grid: &GridSpec,
    v: &[f64],
    alphas: &[f64],
    betas: &[f64],
    repl: &Replication,
) -> Result<PanelEstimate, SolverError> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(SolverError::BadExperiment("weight lattice is empty".to_string()));
    }
    let frames: Vec<Frame> = alphas
        .iter()
        .flat_map(|&alpha| {
            betas.iter().map(move |&beta| Frame { v: v.to_vec(), alpha, beta })
        })
        .collect();
    check_family(spec, kin, grid, &frames, repl)?;
    let window = family_window(spec, grid, &frames[..1], 0.0);
    let seeds = repl.seeds();
    let origin = vec![0.0; grid.dimension];
    let d = grid.dimension;

    type SeedRow = Vec<(f64, f64, f64)>;
    let rows: Result<Vec<SeedRow>, SolverError> = seeds
        .par_iter()
        .map(|&seed| {
            (|| -> Result<SeedRow, SolverError> {
            let pot = Potential::Cloud(sample_environment(spec, &window, seed)?);
            let table = build_field_table(&pot, grid, &frames[0])?;
            let mut row = Vec::with_capacity(frames.len());
            for frame in &frames {
                let stack = solve_with_table(&pot, kin, grid, frame, &table)?;
                let value = stack.point_to_point_action(&origin)?;
                let path = stack.extract_minimizer(&origin)?;
                let mut kinetic = 0.0;
                let mut field = 0.0;
                let mut offset = vec![0i64; d];
                let mut sum = vec![0i64; d];
                let mut vel = vec![0.0; d];
                let mut mid = vec![0.0; d];
                for (i, pair) in path.nodes.windows(2).enumerate() {
                    for a in 0..d {
                        offset[a] = pair[1][a] - pair[0][a];
                        sum[a] = pair[1][a] + pair[0][a];
                    }
                    step_velocity(grid, frame, &offset, &mut vel);
                    mid_position(grid.dx, &sum, &mut mid);
                    kinetic += grid.dt * kin.eval(&vel);
                    field += grid.dt
                        * pot.eval_f_sheared(&frame.v, mid_time(grid.dt, i), &mid)?;
                }
                row.push((value, kinetic, field));
            }
            Ok(row)
            })()
            .map_err(SolverError::seeded(seed))
        })
        .collect();
    let rows = rows?;

    let cells = frames
        .iter()
        .enumerate()
        .map(|(fi, frame)| {
            let per_seed: Vec<f64> = rows.iter().map(|r| r[fi].0).collect();
            let per_seed_kinetic: Vec<f64> = rows.iter().map(|r| r[fi].1).collect();
            let per_seed_field: Vec<f64> = rows.iter().map(|r| r[fi].2).collect();
            let (mean, std_error) = mean_and_stderr(&per_seed);
            PanelCell {
                alpha: frame.alpha,
                beta: frame.beta,
                per_seed,
                per_seed_kinetic,
                per_seed_field,
                mean,
                std_error,
            }
        })
        .collect();
    Ok(PanelEstimate {
        horizon: grid.horizon(),
        v: v.to_vec(),
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        seeds,
        cells,
    })
}

/// One desk-scale point of the homogenization curve: the scaled action
/// eps * A(t/eps, x/eps) read from the solved stack at the matching slice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HomogenizationPoint {
    pub epsilon: f64,
    pub slice: usize,
    pub node: Vec<i64>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HomogenizationCurve {
    pub macro_time: f64,
    pub macro_position: Vec<f64>,
    pub seeds: Vec<u64>,
    pub points: Vec<HomogenizationPoint>,
}

/// Scaled point-to-point actions along the ray through (macro_time,
/// macro_position) for each epsilon. All epsilons read one rest-frame solve
/// per replicate, at the slice where the rescaled horizon lands.
pub fn homogenization_curve(
    spec: &EnvironmentSpec,
    kin: &KineticEnergy,
    grid: &GridSpec,
    macro_time: f64,
    macro_position: &[f64],
    epsilons: &[f64],
    repl: &Replication,
) -> Result<HomogenizationCurve, SolverError> {
    let frame = Frame::rest(grid.dimension);
    check_family(spec, kin, grid, std::slice::from_ref(&frame), repl)?;
    if macro_position.len() != grid.dimension {
        return Err(SolverError::BadExperiment(
            "macro position dimension does not match the grid".to_string(),
        ));
    }
    if epsilons.is_empty() || epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(SolverError::BadExperiment("epsilons must be positive".to_string()));
    }
    let mut targets = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let raw_slice = macro_time / (eps * grid.dt);
        let slice = raw_slice.round();
        if (raw_slice - slice).abs() > 1e-9 * raw_slice.abs().max(1.0)
            || slice < 1.0
            || slice > grid.steps as f64
        {
            return Err(SolverError::BadExperiment(format!(
                "epsilon {eps} puts the horizon at non-slice {raw_slice}"
            )));
        }
        let node = grid.nearest_node(
            &macro_position.iter().map(|x| x / eps).collect::<Vec<f64>>(),
        )?;
        targets.push((eps, slice as usize, node));
    }

    let window = family_window(spec, grid, std::slice::from_ref(&frame), 0.0);
    let seeds = repl.seeds();
    let rows: Result<Vec<Vec<f64>>, SolverError> = seeds
        .par_iter()
        .map(|&seed| {
            (|| -> Result<Vec<f64>, SolverError> {
                let pot = Potential::Cloud(sample_environment(spec, &window, seed)?);
                let table = build_field_table(&pot, grid, &frame)?;
                let stack = solve_with_table(&pot, kin, grid, &frame, &table)?;
                targets
                    .iter()
                    .map(|(eps, slice, node)| {
                        let value = stack.value_at(*slice, node)?;
                        if !value.is_finite() {
                            return Err(SolverError::Unreachable {
                                slice: *slice,
                                node: node.clone(),
                            });
                        }
                        Ok(eps * value)
                    })
                    .collect()
            })()
            .map_err(SolverError::seeded(seed))
        })
        .collect();
    let rows = rows?;

    let points = targets
        .into_iter()
        .enumerate()
        .map(|(ti, (epsilon, slice, node))| {
            let per_seed: Vec<f64> = rows.iter().map(|r| r[ti]).collect();
            let (mean, std_error) = mean_and_stderr(&per_seed);
            HomogenizationPoint { epsilon, slice, node, per_seed, mean, std_error }
        })
        .collect();
    Ok(HomogenizationCurve {
        macro_time,
        macro_position: macro_position.to_vec(),
        seeds,
        points,
    })
}

/// Discrete convex conjugate of an estimated shape function, with an
/// optional gradient-monotonicity probe: the smallest pairwise quotient
/// <grad(v1) - grad(v2), v1 - v2> / |v1 - v2|^2. A positive probe is the
/// numerical signature of strict convexity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectiveHamiltonian {
    pub p_grid: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub monotonicity: Option<f64>,
}

pub fn effective_hamiltonian(
    shapes: &[ShapeEstimate],
    gradients: Option<&[GradientEstimate]>,
    p_grid: &[Vec<f64>],
) -> Result<EffectiveHamiltonian, KineticsError> {
    let mut distinct: Vec<&[f64]> = Vec::new();
    for s in shapes {
        if !distinct.iter().any(|v| *v == s.frame.v.as_slice()) {
            distinct.push(&s.frame.v);
        }
    }
    if distinct.len() < 3 {
        return Err(KineticsError::Invalid(
            "shape grid must hold at least 3 distinct velocities".to_string(),
        ));
    }
    let samples: Vec<(Vec<f64>, f64)> = shapes
        .iter()
        .map(|s| (s.frame.v.clone(), s.mean))
        .collect();
    let values = p_grid
        .iter()
        .map(|p| discrete_legendre(&samples, p))
        .collect::<Result<Vec<f64>, KineticsError>>()?;
    let monotonicity = gradients.and_then(|gs| {
        let mut min_quot = f64::INFINITY;
        let mut any = false;
        for i in 0..gs.len() {
            for j in i + 1..gs.len() {
                let dv: Vec<f64> = gs[i]
                    .frame
                    .v
                    .iter()
                    .zip(&gs[j].frame.v)
                    .map(|(a, b)| a - b)
                    .collect();
                let norm2: f64 = dv.iter().map(|c| c * c).sum();
                if norm2 == 0.0 {
                    continue;
                }
                let dg: f64 = gs[i]
                    .mean
                    .iter()
                    .zip(&gs[j].mean)
                    .zip(&dv)
                    .map(|((a, b), c)| (a - b) * c)
                    .sum();
                min_quot = min_quot.min(dg / norm2);
                any = true;
            }
        }
        if any { Some(min_quot) } else { None }
    });
    Ok(EffectiveHamiltonian {
        p_grid: p_grid.to_vec(),
        values,
        monotonicity,
    })
}

/// Second-order bounds along loop minimizers at one horizon checkpoint,
/// averaged over that horizon: kinetic is the Hessian sup of L in a
/// delta0-ball around the path velocity, field is the bump-curvature
/// envelope weighted by the squared time lag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SecondOrderPoint {
    pub slice: usize,
    pub horizon: f64,
    pub per_seed_kinetic: Vec<f64>,
    pub per_seed_field: Vec<f64>,
    pub kinetic_mean: f64,
    pub kinetic_max: f64,
    pub field_mean: f64,
    pub field_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SecondOrderAudit {
    pub delta0: f64,
    pub frame: Frame,
    pub seeds: Vec<u64>,
    pub points: Vec<SecondOrderPoint>,
}

fn second_order_terms(
    cloud: &PoissonCloud,
    kin: &KineticEnergy,
    grid: &GridSpec,
    frame: &Frame,
    path: &GridPath,
    delta0: f64,
) -> (f64, f64) {
    let d = grid.dimension;
    let spec = cloud.spec();
    let reach: Vec<f64> = frame
        .v
        .iter()
        .map(|w| spec.max_spatial_radius + spec.max_temporal_radius * (w.abs() + 1.0))
        .collect();
    let mut kinetic = 0.0;
    let mut field = 0.0;
    let mut offset = vec![0i64; d];
    let mut sum = vec![0i64; d];
    let mut vel = vec![0.0; d];
    let mut mid = vec![0.0; d];
    for (i, pair) in path.nodes.windows(2).enumerate() {
        let k = path.start_slice + i;
        for a in 0..d {
            offset[a] = pair[1][a] - pair[0][a];
            sum[a] = pair[1][a] + pair[0][a];
        }
        step_velocity(grid, frame, &offset, &mut vel);
        mid_position(grid.dx, &sum, &mut mid);
        kinetic += grid.dt * kin.hess_sup_in_ball(&vel, delta0);
        let t = mid_time(grid.dt, k);
        let mut envelope = 0.0;
        cloud.for_each_point_near(t, &mid, spec.max_temporal_radius, &reach, |p| {
            let s = t - p.t;
            if s.abs() >= p.mark.r_t {
                return;
            }
            let touching = mid
                .iter()
                .zip(&p.x)
                .zip(&frame.v)
                .all(|((m, y), w)| (m - y).abs() <= p.mark.r_x + s.abs() * (w.abs() + 1.0));
            if touching {
                envelope += s * s * p.mark.hess_sup_norm();
            }
        });
        field += grid.dt * envelope;
    }
    let t = (path.nodes.len() - 1) as f64 * grid.dt;
    (kinetic / t, field / t)
}

/// Runs one loop solve per replicate and reads the minimizer at every
/// checkpoint slice, reusing the prefix property of the value table.
pub fn second_order_audit(
    spec: &EnvironmentSpec,
    kin: &KineticEnergy,
    grid: &GridSpec,
    frame: &Frame,
    delta0: f64,
    checkpoint_slices: &[usize],
    repl: &Replication,
) -> Result<SecondOrderAudit, SolverError> {
    check_family(spec, kin, grid, std::slice::from_ref(frame), repl)?;
    if !(delta0 > 0.0) {
        return Err(SolverError::BadExperiment("delta0 must be positive".to_string()));
    }
    if checkpoint_slices.is_empty()
        || checkpoint_slices.iter().any(|k| *k < 1 || *k > grid.steps)
    {
        return Err(SolverError::BadExperiment(
            "checkpoint slices must lie in 1..=steps".to_string(),
        ));
    }
    let window = family_window(spec, grid, std::slice::from_ref(frame), 1.0);
    let seeds = repl.seeds();
    let origin_node = vec![0i64; grid.dimension];
    let rows: Result<Vec<Vec<(f64, f64)>>, SolverError> = seeds
        .par_iter()
        .map(|&seed| {
            (|| -> Result<Vec<(f64, f64)>, SolverError> {
                let cloud = sample_environment(spec, &window, seed)?;
                let pot = Potential::Cloud(cloud.clone());
                let table = build_field_table(&pot, grid, frame)?;
                let stack = solve_with_table(&pot, kin, grid, frame, &table)?;
                checkpoint_slices
                    .iter()
                    .map(|&k| {
                        let path = stack.extract_minimizer_at(k, &origin_node)?;
                        Ok(second_order_terms(&cloud, kin, grid, frame, &path, delta0))
                    })
                    .collect()
            })()
            .map_err(SolverError::seeded(seed))
        })
        .collect();
    let rows = rows?;

    let points = checkpoint_slices
        .iter()
        .enumerate()
        .map(|(ci, &slice)| {
            let per_seed_kinetic: Vec<f64> = rows.iter().map(|r| r[ci].0).collect();
            let per_seed_field: Vec<f64> = rows.iter().map(|r| r[ci].1).collect();
            let (kinetic_mean, _) = mean_and_stderr(&per_seed_kinetic);
            let (field_mean, _) = mean_and_stderr(&per_seed_field);
            SecondOrderPoint {
                slice,
                horizon: slice as f64 * grid.dt,
                kinetic_max: per_seed_kinetic.iter().copied().fold(0.0, f64::max),
                field_max: per_seed_field.iter().copied().fold(0.0, f64::max),
                per_seed_kinetic,
                per_seed_field,
                kinetic_mean,
                field_mean,
            }
        })
        .collect();
    Ok(SecondOrderAudit {
        delta0,
        frame: frame.clone(),
        seeds,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_spec(dimension: usize) -> EnvironmentSpec {
        let mut spec = EnvironmentSpec::standard(dimension);
        spec.intensity = 0.0;
        spec
    }

    #[test]
    fn zero_intensity_shape_is_the_kinetic_cost() {
        let kin = KineticEnergy::quadratic(1.0);
        let grid = GridSpec::with_auto_extent(1, 0.1, 0.05, 20, 3);
        let frames = vec![Frame::rest(1), Frame::moving(vec![0.5]), Frame::moving(vec![1.0])];
        let fam = estimate_family(
            &empty_spec(1),
            &kin,
            &grid,
            &frames,
            &Replication::new(3, 7),
            true,
        )
        .unwrap();
        for (shape, want) in fam.shapes.iter().zip([0.0, 0.125, 0.5]) {
            assert!((shape.mean - want).abs() < 1e-12, "{} vs {want}", shape.mean);
            assert_eq!(shape.std_error, 0.0);
        }
        let grads = fam.gradients.unwrap();
        for (grad, want) in grads.iter().zip([0.0, 0.5, 1.0]) {
            assert!((grad.mean[0] - want).abs() < 1e-9, "{} vs {want}", grad.mean[0]);
        }
    }

    #[test]
    fn family_estimates_are_reproducible() {
        let spec = EnvironmentSpec::standard(1);
        let kin = KineticEnergy::quadratic(1.0);
        let grid = GridSpec::with_auto_extent(1, 0.2, 0.1, 10, 2);
        let frames = vec![Frame::rest(1), Frame::moving(vec![0.5])];
        let repl = Replication::new(4, 42);
        let a = estimate_family(&spec, &kin, &grid, &frames, &repl, false).unwrap();
        let b = estimate_family(&spec, &kin, &grid, &frames, &repl, false).unwrap();
        assert_eq!(a.seeds, b.seeds);
        for (sa, sb) in a.shapes.iter().zip(&b.shapes) {
            assert_eq!(sa.per_seed, sb.per_seed);
        }
        assert!(a.shapes[0].per_seed.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn panel_values_decompose_and_are_concave_per_seed() {
        let spec = EnvironmentSpec::standard(1);
        let kin = KineticEnergy::quadratic(1.0);
        let grid = GridSpec::with_auto_extent(1, 0.25, 0.1, 8, 6);
        let alphas = [0.8, 1.0, 1.2];
        let betas = [0.8, 1.0, 1.2];
        let panel = panel_alpha_beta(
            &spec,
            &kin,
            &grid,
            &[0.0],
            &alphas,
            &betas,
            &Replication::new(3, 11),
        )
        .unwrap();
        for cell in &panel.cells {
            for ((b, l), f) in cell
                .per_seed
                .iter()
                .zip(&cell.per_seed_kinetic)
                .zip(&cell.per_seed_field)
            {
                assert!((b - (cell.alpha * l + cell.beta * f)).abs() < 1e-9);
            }
        }
        // Midpoint concavity along the alpha axis, every seed and beta.
        for bi in 0..betas.len() {
            for s in 0..3 {
                let lo = panel.cell(0, bi).per_seed[s];
                let mid = panel.cell(1, bi).per_seed[s];
                let hi = panel.cell(2, bi).per_seed[s];
                assert!(mid >= 0.5 * (lo + hi) - 1e-9);
            }
        }
    }

    #[test]
    fn zero_intensity_homogenization_is_exact_on_aligned_rays() {
        let kin = KineticEnergy::quadratic(1.0);
        // dx/dt = 0.5 and x/t = 0.5, so the macro ray lies on the lattice.
        let grid = GridSpec {
            dimension: 1,
            dt: 0.1,
            dx: 0.05,
            steps: 40,
            velocity_window: 3,
            half_extent_nodes: 60,
        };
        let curve = homogenization_curve(
            &empty_spec(1),
            &kin,
            &grid,
            1.0,
            &[0.5],
            &[1.0, 0.5, 0.25],
            &Replication::new(2, 5),
        )
        .unwrap();
        for point in &curve.points {
            assert!((point.mean - 0.125).abs() < 1e-12, "eps {}", point.epsilon);
        }
        let bad = homogenization_curve(
            &empty_spec(1),
            &kin,
            &grid,
            1.0,
            &[0.5],
            &[0.3],
            &Replication::new(1, 5),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn conjugate_of_quadratic_estimates_is_quadratic() {
        let vs = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let shapes: Vec<ShapeEstimate> = vs
            .iter()
            .map(|&v| ShapeEstimate {
                frame: Frame::moving(vec![v]),
                per_seed: vec![0.5 * v * v],
                mean: 0.5 * v * v,
                std_error: 0.0,
            })
            .collect();
        let grads: Vec<GradientEstimate> = vs
            .iter()
            .map(|&v| GradientEstimate {
                frame: Frame::moving(vec![v]),
                per_seed: vec![vec![v]],
                mean: vec![v],
                std_error: vec![0.0],
            })
            .collect();
        let p_grid: Vec<Vec<f64>> = vs.iter().map(|&p| vec![p]).collect();
        let h = effective_hamiltonian(&shapes, Some(&grads), &p_grid).unwrap();
        // On sample points of a quadratic the discrete transform is exact.
        for (p, got) in vs.iter().zip(&h.values) {
            assert!((got - 0.5 * p * p).abs() < 1e-12);
        }
        assert!((h.monotonicity.unwrap() - 1.0).abs() < 1e-12);
        assert!(effective_hamiltonian(&shapes[..2], None, &p_grid).is_err());
    }

    #[test]
    fn second_order_audit_is_exact_without_bumps() {
        let kin = KineticEnergy::polynomial(vec![0.0, 0.0, 0.5, 0.0, 0.25]);
        let grid = GridSpec::with_auto_extent(1, 0.1, 0.1, 20, 2);
        let frame = Frame::moving(vec![0.5]);
        let audit = second_order_audit(
            &empty_spec(1),
            &kin,
            &grid,
            &frame,
            0.5,
            &[10, 20],
            &Replication::new(2, 3),
        )
        .unwrap();
        let want = kin.hess_sup_in_ball(&[0.5], 0.5);
        for point in &audit.points {
            for m in &point.per_seed_kinetic {
                assert!((m - want).abs() < 1e-12);
            }
            for n in &point.per_seed_field {
                assert_eq!(*n, 0.0);
            }
        }
    }

    #[test]
    fn quadratic_kinetic_bound_is_one_in_random_environments() {
        let spec = EnvironmentSpec::standard(1);
        let kin = KineticEnergy::quadratic(1.0);
        let grid = GridSpec::with_auto_extent(1, 0.2, 0.1, 10, 3);
        let audit = second_order_audit(
            &spec,
            &kin,
            &grid,
            &Frame::rest(1),
            0.5,
            &[5, 10],
            &Replication::new(3, 9),
        )
        .unwrap();
        for point in &audit.points {
            assert!((point.kinetic_mean - 1.0).abs() < 1e-12);
            assert!(point.field_mean >= 0.0);
        }
    }
}
