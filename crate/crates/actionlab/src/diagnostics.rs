//! Lattice diagnostics on solver outputs: unit-box discretization of paths,
//! sparse residue partitions, length and field lower-bound audits, box-count
//! growth along minimizers, and a finite-difference residual check of the
//! dynamic-programming value against its limiting Hamilton-Jacobi equation.

use crate::asymptotics::{family_window, mean_and_stderr, Replication};
use crate::environment::{sample_environment, EnvError, EnvironmentSpec, Potential};
use crate::kinetics::{KineticEnergy, KineticsError};
use crate::solver::{
    build_field_table, solve_with_table, ActionStack, Frame, GridPath, GridSpec, SolverError,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

#[derive(Debug, thiserror::Error)]
pub enum DiagError {
    #[error("invalid diagnostic input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Kinetics(#[from] KineticsError),
}

/// Coordinates within this relative distance of an integer are treated as
/// exactly on the box boundary. Lattice polylines only come this close to
/// an integer when a crossing is exact in real arithmetic.
const SNAP: f64 = 1e-9;

fn snapped_floor(y: f64) -> i64 {
    let r = y.round();
    if (y - r).abs() <= SNAP * y.abs().max(1.0) {
        r as i64
    } else {
        y.floor() as i64
    }
}

/// Set of half-open unit boxes k + [0,1)^{d+1} touched by an augmented
/// space-time polyline, with the final instant of the time domain excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    /// Sorted, duplicate-free lattice corners, time coordinate first.
    pub boxes: Vec<Vec<i64>>,
    pub m: usize,
    pub duration: f64,
}

impl Discretization {
    /// True when every box can reach every other through chains of boxes at
    /// sup-distance 1. Continuous paths always produce connected sets.
    pub fn is_connected(&self) -> bool {
        if self.boxes.len() <= 1 {
            return true;
        }
        let set: HashSet<&[i64]> = self.boxes.iter().map(|b| b.as_slice()).collect();
        let dim = self.boxes[0].len();
        let mut seen: HashSet<&[i64]> = HashSet::new();
        let mut queue: VecDeque<&[i64]> = VecDeque::new();
        seen.insert(&self.boxes[0]);
        queue.push_back(&self.boxes[0]);
        let mut probe = vec![0i64; dim];
        while let Some(cur) = queue.pop_front() {
            let mut delta = vec![-1i64; dim];
            loop {
                for a in 0..dim {
                    probe[a] = cur[a] + delta[a];
                }
                if let Some(next) = set.get(probe.as_slice()) {
                    if !seen.contains(*next) {
                        seen.insert(next);
                        queue.push_back(next);
                    }
                }
                let mut a = 0;
                loop {
                    if a == dim {
                        break;
                    }
                    delta[a] += 1;
                    if delta[a] <= 1 {
                        break;
                    }
                    delta[a] = -1;
                    a += 1;
                }
                if a == dim {
                    break;
                }
            }
        }
        seen.len() == self.boxes.len()
    }
}

/// Vertices (t, x + t * shear) of a lattice path in physical coordinates.
pub fn augmented_polyline(
    path: &GridPath,
    grid: &GridSpec,
    shear: &[f64],
) -> Result<Vec<Vec<f64>>, DiagError> {
    if path.nodes.is_empty() {
        return Err(DiagError::Invalid("path has no nodes".to_string()));
    }
    if shear.len() != grid.dimension
        || path.nodes.iter().any(|n| n.len() != grid.dimension)
    {
        return Err(DiagError::Invalid(
            "path, grid, and shear dimensions do not match".to_string(),
        ));
    }
    Ok(path
        .nodes
        .iter()
        .enumerate()
        .map(|(i, node)| {
            let t = (path.start_slice + i) as f64 * grid.dt;
            let mut v = Vec::with_capacity(grid.dimension + 1);
            v.push(t);
            for a in 0..grid.dimension {
                v.push(node[a] as f64 * grid.dx + t * shear[a]);
            }
            v
        })
        .collect())
}

/// Every unit box touched by the polyline over its half-open time domain.
/// Each segment contributes the boxes at its start, at every instant some
/// coordinate crosses an integer, and between consecutive crossings; the
/// crossing coordinate is evaluated exactly and the rest snapped, so corner
/// passages land in the corner box.
pub fn discretize_polyline(vertices: &[Vec<f64>]) -> Result<Discretization, DiagError> {
    if vertices.is_empty() {
        return Err(DiagError::Invalid("polyline has no vertices".to_string()));
    }
    let dim = vertices[0].len();
    if dim < 2 || vertices.iter().any(|v| v.len() != dim) {
        return Err(DiagError::Invalid("polyline vertices are malformed".to_string()));
    }
    if vertices
        .iter()
        .any(|v| v.iter().any(|c| !c.is_finite()))
    {
        return Err(DiagError::Invalid("polyline has non-finite coordinates".to_string()));
    }
    let mut boxes: BTreeSet<Vec<i64>> = BTreeSet::new();
    if vertices.len() == 1 {
        let v = &vertices[0];
        boxes.insert(v.iter().map(|c| snapped_floor(*c)).collect());
    }
    let mut emit = |p: &[f64], q: &[f64], s: f64| {
        let b: Vec<i64> = (0..dim)
            .map(|a| snapped_floor(p[a] + s * (q[a] - p[a])))
            .collect();
        boxes.insert(b);
    };
    for (i, pair) in vertices.windows(2).enumerate() {
        let (p, q) = (&pair[0], &pair[1]);
        let last_segment = i + 2 == vertices.len();
        let mut cuts: Vec<f64> = vec![0.0];
        for a in 0..dim {
            let r = q[a] - p[a];
            if r == 0.0 {
                continue;
            }
            let (lo, hi) = if r > 0.0 { (p[a], q[a]) } else { (q[a], p[a]) };
            let mut k = lo.ceil();
            while k <= hi {
                let s = (k - p[a]) / r;
                if s > 0.0 && s < 1.0 {
                    cuts.push(s);
                }
                k += 1.0;
            }
        }
        cuts.sort_by(|x, y| x.partial_cmp(y).expect("finite cuts"));
        cuts.dedup_by(|x, y| (*x - *y).abs() <= 1e-12);
        for (j, &s) in cuts.iter().enumerate() {
            emit(p, q, s);
            let next = if j + 1 < cuts.len() { cuts[j + 1] } else { 1.0 };
            emit(p, q, 0.5 * (s + next));
        }
        if !last_segment {
            emit(p, q, 1.0);
        }
    }
    let duration = vertices[vertices.len() - 1][0] - vertices[0][0];
    let boxes: Vec<Vec<i64>> = boxes.into_iter().collect();
    Ok(Discretization { m: boxes.len(), boxes, duration })
}

/// Discretization of a lattice path in the rest frame.
pub fn discretize_path(path: &GridPath, grid: &GridSpec) -> Result<Discretization, DiagError> {
    let shear = vec![0.0; grid.dimension];
    discretize_polyline(&augmented_polyline(path, grid, &shear)?)
}

/// Residue-class partition of a box set: classes of the lattice modulo
/// w = ceil(r) + 1 per coordinate. Boxes sharing a part differ by at least
/// w > r in sup-distance, and there are at most w^(d+1) parts.
pub fn partition_boxes(boxes: &[Vec<i64>], r: f64) -> Result<Vec<Vec<Vec<i64>>>, DiagError> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(DiagError::Invalid(format!("separation {r} must be positive")));
    }
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    let dim = boxes[0].len();
    if boxes.iter().any(|b| b.len() != dim) {
        return Err(DiagError::Invalid("boxes have mixed dimensions".to_string()));
    }
    let w = r.ceil() as i64 + 1;
    let mut parts: BTreeMap<Vec<i64>, BTreeSet<Vec<i64>>> = BTreeMap::new();
    for b in boxes {
        let residue: Vec<i64> = b.iter().map(|c| c.rem_euclid(w)).collect();
        parts.entry(residue).or_default().insert(b.clone());
    }
    Ok(parts
        .into_values()
        .map(|set| set.into_iter().collect())
        .collect())
}

/// Length and box count of one augmented path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathGeometry {
    /// Euclidean length of (t, path(t)), at least the duration.
    pub length: f64,
    pub m: usize,
    pub duration: f64,
}

pub fn path_geometry(
    path: &GridPath,
    grid: &GridSpec,
    shear: &[f64],
) -> Result<PathGeometry, DiagError> {
    let vertices = augmented_polyline(path, grid, shear)?;
    let disc = discretize_polyline(&vertices)?;
    let length = vertices
        .windows(2)
        .map(|pair| {
            pair[0]
                .iter()
                .zip(&pair[1])
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(PathGeometry { length, m: disc.m, duration: disc.duration })
}

/// Corpus fit of length >= slope * m - offset. The slope is the largest
/// value leaving every margin nonnegative at zero offset, so the smallest
/// margin is exactly zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthBoundAudit {
    pub slope: f64,
    pub offset: f64,
    pub margins: Vec<f64>,
    pub min_margin: f64,
}

pub fn length_bound_audit(corpus: &[PathGeometry]) -> Result<LengthBoundAudit, DiagError> {
    if corpus.is_empty() {
        return Err(DiagError::Invalid("length audit needs at least one path".to_string()));
    }
    let slope = corpus
        .iter()
        .map(|g| g.length / g.m as f64)
        .fold(f64::INFINITY, f64::min);
    let margins: Vec<f64> = corpus
        .iter()
        .map(|g| g.length - slope * g.m as f64)
        .collect();
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(LengthBoundAudit { slope, offset: 0.0, margins, min_margin })
}

/// Field lower bound along one path: the time average of F against the
/// per-box infimum count. q_integral and q_boxes are the smallest
/// nonnegative weights closing mean >= -q m / T in the two forms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowerBoundReport {
    pub mean_field: f64,
    pub m: usize,
    pub duration: f64,
    /// Sum over visited boxes of the sampled infimum of F.
    pub box_inf_sum: f64,
    pub q_integral: f64,
    pub q_boxes: f64,
    pub sub_density: usize,
}

pub fn lower_bound_audit(
    pot: &Potential,
    grid: &GridSpec,
    path: &GridPath,
    sub_density: usize,
) -> Result<LowerBoundReport, DiagError> {
    if sub_density == 0 {
        return Err(DiagError::Invalid("sub_density must be at least 1".to_string()));
    }
    let d = grid.dimension;
    let shear = vec![0.0; d];
    let vertices = augmented_polyline(path, grid, &shear)?;
    let disc = discretize_polyline(&vertices)?;
    if !(disc.duration > 0.0) {
        return Err(DiagError::Invalid("path must span positive time".to_string()));
    }

    let mut integral = 0.0;
    for pair in vertices.windows(2) {
        let t_mid = 0.5 * (pair[0][0] + pair[1][0]);
        let mid: Vec<f64> = (1..=d)
            .map(|a| 0.5 * (pair[0][a] + pair[1][a]))
            .collect();
        integral += (pair[1][0] - pair[0][0]) * pot.eval_f(t_mid, &mid)?;
    }
    let mean_field = integral / disc.duration;

    let mut box_inf_sum = 0.0;
    let mut offsets = vec![0usize; d + 1];
    for b in &disc.boxes {
        let mut inf = f64::INFINITY;
        offsets.iter_mut().for_each(|o| *o = 0);
        loop {
            let t = b[0] as f64 + (offsets[0] as f64 + 0.5) / sub_density as f64;
            let x: Vec<f64> = (1..=d)
                .map(|a| b[a] as f64 + (offsets[a] as f64 + 0.5) / sub_density as f64)
                .collect();
            inf = inf.min(pot.eval_f(t, &x)?);
            let mut a = 0;
            loop {
                if a > d {
                    break;
                }
                offsets[a] += 1;
                if offsets[a] < sub_density {
                    break;
                }
                offsets[a] = 0;
                a += 1;
            }
            if a > d {
                break;
            }
        }
        box_inf_sum += inf;
    }

    let m = disc.m as f64;
    Ok(LowerBoundReport {
        mean_field,
        m: disc.m,
        duration: disc.duration,
        box_inf_sum,
        q_integral: (-integral / m).max(0.0),
        q_boxes: (-box_inf_sum / m).max(0.0),
        sub_density,
    })
}

/// Box-count growth along loop minimizers: m(path) / T at each checkpoint
/// horizon, path taken in the original frame (loop plus shear).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MGrowthPoint {
    pub slice: usize,
    pub horizon: f64,
    pub per_seed_ratio: Vec<f64>,
    pub mean_ratio: f64,
    pub max_ratio: f64,
    /// Time-directedness floor floor(T) / T; no ratio can fall below it.
    pub floor_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MGrowthAudit {
    pub frame: Frame,
    pub seeds: Vec<u64>,
    pub points: Vec<MGrowthPoint>,
    /// False when mean ratios rise strictly through every checkpoint and
    /// gain more than 20 percent overall; a bounded series stays flat.
    pub bounded: bool,
}

pub fn m_growth_audit(
    spec: &EnvironmentSpec,
    kin: &KineticEnergy,
    grid: &GridSpec,
    frame: &Frame,
    checkpoint_slices: &[usize],
    repl: &Replication,
) -> Result<MGrowthAudit, DiagError> {
    spec.validate()?;
    grid.validate()?;
    frame.validate(grid.dimension)?;
    if checkpoint_slices.is_empty()
        || checkpoint_slices.iter().any(|k| *k < 1 || *k > grid.steps)
    {
        return Err(DiagError::Invalid(
            "checkpoint slices must lie in 1..=steps".to_string(),
        ));
    }
    let window = family_window(spec, grid, std::slice::from_ref(frame), 0.0);
    let seeds = repl.seeds();
    if seeds.is_empty() {
        return Err(DiagError::Invalid("replicates must be at least 1".to_string()));
    }
    let origin = vec![0i64; grid.dimension];
    let rows: Result<Vec<Vec<f64>>, DiagError> = seeds
        .par_iter()
        .map(|&seed| {
            (|| -> Result<Vec<f64>, DiagError> {
                let pot = Potential::Cloud(sample_environment(spec, &window, seed)?);
                let table = build_field_table(&pot, grid, frame)?;
                let stack = solve_with_table(&pot, kin, grid, frame, &table)?;
                checkpoint_slices
                    .iter()
                    .map(|&k| {
                        let path = stack.extract_minimizer_at(k, &origin)?;
                        let geom = path_geometry(&path, grid, &frame.v)?;
                        Ok(geom.m as f64 / geom.duration)
                    })
                    .collect()
            })()
            .map_err(|e| match e {
                DiagError::Solver(inner) => DiagError::Solver(SolverError::seeded(seed)(inner)),
                other => other,
            })
        })
        .collect();
    let rows = rows?;

    let points: Vec<MGrowthPoint> = checkpoint_slices
        .iter()
        .enumerate()
        .map(|(ci, &slice)| {
            let per_seed_ratio: Vec<f64> = rows.iter().map(|r| r[ci]).collect();
            let (mean_ratio, _) = mean_and_stderr(&per_seed_ratio);
            let horizon = slice as f64 * grid.dt;
            MGrowthPoint {
                slice,
                horizon,
                max_ratio: per_seed_ratio.iter().copied().fold(0.0, f64::max),
                mean_ratio,
                per_seed_ratio,
                floor_ratio: horizon.floor() / horizon,
            }
        })
        .collect();
    let means: Vec<f64> = points.iter().map(|p| p.mean_ratio).collect();
    let strictly_rising = means.windows(2).all(|w| w[1] > w[0]);
    let bounded = !(means.len() > 1
        && strictly_rising
        && means[means.len() - 1] > 1.2 * means[0]);
    Ok(MGrowthAudit { frame: frame.clone(), seeds, points, bounded })
}

/// Finite-difference residual of the value table against its limiting
/// equation d/dt A + alpha L*(grad A / alpha) = beta F.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HjbReport {
    pub first_slice: usize,
    pub last_slice: usize,
    pub cells_evaluated: usize,
    pub cells_excluded_kink: usize,
    pub cells_excluded_nonfinite: usize,
    pub kink_threshold: f64,
    pub median_abs: f64,
    pub q90_abs: f64,
    pub max_abs: f64,
    pub residuals: Vec<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Evaluates the residual on interior cells away from the initial slices.
/// Cells with a non-finite stencil value are skipped; cells where forward
/// and backward differences disagree beyond the kink threshold in time or
/// space are counted as kinks, where the value is genuinely non-smooth.
/// The threshold is ten times (dx/dt)^2 / 20, half the smallest slope gap
/// a lattice kink produces in the zero-field quadratic case.
pub fn hjb_residual(
    stack: &ActionStack,
    pot: &Potential,
    kin: &KineticEnergy,
) -> Result<HjbReport, DiagError> {
    let grid = stack.grid();
    let frame = stack.frame();
    if frame.v.iter().any(|w| *w != 0.0) {
        return Err(DiagError::Invalid(
            "residual check requires an unsheared solve".to_string(),
        ));
    }
    let d = grid.dimension;
    let n = grid.half_extent_nodes as i64;
    let first_slice = (grid.steps / 5).max(2);
    let last_slice = grid.steps.saturating_sub(1);
    if first_slice > last_slice {
        return Err(DiagError::Invalid(
            "grid has too few slices for interior residuals".to_string(),
        ));
    }
    let c = grid.dx / grid.dt;
    let kink_threshold = 10.0 * c * c / 20.0;

    let mut residuals = Vec::new();
    let mut kinks = 0usize;
    let mut nonfinite = 0usize;
    let mut shifted = vec![0i64; d];
    for k in first_slice..=last_slice {
        for lin in 0..grid.node_count() {
            let node = stack.node_of_linear(lin);
            if node.iter().any(|i| i.abs() >= n) {
                continue;
            }
            let center = stack.value_at(k, &node)?;
            let before = stack.value_at(k - 1, &node)?;
            let after = stack.value_at(k + 1, &node)?;
            let mut finite = center.is_finite() && before.is_finite() && after.is_finite();
            let mut lo = vec![0.0; d];
            let mut hi = vec![0.0; d];
            if finite {
                for a in 0..d {
                    shifted.copy_from_slice(&node);
                    shifted[a] -= 1;
                    lo[a] = stack.value_at(k, &shifted)?;
                    shifted[a] += 2;
                    hi[a] = stack.value_at(k, &shifted)?;
                    if !lo[a].is_finite() || !hi[a].is_finite() {
                        finite = false;
                        break;
                    }
                }
            }
            if !finite {
                nonfinite += 1;
                continue;
            }
            let t_mismatch = ((after - center) - (center - before)).abs() / grid.dt;
            let mut kink = t_mismatch > kink_threshold;
            let mut grad = vec![0.0; d];
            for a in 0..d {
                let fwd = (hi[a] - center) / grid.dx;
                let bwd = (center - lo[a]) / grid.dx;
                if (fwd - bwd).abs() > kink_threshold {
                    kink = true;
                }
                grad[a] = 0.5 * (fwd + bwd);
            }
            if kink {
                kinks += 1;
                continue;
            }
            let dt_a = (after - before) / (2.0 * grid.dt);
            let p: Vec<f64> = grad.iter().map(|g| g / frame.alpha).collect();
            let hamiltonian = frame.alpha * kin.legendre(&p)?;
            let t = k as f64 * grid.dt;
            let x: Vec<f64> = node.iter().map(|i| *i as f64 * grid.dx).collect();
            let f = pot.eval_f(t, &x)?;
            residuals.push(dt_a + hamiltonian - frame.beta * f);
        }
    }
    if residuals.is_empty() {
        return Err(DiagError::Invalid(
            "no smooth interior cells to evaluate".to_string(),
        ));
    }
    let mut abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    abs.sort_by(|x, y| x.partial_cmp(y).expect("finite residuals"));
    Ok(HjbReport {
        first_slice,
        last_slice,
        cells_evaluated: residuals.len(),
        cells_excluded_kink: kinks,
        cells_excluded_nonfinite: nonfinite,
        kink_threshold,
        median_abs: quantile(&abs, 0.5),
        q90_abs: quantile(&abs, 0.9),
        max_abs: abs[abs.len() - 1],
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::solver::solve;
    use rand::Rng;

    fn straight_path(steps: usize, offset_per_step: i64) -> GridPath {
        GridPath {
            start_slice: 0,
            nodes: (0..=steps as i64).map(|i| vec![i * offset_per_step]).collect(),
        }
    }

    /// Dense-sampling oracle: walk each segment in many equal steps,
    /// snapping near-integer coordinates, and collect the floor boxes.
    fn oracle_boxes(vertices: &[Vec<f64>], samples_per_segment: usize) -> Vec<Vec<i64>> {
        let dim = vertices[0].len();
        let mut boxes = BTreeSet::new();
        for (i, pair) in vertices.windows(2).enumerate() {
            let last = i + 2 == vertices.len();
            let top = if last {
                samples_per_segment - 1
            } else {
                samples_per_segment
            };
            for j in 0..=top {
                let s = j as f64 / samples_per_segment as f64;
                let b: Vec<i64> = (0..dim)
                    .map(|a| snapped_floor(pair[0][a] + s * (pair[1][a] - pair[0][a])))
                    .collect();
                boxes.insert(b);
            }
        }
        boxes.into_iter().collect()
    }

    #[test]
    fn frozen_straight_paths_have_ten_boxes() {
        let grid = GridSpec::with_auto_extent(1, 0.5, 0.5, 20, 2);
        let flat = discretize_path(&straight_path(20, 0), &grid).unwrap();
        assert_eq!(flat.m, 10);
        assert!(flat.boxes.iter().all(|b| b[1] == 0));

        let diagonal = discretize_path(&straight_path(20, 1), &grid).unwrap();
        assert_eq!(diagonal.m, 10);
        for b in &diagonal.boxes {
            assert_eq!(b[0], b[1]);
        }
        assert!(flat.is_connected() && diagonal.is_connected());
    }

    #[test]
    fn discretization_matches_the_dense_sampling_oracle() {
        let mut rng = stream_rng(901, 0, 0);
        for case in 0..120 {
            let d = 1 + case % 2;
            let grid = GridSpec::with_auto_extent(
                d,
                [0.25, 0.5, 0.2][case % 3],
                0.25,
                12,
                2,
            );
            let mut nodes = vec![vec![0i64; d]];
            for _ in 0..grid.steps {
                let prev = nodes.last().unwrap().clone();
                nodes.push(
                    (0..d)
                        .map(|a| prev[a] + rng.random_range(-2..=2))
                        .collect(),
                );
            }
            let path = GridPath { start_slice: 0, nodes };
            let shear = vec![0.0; d];
            let vertices = augmented_polyline(&path, &grid, &shear).unwrap();
            let disc = discretize_polyline(&vertices).unwrap();
            assert_eq!(disc.boxes, oracle_boxes(&vertices, 100), "case {case}");
            assert!(disc.is_connected(), "case {case}");
            assert!(disc.m >= disc.duration.floor() as usize, "case {case}");
        }
    }

    #[test]
    fn corner_passages_include_the_corner_box() {
        // Mixed diagonal crossing: one axis rises through 1 while the other
        // falls through 1 at the same instant, a single-instant box.
        let vertices = vec![vec![0.0, 0.95, 1.05], vec![0.5, 1.05, 0.95]];
        let disc = discretize_polyline(&vertices).unwrap();
        assert!(disc.boxes.contains(&vec![0, 1, 1]));
        assert_eq!(disc.boxes, oracle_boxes(&vertices, 100));
    }

    #[test]
    fn partitions_are_disjoint_covering_and_separated() {
        let mut rng = stream_rng(902, 0, 0);
        let boxes: Vec<Vec<i64>> = (0..200)
            .map(|_| vec![rng.random_range(-12..12), rng.random_range(-12..12)])
            .collect();
        for r in [1.0, 2.5] {
            let w = (r as f64).ceil() as i64 + 1;
            let parts = partition_boxes(&boxes, r).unwrap();
            assert!(parts.len() <= (w * w) as usize);
            let mut seen = BTreeSet::new();
            for part in &parts {
                for b in part {
                    assert!(seen.insert(b.clone()), "parts overlap");
                }
                for (i, x) in part.iter().enumerate() {
                    for y in &part[i + 1..] {
                        let dist = x
                            .iter()
                            .zip(y)
                            .map(|(a, b)| (a - b).abs())
                            .max()
                            .unwrap();
                        assert!(dist as f64 > r);
                    }
                }
            }
            let input: BTreeSet<Vec<i64>> = boxes.iter().cloned().collect();
            assert_eq!(seen, input);
        }
        let single = partition_boxes(&[vec![3, -4]], 1.0).unwrap();
        assert_eq!(single, vec![vec![vec![3, -4]]]);
        assert!(partition_boxes(&[vec![0, 0]], 0.0).is_err());
    }

    #[test]
    fn length_audit_fits_a_zero_min_margin() {
        let grid = GridSpec::with_auto_extent(1, 0.5, 0.5, 20, 2);
        let flat = path_geometry(&straight_path(20, 0), &grid, &[0.0]).unwrap();
        assert!((flat.length - 10.0).abs() < 1e-12);
        assert_eq!(flat.m, 10);
        let wiggly = path_geometry(&straight_path(20, 1), &grid, &[0.0]).unwrap();
        let audit = length_bound_audit(&[flat, wiggly]).unwrap();
        assert!(audit.slope > 0.0);
        assert!(audit.min_margin.abs() < 1e-12);
        assert!(audit.margins.iter().all(|m| *m >= -1e-12));
    }

    #[test]
    fn lower_bound_weight_vanishes_without_negative_field() {
        let grid = GridSpec::with_auto_extent(1, 0.5, 0.5, 8, 1);
        let path = straight_path(8, 1);
        let empty = Potential::Uniform { dimension: 1, value: 0.0 };
        let report = lower_bound_audit(&empty, &grid, &path, 5).unwrap();
        assert_eq!(report.mean_field, 0.0);
        assert_eq!(report.q_integral, 0.0);
        assert_eq!(report.q_boxes, 0.0);

        let lifted = Potential::Uniform { dimension: 1, value: 0.75 };
        let report = lower_bound_audit(&lifted, &grid, &path, 3).unwrap();
        assert!((report.mean_field - 0.75).abs() < 1e-12);
        assert_eq!(report.q_integral, 0.0);
        assert_eq!(report.q_boxes, 0.0);
        assert!((report.box_inf_sum - 0.75 * report.m as f64).abs() < 1e-12);

        let sunk = Potential::Uniform { dimension: 1, value: -0.5 };
        let report = lower_bound_audit(&sunk, &grid, &path, 3).unwrap();
        let expected = 0.5 * report.duration / report.m as f64;
        assert!((report.q_integral - expected).abs() < 1e-12);
        assert!((report.q_boxes - 0.5).abs() < 1e-12);
    }

    #[test]
    fn box_growth_is_flat_in_empty_environments() {
        let mut spec = EnvironmentSpec::standard(1);
        spec.intensity = 0.0;
        let kin = KineticEnergy::quadratic(1.0);
        let grid = GridSpec::with_auto_extent(1, 0.25, 0.25, 16, 2);
        let audit = m_growth_audit(
            &spec,
            &kin,
            &grid,
            &Frame::rest(1),
            &[4, 8, 16],
            &Replication::new(2, 21),
        )
        .unwrap();
        assert!(audit.bounded);
        for point in &audit.points {
            // The rest minimizer is the flat line: one box per unit time.
            assert_eq!(point.mean_ratio, 1.0);
            assert!(point.mean_ratio >= point.floor_ratio);
        }
    }

    #[test]
    fn residual_of_the_free_quadratic_value_is_the_lattice_constant() {
        let kin = KineticEnergy::quadratic(1.0);
        let empty = Potential::Uniform { dimension: 1, value: 0.0 };
        let mut medians = Vec::new();
        for dx in [0.1, 0.05] {
            let grid = GridSpec::with_auto_extent(1, 0.1, dx, 30, 3);
            let stack = solve(&empty, &kin, &grid, &Frame::rest(1)).unwrap();
            let report = hjb_residual(&stack, &empty, &kin).unwrap();
            let c = dx / 0.1;
            assert!(report.cells_evaluated > 0);
            assert!(report.cells_excluded_kink > 0);
            assert!(
                (report.median_abs - c * c / 8.0).abs() < 1e-12,
                "dx {dx}: {} vs {}",
                report.median_abs,
                c * c / 8.0
            );
            assert!((report.max_abs - c * c / 8.0).abs() < 1e-12);
            medians.push(report.median_abs);
        }
        assert!((medians[0] / medians[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn residual_check_rejects_sheared_stacks() {
        let kin = KineticEnergy::quadratic(1.0);
        let empty = Potential::Uniform { dimension: 1, value: 0.0 };
        let grid = GridSpec::with_auto_extent(1, 0.2, 0.1, 10, 2);
        let stack = solve(&empty, &kin, &grid, &Frame::moving(vec![0.5])).unwrap();
        assert!(hjb_residual(&stack, &empty, &kin).is_err());
    }
}
