//! Discrete minimal-action solver on a space-time lattice.
//!
//! Paths live on slices k = 0..=steps at node positions i * dx with
//! |i| <= half_extent_nodes per axis, and one step moves at most
//! velocity_window nodes per axis. A step from y at slice k to x at slice
//! k+1 costs dt * alpha * L((x-y)/dt + v) + dt * beta * F_v(t_mid, (x+y)/2).
//! Re-evaluating an extracted path reproduces the table value bit for bit
//! because both sides share the same cost expressions and summation order.

use crate::environment::{EnvError, Potential};
use crate::kinetics::{KineticEnergy, KineticsError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Back-pointer value for cells no path has reached.
const NO_STEP: u16 = u16::MAX;
/// Guard on values * slices so allocations stay sane.
const MAX_CELLS: usize = 1 << 31;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("invalid experiment: {0}")]
    BadExperiment(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Kinetics(#[from] KineticsError),
    #[error("field table does not match this grid, frame, and potential")]
    TableMismatch,
    #[error("target {x:?} does not sit on the node lattice")]
    TargetOffGrid { x: Vec<f64> },
    #[error("slice {slice}, node {node:?} outside the solved grid")]
    OutOfRange { slice: usize, node: Vec<i64> },
    #[error("no admissible path reaches slice {slice}, node {node:?}")]
    Unreachable { slice: usize, node: Vec<i64> },
    #[error("minimizer touches the spatial extent edge at slice {slice}; enlarge half_extent_nodes")]
    ExtentHit { slice: usize },
    #[error("minimizer takes a window-clamped step into slice {slice}; enlarge velocity_window")]
    WindowHit { slice: usize },
    #[error("environment seed {seed}: {inner}")]
    Seeded { seed: u64, inner: Box<SolverError> },
}

impl SolverError {
    /// Tags an error with the environment seed of the replicate it came
    /// from, so batch failures name the offending run.
    pub fn seeded(seed: u64) -> impl Fn(SolverError) -> SolverError {
        move |inner| SolverError::Seeded { seed, inner: Box::new(inner) }
    }
}

/// Space-time lattice: steps slices of length dt, nodes i * dx with
/// |i| <= half_extent_nodes, per-step node displacement within
/// +-velocity_window per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dimension: usize,
    pub dt: f64,
    pub dx: f64,
    pub steps: usize,
    pub velocity_window: usize,
    pub half_extent_nodes: usize,
}

impl GridSpec {
    /// Grid whose extent covers the full reachability cone, so no admissible
    /// path can leave it.
    pub fn with_auto_extent(
        dimension: usize,
        dt: f64,
        dx: f64,
        steps: usize,
        velocity_window: usize,
    ) -> GridSpec {
        GridSpec {
            dimension,
            dt,
            dx,
            steps,
            velocity_window,
            half_extent_nodes: steps * velocity_window,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let err = |m: String| Err(SolverError::InvalidGrid(m));
        if self.dimension < 1 || self.dimension > 2 {
            return err(format!("dimension {} not in 1..=2", self.dimension));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() || !(self.dx > 0.0) || !self.dx.is_finite() {
            return err(format!("dt {} and dx {} must be finite and positive", self.dt, self.dx));
        }
        if self.steps == 0 {
            return err("steps must be at least 1".to_string());
        }
        if self.velocity_window == 0 || self.velocity_window > 127 {
            return err(format!(
                "velocity_window {} not in 1..=127",
                self.velocity_window
            ));
        }
        if self.half_extent_nodes == 0 {
            return err("half_extent_nodes must be at least 1".to_string());
        }
        let m = self.nodes_per_axis();
        let cells = m
            .checked_pow(self.dimension as u32)
            .and_then(|nc| nc.checked_mul(self.steps + 1));
        match cells {
            Some(c) if c <= MAX_CELLS => {}
            _ => return err("grid is too large".to_string()),
        }
        let fpa = 4 * self.half_extent_nodes + 1;
        let fcells = fpa
            .checked_pow(self.dimension as u32)
            .and_then(|nc| nc.checked_mul(self.steps));
        match fcells {
            Some(c) if c <= MAX_CELLS => {}
            _ => return err("field table would be too large".to_string()),
        }
        Ok(())
    }

    pub fn nodes_per_axis(&self) -> usize {
        2 * self.half_extent_nodes + 1
    }

    pub fn node_count(&self) -> usize {
        self.nodes_per_axis().pow(self.dimension as u32)
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    /// Offsets per axis lie in -W..=W; codes enumerate them lexicographically.
    fn offset_codes(&self) -> usize {
        (2 * self.velocity_window + 1).pow(self.dimension as u32)
    }

    fn linear_of(&self, node: &[i64]) -> usize {
        let n = self.half_extent_nodes as i64;
        let m = self.nodes_per_axis();
        let mut lin = 0usize;
        for c in node {
            debug_assert!(c.abs() <= n);
            lin = lin * m + (c + n) as usize;
        }
        lin
    }

    fn node_of(&self, mut lin: usize) -> Vec<i64> {
        let n = self.half_extent_nodes as i64;
        let m = self.nodes_per_axis();
        let mut node = vec![0i64; self.dimension];
        for a in (0..self.dimension).rev() {
            node[a] = (lin % m) as i64 - n;
            lin /= m;
        }
        node
    }

    fn code_of_offset(&self, offset: &[i64]) -> u16 {
        let w = self.velocity_window as i64;
        let span = 2 * self.velocity_window + 1;
        let mut code = 0usize;
        for o in offset {
            debug_assert!(o.abs() <= w);
            code = code * span + (o + w) as usize;
        }
        code as u16
    }

    fn offset_of_code(&self, code: u16) -> Vec<i64> {
        let w = self.velocity_window as i64;
        let span = 2 * self.velocity_window + 1;
        let mut rest = code as usize;
        let mut offset = vec![0i64; self.dimension];
        for a in (0..self.dimension).rev() {
            offset[a] = (rest % span) as i64 - w;
            rest /= span;
        }
        offset
    }

    pub fn node_position(&self, node: &[i64]) -> Vec<f64> {
        node.iter().map(|c| *c as f64 * self.dx).collect()
    }

    /// Snaps a position to the node lattice; rejects coordinates more than
    /// a relative 1e-9 off a node or beyond the extent.
    pub fn nearest_node(&self, x: &[f64]) -> Result<Vec<i64>, SolverError> {
        if x.len() != self.dimension {
            return Err(SolverError::TargetOffGrid { x: x.to_vec() });
        }
        let mut node = Vec::with_capacity(self.dimension);
        for c in x {
            let rel = c / self.dx;
            let snapped = rel.round();
            if (rel - snapped).abs() > 1e-9 * rel.abs().max(1.0) {
                return Err(SolverError::TargetOffGrid { x: x.to_vec() });
            }
            if snapped.abs() > self.half_extent_nodes as f64 {
                return Err(SolverError::TargetOffGrid { x: x.to_vec() });
            }
            node.push(snapped as i64);
        }
        Ok(node)
    }
}

/// Observation frame for the loop form of the problem: kinetic weight alpha,
/// potential weight beta, and the frame velocity v entering both the kinetic
/// argument and the field shear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub v: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl Frame {
    pub fn rest(dimension: usize) -> Frame {
        Frame { v: vec![0.0; dimension], alpha: 1.0, beta: 1.0 }
    }

    pub fn moving(v: Vec<f64>) -> Frame {
        Frame { v, alpha: 1.0, beta: 1.0 }
    }

    pub fn validate(&self, dimension: usize) -> Result<(), SolverError> {
        if self.v.len() != dimension {
            return Err(SolverError::InvalidFrame(format!(
                "frame velocity has dimension {}, grid has {}",
                self.v.len(),
                dimension
            )));
        }
        if self.v.iter().any(|w| !w.is_finite()) {
            return Err(SolverError::InvalidFrame("frame velocity must be finite".to_string()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(SolverError::InvalidFrame(format!(
                "alpha {} must be finite and positive",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(SolverError::InvalidFrame(format!(
                "beta {} must be finite and nonnegative",
                self.beta
            )));
        }
        Ok(())
    }
}

// Cost expressions shared by the dynamic program, the field table, and path
// re-evaluation. Bit-identical agreement between solver values and
// action_of_path depends on every caller going through these.

#[inline]
pub(crate) fn mid_time(dt: f64, slice: usize) -> f64 {
    (slice as f64 + 0.5) * dt
}

#[inline]
pub(crate) fn mid_position(dx: f64, node_sum: &[i64], out: &mut [f64]) {
    for (o, s) in out.iter_mut().zip(node_sum) {
        *o = *s as f64 * (0.5 * dx);
    }
}

#[inline]
pub(crate) fn step_velocity(grid: &GridSpec, frame: &Frame, offset: &[i64], out: &mut [f64]) {
    for ((o, c), w) in out.iter_mut().zip(offset).zip(&frame.v) {
        *o = *c as f64 * (grid.dx / grid.dt) + w;
    }
}

#[inline]
fn kinetic_term(grid: &GridSpec, frame: &Frame, kin: &KineticEnergy, offset: &[i64]) -> f64 {
    let mut vel = vec![0.0; grid.dimension];
    step_velocity(grid, frame, offset, &mut vel);
    grid.dt * frame.alpha * kin.eval(&vel)
}

#[inline]
fn field_term(grid: &GridSpec, frame: &Frame, f_mid: f64) -> f64 {
    grid.dt * frame.beta * f_mid
}

/// Field values on the step midpoints: slice k holds F_v at time
/// (k + 0.5) dt and positions (i + j)/2 * dx for node sums i + j. The table
/// depends on the potential, the grid geometry, and the frame velocity, but
/// not on alpha or beta, so one table serves a whole weight panel.
#[derive(Debug, Clone)]
pub struct FieldTable {
    dimension: usize,
    steps: usize,
    half_extent_nodes: usize,
    dt: f64,
    dx: f64,
    v: Vec<f64>,
    env_hash: String,
    per_axis: usize,
    values: Vec<f64>,
}

impl FieldTable {
    fn matches(&self, grid: &GridSpec, frame: &Frame, pot: &Potential) -> bool {
        self.dimension == grid.dimension
            && self.steps == grid.steps
            && self.half_extent_nodes == grid.half_extent_nodes
            && self.dt == grid.dt
            && self.dx == grid.dx
            && self.v == frame.v
            && self.env_hash == pot.content_hash()
    }

    #[inline]
    fn value(&self, slice: usize, node_sum: &[i64]) -> f64 {
        let shift = 2 * self.half_extent_nodes as i64;
        let mut lin = 0usize;
        for s in node_sum {
            lin = lin * self.per_axis + (s + shift) as usize;
        }
        self.values[slice * self.per_axis.pow(self.dimension as u32) + lin]
    }
}

/// Evaluates the sheared field on every step midpoint. Rows are independent,
/// so slices fill in parallel with a deterministic layout.
pub fn build_field_table(
    pot: &Potential,
    grid: &GridSpec,
    frame: &Frame,
) -> Result<FieldTable, SolverError> {
    grid.validate()?;
    frame.validate(grid.dimension)?;
    if pot.dimension() != grid.dimension {
        return Err(SolverError::InvalidGrid(format!(
            "potential dimension {} does not match grid dimension {}",
            pot.dimension(),
            grid.dimension
        )));
    }
    let per_axis = 4 * grid.half_extent_nodes + 1;
    let row_len = per_axis.pow(grid.dimension as u32);
    let shift = 2 * grid.half_extent_nodes as i64;
    let rows: Result<Vec<Vec<f64>>, SolverError> = (0..grid.steps)
        .into_par_iter()
        .map(|k| {
            let t = mid_time(grid.dt, k);
            let mut row = Vec::with_capacity(row_len);
            let mut sum = vec![0i64; grid.dimension];
            let mut pos = vec![0.0; grid.dimension];
            for lin in 0..row_len {
                let mut rest = lin;
                for a in (0..grid.dimension).rev() {
                    sum[a] = (rest % per_axis) as i64 - shift;
                    rest /= per_axis;
                }
                mid_position(grid.dx, &sum, &mut pos);
                row.push(pot.eval_f_sheared(&frame.v, t, &pos)?);
            }
            Ok(row)
        })
        .collect();
    let mut values = Vec::with_capacity(grid.steps * row_len);
    for row in rows? {
        values.extend_from_slice(&row);
    }
    Ok(FieldTable {
        dimension: grid.dimension,
        steps: grid.steps,
        half_extent_nodes: grid.half_extent_nodes,
        dt: grid.dt,
        dx: grid.dx,
        v: frame.v.clone(),
        env_hash: pot.content_hash(),
        per_axis,
        values,
    })
}

/// Solved value table: minimal action from the start cell to every cell,
/// with back pointers for minimizer extraction. Ties pick the predecessor
/// that is lexicographically smallest in node order.
#[derive(Debug, Clone)]
pub struct ActionStack {
    grid: GridSpec,
    frame: Frame,
    start_slice: usize,
    start_node: Vec<i64>,
    env_hash: String,
    values: Vec<f64>,
    back: Vec<u16>,
}

/// Lattice path: one node per slice from start_slice onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPath {
    pub start_slice: usize,
    pub nodes: Vec<Vec<i64>>,
}

impl GridPath {
    pub fn end_slice(&self) -> usize {
        self.start_slice + self.nodes.len() - 1
    }

    pub fn positions(&self, grid: &GridSpec) -> Vec<Vec<f64>> {
        self.nodes.iter().map(|n| grid.node_position(n)).collect()
    }
}

/// Full solve from the origin node at slice 0.
pub fn solve(
    pot: &Potential,
    kin: &KineticEnergy,
    grid: &GridSpec,
    frame: &Frame,
) -> Result<ActionStack, SolverError> {
    let table = build_field_table(pot, grid, frame)?;
    solve_with_table(pot, kin, grid, frame, &table)
}

/// Solve from the origin node at slice 0 reusing a prebuilt field table.
pub fn solve_with_table(
    pot: &Potential,
    kin: &KineticEnergy,
    grid: &GridSpec,
    frame: &Frame,
    table: &FieldTable,
) -> Result<ActionStack, SolverError> {
    solve_from(pot, kin, grid, frame, table, 0, &vec![0; grid.dimension])
}

/// Solve seeded at an arbitrary cell; slices before start_slice stay
/// unreachable. Suffix solves over the same table let callers check that a
/// solved prefix plus a fresh suffix reproduces the full value.
pub fn solve_from(
    pot: &Potential,
    kin: &KineticEnergy,
    grid: &GridSpec,
    frame: &Frame,
    table: &FieldTable,
    start_slice: usize,
    start_node: &[i64],
) -> Result<ActionStack, SolverError> {
    grid.validate()?;
    frame.validate(grid.dimension)?;
    kin.validate()?;
    if !table.matches(grid, frame, pot) {
        return Err(SolverError::TableMismatch);
    }
    let n = grid.half_extent_nodes as i64;
    if start_slice > grid.steps
        || start_node.len() != grid.dimension
        || start_node.iter().any(|c| c.abs() > n)
    {
        return Err(SolverError::OutOfRange {
            slice: start_slice,
            node: start_node.to_vec(),
        });
    }

    let nc = grid.node_count();
    let mut values = vec![f64::INFINITY; (grid.steps + 1) * nc];
    let mut back = vec![NO_STEP; (grid.steps + 1) * nc];
    values[start_slice * nc + grid.linear_of(start_node)] = 0.0;

    // Kinetic step costs depend only on the offset code.
    let codes = grid.offset_codes();
    let mut lcost = vec![0.0; codes];
    for code in 0..codes {
        let offset = grid.offset_of_code(code as u16);
        lcost[code] = kinetic_term(grid, frame, kin, &offset);
    }

    let w = grid.velocity_window as i64;
    let d = grid.dimension;
    let mut node = vec![0i64; d];
    let mut pred = vec![0i64; d];
    let mut sum = vec![0i64; d];
    let mut offset = vec![0i64; d];
    for k in start_slice..grid.steps {
        let (head, tail) = values.split_at_mut((k + 1) * nc);
        let src = &head[k * nc..];
        let dst = &mut tail[..nc];
        let brow = &mut back[(k + 1) * nc..(k + 2) * nc];
        for lin in 0..nc {
            let mut rest = lin;
            for a in (0..d).rev() {
                node[a] = (rest % grid.nodes_per_axis()) as i64 - n;
                rest /= grid.nodes_per_axis();
            }
            let mut best = f64::INFINITY;
            let mut best_code = NO_STEP;
            // Predecessors ascend lexicographically; strict improvement
            // keeps the first minimizer, hence the smallest predecessor.
            let mut done = false;
            for a in 0..d {
                pred[a] = (node[a] - w).max(-n);
                if pred[a] > (node[a] + w).min(n) {
                    done = true;
                }
            }
            while !done {
                let plin = grid.linear_of(&pred);
                let prev = src[plin];
                if prev.is_finite() {
                    for a in 0..d {
                        offset[a] = node[a] - pred[a];
                        sum[a] = node[a] + pred[a];
                    }
                    let code = grid.code_of_offset(&offset);
                    let fterm = field_term(grid, frame, table.value(k, &sum));
                    let cand = prev + (lcost[code as usize] + fterm);
                    if cand < best {
                        best = cand;
                        best_code = code;
                    }
                }
                let mut a = d;
                loop {
                    if a == 0 {
                        done = true;
                        break;
                    }
                    a -= 1;
                    if pred[a] < (node[a] + w).min(n) {
                        pred[a] += 1;
                        for b in a + 1..d {
                            pred[b] = (node[b] - w).max(-n);
                        }
                        break;
                    }
                }
            }
            if best_code != NO_STEP {
                dst[lin] = best;
                brow[lin] = best_code;
            }
        }
    }

    Ok(ActionStack {
        grid: grid.clone(),
        frame: frame.clone(),
        start_slice,
        start_node: start_node.to_vec(),
        env_hash: table.env_hash.clone(),
        values,
        back,
    })
}

impl ActionStack {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn start(&self) -> (usize, &[i64]) {
        (self.start_slice, &self.start_node)
    }

    pub fn env_hash(&self) -> &str {
        &self.env_hash
    }

    /// Minimal action accumulated at a cell; infinite when unreached.
    pub fn value_at(&self, slice: usize, node: &[i64]) -> Result<f64, SolverError> {
        let n = self.grid.half_extent_nodes as i64;
        if slice > self.grid.steps
            || node.len() != self.grid.dimension
            || node.iter().any(|c| c.abs() > n)
        {
            return Err(SolverError::OutOfRange { slice, node: node.to_vec() });
        }
        Ok(self.values[slice * self.grid.node_count() + self.grid.linear_of(node)])
    }

    /// Values of one whole slice in node order.
    pub fn slice_values(&self, slice: usize) -> &[f64] {
        let nc = self.grid.node_count();
        &self.values[slice * nc..(slice + 1) * nc]
    }

    pub fn node_of_linear(&self, lin: usize) -> Vec<i64> {
        self.grid.node_of(lin)
    }

    /// Minimal action from the start cell to the final slice at position x.
    pub fn point_to_point_action(&self, x: &[f64]) -> Result<f64, SolverError> {
        let node = self.grid.nearest_node(x)?;
        let value = self.value_at(self.grid.steps, &node)?;
        if !value.is_finite() {
            return Err(SolverError::Unreachable { slice: self.grid.steps, node });
        }
        Ok(value)
    }

    pub fn extract_minimizer(&self, x: &[f64]) -> Result<GridPath, SolverError> {
        let node = self.grid.nearest_node(x)?;
        self.extract_minimizer_at(self.grid.steps, &node)
    }

    /// Walks back pointers from the cell to the start. Fails when the path
    /// touches the spatial extent edge strictly inside its span or takes a
    /// step clamped by the velocity window: either flag means the reported
    /// minimum may be an artifact of the grid bounds.
    pub fn extract_minimizer_at(&self, slice: usize, node: &[i64]) -> Result<GridPath, SolverError> {
        let value = self.value_at(slice, node)?;
        if !value.is_finite() {
            return Err(SolverError::Unreachable { slice, node: node.to_vec() });
        }
        let nc = self.grid.node_count();
        let mut rev: Vec<Vec<i64>> = vec![node.to_vec()];
        let mut cursor = node.to_vec();
        let mut k = slice;
        while k > self.start_slice {
            let code = self.back[k * nc + self.grid.linear_of(&cursor)];
            if code == NO_STEP {
                return Err(SolverError::Unreachable { slice, node: node.to_vec() });
            }
            let offset = self.grid.offset_of_code(code);
            for (c, o) in cursor.iter_mut().zip(&offset) {
                *c -= o;
            }
            k -= 1;
            rev.push(cursor.clone());
        }
        rev.reverse();
        let path = GridPath { start_slice: self.start_slice, nodes: rev };

        let n = self.grid.half_extent_nodes as i64;
        let w = self.grid.velocity_window as i64;
        for (i, cell) in path.nodes.iter().enumerate() {
            let interior = i > 0 && i + 1 < path.nodes.len();
            if interior && cell.iter().any(|c| c.abs() == n) {
                return Err(SolverError::ExtentHit { slice: self.start_slice + i });
            }
        }
        for (i, pair) in path.nodes.windows(2).enumerate() {
            if pair[0].iter().zip(&pair[1]).any(|(a, b)| (b - a).abs() == w) {
                return Err(SolverError::WindowHit { slice: self.start_slice + i + 1 });
            }
        }
        Ok(path)
    }
}

/// Objective value of an explicit lattice path under the same discretization
/// the solver uses. For a path extracted from a stack this reproduces the
/// stored value bit for bit. Offsets larger than the velocity window are
/// allowed; such paths are simply outside the solver's feasible set.
pub fn action_of_path(
    pot: &Potential,
    kin: &KineticEnergy,
    grid: &GridSpec,
    frame: &Frame,
    path: &GridPath,
) -> Result<f64, SolverError> {
    grid.validate()?;
    frame.validate(grid.dimension)?;
    kin.validate()?;
    if path.nodes.is_empty() || path.end_slice() > grid.steps {
        return Err(SolverError::OutOfRange {
            slice: path.end_slice(),
            node: path.nodes.last().cloned().unwrap_or_default(),
        });
    }
    let n = grid.half_extent_nodes as i64;
    for (i, cell) in path.nodes.iter().enumerate() {
        if cell.len() != grid.dimension || cell.iter().any(|c| c.abs() > n) {
            return Err(SolverError::OutOfRange {
                slice: path.start_slice + i,
                node: cell.clone(),
            });
        }
    }
    let d = grid.dimension;
    let mut total = 0.0;
    let mut offset = vec![0i64; d];
    let mut sum = vec![0i64; d];
    let mut pos = vec![0.0; d];
    for (i, pair) in path.nodes.windows(2).enumerate() {
        let k = path.start_slice + i;
        for a in 0..d {
            offset[a] = pair[1][a] - pair[0][a];
            sum[a] = pair[1][a] + pair[0][a];
        }
        let lterm = kinetic_term(grid, frame, kin, &offset);
        mid_position(grid.dx, &sum, &mut pos);
        let f_mid = pot.eval_f_sheared(&frame.v, mid_time(grid.dt, k), &pos)?;
        let fterm = field_term(grid, frame, f_mid);
        total = total + (lterm + fterm);
    }
    Ok(total)
}
