//! Marked Poisson bump fields on space-time.
//!
//! A realized environment is a finite cloud of centers (t_i, x_i) carrying
//! bump marks; the potential F(t,x) is the sum of the bumps. Marks have hard
//! radius caps and the sampling window is padded by exactly those caps, so F
//! is exact (not truncated) everywhere inside the query window. Evaluation
//! runs through a uniform-bin index over centers; indexed results must agree
//! with a full linear scan to float accuracy.

mod audits;
mod index;

pub use audits::{linear_growth_audit, moment_audit, GrowthAudit, MomentAudit};

use crate::rng::{stream_rng, STREAM_COUNT, STREAM_POINT};
use index::BinIndex;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Largest expected point count a single sampling call will accept.
const MAX_EXPECTED_POINTS: f64 = 2e7;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment spec: {field}: {message}")]
    InvalidSpec { field: &'static str, message: String },
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("query (t={t}, x={x:?}) outside the exactness region of the sampled window")]
    OutOfDomain { t: f64, x: Vec<f64> },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sampling request too large: expected point count {expected:.3e} exceeds {limit:.3e}")]
    TooLarge { expected: f64, limit: f64 },
    #[error("point {index} lies outside the padded window")]
    PointOutsideWindow { index: usize },
    #[error("serialized cloud rejected: {0}")]
    BadRecord(String),
}

/// Amplitude law for bump marks. Every family here has finite exponential
/// moments in a neighborhood of zero, which the moment audit relies on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AmplitudeDist {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Exponential with the given rate, multiplied by sign (+1 or -1).
    Exponential { rate: f64, sign: f64 },
}

impl AmplitudeDist {
    fn validate(&self) -> Result<(), EnvError> {
        let err = |message: String| EnvError::InvalidSpec {
            field: "amplitude",
            message,
        };
        match self {
            AmplitudeDist::Constant { value } => {
                if !value.is_finite() {
                    return Err(err(format!("constant value {value} is not finite")));
                }
            }
            AmplitudeDist::Uniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || lo > hi {
                    return Err(err(format!("uniform range [{lo}, {hi}] is invalid")));
                }
            }
            AmplitudeDist::Exponential { rate, sign } => {
                if !(*rate > 0.0) {
                    return Err(err(format!("exponential rate {rate} must be positive")));
                }
                if *sign != 1.0 && *sign != -1.0 {
                    return Err(err(format!("exponential sign {sign} must be +1 or -1")));
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            AmplitudeDist::Constant { value } => *value,
            AmplitudeDist::Uniform { lo, hi } => {
                if lo == hi {
                    *lo
                } else {
                    rng.random_range(*lo..*hi)
                }
            }
            AmplitudeDist::Exponential { rate, sign } => {
                let exp = rand_distr::Exp::new(*rate).expect("validated rate");
                sign * exp.sample(rng)
            }
        }
    }
}

/// Radius law for bump marks; upper bound must stay within the spec caps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RadiusDist {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl RadiusDist {
    /// Largest radius this law can produce.
    pub fn upper(&self) -> f64 {
        match self {
            RadiusDist::Constant { value } => *value,
            RadiusDist::Uniform { hi, .. } => *hi,
        }
    }

    fn validate(&self, field: &'static str, cap: f64) -> Result<(), EnvError> {
        let err = |message: String| EnvError::InvalidSpec { field, message };
        match self {
            RadiusDist::Constant { value } => {
                if !(*value > 0.0) || !value.is_finite() {
                    return Err(err(format!("radius {value} must be finite and positive")));
                }
            }
            RadiusDist::Uniform { lo, hi } => {
                if !(*lo > 0.0) || !hi.is_finite() || lo > hi {
                    return Err(err(format!("radius range [{lo}, {hi}] is invalid")));
                }
            }
        }
        if self.upper() > cap {
            return Err(err(format!(
                "radius upper bound {} exceeds the cap {}",
                self.upper(),
                cap
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            RadiusDist::Constant { value } => *value,
            RadiusDist::Uniform { lo, hi } => {
                if lo == hi {
                    *lo
                } else {
                    rng.random_range(*lo..*hi)
                }
            }
        }
    }
}

fn default_radius_cap() -> f64 {
    1.0
}

/// Sampling law for environments: spatial dimension, Poisson intensity of
/// centers per unit space-time volume, and the mark laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub dimension: usize,
    pub intensity: f64,
    pub amplitude: AmplitudeDist,
    pub temporal_radius: RadiusDist,
    pub spatial_radius: RadiusDist,
    /// Hard caps on mark radii. The sampling window is padded by exactly
    /// these, which is what makes fields exact inside the query window.
    #[serde(default = "default_radius_cap")]
    pub max_temporal_radius: f64,
    #[serde(default = "default_radius_cap")]
    pub max_spatial_radius: f64,
}

impl EnvironmentSpec {
    /// Intensity-one environment with uniform [-1, 1] amplitudes and unit
    /// radii; the default subject of the statistical experiments.
    pub fn standard(dimension: usize) -> Self {
        EnvironmentSpec {
            dimension,
            intensity: 1.0,
            amplitude: AmplitudeDist::Uniform { lo: -1.0, hi: 1.0 },
            temporal_radius: RadiusDist::Constant { value: 1.0 },
            spatial_radius: RadiusDist::Constant { value: 1.0 },
            max_temporal_radius: 1.0,
            max_spatial_radius: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.dimension < 1 || self.dimension > 2 {
            return Err(EnvError::InvalidSpec {
                field: "dimension",
                message: format!("dimension {} not in 1..=2", self.dimension),
            });
        }
        if !(self.intensity >= 0.0) || !self.intensity.is_finite() {
            return Err(EnvError::InvalidSpec {
                field: "intensity",
                message: format!("intensity {} must be finite and >= 0", self.intensity),
            });
        }
        if !(self.max_temporal_radius > 0.0) || !(self.max_spatial_radius > 0.0) {
            return Err(EnvError::InvalidSpec {
                field: "max_radius",
                message: "radius caps must be positive".to_string(),
            });
        }
        self.amplitude.validate()?;
        self.temporal_radius
            .validate("temporal_radius", self.max_temporal_radius)?;
        self.spatial_radius
            .validate("spatial_radius", self.max_spatial_radius)?;
        Ok(())
    }
}

/// One bump: separable profile a * g(s/r_t) * h(|u|/r_x) with temporal
/// factor g(q) = (1-q^2)^2 and spatial factor h(q) = (1-q^2)^3 for q < 1,
/// zero outside. h keeps two continuous spatial derivatives across the
/// support boundary, which the field-regularity contract needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mark {
    pub amplitude: f64,
    pub r_t: f64,
    pub r_x: f64,
}

impl Mark {
    #[inline]
    fn temporal(&self, s: f64) -> f64 {
        let q = s / self.r_t;
        let tau = q * q;
        if tau >= 1.0 {
            0.0
        } else {
            let one = 1.0 - tau;
            one * one
        }
    }

    /// Profile value at time lag s and squared spatial distance |u|^2.
    #[inline]
    fn eval_sq(&self, s: f64, sq_dist: f64) -> f64 {
        let g = self.temporal(s);
        if g == 0.0 {
            return 0.0;
        }
        let sigma = sq_dist / (self.r_x * self.r_x);
        if sigma >= 1.0 {
            return 0.0;
        }
        let one = 1.0 - sigma;
        self.amplitude * g * one * one * one
    }

    /// Profile value at lag s and spatial offset u.
    pub fn eval(&self, s: f64, u: &[f64]) -> f64 {
        self.eval_sq(s, u.iter().map(|c| c * c).sum())
    }

    /// Accumulates the spatial gradient at (s, u) into out.
    pub fn accumulate_grad(&self, s: f64, u: &[f64], weight: f64, out: &mut [f64]) {
        let g = self.temporal(s);
        if g == 0.0 {
            return;
        }
        let rx2 = self.r_x * self.r_x;
        let sigma = u.iter().map(|c| c * c).sum::<f64>() / rx2;
        if sigma >= 1.0 {
            return;
        }
        // d/du of (1-sigma)^3 with sigma = |u|^2/r_x^2: -3(1-sigma)^2 * 2u/r_x^2.
        let one = 1.0 - sigma;
        let factor = weight * self.amplitude * g * (-6.0 * one * one / rx2);
        for (o, c) in out.iter_mut().zip(u) {
            *o += factor * c;
        }
    }

    /// Accumulates the spatial Hessian (row-major d x d) at (s, u) into out.
    pub fn accumulate_hess(&self, s: f64, u: &[f64], out: &mut [f64]) {
        let g = self.temporal(s);
        if g == 0.0 {
            return;
        }
        let rx2 = self.r_x * self.r_x;
        let sigma = u.iter().map(|c| c * c).sum::<f64>() / rx2;
        if sigma >= 1.0 {
            return;
        }
        let one = 1.0 - sigma;
        let a = self.amplitude * g;
        // Hess of (1-sigma)^3: (-6 one^2 / rx2) I + (24 one / rx2^2) u u^T.
        let diag = a * (-6.0 * one * one / rx2);
        let outer = a * (24.0 * one / (rx2 * rx2));
        let d = u.len();
        for i in 0..d {
            for j in 0..d {
                let mut v = outer * u[i] * u[j];
                if i == j {
                    v += diag;
                }
                out[i * d + j] += v;
            }
        }
    }

    /// Sup over the support of the operator norm of the spatial Hessian.
    /// For this profile family the maximum sits at the bump center where
    /// the curvature is 6|a|/r_x^2 on every axis.
    pub fn hess_sup_norm(&self) -> f64 {
        6.0 * self.amplitude.abs() / (self.r_x * self.r_x)
    }
}

/// One realized center with its mark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub t: f64,
    pub x: Vec<f64>,
    #[serde(flatten)]
    pub mark: Mark,
}

/// Box window, optionally sheared: the region { (t, x + t*shear) : t in
/// [t_lo, t_hi], x in the box }. Freshly sampled windows have zero shear;
/// shearing a cloud accumulates shear here so containment stays exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub t_lo: f64,
    pub t_hi: f64,
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub shear: Vec<f64>,
}

impl Window {
    /// Plain axis-aligned window.
    pub fn boxed(t_lo: f64, t_hi: f64, x_lo: Vec<f64>, x_hi: Vec<f64>) -> Self {
        let d = x_lo.len();
        Window {
            t_lo,
            t_hi,
            x_lo,
            x_hi,
            shear: vec![0.0; d],
        }
    }

    /// Symmetric window [0, t] x [-half, half]^d.
    pub fn symmetric(t: f64, half: f64, dimension: usize) -> Self {
        Window::boxed(0.0, t, vec![-half; dimension], vec![half; dimension])
    }

    pub fn dimension(&self) -> usize {
        self.x_lo.len()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let d = self.x_lo.len();
        if self.x_hi.len() != d || self.shear.len() != d {
            return Err(EnvError::InvalidWindow(
                "x_lo, x_hi, shear must share a length".to_string(),
            ));
        }
        let finite = self.t_lo.is_finite()
            && self.t_hi.is_finite()
            && self
                .x_lo
                .iter()
                .chain(&self.x_hi)
                .chain(&self.shear)
                .all(|c| c.is_finite());
        if !finite {
            return Err(EnvError::InvalidWindow("coordinates must be finite".to_string()));
        }
        if !(self.t_lo < self.t_hi) || self.x_lo.iter().zip(&self.x_hi).any(|(l, h)| !(l < h)) {
            return Err(EnvError::InvalidWindow(
                "window must have positive extent on every axis".to_string(),
            ));
        }
        Ok(())
    }

    fn pad(&self, pad_t: f64, pad_x: f64) -> Window {
        Window {
            t_lo: self.t_lo - pad_t,
            t_hi: self.t_hi + pad_t,
            x_lo: self.x_lo.iter().map(|c| c - pad_x).collect(),
            x_hi: self.x_hi.iter().map(|c| c + pad_x).collect(),
            shear: self.shear.clone(),
        }
    }

    /// Point containment in the sheared region.
    pub fn contains(&self, t: f64, x: &[f64]) -> bool {
        if t < self.t_lo || t > self.t_hi {
            return false;
        }
        x.iter()
            .zip(self.x_lo.iter().zip(&self.x_hi))
            .zip(&self.shear)
            .all(|((c, (lo, hi)), s)| {
                let u = c - t * s;
                u >= *lo && u <= *hi
            })
    }

    /// True when the axis-aligned box [t0, t1] x prod [lo_j, hi_j] lies
    /// inside the sheared region.
    fn contains_box(&self, t0: f64, t1: f64, lo: &[f64], hi: &[f64]) -> bool {
        if t0 < self.t_lo || t1 > self.t_hi {
            return false;
        }
        for j in 0..lo.len() {
            let s = self.shear[j];
            let drift_min = (t0 * s).min(t1 * s);
            let drift_max = (t0 * s).max(t1 * s);
            if lo[j] - drift_max < self.x_lo[j] || hi[j] - drift_min > self.x_hi[j] {
                return false;
            }
        }
        true
    }

    /// Axis-aligned hull of the sheared region.
    fn hull(&self) -> (f64, f64, Vec<f64>, Vec<f64>) {
        let lo: Vec<f64> = self
            .x_lo
            .iter()
            .zip(&self.shear)
            .map(|(c, s)| c + (self.t_lo * s).min(self.t_hi * s))
            .collect();
        let hi: Vec<f64> = self
            .x_hi
            .iter()
            .zip(&self.shear)
            .map(|(c, s)| c + (self.t_lo * s).max(self.t_hi * s))
            .collect();
        (self.t_lo, self.t_hi, lo, hi)
    }

    fn sheared_by(&self, v: &[f64]) -> Window {
        Window {
            t_lo: self.t_lo,
            t_hi: self.t_hi,
            x_lo: self.x_lo.clone(),
            x_hi: self.x_hi.clone(),
            shear: self.shear.iter().zip(v).map(|(s, w)| s + w).collect(),
        }
    }

    /// Space-time volume of the un-sheared box (shear preserves volume).
    pub fn volume(&self) -> f64 {
        (self.t_hi - self.t_lo)
            * self
                .x_lo
                .iter()
                .zip(&self.x_hi)
                .map(|(l, h)| h - l)
                .product::<f64>()
    }
}

/// A realized environment: centers, marks, window, and the bin index that
/// makes evaluation local.
#[derive(Debug, Clone)]
pub struct PoissonCloud {
    spec: EnvironmentSpec,
    seed: u64,
    window: Window,
    padded: Window,
    points: Vec<Point>,
    index: BinIndex,
}

/// Serialized form of a cloud; bit-exact JSON round trips.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CloudRecord {
    format_version: u32,
    spec: EnvironmentSpec,
    seed: u64,
    window: Window,
    points: Vec<Point>,
}

/// Draws the environment over `window` padded by the radius caps. The point
/// count comes from one dedicated stream and each point from its own stream
/// keyed by (seed, point index), so the sample is independent of evaluation
/// order and identical under any parallelism.
pub fn sample_environment(
    spec: &EnvironmentSpec,
    window: &Window,
    seed: u64,
) -> Result<PoissonCloud, EnvError> {
    spec.validate()?;
    window.validate()?;
    if window.dimension() != spec.dimension {
        return Err(EnvError::DimensionMismatch {
            expected: spec.dimension,
            got: window.dimension(),
        });
    }
    if window.shear.iter().any(|s| *s != 0.0) {
        return Err(EnvError::InvalidWindow(
            "sampling windows must be un-sheared".to_string(),
        ));
    }
    let padded = window.pad(spec.max_temporal_radius, spec.max_spatial_radius);
    let mean = spec.intensity * padded.volume();
    if mean > MAX_EXPECTED_POINTS {
        return Err(EnvError::TooLarge {
            expected: mean,
            limit: MAX_EXPECTED_POINTS,
        });
    }

    let count = if mean > 0.0 {
        let poisson = rand_distr::Poisson::new(mean).expect("positive mean");
        poisson.sample(&mut stream_rng(seed, STREAM_COUNT, 0)).round() as u64
    } else {
        0
    };

    let d = spec.dimension;
    let mut points = Vec::with_capacity(count as usize);
    for i in 0..count {
        let mut rng = stream_rng(seed, STREAM_POINT, i);
        let t = rng.random_range(padded.t_lo..padded.t_hi);
        let mut x = Vec::with_capacity(d);
        for j in 0..d {
            x.push(rng.random_range(padded.x_lo[j]..padded.x_hi[j]));
        }
        let amplitude = spec.amplitude.sample(&mut rng);
        let r_t = spec.temporal_radius.sample(&mut rng);
        let r_x = spec.spatial_radius.sample(&mut rng);
        points.push(Point {
            t,
            x,
            mark: Mark { amplitude, r_t, r_x },
        });
    }

    PoissonCloud::assemble(spec.clone(), seed, window.clone(), padded, points)
}

impl PoissonCloud {
    fn assemble(
        spec: EnvironmentSpec,
        seed: u64,
        window: Window,
        padded: Window,
        points: Vec<Point>,
    ) -> Result<PoissonCloud, EnvError> {
        let side = spec.max_temporal_radius.max(spec.max_spatial_radius);
        let (t0, t1, xlo, xhi) = padded.hull();
        let index = BinIndex::build(side, t0, t1, &xlo, &xhi, &points);
        Ok(PoissonCloud {
            spec,
            seed,
            window,
            padded,
            points,
            index,
        })
    }

    /// Builds a cloud from explicit points (deterministic test setups and
    /// de-serialization). Points must respect the radius caps and lie in
    /// the padded window.
    pub fn from_points(
        spec: &EnvironmentSpec,
        window: &Window,
        seed: u64,
        points: Vec<Point>,
    ) -> Result<PoissonCloud, EnvError> {
        spec.validate()?;
        window.validate()?;
        if window.dimension() != spec.dimension {
            return Err(EnvError::DimensionMismatch {
                expected: spec.dimension,
                got: window.dimension(),
            });
        }
        let padded = window.pad(spec.max_temporal_radius, spec.max_spatial_radius);
        for (i, p) in points.iter().enumerate() {
            let bad_mark = !(p.mark.r_t > 0.0)
                || !(p.mark.r_x > 0.0)
                || p.mark.r_t > spec.max_temporal_radius
                || p.mark.r_x > spec.max_spatial_radius
                || !p.mark.amplitude.is_finite();
            if p.x.len() != spec.dimension || bad_mark || !padded.contains(p.t, &p.x) {
                return Err(EnvError::PointOutsideWindow { index: i });
            }
        }
        PoissonCloud::assemble(spec.clone(), seed, window.clone(), padded, points)
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn dimension(&self) -> usize {
        self.spec.dimension
    }

    fn check_query(&self, v: &[f64], t: f64, x: &[f64]) -> Result<(), EnvError> {
        if x.len() != self.spec.dimension || v.len() != self.spec.dimension {
            return Err(EnvError::DimensionMismatch {
                expected: self.spec.dimension,
                got: x.len(),
            });
        }
        let rt = self.spec.max_temporal_radius;
        let rx = self.spec.max_spatial_radius;
        let lo: Vec<f64> = x
            .iter()
            .zip(v)
            .map(|(c, w)| c - (rx + rt * w.abs()))
            .collect();
        let hi: Vec<f64> = x
            .iter()
            .zip(v)
            .map(|(c, w)| c + (rx + rt * w.abs()))
            .collect();
        if !self.padded.contains_box(t - rt, t + rt, &lo, &hi) {
            return Err(EnvError::OutOfDomain { t, x: x.to_vec() });
        }
        Ok(())
    }

    fn for_each_candidate(&self, v: &[f64], t: f64, x: &[f64], mut f: impl FnMut(&Point)) {
        let rt = self.spec.max_temporal_radius;
        let rx = self.spec.max_spatial_radius;
        let reach: Vec<f64> = v.iter().map(|w| rx + rt * w.abs()).collect();
        self.index.for_each_in_reach(t, x, rt, &reach, |id| {
            f(&self.points[id as usize]);
        });
    }

    /// Potential F(t, x): sum of all bumps at the query.
    pub fn eval_f(&self, t: f64, x: &[f64]) -> Result<f64, EnvError> {
        self.eval_f_sheared(&vec![0.0; self.spec.dimension], t, x)
    }

    /// Frame-sheared potential F_v(t, x) = sum_i phi_i(t - t_i, x + (t - t_i) v - x_i).
    pub fn eval_f_sheared(&self, v: &[f64], t: f64, x: &[f64]) -> Result<f64, EnvError> {
        self.check_query(v, t, x)?;
        let mut sum = 0.0;
        self.for_each_candidate(v, t, x, |p| {
            let s = t - p.t;
            if s.abs() >= p.mark.r_t {
                return;
            }
            let sq: f64 = x
                .iter()
                .zip(&p.x)
                .zip(v)
                .map(|((c, y), w)| {
                    let u = c + s * w - y;
                    u * u
                })
                .sum();
            sum += p.mark.eval_sq(s, sq);
        });
        Ok(sum)
    }

    /// Spatial gradient of F at (t, x).
    pub fn eval_grad_f(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, EnvError> {
        let v = vec![0.0; self.spec.dimension];
        self.check_query(&v, t, x)?;
        let mut out = vec![0.0; self.spec.dimension];
        let mut u = vec![0.0; self.spec.dimension];
        self.for_each_candidate(&v, t, x, |p| {
            let s = t - p.t;
            if s.abs() >= p.mark.r_t {
                return;
            }
            for (j, (c, y)) in x.iter().zip(&p.x).enumerate() {
                u[j] = c - y;
            }
            p.mark.accumulate_grad(s, &u, 1.0, &mut out);
        });
        Ok(out)
    }

    /// Spatial Hessian of F at (t, x), row-major d x d.
    pub fn eval_hess_f(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, EnvError> {
        let v = vec![0.0; self.spec.dimension];
        self.check_query(&v, t, x)?;
        let d = self.spec.dimension;
        let mut out = vec![0.0; d * d];
        let mut u = vec![0.0; d];
        self.for_each_candidate(&v, t, x, |p| {
            let s = t - p.t;
            if s.abs() >= p.mark.r_t {
                return;
            }
            for (j, (c, y)) in x.iter().zip(&p.x).enumerate() {
                u[j] = c - y;
            }
            p.mark.accumulate_hess(s, &u, &mut out);
        });
        Ok(out)
    }

    /// Auxiliary field Theta(t, x) = sum_i (t - t_i) grad phi_i(t - t_i, x - x_i),
    /// the shear derivative of the frame family at v = 0.
    pub fn eval_theta(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, EnvError> {
        self.eval_theta_sheared(&vec![0.0; self.spec.dimension], t, x)
    }

    /// Theta in the moving frame: sum_i (t - t_i) grad phi_i at the sheared
    /// offset x + (t - t_i) v - x_i.
    pub fn eval_theta_sheared(&self, v: &[f64], t: f64, x: &[f64]) -> Result<Vec<f64>, EnvError> {
        self.check_query(v, t, x)?;
        let d = self.spec.dimension;
        let mut out = vec![0.0; d];
        let mut u = vec![0.0; d];
        self.for_each_candidate(v, t, x, |p| {
            let s = t - p.t;
            if s.abs() >= p.mark.r_t {
                return;
            }
            for (j, ((c, y), w)) in x.iter().zip(&p.x).zip(v).enumerate() {
                u[j] = c + s * w - y;
            }
            p.mark.accumulate_grad(s, &u, s, &mut out);
        });
        Ok(out)
    }

    /// Visits every point whose center lies within reach_t in time and
    /// within reach_x per spatial axis of the query (superset of the bumps
    /// that can touch it; callers apply their own kernel).
    pub fn for_each_point_near(
        &self,
        t: f64,
        x: &[f64],
        reach_t: f64,
        reach_x: &[f64],
        mut f: impl FnMut(&Point),
    ) {
        self.index.for_each_in_reach(t, x, reach_t, reach_x, |id| {
            f(&self.points[id as usize]);
        });
    }

    /// Image of the cloud under the shear (t, x) -> (t, x + t v); the window
    /// records the accumulated shear so exactness checks stay tight.
    pub fn shear(&self, v: &[f64]) -> Result<PoissonCloud, EnvError> {
        if v.len() != self.spec.dimension {
            return Err(EnvError::DimensionMismatch {
                expected: self.spec.dimension,
                got: v.len(),
            });
        }
        let points: Vec<Point> = self
            .points
            .iter()
            .map(|p| Point {
                t: p.t,
                x: p.x.iter().zip(v).map(|(c, w)| c + p.t * w).collect(),
                mark: p.mark,
            })
            .collect();
        let window = self.window.sheared_by(v);
        let padded = self.padded.sheared_by(v);
        PoissonCloud::assemble(self.spec.clone(), self.seed, window, padded, points)
    }

    /// Versioned JSON record; numbers round-trip bit-exactly.
    pub fn to_json(&self) -> String {
        let record = CloudRecord {
            format_version: crate::FORMAT_VERSION,
            spec: self.spec.clone(),
            seed: self.seed,
            window: self.window.clone(),
            points: self.points.clone(),
        };
        serde_json::to_string_pretty(&record).expect("cloud serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<PoissonCloud, EnvError> {
        let record: CloudRecord =
            serde_json::from_str(text).map_err(|e| EnvError::BadRecord(e.to_string()))?;
        if record.format_version != crate::FORMAT_VERSION {
            return Err(EnvError::BadRecord(format!(
                "format_version {} unsupported (expected {})",
                record.format_version,
                crate::FORMAT_VERSION
            )));
        }
        record.window.validate().map_err(|e| EnvError::BadRecord(e.to_string()))?;
        let padded = record
            .window
            .pad(record.spec.max_temporal_radius, record.spec.max_spatial_radius);
        PoissonCloud::assemble(record.spec, record.seed, record.window, padded, record.points)
    }

    /// Content hash of the serialized cloud, used as the environment id in
    /// manifests and solver artifacts.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_json().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Potential consumed by the solver: a sampled cloud, or a constant field
/// used as a deterministic test hook (translation invariant, adds c per
/// unit time to every path).
#[derive(Debug, Clone)]
pub enum Potential {
    Cloud(PoissonCloud),
    Uniform { dimension: usize, value: f64 },
}

impl Potential {
    pub fn dimension(&self) -> usize {
        match self {
            Potential::Cloud(c) => c.dimension(),
            Potential::Uniform { dimension, .. } => *dimension,
        }
    }

    pub fn eval_f_sheared(&self, v: &[f64], t: f64, x: &[f64]) -> Result<f64, EnvError> {
        match self {
            Potential::Cloud(c) => c.eval_f_sheared(v, t, x),
            Potential::Uniform { value, .. } => Ok(*value),
        }
    }

    pub fn eval_f(&self, t: f64, x: &[f64]) -> Result<f64, EnvError> {
        match self {
            Potential::Cloud(c) => c.eval_f(t, x),
            Potential::Uniform { value, .. } => Ok(*value),
        }
    }

    pub fn eval_theta_sheared(&self, v: &[f64], t: f64, x: &[f64]) -> Result<Vec<f64>, EnvError> {
        match self {
            Potential::Cloud(c) => c.eval_theta_sheared(v, t, x),
            Potential::Uniform { dimension, .. } => Ok(vec![0.0; *dimension]),
        }
    }

    pub fn content_hash(&self) -> String {
        match self {
            Potential::Cloud(c) => c.content_hash(),
            Potential::Uniform { dimension, value } => {
                format!("uniform-d{dimension}-{value}")
            }
        }
    }
}
