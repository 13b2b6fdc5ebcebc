//! Convex kinetic costs L(v), their derivatives, and convex conjugates.
//!
//! Both families are radial: L(v) = P(|v|) for a convex polynomial P with
//! nonnegative coefficients, degree >= 2, positive leading coefficient, and
//! no linear term (a linear term would break twice-differentiability at the
//! origin). Radiality gives closed forms for gradients, Hessians, and the
//! sup norm of the Hessian over balls, which the second-order audits use.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KineticsError {
    #[error("invalid kinetic cost: {0}")]
    Invalid(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("conjugate solve failed to converge at |p| = {0}")]
    ConjugateDiverged(f64),
    #[error("discrete conjugate needs at least one sample")]
    EmptySamples,
}

/// Kinetic cost family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KineticEnergy {
    /// L(v) = scale * |v|^2 / 2.
    Quadratic { scale: f64 },
    /// L(v) = sum_k coeffs[k] * |v|^k; coeffs[1] must be zero.
    PolynomialNorm { coeffs: Vec<f64> },
}

impl KineticEnergy {
    pub fn quadratic(scale: f64) -> Self {
        KineticEnergy::Quadratic { scale }
    }

    pub fn polynomial(coeffs: Vec<f64>) -> Self {
        KineticEnergy::PolynomialNorm { coeffs }
    }

    pub fn validate(&self) -> Result<(), KineticsError> {
        match self {
            KineticEnergy::Quadratic { scale } => {
                if !(*scale > 0.0) || !scale.is_finite() {
                    return Err(KineticsError::Invalid(format!(
                        "quadratic scale {scale} must be finite and positive"
                    )));
                }
            }
            KineticEnergy::PolynomialNorm { coeffs } => {
                let p = coeffs.len().saturating_sub(1);
                if p < 2 {
                    return Err(KineticsError::Invalid(format!(
                        "degree {p} < 2: superlinearity fails"
                    )));
                }
                if coeffs.iter().any(|a| !a.is_finite() || *a < 0.0) {
                    return Err(KineticsError::Invalid(
                        "coefficients must be finite and nonnegative".to_string(),
                    ));
                }
                if !(coeffs[p] > 0.0) {
                    return Err(KineticsError::Invalid(
                        "leading coefficient must be positive".to_string(),
                    ));
                }
                if coeffs[1] != 0.0 {
                    return Err(KineticsError::Invalid(
                        "linear coefficient must be zero (cost must be twice differentiable at 0)"
                            .to_string(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Radial profile P(rho).
    fn p(&self, rho: f64) -> f64 {
        match self {
            KineticEnergy::Quadratic { scale } => 0.5 * scale * rho * rho,
            KineticEnergy::PolynomialNorm { coeffs } => {
                let mut acc = 0.0;
                for a in coeffs.iter().rev() {
                    acc = acc * rho + a;
                }
                acc
            }
        }
    }

    /// P'(rho).
    fn dp(&self, rho: f64) -> f64 {
        match self {
            KineticEnergy::Quadratic { scale } => scale * rho,
            KineticEnergy::PolynomialNorm { coeffs } => {
                let mut acc = 0.0;
                for (k, a) in coeffs.iter().enumerate().rev() {
                    if k == 0 {
                        continue;
                    }
                    acc += k as f64 * a * rho.powi(k as i32 - 1);
                }
                acc
            }
        }
    }

    /// P''(rho).
    fn d2p(&self, rho: f64) -> f64 {
        match self {
            KineticEnergy::Quadratic { scale } => *scale,
            KineticEnergy::PolynomialNorm { coeffs } => {
                let mut acc = 0.0;
                for (k, a) in coeffs.iter().enumerate() {
                    if k >= 2 {
                        acc += (k * (k - 1)) as f64 * a * rho.powi(k as i32 - 2);
                    }
                }
                acc
            }
        }
    }

    /// P'(rho)/rho, continued through rho = 0 (the transverse Hessian
    /// eigenvalue; finite because the linear coefficient vanishes).
    fn slope_over_rho(&self, rho: f64) -> f64 {
        match self {
            KineticEnergy::Quadratic { scale } => *scale,
            KineticEnergy::PolynomialNorm { coeffs } => {
                let mut acc = 0.0;
                for (k, a) in coeffs.iter().enumerate() {
                    if k >= 2 {
                        acc += k as f64 * a * rho.powi(k as i32 - 2);
                    }
                }
                acc
            }
        }
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        self.p(norm(v))
    }

    pub fn grad(&self, v: &[f64]) -> Vec<f64> {
        let rho = norm(v);
        let s = self.slope_over_rho(rho);
        v.iter().map(|c| s * c).collect()
    }

    /// Row-major d x d Hessian: s(rho) I + (P'' - s)/rho^2 * v v^T.
    pub fn hess(&self, v: &[f64]) -> Vec<f64> {
        let d = v.len();
        let rho = norm(v);
        let s = self.slope_over_rho(rho);
        let mut out = vec![0.0; d * d];
        if rho == 0.0 {
            for i in 0..d {
                out[i * d + i] = s;
            }
            return out;
        }
        let z = (self.d2p(rho) - s) / (rho * rho);
        for i in 0..d {
            for j in 0..d {
                let mut h = z * v[i] * v[j];
                if i == j {
                    h += s;
                }
                out[i * d + j] = h;
            }
        }
        out
    }

    /// Operator norm of the Hessian at radius rho: max of the transverse
    /// and radial eigenvalues (equal to P''(rho) for this family, but both
    /// are computed).
    pub fn hess_norm_at_radius(&self, rho: f64) -> f64 {
        self.slope_over_rho(rho).max(self.d2p(rho))
    }

    /// Sup of the Hessian norm over the ball of radius delta around v.
    /// Valid because the Hessian norm is radially nondecreasing for
    /// nonnegative coefficients.
    pub fn hess_sup_in_ball(&self, v: &[f64], delta: f64) -> f64 {
        self.hess_norm_at_radius(norm(v) + delta)
    }

    /// Convex conjugate H(p) = sup_v <p, v> - L(v). Radial reduction: solve
    /// P'(rho) = |p| by safeguarded Newton (tolerance 1e-10 on the
    /// stationarity residual).
    pub fn legendre(&self, p: &[f64]) -> Result<f64, KineticsError> {
        let r = norm(p);
        match self {
            KineticEnergy::Quadratic { scale } => Ok(0.5 * r * r / scale),
            KineticEnergy::PolynomialNorm { .. } => {
                let rho = self.conjugate_radius(r)?;
                Ok(r * rho - self.p(rho))
            }
        }
    }

    /// Maximizer radius of the conjugate problem at |p| = r.
    fn conjugate_radius(&self, r: f64) -> Result<f64, KineticsError> {
        const TOL: f64 = 1e-10;
        if r <= self.dp(0.0) {
            return Ok(0.0);
        }
        let mut hi = 1.0;
        let mut grow = 0;
        while self.dp(hi) < r {
            hi *= 2.0;
            grow += 1;
            if grow > 200 {
                return Err(KineticsError::ConjugateDiverged(r));
            }
        }
        let mut lo = 0.0;
        let mut rho = hi.min(1.0);
        for _ in 0..200 {
            let f = self.dp(rho) - r;
            if f.abs() <= TOL * (1.0 + r.abs()) {
                return Ok(rho);
            }
            if f > 0.0 {
                hi = rho;
            } else {
                lo = rho;
            }
            let df = self.d2p(rho);
            let newton = if df > 0.0 { rho - f / df } else { f64::NAN };
            rho = if newton.is_finite() && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        Err(KineticsError::ConjugateDiverged(r))
    }

    /// Exposed default ball radius for the second-order audits.
    pub fn default_delta0() -> f64 {
        0.5
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Discrete conjugate max_i <p, v_i> - value_i over sampled pairs.
pub fn discrete_legendre(samples: &[(Vec<f64>, f64)], p: &[f64]) -> Result<f64, KineticsError> {
    if samples.is_empty() {
        return Err(KineticsError::EmptySamples);
    }
    let mut best = f64::NEG_INFINITY;
    for (v, value) in samples {
        if v.len() != p.len() {
            return Err(KineticsError::DimensionMismatch {
                expected: p.len(),
                got: v.len(),
            });
        }
        let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
        best = best.max(dot - value);
    }
    Ok(best)
}

/// One probe of the second-derivative ratio sup over a delta-ball of the
/// Hessian norm against the cost itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionProbe {
    pub radius: f64,
    pub ratio: f64,
}

/// Advisory report on the structural assumptions: superlinearity (by
/// construction for valid families) and boundedness of the Hessian-to-cost
/// ratio along a probe grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub delta0: f64,
    pub probes: Vec<AssumptionProbe>,
    /// True when the ratio sequence keeps rising through the last probes.
    pub diverging: bool,
    pub superlinear: bool,
}

/// Evaluates sup_{|r| <= delta0} |Hess L(v + r)| / L(v) at |v| = radius for
/// each probe radius and flags a rising tail. Advisory only.
pub fn check_assumptions(
    kin: &KineticEnergy,
    delta0: f64,
    probe_radii: &[f64],
) -> Result<AssumptionReport, KineticsError> {
    kin.validate()?;
    if !(delta0 > 0.0) {
        return Err(KineticsError::Invalid(format!(
            "delta0 {delta0} must be positive"
        )));
    }
    let mut probes = Vec::with_capacity(probe_radii.len());
    for &radius in probe_radii {
        if !(radius > 0.0) {
            return Err(KineticsError::Invalid(format!(
                "probe radius {radius} must be positive"
            )));
        }
        let denom = kin.p(radius);
        let ratio = if denom > 0.0 {
            kin.hess_norm_at_radius(radius + delta0) / denom
        } else {
            f64::INFINITY
        };
        probes.push(AssumptionProbe { radius, ratio });
    }
    let n = probes.len();
    let diverging = n >= 3 && {
        let tail_rising = probes[n - 1].ratio > probes[n - 2].ratio
            && probes[n - 2].ratio > probes[n - 3].ratio;
        tail_rising && probes[n - 1].ratio > 2.0 * probes[n - 3].ratio
    };
    Ok(AssumptionReport {
        delta0,
        probes,
        diverging,
        superlinear: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(kin: &KineticEnergy, v: &[f64], h: f64) -> Vec<f64> {
        (0..v.len())
            .map(|j| {
                let mut hi = v.to_vec();
                let mut lo = v.to_vec();
                hi[j] += h;
                lo[j] -= h;
                (kin.eval(&hi) - kin.eval(&lo)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn quadratic_forms() {
        let kin = KineticEnergy::quadratic(1.0);
        assert_eq!(kin.eval(&[0.5]), 0.125);
        assert_eq!(kin.grad(&[3.0, -4.0]), vec![3.0, -4.0]);
        let hess = kin.hess(&[3.0, -4.0]);
        assert_eq!(hess, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn quartic_example_values() {
        // L(v) = |v|^4 in one dimension: L(2) = 16, L'(2) = 32, L''(2) = 48.
        let kin = KineticEnergy::polynomial(vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(kin.eval(&[2.0]), 16.0);
        assert_eq!(kin.grad(&[2.0])[0], 32.0);
        assert_eq!(kin.hess(&[2.0])[0], 48.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let kin = KineticEnergy::polynomial(vec![0.3, 0.0, 0.7, 0.0, 0.25]);
        for v in [vec![0.7, -1.3], vec![0.0, 0.0], vec![2.0, 0.5]] {
            let g = kin.grad(&v);
            let fd = fd_grad(&kin, &v, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-6, "grad {a} vs fd {b}");
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences_of_gradient() {
        let kin = KineticEnergy::polynomial(vec![0.0, 0.0, 0.5, 0.2, 0.1]);
        let v = [0.9, -0.4];
        let hess = kin.hess(&v);
        let h = 1e-5;
        for j in 0..2 {
            let mut hi = v.to_vec();
            let mut lo = v.to_vec();
            hi[j] += h;
            lo[j] -= h;
            let ghi = kin.grad(&hi);
            let glo = kin.grad(&lo);
            for i in 0..2 {
                let fd = (ghi[i] - glo[i]) / (2.0 * h);
                assert!((hess[i * 2 + j] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn hessian_continuous_near_origin_with_cubic_term() {
        let kin = KineticEnergy::polynomial(vec![0.0, 0.0, 0.5, 1.0]);
        let near = kin.hess(&[1e-9, 1e-9]);
        let at = kin.hess(&[0.0, 0.0]);
        for (a, b) in near.iter().zip(&at) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn degenerate_degree_rejected() {
        assert!(KineticEnergy::polynomial(vec![0.0, 1.0]).validate().is_err());
        assert!(KineticEnergy::polynomial(vec![1.0]).validate().is_err());
        assert!(KineticEnergy::polynomial(vec![0.0, 0.5, 1.0]).validate().is_err());
        assert!(KineticEnergy::polynomial(vec![0.0, 0.0, 0.0]).validate().is_err());
        assert!(KineticEnergy::quadratic(0.0).validate().is_err());
    }

    #[test]
    fn conjugate_quadratic_self_dual() {
        let kin = KineticEnergy::quadratic(1.0);
        for p in [0.0, 0.3, 1.0, 4.2] {
            let h = kin.legendre(&[p]).unwrap();
            assert!((h - 0.5 * p * p).abs() < 1e-12);
        }
        let scaled = KineticEnergy::quadratic(2.0);
        assert!((scaled.legendre(&[3.0]).unwrap() - 9.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn conjugate_quartic_frozen_value() {
        // sup_x 4x - x^4 is attained at x = 1 with value 3.
        let kin = KineticEnergy::polynomial(vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        let h = kin.legendre(&[4.0]).unwrap();
        assert!((h - 3.0).abs() < 1e-9, "got {h}");
    }

    #[test]
    fn conjugate_at_zero_is_minus_constant() {
        let kin = KineticEnergy::polynomial(vec![0.7, 0.0, 0.0, 1.0]);
        let h = kin.legendre(&[0.0]).unwrap();
        assert!((h + 0.7).abs() < 1e-12);
    }

    #[test]
    fn fenchel_young_with_equality_at_gradient() {
        let kin = KineticEnergy::polynomial(vec![0.1, 0.0, 0.4, 0.0, 0.2]);
        for v in [vec![0.0, 0.0], vec![1.1, -0.3], vec![-2.0, 0.7]] {
            let p = kin.grad(&v);
            let h = kin.legendre(&p).unwrap();
            let dot: f64 = v.iter().zip(&p).map(|(a, b)| a * b).sum();
            let gap = kin.eval(&v) + h - dot;
            assert!(gap.abs() < 1e-8, "equality gap {gap}");
        }
    }

    #[test]
    fn assumption_ratio_vanishes_for_polynomials() {
        let kin = KineticEnergy::polynomial(vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        let report = check_assumptions(&kin, 0.5, &[0.5, 1.0, 2.0, 4.0, 8.0, 16.0]).unwrap();
        assert!(!report.diverging);
        let first = report.probes.first().unwrap().ratio;
        let last = report.probes.last().unwrap().ratio;
        assert!(last < first);
    }

    #[test]
    fn discrete_conjugate_recovers_lattice_values() {
        let kin = KineticEnergy::quadratic(1.0);
        let samples: Vec<(Vec<f64>, f64)> = (-4..=4)
            .map(|i| {
                let v = 0.5 * i as f64;
                (vec![v], kin.eval(&[v]))
            })
            .collect();
        for p in [-1.5, -0.5, 0.0, 1.0, 1.5] {
            let h = discrete_legendre(&samples, &[p]).unwrap();
            assert!((h - 0.5 * p * p).abs() < 1e-12, "p={p} h={h}");
        }
        // Adding samples can only raise the discrete conjugate.
        let mut more = samples.clone();
        more.push((vec![0.25], kin.eval(&[0.25])));
        for p in [-1.3, 0.4, 0.9] {
            let a = discrete_legendre(&samples, &[p]).unwrap();
            let b = discrete_legendre(&more, &[p]).unwrap();
            assert!(b >= a - 1e-15);
        }
    }
}
