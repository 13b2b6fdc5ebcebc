//! Statistical audits of the field law. Both are report-only: they estimate
//! the quantities the theory requires to be finite (exponential moments of
//! unit-box sups, linear growth of box sups) and flag drift, never panic.

use super::{sample_environment, EnvError, EnvironmentSpec, Window};
use crate::rng::{stream_rng, STREAM_AUDIT};
use rand::RngCore;
use serde::{Deserialize, Serialize};

/// Empirical moment generating function of sup |F| over unit boxes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentAudit {
    pub lambdas: Vec<f64>,
    /// Empirical E exp(lambda sup|F|) over the first half of the samples.
    pub mgf_half: Vec<f64>,
    /// Same over all samples.
    pub mgf_full: Vec<f64>,
    pub relative_drift: Vec<f64>,
    pub samples: usize,
    /// True when every estimate is finite and the half/full drift stays
    /// under 50 percent: the crude signature of a finite moment.
    pub stable: bool,
}

/// Sup of |F| over the unit query box, sampled on an interior lattice.
fn box_sup(spec: &EnvironmentSpec, seed: u64, grid_per_axis: usize) -> Result<f64, EnvError> {
    let d = spec.dimension;
    let window = Window::boxed(0.0, 1.0, vec![0.0; d], vec![1.0; d]);
    let cloud = sample_environment(spec, &window, seed)?;
    let n = grid_per_axis;
    let mut sup = 0.0f64;
    let mut counter = vec![0usize; d + 1];
    loop {
        let t = (counter[0] as f64 + 0.5) / n as f64;
        let x: Vec<f64> = (0..d).map(|j| (counter[j + 1] as f64 + 0.5) / n as f64).collect();
        sup = sup.max(cloud.eval_f(t, &x)?.abs());
        let mut axis = d + 1;
        loop {
            if axis == 0 {
                return Ok(sup);
            }
            axis -= 1;
            counter[axis] += 1;
            if counter[axis] < n {
                break;
            }
            counter[axis] = 0;
        }
    }
}

/// Estimates E exp(lambda sup|F|) over unit boxes at each lambda, comparing
/// half-sample and full-sample estimates for stability.
pub fn moment_audit(
    spec: &EnvironmentSpec,
    lambdas: &[f64],
    samples: usize,
    seed: u64,
) -> Result<MomentAudit, EnvError> {
    spec.validate()?;
    let mut sups = Vec::with_capacity(samples);
    for i in 0..samples {
        let env_seed = stream_rng(seed, STREAM_AUDIT, i as u64).next_u64();
        sups.push(box_sup(spec, env_seed, 6)?);
    }
    let mgf = |slice: &[f64], lambda: f64| -> f64 {
        slice.iter().map(|s| (lambda * s).exp()).sum::<f64>() / slice.len().max(1) as f64
    };
    let half = &sups[..samples / 2];
    let mgf_half: Vec<f64> = lambdas.iter().map(|l| mgf(half, *l)).collect();
    let mgf_full: Vec<f64> = lambdas.iter().map(|l| mgf(&sups, *l)).collect();
    let relative_drift: Vec<f64> = mgf_half
        .iter()
        .zip(&mgf_full)
        .map(|(h, f)| (h - f).abs() / f.max(f64::MIN_POSITIVE))
        .collect();
    let stable = mgf_full.iter().all(|m| m.is_finite())
        && relative_drift.iter().all(|d| *d < 0.5);
    Ok(MomentAudit {
        lambdas: lambdas.to_vec(),
        mgf_half,
        mgf_full,
        relative_drift,
        samples,
        stable,
    })
}

/// Growth of E sup |F| over [0,1] x [-R, R]^d against R.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthAudit {
    pub sizes: Vec<f64>,
    pub mean_sup: Vec<f64>,
    /// Least-squares fit mean_sup ~ slope * R + intercept.
    pub slope: f64,
    pub intercept: f64,
    /// Largest |fit - observed| / (1 + observed) over the sizes.
    pub max_residual: f64,
    pub samples: usize,
}

/// Estimates E sup |F| over growing boxes and fits a line; sublinear or
/// superlinear growth shows up as a large residual.
pub fn linear_growth_audit(
    spec: &EnvironmentSpec,
    sizes: &[f64],
    samples: usize,
    seed: u64,
) -> Result<GrowthAudit, EnvError> {
    spec.validate()?;
    let d = spec.dimension;
    let mut mean_sup = Vec::with_capacity(sizes.len());
    for (si, size) in sizes.iter().enumerate() {
        let mut acc = 0.0;
        for i in 0..samples {
            let env_seed =
                stream_rng(seed, STREAM_AUDIT, (1 + si * samples + i) as u64).next_u64();
            let window = Window::boxed(0.0, 1.0, vec![-size; d], vec![*size; d]);
            let cloud = sample_environment(spec, &window, env_seed)?;
            // Lattice of spacing about 0.4 per axis, interior points.
            let n_x = ((2.0 * size) / 0.4).ceil() as usize + 1;
            let mut sup = 0.0f64;
            for ti in 0..3 {
                let t = (ti as f64 + 0.5) / 3.0;
                let mut counter = vec![0usize; d];
                'space: loop {
                    let x: Vec<f64> = (0..d)
                        .map(|j| -size + (counter[j] as f64 + 0.5) * (2.0 * size) / n_x as f64)
                        .collect();
                    sup = sup.max(cloud.eval_f(t, &x)?.abs());
                    let mut axis = d;
                    loop {
                        if axis == 0 {
                            break 'space;
                        }
                        axis -= 1;
                        counter[axis] += 1;
                        if counter[axis] < n_x {
                            break;
                        }
                        counter[axis] = 0;
                    }
                }
            }
            acc += sup;
        }
        mean_sup.push(acc / samples as f64);
    }
    let n = sizes.len() as f64;
    let sx: f64 = sizes.iter().sum();
    let sy: f64 = mean_sup.iter().sum();
    let sxx: f64 = sizes.iter().map(|s| s * s).sum();
    let sxy: f64 = sizes.iter().zip(&mean_sup).map(|(s, m)| s * m).sum();
    let denom = n * sxx - sx * sx;
    let slope = if denom != 0.0 { (n * sxy - sx * sy) / denom } else { 0.0 };
    let intercept = (sy - slope * sx) / n;
    let max_residual = sizes
        .iter()
        .zip(&mean_sup)
        .map(|(s, m)| ((slope * s + intercept) - m).abs() / (1.0 + m))
        .fold(0.0f64, f64::max)
        ;
    Ok(GrowthAudit {
        sizes: sizes.to_vec(),
        mean_sup,
        slope,
        intercept,
        max_residual,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moment_audit_is_stable_for_the_standard_law() {
        let spec = EnvironmentSpec::standard(1);
        let audit = moment_audit(&spec, &[0.25, 0.5, 1.0], 24, 100).unwrap();
        assert!(audit.stable, "drift {:?}", audit.relative_drift);
        assert_eq!(audit.mgf_full.len(), 3);
        // Larger lambda can only raise the estimate.
        assert!(audit.mgf_full[2] >= audit.mgf_full[0]);
        assert!(audit.mgf_full[0] >= 1.0 - 1e-12);
    }

    #[test]
    fn growth_audit_reports_a_bounded_linear_fit() {
        let spec = EnvironmentSpec::standard(1);
        let audit = linear_growth_audit(&spec, &[2.0, 4.0, 8.0], 4, 200).unwrap();
        assert!(audit.slope.is_finite());
        assert!(audit.max_residual < 0.5, "residual {}", audit.max_residual);
        assert!(audit.mean_sup.iter().all(|m| *m >= 0.0));
    }
}
