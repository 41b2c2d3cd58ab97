//! Precision benchmarks and numeric checks on the likelihood models.
//!
//! Everything here differentiates the model's pmf numerically, so it stays
//! independent of the amplitude algebra it is checking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{LikelihoodModel, Outcome, Scheme};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Outcomes below this probability are left out of the Fisher sum.
pub const MIN_PROBABILITY: f64 = 1e-14;
/// Allowed relative disagreement between the `h` and `2h` estimates.
pub const RICHARDSON_TOL: f64 = 1e-3;
/// Largest |δφ| for which the second-order variance expansion is trusted.
pub const EXPANSION_LIMIT: f64 = 0.2;

/// Variance benchmarks for `M` measurements at mean photon number `n̄`.
///
/// The Heisenberg and shot-noise lines use the conventional `1/(M n̄²)` and
/// `1/(M n̄)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Benchmarks {
    pub measurements: usize,
    pub mean_photons: f64,
    pub qcrb: f64,
    pub heisenberg: f64,
    pub shot_noise: f64,
}

pub fn benchmarks(measurements: usize, mean_photons: f64) -> Result<Benchmarks> {
    if measurements < 1 {
        return Err(Error::InvalidParameter("measurements must be at least 1".into()));
    }
    if !(mean_photons > 0.0 && mean_photons.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "mean photon number must be positive, got {mean_photons}"
        )));
    }
    let m = measurements as f64;
    let n = mean_photons;
    Ok(Benchmarks {
        measurements,
        mean_photons,
        qcrb: 1.0 / (m * n * (n + 2.0)),
        heisenberg: 1.0 / (m * n * n),
        shot_noise: 1.0 / (m * n),
    })
}

fn fisher_at_step(model: &LikelihoodModel, delta_phi: f64, step: f64, centre: &[f64]) -> f64 {
    let plus = model.pmf(delta_phi + step);
    let minus = model.pmf(delta_phi - step);
    centre
        .iter()
        .zip(plus.iter().zip(&minus))
        .filter(|(p, _)| **p > MIN_PROBABILITY)
        .map(|(p, (a, b))| {
            let d = (a - b) / (2.0 * step);
            d * d / p
        })
        .sum()
}

/// Classical Fisher information `Σ (∂p/∂φ)² / p` by central differences,
/// cross-checked against the estimate at twice the step.
pub fn fisher_information(model: &LikelihoodModel, delta_phi: f64, step: f64) -> Result<f64> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {step}")));
    }
    let centre = model.pmf(delta_phi);
    let fine = fisher_at_step(model, delta_phi, step, &centre);
    let coarse = fisher_at_step(model, delta_phi, 2.0 * step, &centre);
    if (fine - coarse).abs() > RICHARDSON_TOL * fine.abs().max(coarse.abs()) {
        return Err(Error::RichardsonMismatch { coarse, fine });
    }
    Ok(fine)
}

fn optimal_moments(model: &LikelihoodModel, delta_phi: f64) -> Result<(f64, f64)> {
    let plus = model.likelihood(Outcome::OptPlus, delta_phi)?;
    let minus = model.likelihood(Outcome::OptMinus, delta_phi)?;
    Ok((plus - minus, plus + minus))
}

/// Error-propagation variance of the optimal observable over `M` shots.
///
/// The observable has eigenvalues `±λ` on the two signal outcomes and zero
/// elsewhere, with `λ = √(n̄(n̄+2))`.
pub fn error_propagation_variance(model: &LikelihoodModel, delta_phi: f64, measurements: usize) -> Result<f64> {
    if model.scheme() != Scheme::Optimal {
        return Err(Error::InvalidParameter(
            "error propagation needs the optimal measurement model".into(),
        ));
    }
    if delta_phi.abs() > EXPANSION_LIMIT {
        return Err(Error::InvalidParameter(format!(
            "|delta_phi| must not exceed {EXPANSION_LIMIT}, got {delta_phi}"
        )));
    }
    if measurements < 1 {
        return Err(Error::InvalidParameter("measurements must be at least 1".into()));
    }
    let lambda_sq = model.table().params().quantum_fisher();
    let lambda = lambda_sq.sqrt();
    let (diff, sum) = optimal_moments(model, delta_phi)?;
    let mean = lambda * diff;
    let second = lambda_sq * sum;
    let (hi, _) = optimal_moments(model, delta_phi + DEFAULT_STEP)?;
    let (lo, _) = optimal_moments(model, delta_phi - DEFAULT_STEP)?;
    let slope = lambda * (hi - lo) / (2.0 * DEFAULT_STEP);
    if slope.abs() < 1e-12 {
        return Err(Error::DegenerateDerivative(slope));
    }
    Ok((second - mean * mean) / (measurements as f64 * slope * slope))
}

/// Least-squares fit of the quadratic excess `(Δ²φ/QCRB − 1)/δφ²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcessFit {
    /// Fitted value at δφ → 0.
    pub coefficient: f64,
    /// Slope of the fit in δφ², capturing the next order of the expansion.
    pub curvature: f64,
    pub deltas: Vec<f64>,
    pub excess: Vec<f64>,
}

/// Fits `y = c + d·δφ²` to the normalised excess at each δφ.
pub fn fit_excess_coefficient(model: &LikelihoodModel, deltas: &[f64]) -> Result<ExcessFit> {
    if deltas.len() < 2 || deltas.contains(&0.0) {
        return Err(Error::InvalidParameter(
            "the excess fit needs at least two non-zero phase offsets".into(),
        ));
    }
    let h = model.table().params().quantum_fisher();
    let excess = deltas
        .iter()
        .map(|&d| Ok((error_propagation_variance(model, d, 1)? * h - 1.0) / (d * d)))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = deltas.iter().map(|d| d * d).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = excess.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&excess).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("phase offsets must not all share one magnitude".into()));
    }
    let curvature = sxy / sxx;
    Ok(ExcessFit {
        coefficient: my - curvature * mx,
        curvature,
        deltas: deltas.to_vec(),
        excess,
    })
}

/// The expected expansion coefficient `2n̄² + 4n̄ + 1`.
pub fn expected_excess_coefficient(mean_photons: f64) -> f64 {
    2.0 * mean_photons * mean_photons + 4.0 * mean_photons + 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(scheme: Scheme, n: f64) -> LikelihoodModel {
        LikelihoodModel::with_mean_photons(scheme, n).unwrap()
    }

    #[test]
    fn benchmark_arithmetic() {
        let b = benchmarks(1000, 4.0).unwrap();
        assert!((b.qcrb - 1.0 / 24000.0).abs() < 1e-15);
        assert!((b.heisenberg - 6.25e-5).abs() < 1e-15);
        assert!((b.shot_noise - 2.5e-4).abs() < 1e-15);
        assert!(b.qcrb <= b.heisenberg && b.heisenberg <= b.shot_noise);
        let big = benchmarks(1, 1e6).unwrap();
        assert!((big.qcrb / big.heisenberg - 1.0).abs() < 1e-5);
        assert!(benchmarks(0, 4.0).is_err());
        assert!(benchmarks(10, 0.0).is_err());
    }

    #[test]
    fn optimal_fisher_at_zero_is_quantum_limit() {
        let f = fisher_information(&model(Scheme::Optimal, 4.0), 0.0, DEFAULT_STEP).unwrap();
        assert!((f / 24.0 - 1.0).abs() < 1e-3, "{f}");
    }

    #[test]
    fn photon_counting_fisher_near_zero() {
        let m = model(Scheme::PhotonNumber, 4.0);
        let f = fisher_information(&m, 1e-3, DEFAULT_STEP).unwrap();
        assert!((f / 24.0 - 1.0).abs() < 1e-2, "{f}");
        let g = fisher_information(&m, -1e-3, DEFAULT_STEP).unwrap();
        assert!((f - g).abs() < 1e-6 * f);
        // independent closed form for a thermal-output photon counter
        let d = 0.4_f64;
        let h = 24.0;
        let s = (d / 2.0).sin().powi(2);
        let want = h * (d / 2.0).cos().powi(2) / (1.0 + h * s);
        let got = fisher_information(&m, d, DEFAULT_STEP).unwrap();
        assert!((got / want - 1.0).abs() < 1e-4, "{got} vs {want}");
    }

    #[test]
    fn error_propagation_at_zero_hits_qcrb() {
        let v = error_propagation_variance(&model(Scheme::Optimal, 4.0), 0.0, 1000).unwrap();
        assert!((v * 24000.0 - 1.0).abs() < 1e-3, "{v}");
    }

    #[test]
    fn error_propagation_excess_and_evenness() {
        let m = model(Scheme::Optimal, 4.0);
        let v = error_propagation_variance(&m, 0.01, 1000).unwrap();
        let excess = v * 24000.0 - 1.0;
        assert!((excess / 0.0049 - 1.0).abs() < 0.05, "{excess}");
        let w = error_propagation_variance(&m, -0.01, 1000).unwrap();
        assert!((v - w).abs() < 1e-9 * v);
    }

    #[test]
    fn error_propagation_rejects_bad_input() {
        assert!(error_propagation_variance(&model(Scheme::PhotonNumber, 4.0), 0.0, 10).is_err());
        let m = model(Scheme::Optimal, 4.0);
        assert!(error_propagation_variance(&m, 0.3, 10).is_err());
        assert!(error_propagation_variance(&m, 0.0, 0).is_err());
    }

    #[test]
    fn excess_fit_recovers_coefficient() {
        let deltas = [0.005, 0.01, 0.015, 0.02, 0.025, 0.03];
        let fit = fit_excess_coefficient(&model(Scheme::Optimal, 2.0), &deltas).unwrap();
        assert!((fit.coefficient - 17.0).abs() < 1.0, "{}", fit.coefficient);
        assert_eq!(expected_excess_coefficient(4.0), 49.0);
    }
}
