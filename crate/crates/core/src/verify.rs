//! Self-check battery behind the `verify` subcommand.
//!
//! Each check compares a production path against an independent
//! evaluation (closed-form coefficients, literal double sums, numeric
//! derivatives, replay) and reports the worst defect next to its tolerance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::analysis::{
    benchmarks, error_propagation_variance, expected_excess_coefficient, fisher_information, fit_excess_coefficient,
    DEFAULT_STEP,
};
use crate::ensemble::{run_campaign, CampaignConfig};
use crate::error::Result;
use crate::export::{linspace, CODE_VERSION};
use crate::measurement::{GridLikelihood, LikelihoodModel, Outcome, Scheme};
use crate::posterior::{PhaseGrid, Posterior};
use crate::protocol::{run_trial, ModelSet, ProtocolConfig, ProtocolMode};
use crate::tmsq::{build_schmidt_table, closed_form_coefficient, vacuum_cutoff, OpaParams, SchmidtTable};

pub const VERIFY_SCHEMA: &str = "su11.verify/1";
pub const MEAN_PHOTONS: [f64; 4] = [2.0, 4.0, 6.0, 8.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    /// Worst observed defect (or the statistic under test).
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    fn at_most(suite: &str, name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            suite: suite.into(),
            name: name.into(),
            passed: value <= tolerance,
            value,
            tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema: String,
    pub code_version: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

fn max_of(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, f64::max)
}

fn deltas() -> Vec<f64> {
    linspace(-std::f64::consts::PI, std::f64::consts::PI, 101)
}

/// `Σ_{p,q} w_p w_q cos((p−q)δφ)` evaluated literally.
fn cosine_double_sum(w: &[f64], v: &[f64], delta_phi: f64) -> f64 {
    let mut total = 0.0;
    for (p, a) in w.iter().enumerate() {
        for (q, b) in v.iter().enumerate() {
            total += a * b * ((p as f64 - q as f64) * delta_phi).cos();
        }
    }
    total
}

fn sine_double_sum(w: &[f64], v: &[f64], delta_phi: f64) -> f64 {
    let mut total = 0.0;
    for (p, a) in w.iter().enumerate() {
        for (q, b) in v.iter().enumerate() {
            total += a * b * ((p as f64 - q as f64) * delta_phi).sin();
        }
    }
    total
}

fn tmsq_checks(checks: &mut Vec<Check>) -> Result<()> {
    const S: &str = "tmsq";
    for n in MEAN_PHOTONS {
        let params = OpaParams::from_mean_photons(n)?;
        let t = build_schmidt_table(params, 1e-12, 10)?;
        let mut worst = 0.0_f64;
        for a in 0..=10 {
            for b in 0..=10 {
                let dot: f64 = (0..=t.p_max()).map(|m| t.coeff(m, a) * t.coeff(m, b)).sum();
                worst = worst.max((dot - if a == b { 1.0 } else { 0.0 }).abs());
            }
        }
        checks.push(Check::at_most(S, format!("orthonormality n={n}"), worst, 1e-8));

        let photons: f64 = (0..=t.p_max()).map(|m| 2.0 * m as f64 * t.coeff(m, 0).powi(2)).sum();
        checks.push(Check::at_most(S, format!("vacuum column mean photons n={n}"), (photons - n).abs(), 1e-9));
    }

    let params = OpaParams::from_mean_photons(4.0)?;
    let t = build_schmidt_table(params, 1e-15, 20)?;
    let swap = max_of((0..=20).flat_map(|m| {
        let t = &t;
        (0..=20).map(move |k| {
            let sign = if (m + k) % 2 == 0 { 1.0 } else { -1.0 };
            (t.coeff(m, k) - sign * t.coeff(k, m)).abs()
        })
    }));
    checks.push(Check::at_most(S, "index-swap symmetry", swap, 1e-12));

    let closed = max_of((0..=12).flat_map(|m| {
        let t = &t;
        (0..=12).map(move |k| (t.coeff(m, k) - closed_form_coefficient(&params, m, k)).abs())
    }));
    checks.push(Check::at_most(S, "table matches closed form (indices <= 12)", closed, 1e-11));

    let mut previous = f64::INFINITY;
    let mut rise = 0.0_f64;
    for tol in [1e-4, 1e-6, 1e-8, 1e-10, 1e-12, 1e-15] {
        let table = SchmidtTable::for_amplitudes(params, tol)?;
        let defect = (table.amplitudes(std::f64::consts::PI).total_probability() - 1.0).abs();
        rise = rise.max(defect - previous - 1e-14);
        previous = defect;
    }
    checks.push(Check::at_most(S, "truncation monotonicity", rise.max(0.0), 0.0));
    Ok(())
}

fn measurement_checks(checks: &mut Vec<Check>, seed: u64) -> Result<()> {
    const S: &str = "measurement";
    let ds = deltas();
    let rows: Vec<Result<Vec<Check>>> = MEAN_PHOTONS
        .par_iter()
        .map(|&n| {
            let photon = LikelihoodModel::with_mean_photons(Scheme::PhotonNumber, n)?;
            let optimal = LikelihoodModel::new(Scheme::Optimal, photon.table().clone());
            let mut out = Vec::new();
            for model in [&photon, &optimal] {
                let worst = max_of(ds.iter().map(|&d| (model.pmf(d).iter().sum::<f64>() - 1.0).abs()));
                out.push(Check::at_most(S, format!("normalization {} n={n}", model.scheme()), worst, 1e-9));
            }
            let even = max_of(ds.iter().flat_map(|&d| {
                let a = photon.pmf(d);
                let b = photon.pmf(-d);
                a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>()
            }));
            out.push(Check::at_most(S, format!("photon-number evenness n={n}"), even, 1e-12));
            let mirror = max_of(ds.iter().map(|&d| {
                let p = optimal.likelihood(Outcome::OptPlus, d).unwrap();
                let m = optimal.likelihood(Outcome::OptMinus, -d).unwrap();
                (p - m).abs()
            }));
            out.push(Check::at_most(S, format!("optimal plus/minus mirror n={n}"), mirror, 1e-12));

            // the literal double sums over independently evaluated coefficients
            let params = *photon.table().params();
            let cut = vacuum_cutoff(&params, 1e-20);
            let col = |k: usize| -> Vec<f64> {
                (0..=cut)
                    .map(|p| closed_form_coefficient(&params, p, 0) * closed_form_coefficient(&params, p, k))
                    .collect()
            };
            let cols: Vec<Vec<f64>> = (0..=10).map(col).collect();
            let mut sep = 0.0_f64;
            for &d in &ds {
                let pmf = photon.pmf(d);
                for (k, w) in cols.iter().enumerate() {
                    sep = sep.max((cosine_double_sum(w, w, d) - pmf[k]).abs());
                }
                let base = cosine_double_sum(&cols[0], &cols[0], d) + cosine_double_sum(&cols[1], &cols[1], d);
                let cross = 2.0 * sine_double_sum(&cols[0], &cols[1], d);
                let plus = optimal.likelihood(Outcome::OptPlus, d)?;
                let minus = optimal.likelihood(Outcome::OptMinus, d)?;
                sep = sep.max((0.5 * (base + cross) - plus).abs());
                sep = sep.max((0.5 * (base - cross) - minus).abs());
            }
            out.push(Check::at_most(S, format!("separability vs double sum n={n}"), sep, 1e-10));
            Ok(out)
        })
        .collect();
    for r in rows {
        checks.extend(r?);
    }

    let grid = PhaseGrid::new(0.0, std::f64::consts::PI, 256)?;
    let model = LikelihoodModel::with_mean_photons(Scheme::Optimal, 4.0)?;
    let cached = GridLikelihood::new(model.clone(), grid);
    let mut worst = 0.0_f64;
    for outcome in [Outcome::OptPlus, Outcome::OptMinus, Outcome::OptNull(3)] {
        for ti in [0, 100, 255] {
            let theta = grid.point(ti);
            let fast = cached.likelihood_curve(outcome, theta)?;
            let direct = model.likelihood_curve(outcome, &grid, theta)?;
            worst = worst.max(max_of(fast.iter().zip(&direct).map(|(a, b)| (a - b).abs())));
        }
    }
    checks.push(Check::at_most(S, "cached likelihood rows", worst, 1e-12));

    let photon = LikelihoodModel::new(Scheme::PhotonNumber, model.table().clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_p = 1.0_f64;
    for d in [0.1, 0.4, 0.75, 1.5, 3.0] {
        worst_p = worst_p.min(chi_square_p_value(&photon, d, 10_000, &mut rng)?);
    }
    checks.push(Check {
        suite: S.into(),
        name: "sampling goodness of fit (min p-value)".into(),
        passed: worst_p >= 1e-3,
        value: worst_p,
        tolerance: 1e-3,
    });
    Ok(())
}

/// Pearson χ² p-value of `draws` samples against the model pmf, pooling
/// outcomes with expected count below 5 into one bin.
pub fn chi_square_p_value(model: &LikelihoodModel, delta_phi: f64, draws: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let pmf = model.pmf(delta_phi);
    let mut counts = vec![0usize; pmf.len()];
    for _ in 0..draws {
        counts[model.sample(delta_phi, rng)?.index()] += 1;
    }
    let n = draws as f64;
    let (mut stat, mut bins) = (0.0, 0usize);
    let (mut pool_e, mut pool_o) = (0.0, 0.0);
    for (p, c) in pmf.iter().zip(&counts) {
        let e = p * n;
        if e >= 5.0 {
            stat += (*c as f64 - e).powi(2) / e;
            bins += 1;
        } else {
            pool_e += e;
            pool_o += *c as f64;
        }
    }
    if pool_e > 0.0 {
        stat += (pool_o - pool_e).powi(2) / pool_e;
        bins += 1;
    }
    if bins < 2 {
        return Ok(1.0);
    }
    let dist = ChiSquared::new((bins - 1) as f64).expect("positive degrees of freedom");
    Ok(1.0 - dist.cdf(stat))
}

fn analysis_checks(checks: &mut Vec<Check>) -> Result<()> {
    const S: &str = "analysis";
    let b = benchmarks(1000, 4.0)?;
    checks.push(Check::at_most(S, "qcrb arithmetic (1000, 4)", (b.qcrb - 1.0 / 24000.0).abs(), 1e-12));
    let fit_deltas = [0.005, 0.01, 0.015, 0.02, 0.025, 0.03];
    let sweep = linspace(-0.5, 0.5, 11);
    let rows: Vec<Result<Vec<Check>>> = MEAN_PHOTONS
        .par_iter()
        .map(|&n| {
            let optimal = LikelihoodModel::with_mean_photons(Scheme::Optimal, n)?;
            let photon = LikelihoodModel::new(Scheme::PhotonNumber, optimal.table().clone());
            let h = n * (n + 2.0);
            let mut out = Vec::new();
            let f0 = fisher_information(&optimal, 0.0, DEFAULT_STEP)?;
            out.push(Check::at_most(S, format!("optimal Fisher = QFI at 0, n={n}"), (f0 / h - 1.0).abs(), 1e-3));
            let fp = fisher_information(&photon, 1e-3, DEFAULT_STEP)?;
            out.push(Check::at_most(S, format!("photon Fisher near 0, n={n}"), (fp / h - 1.0).abs(), 1e-2));
            let mut excess = f64::NEG_INFINITY;
            for model in [&optimal, &photon] {
                for &d in &sweep {
                    excess = excess.max(fisher_information(model, d, DEFAULT_STEP)? / h - 1.0);
                }
            }
            out.push(Check::at_most(S, format!("Fisher never exceeds QFI, n={n}"), excess, 1e-3));
            let v0 = error_propagation_variance(&optimal, 0.0, 1000)?;
            out.push(Check::at_most(
                S,
                format!("error propagation at 0 = QCRB, n={n}"),
                (v0 * 1000.0 * h - 1.0).abs(),
                1e-3,
            ));
            let fit = fit_excess_coefficient(&optimal, &fit_deltas)?;
            let want = expected_excess_coefficient(n);
            out.push(Check::at_most(
                S,
                format!("excess coefficient {want}, n={n}"),
                (fit.coefficient / want - 1.0).abs(),
                0.05,
            ));
            let odd = max_of([0.01, 0.05, 0.1, 0.2].iter().map(|&d| {
                let a = error_propagation_variance(&optimal, d, 1).unwrap();
                let b = error_propagation_variance(&optimal, -d, 1).unwrap();
                (a / b - 1.0).abs()
            }));
            out.push(Check::at_most(S, format!("error propagation evenness, n={n}"), odd, 1e-6));
            Ok(out)
        })
        .collect();
    for r in rows {
        checks.extend(r?);
    }
    Ok(())
}

fn posterior_checks(checks: &mut Vec<Check>, seed: u64) -> Result<()> {
    const S: &str = "posterior";
    let grid = PhaseGrid::default();
    let models = ModelSet::new(4.0, grid)?;
    let gl = models.photon_number();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut updates = Vec::new();
    for k in 0..200 {
        let ti = (k * 37) % grid.len();
        let outcome = gl.model().sample(0.75 - grid.point(ti), &mut rng)?;
        updates.push((outcome, ti));
    }
    let mut forward = Posterior::uniform(grid);
    for &(o, ti) in &updates {
        forward.update_log(gl.log_row(o, ti)?)?;
    }
    let mut backward = Posterior::uniform(grid);
    for &(o, ti) in updates.iter().rev() {
        backward.update_log(gl.log_row(o, ti)?)?;
    }
    let diff = max_of(forward.density().iter().zip(backward.density()).map(|(a, b)| (a - b).abs()));
    checks.push(Check::at_most(S, "update order independence", diff, 1e-12));
    let total: f64 = forward.density().iter().sum::<f64>() * grid.spacing();
    checks.push(Check::at_most(S, "normalization after 200 updates", (total - 1.0).abs(), 1e-12));
    Ok(())
}

fn protocol_checks(checks: &mut Vec<Check>, seed: u64) -> Result<()> {
    const S: &str = "protocol";
    let models = ModelSet::new(4.0, PhaseGrid::default())?;
    for mode in [ProtocolMode::FixedTheta, ProtocolMode::Ladder, ProtocolMode::OptimalAdaptive] {
        let config = ProtocolConfig {
            mode,
            total_measurements: 200,
            fixed_theta: Some(0.7),
            ..Default::default()
        };
        let a = serde_json::to_string(&run_trial(&config, &models, seed)?.record).expect("serializable");
        let b = serde_json::to_string(&run_trial(&config, &models, seed)?.record).expect("serializable");
        checks.push(Check::at_most(S, format!("{mode:?} replay"), if a == b { 0.0 } else { 1.0 }, 0.0));
    }
    let campaign = CampaignConfig {
        protocol: ProtocolConfig {
            total_measurements: 100,
            ..Default::default()
        },
        trials: 8,
        master_seed: seed,
        phi_true: vec![0.5, 1.0],
        ..Default::default()
    };
    let a = run_campaign(&campaign)?;
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(|| run_campaign(&campaign))?;
    checks.push(Check::at_most(
        S,
        "campaign independent of thread count",
        if a == single { 0.0 } else { 1.0 },
        0.0,
    ));
    Ok(())
}

/// Runs every suite. `seed` drives the sampling-based checks.
pub fn run_battery(seed: u64) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    tmsq_checks(&mut checks)?;
    measurement_checks(&mut checks, seed)?;
    analysis_checks(&mut checks)?;
    posterior_checks(&mut checks, seed)?;
    protocol_checks(&mut checks, seed)?;
    Ok(VerifyReport {
        schema: VERIFY_SCHEMA.into(),
        code_version: CODE_VERSION.into(),
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_sums_on_a_toy_vector() {
        let w = [0.5, 0.25];
        // |0.5 + 0.25 e^{iδ}|² = 0.3125 + 0.25 cos δ
        let d = 0.3_f64;
        assert!((cosine_double_sum(&w, &w, d) - (0.3125 + 0.25 * d.cos())).abs() < 1e-15);
        assert_eq!(sine_double_sum(&w, &w, d).abs() < 1e-15, true);
    }

    #[test]
    fn battery_passes() {
        let report = run_battery(2024).unwrap();
        let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }
}
