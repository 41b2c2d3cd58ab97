//! Seeded Monte Carlo campaigns and the fixed-θ threshold scan.
//!
//! Trials never share random state: each one draws from its own stream
//! seeded by [`trial_seed`], and results are reduced in trial order, so the
//! output does not depend on scheduling or thread count.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{benchmarks, Benchmarks};
use crate::error::{Error, Result};
use crate::posterior::{PeakConfig, PeakReport, PhaseGrid};
use crate::protocol::{run_fixed, run_trial, ModelSet, ProtocolConfig, ProtocolMode};
use crate::tmsq::DEFAULT_TAIL_TOL;

pub const STATS_SCHEMA: &str = "su11.ensemble/1";
pub const THRESHOLD_SCHEMA: &str = "su11.threshold/1";
pub const BOOTSTRAP_RESAMPLES: usize = 1000;
/// A campaign aborts when more than this fraction of its trials fail.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one trial: chained splitmix64 over master seed, cell and trial.
pub fn trial_seed(master: u64, cell: u64, trial: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ cell) ^ trial)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSettings {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for GridSettings {
    fn default() -> Self {
        let g = PhaseGrid::default();
        Self {
            lo: g.lo(),
            hi: g.hi(),
            points: g.len(),
        }
    }
}

impl GridSettings {
    pub fn build(&self) -> Result<PhaseGrid> {
        PhaseGrid::new(self.lo, self.hi, self.points)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub stats: Option<PathBuf>,
    pub trials: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    /// Template for every trial; `phi_true` is replaced per cell.
    pub protocol: ProtocolConfig,
    pub mean_photons: Vec<f64>,
    pub phi_true: Vec<f64>,
    pub trials: usize,
    pub master_seed: u64,
    pub grid: GridSettings,
    pub tail_tol: f64,
    pub outputs: OutputPaths,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            protocol: ProtocolConfig::default(),
            mean_photons: vec![4.0],
            phi_true: vec![0.75],
            trials: 200,
            master_seed: 0,
            grid: GridSettings::default(),
            tail_tol: DEFAULT_TAIL_TOL,
            outputs: OutputPaths::default(),
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<PhaseGrid> {
        let grid = self.grid.build()?;
        if self.trials < 1 {
            return Err(Error::InvalidParameter("trials must be at least 1".into()));
        }
        if self.mean_photons.is_empty() || self.phi_true.is_empty() {
            return Err(Error::InvalidParameter(
                "campaign needs at least one mean photon number and one phase".into(),
            ));
        }
        for &n in &self.mean_photons {
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "mean photon number must be positive, got {n}"
                )));
            }
        }
        for &phi in &self.phi_true {
            let mut p = self.protocol;
            p.phi_true = phi;
            p.validate(&grid)?;
        }
        Ok(grid)
    }

    /// Cells in row-major order over (mean photons, phase).
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.mean_photons
            .iter()
            .flat_map(|&n| self.phi_true.iter().map(move |&p| (n, p)))
            .collect()
    }
}

/// Per-trial outcome kept for ensemble statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub seed: u64,
    /// `None` when the trial failed.
    pub result: Option<TrialResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    /// Posterior mean of the final (pruned) posterior.
    pub estimate: f64,
    pub map: f64,
    pub posterior_variance: f64,
    pub peaks: PeakReport,
    pub edge_mass: f64,
    pub m_threshold: Option<usize>,
    pub map_jumps: usize,
    pub pruned: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub schema: String,
    pub cell: usize,
    pub mean_photons: f64,
    pub phi_true: f64,
    pub trials: usize,
    pub failed: usize,
    /// Ensemble mean squared error of the posterior-mean estimate.
    pub mse: f64,
    /// Percentile bootstrap 95% interval on `mse`.
    pub mse_ci: [f64; 2],
    pub mean_posterior_variance: f64,
    pub median_posterior_variance: f64,
    pub bias: f64,
    /// Fraction of trials whose final posterior has no secondary peak.
    pub unimodal_fraction: f64,
    pub benchmarks: Benchmarks,
    pub summaries: Vec<TrialSummary>,
}

impl EnsembleStats {
    pub fn results(&self) -> impl Iterator<Item = &TrialResult> {
        self.summaries.iter().filter_map(|s| s.result.as_ref())
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

fn bootstrap_mse_ci(sq_errors: &[f64], seed: u64) -> [f64; 2] {
    let n = sq_errors.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| (0..n).map(|_| sq_errors[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    [percentile(&means, 0.025), percentile(&means, 0.975)]
}

fn summarise(
    cell: usize,
    mean_photons: f64,
    phi_true: f64,
    protocol: &ProtocolConfig,
    master_seed: u64,
    summaries: Vec<TrialSummary>,
) -> Result<EnsembleStats> {
    let ok: Vec<&TrialResult> = summaries.iter().filter_map(|s| s.result.as_ref()).collect();
    let trials = summaries.len();
    let failed = trials - ok.len();
    let bench = benchmarks(protocol.total_measurements, mean_photons)?;
    if ok.is_empty() {
        return Err(Error::CampaignFailures { failed, total: trials });
    }
    let n = ok.len() as f64;
    let errors: Vec<f64> = ok.iter().map(|r| r.estimate - phi_true).collect();
    let sq: Vec<f64> = errors.iter().map(|e| e * e).collect();
    let mse = sq.iter().sum::<f64>() / n;
    let bias = errors.iter().sum::<f64>() / n;
    let mut variances: Vec<f64> = ok.iter().map(|r| r.posterior_variance).collect();
    let mean_posterior_variance = variances.iter().sum::<f64>() / n;
    variances.sort_by(f64::total_cmp);
    let ci = bootstrap_mse_ci(&sq, trial_seed(master_seed, cell as u64, u64::MAX));
    Ok(EnsembleStats {
        schema: STATS_SCHEMA.into(),
        cell,
        mean_photons,
        phi_true,
        trials,
        failed,
        mse,
        // percentile intervals can in principle miss the point value on tiny samples
        mse_ci: [ci[0].min(mse), ci[1].max(mse)],
        mean_posterior_variance,
        median_posterior_variance: median(&variances),
        bias,
        unimodal_fraction: ok.iter().filter(|r| !r.peaks.is_bimodal()).count() as f64 / n,
        benchmarks: bench,
        summaries,
    })
}

fn build_models(mean_photons: &[f64], grid: PhaseGrid, tail_tol: f64) -> Result<BTreeMap<u64, ModelSet>> {
    let mut unique: Vec<f64> = mean_photons.to_vec();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    unique
        .par_iter()
        .map(|&n| Ok((n.to_bits(), ModelSet::with_tail_tol(n, grid, tail_tol)?)))
        .collect()
}

fn run_one(protocol: &ProtocolConfig, models: &ModelSet, trial: usize, seed: u64) -> TrialSummary {
    match run_trial(protocol, models, seed) {
        Ok(t) => {
            let r = t.record;
            TrialSummary {
                trial,
                seed,
                result: Some(TrialResult {
                    estimate: r.summary.mean,
                    map: r.summary.map,
                    posterior_variance: r.summary.variance,
                    peaks: r.summary.peaks,
                    edge_mass: r.summary.edge_mass,
                    m_threshold: r.m_threshold,
                    map_jumps: r.map_jumps,
                    pruned: r.pruned,
                }),
                error: None,
            }
        }
        Err(e) => TrialSummary {
            trial,
            seed,
            result: None,
            error: Some(e.to_string()),
        },
    }
}

/// Runs every (mean photons, phase) cell and reduces each to statistics.
pub fn run_campaign(config: &CampaignConfig) -> Result<Vec<EnsembleStats>> {
    let grid = config.validate()?;
    let models = build_models(&config.mean_photons, grid, config.tail_tol)?;
    let cells = config.cells();
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..config.trials).map(move |t| (c, t)))
        .collect();
    let summaries: Vec<TrialSummary> = jobs
        .par_iter()
        .map(|&(c, t)| {
            let (n, phi) = cells[c];
            let protocol = ProtocolConfig {
                phi_true: phi,
                ..config.protocol
            };
            let seed = trial_seed(config.master_seed, c as u64, t as u64);
            run_one(&protocol, &models[&n.to_bits()], t, seed)
        })
        .collect();

    let failed = summaries.iter().filter(|s| s.result.is_none()).count();
    if failed as f64 > MAX_FAILURE_FRACTION * summaries.len() as f64 {
        return Err(Error::CampaignFailures {
            failed,
            total: summaries.len(),
        });
    }

    let mut chunks = summaries.into_iter();
    cells
        .iter()
        .enumerate()
        .map(|(c, &(n, phi))| {
            let chunk: Vec<TrialSummary> = chunks.by_ref().take(config.trials).collect();
            summarise(c, n, phi, &config.protocol, config.master_seed, chunk)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    pub thetas: Vec<f64>,
    pub phi_true: f64,
    pub mean_photons: f64,
    pub trials: usize,
    pub max_measurements: usize,
    pub master_seed: u64,
    pub grid: GridSettings,
    pub tail_tol: f64,
    pub peaks: PeakConfig,
    pub threshold_ratio: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            thetas: vec![0.65, 0.70, 0.74, 0.745],
            phi_true: 0.75,
            mean_photons: 4.0,
            trials: 50,
            max_measurements: 1000,
            master_seed: 0,
            grid: GridSettings::default(),
            tail_tol: DEFAULT_TAIL_TOL,
            peaks: PeakConfig::default(),
            threshold_ratio: 0.5,
        }
    }
}

/// Threshold statistics for one θ. Censored runs (no detection within
/// `max_measurements`) rank above every detected value; a `None` statistic
/// means it falls among them and reads as "> max_measurements".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub theta: f64,
    pub trials: usize,
    pub censored: usize,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub values: Vec<Option<usize>>,
}

impl ThresholdRow {
    fn from_values(theta: f64, values: Vec<Option<usize>>) -> Self {
        let mut sorted: Vec<f64> = values
            .iter()
            .map(|v| v.map_or(f64::INFINITY, |m| m as f64))
            .collect();
        sorted.sort_by(f64::total_cmp);
        let finite = |x: f64| x.is_finite().then_some(x);
        Self {
            theta,
            trials: values.len(),
            censored: values.iter().filter(|v| v.is_none()).count(),
            median: finite(median(&sorted)),
            q1: finite(percentile(&sorted, 0.25)),
            q3: finite(percentile(&sorted, 0.75)),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScan {
    pub schema: String,
    pub config: ThresholdConfig,
    pub rows: Vec<ThresholdRow>,
}

/// Renders a possibly censored statistic.
pub fn format_threshold(value: Option<f64>, max_measurements: usize) -> String {
    match value {
        Some(v) => format!("{v}"),
        None => format!("> {max_measurements}"),
    }
}

/// Fixed-θ runs at each θ, recording the first step with a strong mirror peak.
pub fn threshold_scan(config: &ThresholdConfig) -> Result<ThresholdScan> {
    let grid = config.grid.build()?;
    if config.trials < 1 || config.max_measurements < 1 {
        return Err(Error::InvalidParameter(
            "trials and max_measurements must be at least 1".into(),
        ));
    }
    for &theta in &config.thetas {
        if !(theta < config.phi_true) {
            return Err(Error::InvalidParameter(format!(
                "theta {theta} must lie below phi_true {}",
                config.phi_true
            )));
        }
    }
    let models = ModelSet::with_tail_tol(config.mean_photons, grid, config.tail_tol)?;
    let jobs: Vec<(usize, usize)> = (0..config.thetas.len())
        .flat_map(|c| (0..config.trials).map(move |t| (c, t)))
        .collect();
    let values: Vec<Option<usize>> = jobs
        .par_iter()
        .map(|&(c, t)| {
            let protocol = ProtocolConfig {
                mode: ProtocolMode::FixedTheta,
                total_measurements: config.max_measurements,
                fixed_theta: Some(config.thetas[c]),
                phi_true: config.phi_true,
                peaks: config.peaks,
                threshold_ratio: config.threshold_ratio,
                ..ProtocolConfig::default()
            };
            let seed = trial_seed(config.master_seed, c as u64, t as u64);
            run_fixed(&protocol, &models, seed).map(|trial| trial.record.m_threshold)
        })
        .collect::<Result<_>>()?;
    let rows = config
        .thetas
        .iter()
        .zip(values.chunks(config.trials))
        .map(|(&theta, v)| ThresholdRow::from_values(theta, v.to_vec()))
        .collect();
    Ok(ThresholdScan {
        schema: THRESHOLD_SCHEMA.into(),
        config: config.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a = trial_seed(7, 0, 0);
        assert_eq!(a, trial_seed(7, 0, 0));
        assert_ne!(a, trial_seed(7, 0, 1));
        assert_ne!(a, trial_seed(7, 1, 0));
        assert_ne!(a, trial_seed(8, 0, 0));
        assert_ne!(trial_seed(0, 1, 0), trial_seed(0, 0, 1));
    }

    #[test]
    fn median_and_censoring() {
        let row = ThresholdRow::from_values(0.7, vec![Some(3), None, Some(1), Some(2)]);
        assert_eq!(row.median, Some(2.5));
        assert_eq!(row.censored, 1);
        let row = ThresholdRow::from_values(0.7, vec![Some(3), None, None]);
        assert_eq!(row.median, None);
        assert_eq!(format_threshold(row.median, 1000), "> 1000");
    }

    #[test]
    fn campaign_validation() {
        let mut c = CampaignConfig::default();
        c.trials = 0;
        assert!(run_campaign(&c).is_err());
        let mut c = CampaignConfig::default();
        c.phi_true = vec![3.5];
        assert!(run_campaign(&c).is_err());
        let t = ThresholdConfig {
            thetas: vec![0.8],
            ..Default::default()
        };
        assert!(threshold_scan(&t).is_err());
    }

    #[test]
    fn small_campaign_is_deterministic() {
        let c = CampaignConfig {
            protocol: ProtocolConfig {
                total_measurements: 100,
                ..Default::default()
            },
            trials: 4,
            master_seed: 11,
            phi_true: vec![0.5, 1.0],
            ..Default::default()
        };
        let a = run_campaign(&c).unwrap();
        let b = run_campaign(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        for s in &a {
            assert_eq!(s.trials, 4);
            assert!(s.mse >= s.bias * s.bias);
            assert!(s.mse_ci[0] <= s.mse && s.mse <= s.mse_ci[1]);
        }
    }
}
