//! Feedback policies driving the measure → update → adjust-θ loop.
//!
//! Every trial owns its posterior and its random stream; the likelihood
//! tables in [`ModelSet`] are shared read-only. Feedback phases always sit
//! on the posterior grid so that likelihood rows are table slices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{GridLikelihood, LikelihoodModel, Outcome, Scheme};
use crate::posterior::{PeakConfig, PeakReport, PhaseGrid, Posterior};
use crate::tmsq::{OpaParams, SchmidtTable, DEFAULT_TAIL_TOL};

pub const TRIAL_SCHEMA: &str = "su11.trial/1";

/// Both measurement schemes for one OPA setting on one grid.
#[derive(Debug)]
pub struct ModelSet {
    params: OpaParams,
    photon: GridLikelihood,
    optimal: GridLikelihood,
}

impl ModelSet {
    pub fn new(mean_photons: f64, grid: PhaseGrid) -> Result<Self> {
        Self::with_tail_tol(mean_photons, grid, DEFAULT_TAIL_TOL)
    }

    pub fn with_tail_tol(mean_photons: f64, grid: PhaseGrid, tail_tol: f64) -> Result<Self> {
        let params = OpaParams::from_mean_photons(mean_photons)?;
        let table = std::sync::Arc::new(SchmidtTable::for_amplitudes(params, tail_tol)?);
        Ok(Self {
            params,
            photon: GridLikelihood::new(LikelihoodModel::new(Scheme::PhotonNumber, table.clone()), grid),
            optimal: GridLikelihood::new(LikelihoodModel::new(Scheme::Optimal, table), grid),
        })
    }

    pub fn params(&self) -> &OpaParams {
        &self.params
    }

    pub fn grid(&self) -> &PhaseGrid {
        self.photon.grid()
    }

    pub fn photon_number(&self) -> &GridLikelihood {
        &self.photon
    }

    pub fn optimal(&self) -> &GridLikelihood {
        &self.optimal
    }

    pub fn for_scheme(&self, scheme: Scheme) -> &GridLikelihood {
        match scheme {
            Scheme::PhotonNumber => &self.photon,
            Scheme::Optimal => &self.optimal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    FixedTheta,
    Ladder,
    OptimalAdaptive,
}

impl ProtocolMode {
    pub fn scheme(&self) -> Scheme {
        match self {
            ProtocolMode::OptimalAdaptive => Scheme::Optimal,
            _ => Scheme::PhotonNumber,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderConfig {
    /// Stage-1 measurements `M_r`.
    pub pre_rounds: usize,
    /// Stage-1 feedback never exceeds this fraction of the current MAP.
    pub ramp_cap_fraction: f64,
    /// Stage-2 feedback is this fraction of the rough estimate.
    pub final_fraction: f64,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            pre_rounds: 100,
            ramp_cap_fraction: 0.5,
            final_fraction: 0.93,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub mode: ProtocolMode,
    pub total_measurements: usize,
    /// Feedback phase for [`ProtocolMode::FixedTheta`].
    pub fixed_theta: Option<f64>,
    /// First feedback phase of the optimal protocol; grid midpoint if unset.
    pub initial_theta: Option<f64>,
    pub ladder: LadderConfig,
    /// Simulation ground truth.
    pub phi_true: f64,
    pub peaks: PeakConfig,
    /// Secondary/primary height ratio that marks `M_threshold`.
    pub threshold_ratio: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            mode: ProtocolMode::OptimalAdaptive,
            total_measurements: 1000,
            fixed_theta: None,
            initial_theta: None,
            ladder: LadderConfig::default(),
            phi_true: 0.75,
            peaks: PeakConfig::default(),
            threshold_ratio: 0.5,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self, grid: &PhaseGrid) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.total_measurements < 1 {
            return bad("total_measurements must be at least 1".into());
        }
        if !grid.contains(self.phi_true) {
            return bad(format!(
                "phi_true {} lies outside the grid [{}, {})",
                self.phi_true,
                grid.lo(),
                grid.hi()
            ));
        }
        match self.mode {
            ProtocolMode::FixedTheta => match self.fixed_theta {
                Some(t) if grid.contains(t) => {}
                Some(t) => return bad(format!("fixed_theta {t} lies outside the grid")),
                None => return bad("fixed-theta mode needs fixed_theta".into()),
            },
            ProtocolMode::Ladder => {
                let l = &self.ladder;
                if l.pre_rounds < 1 || l.pre_rounds >= self.total_measurements {
                    return bad(format!(
                        "ladder pre_rounds must lie in [1, {}), got {}",
                        self.total_measurements, l.pre_rounds
                    ));
                }
                for (name, v) in [("ramp_cap_fraction", l.ramp_cap_fraction), ("final_fraction", l.final_fraction)] {
                    if !(v > 0.0 && v < 1.0) {
                        return bad(format!("ladder {name} must lie in (0, 1), got {v}"));
                    }
                }
            }
            ProtocolMode::OptimalAdaptive => {
                if let Some(t) = self.initial_theta {
                    if !grid.contains(t) {
                        return bad(format!("initial_theta {t} lies outside the grid"));
                    }
                }
            }
        }
        if !(self.peaks.min_separation >= 0.0 && self.peaks.height_ratio_floor >= 0.0) {
            return bad("peak settings must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub step: usize,
    pub theta: f64,
    pub outcome: Outcome,
    pub map: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mean: f64,
    pub variance: f64,
    pub map: f64,
    pub peaks: PeakReport,
    /// Mass within 1% of the grid width from either domain edge.
    pub edge_mass: f64,
}

impl PosteriorSummary {
    pub fn of(post: &Posterior, peaks: &PeakConfig) -> Self {
        let grid = post.grid();
        let band = 0.01 * (grid.hi() - grid.lo());
        Self {
            mean: post.mean(),
            variance: post.variance(),
            map: post.map_estimate(),
            peaks: post.detect_peaks(peaks),
            edge_mass: post.mass_between(grid.lo(), grid.lo() + band) + post.mass_between(grid.hi() - band, grid.hi()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub schema: String,
    pub seed: u64,
    pub mean_photons: f64,
    pub config: ProtocolConfig,
    pub steps: Vec<Step>,
    pub summary: PosteriorSummary,
    /// First step whose posterior shows a secondary peak of at least
    /// `threshold_ratio` of the primary height (fixed-θ runs only).
    pub m_threshold: Option<usize>,
    /// Steps at which the MAP moved by at least the peak separation.
    pub map_jumps: usize,
    /// Ladder rough estimate `φ_r` after stage 1.
    pub rough_estimate: Option<f64>,
    /// Ladder only: whether a secondary peak was found and pruned.
    pub pruned: Option<bool>,
}

/// A finished trial: its record and the final posterior.
#[derive(Debug, Clone)]
pub struct Trial {
    pub record: TrialRecord,
    pub posterior: Posterior,
}

struct Loop<'a> {
    gl: &'a GridLikelihood,
    config: &'a ProtocolConfig,
    rng: ChaCha8Rng,
    post: Posterior,
    steps: Vec<Step>,
    map_jumps: usize,
}

impl<'a> Loop<'a> {
    fn new(gl: &'a GridLikelihood, config: &'a ProtocolConfig, seed: u64) -> Self {
        Self {
            gl,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            post: Posterior::uniform(*gl.grid()),
            steps: Vec::with_capacity(config.total_measurements),
            map_jumps: 0,
        }
    }

    fn map(&self) -> f64 {
        self.steps.last().map_or_else(|| self.post.map_estimate(), |s| s.map)
    }

    fn measure(&mut self, theta_index: usize) -> Result<()> {
        let theta = self.gl.grid().point(theta_index);
        let outcome = self.gl.model().sample(self.config.phi_true - theta, &mut self.rng)?;
        let row = self.gl.log_row(outcome, theta_index)?;
        self.post.update_log(row).map_err(|e| match e {
            Error::ZeroLikelihood(_) => Error::ZeroLikelihood(outcome.label()),
            other => other,
        })?;
        let previous = self.map();
        let map = self.post.map_estimate();
        if (map - previous).abs() >= self.config.peaks.min_separation {
            self.map_jumps += 1;
        }
        self.steps.push(Step {
            step: self.steps.len() + 1,
            theta,
            outcome,
            map,
        });
        Ok(())
    }

    fn finish(self, seed: u64, mean_photons: f64) -> Trial {
        let summary = PosteriorSummary::of(&self.post, &self.config.peaks);
        Trial {
            record: TrialRecord {
                schema: TRIAL_SCHEMA.into(),
                seed,
                mean_photons,
                config: *self.config,
                steps: self.steps,
                summary,
                m_threshold: None,
                map_jumps: self.map_jumps,
                rough_estimate: None,
                pruned: None,
            },
            posterior: self.post,
        }
    }
}

fn expect_mode(config: &ProtocolConfig, mode: ProtocolMode, grid: &PhaseGrid) -> Result<()> {
    if config.mode != mode {
        return Err(Error::InvalidParameter(format!(
            "config mode {:?} does not match the {mode:?} runner",
            config.mode
        )));
    }
    config.validate(grid)
}

/// Photon counting with a constant feedback phase. Tracks `M_threshold`.
pub fn run_fixed(config: &ProtocolConfig, models: &ModelSet, seed: u64) -> Result<Trial> {
    let grid = *models.grid();
    expect_mode(config, ProtocolMode::FixedTheta, &grid)?;
    let theta_index = grid.nearest_index(config.fixed_theta.unwrap_or_default());
    let mut run = Loop::new(models.photon_number(), config, seed);
    let mut m_threshold = None;
    for k in 1..=config.total_measurements {
        run.measure(theta_index)?;
        if m_threshold.is_none() && run.post.detect_peaks(&config.peaks).height_ratio() >= config.threshold_ratio {
            m_threshold = Some(k);
        }
    }
    let mut trial = run.finish(seed, models.params().mean_photons());
    trial.record.m_threshold = m_threshold;
    Ok(trial)
}

/// Photon counting with the staged ladder schedule.
///
/// Stage 1 ramps θ linearly from below, re-anchored on the current MAP and
/// never above `ramp_cap_fraction × MAP`. Stage 2 holds θ at
/// `final_fraction × φ_r`. Stage 3 prunes the lower of the two mirror peaks.
pub fn run_ladder(config: &ProtocolConfig, models: &ModelSet, seed: u64) -> Result<Trial> {
    let grid = *models.grid();
    expect_mode(config, ProtocolMode::Ladder, &grid)?;
    let ladder = config.ladder;
    let mut run = Loop::new(models.photon_number(), config, seed);

    let mut theta = grid.lo();
    for k in 1..=ladder.pre_rounds {
        let cap = ladder.ramp_cap_fraction * run.map();
        let ramp = (k as f64 / ladder.pre_rounds as f64) * cap;
        theta = theta.max(ramp).min(cap);
        let index = grid.floor_index(theta);
        theta = grid.point(index);
        run.measure(index)?;
    }

    let rough = run.map();
    let final_index = grid.nearest_index(ladder.final_fraction * rough);
    for _ in ladder.pre_rounds..config.total_measurements {
        run.measure(final_index)?;
    }

    let report = run.post.detect_peaks(&config.peaks);
    let pruned = report.is_bimodal();
    if pruned {
        run.post.prune_secondary(&report)?;
    }
    let mut trial = run.finish(seed, models.params().mean_photons());
    trial.record.rough_estimate = Some(rough);
    trial.record.pruned = Some(pruned);
    Ok(trial)
}

/// Optimal measurement with plain MAP feedback: `θ_k = MAP_{k-1}`.
pub fn run_optimal(config: &ProtocolConfig, models: &ModelSet, seed: u64) -> Result<Trial> {
    let grid = *models.grid();
    expect_mode(config, ProtocolMode::OptimalAdaptive, &grid)?;
    let mut run = Loop::new(models.optimal(), config, seed);
    let mut index = config
        .initial_theta
        .map_or(grid.midpoint_index(), |t| grid.nearest_index(t));
    for _ in 0..config.total_measurements {
        run.measure(index)?;
        index = run.post.map_index();
    }
    Ok(run.finish(seed, models.params().mean_photons()))
}

/// Dispatches on `config.mode`.
pub fn run_trial(config: &ProtocolConfig, models: &ModelSet, seed: u64) -> Result<Trial> {
    match config.mode {
        ProtocolMode::FixedTheta => run_fixed(config, models, seed),
        ProtocolMode::Ladder => run_ladder(config, models, seed),
        ProtocolMode::OptimalAdaptive => run_optimal(config, models, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn models() -> ModelSet {
        ModelSet::new(4.0, PhaseGrid::default()).unwrap()
    }

    #[test]
    fn config_validation() {
        let grid = PhaseGrid::default();
        let mut c = ProtocolConfig {
            mode: ProtocolMode::FixedTheta,
            ..Default::default()
        };
        assert!(c.validate(&grid).is_err());
        c.fixed_theta = Some(0.7);
        assert!(c.validate(&grid).is_ok());
        c.phi_true = 4.0;
        assert!(c.validate(&grid).is_err());

        let mut l = ProtocolConfig {
            mode: ProtocolMode::Ladder,
            total_measurements: 50,
            ..Default::default()
        };
        assert!(l.validate(&grid).is_err());
        l.total_measurements = 1000;
        l.ladder.final_fraction = 1.2;
        assert!(l.validate(&grid).is_err());
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let m = models();
        let c = ProtocolConfig::default();
        assert!(run_fixed(&c, &m, 1).is_err());
        assert!(run_ladder(&c, &m, 1).is_err());
    }

    #[test]
    fn replay_is_exact() {
        let m = models();
        let c = ProtocolConfig {
            total_measurements: 200,
            ..Default::default()
        };
        let a = run_optimal(&c, &m, 99).unwrap().record;
        let b = run_optimal(&c, &m, 99).unwrap().record;
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.steps.len(), 200);
    }

    #[test]
    fn fixed_theta_at_truth_never_splits() {
        let m = models();
        let grid = *m.grid();
        let phi = grid.point(977);
        let c = ProtocolConfig {
            mode: ProtocolMode::FixedTheta,
            fixed_theta: Some(phi),
            phi_true: phi,
            total_measurements: 300,
            ..Default::default()
        };
        let rec = run_fixed(&c, &m, 5).unwrap().record;
        assert!(rec.m_threshold.is_none());
        assert!(rec.summary.peaks.secondary.is_none());
        assert!(rec.steps.iter().all(|s| s.outcome == Outcome::PhotonPair(0)));
        assert!((rec.summary.map - phi).abs() < 1e-12);
    }

    #[test]
    fn optimal_starting_at_truth_tightens_immediately() {
        let m = models();
        let grid = *m.grid();
        let phi = grid.point(grid.midpoint_index());
        let c = ProtocolConfig {
            phi_true: phi,
            total_measurements: 100,
            ..Default::default()
        };
        let rec = run_optimal(&c, &m, 8).unwrap().record;
        assert_eq!(rec.steps[0].theta, phi);
        assert!(rec.summary.variance < 0.2 * std::f64::consts::PI.powi(2) / 12.0);
        assert!((rec.summary.mean - phi).abs() < 0.05);
    }
}
