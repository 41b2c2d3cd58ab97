//! Outcome distributions for photon counting and for the optimal
//! (SLD-eigenbasis) measurement, built from the outgoing amplitudes.
//!
//! Photon counting only registers twin outcomes `|n,n>` with probability
//! `|A_n|²`, an even function of `δφ`. The optimal measurement projects on
//! `(|0,0> ± |1,1>)/√2` and on `|n,n>` for `n ≥ 2`; its `±` outcomes carry
//! the odd cross term `±Im(A_0 A_1*)` that removes the mirror ambiguity.

use std::fmt;
use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posterior::{safe_ln, PhaseGrid};
use crate::tmsq::{OpaParams, SchmidtTable, DEFAULT_TAIL_TOL};

/// Probability mass beyond the tabulated outcomes tolerated by [`LikelihoodModel::sample`].
pub const MAX_RESIDUAL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    PhotonNumber,
    Optimal,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::PhotonNumber => f.write_str("photon-number"),
            Scheme::Optimal => f.write_str("optimal"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// `n` photons detected in each output port.
    PhotonPair(usize),
    /// Projection on `(|0,0> + |1,1>)/√2`.
    OptPlus,
    /// Projection on `(|0,0> - |1,1>)/√2`.
    OptMinus,
    /// Projection on `|n,n>`, `n ≥ 2` (zero eigenvalue of the SLD).
    OptNull(usize),
}

impl Outcome {
    pub fn scheme(&self) -> Scheme {
        match self {
            Outcome::PhotonPair(_) => Scheme::PhotonNumber,
            _ => Scheme::Optimal,
        }
    }

    /// Dense index used for tables: `PhotonPair(n)` and `OptNull(n)` map to
    /// `n`, `OptPlus` to 0 and `OptMinus` to 1.
    pub fn index(&self) -> usize {
        match *self {
            Outcome::PhotonPair(n) | Outcome::OptNull(n) => n,
            Outcome::OptPlus => 0,
            Outcome::OptMinus => 1,
        }
    }

    pub fn from_index(scheme: Scheme, index: usize) -> Self {
        match (scheme, index) {
            (Scheme::PhotonNumber, n) => Outcome::PhotonPair(n),
            (Scheme::Optimal, 0) => Outcome::OptPlus,
            (Scheme::Optimal, 1) => Outcome::OptMinus,
            (Scheme::Optimal, n) => Outcome::OptNull(n),
        }
    }

    /// Short label used in CSV output: `n3`, `plus`, `minus`, `null3`.
    pub fn label(&self) -> String {
        match self {
            Outcome::PhotonPair(n) => format!("n{n}"),
            Outcome::OptPlus => "plus".into(),
            Outcome::OptMinus => "minus".into(),
            Outcome::OptNull(n) => format!("null{n}"),
        }
    }

    pub fn parse_label(label: &str) -> Option<Self> {
        match label {
            "plus" => Some(Outcome::OptPlus),
            "minus" => Some(Outcome::OptMinus),
            _ => {
                if let Some(rest) = label.strip_prefix("null") {
                    rest.parse().ok().filter(|&n| n >= 2).map(Outcome::OptNull)
                } else {
                    label.strip_prefix('n')?.parse().ok().map(Outcome::PhotonPair)
                }
            }
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn plus_minus(a0: Complex64, a1: Complex64) -> (f64, f64) {
    let base = a0.norm_sqr() + a1.norm_sqr();
    let cross = 2.0 * (a0.im * a1.re - a0.re * a1.im);
    (clamp(0.5 * (base + cross)), clamp(0.5 * (base - cross)))
}

fn clamp(p: f64) -> f64 {
    debug_assert!(p >= -1e-12, "probability {p} below round-off tolerance");
    p.max(0.0)
}

#[derive(Debug, Clone)]
pub struct LikelihoodModel {
    scheme: Scheme,
    table: Arc<SchmidtTable>,
}

impl LikelihoodModel {
    pub fn new(scheme: Scheme, table: Arc<SchmidtTable>) -> Self {
        Self { scheme, table }
    }

    /// Model with an amplitude table at [`DEFAULT_TAIL_TOL`].
    pub fn with_mean_photons(scheme: Scheme, mean_photons: f64) -> Result<Self> {
        let params = OpaParams::from_mean_photons(mean_photons)?;
        let table = SchmidtTable::for_amplitudes(params, DEFAULT_TAIL_TOL)?;
        Ok(Self::new(scheme, Arc::new(table)))
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn table(&self) -> &Arc<SchmidtTable> {
        &self.table
    }

    pub fn mean_photons(&self) -> f64 {
        self.table.params().mean_photons()
    }

    /// Number of tabulated outcomes; every outcome index lies below it.
    pub fn outcome_count(&self) -> usize {
        self.table.outcome_count()
    }

    pub fn outcomes(&self) -> impl Iterator<Item = Outcome> + '_ {
        (0..self.outcome_count()).map(|i| Outcome::from_index(self.scheme, i))
    }

    fn check(&self, outcome: Outcome) -> Result<()> {
        if outcome.scheme() != self.scheme {
            return Err(Error::SchemeMismatch {
                outcome: outcome.label(),
                scheme: self.scheme.to_string(),
            });
        }
        if outcome.index() >= self.outcome_count() {
            return Err(Error::InvalidParameter(format!(
                "outcome {outcome} lies beyond the {} tabulated outcomes",
                self.outcome_count()
            )));
        }
        Ok(())
    }

    /// `p(outcome | δφ)`.
    pub fn likelihood(&self, outcome: Outcome, delta_phi: f64) -> Result<f64> {
        self.check(outcome)?;
        Ok(self.prob_unchecked(outcome, delta_phi))
    }

    fn prob_unchecked(&self, outcome: Outcome, delta_phi: f64) -> f64 {
        match outcome {
            Outcome::PhotonPair(n) | Outcome::OptNull(n) => self.table.amplitude(n, delta_phi).norm_sqr(),
            Outcome::OptPlus => {
                plus_minus(self.table.amplitude(0, delta_phi), self.table.amplitude(1, delta_phi)).0
            }
            Outcome::OptMinus => {
                plus_minus(self.table.amplitude(0, delta_phi), self.table.amplitude(1, delta_phi)).1
            }
        }
    }

    /// Full distribution, indexed by [`Outcome::index`].
    pub fn pmf(&self, delta_phi: f64) -> Vec<f64> {
        let amps = self.table.amplitudes(delta_phi).values;
        let mut p: Vec<f64> = amps.iter().map(|a| a.norm_sqr()).collect();
        if self.scheme == Scheme::Optimal {
            let (plus, minus) = plus_minus(amps[0], amps[1]);
            p[0] = plus;
            p[1] = minus;
        }
        p
    }

    /// Draws an outcome at phase difference `δφ`.
    ///
    /// Outcomes are visited in index order with probabilities evaluated
    /// lazily; a draw that lands in the untabulated residual is redrawn,
    /// which spreads the residual proportionally over tabulated outcomes.
    pub fn sample<R: Rng + ?Sized>(&self, delta_phi: f64, rng: &mut R) -> Result<Outcome> {
        let residual = self.table.tail_bound();
        if residual > MAX_RESIDUAL {
            return Err(Error::ResidualMass { residual });
        }
        let phases = self.table.phase_factors(delta_phi);
        let count = self.outcome_count();
        // A residual below 1e-6 makes repeated misses vanishingly unlikely.
        for _ in 0..64 {
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            let mut start = 0;
            if self.scheme == Scheme::Optimal {
                let (plus, minus) = plus_minus(
                    self.table.amplitude_with(0, &phases),
                    self.table.amplitude_with(1, &phases),
                );
                cum += plus;
                if u < cum {
                    return Ok(Outcome::OptPlus);
                }
                cum += minus;
                if u < cum {
                    return Ok(Outcome::OptMinus);
                }
                start = 2;
            }
            for n in start..count {
                cum += self.table.amplitude_with(n, &phases).norm_sqr();
                if u < cum {
                    return Ok(Outcome::from_index(self.scheme, n));
                }
            }
        }
        Err(Error::ResidualMass { residual })
    }

    /// `p(outcome | φ_i − θ)` at every grid point, evaluated directly.
    pub fn likelihood_curve(&self, outcome: Outcome, grid: &PhaseGrid, theta: f64) -> Result<Vec<f64>> {
        self.check(outcome)?;
        Ok(grid.points().map(|phi| self.prob_unchecked(outcome, phi - theta)).collect())
    }
}

/// A likelihood model bound to a phase grid, with lazily built per-outcome
/// tables over every grid offset `δφ = k · spacing`, `|k| < n_points`.
///
/// When the feedback phase sits on the grid, the likelihood row for any
/// outcome is a contiguous slice of that table. Tables are shared between
/// threads and built at most once.
#[derive(Debug)]
pub struct GridLikelihood {
    model: LikelihoodModel,
    grid: PhaseGrid,
    log_tables: Vec<OnceLock<Box<[f64]>>>,
}

impl GridLikelihood {
    pub fn new(model: LikelihoodModel, grid: PhaseGrid) -> Self {
        let log_tables = (0..model.outcome_count()).map(|_| OnceLock::new()).collect();
        Self {
            model,
            grid,
            log_tables,
        }
    }

    pub fn model(&self) -> &LikelihoodModel {
        &self.model
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    fn offset_table(&self, outcome: Outcome) -> Result<&[f64]> {
        self.model.check(outcome)?;
        let slot = &self.log_tables[outcome.index()];
        Ok(slot.get_or_init(|| {
            let n = self.grid.len() as isize;
            let h = self.grid.spacing();
            (-(n - 1)..n)
                .map(|k| safe_ln(self.model.prob_unchecked(outcome, k as f64 * h)))
                .collect()
        }))
    }

    /// Log-likelihood row for a feedback phase on grid point `theta_index`.
    pub fn log_row(&self, outcome: Outcome, theta_index: usize) -> Result<&[f64]> {
        let n = self.grid.len();
        if theta_index >= n {
            return Err(Error::InvalidParameter(format!("feedback index {theta_index} is off the grid")));
        }
        let table = self.offset_table(outcome)?;
        let start = n - 1 - theta_index;
        Ok(&table[start..start + n])
    }

    /// Likelihood row for any feedback phase: the cached table when `theta`
    /// lies on the grid, direct evaluation otherwise.
    pub fn likelihood_curve(&self, outcome: Outcome, theta: f64) -> Result<Vec<f64>> {
        match self.grid.on_grid_index(theta) {
            Some(j) => Ok(self
                .log_row(outcome, j)?
                .iter()
                .map(|&l| if l <= crate::posterior::LOG_FLOOR { 0.0 } else { l.exp() })
                .collect()),
            None => self.model.likelihood_curve(outcome, &self.grid, theta),
        }
    }
}
