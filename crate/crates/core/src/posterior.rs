//! Discretized Bayesian posterior over the unknown phase.
//!
//! Weights are kept as log densities so that a thousand multiplicative
//! updates cannot underflow. After every operation the posterior is a
//! density on the grid: `Σ_i exp(w_i) · spacing = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to log densities and log likelihoods (≈ ln of the smallest
/// subnormal double).
pub const LOG_FLOOR: f64 = -745.0;

/// Uniform phase grid `φ_i = lo + i · spacing` covering `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrid {
    lo: f64,
    hi: f64,
    n_points: usize,
}

impl Default for PhaseGrid {
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: std::f64::consts::PI,
            n_points: 4096,
        }
    }
}

impl PhaseGrid {
    pub const MIN_POINTS: usize = 64;

    pub fn new(lo: f64, hi: f64, n_points: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidParameter(format!("grid needs hi > lo, got [{lo}, {hi})")));
        }
        if n_points < Self::MIN_POINTS {
            return Err(Error::InvalidParameter(format!(
                "grid needs at least {} points, got {n_points}",
                Self::MIN_POINTS
            )));
        }
        Ok(Self { lo, hi, n_points })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        self.n_points == 0
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / self.n_points as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.spacing()
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_points).map(|i| self.point(i))
    }

    pub fn contains(&self, phi: f64) -> bool {
        phi >= self.lo && phi < self.hi
    }

    pub fn midpoint_index(&self) -> usize {
        self.n_points / 2
    }

    /// Index of the nearest grid point, clamped to the grid.
    pub fn nearest_index(&self, phi: f64) -> usize {
        let x = ((phi - self.lo) / self.spacing()).round();
        x.clamp(0.0, (self.n_points - 1) as f64) as usize
    }

    /// Index of the largest grid point not above `phi`, clamped to the grid.
    pub fn floor_index(&self, phi: f64) -> usize {
        let x = ((phi - self.lo) / self.spacing() + 1e-9).floor();
        x.clamp(0.0, (self.n_points - 1) as f64) as usize
    }

    /// `Some(i)` when `phi` coincides with grid point `i` up to round-off.
    pub fn on_grid_index(&self, phi: f64) -> Option<usize> {
        let x = (phi - self.lo) / self.spacing();
        let i = x.round();
        if (x - i).abs() < 1e-9 && i >= 0.0 && i < self.n_points as f64 {
            Some(i as usize)
        } else {
            None
        }
    }
}

/// Peak detection settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeakConfig {
    /// Minimum distance between primary and secondary peak (radians).
    pub min_separation: f64,
    /// Secondary peaks lower than this fraction of the primary are ignored.
    pub height_ratio_floor: f64,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self {
            min_separation: 0.02,
            height_ratio_floor: 0.10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub index: usize,
    pub location: f64,
    pub height: f64,
    pub mass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakReport {
    pub primary: Peak,
    pub secondary: Option<Peak>,
    /// Distance between the peaks, when a secondary exists.
    pub separation: Option<f64>,
}

impl PeakReport {
    pub fn is_bimodal(&self) -> bool {
        self.secondary.is_some()
    }

    /// Secondary-to-primary height ratio, zero when unimodal.
    pub fn height_ratio(&self) -> f64 {
        self.secondary.map_or(0.0, |s| s.height / self.primary.height)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    grid: PhaseGrid,
    log_weights: Vec<f64>,
}

impl Posterior {
    pub fn uniform(grid: PhaseGrid) -> Self {
        let w = -(grid.hi - grid.lo).ln();
        Self {
            grid,
            log_weights: vec![w; grid.len()],
        }
    }

    /// Posterior from unnormalized log densities.
    pub fn from_log_density(grid: PhaseGrid, log_density: Vec<f64>) -> Result<Self> {
        if log_density.len() != grid.len() {
            return Err(Error::InvalidParameter(format!(
                "expected {} log densities, got {}",
                grid.len(),
                log_density.len()
            )));
        }
        let mut post = Self {
            grid,
            log_weights: log_density,
        };
        post.normalize()?;
        Ok(post)
    }

    /// Posterior from an unnormalized density evaluated on the grid.
    pub fn from_density(grid: PhaseGrid, density: impl Fn(f64) -> f64) -> Result<Self> {
        let logs = grid.points().map(|phi| safe_ln(density(phi))).collect();
        Self::from_log_density(grid, logs)
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn density(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    /// Multiplies by a likelihood row (one entry per grid point).
    pub fn update(&mut self, row: &[f64]) -> Result<()> {
        self.check_row(row.len())?;
        if row.iter().any(|&p| p < 0.0 || p.is_nan()) {
            return Err(Error::InvalidParameter("likelihood row has negative or NaN entries".into()));
        }
        if row.iter().all(|&p| p == 0.0) {
            return Err(Error::ZeroLikelihood("<row>".into()));
        }
        for (w, &p) in self.log_weights.iter_mut().zip(row) {
            *w += safe_ln(p);
        }
        self.normalize()
    }

    /// Adds a row of log likelihoods (already floored at [`LOG_FLOOR`]).
    pub fn update_log(&mut self, log_row: &[f64]) -> Result<()> {
        self.check_row(log_row.len())?;
        if log_row.iter().all(|&l| l <= LOG_FLOOR) {
            return Err(Error::ZeroLikelihood("<row>".into()));
        }
        for (w, &l) in self.log_weights.iter_mut().zip(log_row) {
            *w += l;
        }
        self.normalize()
    }

    fn check_row(&self, len: usize) -> Result<()> {
        if len != self.grid.len() {
            return Err(Error::InvalidParameter(format!(
                "likelihood row has {len} entries, grid has {}",
                self.grid.len()
            )));
        }
        Ok(())
    }

    /// Shift-normalizes so the density integrates to one, then floors.
    pub fn normalize(&mut self) -> Result<()> {
        let max = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::InvalidParameter("posterior has no finite weight".into()));
        }
        let sum: f64 = self.log_weights.iter().map(|w| (w - max).exp()).sum();
        let log_norm = max + sum.ln() + self.grid.spacing().ln();
        for w in &mut self.log_weights {
            *w = (*w - log_norm).max(LOG_FLOOR);
        }
        Ok(())
    }

    /// Index of maximal density; ties go to the lowest index.
    pub fn map_index(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.log_weights.iter().enumerate() {
            if w > self.log_weights[best] {
                best = i;
            }
        }
        best
    }

    pub fn map_estimate(&self) -> f64 {
        self.grid.point(self.map_index())
    }

    pub fn mean(&self) -> f64 {
        let h = self.grid.spacing();
        self.grid
            .points()
            .zip(&self.log_weights)
            .map(|(phi, w)| phi * w.exp() * h)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let h = self.grid.spacing();
        let mean = self.mean();
        self.grid
            .points()
            .zip(&self.log_weights)
            .map(|(phi, w)| (phi - mean).powi(2) * w.exp() * h)
            .sum()
    }

    /// Probability mass on grid points in `[lo, hi]`.
    pub fn mass_between(&self, lo: f64, hi: f64) -> f64 {
        let h = self.grid.spacing();
        self.grid
            .points()
            .zip(&self.log_weights)
            .filter(|(phi, _)| *phi >= lo && *phi <= hi)
            .map(|(_, w)| w.exp() * h)
            .sum()
    }

    /// Local maxima (strictly above both neighbours; endpoints compare with
    /// their single neighbour). The primary is the global maximum, lowest
    /// index on ties. The secondary is the highest remaining maximum at
    /// least `min_separation` away, reported only if it reaches
    /// `height_ratio_floor` of the primary height.
    pub fn detect_peaks(&self, config: &PeakConfig) -> PeakReport {
        let d = self.density();
        let n = d.len();
        let primary_idx = self.map_index();
        let primary_loc = self.grid.point(primary_idx);

        let is_max = |i: usize| {
            let left = i == 0 || d[i] > d[i - 1];
            let right = i + 1 == n || d[i] > d[i + 1];
            left && right
        };

        let mut secondary_idx: Option<usize> = None;
        for i in 0..n {
            if i == primary_idx || !is_max(i) {
                continue;
            }
            if (self.grid.point(i) - primary_loc).abs() < config.min_separation {
                continue;
            }
            if secondary_idx.is_none_or(|s| d[i] > d[s]) {
                secondary_idx = Some(i);
            }
        }
        let secondary_idx = secondary_idx.filter(|&s| d[s] >= config.height_ratio_floor * d[primary_idx]);

        let h = self.grid.spacing();
        match secondary_idx {
            None => PeakReport {
                primary: Peak {
                    index: primary_idx,
                    location: primary_loc,
                    height: d[primary_idx],
                    mass: 1.0,
                },
                secondary: None,
                separation: None,
            },
            Some(s) => {
                let split = valley_index(&d, primary_idx, s);
                let (primary_range, secondary_range) = if s > primary_idx {
                    (0..split + 1, split + 1..n)
                } else {
                    (split..n, 0..split)
                };
                let primary_mass: f64 = d[primary_range].iter().sum::<f64>() * h;
                let secondary_mass: f64 = d[secondary_range].iter().sum::<f64>() * h;
                let secondary_loc = self.grid.point(s);
                PeakReport {
                    primary: Peak {
                        index: primary_idx,
                        location: primary_loc,
                        height: d[primary_idx],
                        mass: primary_mass,
                    },
                    secondary: Some(Peak {
                        index: s,
                        location: secondary_loc,
                        height: d[s],
                        mass: secondary_mass,
                    }),
                    separation: Some((secondary_loc - primary_loc).abs()),
                }
            }
        }
    }

    /// Removes everything on the secondary's side of the density minimum
    /// between the two peaks and renormalizes.
    pub fn prune_secondary(&mut self, report: &PeakReport) -> Result<()> {
        let secondary = report.secondary.ok_or(Error::NoSecondaryPeak)?;
        let d = self.density();
        let p = report.primary.index;
        let s = secondary.index;
        let split = valley_index(&d, p, s);
        let cut = if s > p { split + 1..d.len() } else { 0..split };
        for w in &mut self.log_weights[cut] {
            *w = LOG_FLOOR;
        }
        self.normalize()
    }
}

/// Index of the density minimum between two peaks (inclusive range).
fn valley_index(d: &[f64], a: usize, b: usize) -> usize {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let mut best = lo;
    for i in lo..=hi {
        if d[i] < d[best] {
            best = i;
        }
    }
    best
}

/// `ln p`, floored at [`LOG_FLOOR`] (zero maps to the floor).
pub fn safe_ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln().max(LOG_FLOOR)
    } else {
        LOG_FLOOR
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn gaussian(mu: f64, sigma: f64) -> impl Fn(f64) -> f64 {
        move |x| (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp()
    }

    fn mixture(a: (f64, f64), b: (f64, f64), sigma: f64) -> impl Fn(f64) -> f64 {
        move |x| a.1 * gaussian(a.0, sigma)(x) + b.1 * gaussian(b.0, sigma)(x)
    }

    #[test]
    fn uniform_is_normalized() {
        let post = Posterior::uniform(PhaseGrid::default());
        let h = post.grid().spacing();
        let total: f64 = post.density().iter().sum::<f64>() * h;
        assert!((total - 1.0).abs() < 1e-12);
        assert!((post.variance() - PI * PI / 12.0).abs() / (PI * PI / 12.0) < 1e-3);
    }

    #[test]
    fn constant_row_leaves_uniform() {
        let grid = PhaseGrid::default();
        let mut post = Posterior::uniform(grid);
        post.update(&vec![0.3; grid.len()]).unwrap();
        let base = Posterior::uniform(grid);
        for (a, b) in post.log_weights().iter().zip(base.log_weights()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_row_fails() {
        let grid = PhaseGrid::default();
        let mut post = Posterior::uniform(grid);
        assert!(matches!(post.update(&vec![0.0; grid.len()]), Err(Error::ZeroLikelihood(_))));
        assert!(post.update(&[1.0; 3]).is_err());
    }

    #[test]
    fn moments_of_injected_gaussian() {
        let grid = PhaseGrid::default();
        let post = Posterior::from_density(grid, gaussian(0.75, 0.01)).unwrap();
        assert!((post.mean() - 0.75).abs() < grid.spacing());
        assert!((post.variance() - 1e-4).abs() / 1e-4 < 0.01);
    }

    #[test]
    fn map_ties_go_low() {
        let grid = PhaseGrid::default();
        let post = Posterior::uniform(grid);
        assert_eq!(post.map_index(), 0);
        assert_eq!(post.map_estimate(), 0.0);
    }

    #[test]
    fn bimodal_detection_and_pruning() {
        let grid = PhaseGrid::default();
        let mut post = Posterior::from_density(grid, mixture((0.65, 0.4), (0.75, 0.6), 0.01)).unwrap();
        let report = post.detect_peaks(&PeakConfig::default());
        let sec = report.secondary.expect("two peaks");
        assert!((report.primary.location - 0.75).abs() < 2.0 * grid.spacing());
        assert!((sec.location - 0.65).abs() < 2.0 * grid.spacing());
        assert!((report.separation.unwrap() - 0.10).abs() < 3.0 * grid.spacing());
        assert!((report.primary.mass - 0.6).abs() < 1e-3);
        assert!((sec.mass - 0.4).abs() < 1e-3);

        post.prune_secondary(&report).unwrap();
        let after = post.detect_peaks(&PeakConfig::default());
        assert!(after.secondary.is_none());
        assert!((after.primary.location - 0.75).abs() < 2.0 * grid.spacing());
        assert!((post.variance() - 1e-4).abs() / 1e-4 < 0.02);
        assert!(matches!(post.prune_secondary(&after), Err(Error::NoSecondaryPeak)));
    }

    #[test]
    fn single_peak_has_no_secondary() {
        let post = Posterior::from_density(PhaseGrid::default(), gaussian(1.0, 0.02)).unwrap();
        let report = post.detect_peaks(&PeakConfig::default());
        assert!(report.secondary.is_none());
        assert_eq!(report.primary.mass, 1.0);
    }

    #[test]
    fn equal_peaks_prefer_lower_index() {
        let grid = PhaseGrid::default();
        let a = grid.point(800);
        let b = grid.point(1000);
        let post = Posterior::from_density(grid, mixture((a, 1.0), (b, 1.0), 0.01)).unwrap();
        let report = post.detect_peaks(&PeakConfig::default());
        assert_eq!(report.primary.index, 800);
        assert_eq!(report.secondary.unwrap().index, 1000);
    }

    #[test]
    fn weak_or_close_secondaries_are_ignored() {
        let grid = PhaseGrid::default();
        let weak = Posterior::from_density(grid, mixture((0.5, 1.0), (1.0, 0.05), 0.01)).unwrap();
        assert!(weak.detect_peaks(&PeakConfig::default()).secondary.is_none());
        let close = Posterior::from_density(grid, mixture((0.5, 1.0), (0.51, 0.9), 0.002)).unwrap();
        assert!(close.detect_peaks(&PeakConfig::default()).secondary.is_none());
    }

    #[test]
    fn grid_indexing() {
        let grid = PhaseGrid::default();
        assert_eq!(grid.nearest_index(grid.point(17)), 17);
        assert_eq!(grid.floor_index(grid.point(17) + 0.4 * grid.spacing()), 17);
        assert_eq!(grid.on_grid_index(grid.point(99)), Some(99));
        assert_eq!(grid.on_grid_index(grid.point(99) + 0.3 * grid.spacing()), None);
        assert!(PhaseGrid::new(1.0, 0.0, 128).is_err());
        assert!(PhaseGrid::new(0.0, 1.0, 8).is_err());
    }
}
