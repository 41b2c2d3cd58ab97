//! Twin-Fock (Schmidt) decomposition of the OPA unitary acting on the
//! two-mode vacuum, and the amplitude sums every likelihood is built from.
//!
//! The OPA maps `|n,n>` to `Σ_m C_m(n) |m,m>`. With the phase factor
//! `e^{i(m-n)(ψ-π)}` stripped, the remaining factor `C'_m(n)` is real and
//! signed. The matrix `C'` is orthogonal and satisfies
//! `C'_m(n) = (-1)^{m+n} C'_n(m)`.
//!
//! Behind an inverse second OPA, the outgoing amplitude on `|n,n>` at arm
//! phase difference `δφ` is `A_n(δφ) = Σ_p C'_p(0) C'_p(n) e^{ipδφ}`; its
//! squared modulus is the cosine double sum over `D(0,n;n,0)`.

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};

/// Largest row index a table may need before construction fails.
pub const DEFAULT_PMAX_CAP: usize = 4096;

/// Summation round-off folded into [`SchmidtTable::tail_bound`].
const ROUND_OFF_ALLOWANCE: f64 = 1e-12;

/// Largest missing mass accepted when the row cap stops an amplitude table
/// short of its tolerance.
const MAX_CAPPED_TAIL: f64 = 1e-9;

/// Tail tolerance used for likelihood models.
pub const DEFAULT_TAIL_TOL: f64 = 1e-15;

/// Squeezing strength and pump phase of an OPA.
///
/// `mean_photons` is the total photon number in both modes after the first
/// OPA acting on vacuum, `2 sinh² r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OpaParams {
    r: f64,
    psi: f64,
    mean_photons: f64,
}

impl OpaParams {
    pub fn new(r: f64, psi: f64) -> Result<Self> {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "squeezing strength must be positive and finite, got {r}"
            )));
        }
        if !psi.is_finite() {
            return Err(Error::InvalidParameter(format!("pump phase must be finite, got {psi}")));
        }
        let s = r.sinh();
        Ok(Self {
            r,
            psi: psi.rem_euclid(std::f64::consts::TAU),
            mean_photons: 2.0 * s * s,
        })
    }

    /// Builds the OPA that puts `mean_photons` photons (both modes) on vacuum.
    pub fn from_mean_photons(mean_photons: f64) -> Result<Self> {
        if !(mean_photons.is_finite() && mean_photons > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "mean photon number must be positive and finite, got {mean_photons}"
            )));
        }
        Ok(Self {
            r: (mean_photons / 2.0).sqrt().asinh(),
            psi: 0.0,
            mean_photons,
        })
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    pub fn mean_photons(&self) -> f64 {
        self.mean_photons
    }

    /// Quantum Fisher information per shot, `⟨n⟩(⟨n⟩+2) = 4 sinh²r cosh²r`.
    pub fn quantum_fisher(&self) -> f64 {
        self.mean_photons * (self.mean_photons + 2.0)
    }

    fn tanh_sq(&self) -> f64 {
        let t = self.r.tanh();
        t * t
    }
}

fn ln_factorials(up_to: usize) -> Vec<f64> {
    let mut table = Vec::with_capacity(up_to + 1);
    let mut acc = 0.0;
    table.push(0.0);
    for k in 1..=up_to {
        acc += (k as f64).ln();
        table.push(acc);
    }
    table
}

/// Direct evaluation of the alternating closed-form sum for `C'_m(n)`.
///
/// Factorials are accumulated in the log domain and each term is
/// exponentiated with its sign tracked separately. The sum cancels badly once
/// `m + n` is large (tens of photons at `⟨n⟩ = 8`), so tables are built with
/// [`SchmidtTable::build`] instead; this stays as an independent reference
/// for small indices.
pub fn closed_form_coefficient(params: &OpaParams, m: usize, n: usize) -> f64 {
    let r = params.r;
    let lf = ln_factorials(m.max(n));
    let base = lf[m] + lf[n] + (m + n) as f64 * r.tanh().ln() - r.cosh().ln();
    let ln_sinh_sq = 2.0 * r.sinh().ln();
    let mut sum = 0.0;
    for k in 0..=m.min(n) {
        let term = (base - 2.0 * lf[k] - lf[m - k] - lf[n - k] - k as f64 * ln_sinh_sq).exp();
        if (n - k).is_multiple_of(2) {
            sum += term;
        } else {
            sum -= term;
        }
    }
    sum
}

/// Column `U|n,n>` over rows `0..=rows`.
///
/// The column is the `(n + 1/2)`-eigenvector of `U K0 U† = cosh2r K0 -
/// sinh2r (K+ + K-)/2`, which gives a three-term recurrence in the row index.
/// It is run forward from the exact `C'_0(n)` up to the upper turning point
/// `(n + 1/2) e^{2r}` and backward from the last row, where the wanted
/// solution is the decaying one, then the two halves are matched. Columns
/// whose turning point lies beyond `rows` are run forward only.
fn column(params: &OpaParams, n: usize, rows: usize) -> Vec<f64> {
    let r = params.r;
    let ch2 = (2.0 * r).cosh();
    let h = (2.0 * r).sinh() / 2.0;
    let eig = n as f64 + 0.5;
    let diag = |m: usize| ch2 * (m as f64 + 0.5) - eig;

    let mut x = vec![0.0; rows + 1];
    let mag = (n as f64 * r.tanh().ln() - r.cosh().ln()).exp();
    x[0] = if n.is_multiple_of(2) { mag } else { -mag };
    if rows == 0 {
        return x;
    }

    let turning = eig * (2.0 * r).exp() - 0.5;
    let forward_only = turning >= rows as f64;
    let split = if forward_only {
        rows
    } else {
        (turning.round().max(1.0) as usize).min(rows - 1).max(1)
    };

    x[1] = diag(0) * x[0] / h;
    for m in 1..split {
        x[m + 1] = (diag(m) * x[m] - h * m as f64 * x[m - 1]) / (h * (m + 1) as f64);
    }
    if forward_only {
        return x;
    }

    let mut y = vec![0.0; rows + 2];
    y[rows] = 1.0;
    for m in (split + 1..=rows).rev() {
        y[m - 1] = (diag(m) * y[m] - h * (m + 1) as f64 * y[m + 1]) / (h * m as f64);
        if y[m - 1].abs() > 1e200 {
            for v in &mut y[m - 1..=rows] {
                *v *= 1e-200;
            }
        }
    }
    let scale = x[split] / y[split];
    for m in split..=rows {
        x[m] = y[m] * scale;
    }
    x
}

/// Smallest `P` with `Σ_{m>P} C'_m(0)² = tanh^{2(P+1)} r ≤ tail_tol`.
pub fn vacuum_cutoff(params: &OpaParams, tail_tol: f64) -> usize {
    let steps = (tail_tol.ln() / params.tanh_sq().ln()).ceil();
    (steps as usize).saturating_sub(1).max(1)
}

/// Truncated real Schmidt coefficients `C'_m(n)`, `m ∈ [0, p_max]`,
/// `n ∈ [0, n_max]`.
#[derive(Debug, Clone)]
pub struct SchmidtTable {
    params: OpaParams,
    p_max: usize,
    n_max: usize,
    tail_tol: f64,
    /// Row-major, `(p_max + 1) x (n_max + 1)`.
    coeffs: Vec<f64>,
    /// Omitted mass `Σ_{m > p_max} C'_m(n)²` per column.
    column_tails: Vec<f64>,
    /// `(-1)^{m+p} C'_m(p) C'_p(0)`: row `m` holds the weights of `A_m`.
    weights: Vec<f64>,
    tail_bound: f64,
}

/// Builds a table with the default hard cap on `p_max`.
pub fn build_schmidt_table(params: OpaParams, tail_tol: f64, n_max: usize) -> Result<SchmidtTable> {
    SchmidtTable::build(params, tail_tol, n_max, DEFAULT_PMAX_CAP)
}

impl SchmidtTable {
    /// Tabulates columns `0..=n_max`, choosing `p_max` so that every
    /// tabulated column (the vacuum column included) omits at most
    /// `tail_tol` of its mass.
    pub fn build(params: OpaParams, tail_tol: f64, n_max: usize, p_max_cap: usize) -> Result<Self> {
        if !(tail_tol > 0.0 && tail_tol < 1.0) {
            return Err(Error::InvalidParameter(format!("tail_tol must lie in (0, 1), got {tail_tol}")));
        }
        if n_max < 1 {
            return Err(Error::InvalidParameter("n_max must be at least 1".into()));
        }
        let turning = (n_max as f64 + 0.5) * (2.0 * params.r).exp();
        if turning > p_max_cap as f64 {
            return Err(Error::TruncationCap { needed: turning.ceil() as usize, cap: p_max_cap });
        }

        let mut margin = ((tail_tol * 1e-6).ln() / params.tanh_sq().ln()).ceil() as usize + 32;
        loop {
            let rows = turning.ceil() as usize + margin;
            let columns: Vec<Vec<f64>> = (0..=n_max).map(|n| column(&params, n, rows)).collect();

            // suffix[m] = Σ_{k ≥ m} C'_k(n)²
            let suffixes: Vec<Vec<f64>> = columns
                .iter()
                .map(|col| {
                    let mut suffix = vec![0.0; rows + 2];
                    for m in (0..=rows).rev() {
                        suffix[m] = suffix[m + 1] + col[m] * col[m];
                    }
                    suffix
                })
                .collect();

            let guard = rows + 1 - margin / 4;
            if suffixes.iter().any(|s| s[guard] > tail_tol * 1e-3) {
                margin *= 2;
                if margin > 1 << 22 {
                    return Err(Error::TruncationCap { needed: rows, cap: p_max_cap });
                }
                continue;
            }

            let p_max = suffixes
                .iter()
                .map(|s| (0..=rows).find(|&p| s[p + 1] <= tail_tol).unwrap_or(rows))
                .max()
                .unwrap_or(0)
                .max(n_max);
            if p_max > p_max_cap {
                return Err(Error::TruncationCap { needed: p_max, cap: p_max_cap });
            }

            let width = n_max + 1;
            let mut coeffs = vec![0.0; (p_max + 1) * width];
            for (n, col) in columns.iter().enumerate() {
                for m in 0..=p_max {
                    coeffs[m * width + n] = col[m];
                }
            }
            let column_tails: Vec<f64> = suffixes.iter().map(|s| s[p_max + 1]).collect();

            let vacuum_tail = params.tanh_sq().powi(n_max as i32 + 1);
            let spill: f64 = (0..=n_max)
                .map(|p| coeffs[p * width].abs() * column_tails[p].sqrt())
                .sum();
            let tail_bound =
                (vacuum_tail + 2.0 * spill + spill * spill).max(column_tails[0]) + ROUND_OFF_ALLOWANCE;
            return Ok(Self::assemble(params, p_max, n_max, tail_tol, coeffs, column_tails, tail_bound));
        }
    }

    /// Table for outgoing amplitudes.
    ///
    /// Columns run to `tail_tol²` of the vacuum support, which keeps every
    /// tabulated amplitude within `tail_tol` of its untruncated value. Rows
    /// stop once the weighted spill `Σ_n |C'_n(0)| √τ_n` falls to
    /// `tail_tol / 4`, where `τ_n` is the mass of column `n` beyond the last
    /// row, so far columns with negligible vacuum weight need not be
    /// complete.
    pub fn for_amplitudes(params: OpaParams, tail_tol: f64) -> Result<Self> {
        Self::for_amplitudes_capped(params, tail_tol, DEFAULT_PMAX_CAP)
    }

    pub fn for_amplitudes_capped(params: OpaParams, tail_tol: f64, p_max_cap: usize) -> Result<Self> {
        if !(tail_tol > 0.0 && tail_tol < 1.0) {
            return Err(Error::InvalidParameter(format!("tail_tol must lie in (0, 1), got {tail_tol}")));
        }
        let e2r = (2.0 * params.r).exp();
        let support = (vacuum_cutoff(&params, tail_tol) as f64 + 0.5) * e2r;
        if support > p_max_cap as f64 {
            return Err(Error::TruncationCap {
                needed: support.ceil() as usize,
                cap: p_max_cap,
            });
        }
        let n_max = vacuum_cutoff(&params, tail_tol * tail_tol);
        let margin = ((tail_tol * tail_tol * 1e-6).ln() / params.tanh_sq().ln()).ceil() as usize + 32;
        let reach = (((n_max as f64 + 0.5) * e2r).ceil() as usize).min(p_max_cap + 1);
        let rows = reach + margin;

        // complete columns carry exact tails as suffix sums; the rest are
        // cut off inside their support and use 1 - Σ (they are normalised)
        let tails: Vec<(Vec<f64>, Vec<f64>)> = (0..=n_max)
            .map(|n| {
                let col = column(&params, n, rows);
                let complete = (n as f64 + 0.5) * e2r + margin as f64 / 2.0 <= rows as f64;
                let mut tail = vec![0.0; rows + 1];
                if complete {
                    let mut acc = 0.0;
                    for m in (0..rows).rev() {
                        acc += col[m + 1] * col[m + 1];
                        tail[m] = acc;
                    }
                } else {
                    let mut acc = 0.0;
                    for m in 0..=rows {
                        acc += col[m] * col[m];
                        tail[m] = (1.0 - acc).max(0.0);
                    }
                }
                (col, tail)
            })
            .collect();

        let weight: Vec<f64> = tails.iter().map(|(col, _)| col[0].abs()).collect();
        let spill_at = |p: usize| -> f64 { tails.iter().zip(&weight).map(|((_, t), w)| w * t[p].sqrt()).sum() };
        let limit = p_max_cap.min(rows - margin / 2);
        let p_max = (n_max..=limit)
            .find(|&p| spill_at(p) <= tail_tol / 4.0)
            .unwrap_or(limit);

        let width = n_max + 1;
        let mut coeffs = vec![0.0; (p_max + 1) * width];
        for (n, (col, _)) in tails.iter().enumerate() {
            for m in 0..=p_max {
                coeffs[m * width + n] = col[m];
            }
        }
        let column_tails: Vec<f64> = tails.iter().map(|(_, t)| t[p_max]).collect();
        let spill = spill_at(p_max);
        let vacuum_tail = params.tanh_sq().powi(n_max as i32 + 1);
        let tail_bound = vacuum_tail + 2.0 * spill + spill * spill + ROUND_OFF_ALLOWANCE;
        // at the cap the spill target may be out of reach; that is tolerated
        // while the missing mass stays negligible
        if tail_bound > tail_tol.max(MAX_CAPPED_TAIL) {
            return Err(Error::TruncationCap {
                needed: ((n_max as f64 + 0.5) * e2r).ceil() as usize,
                cap: p_max_cap,
            });
        }
        Ok(Self::assemble(params, p_max, n_max, tail_tol, coeffs, column_tails, tail_bound))
    }

    fn assemble(
        params: OpaParams,
        p_max: usize,
        n_max: usize,
        tail_tol: f64,
        coeffs: Vec<f64>,
        column_tails: Vec<f64>,
        tail_bound: f64,
    ) -> Self {
        let width = n_max + 1;
        let mut weights = vec![0.0; (p_max + 1) * width];
        for m in 0..=p_max {
            for p in 0..=n_max {
                let w = coeffs[m * width + p] * coeffs[p * width];
                weights[m * width + p] = if (m + p) % 2 == 0 { w } else { -w };
            }
        }
        Self {
            params,
            p_max,
            n_max,
            tail_tol,
            coeffs,
            column_tails,
            weights,
            tail_bound,
        }
    }

    pub fn params(&self) -> &OpaParams {
        &self.params
    }

    pub fn p_max(&self) -> usize {
        self.p_max
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn tail_tol(&self) -> f64 {
        self.tail_tol
    }

    /// Upper bound on the probability mass missing from the amplitude
    /// vector at any phase difference.
    pub fn tail_bound(&self) -> f64 {
        self.tail_bound
    }

    pub fn column_tails(&self) -> &[f64] {
        &self.column_tails
    }

    /// `C'_m(n)`. Panics outside the tabulated range.
    pub fn coeff(&self, m: usize, n: usize) -> f64 {
        assert!(m <= self.p_max && n <= self.n_max, "C'_{m}({n}) is outside the table");
        self.coeffs[m * (self.n_max + 1) + n]
    }

    /// Number of outcome indices the amplitudes cover (`0..=p_max`).
    pub fn outcome_count(&self) -> usize {
        self.p_max + 1
    }

    fn weight_row(&self, n: usize) -> &[f64] {
        let width = self.n_max + 1;
        &self.weights[n * width..(n + 1) * width]
    }

    /// `e^{ipδφ}` for `p ∈ [0, n_max]`, reusable across outcomes.
    pub fn phase_factors(&self, delta_phi: f64) -> Vec<Complex64> {
        (0..=self.n_max).map(|p| Complex64::cis(p as f64 * delta_phi)).collect()
    }

    /// `A_n` given precomputed [`phase_factors`](Self::phase_factors).
    pub fn amplitude_with(&self, n: usize, phases: &[Complex64]) -> Complex64 {
        self.weight_row(n)
            .iter()
            .zip(phases)
            .fold(Complex64::new(0.0, 0.0), |acc, (&w, z)| acc + z * w)
    }

    /// `A_n(δφ)` by Horner's rule in `e^{iδφ}`.
    pub fn amplitude(&self, n: usize, delta_phi: f64) -> Complex64 {
        let z = Complex64::cis(delta_phi);
        self.weight_row(n)
            .iter()
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, &w| acc * z + w)
    }

    /// Amplitudes for every tabulated outcome index.
    pub fn amplitudes(&self, delta_phi: f64) -> AmplitudeVector {
        let phases = self.phase_factors(delta_phi);
        AmplitudeVector {
            delta_phi,
            values: (0..=self.p_max).map(|n| self.amplitude_with(n, &phases)).collect(),
        }
    }
}

/// Outgoing twin-Fock amplitudes `A_n(δφ)` for `n ∈ [0, p_max]`.
#[derive(Debug, Clone)]
pub struct AmplitudeVector {
    pub delta_phi: f64,
    pub values: Vec<Complex64>,
}

impl AmplitudeVector {
    pub fn total_probability(&self) -> f64 {
        self.values.iter().map(|a| a.norm_sqr()).sum()
    }
}
