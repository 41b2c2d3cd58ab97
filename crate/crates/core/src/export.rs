//! CSV and JSON artifacts with embedded provenance.
//!
//! CSV files open with `# key: value` comment lines (code version, seed and
//! a one-line JSON config echo) followed by a header row. JSON documents
//! wrap their payload as `{ schema, provenance, result }`.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::measurement::{LikelihoodModel, Outcome, Scheme};
use crate::posterior::Posterior;
use crate::protocol::TrialRecord;

pub const CODE_VERSION: &str = concat!("su11 ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub code_version: String,
    pub master_seed: Option<u64>,
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new<C: Serialize>(config: &C, master_seed: Option<u64>) -> Self {
        Self {
            code_version: CODE_VERSION.into(),
            master_seed,
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document<T> {
    pub schema: String,
    pub provenance: Provenance,
    pub result: T,
}

impl<T: Serialize> Document<T> {
    pub fn new(schema: &str, provenance: Provenance, result: T) -> Self {
        Self {
            schema: schema.into(),
            provenance,
            result,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("documents serialize");
        s.push('\n');
        s
    }
}

fn write_provenance<W: Write>(w: &mut W, provenance: &Provenance) -> io::Result<()> {
    writeln!(w, "# code_version: {}", provenance.code_version)?;
    match provenance.master_seed {
        Some(seed) => writeln!(w, "# master_seed: {seed}")?,
        None => writeln!(w, "# master_seed: none")?,
    }
    writeln!(w, "# config: {}", provenance.config)
}

/// Columns `step,theta,outcome,map`.
pub fn write_trajectory_csv<W: Write>(w: &mut W, provenance: &Provenance, record: &TrialRecord) -> io::Result<()> {
    write_provenance(w, provenance)?;
    writeln!(w, "step,theta,outcome,map")?;
    for s in &record.steps {
        writeln!(
            w,
            "{},{},{},{}",
            s.step,
            format_f64(s.theta),
            s.outcome.label(),
            format_f64(s.map)
        )?;
    }
    Ok(())
}

/// Columns `phi,density`; the density integrates to one over the grid.
pub fn write_posterior_csv<W: Write>(w: &mut W, provenance: &Provenance, posterior: &Posterior) -> io::Result<()> {
    write_provenance(w, provenance)?;
    writeln!(w, "phi,density")?;
    for (phi, p) in posterior.grid().points().zip(posterior.density()) {
        writeln!(w, "{},{}", format_f64(phi), format_f64(p))?;
    }
    Ok(())
}

/// Outcomes reported by the likelihood dump: indices up to `max_index`.
pub fn likelihood_outcomes(model: &LikelihoodModel, max_index: usize) -> Vec<Outcome> {
    let last = max_index.min(model.outcome_count() - 1);
    match model.scheme() {
        Scheme::PhotonNumber => (0..=last).map(Outcome::PhotonPair).collect(),
        Scheme::Optimal => (0..=last).map(|i| Outcome::from_index(Scheme::Optimal, i)).collect(),
    }
}

/// Columns `delta_phi,outcome_label,probability`.
pub fn write_likelihood_csv<W: Write>(
    w: &mut W,
    provenance: &Provenance,
    model: &LikelihoodModel,
    deltas: &[f64],
    max_index: usize,
) -> io::Result<()> {
    write_provenance(w, provenance)?;
    writeln!(w, "delta_phi,outcome_label,probability")?;
    let outcomes = likelihood_outcomes(model, max_index);
    for &d in deltas {
        let pmf = model.pmf(d);
        for o in &outcomes {
            writeln!(w, "{},{},{}", format_f64(d), o.label(), format_f64(pmf[o.index()]))?;
        }
    }
    Ok(())
}

/// Shortest round-trip text for `x`; exponent form outside `[1e-4, 1e15)`.
pub fn format_f64(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

/// `n` evenly spaced points over `[lo, hi]`, endpoints included.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::PhaseGrid;
    use crate::protocol::{run_trial, ModelSet, ProtocolConfig};

    #[test]
    fn trajectory_csv_layout() {
        let models = ModelSet::new(2.0, PhaseGrid::default()).unwrap();
        let config = ProtocolConfig {
            total_measurements: 5,
            ..Default::default()
        };
        let rec = run_trial(&config, &models, 3).unwrap().record;
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &Provenance::new(&config, Some(3)), &rec).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# code_version: su11 "));
        assert_eq!(lines[1], "# master_seed: 3");
        assert_eq!(lines[3], "step,theta,outcome,map");
        assert_eq!(lines.len(), 4 + 5);
        assert!(lines[4].starts_with("1,"));
    }

    #[test]
    fn posterior_density_integrates_to_one() {
        let grid = PhaseGrid::default();
        let post = Posterior::uniform(grid);
        let mut buf = Vec::new();
        write_posterior_csv(&mut buf, &Provenance::new(&(), None), &post).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let total: f64 = text
            .lines()
            .skip(4)
            .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((total * grid.spacing() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn likelihood_rows_and_labels() {
        let model = LikelihoodModel::with_mean_photons(Scheme::Optimal, 2.0).unwrap();
        let mut buf = Vec::new();
        write_likelihood_csv(&mut buf, &Provenance::new(&(), None), &model, &linspace(-1.0, 1.0, 3), 4).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<&str> = text.lines().skip(4).collect();
        assert_eq!(rows.len(), 3 * 5);
        assert!(rows[0].starts_with("-1,plus,"));
        assert!(rows[4].starts_with("-1,null4,"));
    }

    #[test]
    fn document_round_trip() {
        let doc = Document::new("su11.test/1", Provenance::new(&vec![1, 2], Some(9)), vec![0.1, 1e-300]);
        let back: Document<Vec<f64>> = serde_json::from_str(&doc.to_json()).unwrap();
        assert_eq!(back, doc);
        assert_eq!(linspace(0.0, 1.0, 5), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn float_text_round_trips() {
        for x in [0.0, 0.75, 1e-4, 4.1666e-5, 5e-324, -2.5e-300, 123456.5, 1e20] {
            assert_eq!(format_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(format_f64(2.6e-31), "2.6e-31");
        assert_eq!(format_f64(0.5), "0.5");
    }
}
