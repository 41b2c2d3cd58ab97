//! Feedback schedules and replay of recorded trajectories.

use su11_core::posterior::{PhaseGrid, Posterior};
use su11_core::protocol::{run_fixed, run_ladder, run_optimal, ModelSet, ProtocolConfig, ProtocolMode};

fn models() -> ModelSet {
    ModelSet::new(4.0, PhaseGrid::default()).unwrap()
}

#[test]
fn optimal_feedback_follows_the_previous_map() {
    let models = models();
    let config = ProtocolConfig {
        total_measurements: 300,
        ..Default::default()
    };
    let trial = run_optimal(&config, &models, 17).unwrap();
    let steps = &trial.record.steps;
    assert_eq!(steps[0].theta, models.grid().point(models.grid().midpoint_index()));
    for w in steps.windows(2) {
        assert_eq!(w[1].theta, w[0].map);
    }
}

#[test]
fn recorded_trajectory_rebuilds_the_posterior() {
    // replay through the uncached model, feedback phase by feedback phase
    let models = models();
    let config = ProtocolConfig {
        total_measurements: 200,
        ..Default::default()
    };
    let trial = run_optimal(&config, &models, 4).unwrap();
    let model = models.optimal().model();
    let grid = *models.grid();
    let mut post = Posterior::uniform(grid);
    for s in &trial.record.steps {
        post.update(&model.likelihood_curve(s.outcome, &grid, s.theta).unwrap()).unwrap();
        assert_eq!(post.map_estimate(), s.map);
    }
    for (a, b) in post.density().iter().zip(trial.posterior.density()) {
        assert!((a - b).abs() < 1e-6 * (1.0 + b));
    }
}

#[test]
fn fixed_phase_never_moves() {
    let models = models();
    let config = ProtocolConfig {
        mode: ProtocolMode::FixedTheta,
        fixed_theta: Some(0.7),
        total_measurements: 400,
        ..Default::default()
    };
    let trial = run_fixed(&config, &models, 8).unwrap();
    let theta = models.grid().point(models.grid().nearest_index(0.7));
    assert!(trial.record.steps.iter().all(|s| s.theta == theta));
    if let Some(m) = trial.record.m_threshold {
        assert!((1..=400).contains(&m));
    }
}

#[test]
fn ladder_ramp_respects_the_cap_then_holds() {
    let models = models();
    let config = ProtocolConfig {
        mode: ProtocolMode::Ladder,
        ..Default::default()
    };
    let trial = run_ladder(&config, &models, 21).unwrap();
    let rec = &trial.record;
    let pre = config.ladder.pre_rounds;
    let mut previous_map = models.grid().lo();
    for s in &rec.steps[..pre] {
        assert!(s.theta <= config.ladder.ramp_cap_fraction * previous_map + 1e-12);
        previous_map = s.map;
    }
    let rough = rec.rough_estimate.unwrap();
    assert_eq!(rough, rec.steps[pre - 1].map);
    let hold = models.grid().point(models.grid().nearest_index(config.ladder.final_fraction * rough));
    assert!(rec.steps[pre..].iter().all(|s| s.theta == hold));
    assert_eq!(rec.steps.len(), config.total_measurements);
    if rec.pruned == Some(true) {
        assert!(!rec.summary.peaks.is_bimodal());
    }
}

#[test]
fn runners_reject_mismatched_modes() {
    let models = models();
    let config = ProtocolConfig::default();
    assert!(run_fixed(&config, &models, 1).is_err());
    assert!(run_ladder(&config, &models, 1).is_err());
    let fixed = ProtocolConfig {
        mode: ProtocolMode::FixedTheta,
        ..Default::default()
    };
    assert!(run_fixed(&fixed, &models, 1).is_err(), "fixed mode needs a phase");
}
