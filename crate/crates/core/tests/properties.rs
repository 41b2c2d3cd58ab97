use std::sync::OnceLock;

use proptest::prelude::*;
use su11_core::ensemble::{run_campaign, trial_seed, CampaignConfig, EnsembleStats, GridSettings};
use su11_core::export::format_f64;
use su11_core::measurement::{LikelihoodModel, Outcome, Scheme};
use su11_core::posterior::{PhaseGrid, Posterior, LOG_FLOOR};
use su11_core::protocol::{run_trial, ModelSet, ProtocolConfig, ProtocolMode, TrialRecord};

fn models() -> &'static ModelSet {
    static MODELS: OnceLock<ModelSet> = OnceLock::new();
    MODELS.get_or_init(|| ModelSet::new(2.0, PhaseGrid::default()).unwrap())
}

fn photon() -> &'static LikelihoodModel {
    models().photon_number().model()
}

fn optimal() -> &'static LikelihoodModel {
    models().optimal().model()
}

fn mode() -> impl Strategy<Value = ProtocolMode> {
    prop_oneof![
        Just(ProtocolMode::FixedTheta),
        Just(ProtocolMode::Ladder),
        Just(ProtocolMode::OptimalAdaptive),
    ]
}

fn short_config(mode: ProtocolMode, phi: f64, m: usize) -> ProtocolConfig {
    let mut c = ProtocolConfig {
        mode,
        phi_true: phi,
        total_measurements: m,
        fixed_theta: Some(0.7),
        ..Default::default()
    };
    c.ladder.pre_rounds = m / 4;
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn photon_counting_is_even(d in -3.0_f64..3.0) {
        let (a, b) = (photon().pmf(d), photon().pmf(-d));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn optimal_outcomes_mirror(d in -3.0_f64..3.0) {
        let (a, b) = (optimal().pmf(d), optimal().pmf(-d));
        prop_assert!((a[0] - b[1]).abs() < 1e-12);
        prop_assert!((a[1] - b[0]).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b).skip(2) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pmfs_are_distributions(d in -std::f64::consts::PI..std::f64::consts::PI) {
        for m in [photon(), optimal()] {
            let pmf = m.pmf(d);
            prop_assert!(pmf.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cached_rows_match_direct_evaluation(k in 0_usize..8, j in 0_usize..1024) {
        let lik = models().photon_number();
        let grid = lik.grid();
        let j = j * (grid.len() - 1) / 1023;
        let theta = grid.point(j);
        let row = lik.log_row(Outcome::PhotonPair(k), j).unwrap();
        for (i, phi) in grid.points().enumerate().step_by(37) {
            let p = photon().likelihood(Outcome::PhotonPair(k), phi - theta).unwrap();
            let cached = if row[i] <= LOG_FLOOR { 0.0 } else { row[i].exp() };
            prop_assert!((cached - p).abs() <= 1e-12 * p + 1e-15, "{} vs {}", cached, p);
        }
    }

    #[test]
    fn float_text_round_trips(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        prop_assert_eq!(format_f64(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn trial_seeds_separate_cells_and_trials(master in any::<u64>(), cell in 0_u64..64, trial in 0_u64..1000) {
        let s = trial_seed(master, cell, trial);
        prop_assert_ne!(s, trial_seed(master, cell + 1, trial));
        prop_assert_ne!(s, trial_seed(master, cell, trial + 1));
        prop_assert_ne!(s, trial_seed(master.wrapping_add(1), cell, trial));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn update_order_does_not_matter(picks in prop::collection::vec((0_usize..4, 0_usize..1024), 1000), seed in any::<u64>()) {
        let lik = models().optimal();
        let grid = *models().grid();
        let rows: Vec<&[f64]> = picks
            .iter()
            .map(|&(o, t)| lik.log_row(Outcome::from_index(Scheme::Optimal, o), t * (grid.len() - 1) / 1023).unwrap())
            .collect();

        let mut forward = Posterior::uniform(grid);
        for r in &rows {
            forward.update_log(r).unwrap();
        }
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut state = seed;
        for i in (1..order.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (state >> 33) as usize % (i + 1));
        }
        let mut shuffled = Posterior::uniform(grid);
        for &i in &order {
            shuffled.update_log(rows[i]).unwrap();
        }
        let mut total = vec![0.0; grid.len()];
        for r in &rows {
            for (t, l) in total.iter_mut().zip(r.iter()) {
                *t += l;
            }
        }
        let batch = Posterior::from_log_density(grid, total).unwrap();

        let h = grid.spacing();
        for ((a, b), c) in forward.density().iter().zip(shuffled.density()).zip(batch.density()) {
            prop_assert!((a - b).abs() * h < 1e-9);
            prop_assert!((a - c).abs() * h < 1e-9);
        }
        prop_assert!((forward.density().iter().sum::<f64>() * h - 1.0).abs() < 1e-9);
    }

    #[test]
    fn trials_replay_and_round_trip(mode in mode(), phi in 0.2_f64..1.3, seed in any::<u64>()) {
        let config = short_config(mode, phi, 40);
        let a = run_trial(&config, models(), seed).unwrap();
        let b = run_trial(&config, models(), seed).unwrap();
        prop_assert_eq!(&a.record, &b.record);
        prop_assert_eq!(a.posterior.log_weights(), b.posterior.log_weights());

        let grid = models().grid();
        for s in &a.record.steps {
            prop_assert!(grid.on_grid_index(s.theta).is_some());
        }
        prop_assert_eq!(a.record.steps.len(), 40);

        let json = serde_json::to_string(&a.record).unwrap();
        let back: TrialRecord = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, a.record);
    }

    #[test]
    fn posterior_stays_normalized(picks in prop::collection::vec((0_usize..6, 0.0_f64..1.57), 1..200)) {
        let grid = PhaseGrid::default();
        let mut post = Posterior::uniform(grid);
        for (k, theta) in picks {
            let row = photon().likelihood_curve(Outcome::PhotonPair(k), &grid, theta).unwrap();
            if post.update(&row).is_err() {
                continue;
            }
            let total: f64 = post.density().iter().sum::<f64>() * grid.spacing();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(post.variance() >= 0.0);
        }
    }
}

#[test]
fn ensemble_stats_round_trip() {
    let config = CampaignConfig {
        protocol: short_config(ProtocolMode::OptimalAdaptive, 0.75, 30),
        mean_photons: vec![2.0],
        phi_true: vec![0.5, 0.75],
        trials: 4,
        master_seed: 11,
        grid: GridSettings::default(),
        ..Default::default()
    };
    let stats = run_campaign(&config).unwrap();
    assert_eq!(stats.len(), 2);
    let json = serde_json::to_string(&stats).unwrap();
    let back: Vec<EnsembleStats> = serde_json::from_str(&json).unwrap();
    assert_eq!(back, stats);
    for s in &stats {
        assert!(s.mse_ci[0] <= s.mse && s.mse <= s.mse_ci[1]);
        assert_eq!(s.summaries.len(), 4);
    }
}

#[test]
fn campaigns_are_reproducible() {
    let config = CampaignConfig {
        protocol: short_config(ProtocolMode::Ladder, 0.75, 60),
        mean_photons: vec![2.0, 4.0],
        trials: 3,
        master_seed: 5,
        ..Default::default()
    };
    let a = run_campaign(&config).unwrap();
    let b = run_campaign(&config).unwrap();
    assert_eq!(a, b);
    let other = run_campaign(&CampaignConfig { master_seed: 6, ..config }).unwrap();
    assert_ne!(a[0].summaries, other[0].summaries);
}
