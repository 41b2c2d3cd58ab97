//! Goodness of fit of the outcome sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use su11_core::measurement::{LikelihoodModel, Scheme};

/// Pearson χ² p-value of `draws` samples at `delta`; cells expecting fewer
/// than five counts are merged.
fn p_value(model: &LikelihoodModel, delta: f64, draws: usize, seed: u64) -> f64 {
    let pmf = model.pmf(delta);
    let mut counts = vec![0_usize; pmf.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..draws {
        counts[model.sample(delta, &mut rng).unwrap().index()] += 1;
    }
    let (mut stat, mut cells) = (0.0, 0);
    let (mut pooled_obs, mut pooled_exp) = (0.0, 0.0);
    for (c, p) in counts.iter().zip(&pmf) {
        let e = p * draws as f64;
        if e < 5.0 {
            pooled_obs += *c as f64;
            pooled_exp += e;
        } else {
            stat += (*c as f64 - e).powi(2) / e;
            cells += 1;
        }
    }
    if pooled_exp > 0.0 {
        stat += (pooled_obs - pooled_exp).powi(2) / pooled_exp.max(1e-300);
        cells += 1;
    }
    1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn photon_counts_follow_the_likelihood() {
    let model = LikelihoodModel::with_mean_photons(Scheme::PhotonNumber, 4.0).unwrap();
    for (i, delta) in [0.05, 0.6, 2.0].into_iter().enumerate() {
        let p = p_value(&model, delta, 20_000, 100 + i as u64);
        assert!(p > 1e-3, "δ={delta}: p={p}");
    }
}

#[test]
fn optimal_outcomes_follow_the_likelihood() {
    let model = LikelihoodModel::with_mean_photons(Scheme::Optimal, 2.0).unwrap();
    for (i, delta) in [-0.3, 0.1, 1.0].into_iter().enumerate() {
        let p = p_value(&model, delta, 20_000, 200 + i as u64);
        assert!(p > 1e-3, "δ={delta}: p={p}");
    }
}

#[test]
fn sample_mean_photon_number_is_thermal() {
    let model = LikelihoodModel::with_mean_photons(Scheme::PhotonNumber, 2.0).unwrap();
    let delta: f64 = 0.8;
    let want = 8.0 * (delta / 2.0).sin().powi(2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 50_000;
    let mean = (0..n).map(|_| model.sample(delta, &mut rng).unwrap().index() as f64).sum::<f64>() / n as f64;
    // thermal variance N(N+1)
    let se = (want * (want + 1.0) / n as f64).sqrt();
    assert!((mean - want).abs() < 5.0 * se, "{mean} vs {want}");
}
