//! Trains the network on a seeded synthetic city whose targets are noisy
//! pattern estimates, and checks the final validation loss against the
//! estimation noise floor — the KLMSE a perfect predictor of the planted
//! truth would score against an independent noisy re-estimate.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use alcnn_core::copca::fit_joint;
use alcnn_core::dwt::{mine_pattern, WaveletFilters};
use alcnn_core::features::{build_feature_matrix, FeatureConfig};
use alcnn_core::grid::{kl_divergence, CellIndex, DemandVector, ProbVector};
use alcnn_core::model::{build_training_instances, train, LatentFeatureTensor, TrainConfig};
use alcnn_core::synth::{generate_city, GeneratedCity, SyntheticCitySpec};

/// Mine a pattern for every cell from fresh Poisson day samples of the
/// planted truth at the city's own intensities.
fn noisy_estimates(
    city: &GeneratedCity,
    days: usize,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<CellIndex, ProbVector> {
    let f = WaveletFilters::by_name("db2").unwrap();
    let mut out = BTreeMap::new();
    for (&cell, planted) in &city.planted {
        let intensity = city.intensities[&cell];
        let demands: Vec<DemandVector> = (0..days)
            .map(|day| {
                let counts: Vec<u32> = planted
                    .values()
                    .iter()
                    .map(|&p| {
                        let lambda = (intensity * p).max(1e-12);
                        Poisson::new(lambda).unwrap().sample(rng) as u32
                    })
                    .collect();
                DemandVector { cell, day: day as i64, counts }
            })
            .collect();
        let mined = mine_pattern(&demands, &f, 0.11, 1e-6).unwrap();
        out.insert(cell, mined.pattern.pattern);
    }
    out
}

#[test]
fn validation_reaches_the_estimation_noise_floor() {
    let spec = SyntheticCitySpec {
        rows: 10,
        cols: 10,
        slots: 24,
        days: 14,
        base_intensity: 3000.0,
        transit_count: 4,
        business_count: 3,
        park_count: 3,
        seed: 77,
        ..SyntheticCitySpec::default()
    };
    let city = generate_city(&spec, spec.seed).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let targets = noisy_estimates(&city, spec.days, &mut rng);
    let re_estimates = noisy_estimates(&city, spec.days, &mut rng);

    // The floor: even a perfect model of the planted truth cannot score
    // better against noisy targets than the noise itself.
    let floor = city
        .planted
        .iter()
        .map(|(cell, planted)| kl_divergence(planted, &re_estimates[cell]).unwrap().powi(2))
        .sum::<f64>()
        / city.planted.len() as f64;

    let fcfg = FeatureConfig::default();
    let features = build_feature_matrix(&city.sources, &city.grid, &fcfg).unwrap();
    let (_, latents, _) = fit_joint(&features, &features, 8).unwrap();
    let tensor = LatentFeatureTensor::from_latents(spec.rows, spec.cols, &latents).unwrap();

    let cfg = TrainConfig {
        rng_seed: spec.seed,
        scales: vec![1, 3, 5],
        batch_size: 16,
        learning_rate: 0.003,
        max_epochs: 200,
        patience: 40,
        ..TrainConfig::default()
    };
    let insts = build_training_instances(&tensor, &targets, &cfg.scales).unwrap();
    let out = train(&insts, &cfg).unwrap();

    assert!(
        out.best_val_klmse < floor + 0.05,
        "validation KLMSE {:.6} above the noise floor {:.6} + 0.05",
        out.best_val_klmse,
        floor
    );
}
