//! Monte-Carlo checks of the analytic noise predictor and the training-time
//! noising it is meant to invert.

use sourceswap::ddim::{ConditioningRef, Denoiser, GaussianDenoiser, NoiseSchedule};
use sourceswap::pipeline::training::noise_latent;
use sourceswap::{rng, LatentGrid};

const SAMPLES: usize = 100_000;

/// With `z_0, eps ~ N(0, 1)` the posterior mean `E[eps | z_t]` is linear in
/// `z_t` with slope `Cov(eps, z_t) / Var(z_t) = sqrt(1 - a)`. The slope is
/// estimated by least squares and must sit within three standard errors of
/// the predictor's.
#[test]
fn predictor_is_posterior_mean_within_three_se() {
    let schedule = NoiseSchedule::default_with_steps(50).unwrap();
    let mut r = rng::seeded(2024);
    for t in [1, 10, 25, 50] {
        let step = schedule.timestep(t);
        let z0 = LatentGrid::from_fn(1, 1, SAMPLES, |_, _, _| rng::standard_normal(&mut r)).unwrap();
        let eps = LatentGrid::from_fn(1, 1, SAMPLES, |_, _, _| rng::standard_normal(&mut r)).unwrap();
        let zt = noise_latent(&z0, &eps, step.alpha_bar).unwrap();

        let sxx: f64 = zt.data().iter().map(|z| z * z).sum();
        let sxy: f64 = zt.data().iter().zip(eps.data()).map(|(z, e)| z * e).sum();
        let slope = sxy / sxx;
        let rss: f64 = zt.data().iter().zip(eps.data()).map(|(z, e)| (e - slope * z).powi(2)).sum();
        let se = (rss / (SAMPLES - 1) as f64 / sxx).sqrt();

        let predicted = GaussianDenoiser.predict(&zt, step, ConditioningRef(0)).unwrap();
        let k = predicted.data()[0] / zt.data()[0];
        assert!((k - (1.0 - step.alpha_bar).sqrt()).abs() < 1e-12);
        assert!((slope - k).abs() < 3.0 * se, "t={t}: slope {slope} vs {k} (se {se})");
    }
}

/// The predictor also minimizes the expected squared error among scalings
/// of `z_t`: nudging its slope either way does worse on the same draws.
#[test]
fn predictor_beats_perturbed_slopes() {
    let schedule = NoiseSchedule::default_with_steps(50).unwrap();
    let step = schedule.timestep(30);
    let mut r = rng::seeded(7);
    let z0 = LatentGrid::from_fn(1, 1, SAMPLES, |_, _, _| rng::standard_normal(&mut r)).unwrap();
    let eps = LatentGrid::from_fn(1, 1, SAMPLES, |_, _, _| rng::standard_normal(&mut r)).unwrap();
    let zt = noise_latent(&z0, &eps, step.alpha_bar).unwrap();
    let k = (1.0 - step.alpha_bar).sqrt();
    let mse = |slope: f64| -> f64 {
        zt.data().iter().zip(eps.data()).map(|(z, e)| (e - slope * z).powi(2)).sum::<f64>() / SAMPLES as f64
    };
    assert!(mse(k) < mse(k * 1.05));
    assert!(mse(k) < mse(k * 0.95));
}
