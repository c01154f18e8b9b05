//! Deterministic DDIM sampling (eta = 0) and inversion against a pluggable
//! noise predictor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{LatentGrid, LatticeError};

pub const DEFAULT_BETA_START: f64 = 8.5e-4;
pub const DEFAULT_BETA_END: f64 = 1.2e-2;
pub const DEFAULT_TRAIN_STEPS: usize = 1000;
/// Steps used for inversion and sampling when building pairs.
pub const PAIR_STEPS: usize = 50;
/// Steps used at inference time.
pub const INFERENCE_STEPS: usize = 20;

#[derive(Debug, Error)]
pub enum DdimError {
    #[error("schedule needs at least one step")]
    NoSteps,
    #[error("alpha_bar[{index}] = {value} is outside (0, 1)")]
    OutOfRange { index: usize, value: f64 },
    #[error("alpha_bar is not strictly decreasing at step {0}")]
    NotDecreasing(usize),
    #[error("invalid beta range {start}..{end} over {train_steps} training steps")]
    BetaRange { start: f64, end: f64, train_steps: usize },
    #[error("cannot stride {train_steps} training steps into {steps} inference steps")]
    Stride { train_steps: usize, steps: usize },
    #[error("denoiser failed at step {step}: {source}")]
    Denoiser {
        step: usize,
        #[source]
        source: DenoiseError,
    },
    #[error("denoiser returned shape {actual:?} for input {expected:?} at step {step}")]
    ShapeContract { step: usize, expected: (usize, usize, usize), actual: (usize, usize, usize) },
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

pub type Result<T, E = DdimError> = std::result::Result<T, E>;

/// Failure reported by a [`Denoiser`] implementation.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct DenoiseError(pub String);

impl DenoiseError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleDerivation {
    LinearBeta { beta_start: f64, beta_end: f64, train_steps: usize },
    Explicit,
}

/// Discretized schedule with `alpha_bar[0] = 1` followed by `T` strictly
/// decreasing values in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    train_timesteps: Vec<u32>,
    derivation: ScheduleDerivation,
}

impl NoiseSchedule {
    /// Schedule from explicit `alpha_bar_1..alpha_bar_T`.
    pub fn explicit(alpha_bar: Vec<f64>) -> Result<Self> {
        let steps = alpha_bar.len();
        Self::validated(alpha_bar, (1..=steps as u32).collect(), ScheduleDerivation::Explicit)
    }

    /// Linear betas over `train_steps`, cumulated into `alpha_bar` and
    /// strided uniformly down to `steps` inference steps. Step `i` maps to
    /// training index `floor(i * train_steps / steps) - 1`, so the last step
    /// always lands on the final training step.
    pub fn linear_beta(beta_start: f64, beta_end: f64, train_steps: usize, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(DdimError::NoSteps);
        }
        if train_steps < steps {
            return Err(DdimError::Stride { train_steps, steps });
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(DdimError::BetaRange { start: beta_start, end: beta_end, train_steps });
        }
        let mut cumulative = Vec::with_capacity(train_steps);
        let mut acc = 1.0;
        for n in 0..train_steps {
            let beta = if train_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * n as f64 / (train_steps - 1) as f64
            };
            acc *= 1.0 - beta;
            cumulative.push(acc);
        }
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut train_timesteps = Vec::with_capacity(steps);
        for i in 1..=steps {
            let idx = i * train_steps / steps - 1;
            alpha_bar.push(cumulative[idx]);
            train_timesteps.push(idx as u32);
        }
        Self::validated(
            alpha_bar,
            train_timesteps,
            ScheduleDerivation::LinearBeta { beta_start, beta_end, train_steps },
        )
    }

    /// The Stable-Diffusion-style default (linear beta 8.5e-4..1.2e-2 over
    /// 1000 training steps) at `steps` inference steps.
    pub fn default_with_steps(steps: usize) -> Result<Self> {
        Self::linear_beta(DEFAULT_BETA_START, DEFAULT_BETA_END, DEFAULT_TRAIN_STEPS, steps)
    }

    fn validated(tail: Vec<f64>, tail_timesteps: Vec<u32>, derivation: ScheduleDerivation) -> Result<Self> {
        if tail.is_empty() {
            return Err(DdimError::NoSteps);
        }
        for (i, &a) in tail.iter().enumerate() {
            if !(a > 0.0 && a < 1.0) {
                return Err(DdimError::OutOfRange { index: i + 1, value: a });
            }
        }
        let mut alpha_bar = Vec::with_capacity(tail.len() + 1);
        alpha_bar.push(1.0);
        alpha_bar.extend(tail);
        if let Some(i) = (1..alpha_bar.len()).find(|&i| alpha_bar[i] >= alpha_bar[i - 1]) {
            return Err(DdimError::NotDecreasing(i));
        }
        let mut train_timesteps = Vec::with_capacity(tail_timesteps.len() + 1);
        train_timesteps.push(0);
        train_timesteps.extend(tail_timesteps);
        Ok(Self { alpha_bar, train_timesteps, derivation })
    }

    /// Number of inference steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn derivation(&self) -> &ScheduleDerivation {
        &self.derivation
    }

    pub fn timestep(&self, t: usize) -> Timestep {
        Timestep { index: t, train_step: self.train_timesteps[t], alpha_bar: self.alpha_bar[t] }
    }

    pub fn summary(&self) -> ScheduleSummary {
        ScheduleSummary {
            steps: self.steps(),
            derivation: self.derivation.clone(),
            alpha_bar_final: self.alpha_bar[self.steps()],
        }
    }
}

/// Compact schedule description stored in provenance records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSummary {
    pub steps: usize,
    pub derivation: ScheduleDerivation,
    pub alpha_bar_final: f64,
}

/// Where the denoiser is evaluated: inference index, the corresponding
/// training timestep, and its `alpha_bar`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timestep {
    pub index: usize,
    pub train_step: u32,
    pub alpha_bar: f64,
}

/// Opaque handle for a prompt or embedding resolved by the backend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditioningRef(pub u64);

/// Noise predictor `eps_theta(z_t, t, cond)`.
pub trait Denoiser {
    fn predict(&self, z: &LatentGrid, t: Timestep, cond: ConditioningRef) -> Result<LatentGrid, DenoiseError>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict(&self, z: &LatentGrid, t: Timestep, cond: ConditioningRef) -> Result<LatentGrid, DenoiseError> {
        (**self).predict(z, t, cond)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict(&self, z: &LatentGrid, t: Timestep, cond: ConditioningRef) -> Result<LatentGrid, DenoiseError> {
        (**self).predict(z, t, cond)
    }
}

/// Always predicts zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict(&self, z: &LatentGrid, _: Timestep, _: ConditioningRef) -> Result<LatentGrid, DenoiseError> {
        Ok(z.map(|_| 0.0))
    }
}

/// Bayes-optimal predictor when `z_0 ~ N(0, I)`:
/// `eps_hat(z_t, t) = sqrt(1 - alpha_bar_t) * z_t`, applied pointwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianDenoiser;

impl GaussianDenoiser {
    pub fn eps(alpha_bar: f64, z: f64) -> f64 {
        (1.0 - alpha_bar).sqrt() * z
    }
}

impl Denoiser for GaussianDenoiser {
    fn predict(&self, z: &LatentGrid, t: Timestep, _: ConditioningRef) -> Result<LatentGrid, DenoiseError> {
        Ok(z.map(|v| Self::eps(t.alpha_bar, v)))
    }
}

pub fn analytic_gaussian_denoiser() -> GaussianDenoiser {
    GaussianDenoiser
}

fn predict_checked<D: Denoiser + ?Sized>(
    denoiser: &D,
    z: &LatentGrid,
    t: Timestep,
    cond: ConditioningRef,
) -> Result<LatentGrid> {
    let eps = denoiser.predict(z, t, cond).map_err(|source| DdimError::Denoiser { step: t.index, source })?;
    if eps.shape() != z.shape() {
        return Err(DdimError::ShapeContract { step: t.index, expected: z.shape(), actual: eps.shape() });
    }
    eps.ensure_finite()?;
    Ok(eps)
}

/// One deterministic move from `alpha_from` to `alpha_to` with noise
/// estimate `eps`:
/// `x0 = (z - sqrt(1 - a_from) eps) / sqrt(a_from)`,
/// `z' = sqrt(a_to) x0 + sqrt(1 - a_to) eps`.
fn ddim_step(z: &LatentGrid, eps: &LatentGrid, alpha_from: f64, alpha_to: f64) -> Result<LatentGrid> {
    let (sf, nf) = (alpha_from.sqrt(), (1.0 - alpha_from).sqrt());
    let (st, nt) = (alpha_to.sqrt(), (1.0 - alpha_to).sqrt());
    Ok(z.zip_map(eps, |zv, ev| {
        let x0 = (zv - nf * ev) / sf;
        st * x0 + nt * ev
    })?)
}

/// Runs `t = T..1` and returns `z_0`.
pub fn ddim_sample<D: Denoiser + ?Sized>(
    z_t: &LatentGrid,
    denoiser: &D,
    schedule: &NoiseSchedule,
    cond: ConditioningRef,
) -> Result<LatentGrid> {
    z_t.ensure_finite()?;
    let mut z = z_t.clone();
    for t in (1..=schedule.steps()).rev() {
        let step = schedule.timestep(t);
        let eps = predict_checked(denoiser, &z, step, cond)?;
        z = ddim_step(&z, &eps, step.alpha_bar, schedule.alpha_bar(t - 1))?;
    }
    Ok(z)
}

/// Inverts `z_0` to `z_T`, reusing the noise predicted at `z_t` for the move
/// to `t + 1`. Returns the full trajectory `z_0..=z_T` (length `T + 1`).
pub fn ddim_invert<D: Denoiser + ?Sized>(
    z_0: &LatentGrid,
    denoiser: &D,
    schedule: &NoiseSchedule,
    cond: ConditioningRef,
) -> Result<Vec<LatentGrid>> {
    z_0.ensure_finite()?;
    let mut trajectory = Vec::with_capacity(schedule.steps() + 1);
    trajectory.push(z_0.clone());
    for t in 0..schedule.steps() {
        let step = schedule.timestep(t);
        let z = &trajectory[t];
        let eps = predict_checked(denoiser, z, step, cond)?;
        let next = ddim_step(z, &eps, step.alpha_bar, schedule.alpha_bar(t + 1))?;
        trajectory.push(next);
    }
    Ok(trajectory)
}

/// `||sample(invert(z_0)) - z_0|| / ||z_0||`.
pub fn round_trip_error<D: Denoiser + ?Sized>(
    z_0: &LatentGrid,
    denoiser: &D,
    schedule: &NoiseSchedule,
    cond: ConditioningRef,
) -> Result<f64> {
    let trajectory = ddim_invert(z_0, denoiser, schedule, cond)?;
    let back = ddim_sample(trajectory.last().expect("non-empty"), denoiser, schedule, cond)?;
    Ok(back.sub(z_0)?.l2_norm() / z_0.l2_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, standard_normal};

    fn noise(seed: u64) -> LatentGrid {
        let mut r = seeded(seed);
        LatentGrid::from_fn(4, 8, 8, |_, _, _| standard_normal(&mut r)).unwrap()
    }

    #[test]
    fn default_schedule_shape() {
        let s = NoiseSchedule::default_with_steps(50).unwrap();
        assert_eq!(s.steps(), 50);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.timestep(50).train_step, 999);
        assert_eq!(s.timestep(1).train_step, 19);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        // linear betas: alpha_bar_999 = prod (1 - beta_n)
        let direct: f64 = (0..1000).map(|n| 1.0 - (8.5e-4 + (1.2e-2 - 8.5e-4) * n as f64 / 999.0)).product();
        assert!((s.alpha_bar(50) - direct).abs() < 1e-15);
        assert_eq!(NoiseSchedule::default_with_steps(1000).unwrap().steps(), 1000);
        assert_eq!(NoiseSchedule::default_with_steps(400).unwrap().steps(), 400);
    }

    #[test]
    fn schedule_validation() {
        assert!(matches!(NoiseSchedule::explicit(vec![]), Err(DdimError::NoSteps)));
        assert!(matches!(NoiseSchedule::explicit(vec![0.9, 0.95]), Err(DdimError::NotDecreasing(2))));
        assert!(matches!(NoiseSchedule::explicit(vec![1.0]), Err(DdimError::OutOfRange { .. })));
        assert!(matches!(NoiseSchedule::explicit(vec![0.5, 0.0]), Err(DdimError::OutOfRange { .. })));
        assert!(NoiseSchedule::default_with_steps(2000).is_err());
        assert!(NoiseSchedule::linear_beta(0.02, 0.01, 100, 10).is_err());
    }

    #[test]
    fn zero_denoiser_closed_form() {
        let s = NoiseSchedule::default_with_steps(50).unwrap();
        let z = noise(1);
        let out = ddim_sample(&z, &ZeroDenoiser, &s, ConditioningRef(0)).unwrap();
        let expected = z.scale(1.0 / s.alpha_bar(50).sqrt());
        assert!(out.max_abs_diff(&expected).unwrap() <= 1e-12 * expected.max_abs());

        let traj = ddim_invert(&z, &ZeroDenoiser, &s, ConditioningRef(0)).unwrap();
        assert_eq!(traj.len(), 51);
        let zt = traj.last().unwrap();
        assert!(zt.max_abs_diff(&z.scale(s.alpha_bar(50).sqrt())).unwrap() < 1e-12);
    }

    #[test]
    fn constant_stays_constant_under_zero_denoiser() {
        let s = NoiseSchedule::default_with_steps(10).unwrap();
        let z = LatentGrid::filled(1, 3, 3, 2.0).unwrap();
        let traj = ddim_invert(&z, &ZeroDenoiser, &s, ConditioningRef(0)).unwrap();
        for (t, zt) in traj.iter().enumerate() {
            let expected = 2.0 * s.alpha_bar(t).sqrt();
            assert!(zt.data().iter().all(|v| (v - expected).abs() < 1e-12));
        }
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn gaussian_denoiser_values() {
        let z = LatentGrid::filled(1, 2, 2, 2.0).unwrap();
        let t = Timestep { index: 3, train_step: 3, alpha_bar: 0.5 };
        let eps = GaussianDenoiser.predict(&z, t, ConditioningRef(0)).unwrap();
        assert!(eps.data().iter().all(|v| (v - 0.5f64.sqrt() * 2.0).abs() < 1e-15));
        assert!((eps.get(0, 0, 0) - 1.41421).abs() < 1e-5);
        let t0 = Timestep { index: 0, train_step: 0, alpha_bar: 1.0 };
        assert_eq!(GaussianDenoiser.predict(&z, t0, ConditioningRef(0)).unwrap().max_abs(), 0.0);
        assert_eq!(eps.shape(), z.shape());
    }

    #[test]
    fn gaussian_sampling_is_product_of_step_gains() {
        // oracle: substitute eps = sqrt(1 - a_t) z_t into the update by hand
        let s = NoiseSchedule::default_with_steps(25).unwrap();
        let gain: f64 = (1..=25)
            .map(|t| {
                let (a, b) = (s.alpha_bar(t - 1), s.alpha_bar(t));
                a.sqrt() * b.sqrt() + (1.0 - a).sqrt() * (1.0 - b).sqrt()
            })
            .product();
        let z = noise(2);
        let out = ddim_sample(&z, &GaussianDenoiser, &s, ConditioningRef(0)).unwrap();
        assert!(out.max_abs_diff(&z.scale(gain)).unwrap() < 1e-12);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::explicit(vec![0.25]).unwrap();
        let z = LatentGrid::filled(1, 1, 2, 1.0).unwrap();
        let out = ddim_sample(&z, &GaussianDenoiser, &s, ConditioningRef(0)).unwrap();
        // eps = sqrt(.75); x0 = (1 - .75) / .5 = .5; z0 = x0 since alpha_bar_0 = 1
        assert!(out.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn pointwise_denoiser_keeps_unperturbed_positions() {
        let s = NoiseSchedule::default_with_steps(20).unwrap();
        let z = noise(3);
        let mut bumped = z.clone();
        bumped.set(1, 4, 4, 5.0);
        let a = ddim_sample(&z, &GaussianDenoiser, &s, ConditioningRef(0)).unwrap();
        let b = ddim_sample(&bumped, &GaussianDenoiser, &s, ConditioningRef(0)).unwrap();
        for i in 0..a.data().len() {
            if i != bumped.index(1, 4, 4) {
                assert!((a.data()[i] - b.data()[i]).abs() <= 1e-10);
            }
        }
    }

    struct Failing;
    impl Denoiser for Failing {
        fn predict(&self, _: &LatentGrid, t: Timestep, _: ConditioningRef) -> Result<LatentGrid, DenoiseError> {
            Err(DenoiseError::new(format!("boom at {}", t.index)))
        }
    }

    struct Shrinking;
    impl Denoiser for Shrinking {
        fn predict(&self, _: &LatentGrid, _: Timestep, _: ConditioningRef) -> Result<LatentGrid, DenoiseError> {
            Ok(LatentGrid::zeros(1, 1, 1).unwrap())
        }
    }

    #[test]
    fn denoiser_failures_carry_step() {
        let s = NoiseSchedule::default_with_steps(5).unwrap();
        let z = noise(4);
        match ddim_sample(&z, &Failing, &s, ConditioningRef(0)) {
            Err(DdimError::Denoiser { step: 5, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match ddim_invert(&z, &Failing, &s, ConditioningRef(0)) {
            Err(DdimError::Denoiser { step: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(ddim_sample(&z, &Shrinking, &s, ConditioningRef(0)), Err(DdimError::ShapeContract { .. })));
    }
}
