//! Particle-filter posterior over the three unknown phases.

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::device::{phasors, PhaseTriple, TwoPhotonEngine, OUTCOMES};
use crate::error::{Error, Result};

/// Largest outcome alphabet a [`PhaseLikelihood`] may have.
pub const MAX_OUTCOMES: usize = 16;

/// Outcome model `p(outcome | position, control)` where position and control
/// add up to the phases seen by the device.
pub trait PhaseLikelihood: Sync {
    /// Cached form of a phase triple, reused across many evaluations.
    type Prepared: Send + Sync;

    fn n_outcomes(&self) -> usize;

    fn prepare(&self, phases: &PhaseTriple) -> Self::Prepared;

    /// Writes the outcome distribution into `out[..n_outcomes()]`.
    fn prepared_probabilities(&self, position: &Self::Prepared, control: &Self::Prepared, out: &mut [f64]);

    fn probabilities_into(&self, position: &PhaseTriple, control: &PhaseTriple, out: &mut [f64]) {
        self.prepared_probabilities(&self.prepare(position), &self.prepare(control), out);
    }

    fn probability(&self, outcome: usize, position: &PhaseTriple, control: &PhaseTriple) -> f64 {
        let mut buf = [0.0; MAX_OUTCOMES];
        self.probabilities_into(position, control, &mut buf);
        buf[outcome]
    }
}

impl PhaseLikelihood for TwoPhotonEngine {
    type Prepared = [Complex64; 3];

    fn n_outcomes(&self) -> usize {
        OUTCOMES
    }

    fn prepare(&self, phases: &PhaseTriple) -> [Complex64; 3] {
        phasors(phases)
    }

    fn prepared_probabilities(&self, position: &[Complex64; 3], control: &[Complex64; 3], out: &mut [f64]) {
        let total = std::array::from_fn(|k| position[k] * control[k]);
        out[..OUTCOMES].copy_from_slice(&self.probabilities_from_phasors(&total));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmcConfig {
    pub n_particles: usize,
    /// Resample when `ESS < resample_threshold * n`.
    pub resample_threshold: f64,
    /// Liu-West shrinkage.
    pub liu_west_a: f64,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            n_particles: 2000,
            resample_threshold: 0.5,
            liu_west_a: 0.98,
        }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 100 {
            return Err(Error::InvalidArgument(format!(
                "need at least 100 particles, got {}",
                self.n_particles
            )));
        }
        if !(self.liu_west_a > 0.0 && self.liu_west_a <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "Liu-West a must lie in (0, 1], got {}",
                self.liu_west_a
            )));
        }
        if !(0.0..=1.0).contains(&self.resample_threshold) {
            return Err(Error::InvalidArgument(format!(
                "resample threshold must lie in [0, 1], got {}",
                self.resample_threshold
            )));
        }
        Ok(())
    }
}

/// Weighted particle approximation of the posterior. Owns its RNG so that a
/// seed and an outcome sequence fully determine the trajectory.
#[derive(Clone, Debug)]
pub struct ParticleCloud {
    positions: Vec<PhaseTriple>,
    weights: Vec<f64>,
    rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudSnapshot {
    pub positions: Vec<PhaseTriple>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mean: PhaseTriple,
    pub covariance: [[f64; 3]; 3],
    pub trace_cov: f64,
    pub quadratic_loss: Option<f64>,
}

/// Uniform prior on the cube `center +- width/2`.
pub fn init_prior(center: &PhaseTriple, width: f64, n_particles: usize, seed: u64) -> Result<ParticleCloud> {
    if n_particles < 100 {
        return Err(Error::InvalidArgument(format!(
            "need at least 100 particles, got {n_particles}"
        )));
    }
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::InvalidArgument(format!("prior width must be positive, got {width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = (0..n_particles)
        .map(|_| std::array::from_fn(|k| center[k] + width * (rng.random::<f64>() - 0.5)))
        .collect();
    Ok(ParticleCloud {
        positions,
        weights: vec![1.0 / n_particles as f64; n_particles],
        rng,
    })
}

impl ParticleCloud {
    /// Cloud from explicit particles; weights are normalized.
    pub fn from_particles(positions: Vec<PhaseTriple>, weights: Vec<f64>, seed: u64) -> Result<Self> {
        if positions.is_empty() || positions.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: positions.len(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::WeightUnderflow);
        }
        Ok(Self {
            positions,
            weights: weights.iter().map(|w| w / total).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[PhaseTriple] {
        &self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn snapshot(&self) -> CloudSnapshot {
        CloudSnapshot {
            positions: self.positions.clone(),
            weights: self.weights.clone(),
        }
    }

    /// Bayes rule `w_i <- w_i p(outcome | phi_i, control)`, renormalized.
    /// On underflow the cloud is left untouched.
    pub fn bayes_update<L: PhaseLikelihood + ?Sized>(
        &mut self,
        outcome: usize,
        likelihood: &L,
        control: &PhaseTriple,
    ) -> Result<()> {
        let count = likelihood.n_outcomes();
        if outcome >= count {
            return Err(Error::OutcomeOutOfRange { index: outcome, count });
        }
        let control = likelihood.prepare(control);
        let factors: Vec<f64> = self
            .positions
            .par_iter()
            .map(|phi| {
                let mut p = [0.0; MAX_OUTCOMES];
                likelihood.prepared_probabilities(&likelihood.prepare(phi), &control, &mut p);
                p[outcome]
            })
            .collect();
        if factors.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidProbability);
        }
        let updated: Vec<f64> = self.weights.iter().zip(&factors).map(|(w, p)| w * p).collect();
        let total: f64 = updated.iter().sum();
        if !(total > f64::MIN_POSITIVE) {
            return Err(Error::WeightUnderflow);
        }
        self.weights = updated.into_iter().map(|w| w / total).collect();
        Ok(())
    }

    /// `1 / sum w_i^2`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn mean(&self) -> PhaseTriple {
        let mut mean = [0.0; 3];
        for (phi, w) in self.positions.iter().zip(&self.weights) {
            for k in 0..3 {
                mean[k] += w * phi[k];
            }
        }
        mean
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        let mean = Vector3::from(self.mean());
        let mut cov = Matrix3::zeros();
        for (phi, w) in self.positions.iter().zip(&self.weights) {
            let d = Vector3::from(*phi) - mean;
            cov += *w * d * d.transpose();
        }
        cov
    }

    /// Liu-West resampling: multinomial draw, shrink toward the mean by `a`,
    /// Gaussian jitter with covariance `(1 - a^2) Sigma`.
    pub fn resample(&mut self, a: f64) -> Result<()> {
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::InvalidArgument(format!("Liu-West a must lie in (0, 1], got {a}")));
        }
        let mean = Vector3::from(self.mean());
        let jitter = self.covariance() * (1.0 - a * a) + Matrix3::identity() * 1e-10;
        let chol = jitter
            .cholesky()
            .ok_or(Error::Singular)?
            .l();
        let picker = WeightedIndex::new(&self.weights).map_err(|_| Error::WeightUnderflow)?;
        let n = self.positions.len();
        let mut fresh = Vec::with_capacity(n);
        for _ in 0..n {
            let source = Vector3::from(self.positions[picker.sample(&mut self.rng)]);
            let z = Vector3::from_fn(|_, _| self.rng.sample::<f64, _>(StandardNormal));
            let moved = source * a + mean * (1.0 - a) + chol * z;
            fresh.push([moved[0], moved[1], moved[2]]);
        }
        self.positions = fresh;
        self.weights = vec![1.0 / n as f64; n];
        Ok(())
    }

    /// Resamples when the ESS drops below `threshold * n`; reports whether it did.
    pub fn maybe_resample(&mut self, config: &SmcConfig) -> Result<bool> {
        if self.effective_sample_size() < config.resample_threshold * self.len() as f64 {
            self.resample(config.liu_west_a)?;
            return Ok(true);
        }
        Ok(false)
    }

    pub fn summarize(&self, truth: Option<&PhaseTriple>) -> PosteriorSummary {
        let mean = self.mean();
        let cov = self.covariance();
        PosteriorSummary {
            mean,
            covariance: std::array::from_fn(|i| std::array::from_fn(|j| cov[(i, j)])),
            trace_cov: cov.trace(),
            quadratic_loss: truth.map(|t| (0..3).map(|k| (mean[k] - t[k]).powi(2)).sum()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Two-outcome toy: `p(0 | phi, c) = table[particle index by phi[0]]`.
    struct Fixed(Vec<f64>);

    impl PhaseLikelihood for Fixed {
        type Prepared = PhaseTriple;
        fn n_outcomes(&self) -> usize {
            2
        }
        fn prepare(&self, phases: &PhaseTriple) -> PhaseTriple {
            *phases
        }
        fn prepared_probabilities(&self, position: &PhaseTriple, _: &PhaseTriple, out: &mut [f64]) {
            let p = self.0[position[0] as usize];
            out[0] = p;
            out[1] = 1.0 - p;
        }
    }

    /// Coin with bias `(1 + cos(phi_A + c_A)) / 2`.
    struct Coin;

    impl PhaseLikelihood for Coin {
        type Prepared = PhaseTriple;
        fn n_outcomes(&self) -> usize {
            2
        }
        fn prepare(&self, phases: &PhaseTriple) -> PhaseTriple {
            *phases
        }
        fn prepared_probabilities(&self, position: &PhaseTriple, control: &PhaseTriple, out: &mut [f64]) {
            let p = 0.5 * (1.0 + (position[0] + control[0]).cos());
            out[0] = p;
            out[1] = 1.0 - p;
        }
    }

    fn weight_sum(cloud: &ParticleCloud) -> f64 {
        cloud.weights().iter().sum()
    }

    #[test]
    fn prior_moments() {
        let center = [1.0, 2.0, 3.0];
        let cloud = init_prior(&center, PI, 2000, 5).unwrap();
        let mean = cloud.mean();
        let sigma = 3.0 * (PI / 12f64.sqrt()) / 2000f64.sqrt();
        let cov = cloud.covariance();
        for k in 0..3 {
            assert!((mean[k] - center[k]).abs() < sigma);
            assert!((cov[(k, k)] - PI * PI / 12.0).abs() < 0.08);
        }
        assert!(cloud.weights().iter().all(|w| *w == 1.0 / 2000.0));
        assert!(cloud
            .positions()
            .iter()
            .all(|p| (0..3).all(|k| (p[k] - center[k]).abs() <= PI / 2.0)));
        assert!(init_prior(&center, PI, 99, 5).is_err());
    }

    #[test]
    fn update_with_constant_likelihood_keeps_weights() {
        let mut cloud = init_prior(&[0.0; 3], PI, 200, 1).unwrap();
        let before = cloud.weights().to_vec();
        cloud.bayes_update(0, &Fixed(vec![0.3; 8]), &[0.0; 3]).unwrap();
        for (a, b) in before.iter().zip(cloud.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_particle_update() {
        let mut cloud =
            ParticleCloud::from_particles(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![0.5, 0.5], 0).unwrap();
        cloud.bayes_update(0, &Fixed(vec![0.2, 0.8]), &[0.0; 3]).unwrap();
        assert!((cloud.weights()[0] - 0.2).abs() < 1e-15);
        assert!((cloud.weights()[1] - 0.8).abs() < 1e-15);
        assert!((cloud.effective_sample_size() - 1.0 / 0.68).abs() < 1e-12);
    }

    #[test]
    fn underflow_leaves_cloud_untouched() {
        let mut cloud =
            ParticleCloud::from_particles(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![0.5, 0.5], 0).unwrap();
        let err = cloud.bayes_update(0, &Fixed(vec![0.0, 0.0]), &[0.0; 3]);
        assert_eq!(err, Err(Error::WeightUnderflow));
        assert_eq!(cloud.weights(), &[0.5, 0.5]);
        assert_eq!(
            cloud.bayes_update(2, &Fixed(vec![0.5, 0.5]), &[0.0; 3]),
            Err(Error::OutcomeOutOfRange { index: 2, count: 2 })
        );
    }

    #[test]
    fn ess_examples() {
        let uniform = init_prior(&[0.0; 3], 1.0, 100, 0).unwrap();
        assert!((uniform.effective_sample_size() - 100.0).abs() < 1e-9);
        let one = ParticleCloud::from_particles(vec![[0.0; 3], [1.0; 3]], vec![1.0, 0.0], 0).unwrap();
        assert_eq!(one.effective_sample_size(), 1.0);
        let skew = ParticleCloud::from_particles(vec![[0.0; 3], [1.0; 3]], vec![0.75, 0.25], 0).unwrap();
        assert!((skew.effective_sample_size() - 1.6).abs() < 1e-12);
    }

    #[test]
    fn resampling_uniform_cloud_preserves_moments() {
        let mut cloud = init_prior(&[1.0, 1.5, 2.0], PI, 2000, 9).unwrap();
        let (m0, c0) = (cloud.mean(), cloud.covariance());
        cloud.resample(0.98).unwrap();
        let (m1, c1) = (cloud.mean(), cloud.covariance());
        let sigma = (PI / 12f64.sqrt()) / 2000f64.sqrt();
        for k in 0..3 {
            assert!((m1[k] - m0[k]).abs() < 3.0 * sigma * 2f64.sqrt());
            assert!((c1[(k, k)] / c0[(k, k)] - 1.0).abs() < 0.15);
        }
        assert_eq!(cloud.len(), 2000);
        assert!((cloud.effective_sample_size() - 2000.0).abs() < 1e-6);
    }

    #[test]
    fn resampling_a_point_mass_collapses() {
        let mut positions = vec![[0.5, 0.5, 0.5]; 200];
        positions[17] = [2.0, 1.0, 0.0];
        let mut weights = vec![0.0; 200];
        weights[17] = 1.0;
        let mut cloud = ParticleCloud::from_particles(positions, weights, 3).unwrap();
        cloud.resample(0.98).unwrap();
        // zero covariance: only the 1e-10 floor jitters
        for p in cloud.positions() {
            assert!((p[0] - 2.0).abs() < 1e-3 && (p[1] - 1.0).abs() < 1e-3 && p[2].abs() < 1e-3);
        }
        assert!((weight_sum(&cloud) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn liu_west_spread_from_a_broad_cloud() {
        // half the weight on each of two clusters: jitter scale sqrt(1 - a^2) * sd
        let mut positions = vec![[0.0; 3]; 1000];
        positions.extend(vec![[2.0, 0.0, 0.0]; 1000]);
        let mut cloud = ParticleCloud::from_particles(positions, vec![1.0; 2000], 4).unwrap();
        cloud.resample(0.98).unwrap();
        let jitter_sd = (1.0 - 0.98f64.powi(2)).sqrt();
        let near_low: Vec<f64> = cloud
            .positions()
            .iter()
            .filter(|p| p[0] < 1.0)
            .map(|p| p[0] - 0.02)
            .collect();
        let sd = (near_low.iter().map(|x| x * x).sum::<f64>() / near_low.len() as f64).sqrt();
        assert!((sd / jitter_sd - 1.0).abs() < 0.1, "{sd} vs {jitter_sd}");
    }

    #[test]
    fn summary_examples() {
        let single = ParticleCloud::from_particles(vec![[0.3, 0.4, 0.5]], vec![1.0], 0).unwrap();
        let s = single.summarize(Some(&[0.3, 0.4, 0.5]));
        assert_eq!(s.quadratic_loss, Some(0.0));
        assert_eq!(s.trace_cov, 0.0);
        let delta = 0.2;
        let pair = ParticleCloud::from_particles(
            vec![[1.0 + delta, 2.0, 3.0], [1.0 - delta, 2.0, 3.0]],
            vec![1.0, 1.0],
            0,
        )
        .unwrap();
        let s = pair.summarize(Some(&[1.0, 2.0, 3.0]));
        assert!(s.quadratic_loss.unwrap() < 1e-28);
        assert!((s.covariance[0][0] - delta * delta).abs() < 1e-15);
        assert!(pair.summarize(None).quadratic_loss.is_none());
    }

    #[test]
    fn coin_posterior_concentrates() {
        let truth = [1.1, 0.0, 0.0];
        let mut outcome_rng = ChaCha8Rng::seed_from_u64(11);
        let mut cloud = init_prior(&[PI / 2.0, 0.0, 0.0], PI, 2000, 12).unwrap();
        let config = SmcConfig::default();
        let mut sd_at = Vec::new();
        for m in 1..=400 {
            let control = [if m % 2 == 0 { 0.0 } else { PI / 2.0 }, 0.0, 0.0];
            let p0 = Coin.probability(0, &truth, &control);
            let outcome = usize::from(outcome_rng.random::<f64>() >= p0);
            cloud.bayes_update(outcome, &Coin, &control).unwrap();
            assert!((weight_sum(&cloud) - 1.0).abs() < 1e-12);
            cloud.maybe_resample(&config).unwrap();
            if m == 100 || m == 400 {
                sd_at.push(cloud.covariance()[(0, 0)].sqrt());
            }
        }
        let s = cloud.summarize(Some(&truth));
        assert!((s.mean[0] - truth[0]).abs() < 3.0 * sd_at[1] + 1e-3);
        // 1/sqrt(M): four times the data, half the width
        let ratio = sd_at[0] / sd_at[1];
        assert!(ratio > 1.4 && ratio < 2.9, "ratio {ratio}");
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let run = || {
            let mut cloud = init_prior(&[1.0; 3], PI, 300, 77).unwrap();
            for m in 0..60 {
                let control = [0.1 * m as f64, 0.0, 0.0];
                cloud.bayes_update(m % 2, &Coin, &control).unwrap();
                cloud.maybe_resample(&SmcConfig::default()).unwrap();
            }
            cloud.snapshot()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<CloudSnapshot>(&json).unwrap(), a);
    }
}
