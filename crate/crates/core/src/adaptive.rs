//! Adaptive estimation loop: expected-variance control choice, simulated
//! probes and multi-run campaigns.

use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};
use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::device::PhaseTriple;
use crate::error::{Error, Result};
use crate::smc::{init_prior, ParticleCloud, PhaseLikelihood, SmcConfig, MAX_OUTCOMES};

/// Top eigenvector of the ideal probe's QFI.
pub const NU_MAX: [f64; 3] = [0.5, 0.5, -FRAC_1_SQRT_2];

/// `sum_delta p(delta) Tr Sigma(phi | delta, control)` for the cloud.
pub fn expected_variance<L: PhaseLikelihood + ?Sized>(
    cloud: &ParticleCloud,
    control: &PhaseTriple,
    likelihood: &L,
) -> Result<f64> {
    let prepared = prepare_positions(cloud, likelihood);
    expected_variance_prepared(cloud, &prepared, &likelihood.prepare(control), likelihood)
}

pub fn prepare_positions<L: PhaseLikelihood + ?Sized>(cloud: &ParticleCloud, likelihood: &L) -> Vec<L::Prepared> {
    cloud.positions().iter().map(|p| likelihood.prepare(p)).collect()
}

/// [`expected_variance`] with positions already passed through
/// [`PhaseLikelihood::prepare`].
pub fn expected_variance_prepared<L: PhaseLikelihood + ?Sized>(
    cloud: &ParticleCloud,
    prepared: &[L::Prepared],
    control: &L::Prepared,
    likelihood: &L,
) -> Result<f64> {
    let n_out = likelihood.n_outcomes();
    if n_out == 0 || n_out > MAX_OUTCOMES {
        return Err(Error::InvalidArgument(format!(
            "outcome count {n_out} outside 1..={MAX_OUTCOMES}"
        )));
    }
    // centred positions keep S2 - S1^2/P well conditioned
    let mean = cloud.mean();
    let mut pred = [0.0; MAX_OUTCOMES];
    let mut s1 = [[0.0; 3]; MAX_OUTCOMES];
    let mut s2 = [0.0; MAX_OUTCOMES];
    let mut p = [0.0; MAX_OUTCOMES];
    for ((phi, &w), key) in cloud.positions().iter().zip(cloud.weights()).zip(prepared) {
        if w == 0.0 {
            continue;
        }
        likelihood.prepared_probabilities(key, control, &mut p);
        let x = [phi[0] - mean[0], phi[1] - mean[1], phi[2] - mean[2]];
        let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
        for d in 0..n_out {
            let wp = w * p[d];
            pred[d] += wp;
            s1[d][0] += wp * x[0];
            s1[d][1] += wp * x[1];
            s1[d][2] += wp * x[2];
            s2[d] += wp * r2;
        }
    }
    let total: f64 = pred[..n_out].iter().sum();
    if !total.is_finite() || (total - 1.0).abs() > 1e-6 {
        return Err(Error::DegeneratePredictive);
    }
    let mut ev = 0.0;
    for d in 0..n_out {
        if pred[d] > 0.0 {
            let m2 = s1[d][0].powi(2) + s1[d][1].powi(2) + s1[d][2].powi(2);
            ev += s2[d] - m2 / pred[d];
        }
    }
    Ok(ev.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlStrategy {
    /// Zero control, the previous winner, `n_local` Gaussian perturbations of
    /// it with per-axis spread `local_width`, then `n_candidates` uniform draws
    /// in `[0, 2pi)^3`; lowest expected variance wins, first on ties.
    ExpectedVariance {
        n_candidates: usize,
        #[serde(default)]
        n_local: usize,
        #[serde(default = "default_local_width")]
        local_width: f64,
        #[serde(default)]
        track: bool,
    },
    /// Non-adaptive baseline: control always zero.
    Zero,
}

fn default_local_width() -> f64 {
    0.3
}

impl Default for ControlStrategy {
    fn default() -> Self {
        ControlStrategy::ExpectedVariance {
            n_candidates: 30,
            n_local: 0,
            local_width: default_local_width(),
            track: false,
        }
    }
}

impl ControlStrategy {
    pub fn random_search(n_candidates: usize) -> Self {
        ControlStrategy::ExpectedVariance {
            n_candidates,
            n_local: 0,
            local_width: default_local_width(),
            track: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlChoice {
    pub control: PhaseTriple,
    pub expected_variance: f64,
}

pub fn choose_control<L: PhaseLikelihood + ?Sized, R: Rng + ?Sized>(
    cloud: &ParticleCloud,
    likelihood: &L,
    strategy: &ControlStrategy,
    previous: Option<&PhaseTriple>,
    rng: &mut R,
) -> Result<ControlChoice> {
    let (n_candidates, n_local, local_width) = match strategy {
        ControlStrategy::Zero => {
            return Ok(ControlChoice {
                control: [0.0; 3],
                expected_variance: expected_variance(cloud, &[0.0; 3], likelihood)?,
            })
        }
        ControlStrategy::ExpectedVariance {
            n_candidates,
            n_local,
            local_width,
            ..
        } => (*n_candidates, *n_local, *local_width),
    };
    let mut candidates = vec![[0.0; 3]];
    if let Some(prev) = previous {
        candidates.push(*prev);
        for _ in 0..n_local {
            candidates.push(std::array::from_fn(|k| {
                let z: f64 = rng.sample(StandardNormal);
                (prev[k] + local_width * z).rem_euclid(TAU)
            }));
        }
    }
    candidates.extend((0..n_candidates).map(|_| -> PhaseTriple {
        std::array::from_fn(|_| rng.random_range(0.0..TAU))
    }));
    let prepared = prepare_positions(cloud, likelihood);
    let scores: Vec<Result<f64>> = candidates
        .par_iter()
        .map(|c| expected_variance_prepared(cloud, &prepared, &likelihood.prepare(c), likelihood))
        .collect();
    let mut best: Option<ControlChoice> = None;
    for (control, score) in candidates.iter().zip(scores) {
        let score = score?;
        if best.is_none_or(|b| score < b.expected_variance) {
            best = Some(ControlChoice {
                control: *control,
                expected_variance: score,
            });
        }
    }
    Ok(best.expect("zero control is always a candidate"))
}

/// Inverse-CDF draw from a discrete distribution.
pub fn sample_outcome<R: Rng + ?Sized>(probabilities: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probabilities.iter().sum::<f64>();
    let mut acc = 0.0;
    for (k, p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // rounding: fall back to the last outcome with support
    probabilities.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationConfig {
    pub smc: SmcConfig,
    pub strategy: ControlStrategy,
    pub prior_center: PhaseTriple,
    pub prior_width: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            smc: SmcConfig::default(),
            strategy: ControlStrategy::default(),
            prior_center: [PI / 2.0; 3],
            prior_width: PI,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Probes consumed so far.
    pub m: usize,
    pub control: PhaseTriple,
    pub outcome: Option<usize>,
    pub mean: PhaseTriple,
    pub trace_cov: f64,
    pub quad_loss: f64,
    /// `(nu_max . (mean - truth))^2`.
    pub comb_loss: f64,
    pub resampled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationTrajectory {
    pub truth: PhaseTriple,
    pub seed: u64,
    pub prior: StepRecord,
    pub steps: Vec<StepRecord>,
}

fn comb_loss(mean: &PhaseTriple, truth: &PhaseTriple) -> f64 {
    (0..3).map(|k| NU_MAX[k] * (mean[k] - truth[k])).sum::<f64>().powi(2)
}

fn record(cloud: &ParticleCloud, truth: &PhaseTriple, m: usize, control: PhaseTriple, outcome: Option<usize>, resampled: bool) -> StepRecord {
    let s = cloud.summarize(Some(truth));
    StepRecord {
        m,
        control,
        outcome,
        mean: s.mean,
        trace_cov: s.trace_cov,
        quad_loss: s.quadratic_loss.unwrap_or(0.0),
        comb_loss: comb_loss(&s.mean, truth),
        resampled,
    }
}

/// Independent RNG streams of one run.
fn run_streams(seed: u64) -> (u64, ChaCha8Rng, ChaCha8Rng) {
    let mut outcomes = ChaCha8Rng::seed_from_u64(seed);
    outcomes.set_stream(1);
    let mut controls = ChaCha8Rng::seed_from_u64(seed);
    controls.set_stream(2);
    let mut prior = ChaCha8Rng::seed_from_u64(seed);
    prior.set_stream(3);
    (prior.next_u64(), outcomes, controls)
}

/// Simulates `probes` adaptive probes against `truth` under a matched model.
pub fn run_estimation<L: PhaseLikelihood + ?Sized>(
    likelihood: &L,
    truth: &PhaseTriple,
    probes: usize,
    config: &EstimationConfig,
    seed: u64,
) -> Result<EstimationTrajectory> {
    config.smc.validate()?;
    let (prior_seed, mut outcome_rng, mut control_rng) = run_streams(seed);
    let mut cloud = init_prior(&config.prior_center, config.prior_width, config.smc.n_particles, prior_seed)?;
    let prior = record(&cloud, truth, 0, [0.0; 3], None, false);
    let mut steps = Vec::with_capacity(probes);
    let mut previous: Option<PhaseTriple> = None;
    let mut p = [0.0; MAX_OUTCOMES];
    let n_out = likelihood.n_outcomes();
    let track = matches!(config.strategy, ControlStrategy::ExpectedVariance { track: true, .. });
    for m in 1..=probes {
        let mean_before = cloud.mean();
        let choice = choose_control(&cloud, likelihood, &config.strategy, previous.as_ref(), &mut control_rng)?;
        likelihood.probabilities_into(truth, &choice.control, &mut p);
        let outcome = sample_outcome(&p[..n_out], &mut outcome_rng);
        cloud.bayes_update(outcome, likelihood, &choice.control)?;
        let resampled = cloud.maybe_resample(&config.smc)?;
        steps.push(record(&cloud, truth, m, choice.control, Some(outcome), resampled));
        previous = Some(if track {
            let mean_after = cloud.mean();
            std::array::from_fn(|k| (choice.control[k] + mean_before[k] - mean_after[k]).rem_euclid(TAU))
        } else {
            choice.control
        });
    }
    Ok(EstimationTrajectory {
        truth: *truth,
        seed,
        prior,
        steps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub n_triplets: usize,
    pub repetitions: usize,
    pub probes: usize,
    pub seed: u64,
    /// Truths are drawn from the prior cube shrunk by this margin per side.
    pub truth_inset: f64,
    pub estimation: EstimationConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            n_triplets: 12,
            repetitions: 30,
            probes: 100,
            seed: 2022,
            truth_inset: PI / 10.0,
            estimation: EstimationConfig::default(),
        }
    }
}

/// One CSV row per run and probe count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub triplet_id: usize,
    pub repetition: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub trace_cov: f64,
    pub quad_loss: f64,
    pub comb_loss: f64,
}

/// Averages over all runs at one probe count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    #[serde(rename = "M")]
    pub m: usize,
    pub mean_loss: f64,
    pub std_loss: f64,
    pub mean_comb_loss: f64,
    pub std_comb_loss: f64,
    pub mean_trace_cov: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub config: CampaignConfig,
    pub triplets: Vec<PhaseTriple>,
    pub rows: Vec<RunRow>,
    pub curve: Vec<CurvePoint>,
}

/// Truth triplets drawn uniformly from the inset prior cube.
pub fn draw_triplets(config: &CampaignConfig) -> Vec<PhaseTriple> {
    let est = &config.estimation;
    let half = est.prior_width / 2.0 - config.truth_inset;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.n_triplets)
        .map(|_| std::array::from_fn(|k| est.prior_center[k] + rng.random_range(-half..=half)))
        .collect()
}

/// Seed of run `index` derived from the master seed.
pub fn run_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

pub fn run_campaign<L: PhaseLikelihood + ?Sized>(
    likelihood: &L,
    config: &CampaignConfig,
) -> Result<CampaignResult> {
    let half = config.estimation.prior_width / 2.0 - config.truth_inset;
    if !(half >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "truth inset {} leaves no room in a prior of width {}",
            config.truth_inset, config.estimation.prior_width
        )));
    }
    let triplets = draw_triplets(config);
    let jobs: Vec<(usize, usize)> = (0..config.n_triplets)
        .flat_map(|t| (0..config.repetitions).map(move |r| (t, r)))
        .collect();
    let trajectories: Vec<Result<EstimationTrajectory>> = jobs
        .par_iter()
        .enumerate()
        .map(|(index, &(t, _))| {
            run_estimation(
                likelihood,
                &triplets[t],
                config.probes,
                &config.estimation,
                run_seed(config.seed, index),
            )
        })
        .collect();
    let mut rows = Vec::with_capacity(jobs.len() * (config.probes + 1));
    for (&(t, r), traj) in jobs.iter().zip(trajectories) {
        let traj = traj?;
        for s in std::iter::once(&traj.prior).chain(&traj.steps) {
            rows.push(RunRow {
                triplet_id: t,
                repetition: r,
                m: s.m,
                trace_cov: s.trace_cov,
                quad_loss: s.quad_loss,
                comb_loss: s.comb_loss,
            });
        }
    }
    let curve = aggregate(&rows, config.probes);
    Ok(CampaignResult {
        config: *config,
        triplets,
        rows,
        curve,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation across runs at every `M`.
pub fn aggregate(rows: &[RunRow], probes: usize) -> Vec<CurvePoint> {
    let mut by_m: Vec<Vec<&RunRow>> = vec![Vec::new(); probes + 1];
    for row in rows {
        if row.m <= probes {
            by_m[row.m].push(row);
        }
    }
    by_m.iter()
        .enumerate()
        .filter(|(_, rs)| !rs.is_empty())
        .map(|(m, rs)| {
            let loss: Vec<f64> = rs.iter().map(|r| r.quad_loss).collect();
            let comb: Vec<f64> = rs.iter().map(|r| r.comb_loss).collect();
            let (mean_loss, std_loss) = mean_std(&loss);
            let (mean_comb_loss, std_comb_loss) = mean_std(&comb);
            CurvePoint {
                m,
                mean_loss,
                std_loss,
                mean_comb_loss,
                std_comb_loss,
                mean_trace_cov: rs.iter().map(|r| r.trace_cov).sum::<f64>() / rs.len() as f64,
                runs: rs.len(),
            }
        })
        .collect()
}

pub fn write_rows_csv<W: Write>(rows: &[RunRow], writer: W) -> Result<()> {
    write_csv(rows, writer)
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], writer: W) -> Result<()> {
    write_csv(curve, writer)
}

pub(crate) fn write_csv<T: Serialize, W: Write>(records: &[T], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}
