//! Synthetic device characterization: power sweeps of the control resistors,
//! multinomial counts, and maximum-likelihood recovery of the device model.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::device::{default_input, powers_to_phases, DeviceModel, TwoPhotonEngine, OUTCOMES};
use crate::error::{Error, Result};
use crate::optimize::{nelder_mead, NelderMeadOptions};

/// Number of equally spaced power levels per resistor.
pub const POWER_LEVELS: usize = 10;
/// Fewer shots per setting than this is flagged as low statistics.
pub const LOW_STATISTICS_SHOTS: u64 = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    /// Powers dissipated in `R_a, R_b, R_d`, mW.
    pub powers: [f64; 3],
    pub counts: [u64; OUTCOMES],
}

impl Setting {
    pub fn shots(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationDataset {
    pub settings: Vec<Setting>,
}

/// `levels` equally spaced powers over `[0, limit]`.
pub fn power_levels(limit: f64, levels: usize) -> Vec<f64> {
    match levels {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..levels)
            .map(|k| limit * k as f64 / (levels - 1) as f64)
            .collect(),
    }
}

/// Every power vector with at most two resistors on, each on the level grid:
/// the zero setting, single-resistor sweeps and pairwise grids.
pub fn sweep_settings(levels: &[f64]) -> Vec<[f64; 3]> {
    let mut out = vec![[0.0; 3]];
    let on: Vec<f64> = levels.iter().copied().filter(|w| *w > 0.0).collect();
    for r in 0..3 {
        for &w in &on {
            let mut p = [0.0; 3];
            p[r] = w;
            out.push(p);
        }
    }
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        for &wa in &on {
            for &wb in &on {
                let mut p = [0.0; 3];
                p[a] = wa;
                p[b] = wb;
                out.push(p);
            }
        }
    }
    out
}

/// Counts of `shots` multinomial draws, via successive binomials.
fn multinomial<R: Rng + ?Sized>(shots: u64, p: &[f64; OUTCOMES], rng: &mut R) -> [u64; OUTCOMES] {
    let mut counts = [0u64; OUTCOMES];
    let mut remaining = shots;
    let mut mass = 1.0;
    for k in 0..OUTCOMES {
        if remaining == 0 {
            break;
        }
        if k == OUTCOMES - 1 || mass <= 0.0 {
            counts[k] = remaining;
            break;
        }
        let q = (p[k] / mass).clamp(0.0, 1.0);
        let n = Binomial::new(remaining, q)
            .expect("probability clamped to [0, 1]")
            .sample(rng);
        counts[k] = n;
        remaining -= n;
        mass -= p[k];
    }
    counts
}

fn setting_probabilities(
    model: &DeviceModel,
    engine: &TwoPhotonEngine,
    powers: &[f64; 3],
) -> Result<[f64; OUTCOMES]> {
    let phases = powers_to_phases(&model.thermal, powers)?;
    Ok(engine.probabilities(&phases))
}

/// Simulated characterization of `truth` at the given power settings.
pub fn generate_at(
    truth: &DeviceModel,
    settings: &[[f64; 3]],
    shots: u64,
    seed: u64,
) -> Result<CharacterizationDataset> {
    if shots == 0 {
        return Err(Error::InvalidArgument("shots must be at least 1".into()));
    }
    let engine = truth.engine(&default_input())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = settings
        .iter()
        .map(|powers| {
            let p = setting_probabilities(truth, &engine, powers)?;
            Ok(Setting {
                powers: *powers,
                counts: multinomial(shots, &p, &mut rng),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CharacterizationDataset { settings })
}

/// Single and pairwise sweeps over [`POWER_LEVELS`] levels in `[0, limit]`.
pub fn generate_characterization(
    truth: &DeviceModel,
    shots: u64,
    seed: u64,
) -> Result<CharacterizationDataset> {
    let levels = power_levels(truth.thermal.power_limit, POWER_LEVELS);
    generate_at(truth, &sweep_settings(&levels), shots, seed)
}

impl CharacterizationDataset {
    pub fn len(&self) -> usize {
        self.settings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.settings.is_empty()
    }

    pub fn min_shots(&self) -> u64 {
        self.settings.iter().map(Setting::shots).min().unwrap_or(0)
    }

    /// Every `k`-th setting goes to the second (held-out) set.
    pub fn split_holdout(&self, k: usize) -> (CharacterizationDataset, CharacterizationDataset) {
        let (mut train, mut hold) = (Vec::new(), Vec::new());
        for (i, s) in self.settings.iter().enumerate() {
            if k > 0 && i % k == k - 1 {
                hold.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        (
            CharacterizationDataset { settings: train },
            CharacterizationDataset { settings: hold },
        )
    }

    /// Columns `p_a,p_b,p_d,c0..c9`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["p_a".to_string(), "p_b".into(), "p_d".into()];
        header.extend((0..OUTCOMES).map(|k| format!("c{k}")));
        w.write_record(&header).map_err(io_err)?;
        for s in &self.settings {
            let mut row: Vec<String> = s.powers.iter().map(|p| p.to_string()).collect();
            row.extend(s.counts.iter().map(|c| c.to_string()));
            w.write_record(&row).map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut settings = Vec::new();
        for record in r.records() {
            let record = record.map_err(io_err)?;
            if record.len() != 3 + OUTCOMES {
                return Err(Error::DimensionMismatch {
                    expected: 3 + OUTCOMES,
                    found: record.len(),
                });
            }
            let field = |i: usize| -> Result<&str> { Ok(&record[i]) };
            let mut powers = [0.0; 3];
            for (k, p) in powers.iter_mut().enumerate() {
                *p = field(k)?
                    .parse()
                    .map_err(|e| Error::Io(format!("power column {k}: {e}")))?;
            }
            let mut counts = [0u64; OUTCOMES];
            for (k, c) in counts.iter_mut().enumerate() {
                *c = field(3 + k)?
                    .parse()
                    .map_err(|e| Error::Io(format!("count column {k}: {e}")))?;
            }
            settings.push(Setting { powers, counts });
        }
        Ok(Self { settings })
    }
}

fn io_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Parameter groups released to the fit; the rest stay at the initial guess.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSubset {
    pub phi0: bool,
    pub alpha: bool,
    pub alpha2: bool,
    pub visibility: bool,
    pub reflectivities: bool,
    pub efficiencies: bool,
}

impl Default for FitSubset {
    fn default() -> Self {
        Self {
            phi0: true,
            alpha: true,
            alpha2: true,
            visibility: true,
            reflectivities: true,
            efficiencies: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// Damped Fisher scoring on the multinomial likelihood.
    FisherScoring,
    NelderMead,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub subset: FitSubset,
    pub method: FitMethod,
    pub starts: usize,
    /// Relative spread of the extra random starts around the initial guess.
    pub start_spread: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            subset: FitSubset::default(),
            method: FitMethod::FisherScoring,
            starts: 5,
            start_spread: 0.05,
            max_iterations: 200,
            seed: 0,
        }
    }
}

/// Full parameter vector: phi0 (3), alpha (9), alpha2 (3), visibility (1),
/// reflectivities in/out (8), log efficiency ratios to outcome 0 (9).
const N_PARAMS: usize = 33;

fn parameter_names() -> Vec<String> {
    let mut names = Vec::with_capacity(N_PARAMS);
    names.extend((0..3).map(|i| format!("phi0[{i}]")));
    for i in 0..3 {
        names.extend((0..3).map(|k| format!("alpha[{i}][{k}]")));
    }
    names.extend((0..3).map(|i| format!("alpha2[{i}]")));
    names.push("visibility".into());
    names.extend((0..4).map(|i| format!("reflectivity_in[{i}]")));
    names.extend((0..4).map(|i| format!("reflectivity_out[{i}]")));
    names.extend((1..OUTCOMES).map(|k| format!("log_efficiency_ratio[{k}]")));
    names
}

fn free_mask(subset: &FitSubset) -> Vec<bool> {
    let mut mask = Vec::with_capacity(N_PARAMS);
    mask.extend([subset.phi0; 3]);
    mask.extend([subset.alpha; 9]);
    mask.extend([subset.alpha2; 3]);
    mask.push(subset.visibility);
    mask.extend([subset.reflectivities; 8]);
    mask.extend([subset.efficiencies; OUTCOMES - 1]);
    mask
}

fn pack(model: &DeviceModel) -> Vec<f64> {
    let t = &model.thermal;
    let mut x = Vec::with_capacity(N_PARAMS);
    x.extend(t.phi0);
    x.extend(t.alpha.iter().flatten());
    x.extend(t.alpha2);
    x.push(model.visibility);
    x.extend(model.quarter_in.reflectivities);
    x.extend(model.quarter_out.reflectivities);
    let e0 = model.outcome_efficiencies[0];
    x.extend(model.outcome_efficiencies[1..].iter().map(|e| (e / e0).ln()));
    x
}

const REFLECTIVITY_MARGIN: f64 = 1e-3;

fn unpack(base: &DeviceModel, x: &[f64]) -> DeviceModel {
    let mut m = base.clone();
    m.thermal.phi0.copy_from_slice(&x[0..3]);
    for i in 0..3 {
        m.thermal.alpha[i].copy_from_slice(&x[3 + 3 * i..6 + 3 * i]);
    }
    m.thermal.alpha2.copy_from_slice(&x[12..15]);
    m.visibility = x[15].clamp(0.0, 1.0);
    for k in 0..4 {
        m.quarter_in.reflectivities[k] = x[16 + k].clamp(REFLECTIVITY_MARGIN, 1.0 - REFLECTIVITY_MARGIN);
        m.quarter_out.reflectivities[k] = x[20 + k].clamp(REFLECTIVITY_MARGIN, 1.0 - REFLECTIVITY_MARGIN);
    }
    let mut eta = [1.0; OUTCOMES];
    for k in 1..OUTCOMES {
        eta[k] = x[23 + k].exp();
    }
    let top = eta.iter().copied().fold(0.0, f64::max);
    m.outcome_efficiencies = std::array::from_fn(|k| eta[k] / top);
    m
}

fn clamp_box(x: &mut [f64]) {
    x[15] = x[15].clamp(0.0, 1.0);
    for v in &mut x[16..24] {
        *v = v.clamp(REFLECTIVITY_MARGIN, 1.0 - REFLECTIVITY_MARGIN);
    }
}

/// Outcome probabilities at every setting, or `None` when the model is invalid.
fn model_probabilities(model: &DeviceModel, data: &CharacterizationDataset) -> Option<Vec<[f64; OUTCOMES]>> {
    let engine = model.engine(&default_input()).ok()?;
    data.settings
        .iter()
        .map(|s| setting_probabilities(model, &engine, &s.powers).ok())
        .collect()
}

/// Multinomial negative log-likelihood, up to the count-only constant.
pub fn negative_log_likelihood(model: &DeviceModel, data: &CharacterizationDataset) -> f64 {
    let Some(probs) = model_probabilities(model, data) else {
        return f64::INFINITY;
    };
    let mut nll = 0.0;
    for (s, p) in data.settings.iter().zip(&probs) {
        for k in 0..OUTCOMES {
            if s.counts[k] > 0 {
                if p[k] <= 0.0 {
                    return f64::INFINITY;
                }
                nll -= s.counts[k] as f64 * p[k].ln();
            }
        }
    }
    nll
}

/// Starting guess for a fit: every parameter of `truth` scaled by an
/// independent factor drawn uniformly from `1 +- spread`.
pub fn perturbed_guess(truth: &DeviceModel, spread: f64, seed: u64) -> DeviceModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = pack(truth)
        .into_iter()
        .map(|v| v * (1.0 + spread * rng.random_range(-1.0..=1.0)))
        .collect();
    unpack(truth, &x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: DeviceModel,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Objective reached from each start, in start order.
    pub start_objectives: Vec<f64>,
    /// Free parameters along near-flat directions of the objective.
    pub flat_parameters: Vec<String>,
    pub low_statistics: bool,
}

struct Problem<'a> {
    base: &'a DeviceModel,
    data: &'a CharacterizationDataset,
    free: Vec<usize>,
    full: Vec<f64>,
}

impl Problem<'_> {
    fn model(&self, z: &[f64]) -> DeviceModel {
        let mut x = self.full.clone();
        for (&i, &v) in self.free.iter().zip(z) {
            x[i] = v;
        }
        unpack(self.base, &x)
    }

    fn nll(&self, z: &[f64]) -> f64 {
        negative_log_likelihood(&self.model(z), self.data)
    }

    fn probabilities(&self, z: &[f64]) -> Option<Vec<[f64; OUTCOMES]>> {
        model_probabilities(&self.model(z), self.data)
    }

    fn clamp(&self, z: &mut [f64]) {
        let mut x = self.full.clone();
        for (&i, &v) in self.free.iter().zip(z.iter()) {
            x[i] = v;
        }
        clamp_box(&mut x);
        for (k, &i) in self.free.iter().enumerate() {
            z[k] = x[i];
        }
    }

    /// Gradient of the NLL and expected (Fisher) information at `z`.
    fn score_and_information(&self, z: &[f64]) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let p0 = self.probabilities(z)?;
        let n = z.len();
        let mut jac: Vec<Vec<[f64; OUTCOMES]>> = Vec::with_capacity(n);
        for j in 0..n {
            let h = 1e-6 * z[j].abs().max(1e-2);
            let (mut up, mut down) = (z.to_vec(), z.to_vec());
            up[j] += h;
            down[j] -= h;
            let (pu, pd) = (self.probabilities(&up)?, self.probabilities(&down)?);
            jac.push(
                pu.iter()
                    .zip(&pd)
                    .map(|(a, b)| std::array::from_fn(|k| (a[k] - b[k]) / (2.0 * h)))
                    .collect(),
            );
        }
        let mut grad = DVector::zeros(n);
        let mut info = DMatrix::zeros(n, n);
        for (s, setting) in self.data.settings.iter().enumerate() {
            let shots = setting.shots() as f64;
            for k in 0..OUTCOMES {
                let p = p0[s][k];
                if p < 1e-300 {
                    continue;
                }
                let ratio = setting.counts[k] as f64 / p;
                for a in 0..n {
                    let da = jac[a][s][k];
                    grad[a] -= ratio * da;
                    for b in a..n {
                        info[(a, b)] += shots * da * jac[b][s][k] / p;
                    }
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        Some((grad, info))
    }

    fn fisher_scoring(&self, z0: &[f64], max_iterations: usize) -> (Vec<f64>, f64, bool, usize) {
        let mut z = z0.to_vec();
        let mut f = self.nll(&z);
        let mut lambda = 1e-3;
        for iter in 1..=max_iterations {
            let Some((grad, info)) = self.score_and_information(&z) else {
                return (z, f, false, iter);
            };
            let mut improved = false;
            while lambda < 1e12 {
                let mut damped = info.clone();
                for a in 0..z.len() {
                    damped[(a, a)] += lambda * info[(a, a)].max(1e-12);
                }
                let Some(step) = damped.cholesky().map(|c| c.solve(&(-&grad))) else {
                    lambda *= 10.0;
                    continue;
                };
                let mut trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                self.clamp(&mut trial);
                let ft = self.nll(&trial);
                if ft.is_finite() && ft <= f {
                    let gain = f - ft;
                    z = trial;
                    f = ft;
                    lambda = (lambda / 3.0).max(1e-9);
                    improved = true;
                    if gain < 1e-9 * (1.0 + f.abs()) {
                        return (z, f, true, iter);
                    }
                    break;
                }
                lambda *= 4.0;
            }
            if !improved {
                // no descent at any damping: stationary to working precision
                return (z, f, true, iter);
            }
        }
        (z, f, false, max_iterations)
    }

    fn nelder_mead(&self, z0: &[f64], max_iterations: usize) -> (Vec<f64>, f64, bool, usize) {
        let step: Vec<f64> = z0.iter().map(|v| 0.05 * v.abs().max(0.05)).collect();
        let opts = NelderMeadOptions {
            max_evaluations: max_iterations * 200,
            f_tol: 1e-9,
            x_tol: 1e-10,
        };
        let m = nelder_mead(|z| self.nll(z), z0, &step, &opts);
        let mut z = m.x;
        self.clamp(&mut z);
        let f = self.nll(&z);
        (z, f, m.converged, m.evaluations)
    }

    /// Free parameters with negligible curvature, alone or in combination.
    fn flat_parameters(&self, z: &[f64], names: &[String]) -> Vec<String> {
        let Some((_, info)) = self.score_and_information(z) else {
            return Vec::new();
        };
        let n = z.len();
        let top = (0..n).map(|a| info[(a, a)]).fold(0.0, f64::max);
        if top <= 0.0 {
            return self.free.iter().map(|&i| names[i].clone()).collect();
        }
        let mut flat = vec![false; n];
        let scale: Vec<f64> = (0..n)
            .map(|a| {
                let d = info[(a, a)];
                if d <= 1e-10 * top {
                    flat[a] = true;
                    0.0
                } else {
                    1.0 / d.sqrt()
                }
            })
            .collect();
        let corr = DMatrix::from_fn(n, n, |a, b| info[(a, b)] * scale[a] * scale[b]);
        let eig = SymmetricEigen::new(corr);
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda < 1e-8 {
                for a in 0..n {
                    if !flat[a] && scale[a] > 0.0 && eig.eigenvectors[(a, k)].abs() > 0.3 {
                        flat[a] = true;
                    }
                }
            }
        }
        (0..n)
            .filter(|&a| flat[a])
            .map(|a| names[self.free[a]].clone())
            .collect()
    }
}

/// Maximum-likelihood fit of the released parameters, multi-started around
/// `initial`; the best start wins.
pub fn fit_model(
    data: &CharacterizationDataset,
    initial: &DeviceModel,
    options: &FitOptions,
) -> Result<FitResult> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty characterization dataset".into()));
    }
    initial.validate()?;
    let full = pack(initial);
    let mask = free_mask(&options.subset);
    let free: Vec<usize> = (0..N_PARAMS).filter(|&i| mask[i]).collect();
    let problem = Problem {
        base: initial,
        data,
        free,
        full: full.clone(),
    };
    let z0: Vec<f64> = problem.free.iter().map(|&i| full[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut best: Option<(Vec<f64>, f64, bool, usize)> = None;
    let mut start_objectives = Vec::with_capacity(options.starts.max(1));
    for start in 0..options.starts.max(1) {
        let mut z = z0.clone();
        if start > 0 {
            for v in &mut z {
                let g: f64 = rng.sample(StandardNormal);
                *v *= 1.0 + options.start_spread * g;
            }
            problem.clamp(&mut z);
        }
        let run = match options.method {
            FitMethod::FisherScoring => problem.fisher_scoring(&z, options.max_iterations),
            FitMethod::NelderMead => problem.nelder_mead(&z, options.max_iterations),
        };
        start_objectives.push(run.1);
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }
    let (z, objective, converged, iterations) = best.expect("at least one start");
    if !objective.is_finite() {
        return Err(Error::InvalidArgument(
            "no start produced a finite likelihood".into(),
        ));
    }
    let names = parameter_names();
    Ok(FitResult {
        model: problem.model(&z),
        objective,
        converged,
        iterations,
        start_objectives,
        flat_parameters: problem.flat_parameters(&z, &names),
        low_statistics: data.min_shots() < LOW_STATISTICS_SHOTS,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingResidual {
    pub powers: [f64; 3],
    pub chi_square: f64,
    /// `(n - N p) / sqrt(N p)` per outcome; zero where `N p = 0`.
    pub pearson: [f64; OUTCOMES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub chi_square: f64,
    pub degrees_of_freedom: usize,
    pub reduced_chi_square: Option<f64>,
    pub residuals: Vec<SettingResidual>,
}

/// Pearson chi-square of `data` under `fitted`. `fitted_parameters` is
/// subtracted from the degrees of freedom (pass 0 for held-out data).
pub fn fit_report(
    fitted: &DeviceModel,
    data: &CharacterizationDataset,
    fitted_parameters: usize,
) -> Result<FitReport> {
    let engine = fitted.engine(&default_input())?;
    let mut residuals = Vec::with_capacity(data.len());
    let mut chi_square = 0.0;
    let mut cells = 0usize;
    for s in &data.settings {
        let p = setting_probabilities(fitted, &engine, &s.powers)?;
        let shots = s.shots() as f64;
        let mut pearson = [0.0; OUTCOMES];
        let mut chi = 0.0;
        for k in 0..OUTCOMES {
            let expected = shots * p[k];
            if expected > 0.0 {
                pearson[k] = (s.counts[k] as f64 - expected) / expected.sqrt();
                chi += pearson[k] * pearson[k];
                cells += 1;
            }
        }
        // one constraint per setting: counts sum to the shots
        cells = cells.saturating_sub(1);
        chi_square += chi;
        residuals.push(SettingResidual {
            powers: s.powers,
            chi_square: chi,
            pearson,
        });
    }
    let degrees_of_freedom = cells.saturating_sub(fitted_parameters);
    Ok(FitReport {
        chi_square,
        degrees_of_freedom,
        reduced_chi_square: (degrees_of_freedom > 0).then(|| chi_square / degrees_of_freedom as f64),
        residuals,
    })
}

/// Number of parameters released by `subset`.
pub fn free_parameter_count(subset: &FitSubset) -> usize {
    free_mask(subset).iter().filter(|&&m| m).count()
}
