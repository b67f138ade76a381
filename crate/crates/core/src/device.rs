//! Model of the 4-arm integrated interferometer.
//!
//! Two balanced 4x4 splitters ("quarters") enclose a layer of four phase
//! shifters A-D. Arm C is the reference, so the device is driven by the triple
//! `(phi_A, phi_B, phi_D)` of phases relative to C. Unknown phases and control
//! phases enter that triple additively.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear_optics::{self, ComplexUnitary, ModeOccupation};

/// Number of two-photon outcomes over four modes.
pub const OUTCOMES: usize = 10;

/// Seed of the default synthetic device.
pub const DEFAULT_DEVICE_SEED: u64 = 0;

/// Default probe: one photon in each of the last two input modes.
pub fn default_input() -> ModeOccupation {
    ModeOccupation::from([0, 0, 1, 1])
}

/// Triple of phases `(phi_A, phi_B, phi_D)` relative to arm C.
pub type PhaseTriple = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuarterParams {
    /// Internal phase on mode 1 between the coupler layers.
    pub phase_hi: f64,
    /// Internal phase on mode 4 between the coupler layers.
    pub phase_lo: f64,
    /// Coupler reflectivities: first layer (modes 1-2, 3-4), then second layer.
    pub reflectivities: [f64; 4],
}

impl QuarterParams {
    pub fn ideal() -> Self {
        Self {
            phase_hi: 0.0,
            phase_lo: 0.0,
            reflectivities: [0.5; 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &r in &self.reflectivities {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::ReflectivityOutOfRange(r));
            }
        }
        Ok(())
    }
}

impl Default for QuarterParams {
    fn default() -> Self {
        Self::ideal()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseLayer {
    pub phi_a: f64,
    pub phi_b: f64,
    pub phi_c: f64,
    pub phi_d: f64,
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn coupler_block(m: &mut DMatrix<Complex64>, first: usize, r: f64) {
    let t = (1.0 - r).sqrt();
    let s = r.sqrt();
    m[(first, first)] = c(s, 0.0);
    m[(first, first + 1)] = c(0.0, t);
    m[(first + 1, first)] = c(0.0, t);
    m[(first + 1, first + 1)] = c(s, 0.0);
}

/// `(B(r3) + B(r4)) diag(e^{i hi}, 1, 1, e^{i lo}) SWAP_23 (B(r1) + B(r2))`
/// with `B(r) = [[sqrt r, i sqrt(1-r)], [i sqrt(1-r), sqrt r]]`.
pub fn quarter_unitary(q: &QuarterParams) -> Result<ComplexUnitary> {
    q.validate()?;
    let [r1, r2, r3, r4] = q.reflectivities;
    let mut first = DMatrix::zeros(4, 4);
    coupler_block(&mut first, 0, r1);
    coupler_block(&mut first, 2, r2);
    let mut second = DMatrix::zeros(4, 4);
    coupler_block(&mut second, 0, r3);
    coupler_block(&mut second, 2, r4);
    let mut middle = DMatrix::zeros(4, 4);
    // crossing swaps modes 2 and 3, then the internal phases act on modes 1 and 4
    middle[(0, 0)] = Complex64::from_polar(1.0, q.phase_hi);
    middle[(1, 2)] = c(1.0, 0.0);
    middle[(2, 1)] = c(1.0, 0.0);
    middle[(3, 3)] = Complex64::from_polar(1.0, q.phase_lo);
    Ok(ComplexUnitary::from_matrix_unchecked(
        second * middle * first,
    ))
}

/// `diag(e^{i phi_D}, e^{i phi_C}, e^{i phi_B}, e^{i phi_A})`.
pub fn phase_layer_unitary(p: &PhaseLayer) -> ComplexUnitary {
    let diag = nalgebra::DVector::from_vec(vec![
        Complex64::from_polar(1.0, p.phi_d),
        Complex64::from_polar(1.0, p.phi_c),
        Complex64::from_polar(1.0, p.phi_b),
        Complex64::from_polar(1.0, p.phi_a),
    ]);
    ComplexUnitary::from_matrix_unchecked(DMatrix::from_diagonal(&diag))
}

/// Thermo-optic actuation of the three control resistors `R_a, R_b, R_d`,
/// which drive the phases A, B and D respectively (index order 0, 1, 2).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThermalModel {
    /// Linear response `alpha[i][k]`, rad/mW, of phase `i` to resistor `k`.
    pub alpha: [[f64; 3]; 3],
    /// Quadratic self-response of each phase to its own resistor, rad/mW^2.
    pub alpha2: [f64; 3],
    /// Zero-power phase offsets, rad.
    pub phi0: [f64; 3],
    /// Resistance coefficients, mW/mA^2.
    pub r1: [f64; 3],
    /// Current-dependence coefficients, 1/mA^2.
    pub r2: [f64; 3],
    /// Safety limit on the power dissipated by any resistor, mW.
    pub power_limit: f64,
}

/// Power needed for a full 2pi shift on a directly driven phase.
pub const TWO_PI_POWER_MW: f64 = 22.0;
pub const POWER_LIMIT_MW: f64 = 30.0;

impl Default for ThermalModel {
    fn default() -> Self {
        let d = TAU / TWO_PI_POWER_MW;
        Self {
            alpha: [[d, 0.0, 0.0], [0.0, d, 0.0], [0.0, 0.0, d]],
            alpha2: [0.0; 3],
            phi0: [0.0; 3],
            // ~110 ohm heaters
            r1: [0.11; 3],
            r2: [1e-4; 3],
            power_limit: POWER_LIMIT_MW,
        }
    }
}

impl ThermalModel {
    fn check_powers(&self, powers: &[f64; 3]) -> Result<()> {
        for (index, &power) in powers.iter().enumerate() {
            if power < 0.0 {
                return Err(Error::NegativePower { index, power });
            }
            if power > self.power_limit {
                return Err(Error::PowerLimitExceeded {
                    index,
                    power,
                    limit: self.power_limit,
                });
            }
        }
        Ok(())
    }
}

/// `w_k = R1_k i_k^2 / (1 - R2_k i_k^2)`.
pub fn currents_to_powers(thermal: &ThermalModel, currents: &[f64; 3]) -> Result<[f64; 3]> {
    let mut powers = [0.0; 3];
    for (k, &i) in currents.iter().enumerate() {
        let denominator = 1.0 - thermal.r2[k] * i * i;
        if denominator <= 0.0 {
            return Err(Error::ThermalBreakdown {
                index: k,
                denominator,
            });
        }
        powers[k] = thermal.r1[k] * i * i / denominator;
    }
    thermal.check_powers(&powers)?;
    Ok(powers)
}

/// Evaluates the response model without range checks.
pub(crate) fn thermal_response(thermal: &ThermalModel, powers: &[f64; 3]) -> [f64; 3] {
    let mut phases = thermal.phi0;
    for (i, phase) in phases.iter_mut().enumerate() {
        for (k, &w) in powers.iter().enumerate() {
            *phase += thermal.alpha[i][k] * w;
        }
        *phase += thermal.alpha2[i] * powers[i] * powers[i];
    }
    phases
}

pub fn powers_to_phases(thermal: &ThermalModel, powers: &[f64; 3]) -> Result<[f64; 3]> {
    thermal.check_powers(powers)?;
    Ok(thermal_response(thermal, powers))
}

const INVERSION_TOL: f64 = 1e-9;

/// Finds resistor powers whose phases equal `target` modulo 2pi, preferring
/// the solution with the least total power.
pub fn phases_to_powers(thermal: &ThermalModel, target: &[f64; 3]) -> Result<[f64; 3]> {
    let base: [f64; 3] =
        std::array::from_fn(|i| (target[i] - thermal.phi0[i]).rem_euclid(TAU));
    let mut best: Option<([f64; 3], f64)> = None;
    let mut best_residual = f64::INFINITY;
    // Cross-talk can push a channel below zero power; adding whole turns to
    // its target restores a feasible solution.
    for wraps in 0..27usize {
        let shift = [wraps % 3, (wraps / 3) % 3, wraps / 9];
        let goal: [f64; 3] = std::array::from_fn(|i| base[i] + TAU * shift[i] as f64);
        let Some((powers, residual)) = solve_fixed_point(thermal, &goal) else {
            continue;
        };
        best_residual = best_residual.min(residual);
        let feasible = residual < INVERSION_TOL
            && powers
                .iter()
                .all(|&w| w >= 0.0 && w <= thermal.power_limit);
        if !feasible {
            continue;
        }
        let total: f64 = powers.iter().sum();
        if best.is_none_or(|(_, t)| total < t) {
            best = Some((powers, total));
        }
    }
    best.map(|(p, _)| p).ok_or(Error::Unreachable {
        residual: best_residual,
    })
}

/// Gauss-Seidel sweeps on `alpha_ii w_i + alpha2_i w_i^2 = goal_i - phi0_i - sum_{k != i} alpha_ik w_k`.
fn solve_fixed_point(thermal: &ThermalModel, goal: &[f64; 3]) -> Option<([f64; 3], f64)> {
    let mut w = [0.0_f64; 3];
    for _ in 0..500 {
        let mut change = 0.0_f64;
        for i in 0..3 {
            let cross: f64 = (0..3)
                .filter(|&k| k != i)
                .map(|k| thermal.alpha[i][k] * w[k])
                .sum();
            let rhs = goal[i] - cross;
            let new = solve_self_response(thermal.alpha[i][i], thermal.alpha2[i], rhs)?;
            change = change.max((new - w[i]).abs());
            w[i] = new;
        }
        if change < 1e-13 {
            break;
        }
    }
    let phases = thermal_response(
        &ThermalModel {
            phi0: [0.0; 3],
            ..thermal.clone()
        },
        &w,
    );
    let residual = (0..3)
        .map(|i| (phases[i] - goal[i]).abs())
        .fold(0.0, f64::max);
    residual.is_finite().then_some((w, residual))
}

/// Root of `a w + b w^2 = rhs` continuous with `rhs / a` as `b -> 0`.
fn solve_self_response(a: f64, b: f64, rhs: f64) -> Option<f64> {
    if a == 0.0 {
        return None;
    }
    if b.abs() < 1e-15 {
        return Some(rhs / a);
    }
    let disc = a * a + 4.0 * b * rhs;
    if disc < 0.0 {
        return None;
    }
    // numerically stable form of (-a + sqrt(disc)) / (2b)
    Some(2.0 * rhs / (a + disc.sqrt()))
}

/// Interferometer parameters, the desk-scale subset of a full characterization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    pub quarter_in: QuarterParams,
    pub quarter_out: QuarterParams,
    pub thermal: ThermalModel,
    /// Two-photon interference visibility.
    pub visibility: f64,
    /// Detection efficiency of each two-photon outcome, in basis order.
    pub outcome_efficiencies: [f64; OUTCOMES],
}

/// Mixture weights used when evaluating a device likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhotonStatistics {
    /// Fully indistinguishable photons (visibility forced to 1).
    Indistinguishable,
    /// Fully distinguishable photons (visibility forced to 0).
    Distinguishable,
    /// Use the model's own visibility.
    AsModeled,
}

impl DeviceModel {
    pub fn ideal() -> Self {
        Self {
            quarter_in: QuarterParams::ideal(),
            quarter_out: QuarterParams::ideal(),
            thermal: ThermalModel::default(),
            visibility: 1.0,
            outcome_efficiencies: [1.0; OUTCOMES],
        }
    }

    /// Synthetic stand-in for a fabricated chip: couplers in `[0.45, 0.55]`,
    /// visibility 0.95, efficiencies in `[0.8, 1]`, cross-talk up to 20%.
    pub fn perturbed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let quarter = |rng: &mut ChaCha8Rng| QuarterParams {
            phase_hi: 0.0,
            phase_lo: 0.0,
            reflectivities: std::array::from_fn(|_| rng.random_range(0.45..=0.55)),
        };
        let quarter_in = quarter(&mut rng);
        let quarter_out = quarter(&mut rng);
        let nominal = TAU / TWO_PI_POWER_MW;
        let mut alpha = [[0.0; 3]; 3];
        for (i, row) in alpha.iter_mut().enumerate() {
            let diag = nominal * rng.random_range(0.9..1.1);
            for (k, a) in row.iter_mut().enumerate() {
                *a = if i == k {
                    diag
                } else {
                    diag * rng.random_range(0.0..0.2)
                };
            }
        }
        let thermal = ThermalModel {
            alpha,
            alpha2: std::array::from_fn(|_| nominal * rng.random_range(-0.004..0.004)),
            phi0: std::array::from_fn(|_| rng.random_range(0.0..TAU)),
            r1: std::array::from_fn(|_| rng.random_range(0.10..0.12)),
            r2: std::array::from_fn(|_| rng.random_range(0.5e-4..1.5e-4)),
            power_limit: POWER_LIMIT_MW,
        };
        Self {
            quarter_in,
            quarter_out,
            thermal,
            visibility: 0.95,
            outcome_efficiencies: std::array::from_fn(|_| rng.random_range(0.8..=1.0)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.quarter_in.validate()?;
        self.quarter_out.validate()?;
        if !(0.0..=1.0).contains(&self.visibility) {
            return Err(Error::VisibilityOutOfRange(self.visibility));
        }
        for &eta in &self.outcome_efficiencies {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(Error::EfficiencyOutOfRange(eta));
            }
        }
        Ok(())
    }

    /// Same device with its visibility overridden by `statistics`.
    pub fn with_statistics(&self, statistics: PhotonStatistics) -> Self {
        let mut model = self.clone();
        match statistics {
            PhotonStatistics::Indistinguishable => model.visibility = 1.0,
            PhotonStatistics::Distinguishable => model.visibility = 0.0,
            PhotonStatistics::AsModeled => {}
        }
        model
    }

    /// Precomputes the quarter matrices for repeated likelihood evaluations.
    pub fn engine(&self, input: &ModeOccupation) -> Result<TwoPhotonEngine> {
        TwoPhotonEngine::new(self, input)
    }
}

/// `U_out * diag(phases) * U_in` with `phi_C = 0` and `phi = unknown + control`.
pub fn device_unitary(
    model: &DeviceModel,
    unknown: &PhaseTriple,
    control: &PhaseTriple,
) -> Result<ComplexUnitary> {
    let layer = PhaseLayer {
        phi_a: unknown[0] + control[0],
        phi_b: unknown[1] + control[1],
        phi_c: 0.0,
        phi_d: unknown[2] + control[2],
    };
    let inner = phase_layer_unitary(&layer).compose(&quarter_unitary(&model.quarter_in)?)?;
    quarter_unitary(&model.quarter_out)?.compose(&inner)
}

fn check_two_photon_input(input: &ModeOccupation) -> Result<()> {
    if input.modes() != 4 {
        return Err(Error::DimensionMismatch {
            expected: 4,
            found: input.modes(),
        });
    }
    if input.photons() != 2 {
        return Err(Error::UnsupportedPhotonNumber {
            expected: 2,
            found: input.photons(),
        });
    }
    Ok(())
}

/// Renormalizes `eta * p` to the detected (post-selected) events.
/// `e^{i phi}` for each phase of the triple.
pub fn phasors(phases: &PhaseTriple) -> [Complex64; 3] {
    std::array::from_fn(|k| Complex64::from_polar(1.0, phases[k]))
}

fn apply_efficiencies(p: &mut [f64; OUTCOMES], eta: &[f64; OUTCOMES]) {
    let mut total = 0.0;
    for (pi, e) in p.iter_mut().zip(eta) {
        *pi *= e;
        total += *pi;
    }
    if total > 0.0 {
        p.iter_mut().for_each(|pi| *pi /= total);
    }
}

/// The 10-outcome likelihood, built through the general Fock-space evolution.
pub fn likelihood(
    model: &DeviceModel,
    unknown: &PhaseTriple,
    control: &PhaseTriple,
    input: &ModeOccupation,
) -> Result<[f64; OUTCOMES]> {
    check_two_photon_input(input)?;
    model.validate()?;
    let u = device_unitary(model, unknown, control)?;
    let p_ind = linear_optics::probabilities_indistinguishable(&u, input)?;
    let p_dist = linear_optics::probabilities_distinguishable(&u, input)?;
    let mixed = linear_optics::mix_visibility(&p_ind, &p_dist, model.visibility)?;
    let mut p = [0.0; OUTCOMES];
    p.copy_from_slice(&mixed);
    apply_efficiencies(&mut p, &model.outcome_efficiencies);
    Ok(p)
}

/// Outcome index of the pair of output modes `(i, j)`, `i <= j`, in the
/// descending-lexicographic two-photon basis.
pub const fn pair_index(i: usize, j: usize) -> usize {
    // rows start at 0, 4, 7, 9
    const ROW_START: [usize; 4] = [0, 4, 7, 9];
    ROW_START[i] + (j - i)
}

/// Fast likelihood for two photons in a fixed input configuration.
///
/// Only the two input columns of the device matrix are ever needed, so the
/// first quarter is reduced to two column vectors and each evaluation costs a
/// 4x4 matrix-vector product per photon.
#[derive(Clone, Debug)]
pub struct TwoPhotonEngine {
    input_columns: [[Complex64; 4]; 2],
    quarter_out: [[Complex64; 4]; 4],
    visibility: f64,
    efficiencies: [f64; OUTCOMES],
    same_input_mode: bool,
}

impl TwoPhotonEngine {
    pub fn new(model: &DeviceModel, input: &ModeOccupation) -> Result<Self> {
        check_two_photon_input(input)?;
        model.validate()?;
        let q_in = quarter_unitary(&model.quarter_in)?;
        let q_out = quarter_unitary(&model.quarter_out)?;
        let sources = input.photon_modes();
        let input_columns =
            std::array::from_fn(|p| std::array::from_fn(|row| q_in.entry(row, sources[p])));
        let quarter_out = std::array::from_fn(|i| std::array::from_fn(|j| q_out.entry(i, j)));
        Ok(Self {
            input_columns,
            quarter_out,
            visibility: model.visibility,
            efficiencies: model.outcome_efficiencies,
            same_input_mode: sources[0] == sources[1],
        })
    }

    pub fn visibility(&self) -> f64 {
        self.visibility
    }

    /// Output columns of the device matrix for both photons, given the phase
    /// factors `e^{i phi}` of arms A, B and D.
    fn output_columns(&self, phasors: &[Complex64; 3]) -> [[Complex64; 4]; 2] {
        // modes 1..4 carry phases D, C (reference), B, A
        let layer = [phasors[2], c(1.0, 0.0), phasors[1], phasors[0]];
        let mut out = [[c(0.0, 0.0); 4]; 2];
        for (photon, col) in self.input_columns.iter().enumerate() {
            let shifted: [Complex64; 4] = std::array::from_fn(|k| layer[k] * col[k]);
            for (i, row) in self.quarter_out.iter().enumerate() {
                out[photon][i] = row
                    .iter()
                    .zip(&shifted)
                    .fold(c(0.0, 0.0), |acc, (a, b)| acc + a * b);
            }
        }
        out
    }

    fn raw_from_phasors(&self, phasors: &[Complex64; 3]) -> ([f64; OUTCOMES], [f64; OUTCOMES]) {
        let [w1, w2] = self.output_columns(phasors);
        let input_norm = if self.same_input_mode { 0.5 } else { 1.0 };
        let mut ind = [0.0; OUTCOMES];
        let mut dist = [0.0; OUTCOMES];
        for i in 0..4 {
            let a = w1[i] * w2[i];
            ind[pair_index(i, i)] = 2.0 * a.norm_sqr() * input_norm;
            dist[pair_index(i, i)] = w1[i].norm_sqr() * w2[i].norm_sqr();
            for j in i + 1..4 {
                let amp = w1[i] * w2[j] + w1[j] * w2[i];
                ind[pair_index(i, j)] = amp.norm_sqr() * input_norm;
                dist[pair_index(i, j)] =
                    w1[i].norm_sqr() * w2[j].norm_sqr() + w1[j].norm_sqr() * w2[i].norm_sqr();
            }
        }
        (ind, dist)
    }

    /// Likelihood without efficiencies: `(p_ind, p_dist)`.
    pub fn raw_probabilities(
        &self,
        phases: &PhaseTriple,
    ) -> ([f64; OUTCOMES], [f64; OUTCOMES]) {
        self.raw_from_phasors(&phasors(phases))
    }

    /// Detected-event probabilities from the phase factors `e^{i phi}` of
    /// arms A, B and D.
    pub fn probabilities_from_phasors(&self, phasors: &[Complex64; 3]) -> [f64; OUTCOMES] {
        let (ind, dist) = self.raw_from_phasors(phasors);
        let v = self.visibility;
        let mut p: [f64; OUTCOMES] = std::array::from_fn(|k| v * ind[k] + (1.0 - v) * dist[k]);
        apply_efficiencies(&mut p, &self.efficiencies);
        p
    }

    /// Detected-event probabilities at the total phases `unknown + control`.
    pub fn probabilities(&self, phases: &PhaseTriple) -> [f64; OUTCOMES] {
        self.probabilities_from_phasors(&phasors(phases))
    }

    /// Probabilities and their exact derivatives with respect to
    /// `(phi_A, phi_B, phi_D)`, from differentiating the amplitudes.
    pub fn probabilities_with_jacobian(
        &self,
        phases: &PhaseTriple,
    ) -> ([f64; OUTCOMES], [[f64; OUTCOMES]; 3]) {
        let w = self.output_columns(&phasors(phases));
        // phase k sits on mode PHASE_MODES[k]
        const PHASE_MODES: [usize; 3] = [3, 2, 0];
        let layer_phase = [phases[2], 0.0, phases[1], phases[0]];
        let mut dw = [[[c(0.0, 0.0); 4]; 2]; 3];
        for (k, &mode) in PHASE_MODES.iter().enumerate() {
            let factor = c(0.0, 1.0) * Complex64::from_polar(1.0, layer_phase[mode]);
            for photon in 0..2 {
                let source = factor * self.input_columns[photon][mode];
                for i in 0..4 {
                    dw[k][photon][i] = self.quarter_out[i][mode] * source;
                }
            }
        }

        let input_norm = if self.same_input_mode { 0.5 } else { 1.0 };
        let v = self.visibility;
        let mut q = [0.0; OUTCOMES];
        let mut dq = [[0.0; OUTCOMES]; 3];
        let [w1, w2] = w;
        for i in 0..4 {
            for j in i..4 {
                let idx = pair_index(i, j);
                let (amp, weight) = if i == j {
                    (w1[i] * w2[i], 2.0 * input_norm)
                } else {
                    (w1[i] * w2[j] + w1[j] * w2[i], input_norm)
                };
                let dist = if i == j {
                    w1[i].norm_sqr() * w2[i].norm_sqr()
                } else {
                    w1[i].norm_sqr() * w2[j].norm_sqr() + w1[j].norm_sqr() * w2[i].norm_sqr()
                };
                q[idx] = v * weight * amp.norm_sqr() + (1.0 - v) * dist;
                for k in 0..3 {
                    let [d1, d2] = dw[k];
                    let damp = if i == j {
                        d1[i] * w2[i] + w1[i] * d2[i]
                    } else {
                        d1[i] * w2[j] + w1[i] * d2[j] + d1[j] * w2[i] + w1[j] * d2[i]
                    };
                    let dsq = |x: Complex64, dx: Complex64| 2.0 * (x.conj() * dx).re;
                    let ddist = if i == j {
                        dsq(w1[i], d1[i]) * w2[i].norm_sqr() + w1[i].norm_sqr() * dsq(w2[i], d2[i])
                    } else {
                        dsq(w1[i], d1[i]) * w2[j].norm_sqr()
                            + w1[i].norm_sqr() * dsq(w2[j], d2[j])
                            + dsq(w1[j], d1[j]) * w2[i].norm_sqr()
                            + w1[j].norm_sqr() * dsq(w2[i], d2[i])
                    };
                    dq[k][idx] = v * weight * dsq(amp, damp) + (1.0 - v) * ddist;
                }
            }
        }

        // p = eta q / S with S = sum(eta q)
        let eta = &self.efficiencies;
        let total: f64 = q.iter().zip(eta).map(|(a, e)| a * e).sum();
        let p: [f64; OUTCOMES] = std::array::from_fn(|x| eta[x] * q[x] / total);
        let mut dp = [[0.0; OUTCOMES]; 3];
        for k in 0..3 {
            let dtotal: f64 = dq[k].iter().zip(eta).map(|(a, e)| a * e).sum();
            for x in 0..OUTCOMES {
                dp[k][x] = eta[x] * dq[k][x] / total - p[x] * dtotal / total;
            }
        }
        (p, dp)
    }

    pub fn likelihood(&self, unknown: &PhaseTriple, control: &PhaseTriple) -> [f64; OUTCOMES] {
        let total = [
            unknown[0] + control[0],
            unknown[1] + control[1],
            unknown[2] + control[2],
        ];
        self.probabilities(&total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_1_SQRT_2, PI};

    fn eq5(phi1: f64, phi2: f64) -> DMatrix<Complex64> {
        let e1 = Complex64::from_polar(1.0, phi1);
        let e2 = Complex64::from_polar(1.0, phi2);
        let i = c(0.0, 1.0);
        let one = c(1.0, 0.0);
        DMatrix::from_row_slice(
            4,
            4,
            &[
                e2,
                i * e2,
                i,
                -one,
                i * e2,
                -e2,
                one,
                i,
                i,
                one,
                -e1,
                i * e1,
                -one,
                i,
                i * e1,
                e1,
            ],
        ) * c(0.5, 0.0)
    }

    fn max_diff(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> f64 {
        (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn ideal_quarter_is_the_balanced_splitter() {
        for k in 0..12 {
            let phi1 = -3.0 + 0.55 * k as f64;
            let phi2 = 0.3 * k as f64 - 1.0;
            let q = QuarterParams {
                phase_hi: phi2,
                phase_lo: phi1,
                reflectivities: [0.5; 4],
            };
            let u = quarter_unitary(&q).unwrap();
            assert!(max_diff(u.matrix(), &eq5(phi1, phi2)) < 1e-12);
        }
    }

    #[test]
    fn unbalanced_quarter_is_unitary_but_different() {
        let q = QuarterParams {
            reflectivities: [0.45; 4],
            ..QuarterParams::ideal()
        };
        let u = quarter_unitary(&q).unwrap();
        assert!(ComplexUnitary::new(u.matrix().clone()).is_ok());
        assert!(max_diff(u.matrix(), &eq5(0.0, 0.0)) > 1e-3);
        // |U_11|^2 = r1 r3 for the mode-1 path
        assert!((u.entry(0, 0).norm_sqr() - 0.45 * 0.45).abs() < 1e-12);
    }

    #[test]
    fn quarter_rejects_bad_reflectivity() {
        let q = QuarterParams {
            reflectivities: [0.5, 1.0, 0.5, 0.5],
            ..QuarterParams::ideal()
        };
        assert_eq!(quarter_unitary(&q), Err(Error::ReflectivityOutOfRange(1.0)));
    }

    #[test]
    fn phase_layer_examples() {
        let id = phase_layer_unitary(&PhaseLayer::default());
        assert!(max_diff(id.matrix(), &DMatrix::identity(4, 4)) < 1e-15);
        let flip = phase_layer_unitary(&PhaseLayer {
            phi_a: PI,
            ..Default::default()
        });
        assert!((flip.entry(3, 3) - c(-1.0, 0.0)).norm() < 1e-15);
        assert!((flip.entry(0, 0) - c(1.0, 0.0)).norm() < 1e-15);
        let d = phase_layer_unitary(&PhaseLayer {
            phi_d: PI / 2.0,
            ..Default::default()
        });
        assert!((d.entry(0, 0) - c(0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn device_at_zero_is_product_of_quarters() {
        let model = DeviceModel::ideal();
        let u = device_unitary(&model, &[0.0; 3], &[0.0; 3]).unwrap();
        let q = eq5(0.0, 0.0);
        assert!(max_diff(u.matrix(), &(&q * &q)) < 1e-12);
    }

    #[test]
    fn control_adds_to_unknown() {
        let model = DeviceModel::perturbed(3);
        let a = device_unitary(&model, &[0.1, 0.2, 0.3], &[1.0, -0.5, 2.0]).unwrap();
        let b = device_unitary(&model, &[1.1, -0.3, 2.3], &[0.0; 3]).unwrap();
        assert!(max_diff(a.matrix(), b.matrix()) < 1e-12);
    }

    #[test]
    fn common_phase_shift_is_unobservable() {
        let model = DeviceModel::perturbed(5);
        let q_in = quarter_unitary(&model.quarter_in).unwrap();
        let q_out = quarter_unitary(&model.quarter_out).unwrap();
        let input = default_input();
        let layer = PhaseLayer {
            phi_a: 0.4,
            phi_b: -1.0,
            phi_c: 0.0,
            phi_d: 2.2,
        };
        let shifted = PhaseLayer {
            phi_a: 0.4 + 0.77,
            phi_b: -1.0 + 0.77,
            phi_c: 0.77,
            phi_d: 2.2 + 0.77,
        };
        let run = |l: &PhaseLayer| {
            let u = q_out
                .compose(&phase_layer_unitary(l).compose(&q_in).unwrap())
                .unwrap();
            linear_optics::probabilities_indistinguishable(&u, &input).unwrap()
        };
        let (p, s) = (run(&layer), run(&shifted));
        for (x, y) in p.iter().zip(&s) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn probe_matches_textbook_state_at_zero_phase() {
        let u = quarter_unitary(&QuarterParams::ideal()).unwrap();
        let probe = linear_optics::evolve(&u, &default_input()).unwrap();
        let b = FRAC_1_SQRT_2 / 2.0;
        let expected = [
            ([2, 0, 0, 0], c(0.0, b)),
            ([0, 2, 0, 0], c(0.0, -b)),
            ([0, 0, 2, 0], c(0.0, b)),
            ([0, 0, 0, 2], c(0.0, -b)),
            ([1, 1, 0, 0], c(-0.5, 0.0)),
            ([0, 0, 1, 1], c(-0.5, 0.0)),
        ];
        for (occ, amp) in expected {
            let got = probe.amplitude(&ModeOccupation::from(occ));
            assert!((got - amp).norm() < 1e-12, "{occ:?}: {got} vs {amp}");
        }
    }

    #[test]
    fn engine_agrees_with_fock_evolution() {
        for seed in 0..4 {
            let model = DeviceModel::perturbed(seed);
            for input in [
                default_input(),
                ModeOccupation::from([1, 1, 0, 0]),
                ModeOccupation::from([0, 1, 0, 1]),
                ModeOccupation::from([0, 2, 0, 0]),
            ] {
                let engine = model.engine(&input).unwrap();
                let unknown = [0.3 * seed as f64, 1.7, -0.4];
                let control = [0.2, -0.9, 1.3];
                let slow = likelihood(&model, &unknown, &control, &input).unwrap();
                let fast = engine.likelihood(&unknown, &control);
                for (a, b) in slow.iter().zip(&fast) {
                    assert!((a - b).abs() < 1e-12, "{input}: {slow:?} vs {fast:?}");
                }
            }
        }
    }

    #[test]
    fn visibility_endpoints_select_pure_statistics() {
        let base = DeviceModel::perturbed(11);
        let mut model = base.clone();
        model.outcome_efficiencies = [1.0; OUTCOMES];
        let input = default_input();
        let phases = [0.5, 1.1, 2.9];
        let u = device_unitary(&model, &phases, &[0.0; 3]).unwrap();
        let ind = linear_optics::probabilities_indistinguishable(&u, &input).unwrap();
        let dist = linear_optics::probabilities_distinguishable(&u, &input).unwrap();
        let p1 = likelihood(
            &model.with_statistics(PhotonStatistics::Indistinguishable),
            &phases,
            &[0.0; 3],
            &input,
        )
        .unwrap();
        let p0 = likelihood(
            &model.with_statistics(PhotonStatistics::Distinguishable),
            &phases,
            &[0.0; 3],
            &input,
        )
        .unwrap();
        for k in 0..OUTCOMES {
            assert!((p1[k] - ind[k]).abs() < 1e-12);
            assert!((p0[k] - dist[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_efficiency_is_invisible() {
        let mut model = DeviceModel::perturbed(2);
        model.outcome_efficiencies = [1.0; OUTCOMES];
        let engine = model.engine(&default_input()).unwrap();
        model.outcome_efficiencies = [0.6; OUTCOMES];
        let scaled = model.engine(&default_input()).unwrap();
        let phases = [0.9, 0.1, 2.0];
        let (a, b) = (engine.probabilities(&phases), scaled.probabilities(&phases));
        for k in 0..OUTCOMES {
            assert!((a[k] - b[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn first_quarter_phases_only_translate_the_unknowns() {
        // phi2 never touches the |0011> probe; phi1 adds a relative phase
        // e^{-2i phi1} on modes 3-4, i.e. a common shift of phi_A and phi_B.
        let input = default_input();
        let unknown = [0.4, 2.0, 1.1];
        for (phi1, phi2) in [(0.3, 0.0), (1.9, -2.4), (-0.7, 3.0)] {
            let mut model = DeviceModel::ideal();
            model.quarter_in.phase_lo = phi1;
            model.quarter_in.phase_hi = phi2;
            let p = likelihood(&model, &unknown, &[0.0; 3], &input).unwrap();
            let shifted = [unknown[0] + phi1, unknown[1] + phi1, unknown[2]];
            let reference = likelihood(&DeviceModel::ideal(), &shifted, &[0.0; 3], &input).unwrap();
            for k in 0..OUTCOMES {
                assert!((p[k] - reference[k]).abs() < 1e-12, "{p:?} vs {reference:?}");
            }
        }
    }

    #[test]
    fn ideal_likelihood_symmetries() {
        // invariant under phi -> -phi and (A, B) -> (A + pi, B + pi), but not
        // under a pi shift of any single phase
        let engine = DeviceModel::ideal().engine(&default_input()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let diff = |a: [f64; OUTCOMES], b: [f64; OUTCOMES]| {
            a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        };
        let mut single_shift_diff = [0.0_f64; 3];
        for _ in 0..200 {
            let phi: PhaseTriple = std::array::from_fn(|_| rng.random_range(0.0..TAU));
            let p = engine.probabilities(&phi);
            assert!(diff(p, engine.probabilities(&[-phi[0], -phi[1], -phi[2]])) < 1e-12);
            assert!(diff(p, engine.probabilities(&[phi[0] + PI, phi[1] + PI, phi[2]])) < 1e-12);
            for (k, worst) in single_shift_diff.iter_mut().enumerate() {
                let mut shifted = phi;
                shifted[k] += PI;
                *worst = worst.max(diff(p, engine.probabilities(&shifted)));
            }
            let mut full = phi;
            full.iter_mut().for_each(|x| *x += TAU);
            assert!(diff(p, engine.probabilities(&full)) < 1e-12);
        }
        assert!(single_shift_diff.iter().all(|&d| d > 0.1), "{single_shift_diff:?}");
    }

    #[test]
    fn analytic_jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..5 {
            let engine = DeviceModel::perturbed(seed).engine(&default_input()).unwrap();
            let phi: PhaseTriple = std::array::from_fn(|_| rng.random_range(0.0..TAU));
            let (p, jac) = engine.probabilities_with_jacobian(&phi);
            let direct = engine.probabilities(&phi);
            let h = 1e-6;
            for k in 0..3 {
                let (mut up, mut down) = (phi, phi);
                up[k] += h;
                down[k] -= h;
                let (pu, pd) = (engine.probabilities(&up), engine.probabilities(&down));
                for x in 0..OUTCOMES {
                    assert!((p[x] - direct[x]).abs() < 1e-14);
                    let fd = (pu[x] - pd[x]) / (2.0 * h);
                    assert!((fd - jac[k][x]).abs() < 1e-8, "{k} {x}: {fd} vs {}", jac[k][x]);
                }
            }
        }
    }

    #[test]
    fn likelihood_rejects_wrong_input() {
        let model = DeviceModel::ideal();
        assert!(matches!(
            likelihood(&model, &[0.0; 3], &[0.0; 3], &ModeOccupation::from([1, 1, 1, 0])),
            Err(Error::UnsupportedPhotonNumber { .. })
        ));
        assert!(matches!(
            model.engine(&ModeOccupation::from([1, 1, 0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn currents_formula() {
        let thermal = ThermalModel {
            r1: [1.0; 3],
            r2: [0.01, 0.0, 0.01],
            ..ThermalModel::default()
        };
        let p = currents_to_powers(&thermal, &[3.0, 3.0, 0.0]).unwrap();
        assert!((p[0] - 9.0 / 0.91).abs() < 1e-12);
        assert!((p[1] - 9.0).abs() < 1e-12);
        assert_eq!(p[2], 0.0);
        assert!(matches!(
            currents_to_powers(&thermal, &[10.0, 0.0, 0.0]),
            Err(Error::ThermalBreakdown { index: 0, .. })
        ));
        assert!(matches!(
            currents_to_powers(&thermal, &[0.0, 6.0, 0.0]),
            Err(Error::PowerLimitExceeded { index: 1, .. })
        ));
    }

    #[test]
    fn powers_to_phases_examples() {
        let mut thermal = ThermalModel {
            phi0: [0.1, -0.2, 0.3],
            ..ThermalModel::default()
        };
        assert_eq!(powers_to_phases(&thermal, &[0.0; 3]).unwrap(), [0.1, -0.2, 0.3]);
        thermal.phi0 = [0.0; 3];
        let full = powers_to_phases(&thermal, &[22.0, 11.0, 0.0]).unwrap();
        assert!((full[0] - TAU).abs() < 1e-12);
        assert!((full[1] - PI).abs() < 1e-12);
        assert!(powers_to_phases(&thermal, &[31.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn inversion_examples() {
        let thermal = ThermalModel::default();
        assert_eq!(phases_to_powers(&thermal, &[0.0; 3]).unwrap(), [0.0; 3]);
        let target = [1.0, 2.5, 6.0];
        let powers = phases_to_powers(&thermal, &target).unwrap();
        for i in 0..3 {
            let closed = target[i] / thermal.alpha[i][i];
            assert!((powers[i] - closed).abs() < 1e-9);
        }
        // negative targets wrap into range
        let wrapped = phases_to_powers(&thermal, &[-1.0, 0.0, 0.0]).unwrap();
        assert!((wrapped[0] - (TAU - 1.0) / thermal.alpha[0][0]).abs() < 1e-9);
    }

    #[test]
    fn inversion_with_cross_talk_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let model = DeviceModel::perturbed(rng.random());
            let target: [f64; 3] = std::array::from_fn(|_| rng.random_range(-PI..PI));
            let powers = phases_to_powers(&model.thermal, &target).unwrap();
            let phases = powers_to_phases(&model.thermal, &powers).unwrap();
            for i in 0..3 {
                let diff = (phases[i] - target[i] + PI).rem_euclid(TAU) - PI;
                assert!(diff.abs() < 1e-6, "{diff}");
            }
        }
    }

    #[test]
    fn device_model_json_round_trip() {
        let model = DeviceModel::perturbed(42);
        let json = serde_json::to_string(&model).unwrap();
        let back: DeviceModel = serde_json::from_str(&json).unwrap();
        assert_eq!(model, back);
        assert_eq!(DeviceModel::perturbed(42), model);
    }

    #[test]
    fn pair_indices_follow_basis_order() {
        let basis = linear_optics::enumerate_basis(4, 2);
        for i in 0..4 {
            for j in i..4 {
                let mut occ = [0usize; 4];
                occ[i] += 1;
                occ[j] += 1;
                assert_eq!(basis.index_of(&ModeOccupation::from(occ)), Some(pair_index(i, j)));
            }
        }
    }
}
