//! Fisher information, Cramer-Rao bounds and the comparison bounds used to
//! certify a quantum advantage.
//!
//! All bounds are per probe; divide by the number of probes `M` for the
//! asymptotic covariance bound.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::device::{DeviceModel, PhaseTriple, PhotonStatistics, TwoPhotonEngine};
use crate::error::{Error, Result};
use crate::linear_optics::{self, enumerate_basis, ModeOccupation, PureState};
use crate::optimize::{golden_section, nelder_mead, NelderMeadOptions};

/// Central-difference step for numerical Fisher information, rad.
pub const FD_STEP: f64 = 1e-5;
/// Outcomes less likely than this carry no information and are skipped.
pub const PROBABILITY_FLOOR: f64 = 1e-12;
/// `Tr(F^-1)` at or above this counts as a divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e4;
/// Photon-number generators of `(phi_A, phi_B, phi_D)`: modes 4, 3 and 1.
pub const GENERATOR_MODES: [usize; 3] = [3, 2, 0];

fn check_probabilities(p: &[f64]) -> Result<()> {
    if p.iter().any(|x| !x.is_finite() || *x < -1e-15) {
        return Err(Error::InvalidProbability);
    }
    Ok(())
}

/// Classical Fisher matrix `F_ij = sum_x dP_x/dphi_i dP_x/dphi_j / P_x` by
/// central differences.
pub fn fi_matrix<const N: usize, F>(likelihood: F, phases: &PhaseTriple) -> Result<Matrix3<f64>>
where
    F: Fn(&PhaseTriple) -> [f64; N],
{
    fi_matrix_with_step(likelihood, phases, FD_STEP)
}

pub fn fi_matrix_with_step<const N: usize, F>(
    likelihood: F,
    phases: &PhaseTriple,
    step: f64,
) -> Result<Matrix3<f64>>
where
    F: Fn(&PhaseTriple) -> [f64; N],
{
    let p = likelihood(phases);
    check_probabilities(&p)?;
    let mut jac = [[0.0; N]; 3];
    for (k, row) in jac.iter_mut().enumerate() {
        let (mut up, mut down) = (*phases, *phases);
        up[k] += step;
        down[k] -= step;
        let (pu, pd) = (likelihood(&up), likelihood(&down));
        check_probabilities(&pu)?;
        check_probabilities(&pd)?;
        for x in 0..N {
            row[x] = (pu[x] - pd[x]) / (2.0 * step);
        }
    }
    Ok(fi_from_jacobian(&p, &jac))
}

/// Fisher matrix from probabilities and their derivatives.
pub fn fi_from_jacobian<const N: usize>(p: &[f64; N], jac: &[[f64; N]; 3]) -> Matrix3<f64> {
    let mut fi = Matrix3::zeros();
    for x in 0..N {
        if p[x] < PROBABILITY_FLOOR {
            continue;
        }
        for i in 0..3 {
            for j in i..3 {
                fi[(i, j)] += jac[i][x] * jac[j][x] / p[x];
            }
        }
    }
    for i in 0..3 {
        for j in 0..i {
            fi[(i, j)] = fi[(j, i)];
        }
    }
    fi
}

/// Fisher matrix through exact amplitude derivatives.
pub fn fi_matrix_analytic(engine: &TwoPhotonEngine, phases: &PhaseTriple) -> Matrix3<f64> {
    let (p, jac) = engine.probabilities_with_jacobian(phases);
    fi_from_jacobian(&p, &jac)
}

/// `Tr(M^-1)` for a symmetric PSD matrix; `+inf` when singular.
pub fn trace_inverse(m: &Matrix3<f64>) -> f64 {
    let eig = SymmetricEigen::new(*m);
    let largest = eig.eigenvalues.amax();
    if !(largest > 0.0) {
        return f64::INFINITY;
    }
    let mut trace = 0.0;
    for &lambda in eig.eigenvalues.iter() {
        if lambda <= 1e-13 * largest.max(1.0) {
            return f64::INFINITY;
        }
        trace += 1.0 / lambda;
    }
    trace
}

/// `Tr(F^-1)` of the device at the total phase triple.
pub fn crb_trace(engine: &TwoPhotonEngine, phases: &PhaseTriple) -> f64 {
    match fi_matrix(|phi| engine.probabilities(phi), phases) {
        Ok(fi) => trace_inverse(&fi),
        Err(_) => f64::INFINITY,
    }
}

/// Quantum Fisher matrix `4 Cov(n_i, n_j)` of a pure probe for the given
/// photon-number generators.
pub fn qfi_for_generators(probe: &PureState, modes: &[usize]) -> DMatrix<f64> {
    let d = modes.len();
    let mut mean = vec![0.0; d];
    let mut second = DMatrix::<f64>::zeros(d, d);
    for (occ, amp) in probe.basis().states().iter().zip(probe.amplitudes()) {
        let w = amp.norm_sqr();
        let counts = occ.counts();
        for i in 0..d {
            let ni = counts[modes[i]] as f64;
            mean[i] += w * ni;
            for j in 0..d {
                second[(i, j)] += w * ni * counts[modes[j]] as f64;
            }
        }
    }
    let mut qfi = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            qfi[(i, j)] = 4.0 * (second[(i, j)] - mean[i] * mean[j]);
        }
    }
    qfi
}

/// QFI of a 4-mode probe for `(phi_A, phi_B, phi_D)` with mode 2 as reference.
pub fn qfi_pure(probe: &PureState) -> Result<Matrix3<f64>> {
    if probe.basis().modes() != 4 {
        return Err(Error::DimensionMismatch {
            expected: 4,
            found: probe.basis().modes(),
        });
    }
    let q = qfi_for_generators(probe, &GENERATOR_MODES);
    Ok(Matrix3::from_fn(|i, j| q[(i, j)]))
}

/// Probe state prepared by the first quarter.
pub fn probe_state(model: &DeviceModel, input: &ModeOccupation) -> Result<PureState> {
    let q_in = crate::device::quarter_unitary(&model.quarter_in)?;
    linear_optics::evolve(&q_in, input)
}

fn to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherReport {
    pub phases: PhaseTriple,
    pub fi: [[f64; 3]; 3],
    /// `Tr(F^-1)`, infinite when `F` is singular.
    pub fi_inv_trace: f64,
    /// Only available for a pure probe (indistinguishable photons).
    pub qfi: Option<[[f64; 3]; 3]>,
    pub qcrb_trace: Option<f64>,
}

pub fn fisher_report(
    model: &DeviceModel,
    statistics: PhotonStatistics,
    input: &ModeOccupation,
    phases: &PhaseTriple,
) -> Result<FisherReport> {
    let model = model.with_statistics(statistics);
    let engine = model.engine(input)?;
    let fi = fi_matrix(|phi| engine.probabilities(phi), phases)?;
    let (qfi, qcrb_trace) = if model.visibility == 1.0 {
        let q = qfi_pure(&probe_state(&model, input)?)?;
        (Some(to_rows(&q)), Some(trace_inverse(&q)))
    } else {
        (None, None)
    };
    Ok(FisherReport {
        phases: *phases,
        fi: to_rows(&fi),
        fi_inv_trace: trace_inverse(&fi),
        qfi,
        qcrb_trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrbMinimum {
    pub min_trace: f64,
    /// Distinct refined minima within `1e-3` of the best, wrapped to `[0, 2pi)`.
    pub argmins: Vec<PhaseTriple>,
    pub grid_points: usize,
}

const REFINE_STARTS: usize = 10;
const ARGMIN_TOLERANCE: f64 = 1e-3;

fn wrap(phases: &[f64]) -> PhaseTriple {
    std::array::from_fn(|i| phases[i].rem_euclid(TAU))
}

fn torus_distance(a: &PhaseTriple, b: &PhaseTriple) -> f64 {
    (0..3)
        .map(|i| {
            let d = (a[i] - b[i]).rem_euclid(TAU);
            d.min(TAU - d)
        })
        .fold(0.0, f64::max)
}

/// Grid points of `[0, 2pi)^3`, `grid_points` per axis, in row-major order.
pub fn torus_grid(grid_points: usize) -> Vec<PhaseTriple> {
    let step = TAU / grid_points as f64;
    let mut points = Vec::with_capacity(grid_points.pow(3));
    for a in 0..grid_points {
        for b in 0..grid_points {
            for d in 0..grid_points {
                points.push([a as f64 * step, b as f64 * step, d as f64 * step]);
            }
        }
    }
    points
}

/// Global minimum of `Tr(F^-1)` over the phase torus: grid scan, then
/// Nelder-Mead from the best cells.
pub fn min_crb_search(
    model: &DeviceModel,
    statistics: PhotonStatistics,
    grid_points: usize,
) -> Result<CrbMinimum> {
    if grid_points < 20 {
        return Err(Error::InvalidArgument(format!(
            "grid needs at least 20 points per axis, got {grid_points}"
        )));
    }
    let engine = model
        .with_statistics(statistics)
        .engine(&crate::device::default_input())?;
    let grid = torus_grid(grid_points);
    let traces: Vec<f64> = grid.par_iter().map(|p| crb_trace(&engine, p)).collect();
    let mut ranked: Vec<usize> = (0..grid.len()).filter(|&i| traces[i].is_finite()).collect();
    if ranked.is_empty() {
        return Err(Error::AllSingular);
    }
    ranked.sort_by(|&a, &b| traces[a].total_cmp(&traces[b]).then(a.cmp(&b)));

    let step = TAU / grid_points as f64;
    let opts = NelderMeadOptions {
        max_evaluations: 4000,
        f_tol: 1e-13,
        x_tol: 1e-8,
    };
    let refined: Vec<(f64, PhaseTriple)> = ranked
        .iter()
        .take(REFINE_STARTS)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&&i| {
            let m = nelder_mead(
                |x| crb_trace(&engine, &[x[0], x[1], x[2]]),
                &grid[i],
                &[step / 2.0; 3],
                &opts,
            );
            (m.value, wrap(&m.x))
        })
        .collect();

    let min_trace = refined
        .iter()
        .map(|r| r.0)
        .fold(traces[ranked[0]], f64::min);
    let mut argmins: Vec<PhaseTriple> = Vec::new();
    for (value, x) in &refined {
        if value - min_trace <= ARGMIN_TOLERANCE
            && argmins.iter().all(|a| torus_distance(a, x) > 1e-2)
        {
            argmins.push(*x);
        }
    }
    Ok(CrbMinimum {
        min_trace,
        argmins,
        grid_points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub threshold: f64,
    /// Fraction of the phase torus with `Tr(F^-1) < threshold`.
    pub density: f64,
    pub std_error: f64,
    /// Fraction with `Tr(F^-1) >= 1e4`.
    pub divergence_fraction: f64,
    pub samples: usize,
}

/// `Tr(F^-1)` at `n_samples` uniform phase triples.
pub fn sample_crb_traces(
    model: &DeviceModel,
    statistics: PhotonStatistics,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let engine = model
        .with_statistics(statistics)
        .engine(&crate::device::default_input())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<PhaseTriple> = (0..n_samples)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..TAU)))
        .collect();
    Ok(points.par_iter().map(|p| crb_trace(&engine, p)).collect())
}

pub fn density_from_traces(traces: &[f64], threshold: f64) -> DensityEstimate {
    let n = traces.len().max(1) as f64;
    let below = traces.iter().filter(|&&t| t < threshold).count() as f64;
    let diverging = traces
        .iter()
        .filter(|&&t| t >= DIVERGENCE_THRESHOLD)
        .count() as f64;
    let density = below / n;
    DensityEstimate {
        threshold,
        density,
        std_error: (density * (1.0 - density) / n).sqrt(),
        divergence_fraction: diverging / n,
        samples: traces.len(),
    }
}

/// Monte Carlo estimate of the fraction of phase space where `Tr(F^-1) < t`.
pub fn threshold_density(
    model: &DeviceModel,
    statistics: PhotonStatistics,
    threshold: f64,
    n_samples: usize,
    seed: u64,
) -> Result<DensityEstimate> {
    if n_samples < 10_000 {
        return Err(Error::InvalidArgument(format!(
            "density estimates need at least 10^4 samples, got {n_samples}"
        )));
    }
    let traces = sample_crb_traces(model, statistics, n_samples, seed)?;
    Ok(density_from_traces(&traces, threshold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinationBound {
    pub nu: [f64; 3],
    pub value: f64,
}

/// Variance bound `nu^T F_Q^-1 nu` on the estimate of `nu . phi`.
pub fn linear_combination_bound(qfi: &Matrix3<f64>, nu: &[f64; 3]) -> Result<f64> {
    let inv = qfi.try_inverse().ok_or(Error::Singular)?;
    if inv.iter().any(|x| !x.is_finite()) {
        return Err(Error::Singular);
    }
    let v = Vector3::from_column_slice(nu);
    Ok((v.transpose() * inv * v)[(0, 0)])
}

/// Top eigenvector of the QFI (unit norm, first nonzero component positive)
/// and its variance bound `1 / lambda_max`.
pub fn optimal_combination(qfi: &Matrix3<f64>) -> CombinationBound {
    let sym = (qfi + qfi.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lambda_max = eig.eigenvalues.max();
    let tie = 1e-10 * lambda_max.abs().max(1.0);
    // projector onto the (possibly degenerate) top eigenspace
    let mut projector = Matrix3::zeros();
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda_max - lambda <= tie {
            let v = eig.eigenvectors.column(k);
            projector += v * v.transpose();
        }
    }
    let mut nu = [0.0; 3];
    for axis in 0..3 {
        let candidate = projector.column(axis).into_owned();
        let norm = candidate.norm();
        if norm > 1e-8 {
            let unit = candidate / norm;
            nu = [unit[0], unit[1], unit[2]];
            break;
        }
    }
    if let Some(first) = nu.iter().copied().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            nu.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let value = if lambda_max > 0.0 {
        1.0 / lambda_max
    } else {
        f64::INFINITY
    };
    CombinationBound { nu, value }
}

/// Best variance for `nu . phi` when each phase is estimated separately with
/// coherent light (single-phase QFI `n_i`) under a total budget `n`:
/// `min sum nu_i^2 / n_i = (sum |nu_i|)^2 / n`.
pub fn sequential_bound(nu: &[f64; 3], total_mean_photons: f64) -> Result<f64> {
    if !(total_mean_photons > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "mean photon budget must be positive, got {total_mean_photons}"
        )));
    }
    let l1: f64 = nu.iter().map(|x| x.abs()).sum();
    Ok(l1 * l1 / total_mean_photons)
}

/// The same bound found by minimizing over photon allocations numerically.
pub fn sequential_bound_numeric(nu: &[f64; 3], total_mean_photons: f64) -> Result<f64> {
    if !(total_mean_photons > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "mean photon budget must be positive, got {total_mean_photons}"
        )));
    }
    // phases with zero weight get no photons
    let active: Vec<f64> = nu.iter().copied().filter(|x| *x != 0.0).collect();
    match active.len() {
        0 => return Ok(0.0),
        1 => return Ok(active[0] * active[0] / total_mean_photons),
        _ => {}
    }
    let cost = |z: &[f64]| {
        // softmax with the last logit pinned to zero
        let mut logits = z.to_vec();
        logits.push(0.0);
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let norm: f64 = exps.iter().sum();
        active
            .iter()
            .zip(&exps)
            .map(|(v, e)| v * v / (total_mean_photons * e / norm))
            .sum::<f64>()
    };
    let start = vec![0.0; active.len() - 1];
    let step = vec![0.5; active.len() - 1];
    let opts = NelderMeadOptions {
        max_evaluations: 10_000,
        f_tol: 1e-15,
        x_tol: 1e-10,
    };
    Ok(nelder_mead(cost, &start, &step, &opts).value)
}

/// `Tr(F_Q^-1)` of the single-photon state `gamma |ref> + delta sum_i |e_i>`
/// over `d` phases with weight `delta^2 = p` per arm.
fn single_photon_qcrb(d: usize, p: f64) -> f64 {
    let basis = enumerate_basis(d + 1, 1);
    // basis order: |10..0> is the reference, then arms 1..d
    let mut amps = vec![Complex64::new(p.sqrt(), 0.0); d + 1];
    amps[0] = Complex64::new((1.0 - d as f64 * p).max(0.0).sqrt(), 0.0);
    let Ok(state) = PureState::new(basis, amps) else {
        return f64::INFINITY;
    };
    let arms: Vec<usize> = (1..=d).collect();
    let qfi = qfi_for_generators(&state, &arms);
    match qfi.try_inverse() {
        Some(inv) if inv.iter().all(|x| x.is_finite()) => {
            let tr = inv.trace();
            if tr > 0.0 {
                tr
            } else {
                f64::INFINITY
            }
        }
        _ => f64::INFINITY,
    }
}

/// Best `Tr(F_Q^-1)` reachable with `n_probes` optimal single photons spread
/// over a reference and `d` phase arms, by 1-D optimization of the arm weight.
pub fn optimal_single_photon_bound(d: usize, n_probes: usize) -> Result<f64> {
    if d == 0 || n_probes == 0 {
        return Err(Error::InvalidArgument(
            "need at least one phase and one probe".into(),
        ));
    }
    let upper = 1.0 / d as f64;
    let (_, value) = golden_section(|p| single_photon_qcrb(d, p), 1e-9, upper - 1e-9, 1e-12);
    Ok(value / n_probes as f64)
}

/// Closed form `d (1 + sqrt d)^2 / (4 n_probes)`.
pub fn optimal_single_photon_bound_closed_form(d: usize, n_probes: usize) -> f64 {
    let df = d as f64;
    df * (1.0 + df.sqrt()).powi(2) / (4.0 * n_probes as f64)
}

/// `Tr(F^-1)` over a plane of the torus with one phase held fixed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub phi_a: f64,
    pub phi_b: f64,
    pub phi_d: f64,
    pub trace_fi_inv: f64,
}

/// Index of the held phase: 0 = A, 1 = B, 2 = D.
pub fn slice_scan(
    model: &DeviceModel,
    statistics: PhotonStatistics,
    fixed_axis: usize,
    fixed_value: f64,
    grid_points: usize,
) -> Result<Vec<ScanPoint>> {
    if fixed_axis > 2 {
        return Err(Error::InvalidArgument(format!(
            "fixed axis must be 0, 1 or 2, got {fixed_axis}"
        )));
    }
    let engine = model
        .with_statistics(statistics)
        .engine(&crate::device::default_input())?;
    let step = TAU / grid_points as f64;
    let free: Vec<usize> = (0..3).filter(|&k| k != fixed_axis).collect();
    let points: Vec<PhaseTriple> = (0..grid_points * grid_points)
        .map(|idx| {
            let mut phi = [0.0; 3];
            phi[fixed_axis] = fixed_value;
            phi[free[0]] = (idx / grid_points) as f64 * step;
            phi[free[1]] = (idx % grid_points) as f64 * step;
            phi
        })
        .collect();
    Ok(points
        .par_iter()
        .map(|phi| ScanPoint {
            phi_a: phi[0],
            phi_b: phi[1],
            phi_d: phi[2],
            trace_fi_inv: crb_trace(&engine, phi),
        })
        .collect())
}
