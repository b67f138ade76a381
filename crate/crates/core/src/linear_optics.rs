//! Fock-space evolution of photons through passive multiport unitaries.
//!
//! Matrices are indexed `[output, input]` and describe how annihilation
//! operators of the input modes expand over the outputs,
//! `a_in[j] = sum_i U[i, j] a_out[i]`. Output amplitudes are then
//! `<t|psi> = conj(perm(U[t, s])) / sqrt(prod s_i! t_i!)`, where `U[t, s]`
//! repeats row `i` `t_i` times and column `j` `s_j` times. Photon statistics do
//! not depend on the choice of conjugation; amplitude phases do, and this one
//! reproduces the interferometer's textbook probe state from its quarter
//! matrix.

use std::collections::HashMap;
use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNITARITY_TOL: f64 = 1e-10;

/// Photon counts per optical mode, e.g. `|0011>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModeOccupation(Vec<usize>);

impl ModeOccupation {
    pub fn new(occ: Vec<usize>) -> Self {
        Self(occ)
    }

    pub fn modes(&self) -> usize {
        self.0.len()
    }

    pub fn photons(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn counts(&self) -> &[usize] {
        &self.0
    }

    /// Mode index of every photon, with repetition (`|0210>` -> `[1, 1, 2]`).
    pub fn photon_modes(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .flat_map(|(mode, &count)| std::iter::repeat_n(mode, count))
            .collect()
    }

    fn factorial_product(&self) -> f64 {
        self.0.iter().map(|&k| factorial(k)).product()
    }
}

impl From<&[usize]> for ModeOccupation {
    fn from(value: &[usize]) -> Self {
        Self(value.to_vec())
    }
}

impl<const N: usize> From<[usize; N]> for ModeOccupation {
    fn from(value: [usize; N]) -> Self {
        Self(value.to_vec())
    }
}

impl fmt::Display for ModeOccupation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "|")?;
        for (i, k) in self.0.iter().enumerate() {
            // multi-digit counts need a separator to stay unambiguous
            if i > 0 && *k >= 10 {
                write!(f, ",")?;
            }
            write!(f, "{k}")?;
        }
        write!(f, ">")
    }
}

/// All occupations of `photons` photons over `modes` modes, ordered
/// lexicographically descending (`|2000>, |1100>, ..., |0002>`).
#[derive(Clone, Debug, PartialEq)]
pub struct FockBasis {
    modes: usize,
    photons: usize,
    states: Vec<ModeOccupation>,
    index: HashMap<ModeOccupation, usize>,
}

impl FockBasis {
    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn photons(&self) -> usize {
        self.photons
    }

    pub fn states(&self) -> &[ModeOccupation] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, occ: &ModeOccupation) -> Option<usize> {
        self.index.get(occ).copied()
    }
}

pub fn enumerate_basis(modes: usize, photons: usize) -> FockBasis {
    assert!(modes >= 1, "a Fock basis needs at least one mode");
    let mut states = Vec::new();
    let mut current = vec![0; modes];
    fill_descending(&mut current, 0, photons, &mut states);
    let index = states
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();
    FockBasis {
        modes,
        photons,
        states,
        index,
    }
}

fn fill_descending(
    current: &mut Vec<usize>,
    mode: usize,
    remaining: usize,
    out: &mut Vec<ModeOccupation>,
) {
    if mode + 1 == current.len() {
        current[mode] = remaining;
        out.push(ModeOccupation(current.clone()));
        return;
    }
    for k in (0..=remaining).rev() {
        current[mode] = k;
        fill_descending(current, mode + 1, remaining - k, out);
    }
}

/// Normalized amplitudes over a [`FockBasis`].
#[derive(Clone, Debug)]
pub struct PureState {
    basis: FockBasis,
    amplitudes: Vec<Complex64>,
}

impl PureState {
    /// Builds a state from raw amplitudes, normalizing them.
    pub fn new(basis: FockBasis, amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.len() != basis.len() {
            return Err(Error::DimensionMismatch {
                expected: basis.len(),
                found: amplitudes.len(),
            });
        }
        let norm = amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::InvalidArgument(
                "state amplitudes have zero or non-finite norm".into(),
            ));
        }
        let amplitudes = amplitudes.into_iter().map(|a| a / norm).collect();
        Ok(Self { basis, amplitudes })
    }

    pub fn basis(&self) -> &FockBasis {
        &self.basis
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn amplitude(&self, occ: &ModeOccupation) -> Complex64 {
        self.basis
            .index_of(occ)
            .map_or(Complex64::new(0.0, 0.0), |i| self.amplitudes[i])
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }
}

/// Square complex matrix with `U^dagger U = 1` checked at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexUnitary {
    matrix: DMatrix<Complex64>,
}

impl ComplexUnitary {
    pub fn new(matrix: DMatrix<Complex64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::NonSquare {
                rows: matrix.nrows(),
                cols: matrix.ncols(),
            });
        }
        let deviation = unitarity_deviation(&matrix);
        if deviation > UNITARITY_TOL {
            return Err(Error::NotUnitary(deviation));
        }
        Ok(Self { matrix })
    }

    /// Skips the unitarity check; callers build products of known unitaries.
    pub(crate) fn from_matrix_unchecked(matrix: DMatrix<Complex64>) -> Self {
        debug_assert!(unitarity_deviation(&matrix) < 1e-8);
        Self { matrix }
    }

    pub fn from_rows(dim: usize, entries: &[Complex64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                found: entries.len(),
            });
        }
        Self::new(DMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn entry(&self, out: usize, input: usize) -> Complex64 {
        self.matrix[(out, input)]
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    /// `self * rhs`: apply `rhs` first.
    pub fn compose(&self, rhs: &ComplexUnitary) -> Result<ComplexUnitary> {
        if self.dim() != rhs.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: rhs.dim(),
            });
        }
        Ok(Self::from_matrix_unchecked(&self.matrix * &rhs.matrix))
    }

    /// Reorders modes: new mode `perm[i]` plays the role of old mode `i`.
    pub fn relabel(&self, perm: &[usize]) -> ComplexUnitary {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(perm[i], perm[j])] = self.matrix[(i, j)];
            }
        }
        Self { matrix: m }
    }
}

fn unitarity_deviation(m: &DMatrix<Complex64>) -> f64 {
    let product = m.adjoint() * m;
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((product[(i, j)] - target).norm());
        }
    }
    worst
}

/// Matrix permanent by Ryser's formula with Gray-code subset order,
/// `O(2^k k)` operations.
pub fn permanent(a: &DMatrix<Complex64>) -> Result<Complex64> {
    if !a.is_square() {
        return Err(Error::NonSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    let k = a.nrows();
    if k == 0 {
        return Ok(Complex64::new(1.0, 0.0));
    }
    if k >= usize::BITS as usize - 1 {
        return Err(Error::InvalidArgument(format!(
            "permanent of a {k}x{k} matrix is out of reach"
        )));
    }
    let zero = Complex64::new(0.0, 0.0);
    let mut row_sums = vec![zero; k];
    let mut total = zero;
    let mut gray_prev = 0usize;
    for step in 1usize..(1 << k) {
        let gray = step ^ (step >> 1);
        let changed = gray ^ gray_prev;
        let col = changed.trailing_zeros() as usize;
        let added = gray & changed != 0;
        for (i, sum) in row_sums.iter_mut().enumerate() {
            if added {
                *sum += a[(i, col)];
            } else {
                *sum -= a[(i, col)];
            }
        }
        let prod = row_sums.iter().fold(Complex64::new(1.0, 0.0), |p, s| p * s);
        if gray.count_ones() % 2 == 1 {
            total -= prod;
        } else {
            total += prod;
        }
        gray_prev = gray;
    }
    if k % 2 == 1 {
        total = -total;
    }
    Ok(total)
}

fn check_dims(u: &ComplexUnitary, input: &ModeOccupation) -> Result<()> {
    if u.dim() != input.modes() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            found: input.modes(),
        });
    }
    Ok(())
}

/// Output state of `input` after the linear-optical network `u`.
pub fn evolve(u: &ComplexUnitary, input: &ModeOccupation) -> Result<PureState> {
    check_dims(u, input)?;
    let basis = enumerate_basis(input.modes(), input.photons());
    let cols = input.photon_modes();
    let n = cols.len();
    let input_norm = input.factorial_product();
    let mut sub = DMatrix::zeros(n, n);
    let mut amplitudes = Vec::with_capacity(basis.len());
    for target in basis.states() {
        let rows = target.photon_modes();
        for (r, &row) in rows.iter().enumerate() {
            for (c, &col) in cols.iter().enumerate() {
                sub[(r, c)] = u.entry(row, col);
            }
        }
        let amp = permanent(&sub)?.conj() / (input_norm * target.factorial_product()).sqrt();
        amplitudes.push(amp);
    }
    PureState::new(basis, amplitudes)
}

pub fn probabilities_indistinguishable(
    u: &ComplexUnitary,
    input: &ModeOccupation,
) -> Result<Vec<f64>> {
    Ok(evolve(u, input)?.probabilities())
}

/// Statistics of two mutually distinguishable photons: each photon is routed
/// independently with probability `|U[out, in]|^2`.
pub fn probabilities_distinguishable(
    u: &ComplexUnitary,
    input: &ModeOccupation,
) -> Result<Vec<f64>> {
    check_dims(u, input)?;
    if input.photons() != 2 {
        return Err(Error::UnsupportedPhotonNumber {
            expected: 2,
            found: input.photons(),
        });
    }
    let m = input.modes();
    let sources = input.photon_modes();
    let basis = enumerate_basis(m, 2);
    let mut probs = vec![0.0; basis.len()];
    let mut occ = vec![0usize; m];
    for o1 in 0..m {
        let p1 = u.entry(o1, sources[0]).norm_sqr();
        for o2 in 0..m {
            let p2 = u.entry(o2, sources[1]).norm_sqr();
            occ.iter_mut().for_each(|k| *k = 0);
            occ[o1] += 1;
            occ[o2] += 1;
            let idx = basis
                .index_of(&ModeOccupation(occ.clone()))
                .expect("two-photon occupation is in the basis");
            probs[idx] += p1 * p2;
        }
    }
    Ok(probs)
}

/// Linear partial-distinguishability model `V p_ind + (1 - V) p_dist`.
pub fn mix_visibility(p_ind: &[f64], p_dist: &[f64], visibility: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&visibility) {
        return Err(Error::VisibilityOutOfRange(visibility));
    }
    if p_ind.len() != p_dist.len() {
        return Err(Error::BasisMismatch);
    }
    let mut mixed: Vec<f64> = p_ind
        .iter()
        .zip(p_dist)
        .map(|(a, b)| visibility * a + (1.0 - visibility) * b)
        .collect();
    let total: f64 = mixed.iter().sum();
    if total > 0.0 {
        mixed.iter_mut().for_each(|p| *p /= total);
    }
    Ok(mixed)
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}
