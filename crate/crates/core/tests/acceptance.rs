//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `cargo test --test acceptance` runs all of them; extra arguments that parse
//! as numbers restrict the run to those criteria, e.g. `-- 1 2 3`. Failures
//! are reported but only fail the process when `QMETRO_ACCEPTANCE_STRICT=1`.

use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Matrix3};
use num_complex::Complex64;
use qmetro::adaptive::{run_campaign, run_estimation, CampaignConfig, ControlStrategy, RunRow, NU_MAX};
use qmetro::calibration::{fit_model, generate_characterization, perturbed_guess, FitOptions};
use qmetro::device::{default_input, quarter_unitary, DeviceModel, PhotonStatistics, QuarterParams, DEFAULT_DEVICE_SEED};
use qmetro::estimation_theory::{
    crb_trace, fi_matrix, fi_matrix_analytic, min_crb_search, optimal_combination, optimal_single_photon_bound,
    qfi_pure, sequential_bound, trace_inverse,
};
use qmetro::linear_optics::{evolve, permanent, ModeOccupation};
use qmetro::smc::init_prior;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn probe_state() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = FRAC_1_SQRT_2 / 2.0;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let phi1 = rng.random_range(0.0..TAU);
        let phi2 = rng.random_range(0.0..TAU);
        let q = QuarterParams {
            phase_hi: phi2,
            phase_lo: phi1,
            ..QuarterParams::ideal()
        };
        let probe = evolve(&quarter_unitary(&q).unwrap(), &default_input()).unwrap();
        let e = Complex64::from_polar(1.0, -2.0 * phi1);
        let expected = [
            ([2, 0, 0, 0], c(0.0, b)),
            ([0, 2, 0, 0], c(0.0, -b)),
            ([0, 0, 2, 0], c(0.0, b) * e),
            ([0, 0, 0, 2], c(0.0, -b) * e),
            ([1, 1, 0, 0], c(-0.5, 0.0)),
            ([0, 0, 1, 1], c(-0.5, 0.0) * e),
            ([1, 0, 1, 0], c(0.0, 0.0)),
            ([1, 0, 0, 1], c(0.0, 0.0)),
            ([0, 1, 1, 0], c(0.0, 0.0)),
            ([0, 1, 0, 1], c(0.0, 0.0)),
        ];
        // align the global phase on the |1100> amplitude
        let anchor = probe.amplitude(&ModeOccupation::from([1, 1, 0, 0])) / c(-0.5, 0.0);
        let global = anchor / anchor.norm();
        for (occ, amp) in expected {
            let got = probe.amplitude(&ModeOccupation::from(occ));
            worst = worst.max((got - amp * global).norm());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-10 && elapsed < Duration::from_secs(1),
        format!("max amplitude error {worst:.1e} over 20 phases, {elapsed:.2?}"),
    )
}

fn qfi() -> Outcome {
    let probe = evolve(&quarter_unitary(&QuarterParams::ideal()).unwrap(), &default_input()).unwrap();
    let q = qfi_pure(&probe).unwrap();
    let expected = Matrix3::new(2.0, 0.0, -1.0, 0.0, 2.0, -1.0, -1.0, -1.0, 2.0);
    let err = (q - expected).abs().max();
    let trace = trace_inverse(&q);
    outcome(
        err <= 1e-10 && (trace - 2.5).abs() <= 1e-10,
        format!("max entry error {err:.1e}, Tr(F_Q^-1) = {trace:.12}"),
    )
}

fn bound_table() -> Outcome {
    let ideal = DeviceModel::ideal();
    let start = Instant::now();
    let ind = min_crb_search(&ideal, PhotonStatistics::Indistinguishable, 30).unwrap().min_trace;
    let elapsed = start.elapsed();
    let dist = min_crb_search(&ideal, PhotonStatistics::Distinguishable, 30).unwrap().min_trace;
    let single = optimal_single_photon_bound(3, 2).unwrap();
    let probe = evolve(&quarter_unitary(&QuarterParams::ideal()).unwrap(), &default_input()).unwrap();
    let comb = optimal_combination(&qfi_pure(&probe).unwrap()).value;
    let seq = sequential_bound(&NU_MAX, 2.0).unwrap();
    let pass = (ind - 2.5).abs() <= 5e-3
        && (dist - 3.0).abs() <= 5e-3
        && (single - 2.799).abs() <= 1e-3
        && (comb - 0.2929).abs() <= 5e-4
        && (seq - 1.4571).abs() <= 1e-4
        && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "ind {ind:.4}, dist {dist:.4}, single-photon {single:.4}, nu_max {comb:.5}, sequential {seq:.5}, search {elapsed:.2?}"
        ),
    )
}

fn crb_above_qcrb() -> Outcome {
    let engine = DeviceModel::ideal().engine(&default_input()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut lowest = f64::INFINITY;
    for _ in 0..10_000 {
        let phi: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..TAU));
        lowest = lowest.min(crb_trace(&engine, &phi));
    }
    outcome(lowest >= 2.5 - 1e-6, format!("lowest Tr(F^-1) over 10^4 triples {lowest:.6}"))
}

fn perturbed_minimum() -> Outcome {
    let model = DeviceModel::perturbed(DEFAULT_DEVICE_SEED);
    let min = min_crb_search(&model, PhotonStatistics::AsModeled, 30).unwrap().min_trace;
    outcome(
        min > 2.5 && min < 2.8,
        format!("device seed {DEFAULT_DEVICE_SEED}: min Tr(F^-1) {min:.4}"),
    )
}

const BAND: std::ops::RangeInclusive<usize> = 50..=100;

/// Per-run average of `M * value(row)` over the band, one entry per run.
fn band_averages(rows: &[RunRow], value: impl Fn(&RunRow) -> f64) -> Vec<f64> {
    let mut sums: Vec<(usize, usize, f64, usize)> = Vec::new();
    for r in rows.iter().filter(|r| BAND.contains(&r.m)) {
        match sums.last_mut() {
            Some(s) if s.0 == r.triplet_id && s.1 == r.repetition => {
                s.2 += r.m as f64 * value(r);
                s.3 += 1;
            }
            _ => sums.push((r.triplet_id, r.repetition, r.m as f64 * value(r), 1)),
        }
    }
    sums.iter().map(|s| s.2 / s.3 as f64).collect()
}

fn mean_and_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn campaigns() -> (Outcome, Outcome) {
    let engine = DeviceModel::ideal().engine(&default_input()).unwrap();
    let config = CampaignConfig::default();
    let start = Instant::now();
    let adaptive = run_campaign(&engine, &config).unwrap();
    let elapsed = start.elapsed();
    let mut zero_config = config;
    zero_config.estimation.strategy = ControlStrategy::Zero;
    let zero = run_campaign(&engine, &zero_config).unwrap();

    let band: Vec<f64> = adaptive.curve.iter().filter(|p| BAND.contains(&p.m)).map(|p| p.m as f64 * p.mean_loss).collect();
    let band_mean = band.iter().sum::<f64>() / band.len() as f64;
    let at = |rows: &[RunRow], m: usize| -> Vec<f64> { rows.iter().filter(|r| r.m == m).map(|r| r.quad_loss).collect() };
    let diffs: Vec<f64> = at(&zero.rows, 50).iter().zip(at(&adaptive.rows, 50)).map(|(z, a)| z - a).collect();
    let (diff, diff_err) = mean_and_error(&diffs);
    let loss = outcome(
        (2.3..=3.2).contains(&band_mean) && diff > 3.0 * diff_err,
        format!(
            "band mean M*loss {band_mean:.3}, zero-control minus adaptive at M=50 {diff:.4} +- {diff_err:.4} ({} runs, {elapsed:.0?})",
            diffs.len()
        ),
    );

    let (comb, comb_err) = mean_and_error(&band_averages(&adaptive.rows, |r| r.comb_loss));
    let bound = sequential_bound(&NU_MAX, 2.0).unwrap();
    let combination = outcome(
        comb + 3.0 * comb_err < bound,
        format!("band mean M*comb loss {comb:.3} +- {comb_err:.3}, bound {bound:.4}"),
    );
    (loss, combination)
}

fn permutation_permanent(a: &DMatrix<Complex64>) -> Complex64 {
    fn go(a: &DMatrix<Complex64>, row: usize, used: &mut Vec<bool>) -> Complex64 {
        if row == a.nrows() {
            return c(1.0, 0.0);
        }
        let mut total = c(0.0, 0.0);
        for col in 0..a.ncols() {
            if !used[col] {
                used[col] = true;
                total += a[(row, col)] * go(a, row + 1, used);
                used[col] = false;
            }
        }
        total
    }
    go(a, 0, &mut vec![false; a.ncols()])
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut notes = Vec::new();

    let mut perm_err: f64 = 0.0;
    for k in 1..=5 {
        for _ in 0..20 {
            let a = DMatrix::from_fn(k, k, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let (fast, slow) = (permanent(&a).unwrap(), permutation_permanent(&a));
            perm_err = perm_err.max((fast - slow).norm() / slow.norm().max(1.0));
        }
    }
    let perm_ok = perm_err <= 1e-12;
    notes.push(format!("permanent {perm_err:.1e}"));

    let mut fi_err: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..100 {
        let engine = DeviceModel::perturbed(seed).engine(&default_input()).unwrap();
        let phi: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..TAU));
        if engine.probabilities(&phi).iter().any(|p| *p < 1e-4) {
            continue;
        }
        let fd = fi_matrix(|x| engine.probabilities(x), &phi).unwrap();
        let an = fi_matrix_analytic(&engine, &phi);
        fi_err = fi_err.max((fd - an).abs().max() / an.abs().max());
        checked += 1;
    }
    let fi_ok = fi_err <= 1e-5 && checked >= 80;
    notes.push(format!("FI finite difference {fi_err:.1e} on {checked} devices"));

    let engine = DeviceModel::perturbed(DEFAULT_DEVICE_SEED).engine(&default_input()).unwrap();
    let mut estimation = CampaignConfig::default().estimation;
    estimation.smc.n_particles = 500;
    let run = || serde_json::to_string(&run_estimation(&engine, &[1.0, 2.0, 0.5], 20, &estimation, 42).unwrap()).unwrap();
    let update = || {
        let mut cloud = init_prior(&[PI / 2.0; 3], PI, 1000, 5).unwrap();
        for (k, outcome) in [0usize, 3, 7, 9, 2].into_iter().enumerate() {
            cloud.bayes_update(outcome, &engine, &[0.3 * k as f64, 0.1, 0.0]).unwrap();
            cloud.resample(0.98).unwrap();
        }
        let s = cloud.snapshot();
        s.positions.iter().flatten().chain(&s.weights).map(|x| x.to_bits()).collect::<Vec<u64>>()
    };
    let smc_ok = run() == run() && update() == update();
    notes.push(format!("SMC determinism {}", if smc_ok { "ok" } else { "broken" }));

    let truth = DeviceModel::perturbed(DEFAULT_DEVICE_SEED);
    let data = generate_characterization(&truth, 100_000, 11).unwrap();
    let fit = fit_model(&data, &perturbed_guess(&truth, 0.1, 12), &FitOptions::default()).unwrap();
    let alpha_err = (0..3)
        .map(|i| (fit.model.thermal.alpha[i][i] / truth.thermal.alpha[i][i] - 1.0).abs())
        .fold(0.0, f64::max);
    let v_err = (fit.model.visibility - truth.visibility).abs();
    let cal_ok = alpha_err < 0.02 && v_err < 0.01;
    notes.push(format!("calibration alpha {:.2}%, visibility {v_err:.4}", 100.0 * alpha_err));

    outcome(perm_ok && fi_ok && smc_ok && cal_ok, notes.join(", "))
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let single: [(usize, &str, fn() -> Outcome); 6] = [
        (1, "probe state", probe_state),
        (2, "quantum Fisher information", qfi),
        (3, "bound table", bound_table),
        (4, "CRB above QCRB", crb_above_qcrb),
        (5, "perturbed device minimum", perturbed_minimum),
        (8, "oracle suites", oracles),
    ];
    for (n, name, check) in single {
        if wanted(n) {
            results.push((n, name, check()));
        }
    }
    if wanted(6) || wanted(7) {
        let (loss, comb) = campaigns();
        if wanted(6) {
            results.push((6, "adaptive campaign loss", loss));
        }
        if wanted(7) {
            results.push((7, "linear combination loss", comb));
        }
    }
    results.sort_by_key(|r| r.0);
    for (n, name, o) in &results {
        println!("criterion {n} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    let strict = std::env::var("QMETRO_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed == 0 || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
