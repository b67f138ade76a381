use qmetro::adaptive::{run_campaign, write_rows_csv, CampaignResult, ControlStrategy, CurvePoint, RunRow};
use qmetro::calibration::{
    fit_model, fit_report, free_parameter_count, generate_characterization, perturbed_guess, FitOptions, FitReport,
    FitResult, LOW_STATISTICS_SHOTS,
};
use qmetro::device::{default_input, DeviceModel, PhotonStatistics};
use qmetro::estimation_theory::{
    min_crb_search, optimal_combination, optimal_single_photon_bound, probe_state, qfi_pure, sequential_bound,
    slice_scan, threshold_density, trace_inverse, CrbMinimum, DensityEstimate,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{sha256_hex, OutputDir};

/// Photons per probe, the resource count for the comparison bounds.
const PHOTONS_PER_PROBE: usize = 2;
const PHASES: usize = 3;

fn device_hash(model: &DeviceModel) -> String {
    sha256_hex(serde_json::to_string(model).expect("device serializes").as_bytes())
}

#[derive(Debug, Serialize)]
struct BoundsSummary {
    qfi: [[f64; 3]; 3],
    qcrb_trace: f64,
    /// Minimum of `Tr(F^-1)` for the configured photon statistics.
    crb_min: CrbMinimum,
    ind_min: f64,
    dist_min: f64,
    classical_opt: f64,
    numax: [f64; 3],
    numax_bound: f64,
    sequential: f64,
    density: DensityEstimate,
}

pub fn bounds(config: &RunConfig) -> Result<(), CliError> {
    let device = config.device.load()?;
    let model = config.mode.apply(&device)?;
    let grid = config.bounds.grid_points;

    let pure = device.with_statistics(PhotonStatistics::Indistinguishable);
    let qfi = qfi_pure(&probe_state(&pure, &default_input())?)?;
    let combination = optimal_combination(&qfi);
    let crb_min = min_crb_search(&model, PhotonStatistics::AsModeled, grid)?;
    let summary = BoundsSummary {
        qfi: std::array::from_fn(|i| std::array::from_fn(|j| qfi[(i, j)])),
        qcrb_trace: trace_inverse(&qfi),
        ind_min: min_crb_search(&device, PhotonStatistics::Indistinguishable, grid)?.min_trace,
        dist_min: min_crb_search(&device, PhotonStatistics::Distinguishable, grid)?.min_trace,
        classical_opt: optimal_single_photon_bound(PHASES, PHOTONS_PER_PROBE)?,
        numax: combination.nu,
        numax_bound: combination.value,
        sequential: sequential_bound(&combination.nu, PHOTONS_PER_PROBE as f64)?,
        density: threshold_density(
            &model,
            PhotonStatistics::AsModeled,
            config.bounds.density_threshold,
            config.bounds.density_samples,
            config.seed,
        )?,
        crb_min,
    };

    let mut out = OutputDir::create(&config.out)?;
    out.write_json("bounds.json", &summary)?;
    // slices through the best point, one per held phase
    let best = summary.crb_min.argmins.first().copied().unwrap_or([0.0; 3]);
    let header = ["phi_a", "phi_b", "phi_d", "trace_fi_inv"];
    for (axis, name) in [(2, "slice_fixed_d.csv"), (1, "slice_fixed_b.csv"), (0, "slice_fixed_a.csv")] {
        let scan = slice_scan(&model, PhotonStatistics::AsModeled, axis, best[axis], config.bounds.slice_grid)?;
        out.write_csv(name, &scan, &header)?;
    }
    out.finish("bounds", config, &device_hash(&model))
}

#[derive(Debug, Serialize)]
struct AggregateRow {
    #[serde(rename = "M")]
    m: usize,
    mean_loss: f64,
    m_loss: f64,
    std_loss: f64,
    mean_comb_loss: f64,
    m_comb_loss: f64,
    std_comb_loss: f64,
    mean_trace_cov: f64,
    m_trace_cov: f64,
    runs: usize,
}

const AGGREGATE_HEADER: [&str; 10] = [
    "M",
    "mean_loss",
    "M_loss",
    "std_loss",
    "mean_comb_loss",
    "M_comb_loss",
    "std_comb_loss",
    "mean_trace_cov",
    "M_trace_cov",
    "runs",
];

fn aggregate_rows(curve: &[CurvePoint]) -> Vec<AggregateRow> {
    curve
        .iter()
        .map(|c| {
            let m = c.m as f64;
            AggregateRow {
                m: c.m,
                mean_loss: c.mean_loss,
                m_loss: m * c.mean_loss,
                std_loss: c.std_loss,
                mean_comb_loss: c.mean_comb_loss,
                m_comb_loss: m * c.mean_comb_loss,
                std_comb_loss: c.std_comb_loss,
                mean_trace_cov: c.mean_trace_cov,
                m_trace_cov: m * c.mean_trace_cov,
                runs: c.runs,
            }
        })
        .collect()
}

/// Mean of `M * loss` over the probe counts in `[lo, hi]`.
fn band_mean(curve: &[CurvePoint], lo: usize, hi: usize, f: impl Fn(&CurvePoint) -> f64) -> Option<f64> {
    let band: Vec<f64> = curve
        .iter()
        .filter(|c| (lo..=hi).contains(&c.m))
        .map(|c| c.m as f64 * f(c))
        .collect();
    (!band.is_empty()).then(|| band.iter().sum::<f64>() / band.len() as f64)
}

#[derive(Debug, Serialize)]
struct PairedComparison {
    m: usize,
    /// Mean of `loss_zero - loss_adaptive` over paired runs.
    mean_difference: f64,
    std_error: f64,
    z: f64,
    pairs: usize,
}

fn paired_at(adaptive: &[RunRow], baseline: &[RunRow], m: usize) -> Option<PairedComparison> {
    let pick = |rows: &[RunRow]| -> Vec<f64> { rows.iter().filter(|r| r.m == m).map(|r| r.quad_loss).collect() };
    let (a, b) = (pick(adaptive), pick(baseline));
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let d: Vec<f64> = b.iter().zip(&a).map(|(z, x)| z - x).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    Some(PairedComparison {
        m,
        mean_difference: mean,
        std_error: se,
        z: if se > 0.0 { mean / se } else { f64::INFINITY },
        pairs: d.len(),
    })
}

#[derive(Debug, Serialize)]
struct EstimateSummary {
    runs: usize,
    band_m_loss: Option<f64>,
    band_m_comb_loss: Option<f64>,
    final_m_loss: Option<f64>,
    baseline_band_m_loss: Option<f64>,
    paired_at_50: Option<PairedComparison>,
}

#[derive(Debug, Serialize)]
struct TripletRow {
    triplet_id: usize,
    phi_a: f64,
    phi_b: f64,
    phi_d: f64,
}

fn write_campaign(out: &mut OutputDir, r: &CampaignResult, suffix: &str) -> Result<(), CliError> {
    out.write_with(&format!("trajectories{suffix}.csv"), |w| write_rows_csv(&r.rows, w))?;
    out.write_csv(&format!("aggregate{suffix}.csv"), &aggregate_rows(&r.curve), &AGGREGATE_HEADER)
}

pub fn estimate(config: &RunConfig) -> Result<(), CliError> {
    let model = config.mode.apply(&config.device.load()?)?;
    let engine = model.engine(&default_input())?;
    let adaptive = run_campaign(&engine, &config.campaign_config(config.strategy))?;
    let baseline = if config.campaign.baseline {
        Some(run_campaign(&engine, &config.campaign_config(ControlStrategy::Zero))?)
    } else {
        None
    };

    let mut out = OutputDir::create(&config.out)?;
    let triplets: Vec<TripletRow> = adaptive
        .triplets
        .iter()
        .enumerate()
        .map(|(i, t)| TripletRow {
            triplet_id: i,
            phi_a: t[0],
            phi_b: t[1],
            phi_d: t[2],
        })
        .collect();
    out.write_csv("triplets.csv", &triplets, &["triplet_id", "phi_a", "phi_b", "phi_d"])?;
    write_campaign(&mut out, &adaptive, "")?;
    if let Some(b) = &baseline {
        write_campaign(&mut out, b, "_zero")?;
    }
    let probes = config.campaign.probes;
    let summary = EstimateSummary {
        runs: config.campaign.n_triplets * config.campaign.repetitions,
        band_m_loss: band_mean(&adaptive.curve, 50, 100, |c| c.mean_loss),
        band_m_comb_loss: band_mean(&adaptive.curve, 50, 100, |c| c.mean_comb_loss),
        final_m_loss: band_mean(&adaptive.curve, probes, probes, |c| c.mean_loss),
        baseline_band_m_loss: baseline
            .as_ref()
            .and_then(|b| band_mean(&b.curve, 50, 100, |c| c.mean_loss)),
        paired_at_50: baseline.as_ref().and_then(|b| paired_at(&adaptive.rows, &b.rows, 50)),
    };
    out.write_json("summary.json", &summary)?;
    out.finish("estimate", config, &device_hash(&model))
}

#[derive(Debug, Serialize)]
struct ChiSquare {
    chi_square: f64,
    degrees_of_freedom: usize,
    reduced_chi_square: Option<f64>,
    settings: usize,
}

impl From<&FitReport> for ChiSquare {
    fn from(r: &FitReport) -> Self {
        Self {
            chi_square: r.chi_square,
            degrees_of_freedom: r.degrees_of_freedom,
            reduced_chi_square: r.reduced_chi_square,
            settings: r.residuals.len(),
        }
    }
}

#[derive(Debug, Serialize)]
struct Recovery {
    /// `fitted / true - 1` for each diagonal thermal coefficient.
    alpha_diagonal_relative_error: [f64; 3],
    visibility_error: f64,
}

#[derive(Debug, Serialize)]
struct CalibrationSummary {
    converged: bool,
    low_statistics: bool,
    objective: f64,
    start_objectives: Vec<f64>,
    flat_parameters: Vec<String>,
    fit: ChiSquare,
    holdout: ChiSquare,
    recovery: Recovery,
}

#[derive(Debug, Serialize)]
struct ResidualRow {
    split: &'static str,
    p_a: f64,
    p_b: f64,
    p_d: f64,
    chi_square: f64,
    r: [f64; 10],
}

fn residual_rows<'a>(report: &'a FitReport, split: &'static str) -> impl Iterator<Item = ResidualRow> + 'a {
    report.residuals.iter().map(move |s| ResidualRow {
        split,
        p_a: s.powers[0],
        p_b: s.powers[1],
        p_d: s.powers[2],
        chi_square: s.chi_square,
        r: s.pearson,
    })
}

pub fn calibrate(config: &RunConfig) -> Result<(), CliError> {
    let settings = &config.calibration;
    let truth = config.mode.apply(&config.device.load()?)?;
    let data = generate_characterization(&truth, settings.shots, config.seed)?;
    let (train, holdout) = data.split_holdout(settings.holdout_every);
    let guess = perturbed_guess(&truth, settings.initial_spread, config.seed.wrapping_add(1));
    let options = FitOptions {
        subset: settings.subset,
        method: settings.method,
        starts: settings.starts,
        start_spread: settings.start_spread,
        max_iterations: settings.max_iterations,
        seed: config.seed,
    };
    let fit: FitResult = fit_model(&train, &guess, &options)?;
    if fit.low_statistics {
        eprintln!(
            "warning: low statistics, {} shots per setting is below {LOW_STATISTICS_SHOTS}",
            train.min_shots()
        );
    }
    if !fit.converged {
        eprintln!("warning: fit did not converge within {} iterations", settings.max_iterations);
    }
    let fit_chi = fit_report(&fit.model, &train, free_parameter_count(&settings.subset))?;
    let hold_chi = fit_report(&fit.model, &holdout, 0)?;
    let summary = CalibrationSummary {
        converged: fit.converged,
        low_statistics: fit.low_statistics,
        objective: fit.objective,
        start_objectives: fit.start_objectives.clone(),
        flat_parameters: fit.flat_parameters.clone(),
        fit: (&fit_chi).into(),
        holdout: (&hold_chi).into(),
        recovery: Recovery {
            alpha_diagonal_relative_error: std::array::from_fn(|i| {
                fit.model.thermal.alpha[i][i] / truth.thermal.alpha[i][i] - 1.0
            }),
            visibility_error: fit.model.visibility - truth.visibility,
        },
    };

    let mut out = OutputDir::create(&config.out)?;
    out.write_with("characterization.csv", |w| data.write_csv(w))?;
    out.write_json("truth_model.json", &truth)?;
    out.write_json("fitted_model.json", &fit)?;
    let residuals: Vec<ResidualRow> = residual_rows(&fit_chi, "fit")
        .chain(residual_rows(&hold_chi, "holdout"))
        .collect();
    let mut header = vec!["split".to_string(), "p_a".into(), "p_b".into(), "p_d".into(), "chi_square".into()];
    header.extend((0..10).map(|k| format!("r{k}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.write_csv("residuals.csv", &residuals, &header)?;
    out.write_json("calibration_report.json", &summary)?;
    out.finish("calibrate", config, &device_hash(&truth))
}
