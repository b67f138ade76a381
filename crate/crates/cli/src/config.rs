use std::path::{Path, PathBuf};

use qmetro::adaptive::{CampaignConfig, ControlStrategy, EstimationConfig};
use qmetro::calibration::{FitMethod, FitSubset};
use qmetro::device::{DeviceModel, PhotonStatistics};
use qmetro::smc::SmcConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeviceSpec {
    Ideal,
    Perturbed { seed: u64 },
    /// A `DeviceModel` JSON document.
    File { path: PathBuf },
}

impl Default for DeviceSpec {
    fn default() -> Self {
        DeviceSpec::Ideal
    }
}

impl DeviceSpec {
    pub fn load(&self) -> Result<DeviceModel, CliError> {
        let model = match self {
            DeviceSpec::Ideal => DeviceModel::ideal(),
            DeviceSpec::Perturbed { seed } => DeviceModel::perturbed(*seed),
            DeviceSpec::File { path } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read device file {}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("invalid device file {}: {e}", path.display())))?
            }
        };
        model
            .validate()
            .map_err(|e| CliError::Config(format!("invalid device: {e}")))?;
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode {
    Indistinguishable,
    Distinguishable,
    /// Use the device's own visibility.
    AsModeled,
    Visibility { value: f64 },
}

impl Default for Mode {
    fn default() -> Self {
        Mode::Indistinguishable
    }
}

impl Mode {
    pub fn apply(&self, model: &DeviceModel) -> Result<DeviceModel, CliError> {
        Ok(match self {
            Mode::Indistinguishable => model.with_statistics(PhotonStatistics::Indistinguishable),
            Mode::Distinguishable => model.with_statistics(PhotonStatistics::Distinguishable),
            Mode::AsModeled => model.clone(),
            Mode::Visibility { value } => {
                if !(0.0..=1.0).contains(value) {
                    return Err(CliError::Config(format!("visibility must lie in [0, 1], got {value}")));
                }
                let mut m = model.clone();
                m.visibility = *value;
                m
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundsSettings {
    /// Points per axis of the minimum search grid.
    pub grid_points: usize,
    /// Points per axis of each slice.
    pub slice_grid: usize,
    pub density_samples: usize,
    pub density_threshold: f64,
}

impl Default for BoundsSettings {
    fn default() -> Self {
        Self {
            grid_points: 30,
            slice_grid: 60,
            density_samples: 100_000,
            density_threshold: 2.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignSettings {
    pub n_triplets: usize,
    pub repetitions: usize,
    pub probes: usize,
    pub truth_inset: f64,
    pub prior_width: f64,
    /// Also run the zero-control baseline on the same seeds.
    pub baseline: bool,
}

impl Default for CampaignSettings {
    fn default() -> Self {
        let c = CampaignConfig::default();
        Self {
            n_triplets: c.n_triplets,
            repetitions: c.repetitions,
            probes: c.probes,
            truth_inset: c.truth_inset,
            prior_width: c.estimation.prior_width,
            baseline: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSettings {
    pub shots: u64,
    /// Relative spread of the initial guess around the truth.
    pub initial_spread: f64,
    pub starts: usize,
    pub start_spread: f64,
    pub max_iterations: usize,
    pub method: FitMethod,
    pub subset: FitSubset,
    /// Every `holdout_every`-th setting is held out of the fit; 0 disables.
    pub holdout_every: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            shots: 100_000,
            initial_spread: 0.1,
            starts: 5,
            start_spread: 0.05,
            max_iterations: 200,
            method: FitMethod::FisherScoring,
            subset: FitSubset::default(),
            holdout_every: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub device: DeviceSpec,
    pub mode: Mode,
    pub smc: SmcConfig,
    pub strategy: ControlStrategy,
    pub campaign: CampaignSettings,
    pub bounds: BoundsSettings,
    pub calibration: CalibrationSettings,
    pub out: PathBuf,
    pub seed: u64,
    /// Worker threads; `None` uses every available core.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            device: DeviceSpec::default(),
            mode: Mode::default(),
            smc: SmcConfig::default(),
            strategy: ControlStrategy::default(),
            campaign: CampaignSettings::default(),
            bounds: BoundsSettings::default(),
            calibration: CalibrationSettings::default(),
            out: PathBuf::from("out"),
            seed: CampaignConfig::default().seed,
            threads: None,
        }
    }
}

impl RunConfig {
    /// Reads a config file, or the `config` field of a manifest.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
        let value = match value {
            serde_json::Value::Object(mut map) if map.contains_key("manifest_version") => {
                map.remove("config").unwrap_or(serde_json::Value::Null)
            }
            other => other,
        };
        serde_json::from_value(value).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        self.smc.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.bounds.grid_points < 20 {
            return bad(format!("bounds.grid_points must be at least 20, got {}", self.bounds.grid_points));
        }
        if self.bounds.slice_grid == 0 {
            return bad("bounds.slice_grid must be positive".into());
        }
        if self.bounds.density_samples < 10_000 {
            return bad(format!(
                "bounds.density_samples must be at least 10000, got {}",
                self.bounds.density_samples
            ));
        }
        if !(self.campaign.prior_width > 0.0) || !(self.campaign.truth_inset >= 0.0) {
            return bad("campaign.prior_width must be positive and truth_inset non-negative".into());
        }
        if self.campaign.prior_width / 2.0 < self.campaign.truth_inset {
            return bad("campaign.truth_inset leaves no room inside the prior".into());
        }
        if let ControlStrategy::ExpectedVariance { local_width, .. } = self.strategy {
            if !(local_width >= 0.0) {
                return bad(format!("strategy.local_width must be non-negative, got {local_width}"));
            }
        }
        if self.calibration.shots == 0 {
            return bad("calibration.shots must be at least 1".into());
        }
        if !(self.calibration.initial_spread >= 0.0 && self.calibration.start_spread >= 0.0) {
            return bad("calibration spreads must be non-negative".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        Ok(())
    }

    pub fn campaign_config(&self, strategy: ControlStrategy) -> CampaignConfig {
        CampaignConfig {
            n_triplets: self.campaign.n_triplets,
            repetitions: self.campaign.repetitions,
            probes: self.campaign.probes,
            seed: self.seed,
            truth_inset: self.campaign.truth_inset,
            estimation: EstimationConfig {
                smc: self.smc,
                strategy,
                prior_width: self.campaign.prior_width,
                ..EstimationConfig::default()
            },
        }
    }
}
