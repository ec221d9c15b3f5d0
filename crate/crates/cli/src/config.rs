//! Versioned JSON run configuration.
//!
//! Unknown keys are hard errors: silent config typos are the dominant
//! pipeline failure mode. Command-line `--key.path=value` flags override
//! config keys through a dot-path into the JSON document before
//! deserialization, so overrides get the same validation.

use std::path::{Path, PathBuf};

use canopy_ledger::boosting::{GbrConfig, Loss};
use canopy_ledger::carbon::{EmissionConfig, RegressionConfig, ScenarioConfig};
use canopy_ledger::synth::WorldSpec;
use canopy_ledger::{Error, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub version: u32,
    pub run_dir: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 uses the rayon default.
    pub jobs: usize,
    pub world: WorldSpec,
    pub ingest: IngestConfig,
    pub shade: ShadeConfig,
    pub agbd: AgbdConfig,
    pub carbon: CarbonStageConfig,
    pub emissions: EmissionConfig,
    pub zones: ZonesConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            run_dir: PathBuf::from("runs/default"),
            seed: 7,
            jobs: 0,
            world: WorldSpec::default(),
            ingest: IngestConfig::default(),
            shade: ShadeConfig::default(),
            agbd: AgbdConfig::default(),
            carbon: CarbonStageConfig::default(),
            emissions: EmissionConfig::default_two_countries(),
            zones: ZonesConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DateWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateWindow {
    pub fn to_selection(&self) -> Result<canopy_ledger::ingest::SelectionWindow> {
        canopy_ledger::ingest::SelectionWindow::new(self.start, self.end)
    }
}

fn d(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Acquisition windows searched for training imagery.
    pub training_windows: Vec<DateWindow>,
    /// Growing-season window for map production.
    pub map_window: DateWindow,
    pub n_precull: usize,
    pub max_days: i64,
    pub n_keep: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            training_windows: vec![
                DateWindow { start: d("2020-03-01"), end: d("2021-05-31") },
                DateWindow { start: d("2021-08-01"), end: d("2021-12-31") },
                DateWindow { start: d("2022-04-01"), end: d("2022-07-31") },
                DateWindow { start: d("2022-08-01"), end: d("2022-12-31") },
            ],
            map_window: DateWindow { start: d("2022-04-01"), end: d("2022-11-30") },
            n_precull: 20,
            max_days: 120,
            n_keep: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShadeConfig {
    /// Candidate configurations for farm-blocked cross-validation.
    pub cv_grid: Vec<GbrConfig>,
    pub n_folds: usize,
    pub seed: u64,
    /// Thresholds for the cover-exceedance table, percent.
    pub exceedance_thresholds: Vec<f64>,
}

impl Default for ShadeConfig {
    fn default() -> Self {
        // Desk-scale tree budget; the full-scale configuration documented
        // for production uses 2000 estimators.
        let base = GbrConfig {
            n_estimators: 200,
            learning_rate: 0.1,
            max_depth: 4,
            min_samples_leaf: 10,
            loss: Loss::Huber { delta: 0.1 },
            seed: 0,
        };
        Self {
            cv_grid: vec![
                GbrConfig { max_depth: 3, ..base },
                base,
            ],
            n_folds: 5,
            seed: 11,
            exceedance_thresholds: vec![15.0, 20.0, 30.0, 40.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgbdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub ensemble: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Footprint acquisition window.
    pub window: DateWindow,
}

impl Default for AgbdConfig {
    fn default() -> Self {
        Self {
            // Desk-scale epochs at a raised step size; the full-scale
            // configuration is the 1e-5 base rate with patience 10.
            learning_rate: 1e-4,
            batch_size: 64,
            ensemble: 5,
            patience: 3,
            max_epochs: 3,
            seed: 23,
            window: DateWindow { start: d("2022-04-01"), end: d("2022-11-30") },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CarbonStageConfig {
    pub regression: RegressionConfig,
    pub scenario: ScenarioConfig,
    /// Scenario cover thresholds, percent.
    pub thresholds: Vec<f64>,
    /// Optional below-ground biomass add-on (disabled by default); when
    /// enabled, added biomass scales by `1 + below_ground_fraction`.
    pub include_below_ground: bool,
    pub below_ground_fraction: f64,
}

impl Default for CarbonStageConfig {
    fn default() -> Self {
        Self {
            regression: RegressionConfig {
                min_pairs: 1000,
                seed: 31,
                ..Default::default()
            },
            scenario: ScenarioConfig {
                seed: 37,
                ..Default::default()
            },
            thresholds: vec![15.0, 20.0, 30.0, 40.0],
            include_below_ground: false,
            below_ground_fraction: 0.275,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZonesConfig {
    pub k: usize,
    pub repeats: usize,
    pub forests_per_repeat: usize,
    pub trees_per_forest: usize,
    pub train_fraction: f64,
    pub mixed_margin: f64,
    pub vif_threshold: f64,
    pub cluster_trees: usize,
    pub seed: u64,
}

impl Default for ZonesConfig {
    fn default() -> Self {
        // Desk-scale forest budget; production documents 100 forests of
        // 1000 trees repeated 25 times.
        Self {
            k: 5,
            repeats: 5,
            forests_per_repeat: 5,
            trees_per_forest: 100,
            train_fraction: 0.8,
            mixed_margin: 0.1,
            vif_threshold: 10.0,
            cluster_trees: 200,
            seed: 41,
        }
    }
}

impl Config {
    /// Load a config file and apply `key.path=value` overrides before
    /// validation.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: serde_json::Value = match path {
            Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
            None => serde_json::to_value(Config::default())?,
        };
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let config: Config = serde_json::from_value(value)?;
        if config.version != CONFIG_VERSION {
            return Err(Error::Argument(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                config.version
            )));
        }
        Ok(config)
    }

    /// Canonical JSON used for hashing and the resolved-config artifact.
    pub fn canonical_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }
}

fn apply_override(value: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cursor = value;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let obj = cursor.as_object_mut().ok_or_else(|| {
            Error::Argument(format!("override '{key}': '{part}' is not an object"))
        })?;
        if last {
            // Parse as JSON when possible, else keep the raw string.
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Argument(format!("override '{key}': unknown key '{part}'")))?;
    }
    Ok(())
}
