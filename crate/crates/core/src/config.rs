//! One JSON config document with sections; every field has a default and
//! unknown keys are rejected. The effective config is echoed into a
//! manifest alongside every output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::{write_atomic, ExperimentConfig, GridSpec};
use crate::error::{Error, Result};
use crate::tasks::{Regularity, TriggerSpec};
use crate::train::TrainConfig;
use crate::unlearn::{Method, MethodConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub corruption: CorruptionSection,
    pub unlearn: MethodConfig,
    pub grid: GridSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub side: usize,
    pub noise_sigma: f64,
    pub master_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            num_classes: 10,
            per_class_train: 500,
            per_class_test: 100,
            side: 8,
            noise_sigma: 0.3,
            master_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub profile: Vec<usize>,
    pub capacity_fraction: f64,
    /// Train originals with example-tied dropout.
    pub etd: bool,
    /// Mem units per hidden layer under ETD; empty mirrors the gen widths.
    pub etd_mem_units: Vec<usize>,
    pub mask_density: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            profile: vec![128, 128],
            capacity_fraction: 0.5,
            etd: false,
            etd_mem_units: Vec::new(),
            mask_density: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSection {
    pub n_corrupt: usize,
    pub interclass_classes: (u32, u32),
    pub poison_target: u32,
    pub trigger: TriggerSpec,
}

impl Default for CorruptionSection {
    fn default() -> Self {
        CorruptionSection {
            n_corrupt: 1000,
            interclass_classes: (0, 1),
            poison_target: 0,
            trigger: TriggerSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub methods: Vec<String>,
    pub regularities: Vec<String>,
    pub discovery_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub include_zero_discovery: bool,
    pub jobs: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            methods: vec!["rem".into()],
            regularities: vec!["low".into(), "medium".into(), "high".into()],
            discovery_rates: GridSpec::default_rates(),
            seeds: vec![0, 1, 2],
            include_zero_discovery: false,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Falls back to the CLI's env-var default, then ".".
    pub dir: Option<String>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.num_classes < 2 {
            return Err(Error::InvalidConfig("data.num_classes must be >= 2".into()));
        }
        if !(0.0 < self.model.capacity_fraction && self.model.capacity_fraction <= 1.0) {
            return Err(Error::InvalidConfig(
                "model.capacity_fraction must be in (0, 1]".into(),
            ));
        }
        if !(0.0 < self.model.mask_density && self.model.mask_density <= 1.0) {
            return Err(Error::InvalidConfig("model.mask_density must be in (0, 1]".into()));
        }
        if self.model.profile.is_empty() {
            return Err(Error::InvalidConfig("model.profile must be non-empty".into()));
        }
        let total = self.data.num_classes * self.data.per_class_train;
        if self.corruption.n_corrupt > total {
            return Err(Error::InvalidConfig(format!(
                "corruption.n_corrupt {} exceeds training set size {total}",
                self.corruption.n_corrupt
            )));
        }
        for r in &self.grid.discovery_rates {
            if !(0.0 < *r && *r <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "grid.discovery_rates entry {r} outside (0, 1]"
                )));
            }
        }
        self.grid_methods()?;
        self.grid_regularities()?;
        Ok(())
    }

    pub fn grid_methods(&self) -> Result<Vec<Method>> {
        self.grid.methods.iter().map(|s| s.parse()).collect()
    }

    pub fn grid_regularities(&self) -> Result<Vec<Regularity>> {
        self.grid.regularities.iter().map(|s| s.parse()).collect()
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            num_classes: self.data.num_classes,
            per_class_train: self.data.per_class_train,
            per_class_test: self.data.per_class_test,
            side: self.data.side,
            noise_sigma: self.data.noise_sigma,
            n_corrupt: self.corruption.n_corrupt,
            interclass_classes: self.corruption.interclass_classes,
            poison_target: self.corruption.poison_target,
            trigger: self.corruption.trigger,
            profile: self.model.profile.clone(),
            capacity_fraction: self.model.capacity_fraction,
            etd: self.model.etd,
            etd_mem_units: self.model.etd_mem_units.clone(),
            mask_density: self.model.mask_density,
            train: self.train.clone(),
            method: self.unlearn.clone(),
            master_seed: self.data.master_seed,
        }
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        Ok(GridSpec {
            methods: self.grid_methods()?,
            regularities: self.grid_regularities()?,
            discovery_rates: self.grid.discovery_rates.clone(),
            seeds: self.grid.seeds.clone(),
            include_zero_discovery: self.grid.include_zero_discovery,
            jobs: self.grid.jobs.max(1),
        })
    }
}

/// Echo the effective config and tool version next to the outputs.
pub fn write_manifest(dir: &Path, cfg: &Config) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        version: &'a str,
        config: &'a Config,
    }
    let m = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
    };
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    write_atomic(&dir.join("manifest.json"), text.as_bytes())
}
