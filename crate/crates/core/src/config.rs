//! TOML run configuration shared by every command.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::baseline::ShapConfig;
use crate::dataset::{SyntheticSpec, DEFAULT_COLUMN_MISSING_THRESHOLD};
use crate::ensemble::EnsembleHyper;
use crate::error::{Error, Result};
use crate::protocol::{CampaignConfig, MetricTransform, DEFAULT_MIN_OVERLAP, DEFAULT_NOISE_FEATURES};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    #[default]
    InProcess,
    Sockets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestActor {
    pub id: String,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub input: PathBuf,
    pub id_column: String,
    /// `parts_per_observation` groups of measurement-type columns.
    pub measurement_columns: Vec<String>,
    #[serde(default = "one")]
    pub parts_per_observation: usize,
    /// Two-column `column,setpoint` CSV; without it `<name>.Setpoint`
    /// companion columns are used.
    #[serde(default)]
    pub setpoints: Option<PathBuf>,
    #[serde(default = "default_threshold")]
    pub column_missing_threshold: f64,
    #[serde(default = "yes")]
    pub drop_incomplete_rows: bool,
    pub actors: Vec<IngestActor>,
    #[serde(default)]
    pub shared_columns: Vec<String>,
    /// Non-feature columns besides measurements and setpoints.
    #[serde(default)]
    pub excluded_columns: Vec<String>,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_threshold() -> f64 {
    DEFAULT_COLUMN_MISSING_THRESHOLD
}

/// Either a fixed affine map or standardisation of the broadcast metric.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    pub standardise: bool,
    pub scale: Option<f64>,
    pub offset: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignSection {
    pub deadline_ms: u64,
    pub noise_feature_count: usize,
    pub below_floor_slack: f64,
    pub min_overlap: usize,
    /// Actors that refuse the call.
    pub decline: Vec<String>,
}

impl Default for CampaignSection {
    fn default() -> Self {
        Self {
            deadline_ms: 3_600_000,
            noise_feature_count: DEFAULT_NOISE_FEATURES,
            below_floor_slack: 1.0,
            min_overlap: DEFAULT_MIN_OVERLAP,
            decline: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CentralSection {
    pub sample_count: usize,
    pub background_size: usize,
    pub max_instances: Option<usize>,
    /// Adds the noise reference actor's features to the central model so that
    /// both comparison series contain it.
    pub include_noise_actor: bool,
}

impl Default for CentralSection {
    fn default() -> Self {
        let shap = ShapConfig::default();
        Self {
            sample_count: shap.sample_count,
            background_size: shap.background_size,
            max_instances: shap.max_instances,
            include_noise_actor: true,
        }
    }
}

impl CentralSection {
    pub fn shap_config(&self) -> ShapConfig {
        ShapConfig {
            sample_count: self.sample_count,
            background_size: self.background_size,
            max_instances: self.max_instances,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    /// Defaults to `<out_dir>/ranking.csv`.
    pub ranking: Option<PathBuf>,
    /// Defaults to `<out_dir>/company_shap.csv`.
    pub importance: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Directory holding `datasets.json`.
    pub data_dir: Option<PathBuf>,
    pub transport: Transport,
    pub ingest: Option<IngestConfig>,
    pub synthetic: Option<SyntheticSpec>,
    pub ensemble: EnsembleHyper,
    pub transform: Option<TransformConfig>,
    pub campaign: CampaignSection,
    pub central: CentralSection,
    pub compare: CompareSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative paths inside it resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.out_dir, &mut self.data_dir].into_iter().flatten() {
            fix(p);
        }
        if let Some(ing) = &mut self.ingest {
            fix(&mut ing.input);
            if let Some(p) = &mut ing.setpoints {
                fix(p);
            }
        }
        for p in [&mut self.compare.ranking, &mut self.compare.importance]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ensemble.validate().map_err(|e| Error::Config(format!("[ensemble] {e}")))?;
        if let Some(s) = &self.synthetic {
            s.validate().map_err(|e| Error::Config(format!("[synthetic] {e}")))?;
        }
        if let Some(t) = &self.transform {
            t.to_transform_spec()?;
        }
        let c = &self.campaign;
        if c.noise_feature_count == 0 {
            return Err(Error::Config("[campaign] noise_feature_count must be positive".into()));
        }
        if !(c.below_floor_slack.is_finite() && c.below_floor_slack > 0.0) {
            return Err(Error::Config("[campaign] below_floor_slack must be positive".into()));
        }
        if c.deadline_ms == 0 {
            return Err(Error::Config("[campaign] deadline_ms must be positive".into()));
        }
        if self.central.sample_count == 0 || self.central.background_size == 0 {
            return Err(Error::Config(
                "[central] sample_count and background_size must be positive".into(),
            ));
        }
        if self.central.max_instances == Some(0) {
            return Err(Error::Config("[central] max_instances must be positive".into()));
        }
        if let Some(ing) = &self.ingest {
            if ing.actors.is_empty() {
                return Err(Error::Config("[ingest] needs at least one actor".into()));
            }
            if ing.parts_per_observation == 0 {
                return Err(Error::Config("[ingest] parts_per_observation must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn campaign_config(&self) -> CampaignConfig {
        CampaignConfig {
            seed: self.seed,
            deadline: Duration::from_millis(self.campaign.deadline_ms),
            noise_feature_count: self.campaign.noise_feature_count,
            below_floor_slack: self.campaign.below_floor_slack,
        }
    }

    pub fn require_out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory (set out_dir or pass --out)".into()))
    }

    pub fn require_data_dir(&self) -> Result<&Path> {
        self.data_dir
            .as_deref()
            .ok_or_else(|| Error::Config("no data_dir with a datasets.json".into()))
    }
}

/// A validated transform request; standardisation needs the metric first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformSpec {
    Standardise,
    Fixed(MetricTransform),
}

impl TransformConfig {
    pub fn to_transform_spec(&self) -> Result<TransformSpec> {
        match (self.standardise, self.scale) {
            (true, None) if self.offset.is_none() => Ok(TransformSpec::Standardise),
            (true, _) => Err(Error::Config(
                "[transform] standardise excludes scale and offset".into(),
            )),
            (false, Some(scale)) => MetricTransform::new(scale, self.offset.unwrap_or(0.0))
                .map(TransformSpec::Fixed)
                .map_err(|e| Error::Config(format!("[transform] {e}"))),
            (false, None) => Err(Error::Config(
                "[transform] needs `scale` or `standardise = true`".into(),
            )),
        }
    }
}
