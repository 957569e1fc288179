use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use polypforge_core::classifier::ClassifierConfig;
use polypforge_core::dataset::toy::ToyDomainSpec;
use polypforge_core::dataset::{ClassLabel, LabelSet};
use polypforge_core::eval::Arm;
use polypforge_core::filter::Alpha;
use polypforge_core::gan::{DcganConfig, GanConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub output_root: Option<PathBuf>,
    /// Trained classifier: the scorer for `filter`, the judge for `ablation`.
    pub classifier: Option<PathBuf>,
    /// Filtered subset CSV restricting the target domain of `train-gan`.
    pub subset: Option<PathBuf>,
    /// Translator checkpoint for `translate`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSettings {
    pub source_class: String,
    pub target_class: String,
    pub alpha: f64,
    /// Cross-fitting folds used when no scorer checkpoint is given.
    pub folds: usize,
}

impl Default for FilterSettings {
    fn default() -> Self {
        FilterSettings { source_class: "NO".into(), target_class: "SSA".into(), alpha: 1.0, folds: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub experiment_id: String,
    pub alphas: Vec<f64>,
    /// Target classes of the ablation; empty means `filter.target_class`.
    pub target_classes: Vec<String>,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub notes: BTreeMap<String, String>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            experiment_id: "polypforge".into(),
            alphas: Alpha::reference_grid().into_iter().map(Alpha::value).collect(),
            target_classes: Vec::new(),
            arms: vec![Arm::NoAugmentation, Arm::PlusCycleGan],
            seeds: vec![0, 1, 2],
            notes: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSettings {
    pub bind: String,
    pub port: u16,
    /// Manifest of real tiles; falls back to `paths.manifest`.
    pub real_manifest: Option<PathBuf>,
    pub fake_manifest: Option<PathBuf>,
    pub log_dir: Option<PathBuf>,
    pub ui_dir: Option<PathBuf>,
    pub null_accuracy: f64,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings {
            bind: "127.0.0.1".into(),
            port: 8080,
            real_manifest: None,
            fake_manifest: None,
            log_dir: None,
            ui_dir: None,
            null_accuracy: 0.5,
        }
    }
}

/// Everything any subcommand reads. Unset sections take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    /// Label set of the manifest; defaults to the toy spec beside the
    /// manifest, then to the five reference classes.
    pub labels: Option<Vec<ClassLabel>>,
    pub toy: Option<ToyDomainSpec>,
    pub classifier: ClassifierConfig,
    pub filter: FilterSettings,
    pub gan: GanConfig,
    pub dcgan: DcganConfig,
    pub experiment: ExperimentSettings,
    pub service: ServiceSettings,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| CliError::missing("config file", path))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(json_field(&text, &e), e))
    }

    pub fn alpha(&self) -> Result<Alpha> {
        Alpha::new(self.filter.alpha)
            .map_err(|_| CliError::config("filter.alpha", format!("{} is outside (0, 1]", self.filter.alpha)))
    }

    pub fn alphas(&self) -> Result<Vec<Alpha>> {
        if self.experiment.alphas.is_empty() {
            return Err(CliError::config("experiment.alphas", "must not be empty"));
        }
        self.experiment
            .alphas
            .iter()
            .map(|&a| {
                Alpha::new(a).map_err(|_| CliError::config("experiment.alphas", format!("{a} is outside (0, 1]")))
            })
            .collect()
    }

    pub fn target_classes(&self) -> Vec<String> {
        if self.experiment.target_classes.is_empty() {
            vec![self.filter.target_class.clone()]
        } else {
            self.experiment.target_classes.clone()
        }
    }

    /// Label set from the config, the toy spec next to the manifest, or
    /// the reference classes.
    pub fn label_set(&self) -> Result<LabelSet> {
        if let Some(labels) = &self.labels {
            return LabelSet::new(labels.clone()).map_err(|e| CliError::config("labels", e));
        }
        if let Some(spec) = self.paths.manifest.as_ref().and_then(|m| m.parent()).map(|d| d.join("toy_spec.json")) {
            if spec.is_file() {
                return Ok(ToyDomainSpec::from_json(&fs::read_to_string(&spec)?)?.label_set());
            }
        }
        Ok(LabelSet::reference())
    }

    /// Checks the sections shared by the training commands.
    pub fn validate(&self, labels: &LabelSet) -> Result<()> {
        self.classifier.validate()?;
        self.gan.validate()?;
        self.dcgan.validate().map_err(|e| match e {
            polypforge_core::gan::GanError::InvalidConfig { field, message } => {
                CliError::config(format!("dcgan.{field}"), message)
            }
            other => other.into(),
        })?;
        self.alpha()?;
        for (field, class) in
            [("filter.source_class", &self.filter.source_class), ("filter.target_class", &self.filter.target_class)]
        {
            if labels.get(class).is_none() {
                return Err(CliError::config(field, format!("`{class}` is not in the label set")));
            }
        }
        if self.filter.source_class == self.filter.target_class {
            return Err(CliError::config("filter.target_class", "must differ from filter.source_class"));
        }
        if self.experiment.seeds.is_empty() {
            return Err(CliError::config("experiment.seeds", "must not be empty"));
        }
        if !(self.service.null_accuracy > 0.0 && self.service.null_accuracy < 1.0) {
            return Err(CliError::config("service.null_accuracy", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Best-effort dotted path of the field a JSON error refers to.
fn json_field(text: &str, e: &serde_json::Error) -> String {
    let msg = e.to_string();
    if let Some(rest) = msg.split("unknown field `").nth(1) {
        return rest.split('`').next().unwrap_or("config").to_string();
    }
    let line = text.lines().nth(e.line().saturating_sub(1)).unwrap_or("");
    line.split('"').nth(1).unwrap_or("config").to_string()
}
