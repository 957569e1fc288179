use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{assert_disjoint, csv_string, median, EvalError, Result};
use crate::classifier::{build_classifier, train_classifier, ClassifierConfig};
use crate::dataset::ImageTile;
use crate::hashing::{id_set_hash, json_hash, short};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "no-augmentation")]
    NoAugmentation,
    #[serde(rename = "+cyclegan")]
    PlusCycleGan,
    #[serde(rename = "+dcgan")]
    PlusDcgan,
    #[serde(rename = "synthetic-only-cyclegan")]
    SyntheticOnlyCycleGan,
    #[serde(rename = "synthetic-only-dcgan")]
    SyntheticOnlyDcgan,
}

impl Arm {
    pub const ALL: [Arm; 5] =
        [Arm::NoAugmentation, Arm::PlusCycleGan, Arm::PlusDcgan, Arm::SyntheticOnlyCycleGan, Arm::SyntheticOnlyDcgan];

    pub fn name(self) -> &'static str {
        match self {
            Arm::NoAugmentation => "no-augmentation",
            Arm::PlusCycleGan => "+cyclegan",
            Arm::PlusDcgan => "+dcgan",
            Arm::SyntheticOnlyCycleGan => "synthetic-only-cyclegan",
            Arm::SyntheticOnlyDcgan => "synthetic-only-dcgan",
        }
    }

    /// Real tiles of the positive class are dropped from training.
    pub fn is_synthetic_only(self) -> bool {
        matches!(self, Arm::SyntheticOnlyCycleGan | Arm::SyntheticOnlyDcgan)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arm {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| EvalError::InvalidSetup(format!("unknown arm `{s}`")))
    }
}

/// Synthetic tiles contributed by one arm; empty for no-augmentation.
#[derive(Clone, Debug)]
pub struct ArmTiles {
    pub arm: Arm,
    pub synthetic: Vec<ImageTile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub classifier: ClassifierConfig,
    pub labels: Vec<String>,
    pub positive_class: String,
    pub seeds: Vec<u64>,
    /// Free-form choices recorded in the report, e.g. the α used to
    /// produce each arm's synthetic tiles.
    pub notes: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment_id: "augmentation".into(),
            classifier: ClassifierConfig::default(),
            labels: vec!["negative".into(), "positive".into()],
            positive_class: "positive".into(),
            seeds: vec![0, 1, 2],
            notes: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub arm: Arm,
    pub seed: u64,
    pub n_real: usize,
    pub n_synthetic: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub auc: f64,
    pub classifier_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub seeds: usize,
    pub median_auc: f64,
    pub min_auc: f64,
    pub max_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub experiment_id: String,
    pub config_hash: String,
    pub test_ids_hash: String,
    pub positive_class: String,
    pub notes: BTreeMap<String, String>,
    pub records: Vec<ArmRecord>,
    pub summary: Vec<ArmSummary>,
}

impl AugmentationReport {
    /// Orders records by arm then seed and recomputes the summary, so the
    /// same records always give the same report.
    pub fn assemble(
        experiment_id: String,
        config_hash: String,
        test_ids_hash: String,
        positive_class: String,
        notes: BTreeMap<String, String>,
        mut records: Vec<ArmRecord>,
    ) -> Self {
        records.sort_by(|a, b| a.arm.cmp(&b.arm).then(a.seed.cmp(&b.seed)));
        let mut summary = Vec::new();
        for arm in Arm::ALL {
            let aucs: Vec<f64> = records.iter().filter(|r| r.arm == arm).map(|r| r.auc).collect();
            if let Some(m) = median(&aucs) {
                summary.push(ArmSummary {
                    arm,
                    seeds: aucs.len(),
                    median_auc: m,
                    min_auc: aucs.iter().copied().fold(f64::INFINITY, f64::min),
                    max_auc: aucs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                });
            }
        }
        AugmentationReport { experiment_id, config_hash, test_ids_hash, positive_class, notes, records, summary }
    }

    /// Rebuilds the report from its own records.
    pub fn reassemble(&self) -> Self {
        Self::assemble(
            self.experiment_id.clone(),
            self.config_hash.clone(),
            self.test_ids_hash.clone(),
            self.positive_class.clone(),
            self.notes.clone(),
            self.records.clone(),
        )
    }

    pub fn median_auc(&self, arm: Arm) -> Option<f64> {
        self.summary.iter().find(|s| s.arm == arm).map(|s| s.median_auc)
    }

    /// CSV `arm,seed,n_real,n_synthetic,n_positive,n_negative,auc,classifier_id`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        csv_string(w)
    }

    /// CSV `arm,seeds,median_auc,min_auc,max_auc`.
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.summary {
            w.serialize(s)?;
        }
        csv_string(w)
    }

    pub fn file_stem(&self) -> String {
        format!("{}-{}", self.experiment_id, short(&self.config_hash))
    }

    /// Writes `<stem>.csv`, `<stem>-summary.csv` and `<stem>.json`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let stem = self.file_stem();
        let paths = [
            dir.join(format!("{stem}.csv")),
            dir.join(format!("{stem}-summary.csv")),
            dir.join(format!("{stem}.json")),
        ];
        fs::write(&paths[0], self.to_csv()?)?;
        fs::write(&paths[1], self.summary_csv()?)?;
        fs::write(&paths[2], serde_json::to_string_pretty(self)?)?;
        Ok(paths.to_vec())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn composition(arm: &ArmTiles, real_train: &[ImageTile], positive: &str) -> Vec<ImageTile> {
    let mut train: Vec<ImageTile> =
        real_train.iter().filter(|t| !(arm.arm.is_synthetic_only() && t.label() == positive)).cloned().collect();
    train.extend(arm.synthetic.iter().cloned());
    train
}

fn validate(
    real_train: &[ImageTile],
    arms: &[ArmTiles],
    test: &[ImageTile],
    config: &ExperimentConfig,
    gan_training_ids: &[&str],
) -> Result<HashSet<String>> {
    if arms.is_empty() || config.seeds.is_empty() {
        return Err(EvalError::InvalidSetup("need at least one arm and one seed".into()));
    }
    if !config.labels.contains(&config.positive_class) {
        return Err(EvalError::UnknownClass(config.positive_class.clone()));
    }
    for (i, a) in arms.iter().enumerate() {
        if arms[..i].iter().any(|b| b.arm == a.arm) {
            return Err(EvalError::InvalidSetup(format!("arm `{}` given twice", a.arm)));
        }
        if a.arm == Arm::NoAugmentation && !a.synthetic.is_empty() {
            return Err(EvalError::InvalidSetup("no-augmentation arm carries synthetic tiles".into()));
        }
        if a.arm != Arm::NoAugmentation && a.synthetic.is_empty() {
            return Err(EvalError::InvalidSetup(format!("arm `{}` has no synthetic tiles", a.arm)));
        }
        if let Some(t) = a.synthetic.iter().find(|t| !config.labels.iter().any(|l| l == t.label())) {
            return Err(EvalError::UnknownClass(t.label().to_string()));
        }
    }
    let test_ids: HashSet<&str> = test.iter().map(|t| t.id()).collect();
    if test_ids.len() != test.len() {
        return Err(EvalError::InvalidSetup("duplicate test tile ids".into()));
    }
    assert_disjoint(&test_ids, real_train.iter().map(|t| t.id()), "classifier training tiles")?;
    assert_disjoint(&test_ids, gan_training_ids.iter().copied(), "generator training tiles")?;
    for a in arms {
        assert_disjoint(&test_ids, a.synthetic.iter().map(|t| t.id()), format!("`{}` synthetic tiles", a.arm))?;
        assert_disjoint(
            &test_ids,
            a.synthetic.iter().filter_map(|t| t.source_ref()),
            format!("`{}` synthetic sources", a.arm),
        )?;
    }
    Ok(test_ids.into_iter().map(String::from).collect())
}

/// Trains one classifier per (arm, seed) and scores it on the shared test
/// set. Every arm sees the same test tiles and classifier config; only the
/// training composition and seed vary.
///
/// Any test tile found among the classifier training tiles, the generator
/// training ids, or the synthetic tiles and their sources aborts the
/// experiment.
pub fn run_augmentation_experiment(
    real_train: &[ImageTile],
    arms: &[ArmTiles],
    test: &[ImageTile],
    config: &ExperimentConfig,
    gan_training_ids: &[&str],
) -> Result<AugmentationReport> {
    let test_ids = validate(real_train, arms, test, config, gan_training_ids)?;
    let test_ids_hash = id_set_hash(test_ids.iter().map(String::as_str));
    let arm_hashes: Vec<(Arm, String)> =
        arms.iter().map(|a| (a.arm, id_set_hash(a.synthetic.iter().map(|t| t.id())))).collect();
    let config_hash = json_hash(&serde_json::json!({
        "config": config,
        "arms": arm_hashes,
        "real_train": id_set_hash(real_train.iter().map(|t| t.id())),
        "test": test_ids_hash,
        "gan_training": id_set_hash(gan_training_ids.iter().copied()),
    }));
    let jobs: Vec<(&ArmTiles, u64)> = arms.iter().flat_map(|a| config.seeds.iter().map(move |&s| (a, s))).collect();
    let records: Vec<ArmRecord> = jobs
        .par_iter()
        .map(|&(arm, seed)| {
            let train = composition(arm, real_train, &config.positive_class);
            let cfg = ClassifierConfig { seed, ..config.classifier.clone() };
            let model = train_classifier(&build_classifier(&cfg, &config.labels)?, &train, &[])?;
            let auc = model.evaluate_auc(test, &config.positive_class)?;
            let n_positive = train.iter().filter(|t| t.label() == config.positive_class).count();
            log::info!("{} seed {seed}: AUC {auc:.4} on {} training tiles", arm.arm, train.len());
            Ok(ArmRecord {
                arm: arm.arm,
                seed,
                n_real: train.len() - arm.synthetic.len(),
                n_synthetic: arm.synthetic.len(),
                n_positive,
                n_negative: train.len() - n_positive,
                auc,
                classifier_id: model.checkpoint_id()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AugmentationReport::assemble(
        config.experiment_id.clone(),
        config_hash,
        test_ids_hash,
        config.positive_class.clone(),
        config.notes.clone(),
        records,
    ))
}

/// As [`run_augmentation_experiment`] with the positive class represented
/// only by synthetic tiles. Every arm must be synthetic-only and
/// `real_negatives` must hold no positive tile.
pub fn run_synthetic_only_experiment(
    arms: &[ArmTiles],
    real_negatives: &[ImageTile],
    test: &[ImageTile],
    config: &ExperimentConfig,
    gan_training_ids: &[&str],
) -> Result<AugmentationReport> {
    if let Some(a) = arms.iter().find(|a| !a.arm.is_synthetic_only()) {
        return Err(EvalError::InvalidSetup(format!("arm `{}` is not synthetic-only", a.arm)));
    }
    if let Some(t) = real_negatives.iter().find(|t| t.label() == config.positive_class) {
        return Err(EvalError::InvalidSetup(format!("negative pool holds positive tile `{}`", t.id())));
    }
    run_augmentation_experiment(real_negatives, arms, test, config, gan_training_ids)
}
