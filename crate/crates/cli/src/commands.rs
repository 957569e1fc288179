use std::collections::HashSet;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use polypforge_core::classifier::{build_classifier, train_classifier, TrainedClassifier};
use polypforge_core::dataset::toy::{generate_toy_dataset, ToyDomainSpec};
use polypforge_core::dataset::{write_tiles, DatasetManifest, ImageTile, LabelSet, Provenance, Split};
use polypforge_core::eval::{
    run_alpha_ablation, run_augmentation_experiment, AblationInputs, Arm, ArmTiles, ExperimentConfig,
};
use polypforge_core::filter::{
    rank_by_target_probability, rank_cross_fitted, read_ranking_csv, select_top_alpha, write_filter_artifacts, Alpha,
    FilterAudit,
};
use polypforge_core::gan::{sample_dcgan, train_cyclegan, train_dcgan, translate, Checkpoint, Direction};
use polypforge_core::hashing::{json_hash, short};
use polypforge_core::turing::service::{serve, ServiceConfig};
use serde::Serialize;
use serde_json::json;

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

/// A stage's output directory, `<root>/<stage>-<hash>`, with its `run.json`.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create<T: Serialize>(root: &Path, stage: &str, config: &T, inputs: serde_json::Value) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let hash = json_hash(&json!({ "stage": stage, "config": config, "inputs": inputs }));
        let path = root.join(format!("{stage}-{}", short(&hash)));
        fs::create_dir_all(&path).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))?;
        let record = json!({
            "stage": stage,
            "config_hash": hash,
            "config": config,
            "inputs": inputs,
            "command_line": std::env::args().collect::<Vec<_>>(),
        });
        fs::write(path.join("run.json"), serde_json::to_string_pretty(&record)?)?;
        Ok(RunDir { path })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

/// Paths and tiles shared by the dataset-backed commands.
pub struct Context {
    pub config: PipelineConfig,
    pub labels: LabelSet,
    pub out: PathBuf,
}

fn require_file(path: Option<&PathBuf>, field: &str, what: &str) -> Result<PathBuf> {
    let path = path.ok_or_else(|| CliError::config(field, "required by this command"))?;
    if !path.is_file() {
        return Err(CliError::missing(what, path));
    }
    Ok(path.clone())
}

impl Context {
    pub fn new(mut config: PipelineConfig, out: PathBuf) -> Result<Self> {
        let labels = config.label_set()?;
        config.classifier.num_classes = labels.len();
        config.validate(&labels)?;
        Ok(Context { config, labels, out })
    }

    fn label_names(&self) -> Vec<String> {
        self.labels.names()
    }

    fn manifest(&self) -> Result<DatasetManifest> {
        let path = require_file(self.config.paths.manifest.as_ref(), "paths.manifest", "manifest")?;
        Ok(DatasetManifest::load(&path, &self.labels)?)
    }

    fn split(&self, split: Split) -> Result<Vec<ImageTile>> {
        Ok(self.manifest()?.split_view(split).load_tiles()?)
    }

    fn run_dir(&self, stage: &str, inputs: serde_json::Value) -> Result<RunDir> {
        RunDir::create(&self.out, stage, &self.config, inputs)
    }

    fn classifier(&self, field: &str) -> Result<Option<TrainedClassifier>> {
        match &self.config.paths.classifier {
            None => Ok(None),
            Some(p) => {
                let path = require_file(Some(p), field, "classifier checkpoint")?;
                Ok(Some(TrainedClassifier::load(&path)?))
            }
        }
    }
}

fn of_class(tiles: &[ImageTile], class: &str) -> Vec<ImageTile> {
    tiles.iter().filter(|t| t.label() == class).cloned().collect()
}

fn non_empty(tiles: Vec<ImageTile>, what: &str) -> Result<Vec<ImageTile>> {
    if tiles.is_empty() {
        Err(CliError::Runtime(format!("manifest has no {what}")))
    } else {
        Ok(tiles)
    }
}

pub fn toygen(config: &PipelineConfig, spec: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<Vec<PathBuf>> {
    let mut spec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|_| CliError::missing("toy spec", p))?;
            ToyDomainSpec::from_json(&text).map_err(|e| match CliError::from(e) {
                CliError::Runtime(m) => CliError::config("toy", m),
                other => other,
            })?
        }
        None => config.toy.clone().ok_or_else(|| CliError::config("toy", "no toy spec in the config or on --spec"))?,
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let run = RunDir::create(out, "toygen", &spec, json!({}))?;
    let manifest = generate_toy_dataset(&spec, &run.path)?;
    log::info!("rendered {} toy tiles", manifest.len());
    Ok(vec![run.join("manifest.jsonl"), run.join("toy_spec.json")])
}

pub fn train_classifier_cmd(ctx: &Context) -> Result<Vec<PathBuf>> {
    let train = non_empty(ctx.split(Split::Train)?, "train split")?;
    let val = ctx.split(Split::Val)?;
    let run = ctx.run_dir("train-classifier", json!({}))?;
    let model = train_classifier(&build_classifier(&ctx.config.classifier, &ctx.label_names())?, &train, &val)?;
    let ckpt = run.join("classifier.ckpt");
    model.save(&ckpt)?;
    let history = run.join("history.json");
    fs::write(&history, serde_json::to_string_pretty(&model.history)?)?;
    Ok(vec![ckpt, history])
}

pub fn filter_cmd(ctx: &Context) -> Result<Vec<PathBuf>> {
    let alpha = ctx.config.alpha()?;
    let f = &ctx.config.filter;
    let train = ctx.split(Split::Train)?;
    let targets = non_empty(of_class(&train, &f.target_class), "training tiles of the target class")?;
    let ranking = match ctx.classifier("paths.classifier")? {
        Some(scorer) => rank_by_target_probability(&scorer, &targets, &f.target_class)?,
        None => {
            let others: Vec<ImageTile> = train.iter().filter(|t| t.label() != f.target_class).cloned().collect();
            rank_cross_fitted(&targets, &others, &f.target_class, &ctx.config.classifier, &ctx.label_names(), f.folds)?
        }
    };
    let run = ctx.run_dir("filter", json!({ "scorer": ranking.scorer_ids }))?;
    let subset = select_top_alpha(&ranking, alpha)?;
    write_filter_artifacts(&run.path, &ranking, &subset, &FilterAudit::new(&ranking, &subset))?;
    log::info!("kept {} of {} `{}` tiles at alpha {alpha}", subset.len(), ranking.len(), f.target_class);
    Ok(vec![run.join("ranking.csv"), run.join("subset.csv"), run.join("audit.json")])
}

pub fn train_gan_cmd(ctx: &Context) -> Result<Vec<PathBuf>> {
    let f = &ctx.config.filter;
    let train = ctx.split(Split::Train)?;
    let source = non_empty(of_class(&train, &f.source_class), "training tiles of the source class")?;
    let mut target = of_class(&train, &f.target_class);
    if let Some(p) = &ctx.config.paths.subset {
        let path = require_file(Some(p), "paths.subset", "filtered subset")?;
        let keep: HashSet<String> = read_ranking_csv(&path)?.into_iter().map(|(id, _)| id).collect();
        target.retain(|t| keep.contains(t.id()));
    }
    let target = non_empty(target, "training tiles of the target class in the subset")?;
    let run = ctx.run_dir("train-gan", json!({ "target_ids": target.iter().map(|t| t.id()).collect::<Vec<_>>() }))?;
    let gan = train_cyclegan(&source, &target, &ctx.config.gan)?;
    let dir = run.join("checkpoints");
    fs::create_dir_all(&dir)?;
    let mut out = Vec::new();
    for c in &gan.checkpoints {
        let path = dir.join(format!("epoch-{:04}.ckpt", c.epoch));
        c.save(&path)?;
        out.push(path);
    }
    let log_path = run.join("loss_log.csv");
    fs::write(&log_path, gan.log_csv()?)?;
    out.push(log_path);
    Ok(out)
}

pub fn translate_cmd(ctx: &Context) -> Result<Vec<PathBuf>> {
    let ckpt_path = require_file(ctx.config.paths.checkpoint.as_ref(), "paths.checkpoint", "translator checkpoint")?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let manifest = ctx.manifest()?;
    let source = non_empty(of_class(&manifest.load_tiles()?, &ctx.config.filter.source_class), "source-class tiles")?;
    let run = ctx.run_dir("translate", json!({ "checkpoint": ckpt.hash }))?;
    let synthetic = translate(&ckpt, &source, Direction::SourceToTarget)?;
    let entries = write_tiles(&synthetic, &run.path, "synthetic", Split::Train)?;
    let path = run.join("manifest.jsonl");
    DatasetManifest::new(&run.path, ctx.labels.clone(), entries)?.write(&path)?;
    Ok(vec![path])
}

pub fn ablation_cmd(ctx: &Context) -> Result<Vec<PathBuf>> {
    let alphas = ctx.config.alphas()?;
    let f = &ctx.config.filter;
    let classes = ctx.config.target_classes();
    let train = ctx.split(Split::Train)?;
    let val = ctx.split(Split::Val)?;
    let source = non_empty(of_class(&train, &f.source_class), "training tiles of the source class")?;
    let mut targets = Vec::new();
    for c in &classes {
        if ctx.labels.get(c).is_none() {
            return Err(CliError::config("experiment.target_classes", format!("`{c}` is not in the label set")));
        }
        targets.push((c.clone(), non_empty(of_class(&train, c), &format!("training tiles of `{c}`"))?));
    }
    let others: Vec<ImageTile> = train.iter().filter(|t| !classes.iter().any(|c| c == t.label())).cloned().collect();
    let judge = match ctx.classifier("paths.classifier")? {
        Some(j) => j,
        None => {
            let val = non_empty(val.clone(), "val split to train the judge on")?;
            let cfg = ctx.config.classifier.clone();
            train_classifier(&build_classifier(&cfg, &ctx.label_names())?, &val, &[])?
        }
    };
    let run = ctx.run_dir("ablation", json!({ "judge": judge.checkpoint_id()? }))?;
    let inputs = AblationInputs {
        experiment_id: ctx.config.experiment.experiment_id.clone(),
        source: &source,
        targets,
        scorer_others: &others,
        scorer: ctx.config.classifier.clone(),
        scorer_labels: ctx.label_names(),
        folds: f.folds,
        gan: ctx.config.gan.clone(),
        judge: &judge,
        judge_train_ids: val.iter().map(|t| t.id().to_string()).collect(),
        artifact_dir: Some(run.path.clone()),
    };
    let report = run_alpha_ablation(&alphas, &inputs)?;
    let stem = report.file_stem();
    Ok(["", "-table"]
        .iter()
        .map(|s| run.join(&format!("{stem}{s}.csv")))
        .chain([run.join(&format!("{stem}.json"))])
        .collect())
}

pub fn experiment_cmd(ctx: &Context) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.config;
    let f = &cfg.filter;
    let real_train = ctx.split(Split::Train)?;
    let test = non_empty(ctx.split(Split::Test)?, "test split")?;
    let source = non_empty(of_class(&real_train, &f.source_class), "training tiles of the source class")?;
    let positives = non_empty(of_class(&real_train, &f.target_class), "training tiles of the target class")?;
    if cfg.experiment.arms.is_empty() {
        return Err(CliError::config("experiment.arms", "must not be empty"));
    }
    let run = ctx.run_dir("experiment", json!({}))?;
    let arms_use = |pred: fn(Arm) -> bool| cfg.experiment.arms.iter().any(|&a| pred(a));
    let cyclegan = if arms_use(|a| matches!(a, Arm::PlusCycleGan | Arm::SyntheticOnlyCycleGan)) {
        let gan = train_cyclegan(&source, &positives, &cfg.gan)?;
        fs::write(run.join("cyclegan_loss_log.csv"), gan.log_csv()?)?;
        let last = gan.checkpoints.last().ok_or_else(|| CliError::Runtime("translator saved no checkpoint".into()))?;
        translate(last, &source, Direction::SourceToTarget)?
    } else {
        Vec::new()
    };
    let dcgan = if arms_use(|a| matches!(a, Arm::PlusDcgan | Arm::SyntheticOnlyDcgan)) {
        let gan = train_dcgan(&positives, &cfg.dcgan)?;
        fs::write(run.join("dcgan_loss_log.csv"), gan.log_csv()?)?;
        let last = gan.checkpoints.last().ok_or_else(|| CliError::Runtime("generator saved no checkpoint".into()))?;
        sample_dcgan(last, source.len(), cfg.dcgan.seed)?
    } else {
        Vec::new()
    };
    let arms: Vec<ArmTiles> = cfg
        .experiment
        .arms
        .iter()
        .map(|&arm| {
            let synthetic = match arm {
                Arm::NoAugmentation => Vec::new(),
                Arm::PlusCycleGan | Arm::SyntheticOnlyCycleGan => cyclegan.clone(),
                Arm::PlusDcgan | Arm::SyntheticOnlyDcgan => dcgan.clone(),
            };
            ArmTiles { arm, synthetic }
        })
        .collect();
    let gan_ids: Vec<&str> = source.iter().chain(&positives).map(|t| t.id()).collect();
    let config = ExperimentConfig {
        experiment_id: cfg.experiment.experiment_id.clone(),
        classifier: cfg.classifier.clone(),
        labels: ctx.label_names(),
        positive_class: f.target_class.clone(),
        seeds: cfg.experiment.seeds.clone(),
        notes: notes(cfg),
    };
    let report = run_augmentation_experiment(&real_train, &arms, &test, &config, &gan_ids)?;
    Ok(report.write(&run.path)?)
}

/// Experiment notes plus the α used for the translator, which always trains
/// on every target tile here.
fn notes(cfg: &PipelineConfig) -> std::collections::BTreeMap<String, String> {
    let mut notes = cfg.experiment.notes.clone();
    if cfg.experiment.arms.iter().any(|a| matches!(a, Arm::PlusCycleGan | Arm::SyntheticOnlyCycleGan)) {
        notes.entry("cyclegan_alpha".into()).or_insert_with(|| "1".into());
    }
    notes
}

pub fn serve_cmd(ctx: &Context) -> Result<Vec<PathBuf>> {
    let s = &ctx.config.service;
    let real_path = s.real_manifest.as_ref().or(ctx.config.paths.manifest.as_ref());
    let real_path = require_file(real_path, "service.real_manifest", "real-tile manifest")?;
    let fake_path = require_file(s.fake_manifest.as_ref(), "service.fake_manifest", "synthetic-tile manifest")?;
    let load = |p: &Path, provenance: Provenance| -> Result<Vec<ImageTile>> {
        let tiles = DatasetManifest::load(p, &ctx.labels)?.load_tiles()?;
        Ok(tiles.into_iter().filter(|t| t.provenance() == provenance).collect())
    };
    let real = load(&real_path, Provenance::Real)?;
    let fake = load(&fake_path, Provenance::Synthetic)?;
    let addr: SocketAddr = format!("{}:{}", s.bind, s.port)
        .parse()
        .map_err(|e| CliError::config("service.bind", format!("`{}:{}`: {e}", s.bind, s.port)))?;
    let run = ctx.run_dir("serve", json!({}))?;
    let log_dir = s.log_dir.clone().unwrap_or_else(|| run.join("logs"));
    let config = ServiceConfig {
        pools: [("real".to_string(), real), ("fake".to_string(), fake)].into_iter().collect(),
        log_dir: Some(log_dir.clone()),
        ui_dir: s.ui_dir.clone(),
        null_accuracy: s.null_accuracy,
    };
    println!("serving on http://{addr} (ui at /ui/ when configured)");
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(serve(addr, config))?;
    Ok(vec![log_dir])
}

/// Parses `"1,0.5,1/4"`.
pub fn parse_alpha_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|a| {
            a.trim()
                .parse::<Alpha>()
                .map(Alpha::value)
                .map_err(|_| CliError::config("experiment.alphas", format!("`{}` is not in (0, 1]", a.trim())))
        })
        .collect()
}
