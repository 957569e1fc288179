//! Residual CNN classifiers: construction, training, inference, AUC and
//! depth sweeps.

mod auc;
mod resnet;
mod sweep;

use std::path::Path;
use std::time::Instant;

use image::RgbImage;
use polypforge_nn::container::{content_hash, Container};
use polypforge_nn::graph::softmax_rows;
use polypforge_nn::layers::apply_buffer_updates;
use polypforge_nn::optim::Sgd;
use polypforge_nn::{Graph, NnError, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use auc::mann_whitney_auc;
pub use resnet::{BlockKind, ResNet, ResNetArch, StemKind};
pub use sweep::{depth_sweep, SweepReport, SweepRow};

use crate::dataset::ImageTile;
use crate::hashing::derive_seed;
use crate::imaging;

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("unsupported depth {0}; expected 18, 34 or 50")]
    UnsupportedDepth(u32),
    #[error("invalid classifier config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("class `{0}` has no training examples")]
    EmptyClass(String),
    #[error("label `{0}` is not known to the classifier")]
    UnknownClass(String),
    #[error("tile `{id}` is {width}x{height}, model expects {expected}x{expected}")]
    SizeMismatch { id: String, width: u32, height: u32, expected: u32 },
    #[error("non-finite training loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("test set must contain both positive and negative examples")]
    OneClassTestSet,
    #[error("scores must be finite")]
    NonFiniteScore,
    #[error("a depth sweep needs at least two depths")]
    TooFewDepths,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ClassifierError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    pub flips: bool,
    pub rotations: bool,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation { flips: true, rotations: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub depth: u32,
    pub num_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// The learning rate is multiplied by `lr_decay_factor` from this epoch
    /// (0-based) on.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub augmentation: Augmentation,
    /// Inverse-frequency class weights in the training loss.
    pub class_weighted: bool,
    pub base_width: usize,
    pub input_size: u32,
    pub stem: StemKind,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            depth: 18,
            num_classes: 2,
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_epoch: 15,
            lr_decay_factor: 0.1,
            seed: 0,
            augmentation: Augmentation::default(),
            class_weighted: false,
            base_width: 64,
            input_size: 224,
            stem: StemKind::Standard,
        }
    }
}

fn invalid(field: &str, message: &str) -> ClassifierError {
    ClassifierError::InvalidConfig { field: field.into(), message: message.into() }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        ResNetArch::preset(self.depth, self.num_classes, self.base_width, self.stem)?;
        if self.num_classes < 2 {
            return Err(invalid("num_classes", "must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch_size", "must be at least 2 for batch normalisation"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning_rate", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum", "must lie in [0, 1)"));
        }
        if self.base_width == 0 {
            return Err(invalid("base_width", "must be positive"));
        }
        if self.input_size < 8 {
            return Err(invalid("input_size", "must be at least 8"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.learning_rate * self.lr_decay_factor
        } else {
            self.learning_rate
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// A residual classifier with its parameters, label ordering and history.
#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub config: ClassifierConfig,
    pub labels: Vec<String>,
    pub history: Vec<EpochRecord>,
    net: ResNet,
    store: ParamStore<f32>,
}

/// Builds an untrained classifier; initialisation is a function of
/// `config.seed` only.
pub fn build_classifier(config: &ClassifierConfig, labels: &[String]) -> Result<TrainedClassifier> {
    config.validate()?;
    if labels.len() != config.num_classes {
        return Err(invalid(
            "num_classes",
            &format!("{} labels given for {} classes", labels.len(), config.num_classes),
        ));
    }
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(invalid("labels", &format!("duplicate label `{l}`")));
        }
    }
    let arch = ResNetArch::preset(config.depth, config.num_classes, config.base_width, config.stem)?;
    build_with_arch(config, &arch, labels)
}

fn build_with_arch(config: &ClassifierConfig, arch: &ResNetArch, labels: &[String]) -> Result<TrainedClassifier> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0]));
    let mut store = ParamStore::new();
    let net = ResNet::new(arch, &mut store, &mut rng)?;
    Ok(TrainedClassifier { config: config.clone(), labels: labels.to_vec(), history: Vec::new(), net, store })
}

/// Trains `model` in place of a copy and returns it with one history record
/// per epoch.
pub fn train_classifier(
    model: &TrainedClassifier,
    train: &[ImageTile],
    val: &[ImageTile],
) -> Result<TrainedClassifier> {
    let mut m = model.clone();
    m.fit(train, val)?;
    Ok(m)
}

impl TrainedClassifier {
    pub fn arch(&self) -> &ResNetArch {
        &self.net.arch
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels.iter().position(|l| l == label).ok_or_else(|| ClassifierError::UnknownClass(label.into()))
    }

    fn targets(&self, tiles: &[ImageTile]) -> Result<Vec<usize>> {
        tiles.iter().map(|t| self.label_index(t.label())).collect()
    }

    fn fit(&mut self, train: &[ImageTile], val: &[ImageTile]) -> Result<()> {
        if train.is_empty() {
            return Err(ClassifierError::EmptyTrainingSet);
        }
        let targets = self.targets(train)?;
        let val_targets = self.targets(val)?;
        let c = self.labels.len();
        let mut counts = vec![0usize; c];
        for &t in &targets {
            counts[t] += 1;
        }
        if let Some(i) = counts.iter().position(|&n| n == 0) {
            return Err(ClassifierError::EmptyClass(self.labels[i].clone()));
        }
        let weights: Option<Vec<f64>> = self
            .config
            .class_weighted
            .then(|| counts.iter().map(|&n| train.len() as f64 / (c as f64 * n as f64)).collect());

        let cfg = self.config.clone();
        let params: Vec<_> = self.store.param_ids().collect();
        let mut opt = Sgd::new(params, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
        let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1]));
        let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2]));
        let start_epoch = self.history.len();
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in start_epoch..start_epoch + cfg.epochs {
            opt.lr = cfg.learning_rate_at(epoch);
            order.shuffle(&mut order_rng);
            let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
            // A trailing single-sample batch cannot be batch-normalised.
            if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
                batches.pop();
            }
            let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
            for (bi, idx) in batches.iter().enumerate() {
                let images: Vec<RgbImage> = idx.iter().map(|&i| self.training_view(&train[i], &mut aug_rng)).collect();
                let refs: Vec<&RgbImage> = images.iter().collect();
                let x = imaging::images_to_tensor(&refs);
                let y: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
                let (loss, grads, logits, updates) = {
                    let mut g = Graph::new(&self.store);
                    let xv = g.input(x);
                    let logits = self.net.forward(&mut g, xv)?;
                    let loss = g.softmax_cross_entropy(logits, &y, weights.as_deref())?;
                    let lv = g.value(loss).item() as f64;
                    let lg = g.value(logits).data().to_vec();
                    let grads = g.backward(loss)?;
                    (lv, grads, lg, g.take_buffer_updates())
                };
                if !loss.is_finite() {
                    return Err(ClassifierError::NonFiniteLoss { epoch, batch: bi, loss });
                }
                opt.step(&mut self.store, &grads);
                apply_buffer_updates(&mut self.store, updates);
                loss_sum += loss * idx.len() as f64;
                seen += idx.len();
                correct += argmax_rows(&logits, c).iter().zip(&y).filter(|(p, t)| p == t).count();
            }
            let (val_loss, val_accuracy) = if val.is_empty() {
                (None, None)
            } else {
                let probs = self.predict_proba(val)?;
                let (l, a) = loss_and_accuracy(&probs, &val_targets);
                (Some(l), Some(a))
            };
            let rec = EpochRecord {
                epoch,
                learning_rate: opt.lr,
                train_loss: loss_sum / seen as f64,
                train_accuracy: correct as f64 / seen as f64,
                val_loss,
                val_accuracy,
            };
            log::info!(
                "epoch {epoch}: loss {:.4} acc {:.3} val_acc {:?}",
                rec.train_loss,
                rec.train_accuracy,
                rec.val_accuracy
            );
            self.history.push(rec);
        }
        Ok(())
    }

    /// Resize-and-crop to the input size (random crop), then random dihedral
    /// augmentation.
    fn training_view(&self, tile: &ImageTile, rng: &mut ChaCha8Rng) -> RgbImage {
        let s = self.config.input_size;
        let img = if tile.width() == s && tile.height() == s {
            tile.pixels().clone()
        } else {
            let resized = imaging::resize_shorter_side(tile.pixels(), crop_resize_side(s));
            imaging::random_crop(&resized, s, rng)
        };
        let a = self.config.augmentation;
        if a.flips || a.rotations {
            imaging::random_dihedral(&img, a.flips, a.rotations, rng)
        } else {
            img
        }
    }

    /// Eval-mode class probabilities, one row per tile in `labels` order.
    pub fn predict_proba(&self, tiles: &[ImageTile]) -> Result<Vec<Vec<f64>>> {
        let s = self.config.input_size;
        for t in tiles {
            if t.width() != s || t.height() != s {
                return Err(ClassifierError::SizeMismatch {
                    id: t.id().into(),
                    width: t.width(),
                    height: t.height(),
                    expected: s,
                });
            }
        }
        let images: Vec<&RgbImage> = tiles.iter().map(|t| t.pixels()).collect();
        self.predict_images(&images)
    }

    /// Eval-mode probabilities for preprocessed images of the input size.
    pub fn predict_images(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f64>>> {
        let c = self.labels.len();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = imaging::images_to_tensor(chunk);
            let mut g = Graph::eval(&self.store);
            let xv = g.input(x);
            let logits = self.net.forward(&mut g, xv)?;
            let probs = softmax_rows(g.value(logits).data(), c);
            out.extend(probs.chunks(c).map(|r| r.iter().map(|&p| p as f64).collect::<Vec<f64>>()));
        }
        Ok(out)
    }

    /// Predicted label (argmax) for each tile.
    pub fn predict_labels(&self, tiles: &[ImageTile]) -> Result<Vec<String>> {
        Ok(self.predict_proba(tiles)?.iter().map(|row| self.labels[argmax(row)].clone()).collect())
    }

    pub fn evaluate_auc(&self, test: &[ImageTile], positive_class: &str) -> Result<f64> {
        let k = self.label_index(positive_class)?;
        let probs = self.predict_proba(test)?;
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (t, row) in test.iter().zip(&probs) {
            if t.label() == positive_class {
                pos.push(row[k]);
            } else {
                neg.push(row[k]);
            }
        }
        mann_whitney_auc(&pos, &neg)
    }

    fn to_container(&self) -> Container<f32> {
        let meta = serde_json::json!({
            "kind": "classifier",
            "arch": self.net.arch,
            "labels": self.labels,
            "config": self.config,
            "history": self.history,
        });
        let mut c = Container::new(meta);
        for (name, t) in self.store.named_tensors() {
            c.push(name, t.clone());
        }
        c
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container().encode()?)
    }

    /// Content hash of the serialized checkpoint.
    pub fn checkpoint_id(&self) -> Result<String> {
        Ok(content_hash(&self.to_bytes()?))
    }

    /// Writes the checkpoint and returns its content hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        Ok(self.to_container().write(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = Container::<f32>::decode(bytes)?.into_map();
        if meta["kind"] != "classifier" {
            return Err(ClassifierError::Checkpoint("not a classifier checkpoint".into()));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| ClassifierError::Checkpoint(format!("missing `{k}`")));
        let parse_err = |e: serde_json::Error| ClassifierError::Checkpoint(e.to_string());
        let arch: ResNetArch = serde_json::from_value(field("arch")?).map_err(parse_err)?;
        let labels: Vec<String> = serde_json::from_value(field("labels")?).map_err(parse_err)?;
        let config: ClassifierConfig = serde_json::from_value(field("config")?).map_err(parse_err)?;
        let history: Vec<EpochRecord> = serde_json::from_value(field("history")?).map_err(parse_err)?;
        let mut m = build_with_arch(&config, &arch, &labels)?;
        m.store.load_named(&tensors)?;
        m.history = history;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Builds a classifier with an explicit architecture (for example a small
/// custom stage layout) instead of a depth preset.
pub fn build_custom(config: &ClassifierConfig, arch: &ResNetArch, labels: &[String]) -> Result<TrainedClassifier> {
    if labels.len() != arch.num_classes {
        return Err(invalid("num_classes", "label count differs from architecture"));
    }
    let mut cfg = config.clone();
    cfg.num_classes = arch.num_classes;
    build_with_arch(&cfg, arch, labels)
}

/// Shorter-side length before cropping: the 256/224 ratio of the usual
/// ImageNet pipeline, scaled to the input size.
pub fn crop_resize_side(input_size: u32) -> u32 {
    ((input_size as f64) * 256.0 / 224.0).round() as u32
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn argmax_rows(logits: &[f32], c: usize) -> Vec<usize> {
    logits
        .chunks(c)
        .map(|r| {
            let row: Vec<f64> = r.iter().map(|&v| v as f64).collect();
            argmax(&row)
        })
        .collect()
}

fn loss_and_accuracy(probs: &[Vec<f64>], targets: &[usize]) -> (f64, f64) {
    let n = targets.len() as f64;
    let loss = probs.iter().zip(targets).map(|(r, &t)| -r[t].max(1e-12).ln()).sum::<f64>() / n;
    let acc = probs.iter().zip(targets).filter(|(r, &t)| argmax(r) == t).count() as f64 / n;
    (loss, acc)
}

/// Wall-clock helper shared by sweeps and experiments.
pub(crate) fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}
