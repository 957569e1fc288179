//! Cycle-consistent translator: configuration, training loop, checkpoints
//! and translation of tiles.

use std::collections::BTreeSet;

use image::RgbImage;
use polypforge_nn::container::{content_hash, Container};
use polypforge_nn::optim::Adam;
use polypforge_nn::{Graph, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{adversarial_term, generator_objective, LossWeights, Target};
use super::nets::{CycleNets, DiscriminatorArch, GeneratorArch};
use super::replay::ReplayBuffer;
use super::{decayed_lr, invalid, AdversarialLoss, Checkpoint, Cycler, GanError, ImageMap, Result};
use crate::dataset::ImageTile;
use crate::hashing::{derive_seed, short};
use crate::imaging;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub image_size: u32,
    pub ngf: usize,
    pub ndf: usize,
    pub n_downsampling: usize,
    /// Residual blocks in each generator; `None` picks 9 above 128 px and 6
    /// otherwise.
    pub n_residual_blocks: Option<usize>,
    pub disc_layers: usize,
    pub edge_kernel: usize,
    pub loss: AdversarialLoss,
    pub lambda_cyc: f64,
    pub lambda_id: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub checkpoint_epochs: Vec<usize>,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Random horizontal flips of training samples.
    pub flips: bool,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            image_size: 224,
            ngf: 64,
            ndf: 64,
            n_downsampling: 2,
            n_residual_blocks: None,
            disc_layers: 3,
            edge_kernel: 7,
            loss: AdversarialLoss::LeastSquares,
            lambda_cyc: 10.0,
            lambda_id: 5.0,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 200,
            checkpoint_epochs: vec![5, 10, 25, 50, 100, 200],
            replay_capacity: 50,
            batch_size: 1,
            flips: true,
            seed: 0,
        }
    }
}

impl GanConfig {
    /// Small networks for 32×32 synthetic tiles.
    pub fn desk_scale(image_size: u32) -> Self {
        GanConfig {
            image_size,
            ngf: 8,
            ndf: 8,
            n_residual_blocks: Some(3),
            edge_kernel: 5,
            epochs: 30,
            checkpoint_epochs: vec![5, 30],
            batch_size: 4,
            ..GanConfig::default()
        }
    }

    pub fn residual_blocks(&self) -> usize {
        self.n_residual_blocks.unwrap_or(if self.image_size > 128 { 9 } else { 6 })
    }

    pub fn generator_arch(&self) -> GeneratorArch {
        GeneratorArch {
            ngf: self.ngf,
            n_downsampling: self.n_downsampling,
            n_residual_blocks: self.residual_blocks(),
            edge_kernel: self.edge_kernel,
        }
    }

    pub fn discriminator_arch(&self) -> DiscriminatorArch {
        DiscriminatorArch { ndf: self.ndf, layers: self.disc_layers }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { form: self.loss, lambda_cyc: self.lambda_cyc, lambda_id: self.lambda_id }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.lambda_cyc) {
            return Err(invalid("lambda_cyc", "must be finite and non-negative"));
        }
        if !nonneg(self.lambda_id) {
            return Err(invalid("lambda_id", "must be finite and non-negative"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning_rate", "must be positive"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(field, "must lie in [0, 1)"));
            }
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        self.generator_arch().validate(self.image_size)?;
        self.discriminator_arch().validate(self.image_size)
    }

    /// Scheduled epochs that fit in the run, plus the final epoch.
    pub fn effective_schedule(&self) -> Vec<usize> {
        let mut s: BTreeSet<usize> = self.checkpoint_epochs.iter().copied().filter(|&e| e >= 1).collect();
        let dropped: Vec<usize> = s.iter().copied().filter(|&e| e > self.epochs).collect();
        if !dropped.is_empty() {
            log::warn!("checkpoint epochs {dropped:?} exceed the {} training epochs and are skipped", self.epochs);
        }
        s.retain(|&e| e <= self.epochs);
        s.insert(self.epochs);
        s.into_iter().collect()
    }
}

/// Labels of the two domains; `G` maps `source` to `target`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domains {
    pub source: String,
    pub target: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `G`: source to target.
    SourceToTarget,
    /// `F`: target to source.
    TargetToSource,
}

/// Per-epoch means of the training losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLossRecord {
    pub epoch: usize,
    #[serde(rename = "loss_G")]
    pub loss_g: f64,
    #[serde(rename = "loss_F")]
    pub loss_f: f64,
    #[serde(rename = "loss_D_X")]
    pub loss_d_x: f64,
    #[serde(rename = "loss_D_Y")]
    pub loss_d_y: f64,
    pub loss_cyc: f64,
    pub loss_id: f64,
}

/// Generators, discriminators and optimizer state.
#[derive(Clone, Debug)]
pub struct CycleGan {
    pub config: GanConfig,
    pub domains: Domains,
    pub epoch: usize,
    pub log: Vec<GanLossRecord>,
    nets: CycleNets,
    store: ParamStore<f32>,
    opt_gen: Adam<f32>,
    opt_disc: Adam<f32>,
}

pub fn build_cyclegan(config: &GanConfig, domains: Domains) -> Result<CycleGan> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0]));
    let nets = CycleNets::new(&mut store, &config.generator_arch(), &config.discriminator_arch(), &mut rng)?;
    let gen_ids = ids(&store, &["G.", "F."]);
    let disc_ids = ids(&store, &["DX.", "DY."]);
    Ok(CycleGan {
        config: config.clone(),
        domains,
        epoch: 0,
        log: Vec::new(),
        nets,
        opt_gen: Adam::new(gen_ids, config.learning_rate, config.beta1, config.beta2),
        opt_disc: Adam::new(disc_ids, config.learning_rate, config.beta1, config.beta2),
        store,
    })
}

fn ids(store: &ParamStore<f32>, prefixes: &[&str]) -> Vec<ParamId> {
    prefixes.iter().flat_map(|p| store.ids_with_prefix(p)).collect()
}

struct StepLosses {
    adv_g: f64,
    adv_f: f64,
    d_x: f64,
    d_y: f64,
    cycle: f64,
    identity: f64,
}

impl CycleGan {
    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    /// Parameter count of the networks whose names start with `prefix`
    /// (`G.`, `F.`, `DX.`, `DY.`).
    pub fn num_parameters(&self, prefix: &str) -> usize {
        self.store.num_elements_with_prefix(prefix)
    }

    /// Hash of the network parameters alone.
    pub fn param_hash(&self) -> Result<String> {
        let mut c = Container::<f32>::new(serde_json::Value::Null);
        for (name, t) in self.store.named_tensors() {
            c.push(name, t.clone());
        }
        Ok(content_hash(&c.encode()?))
    }

    /// Applies `G` or `F` to a `[N, 3, H, W]` batch.
    pub fn generate(&self, x: &Tensor<f32>, direction: Direction) -> Result<Tensor<f32>> {
        let mut g = Graph::eval(&self.store);
        let xv = g.input(x.clone());
        let net = match direction {
            Direction::SourceToTarget => &self.nets.g,
            Direction::TargetToSource => &self.nets.f,
        };
        let y = net.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    /// An [`ImageMap`] view of one generator.
    pub fn mapping(&self, direction: Direction) -> GeneratorMap<'_> {
        GeneratorMap { model: self, direction }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "kind": "cyclegan",
            "epoch": self.epoch,
            "config": self.config,
            "domains": self.domains,
            "log": self.log,
        });
        let mut c = Container::<f32>::new(meta);
        for (name, t) in self.store.named_tensors() {
            c.push(name, t.clone());
        }
        for (name, t) in self.opt_gen.state_tensors(&self.store, "opt_gen") {
            c.push(name, t);
        }
        for (name, t) in self.opt_disc.state_tensors(&self.store, "opt_disc") {
            c.push(name, t);
        }
        Ok(Checkpoint::from_bytes(self.epoch, c.encode()?))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (meta, tensors) = Container::<f32>::decode(ckpt.bytes())?.into_map();
        if meta["kind"] != "cyclegan" {
            return Err(GanError::Checkpoint("not a CycleGAN checkpoint".into()));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| GanError::Checkpoint(format!("missing `{k}`")));
        let parse = |e: serde_json::Error| GanError::Checkpoint(e.to_string());
        let config: GanConfig = serde_json::from_value(field("config")?).map_err(parse)?;
        let domains: Domains = serde_json::from_value(field("domains")?).map_err(parse)?;
        let mut m = build_cyclegan(&config, domains)?;
        m.epoch = serde_json::from_value(field("epoch")?).map_err(parse)?;
        m.log = serde_json::from_value(field("log")?).map_err(parse)?;
        m.store.load_named(&tensors)?;
        m.opt_gen.load_state(&m.store, "opt_gen", &tensors)?;
        m.opt_disc.load_state(&m.store, "opt_disc", &tensors)?;
        Ok(m)
    }

    /// Translates tiles with the generator for `direction`, tagging outputs
    /// with `generator_ref` and the input id as `source_ref`.
    fn translate_tiles(
        &self,
        tiles: &[ImageTile],
        direction: Direction,
        generator_ref: &str,
    ) -> Result<Vec<ImageTile>> {
        check_sizes(tiles, self.config.image_size)?;
        let label = match direction {
            Direction::SourceToTarget => &self.domains.target,
            Direction::TargetToSource => &self.domains.source,
        };
        let mut out = Vec::with_capacity(tiles.len());
        for chunk in tiles.chunks(8) {
            let refs: Vec<&RgbImage> = chunk.iter().map(|t| t.pixels()).collect();
            let y = self.generate(&imaging::images_to_tensor(&refs), direction)?;
            for (t, img) in chunk.iter().zip(imaging::tensor_to_images(&y)) {
                let id = format!("syn/{}/{}", short(generator_ref), t.id());
                out.push(ImageTile::synthetic(
                    id,
                    img,
                    label.clone(),
                    Some(t.id().to_string()),
                    generator_ref.to_string(),
                ));
            }
        }
        Ok(out)
    }

    fn step(
        &mut self,
        x: Tensor<f32>,
        y: Tensor<f32>,
        pool_x: &mut ReplayBuffer<f32>,
        pool_y: &mut ReplayBuffer<f32>,
    ) -> Result<std::result::Result<StepLosses, &'static str>> {
        let weights = self.config.loss_weights();
        let form = self.config.loss;
        let disc_ids = self.opt_disc.params().to_vec();
        let (losses, grads, fake_x, fake_y) = {
            let mut g = Graph::new(&self.store);
            g.freeze(&disc_ids);
            let xv = g.input(x.clone());
            let yv = g.input(y.clone());
            let obj = generator_objective(&mut g, &self.nets, xv, yv, weights)?;
            let item = |v| g.value(v).item() as f64;
            let losses = (item(obj.total), item(obj.adv_g), item(obj.adv_f), item(obj.cycle), item(obj.identity));
            let fx = g.value(obj.fake_x).clone();
            let fy = g.value(obj.fake_y).clone();
            (losses, g.backward(obj.total)?, fx, fy)
        };
        if !losses.0.is_finite() {
            return Ok(Err("generator loss"));
        }
        self.opt_gen.step(&mut self.store, &grads);

        let fake_x = pool_x.query_batch(&fake_x);
        let fake_y = pool_y.query_batch(&fake_y);
        let (d_x, d_y, grads) = {
            let mut g = Graph::new(&self.store);
            let half_pair = |g: &mut Graph<'_, f32>, real: Tensor<f32>, fake: Tensor<f32>, y_side: bool| -> Result<_> {
                let d = if y_side { &self.nets.dy } else { &self.nets.dx };
                let r = g.input(real);
                let f = g.input(fake);
                let dr = d.forward(g, r)?;
                let df = d.forward(g, f)?;
                let lr = adversarial_term(g, dr, Target::Real, form);
                let lf = adversarial_term(g, df, Target::Fake, form);
                let sum = g.add(lr, lf)?;
                Ok(g.scale(sum, 0.5))
            };
            let ly = half_pair(&mut g, y, fake_y, true)?;
            let lx = half_pair(&mut g, x, fake_x, false)?;
            let total = g.add(lx, ly)?;
            (g.value(lx).item() as f64, g.value(ly).item() as f64, g.backward(total)?)
        };
        if !(d_x.is_finite() && d_y.is_finite()) {
            return Ok(Err("discriminator loss"));
        }
        self.opt_disc.step(&mut self.store, &grads);
        Ok(Ok(StepLosses { adv_g: losses.1, adv_f: losses.2, d_x, d_y, cycle: losses.3, identity: losses.4 }))
    }
}

/// One generator of a [`CycleGan`] as an [`ImageMap`].
pub struct GeneratorMap<'a> {
    model: &'a CycleGan,
    direction: Direction,
}

impl ImageMap for GeneratorMap<'_> {
    fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.model.generate(x, self.direction)
    }
}

pub(crate) fn check_sizes(tiles: &[ImageTile], size: u32) -> Result<()> {
    for t in tiles {
        if t.width() != size || t.height() != size {
            return Err(GanError::SizeMismatch {
                id: t.id().into(),
                width: t.width(),
                height: t.height(),
                expected: size,
            });
        }
    }
    Ok(())
}

/// Batch of tiles as a tensor, optionally flipping each sample horizontally
/// with probability ½.
pub(crate) fn batch_tensor(tiles: &[ImageTile], idx: &[usize], flips: bool, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let images: Vec<RgbImage> = idx
        .iter()
        .map(|&i| {
            let p = tiles[i].pixels();
            if flips && rng.random_bool(0.5) {
                image::imageops::flip_horizontal(p)
            } else {
                p.clone()
            }
        })
        .collect();
    let refs: Vec<&RgbImage> = images.iter().collect();
    imaging::images_to_tensor(&refs)
}

/// Checkpoints at the scheduled epochs plus the final model.
#[derive(Clone, Debug)]
pub struct GanRun {
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<GanLossRecord>,
    pub model: CycleGan,
}

impl GanRun {
    /// Loss log as CSV `epoch,loss_G,loss_F,loss_D_X,loss_D_Y,loss_cyc,loss_id`.
    pub fn log_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.log {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| GanError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }
}

/// Trains `G: source → target` and `F: target → source` on unpaired tiles.
///
/// An epoch is `⌈max(|source|, |target|) / batch_size⌉` iterations; the
/// smaller domain is cycled. Training aborts on a non-finite loss, handing
/// back the most recent checkpoint.
pub fn train_cyclegan(source: &[ImageTile], target: &[ImageTile], config: &GanConfig) -> Result<GanRun> {
    let first_source = source.first().ok_or(GanError::EmptyDomain("source"))?;
    let first_target = target.first().ok_or(GanError::EmptyDomain("target"))?;
    let domains = Domains { source: first_source.label().to_string(), target: first_target.label().to_string() };
    continue_training(build_cyclegan(config, domains)?, source, target)
}

/// Trains `model` from its current epoch up to `model.config.epochs`.
///
/// Sampling order, flips and replay buffers are seeded from the config seed
/// and the starting epoch, so a resumed run is reproducible but does not
/// replay the exact draws of an uninterrupted one.
pub fn continue_training(mut model: CycleGan, source: &[ImageTile], target: &[ImageTile]) -> Result<GanRun> {
    if source.is_empty() {
        return Err(GanError::EmptyDomain("source"));
    }
    if target.is_empty() {
        return Err(GanError::EmptyDomain("target"));
    }
    let config = model.config.clone();
    config.validate()?;
    check_sizes(source, config.image_size)?;
    check_sizes(target, config.image_size)?;
    let schedule = config.effective_schedule();
    let start = model.epoch as u64;
    let seed = |k: u64| derive_seed(config.seed, &[k, start]);
    let mut xs = Cycler::new(source.len(), seed(1));
    let mut ys = Cycler::new(target.len(), seed(2));
    let mut flip_rng = ChaCha8Rng::seed_from_u64(seed(3));
    let mut pool_x = ReplayBuffer::new(config.replay_capacity, seed(4));
    let mut pool_y = ReplayBuffer::new(config.replay_capacity, seed(5));
    let iterations = source.len().max(target.len()).div_ceil(config.batch_size);
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut last_good = if model.epoch > 0 { Some(model.to_checkpoint()?) } else { None };

    for epoch in model.epoch..config.epochs {
        let lr = decayed_lr(config.learning_rate, epoch, config.epochs);
        model.opt_gen.lr = lr;
        model.opt_disc.lr = lr;
        let mut sums = [0.0f64; 6];
        for it in 0..iterations {
            let x = batch_tensor(source, &xs.take(config.batch_size), config.flips, &mut flip_rng);
            let y = batch_tensor(target, &ys.take(config.batch_size), config.flips, &mut flip_rng);
            let s = match model.step(x, y, &mut pool_x, &mut pool_y)? {
                Ok(s) => s,
                Err(what) => {
                    log::error!("aborting CycleGAN training: non-finite {what} at epoch {}", epoch + 1);
                    return Err(GanError::NonFiniteLoss {
                        epoch: epoch + 1,
                        iteration: it,
                        what,
                        last_good: last_good.map(Box::new),
                    });
                }
            };
            for (acc, v) in sums.iter_mut().zip([s.adv_g, s.adv_f, s.d_x, s.d_y, s.cycle, s.identity]) {
                *acc += v;
            }
        }
        let n = iterations as f64;
        let rec = GanLossRecord {
            epoch: epoch + 1,
            loss_g: sums[0] / n,
            loss_f: sums[1] / n,
            loss_d_x: sums[2] / n,
            loss_d_y: sums[3] / n,
            loss_cyc: sums[4] / n,
            loss_id: sums[5] / n,
        };
        log::info!(
            "epoch {}: G {:.4} F {:.4} D_X {:.4} D_Y {:.4} cyc {:.4} id {:.4}",
            rec.epoch,
            rec.loss_g,
            rec.loss_f,
            rec.loss_d_x,
            rec.loss_d_y,
            rec.loss_cyc,
            rec.loss_id
        );
        model.log.push(rec);
        model.epoch = epoch + 1;
        if schedule.contains(&model.epoch) {
            let c = model.to_checkpoint()?;
            last_good = Some(c.clone());
            checkpoints.push(c);
        }
    }
    Ok(GanRun { log: model.log.clone(), checkpoints, model })
}

/// Loads `checkpoint` and translates every tile; one synthetic tile per
/// input.
pub fn translate(checkpoint: &Checkpoint, tiles: &[ImageTile], direction: Direction) -> Result<Vec<ImageTile>> {
    CycleGan::from_checkpoint(checkpoint)?.translate_tiles(tiles, direction, &checkpoint.hash)
}
