//! Noise-seeded DCGAN baseline.

use polypforge_nn::container::Container;
use polypforge_nn::layers::apply_buffer_updates;
use polypforge_nn::optim::Adam;
use polypforge_nn::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::cyclegan::{batch_tensor, check_sizes};
use super::nets::{DcganDiscriminator, DcganGenerator, DcganLayout};
use super::{adversarial_term, invalid, AdversarialLoss, Checkpoint, Cycler, GanError, Result, Target};
use crate::dataset::ImageTile;
use crate::hashing::{derive_seed, short};
use crate::imaging;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcganConfig {
    pub image_size: u32,
    pub latent_dim: usize,
    pub ngf: usize,
    pub ndf: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub checkpoint_epochs: Vec<usize>,
    pub batch_size: usize,
    pub flips: bool,
    pub seed: u64,
}

impl Default for DcganConfig {
    fn default() -> Self {
        DcganConfig {
            image_size: 224,
            latent_dim: 100,
            ngf: 64,
            ndf: 64,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 25,
            checkpoint_epochs: vec![5, 10, 25],
            batch_size: 64,
            flips: true,
            seed: 0,
        }
    }
}

impl DcganConfig {
    pub fn desk_scale(image_size: u32) -> Self {
        DcganConfig {
            image_size,
            latent_dim: 32,
            ngf: 16,
            ndf: 16,
            epochs: 30,
            checkpoint_epochs: vec![30],
            batch_size: 16,
            ..DcganConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.ngf == 0 || self.ndf == 0 {
            return Err(invalid("latent_dim", "network widths must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning_rate", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch_size", "batch normalization needs at least 2 samples"));
        }
        DcganLayout::for_size(self.image_size).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcganLossRecord {
    pub epoch: usize,
    #[serde(rename = "loss_G")]
    pub loss_g: f64,
    #[serde(rename = "loss_D")]
    pub loss_d: f64,
}

#[derive(Clone, Debug)]
pub struct Dcgan {
    pub config: DcganConfig,
    pub label: String,
    pub epoch: usize,
    pub log: Vec<DcganLossRecord>,
    gen: DcganGenerator,
    disc: DcganDiscriminator,
    store: ParamStore<f32>,
    opt_gen: Adam<f32>,
    opt_disc: Adam<f32>,
}

pub fn build_dcgan(config: &DcganConfig, label: impl Into<String>) -> Result<Dcgan> {
    config.validate()?;
    let layout = DcganLayout::for_size(config.image_size)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0]));
    let gen = DcganGenerator::new(&mut store, config.latent_dim, config.ngf, layout, &mut rng)?;
    let disc = DcganDiscriminator::new(&mut store, config.ndf, layout, &mut rng)?;
    let (b1, b2) = (config.beta1, config.beta2);
    Ok(Dcgan {
        opt_gen: Adam::new(store.ids_with_prefix("G."), config.learning_rate, b1, b2),
        opt_disc: Adam::new(store.ids_with_prefix("D."), config.learning_rate, b1, b2),
        config: config.clone(),
        label: label.into(),
        epoch: 0,
        log: Vec::new(),
        gen,
        disc,
        store,
    })
}

fn noise(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let data = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![n, dim, 1, 1], data).expect("shape matches data")
}

impl Dcgan {
    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    /// Maps a `[N, latent_dim, 1, 1]` noise batch to images (eval mode).
    pub fn generate(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::eval(&self.store);
        let zv = g.input(z.clone());
        let y = self.gen.forward(&mut g, zv)?;
        Ok(g.value(y).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "kind": "dcgan",
            "epoch": self.epoch,
            "config": self.config,
            "label": self.label,
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
        if meta["kind"] != "dcgan" {
            return Err(GanError::Checkpoint("not a DCGAN checkpoint".into()));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| GanError::Checkpoint(format!("missing `{k}`")));
        let parse = |e: serde_json::Error| GanError::Checkpoint(e.to_string());
        let config: DcganConfig = serde_json::from_value(field("config")?).map_err(parse)?;
        let label: String = serde_json::from_value(field("label")?).map_err(parse)?;
        let mut m = build_dcgan(&config, label)?;
        m.epoch = serde_json::from_value(field("epoch")?).map_err(parse)?;
        m.log = serde_json::from_value(field("log")?).map_err(parse)?;
        m.store.load_named(&tensors)?;
        m.opt_gen.load_state(&m.store, "opt_gen", &tensors)?;
        m.opt_disc.load_state(&m.store, "opt_disc", &tensors)?;
        Ok(m)
    }

    /// One discriminator update then one generator update.
    fn step(&mut self, real: Tensor<f32>, rng: &mut ChaCha8Rng) -> Result<Option<(f64, f64)>> {
        let n = real.shape()[0];
        let form = AdversarialLoss::Bce;
        let gen_ids = self.opt_gen.params().to_vec();
        let disc_ids = self.opt_disc.params().to_vec();

        let z = noise(n, self.config.latent_dim, rng);
        let (loss_d, grads, updates) = {
            let mut g = Graph::new(&self.store);
            g.freeze(&gen_ids);
            let zv = g.input(z);
            let fake = self.gen.forward(&mut g, zv)?;
            let rv = g.input(real);
            let dr = self.disc.forward(&mut g, rv)?;
            let df = self.disc.forward(&mut g, fake)?;
            let lr = adversarial_term(&mut g, dr, Target::Real, form);
            let lf = adversarial_term(&mut g, df, Target::Fake, form);
            let loss = g.add(lr, lf)?;
            (g.value(loss).item() as f64, g.backward(loss)?, g.take_buffer_updates())
        };
        if !loss_d.is_finite() {
            return Ok(None);
        }
        self.opt_disc.step(&mut self.store, &grads);
        apply_buffer_updates(&mut self.store, updates);

        let z = noise(n, self.config.latent_dim, rng);
        let (loss_g, grads, updates) = {
            let mut g = Graph::new(&self.store);
            g.freeze(&disc_ids);
            let zv = g.input(z);
            let fake = self.gen.forward(&mut g, zv)?;
            let df = self.disc.forward(&mut g, fake)?;
            let loss = adversarial_term(&mut g, df, Target::Real, form);
            (g.value(loss).item() as f64, g.backward(loss)?, g.take_buffer_updates())
        };
        if !loss_g.is_finite() {
            return Ok(None);
        }
        self.opt_gen.step(&mut self.store, &grads);
        apply_buffer_updates(&mut self.store, updates);
        Ok(Some((loss_g, loss_d)))
    }
}

#[derive(Clone, Debug)]
pub struct DcganRun {
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<DcganLossRecord>,
    pub model: Dcgan,
}

impl DcganRun {
    /// Loss log as CSV `epoch,loss_G,loss_D`.
    pub fn log_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.log {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| GanError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }
}

/// Trains on the target tiles alone. An epoch is `⌈|target| / batch_size⌉`
/// iterations.
pub fn train_dcgan(target: &[ImageTile], config: &DcganConfig) -> Result<DcganRun> {
    let first = target.first().ok_or(GanError::EmptyDomain("target"))?;
    config.validate()?;
    check_sizes(target, config.image_size)?;
    let mut model = build_dcgan(config, first.label())?;
    let mut schedule: Vec<usize> =
        config.checkpoint_epochs.iter().copied().filter(|&e| e >= 1 && e <= config.epochs).collect();
    if schedule.len() < config.checkpoint_epochs.len() {
        log::warn!("DCGAN checkpoint epochs beyond {} are skipped", config.epochs);
    }
    schedule.push(config.epochs);
    let seed = |k: u64| derive_seed(config.seed, &[k]);
    let mut order = Cycler::new(target.len(), seed(1));
    let mut flip_rng = ChaCha8Rng::seed_from_u64(seed(2));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed(3));
    let batch = config.batch_size.min(target.len().max(2));
    let iterations = target.len().div_ceil(batch);
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    for epoch in 0..config.epochs {
        let (mut sg, mut sd) = (0.0, 0.0);
        for it in 0..iterations {
            let real = batch_tensor(target, &order.take(batch), config.flips, &mut flip_rng);
            match model.step(real, &mut noise_rng)? {
                Some((g, d)) => {
                    sg += g;
                    sd += d;
                }
                None => {
                    return Err(GanError::NonFiniteLoss {
                        epoch: epoch + 1,
                        iteration: it,
                        what: "DCGAN loss",
                        last_good: checkpoints.pop().map(Box::new),
                    })
                }
            }
        }
        let rec = DcganLossRecord { epoch: epoch + 1, loss_g: sg / iterations as f64, loss_d: sd / iterations as f64 };
        log::info!("dcgan epoch {}: G {:.4} D {:.4}", rec.epoch, rec.loss_g, rec.loss_d);
        model.log.push(rec);
        model.epoch = epoch + 1;
        if schedule.contains(&model.epoch) && checkpoints.last().is_none_or(|c| c.epoch != model.epoch) {
            checkpoints.push(model.to_checkpoint()?);
        }
    }
    Ok(DcganRun { log: model.log.clone(), checkpoints, model })
}

/// Draws `n` images from seeded noise.
pub fn sample_dcgan(checkpoint: &Checkpoint, n: usize, seed: u64) -> Result<Vec<ImageTile>> {
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    let model = Dcgan::from_checkpoint(checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = noise(n, model.config.latent_dim, &mut rng);
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(16) {
        let idx: Vec<usize> = (start..(start + 16).min(n)).collect();
        let y = model.generate(&z.select_batch(&idx))?;
        for (i, img) in idx.into_iter().zip(imaging::tensor_to_images(&y)) {
            let id = format!("dcgan/{}/{seed}/{i:05}", short(&checkpoint.hash));
            out.push(ImageTile::synthetic(id, img, model.label.clone(), None, checkpoint.hash.clone()));
        }
    }
    Ok(out)
}
