//! Unpaired image translation with a cycle-consistent GAN, and a
//! noise-seeded DCGAN baseline.

mod cyclegan;
mod dcgan;
mod loss;
mod nets;
mod replay;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use polypforge_nn::container::content_hash;
use polypforge_nn::NnError;

pub use cyclegan::{
    build_cyclegan, continue_training, train_cyclegan, translate, CycleGan, Direction, Domains, GanConfig,
    GanLossRecord, GanRun, GeneratorMap,
};
pub use dcgan::{build_dcgan, sample_dcgan, train_dcgan, Dcgan, DcganConfig, DcganLossRecord, DcganRun};
pub use loss::{
    adversarial_loss, adversarial_term, cycle_consistency_loss, generator_objective, l1_term, AdversarialLoss,
    GeneratorObjective, IdentityMap, ImageMap, LossWeights, Target,
};
pub use nets::{
    CycleNets, DcganDiscriminator, DcganGenerator, DcganLayout, DiscriminatorArch, GeneratorArch, PatchDiscriminator,
    ResnetGenerator,
};
pub use replay::ReplayBuffer;

#[derive(Debug, thiserror::Error)]
pub enum GanError {
    #[error("invalid GAN config `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("the {0} domain has no tiles")]
    EmptyDomain(&'static str),
    #[error("tile `{id}` is {width}x{height}, expected {expected}x{expected}")]
    SizeMismatch { id: String, width: u32, height: u32, expected: u32 },
    #[error("non-finite {what} at epoch {epoch}, iteration {iteration}")]
    NonFiniteLoss { epoch: usize, iteration: usize, what: &'static str, last_good: Option<Box<Checkpoint>> },
    #[error("non-finite values in {0}")]
    NonFiniteInput(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint `{}` does not exist", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = GanError> = std::result::Result<T, E>;

pub(crate) fn invalid(field: &'static str, message: impl Into<String>) -> GanError {
    GanError::InvalidConfig { field, message: message.into() }
}

/// A serialized model at a given epoch, identified by the hash of its bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub hash: String,
    bytes: Arc<Vec<u8>>,
}

impl Checkpoint {
    pub fn from_bytes(epoch: usize, bytes: Vec<u8>) -> Self {
        Checkpoint { epoch, hash: content_hash(&bytes), bytes: Arc::new(bytes) }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.bytes())?)
    }

    /// Reads a checkpoint written by [`Checkpoint::save`]; the epoch comes
    /// from the embedded metadata.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(GanError::MissingCheckpoint(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        let c = polypforge_nn::container::Container::<f32>::decode(&bytes)?;
        let epoch = c.meta["epoch"].as_u64().ok_or_else(|| GanError::Checkpoint("missing epoch".into()))? as usize;
        Ok(Checkpoint::from_bytes(epoch, bytes))
    }
}

/// Linear decay to zero over the last half of training.
pub(crate) fn decayed_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let decay = epochs / 2;
    let constant = epochs - decay;
    let into_decay = (epoch + 1).saturating_sub(constant) as f64;
    base * (1.0 - into_decay / (decay as f64 + 1.0))
}

/// Epoch-cycling sampler: shuffled order, reshuffled on every wrap.
pub(crate) struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl Cycler {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Cycler { order, pos: 0, rng }
    }

    pub(crate) fn take(&mut self, k: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
