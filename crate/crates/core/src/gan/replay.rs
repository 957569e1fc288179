//! History buffer of generated images shown to the discriminators.

use polypforge_nn::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Until full, every query is stored and returned unchanged. Once full, each
/// query returns, with probability ½, a uniformly chosen stored image (which
/// the query replaces), and otherwise the query itself.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    images: Vec<Tensor<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReplayBuffer { capacity, images: Vec::with_capacity(capacity), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn query(&mut self, image: Tensor<T>) -> Tensor<T> {
        if self.capacity == 0 {
            return image;
        }
        if self.images.len() < self.capacity {
            self.images.push(image.clone());
            return image;
        }
        if self.rng.random_bool(0.5) {
            let i = self.rng.random_range(0..self.capacity);
            std::mem::replace(&mut self.images[i], image)
        } else {
            image
        }
    }

    /// Applies [`ReplayBuffer::query`] to each sample of an `[N, ...]` batch.
    pub fn query_batch(&mut self, batch: &Tensor<T>) -> Tensor<T> {
        let n = batch.shape()[0];
        let parts: Vec<Tensor<T>> = (0..n).map(|i| self.query(batch.select_batch(&[i]))).collect();
        Tensor::stack_batch(&parts).expect("samples share a shape")
    }
}
