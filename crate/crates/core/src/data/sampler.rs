use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where the samples of a minibatch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Source,
    PseudoTarget,
}

/// `images` is `[B, H, W, Cin]`; `masks` holds `B·H·W` ids.
#[derive(Clone, Debug)]
pub struct Minibatch {
    pub images: Tensor<f32>,
    pub masks: Vec<u8>,
    pub provenance: Provenance,
    /// Dataset indices of the samples, in batch order.
    pub indices: Vec<usize>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn gather(
        images: &[Tensor<f32>],
        masks: &[&[u8]],
        indices: &[usize],
        provenance: Provenance,
    ) -> Result<Self> {
        let first = images
            .get(*indices.first().ok_or_else(|| Error::Invalid("empty minibatch".into()))?)
            .ok_or_else(|| Error::Invalid("sample index out of range".into()))?;
        let shape = first.shape().to_vec();
        let mut data = Vec::with_capacity(indices.len() * first.numel());
        let mut ys = Vec::with_capacity(indices.len() * first.numel() / first.channels());
        for &i in indices {
            let img = &images[i];
            if img.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "sample {i} is {:?}, batch is {:?}",
                    img.shape(),
                    shape
                )));
            }
            if masks[i].len() != img.numel() / img.channels() {
                return Err(Error::Shape(format!("sample {i}: mask/image dimension mismatch")));
            }
            data.extend_from_slice(img.data());
            ys.extend_from_slice(masks[i]);
        }
        let mut bshape = vec![indices.len()];
        bshape.extend_from_slice(&shape);
        Ok(Minibatch {
            images: Tensor::new(&bshape, data)?,
            masks: ys,
            provenance,
            indices: indices.to_vec(),
        })
    }
}

/// Resumable position of an [`EpochSampler`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    pub epoch: u64,
    pub cursor: usize,
}

/// Visits every index once per epoch in a seeded random order.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    n: usize,
    state: SamplerState,
    order: Vec<usize>,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self::resume(
            n,
            SamplerState {
                seed,
                epoch: 0,
                cursor: 0,
            },
        )
    }

    pub fn resume(n: usize, state: SamplerState) -> Self {
        let mut s = EpochSampler {
            n,
            state,
            order: Vec::new(),
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.state.seed ^ self.state.epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng);
    }

    pub fn state(&self) -> SamplerState {
        self.state
    }

    pub fn next_index(&mut self) -> usize {
        if self.state.cursor >= self.n {
            self.state.epoch += 1;
            self.state.cursor = 0;
            self.shuffle();
        }
        let i = self.order[self.state.cursor];
        self.state.cursor += 1;
        i
    }

    pub fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k).map(|_| self.next_index()).collect()
    }
}

/// A pretraining batch (`target` = None) or a half/half curriculum batch.
#[derive(Clone, Debug)]
pub struct BatchPair {
    pub source: Minibatch,
    pub target: Option<Minibatch>,
}

/// Draws `batch_size` source samples, or `batch_size / 2` from each side
/// when pseudo-labeled target data is given.
pub fn sample_minibatch(
    source: (&[Tensor<f32>], &[&[u8]], &mut EpochSampler),
    target: Option<(&[Tensor<f32>], &[&[u8]], &mut EpochSampler)>,
    batch_size: usize,
) -> Result<BatchPair> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let (s_imgs, s_masks, s_sampler) = source;
    match target {
        None => {
            let idx = s_sampler.take(batch_size);
            Ok(BatchPair {
                source: Minibatch::gather(s_imgs, s_masks, &idx, Provenance::Source)?,
                target: None,
            })
        }
        Some((t_imgs, t_masks, t_sampler)) => {
            if batch_size % 2 != 0 {
                return Err(Error::Invalid(format!(
                    "curriculum batches split half/half; batch size {batch_size} is odd"
                )));
            }
            let half = batch_size / 2;
            let si = s_sampler.take(half);
            let ti = t_sampler.take(half);
            Ok(BatchPair {
                source: Minibatch::gather(s_imgs, s_masks, &si, Provenance::Source)?,
                target: Some(Minibatch::gather(t_imgs, t_masks, &ti, Provenance::PseudoTarget)?),
            })
        }
    }
}
