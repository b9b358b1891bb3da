use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::{synth_lr, Image, LabeledImage, MlrDataset, TRAIN_RATES};
use crate::error::{Error, Result};

/// One training batch: an HR stream and a synthesised-LR stream with the same
/// label multiset, independently shuffled. `lr_targets[i]` is the HR image
/// `lr[i]` was synthesised from.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub hr: Vec<LabeledImage>,
    pub lr: Vec<LabeledImage>,
    pub lr_targets: Vec<Image>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    pub fn hr_labels(&self) -> Vec<usize> {
        self.hr.iter().map(|i| i.identity).collect()
    }

    pub fn lr_labels(&self) -> Vec<usize> {
        self.lr.iter().map(|i| i.identity).collect()
    }
}

/// Identity-balanced (P identities × K samples) sampler over the train split.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSampler {
    pub identities: usize,
    pub per_identity: usize,
    pub rates: Vec<u32>,
}

impl BatchSampler {
    pub fn new(identities: usize, per_identity: usize) -> Self {
        Self {
            identities,
            per_identity,
            rates: TRAIN_RATES.to_vec(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.identities * self.per_identity
    }

    pub fn sample(&self, dataset: &MlrDataset, rng: &mut impl Rng) -> Result<TrainBatch> {
        let (p, k) = (self.identities, self.per_identity);
        if p < 2 || k < 2 {
            return Err(Error::Dataset(format!(
                "batches need at least 2 identities with 2 samples each, got P={p} K={k}"
            )));
        }
        if self.rates.is_empty() || self.rates.iter().any(|&r| r < 2) {
            return Err(Error::Dataset(format!("invalid LR rates {:?}", self.rates)));
        }
        let mut by_id: BTreeMap<usize, Vec<&LabeledImage>> = BTreeMap::new();
        for img in &dataset.train {
            by_id.entry(img.identity).or_default().push(img);
        }
        if by_id.len() < p {
            return Err(Error::Dataset(format!(
                "batch needs {p} identities but the train split has {}",
                by_id.len()
            )));
        }
        let ids: Vec<usize> = by_id.keys().copied().collect();
        let mut hr = Vec::with_capacity(p * k);
        let mut lr = Vec::with_capacity(p * k);
        for pick in index::sample(rng, ids.len(), p) {
            let pool = &by_id[&ids[pick]];
            for img in draw(pool, k, rng) {
                hr.push(img.clone());
            }
            for img in draw(pool, k, rng) {
                let rate = *self.rates.choose(rng).expect("non-empty");
                lr.push((synth_lr(img, rate)?, img.pixels.clone()));
            }
        }
        hr.shuffle(rng);
        lr.shuffle(rng);
        let (lr, lr_targets) = lr.into_iter().unzip();
        Ok(TrainBatch { hr, lr, lr_targets })
    }
}

/// `k` samples without replacement when the pool allows it.
fn draw<'a>(pool: &[&'a LabeledImage], k: usize, rng: &mut impl Rng) -> Vec<&'a LabeledImage> {
    if pool.len() >= k {
        index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    }
}

/// Draws one P×K batch with LR rates from the training set of rates.
pub fn next_batch(
    dataset: &MlrDataset,
    batch_size: usize,
    (p, k): (usize, usize),
    rng: &mut impl Rng,
) -> Result<TrainBatch> {
    if batch_size != p * k {
        return Err(Error::Dataset(format!("batch size {batch_size} is not P*K = {p}*{k}")));
    }
    BatchSampler::new(p, k).sample(dataset, rng)
}
