//! Images, multi-low-resolution datasets and batch assembly.

mod batch;
mod io;
mod synth;
mod toy;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use batch::{next_batch, BatchSampler, TrainBatch};
pub(crate) use io::write_bytes;
pub use io::{load_dataset, load_png, save_dataset, save_png, INDEX_FILE};
pub use synth::{block_downsample, resize_bilinear, synth_lr};
pub use toy::{make_toy_dataset, ToyOptions};

/// Down-sampling rates used to build the training LR stream.
pub const TRAIN_RATES: [u32; 3] = [2, 3, 4];

/// An RGB image with values in `[0, 1]`, stored as three planes (CHW).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dataset(format!("degenerate image size {height}x{width}")));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Dataset(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Dataset(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from `f(channel, y, x)`, clamping into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Planar CHW values.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let plane = self.height * self.width;
        let mut means = [0.0; 3];
        for (c, m) in means.iter_mut().enumerate() {
            *m = self.data[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        }
        means
    }

    /// Snaps every value to the nearest multiple of 1/255, the grid an 8-bit
    /// PNG can store exactly.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (*v * 255.0).round() / 255.0;
        }
    }
}

/// An image with its identity, camera and down-sampling rate (1 = HR).
/// LR images are stored up-resized to the canonical size.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Image,
    pub identity: usize,
    pub camera: usize,
    pub rate: u32,
}

/// Train split plus a cross-resolution test split: LR queries are matched
/// against an HR gallery of disjoint identities.
///
/// `references` is either empty or holds, for each query, the HR image it was
/// synthesised from. It allows evaluation at arbitrary rates and image
/// quality scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct MlrDataset {
    pub train: Vec<LabeledImage>,
    pub queries: Vec<LabeledImage>,
    pub gallery: Vec<LabeledImage>,
    pub references: Vec<LabeledImage>,
    pub num_identities: usize,
}

impl MlrDataset {
    /// Checks the structural invariants; every constructor and loader calls
    /// this.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self
            .canonical_size()
            .ok_or_else(|| Error::Dataset("dataset has no images".into()))?;
        for img in self.all_images() {
            if (img.pixels.height, img.pixels.width) != (h, w) {
                return Err(Error::Dataset(format!(
                    "image of identity {} is {}x{}, expected canonical {h}x{w}",
                    img.identity, img.pixels.height, img.pixels.width
                )));
            }
            if img.rate == 0 {
                return Err(Error::Dataset("rate must be at least 1".into()));
            }
        }
        let train_ids = self.train_identities();
        if train_ids.len() != self.num_identities {
            return Err(Error::Dataset(format!(
                "num_identities is {} but the train split has {}",
                self.num_identities,
                train_ids.len()
            )));
        }
        let gallery_ids: BTreeSet<usize> = self.gallery.iter().map(|i| i.identity).collect();
        for img in self.queries.iter().chain(&self.gallery) {
            if train_ids.contains_key(&img.identity) {
                return Err(Error::Dataset(format!(
                    "identity {} appears in both train and test splits",
                    img.identity
                )));
            }
        }
        if let Some(q) = self.queries.iter().find(|q| !gallery_ids.contains(&q.identity)) {
            return Err(Error::Dataset(format!("query identity {} has no gallery image", q.identity)));
        }
        if !self.references.is_empty() {
            if self.references.len() != self.queries.len() {
                return Err(Error::Dataset(format!(
                    "{} HR references for {} queries",
                    self.references.len(),
                    self.queries.len()
                )));
            }
            for (q, r) in self.queries.iter().zip(&self.references) {
                if q.identity != r.identity || r.rate != 1 {
                    return Err(Error::Dataset(format!(
                        "reference for query of identity {} is not an HR image of that identity",
                        q.identity
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn canonical_size(&self) -> Option<(usize, usize)> {
        self.all_images().next().map(|i| (i.pixels.height, i.pixels.width))
    }

    pub fn all_images(&self) -> impl Iterator<Item = &LabeledImage> {
        self.train
            .iter()
            .chain(&self.queries)
            .chain(&self.gallery)
            .chain(&self.references)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.queries.len() + self.gallery.len() + self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Train identities mapped to contiguous class indices, in ascending
    /// identity order.
    pub fn train_identities(&self) -> BTreeMap<usize, usize> {
        let ids: BTreeSet<usize> = self.train.iter().map(|i| i.identity).collect();
        ids.into_iter().enumerate().map(|(class, id)| (id, class)).collect()
    }
}

/// Stacks images into an `[n, 3, h, w]` tensor.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Dataset("cannot stack an empty image list".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "images_to_tensor",
                lhs: vec![3, h, w],
                rhs: vec![3, img.height, img.width],
            });
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::from_vec(data, &[images.len(), 3, h, w])
}

/// Splits an `[n, 3, h, w]` tensor back into images, clamping into `[0, 1]`.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let [n, 3, h, w] = t.shape()[..] else {
        return Err(Error::invalid("tensor_to_images", format!("expected [n, 3, h, w], got {:?}", t.shape())));
    };
    let data = t.data();
    Ok((0..n)
        .map(|i| Image {
            height: h,
            width: w,
            data: data[i * 3 * h * w..(i + 1) * 3 * h * w]
                .iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect(),
        })
        .collect())
}
