//! Cross-resolution GAN: the shared encoder, the skip-connected HR decoder,
//! both discriminators, and the three losses that train them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Mode, LEAKY_SLOPE};
use crate::tensor::{Param, Tensor};

/// Discriminator probabilities are clamped to `[DISC_EPS, 1 - DISC_EPS]`
/// before any logarithm.
pub const DISC_EPS: f32 = 1e-7;

/// Stack of stride-2 3×3 convolutions, each followed by a leaky ReLU.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub stages: Vec<Conv2d>,
}

/// Encoder output: the final feature map plus the activation of every
/// earlier stage, shallowest first, for the decoder's skip connections.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub features: Tensor,
    pub skips: Vec<Tensor>,
}

impl Encoder {
    pub fn new(name: &str, in_channels: usize, channels: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut stages = Vec::with_capacity(channels.len());
        let mut prev = in_channels;
        for (i, &c) in channels.iter().enumerate() {
            stages.push(Conv2d::new(&format!("{name}.stage{i}"), prev, c, 3, 2, 1, rng)?);
            prev = c;
        }
        Ok(Self { stages })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Encoded> {
        let mut acts = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for stage in &self.stages {
            h = stage.forward(&h, mode)?.leaky_relu(LEAKY_SLOPE);
            acts.push(h.clone());
        }
        let features = acts.pop().expect("encoder has at least one stage");
        Ok(Encoded { features, skips: acts })
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, Conv2d::out_channels)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.stages.iter().flat_map(Conv2d::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.stages.iter_mut().flat_map(Conv2d::params_mut).collect()
    }
}

/// Mirrors the encoder: at each level the running map is bilinearly
/// up-sampled to the matching encoder stage, concatenated with it along
/// channels, and mixed by a 3×3 convolution. A last up-sample to the image
/// size and a 3-channel convolution with a sigmoid produce the image.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub merges: Vec<Conv2d>,
    pub output: Conv2d,
    pub height: usize,
    pub width: usize,
}

impl Decoder {
    /// `skip_channels` lists the encoder stage widths shallowest first,
    /// excluding the final feature stage.
    pub fn new(
        name: &str,
        feature_channels: usize,
        skip_channels: &[usize],
        channels: &[usize],
        (height, width): (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels.len() != skip_channels.len() {
            return Err(Error::Config(format!(
                "decoder needs {} merge widths (one per skip), got {}",
                skip_channels.len(),
                channels.len()
            )));
        }
        let mut merges = Vec::with_capacity(channels.len());
        let mut prev = feature_channels;
        for (i, (&skip, &c)) in skip_channels.iter().rev().zip(channels).enumerate() {
            merges.push(Conv2d::new(&format!("{name}.merge{i}"), prev + skip, c, 3, 1, 1, rng)?);
            prev = c;
        }
        let output = Conv2d::new(&format!("{name}.out"), prev, 3, 3, 1, 1, rng)?;
        Ok(Self {
            merges,
            output,
            height,
            width,
        })
    }

    pub fn forward(&self, encoded: &Encoded, mode: Mode) -> Result<Tensor> {
        if encoded.skips.len() != self.merges.len() {
            return Err(Error::invalid(
                "decode",
                format!("expected {} skip maps, got {}", self.merges.len(), encoded.skips.len()),
            ));
        }
        let mut h = encoded.features.clone();
        for (merge, skip) in self.merges.iter().zip(encoded.skips.iter().rev()) {
            let [_, _, sh, sw] = skip.shape()[..] else {
                return Err(Error::invalid("decode", format!("skip map has shape {:?}", skip.shape())));
            };
            h = h.bilinear_resize(sh, sw)?;
            h = Tensor::concat(&[h, skip.clone()])?;
            h = merge.forward(&h, mode)?.leaky_relu(LEAKY_SLOPE);
        }
        h = h.bilinear_resize(self.height, self.width)?;
        Ok(self.output.forward(&h, mode)?.sigmoid())
    }

    pub fn params(&self) -> Vec<&Param> {
        self.merges.iter().chain([&self.output]).flat_map(Conv2d::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.merges
            .iter_mut()
            .chain([&mut self.output])
            .flat_map(Conv2d::params_mut)
            .collect()
    }
}

/// Patch discriminator on feature maps: stride-1 3×3 convolutions ending in
/// a one-channel sigmoid map, one probability per spatial position.
#[derive(Debug, Clone)]
pub struct FeatureDiscriminator {
    pub layers: Vec<Conv2d>,
}

impl FeatureDiscriminator {
    pub fn new(name: &str, in_channels: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = in_channels;
        for (i, &c) in hidden.iter().chain([&1]).enumerate() {
            layers.push(Conv2d::new(&format!("{name}.conv{i}"), prev, c, 3, 1, 1, rng)?);
            prev = c;
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, features: &Tensor, mode: Mode) -> Result<Tensor> {
        conv_chain(&self.layers, features, mode).map(|t| t.sigmoid())
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Conv2d::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Conv2d::params_mut).collect()
    }
}

/// Image discriminator: stride-2 3×3 convolutions down to one channel,
/// global average pooling, sigmoid. Output is `[N, 1]`.
#[derive(Debug, Clone)]
pub struct ImageDiscriminator {
    pub layers: Vec<Conv2d>,
}

impl ImageDiscriminator {
    pub fn new(name: &str, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = 3;
        for (i, &c) in hidden.iter().chain([&1]).enumerate() {
            layers.push(Conv2d::new(&format!("{name}.conv{i}"), prev, c, 3, 2, 1, rng)?);
            prev = c;
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(conv_chain(&self.layers, images, mode)?.global_avg_pool()?.sigmoid())
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Conv2d::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Conv2d::params_mut).collect()
    }
}

/// Convolutions with leaky ReLU between them (none after the last).
fn conv_chain(layers: &[Conv2d], x: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(&h, mode)?;
        if i + 1 < layers.len() {
            h = h.leaky_relu(LEAKY_SLOPE);
        }
    }
    Ok(h)
}

fn mean_log(p: &Tensor) -> Tensor {
    p.clamp(DISC_EPS, 1.0 - DISC_EPS).log().mean()
}

fn mean_log_one_minus(p: &Tensor) -> Tensor {
    p.clamp(DISC_EPS, 1.0 - DISC_EPS).neg().add_scalar(1.0).log().mean()
}

/// Negated feature-level adversarial objective,
/// `-(E[log D_F(f_H)] + E[log(1 - D_F(f_L))])`, from discriminator outputs.
/// Minimising it is the discriminator's side of the game.
pub fn feature_disc_loss(p_hr: &Tensor, p_lr: &Tensor) -> Result<Tensor> {
    if p_hr.shape() != p_lr.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_adv_feature",
            lhs: p_hr.shape().to_vec(),
            rhs: p_lr.shape().to_vec(),
        });
    }
    Ok(mean_log(p_hr).add(&mean_log_one_minus(p_lr))?.neg())
}

/// Non-saturating encoder objective: `-E[log D_F(f_L)]`.
pub fn feature_gen_loss(p_lr: &Tensor) -> Tensor {
    mean_log(p_lr).neg()
}

/// Negated image-level adversarial objective. The real term is weighted by
/// `real_weight`; the full objective counts `E[log D_I(x_H)]` twice, so the
/// default is 2.
pub fn image_disc_loss(p_real: &Tensor, p_rec_lr: &Tensor, p_rec_hr: &Tensor, real_weight: f32) -> Result<Tensor> {
    if p_rec_lr.shape() != p_rec_hr.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_adv_image",
            lhs: p_rec_lr.shape().to_vec(),
            rhs: p_rec_hr.shape().to_vec(),
        });
    }
    let objective = mean_log(p_real)
        .scale(real_weight)
        .add(&mean_log_one_minus(p_rec_lr))?
        .add(&mean_log_one_minus(p_rec_hr))?;
    Ok(objective.neg())
}

/// Non-saturating decoder objective: `-E[log D_I(G(f_L))] - E[log D_I(G(f_H))]`.
pub fn image_gen_loss(p_rec_lr: &Tensor, p_rec_hr: &Tensor) -> Result<Tensor> {
    Ok(mean_log(p_rec_lr).add(&mean_log(p_rec_hr))?.neg())
}

/// `mean|G(f_H) - x_H| + mean|G(f_L) - x_H'|` where `x_H'` is the HR source
/// each LR sample was synthesised from.
pub fn reconstruction_loss(rec_hr: &Tensor, hr: &Tensor, rec_lr: &Tensor, lr_target: &Tensor) -> Result<Tensor> {
    let hr_term = rec_hr.sub(hr)?.l1_mean();
    let lr_term = rec_lr.sub(lr_target)?.l1_mean();
    hr_term.add(&lr_term)
}
