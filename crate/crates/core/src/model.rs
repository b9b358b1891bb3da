//! The assembled network: cross-resolution encoder E, HR decoder G, the two
//! discriminators, the HR encoder F and the identity classifier C.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crgan::{Decoder, Encoded, Encoder, FeatureDiscriminator, ImageDiscriminator};
use crate::data::{images_to_tensor, Image};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mode};
use crate::reid::FeatureMode;
use crate::tensor::{Param, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    /// Stride-2 encoder stages; the last width is the feature depth d.
    pub encoder_channels: Vec<usize>,
    /// Merge widths, deepest first, one per encoder stage but the last.
    pub decoder_channels: Vec<usize>,
    pub feature_disc_channels: Vec<usize>,
    pub image_disc_channels: Vec<usize>,
    pub num_identities: usize,
    pub feature_mode: FeatureMode,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 16,
            encoder_channels: vec![16, 32, 64, 64],
            decoder_channels: vec![32, 16, 8],
            feature_disc_channels: vec![32, 32],
            image_disc_channels: vec![16, 32, 32],
            num_identities: 20,
            feature_mode: FeatureMode::Joint,
        }
    }
}

impl ArchConfig {
    pub fn feature_depth(&self) -> usize {
        self.encoder_channels.last().copied().unwrap_or(0)
    }

    /// Spatial size of the encoder output.
    pub fn feature_size(&self) -> (usize, usize) {
        let down = |mut s: usize| {
            for _ in &self.encoder_channels {
                s = (s + 2 - 3) / 2 + 1;
            }
            s
        };
        (down(self.height), down(self.width))
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("image size {}x{} is degenerate", self.height, self.width)));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config(format!("invalid encoder channels {:?}", self.encoder_channels)));
        }
        if self.decoder_channels.len() + 1 != self.encoder_channels.len() || self.decoder_channels.contains(&0) {
            return Err(Error::Config(format!(
                "decoder channels {:?} must give one positive width per encoder stage but the last ({} expected)",
                self.decoder_channels,
                self.encoder_channels.len() - 1
            )));
        }
        if self.feature_disc_channels.contains(&0) || self.image_disc_channels.contains(&0) {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        if self.num_identities < 2 {
            return Err(Error::Config(format!(
                "classifier needs at least 2 identities, got {}",
                self.num_identities
            )));
        }
        Ok(())
    }
}

/// Everything one forward pass of `E -> G -> F -> C` produces.
#[derive(Clone, Debug)]
pub struct JointOutput {
    /// `f = E(x)` with the encoder skips.
    pub encoded: Encoded,
    /// `G(f)`, the recovered HR image.
    pub recovered: Tensor,
    /// `g = F(G(f))`; absent in f-only mode.
    pub g: Option<Tensor>,
    /// Classifier input `[f, g]` (or one of them).
    pub v: Tensor,
    /// `u = GAP(v)`, `[n, width]`.
    pub u: Tensor,
    /// Softmax class probabilities, `[n, num_identities]`.
    pub probs: Tensor,
}

impl JointOutput {
    pub fn f(&self) -> &Tensor {
        &self.encoded.features
    }
}

#[derive(Debug)]
pub struct CadNet {
    pub arch: ArchConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub feature_disc: FeatureDiscriminator,
    pub image_disc: ImageDiscriminator,
    pub hr_encoder: Encoder,
    pub classifier: Linear,
}

impl CadNet {
    pub fn new(arch: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let d = arch.feature_depth();
        let encoder = Encoder::new("E", 3, &arch.encoder_channels, rng)?;
        let skips = &arch.encoder_channels[..arch.encoder_channels.len() - 1];
        let decoder = Decoder::new("G", d, skips, &arch.decoder_channels, (arch.height, arch.width), rng)?;
        let feature_disc = FeatureDiscriminator::new("DF", d, &arch.feature_disc_channels, rng)?;
        let image_disc = ImageDiscriminator::new("DI", &arch.image_disc_channels, rng)?;
        let hr_encoder = Encoder::new("F", 3, &arch.encoder_channels, rng)?;
        let classifier = Linear::new("C", arch.feature_mode.width(d), arch.num_identities, rng)?;
        Ok(Self {
            arch,
            encoder,
            decoder,
            feature_disc,
            image_disc,
            hr_encoder,
            classifier,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match x.shape() {
            [_, 3, h, w] if (*h, *w) == (self.arch.height, self.arch.width) => Ok(()),
            other => Err(Error::invalid(
                "encode",
                format!(
                    "expected [n, 3, {}, {}] input, got {other:?}",
                    self.arch.height, self.arch.width
                ),
            )),
        }
    }

    pub fn encode(&self, x: &Tensor, mode: Mode) -> Result<Encoded> {
        self.check_input(x)?;
        self.encoder.forward(x, mode)
    }

    pub fn decode(&self, encoded: &Encoded, mode: Mode) -> Result<Tensor> {
        self.decoder.forward(encoded, mode)
    }

    /// `f = E(x)`, `g = F(G(f))`, `v = [f, g]`, `u = GAP(v)`,
    /// `probs = softmax(C(u))`.
    pub fn joint_forward(&self, x: &Tensor, mode: Mode) -> Result<JointOutput> {
        let encoded = self.encode(x, mode)?;
        let recovered = self.decode(&encoded, mode)?;
        let f = &encoded.features;
        let g = match self.arch.feature_mode {
            FeatureMode::FOnly => None,
            _ => Some(self.hr_encoder.forward(&recovered, mode)?.features),
        };
        let v = match (self.arch.feature_mode, &g) {
            (FeatureMode::Joint, Some(g)) => Tensor::concat(&[f.clone(), g.clone()])?,
            (FeatureMode::GOnly, Some(g)) => g.clone(),
            _ => f.clone(),
        };
        let u = v.global_avg_pool()?;
        let probs = self.classifier.forward(&u, mode)?.softmax()?;
        Ok(JointOutput {
            encoded,
            recovered,
            g,
            v,
            u,
            probs,
        })
    }

    /// Untaped embeddings of a set of images: `(w, u)` per image, where
    /// `w = GAP(f)`.
    pub fn embed(&self, images: &[&Image]) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = images_to_tensor(images)?;
        let out = self.joint_forward(&x, Mode::Frozen)?;
        let w = out.f().global_avg_pool()?;
        let (wd, ud) = (w.shape()[1], out.u.shape()[1]);
        let (w, u) = (w.to_vec(), out.u.to_vec());
        Ok((0..images.len())
            .map(|i| (w[i * wd..(i + 1) * wd].to_vec(), u[i * ud..(i + 1) * ud].to_vec()))
            .collect())
    }

    /// `G(E(x))` without recording a graph.
    pub fn recover(&self, images: &[&Image]) -> Result<Tensor> {
        let x = images_to_tensor(images)?;
        let encoded = self.encode(&x, Mode::Frozen)?;
        self.decode(&encoded, Mode::Frozen)
    }

    /// Parameters updated by the main step: E, G, F and C.
    pub fn main_params(&self) -> Vec<&Param> {
        let mut ps = self.encoder.params();
        ps.extend(self.decoder.params());
        ps.extend(self.hr_encoder.params());
        ps.extend(self.classifier.params());
        ps
    }

    pub fn main_params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.encoder.params_mut();
        ps.extend(self.decoder.params_mut());
        ps.extend(self.hr_encoder.params_mut());
        ps.extend(self.classifier.params_mut());
        ps
    }

    /// All parameters in a fixed order: main, then D_F, then D_I.
    pub fn params(&self) -> Vec<&Param> {
        let mut ps = self.main_params();
        ps.extend(self.feature_disc.params());
        ps.extend(self.image_disc.params());
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.encoder.params_mut();
        ps.extend(self.decoder.params_mut());
        ps.extend(self.hr_encoder.params_mut());
        ps.extend(self.classifier.params_mut());
        ps.extend(self.feature_disc.params_mut());
        ps.extend(self.image_disc.params_mut());
        ps
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.value.zero_grad();
        }
    }

    /// Copies of every parameter's values, by name.
    pub fn snapshot(&self) -> Vec<(String, Vec<f32>)> {
        self.params().into_iter().map(|p| (p.name.clone(), p.data())).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }
}
