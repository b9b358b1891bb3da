//! Alternating optimisation of the full objective: feature discriminator,
//! image discriminator, then the main networks, once per batch.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crgan::{feature_disc_loss, feature_gen_loss, image_disc_loss, image_gen_loss, reconstruction_loss};
use crate::data::{images_to_tensor, BatchSampler, Image, MlrDataset, TrainBatch};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, CadNet, JointOutput};
use crate::nn::Mode;
use crate::reid::{identity_loss, triplet_loss, FeatureMode};
use crate::tensor::{sgd_step, SgdConfig, Tensor};

pub use checkpoint::{Checkpoint, CHECKPOINT_EXTENSION};

/// Switches for the ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_adv_feature: bool,
    pub no_adv_image: bool,
    pub no_rec: bool,
    pub no_cls: bool,
    pub f_only: bool,
    pub g_only: bool,
}

impl Ablation {
    pub fn feature_mode(&self) -> Result<FeatureMode> {
        match (self.f_only, self.g_only) {
            (true, true) => Err(Error::Config("f_only and g_only are mutually exclusive".into())),
            (true, false) => Ok(FeatureMode::FOnly),
            (false, true) => Ok(FeatureMode::GOnly),
            (false, false) => Ok(FeatureMode::Joint),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub lambda_adv_feature: f32,
    pub lambda_rec: f32,
    pub lambda_adv_image: f32,
    pub margin: f32,
    /// Weight of the real-image term in the image discriminator objective.
    pub image_adv_real_weight: f32,
    pub main: SgdConfig,
    pub disc: SgdConfig,
    /// P identities per batch.
    pub identities_per_batch: usize,
    /// K samples per identity and stream.
    pub samples_per_identity: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            lambda_adv_feature: 1.0,
            lambda_rec: 1.0,
            lambda_adv_image: 1.0,
            margin: 2.0,
            image_adv_real_weight: 2.0,
            main: SgdConfig {
                learning_rate: 1e-3,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            disc: SgdConfig {
                learning_rate: 1e-4,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            identities_per_batch: 8,
            samples_per_identity: 2,
            epochs: 200,
            seed: 0,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        for (name, v) in [
            ("lambda_adv_feature", self.lambda_adv_feature),
            ("lambda_rec", self.lambda_rec),
            ("lambda_adv_image", self.lambda_adv_image),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if ![1.0, 2.0].contains(&self.image_adv_real_weight) {
            return Err(Error::Config(format!(
                "image_adv_real_weight must be 1 or 2, got {}",
                self.image_adv_real_weight
            )));
        }
        SgdConfig::new(self.main.learning_rate, self.main.momentum, self.main.weight_decay)?;
        SgdConfig::new(self.disc.learning_rate, self.disc.momentum, self.disc.weight_decay)?;
        if self.identities_per_batch < 2 || self.samples_per_identity < 2 {
            return Err(Error::Config(format!(
                "batches need P >= 2 and K >= 2, got P={} K={}",
                self.identities_per_batch, self.samples_per_identity
            )));
        }
        self.ablation.feature_mode()?;
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.identities_per_batch * self.samples_per_identity
    }

    pub fn feature_adv_active(&self) -> bool {
        self.lambda_adv_feature > 0.0 && !self.ablation.no_adv_feature
    }

    pub fn image_adv_active(&self) -> bool {
        self.lambda_adv_image > 0.0 && !self.ablation.no_adv_image
    }

    pub fn rec_active(&self) -> bool {
        self.lambda_rec > 0.0 && !self.ablation.no_rec
    }

    pub fn cls_active(&self) -> bool {
        !self.ablation.no_cls
    }
}

/// Independent RNG streams derived from the root seed.
pub mod seeds {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const GALLERY: u64 = 3;
    const BATCH_BASE: u64 = 1 << 32;

    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn derive(seed: u64, stream: u64) -> u64 {
        splitmix(seed ^ splitmix(stream))
    }

    pub fn batches(seed: u64, epoch: usize) -> u64 {
        derive(seed, BATCH_BASE + epoch as u64)
    }
}

/// Loss values of one step; discriminator terms are measured before their
/// update, main terms before the main update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub id: f32,
    pub tri: f32,
    pub rec: f32,
    pub adv_f_d: f32,
    pub adv_f_g: f32,
    pub adv_i_d: f32,
    pub adv_i_g: f32,
    pub total: f32,
}

impl StepReport {
    fn values(&self) -> [f32; 8] {
        [
            self.id,
            self.tri,
            self.rec,
            self.adv_f_d,
            self.adv_f_g,
            self.adv_i_d,
            self.adv_i_g,
            self.total,
        ]
    }

    fn mean(reports: &[StepReport]) -> StepReport {
        let mut acc = [0.0f64; 8];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v as f64;
            }
        }
        let n = reports.len().max(1) as f64;
        let m = acc.map(|a| (a / n) as f32);
        StepReport {
            id: m[0],
            tri: m[1],
            rec: m[2],
            adv_f_d: m[3],
            adv_f_g: m[4],
            adv_i_d: m[5],
            adv_i_g: m[6],
            total: m[7],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub losses: StepReport,
}

pub const TELEMETRY_HEADER: &str = "epoch,L_id,L_tri,L_rec,L_advF_d,L_advF_g,L_advI_d,L_advI_g,total";

pub fn telemetry_csv(rows: &[EpochReport]) -> String {
    let mut out = String::from(TELEMETRY_HEADER);
    out.push('\n');
    for row in rows {
        write!(out, "{}", row.epoch).expect("write to string");
        for v in row.losses.values() {
            write!(out, ",{v}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

/// Forward state of one batch through `E -> G -> F -> C` for both streams.
pub struct Streams {
    pub hr: JointOutput,
    pub lr: JointOutput,
    pub x_hr: Tensor,
    pub lr_target: Tensor,
    pub hr_ids: Vec<usize>,
    pub lr_ids: Vec<usize>,
    pub hr_classes: Vec<usize>,
    pub lr_classes: Vec<usize>,
}

fn finite(term: &'static str, t: &Tensor) -> Result<f32> {
    let v = t.item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { term, value: v })
    }
}

fn class_labels(ids: &[usize], classes: &BTreeMap<usize, usize>) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            classes
                .get(id)
                .copied()
                .ok_or_else(|| Error::Dataset(format!("identity {id} is not a training identity")))
        })
        .collect()
}

pub fn forward_streams(model: &CadNet, batch: &TrainBatch, classes: &BTreeMap<usize, usize>) -> Result<Streams> {
    let stack = |imgs: &[&Image]| images_to_tensor(imgs);
    let x_hr = stack(&batch.hr.iter().map(|i| &i.pixels).collect::<Vec<_>>())?;
    let x_lr = stack(&batch.lr.iter().map(|i| &i.pixels).collect::<Vec<_>>())?;
    let lr_target = stack(&batch.lr_targets.iter().collect::<Vec<_>>())?;
    let hr_ids = batch.hr_labels();
    let lr_ids = batch.lr_labels();
    Ok(Streams {
        hr: model.joint_forward(&x_hr, Mode::Train)?,
        lr: model.joint_forward(&x_lr, Mode::Train)?,
        x_hr,
        lr_target,
        hr_classes: class_labels(&hr_ids, classes)?,
        lr_classes: class_labels(&lr_ids, classes)?,
        hr_ids,
        lr_ids,
    })
}

/// Updates D_F on detached features. Returns its loss, or 0 when the term is
/// switched off (no forward is run then).
pub fn feature_disc_step(model: &mut CadNet, streams: &Streams, cfg: &TrainConfig) -> Result<f32> {
    if !cfg.feature_adv_active() {
        return Ok(0.0);
    }
    model.zero_grad();
    let p_hr = model.feature_disc.forward(&streams.hr.f().detach(), Mode::Train)?;
    let p_lr = model.feature_disc.forward(&streams.lr.f().detach(), Mode::Train)?;
    let loss = feature_disc_loss(&p_hr, &p_lr)?;
    let value = finite("L_advF_d", &loss)?;
    loss.backward()?;
    sgd_step(model.feature_disc.params_mut(), &cfg.disc)?;
    Ok(value)
}

/// Updates D_I on real HR images against detached recoveries.
pub fn image_disc_step(model: &mut CadNet, streams: &Streams, cfg: &TrainConfig) -> Result<f32> {
    if !cfg.image_adv_active() {
        return Ok(0.0);
    }
    model.zero_grad();
    let p_real = model.image_disc.forward(&streams.x_hr, Mode::Train)?;
    let p_rec_lr = model.image_disc.forward(&streams.lr.recovered.detach(), Mode::Train)?;
    let p_rec_hr = model.image_disc.forward(&streams.hr.recovered.detach(), Mode::Train)?;
    let loss = image_disc_loss(&p_real, &p_rec_lr, &p_rec_hr, cfg.image_adv_real_weight)?;
    let value = finite("L_advI_d", &loss)?;
    loss.backward()?;
    sgd_step(model.image_disc.params_mut(), &cfg.disc)?;
    Ok(value)
}

/// Main-objective terms; discriminators are read but not recorded.
pub struct MainLosses {
    pub id: Option<Tensor>,
    pub tri: Option<Tensor>,
    pub rec: Option<Tensor>,
    pub adv_f_g: Option<Tensor>,
    pub adv_i_g: Option<Tensor>,
    pub total: Option<Tensor>,
}

pub fn main_losses(model: &CadNet, streams: &Streams, cfg: &TrainConfig) -> Result<MainLosses> {
    let (id, tri) = if cfg.cls_active() {
        // both streams have B samples, so the mean of the two means is the
        // mean over all 2B predictions
        let id = identity_loss(&streams.hr.probs, &streams.hr_classes)?
            .add(&identity_loss(&streams.lr.probs, &streams.lr_classes)?)?
            .scale(0.5);
        let tri = triplet_loss(&streams.hr.u, &streams.hr_ids, &streams.lr.u, &streams.lr_ids, cfg.margin)?;
        (Some(id), Some(tri))
    } else {
        (None, None)
    };
    let rec = cfg
        .rec_active()
        .then(|| {
            reconstruction_loss(
                &streams.hr.recovered,
                &streams.x_hr,
                &streams.lr.recovered,
                &streams.lr_target,
            )
        })
        .transpose()?;
    let adv_f_g = cfg
        .feature_adv_active()
        .then(|| model.feature_disc.forward(streams.lr.f(), Mode::Frozen).map(|p| feature_gen_loss(&p)))
        .transpose()?;
    let adv_i_g = cfg
        .image_adv_active()
        .then(|| -> Result<Tensor> {
            let p_lr = model.image_disc.forward(&streams.lr.recovered, Mode::Frozen)?;
            let p_hr = model.image_disc.forward(&streams.hr.recovered, Mode::Frozen)?;
            image_gen_loss(&p_lr, &p_hr)
        })
        .transpose()?;

    let mut total: Option<Tensor> = None;
    let weighted = [
        (&id, 1.0),
        (&tri, 1.0),
        (&rec, cfg.lambda_rec),
        (&adv_f_g, cfg.lambda_adv_feature),
        (&adv_i_g, cfg.lambda_adv_image),
    ];
    for (term, w) in weighted {
        if let Some(t) = term {
            let t = if w == 1.0 { t.clone() } else { t.scale(w) };
            total = Some(match total {
                Some(acc) => acc.add(&t)?,
                None => t,
            });
        }
    }
    Ok(MainLosses {
        id,
        tri,
        rec,
        adv_f_g,
        adv_i_g,
        total,
    })
}

/// Minimises the main objective over E, G, F and C. Parameters the objective
/// does not reach are left untouched.
pub fn main_step(model: &mut CadNet, streams: &Streams, cfg: &TrainConfig) -> Result<StepReport> {
    let losses = main_losses(model, streams, cfg)?;
    let value = |term, t: &Option<Tensor>| t.as_ref().map_or(Ok(0.0), |t| finite(term, t));
    let report = StepReport {
        id: value("L_id", &losses.id)?,
        tri: value("L_tri", &losses.tri)?,
        rec: value("L_rec", &losses.rec)?,
        adv_f_g: value("L_advF_g", &losses.adv_f_g)?,
        adv_i_g: value("L_advI_g", &losses.adv_i_g)?,
        total: value("total", &losses.total)?,
        ..StepReport::default()
    };
    if let Some(total) = losses.total.filter(|t| t.requires_grad_flag()) {
        model.zero_grad();
        total.backward()?;
        let reached = model.main_params_mut().into_iter().filter(|p| p.value.grad().is_some());
        sgd_step(reached, &cfg.main)?;
    }
    Ok(report)
}

/// One full alternating step on a batch.
pub fn train_step(
    model: &mut CadNet,
    batch: &TrainBatch,
    classes: &BTreeMap<usize, usize>,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let streams = forward_streams(model, batch, classes)?;
    let adv_f_d = feature_disc_step(model, &streams, cfg)?;
    let adv_i_d = image_disc_step(model, &streams, cfg)?;
    let report = main_step(model, &streams, cfg)?;
    model.zero_grad();
    Ok(StepReport {
        adv_f_d,
        adv_i_d,
        ..report
    })
}

/// Training state: model, resolved configuration and completed epochs.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: CadNet,
    pub epoch: usize,
    classes: BTreeMap<usize, usize>,
}

impl Trainer {
    /// Fresh model. The classifier width and feature mode are taken from
    /// the dataset and the ablation switches.
    pub fn new(mut config: TrainConfig, dataset: &MlrDataset) -> Result<Self> {
        config.arch.num_identities = dataset.num_identities;
        config.arch.feature_mode = config.ablation.feature_mode()?;
        if let Some(size) = dataset.canonical_size() {
            (config.arch.height, config.arch.width) = size;
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.seed, seeds::INIT));
        let model = CadNet::new(config.arch.clone(), &mut rng)?;
        Self::with_model(config, model, 0, dataset)
    }

    pub fn resume(checkpoint: &Checkpoint, dataset: &MlrDataset) -> Result<Self> {
        let model = checkpoint.build_model()?;
        Self::with_model(checkpoint.config.clone(), model, checkpoint.epoch, dataset)
    }

    fn with_model(config: TrainConfig, model: CadNet, epoch: usize, dataset: &MlrDataset) -> Result<Self> {
        dataset.validate()?;
        if dataset.num_identities != config.arch.num_identities {
            return Err(Error::Config(format!(
                "model classifies {} identities but the dataset has {}",
                config.arch.num_identities, dataset.num_identities
            )));
        }
        if dataset.canonical_size() != Some((config.arch.height, config.arch.width)) {
            return Err(Error::Config(format!(
                "model expects {}x{} images, dataset has {:?}",
                config.arch.height,
                config.arch.width,
                dataset.canonical_size()
            )));
        }
        Ok(Self {
            classes: dataset.train_identities(),
            config,
            model,
            epoch,
        })
    }

    pub fn batches_per_epoch(&self, dataset: &MlrDataset) -> usize {
        dataset.train.len().div_ceil(self.config.batch_size())
    }

    /// Batches of the next epoch; fixed by the seed and the epoch index.
    pub fn epoch_batches(&self, dataset: &MlrDataset) -> Result<Vec<TrainBatch>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::batches(self.config.seed, self.epoch));
        let sampler = BatchSampler::new(self.config.identities_per_batch, self.config.samples_per_identity);
        (0..self.batches_per_epoch(dataset))
            .map(|_| sampler.sample(dataset, &mut rng))
            .collect()
    }

    pub fn step(&mut self, batch: &TrainBatch) -> Result<StepReport> {
        train_step(&mut self.model, batch, &self.classes, &self.config)
    }

    pub fn run_epoch(&mut self, dataset: &MlrDataset) -> Result<EpochReport> {
        let batches = self.epoch_batches(dataset)?;
        let mut reports = Vec::with_capacity(batches.len());
        for batch in &batches {
            reports.push(self.step(batch)?);
        }
        self.epoch += 1;
        Ok(EpochReport {
            epoch: self.epoch,
            losses: StepReport::mean(&reports),
        })
    }

    /// Runs until `config.epochs` epochs are complete.
    pub fn run(&mut self, dataset: &MlrDataset, mut on_epoch: impl FnMut(&EpochReport)) -> Result<Vec<EpochReport>> {
        let mut rows = Vec::new();
        while self.epoch < self.config.epochs {
            let row = self.run_epoch(dataset)?;
            on_epoch(&row);
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.config, self.epoch)
    }
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train(dataset: &MlrDataset, config: TrainConfig) -> Result<(Trainer, Vec<EpochReport>)> {
    let mut trainer = Trainer::new(config, dataset)?;
    let rows = trainer.run(dataset, |_| {})?;
    Ok((trainer, rows))
}
