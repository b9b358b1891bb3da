//! Run configuration files: `[section]` headers, `key = value` lines, `#`
//! or `;` comments. Unknown sections and keys are errors.
//!
//! ```text
//! [data]
//! root = data/toy          # or toy_ids / toy_per_id / toy_seed
//! [model]
//! encoder_channels = 16,32,64,64
//! [train]
//! epochs = 200
//! seed = 1
//! [eval]
//! rates = 2,3,4,8
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{load_dataset, make_toy_dataset, MlrDataset, ToyOptions, INDEX_FILE};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::train::{seeds, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Dataset directory with an index file; relative roots resolve against
    /// the config file's directory.
    Dir { root: PathBuf, index: String },
    /// Toy dataset generated in memory.
    Toy(ToyOptions),
}

impl DataSource {
    pub fn load(&self) -> Result<MlrDataset> {
        match self {
            DataSource::Dir { root, index } => load_dataset(root, index),
            DataSource::Toy(opts) => make_toy_dataset(opts),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Toy(ToyOptions::new(20, 8, (32, 16), 0)),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

struct Ctx<'a> {
    path: &'a Path,
    line: usize,
}

impl Ctx<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            msg: msg.into(),
        }
    }

    fn num<T: std::str::FromStr>(&self, key: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| self.err(format!("`{key}`: cannot parse `{v}`")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str, v: &str) -> Result<Vec<T>> {
        v.split(',').map(|s| self.num(key, s.trim())).collect()
    }

    fn flag(&self, key: &str, v: &str) -> Result<bool> {
        match v {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(self.err(format!("`{key}`: expected true or false, got `{v}`"))),
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses config text; `path` is used for messages and to resolve a
    /// relative data root.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut root: Option<PathBuf> = None;
        let mut index = INDEX_FILE.to_string();
        let mut toy = ToyOptions::new(20, 8, (32, 16), 0);
        let mut toy_keys = false;
        let mut eval_seed: Option<u64> = None;
        let mut section = String::new();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let ctx = Ctx { path, line: i + 1 };
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["data", "model", "train", "eval"].contains(&name) {
                    return Err(ctx.err(format!("unknown section `[{name}]`")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| ctx.err(format!("expected `key = value`, got `{line}`")))?;
            if section.is_empty() {
                return Err(ctx.err(format!("`{key}` appears before any section")));
            }
            if !seen.insert(format!("{section}.{key}")) {
                return Err(ctx.err(format!("duplicate key `{key}` in [{section}]")));
            }
            let t = &mut cfg.train;
            let a = &mut t.ablation;
            match (section.as_str(), key) {
                ("data", "root") => root = Some(PathBuf::from(value)),
                ("data", "index") => index = value.to_string(),
                ("data", "toy_ids") => (toy.num_ids, toy_keys) = (ctx.num(key, value)?, true),
                ("data", "toy_per_id") => (toy.imgs_per_id, toy_keys) = (ctx.num(key, value)?, true),
                ("data", "toy_seed") => (toy.seed, toy_keys) = (ctx.num(key, value)?, true),
                ("data", "toy_size") => {
                    let (h, w) = parse_size(value).ok_or_else(|| ctx.err(format!("`{key}`: expected HxW, got `{value}`")))?;
                    (toy.height, toy.width, toy_keys) = (h, w, true);
                }
                ("model", "encoder_channels") => t.arch.encoder_channels = ctx.list(key, value)?,
                ("model", "decoder_channels") => t.arch.decoder_channels = ctx.list(key, value)?,
                ("model", "feature_disc_channels") => t.arch.feature_disc_channels = ctx.list(key, value)?,
                ("model", "image_disc_channels") => t.arch.image_disc_channels = ctx.list(key, value)?,
                ("train", "lambda_adv_feature") => t.lambda_adv_feature = ctx.num(key, value)?,
                ("train", "lambda_rec") => t.lambda_rec = ctx.num(key, value)?,
                ("train", "lambda_adv_image") => t.lambda_adv_image = ctx.num(key, value)?,
                ("train", "margin") => t.margin = ctx.num(key, value)?,
                ("train", "image_adv_real_weight") => t.image_adv_real_weight = ctx.num(key, value)?,
                ("train", "lr_main") => t.main.learning_rate = ctx.num(key, value)?,
                ("train", "momentum") => t.main.momentum = ctx.num(key, value)?,
                ("train", "weight_decay") => t.main.weight_decay = ctx.num(key, value)?,
                ("train", "lr_disc") => t.disc.learning_rate = ctx.num(key, value)?,
                ("train", "disc_momentum") => t.disc.momentum = ctx.num(key, value)?,
                ("train", "disc_weight_decay") => t.disc.weight_decay = ctx.num(key, value)?,
                ("train", "identities_per_batch") => t.identities_per_batch = ctx.num(key, value)?,
                ("train", "samples_per_identity") => t.samples_per_identity = ctx.num(key, value)?,
                ("train", "epochs") => t.epochs = ctx.num(key, value)?,
                ("train", "seed") => t.seed = ctx.num(key, value)?,
                ("train", "no_adv_feature") => a.no_adv_feature = ctx.flag(key, value)?,
                ("train", "no_adv_image") => a.no_adv_image = ctx.flag(key, value)?,
                ("train", "no_rec") => a.no_rec = ctx.flag(key, value)?,
                ("train", "no_cls") => a.no_cls = ctx.flag(key, value)?,
                ("train", "f_only") => a.f_only = ctx.flag(key, value)?,
                ("train", "g_only") => a.g_only = ctx.flag(key, value)?,
                ("eval", "rates") => cfg.eval.rates = ctx.list(key, value)?,
                ("eval", "trials") => cfg.eval.trials = ctx.num(key, value)?,
                ("eval", "seed") => eval_seed = Some(ctx.num(key, value)?),
                _ => return Err(ctx.err(format!("unknown key `{key}` in [{section}]"))),
            }
        }
        cfg.data = match (root, toy_keys) {
            (Some(_), true) => {
                return Err(Error::Config("[data] sets both `root` and toy_* keys".into()));
            }
            (Some(root), false) => {
                let base = path.parent().unwrap_or(Path::new(""));
                DataSource::Dir {
                    root: if root.is_absolute() { root } else { base.join(root) },
                    index,
                }
            }
            (None, _) => DataSource::Toy(toy),
        };
        cfg.eval.seed = eval_seed.unwrap_or_else(|| seeds::derive(cfg.train.seed, seeds::GALLERY));
        cfg.train.validate()?;
        if cfg.eval.rates.is_empty() || cfg.eval.rates.contains(&0) || cfg.eval.trials == 0 {
            return Err(Error::Config("[eval] needs positive rates and trials".into()));
        }
        Ok(cfg)
    }

    /// Config text that parses back to `self`. A directory data root is
    /// written as given.
    pub fn to_text(&self) -> String {
        let mut s = String::from("[data]\n");
        match &self.data {
            DataSource::Dir { root, index } => {
                writeln!(s, "root = {}\nindex = {index}", root.display()).expect("write to string");
            }
            DataSource::Toy(t) => {
                writeln!(
                    s,
                    "toy_ids = {}\ntoy_per_id = {}\ntoy_size = {}x{}\ntoy_seed = {}",
                    t.num_ids, t.imgs_per_id, t.height, t.width, t.seed
                )
                .expect("write to string");
            }
        }
        let t = &self.train;
        let arch = &t.arch;
        let a = &t.ablation;
        writeln!(
            s,
            "\n[model]\nencoder_channels = {}\ndecoder_channels = {}\nfeature_disc_channels = {}\nimage_disc_channels = {}",
            join(&arch.encoder_channels),
            join(&arch.decoder_channels),
            join(&arch.feature_disc_channels),
            join(&arch.image_disc_channels),
        )
        .expect("write to string");
        writeln!(
            s,
            "\n[train]\nlambda_adv_feature = {}\nlambda_rec = {}\nlambda_adv_image = {}\nmargin = {}\n\
             image_adv_real_weight = {}\nlr_main = {}\nmomentum = {}\nweight_decay = {}\nlr_disc = {}\n\
             disc_momentum = {}\ndisc_weight_decay = {}\nidentities_per_batch = {}\nsamples_per_identity = {}\n\
             epochs = {}\nseed = {}\nno_adv_feature = {}\nno_adv_image = {}\nno_rec = {}\nno_cls = {}\n\
             f_only = {}\ng_only = {}",
            t.lambda_adv_feature,
            t.lambda_rec,
            t.lambda_adv_image,
            t.margin,
            t.image_adv_real_weight,
            t.main.learning_rate,
            t.main.momentum,
            t.main.weight_decay,
            t.disc.learning_rate,
            t.disc.momentum,
            t.disc.weight_decay,
            t.identities_per_batch,
            t.samples_per_identity,
            t.epochs,
            t.seed,
            a.no_adv_feature,
            a.no_adv_image,
            a.no_rec,
            a.no_cls,
            a.f_only,
            a.g_only,
        )
        .expect("write to string");
        writeln!(
            s,
            "\n[eval]\nrates = {}\ntrials = {}\nseed = {}",
            join(&self.eval.rates),
            self.eval.trials,
            self.eval.seed
        )
        .expect("write to string");
        s
    }
}

/// `HxW`, e.g. `32x16`.
pub fn parse_size(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X'])?;
    let (h, w) = (h.trim().parse().ok()?, w.trim().parse().ok()?);
    (h > 0 && w > 0).then_some((h, w))
}
