//! Effective run configuration: built-in defaults, then the JSON file, then
//! flags given on the command line.

use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::ArgMatches;
use gitseg::losses::{LossKind, LossTag, DEFAULT_SMOOTH, DEFAULT_TVERSKY_ALPHA, DEFAULT_TVERSKY_BETA};
use gitseg::preprocess::PATCH_SIZE;
use gitseg::trainer::TrainConfig;
use gitseg::unet::{BlockStyle, UNetConfig};
use serde::{Deserialize, Serialize};

use crate::args::TrainArgs;
use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub out: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub split_fraction: f64,
    pub loss: LossTag,
    pub tversky_alpha: f64,
    pub tversky_beta: f64,
    pub smooth_eps: f64,
    pub augment_flips: bool,
    pub seed: u64,
    pub image_size: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub block_style: BlockStyle,
    pub train_on_all: bool,
    pub track_train_iou: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let model = UNetConfig::default();
        Self {
            data: None,
            annotations: None,
            out: PathBuf::from("runs"),
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr_init: train.lr_init,
            lr_min: train.lr_min,
            split_fraction: train.split_fraction,
            loss: train.loss.tag,
            tversky_alpha: DEFAULT_TVERSKY_ALPHA,
            tversky_beta: DEFAULT_TVERSKY_BETA,
            smooth_eps: DEFAULT_SMOOTH,
            augment_flips: train.augment_flips,
            seed: train.seed,
            image_size: PATCH_SIZE,
            depth: model.depth,
            base_channels: model.base_channels,
            block_style: model.block_style,
            train_on_all: false,
            track_train_iou: false,
        }
    }
}

impl RunConfig {
    /// Layers `--config` (if any) and explicitly given flags over the defaults.
    pub fn resolve(args: &TrainArgs, matches: &ArgMatches) -> Result<Self, Failure> {
        let mut cfg = match &args.config {
            Some(path) => Self::from_file(path)?,
            None => Self::default(),
        };
        let given = |id: &str| matches.value_source(id) == Some(ValueSource::CommandLine);
        macro_rules! overlay {
            ($($field:ident),* $(,)?) => {
                $(if given(stringify!($field)) {
                    cfg.$field = args.$field.clone();
                })*
            };
        }
        overlay!(
            out, epochs, batch_size, lr_init, lr_min, split_fraction, loss, tversky_alpha,
            tversky_beta, smooth_eps, augment_flips, seed, image_size, depth, base_channels,
            block_style, train_on_all, track_train_iou,
        );
        if args.data.is_some() {
            cfg.data = args.data.clone();
        }
        if args.annotations.is_some() {
            cfg.annotations = args.annotations.clone();
        }
        let model = cfg.model_config();
        model.validate()?;
        cfg.train_config().validate()?;
        model
            .check_input_size(cfg.image_size, cfg.image_size)
            .map_err(|e| Failure::Usage(format!("image_size {}: {e}", cfg.image_size)))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn model_config(&self) -> UNetConfig {
        UNetConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            block_style: self.block_style,
            seed: self.seed,
            ..UNetConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_init: self.lr_init,
            lr_min: self.lr_min,
            epochs: self.epochs,
            batch_size: self.batch_size,
            split_fraction: self.split_fraction,
            loss: LossKind {
                tag: self.loss,
                tversky_alpha: self.tversky_alpha,
                tversky_beta: self.tversky_beta,
                smooth_eps: self.smooth_eps,
            },
            augment_flips: self.augment_flips,
            seed: self.seed,
            image_size: self.image_size,
            track_train_iou: self.track_train_iou,
        }
    }

    pub fn data_dir(&self) -> Result<&Path, Failure> {
        self.data
            .as_deref()
            .ok_or_else(|| Failure::Usage("no data directory: pass --data or set \"data\" in the config".into()))
    }

    pub fn annotations_path(&self) -> Result<PathBuf, Failure> {
        Ok(match &self.annotations {
            Some(p) => p.clone(),
            None => self.data_dir()?.join(gitseg::fixture::ANNOTATIONS_FILE),
        })
    }
}
