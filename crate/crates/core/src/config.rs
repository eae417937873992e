//! Run configuration: one flat TOML file describing a complete run.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected so typos do not silently fall back to defaults.

use crate::blocks::BlockOrder;
use crate::data::{DatasetSpec, SceneSpec, ToyEncoder};
use crate::error::{Error, Result};
use crate::head::{HeadConfig, HeadVariant};
use crate::loss::LossWeights;
use crate::optim::AdamWConfig;
use crate::train::TrainHyper;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds dataset generation, head initialization and batch order.
    pub seed: u64,
    /// Seeds the frozen encoder.
    pub encoder_seed: u64,

    pub variant: HeadVariant,
    pub order: BlockOrder,
    pub depth: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inception_width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deform_width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_width: Option<usize>,

    pub loss_cls: f64,
    pub loss_l1: f64,
    pub loss_giou: f64,

    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,

    pub dataset: PathBuf,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub frames: usize,
    pub image_size: usize,
    pub distractor_prob: f64,
    pub noise: f64,
    pub min_size: f64,
    pub max_size: f64,
    pub max_speed: f64,

    pub out: PathBuf,

    /// Eval-set AO the default inception run must reach; frozen from a pilot run.
    pub ao_threshold: f64,
    /// Single-example memorization run; the IoU bar is frozen from a pilot run.
    pub memorize_steps: usize,
    pub memorize_lr: f64,
    pub memorize_iou: f64,
    /// Minimum optimized/naive conv speedup expected from `bench`; reported, not enforced.
    pub bench_speedup: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        let ds = DatasetSpec::default();
        let hyper = TrainHyper::default();
        let w = LossWeights::default();
        Self {
            seed: 0,
            encoder_seed: 0,
            variant: HeadVariant::Inception,
            order: BlockOrder::default(),
            depth: 1,
            inception_width: None,
            deform_width: None,
            score_width: None,
            loss_cls: w.cls,
            loss_l1: w.l1,
            loss_giou: w.giou,
            lr: hyper.optim.lr,
            weight_decay: hyper.optim.weight_decay,
            steps: hyper.steps,
            batch_size: hyper.batch_size,
            dataset: PathBuf::from("data"),
            train_sequences: ds.train_sequences,
            eval_sequences: ds.eval_sequences,
            frames: scene.frames,
            image_size: scene.image_size,
            distractor_prob: scene.distractor_prob,
            noise: scene.noise,
            min_size: scene.min_size,
            max_size: scene.max_size,
            max_speed: scene.max_speed,
            out: PathBuf::from("runs/default"),
            ao_threshold: 0.64,
            memorize_steps: 500,
            memorize_lr: 1e-3,
            memorize_iou: 0.95,
            bench_speedup: 3.0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the effective configuration to `<dir>/config.toml`.
    pub fn write_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        if self.steps == 0 && self.memorize_steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(crate::data::encoder::ENCODER_STRIDE) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of {}",
                self.image_size,
                crate::data::encoder::ENCODER_STRIDE
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            cls: self.loss_cls,
            l1: self.loss_l1,
            giou: self.loss_giou,
        }
    }

    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            steps: self.steps,
            batch_size: self.batch_size,
            optim: AdamWConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..Default::default()
            },
            weights: self.loss_weights(),
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn scene(&self) -> SceneSpec {
        SceneSpec {
            seed: 0,
            image_size: self.image_size,
            frames: self.frames,
            distractor_prob: self.distractor_prob,
            noise: self.noise,
            min_size: self.min_size,
            max_size: self.max_size,
            max_speed: self.max_speed,
            velocity: None,
            start: None,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.seed,
            train_sequences: self.train_sequences,
            eval_sequences: self.eval_sequences,
            scene: self.scene(),
        }
    }

    pub fn encoder(&self) -> ToyEncoder {
        ToyEncoder::new(self.encoder_seed, self.image_size)
    }

    pub fn head_config(&self, variant: HeadVariant) -> HeadConfig {
        let enc = self.encoder();
        HeadConfig {
            variant,
            order: self.order,
            embed_dim: enc.out_channels(),
            map_h: enc.map_size(),
            map_w: enc.map_size(),
            inception_width: self.inception_width,
            deform_width: self.deform_width,
            score_width: self.score_width,
            depth: self.depth,
        }
    }
}
