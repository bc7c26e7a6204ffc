//! Experiment configuration: UTF-8 JSON, unknown keys rejected.

use drmm_core::drmm::LayerSpec;
use drmm_core::learning::{Regime, StepKind, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    pub data: DataConfig,
    #[serde(default)]
    pub forest: Option<ForestConfig>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Rmm,
    Drmm,
    Drfm,
    Edrmm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Conv/pool stack for the deep kinds, in bottom-up order.
    #[serde(default)]
    pub layers: Vec<LayerConfig>,
    pub n_classes: usize,
    /// Nuisance count for the shallow mixture.
    #[serde(default = "one")]
    pub n_nuisances: usize,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    /// Scale each image to unit L2 norm before use.
    #[serde(default)]
    pub normalize_l2: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub filters: usize,
    pub filter_h: usize,
    pub filter_w: usize,
    #[serde(default = "one")]
    pub stride: usize,
    pub pool_h: usize,
    pub pool_w: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_regime")]
    pub regime: String,
    #[serde(default = "one")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "one_f64")]
    pub decay_factor: f64,
    #[serde(default = "one")]
    pub decay_interval: usize,
    #[serde(default = "one_f64")]
    pub beta_ce: f64,
    #[serde(default)]
    pub beta_rec: f64,
    #[serde(default)]
    pub beta_kl: f64,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_step")]
    pub step: String,
    #[serde(default)]
    pub early_stop_error: Option<f64>,
}

fn one() -> usize {
    1
}

fn one_f64() -> f64 {
    1.0
}

fn default_sigma2() -> f64 {
    1.0
}

fn default_regime() -> String {
    "supervised".into()
}

fn default_batch() -> usize {
    32
}

fn default_lr() -> f64 {
    0.1
}

fn default_ridge() -> f64 {
    1e-6
}

fn default_step() -> String {
    "g".into()
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            regime: default_regime(),
            epochs: one(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            decay_factor: one_f64(),
            decay_interval: one(),
            beta_ce: one_f64(),
            beta_rec: 0.0,
            beta_kl: 0.0,
            ridge: default_ridge(),
            seed: 0,
            step: default_step(),
            early_stop_error: None,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> Result<TrainConfig, String> {
        let regime = match self.regime.as_str() {
            "supervised" => Regime::Supervised,
            "unsupervised" => Regime::Unsupervised,
            "semi-supervised" => Regime::SemiSupervised,
            other => return Err(format!("unknown regime {:?}", other)),
        };
        let step = match self.step.as_str() {
            "g" => StepKind::GStep,
            "m" => StepKind::MStep,
            other => return Err(format!("unknown step kind {:?} (use \"g\" or \"m\")", other)),
        };
        Ok(TrainConfig {
            regime,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            decay_factor: self.decay_factor,
            decay_interval: self.decay_interval,
            beta_ce: self.beta_ce,
            beta_rec: self.beta_rec,
            beta_kl: self.beta_kl,
            ridge: self.ridge,
            seed: self.seed,
            step,
            early_stop_error: self.early_stop_error,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    /// Keep only the labels of a class-balanced subset of this size;
    /// the rest of the training images become unlabeled.
    #[serde(default)]
    pub n_labeled: Option<usize>,
    #[serde(default)]
    pub split_seed: u64,
    /// Truncate the training set to its first n rows (desk-scale runs).
    #[serde(default)]
    pub limit: Option<usize>,
    /// Same truncation for the test set.
    #[serde(default)]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub depth: usize,
    pub branching: Vec<usize>,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: bool,
}

fn default_bootstrap() -> bool {
    true
}

impl ModelConfig {
    /// Chains the layer stack from the input image shape, computing each
    /// layer's input extent from the previous one.
    pub fn layer_specs(&self, in_h: usize, in_w: usize, in_c: usize) -> Result<Vec<LayerSpec>, String> {
        let (mut h, mut w, mut c) = (in_h, in_w, in_c);
        let mut specs = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let spec = LayerSpec {
                in_h: h,
                in_w: w,
                in_c: c,
                filters: layer.filters,
                filter_h: layer.filter_h,
                filter_w: layer.filter_w,
                stride: layer.stride,
                pool_h: layer.pool_h,
                pool_w: layer.pool_w,
            };
            spec.validate().map_err(|e| format!("layer {}: {}", l, e))?;
            let conv_h = (h - layer.filter_h) / layer.stride + 1;
            let conv_w = (w - layer.filter_w) / layer.stride + 1;
            h = conv_h / layer.pool_h;
            w = conv_w / layer.pool_w;
            c = layer.filters;
            specs.push(spec);
        }
        Ok(specs)
    }
}
