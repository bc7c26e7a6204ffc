//! Experiment harness for the rendering-model family: seeded training,
//! evaluation, sampling, activity maximization, relaxation, and forests.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
//! failure. Identical inputs and seeds give byte-identical outputs, except
//! the wall_seconds column of metrics.csv.

mod config;
mod output;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use config::{ExperimentConfig, ModelKind};
use drmm_core::data::checkpoint::{load_checkpoint, save_checkpoint};
use drmm_core::data::dataset::{split_semisup, LabeledDataset};
use drmm_core::data::idx;
use drmm_core::drmm::DrmmParams;
use drmm_core::learning::{self, Dataset, LossReport};
use drmm_core::model::{Model, TrainMeta};
use drmm_core::tensor::normalize_l2;
use drmm_core::{actmax, drmm, edrmm, relax, seed, DrmmError, Tensor};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "drmm", version, about = "Rendering mixture model experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model and write a checkpoint plus metrics.csv
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the test error of a checkpoint on the config's test set
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Draw samples from a generative checkpoint as PGM images
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the activity-maximizing image for one class as PGM
    Actmax {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        class: usize,
        /// Patch layout: "whole" or "PHxPW" grid tiles
        #[arg(long, default_value = "whole")]
        patches: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relax a generative checkpoint into a discriminative one
    Relax {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a bagged evolutionary forest
    ForestTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the test error of a tree or forest checkpoint
    ForestEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
}

struct CliError {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> CliError {
    CliError { code, message: message.into() }
}

impl From<DrmmError> for CliError {
    fn from(err: DrmmError) -> CliError {
        let code = match &err {
            DrmmError::Io(_) | DrmmError::Format { .. } | DrmmError::CrcMismatch { .. } | DrmmError::DegenerateInput(_) => 2,
            DrmmError::NonFiniteGradient(_) | DrmmError::SingularSystem(_) | DrmmError::EnumerationCap { .. } => 3,
            _ => 1,
        };
        CliError { code, message: err.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { config, seed } => cmd_train(&config, seed),
        Command::Eval { checkpoint, config } => cmd_eval(&checkpoint, &config),
        Command::Sample { checkpoint, count, seed, out } => cmd_sample(&checkpoint, count, seed, &out),
        Command::Actmax { checkpoint, class, patches, out } => cmd_actmax(&checkpoint, class, &patches, &out),
        Command::Relax { checkpoint, out } => cmd_relax(&checkpoint, &out),
        Command::ForestTrain { config, seed } => cmd_forest_train(&config, seed),
        Command::ForestEval { checkpoint, config } => cmd_forest_eval(&checkpoint, &config),
    }
}

fn read_config(path: &Path) -> Result<(ExperimentConfig, String), CliError> {
    let raw = fs::read_to_string(path).map_err(|e| fail(2, format!("config {}: {}", path.display(), e)))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&raw).map_err(|e| fail(1, format!("config {}: {}", path.display(), e)))?;
    Ok((cfg, raw))
}

fn truncate(ds: &mut LabeledDataset, limit: Option<usize>) {
    if let Some(n) = limit {
        ds.images.truncate(n);
        ds.labels.truncate(n);
    }
}

fn normalize_dataset(ds: &mut LabeledDataset) -> Result<(), CliError> {
    for img in &mut ds.images {
        *img = normalize_l2(img)?;
    }
    Ok(())
}

/// Loads the training set, applying the limit, the semi-supervised label
/// split, and optional normalization from the config.
fn load_train_set(cfg: &ExperimentConfig) -> Result<LabeledDataset, CliError> {
    let mut train = idx::load_idx(&cfg.data.train_images, &cfg.data.train_labels)?;
    truncate(&mut train, cfg.data.limit);
    if cfg.model.normalize_l2 {
        normalize_dataset(&mut train)?;
    }
    match cfg.data.n_labeled {
        Some(nl) => {
            let (labeled, unlabeled) = split_semisup(&train, nl, cfg.data.split_seed)?;
            let mut images = labeled.images;
            let mut labels = labeled.labels;
            images.extend(unlabeled.images);
            labels.extend(unlabeled.labels);
            Ok(LabeledDataset::new(images, labels, train.source.clone(), train.checksum)?)
        }
        None => Ok(train),
    }
}

fn load_test_set(cfg: &ExperimentConfig) -> Result<Option<LabeledDataset>, CliError> {
    match (&cfg.data.test_images, &cfg.data.test_labels) {
        (Some(i), Some(l)) => {
            let mut test = idx::load_idx(i, l)?;
            truncate(&mut test, cfg.data.test_limit);
            if cfg.model.normalize_l2 {
                normalize_dataset(&mut test)?;
            }
            Ok(Some(test))
        }
        (None, None) => Ok(None),
        _ => Err(fail(1, "test_images and test_labels must be given together")),
    }
}

fn require_test_set(cfg: &ExperimentConfig) -> Result<LabeledDataset, CliError> {
    load_test_set(cfg)?.ok_or_else(|| fail(1, "config has no test_images/test_labels"))
}

fn to_deep_dataset(ds: &LabeledDataset) -> Dataset {
    Dataset { images: ds.images.clone(), labels: ds.labels.clone() }
}

fn to_flat_dataset(ds: &LabeledDataset) -> Result<Dataset, CliError> {
    Ok(Dataset { images: ds.flat_images()?, labels: ds.labels.clone() })
}

fn image_shape(ds: &LabeledDataset) -> Result<(usize, usize, usize), CliError> {
    let first = ds.images.first().ok_or_else(|| fail(2, "dataset is empty"))?;
    match first.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        [d] => Ok((*d, 1, 1)),
        other => Err(fail(2, format!("unsupported image shape {:?}", other))),
    }
}

fn labeled_pairs(ds: &LabeledDataset) -> Result<(Vec<Tensor>, Vec<usize>), CliError> {
    let images = ds.flat_images()?;
    let labels: Option<Vec<usize>> = ds.labels.iter().copied().collect();
    let labels = labels.ok_or_else(|| fail(2, "dataset must be fully labeled"))?;
    Ok((images, labels))
}

fn cmd_train(config_path: &Path, seed_override: Option<u64>) -> Result<(), CliError> {
    let (cfg, raw) = read_config(config_path)?;
    let mut train_cfg = cfg.train.to_train_config().map_err(|m| fail(1, m))?;
    if let Some(s) = seed_override {
        train_cfg.seed = s;
    }
    let train_set = load_train_set(&cfg)?;
    let test_set = load_test_set(&cfg)?;
    fs::create_dir_all(&cfg.out_dir).map_err(DrmmError::Io)?;

    let mut rows: Vec<(LossReport, f64)> = Vec::new();
    let mut mark = Instant::now();
    let (model, final_report) = match cfg.model.kind {
        ModelKind::Rmm => {
            let train_ds = to_flat_dataset(&train_set)?;
            let test_ds = test_set.as_ref().map(to_flat_dataset).transpose()?;
            let init = learning::init_rmm_farthest(
                &train_ds.images,
                cfg.model.n_classes,
                cfg.model.n_nuisances,
                train_cfg.seed,
            )?;
            let (fitted, history) = learning::train_rmm_observed(
                &init,
                &train_ds,
                test_ds.as_ref(),
                &train_cfg,
                &mut |r| {
                    rows.push((r.clone(), mark.elapsed().as_secs_f64()));
                    mark = Instant::now();
                },
            )?;
            (Model::Rmm(fitted), history.last().cloned())
        }
        ModelKind::Drmm => {
            let (h, w, c) = image_shape(&train_set)?;
            let specs = cfg.model.layer_specs(h, w, c).map_err(|m| fail(1, m))?;
            if specs.is_empty() {
                return Err(fail(1, "drmm config needs at least one layer"));
            }
            let train_ds = to_deep_dataset(&train_set);
            let test_ds = test_set.as_ref().map(to_deep_dataset);
            let mut init = DrmmParams::init_random(&specs, cfg.model.n_classes, cfg.model.sigma2, train_cfg.seed)?;
            if train_ds.labels.iter().any(|l| l.is_some()) {
                learning::init_class_templates(&mut init, &train_ds)?;
            }
            let (fitted, history) = learning::train_observed(
                &init,
                &train_ds,
                test_ds.as_ref(),
                &train_cfg,
                &mut |r| {
                    rows.push((r.clone(), mark.elapsed().as_secs_f64()));
                    mark = Instant::now();
                },
            )?;
            (Model::Drmm(fitted), history.last().cloned())
        }
        ModelKind::Drfm => {
            return Err(fail(1, "drfm training is not supported; build and save drfm models programmatically"));
        }
        ModelKind::Edrmm => {
            return Err(fail(1, "edrmm models train via the forest-train subcommand"));
        }
    };

    output::write_metrics(&cfg.out_dir.join("metrics.csv"), &rows)?;
    let meta = TrainMeta { seed: train_cfg.seed, epoch: rows.len(), config_echo: raw };
    save_checkpoint(&cfg.out_dir.join("model.ckpt"), &model, &meta)?;
    if let Some(r) = final_report {
        println!("epochs={} train_error={} test_error={}", rows.len(), r.train_error, r.test_error);
    }
    Ok(())
}

fn model_error_rate(model: &Model, test: &LabeledDataset) -> Result<f64, CliError> {
    let err = match model {
        Model::Rmm(p) => learning::rmm_error_rate(p, &to_flat_dataset(test)?),
        Model::Drmm(p) => learning::error_rate(p, &to_deep_dataset(test))?,
        Model::DeepDiscriminative(p) => learning::error_rate(&p.model, &to_deep_dataset(test))?,
        Model::ShallowDiscriminative(p) => {
            let ds = to_flat_dataset(test)?;
            let mut n = 0usize;
            let mut wrong = 0usize;
            for (img, label) in ds.images.iter().zip(&ds.labels) {
                if let Some(y) = label {
                    n += 1;
                    if p.classify(img).0 != *y {
                        wrong += 1;
                    }
                }
            }
            if n > 0 { wrong as f64 / n as f64 } else { 0.0 }
        }
        Model::Tree(t) => {
            let (images, labels) = labeled_pairs(test)?;
            classification_error(&images, &labels, |img| edrmm::classify_tree(t, img))
        }
        Model::Forest(f) => {
            let (images, labels) = labeled_pairs(test)?;
            classification_error(&images, &labels, |img| edrmm::classify_forest(f, img))
        }
        Model::Drfm(_) => return Err(fail(1, "drfm checkpoints have no classifier to evaluate")),
    };
    Ok(err)
}

fn classification_error(images: &[Tensor], labels: &[usize], mut predict: impl FnMut(&Tensor) -> usize) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    let wrong = images
        .iter()
        .zip(labels)
        .filter(|(img, &y)| predict(img) != y)
        .count();
    wrong as f64 / images.len() as f64
}

fn cmd_eval(checkpoint: &Path, config_path: &Path) -> Result<(), CliError> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let (cfg, _) = read_config(config_path)?;
    let test = require_test_set(&cfg)?;
    let err = model_error_rate(&model, &test)?;
    println!("test_error={}", err);
    Ok(())
}

fn cmd_sample(checkpoint: &Path, count: usize, seed_value: u64, out: &Path) -> Result<(), CliError> {
    let (model, _) = load_checkpoint(checkpoint)?;
    fs::create_dir_all(out).map_err(DrmmError::Io)?;
    for i in 0..count {
        let s = seed::derive(seed_value, "sample", i as u64);
        let image = match &model {
            Model::Rmm(p) => p.sample(s).0,
            Model::Drmm(p) => drmm::sample(p, s)?.0,
            Model::Drfm(p) => drmm::drfm_sample(p, s)?.0,
            Model::Tree(t) => edrmm::sample_image(t, 0.0, s)?.0,
            Model::Forest(f) => edrmm::sample_image(&f.trees[0], 0.0, s)?.0,
            other => return Err(fail(1, format!("{} checkpoints are not generative", other.kind()))),
        };
        output::write_pgm(&out.join(format!("sample_{:03}.pgm", i)), &image)?;
    }
    println!("wrote {} samples to {}", count, out.display());
    Ok(())
}

fn parse_partition(spec: &str, dim: usize) -> Result<actmax::PatchPartition, CliError> {
    if spec == "whole" {
        return Ok(actmax::PatchPartition::whole(dim));
    }
    let (ph, pw) = spec
        .split_once('x')
        .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
        .ok_or_else(|| fail(1, format!("bad patch spec {:?}: use \"whole\" or \"PHxPW\"", spec)))?;
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim {
        return Err(fail(1, format!("grid patches need a square image, dimension is {}", dim)));
    }
    Ok(actmax::PatchPartition::grid(side, side, ph, pw)?)
}

fn cmd_actmax(checkpoint: &Path, class: usize, patches: &str, out: &Path) -> Result<(), CliError> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let params = match model {
        Model::Rmm(p) => p,
        other => return Err(fail(1, format!("actmax needs an rmm checkpoint, got {}", other.kind()))),
    };
    let partition = parse_partition(patches, params.dim())?;
    let (image, _) = actmax::activity_max_closed(&params, class, &partition)?;
    let score = actmax::activity_score(&params, class, &image, &partition)?;
    fs::create_dir_all(out).map_err(DrmmError::Io)?;
    output::write_pgm(&out.join(format!("actmax_class{}.pgm", class)), &image)?;
    println!("class={} score={}", class, score);
    Ok(())
}

fn cmd_relax(checkpoint: &Path, out: &Path) -> Result<(), CliError> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let relaxed = match &model {
        Model::Rmm(p) => Model::ShallowDiscriminative(relax::relax_rmm(p)?),
        Model::Drmm(p) => Model::DeepDiscriminative(relax::relax_drmm(p)?),
        other => return Err(fail(1, format!("relaxation applies to rmm or drmm checkpoints, got {}", other.kind()))),
    };
    fs::create_dir_all(out).map_err(DrmmError::Io)?;
    let path = out.join("relaxed.ckpt");
    save_checkpoint(&path, &relaxed, &meta)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_forest_train(config_path: &Path, seed_override: Option<u64>) -> Result<(), CliError> {
    let (cfg, raw) = read_config(config_path)?;
    if cfg.model.kind != ModelKind::Edrmm {
        return Err(fail(1, "forest-train needs model.kind = \"edrmm\""));
    }
    let forest_cfg = cfg.forest.clone().ok_or_else(|| fail(1, "config has no forest section"))?;
    let seed_value = seed_override.unwrap_or(cfg.train.seed);
    let train_set = load_train_set(&cfg)?;
    let keep: Vec<usize> = (0..train_set.n()).filter(|&i| train_set.labels[i].is_some()).collect();
    let images: Vec<Tensor> = {
        let flat = train_set.flat_images()?;
        keep.iter().map(|&i| flat[i].clone()).collect()
    };
    let labels: Vec<usize> = keep.iter().map(|&i| train_set.labels[i].unwrap()).collect();
    let builder = edrmm::TreeBuilder::Learn {
        depth: forest_cfg.depth,
        branching: forest_cfg.branching.clone(),
    };
    let forest = edrmm::bagged_forest(&images, &labels, forest_cfg.n_trees, &builder, forest_cfg.bootstrap, seed_value)?;
    let train_error = classification_error(&images, &labels, |img| edrmm::classify_forest(&forest, img));
    fs::create_dir_all(&cfg.out_dir).map_err(DrmmError::Io)?;
    let meta = TrainMeta { seed: seed_value, epoch: 0, config_echo: raw };
    save_checkpoint(&cfg.out_dir.join("forest.ckpt"), &Model::Forest(forest), &meta)?;
    println!("trees={} train_error={}", forest_cfg.n_trees, train_error);
    Ok(())
}

fn cmd_forest_eval(checkpoint: &Path, config_path: &Path) -> Result<(), CliError> {
    let (model, _) = load_checkpoint(checkpoint)?;
    match model {
        Model::Tree(_) | Model::Forest(_) => {}
        other => return Err(fail(1, format!("forest-eval needs a tree or forest checkpoint, got {}", other.kind()))),
    }
    let (cfg, _) = read_config(config_path)?;
    let test = require_test_set(&cfg)?;
    let err = model_error_rate(&model, &test)?;
    println!("test_error={}", err);
    Ok(())
}
