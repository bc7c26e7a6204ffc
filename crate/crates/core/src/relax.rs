//! Discriminative relaxation: copy the natural parameters of a generative
//! classifier into free weights, preserving every decision at the copy
//! point, then train them without the generative coupling between weights
//! and biases.

use crate::drmm::DrmmParams;
use crate::error::{DrmmError, Result};
use crate::learning::{self, Dataset, LossReport, Regime, StepKind, TrainConfig};
use crate::rmm::RmmParams;
use crate::seed;
use crate::tensor::{dot, softmax_slice, Tensor};
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    RelaxedFromGenerative,
    FreeInit,
}

/// Free maxout classifier over the shallow template grid. The fields
/// mirror the generative natural parameters but carry no coupling
/// constraint after relaxation.
#[derive(Debug, Clone)]
pub struct ShallowDiscriminative {
    /// Per-(class, nuisance) weight vectors, [C, G, D].
    pub w: Tensor,
    /// Per-(class, nuisance) biases, [C, G].
    pub b_cg: Tensor,
    /// Switch-ON bias.
    pub b_on: f64,
    /// Switch-OFF alternative.
    pub b_off: f64,
    pub provenance: Provenance,
}

/// Free deep classifier: the kernel banks and class templates with the
/// generative priors discarded.
#[derive(Debug, Clone)]
pub struct DeepDiscriminative {
    pub model: DrmmParams,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub enum DiscriminativeParams {
    Shallow(ShallowDiscriminative),
    Deep(DeepDiscriminative),
}

impl ShallowDiscriminative {
    pub fn n_classes(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn n_nuisances(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.w.shape()[2]
    }

    fn weight(&self, c: usize, g: usize) -> &[f64] {
        let d = self.dim();
        let base = (c * self.n_nuisances() + g) * d;
        &self.w.data()[base..base + d]
    }

    /// Per-class maxout scores.
    pub fn scores(&self, image: &Tensor) -> Vec<f64> {
        let (nc, ng) = (self.n_classes(), self.n_nuisances());
        let mut out = Vec::with_capacity(nc);
        for c in 0..nc {
            let mut best = f64::NEG_INFINITY;
            for g in 0..ng {
                let pre = dot(self.weight(c, g), image.data()) + self.b_cg.data()[c * ng + g] + self.b_on;
                let v = if pre > self.b_off { pre } else { self.b_off };
                if v > best {
                    best = v;
                }
            }
            out.push(best);
        }
        out
    }

    /// Decision: highest maxout score, lowest class on ties.
    pub fn classify(&self, image: &Tensor) -> (usize, f64) {
        let scores = self.scores(image);
        let mut arg = 0usize;
        let mut best = f64::NEG_INFINITY;
        for (c, &s) in scores.iter().enumerate() {
            if s > best {
                best = s;
                arg = c;
            }
        }
        (arg, best)
    }

    /// All-zero weights with a floor low enough to never attain.
    pub fn free_init(n_classes: usize, n_nuisances: usize, dim: usize) -> ShallowDiscriminative {
        ShallowDiscriminative {
            w: Tensor::zeros(vec![n_classes, n_nuisances, dim]),
            b_cg: Tensor::zeros(vec![n_classes, n_nuisances]),
            b_on: 0.0,
            b_off: -1e3,
            provenance: Provenance::FreeInit,
        }
    }
}

/// Relaxes a shallow generative classifier: the natural parameters become
/// free weights, values copied verbatim.
pub fn relax_rmm(params: &RmmParams) -> Result<ShallowDiscriminative> {
    let nat = params.to_natural()?;
    Ok(ShallowDiscriminative {
        w: nat.w,
        b_cg: nat.b_cg,
        b_on: nat.b_on,
        b_off: nat.b_off,
        provenance: Provenance::RelaxedFromGenerative,
    })
}

/// Relaxes a deep model: kernels and class templates become free weights.
pub fn relax_drmm(params: &DrmmParams) -> Result<DeepDiscriminative> {
    params.validate()?;
    Ok(DeepDiscriminative {
        model: params.clone(),
        provenance: Provenance::RelaxedFromGenerative,
    })
}

/// Mean conditional log-likelihood ln p(y | I) of the labeled samples
/// under the softmax of the maxout scores.
pub fn conditional_ll(params: &ShallowDiscriminative, dataset: &Dataset) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (img, label) in dataset.images.iter().zip(&dataset.labels) {
        if let Some(y) = label {
            let p = softmax_slice(&params.scores(img));
            sum += p[*y].max(1e-300).ln();
            n += 1;
        }
    }
    if n > 0 {
        sum / n as f64
    } else {
        0.0
    }
}

/// Cross-entropy-only gradient training of the relaxed shallow classifier.
/// Subgradients follow the attaining maxout branch. Returns the trained
/// parameters and per-epoch reports (`cross_entropy` is the negative mean
/// conditional log-likelihood).
pub fn train_discriminative(
    params: &ShallowDiscriminative,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(ShallowDiscriminative, Vec<LossReport>)> {
    config.validate()?;
    let labeled: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i].is_some()).collect();
    if labeled.is_empty() {
        return Err(DrmmError::DegenerateInput("discriminative training needs labels".into()));
    }
    let (nc, ng, d) = (params.n_classes(), params.n_nuisances(), params.dim());
    let mut model = params.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let mut indices = labeled;

    for epoch in 0..config.epochs {
        let lr = config.rate_at(epoch);
        let mut rng = seed::rng(seed::derive(config.seed, "shuffle", epoch as u64));
        indices.shuffle(&mut rng);

        for chunk in indices.chunks(config.batch_size) {
            let mut dw = vec![0.0; nc * ng * d];
            let mut db = vec![0.0; nc * ng];
            let mut db_on = 0.0;
            let mut db_off = 0.0;
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let img = &dataset.images[i];
                let y = dataset.labels[i].unwrap();
                // forward with attaining branches recorded
                let mut scores = Vec::with_capacity(nc);
                let mut branch = Vec::with_capacity(nc); // Some(g) or None for the floor
                for c in 0..nc {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg: Option<usize> = None;
                    for g in 0..ng {
                        let pre = dot(model.weight(c, g), img.data()) + model.b_cg.data()[c * ng + g] + model.b_on;
                        if pre > best {
                            best = pre;
                            arg = Some(g);
                        }
                    }
                    if model.b_off >= best {
                        best = model.b_off;
                        arg = None;
                    }
                    scores.push(best);
                    branch.push(arg);
                }
                let p = softmax_slice(&scores);
                for c in 0..nc {
                    let ds = inv * (p[c] - if c == y { 1.0 } else { 0.0 });
                    match branch[c] {
                        Some(g) => {
                            let base = (c * ng + g) * d;
                            for (w, &x) in dw[base..base + d].iter_mut().zip(img.data()) {
                                *w += ds * x;
                            }
                            db[c * ng + g] += ds;
                            db_on += ds;
                        }
                        None => db_off += ds,
                    }
                }
            }
            for (w, g) in model.w.data_mut().iter_mut().zip(&dw) {
                *w -= lr * g;
            }
            for (b, g) in model.b_cg.data_mut().iter_mut().zip(&db) {
                *b -= lr * g;
            }
            model.b_on -= lr * db_on;
            model.b_off -= lr * db_off;
        }

        let mut errors = 0usize;
        for &i in &indices {
            let (c, _) = model.classify(&dataset.images[i]);
            if c != dataset.labels[i].unwrap() {
                errors += 1;
            }
        }
        let ce = -conditional_ll(&model, dataset);
        history.push(LossReport {
            epoch,
            cross_entropy: ce,
            reconstruction: 0.0,
            kl: 0.0,
            total: ce,
            train_error: errors as f64 / indices.len() as f64,
            test_error: 0.0,
        });
    }
    Ok((model, history))
}

/// Cross-entropy-only training of a relaxed deep classifier: the gradient
/// step machinery with the unsupervised weights zeroed.
pub fn train_discriminative_deep(
    params: &DeepDiscriminative,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(DeepDiscriminative, Vec<LossReport>)> {
    let free = TrainConfig {
        regime: Regime::Supervised,
        beta_rec: 0.0,
        beta_kl: 0.0,
        step: StepKind::GStep,
        ..config.clone()
    };
    let (model, history) = learning::train(&params.model, train_set, test_set, &free)?;
    Ok((
        DeepDiscriminative {
            model,
            provenance: params.provenance,
        },
        history,
    ))
}
