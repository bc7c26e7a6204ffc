//! Labeled image datasets and the class-balanced semi-supervised split.

use crate::error::{DrmmError, Result};
use crate::seed;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

/// Images with optional labels plus load provenance. Images share one
/// shape; pixel values live in [0, 1] when loaded from IDX files.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<Option<usize>>,
    /// Where the data came from (file paths or a synthetic tag).
    pub source: String,
    /// CRC-64 of the raw source bytes; 0 for synthetic data.
    pub checksum: u64,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<Tensor>,
        labels: Vec<Option<usize>>,
        source: String,
        checksum: u64,
    ) -> Result<LabeledDataset> {
        if images.len() != labels.len() {
            return Err(DrmmError::shape(
                "LabeledDataset",
                format!("{} labels", images.len()),
                format!("{}", labels.len()),
            ));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|i| i.shape() != first.shape()) {
                return Err(DrmmError::InvalidParam("images must share one shape".into()));
            }
        }
        Ok(LabeledDataset { images, labels, source, checksum })
    }

    pub fn synthetic(images: Vec<Tensor>, labels: Vec<Option<usize>>) -> Result<LabeledDataset> {
        LabeledDataset::new(images, labels, "synthetic".into(), 0)
    }

    pub fn n(&self) -> usize {
        self.images.len()
    }

    pub fn n_labeled(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// One more than the largest label present; 0 when fully unlabeled.
    pub fn n_classes(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |&m| m + 1)
    }

    /// Copies with each image flattened to rank 1 (for the shallow models).
    pub fn flat_images(&self) -> Result<Vec<Tensor>> {
        self.images
            .iter()
            .map(|i| i.clone().reshape(vec![i.len()]))
            .collect()
    }

    /// Keeps the rows at `idx`, in the order given.
    fn subset(&self, idx: &[usize], strip_labels: bool) -> LabeledDataset {
        LabeledDataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx
                .iter()
                .map(|&i| if strip_labels { None } else { self.labels[i] })
                .collect(),
            source: self.source.clone(),
            checksum: self.checksum,
        }
    }
}

/// Splits a fully labeled dataset into `n_l` labeled samples and an
/// unlabeled remainder. Sampling is class balanced: floor(n_l / n_classes)
/// per class first, then the remainder uniformly from what is left.
/// Deterministic given the seed; both halves keep the original row order.
pub fn split_semisup(
    dataset: &LabeledDataset,
    n_l: usize,
    seed_value: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if n_l > dataset.n() {
        return Err(DrmmError::InvalidParam(format!(
            "requested {} labeled samples from {}",
            n_l,
            dataset.n()
        )));
    }
    if dataset.labels.iter().any(|l| l.is_none()) {
        return Err(DrmmError::DegenerateInput("split_semisup needs a fully labeled dataset".into()));
    }
    let n_classes = dataset.n_classes();
    let per_class = if n_classes > 0 { n_l / n_classes } else { 0 };
    let mut chosen = vec![false; dataset.n()];
    let mut taken = 0usize;
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..dataset.n())
            .filter(|&i| dataset.labels[i] == Some(c))
            .collect();
        let mut rng = seed::rng(seed::derive(seed_value, "class", c as u64));
        members.shuffle(&mut rng);
        for &i in members.iter().take(per_class.min(members.len())) {
            chosen[i] = true;
            taken += 1;
        }
    }
    let mut rest: Vec<usize> = (0..dataset.n()).filter(|&i| !chosen[i]).collect();
    let mut rng = seed::rng(seed::derive(seed_value, "remainder", 0));
    rest.shuffle(&mut rng);
    for &i in rest.iter().take(n_l - taken) {
        chosen[i] = true;
    }
    let labeled: Vec<usize> = (0..dataset.n()).filter(|&i| chosen[i]).collect();
    let unlabeled: Vec<usize> = (0..dataset.n()).filter(|&i| !chosen[i]).collect();
    Ok((dataset.subset(&labeled, false), dataset.subset(&unlabeled, true)))
}
