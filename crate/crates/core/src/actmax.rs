//! Activity maximization: the input image that maximizes a class's score,
//! assembled patch by patch. Under a per-patch unit-norm constraint the
//! maximizer has a closed form: on each patch, the template restriction
//! with the largest norm, normalized. A brute-force candidate search
//! provides the independent check.

use crate::error::{DrmmError, Result};
use crate::rmm::RmmParams;
use crate::tensor::Tensor;

/// Pairwise-disjoint pixel index sets that together cover every pixel
/// exactly once.
#[derive(Debug, Clone)]
pub struct PatchPartition {
    dim: usize,
    patches: Vec<Vec<usize>>,
}

impl PatchPartition {
    pub fn new(dim: usize, patches: Vec<Vec<usize>>) -> Result<PatchPartition> {
        let mut seen = vec![false; dim];
        let mut covered = 0usize;
        for (i, patch) in patches.iter().enumerate() {
            for &p in patch {
                if p >= dim {
                    return Err(DrmmError::InvalidParam(format!(
                        "patch {} holds pixel {} outside [0, {})",
                        i, p, dim
                    )));
                }
                if seen[p] {
                    return Err(DrmmError::InvalidParam(format!(
                        "pixel {} appears in more than one patch",
                        p
                    )));
                }
                seen[p] = true;
                covered += 1;
            }
        }
        if covered != dim {
            return Err(DrmmError::InvalidParam(format!(
                "patches cover {} of {} pixels",
                covered, dim
            )));
        }
        Ok(PatchPartition { dim, patches })
    }

    /// The whole image as one patch.
    pub fn whole(dim: usize) -> PatchPartition {
        PatchPartition { dim, patches: vec![(0..dim).collect()] }
    }

    /// Non-overlapping `ph` x `pw` tiles over a row-major `h` x `w` image.
    pub fn grid(h: usize, w: usize, ph: usize, pw: usize) -> Result<PatchPartition> {
        if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
            return Err(DrmmError::InvalidParam(format!(
                "{}x{} tiles must divide the {}x{} image",
                ph, pw, h, w
            )));
        }
        let mut patches = Vec::with_capacity((h / ph) * (w / pw));
        for ty in 0..h / ph {
            for tx in 0..w / pw {
                let mut patch = Vec::with_capacity(ph * pw);
                for dy in 0..ph {
                    for dx in 0..pw {
                        patch.push((ty * ph + dy) * w + tx * pw + dx);
                    }
                }
                patches.push(patch);
            }
        }
        Ok(PatchPartition { dim: h * w, patches })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patches(&self) -> &[Vec<usize>] {
        &self.patches
    }
}

fn check_inputs(params: &RmmParams, c: usize, partition: &PatchPartition) -> Result<()> {
    if c >= params.n_classes() {
        return Err(DrmmError::InvalidParam(format!("class {} out of range", c)));
    }
    if partition.dim() != params.dim() {
        return Err(DrmmError::shape(
            "activity maximization partition",
            format!("[{}]", params.dim()),
            format!("[{}]", partition.dim()),
        ));
    }
    Ok(())
}

fn restricted_dot(template: &[f64], image: &[f64], patch: &[usize]) -> f64 {
    let mut acc = 0.0;
    for &p in patch {
        acc += template[p] * image[p];
    }
    acc
}

fn restricted_norm(template: &[f64], patch: &[usize]) -> f64 {
    let mut acc = 0.0;
    for &p in patch {
        acc += template[p] * template[p];
    }
    acc.sqrt()
}

/// Closed form: per patch, the nuisance whose template restriction has the
/// largest L2 norm wins (lowest g on ties); the patch of the maximizing
/// image is that restriction normalized. Patches where every template
/// vanishes stay zero and report no winner.
pub fn activity_max_closed(
    params: &RmmParams,
    c: usize,
    partition: &PatchPartition,
) -> Result<(Tensor, Vec<Option<usize>>)> {
    check_inputs(params, c, partition)?;
    let mut image = vec![0.0; params.dim()];
    let mut winners = Vec::with_capacity(partition.patches().len());
    for patch in partition.patches() {
        let mut best = 0.0;
        let mut arg = None;
        for g in 0..params.n_nuisances() {
            let norm = restricted_norm(params.template(c, g), patch);
            if norm > best {
                best = norm;
                arg = Some(g);
            }
        }
        if let Some(g) = arg {
            let mu = params.template(c, g);
            for &p in patch {
                image[p] = mu[p] / best;
            }
        }
        winners.push(arg);
    }
    Ok((Tensor::from_vec(image)?, winners))
}

/// Brute-force verifier: per patch, the candidates are the normalized
/// template restrictions of every nuisance; each is scored by the best
/// inner product any nuisance achieves against it, and the top candidate
/// is kept (lowest candidate, then lowest scoring g, on ties).
pub fn activity_max_brute(
    params: &RmmParams,
    c: usize,
    partition: &PatchPartition,
) -> Result<(Tensor, Vec<Option<usize>>)> {
    check_inputs(params, c, partition)?;
    let mut image = vec![0.0; params.dim()];
    let mut winners = Vec::with_capacity(partition.patches().len());
    for patch in partition.patches() {
        let mut candidates: Vec<Vec<f64>> = Vec::new();
        for g in 0..params.n_nuisances() {
            let mu = params.template(c, g);
            let norm = restricted_norm(mu, patch);
            if norm > 0.0 {
                candidates.push(patch.iter().map(|&p| mu[p] / norm).collect());
            }
        }
        let mut best_score = f64::NEG_INFINITY;
        let mut best_patch: Option<(Vec<f64>, usize)> = None;
        for cand in &candidates {
            let mut score = f64::NEG_INFINITY;
            let mut score_g = 0usize;
            for g in 0..params.n_nuisances() {
                let mu = params.template(c, g);
                let mut acc = 0.0;
                for (k, &p) in patch.iter().enumerate() {
                    acc += mu[p] * cand[k];
                }
                if acc > score {
                    score = acc;
                    score_g = g;
                }
            }
            if score > best_score {
                best_score = score;
                best_patch = Some((cand.clone(), score_g));
            }
        }
        match best_patch {
            Some((cand, g)) => {
                for (k, &p) in patch.iter().enumerate() {
                    image[p] = cand[k];
                }
                winners.push(Some(g));
            }
            None => winners.push(None),
        }
    }
    Ok((Tensor::from_vec(image)?, winners))
}

/// Activity of an image for a class: the sum over patches of the best
/// inner product any nuisance template achieves on that patch.
pub fn activity_score(
    params: &RmmParams,
    c: usize,
    image: &Tensor,
    partition: &PatchPartition,
) -> Result<f64> {
    check_inputs(params, c, partition)?;
    if image.len() != params.dim() {
        return Err(DrmmError::shape(
            "activity score image",
            format!("[{}]", params.dim()),
            format!("[{}]", image.len()),
        ));
    }
    let mut total = 0.0;
    for patch in partition.patches() {
        let mut best = f64::NEG_INFINITY;
        for g in 0..params.n_nuisances() {
            let s = restricted_dot(params.template(c, g), image.data(), patch);
            if s > best {
                best = s;
            }
        }
        total += best;
    }
    Ok(total)
}
