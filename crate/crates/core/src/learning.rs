//! Training: hard-EM for the shallow mixture, generalized EM (gradient
//! G-step) for deep models, the per-nuisance least-squares M-step, and the
//! weighted objective (cross-entropy + reconstruction + KL-to-prior) the
//! G-step descends.

use crate::drmm::{bottom_up, top_down, BottomUpRecord, DrmmParams, LatentConfig, Mode};
use crate::error::{DrmmError, Result};
use crate::rmm::RmmParams;
use crate::seed;
use crate::tensor::{softmax_slice, Tensor};
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Supervised,
    Unsupervised,
    SemiSupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// Closed-form least-squares parameter refits.
    MStep,
    /// One gradient-descent update per batch.
    GStep,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub beta_ce: f64,
    pub beta_rec: f64,
    pub beta_kl: f64,
    pub ridge: f64,
    pub seed: u64,
    pub step: StepKind,
    /// Stop after the first epoch whose test error reaches this level.
    pub early_stop_error: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Supervised,
            epochs: 1,
            batch_size: 32,
            learning_rate: 0.1,
            decay_factor: 1.0,
            decay_interval: 1,
            beta_ce: 1.0,
            beta_rec: 0.0,
            beta_kl: 0.0,
            ridge: 1e-6,
            seed: 0,
            step: StepKind::GStep,
            early_stop_error: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DrmmError::InvalidParam("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(DrmmError::InvalidParam("learning rate must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) || self.decay_interval == 0 {
            return Err(DrmmError::InvalidParam("decay factor in (0, 1], interval >= 1".into()));
        }
        if self.beta_ce < 0.0 || self.beta_rec < 0.0 || self.beta_kl < 0.0 {
            return Err(DrmmError::InvalidParam("objective weights must be nonnegative".into()));
        }
        if self.ridge < 0.0 {
            return Err(DrmmError::InvalidParam("ridge must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_interval) as i32)
    }
}

/// One per-epoch row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub epoch: usize,
    pub cross_entropy: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
    pub train_error: f64,
    pub test_error: f64,
}

/// In-memory dataset: images plus an optional label per sample.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<Option<usize>>,
}

impl Dataset {
    pub fn labeled(images: Vec<Tensor>, labels: Vec<usize>) -> Result<Dataset> {
        if images.len() != labels.len() {
            return Err(DrmmError::shape(
                "Dataset",
                format!("{} labels", images.len()),
                format!("{}", labels.len()),
            ));
        }
        let labels = labels.into_iter().map(Some).collect();
        Ok(Dataset { images, labels })
    }

    pub fn unlabeled(images: Vec<Tensor>) -> Dataset {
        let labels = vec![None; images.len()];
        Dataset { images, labels }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_labeled(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

// ---------------------------------------------------------------------------
// Shallow responsibilities
// ---------------------------------------------------------------------------

/// Posterior assignments over the (class, nuisance) grid for a batch of
/// samples. Soft rows sum to 1; hard entries are the flat argmax index
/// `c * n_nuisances + g`.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    pub n_classes: usize,
    pub n_nuisances: usize,
    pub soft: Vec<Vec<f64>>,
    pub hard: Vec<usize>,
}

/// Soft posterior over the (c, g) template grid for one image, normalized
/// in the log domain. The switch is absorbed: responsibilities live on the
/// rendered templates themselves.
pub fn e_step_soft(params: &RmmParams, image: &Tensor) -> Vec<f64> {
    let (nc, ng) = (params.n_classes(), params.n_nuisances());
    let mut logs = Vec::with_capacity(nc * ng);
    for c in 0..nc {
        for g in 0..ng {
            let mu = params.template(c, g);
            let mut d2 = 0.0;
            for (x, m) in image.data().iter().zip(mu) {
                let r = x - m;
                d2 += r * r;
            }
            let prior = safe_ln(params.pi_c[c]) + safe_ln(params.pi_g[g]);
            logs.push(prior - d2 / (2.0 * params.sigma2));
        }
    }
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for l in &mut logs {
        *l = (*l - m).exp();
        z += *l;
    }
    for l in &mut logs {
        *l /= z;
    }
    logs
}

/// Hard assignment: the (c, g) template nearest to the image weighted by
/// the priors (the zero-noise argmax of the soft responsibilities). Ties
/// keep the lexicographically lowest (c, g).
pub fn e_step_hard(params: &RmmParams, image: &Tensor) -> (usize, usize) {
    let (nc, ng) = (params.n_classes(), params.n_nuisances());
    let mut best = f64::NEG_INFINITY;
    let mut arg = (0usize, 0usize);
    for c in 0..nc {
        for g in 0..ng {
            let mu = params.template(c, g);
            let mut d2 = 0.0;
            for (x, m) in image.data().iter().zip(mu) {
                let r = x - m;
                d2 += r * r;
            }
            let score = safe_ln(params.pi_c[c]) + safe_ln(params.pi_g[g]) - d2 / (2.0 * params.sigma2);
            if score > best {
                best = score;
                arg = (c, g);
            }
        }
    }
    arg
}

/// Deep hard E-step: fine-to-coarse inference, returning the decision and
/// the full inferred rendering path.
pub fn e_step_hard_deep(params: &DrmmParams, image: &Tensor) -> Result<(usize, LatentConfig)> {
    let rec = bottom_up(params, image, Mode::Nonnegative, None)?;
    let latents = LatentConfig {
        c: rec.c_hat,
        t: rec.t_hat.clone(),
        a: rec.a_hat.clone(),
    };
    Ok((rec.c_hat, latents))
}

/// Batch soft + hard assignments.
pub fn responsibilities(params: &RmmParams, images: &[Tensor]) -> Responsibilities {
    let mut soft = Vec::with_capacity(images.len());
    let mut hard = Vec::with_capacity(images.len());
    for img in images {
        let row = e_step_soft(params, img);
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                arg = i;
            }
        }
        soft.push(row);
        hard.push(arg);
    }
    Responsibilities {
        n_classes: params.n_classes(),
        n_nuisances: params.n_nuisances(),
        soft,
        hard,
    }
}

fn safe_ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

// ---------------------------------------------------------------------------
// Least-squares M-step
// ---------------------------------------------------------------------------

/// Per-nuisance ridge least squares: for each group g, refit `lambdas[g]`
/// (shape [p, q]) to minimize sum over assigned samples of
/// `||target - Lambda * predictor||^2 + ridge_scaled * ||Lambda||_F^2`.
/// The ridge is trace-scaled: `lambda = ridge * tr(X'X) / q`. Groups with
/// no assigned samples keep their previous parameters.
pub fn m_step_gls(
    lambdas: &mut [Tensor],
    assignments: &[usize],
    targets: &[Vec<f64>],
    predictors: &[Vec<f64>],
    ridge: f64,
) -> Result<()> {
    if assignments.len() != targets.len() || targets.len() != predictors.len() {
        return Err(DrmmError::shape(
            "m_step_gls",
            format!("{} aligned samples", assignments.len()),
            format!("targets {}, predictors {}", targets.len(), predictors.len()),
        ));
    }
    for (g, lam) in lambdas.iter_mut().enumerate() {
        let shape = lam.shape().to_vec();
        if shape.len() != 2 {
            return Err(DrmmError::shape("m_step_gls lambda", "rank 2", format!("{:?}", shape)));
        }
        let (p, q) = (shape[0], shape[1]);
        let idx: Vec<usize> = assignments
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == g)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let mut gram = vec![0.0; q * q];
        let mut cross = vec![0.0; p * q];
        for &n in &idx {
            let x = &predictors[n];
            let y = &targets[n];
            if x.len() != q || y.len() != p {
                return Err(DrmmError::shape(
                    "m_step_gls sample",
                    format!("target [{}], predictor [{}]", p, q),
                    format!("target [{}], predictor [{}]", y.len(), x.len()),
                ));
            }
            for i in 0..q {
                let xi = x[i];
                if xi == 0.0 {
                    continue;
                }
                for j in 0..q {
                    gram[i * q + j] += xi * x[j];
                }
            }
            for r in 0..p {
                let yr = y[r];
                if yr == 0.0 {
                    continue;
                }
                for j in 0..q {
                    cross[r * q + j] += yr * x[j];
                }
            }
        }
        let trace: f64 = (0..q).map(|i| gram[i * q + i]).sum();
        let lam_ridge = ridge * trace / q as f64;
        for i in 0..q {
            gram[i * q + i] += lam_ridge;
        }
        let chol = cholesky(&gram, q)?;
        // solve Gram * row_j(Lambda)^T = row_j(Cross)^T for every output row
        let data = lam.data_mut();
        let mut rhs = vec![0.0; q];
        for r in 0..p {
            rhs.copy_from_slice(&cross[r * q..(r + 1) * q]);
            let sol = chol_solve(&chol, q, &rhs);
            data[r * q..(r + 1) * q].copy_from_slice(&sol);
        }
    }
    Ok(())
}

/// Lower-triangular Cholesky factor of a symmetric matrix, row-major.
fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(DrmmError::SingularSystem(format!(
                        "nonpositive pivot {} at row {}",
                        s, i
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

// ---------------------------------------------------------------------------
// Deep objective and gradient
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    pub cross_entropy: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
    pub n_labeled: usize,
    pub errors: usize,
}

/// Gradient of the objective with respect to every kernel bank and the
/// class templates.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub d_gamma: Vec<Tensor>,
    pub d_mu: Tensor,
}

/// Batch objective: mean label cross-entropy over labeled samples, plus
/// weighted mean squared reconstruction error and mean KL from the class
/// posterior to the class prior over all samples.
pub fn objective(params: &DrmmParams, images: &[Tensor], labels: &[Option<usize>], config: &TrainConfig) -> Result<f64> {
    Ok(objective_terms(params, images, labels, config)?.total)
}

pub fn objective_terms(
    params: &DrmmParams,
    images: &[Tensor],
    labels: &[Option<usize>],
    config: &TrainConfig,
) -> Result<ObjectiveTerms> {
    let (terms, _) = batch_pass(params, images, labels, config, false)?;
    Ok(terms)
}

/// Objective gradient over a batch, with pooling/switch argmaxes and the
/// reconstruction class frozen from the fine-to-coarse pass.
pub fn gradient(
    params: &DrmmParams,
    images: &[Tensor],
    labels: &[Option<usize>],
    config: &TrainConfig,
) -> Result<Gradient> {
    let (_, grad) = batch_pass(params, images, labels, config, true)?;
    Ok(grad.expect("gradient requested"))
}

/// One gradient-descent update at rate `lr`; returns the updated model.
pub fn g_step(
    params: &DrmmParams,
    images: &[Tensor],
    labels: &[Option<usize>],
    config: &TrainConfig,
    lr: f64,
) -> Result<DrmmParams> {
    let grad = gradient(params, images, labels, config)?;
    let mut out = params.clone();
    apply_gradient(&mut out, &grad, lr);
    Ok(out)
}

pub fn apply_gradient(params: &mut DrmmParams, grad: &Gradient, lr: f64) {
    for (layer, d) in params.layers.iter_mut().zip(&grad.d_gamma) {
        for (w, g) in layer.gamma.data_mut().iter_mut().zip(d.data()) {
            *w -= lr * g;
        }
    }
    for (w, g) in params.mu_c.data_mut().iter_mut().zip(grad.d_mu.data()) {
        *w -= lr * g;
    }
}

/// Shared forward/backward pass. The forward side always produces the
/// objective terms; the backward side runs only when `with_grad` is set.
fn batch_pass(
    params: &DrmmParams,
    images: &[Tensor],
    labels: &[Option<usize>],
    config: &TrainConfig,
    with_grad: bool,
) -> Result<(ObjectiveTerms, Option<Gradient>)> {
    if images.len() != labels.len() {
        return Err(DrmmError::shape(
            "batch",
            format!("{} labels", images.len()),
            format!("{}", labels.len()),
        ));
    }
    if images.is_empty() {
        return Err(DrmmError::DegenerateInput("empty batch".into()));
    }
    let n = images.len() as f64;
    let n_labeled = labels.iter().filter(|l| l.is_some()).count();
    let nc = params.n_classes();
    let d_top = params.d_top();

    let mut ce_sum = 0.0;
    let mut rec_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut errors = 0usize;

    let mut grad = if with_grad {
        Some(Gradient {
            d_gamma: params
                .layers
                .iter()
                .map(|l| Tensor::zeros(l.gamma.shape().to_vec()))
                .collect(),
            d_mu: Tensor::zeros(vec![nc, d_top]),
        })
    } else {
        None
    };

    let ln_pi: Vec<f64> = params.pi_c.iter().map(|&p| safe_ln(p)).collect();

    for (img, label) in images.iter().zip(labels) {
        let rec = bottom_up(params, img, Mode::Nonnegative, None)?;
        let p = softmax_slice(&rec.class_scores);

        let mut kl = 0.0;
        for j in 0..nc {
            if p[j] > 0.0 {
                kl += p[j] * (p[j].ln() - ln_pi[j]);
            }
        }
        kl_sum += kl;

        if let Some(y) = label {
            ce_sum += -p[*y].max(1e-300).ln();
            if rec.c_hat != *y {
                errors += 1;
            }
        }

        // class for the reconstruction path: the label when present
        let c_rec = label.unwrap_or(rec.c_hat);
        let td = if config.beta_rec > 0.0 || with_grad {
            Some(top_down(params, c_rec, &rec, true)?)
        } else {
            None
        };
        if let Some(td) = &td {
            if config.beta_rec > 0.0 {
                let mut r2 = 0.0;
                for (a, b) in td.reconstruction().data().iter().zip(img.data()) {
                    let r = a - b;
                    r2 += r * r;
                }
                rec_sum += r2;
            }
        }

        if let Some(grad) = grad.as_mut() {
            backward_sample(params, config, img, label, &rec, td.as_ref().unwrap(), &p, kl, &ln_pi, n, n_labeled, grad);
        }
    }

    let ce = if n_labeled > 0 { ce_sum / n_labeled as f64 } else { 0.0 };
    let rec = rec_sum / n;
    let kl = kl_sum / n;
    let total = config.beta_ce * ce + config.beta_rec * rec + config.beta_kl * kl;
    let terms = ObjectiveTerms {
        cross_entropy: ce,
        reconstruction: rec,
        kl,
        total,
        n_labeled,
        errors,
    };

    if let Some(grad) = &grad {
        for (l, d) in grad.d_gamma.iter().enumerate() {
            if d.data().iter().any(|v| !v.is_finite()) {
                return Err(DrmmError::NonFiniteGradient(format!("gamma[{}]", l)));
            }
        }
        if grad.d_mu.data().iter().any(|v| !v.is_finite()) {
            return Err(DrmmError::NonFiniteGradient("mu_c".into()));
        }
    }

    Ok((terms, grad))
}

#[allow(clippy::too_many_arguments)]
fn backward_sample(
    params: &DrmmParams,
    config: &TrainConfig,
    img: &Tensor,
    label: &Option<usize>,
    rec: &BottomUpRecord,
    td: &crate::drmm::SignedState,
    p: &[f64],
    kl: f64,
    ln_pi: &[f64],
    n: f64,
    n_labeled: usize,
    grad: &mut Gradient,
) {
    let nc = params.n_classes();
    let depth = params.depth();
    let d_top = params.d_top();

    // score-head gradient: cross-entropy plus KL-to-prior
    let mut ds = vec![0.0; nc];
    let mut any = false;
    if let Some(y) = label {
        if config.beta_ce > 0.0 && n_labeled > 0 {
            let w = config.beta_ce / n_labeled as f64;
            for c in 0..nc {
                ds[c] += w * (p[c] - if c == *y { 1.0 } else { 0.0 });
            }
            any = true;
        }
    }
    if config.beta_kl > 0.0 {
        let w = config.beta_kl / n;
        for c in 0..nc {
            if p[c] > 0.0 {
                ds[c] += w * p[c] * ((p[c].ln() - ln_pi[c]) - kl);
            }
        }
        any = true;
    }

    if any {
        let top = rec.feature_maps.last().unwrap().data();
        // templates: d mu_c += ds_c * I^L; features: dI^L = sum_c ds_c mu_c
        let mut d_top_map = vec![0.0; d_top];
        for c in 0..nc {
            let dsc = ds[c];
            if dsc == 0.0 {
                continue;
            }
            let mu = params.mu(c);
            let dm = &mut grad.d_mu.data_mut()[c * d_top..(c + 1) * d_top];
            for i in 0..d_top {
                dm[i] += dsc * top[i];
                d_top_map[i] += dsc * mu[i];
            }
        }
        // descend the recognition path through the frozen argmax wiring
        let mut d_i = d_top_map;
        for l in (0..depth).rev() {
            let layer = &params.layers[l];
            let mut d_prev = vec![0.0; layer.spec.d_in()];
            let i_prev = rec.feature_maps[l].data();
            let d_gamma = grad.d_gamma[l].data_mut();
            let k = layer.spec.filter_h * layer.spec.filter_w * layer.spec.in_c;
            for unit in 0..layer.spec.d_out() {
                if !rec.a_hat[l][unit] {
                    continue;
                }
                let du = d_i[unit];
                if du == 0.0 {
                    continue;
                }
                let (_, _, f) = layer.spec.unit_pos(unit);
                let kern = layer.kernel(f);
                let base = f * k;
                layer.for_footprint(unit, rec.t_hat[l][unit], |canvas_idx, kern_idx| {
                    d_gamma[base + kern_idx] += du * i_prev[canvas_idx];
                    d_prev[canvas_idx] += du * kern[kern_idx];
                });
            }
            d_i = d_prev;
        }
    }

    // reconstruction path: d/dtheta of ||I - z^(0)||^2 through the frozen
    // traceback, rectification masks taken from the rendered canvases
    if config.beta_rec > 0.0 {
        let coeff = 2.0 * config.beta_rec / n;
        let mut dz: Vec<f64> = td
            .reconstruction()
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| coeff * (a - b))
            .collect();
        for l in 0..depth {
            let layer = &params.layers[l];
            // rectification mask at the finer level
            let z_fine = td.z[l].data();
            for (d, &z) in dz.iter_mut().zip(z_fine) {
                if !(z > 0.0) {
                    *d = 0.0;
                }
            }
            let z_coarse = td.z[l + 1].data();
            let mut dz_coarse = vec![0.0; layer.spec.d_out()];
            let d_gamma = grad.d_gamma[l].data_mut();
            let k = layer.spec.filter_h * layer.spec.filter_w * layer.spec.in_c;
            for unit in 0..layer.spec.d_out() {
                if !rec.a_hat[l][unit] {
                    continue;
                }
                let t = rec.t_hat[l][unit];
                let v = z_coarse[unit];
                let (_, _, f) = layer.spec.unit_pos(unit);
                let kern = layer.kernel(f);
                let base = f * k;
                let mut acc = 0.0;
                layer.for_footprint(unit, t, |canvas_idx, kern_idx| {
                    let dp = dz[canvas_idx];
                    d_gamma[base + kern_idx] += v * dp;
                    acc += kern[kern_idx] * dp;
                });
                dz_coarse[unit] = acc;
            }
            dz = dz_coarse;
        }
        let c_rec = label.unwrap_or(rec.c_hat);
        let dm = &mut grad.d_mu.data_mut()[c_rec * d_top..(c_rec + 1) * d_top];
        for i in 0..d_top {
            dm[i] += dz[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Deep M-step
// ---------------------------------------------------------------------------

/// Closed-form refit of every kernel bank and the class templates from one
/// batch: per layer, ridge least squares for the (tied) kernel entries
/// predicting the finer feature map from the placed coarser top-down
/// template; class templates become class means of the top feature maps;
/// priors become empirical frequencies of the inferred latents.
pub fn m_step_deep(
    params: &mut DrmmParams,
    images: &[Tensor],
    labels: &[Option<usize>],
    config: &TrainConfig,
) -> Result<()> {
    if images.is_empty() {
        return Err(DrmmError::DegenerateInput("empty batch".into()));
    }
    let depth = params.depth();
    let nc = params.n_classes();
    let d_top = params.d_top();

    let mut recs = Vec::with_capacity(images.len());
    let mut tds = Vec::with_capacity(images.len());
    for (img, label) in images.iter().zip(labels) {
        let rec = bottom_up(params, img, Mode::Nonnegative, None)?;
        let c_rec = label.unwrap_or(rec.c_hat);
        let td = top_down(params, c_rec, &rec, true)?;
        recs.push(rec);
        tds.push(td);
    }

    // per-layer tied least squares over the kernel entries
    let mut new_gammas = Vec::with_capacity(depth);
    for l in 0..depth {
        let layer = &params.layers[l];
        let q = layer.spec.filters * layer.spec.filter_h * layer.spec.filter_w * layer.spec.in_c;
        let k = q / layer.spec.filters;
        let p_dim = layer.spec.d_in();
        let mut gram = vec![0.0; q * q];
        let mut rhs = vec![0.0; q];
        let mut design = vec![0.0; p_dim * q];
        for (rec, td) in recs.iter().zip(&tds) {
            for v in &mut design {
                *v = 0.0;
            }
            let z_coarse = td.z[l + 1].data();
            for unit in 0..layer.spec.d_out() {
                if !rec.a_hat[l][unit] {
                    continue;
                }
                let v = z_coarse[unit];
                if v == 0.0 {
                    continue;
                }
                let (_, _, f) = layer.spec.unit_pos(unit);
                let col0 = f * k;
                layer.for_footprint(unit, rec.t_hat[l][unit], |canvas_idx, kern_idx| {
                    design[canvas_idx * q + col0 + kern_idx] += v;
                });
            }
            let target = rec.feature_maps[l].data();
            for r in 0..p_dim {
                let row = &design[r * q..(r + 1) * q];
                let y = target[r];
                for i in 0..q {
                    let xi = row[i];
                    if xi == 0.0 {
                        continue;
                    }
                    for j in i..q {
                        gram[i * q + j] += xi * row[j];
                    }
                    rhs[i] += xi * y;
                }
            }
        }
        for i in 0..q {
            for j in 0..i {
                gram[i * q + j] = gram[j * q + i];
            }
        }
        let trace: f64 = (0..q).map(|i| gram[i * q + i]).sum();
        let lam = config.ridge * trace / q as f64;
        for i in 0..q {
            gram[i * q + i] += lam;
        }
        let chol = cholesky(&gram, q)?;
        let sol = chol_solve(&chol, q, &rhs);
        new_gammas.push(Tensor::new(params.layers[l].gamma.shape().to_vec(), sol)?);
    }

    // class templates: means of top feature maps per (clamped) class
    let mut sums = vec![0.0; nc * d_top];
    let mut counts = vec![0usize; nc];
    for (rec, label) in recs.iter().zip(labels) {
        let c = label.unwrap_or(rec.c_hat);
        counts[c] += 1;
        let top = rec.feature_maps.last().unwrap().data();
        for i in 0..d_top {
            sums[c * d_top + i] += top[i];
        }
    }

    // latent priors from the inferred paths
    for l in 0..depth {
        let layer = &mut params.layers[l];
        let nt = layer.spec.n_translations();
        let mut t_counts = vec![0usize; nt];
        let mut on = 0usize;
        let mut total = 0usize;
        for rec in &recs {
            for unit in 0..layer.spec.d_out() {
                t_counts[rec.t_hat[l][unit]] += 1;
                if rec.a_hat[l][unit] {
                    on += 1;
                }
                total += 1;
            }
        }
        layer.gamma = new_gammas[l].clone();
        if total > 0 {
            layer.pi_t = t_counts.iter().map(|&c| c as f64 / total as f64).collect();
            layer.pi_on = on as f64 / total as f64;
        }
    }
    for c in 0..nc {
        if counts[c] > 0 {
            let d = &mut params.mu_c.data_mut()[c * d_top..(c + 1) * d_top];
            for i in 0..d_top {
                d[i] = sums[c * d_top + i] / counts[c] as f64;
            }
        }
    }
    let n = images.len() as f64;
    for c in 0..nc {
        params.pi_c[c] = counts[c] as f64 / n;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Deep training loop
// ---------------------------------------------------------------------------

/// Error rate of the fine-to-coarse decision over the labeled samples of a
/// set; 0 when no labels are present.
pub fn error_rate(params: &DrmmParams, dataset: &Dataset) -> Result<f64> {
    let mut n = 0usize;
    let mut wrong = 0usize;
    for (img, label) in dataset.images.iter().zip(&dataset.labels) {
        if let Some(y) = label {
            let rec = bottom_up(params, img, Mode::Nonnegative, None)?;
            n += 1;
            if rec.c_hat != *y {
                wrong += 1;
            }
        }
    }
    Ok(if n > 0 { wrong as f64 / n as f64 } else { 0.0 })
}

/// Generalized-EM training of a deep model. Per batch: hard E-step (the
/// fine-to-coarse pass inside the objective) then one M- or G-step.
/// Unlabeled samples are dropped up front when both unsupervised weights
/// are zero, so such a run is sample-for-sample identical to the purely
/// supervised one. Deterministic given the seed.
pub fn train(
    params: &DrmmParams,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(DrmmParams, Vec<LossReport>)> {
    train_observed(params, train_set, test_set, config, &mut |_| {})
}

/// `train` with a per-epoch observer (progress logging, wall-clock
/// bookkeeping). The observer cannot influence the run.
pub fn train_observed(
    params: &DrmmParams,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&LossReport),
) -> Result<(DrmmParams, Vec<LossReport>)> {
    config.validate()?;
    params.validate()?;
    if train_set.is_empty() {
        return Err(DrmmError::DegenerateInput("empty training set".into()));
    }

    let drop_unlabeled = match config.regime {
        Regime::Supervised => true,
        Regime::Unsupervised => false,
        Regime::SemiSupervised => config.beta_rec == 0.0 && config.beta_kl == 0.0,
    };
    let mut indices: Vec<usize> = (0..train_set.len())
        .filter(|&i| {
            if drop_unlabeled {
                train_set.labels[i].is_some()
            } else {
                true
            }
        })
        .collect();
    if indices.is_empty() {
        return Err(DrmmError::DegenerateInput(
            "no usable samples for this regime (supervised training needs labels)".into(),
        ));
    }
    if config.regime == Regime::Unsupervised && config.beta_rec == 0.0 && config.beta_kl == 0.0 {
        return Err(DrmmError::InvalidParam(
            "unsupervised training needs beta_rec or beta_kl > 0".into(),
        ));
    }

    let mut model = params.clone();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.rate_at(epoch);
        let mut rng = seed::rng(seed::derive(config.seed, "shuffle", epoch as u64));
        indices.shuffle(&mut rng);

        let mut ce_sum = 0.0;
        let mut rec_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut total_sum = 0.0;
        let mut err_count = 0usize;
        let mut lab_count = 0usize;
        let mut batches = 0usize;

        for chunk in indices.chunks(config.batch_size) {
            let images: Vec<Tensor> = chunk.iter().map(|&i| train_set.images[i].clone()).collect();
            let labels: Vec<Option<usize>> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            match config.step {
                StepKind::GStep => {
                    let (terms, grad) = batch_pass(&model, &images, &labels, config, true)?;
                    apply_gradient(&mut model, &grad.unwrap(), lr);
                    ce_sum += terms.cross_entropy;
                    rec_sum += terms.reconstruction;
                    kl_sum += terms.kl;
                    total_sum += terms.total;
                    err_count += terms.errors;
                    lab_count += terms.n_labeled;
                }
                StepKind::MStep => {
                    let terms = objective_terms(&model, &images, &labels, config)?;
                    m_step_deep(&mut model, &images, &labels, config)?;
                    ce_sum += terms.cross_entropy;
                    rec_sum += terms.reconstruction;
                    kl_sum += terms.kl;
                    total_sum += terms.total;
                    err_count += terms.errors;
                    lab_count += terms.n_labeled;
                }
            }
            batches += 1;
        }

        let b = batches as f64;
        let test_error = match test_set {
            Some(ts) => error_rate(&model, ts)?,
            None => 0.0,
        };
        let report = LossReport {
            epoch,
            cross_entropy: ce_sum / b,
            reconstruction: rec_sum / b,
            kl: kl_sum / b,
            total: total_sum / b,
            train_error: if lab_count > 0 { err_count as f64 / lab_count as f64 } else { 0.0 },
            test_error,
        };
        history.push(report);
        observer(history.last().expect("just pushed"));
        if let Some(target) = config.early_stop_error {
            if test_error <= target {
                break;
            }
        }
    }
    Ok((model, history))
}

/// Class templates from labeled data: run the fine-to-coarse pass with the
/// current kernels and set each class template to the mean top feature map
/// of its labeled samples. Classes with no labeled samples are unchanged.
pub fn init_class_templates(params: &mut DrmmParams, dataset: &Dataset) -> Result<()> {
    let nc = params.n_classes();
    let d_top = params.d_top();
    let mut sums = vec![0.0; nc * d_top];
    let mut counts = vec![0usize; nc];
    for (img, label) in dataset.images.iter().zip(&dataset.labels) {
        if let Some(y) = label {
            let rec = bottom_up(params, img, Mode::Nonnegative, None)?;
            let top = rec.feature_maps.last().unwrap().data();
            for i in 0..d_top {
                sums[*y * d_top + i] += top[i];
            }
            counts[*y] += 1;
        }
    }
    for c in 0..nc {
        if counts[c] > 0 {
            let d = &mut params.mu_c.data_mut()[c * d_top..(c + 1) * d_top];
            for i in 0..d_top {
                d[i] = sums[c * d_top + i] / counts[c] as f64;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Shallow hard-EM
// ---------------------------------------------------------------------------

/// Complete-data log-likelihood of a shallow mixture at the given hard
/// assignments.
pub fn complete_log_likelihood(params: &RmmParams, images: &[Tensor], assignments: &[(usize, usize)]) -> f64 {
    let d = params.dim() as f64;
    let norm = -(d / 2.0) * (2.0 * std::f64::consts::PI * params.sigma2).ln();
    let mut ll = 0.0;
    for (img, &(c, g)) in images.iter().zip(assignments) {
        let mu = params.template(c, g);
        let mut d2 = 0.0;
        for (x, m) in img.data().iter().zip(mu) {
            let r = x - m;
            d2 += r * r;
        }
        ll += safe_ln(params.pi_c[c]) + safe_ln(params.pi_g[g]) + norm - d2 / (2.0 * params.sigma2);
    }
    ll
}

const SIGMA_FLOOR: f64 = 1e-12;

/// Hard-EM for the shallow mixture. Full-batch when the batch size covers
/// the dataset (the regime with the monotone complete-data likelihood);
/// smaller batches refresh the parameters from cumulative epoch statistics
/// after every batch. Supervised regime clamps the class to the label.
/// `total` in the report is the negative complete-data log-likelihood.
pub fn train_rmm(
    params: &RmmParams,
    train_set: &Dataset,
    config: &TrainConfig,
) -> Result<(RmmParams, Vec<LossReport>)> {
    train_rmm_observed(params, train_set, None, config, &mut |_| {})
}

/// Labeled-sample error rate of the hard shallow classifier.
pub fn rmm_error_rate(params: &RmmParams, dataset: &Dataset) -> f64 {
    let mut n = 0usize;
    let mut wrong = 0usize;
    for (img, label) in dataset.images.iter().zip(&dataset.labels) {
        if let Some(y) = label {
            n += 1;
            if e_step_hard(params, img).0 != *y {
                wrong += 1;
            }
        }
    }
    if n > 0 { wrong as f64 / n as f64 } else { 0.0 }
}

/// `train_rmm` with per-epoch test evaluation and an observer hook.
pub fn train_rmm_observed(
    params: &RmmParams,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&LossReport),
) -> Result<(RmmParams, Vec<LossReport>)> {
    config.validate()?;
    params.validate()?;
    if config.step != StepKind::MStep {
        return Err(DrmmError::Unsupported(
            "shallow mixture training uses the closed-form M-step; see the relaxation module for gradient training".into(),
        ));
    }
    if train_set.is_empty() {
        return Err(DrmmError::DegenerateInput("empty training set".into()));
    }
    let n = train_set.len();
    let (nc, ng, d) = (params.n_classes(), params.n_nuisances(), params.dim());
    let mut model = params.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        let mut rng = seed::rng(seed::derive(config.seed, "shuffle", epoch as u64));
        if config.batch_size < n {
            indices.shuffle(&mut rng);
        }

        // cumulative sufficient statistics across the epoch
        let mut counts = vec![0usize; nc * ng];
        let mut sums = vec![0.0; nc * ng * d];
        let mut sq_sum = 0.0;
        let mut seen = 0usize;
        let mut assignments = vec![(0usize, 0usize); n];
        let mut errors = 0usize;
        let mut labeled = 0usize;

        for chunk in indices.chunks(config.batch_size) {
            for &i in chunk {
                let img = &train_set.images[i];
                let (c, g) = match (config.regime, train_set.labels[i]) {
                    (Regime::Supervised, Some(y)) | (Regime::SemiSupervised, Some(y)) => {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg_g = 0usize;
                        for g in 0..ng {
                            let mu = model.template(y, g);
                            let mut d2 = 0.0;
                            for (x, m) in img.data().iter().zip(mu) {
                                let r = x - m;
                                d2 += r * r;
                            }
                            let s = safe_ln(model.pi_g[g]) - d2 / (2.0 * model.sigma2);
                            if s > best {
                                best = s;
                                arg_g = g;
                            }
                        }
                        (y, arg_g)
                    }
                    _ => e_step_hard(&model, img),
                };
                if let Some(y) = train_set.labels[i] {
                    labeled += 1;
                    let (pred, _) = e_step_hard(&model, img);
                    if pred != y {
                        errors += 1;
                    }
                }
                assignments[i] = (c, g);
                let cell = c * ng + g;
                counts[cell] += 1;
                let s = &mut sums[cell * d..(cell + 1) * d];
                for (acc, &x) in s.iter_mut().zip(img.data()) {
                    *acc += x;
                }
                seen += 1;
            }

            // M-step from the statistics gathered so far this epoch
            for cell in 0..nc * ng {
                if counts[cell] == 0 {
                    continue;
                }
                let (c, g) = (cell / ng, cell % ng);
                let inv = 1.0 / counts[cell] as f64;
                let base = (c * ng + g) * d;
                let src = &sums[cell * d..(cell + 1) * d];
                let dst = &mut model.templates.data_mut()[base..base + d];
                for (t, &s) in dst.iter_mut().zip(src) {
                    *t = s * inv;
                }
            }
            let mut c_counts = vec![0usize; nc];
            let mut g_counts = vec![0usize; ng];
            for cell in 0..nc * ng {
                c_counts[cell / ng] += counts[cell];
                g_counts[cell % ng] += counts[cell];
            }
            for c in 0..nc {
                model.pi_c[c] = c_counts[c] as f64 / seen as f64;
            }
            for g in 0..ng {
                model.pi_g[g] = g_counts[g] as f64 / seen as f64;
            }
            sq_sum = 0.0;
            for &i in indices.iter().take(seen) {
                let (c, g) = assignments[i];
                let mu = model.template(c, g);
                for (x, m) in train_set.images[i].data().iter().zip(mu) {
                    let r = x - m;
                    sq_sum += r * r;
                }
            }
            model.sigma2 = (sq_sum / (seen as f64 * d as f64)).max(SIGMA_FLOOR);
        }

        let ll = complete_log_likelihood(&model, &train_set.images, &assignments);
        let test_error = test_set.map_or(0.0, |ts| rmm_error_rate(&model, ts));
        history.push(LossReport {
            epoch,
            cross_entropy: 0.0,
            reconstruction: sq_sum,
            kl: 0.0,
            total: -ll,
            train_error: if labeled > 0 { errors as f64 / labeled as f64 } else { 0.0 },
            test_error,
        });
        observer(history.last().expect("just pushed"));
        if let Some(target) = config.early_stop_error {
            if test_error <= target && test_set.is_some() {
                break;
            }
        }
    }
    Ok((model, history))
}

/// Farthest-point template initialization: the first template is a seeded
/// random sample, each next one the sample farthest from all chosen so
/// far. Priors uniform, switch prior ON, noise from the data spread.
pub fn init_rmm_farthest(
    images: &[Tensor],
    n_classes: usize,
    n_nuisances: usize,
    seed_value: u64,
) -> Result<RmmParams> {
    let k = n_classes * n_nuisances;
    if images.len() < k {
        return Err(DrmmError::DegenerateInput(format!(
            "need at least {} samples for {}x{} templates",
            k, n_classes, n_nuisances
        )));
    }
    let d = images[0].len();
    let mut rng = seed::rng(seed::derive(seed_value, "init-farthest", 0));
    let first = rand::Rng::random_range(&mut rng, 0..images.len());
    let mut chosen = vec![first];
    while chosen.len() < k {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0usize;
        for (i, img) in images.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let mut min_d = f64::INFINITY;
            for &j in &chosen {
                let mut d2 = 0.0;
                for (a, b) in img.data().iter().zip(images[j].data()) {
                    let r = a - b;
                    d2 += r * r;
                }
                min_d = min_d.min(d2);
            }
            if min_d > best {
                best = min_d;
                arg = i;
            }
        }
        chosen.push(arg);
    }
    let mut templates = vec![0.0; k * d];
    for (slot, &i) in chosen.iter().enumerate() {
        templates[slot * d..(slot + 1) * d].copy_from_slice(images[i].data());
    }
    // noise scale from the overall spread around the mean
    let mut mean = vec![0.0; d];
    for img in images {
        for (m, &x) in mean.iter_mut().zip(img.data()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= images.len() as f64;
    }
    let mut var = 0.0;
    for img in images {
        for (m, &x) in mean.iter().zip(img.data()) {
            let r = x - m;
            var += r * r;
        }
    }
    var /= (images.len() * d) as f64;
    RmmParams::new(
        vec![1.0 / n_classes as f64; n_classes],
        vec![1.0 / n_nuisances as f64; n_nuisances],
        1.0,
        Tensor::new(vec![n_classes, n_nuisances, d], templates)?,
        var.max(SIGMA_FLOOR),
    )
}
