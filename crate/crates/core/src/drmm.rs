//! Deep rendering mixture model. Generation walks coarse-to-fine through
//! per-layer nuisance transformations (translate a filter into the canvas,
//! mask it with a switch); inference runs fine-to-coarse as a max-sum
//! dynamic program whose messages are exactly conv / rectify / max-pool
//! feature maps, plus a top-down traceback that reconstructs the input
//! from the inferred rendering path.

use crate::error::{DrmmError, Result};
use crate::rmm::sample_categorical;
use crate::seed;
use crate::tensor::{conv2d, dot, ConvSpec, Padding, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Geometry of one layer. Bottom-up it consumes an `[in_h, in_w, in_c]`
/// canvas, correlates `filters` kernels of `filter_h x filter_w x in_c`
/// at `stride`, and pools non-overlapping `pool_h x pool_w` windows.
/// Coarse-to-fine it runs the same wiring in reverse: each output unit
/// places its (masked, scaled) kernel into the finer canvas at the
/// position selected by its translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub filters: usize,
    pub filter_h: usize,
    pub filter_w: usize,
    pub stride: usize,
    pub pool_h: usize,
    pub pool_w: usize,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 || self.filters < 1 || self.filter_h < 1 || self.filter_w < 1 {
            return Err(DrmmError::InvalidParam("layer extents/stride must be >= 1".into()));
        }
        if self.filter_h > self.in_h || self.filter_w > self.in_w {
            return Err(DrmmError::shape(
                "LayerSpec filter",
                format!("fits inside {}x{}", self.in_h, self.in_w),
                format!("{}x{}", self.filter_h, self.filter_w),
            ));
        }
        if self.conv_h() % self.pool_h != 0 || self.conv_w() % self.pool_w != 0 {
            return Err(DrmmError::InvalidParam(format!(
                "pool {}x{} does not tile the {}x{} correlation grid",
                self.pool_h,
                self.pool_w,
                self.conv_h(),
                self.conv_w()
            )));
        }
        Ok(())
    }

    pub fn conv_h(&self) -> usize {
        (self.in_h - self.filter_h) / self.stride + 1
    }

    pub fn conv_w(&self) -> usize {
        (self.in_w - self.filter_w) / self.stride + 1
    }

    pub fn out_h(&self) -> usize {
        self.conv_h() / self.pool_h
    }

    pub fn out_w(&self) -> usize {
        self.conv_w() / self.pool_w
    }

    pub fn d_in(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    pub fn d_out(&self) -> usize {
        self.out_h() * self.out_w() * self.filters
    }

    /// Size of the translation set per unit: one choice per pooling-window
    /// cell.
    pub fn n_translations(&self) -> usize {
        self.pool_h * self.pool_w
    }

    /// Unit index -> (y, x, f) on the output canvas.
    pub fn unit_pos(&self, unit: usize) -> (usize, usize, usize) {
        let f = unit % self.filters;
        let rest = unit / self.filters;
        (rest / self.out_w(), rest % self.out_w(), f)
    }

    /// Correlation-grid position selected by translation offset `t`
    /// (`t = wy * pool_w + wx`).
    pub fn conv_pos(&self, y: usize, x: usize, t: usize) -> (usize, usize) {
        (y * self.pool_h + t / self.pool_w, x * self.pool_w + t % self.pool_w)
    }

    /// Top-left input-canvas anchor of the kernel footprint at correlation
    /// position (cy, cx).
    pub fn anchor(&self, cy: usize, cx: usize) -> (usize, usize) {
        (cy * self.stride, cx * self.stride)
    }

    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec {
            filter_count: self.filters,
            filter_height: self.filter_h,
            filter_width: self.filter_w,
            filter_channels: self.in_c,
            stride: self.stride,
            padding: Padding::Valid,
        }
    }
}

/// One layer's parameters: the kernel bank, optional additive bias on the
/// finer canvas, and per-unit latent priors.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub spec: LayerSpec,
    /// Kernel bank, shape [filters, filter_h, filter_w, in_c].
    pub gamma: Tensor,
    /// Optional bias added to the finer canvas during rendering.
    pub alpha: Option<Tensor>,
    /// Prior over the translation set.
    pub pi_t: Vec<f64>,
    /// Prior probability that a unit's switch is ON.
    pub pi_on: f64,
}

impl LayerParams {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let want = [self.spec.filters, self.spec.filter_h, self.spec.filter_w, self.spec.in_c];
        if self.gamma.shape() != want {
            return Err(DrmmError::shape(
                "LayerParams gamma",
                format!("{:?}", want),
                format!("{:?}", self.gamma.shape()),
            ));
        }
        if let Some(a) = &self.alpha {
            if a.len() != self.spec.d_in() {
                return Err(DrmmError::shape(
                    "LayerParams alpha",
                    format!("[{}]", self.spec.d_in()),
                    format!("{:?}", a.shape()),
                ));
            }
        }
        if self.pi_t.len() != self.spec.n_translations() {
            return Err(DrmmError::shape(
                "LayerParams pi_t",
                format!("[{}]", self.spec.n_translations()),
                format!("[{}]", self.pi_t.len()),
            ));
        }
        let s: f64 = self.pi_t.iter().sum();
        if self.pi_t.iter().any(|&p| p < 0.0) || (s - 1.0).abs() > 1e-12 {
            return Err(DrmmError::InvalidParam("pi_t must be a probability vector".into()));
        }
        if !(0.0..=1.0).contains(&self.pi_on) {
            return Err(DrmmError::InvalidParam(format!("pi_on = {} outside [0, 1]", self.pi_on)));
        }
        Ok(())
    }

    pub fn has_bias(&self) -> bool {
        self.alpha.as_ref().is_some_and(|a| a.data().iter().any(|&v| v != 0.0))
    }

    /// Kernel slice for filter f.
    pub fn kernel(&self, f: usize) -> &[f64] {
        let k = self.spec.filter_h * self.spec.filter_w * self.spec.in_c;
        &self.gamma.data()[f * k..(f + 1) * k]
    }

    /// Adds `scale` times kernel `f` into `canvas` at the footprint of
    /// `unit` under translation `t`. The canvas is the finer layer,
    /// `[in_h, in_w, in_c]` row-major.
    pub fn place_add(&self, canvas: &mut [f64], unit: usize, t: usize, scale: f64) {
        let sp = &self.spec;
        let (y, x, f) = sp.unit_pos(unit);
        let (cy, cx) = sp.conv_pos(y, x, t);
        let (iy0, ix0) = sp.anchor(cy, cx);
        let kern = self.kernel(f);
        let run = sp.filter_w * sp.in_c;
        for ky in 0..sp.filter_h {
            let cbase = ((iy0 + ky) * sp.in_w + ix0) * sp.in_c;
            let kbase = ky * run;
            for i in 0..run {
                canvas[cbase + i] += scale * kern[kbase + i];
            }
        }
    }

    /// Visits every (canvas index, kernel index) pair of the footprint of
    /// `unit` under translation `t`.
    pub fn for_footprint(&self, unit: usize, t: usize, mut visit: impl FnMut(usize, usize)) {
        let sp = &self.spec;
        let (y, x, _f) = sp.unit_pos(unit);
        let (cy, cx) = sp.conv_pos(y, x, t);
        let (iy0, ix0) = sp.anchor(cy, cx);
        let run = sp.filter_w * sp.in_c;
        for ky in 0..sp.filter_h {
            let cbase = ((iy0 + ky) * sp.in_w + ix0) * sp.in_c;
            let kbase = ky * run;
            for i in 0..run {
                visit(cbase + i, kbase + i);
            }
        }
    }

    /// Inner product of kernel `f` with the footprint of `unit` under
    /// translation `t`; the adjoint of `place_add`.
    pub fn gather(&self, canvas: &[f64], unit: usize, t: usize) -> f64 {
        let sp = &self.spec;
        let (y, x, f) = sp.unit_pos(unit);
        let (cy, cx) = sp.conv_pos(y, x, t);
        let (iy0, ix0) = sp.anchor(cy, cx);
        let kern = self.kernel(f);
        let run = sp.filter_w * sp.in_c;
        let mut acc = 0.0;
        for ky in 0..sp.filter_h {
            let cbase = ((iy0 + ky) * sp.in_w + ix0) * sp.in_c;
            let kbase = ky * run;
            for i in 0..run {
                acc += canvas[cbase + i] * kern[kbase + i];
            }
        }
        acc
    }
}

/// Full deep model. `layers[0]` touches the image; `layers[L-1]` touches
/// the class templates.
#[derive(Debug, Clone)]
pub struct DrmmParams {
    pub layers: Vec<LayerParams>,
    /// Top templates, shape [n_classes, D^(L)]. Row-major over the top
    /// canvas [out_h, out_w, filters] of the last layer.
    pub mu_c: Tensor,
    pub pi_c: Vec<f64>,
    pub sigma2: f64,
}

impl DrmmParams {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DrmmError::InvalidParam("model needs at least one layer".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if i + 1 < self.layers.len() {
                let next = &self.layers[i + 1].spec;
                let sp = &layer.spec;
                if next.in_h != sp.out_h() || next.in_w != sp.out_w() || next.in_c != sp.filters {
                    return Err(DrmmError::shape(
                        format!("layer {} -> {} chaining", i, i + 1),
                        format!("[{}, {}, {}]", sp.out_h(), sp.out_w(), sp.filters),
                        format!("[{}, {}, {}]", next.in_h, next.in_w, next.in_c),
                    ));
                }
            }
        }
        let top = self.layers.last().unwrap().spec;
        if self.mu_c.shape().len() != 2
            || self.mu_c.shape()[0] != self.pi_c.len()
            || self.mu_c.shape()[1] != top.d_out()
        {
            return Err(DrmmError::shape(
                "DrmmParams mu_c",
                format!("[{}, {}]", self.pi_c.len(), top.d_out()),
                format!("{:?}", self.mu_c.shape()),
            ));
        }
        let s: f64 = self.pi_c.iter().sum();
        if self.pi_c.iter().any(|&p| p < 0.0) || (s - 1.0).abs() > 1e-12 {
            return Err(DrmmError::InvalidParam("pi_c must be a probability vector".into()));
        }
        if !(self.sigma2 > 0.0) {
            return Err(DrmmError::InvalidParam(format!("sigma2 = {} must be positive", self.sigma2)));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn n_classes(&self) -> usize {
        self.pi_c.len()
    }

    pub fn d_top(&self) -> usize {
        self.layers.last().unwrap().spec.d_out()
    }

    pub fn d_image(&self) -> usize {
        self.layers[0].spec.d_in()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let sp = self.layers[0].spec;
        [sp.in_h, sp.in_w, sp.in_c]
    }

    pub fn mu(&self, c: usize) -> &[f64] {
        let d = self.d_top();
        &self.mu_c.data()[c * d..(c + 1) * d]
    }

    pub fn any_bias(&self) -> bool {
        self.layers.iter().any(|l| l.has_bias())
    }

    /// Spread of top-template norms (max - min of ||mu_c||). The exactness
    /// of class inference leans on near-constant template norms; this is
    /// the monitored quantity.
    pub fn mu_norm_spread(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in 0..self.n_classes() {
            let n = dot(self.mu(c), self.mu(c)).sqrt();
            lo = lo.min(n);
            hi = hi.max(n);
        }
        hi - lo
    }

    /// Gaussian-initialized model over the given layer chain: kernels
    /// drawn with variance 2 / fan-in, templates unit Gaussian scaled by
    /// 1/sqrt(D).
    pub fn init_random(specs: &[LayerSpec], n_classes: usize, sigma2: f64, seed_value: u64) -> Result<DrmmParams> {
        let mut rng = seed::rng(seed::derive(seed_value, "init", 0));
        let mut layers = Vec::with_capacity(specs.len());
        for sp in specs {
            sp.validate()?;
            let fan_in = sp.filter_h * sp.filter_w * sp.in_c;
            let sd = (2.0 / fan_in as f64).sqrt();
            let n = sp.filters * fan_in;
            let mut gamma = vec![0.0; n];
            for v in &mut gamma {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = sd * z;
            }
            layers.push(LayerParams {
                spec: *sp,
                gamma: Tensor::new(vec![sp.filters, sp.filter_h, sp.filter_w, sp.in_c], gamma)?,
                alpha: None,
                pi_t: vec![1.0 / sp.n_translations() as f64; sp.n_translations()],
                pi_on: 0.5,
            });
        }
        let d_top = layers.last().unwrap().spec.d_out();
        let sd = 1.0 / (d_top as f64).sqrt();
        let mut mu = vec![0.0; n_classes * d_top];
        for v in &mut mu {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = sd * z;
        }
        let params = DrmmParams {
            layers,
            mu_c: Tensor::new(vec![n_classes, d_top], mu)?,
            pi_c: vec![1.0 / n_classes as f64; n_classes],
            sigma2,
        };
        params.validate()?;
        Ok(params)
    }
}

/// A full rendering path: the class plus, for every layer, one translation
/// and one switch per unit. `t[l]` / `a[l]` belong to `layers[l]` and have
/// length `layers[l].spec.d_out()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentConfig {
    pub c: usize,
    pub t: Vec<Vec<usize>>,
    pub a: Vec<Vec<bool>>,
}

impl LatentConfig {
    pub fn validate(&self, params: &DrmmParams) -> Result<()> {
        if self.c >= params.n_classes() {
            return Err(DrmmError::InvalidParam(format!(
                "class {} out of range ({} classes)",
                self.c,
                params.n_classes()
            )));
        }
        if self.t.len() != params.depth() || self.a.len() != params.depth() {
            return Err(DrmmError::shape(
                "LatentConfig layers",
                format!("{}", params.depth()),
                format!("t: {}, a: {}", self.t.len(), self.a.len()),
            ));
        }
        for (l, layer) in params.layers.iter().enumerate() {
            let d = layer.spec.d_out();
            if self.t[l].len() != d || self.a[l].len() != d {
                return Err(DrmmError::shape(
                    format!("LatentConfig layer {}", l),
                    format!("{} units", d),
                    format!("t: {}, a: {}", self.t[l].len(), self.a[l].len()),
                ));
            }
            let nt = layer.spec.n_translations();
            if self.t[l].iter().any(|&t| t >= nt) {
                return Err(DrmmError::InvalidParam(format!(
                    "translation out of range at layer {} (|T| = {})",
                    l, nt
                )));
            }
        }
        Ok(())
    }
}

/// Applies one rendering step: the coarse vector (length `d_out`) through
/// the layer's masked, translated kernels onto the finer canvas (length
/// `d_in`), plus the layer bias when present.
pub fn apply_lambda(layer: &LayerParams, z_coarse: &[f64], t: &[usize], a: &[bool]) -> Vec<f64> {
    let mut canvas = match &layer.alpha {
        Some(al) => al.data().to_vec(),
        None => vec![0.0; layer.spec.d_in()],
    };
    for unit in 0..layer.spec.d_out() {
        if a[unit] {
            let v = z_coarse[unit];
            if v != 0.0 {
                layer.place_add(&mut canvas, unit, t[unit], v);
            }
        }
    }
    canvas
}

/// Noise-free rendering of `mu_{c g}`: walks the latent path from the top
/// templates down to the image canvas.
pub fn render(params: &DrmmParams, latents: &LatentConfig) -> Result<Tensor> {
    latents.validate(params)?;
    let mut z = params.mu(latents.c).to_vec();
    for l in (0..params.depth()).rev() {
        z = apply_lambda(&params.layers[l], &z, &latents.t[l], &latents.a[l]);
    }
    let [h, w, c] = params.image_shape();
    Tensor::new(vec![h, w, c], z)
}

/// Draws a full latent path from the priors, renders it, and adds
/// isotropic Gaussian pixel noise.
pub fn sample(params: &DrmmParams, seed_value: u64) -> Result<(Tensor, LatentConfig)> {
    let mut rng = seed::rng(seed_value);
    let c = sample_categorical(&mut rng, &params.pi_c);
    let mut t = vec![Vec::new(); params.depth()];
    let mut a = vec![Vec::new(); params.depth()];
    for l in (0..params.depth()).rev() {
        let layer = &params.layers[l];
        let d = layer.spec.d_out();
        let mut tl = Vec::with_capacity(d);
        let mut al = Vec::with_capacity(d);
        for _ in 0..d {
            tl.push(sample_categorical(&mut rng, &layer.pi_t));
            al.push(rng.random::<f64>() < layer.pi_on);
        }
        t[l] = tl;
        a[l] = al;
    }
    let latents = LatentConfig { c, t, a };
    let image = sample_with_latents(params, &latents, &mut rng)?;
    Ok((image, latents))
}

/// Renders a fixed latent path and adds fresh Gaussian noise from `rng`.
pub fn sample_with_latents(
    params: &DrmmParams,
    latents: &LatentConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Tensor> {
    let clean = render(params, latents)?;
    let sigma = params.sigma2.sqrt();
    let data = clean
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma * z
        })
        .collect();
    Tensor::new(clean.shape().to_vec(), data)
}

const PATH_CAP: u64 = 1_000_000;

/// Sums every active root-to-pixel path weight: the product of kernel
/// entries and switches along the chain times the top template entry.
/// Equals `render(params, latents)[pixel]` when the model has no layer
/// biases.
pub fn pixel_sum_over_paths(params: &DrmmParams, latents: &LatentConfig, pixel: usize) -> Result<f64> {
    latents.validate(params)?;
    if params.any_bias() {
        return Err(DrmmError::Unsupported(
            "sum-over-paths requires zero layer biases".into(),
        ));
    }
    if pixel >= params.d_image() {
        return Err(DrmmError::InvalidParam(format!(
            "pixel {} out of range ({})",
            pixel,
            params.d_image()
        )));
    }

    // structural path count first, so the cap error can name the total
    let mut counts = vec![1u64; 1];
    let mut positions = vec![pixel];
    for l in 0..params.depth() {
        let layer = &params.layers[l];
        let mut next_pos = Vec::new();
        let mut next_cnt = Vec::new();
        let mut total: u64 = 0;
        for (&p, &cnt) in positions.iter().zip(&counts) {
            for (unit, _t, _off) in covering_units(layer, p, &latents.t[l]) {
                match next_pos.iter().position(|&q| q == unit) {
                    Some(i) => next_cnt[i] += cnt,
                    None => {
                        next_pos.push(unit);
                        next_cnt.push(cnt);
                    }
                }
                total = total.saturating_add(cnt);
            }
        }
        if total > PATH_CAP {
            return Err(DrmmError::EnumerationCap { count: total, cap: PATH_CAP });
        }
        positions = next_pos;
        counts = next_cnt;
    }

    let top = recurse_paths(params, latents, 0, pixel, 1.0);
    Ok(top)
}

fn recurse_paths(params: &DrmmParams, latents: &LatentConfig, l: usize, pos: usize, weight: f64) -> f64 {
    if l == params.depth() {
        return weight * params.mu(latents.c)[pos];
    }
    let layer = &params.layers[l];
    let mut acc = 0.0;
    for (unit, _t, kern_idx) in covering_units(layer, pos, &latents.t[l]) {
        if !latents.a[l][unit] {
            continue;
        }
        let (_, _, f) = layer.spec.unit_pos(unit);
        let lam = layer.kernel(f)[kern_idx];
        if lam != 0.0 {
            acc += recurse_paths(params, latents, l + 1, unit, weight * lam);
        }
    }
    acc
}

/// Units of the layer whose kernel footprint (under the unit's chosen
/// translation) covers canvas position `pos`; yields the flat kernel
/// entry index of the overlap.
fn covering_units<'a>(
    layer: &'a LayerParams,
    pos: usize,
    t: &'a [usize],
) -> impl Iterator<Item = (usize, usize, usize)> + 'a {
    let sp = layer.spec;
    let c = pos % sp.in_c;
    let rest = pos / sp.in_c;
    let (py, px) = (rest / sp.in_w, rest % sp.in_w);
    (0..sp.d_out()).filter_map(move |unit| {
        let (y, x, _f) = sp.unit_pos(unit);
        let (cy, cx) = sp.conv_pos(y, x, t[unit]);
        let (iy0, ix0) = sp.anchor(cy, cx);
        if py >= iy0 && py < iy0 + sp.filter_h && px >= ix0 && px < ix0 + sp.filter_w {
            let ky = py - iy0;
            let kx = px - ix0;
            Some((unit, t[unit], (ky * sp.filter_w + kx) * sp.in_c + c))
        } else {
            None
        }
    })
}

/// Masked maximization: value `1^T ReLU(z o u)` with the attaining mask
/// `a_hat = [z o u > 0]` (strict, so exact zeros stay OFF).
pub fn mask_opt(z: &[f64], u: &[f64]) -> (f64, Vec<bool>) {
    debug_assert_eq!(z.len(), u.len());
    let mut value = 0.0;
    let mut a_hat = vec![false; z.len()];
    for i in 0..z.len() {
        let p = z[i] * u[i];
        if p > 0.0 {
            value += p;
            a_hat[i] = true;
        }
    }
    (value, a_hat)
}

/// Row max-marginals with sign decomposition: value
/// `sum_x |z_x| max_t sign(z_x) u_x(t)`, per-row argmax `t_hat`, and the
/// attained column `u_x(t_hat_x) = sign(z_x) max_t sign(z_x) u_x(t)`.
/// `u` is `[D, |T|]`; `sign(0)` is `+1`; ties keep the lowest `t`.
pub fn rowmax_opt(z: &[f64], u: &Tensor) -> (f64, Vec<usize>, Vec<f64>) {
    let d = z.len();
    let nt = u.shape()[1];
    debug_assert_eq!(u.shape()[0], d);
    let mut value = 0.0;
    let mut t_hat = vec![0usize; d];
    let mut u_at = vec![0.0; d];
    for x in 0..d {
        let s = if z[x] < 0.0 { -1.0 } else { 1.0 };
        let row = &u.data()[x * nt..(x + 1) * nt];
        let mut best = f64::NEG_INFINITY;
        let mut best_t = 0usize;
        for (t, &v) in row.iter().enumerate() {
            let sv = s * v;
            if sv > best {
                best = sv;
                best_t = t;
            }
        }
        value += z[x].abs() * best;
        t_hat[x] = best_t;
        u_at[x] = s * best;
    }
    (value, t_hat, u_at)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// All top-down signs assumed +1 (nonnegative intermediate templates).
    Nonnegative,
    /// Use caller-supplied per-layer signs.
    Signed,
}

/// Per-layer top-down templates and their signs. Index l holds the canvas
/// at level l (0 = image, L = top); signs are +1/-1 with sign(0) = +1.
#[derive(Debug, Clone)]
pub struct SignedState {
    pub z: Vec<Tensor>,
    pub s: Vec<Vec<f64>>,
}

impl SignedState {
    pub fn from_templates(z: Vec<Tensor>) -> Self {
        let s = z
            .iter()
            .map(|t| t.data().iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect())
            .collect();
        SignedState { z, s }
    }

    pub fn reconstruction(&self) -> &Tensor {
        &self.z[0]
    }
}

/// Everything the fine-to-coarse pass produces: the decision, per-class
/// scores, every feature map and pre-activation map, and the per-layer
/// argmax records the top-down pass and the learners consume.
#[derive(Debug, Clone)]
pub struct BottomUpRecord {
    pub c_hat: usize,
    pub class_scores: Vec<f64>,
    /// I^(0) .. I^(L); I^(0) is the input image.
    pub feature_maps: Vec<Tensor>,
    /// Correlation outputs u^(1) .. u^(L) (pre rectification/pooling).
    pub conv_maps: Vec<Tensor>,
    /// Per layer, per unit: selected within-window offset.
    pub t_hat: Vec<Vec<usize>>,
    /// Per layer, per unit: inferred switch.
    pub a_hat: Vec<Vec<bool>>,
}

/// Fine-to-coarse max-sum inference. Nonnegative mode is exactly
/// max-pool . rectify . correlate per layer; signed mode applies the
/// caller's per-layer signs (one vector per layer, length D^(l)) to the
/// correlation outputs before maximizing. Returns the full record.
pub fn bottom_up(params: &DrmmParams, image: &Tensor, mode: Mode, signs: Option<&[Vec<f64>]>) -> Result<BottomUpRecord> {
    if params.any_bias() {
        return Err(DrmmError::Unsupported(
            "exact inference assumes zero layer biases".into(),
        ));
    }
    let [h, w, ch] = params.image_shape();
    if image.shape() != [h, w, ch] {
        return Err(DrmmError::shape(
            "bottom_up image",
            format!("[{}, {}, {}]", h, w, ch),
            format!("{:?}", image.shape()),
        ));
    }
    if mode == Mode::Signed {
        let s = signs.ok_or_else(|| DrmmError::MissingRecords("signed mode needs per-layer signs".into()))?;
        if s.len() != params.depth() {
            return Err(DrmmError::shape(
                "bottom_up signs",
                format!("{} layers", params.depth()),
                format!("{}", s.len()),
            ));
        }
    }

    let mut feature_maps = vec![image.clone()];
    let mut conv_maps = Vec::with_capacity(params.depth());
    let mut t_hat = Vec::with_capacity(params.depth());
    let mut a_hat = Vec::with_capacity(params.depth());

    for (l, layer) in params.layers.iter().enumerate() {
        let sp = layer.spec;
        let bias = Tensor::zeros(vec![sp.filters]);
        let u = conv2d(feature_maps.last().unwrap(), &layer.gamma, &sp.conv_spec(), &bias)?;
        let d = sp.d_out();
        let mut values = vec![0.0; d];
        let mut tl = vec![0usize; d];
        let mut al = vec![false; d];
        for unit in 0..d {
            let s_x = match mode {
                Mode::Nonnegative => 1.0,
                Mode::Signed => {
                    let sl = &signs.unwrap()[l];
                    if sl.len() != d {
                        return Err(DrmmError::shape(
                            format!("signs layer {}", l),
                            format!("{}", d),
                            format!("{}", sl.len()),
                        ));
                    }
                    sl[unit]
                }
            };
            let (y, x, f) = sp.unit_pos(unit);
            let mut best = f64::NEG_INFINITY;
            let mut best_t = 0usize;
            for t in 0..sp.n_translations() {
                let (cy, cx) = sp.conv_pos(y, x, t);
                let v = s_x * u.data()[u.idx3(cy, cx, f)];
                if v > best {
                    best = v;
                    best_t = t;
                }
            }
            al[unit] = best > 0.0;
            values[unit] = s_x * if best > 0.0 { best } else { 0.0 };
            tl[unit] = best_t;
        }
        feature_maps.push(Tensor::new(vec![sp.out_h(), sp.out_w(), sp.filters], values)?);
        conv_maps.push(u);
        t_hat.push(tl);
        a_hat.push(al);
    }

    let top = feature_maps.last().unwrap();
    let mut class_scores = Vec::with_capacity(params.n_classes());
    let mut c_hat = 0usize;
    let mut best = f64::NEG_INFINITY;
    for c in 0..params.n_classes() {
        let s = dot(params.mu(c), top.data());
        if s > best {
            best = s;
            c_hat = c;
        }
        class_scores.push(s);
    }

    Ok(BottomUpRecord {
        c_hat,
        class_scores,
        feature_maps,
        conv_maps,
        t_hat,
        a_hat,
    })
}

/// Coarse-to-fine traceback: renders the inferred class template down
/// through the recorded (t_hat, a_hat) path. `nonneg` rectifies each
/// intermediate canvas (the nonnegativity the NN model family enforces).
/// Returns every level plus realized signs; level 0 is the reconstruction.
pub fn top_down(params: &DrmmParams, c_hat: usize, rec: &BottomUpRecord, nonneg: bool) -> Result<SignedState> {
    if rec.t_hat.len() != params.depth() || rec.a_hat.len() != params.depth() {
        return Err(DrmmError::MissingRecords(format!(
            "need argmax records for {} layers, have {}",
            params.depth(),
            rec.t_hat.len()
        )));
    }
    if c_hat >= params.n_classes() {
        return Err(DrmmError::InvalidParam(format!("class {} out of range", c_hat)));
    }
    let mut z_levels = vec![Tensor::zeros(vec![0]); params.depth() + 1];
    let top_sp = params.layers.last().unwrap().spec;
    z_levels[params.depth()] =
        Tensor::new(vec![top_sp.out_h(), top_sp.out_w(), top_sp.filters], params.mu(c_hat).to_vec())?;
    for l in (0..params.depth()).rev() {
        let layer = &params.layers[l];
        let d = layer.spec.d_out();
        if rec.t_hat[l].len() != d || rec.a_hat[l].len() != d {
            return Err(DrmmError::MissingRecords(format!(
                "layer {} records cover {} units, need {}",
                l,
                rec.t_hat[l].len(),
                d
            )));
        }
        let mut canvas = apply_lambda(layer, z_levels[l + 1].data(), &rec.t_hat[l], &rec.a_hat[l]);
        if nonneg {
            for v in &mut canvas {
                if !(*v > 0.0) {
                    *v = 0.0;
                }
            }
        }
        let sp = layer.spec;
        z_levels[l] = Tensor::new(vec![sp.in_h, sp.in_w, sp.in_c], canvas)?;
    }
    Ok(SignedState::from_templates(z_levels))
}

/// Free-parameter counts: the layered factorization versus the flattened
/// single-layer mixture over the same nuisance group. `g_sizes[l]` is the
/// nuisance cardinality of layer l+1, `d[l]` the canvas dimension at level
/// l (so `d` has one more entry than `g_sizes`).
pub fn count_params(d: &[usize], g_sizes: &[usize], n_classes: usize) -> (u64, u64) {
    assert_eq!(d.len(), g_sizes.len() + 1, "need D^(0..=L) and |G^(1..=L)|");
    let mut deep: u64 = 0;
    for l in 0..g_sizes.len() {
        deep += (g_sizes[l] * d[l] * d[l + 1]) as u64;
    }
    deep += (n_classes * d[d.len() - 1]) as u64;
    let mut shallow: u64 = (d[0] * n_classes) as u64;
    for &g in g_sizes {
        shallow *= g as u64;
    }
    (deep, shallow)
}

/// Counts for a concrete model: each unit's nuisance ranges over its
/// translation set times the binary switch.
pub fn count_params_of(params: &DrmmParams) -> (u64, u64) {
    let mut d = vec![params.d_image()];
    let mut g = Vec::new();
    for layer in &params.layers {
        d.push(layer.spec.d_out());
        g.push(layer.spec.n_translations() * 2);
    }
    count_params(&d, &g, params.n_classes())
}

/// Deep model with a Gaussian top latent instead of class templates.
#[derive(Debug, Clone)]
pub struct DrfmParams {
    pub layers: Vec<LayerParams>,
    /// Linear map from the top latent to the top canvas, [D^(L), d].
    pub top_map: Tensor,
    pub sigma2: f64,
}

impl DrfmParams {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DrmmError::InvalidParam("model needs at least one layer".into()));
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        let d_top = self.layers.last().unwrap().spec.d_out();
        let shape = self.top_map.shape();
        if shape.len() != 2 || shape[0] != d_top || shape[1] < 1 {
            return Err(DrmmError::shape(
                "DrfmParams top_map",
                format!("[{}, d >= 1]", d_top),
                format!("{:?}", shape),
            ));
        }
        if !(self.sigma2 > 0.0) {
            return Err(DrmmError::InvalidParam("sigma2 must be positive".into()));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.top_map.shape()[1]
    }
}

/// Samples the factor variant: standard-normal top latent, linear map to
/// the top canvas, then the usual per-layer rendering walk plus pixel
/// noise. Returns the image, the latent path, and the top draw.
pub fn drfm_sample(params: &DrfmParams, seed_value: u64) -> Result<(Tensor, LatentConfig, Vec<f64>)> {
    params.validate()?;
    let mut rng = seed::rng(seed_value);
    let d_lat = params.latent_dim();
    let mut z_top = vec![0.0; d_lat];
    for v in &mut z_top {
        *v = StandardNormal.sample(&mut rng);
    }
    let d_top = params.layers.last().unwrap().spec.d_out();
    let mut z = vec![0.0; d_top];
    for r in 0..d_top {
        z[r] = dot(&params.top_map.data()[r * d_lat..(r + 1) * d_lat], &z_top);
    }
    let mut t = vec![Vec::new(); params.layers.len()];
    let mut a = vec![Vec::new(); params.layers.len()];
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let d = layer.spec.d_out();
        let mut tl = Vec::with_capacity(d);
        let mut al = Vec::with_capacity(d);
        for _ in 0..d {
            tl.push(sample_categorical(&mut rng, &layer.pi_t));
            al.push(rng.random::<f64>() < layer.pi_on);
        }
        t[l] = tl;
        a[l] = al;
        z = apply_lambda(layer, &z, &t[l], &a[l]);
    }
    let sigma = params.sigma2.sqrt();
    for v in &mut z {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * n;
    }
    let sp = params.layers[0].spec;
    let image = Tensor::new(vec![sp.in_h, sp.in_w, sp.in_c], z)?;
    let latents = LatentConfig { c: 0, t, a };
    Ok((image, latents, z_top))
}

/// Test helper: a layer realizing an arbitrary dense matrix (d_in x
/// d_out). The whole input is one footprint, each filter is one column,
/// one translation.
#[cfg(test)]
pub(crate) fn test_dense_layer(matrix: &[f64], d_in: usize, d_out: usize) -> LayerParams {
    let mut gamma = vec![0.0; d_out * d_in];
    for r in 0..d_in {
        for c in 0..d_out {
            gamma[c * d_in + r] = matrix[r * d_out + c];
        }
    }
    LayerParams {
        spec: LayerSpec {
            in_h: d_in,
            in_w: 1,
            in_c: 1,
            filters: d_out,
            filter_h: d_in,
            filter_w: 1,
            stride: 1,
            pool_h: 1,
            pool_w: 1,
        },
        gamma: Tensor::new(vec![d_out, d_in, 1, 1], gamma).unwrap(),
        alpha: None,
        pi_t: vec![1.0],
        pi_on: 0.5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{maxpool_argmax, relu, PoolSpec};
    use rand::Rng;

    use super::test_dense_layer as dense_layer;

    fn all_on(params: &DrmmParams, c: usize) -> LatentConfig {
        LatentConfig {
            c,
            t: params.layers.iter().map(|l| vec![0; l.spec.d_out()]).collect(),
            a: params.layers.iter().map(|l| vec![true; l.spec.d_out()]).collect(),
        }
    }

    fn identity_model(d: usize, n_classes: usize, sigma2: f64, seed_val: u64) -> DrmmParams {
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let mut rng = seed::rng(seed_val);
        let mu: Vec<f64> = (0..n_classes * d).map(|_| rng.random_range(0.1..1.0)).collect();
        DrmmParams {
            layers: vec![dense_layer(&eye, d, d)],
            mu_c: Tensor::new(vec![n_classes, d], mu).unwrap(),
            pi_c: vec![1.0 / n_classes as f64; n_classes],
            sigma2,
        }
    }

    #[test]
    fn render_identity_returns_template() {
        let p = identity_model(4, 2, 0.01, 1);
        let img = render(&p, &all_on(&p, 1)).unwrap();
        assert_eq!(img.data(), p.mu(1));
    }

    #[test]
    fn render_all_off_is_zero() {
        let p = identity_model(4, 2, 0.01, 2);
        let mut latents = all_on(&p, 0);
        latents.a[0] = vec![false; 4];
        let img = render(&p, &latents).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn render_hand_masked_matrix() {
        let matrix = [1.0, 2.0, 3.0, 4.0]; // rows: [1,2], [3,4]
        let p = DrmmParams {
            layers: vec![dense_layer(&matrix, 2, 2)],
            mu_c: Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
            pi_c: vec![1.0],
            sigma2: 1.0,
        };
        let latents = LatentConfig { c: 0, t: vec![vec![0, 0]], a: vec![vec![true, false]] };
        let img = render(&p, &latents).unwrap();
        assert_eq!(img.data(), &[1.0, 3.0]);
    }

    #[test]
    fn render_alpha_adds_bias() {
        let mut p = identity_model(3, 1, 1.0, 3);
        p.layers[0].alpha = Some(Tensor::from_vec(vec![0.5, -0.5, 1.0]).unwrap());
        let mut latents = all_on(&p, 0);
        latents.a[0] = vec![false; 3];
        let img = render(&p, &latents).unwrap();
        assert_eq!(img.data(), &[0.5, -0.5, 1.0]);
    }

    #[test]
    fn sample_zero_noise_equals_render_and_deterministic() {
        let mut p = identity_model(4, 2, 1e-18, 4);
        p.sigma2 = 1e-18;
        let (img, latents) = sample(&p, 42).unwrap();
        let clean = render(&p, &latents).unwrap();
        for i in 0..4 {
            assert!((img.data()[i] - clean.data()[i]).abs() < 1e-7);
        }
        let (img2, latents2) = sample(&p, 42).unwrap();
        assert_eq!(img.data(), img2.data());
        assert_eq!(latents, latents2);
    }

    #[test]
    fn sample_monte_carlo_mean_matches_render() {
        let p = identity_model(3, 1, 0.04, 5);
        let latents = all_on(&p, 0);
        let clean = render(&p, &latents).unwrap();
        let n = 10_000;
        let mut rng = seed::rng(777);
        let mut mean = vec![0.0; 3];
        for _ in 0..n {
            let s = sample_with_latents(&p, &latents, &mut rng).unwrap();
            for i in 0..3 {
                mean[i] += s.data()[i];
            }
        }
        let bound = 3.0 * 0.2 / (n as f64).sqrt();
        for i in 0..3 {
            mean[i] /= n as f64;
            assert!(
                (mean[i] - clean.data()[i]).abs() < bound,
                "pixel {}: {} vs {}",
                i,
                mean[i],
                clean.data()[i]
            );
        }
    }

    #[test]
    fn mask_opt_hand_cases() {
        let (v, a) = mask_opt(&[1.0, -2.0], &[3.0, 4.0]);
        assert_eq!(v, 3.0);
        assert_eq!(a, vec![true, false]);

        let (v, a) = mask_opt(&[0.5, 2.0], &[1.0, 3.0]);
        assert_eq!(v, 0.5 + 6.0);
        assert_eq!(a, vec![true, true]);

        let (v, a) = mask_opt(&[1.0, -1.0], &[0.0, 0.0]);
        assert_eq!(v, 0.0);
        assert_eq!(a, vec![false, false]);
    }

    #[test]
    fn rowmax_opt_hand_case() {
        let z = [2.0, -1.0];
        let u = Tensor::new(vec![2, 2], vec![-1.0, 5.0, 3.0, -4.0]).unwrap();
        let (v, t_hat, u_at) = rowmax_opt(&z, &u);
        assert_eq!(v, 14.0);
        assert_eq!(t_hat, vec![1, 1]);
        assert_eq!(u_at, vec![5.0, -4.0]);
    }

    #[test]
    fn rowmax_opt_nonneg_is_plain_rowmax_and_singleton_is_dot() {
        let z = [1.0, 2.0, 0.0];
        let u = Tensor::new(vec![3, 2], vec![0.3, -0.8, -0.2, 0.9, -1.0, -2.0]).unwrap();
        let (_, t_hat, _) = rowmax_opt(&z, &u);
        assert_eq!(t_hat, vec![0, 1, 0]);

        let z = [0.5, -1.5];
        let u1 = Tensor::new(vec![2, 1], vec![2.0, 3.0]).unwrap();
        let (v, _, _) = rowmax_opt(&z, &u1);
        assert!((v - (0.5 * 2.0 + -1.5 * 3.0)).abs() < 1e-15);
    }

    fn tiny_conv_model(seed_val: u64, nonneg: bool) -> DrmmParams {
        let mut rng = seed::rng(seed_val);
        let l1 = LayerSpec {
            in_h: 4,
            in_w: 4,
            in_c: 1,
            filters: 2,
            filter_h: 2,
            filter_w: 2,
            stride: 1,
            pool_h: 3,
            pool_w: 3,
        };
        let l2 = LayerSpec {
            in_h: 1,
            in_w: 1,
            in_c: 2,
            filters: 2,
            filter_h: 1,
            filter_w: 1,
            stride: 1,
            pool_h: 1,
            pool_w: 1,
        };
        let mk = |rng: &mut rand_chacha::ChaCha8Rng, sp: &LayerSpec, nonneg: bool| {
            let n = sp.filters * sp.filter_h * sp.filter_w * sp.in_c;
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    if nonneg {
                        rng.random_range(0.0..1.0)
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect();
            Tensor::new(vec![sp.filters, sp.filter_h, sp.filter_w, sp.in_c], data).unwrap()
        };
        let g1 = mk(&mut rng, &l1, false);
        let g2 = mk(&mut rng, &l2, nonneg);
        let mu: Vec<f64> = (0..3 * 2)
            .map(|_| if nonneg { rng.random_range(0.0..1.0) } else { rng.random_range(-1.0..1.0) })
            .collect();
        DrmmParams {
            layers: vec![
                LayerParams { spec: l1, gamma: g1, alpha: None, pi_t: vec![1.0 / 9.0; 9], pi_on: 0.7 },
                LayerParams { spec: l2, gamma: g2, alpha: None, pi_t: vec![1.0], pi_on: 0.7 },
            ],
            mu_c: Tensor::new(vec![3, 2], mu).unwrap(),
            pi_c: vec![1.0 / 3.0; 3],
            sigma2: 0.01,
        }
    }

    #[test]
    fn bottom_up_nonneg_matches_reference_composition_bitwise() {
        for trial in 0..20 {
            let p = tiny_conv_model(100 + trial, true);
            let mut rng = seed::rng(500 + trial);
            let img = Tensor::new(vec![4, 4, 1], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let rec = bottom_up(&p, &img, Mode::Nonnegative, None).unwrap();
            let mut reference = img.clone();
            for layer in &p.layers {
                let sp = layer.spec;
                let u = conv2d(&reference, &layer.gamma, &sp.conv_spec(), &Tensor::zeros(vec![sp.filters])).unwrap();
                let r = relu(&u);
                let (v, _) = maxpool_argmax(
                    &r,
                    &PoolSpec { window_height: sp.pool_h, window_width: sp.pool_w, stride: sp.pool_h.max(sp.pool_w) },
                )
                .unwrap();
                reference = v;
            }
            // identical bits, not merely close
            let got: Vec<u64> = rec.feature_maps.last().unwrap().data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = reference.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn bottom_up_max_score_matches_full_enumeration_on_tiny_models() {
        for trial in 0..5 {
            let p = tiny_conv_model(200 + trial, true);
            let mut rng = seed::rng(900 + trial);
            let img = Tensor::new(vec![4, 4, 1], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let rec = bottom_up(&p, &img, Mode::Nonnegative, None).unwrap();
            let got = rec.class_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

            // exhaustive max over every latent path of <render, image>
            let mut best = f64::NEG_INFINITY;
            let d1 = p.layers[0].spec.d_out();
            let d2 = p.layers[1].spec.d_out();
            let nt1 = p.layers[0].spec.n_translations();
            for c in 0..3 {
                let mut t1 = vec![0usize; d1];
                let mut a1 = vec![false; d1];
                let mut t2 = vec![0usize; d2];
                let mut a2 = vec![false; d2];
                let combos1 = (nt1 * 2).pow(d1 as u32);
                let combos2 = 2usize.pow(d2 as u32);
                for k1 in 0..combos1 {
                    let mut k = k1;
                    for u in 0..d1 {
                        t1[u] = k % nt1;
                        k /= nt1;
                        a1[u] = k % 2 == 1;
                        k /= 2;
                    }
                    for k2 in 0..combos2 {
                        let mut k = k2;
                        for u in 0..d2 {
                            a2[u] = k % 2 == 1;
                            k /= 2;
                            t2[u] = 0;
                        }
                        let latents = LatentConfig {
                            c,
                            t: vec![t1.clone(), t2.clone()],
                            a: vec![a1.clone(), a2.clone()],
                        };
                        let rendered = render(&p, &latents).unwrap();
                        let s = dot(rendered.data(), img.data());
                        if s > best {
                            best = s;
                        }
                    }
                }
            }
            let scale = best.abs().max(1.0);
            assert!((got - best).abs() <= 1e-10 * scale, "{} vs {}", got, best);
        }
    }

    #[test]
    fn bottom_up_rejects_bias_and_bad_shapes() {
        let mut p = tiny_conv_model(300, true);
        p.layers[0].alpha = Some(Tensor::from_vec(vec![1.0; 16]).unwrap());
        let img = Tensor::zeros(vec![4, 4, 1]);
        assert!(matches!(bottom_up(&p, &img, Mode::Nonnegative, None), Err(DrmmError::Unsupported(_))));

        let p2 = tiny_conv_model(301, true);
        let bad = Tensor::zeros(vec![3, 4, 1]);
        assert!(bottom_up(&p2, &bad, Mode::Nonnegative, None).is_err());
    }

    #[test]
    fn signed_mode_with_unit_signs_equals_nonneg_mode() {
        let p = tiny_conv_model(302, false);
        let mut rng = seed::rng(303);
        let img = Tensor::new(vec![4, 4, 1], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let ones: Vec<Vec<f64>> = p.layers.iter().map(|l| vec![1.0; l.spec.d_out()]).collect();
        let a = bottom_up(&p, &img, Mode::Nonnegative, None).unwrap();
        let b = bottom_up(&p, &img, Mode::Signed, Some(&ones)).unwrap();
        assert_eq!(a.class_scores, b.class_scores);
        assert_eq!(a.t_hat, b.t_hat);
        assert_eq!(a.a_hat, b.a_hat);
    }

    #[test]
    fn signed_mode_flips_selection_under_negative_sign() {
        // one unit, two translations; u = [3, -5]: positive sign picks 3,
        // negative sign picks -5 (maximizing s*u)
        let l = LayerSpec {
            in_h: 2,
            in_w: 1,
            in_c: 1,
            filters: 1,
            filter_h: 1,
            filter_w: 1,
            stride: 1,
            pool_h: 2,
            pool_w: 1,
        };
        let p = DrmmParams {
            layers: vec![LayerParams {
                spec: l,
                gamma: Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
                alpha: None,
                pi_t: vec![0.5, 0.5],
                pi_on: 0.5,
            }],
            mu_c: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            pi_c: vec![1.0],
            sigma2: 1.0,
        };
        let img = Tensor::new(vec![2, 1, 1], vec![3.0, -5.0]).unwrap();
        let pos = bottom_up(&p, &img, Mode::Signed, Some(&[vec![1.0]])).unwrap();
        assert_eq!(pos.t_hat[0], vec![0]);
        assert_eq!(pos.feature_maps[1].data(), &[3.0]);
        let neg = bottom_up(&p, &img, Mode::Signed, Some(&[vec![-1.0]])).unwrap();
        assert_eq!(neg.t_hat[0], vec![1]);
        // I = s * ReLU(max s*u) = -1 * ReLU(5) = -5
        assert_eq!(neg.feature_maps[1].data(), &[-5.0]);
        assert!(neg.a_hat[0][0]);
    }

    #[test]
    fn top_down_identity_reconstructs_noise_free_sample() {
        let mut p = identity_model(4, 2, 1e-18, 6);
        // unit-norm nonnegative templates: with every switch ON the raw
        // inner product provably picks the generating class
        for c in 0..2 {
            let norm = dot(p.mu(c), p.mu(c)).sqrt();
            let d = p.d_top();
            for v in &mut p.mu_c.data_mut()[c * d..(c + 1) * d] {
                *v /= norm;
            }
        }
        let latents = all_on(&p, 1);
        let mut rng = seed::rng(9);
        let img = sample_with_latents(&p, &latents, &mut rng).unwrap();
        let rec = bottom_up(&p, &img, Mode::Nonnegative, None).unwrap();
        let td = top_down(&p, rec.c_hat, &rec, true).unwrap();
        assert_eq!(rec.c_hat, latents.c);
        for i in 0..4 {
            assert!((td.reconstruction().data()[i] - img.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn top_down_all_off_records_give_zero_reconstruction() {
        let p = identity_model(4, 2, 0.01, 7);
        let img = Tensor::new(vec![4, 1, 1], vec![-1.0, -2.0, -0.5, -3.0]).unwrap();
        let rec = bottom_up(&p, &img, Mode::Nonnegative, None).unwrap();
        // nonneg templates vs negative image: every switch lands OFF
        assert!(rec.a_hat[0].iter().all(|&a| !a));
        let td = top_down(&p, rec.c_hat, &rec, true).unwrap();
        assert!(td.reconstruction().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn top_down_two_layer_separable_self_consistency() {
        // disjoint footprints and nonnegative parameters: the inferred
        // path reproduces the generating one, reconstruction is exact
        let l1 = LayerSpec {
            in_h: 4,
            in_w: 4,
            in_c: 1,
            filters: 2,
            filter_h: 2,
            filter_w: 2,
            stride: 2,
            pool_h: 1,
            pool_w: 1,
        };
        let l2 = LayerSpec {
            in_h: 2,
            in_w: 2,
            in_c: 2,
            filters: 2,
            filter_h: 2,
            filter_w: 2,
            stride: 1,
            pool_h: 1,
            pool_w: 1,
        };
        let mut rng = seed::rng(8);
        let g1: Vec<f64> = (0..2 * 4).map(|_| rng.random_range(0.2..1.0)).collect();
        let g2: Vec<f64> = (0..2 * 8).map(|_| rng.random_range(0.2..1.0)).collect();
        let mu: Vec<f64> = (0..2 * 2).map(|_| rng.random_range(0.2..1.0)).collect();
        let p = DrmmParams {
            layers: vec![
                LayerParams {
                    spec: l1,
                    gamma: Tensor::new(vec![2, 2, 2, 1], g1).unwrap(),
                    alpha: None,
                    pi_t: vec![1.0],
                    pi_on: 1.0,
                },
                LayerParams {
                    spec: l2,
                    gamma: Tensor::new(vec![2, 2, 2, 2], g2).unwrap(),
                    alpha: None,
                    pi_t: vec![1.0],
                    pi_on: 1.0,
                },
            ],
            mu_c: Tensor::new(vec![2, 2], mu).unwrap(),
            pi_c: vec![0.5, 0.5],
            sigma2: 1e-18,
        };
        let (img, latents) = sample(&p, 10).unwrap();
        let rec = bottom_up(&p, &img, Mode::Nonnegative, None).unwrap();
        let td = top_down(&p, latents.c, &rec, true).unwrap();
        let mut err = 0.0;
        for i in 0..16 {
            err += (td.reconstruction().data()[i] - img.data()[i]).powi(2);
        }
        assert!(err.sqrt() < 1e-7, "reconstruction drift {}", err.sqrt());
    }

    #[test]
    fn top_down_missing_records_error() {
        let p = tiny_conv_model(304, true);
        let img = Tensor::zeros(vec![4, 4, 1]);
        let mut rec = bottom_up(&p, &img, Mode::Nonnegative, None).unwrap();
        rec.t_hat.pop();
        rec.a_hat.pop();
        assert!(matches!(top_down(&p, 0, &rec, true), Err(DrmmError::MissingRecords(_))));
    }

    #[test]
    fn paths_single_diagonal() {
        let mut diag = vec![0.0; 9];
        for i in 0..3 {
            diag[i * 3 + i] = (i + 2) as f64;
        }
        let p = DrmmParams {
            layers: vec![dense_layer(&diag, 3, 3)],
            mu_c: Tensor::new(vec![1, 3], vec![1.5, 2.5, 3.5]).unwrap(),
            pi_c: vec![1.0],
            sigma2: 1.0,
        };
        let latents = all_on(&p, 0);
        for pixel in 0..3 {
            let got = pixel_sum_over_paths(&p, &latents, pixel).unwrap();
            let want = (pixel + 2) as f64 * p.mu(0)[pixel];
            assert_eq!(got, want);
        }
    }

    #[test]
    fn paths_off_switch_kills_contribution() {
        let mut diag = vec![0.0; 4];
        diag[0] = 2.0;
        diag[3] = 3.0;
        let p = DrmmParams {
            layers: vec![dense_layer(&diag, 2, 2)],
            mu_c: Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
            pi_c: vec![1.0],
            sigma2: 1.0,
        };
        let mut latents = all_on(&p, 0);
        latents.a[0][0] = false;
        assert_eq!(pixel_sum_over_paths(&p, &latents, 0).unwrap(), 0.0);
        assert_eq!(pixel_sum_over_paths(&p, &latents, 1).unwrap(), 3.0);
    }

    #[test]
    fn paths_match_render_on_random_two_layer_models() {
        for trial in 0..10 {
            let p = tiny_conv_model(400 + trial, false);
            let (_, latents) = sample(&p, 600 + trial).unwrap();
            let clean = render(&p, &latents).unwrap();
            for pixel in 0..p.d_image() {
                let got = pixel_sum_over_paths(&p, &latents, pixel).unwrap();
                let want = clean.data()[pixel];
                let scale = want.abs().max(1.0);
                assert!((got - want).abs() <= 1e-10 * scale, "pixel {}: {} vs {}", pixel, got, want);
            }
        }
    }

    #[test]
    fn paths_reject_bias() {
        let mut p = identity_model(3, 1, 1.0, 11);
        p.layers[0].alpha = Some(Tensor::from_vec(vec![1.0, 0.0, 0.0]).unwrap());
        let latents = all_on(&p, 0);
        assert!(matches!(
            pixel_sum_over_paths(&p, &latents, 0),
            Err(DrmmError::Unsupported(_))
        ));
    }

    #[test]
    fn count_params_hand_example() {
        let (deep, shallow) = count_params(&[16, 8, 4], &[4, 4], 10);
        assert_eq!(deep, 680);
        assert_eq!(shallow, 2560);
    }

    #[test]
    fn count_params_depth_one_same_order_and_doubling() {
        let (deep, shallow) = count_params(&[16, 8], &[4], 10);
        assert_eq!(deep, 4 * 16 * 8 + 10 * 8);
        assert_eq!(shallow, 16 * 10 * 4);

        let (d1, s1) = count_params(&[16, 8, 4], &[4, 4], 10);
        let (d2, s2) = count_params(&[16, 8, 4], &[8, 8], 10);
        assert_eq!(s2, s1 * 4);
        assert!(d2 < d1 * 4);
    }

    #[test]
    fn count_params_of_concrete_model() {
        let p = tiny_conv_model(500, true);
        let (deep, _) = count_params_of(&p);
        // layer 1: |T|=9 so |G|=18, D0=16, D1=2; layer 2: |G|=2, D1=2, D2=2
        assert_eq!(deep, 18 * 16 * 2 + 2 * 2 * 2 + 3 * 2);
    }

    #[test]
    fn drfm_identity_and_determinism_and_variance() {
        let mut eye = vec![0.0; 1];
        eye[0] = 1.0;
        let p = DrfmParams {
            layers: vec![{
                let mut l = dense_layer(&eye, 1, 1);
                l.pi_on = 1.0;
                l
            }],
            top_map: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            sigma2: 1e-18,
        };
        let (img, _, z_top) = drfm_sample(&p, 13).unwrap();
        assert!((img.data()[0] - z_top[0]).abs() < 1e-7);

        let (img2, _, _) = drfm_sample(&p, 13).unwrap();
        assert_eq!(img.data(), img2.data());

        let mut acc = 0.0;
        for i in 0..10_000u64 {
            let (_, _, z) = drfm_sample(&p, 20_000 + i).unwrap();
            acc += z[0] * z[0];
        }
        let var = acc / 10_000.0;
        assert!((var - 1.0).abs() < 0.05, "top latent variance {}", var);
    }

    #[test]
    fn init_random_is_valid_and_seeded() {
        let specs = [LayerSpec {
            in_h: 4,
            in_w: 4,
            in_c: 1,
            filters: 3,
            filter_h: 2,
            filter_w: 2,
            stride: 1,
            pool_h: 3,
            pool_w: 3,
        }];
        let a = DrmmParams::init_random(&specs, 4, 0.1, 77).unwrap();
        let b = DrmmParams::init_random(&specs, 4, 0.1, 77).unwrap();
        assert_eq!(a.layers[0].gamma.data(), b.layers[0].gamma.data());
        assert_eq!(a.mu_c.data(), b.mu_c.data());
        a.validate().unwrap();
    }
}
