//! Shallow rendering mixture model: a switched Gaussian mixture over
//! (class, nuisance) templates. Classification by full posterior
//! enumeration, and by the equivalent max-sum forms (MaxOut and
//! ReLU-of-inner-product) after mapping moment parameters to natural
//! parameters.

use crate::error::{DrmmError, Result};
use crate::seed;
use crate::tensor::{dot, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct RmmParams {
    /// Class prior over |C| classes.
    pub pi_c: Vec<f64>,
    /// Nuisance prior over |G| values.
    pub pi_g: Vec<f64>,
    /// Probability that the switch is ON.
    pub pi_a: f64,
    /// Templates, shape [|C|, |G|, D].
    pub templates: Tensor,
    /// Isotropic noise variance.
    pub sigma2: f64,
}

#[derive(Debug, Clone)]
pub struct NaturalParams {
    /// Weights w_cg = mu_cg / sigma^2, shape [|C|, |G|, D].
    pub w: Tensor,
    /// Biases b_cg = -||mu_cg||^2 / (2 sigma^2), shape [|C|, |G|].
    pub b_cg: Tensor,
    /// Switch bias for a = ON: ln(pi_a).
    pub b_on: f64,
    /// Switch bias for a = OFF: ln(1 - pi_a).
    pub b_off: f64,
    /// Log-odds b_0 = b_on - b_off.
    pub b_0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExhaustiveDecision {
    pub c: usize,
    pub g: usize,
    pub a: bool,
    pub log_joint: f64,
}

impl RmmParams {
    pub fn new(pi_c: Vec<f64>, pi_g: Vec<f64>, pi_a: f64, templates: Tensor, sigma2: f64) -> Result<RmmParams> {
        let params = RmmParams { pi_c, pi_g, pi_a, templates, sigma2 };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        check_prior("pi_c", &self.pi_c)?;
        check_prior("pi_g", &self.pi_g)?;
        if !(0.0..=1.0).contains(&self.pi_a) {
            return Err(DrmmError::InvalidParam(format!("pi_a = {} outside [0, 1]", self.pi_a)));
        }
        if !(self.sigma2 > 0.0) {
            return Err(DrmmError::InvalidParam(format!("sigma2 = {} must be positive", self.sigma2)));
        }
        let shape = self.templates.shape();
        if shape.len() != 3 || shape[0] != self.pi_c.len() || shape[1] != self.pi_g.len() {
            return Err(DrmmError::shape(
                "RmmParams templates",
                format!("[{}, {}, D]", self.pi_c.len(), self.pi_g.len()),
                format!("{:?}", shape),
            ));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.pi_c.len()
    }

    pub fn n_nuisances(&self) -> usize {
        self.pi_g.len()
    }

    pub fn dim(&self) -> usize {
        self.templates.shape()[2]
    }

    /// Template slice for one (c, g).
    pub fn template(&self, c: usize, g: usize) -> &[f64] {
        let d = self.dim();
        let base = (c * self.n_nuisances() + g) * d;
        &self.templates.data()[base..base + d]
    }

    /// Draws (c, g, a) from the priors and renders `a * mu_cg` plus
    /// isotropic Gaussian noise. Deterministic given the seed.
    pub fn sample(&self, seed_value: u64) -> (Tensor, (usize, usize, bool)) {
        let mut rng = seed::rng(seed_value);
        let c = sample_categorical(&mut rng, &self.pi_c);
        let g = sample_categorical(&mut rng, &self.pi_g);
        let a = rng.random::<f64>() < self.pi_a;
        let d = self.dim();
        let template = self.template(c, g);
        let sigma = self.sigma2.sqrt();
        let mut image = vec![0.0; d];
        for i in 0..d {
            let noise: f64 = StandardNormal.sample(&mut rng);
            image[i] = if a { template[i] } else { 0.0 } + sigma * noise;
        }
        (Tensor::new(vec![d], image).expect("finite sample"), (c, g, a))
    }

    /// Most likely (c, g, a) by full enumeration of the log-joint
    /// ln p(I | c, g, a) + ln p(c, g, a) with the isotropic Gaussian
    /// likelihood. Ties keep the lexicographically smallest (c, g, a)
    /// with OFF ordered before ON.
    pub fn classify_exhaustive(&self, image: &Tensor) -> ExhaustiveDecision {
        let d = self.dim();
        assert_eq!(image.len(), d, "image dimension {} vs model {}", image.len(), d);
        let norm_const = -(d as f64) * 0.5 * (2.0 * std::f64::consts::PI * self.sigma2).ln();
        let inv2s = 1.0 / (2.0 * self.sigma2);
        let mut best: Option<ExhaustiveDecision> = None;
        for c in 0..self.n_classes() {
            for g in 0..self.n_nuisances() {
                let template = self.template(c, g);
                for (ai, &a) in [false, true].iter().enumerate() {
                    let prior_a = if a { self.pi_a } else { 1.0 - self.pi_a };
                    let mut sq = 0.0;
                    for i in 0..d {
                        let r = image.data()[i] - if a { template[i] } else { 0.0 };
                        sq += r * r;
                    }
                    let lj = self.pi_c[c].ln() + self.pi_g[g].ln() + prior_a.ln() + norm_const - sq * inv2s;
                    let better = match best {
                        None => true,
                        Some(b) => lj > b.log_joint,
                    };
                    if better {
                        best = Some(ExhaustiveDecision { c, g, a, log_joint: lj });
                    }
                    let _ = ai;
                }
            }
        }
        best.expect("at least one configuration")
    }

    /// Moment parameters to natural parameters:
    /// w = mu / sigma^2, b_cg = -||mu||^2 / (2 sigma^2), switch biases
    /// ln(pi_a) and ln(1 - pi_a), b_0 their difference.
    pub fn to_natural(&self) -> Result<NaturalParams> {
        if self.pi_a <= 0.0 || self.pi_a >= 1.0 {
            return Err(DrmmError::DegenerateInput(format!(
                "pi_a = {} gives an infinite switch log-odds",
                self.pi_a
            )));
        }
        let (nc, ng, d) = (self.n_classes(), self.n_nuisances(), self.dim());
        let mut w = vec![0.0; nc * ng * d];
        let mut b_cg = vec![0.0; nc * ng];
        for c in 0..nc {
            for g in 0..ng {
                let template = self.template(c, g);
                let base = (c * ng + g) * d;
                for i in 0..d {
                    w[base + i] = template[i] / self.sigma2;
                }
                b_cg[c * ng + g] = -dot(template, template) / (2.0 * self.sigma2);
            }
        }
        let b_on = self.pi_a.ln();
        let b_off = (1.0 - self.pi_a).ln();
        Ok(NaturalParams {
            w: Tensor::new(vec![nc, ng, d], w)?,
            b_cg: Tensor::new(vec![nc, ng], b_cg)?,
            b_on,
            b_off,
            b_0: b_on - b_off,
        })
    }
}

impl NaturalParams {
    pub fn n_classes(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn n_nuisances(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.w.shape()[2]
    }

    pub fn weight(&self, c: usize, g: usize) -> &[f64] {
        let d = self.dim();
        let base = (c * self.n_nuisances() + g) * d;
        &self.w.data()[base..base + d]
    }
}

/// Per-class score max_g ReLU(<w_cg | I> + b_cg + b_0) + b_off; the switch
/// log-odds is folded into the rectifier argument so the score equals the
/// MaxOut form identically (max{u, v} = ReLU(u - v) + v). Returns the
/// argmax class, ties to the lowest index.
pub fn classify_relu(natural: &NaturalParams, image: &Tensor) -> (usize, f64) {
    argmax_class(natural, image, |pre, n| relu_score(pre, n))
}

/// Per-class score max_g max_a { a (<w_cg | I> + b_cg) + b_a }; the
/// explicit two-branch MaxOut. Identical (class, score) to `classify_relu`
/// for every input.
pub fn classify_maxout(natural: &NaturalParams, image: &Tensor) -> (usize, f64) {
    argmax_class(natural, image, |pre, n| {
        let on = pre + n.b_on;
        if on > n.b_off {
            on
        } else {
            n.b_off
        }
    })
}

fn relu_score(pre: f64, n: &NaturalParams) -> f64 {
    let u = pre + n.b_0;
    (if u > 0.0 { u } else { 0.0 }) + n.b_off
}

fn argmax_class(natural: &NaturalParams, image: &Tensor, branch: impl Fn(f64, &NaturalParams) -> f64) -> (usize, f64) {
    assert_eq!(image.len(), natural.dim());
    let ng = natural.n_nuisances();
    let mut best_c = 0usize;
    let mut best = f64::NEG_INFINITY;
    for c in 0..natural.n_classes() {
        let mut score = f64::NEG_INFINITY;
        for g in 0..ng {
            let pre = dot(natural.weight(c, g), image.data()) + natural.b_cg.data()[c * ng + g];
            let s = branch(pre, natural);
            if s > score {
                score = s;
            }
        }
        if score > best {
            best = score;
            best_c = c;
        }
    }
    (best_c, best)
}

/// Places one core filter at each listed shift: bank row t satisfies
/// `bank[t, shifts[t] + j] = core[j]`, zeros elsewhere. Classifying with
/// the bank realizes max over translations of `<T_t core | I>`, the pooled
/// 1-D convolution.
pub fn build_translational(core: &Tensor, shifts: &[usize], d: usize) -> Result<Tensor> {
    let k = core.len();
    let mut bank = vec![0.0; shifts.len() * d];
    for (t, &s) in shifts.iter().enumerate() {
        if s + k > d {
            return Err(DrmmError::InvalidParam(format!(
                "translation {} pushes a length-{} core past dimension {}",
                s, k, d
            )));
        }
        for j in 0..k {
            bank[t * d + s + j] = core.data()[j];
        }
    }
    Tensor::new(vec![shifts.len(), d], bank)
}

pub(crate) fn sample_categorical(rng: &mut rand_chacha::ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn check_prior(name: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(DrmmError::InvalidParam(format!("{} is empty", name)));
    }
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(DrmmError::InvalidParam(format!("{} has a negative or non-finite entry", name)));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(DrmmError::InvalidParam(format!("{} sums to {} (needs 1 within 1e-12)", name, s)));
    }
    Ok(())
}

/// Uniform probability vector of length n.
pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::normalize_l2;
    use rand::Rng;

    fn toy(nc: usize, ng: usize, d: usize, sigma2: f64, pi_a: f64, seed: u64) -> RmmParams {
        let mut rng = seed::rng(seed);
        let data: Vec<f64> = (0..nc * ng * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        RmmParams {
            pi_c: uniform(nc),
            pi_g: uniform(ng),
            pi_a,
            templates: Tensor::new(vec![nc, ng, d], data).unwrap(),
            sigma2,
        }
    }

    #[test]
    fn validate_rejects_bad_priors_and_sigma() {
        let mut p = toy(2, 2, 3, 1.0, 0.5, 1);
        p.pi_c = vec![0.6, 0.6];
        assert!(p.validate().is_err());
        let mut p = toy(2, 2, 3, 1.0, 0.5, 1);
        p.sigma2 = 0.0;
        assert!(p.validate().is_err());
        assert!(toy(2, 2, 3, 1.0, 0.5, 1).validate().is_ok());
    }

    #[test]
    fn sample_noise_free_limits() {
        let mut p = toy(3, 2, 4, 1e-18, 1.0, 2);
        let (img, (c, g, a)) = p.sample(77);
        assert!(a);
        let t = p.template(c, g);
        for i in 0..4 {
            assert!((img.data()[i] - t[i]).abs() < 1e-7);
        }

        p.pi_a = 0.0;
        let (img, (_, _, a)) = p.sample(78);
        assert!(!a);
        for &v in img.data() {
            assert!(v.abs() < 1e-7);
        }
    }

    #[test]
    fn sample_seed_determinism() {
        let p = toy(2, 3, 5, 0.3, 0.7, 3);
        let (i1, l1) = p.sample(99);
        let (i2, l2) = p.sample(99);
        assert_eq!(i1.data(), i2.data());
        assert_eq!(l1, l2);
    }

    #[test]
    fn exhaustive_picks_zero_residual_winner() {
        let p = toy(3, 2, 4, 1e-6, 0.5, 4);
        let img = Tensor::from_vec(p.template(1, 0).to_vec()).unwrap();
        let d = p.classify_exhaustive(&img);
        assert_eq!((d.c, d.g, d.a), (1, 0, true));
    }

    #[test]
    fn exhaustive_switch_off_for_zero_image() {
        let mut p = toy(2, 2, 4, 0.01, 0.05, 5);
        // push templates away from the origin
        let data: Vec<f64> = p.templates.data().iter().map(|v| v + 3.0).collect();
        p.templates = Tensor::new(vec![2, 2, 4], data).unwrap();
        let img = Tensor::from_vec(vec![0.0; 4]).unwrap();
        let d = p.classify_exhaustive(&img);
        assert!(!d.a);
    }

    #[test]
    fn exhaustive_tie_breaks_lexicographically() {
        // identical templates for (0,1) and (1,0): the (0,1) cell wins
        let t = vec![
            9.0, 9.0, // c0 g0
            1.0, 2.0, // c0 g1
            1.0, 2.0, // c1 g0
            9.0, 9.0, // c1 g1
        ];
        let p = RmmParams {
            pi_c: uniform(2),
            pi_g: uniform(2),
            pi_a: 0.5,
            templates: Tensor::new(vec![2, 2, 2], t).unwrap(),
            sigma2: 1.0,
        };
        let d = p.classify_exhaustive(&Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        assert_eq!((d.c, d.g), (0, 1));
    }

    #[test]
    fn natural_map_hand_values() {
        let p = RmmParams {
            pi_c: vec![1.0],
            pi_g: vec![1.0],
            pi_a: 0.5,
            templates: Tensor::new(vec![1, 1, 2], vec![3.0, 4.0]).unwrap(),
            sigma2: 1.0,
        };
        let n = p.to_natural().unwrap();
        assert_eq!(n.w.data(), &[3.0, 4.0]);
        assert_eq!(n.b_cg.data(), &[-12.5]);
        assert_eq!(n.b_0, 0.0);

        let p2 = RmmParams {
            pi_c: vec![1.0],
            pi_g: vec![1.0],
            pi_a: 0.5,
            templates: Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap(),
            sigma2: 2.0,
        };
        let n2 = p2.to_natural().unwrap();
        assert_eq!(n2.w.data(), &[1.0]);
        assert_eq!(n2.b_cg.data(), &[-1.0]);

        let zero = RmmParams {
            pi_c: vec![1.0],
            pi_g: vec![1.0],
            pi_a: 0.5,
            templates: Tensor::new(vec![1, 1, 3], vec![0.0; 3]).unwrap(),
            sigma2: 1.0,
        };
        let nz = zero.to_natural().unwrap();
        assert!(nz.w.data().iter().all(|&v| v == 0.0));
        assert_eq!(nz.b_cg.data(), &[0.0]);
    }

    #[test]
    fn natural_map_rejects_extreme_switch_prior() {
        let mut p = toy(2, 2, 3, 1.0, 1.0, 6);
        assert!(p.to_natural().is_err());
        p.pi_a = 0.0;
        assert!(p.to_natural().is_err());
    }

    #[test]
    fn relu_saturation_ties_to_class_zero() {
        // templates with large norms and an image orthogonal-ish and tiny:
        // every rectifier argument goes negative, scores collapse to the
        // same constant, class 0 wins by tie-break
        let mut p = toy(3, 2, 4, 0.01, 0.5, 7);
        let data: Vec<f64> = p.templates.data().iter().map(|v| v + 5.0).collect();
        p.templates = Tensor::new(vec![3, 2, 4], data).unwrap();
        let n = p.to_natural().unwrap();
        let img = Tensor::from_vec(vec![-1e-3, 1e-3, -1e-3, 1e-3]).unwrap();
        let (c, score) = classify_relu(&n, &img);
        assert_eq!(c, 0);
        assert_eq!(score, n.b_off);
    }

    #[test]
    fn maxout_equals_relu_everywhere() {
        let mut rng = seed::rng(8);
        for trial in 0..200 {
            let p = toy(
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(1..6),
                rng.random_range(0.05..2.0),
                rng.random_range(0.05..0.95),
                1000 + trial,
            );
            let n = p.to_natural().unwrap();
            let img = Tensor::from_vec((0..p.dim()).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let (c1, s1) = classify_relu(&n, &img);
            let (c2, s2) = classify_maxout(&n, &img);
            assert_eq!(c1, c2);
            assert!((s1 - s2).abs() < 1e-12, "{} vs {}", s1, s2);
        }
    }

    #[test]
    fn maxout_forced_on_is_template_matching() {
        let p = toy(3, 2, 4, 0.5, 0.5, 9);
        let n = p.to_natural().unwrap();
        let mut rng = seed::rng(10);
        for _ in 0..100 {
            let img = Tensor::from_vec((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            // forcing ON: argmax_c max_g of the ON branch only
            let mut best = (0usize, f64::NEG_INFINITY);
            for c in 0..3 {
                for g in 0..2 {
                    let s = dot(n.weight(c, g), img.data()) + n.b_cg.data()[c * 2 + g];
                    if s > best.1 {
                        best = (c, s);
                    }
                }
            }
            // with pi_a -> 1 the OFF branch would sink to -inf; compare against
            // a nearly-ON model
            let mut p_on = p.clone();
            p_on.pi_a = 1.0 - 1e-12;
            let n_on = p_on.to_natural().unwrap();
            let (c, _) = classify_maxout(&n_on, &img);
            assert_eq!(c, best.0);
        }
    }

    #[test]
    fn classifiers_agree_with_exhaustive_on_random_instances() {
        let mut rng = seed::rng(11);
        for trial in 0..300 {
            let p = toy(2, 2, 3, rng.random_range(0.1..1.5), rng.random_range(0.1..0.9), 2000 + trial);
            let n = p.to_natural().unwrap();
            let raw = Tensor::from_vec((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let img = normalize_l2(&raw).unwrap();
            let ex = p.classify_exhaustive(&img);
            let (c_r, _) = classify_relu(&n, &img);
            let (c_m, _) = classify_maxout(&n, &img);
            assert_eq!(c_r, ex.c);
            assert_eq!(c_m, ex.c);
        }
    }

    #[test]
    fn translational_bank_matches_shifted_inner_products() {
        let mut rng = seed::rng(12);
        let core = Tensor::from_vec((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let shifts = [0usize, 1, 2];
        let d = 5;
        let bank = build_translational(&core, &shifts, d).unwrap();
        for _ in 0..50 {
            let img: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let via_bank = (0..shifts.len())
                .map(|t| dot(&bank.data()[t * d..(t + 1) * d], &img))
                .fold(f64::NEG_INFINITY, f64::max);
            let direct = shifts
                .iter()
                .map(|&s| (0..3).map(|j| core.data()[j] * img[s + j]).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((via_bank - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn translational_singleton_is_plain_inner_product() {
        let core = Tensor::from_vec(vec![0.5, -1.0]).unwrap();
        let bank = build_translational(&core, &[0], 2).unwrap();
        assert_eq!(bank.data(), &[0.5, -1.0]);
    }

    #[test]
    fn translational_delta_core_all_shifts_scores_max_pixel() {
        let core = Tensor::from_vec(vec![1.0]).unwrap();
        let d = 6;
        let shifts: Vec<usize> = (0..d).collect();
        let bank = build_translational(&core, &shifts, d).unwrap();
        let img = [0.1, -0.4, 0.9, 0.2, 0.8, -0.9];
        let best = (0..d)
            .map(|t| dot(&bank.data()[t * d..(t + 1) * d], &img))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best, 0.9);
    }

    #[test]
    fn translational_out_of_range_errors() {
        let core = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        assert!(build_translational(&core, &[3], 4).is_err());
    }
}
