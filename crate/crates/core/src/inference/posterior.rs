//! Posterior over `(z_a, z_s)` given one or more views of an object: the
//! unnormalised log joint, alternating Langevin, and persistent Adam chains.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Adam, AdamConfig, Bound, Tape, Tensor, Var};
use crate::ebm::{langevin_update, EnergyNet, PriorConfig, Reference};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::model::{Model, ModelBinding};
use crate::render::{render_rays, PoseInput, RenderConfig};
use crate::scalar::Scalar;

/// Which rays enter a likelihood evaluation. Text form: `all` or a count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum RaySubset {
    All,
    Random(usize),
}

impl std::fmt::Display for RaySubset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RaySubset::All => f.write_str("all"),
            RaySubset::Random(k) => write!(f, "{k}"),
        }
    }
}

impl std::str::FromStr for RaySubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(RaySubset::All),
            _ => s
                .parse()
                .map(RaySubset::Random)
                .map_err(|_| invalid(format!("ray subset must be `all` or a count, got {s:?}"))),
        }
    }
}

impl From<RaySubset> for String {
    fn from(r: RaySubset) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for RaySubset {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Pixels and stratification seed for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampling {
    pub pixels: Vec<usize>,
    pub seed: u64,
}

impl RaySubset {
    pub fn draw<R: Rng + ?Sized>(&self, cfg: &RenderConfig, rng: &mut R) -> Sampling {
        let n = cfg.pixels();
        let pixels = match *self {
            RaySubset::Random(k) if k < n => {
                let mut v = rand::seq::index::sample(rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        Sampling {
            pixels,
            seed: rng.random(),
        }
    }
}

/// One observation of an object. `mask[p]` marks pixels excluded from the likelihood.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    pub image: &'a Image,
    pub mask: Option<&'a [bool]>,
    pub pose: PoseInput,
}

impl View<'_> {
    fn check(&self, cfg: &RenderConfig) -> Result<()> {
        let img = self.image;
        if img.channels != 3 || img.width != cfg.width || img.height != cfg.height {
            return Err(invalid(format!(
                "view is {}x{}x{}, model renders {}x{}x3",
                img.width, img.height, img.channels, cfg.width, cfg.height
            )));
        }
        if self.mask.is_some_and(|m| m.len() != img.pixels()) {
            return Err(invalid("mask length differs from pixel count"));
        }
        Ok(())
    }

    fn visible(&self, p: usize) -> bool {
        self.mask.is_none_or(|m| !m[p])
    }
}

/// `[pixels, 3]` colour rows of `img`.
pub fn target_rows<T: Scalar>(img: &Image, pixels: &[usize]) -> Tensor<T> {
    let data = pixels
        .iter()
        .flat_map(|&p| img.pixel(p).iter().map(|&v| T::lit(v)))
        .collect();
    Tensor::new(pixels.len(), 3, data)
}

/// `-sum_visible ||target - rgb||^2 / (2 sigma_eps^2)`, rescaled from the
/// sampled `pixels` to `total` pixels.
pub fn recon_loglik<T: Scalar>(
    tape: &mut Tape<T>,
    rgb: Var,
    target: Var,
    mask: Option<&[bool]>,
    pixels: &[usize],
    total: usize,
    sigma_eps: f64,
) -> Result<Var> {
    let coef = T::lit(total as f64 / pixels.len().max(1) as f64 / (2.0 * sigma_eps * sigma_eps));
    let w = pixels
        .iter()
        .flat_map(|&p| {
            let v = if mask.is_some_and(|m| m[p]) { T::zero() } else { coef };
            [v; 3]
        })
        .collect();
    let sse = tape.sq_error(rgb, target, Some(Tensor::new(pixels.len(), 3, w)))?;
    Ok(tape.scale(sse, -T::one()))
}

/// `-U(z) + log q0(z)` up to constants, summed over rows.
pub fn prior_logdensity<T: Scalar>(
    tape: &mut Tape<T>,
    net: &EnergyNet<T>,
    bound: &Bound,
    z: Var,
    prior: &PriorConfig,
) -> Result<Var> {
    let u = net.energy_tape(tape, bound, z)?;
    let u = tape.sum(u);
    let out = match prior.reference {
        Reference::Normal => {
            let sq = tape.sum_squares(z);
            let sq = tape.scale(sq, T::lit(0.5 / (prior.sigma * prior.sigma)));
            tape.add(u, sq)?
        }
        Reference::Uniform => u,
    };
    Ok(tape.scale(out, -T::one()))
}

/// Tape handles of a log-joint evaluation.
#[derive(Clone, Debug)]
pub struct JointTerms {
    pub total: Var,
    /// `[pixels, 5]` render per view.
    pub rendered: Vec<Var>,
}

/// `log p(I | z, pose) + log p(z_a) + log p(z_s)` without constants, summed over views.
#[allow(clippy::too_many_arguments)]
pub fn log_joint_unnorm<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    b: &ModelBinding,
    views: &[View],
    samplings: &[Sampling],
    z_a: Var,
    z_s: Var,
) -> Result<JointTerms> {
    let cfg = &model.config.render;
    if views.len() != samplings.len() {
        return Err(invalid("one sampling per view required"));
    }
    let mut total = prior_logdensity(tape, &model.ebm_a, &b.ebm_a, z_a, &model.config.prior_a)?;
    let ps = prior_logdensity(tape, &model.ebm_s, &b.ebm_s, z_s, &model.config.prior_s)?;
    total = tape.add(total, ps)?;
    let mut rendered = Vec::with_capacity(views.len());
    for (v, s) in views.iter().zip(samplings) {
        v.check(cfg)?;
        let out = render_rays(&model.gen, tape, &b.gen, z_s, z_a, v.pose, cfg, &s.pixels, s.seed)?;
        let rgb = tape.slice_cols(out, 0, 3)?;
        let target = tape.constant(target_rows(v.image, &s.pixels));
        let ll = recon_loglik(
            tape,
            rgb,
            target,
            v.mask,
            &s.pixels,
            cfg.pixels(),
            model.config.sigma_eps,
        )?;
        total = tape.add(total, ll)?;
        rendered.push(out);
    }
    Ok(JointTerms { total, rendered })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    Appearance,
    Shape,
    Both,
}

/// Value and requested gradients of the log joint.
#[derive(Clone, Debug)]
pub struct JointEval<T> {
    pub value: f64,
    pub grad_a: Option<Tensor<T>>,
    pub grad_s: Option<Tensor<T>>,
    /// Generator parameter gradients, when requested.
    pub grad_gen: Option<Vec<Tensor<T>>>,
    /// Unweighted squared error over the visible sampled pixels.
    pub sse: f64,
    /// Visible sampled pixels.
    pub count: usize,
}

impl<T> JointEval<T> {
    pub fn mse(&self) -> f64 {
        self.sse / (3 * self.count.max(1)) as f64
    }
}

pub fn joint_eval<T: Scalar>(
    model: &Model<T>,
    views: &[View],
    samplings: &[Sampling],
    z_a: &Tensor<T>,
    z_s: &Tensor<T>,
    wrt: Option<Wrt>,
    gen_grads: bool,
) -> Result<JointEval<T>> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, gen_grads, false);
    let ga = matches!(wrt, Some(Wrt::Appearance | Wrt::Both));
    let gs = matches!(wrt, Some(Wrt::Shape | Wrt::Both));
    let za = tape.input(z_a.clone(), ga);
    let zs = tape.input(z_s.clone(), gs);
    let terms = log_joint_unnorm(model, &mut tape, &b, views, samplings, za, zs)?;
    let value = tape.value(terms.total).item().f64();

    let (mut sse, mut count) = (0.0, 0);
    for ((v, s), &out) in views.iter().zip(samplings).zip(&terms.rendered) {
        let rows = tape.value(out);
        for (r, &p) in s.pixels.iter().enumerate() {
            if v.visible(p) {
                count += 1;
                let got = rows.row_slice(r);
                sse += v
                    .image
                    .pixel(p)
                    .iter()
                    .zip(got)
                    .map(|(t, g)| (t - g.f64()).powi(2))
                    .sum::<f64>();
            }
        }
    }

    let mut eval = JointEval {
        value,
        grad_a: None,
        grad_s: None,
        grad_gen: None,
        sse,
        count,
    };
    if ga || gs || gen_grads {
        let g = tape.backward(terms.total)?;
        let take = |v: Var, shape: (usize, usize)| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1));
        if ga {
            eval.grad_a = Some(take(za, z_a.shape()));
        }
        if gs {
            eval.grad_s = Some(take(zs, z_s.shape()));
        }
        if gen_grads {
            let mut acc = model.gen.params.clone();
            acc.zero_grad();
            acc.accumulate(&g, &b.gen, T::one());
            eval.grad_gen = Some(acc.grads());
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("log joint".into()));
    }
    Ok(eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorConfig {
    pub steps: usize,
    pub step_size: f64,
    pub noise_weight: f64,
    pub rays: RaySubset,
}

fn keep_in_support<T: Scalar>(z: &mut Tensor<T>, prior: &PriorConfig) {
    if prior.reference == Reference::Uniform {
        for v in z.data.iter_mut() {
            *v = prior.reflect(*v);
        }
    }
}

/// `K` rounds of alternating Langevin: a `z_a` step with `z_s` fixed, then a
/// `z_s` step with the new `z_a`.
pub fn langevin_posterior<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    views: &[View],
    z_a0: &Tensor<T>,
    z_s0: &Tensor<T>,
    cfg: &PosteriorConfig,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (mut za, mut zs) = (z_a0.clone(), z_s0.clone());
    for k in 0..cfg.steps {
        for which in [Wrt::Appearance, Wrt::Shape] {
            let samplings: Vec<_> = views.iter().map(|_| cfg.rays.draw(&model.config.render, rng)).collect();
            let ev = joint_eval(model, views, &samplings, &za, &zs, Some(which), false)?;
            let (z, g, prior) = match which {
                Wrt::Appearance => (&mut za, ev.grad_a, &model.config.prior_a),
                _ => (&mut zs, ev.grad_s, &model.config.prior_s),
            };
            langevin_update(z, &g.expect("requested"), cfg.step_size, cfg.noise_weight, rng);
            keep_in_support(z, prior);
            if !z.is_finite() {
                return Err(Error::NonFinite(format!(
                    "posterior Langevin iterate at round {}",
                    k + 1
                )));
            }
        }
    }
    Ok((za, zs))
}

/// Latent codes of one object.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<T> {
    pub z_a: Vec<T>,
    pub z_s: Vec<T>,
}

/// A persistent chain: current latents and their optimiser moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState<T> {
    pub z_a: Tensor<T>,
    pub z_s: Tensor<T>,
    pub adam: Adam<T>,
}

impl<T: Scalar> ChainState<T> {
    pub fn zeros(dim_a: usize, dim_s: usize, adam: AdamConfig) -> Self {
        Self {
            z_a: Tensor::zeros(1, dim_a),
            z_s: Tensor::zeros(1, dim_s),
            adam: Adam::new(adam, &[(1, dim_a), (1, dim_s)]),
        }
    }

    /// Adam ascent step along the log-joint gradients.
    pub fn ascend(&mut self, grad_a: &Tensor<T>, grad_s: &Tensor<T>) -> Result<()> {
        let mut na = grad_a.clone();
        na.scale_assign(-T::one());
        let mut ns = grad_s.clone();
        ns.scale_assign(-T::one());
        self.adam.update(&mut [&mut self.z_a, &mut self.z_s], &[&na, &ns])?;
        Ok(())
    }

    pub fn state(&self) -> LatentState<T> {
        LatentState {
            z_a: self.z_a.data.clone(),
            z_s: self.z_s.data.clone(),
        }
    }
}

/// Persistent chains keyed by object id.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStore<T> {
    pub dim_a: usize,
    pub dim_s: usize,
    pub adam: AdamConfig,
    pub chains: BTreeMap<u64, ChainState<T>>,
}

impl<T: Scalar> LatentStore<T> {
    pub fn new(dim_a: usize, dim_s: usize, adam: AdamConfig) -> Self {
        Self {
            dim_a,
            dim_s,
            adam,
            chains: BTreeMap::new(),
        }
    }

    /// The chain for `id`, starting at zero on first touch.
    pub fn chain(&mut self, id: u64) -> &mut ChainState<T> {
        let (a, s, c) = (self.dim_a, self.dim_s, self.adam);
        self.chains.entry(id).or_insert_with(|| ChainState::zeros(a, s, c))
    }

    pub fn check_dims(&self, dim_a: usize, dim_s: usize) -> Result<()> {
        if (self.dim_a, self.dim_s) != (dim_a, dim_s) {
            return Err(invalid(format!(
                "latent store holds ({}, {}) codes, model expects ({dim_a}, {dim_s})",
                self.dim_a, self.dim_s
            )));
        }
        Ok(())
    }
}

/// Advances the stored chain of `id` by `steps` Adam ascent steps on the log
/// joint summed over `views`.
pub fn persistent_infer<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    id: u64,
    views: &[View],
    store: &mut LatentStore<T>,
    steps: usize,
    rays: RaySubset,
    rng: &mut R,
) -> Result<LatentState<T>> {
    store.check_dims(model.config.nerf.dim_a, model.config.nerf.dim_s)?;
    let chain = store.chain(id);
    for _ in 0..steps {
        let samplings: Vec<_> = views.iter().map(|_| rays.draw(&model.config.render, rng)).collect();
        let ev = joint_eval(model, views, &samplings, &chain.z_a, &chain.z_s, Some(Wrt::Both), false)?;
        chain.ascend(
            ev.grad_a.as_ref().expect("requested"),
            ev.grad_s.as_ref().expect("requested"),
        )?;
    }
    Ok(chain.state())
}
