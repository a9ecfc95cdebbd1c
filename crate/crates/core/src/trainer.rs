//! Learning loops: MCMC-inference maximum likelihood, amortised variational
//! learning with known or inferred poses, checkpoints and the metrics log.

mod checkpoint;
mod config;

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ad::{Adam, AdamConfig, Bound, Parameter, Tape, Tensor, Var};
use crate::ebm::{ebm_grad, langevin_prior, EnergyNet};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::inference::{
    gaussian_kl_tape, joint_eval, langevin_posterior, prior_logdensity, recon_loglik, reparam_gaussian, target_rows,
    vmf_kl_tape, vmf_sample_tape, ChainState, Encoder, EncoderGroup, GaussianHeads, LatentStore, Sampling, View, Wrt,
};
use crate::metrics::psnr;
use crate::model::{Model, ModelBinding};
use crate::render::{render_image, render_rays, CameraPose, PoseInput, RenderConfig};
use crate::scalar::Scalar;
use crate::synthdata::{Dataset, Record};

pub use checkpoint::{checkpoint_load, checkpoint_save, checkpoint_scalar_bytes, CHECKPOINT_VERSION};
pub use config::{Algorithm, TrainConfig, PRESETS};

/// Per-step diagnostics; one metrics-log record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    /// Mean log joint (MCMC) or mean ELBO (amortised) per item.
    pub objective: f64,
    /// Visible-pixel MSE on the sampled rays.
    pub mse: f64,
    pub u_neg_a: f64,
    pub u_pos_a: f64,
    pub u_neg_s: f64,
    pub u_pos_s: f64,
    /// Mean pose concentration (pose-free training only).
    pub kappa: Option<f64>,
    /// Probe-batch reconstruction PSNR, on probe iterations.
    pub psnr: Option<f64>,
    /// A non-finite gradient caused the update to be skipped.
    pub rejected: bool,
}

impl fmt::Display for StepStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x}"));
        write!(
            f,
            "iter={} objective={} mse={} u_neg_a={} u_pos_a={} u_neg_s={} u_pos_s={} kappa={} psnr={} rejected={}",
            self.iteration,
            self.objective,
            self.mse,
            self.u_neg_a,
            self.u_pos_a,
            self.u_neg_s,
            self.u_pos_s,
            opt(self.kappa),
            opt(self.psnr),
            self.rejected as u8
        )
    }
}

/// One object in a batch: its id and the record indices of the chosen views.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub object: u64,
    pub records: Vec<usize>,
}

/// Histogram over `[-pi, pi)` of posterior mean angles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseHistogram {
    pub altitude: Vec<f64>,
    pub azimuth: Vec<f64>,
}

fn angle_bin(theta: f64, bins: usize) -> usize {
    let u = (theta + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU;
    ((u * bins as f64) as usize).min(bins - 1)
}

fn bin_center(i: usize, bins: usize) -> f64 {
    -std::f64::consts::PI + (i as f64 + 0.5) * std::f64::consts::TAU / bins as f64
}

impl PoseHistogram {
    pub fn from_angles(angles: &[(f64, f64)], bins: usize) -> Result<Self> {
        if bins == 0 || angles.is_empty() {
            return Err(invalid("pose histogram needs bins and samples"));
        }
        let mut alt = vec![0.0; bins];
        let mut az = vec![0.0; bins];
        let w = 1.0 / angles.len() as f64;
        for &(a, b) in angles {
            alt[angle_bin(a, bins)] += w;
            az[angle_bin(b, bins)] += w;
        }
        Ok(Self {
            altitude: alt,
            azimuth: az,
        })
    }

    /// Entropy of the azimuth marginal, in nats.
    pub fn azimuth_entropy(&self) -> f64 {
        -self
            .azimuth
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    /// Draws a pose: a bin by mass, then uniformly within it.
    pub fn sample<R: Rng + ?Sized>(&self, radius: f64, rng: &mut R) -> CameraPose {
        let mut pick = |mass: &[f64]| {
            let bins = mass.len();
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = bins - 1;
            for (i, &m) in mass.iter().enumerate() {
                acc += m;
                if u < acc {
                    k = i;
                    break;
                }
            }
            bin_center(k, bins) + (rng.random::<f64>() - 0.5) * std::f64::consts::TAU / bins as f64
        };
        let a = pick(&self.altitude);
        let b = pick(&self.azimuth);
        CameraPose::from_angles(a, b, radius)
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub encoder: Option<Encoder<T>>,
    pub opt_gen: Adam<T>,
    pub opt_ebm_a: Adam<T>,
    pub opt_ebm_s: Adam<T>,
    /// One optimiser per encoder parameter group.
    pub opt_enc: Vec<Adam<T>>,
    pub store: LatentStore<T>,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    pub pose_hist: Option<PoseHistogram>,
}

fn item_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn add_all<T: Scalar>(acc: &mut Vec<Tensor<T>>, g: &[Tensor<T>]) {
    if acc.is_empty() {
        acc.extend(g.iter().cloned());
    } else {
        for (a, b) in acc.iter_mut().zip(g) {
            a.add_assign(b);
        }
    }
}

fn finite<T: Scalar>(g: &[Tensor<T>]) -> bool {
    g.iter().all(Tensor::is_finite)
}

/// Adam ascent on `params` along `grads`.
fn ascend<T: Scalar>(opt: &mut Adam<T>, params: &mut [Parameter<T>], grads: &[Tensor<T>]) -> Result<()> {
    let neg: Vec<Tensor<T>> = grads.iter().map(|g| g.map(|v| -v)).collect();
    let grefs: Vec<&Tensor<T>> = neg.iter().collect();
    let mut vals: Vec<&mut Tensor<T>> = params.iter_mut().map(|p| &mut p.value).collect();
    opt.update(&mut vals, &grefs)?;
    Ok(())
}

fn mean_energy<T: Scalar>(net: &EnergyNet<T>, z: &Tensor<T>) -> Result<f64> {
    let (u, _) = net.energy_and_grad(z)?;
    Ok(u.iter().map(|v| v.f64()).sum::<f64>() / u.len().max(1) as f64)
}

fn rows_to_tensor<T: Scalar>(rows: &[Tensor<T>]) -> Tensor<T> {
    let refs: Vec<&Tensor<T>> = rows.iter().collect();
    Tensor::vstack(&refs)
}

/// Result of one batch item, reduced in batch order.
struct ItemOut<T> {
    grad_gen: Vec<Tensor<T>>,
    grad_enc: Vec<Tensor<T>>,
    z_a: Tensor<T>,
    z_s: Tensor<T>,
    objective: f64,
    sse: f64,
    count: usize,
    kappa: Option<f64>,
    chain: Option<ChainState<T>>,
}

/// Tape handles of a single-sample ELBO.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    pub total: Var,
    pub recon: Var,
    pub z_a: Var,
    pub z_s: Var,
    pub rendered: Var,
    pub kappa: Option<(Var, Var)>,
}

/// Standard-normal noise for the reparameterised latents.
pub fn draw_eps<T: Scalar, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Tensor<T> {
    Tensor::row((0..dim).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect())
}

/// Single-sample ELBO from encoder outputs:
/// `log p(I|z) - KL(q_a||q0) - U_a(z_a) - KL(q_s||q0) - U_s(z_s) - pose_kl`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_terms<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    b: &ModelBinding,
    view: &View<'_>,
    sampling: &Sampling,
    heads: &GaussianHeads,
    eps: (Tensor<T>, Tensor<T>),
    pose_kl: Option<Var>,
) -> Result<ElboTerms> {
    let cfg = &model.config;
    let z_a = reparam_gaussian(tape, heads.mu_a, heads.scale_a, eps.0)?;
    let z_s = reparam_gaussian(tape, heads.mu_s, heads.scale_s, eps.1)?;
    let out = render_rays(
        &model.gen,
        tape,
        &b.gen,
        z_s,
        z_a,
        view.pose,
        &cfg.render,
        &sampling.pixels,
        sampling.seed,
    )?;
    let rgb = tape.slice_cols(out, 0, 3)?;
    let target = tape.constant(target_rows(view.image, &sampling.pixels));
    let recon = recon_loglik(
        tape,
        rgb,
        target,
        view.mask,
        &sampling.pixels,
        cfg.render.pixels(),
        cfg.sigma_eps,
    )?;

    let kl_a = gaussian_kl_tape(tape, heads.mu_a, heads.scale_a, cfg.prior_a.sigma)?;
    let kl_s = gaussian_kl_tape(tape, heads.mu_s, heads.scale_s, cfg.prior_s.sigma)?;
    let ua = model.ebm_a.energy_tape(tape, &b.ebm_a, z_a)?;
    let ua = tape.sum(ua);
    let us = model.ebm_s.energy_tape(tape, &b.ebm_s, z_s)?;
    let us = tape.sum(us);
    let mut penalty = tape.add(kl_a, kl_s)?;
    penalty = tape.add(penalty, ua)?;
    penalty = tape.add(penalty, us)?;
    if let Some(k) = pose_kl {
        penalty = tape.add(penalty, k)?;
    }
    let total = tape.sub(recon, penalty)?;
    Ok(ElboTerms {
        total,
        recon,
        z_a,
        z_s,
        rendered: out,
        kappa: None,
    })
}

/// [`elbo_terms`] with the encoder on the tape. A `None` pose is inferred:
/// one vMF draw per angle plus the KL to the uniform pose prior.
#[allow(clippy::too_many_arguments)]
pub fn elbo<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    encoder: &Encoder<T>,
    tape: &mut Tape<T>,
    trainable: bool,
    record: (&Image, Option<&[bool]>, Option<&CameraPose>),
    sampling: &Sampling,
    eps: (Tensor<T>, Tensor<T>),
    rng: &mut R,
) -> Result<(ElboTerms, ModelBinding, Bound)> {
    let (image, mask, pose) = record;
    let b = model.bind(tape, trainable, false);
    let eb = encoder.params.bind(tape, trainable);
    let feat = encoder.features(tape, &eb, image)?;

    let (pose_in, pose_row, kappa, pose_kl) = match pose {
        Some(p) => {
            let row = tape.constant(p.as_row());
            (PoseInput::Fixed(*p), Some(row), None, None)
        }
        None => {
            let h = encoder.pose_heads(tape, &eb, feat)?;
            let x_alt = vmf_sample_tape(tape, h.mu_alt, h.kappa_alt, rng)?;
            let x_az = vmf_sample_tape(tape, h.mu_az, h.kappa_az, rng)?;
            let v = tape.concat_cols(&[x_alt, x_az])?;
            let k1 = vmf_kl_tape(tape, h.kappa_alt, 2)?;
            let k2 = vmf_kl_tape(tape, h.kappa_az, 2)?;
            let kl = tape.add(k1, k2)?;
            let kl = tape.sum(kl);
            let pin = PoseInput::Var {
                var: v,
                radius: model.config.radius,
            };
            (pin, None, Some((h.kappa_alt, h.kappa_az)), Some(kl))
        }
    };
    let heads = encoder.gaussian_heads(tape, &eb, feat, pose_row)?;
    let view = View {
        image,
        mask,
        pose: pose_in,
    };
    let mut t = elbo_terms(model, tape, &b, &view, sampling, &heads, eps, pose_kl)?;
    t.kappa = kappa;
    Ok((t, b, eb))
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(config.model.clone(), &mut rng)?;
        let encoder = if config.algorithm.amortized() {
            Some(Encoder::new(config.encoder.clone(), &mut rng)?)
        } else {
            None
        };
        let opt_enc = match &encoder {
            Some(e) => e
                .groups()
                .iter()
                .map(|(g, r)| {
                    let lr = if *g == EncoderGroup::Latent {
                        config.lr_phi_heads
                    } else {
                        config.lr_phi
                    };
                    let shapes: Vec<_> = e.params.params[r.clone()].iter().map(|p| p.value.shape()).collect();
                    Adam::new(AdamConfig::with_lr(lr), &shapes)
                })
                .collect(),
            None => Vec::new(),
        };
        Ok(Self {
            opt_gen: Adam::for_params(AdamConfig::with_lr(config.lr_theta), &model.gen.params),
            opt_ebm_a: Adam::for_params(AdamConfig::with_lr(config.lr_alpha), &model.ebm_a.params),
            opt_ebm_s: Adam::for_params(AdamConfig::with_lr(config.lr_alpha), &model.ebm_s.params),
            opt_enc,
            store: LatentStore::new(
                config.model.nerf.dim_a,
                config.model.nerf.dim_s,
                AdamConfig::with_lr(config.latent_lr),
            ),
            model,
            encoder,
            rng,
            iteration: 0,
            pose_hist: None,
            config,
        })
    }

    /// Total trainable parameters, encoder included.
    pub fn param_count(&self) -> usize {
        self.model.param_count() + self.encoder.as_ref().map_or(0, |e| e.params.count())
    }

    /// Objects without replacement, then views without replacement per object.
    pub fn draw_batch(&mut self, data: &Dataset) -> Result<Vec<BatchItem>> {
        let mut by_object: Vec<(u64, Vec<usize>)> = Vec::new();
        for (i, r) in data.records.iter().enumerate().filter(|(_, r)| !r.holdout) {
            match by_object.iter_mut().find(|(o, _)| *o == r.object) {
                Some((_, v)) => v.push(i),
                None => by_object.push((r.object, vec![i])),
            }
        }
        if by_object.is_empty() {
            return Err(invalid("dataset has no training records"));
        }
        let n = self.config.batch_size.min(by_object.len());
        let picks = rand::seq::index::sample(&mut self.rng, by_object.len(), n).into_vec();
        Ok(picks
            .into_iter()
            .map(|k| {
                let (object, recs) = &by_object[k];
                let m = self.config.views_per_object.min(recs.len());
                let chosen = rand::seq::index::sample(&mut self.rng, recs.len(), m).into_vec();
                BatchItem {
                    object: *object,
                    records: chosen.into_iter().map(|j| recs[j]).collect(),
                }
            })
            .collect())
    }

    fn views<'a>(&self, data: &'a Dataset, item: &BatchItem) -> Vec<View<'a>> {
        item.records
            .iter()
            .map(|&i| {
                let r = &data.records[i];
                View {
                    image: &r.image,
                    mask: if self.config.mask_aware {
                        r.mask.as_deref()
                    } else {
                        None
                    },
                    pose: PoseInput::Fixed(r.pose),
                }
            })
            .collect()
    }

    fn prior_samples(&mut self, n: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let (pa, ps) = (&self.model.config.prior_a, &self.model.config.prior_s);
        let za0 = pa.sample_reference(n, &mut self.rng);
        let za = langevin_prior(Some(&self.model.ebm_a), &za0, pa, &mut self.rng)?;
        let zs0 = ps.sample_reference(n, &mut self.rng);
        let zs = langevin_prior(Some(&self.model.ebm_s), &zs0, ps, &mut self.rng)?;
        Ok((za, zs))
    }

    /// One training iteration of the configured algorithm.
    pub fn step(&mut self, data: &Dataset) -> Result<StepStats> {
        let batch = self.draw_batch(data)?;
        match self.config.algorithm {
            Algorithm::Mcmc => self.mle_step(data, &batch, None),
            _ => self.vae_step(data, &batch, None),
        }
    }

    fn mle_item(&self, data: &Dataset, item: &BatchItem, seed: u64) -> Result<ItemOut<T>> {
        let mut rng = item_rng(seed);
        let views = self.views(data, item);
        let cfg = &self.config;
        let render = &self.model.config.render;
        let draw =
            |rng: &mut ChaCha8Rng| -> Vec<Sampling> { views.iter().map(|_| cfg.rays.draw(render, rng)).collect() };
        if cfg.persistent {
            let mut chain = self
                .store
                .chains
                .get(&item.object)
                .cloned()
                .unwrap_or_else(|| ChainState::zeros(self.store.dim_a, self.store.dim_s, self.store.adam));
            for _ in 1..cfg.posterior.steps {
                let s: Vec<Sampling> = views
                    .iter()
                    .map(|_| cfg.posterior.rays.draw(render, &mut rng))
                    .collect();
                let ev = joint_eval(&self.model, &views, &s, &chain.z_a, &chain.z_s, Some(Wrt::Both), false)?;
                chain.ascend(
                    ev.grad_a.as_ref().expect("requested"),
                    ev.grad_s.as_ref().expect("requested"),
                )?;
            }
            // the last latent step and the parameter gradient share one backward pass
            let s = draw(&mut rng);
            let ev = joint_eval(&self.model, &views, &s, &chain.z_a, &chain.z_s, Some(Wrt::Both), true)?;
            let (z_a, z_s) = (chain.z_a.clone(), chain.z_s.clone());
            chain.ascend(
                ev.grad_a.as_ref().expect("requested"),
                ev.grad_s.as_ref().expect("requested"),
            )?;
            Ok(ItemOut {
                grad_gen: ev.grad_gen.expect("requested"),
                grad_enc: Vec::new(),
                z_a,
                z_s,
                objective: ev.value,
                sse: ev.sse,
                count: ev.count,
                kappa: None,
                chain: Some(chain),
            })
        } else {
            let m = &self.model.config;
            let za0 = m.prior_a.sample_reference(1, &mut rng);
            let zs0 = m.prior_s.sample_reference(1, &mut rng);
            let (z_a, z_s) = langevin_posterior(&self.model, &views, &za0, &zs0, &cfg.posterior, &mut rng)?;
            let s = draw(&mut rng);
            let ev = joint_eval(&self.model, &views, &s, &z_a, &z_s, None, true)?;
            let chain = ChainState {
                z_a: z_a.clone(),
                z_s: z_s.clone(),
                adam: Adam::new(self.store.adam, &[z_a.shape(), z_s.shape()]),
            };
            Ok(ItemOut {
                grad_gen: ev.grad_gen.expect("requested"),
                grad_enc: Vec::new(),
                z_a,
                z_s,
                objective: ev.value,
                sse: ev.sse,
                count: ev.count,
                kappa: None,
                chain: Some(chain),
            })
        }
    }

    /// Maximum-likelihood iteration: prior Langevin for `z-`, posterior
    /// inference for `z+`, then ascent on `alpha_a`, `alpha_s` and `theta`.
    /// `prior` overrides the prior samples.
    pub fn mle_step(
        &mut self,
        data: &Dataset,
        batch: &[BatchItem],
        prior: Option<(Tensor<T>, Tensor<T>)>,
    ) -> Result<StepStats> {
        let n = batch.len();
        let (neg_a, neg_s) = match prior {
            Some(p) => p,
            None => self.prior_samples(n)?,
        };
        let seeds: Vec<u64> = batch.iter().map(|_| self.rng.random()).collect();
        let outs: Vec<ItemOut<T>> = batch
            .par_iter()
            .zip(&seeds)
            .map(|(item, &seed)| self.mle_item(data, item, seed))
            .collect::<Result<_>>()?;
        self.apply(batch, outs, (neg_a, neg_s))
    }

    fn vae_item(&self, data: &Dataset, item: &BatchItem, seed: u64) -> Result<Vec<ItemOut<T>>> {
        let mut rng = item_rng(seed);
        let enc = self.encoder.as_ref().expect("amortised trainer has an encoder");
        let known_pose = self.config.algorithm == Algorithm::Amortized;
        let mut outs = Vec::new();
        let n = item.records.len();
        for (k, &ri) in item.records.iter().enumerate() {
            let rec = &data.records[ri];
            let mask = if self.config.mask_aware {
                rec.mask.as_deref()
            } else {
                None
            };
            let s = self.config.rays.draw(&self.model.config.render, &mut rng);
            let eps = (
                draw_eps(self.model.config.nerf.dim_a, &mut rng),
                draw_eps(self.model.config.nerf.dim_s, &mut rng),
            );
            let partner = (self.config.cross_view && n > 1).then(|| {
                let o = &data.records[item.records[(k + 1) % n]];
                (o, self.config.rays.draw(&self.model.config.render, &mut rng))
            });
            // a rejection-budget failure is retried with fresh randomness
            let mut attempt = 0;
            let (mut tape, terms, b, eb) = loop {
                let mut tape = Tape::new();
                match elbo(
                    &self.model,
                    enc,
                    &mut tape,
                    true,
                    (&rec.image, mask, known_pose.then_some(&rec.pose)),
                    &s,
                    eps.clone(),
                    &mut rng,
                ) {
                    Ok((t, b, eb)) => break (tape, t, b, eb),
                    Err(Error::RejectionBudget(_)) if attempt < 3 => attempt += 1,
                    Err(e) => return Err(e),
                }
            };
            // the same sample explains a second view: a bound on the pair's likelihood
            let mut total = terms.total;
            if let Some((o, os)) = &partner {
                let cfg = &self.model.config;
                let om = if self.config.mask_aware {
                    o.mask.as_deref()
                } else {
                    None
                };
                let out = render_rays(
                    &self.model.gen,
                    &mut tape,
                    &b.gen,
                    terms.z_s,
                    terms.z_a,
                    PoseInput::Fixed(o.pose),
                    &cfg.render,
                    &os.pixels,
                    os.seed,
                )?;
                let rgb = tape.slice_cols(out, 0, 3)?;
                let target = tape.constant(target_rows(&o.image, &os.pixels));
                let recon = recon_loglik(
                    &mut tape,
                    rgb,
                    target,
                    om,
                    &os.pixels,
                    cfg.render.pixels(),
                    cfg.sigma_eps,
                )?;
                total = tape.add(total, recon)?;
            }
            let value = tape.value(total).item().f64();
            let g = tape.backward(total)?;
            let mut gen = self.model.gen.params.clone();
            gen.zero_grad();
            gen.accumulate(&g, &b.gen, T::one());
            let mut encp = enc.params.clone();
            encp.zero_grad();
            encp.accumulate(&g, &eb, T::one());
            let rows = tape.value(terms.rendered);
            let (mut sse, mut count) = (0.0, 0);
            for (r, &p) in s.pixels.iter().enumerate() {
                if mask.is_none_or(|m| !m[p]) {
                    count += 1;
                    sse += rec
                        .image
                        .pixel(p)
                        .iter()
                        .zip(rows.row_slice(r))
                        .map(|(t, v)| (t - v.f64()).powi(2))
                        .sum::<f64>();
                }
            }
            let kappa = terms
                .kappa
                .map(|(a, b)| 0.5 * (tape.value(a).item().f64() + tape.value(b).item().f64()));
            outs.push(ItemOut {
                grad_gen: gen.grads(),
                grad_enc: encp.grads(),
                z_a: tape.value(terms.z_a).clone(),
                z_s: tape.value(terms.z_s).clone(),
                objective: value,
                sse,
                count,
                kappa,
                chain: None,
            });
        }
        Ok(outs)
    }

    /// Variational iteration: prior Langevin for `z-`, reparameterised
    /// encoder samples for `z+`, ascent on `alpha` and on generator plus
    /// encoder along the ELBO.
    pub fn vae_step(
        &mut self,
        data: &Dataset,
        batch: &[BatchItem],
        prior: Option<(Tensor<T>, Tensor<T>)>,
    ) -> Result<StepStats> {
        let n: usize = batch.iter().map(|b| b.records.len()).sum();
        let (neg_a, neg_s) = match prior {
            Some(p) => p,
            None => self.prior_samples(n)?,
        };
        let seeds: Vec<u64> = batch.iter().map(|_| self.rng.random()).collect();
        let outs: Vec<Vec<ItemOut<T>>> = batch
            .par_iter()
            .zip(&seeds)
            .map(|(item, &seed)| self.vae_item(data, item, seed))
            .collect::<Result<_>>()?;
        let outs = outs.into_iter().flatten().collect();
        self.apply(batch, outs, (neg_a, neg_s))
    }

    /// Pose-free variant; identical to [`Self::vae_step`] with the pose drawn
    /// from the vMF posterior.
    pub fn nopose_step(&mut self, data: &Dataset, batch: &[BatchItem]) -> Result<StepStats> {
        if self.config.algorithm != Algorithm::AmortizedNopose {
            return Err(invalid("nopose_step needs the amortized-nopose algorithm"));
        }
        self.vae_step(data, batch, None)
    }

    fn apply(&mut self, batch: &[BatchItem], outs: Vec<ItemOut<T>>, neg: (Tensor<T>, Tensor<T>)) -> Result<StepStats> {
        let n = outs.len().max(1);
        let inv = T::one() / T::lit(n as f64);
        let (mut g_gen, mut g_enc) = (Vec::new(), Vec::new());
        let (mut za, mut zs) = (Vec::new(), Vec::new());
        let (mut obj, mut sse, mut count) = (0.0, 0.0, 0usize);
        let mut kappas = Vec::new();
        let mut chains = Vec::new();
        for o in outs {
            add_all(&mut g_gen, &o.grad_gen);
            if !o.grad_enc.is_empty() {
                add_all(&mut g_enc, &o.grad_enc);
            }
            za.push(o.z_a);
            zs.push(o.z_s);
            obj += o.objective;
            sse += o.sse;
            count += o.count;
            kappas.extend(o.kappa);
            chains.push(o.chain);
        }
        for g in g_gen.iter_mut().chain(g_enc.iter_mut()) {
            g.scale_assign(inv);
        }
        let pos_a = rows_to_tensor(&za);
        let pos_s = rows_to_tensor(&zs);
        let ga = ebm_grad(&self.model.ebm_a, &neg.0, &pos_a)?;
        let gs = ebm_grad(&self.model.ebm_s, &neg.1, &pos_s)?;

        let mut stats = StepStats {
            iteration: self.iteration + 1,
            objective: obj / n as f64,
            mse: sse / (3 * count.max(1)) as f64,
            u_neg_a: mean_energy(&self.model.ebm_a, &neg.0)?,
            u_pos_a: mean_energy(&self.model.ebm_a, &pos_a)?,
            u_neg_s: mean_energy(&self.model.ebm_s, &neg.1)?,
            u_pos_s: mean_energy(&self.model.ebm_s, &pos_s)?,
            kappa: (!kappas.is_empty()).then(|| kappas.iter().sum::<f64>() / kappas.len() as f64),
            psnr: None,
            rejected: false,
        };
        if !(finite(&g_gen) && finite(&g_enc) && finite(&ga) && finite(&gs)) {
            stats.rejected = true;
        } else {
            ascend(&mut self.opt_ebm_a, &mut self.model.ebm_a.params.params, &ga)?;
            ascend(&mut self.opt_ebm_s, &mut self.model.ebm_s.params.params, &gs)?;
            ascend(&mut self.opt_gen, &mut self.model.gen.params.params, &g_gen)?;
            if let Some(enc) = self.encoder.as_mut() {
                let groups = enc.groups().to_vec();
                for ((_, r), opt) in groups.into_iter().zip(self.opt_enc.iter_mut()) {
                    ascend(opt, &mut enc.params.params[r.clone()], &g_enc[r])?;
                }
            }
            // MCMC items carry their updated chains; batch items are distinct objects
            for (item, chain) in batch.iter().zip(chains) {
                if let Some(c) = chain {
                    self.store.chains.insert(item.object, c);
                }
            }
        }
        self.iteration += 1;
        Ok(stats)
    }

    /// Deterministic-sampling copy of the render settings.
    pub fn eval_render(&self) -> RenderConfig {
        RenderConfig {
            deterministic: true,
            ..self.model.config.render.clone()
        }
    }

    /// Latents and rendering pose for a record: stored chain (MCMC) or
    /// encoder means (amortised; posterior mean pose when pose-free).
    pub fn infer_record(&self, rec: &Record) -> Result<(Vec<T>, Vec<T>, CameraPose)> {
        match &self.encoder {
            None => {
                let c = self
                    .store
                    .chains
                    .get(&rec.object)
                    .ok_or_else(|| invalid(format!("no latent chain for object {}", rec.object)))?;
                Ok((c.z_a.data.clone(), c.z_s.data.clone(), rec.pose))
            }
            Some(enc) => self.encode(enc, &rec.image, Some(&rec.pose)),
        }
    }

    /// Encoder posterior means; `pose` is used only when poses are known.
    pub fn encode(
        &self,
        enc: &Encoder<T>,
        image: &Image,
        pose: Option<&CameraPose>,
    ) -> Result<(Vec<T>, Vec<T>, CameraPose)> {
        if enc.config.pose_conditioned {
            let p = pose.ok_or_else(|| invalid("pose-conditioned encoder needs a pose"))?;
            let row = [p.altitude[0], p.altitude[1], p.azimuth[0], p.azimuth[1]];
            let (ma, _, ms, _) = enc.encoder_forward(image, Some(&row))?;
            Ok((ma, ms, *p))
        } else {
            let (ma, _, ms, _) = enc.encoder_forward(image, None)?;
            let [(alt, _), (az, _)] = enc.pose_encoder(image)?;
            let pose = CameraPose {
                altitude: alt,
                azimuth: az,
                radius: self.model.config.radius,
            };
            Ok((ma, ms, pose))
        }
    }

    /// Full-resolution reconstruction of a record.
    pub fn reconstruct(&self, rec: &Record) -> Result<Image> {
        let (za, zs, pose) = self.infer_record(rec)?;
        self.render(&za, &zs, &pose)
    }

    /// Latents inferred from `src`, rendered at `pose`.
    pub fn novel_view(&self, src: &Record, pose: &CameraPose) -> Result<Image> {
        let (za, zs, _) = self.infer_record(src)?;
        self.render(&za, &zs, pose)
    }

    /// Reconstruction of a training record, or for a held-out record a novel
    /// view from the first training view of its object.
    pub fn predict(&self, data: &Dataset, rec: &Record) -> Result<Image> {
        if !rec.holdout {
            return self.reconstruct(rec);
        }
        let src = data
            .training()
            .find(|r| r.object == rec.object)
            .ok_or_else(|| invalid(format!("object {} has no training view", rec.object)))?;
        self.novel_view(src, &rec.pose)
    }

    pub fn render(&self, z_a: &[T], z_s: &[T], pose: &CameraPose) -> Result<Image> {
        Ok(render_image(&self.model.gen, z_s, z_a, pose, &self.eval_render(), 0)?.image())
    }

    /// Per-record PSNR of [`Self::predict`] against the clean image.
    pub fn record_psnrs(&self, data: &Dataset, recs: &[&Record]) -> Result<Vec<f64>> {
        recs.par_iter()
            .map(|r| {
                let target = match &r.mask {
                    Some(_) => data.ground_truth(r),
                    None => r.image.clone(),
                };
                psnr(&self.predict(data, r)?, &target, 1.0)
            })
            .collect()
    }

    /// Mean reconstruction PSNR over the first `n` training records.
    pub fn probe_psnr(&self, data: &Dataset, n: usize) -> Result<f64> {
        let recs: Vec<&Record> = data.training().take(n).collect();
        if recs.is_empty() {
            return Err(invalid("no records to probe"));
        }
        let vals = self.record_psnrs(data, &recs)?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Runs up to `iterations` total, writing one metrics record per step.
    pub fn train(&mut self, data: &Dataset, iterations: u64, log: &mut dyn Write) -> Result<Vec<StepStats>> {
        let mut all = Vec::new();
        while self.iteration < iterations {
            let mut s = self.step(data)?;
            let pe = self.config.probe_every as u64;
            let due = pe > 0 && s.iteration % pe == 0;
            if due && (self.encoder.is_some() || self.has_all_chains(data)) {
                s.psnr = Some(self.probe_psnr(data, self.config.probe_images)?);
            }
            writeln!(log, "{s}").map_err(|e| Error::io(std::path::Path::new("<metrics log>"), e))?;
            all.push(s);
        }
        Ok(all)
    }

    fn has_all_chains(&self, data: &Dataset) -> bool {
        data.training()
            .take(self.config.probe_images)
            .all(|r| self.store.chains.contains_key(&r.object))
    }

    /// Histogram of posterior mean angles over the first `n` training images.
    pub fn estimate_pose_distribution(&self, data: &Dataset, n: usize, bins: usize) -> Result<PoseHistogram> {
        let enc = self
            .encoder
            .as_ref()
            .filter(|e| !e.config.pose_conditioned)
            .ok_or_else(|| invalid("pose distribution needs a pose-free amortised model"))?;
        let angles = data
            .training()
            .take(n)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|r| {
                let [(a, _), (b, _)] = enc.pose_encoder(&r.image)?;
                Ok((a[1].atan2(a[0]), b[1].atan2(b[0])))
            })
            .collect::<Result<Vec<_>>>()?;
        PoseHistogram::from_angles(&angles, bins)
    }

    /// Prior draws by `K-` Langevin steps from the learned energies.
    pub fn sample_latents<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Tensor<T>, Tensor<T>)> {
        let (pa, ps) = (&self.model.config.prior_a, &self.model.config.prior_s);
        let za0 = pa.sample_reference(n, rng);
        let za = langevin_prior(Some(&self.model.ebm_a), &za0, pa, rng)?;
        let zs0 = ps.sample_reference(n, rng);
        let zs = langevin_prior(Some(&self.model.ebm_s), &zs0, ps, rng)?;
        Ok((za, zs))
    }
}

/// log density of the EBM prior up to `log Z`, for tests and diagnostics.
pub fn prior_log_unnorm<T: Scalar>(model: &Model<T>, z_a: &[T], z_s: &[T]) -> Result<f64> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false, false);
    let za = tape.constant(Tensor::row(z_a.to_vec()));
    let zs = tape.constant(Tensor::row(z_s.to_vec()));
    let a = prior_logdensity(&mut tape, &model.ebm_a, &b.ebm_a, za, &model.config.prior_a)?;
    let s = prior_logdensity(&mut tape, &model.ebm_s, &b.ebm_s, zs, &model.config.prior_s)?;
    let t = tape.add(a, s)?;
    Ok(tape.value(t).item().f64())
}

#[cfg(test)]
mod tests;
