use serde::{Deserialize, Serialize};

use crate::ebm::{EbmSize, PriorConfig, Reference};
use crate::error::{invalid, Result};
use crate::inference::{EncoderConfig, PosteriorConfig, RaySubset};
use crate::model::{EbmSpec, ModelConfig};
use crate::nerf::{Conditioning, NerfConfig};
use crate::synthdata::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// MCMC posterior inference.
    Mcmc,
    /// Amortised inference with known poses.
    Amortized,
    /// Amortised inference with poses inferred.
    AmortizedNopose,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mcmc" => Ok(Self::Mcmc),
            "amortized" => Ok(Self::Amortized),
            "amortized-nopose" => Ok(Self::AmortizedNopose),
            _ => Err(invalid(format!(
                "unknown algorithm {s:?} (mcmc, amortized, amortized-nopose)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mcmc => "mcmc",
            Self::Amortized => "amortized",
            Self::AmortizedNopose => "amortized-nopose",
        }
    }

    pub fn amortized(self) -> bool {
        self != Self::Mcmc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub lr_alpha: f64,
    pub lr_theta: f64,
    /// Feature extractor and pose heads.
    pub lr_phi: f64,
    /// Latent heads.
    pub lr_phi_heads: f64,
    /// `K+`, `delta+` and noise weight of posterior Langevin.
    pub posterior: PosteriorConfig,
    /// Persistent Adam chains instead of fresh Langevin chains.
    pub persistent: bool,
    pub latent_lr: f64,
    /// Objects per iteration.
    pub batch_size: usize,
    pub views_per_object: usize,
    /// Amortised, known poses: each encoder sample also reconstructs the
    /// next view of the same object in the batch.
    pub cross_view: bool,
    /// Rays per view entering the parameter update.
    pub rays: RaySubset,
    pub iterations: usize,
    pub seed: u64,
    /// Sum the likelihood over visible pixels only.
    pub mask_aware: bool,
    /// PSNR probe period in iterations (0 disables).
    pub probe_every: usize,
    pub probe_images: usize,
}

pub const PRESETS: [&str; 7] = [
    "full-mcmc",
    "full-amortized",
    "full-persistent",
    "full-nopose",
    "desk-mcmc",
    "desk-amortized",
    "desk-nopose",
];

fn ebm(size: EbmSize, width: usize) -> EbmSpec {
    EbmSpec { size, width }
}

fn prior(reference: Reference, dim: usize, steps: usize, step_size: f64, noise_weight: f64) -> PriorConfig {
    PriorConfig {
        reference,
        steps,
        step_size,
        noise_weight,
        ..PriorConfig::normal(dim)
    }
}

impl TrainConfig {
    fn base(algorithm: Algorithm, model: ModelConfig) -> Self {
        let encoder = EncoderConfig {
            pose_conditioned: algorithm != Algorithm::AmortizedNopose,
            ..EncoderConfig::new(model.nerf.dim_a, model.nerf.dim_s)
        };
        Self {
            algorithm,
            model,
            encoder,
            lr_alpha: 2e-5,
            lr_theta: 1e-4,
            lr_phi: 3e-5,
            lr_phi_heads: 5e-6,
            posterior: PosteriorConfig {
                steps: 60,
                step_size: 0.1,
                noise_weight: 0.0,
                rays: RaySubset::All,
            },
            persistent: false,
            latent_lr: 1e-4,
            batch_size: 8,
            views_per_object: 1,
            cross_view: false,
            rays: RaySubset::All,
            iterations: 1000,
            seed: 0,
            mask_aware: false,
            probe_every: 100,
            probe_images: 8,
        }
    }

    fn full_model(conditioning: Conditioning, a: EbmSpec, s: EbmSpec) -> ModelConfig {
        let nerf = NerfConfig {
            variant: conditioning,
            ..NerfConfig::full_scale()
        };
        let mut m = ModelConfig::desk();
        m.prior_a = PriorConfig::normal(nerf.dim_a);
        m.prior_s = PriorConfig::normal(nerf.dim_s);
        m.nerf = nerf;
        m.ebm_a = a;
        m.ebm_s = s;
        m.render.width = 64;
        m.render.height = 64;
        m.render.samples = 64;
        m
    }

    /// Named hyperparameter sets: one per experiment row of the reference
    /// setup, plus laptop-scale variants.
    pub fn preset(name: &str) -> Result<Self> {
        use Algorithm::*;
        let large = |w| ebm(EbmSize::Large, w);
        let small = |w| ebm(EbmSize::Small, w);
        let mut c = match name {
            "full-mcmc" => {
                let mut c = Self::base(Mcmc, Self::full_model(Conditioning::Concat, large(256), large(256)));
                c.model.prior_a = prior(Reference::Uniform, 128, 60, 0.5, 0.02);
                c.model.prior_s = c.model.prior_a.clone();
                c.posterior.steps = 60;
                c.posterior.step_size = 0.1;
                c
            }
            "full-amortized" => {
                let mut c = Self::base(
                    Amortized,
                    Self::full_model(Conditioning::Concat, small(128), small(256)),
                );
                c.model.prior_a = prior(Reference::Normal, 128, 60, 0.5, 1.0);
                c.model.prior_s = c.model.prior_a.clone();
                c.lr_alpha = 7e-6;
                c
            }
            "full-persistent" => {
                let mut c = Self::base(Mcmc, Self::full_model(Conditioning::Concat, large(256), large(256)));
                c.model.prior_a = prior(Reference::Normal, 128, 40, 0.5, 0.0);
                c.model.prior_s = c.model.prior_a.clone();
                c.persistent = true;
                c.posterior.steps = 1;
                c.latent_lr = 1e-4;
                c.batch_size = 12;
                c.views_per_object = 2;
                c
            }
            "full-nopose" => {
                let mut c = Self::base(
                    AmortizedNopose,
                    Self::full_model(Conditioning::Film, small(64), small(128)),
                );
                c.model.prior_a = prior(Reference::Normal, 128, 60, 0.5, 0.0);
                c.model.prior_s = c.model.prior_a.clone();
                c.lr_alpha = 7e-6;
                c.lr_theta = 3e-5;
                c.batch_size = 16;
                c
            }
            "desk-mcmc" => {
                let mut c = Self::base(Mcmc, ModelConfig::desk());
                c.model.nerf.hidden = 64;
                c.model.prior_a = prior(Reference::Normal, 8, 20, 0.5, 0.0);
                c.model.prior_s = prior(Reference::Normal, 8, 20, 0.5, 0.0);
                c.persistent = true;
                c.posterior = PosteriorConfig {
                    steps: 1,
                    step_size: 1e-4,
                    noise_weight: 0.0,
                    rays: RaySubset::Random(256),
                };
                c.latent_lr = 3e-2;
                c.lr_theta = 2e-3;
                c.lr_alpha = 2e-4;
                c.batch_size = 4;
                c.views_per_object = 2;
                c.rays = RaySubset::Random(256);
                c
            }
            "desk-amortized" => {
                let mut c = Self::base(Amortized, ModelConfig::desk());
                c.model.prior_a = prior(Reference::Normal, 8, 20, 0.5, 1.0);
                c.model.prior_s = prior(Reference::Normal, 8, 20, 0.5, 1.0);
                c.encoder.widths = vec![16, 32, 64, 64];
                c.encoder.head_hidden = 64;
                c.lr_alpha = 7e-5;
                c.lr_theta = 1e-3;
                c.lr_phi = 1e-3;
                c.lr_phi_heads = 1e-3;
                c.batch_size = 8;
                c.rays = RaySubset::Random(256);
                c
            }
            "desk-nopose" => {
                let mut c = Self::base(AmortizedNopose, ModelConfig::desk());
                c.model.nerf.variant = Conditioning::Film;
                c.model.prior_a = prior(Reference::Normal, 8, 20, 0.5, 0.0);
                c.model.prior_s = prior(Reference::Normal, 8, 20, 0.5, 0.0);
                c.encoder.widths = vec![16, 32, 64, 64];
                c.encoder.head_hidden = 64;
                c.lr_alpha = 7e-5;
                c.lr_theta = 3e-4;
                c.lr_phi = 3e-4;
                c.lr_phi_heads = 3e-4;
                c.batch_size = 8;
                c.rays = RaySubset::Random(256);
                c
            }
            _ => {
                return Err(invalid(format!(
                    "unknown preset {name:?}; known: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        c.encoder.dim_a = c.model.nerf.dim_a;
        c.encoder.dim_s = c.model.nerf.dim_s;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (k, v) in [
            ("lr_alpha", self.lr_alpha),
            ("lr_theta", self.lr_theta),
            ("lr_phi", self.lr_phi),
            ("lr_phi_heads", self.lr_phi_heads),
            ("latent_lr", self.latent_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{k} must be positive, got {v}")));
            }
        }
        if self.iterations == 0 || self.batch_size == 0 || self.views_per_object == 0 {
            return Err(invalid(
                "iterations, batch_size and views_per_object must be at least 1",
            ));
        }
        if !(self.posterior.step_size > 0.0) || self.posterior.noise_weight < 0.0 {
            return Err(invalid(
                "posterior step size must be positive and noise weight nonnegative",
            ));
        }
        if matches!(self.rays, RaySubset::Random(0)) || matches!(self.posterior.rays, RaySubset::Random(0)) {
            return Err(invalid("ray subsets must be nonempty"));
        }
        if self.cross_view && (self.algorithm != Algorithm::Amortized || self.views_per_object < 2) {
            return Err(invalid("cross_view needs known poses and at least 2 views per object"));
        }
        if self.algorithm.amortized() {
            if self.model.prior_a.reference != Reference::Normal || self.model.prior_s.reference != Reference::Normal {
                return Err(invalid("amortised training needs a normal reference"));
            }
            if (self.encoder.dim_a, self.encoder.dim_s) != (self.model.nerf.dim_a, self.model.nerf.dim_s) {
                return Err(invalid("encoder latent dims must match the generator"));
            }
            let want_pose = self.algorithm == Algorithm::Amortized;
            if self.encoder.pose_conditioned != want_pose {
                return Err(invalid("latent encoders take the pose exactly when poses are known"));
            }
        }
        Ok(())
    }

    /// Camera settings taken from the dataset; sampling settings kept.
    pub fn adapt_to(&mut self, data: &Dataset) {
        let rc = data.render_config();
        let r = &mut self.model.render;
        r.width = rc.width;
        r.height = rc.height;
        r.fov_y = rc.fov_y;
        r.near = rc.near;
        r.far = rc.far;
        r.background = rc.background;
        self.model.radius = data.manifest.config.radius;
    }
}
