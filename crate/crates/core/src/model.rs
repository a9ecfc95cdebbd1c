//! The full generative model: conditional radiance field, two latent energy
//! priors and the pixel noise level.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Bound, Tape};
use crate::ebm::{EbmSize, EnergyNet, PriorConfig};
use crate::error::{invalid, Result};
use crate::nerf::{Generator, NerfConfig};
use crate::render::RenderConfig;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EbmSpec {
    pub size: EbmSize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub nerf: NerfConfig,
    pub ebm_a: EbmSpec,
    pub ebm_s: EbmSpec,
    pub prior_a: PriorConfig,
    pub prior_s: PriorConfig,
    pub sigma_eps: f64,
    pub render: RenderConfig,
    pub radius: f64,
}

impl ModelConfig {
    /// Small enough to train on one core in minutes.
    pub fn desk() -> Self {
        let nerf = NerfConfig {
            hidden: 32,
            trunk_depth: 3,
            pos_freqs: 5,
            dir_freqs: 2,
            dim_a: 8,
            dim_s: 8,
            mapping_layers: 2,
            film_layers: 2,
            ..NerfConfig::default()
        };
        let mut render = RenderConfig::for_radius(3.0);
        render.fov_y = 40.0;
        render.samples = 16;
        // generated objects fit inside the unit ball
        render.scene_radius = Some(1.05);
        Self {
            ebm_a: EbmSpec {
                size: EbmSize::Small,
                width: 32,
            },
            ebm_s: EbmSpec {
                size: EbmSize::Small,
                width: 32,
            },
            prior_a: PriorConfig::normal(nerf.dim_a),
            prior_s: PriorConfig::normal(nerf.dim_s),
            nerf,
            sigma_eps: 0.05,
            render,
            radius: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.nerf.validate()?;
        self.render.validate()?;
        self.prior_a.validate()?;
        self.prior_s.validate()?;
        if self.prior_a.dim != self.nerf.dim_a || self.prior_s.dim != self.nerf.dim_s {
            return Err(invalid("prior dims must match the generator latent dims"));
        }
        if !(self.sigma_eps > 0.0) {
            return Err(invalid("sigma_eps must be positive"));
        }
        if !(self.radius > 0.0) || self.render.near >= self.radius {
            return Err(invalid("camera radius must exceed the near plane"));
        }
        if self.ebm_a.width == 0 || self.ebm_s.width == 0 {
            return Err(invalid("energy net width must be nonzero"));
        }
        Ok(())
    }
}

/// Parameters of all three networks bound on one tape.
#[derive(Clone, Debug)]
pub struct ModelBinding {
    pub gen: Bound,
    pub ebm_a: Bound,
    pub ebm_s: Bound,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub gen: Generator<T>,
    pub ebm_a: EnergyNet<T>,
    pub ebm_s: EnergyNet<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let gen = Generator::new(config.nerf.clone(), rng)?;
        let ebm_a = EnergyNet::new(config.nerf.dim_a, config.ebm_a.width, config.ebm_a.size, rng)?;
        let ebm_s = EnergyNet::new(config.nerf.dim_s, config.ebm_s.width, config.ebm_s.size, rng)?;
        Ok(Self {
            config,
            gen,
            ebm_a,
            ebm_s,
        })
    }

    pub fn param_count(&self) -> usize {
        self.gen.param_count() + self.ebm_a.param_count() + self.ebm_s.param_count()
    }

    pub fn bind(&self, tape: &mut Tape<T>, gen_trainable: bool, ebm_trainable: bool) -> ModelBinding {
        ModelBinding {
            gen: self.gen.params.bind(tape, gen_trainable),
            ebm_a: self.ebm_a.params.bind(tape, ebm_trainable),
            ebm_s: self.ebm_s.params.bind(tape, ebm_trainable),
        }
    }
}

/// A few-hundred-parameter model rendering `w x h` images.
#[cfg(test)]
pub(crate) fn tiny_config(w: usize, h: usize) -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.nerf = NerfConfig {
        hidden: 8,
        trunk_depth: 2,
        pos_freqs: 2,
        dir_freqs: 1,
        dim_a: 3,
        dim_s: 2,
        mapping_layers: 1,
        film_layers: 1,
        ..NerfConfig::default()
    };
    c.ebm_a.width = 6;
    c.ebm_s.width = 6;
    c.prior_a = PriorConfig::normal(3);
    c.prior_s = PriorConfig::normal(2);
    c.render.width = w;
    c.render.height = h;
    c.render.samples = 4;
    c.render.deterministic = true;
    c
}
