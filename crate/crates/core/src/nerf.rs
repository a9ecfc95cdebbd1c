//! Conditional radiance field `(x, d, z_s, z_a) -> (c, sigma)`.
//!
//! The field factors into a shape trunk `(x, z_s) -> h`, a density head
//! `h -> sigma`, and a colour head `(h, d, z_a) -> c`. Density therefore never
//! sees the view direction or the appearance code, which is what makes depth
//! maps exactly invariant to `z_a`.
//!
//! Two conditioning variants are provided. `Concat` feeds the mapped latent
//! alongside the positional encoding (the first trunk layer's weight is split
//! into a point block and a latent block, which is the same linear map as
//! concatenating the inputs). `Film` modulates trunk and colour features with
//! per-channel scale and shift predicted from the mapped latent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{posenc_forward, Activation, Bound, Dense, Mlp, ParamSet, Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    Concat,
    Film,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NerfConfig {
    pub hidden: usize,
    pub trunk_depth: usize,
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub dim_a: usize,
    pub dim_s: usize,
    pub variant: Conditioning,
    pub mapping_layers: usize,
    /// Number of leading trunk layers modulated by `z_s` in the FiLM variant.
    pub film_layers: usize,
}

impl Default for NerfConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            trunk_depth: 4,
            pos_freqs: 6,
            dir_freqs: 4,
            dim_a: 16,
            dim_s: 16,
            variant: Conditioning::Concat,
            mapping_layers: 4,
            film_layers: 4,
        }
    }
}

impl NerfConfig {
    /// Full-size network: width 256, eight trunk layers, 128-d latents.
    pub fn full_scale() -> Self {
        Self {
            hidden: 256,
            trunk_depth: 8,
            dim_a: 128,
            dim_s: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("hidden", self.hidden),
            ("trunk_depth", self.trunk_depth),
            ("pos_freqs", self.pos_freqs),
            ("dim_a", self.dim_a),
            ("dim_s", self.dim_s),
            ("mapping_layers", self.mapping_layers),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(invalid(format!("nerf config: {name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn pos_width(&self) -> usize {
        3 * 2 * self.pos_freqs
    }

    pub fn dir_width(&self) -> usize {
        3 * 2 * self.dir_freqs
    }

    fn color_width(&self) -> usize {
        (self.hidden / 2).max(1)
    }
}

/// `(sin 2^k pi p, cos 2^k pi p)` for k in `0..freqs`, per coordinate.
pub fn positional_encode<T: Scalar>(p: &[T], freqs: usize) -> Vec<T> {
    posenc_forward(&Tensor::row(p.to_vec()), freqs).data
}

/// `gamma * h + beta`, with `gamma` and `beta` broadcast over the rows of `h`.
pub fn film_modulate<T: Scalar>(tape: &mut Tape<T>, h: Var, gamma: Var, beta: Var) -> Result<Var> {
    let scaled = tape.mul_row(h, gamma)?;
    Ok(tape.add_row(scaled, beta)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Latent {
    Appearance,
    Shape,
}

#[derive(Clone, Debug, PartialEq)]
enum Layout {
    Concat {
        trunk_in: Dense,
        trunk_latent: Dense,
        color_latent: Dense,
    },
    Film {
        trunk_in: Dense,
        /// One `H -> 2H` layer per modulated trunk layer.
        film_shape: Vec<Dense>,
        /// `H -> 2 * color_width`.
        film_color: Dense,
    },
}

/// Radiance at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample<T> {
    pub color: [T; 3],
    pub density: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub config: NerfConfig,
    pub params: ParamSet<T>,
    map_a: Mlp,
    map_s: Mlp,
    layout: Layout,
    trunk: Vec<Dense>,
    sigma_head: Dense,
    feature: Dense,
    color_feat: Dense,
    color_dir: Dense,
    rgb: Dense,
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: NerfConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let cw = config.color_width();
        let mut p = ParamSet::new();
        let map_widths = |d: usize| {
            let mut w = vec![d];
            w.extend(std::iter::repeat_n(h, config.mapping_layers));
            w
        };
        let map_a = Mlp::init(
            &mut p,
            "map_a",
            &map_widths(config.dim_a),
            Activation::LeakyRelu,
            false,
            rng,
        );
        let map_s = Mlp::init(
            &mut p,
            "map_s",
            &map_widths(config.dim_s),
            Activation::LeakyRelu,
            false,
            rng,
        );
        let layout = match config.variant {
            Conditioning::Concat => Layout::Concat {
                trunk_in: Dense::init(&mut p, "trunk.0.x", config.pos_width(), h, rng),
                trunk_latent: Dense::init(&mut p, "trunk.0.z", h, h, rng),
                color_latent: Dense::init(&mut p, "color.z", h, cw, rng),
            },
            Conditioning::Film => {
                let trunk_in = Dense::init(&mut p, "trunk.0", config.pos_width(), h, rng);
                let n = config.film_layers.min(config.trunk_depth);
                let film_shape = (0..n)
                    .map(|i| Dense::init_scaled(&mut p, &format!("film.s{i}"), h, 2 * h, 0.25, rng))
                    .collect();
                let film_color = Dense::init_scaled(&mut p, "film.a", h, 2 * cw, 0.25, rng);
                Layout::Film {
                    trunk_in,
                    film_shape,
                    film_color,
                }
            }
        };
        let trunk = (1..config.trunk_depth)
            .map(|i| Dense::init(&mut p, &format!("trunk.{i}"), h, h, rng))
            .collect();
        let sigma_head = Dense::init(&mut p, "sigma", h, 1, rng);
        let feature = Dense::init(&mut p, "feature", h, h, rng);
        let color_feat = Dense::init(&mut p, "color.h", h, cw, rng);
        let color_dir = Dense::init(&mut p, "color.d", config.dir_width(), cw, rng);
        let rgb = Dense::init(&mut p, "rgb", cw, 3, rng);
        Ok(Self {
            config,
            params: p,
            map_a,
            map_s,
            layout,
            trunk,
            sigma_head,
            feature,
            color_feat,
            color_dir,
            rgb,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// `w = MLP(rms_normalize(z))` with leaky-ReLU after every layer.
    pub fn mapping_forward(&self, tape: &mut Tape<T>, bound: &Bound, which: Latent, z: Var) -> Result<Var> {
        let (mlp, dim) = match which {
            Latent::Appearance => (&self.map_a, self.config.dim_a),
            Latent::Shape => (&self.map_s, self.config.dim_s),
        };
        if tape.shape(z) != (1, dim) {
            return Err(invalid(format!(
                "latent {:?} has shape {:?}, want (1, {dim})",
                which,
                tape.shape(z)
            )));
        }
        let n = tape.rms_norm(z);
        Ok(mlp.forward(tape, bound, n)?)
    }

    /// Shape trunk `h` for encoded points; depends on `(x, z_s)` only.
    pub fn trunk_forward(&self, tape: &mut Tape<T>, bound: &Bound, pos_enc: Var, w_s: Var) -> Result<Var> {
        let h = self.config.hidden;
        let mut x = match &self.layout {
            Layout::Concat {
                trunk_in, trunk_latent, ..
            } => {
                let a = trunk_in.apply(tape, bound, pos_enc)?;
                let b = trunk_latent.apply(tape, bound, w_s)?;
                let s = tape.add_row(a, b)?;
                tape.act(s, Activation::Relu)
            }
            Layout::Film {
                trunk_in, film_shape, ..
            } => {
                let a = trunk_in.apply(tape, bound, pos_enc)?;
                let a = self.film(tape, bound, a, &film_shape[0], w_s, h)?;
                tape.act(a, Activation::Relu)
            }
        };
        for (i, layer) in self.trunk.iter().enumerate() {
            x = layer.apply(tape, bound, x)?;
            if let Layout::Film { film_shape, .. } = &self.layout {
                if let Some(f) = film_shape.get(i + 1) {
                    x = self.film(tape, bound, x, f, w_s, h)?;
                }
            }
            x = tape.act(x, Activation::Relu);
        }
        Ok(x)
    }

    fn film(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, layer: &Dense, w: Var, width: usize) -> Result<Var> {
        let gb = layer.apply(tape, bound, w)?;
        let g = tape.slice_cols(gb, 0, width)?;
        let one = tape.constant(Tensor::filled(1, width, T::one()));
        let gamma = tape.add(g, one)?;
        let beta = tape.slice_cols(gb, width, width)?;
        film_modulate(tape, x, gamma, beta)
    }

    /// Density `softplus(head(h))`, one column.
    pub fn density_forward(&self, tape: &mut Tape<T>, bound: &Bound, h: Var) -> Result<Var> {
        let s = self.sigma_head.apply(tape, bound, h)?;
        Ok(tape.act(s, Activation::Softplus))
    }

    /// Colour `sigmoid(head(h, d, z_a))`, three columns.
    pub fn color_forward(&self, tape: &mut Tape<T>, bound: &Bound, h: Var, dir_enc: Var, w_a: Var) -> Result<Var> {
        let feat = self.feature.apply(tape, bound, h)?;
        let a = self.color_feat.apply(tape, bound, feat)?;
        let b = self.color_dir.apply(tape, bound, dir_enc)?;
        let mut c = tape.add(a, b)?;
        match &self.layout {
            Layout::Concat { color_latent, .. } => {
                let z = color_latent.apply(tape, bound, w_a)?;
                c = tape.add_row(c, z)?;
            }
            Layout::Film { film_color, .. } => {
                c = self.film(tape, bound, c, film_color, w_a, self.config.color_width())?;
            }
        }
        let c = tape.act(c, Activation::Relu);
        let c = self.rgb.apply(tape, bound, c)?;
        Ok(tape.act(c, Activation::Sigmoid))
    }

    /// Field evaluation for a batch of encoded points. Returns `(rgb, sigma)`.
    pub fn field_forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        pos_enc: Var,
        dir_enc: Var,
        w_s: Var,
        w_a: Var,
    ) -> Result<(Var, Var)> {
        let h = self.trunk_forward(tape, bound, pos_enc, w_s)?;
        let sigma = self.density_forward(tape, bound, h)?;
        let rgb = self.color_forward(tape, bound, h, dir_enc, w_a)?;
        Ok((rgb, sigma))
    }

    /// Single-point evaluation off the training path.
    pub fn nerf_forward(&self, x: [T; 3], d: [T; 3], z_s: &[T], z_a: &[T]) -> Result<RadianceSample<T>> {
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if (norm - T::one()).abs().f64() > 1e-6 {
            return Err(invalid(format!("view direction norm {norm} is not 1")));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let zs = tape.constant(Tensor::row(z_s.to_vec()));
        let za = tape.constant(Tensor::row(z_a.to_vec()));
        let w_s = self.mapping_forward(&mut tape, &bound, Latent::Shape, zs)?;
        let w_a = self.mapping_forward(&mut tape, &bound, Latent::Appearance, za)?;
        let pe = tape.constant(Tensor::row(positional_encode(&x, self.config.pos_freqs)));
        let de = tape.constant(Tensor::row(positional_encode(&d, self.config.dir_freqs)));
        let (rgb, sigma) = self.field_forward(&mut tape, &bound, pe, de, w_s, w_a)?;
        let c = tape.value(rgb);
        Ok(RadianceSample {
            color: [c.data[0], c.data[1], c.data[2]],
            density: tape.value(sigma).item(),
        })
    }
}
