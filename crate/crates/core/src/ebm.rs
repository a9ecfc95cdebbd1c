//! Latent energy-based prior `p(z) ∝ exp(-U(z)) q0(z)` and its Langevin sampler.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ad::{Activation, Bound, Mlp, ParamSet, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EbmSize {
    /// Two hidden layers.
    Small,
    /// Four hidden layers.
    Large,
}

impl EbmSize {
    pub fn hidden_layers(self) -> usize {
        match self {
            EbmSize::Small => 2,
            EbmSize::Large => 4,
        }
    }
}

/// Swish MLP from a latent vector to a scalar energy.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyNet<T> {
    pub params: ParamSet<T>,
    pub dim: usize,
    pub width: usize,
    pub size: EbmSize,
    mlp: Mlp,
}

impl<T: Scalar> EnergyNet<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, width: usize, size: EbmSize, rng: &mut R) -> Result<Self> {
        if dim == 0 || width == 0 {
            return Err(invalid("energy net needs positive latent dim and width"));
        }
        let mut params = ParamSet::new();
        let mut widths = vec![dim];
        widths.extend(std::iter::repeat_n(width, size.hidden_layers()));
        widths.push(1);
        let mlp = Mlp::init(&mut params, "ebm", &widths, Activation::Swish, true, rng);
        Ok(Self {
            params,
            dim,
            width,
            size,
            mlp,
        })
    }

    /// `sum (in + 1) * out` over the layers.
    pub fn expected_param_count(dim: usize, width: usize, size: EbmSize) -> usize {
        let mut widths = vec![dim];
        widths.extend(std::iter::repeat_n(width, size.hidden_layers()));
        widths.push(1);
        widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Per-row energies `[N, 1]` for latents `[N, dim]`.
    pub fn energy_tape(&self, tape: &mut Tape<T>, bound: &Bound, z: Var) -> Result<Var> {
        if tape.shape(z).1 != self.dim {
            return Err(invalid(format!(
                "energy net expects dim {}, got {:?}",
                self.dim,
                tape.shape(z)
            )));
        }
        Ok(self.mlp.forward(tape, bound, z)?)
    }

    pub fn energy(&self, z: &[T]) -> Result<T> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let zv = tape.constant(Tensor::row(z.to_vec()));
        let u = self.energy_tape(&mut tape, &b, zv)?;
        Ok(tape.value(u).item())
    }

    /// Energies and `dU/dz` for every row of `z`.
    pub fn energy_and_grad(&self, z: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let zv = tape.leaf(z.clone());
        let u = self.energy_tape(&mut tape, &b, zv)?;
        let s = tape.sum(u);
        let g = tape.backward(s)?;
        Ok((tape.value(u).data.clone(), g.get_or_zeros(zv, z.shape())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    Normal,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub reference: Reference,
    /// Standard deviation of the normal reference.
    pub sigma: f64,
    /// Half-width of the uniform reference box.
    pub bound: f64,
    pub dim: usize,
    pub steps: usize,
    pub step_size: f64,
    pub noise_weight: f64,
}

impl PriorConfig {
    pub fn normal(dim: usize) -> Self {
        Self {
            reference: Reference::Normal,
            sigma: 1.0,
            bound: 2.0,
            dim,
            steps: 60,
            step_size: 0.5,
            noise_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !(self.bound > 0.0) {
            return Err(invalid("prior: sigma and bound must be positive"));
        }
        if !(self.step_size > 0.0) {
            return Err(invalid("prior: step size must be positive"));
        }
        if !(self.noise_weight >= 0.0) {
            return Err(invalid("prior: noise weight must be >= 0"));
        }
        if self.dim == 0 {
            return Err(invalid("prior: latent dim must be positive"));
        }
        Ok(())
    }

    /// `n` independent draws from `q0`, as rows.
    pub fn sample_reference<T: Scalar, R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor<T> {
        let data = (0..n * self.dim)
            .map(|_| {
                T::lit(match self.reference {
                    Reference::Normal => self.sigma * rng.sample::<f64, _>(StandardNormal),
                    Reference::Uniform => rng.random_range(-self.bound..self.bound),
                })
            })
            .collect();
        Tensor::new(n, self.dim, data)
    }

    /// `log q0(z)` up to a constant.
    pub fn log_reference<T: Scalar>(&self, z: &[T]) -> T {
        match self.reference {
            Reference::Normal => -z.iter().map(|&v| v * v).sum::<T>() / T::lit(2.0 * self.sigma * self.sigma),
            Reference::Uniform => {
                let b = T::lit(self.bound);
                if z.iter().all(|v| v.abs() <= b) {
                    T::zero()
                } else {
                    T::neg_infinity()
                }
            }
        }
    }

    /// Folds a coordinate back into `[-bound, bound]` by mirror reflection.
    pub fn reflect<T: Scalar>(&self, x: T) -> T {
        let b = T::lit(self.bound);
        if x.abs() <= b {
            return x;
        }
        let period = b * T::lit(4.0);
        let mut y = (x + b) % period;
        if y < T::zero() {
            y += period;
        }
        let two_b = b + b;
        if y > two_b {
            y = period - y;
        }
        y - b
    }
}

/// `grad log p(z) = -dU/dz + grad log q0(z)` for each row. `None` means `U ≡ 0`.
pub fn prior_score<T: Scalar>(net: Option<&EnergyNet<T>>, z: &Tensor<T>, cfg: &PriorConfig) -> Result<Tensor<T>> {
    if z.cols != cfg.dim {
        return Err(invalid(format!(
            "prior score: latent dim {} vs config {}",
            z.cols, cfg.dim
        )));
    }
    let mut score = match net {
        Some(n) => {
            let (_, mut g) = n.energy_and_grad(z)?;
            g.scale_assign(-T::one());
            g
        }
        None => Tensor::zeros(z.rows, z.cols),
    };
    match cfg.reference {
        Reference::Normal => {
            let inv = T::lit(1.0 / (cfg.sigma * cfg.sigma));
            for (s, &v) in score.data.iter_mut().zip(&z.data) {
                *s -= v * inv;
            }
        }
        Reference::Uniform => {
            let b = T::lit(cfg.bound);
            if let Some(i) = z.data.iter().position(|v| !(v.abs() <= b)) {
                return Err(invalid(format!(
                    "latent coordinate {} = {} outside the uniform support",
                    i, z.data[i]
                )));
            }
        }
    }
    Ok(score)
}

/// One Langevin update, `z + delta * score + w * sqrt(2 delta) * e`, in place.
pub fn langevin_update<T: Scalar, R: Rng + ?Sized>(
    z: &mut Tensor<T>,
    score: &Tensor<T>,
    step_size: f64,
    noise_weight: f64,
    rng: &mut R,
) {
    let delta = T::lit(step_size);
    let scale = T::lit(noise_weight * (2.0 * step_size).sqrt());
    let noisy = noise_weight > 0.0;
    for (v, &s) in z.data.iter_mut().zip(&score.data) {
        let e = if noisy {
            T::lit(rng.sample::<f64, _>(StandardNormal))
        } else {
            T::zero()
        };
        *v += delta * s + scale * e;
    }
}

/// `K` Langevin steps from `z0` under the prior.
pub fn langevin_prior<T: Scalar, R: Rng + ?Sized>(
    net: Option<&EnergyNet<T>>,
    z0: &Tensor<T>,
    cfg: &PriorConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let mut z = z0.clone();
    for k in 0..cfg.steps {
        let score = prior_score(net, &z, cfg)?;
        langevin_update(&mut z, &score, cfg.step_size, cfg.noise_weight, rng);
        if cfg.reference == Reference::Uniform {
            for v in z.data.iter_mut() {
                *v = cfg.reflect(*v);
            }
        }
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("prior Langevin iterate at step {}", k + 1)));
        }
    }
    Ok(z)
}

/// `mean dU/dalpha (prior samples) - mean dU/dalpha (posterior samples)`.
/// Ascending along this lowers the energy of posterior samples relative to
/// prior samples.
pub fn ebm_grad<T: Scalar>(net: &EnergyNet<T>, neg: &Tensor<T>, pos: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    if neg.rows == 0 || pos.rows == 0 {
        return Err(invalid("ebm_grad: empty sample batch"));
    }
    let mut acc = net.params.clone();
    acc.zero_grad();
    for (batch, sign) in [(neg, T::one()), (pos, -T::one())] {
        let mut tape = Tape::new();
        let b = net.params.bind(&mut tape, true);
        let z = tape.constant(batch.clone());
        let u = net.energy_tape(&mut tape, &b, z)?;
        let m = tape.sum(u);
        let g = tape.backward(m)?;
        acc.accumulate(&g, &b, sign / T::lit(batch.rows as f64));
    }
    Ok(acc.grads())
}

/// Result of [`toy_two_mode`]: energies at the two modes and their midpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyOutcome {
    pub u_modes: [f64; 2],
    pub u_mid: f64,
}

impl ToyOutcome {
    pub fn ordered(&self) -> bool {
        self.u_modes.iter().all(|&u| u < self.u_mid)
    }
}

/// Fits an energy prior to a two-mode latent distribution seen through an
/// identity generator, so posterior samples are the data themselves.
pub fn toy_two_mode(seed: u64, updates: usize) -> Result<ToyOutcome> {
    use crate::ad::{Adam, AdamConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes = [[-1.5f64, 0.5], [1.5, -0.5]];
    let mut net = EnergyNet::<f64>::new(2, 32, EbmSize::Small, &mut rng)?;
    let cfg = PriorConfig {
        steps: 20,
        step_size: 0.1,
        ..PriorConfig::normal(2)
    };
    // Larger rates let short-run chains escape and the energy drift without bound.
    let mut opt = Adam::for_params(AdamConfig::with_lr(5e-5), &net.params);
    let batch = 64;
    for _ in 0..updates {
        let pos: Vec<f64> = (0..batch)
            .flat_map(|_| {
                let m = modes[rng.random_range(0..2)];
                let e0: f64 = rng.sample(StandardNormal);
                let e1: f64 = rng.sample(StandardNormal);
                [m[0] + 0.2 * e0, m[1] + 0.2 * e1]
            })
            .collect();
        let pos = Tensor::new(batch, 2, pos);
        let z0 = cfg.sample_reference(batch, &mut rng);
        let neg = langevin_prior(Some(&net), &z0, &cfg, &mut rng)?;
        let g = ebm_grad(&net, &neg, &pos)?;
        // Ascent on the estimate.
        for (p, gi) in net.params.params.iter_mut().zip(g) {
            p.grad = gi.map(|v| -v);
        }
        opt.step_params(&mut net.params)?;
    }
    Ok(ToyOutcome {
        u_modes: [net.energy(&modes[0])?, net.energy(&modes[1])?],
        u_mid: net.energy(&[0.0, 0.0])?,
    })
}
