//! Bottom-up inference networks: a small strided conv feature extractor shared
//! by Gaussian heads for `(z_a, z_s)` and vMF heads for the two pose angles.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Activation, Bound, CustomOp, Dense, ParamSet, Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Offset keeping Gaussian scales strictly positive.
const MIN_SCALE: f64 = 1e-4;

/// 3x3, stride 2, zero-padded patch extraction: `[H*W, C] -> [Ho*Wo, 9C]`.
#[derive(Clone, Copy, Debug)]
struct Im2Col {
    h: usize,
    w: usize,
    c: usize,
}

impl Im2Col {
    fn out_size(self) -> (usize, usize) {
        (self.h.div_ceil(2), self.w.div_ceil(2))
    }

    /// Visits `(out_row, out_col_offset, in_index)` for every in-bounds tap.
    fn for_each(self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_size();
        for oy in 0..ho {
            for ox in 0..wo {
                let row = oy * wo + ox;
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let tap = (ky * 3 + kx) * self.c;
                        let src = (iy as usize * self.w + ix as usize) * self.c;
                        for ch in 0..self.c {
                            f(row, tap + ch, src + ch);
                        }
                    }
                }
            }
        }
    }

    fn forward<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        let (ho, wo) = self.out_size();
        let cols = 9 * self.c;
        let mut out = Tensor::zeros(ho * wo, cols);
        self.for_each(|r, k, i| out.data[r * cols + k] = x.data[i]);
        out
    }
}

impl<T: Scalar> CustomOp<T> for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let mut g = Tensor::zeros(inputs[0].rows, inputs[0].cols);
        let cols = 9 * self.c;
        self.for_each(|r, k, i| g.data[i] += grad.data[r * cols + k]);
        vec![Some(g)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
    pub head_hidden: usize,
    pub dim_a: usize,
    pub dim_s: usize,
    /// Feed the camera pose to the latent heads.
    pub pose_conditioned: bool,
}

impl EncoderConfig {
    pub fn new(dim_a: usize, dim_s: usize) -> Self {
        Self {
            widths: vec![32, 64, 128, 128],
            head_hidden: 128,
            dim_a,
            dim_s,
            pose_conditioned: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    hidden: Dense,
    out: Dense,
}

impl Head {
    fn init<T: Scalar, R: Rng + ?Sized>(
        p: &mut ParamSet<T>,
        name: &str,
        fin: usize,
        hid: usize,
        fout: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Dense::init(p, &format!("{name}.0"), fin, hid, rng),
            out: Dense::init_scaled(p, &format!("{name}.1"), hid, fout, 0.1, rng),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.apply(tape, b, x)?;
        let h = tape.act(h, Activation::LeakyRelu);
        Ok(self.out.apply(tape, b, h)?)
    }
}

/// Gaussian posterior parameters for one image.
#[derive(Clone, Copy, Debug)]
pub struct GaussianHeads {
    pub mu_a: Var,
    pub scale_a: Var,
    pub mu_s: Var,
    pub scale_s: Var,
}

/// vMF parameters for altitude and azimuth: unit `[1, 2]` means and `[1, 1]` concentrations.
#[derive(Clone, Copy, Debug)]
pub struct PoseHeads {
    pub mu_alt: Var,
    pub kappa_alt: Var,
    pub mu_az: Var,
    pub kappa_az: Var,
}

/// Parameter groups, for the split learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderGroup {
    Features,
    Latent,
    Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub params: ParamSet<T>,
    convs: Vec<Dense>,
    head_a: Head,
    head_s: Head,
    head_alt: Head,
    head_az: Head,
    /// Parameter index ranges per group.
    groups: Vec<(EncoderGroup, std::ops::Range<usize>)>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) {
            return Err(invalid("encoder needs nonzero conv widths"));
        }
        let mut p = ParamSet::new();
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Dense::init(&mut p, &format!("conv{i}"), 9 * cin, w, rng));
            cin = w;
        }
        let feat_end = p.len();
        let fin = cin + if config.pose_conditioned { 4 } else { 0 };
        let hh = config.head_hidden;
        let head_a = Head::init(&mut p, "enc_a", fin, hh, 2 * config.dim_a, rng);
        let head_s = Head::init(&mut p, "enc_s", fin, hh, 2 * config.dim_s, rng);
        let lat_end = p.len();
        let head_alt = Head::init(&mut p, "enc_alt", cin, hh / 2, 3, rng);
        let head_az = Head::init(&mut p, "enc_az", cin, hh / 2, 3, rng);
        let groups = vec![
            (EncoderGroup::Features, 0..feat_end),
            (EncoderGroup::Latent, feat_end..lat_end),
            (EncoderGroup::Pose, lat_end..p.len()),
        ];
        Ok(Self {
            config,
            params: p,
            convs,
            head_a,
            head_s,
            head_alt,
            head_az,
            groups,
        })
    }

    pub fn groups(&self) -> &[(EncoderGroup, std::ops::Range<usize>)] {
        &self.groups
    }

    pub fn group_of(&self, param: usize) -> EncoderGroup {
        self.groups
            .iter()
            .find(|(_, r)| r.contains(&param))
            .map(|(g, _)| *g)
            .unwrap_or(EncoderGroup::Features)
    }

    /// Pooled conv features `[1, C]` for an RGB image.
    pub fn features(&self, tape: &mut Tape<T>, b: &Bound, img: &Image) -> Result<Var> {
        if img.channels != 3 {
            return Err(invalid("encoder expects an RGB image"));
        }
        let mut x = tape.constant(Tensor::new(
            img.pixels(),
            3,
            img.data.iter().map(|&v| T::lit(v)).collect(),
        ));
        let (mut h, mut w, mut c) = (img.height, img.width, 3);
        for conv in &self.convs {
            let op = Im2Col { h, w, c };
            let cols = op.forward(tape.value(x));
            let patches = tape.custom(&[x], cols, Box::new(op));
            let y = conv.apply(tape, b, patches)?;
            x = tape.act(y, Activation::LeakyRelu);
            (h, w) = op.out_size();
            c = conv.fan_out;
        }
        Ok(tape.mean_rows(x))
    }

    fn gaussian(&self, tape: &mut Tape<T>, raw: Var, dim: usize) -> Result<(Var, Var)> {
        let mu = tape.slice_cols(raw, 0, dim)?;
        let s = tape.slice_cols(raw, dim, dim)?;
        let s = tape.act(s, Activation::Softplus);
        let floor = tape.constant(Tensor::filled(1, dim, T::lit(MIN_SCALE)));
        Ok((mu, tape.add(s, floor)?))
    }

    /// Gaussian heads; `pose` is the `[1, 4]` pose row, ignored when the
    /// encoder is pose-free.
    pub fn gaussian_heads(&self, tape: &mut Tape<T>, b: &Bound, feat: Var, pose: Option<Var>) -> Result<GaussianHeads> {
        let input = if self.config.pose_conditioned {
            let p = match pose {
                Some(p) => p,
                None => tape.constant(Tensor::zeros(1, 4)),
            };
            tape.concat_cols(&[feat, p])?
        } else {
            feat
        };
        let ra = self.head_a.forward(tape, b, input)?;
        let rs = self.head_s.forward(tape, b, input)?;
        let (mu_a, scale_a) = self.gaussian(tape, ra, self.config.dim_a)?;
        let (mu_s, scale_s) = self.gaussian(tape, rs, self.config.dim_s)?;
        Ok(GaussianHeads {
            mu_a,
            scale_a,
            mu_s,
            scale_s,
        })
    }

    fn vmf_head(&self, tape: &mut Tape<T>, b: &Bound, head: &Head, feat: Var) -> Result<(Var, Var)> {
        let raw = head.forward(tape, b, feat)?;
        let m = tape.slice_cols(raw, 0, 2)?;
        let mu = tape.normalize_rows(m);
        let k = tape.slice_cols(raw, 2, 1)?;
        Ok((mu, tape.act(k, Activation::Softplus)))
    }

    pub fn pose_heads(&self, tape: &mut Tape<T>, b: &Bound, feat: Var) -> Result<PoseHeads> {
        let (mu_alt, kappa_alt) = self.vmf_head(tape, b, &self.head_alt, feat)?;
        let (mu_az, kappa_az) = self.vmf_head(tape, b, &self.head_az, feat)?;
        Ok(PoseHeads {
            mu_alt,
            kappa_alt,
            mu_az,
            kappa_az,
        })
    }

    /// `(mu_a, scale_a, mu_s, scale_s)` as plain vectors.
    #[allow(clippy::type_complexity)]
    pub fn encoder_forward(&self, img: &Image, pose: Option<&[f64; 4]>) -> Result<(Vec<T>, Vec<T>, Vec<T>, Vec<T>)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let f = self.features(&mut tape, &b, img)?;
        let p = pose.map(|p| tape.constant(Tensor::row(p.iter().map(|&v| T::lit(v)).collect())));
        let h = self.gaussian_heads(&mut tape, &b, f, p)?;
        let v = |x: Var| tape.value(x).data.clone();
        Ok((v(h.mu_a), v(h.scale_a), v(h.mu_s), v(h.scale_s)))
    }

    /// Per-angle `(mu, kappa)` for altitude then azimuth.
    pub fn pose_encoder(&self, img: &Image) -> Result<[([f64; 2], f64); 2]> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let f = self.features(&mut tape, &b, img)?;
        let h = self.pose_heads(&mut tape, &b, f)?;
        let get = |mu: Var, k: Var| {
            let m = tape.value(mu);
            ([m.data[0].f64(), m.data[1].f64()], tape.value(k).item().f64())
        };
        Ok([get(h.mu_alt, h.kappa_alt), get(h.mu_az, h.kappa_az)])
    }
}

/// `mu + scale * eps` on the tape.
pub fn reparam_gaussian<T: Scalar>(tape: &mut Tape<T>, mu: Var, scale: Var, eps: Tensor<T>) -> Result<Var> {
    let e = tape.constant(eps);
    let se = tape.mul(scale, e)?;
    Ok(tape.add(mu, se)?)
}

/// `sum_i log(s0 / s_i) + (s_i^2 + mu_i^2) / (2 s0^2) - 1/2`.
pub fn gaussian_kl<T: Scalar>(mu: &[T], scale: &[T], sigma0: f64) -> Result<T> {
    if !(sigma0 > 0.0) || scale.iter().any(|s| !(*s > T::zero())) {
        return Err(invalid("gaussian_kl: scales must be positive"));
    }
    let s0 = T::lit(sigma0);
    let half = T::lit(0.5);
    Ok(mu
        .iter()
        .zip(scale)
        .map(|(&m, &s)| (s0 / s).ln() + (s * s + m * m) / (T::lit(2.0) * s0 * s0) - half)
        .sum())
}

/// Tape version of [`gaussian_kl`], summed to a scalar.
pub fn gaussian_kl_tape<T: Scalar>(tape: &mut Tape<T>, mu: Var, scale: Var, sigma0: f64) -> Result<Var> {
    let (_, d) = tape.shape(mu);
    let ls = tape.act(scale, Activation::Ln);
    let s2 = tape.mul(scale, scale)?;
    let m2 = tape.mul(mu, mu)?;
    let q = tape.add(s2, m2)?;
    let q = tape.scale(q, T::lit(1.0 / (2.0 * sigma0 * sigma0)));
    let t = tape.sub(q, ls)?;
    let s = tape.sum(t);
    let c = tape.constant(Tensor::scalar(T::lit(d as f64 * (sigma0.ln() - 0.5))));
    Ok(tape.add(s, c)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::{finite_diff_gradient, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            widths: vec![4, 5],
            head_hidden: 6,
            dim_a: 2,
            dim_s: 3,
            pose_conditioned: true,
        }
    }

    fn image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, 3, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let (h, w, c) = (5, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(h * w, c, (0..h * w * c).map(|_| rng.random::<f64>()).collect());
        let k: Vec<f64> = (0..9 * c).map(|_| rng.random()).collect();
        let op = Im2Col { h, w, c };
        let cols = op.forward(&x);
        let (ho, wo) = op.out_size();
        assert_eq!((ho, wo), (3, 2));
        for oy in 0..ho {
            for ox in 0..wo {
                let mut want = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (2 * oy as isize + ky as isize - 1, 2 * ox as isize + kx as isize - 1);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ch in 0..c {
                            want += k[(ky * 3 + kx) * c + ch] * x.at(iy as usize * w + ix as usize, ch);
                        }
                    }
                }
                let got: f64 = cols.row_slice(oy * wo + ox).iter().zip(&k).map(|(a, b)| a * b).sum();
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_are_valid_and_deterministic() {
        let enc = Encoder::<f64>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for seed in 0..5 {
            let img = image(seed, 8, 8);
            let a = enc.encoder_forward(&img, Some(&[1.0, 0.0, 0.0, 1.0])).unwrap();
            let b = enc.encoder_forward(&img, Some(&[1.0, 0.0, 0.0, 1.0])).unwrap();
            assert_eq!(a, b);
            assert!(a.1.iter().chain(&a.3).all(|&s| s > 0.0));
            let p = enc.pose_encoder(&img).unwrap();
            for (mu, k) in p {
                assert!((mu[0].hypot(mu[1]) - 1.0).abs() < 1e-6);
                assert!(k >= 0.0);
            }
            assert_eq!(p, enc.pose_encoder(&img).unwrap());
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let enc = Encoder::<f64>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let img = image(7, 6, 5);
        let loss = |theta: &[f64], grad: bool| {
            let mut e = enc.clone();
            e.params.set_flat_values(theta);
            let mut tape = Tape::new();
            let b = e.params.bind(&mut tape, grad);
            let f = e.features(&mut tape, &b, &img).unwrap();
            let pose = tape.constant(Tensor::row(vec![0.6, 0.8, 1.0, 0.0]));
            let g = e.gaussian_heads(&mut tape, &b, f, Some(pose)).unwrap();
            let p = e.pose_heads(&mut tape, &b, f).unwrap();
            let mut terms = Vec::new();
            for (i, v) in [
                g.mu_a,
                g.scale_a,
                g.mu_s,
                g.scale_s,
                p.mu_alt,
                p.kappa_alt,
                p.mu_az,
                p.kappa_az,
            ]
            .into_iter()
            .enumerate()
            {
                let s = tape.act(v, Activation::Tanh);
                let s = tape.sum(s);
                terms.push(tape.scale(s, 0.3 + 0.1 * i as f64));
            }
            let mut total = terms[0];
            for t in &terms[1..] {
                total = tape.add(total, *t).unwrap();
            }
            let v = tape.value(total).item();
            let gr = grad.then(|| {
                let gs = tape.backward(total).unwrap();
                let mut ps = e.params.clone();
                ps.zero_grad();
                ps.accumulate(&gs, &b, 1.0);
                ps.flat_grads()
            });
            (v, gr)
        };
        let theta = enc.params.flat_values();
        let a = loss(&theta, true).1.unwrap();
        let n = finite_diff_gradient(|x| loss(x, false).0, &theta, 1e-6);
        assert!(relative_error(&a, &n, 1e-10) < 1e-5);
    }

    #[test]
    fn reparam_cases() {
        let mut tape = Tape::<f64>::new();
        let mu = tape.leaf(Tensor::row(vec![1.0, -2.0]));
        let s = tape.leaf(Tensor::row(vec![0.5, 3.0]));
        let z = reparam_gaussian(&mut tape, mu, s, Tensor::zeros(1, 2)).unwrap();
        assert_eq!(tape.value(z).data, vec![1.0, -2.0]);
        let zero = tape.leaf(Tensor::zeros(1, 2));
        let z = reparam_gaussian(&mut tape, mu, zero, Tensor::row(vec![5.0, -7.0])).unwrap();
        assert_eq!(tape.value(z).data, vec![1.0, -2.0]);
        let z = reparam_gaussian(&mut tape, mu, s, Tensor::row(vec![2.0, 1.0])).unwrap();
        let t = tape.sum(z);
        let g = tape.backward(t).unwrap();
        assert_eq!(g.get(s).unwrap().data, vec![2.0, 1.0]);
        assert_eq!(g.get(mu).unwrap().data, vec![1.0, 1.0]);
    }

    #[test]
    fn reparam_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 50_000;
        let mut tape = Tape::<f64>::new();
        let mu = tape.constant(Tensor::filled(n, 1, 1.0));
        let s = tape.constant(Tensor::filled(n, 1, 2.0));
        let eps = Tensor::new(n, 1, (0..n).map(|_| rng.sample(StandardNormal)).collect());
        let z = reparam_gaussian(&mut tape, mu, s, eps).unwrap();
        let d = &tape.value(z).data;
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - 1.0).abs() < 0.05 && (sd - 2.0).abs() < 0.05);
    }

    #[test]
    fn kl_cases() {
        assert_eq!(gaussian_kl::<f64>(&[0.0], &[1.5], 1.5).unwrap(), 0.0);
        assert!((gaussian_kl::<f64>(&[1.0], &[1.0], 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(gaussian_kl(&[1.0], &[0.0], 1.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mu: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..4.0)).collect();
            let k = gaussian_kl(&mu, &s, 1.3).unwrap();
            assert!(k >= 0.0);
            let mut tape = Tape::new();
            let m = tape.constant(Tensor::row(mu.clone()));
            let sv = tape.constant(Tensor::row(s.clone()));
            let kt = gaussian_kl_tape(&mut tape, m, sv, 1.3).unwrap();
            assert!((tape.value(kt).item() - k).abs() < 1e-12);
        }
    }
}
