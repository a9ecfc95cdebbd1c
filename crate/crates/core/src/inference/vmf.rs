//! von Mises-Fisher distribution on `S^{m-1}`: normaliser, KL to the uniform
//! distribution, and a reparameterised rejection sampler (Wood's algorithm with
//! a Householder rotation).

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::ad::{CustomOp, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Proposals tried before the sampler gives up.
pub const REJECTION_BUDGET: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct VmfParams {
    pub mu: Vec<f64>,
    pub kappa: f64,
}

impl VmfParams {
    pub fn new(mu: Vec<f64>, kappa: f64) -> Result<Self> {
        let p = Self { mu, kappa };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mu.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("vMF mean direction has norm {n}")));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(invalid(format!(
                "vMF concentration {} must be finite and >= 0",
                self.kappa
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `log S_nu(x)` with `S_nu(x) = I_nu(x) Gamma(nu + 1) / (x/2)^nu = sum_k t_k`,
/// `t_k = (x^2/4)^k Gamma(nu+1) / (k! Gamma(k+nu+1))`. The sum is taken around its
/// largest term so nothing overflows.
fn log_series(nu: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let q = 0.25 * x * x;
    let peak = (0.5 * ((nu * nu + x * x).sqrt() - nu)).floor().max(0.0);
    let log_t = |k: f64| k * q.ln() - libm::lgamma(k + 1.0) - libm::lgamma(k + nu + 1.0) + libm::lgamma(nu + 1.0);
    let lp = log_t(peak);
    let mut sum = 1.0;
    // Upwards.
    let mut t = 1.0;
    let mut k = peak;
    loop {
        t *= q / ((k + 1.0) * (k + 1.0 + nu));
        sum += t;
        k += 1.0;
        if t < 1e-18 * sum {
            break;
        }
    }
    // Downwards.
    let mut t = 1.0;
    let mut k = peak;
    while k > 0.0 {
        t *= k * (k + nu) / q;
        sum += t;
        k -= 1.0;
        if t < 1e-18 * sum {
            break;
        }
    }
    lp + sum.ln()
}

/// Large-argument expansion `I_nu(x) ~ e^x / sqrt(2 pi x) sum_k (-1)^k a_k(nu) / x^k`.
fn log_bessel_hankel(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..40 {
        let j = (2 * k - 1) as f64;
        let next = -term * (mu - j * j) / (k as f64 * 8.0 * x);
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + sum.ln()
}

fn use_asymptotic(nu: f64, x: f64) -> bool {
    x >= 50.0 && x >= 2.0 * (nu + 1.0) * (nu + 1.0)
}

/// `log I_nu(x)` for `nu >= 0`, `x >= 0`.
pub fn log_bessel_i(nu: f64, x: f64) -> f64 {
    if x == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if use_asymptotic(nu, x) {
        log_bessel_hankel(nu, x)
    } else {
        nu * (0.5 * x).ln() - libm::lgamma(nu + 1.0) + log_series(nu, x)
    }
}

/// `log S_nu(x) = log I_nu(x) - nu log(x/2) + log Gamma(nu + 1)`, finite at 0.
fn log_scaled(nu: f64, x: f64) -> f64 {
    if use_asymptotic(nu, x) {
        log_bessel_hankel(nu, x) - nu * (0.5 * x).ln() + libm::lgamma(nu + 1.0)
    } else {
        log_series(nu, x)
    }
}

/// `A_m(k) = I_{m/2}(k) / I_{m/2-1}(k)`, the mean resultant length.
pub fn bessel_ratio(m: usize, kappa: f64) -> f64 {
    let nu = 0.5 * m as f64 - 1.0;
    if kappa == 0.0 {
        return 0.0;
    }
    if use_asymptotic(nu + 1.0, kappa) {
        return (log_bessel_hankel(nu + 1.0, kappa) - log_bessel_hankel(nu, kappa)).exp();
    }
    ((0.5 * kappa).ln() - (nu + 1.0).ln() + log_scaled(nu + 1.0, kappa) - log_scaled(nu, kappa)).exp()
}

/// `dA/dk = 1 - A^2 - (m - 1) A / k`.
fn bessel_ratio_deriv(m: usize, kappa: f64) -> f64 {
    if kappa == 0.0 {
        return 1.0 / m as f64;
    }
    let a = bessel_ratio(m, kappa);
    1.0 - a * a - (m as f64 - 1.0) * a / kappa
}

/// `log C_m(k)` with `C_m(k) = k^{m/2-1} / ((2 pi)^{m/2} I_{m/2-1}(k))`.
pub fn vmf_log_norm(m: usize, kappa: f64) -> f64 {
    let nu = 0.5 * m as f64 - 1.0;
    // k^nu / I_nu(k) = 2^nu Gamma(nu + 1) / S_nu(k).
    nu * 2f64.ln() + libm::lgamma(nu + 1.0) - log_scaled(nu, kappa) - 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln()
}

pub fn vmf_logpdf(x: &[f64], p: &VmfParams) -> Result<f64> {
    p.validate()?;
    if x.len() != p.dim() {
        return Err(invalid("vmf_logpdf: dimension mismatch"));
    }
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return Err(invalid(format!("vmf_logpdf: point has norm {n}")));
    }
    let dot: f64 = x.iter().zip(&p.mu).map(|(a, b)| a * b).sum();
    Ok(vmf_log_norm(p.dim(), p.kappa) + p.kappa * dot)
}

/// `KL(vMF(mu, k) || U(S^{m-1})) = k A_m(k) + log C_m(k) + log |S^{m-1}|`.
///
/// The normaliser and surface-area terms cancel to `-log S_{m/2-1}(k)`, which
/// keeps the value exact at `k = 0`.
pub fn vmf_kl_uniform(kappa: f64, m: usize) -> f64 {
    let nu = 0.5 * m as f64 - 1.0;
    kappa * bessel_ratio(m, kappa) - log_scaled(nu, kappa)
}

/// `d KL / dk = k A'(k)`.
pub fn vmf_kl_uniform_grad(kappa: f64, m: usize) -> f64 {
    kappa * bessel_ratio_deriv(m, kappa)
}

/// Wood's envelope constant `b`, in the cancellation-free form.
fn wood_b(kappa: f64, m: usize) -> f64 {
    let m1 = m as f64 - 1.0;
    m1 / (2.0 * kappa + (4.0 * kappa * kappa + m1 * m1).sqrt())
}

/// Cosine to the mean direction from the accepted beta draw.
fn omega(b: f64, eps: f64) -> f64 {
    (1.0 - (1.0 + b) * eps) / (1.0 - (1.0 - b) * eps)
}

/// An accepted sample together with the randomness that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct VmfDraw {
    pub x: Vec<f64>,
    /// Accepted beta variate.
    pub eps: f64,
    /// Uniform direction on `S^{m-2}`, orthogonal to the pole.
    pub v: Vec<f64>,
}

/// Rejection step only: returns the accepted beta draw and the tangent direction.
fn draw_randomness<R: Rng + ?Sized>(kappa: f64, m: usize, rng: &mut R) -> Result<(f64, Vec<f64>)> {
    if m < 2 {
        return Err(invalid("vMF needs dimension >= 2"));
    }
    let m1 = m as f64 - 1.0;
    let b = wood_b(kappa, m);
    let a = (m1 + 2.0 * kappa + (4.0 * kappa * kappa + m1 * m1).sqrt()) / 4.0;
    let d = 4.0 * a * b / (1.0 + b) - m1 * m1.ln();
    let beta = Beta::new(0.5 * m1, 0.5 * m1).map_err(|e| invalid(format!("beta: {e}")))?;
    let mut accepted = None;
    for _ in 0..REJECTION_BUDGET {
        let eps = beta.sample(rng);
        let t = 2.0 * a * b / (1.0 - (1.0 - b) * eps);
        let u: f64 = rng.random();
        if m1 * t.ln() - t + d >= u.ln() {
            accepted = Some(eps);
            break;
        }
    }
    let eps = accepted.ok_or(Error::RejectionBudget(REJECTION_BUDGET))?;
    let v = if m == 2 {
        vec![if rng.random::<bool>() { 1.0 } else { -1.0 }]
    } else {
        loop {
            let v: Vec<f64> = (0..m - 1).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect();
            }
        }
    };
    Ok((eps, v))
}

/// Deterministic part of the sampler: `(eps, v)` to a point on the sphere.
pub fn vmf_transform(mu: &[f64], kappa: f64, eps: f64, v: &[f64]) -> Vec<f64> {
    let m = mu.len();
    let w = omega(wood_b(kappa, m), eps);
    let r = (1.0 - w * w).max(0.0).sqrt();
    let mut z = Vec::with_capacity(m);
    z.push(w);
    z.extend(v.iter().map(|&x| r * x));
    householder(mu, &z)
}

/// Reflection taking `e1` to `mu`, applied to `z`.
fn householder(mu: &[f64], z: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = mu.iter().map(|&x| -x).collect();
    u[0] += 1.0;
    let n2: f64 = u.iter().map(|x| x * x).sum();
    if n2 < 1e-24 {
        return z.to_vec();
    }
    let c = 2.0 * u.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / n2;
    z.iter().zip(&u).map(|(&zi, &ui)| zi - c * ui).collect()
}

pub fn vmf_sample<R: Rng + ?Sized>(p: &VmfParams, rng: &mut R) -> Result<VmfDraw> {
    p.validate()?;
    let (eps, v) = draw_randomness(p.kappa, p.dim(), rng)?;
    Ok(VmfDraw {
        x: vmf_transform(&p.mu, p.kappa, eps, &v),
        eps,
        v,
    })
}

/// Reparameterised sampling on the tape. The accepted randomness is frozen;
/// gradients reach `mu` through the Householder map and `kappa` through the
/// cosine transform (the rejection correction term is dropped).
struct VmfSampleOp {
    draws: Vec<(f64, Vec<f64>)>,
}

impl<T: Scalar> CustomOp<T> for VmfSampleOp {
    fn name(&self) -> &'static str {
        "vmf_sample"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (mu_t, kappa_t) = (inputs[0], inputs[1]);
        let m = mu_t.cols;
        let mut g_mu = Tensor::zeros(mu_t.rows, m);
        let mut g_k = Tensor::zeros(kappa_t.rows, 1);
        for (row, (eps, v)) in self.draws.iter().enumerate() {
            let mu: Vec<f64> = mu_t.row_slice(row).iter().map(|x| x.f64()).collect();
            let kappa = kappa_t.data[row].f64().max(0.0);
            let g: Vec<f64> = grad.row_slice(row).iter().map(|x| x.f64()).collect();
            let (gm, gk) = vmf_transform_vjp(&mu, kappa, *eps, v, &g);
            for (d, s) in g_mu.data[row * m..(row + 1) * m].iter_mut().zip(gm) {
                *d = T::lit(s);
            }
            g_k.data[row] = T::lit(gk);
        }
        vec![Some(g_mu), Some(g_k)]
    }
}

/// Vector-Jacobian product of [`vmf_transform`] wrt `(mu, kappa)`.
pub fn vmf_transform_vjp(mu: &[f64], kappa: f64, eps: f64, v: &[f64], g: &[f64]) -> (Vec<f64>, f64) {
    let m = mu.len();
    let b = wood_b(kappa, m);
    let w = omega(b, eps);
    let r = (1.0 - w * w).max(1e-300).sqrt();
    let mut z = vec![w];
    z.extend(v.iter().map(|&x| r * x));

    let mut u: Vec<f64> = mu.iter().map(|&x| -x).collect();
    u[0] += 1.0;
    let n2: f64 = u.iter().map(|x| x * x).sum();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let (g_z, g_mu) = if n2 < 1e-24 {
        (g.to_vec(), vec![0.0; m])
    } else {
        // x = z - 2 u (u.z) / (u.u)
        let uz = dot(&u, &z);
        let ug = dot(&u, g);
        let g_z: Vec<f64> = g.iter().zip(&u).map(|(&gi, &ui)| gi - 2.0 * ui * ug / n2).collect();
        let g_u: Vec<f64> = (0..m)
            .map(|i| -2.0 * (ug * z[i] + uz * g[i]) / n2 + 4.0 * uz * ug * u[i] / (n2 * n2))
            .collect();
        (g_z, g_u.into_iter().map(|x| -x).collect())
    };

    // z = (w, r v), r = sqrt(1 - w^2); w depends on kappa through b.
    let dz_dw = g_z[0] - w / r * dot(&g_z[1..], v);
    let den = 1.0 - (1.0 - b) * eps;
    let dw_db = -2.0 * eps * (1.0 - eps) / (den * den);
    let m1 = m as f64 - 1.0;
    let db_dk = -2.0 * b / (4.0 * kappa * kappa + m1 * m1).sqrt();
    (g_mu, dz_dw * dw_db * db_dk)
}

/// Draws one sample per row of `mu` (`[N, m]`, unit rows) with concentrations
/// `kappa` (`[N, 1]`).
pub fn vmf_sample_tape<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    mu: Var,
    kappa: Var,
    rng: &mut R,
) -> Result<Var> {
    let (n, m) = tape.shape(mu);
    if tape.shape(kappa) != (n, 1) {
        return Err(invalid("vmf_sample_tape: kappa must be [N, 1]"));
    }
    let mut out = Vec::with_capacity(n * m);
    let mut draws = Vec::with_capacity(n);
    for row in 0..n {
        let mu_r: Vec<f64> = tape.value(mu).row_slice(row).iter().map(|x| x.f64()).collect();
        let k = tape.value(kappa).data[row].f64();
        let p = VmfParams::new(mu_r, k)?;
        let d = vmf_sample(&p, rng)?;
        out.extend(d.x.iter().map(|&x| T::lit(x)));
        draws.push((d.eps, d.v));
    }
    Ok(tape.custom(&[mu, kappa], Tensor::new(n, m, out), Box::new(VmfSampleOp { draws })))
}

struct VmfKlOp {
    m: usize,
}

impl<T: Scalar> CustomOp<T> for VmfKlOp {
    fn name(&self) -> &'static str {
        "vmf_kl"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let k = inputs[0];
        let g = k
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&kk, &gg)| gg * T::lit(vmf_kl_uniform_grad(kk.f64().max(0.0), self.m)))
            .collect();
        vec![Some(Tensor::new(k.rows, 1, g))]
    }
}

/// Per-row `KL(vMF || uniform)` for concentrations `[N, 1]`.
pub fn vmf_kl_tape<T: Scalar>(tape: &mut Tape<T>, kappa: Var, m: usize) -> Result<Var> {
    let kv = tape.value(kappa);
    if kv.cols != 1 {
        return Err(invalid("vmf_kl_tape: kappa must be [N, 1]"));
    }
    if kv.data.iter().any(|k| !(k.f64() >= 0.0)) {
        return Err(invalid("vmf_kl_tape: negative concentration"));
    }
    let out = kv.map(|k| T::lit(vmf_kl_uniform(k.f64(), m)));
    Ok(tape.custom(&[kappa], out, Box::new(VmfKlOp { m })))
}
