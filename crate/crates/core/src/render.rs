//! Pinhole cameras on a sphere around the object, stratified ray sampling and
//! emission-absorption compositing.
//!
//! The camera frame is a closed-form function of the pose vector
//! `(cos a, sin a, cos b, sin b)` (altitude `a`, azimuth `b`):
//!
//! ```text
//! forward = -(cos a cos b, cos a sin b, sin a)
//! right   = (-sin b, cos b, 0)
//! up      = (-sin a cos b, -sin a sin b, cos a)
//! ```
//!
//! which is orthonormal everywhere, the poles included. Sample points are then
//! linear in the frame, so the pose can sit on the tape as an ordinary variable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ad::{Bound, CustomOp, Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::image::Image;
use crate::nerf::{Generator, Latent};
use crate::scalar::Scalar;

/// Altitude and azimuth as unit 2-vectors `(cos, sin)`, plus the camera radius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub altitude: [f64; 2],
    pub azimuth: [f64; 2],
    pub radius: f64,
}

impl CameraPose {
    pub fn from_angles(altitude: f64, azimuth: f64, radius: f64) -> Self {
        Self {
            altitude: [altitude.cos(), altitude.sin()],
            azimuth: [azimuth.cos(), azimuth.sin()],
            radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("altitude", self.altitude), ("azimuth", self.azimuth)] {
            let n = v[0].hypot(v[1]);
            if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
                return Err(invalid(format!("{name} vector has norm {n}")));
            }
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(invalid(format!("camera radius {} must be positive", self.radius)));
        }
        Ok(())
    }

    /// `(altitude, azimuth)` in radians.
    pub fn angles(&self) -> (f64, f64) {
        (
            self.altitude[1].atan2(self.altitude[0]),
            self.azimuth[1].atan2(self.azimuth[0]),
        )
    }

    /// Tape layout `[cos a, sin a, cos b, sin b]`.
    pub fn as_row<T: Scalar>(&self) -> Tensor<T> {
        Tensor::row(vec![
            T::lit(self.altitude[0]),
            T::lit(self.altitude[1]),
            T::lit(self.azimuth[0]),
            T::lit(self.azimuth[1]),
        ])
    }
}

/// Camera origin and orthonormal frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrinsics<T> {
    pub origin: [T; 3],
    pub forward: [T; 3],
    pub right: [T; 3],
    pub up: [T; 3],
}

/// Rows `forward, right, up` for a pose vector `[cos a, sin a, cos b, sin b]`.
pub fn camera_basis<T: Scalar>(p: [T; 4]) -> [[T; 3]; 3] {
    let [c1, s1, c2, s2] = p;
    let z = T::zero();
    [
        [-(c1 * c2), -(c1 * s2), -s1],
        [-s2, c2, z],
        [-(s1 * c2), -(s1 * s2), c1],
    ]
}

/// Partial derivatives of [`camera_basis`] wrt each pose component.
fn camera_basis_jacobian<T: Scalar>(p: [T; 4]) -> [[[T; 3]; 3]; 4] {
    let [c1, s1, c2, s2] = p;
    let (z, o) = (T::zero(), T::one());
    [
        [[-c2, -s2, z], [z, z, z], [z, z, o]],
        [[z, z, -o], [z, z, z], [-c2, -s2, z]],
        [[-c1, z, z], [z, o, z], [-s1, z, z]],
        [[z, -c1, z], [-o, z, z], [z, -s1, z]],
    ]
}

pub fn camera_from_pose(pose: &CameraPose) -> Extrinsics<f64> {
    let p = [pose.altitude[0], pose.altitude[1], pose.azimuth[0], pose.azimuth[1]];
    let [f, right, up] = camera_basis(p);
    Extrinsics {
        origin: [-pose.radius * f[0], -pose.radius * f[1], -pose.radius * f[2]],
        forward: f,
        right,
        up,
    }
}

/// `c0 * b[0] + c1 * b[1] + c2 * b[2]`, the one place rays are assembled.
#[inline]
fn combine<T: Scalar>(b: &[[T; 3]; 3], c: [T; 3]) -> [T; 3] {
    let mut out = [T::zero(); 3];
    for (k, o) in out.iter_mut().enumerate() {
        *o = c[0] * b[0][k] + c[1] * b[1][k] + c[2] * b[2][k];
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Vertical field of view in degrees.
    pub fov_y: f64,
    pub near: f64,
    pub far: f64,
    pub samples: usize,
    pub background: [f64; 3],
    /// Bin midpoints instead of jittered depths.
    pub deterministic: bool,
    /// Density is zero outside this ball around the origin.
    #[serde(default)]
    pub scene_radius: Option<f64>,
}

impl RenderConfig {
    pub fn for_radius(radius: f64) -> Self {
        Self {
            width: 32,
            height: 32,
            fov_y: 35.0,
            near: radius - 1.5,
            far: radius + 1.5,
            samples: 24,
            background: [1.0; 3],
            deterministic: false,
            scene_radius: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid("image size must be positive"));
        }
        if !(self.near < self.far) || self.near < 0.0 {
            return Err(invalid(format!(
                "need 0 <= near < far, got {} / {}",
                self.near, self.far
            )));
        }
        if self.samples == 0 {
            return Err(invalid("samples per ray must be >= 1"));
        }
        if !(self.fov_y > 0.0 && self.fov_y < 180.0) {
            return Err(invalid(format!("fov {} out of range", self.fov_y)));
        }
        if self.scene_radius.is_some_and(|r| !(r > 0.0)) {
            return Err(invalid("scene radius must be positive"));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Image-plane offsets `(a, b)` of a pixel centre along `right` and `up`
    /// at unit distance.
    pub fn pixel_offset(&self, pixel: usize) -> (f64, f64) {
        let (i, j) = (pixel / self.width, pixel % self.width);
        let t = (self.fov_y.to_radians() * 0.5).tan();
        let aspect = self.width as f64 / self.height as f64;
        let a = (2.0 * (j as f64 + 0.5) / self.width as f64 - 1.0) * t * aspect;
        let b = (1.0 - 2.0 * (i as f64 + 0.5) / self.height as f64) * t;
        (a, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T> {
    pub origin: [T; 3],
    pub direction: [T; 3],
}

fn direction_coef<T: Scalar>(a: f64, b: f64) -> [T; 3] {
    let k = 1.0 / (1.0 + a * a + b * b).sqrt();
    [T::lit(k), T::lit(k * a), T::lit(k * b)]
}

/// Pinhole rays for every pixel, row-major from the top-left.
pub fn generate_rays(ext: &Extrinsics<f64>, cfg: &RenderConfig) -> Vec<Ray<f64>> {
    let basis = [ext.forward, ext.right, ext.up];
    (0..cfg.pixels())
        .map(|p| {
            let (a, b) = cfg.pixel_offset(p);
            Ray {
                origin: ext.origin,
                direction: combine(&basis, direction_coef(a, b)),
            }
        })
        .collect()
}

/// Depths `t_1 < ... < t_M` (one per equal-width bin) and gaps, with the last
/// gap running to `far`.
pub fn stratify_samples<T: Scalar, R: Rng + ?Sized>(
    near: T,
    far: T,
    m: usize,
    rng: &mut R,
    deterministic: bool,
) -> (Vec<T>, Vec<T>) {
    let width = (far - near) / T::lit(m as f64);
    let half = T::lit(0.5);
    let t: Vec<T> = (0..m)
        .map(|i| {
            let u = if deterministic {
                half
            } else {
                T::lit(rng.random::<f64>())
            };
            near + (T::lit(i as f64) + u) * width
        })
        .collect();
    (t.clone(), gaps(&t, far))
}

fn gaps<T: Scalar>(t: &[T], far: T) -> Vec<T> {
    let m = t.len();
    (0..m)
        .map(|i| if i + 1 < m { t[i + 1] - t[i] } else { far - t[i] })
        .collect()
}

/// Per-ray depth stream: seeded by `seed`, stream selected by pixel index.
pub fn ray_depths<T: Scalar>(cfg: &RenderConfig, seed: u64, pixel: usize) -> (Vec<T>, Vec<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel as u64);
    stratify_samples(
        T::lit(cfg.near),
        T::lit(cfg.far),
        cfg.samples,
        &mut rng,
        cfg.deterministic,
    )
}

/// Sample points for a set of pixels. Depths are row-major `[pixels, M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBundle<T> {
    pub pixels: Vec<usize>,
    pub samples: usize,
    pub depths: Vec<T>,
    pub gaps: Vec<T>,
    /// Per pixel `(k, k a, k b)`: the direction in the camera frame.
    dir_coef: Vec<[T; 3]>,
}

impl<T: Scalar> RayBundle<T> {
    pub fn new(cfg: &RenderConfig, pixels: &[usize], seed: u64) -> Self {
        let mut depths = Vec::with_capacity(pixels.len() * cfg.samples);
        let mut gaps = Vec::with_capacity(pixels.len() * cfg.samples);
        let mut dir_coef = Vec::with_capacity(pixels.len());
        for &p in pixels {
            let (t, d) = ray_depths::<T>(cfg, seed, p);
            depths.extend(t);
            gaps.extend(d);
            let (a, b) = cfg.pixel_offset(p);
            dir_coef.push(direction_coef(a, b));
        }
        Self {
            pixels: pixels.to_vec(),
            samples: cfg.samples,
            depths,
            gaps,
            dir_coef,
        }
    }

    pub fn rays(&self) -> usize {
        self.pixels.len()
    }

    /// Camera-frame coefficients of the sample point `o + t d` and of `d`.
    fn coefs(&self, radius: T, ray: usize, s: usize) -> ([T; 3], [T; 3]) {
        let dc = self.dir_coef[ray];
        let t = self.depths[ray * self.samples + s];
        ([t * dc[0] - radius, t * dc[1], t * dc[2]], dc)
    }

    /// World-space point and direction of one sample.
    pub fn sample_point(&self, pose: [T; 4], radius: T, ray: usize, s: usize) -> ([T; 3], [T; 3]) {
        let b = camera_basis(pose);
        let (pc, dc) = self.coefs(radius, ray, s);
        (combine(&b, pc), combine(&b, dc))
    }

    /// `[pixels * M, 6]`: point then direction per sample.
    fn geometry(&self, pose: [T; 4], radius: T) -> Tensor<T> {
        let b = camera_basis(pose);
        let n = self.rays() * self.samples;
        let mut out = Vec::with_capacity(n * 6);
        for r in 0..self.rays() {
            for s in 0..self.samples {
                let (pc, dc) = self.coefs(radius, r, s);
                out.extend(combine(&b, pc));
                out.extend(combine(&b, dc));
            }
        }
        Tensor::new(n, 6, out)
    }
}

struct RayGeometryOp<T> {
    coefs: Vec<([T; 3], [T; 3])>,
}

impl<T: Scalar> CustomOp<T> for RayGeometryOp<T> {
    fn name(&self) -> &'static str {
        "ray_geometry"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        // d(out)/d(basis) is the outer product of the coefficients with the
        // incoming gradient, summed over samples.
        let mut gb = [[T::zero(); 3]; 3];
        for (i, (pc, dc)) in self.coefs.iter().enumerate() {
            let g = grad.row_slice(i);
            for r in 0..3 {
                for c in 0..3 {
                    gb[r][c] += pc[r] * g[c] + dc[r] * g[3 + c];
                }
            }
        }
        let p = &inputs[0].data;
        let jac = camera_basis_jacobian([p[0], p[1], p[2], p[3]]);
        let gp = jac
            .iter()
            .map(|d| {
                let mut s = T::zero();
                for r in 0..3 {
                    for c in 0..3 {
                        s += gb[r][c] * d[r][c];
                    }
                }
                s
            })
            .collect();
        vec![Some(Tensor::row(gp))]
    }
}

/// Result of compositing a single ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite<T> {
    pub color: [T; 3],
    pub depth: T,
    pub alpha: T,
    pub weights: Vec<T>,
    /// `T_1 .. T_{M+1}`.
    pub transmittance: Vec<T>,
}

/// Emission-absorption compositing of one ray.
pub fn composite<T: Scalar>(
    colors: &[[T; 3]],
    sigmas: &[T],
    depths: &[T],
    gaps: &[T],
    background: [T; 3],
) -> Result<Composite<T>> {
    let m = sigmas.len();
    if colors.len() != m || depths.len() != m || gaps.len() != m {
        return Err(invalid("composite: mismatched sample counts"));
    }
    let mut trans = Vec::with_capacity(m + 1);
    let mut weights = Vec::with_capacity(m);
    let mut tr = T::one();
    trans.push(tr);
    let (mut color, mut depth, mut acc) = ([T::zero(); 3], T::zero(), T::zero());
    for i in 0..m {
        let (s, d) = (sigmas[i], gaps[i]);
        if !(s >= T::zero()) || !(d >= T::zero()) {
            return Err(invalid(format!("composite: negative or NaN density/gap at sample {i}")));
        }
        let x = s * d;
        let w = tr * -(-x).exp_m1();
        tr *= (-x).exp();
        trans.push(tr);
        weights.push(w);
        for k in 0..3 {
            color[k] += w * colors[i][k];
        }
        depth += w * depths[i];
        acc += w;
    }
    let rest = T::one() - acc;
    for k in 0..3 {
        color[k] += rest * background[k];
    }
    Ok(Composite {
        color,
        depth,
        alpha: acc,
        weights,
        transmittance: trans,
    })
}

struct CompositeOp<T> {
    depths: Vec<T>,
    gaps: Vec<T>,
    samples: usize,
    background: [T; 3],
}

impl<T: Scalar> CompositeOp<T> {
    fn forward(&self, rgb: &Tensor<T>, sigma: &Tensor<T>) -> Result<Tensor<T>> {
        let m = self.samples;
        let rays = sigma.rows / m;
        let mut out = Vec::with_capacity(rays * 5);
        let mut colors = Vec::with_capacity(m);
        for r in 0..rays {
            colors.clear();
            colors.extend((0..m).map(|s| {
                let c = rgb.row_slice(r * m + s);
                [c[0], c[1], c[2]]
            }));
            let span = r * m..(r + 1) * m;
            let c = composite(
                &colors,
                &sigma.data[span.clone()],
                &self.depths[span.clone()],
                &self.gaps[span],
                self.background,
            )?;
            out.extend(c.color);
            out.push(c.depth);
            out.push(c.alpha);
        }
        Ok(Tensor::new(rays, 5, out))
    }
}

impl<T: Scalar> CustomOp<T> for CompositeOp<T> {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (rgb, sigma) = (inputs[0], inputs[1]);
        let m = self.samples;
        let rays = sigma.rows / m;
        let mut g_rgb = Tensor::zeros(rgb.rows, 3);
        let mut g_sigma = Tensor::zeros(sigma.rows, 1);
        let mut w = vec![T::zero(); m];
        let mut tr = vec![T::zero(); m + 1];
        let mut y = vec![T::zero(); m];
        for r in 0..rays {
            let g = grad.row_slice(r);
            let base = r * m;
            let mut t = T::one();
            tr[0] = t;
            for s in 0..m {
                let x = sigma.data[base + s] * self.gaps[base + s];
                w[s] = t * -(-x).exp_m1();
                t *= (-x).exp();
                tr[s + 1] = t;
                let c = rgb.row_slice(base + s);
                // Each output channel is sum_i w_i y_i + T_{M+1} y_bg; fold the
                // incoming gradient into a single per-sample value.
                y[s] = g[0] * c[0] + g[1] * c[1] + g[2] * c[2] + g[3] * self.depths[base + s] + g[4];
                for k in 0..3 {
                    g_rgb.data[(base + s) * 3 + k] = w[s] * g[k];
                }
            }
            let bg = g[0] * self.background[0] + g[1] * self.background[1] + g[2] * self.background[2];
            let mut suffix = tr[m] * bg;
            for s in (0..m).rev() {
                g_sigma.data[base + s] = self.gaps[base + s] * (tr[s + 1] * y[s] - suffix);
                suffix += w[s] * y[s];
            }
        }
        vec![Some(g_rgb), Some(g_sigma)]
    }
}

/// Where the camera pose comes from.
#[derive(Clone, Copy, Debug)]
pub enum PoseInput {
    Fixed(CameraPose),
    /// A `1 x 4` tape variable `[cos a, sin a, cos b, sin b]`.
    Var {
        var: Var,
        radius: f64,
    },
}

/// Renders `pixels` on the tape. Returns `[pixels, 5]`: rgb, expected depth, alpha.
#[allow(clippy::too_many_arguments)]
pub fn render_rays<T: Scalar>(
    gen: &Generator<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    z_s: Var,
    z_a: Var,
    pose: PoseInput,
    cfg: &RenderConfig,
    pixels: &[usize],
    seed: u64,
) -> Result<Var> {
    let bundle = RayBundle::new(cfg, pixels, seed);
    render_bundle(gen, tape, bound, z_s, z_a, pose, cfg, &bundle)
}

#[allow(clippy::too_many_arguments)]
pub fn render_bundle<T: Scalar>(
    gen: &Generator<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    z_s: Var,
    z_a: Var,
    pose: PoseInput,
    cfg: &RenderConfig,
    bundle: &RayBundle<T>,
) -> Result<Var> {
    let (pose_var, radius) = match pose {
        PoseInput::Fixed(p) => {
            p.validate()?;
            (tape.constant(p.as_row()), p.radius)
        }
        PoseInput::Var { var, radius } => {
            if tape.shape(var) != (1, 4) {
                return Err(invalid(format!(
                    "pose variable has shape {:?}, want (1, 4)",
                    tape.shape(var)
                )));
            }
            (var, radius)
        }
    };
    let radius = T::lit(radius);
    let pv = tape.value(pose_var).data.clone();
    let pose4 = [pv[0], pv[1], pv[2], pv[3]];

    let w_s = gen.mapping_forward(tape, bound, Latent::Shape, z_s)?;
    let w_a = gen.mapping_forward(tape, bound, Latent::Appearance, z_a)?;

    let geo_val = bundle.geometry(pose4, radius);
    let coefs = (0..bundle.rays())
        .flat_map(|r| (0..bundle.samples).map(move |s| (r, s)))
        .map(|(r, s)| bundle.coefs(radius, r, s))
        .collect();
    let geo = tape.custom(&[pose_var], geo_val, Box::new(RayGeometryOp { coefs }));
    let pts = tape.slice_cols(geo, 0, 3)?;
    let dirs = tape.slice_cols(geo, 3, 3)?;
    let pe = tape.positional_encode(pts, gen.config.pos_freqs);
    let de = tape.positional_encode(dirs, gen.config.dir_freqs);
    let (rgb, mut sigma) = gen.field_forward(tape, bound, pe, de, w_s, w_a)?;
    if let Some(rb) = cfg.scene_radius {
        // piecewise constant in the sample positions, so gradients stay exact almost everywhere
        let p = tape.value(pts);
        let inside = (0..p.rows)
            .map(|r| {
                let n2 = p.row_slice(r).iter().fold(0.0, |a, v| a + v.f64() * v.f64());
                if n2 <= rb * rb {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect();
        let mask = tape.constant(Tensor::new(p.rows, 1, inside));
        sigma = tape.mul(sigma, mask)?;
    }

    let op = CompositeOp {
        depths: bundle.depths.clone(),
        gaps: bundle.gaps.clone(),
        samples: bundle.samples,
        background: cfg.background.map(T::lit),
    };
    let out = op.forward(tape.value(rgb), tape.value(sigma))?;
    Ok(tape.custom(&[rgb, sigma], out, Box::new(op)))
}

/// A rendered view: colour, expected depth and opacity per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Rendered {
    pub fn from_rows<T: Scalar>(cfg: &RenderConfig, rows: &Tensor<T>) -> Self {
        let n = rows.rows;
        let mut rgb = Vec::with_capacity(n * 3);
        let mut depth = Vec::with_capacity(n);
        let mut alpha = Vec::with_capacity(n);
        for r in 0..n {
            let v = rows.row_slice(r);
            rgb.extend(v[..3].iter().map(|x| x.f64()));
            depth.push(v[3].f64());
            alpha.push(v[4].f64());
        }
        Self {
            width: cfg.width,
            height: cfg.height,
            rgb,
            depth,
            alpha,
        }
    }

    pub fn image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.rgb.clone(),
        }
    }

    /// `1 / depth`, where the transparent share of each ray counts as lying at `far`.
    pub fn inverse_depth(&self, far: f64) -> Vec<f64> {
        self.depth
            .iter()
            .zip(&self.alpha)
            .map(|(d, a)| 1.0 / (d + (1.0 - a).max(0.0) * far).max(1e-6))
            .collect()
    }

    pub fn inverse_depth_image(&self, far: f64) -> Image {
        Image::normalized_gray(self.width, self.height, &self.inverse_depth(far)).to_rgb()
    }
}

const RENDER_CHUNK: usize = 128;

/// Gradient-free render of a full image, chunked over rays. Chunks run in
/// parallel; each ray's samples depend only on `(seed, pixel)`, so the result
/// is independent of the thread count.
pub fn render_image<T: Scalar>(
    gen: &Generator<T>,
    z_s: &[T],
    z_a: &[T],
    pose: &CameraPose,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<Rendered> {
    cfg.validate()?;
    pose.validate()?;
    let pixels: Vec<usize> = (0..cfg.pixels()).collect();
    let chunks: Vec<Result<Tensor<T>>> = pixels
        .par_chunks(RENDER_CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new();
            let bound = gen.params.bind(&mut tape, false);
            let zs = tape.constant(Tensor::row(z_s.to_vec()));
            let za = tape.constant(Tensor::row(z_a.to_vec()));
            let out = render_rays(
                gen,
                &mut tape,
                &bound,
                zs,
                za,
                PoseInput::Fixed(*pose),
                cfg,
                chunk,
                seed,
            )?;
            Ok(tape.value(out).clone())
        })
        .collect();
    let parts = chunks.into_iter().collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(Rendered::from_rows(cfg, &Tensor::vstack(&refs)))
}

/// Reference per-ray loop over single-point field evaluations.
pub fn render_image_looped<T: Scalar>(
    gen: &Generator<T>,
    z_s: &[T],
    z_a: &[T],
    pose: &CameraPose,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<Rendered> {
    let pixels: Vec<usize> = (0..cfg.pixels()).collect();
    let bundle = RayBundle::<T>::new(cfg, &pixels, seed);
    let pose4 = pose.as_row::<T>().data;
    let pose4 = [pose4[0], pose4[1], pose4[2], pose4[3]];
    let radius = T::lit(pose.radius);
    let mut rows = Vec::with_capacity(pixels.len() * 5);
    for r in 0..pixels.len() {
        let mut colors = Vec::with_capacity(cfg.samples);
        let mut sigmas = Vec::with_capacity(cfg.samples);
        for s in 0..cfg.samples {
            let (x, d) = bundle.sample_point(pose4, radius, r, s);
            let out = gen.nerf_forward(x, d, z_s, z_a)?;
            let n2 = x.iter().fold(0.0, |a, v| a + v.f64() * v.f64());
            let inside = cfg.scene_radius.is_none_or(|rb| n2 <= rb * rb);
            colors.push(out.color);
            sigmas.push(if inside { out.density } else { out.density * T::zero() });
        }
        let span = r * cfg.samples..(r + 1) * cfg.samples;
        let c = composite(
            &colors,
            &sigmas,
            &bundle.depths[span.clone()],
            &bundle.gaps[span],
            cfg.background.map(T::lit),
        )?;
        rows.extend(c.color);
        rows.extend([c.depth, c.alpha]);
    }
    Ok(Rendered::from_rows(cfg, &Tensor::new(pixels.len(), 5, rows)))
}
