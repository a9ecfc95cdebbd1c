//! Procedural multiview dataset: flat-shaded spheres, boxes and two-primitive
//! unions inside the unit ball, rendered analytically with the same camera
//! model as the radiance-field renderer.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{to_u8, Image};
use crate::render::{camera_from_pose, generate_rays, CameraPose, Ray, RenderConfig};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SIZE_RANGE: (f64, f64) = (0.2, 0.6);

const LIGHT: [f64; 3] = [0.4, 0.25, 0.88];
const AMBIENT: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Box,
    Union,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half: [f64; 3] },
}

impl Primitive {
    /// Radius of the smallest origin-centred ball containing the primitive.
    fn extent(&self) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => norm(center) + radius,
            Primitive::Box { center, half } => norm(center) + norm(half),
        }
    }

    /// Nearest entry distance along the ray and the outward normal there.
    fn intersect(&self, ray: &Ray<f64>) -> Option<(f64, [f64; 3])> {
        let (o, d) = (ray.origin, ray.direction);
        match *self {
            Primitive::Sphere { center, radius } => {
                let oc = sub(o, center);
                let b = dot(oc, d);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                if t <= 0.0 {
                    return None;
                }
                let p = add(o, scale(d, t));
                Some((t, scale(sub(p, center), 1.0 / radius)))
            }
            Primitive::Box { center, half } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                let mut sign = 1.0;
                for k in 0..3 {
                    let lo = center[k] - half[k] - o[k];
                    let hi = center[k] + half[k] - o[k];
                    if d[k].abs() < 1e-15 {
                        if lo > 0.0 || hi < 0.0 {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = (lo / d[k], hi / d[k]);
                    let (near, far) = if a < b { (a, b) } else { (b, a) };
                    if near > t0 {
                        t0 = near;
                        axis = k;
                        sign = if d[k] > 0.0 { -1.0 } else { 1.0 };
                    }
                    t1 = t1.min(far);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis] = sign;
                Some((t0, n))
            }
        }
    }
}

/// Shape factors (kind, sizes, offsets) and appearance factors (colours).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub primitives: Vec<Primitive>,
    pub base_color: [f64; 3],
    pub colors: Vec<[f64; 3]>,
}

impl SceneObject {
    /// The shape factors, flattened.
    pub fn shape_factors(&self) -> Vec<f64> {
        self.primitives
            .iter()
            .flat_map(|p| match *p {
                Primitive::Sphere { center, radius } => [center.as_slice(), &[radius]].concat(),
                Primitive::Box { center, half } => [center.as_slice(), half.as_slice()].concat(),
            })
            .collect()
    }

    pub fn extent(&self) -> f64 {
        self.primitives.iter().map(Primitive::extent).fold(0.0, f64::max)
    }

    pub fn sizes(&self) -> Vec<f64> {
        self.primitives
            .iter()
            .flat_map(|p| match *p {
                Primitive::Sphere { radius, .. } => vec![radius],
                Primitive::Box { half, .. } => half.to_vec(),
            })
            .collect()
    }
}

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.2, 0.15],
    [0.15, 0.55, 0.85],
    [0.2, 0.7, 0.25],
    [0.9, 0.75, 0.1],
    [0.6, 0.25, 0.75],
    [0.95, 0.5, 0.1],
    [0.1, 0.65, 0.6],
    [0.35, 0.35, 0.4],
];

fn jitter<R: Rng + ?Sized>(c: [f64; 3], amount: f64, rng: &mut R) -> [f64; 3] {
    c.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn sample_size<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(SIZE_RANGE.0..=SIZE_RANGE.1)
}

fn sample_primitive<R: Rng + ?Sized>(rng: &mut R, center: [f64; 3], room: f64, sphere: bool) -> Primitive {
    // rejection keeps every size inside the declared range and the primitive inside the ball
    loop {
        let p = if sphere {
            Primitive::Sphere {
                center,
                radius: sample_size(rng),
            }
        } else {
            Primitive::Box {
                center,
                half: [sample_size(rng), sample_size(rng), sample_size(rng)],
            }
        };
        if p.extent() <= room {
            return p;
        }
    }
}

pub fn sample_object<R: Rng + ?Sized>(rng: &mut R) -> SceneObject {
    let kind = match rng.random_range(0..3) {
        0 => ShapeKind::Sphere,
        1 => ShapeKind::Box,
        _ => ShapeKind::Union,
    };
    let primitives = match kind {
        ShapeKind::Sphere => vec![sample_primitive(rng, [0.0; 3], 1.0, true)],
        ShapeKind::Box => vec![sample_primitive(rng, [0.0; 3], 1.0, false)],
        ShapeKind::Union => {
            // two primitives displaced in opposite horizontal directions
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let r = rng.random_range(0.2..0.4);
            let c = [r * phi.cos(), r * phi.sin(), rng.random_range(-0.1..0.1)];
            let first_sphere = rng.random_bool(0.5);
            let second_sphere = rng.random_bool(0.5);
            vec![
                sample_primitive(rng, c, 1.0, first_sphere),
                sample_primitive(rng, scale(c, -1.0), 1.0, second_sphere),
            ]
        }
    };
    let base = jitter(PALETTE[rng.random_range(0..PALETTE.len())], 0.1, rng);
    let colors = (0..primitives.len())
        .map(|i| {
            if i == 0 {
                base
            } else {
                jitter(PALETTE[rng.random_range(0..PALETTE.len())], 0.1, rng)
            }
        })
        .collect();
    SceneObject {
        kind,
        primitives,
        base_color: base,
        colors,
    }
}

/// Closest hit along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trace {
    pub color: [f64; 3],
    pub depth: f64,
    pub hit: bool,
}

/// Flat Lambert shading with one fixed directional light; `background` on a miss.
pub fn trace_reference(obj: &SceneObject, ray: &Ray<f64>, background: [f64; 3]) -> Trace {
    let light = scale(LIGHT, 1.0 / norm(LIGHT));
    let best = obj
        .primitives
        .iter()
        .zip(&obj.colors)
        .filter_map(|(p, c)| p.intersect(ray).map(|(t, n)| (t, n, c)))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    match best {
        Some((t, n, c)) => {
            let shade = AMBIENT + (1.0 - AMBIENT) * dot(n, light).max(0.0);
            Trace {
                color: c.map(|v| (v * shade).clamp(0.0, 1.0)),
                depth: t,
                hit: true,
            }
        }
        None => Trace {
            color: background,
            depth: f64::INFINITY,
            hit: false,
        },
    }
}

/// Full-resolution reference render plus the hit bitmap.
pub fn render_reference(obj: &SceneObject, pose: &CameraPose, cfg: &RenderConfig) -> (Image, Vec<bool>) {
    let rays = generate_rays(&camera_from_pose(pose), cfg);
    let mut data = Vec::with_capacity(rays.len() * 3);
    let mut hits = Vec::with_capacity(rays.len());
    for r in &rays {
        let t = trace_reference(obj, r, cfg.background);
        data.extend(t.color);
        hits.push(t.hit);
    }
    (Image::new(cfg.width, cfg.height, 3, data).expect("sized"), hits)
}

/// Axis-aligned pixel rectangle `[x, y, w, h]`.
pub type Rect = [usize; 4];

/// Replaces `rect` with Gaussian noise (mean 0.5, sd 0.3) clipped to `[0, 1]`.
pub fn mask_rect<R: Rng + ?Sized>(img: &Image, rect: Rect, rng: &mut R) -> (Image, Vec<bool>) {
    let [x0, y0, w, h] = rect;
    let noise = Normal::<f64>::new(0.5, 0.3).expect("valid");
    let mut out = img.clone();
    let mut mask = vec![false; img.pixels()];
    for y in y0..(y0 + h).min(img.height) {
        for x in x0..(x0 + w).min(img.width) {
            let p = y * img.width + x;
            mask[p] = true;
            for c in 0..img.channels {
                out.data[p * img.channels + c] = Distribution::<f64>::sample(&noise, rng).clamp(0.0, 1.0);
            }
        }
    }
    (out, mask)
}

/// A random rectangle covering a fraction of the image within `range`.
pub fn sample_rect<R: Rng + ?Sized>(width: usize, height: usize, range: (f64, f64), rng: &mut R) -> Result<Rect> {
    let n = (width * height) as f64;
    for _ in 0..10_000 {
        let f = rng.random_range(range.0..=range.1);
        let aspect: f64 = rng.random_range(0.5f64..2.0);
        let w = ((f * n * aspect).sqrt().round() as usize).clamp(1, width);
        let h = ((f * n / w as f64).round() as usize).clamp(1, height);
        let got = (w * h) as f64 / n;
        if got >= range.0 && got <= range.1 {
            return Ok([rng.random_range(0..=width - w), rng.random_range(0..=height - h), w, h]);
        }
    }
    Err(invalid(format!(
        "no rectangle covers {range:?} of a {width}x{height} image"
    )))
}

pub fn apply_mask<R: Rng + ?Sized>(img: &Image, range: (f64, f64), rng: &mut R) -> Result<(Image, Vec<bool>, Rect)> {
    let rect = sample_rect(img.width, img.height, range, rng)?;
    let (out, mask) = mask_rect(img, rect, rng);
    Ok((out, mask, rect))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub objects: usize,
    /// Training views per object.
    pub views: usize,
    /// Extra held-out views per object.
    pub holdout_views: usize,
    pub resolution: usize,
    pub radius: f64,
    pub fov_y: f64,
    /// Degrees.
    pub altitude: (f64, f64),
    /// Degrees.
    pub azimuth: (f64, f64),
    pub seed: u64,
    pub mask: Option<(f64, f64)>,
    pub background: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            objects: 8,
            views: 8,
            holdout_views: 1,
            resolution: 32,
            radius: 3.0,
            fov_y: 40.0,
            altitude: (10.0, 40.0),
            azimuth: (0.0, 360.0),
            seed: 0,
            mask: None,
            background: [1.0; 3],
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects == 0 || self.views == 0 || self.resolution == 0 {
            return Err(invalid("dataset needs objects, views and a resolution"));
        }
        if !(self.radius > 1.5) || !(self.fov_y > 0.0 && self.fov_y < 180.0) {
            return Err(invalid("camera radius must exceed 1.5 and fov lie in (0, 180)"));
        }
        if self.altitude.0 > self.altitude.1 || self.azimuth.0 > self.azimuth.1 {
            return Err(invalid("empty pose range"));
        }
        if let Some((lo, hi)) = self.mask {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(invalid("mask fraction range must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Camera settings shared with the model renderer.
    pub fn render_config(&self) -> RenderConfig {
        let mut r = RenderConfig::for_radius(self.radius);
        r.width = self.resolution;
        r.height = self.resolution;
        r.fov_y = self.fov_y;
        r.background = self.background;
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    pub object: u64,
    pub view: usize,
    pub holdout: bool,
    /// Radians.
    pub altitude: f64,
    /// Radians.
    pub azimuth: f64,
    pub mask: Option<Rect>,
    pub mask_file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub near: f64,
    pub far: f64,
    pub objects: Vec<SceneObject>,
    pub records: Vec<ManifestRecord>,
}

fn stream_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(tag);
    r
}

fn object_rng(seed: u64, object: u64) -> ChaCha8Rng {
    stream_rng(seed, object << 20)
}

fn view_rng(seed: u64, object: u64, view: usize) -> ChaCha8Rng {
    stream_rng(seed, (object << 20) | (1 << 19) | view as u64)
}

fn sample_pose<R: Rng + ?Sized>(cfg: &DatasetConfig, rng: &mut R) -> (f64, f64) {
    let pick = |(lo, hi): (f64, f64), rng: &mut R| if hi > lo { rng.random_range(lo..hi) } else { lo };
    (
        pick(cfg.altitude, rng).to_radians(),
        pick(cfg.azimuth, rng).to_radians(),
    )
}

/// Pixel values after an 8-bit round trip.
pub fn quantize(img: &Image) -> Image {
    Image {
        data: img.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
        ..img.clone()
    }
}

/// One observation, as used for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub object: u64,
    pub view: usize,
    pub holdout: bool,
    pub pose: CameraPose,
    pub image: Image,
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn render_config(&self) -> RenderConfig {
        self.manifest.config.render_config()
    }

    pub fn training(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| !r.holdout)
    }

    pub fn object_ids(&self) -> Vec<u64> {
        (0..self.manifest.objects.len() as u64).collect()
    }

    /// Training views of one object.
    pub fn views_of(&self, object: u64) -> Vec<&Record> {
        self.training().filter(|r| r.object == object).collect()
    }

    /// The unmasked image behind a record.
    pub fn ground_truth(&self, rec: &Record) -> Image {
        let obj = &self.manifest.objects[rec.object as usize];
        quantize(&render_reference(obj, &rec.pose, &self.render_config()).0)
    }
}

impl ManifestRecord {
    pub fn pose(&self, radius: f64) -> CameraPose {
        CameraPose::from_angles(self.altitude, self.azimuth, radius)
    }
}

/// Regenerates one record's stored image (and mask) from the manifest.
pub fn render_record(manifest: &Manifest, rec: &ManifestRecord) -> Result<(Image, Option<Vec<bool>>)> {
    let cfg = &manifest.config;
    let obj = manifest
        .objects
        .get(rec.object as usize)
        .ok_or_else(|| invalid(format!("record refers to unknown object {}", rec.object)))?;
    let (img, _) = render_reference(obj, &rec.pose(cfg.radius), &cfg.render_config());
    let img = quantize(&img);
    match rec.mask {
        Some(rect) => {
            // replay the generator's draws: pose, rectangle, noise
            let mut rng = view_rng(cfg.seed, rec.object, rec.view);
            sample_pose(cfg, &mut rng);
            let range = cfg
                .mask
                .ok_or_else(|| invalid("masked record in an unmasked dataset"))?;
            if sample_rect(img.width, img.height, range, &mut rng)? != rect {
                return Err(invalid(format!(
                    "mask rectangle of {} does not match its seed",
                    rec.file
                )));
            }
            let (m, bits) = mask_rect(&img, rect, &mut rng);
            Ok((quantize(&m), Some(bits)))
        }
        None => Ok((img, None)),
    }
}

/// Builds the manifest and all images in memory.
pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let objects: Vec<SceneObject> = (0..cfg.objects as u64)
        .map(|o| sample_object(&mut object_rng(cfg.seed, o)))
        .collect();
    let rc = cfg.render_config();
    let total_views = cfg.views + cfg.holdout_views;
    let jobs: Vec<(u64, usize)> = (0..cfg.objects as u64)
        .flat_map(|o| (0..total_views).map(move |v| (o, v)))
        .collect();
    let made: Vec<Result<(ManifestRecord, Record)>> = jobs
        .par_iter()
        .map(|&(o, v)| {
            let mut rng = view_rng(cfg.seed, o, v);
            let (alt, az) = sample_pose(cfg, &mut rng);
            let pose = CameraPose::from_angles(alt, az, cfg.radius);
            let holdout = v >= cfg.views;
            let (img, _) = render_reference(&objects[o as usize], &pose, &rc);
            let img = quantize(&img);
            let (image, mask, rect) = match cfg.mask.filter(|_| !holdout) {
                Some(range) => {
                    let rect = sample_rect(img.width, img.height, range, &mut rng)?;
                    let (m, bits) = mask_rect(&img, rect, &mut rng);
                    (quantize(&m), Some(bits), Some(rect))
                }
                None => (img, None, None),
            };
            let name = format!("{o:04}_{v:02}.png");
            let mr = ManifestRecord {
                file: format!("images/{name}"),
                object: o,
                view: v,
                holdout,
                altitude: alt,
                azimuth: az,
                mask: rect,
                mask_file: rect.map(|_| format!("masks/{name}")),
            };
            let rec = Record {
                object: o,
                view: v,
                holdout,
                pose,
                image,
                mask,
            };
            Ok((mr, rec))
        })
        .collect();
    let (records, recs): (Vec<_>, Vec<_>) = made.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    Ok(Dataset {
        manifest: Manifest {
            version: MANIFEST_VERSION,
            config: cfg.clone(),
            near: rc.near,
            far: rc.far,
            objects,
            records,
        },
        records: recs,
    })
}

fn mask_image(mask: &[bool], w: usize, h: usize) -> Image {
    Image::new(w, h, 1, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()).expect("sized")
}

/// Writes `images/`, `masks/` and the manifest under `dir`.
pub fn gen_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<Dataset> {
    let ds = generate(cfg)?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    ds.manifest
        .records
        .par_iter()
        .zip(&ds.records)
        .try_for_each(|(mr, rec)| -> Result<()> {
            rec.image.save_png(&dir.join(&mr.file))?;
            if let (Some(f), Some(m)) = (&mr.mask_file, &rec.mask) {
                mask_image(m, rec.image.width, rec.image.height).save_png(&dir.join(f))?;
            }
            Ok(())
        })?;
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&ds.manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(ds)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.version > MANIFEST_VERSION {
        return Err(Error::Version {
            found: m.version,
            supported: MANIFEST_VERSION,
        });
    }
    Ok(m)
}

/// Reads a dataset written by [`gen_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let cfg = &manifest.config;
    let records = manifest
        .records
        .iter()
        .map(|mr| {
            let image = Image::load_png(&dir.join(&mr.file))?.to_rgb();
            if image.width != cfg.resolution || image.height != cfg.resolution {
                return Err(invalid(format!(
                    "{} is not {}x{}",
                    mr.file, cfg.resolution, cfg.resolution
                )));
            }
            let mask = match &mr.mask_file {
                Some(f) => Some(Image::load_png(&dir.join(f))?.data.iter().map(|&v| v > 0.5).collect()),
                None => None,
            };
            Ok(Record {
                object: mr.object,
                view: mr.view,
                holdout: mr.holdout,
                pose: mr.pose(cfg.radius),
                image,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, records })
}

pub fn image_paths(dir: &Path, m: &Manifest) -> Vec<PathBuf> {
    m.records.iter().map(|r| dir.join(&r.file)).collect()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    a.map(|v| v * s)
}

#[cfg(test)]
mod tests;
