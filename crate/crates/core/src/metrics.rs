//! Image metrics and montage export.

use std::path::Path;

use rand::Rng;

use crate::ad::Tensor;
use crate::error::{invalid, Result};
use crate::image::Image;
use crate::render::{render_image, CameraPose, Rendered};
use crate::scalar::Scalar;
use crate::trainer::Trainer;

/// Reported for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(invalid(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len().max(1) as f64)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    }
}

/// `10 log10(peak^2 / MSE)`, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

/// PSNR over the pixels where `select` is true.
pub fn psnr_masked(a: &Image, b: &Image, select: &[bool], peak: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if select.len() != a.pixels() {
        return Err(invalid("selection length differs from pixel count"));
    }
    let c = a.channels;
    let (mut s, mut n) = (0.0, 0usize);
    for p in (0..a.pixels()).filter(|&p| select[p]) {
        for k in 0..c {
            s += (a.data[p * c + k] - b.data[p * c + k]).powi(2);
        }
        n += c;
    }
    if n == 0 {
        return Err(invalid("empty pixel selection"));
    }
    Ok(psnr_from_mse(s / n as f64, peak))
}

/// Gutter between montage tiles, in pixels.
pub const GUTTER: usize = 2;

/// Tiles `images` row-major into a `rows x cols` grid on a white background.
/// A single tile is returned as is.
pub fn montage(images: &[Image], rows: usize, cols: usize) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| invalid("montage needs at least one image"))?;
    if rows * cols < images.len() {
        return Err(invalid(format!(
            "{rows}x{cols} grid cannot hold {} images",
            images.len()
        )));
    }
    let (w, h) = (first.width, first.height);
    let imgs: Vec<Image> = images
        .iter()
        .map(|i| {
            if (i.width, i.height) != (w, h) {
                return Err(invalid("montage tiles must share a size"));
            }
            Ok(if i.channels == 3 { i.clone() } else { i.to_rgb() })
        })
        .collect::<Result<_>>()?;
    if rows == 1 && cols == 1 {
        return Ok(imgs[0].clone());
    }
    let (tw, th) = (w + GUTTER, h + GUTTER);
    let mut out = Image::filled(cols * tw, rows * th, 3, 1.0);
    for (k, img) in imgs.iter().enumerate() {
        let (i, j) = (k / cols, k % cols);
        for y in 0..h {
            let dst = ((i * th + y) * out.width + j * tw) * 3;
            out.data[dst..dst + w * 3].copy_from_slice(&img.data[y * w * 3..(y + 1) * w * 3]);
        }
    }
    Ok(out)
}

/// Tile `(i, j)` of a montage built by [`montage`].
pub fn montage_tile(m: &Image, i: usize, j: usize, w: usize, h: usize) -> Image {
    let (tw, th) = (w + GUTTER, h + GUTTER);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let src = ((i * th + y) * m.width + j * tw) * 3;
        data.extend_from_slice(&m.data[src..src + w * 3]);
    }
    Image::new(w, h, 3, data).expect("sized")
}

pub fn grid_export(images: &[Image], rows: usize, cols: usize, path: &Path) -> Result<Image> {
    let m = montage(images, rows, cols)?;
    m.save_png(path)?;
    Ok(m)
}

/// Cross product of shape and appearance draws at one pose.
#[derive(Clone, Debug)]
pub struct DisentangleGrid<T> {
    /// Row `i` shares appearance `i`; column `j` shares shape `j`.
    pub montage: Image,
    pub renders: Vec<Rendered>,
    pub z_a: Tensor<T>,
    pub z_s: Tensor<T>,
}

/// Draws `n_shapes` shape and `n_appearances` appearance latents from the
/// learned priors and renders every pairing at `pose`.
pub fn disentangle_grid<T: Scalar, R: Rng + ?Sized>(
    trainer: &Trainer<T>,
    n_shapes: usize,
    n_appearances: usize,
    pose: &CameraPose,
    rng: &mut R,
) -> Result<DisentangleGrid<T>> {
    if n_shapes == 0 || n_appearances == 0 {
        return Err(invalid("grid needs at least one shape and one appearance"));
    }
    let (z_a, _) = trainer.sample_latents(n_appearances, rng)?;
    let (_, z_s) = trainer.sample_latents(n_shapes, rng)?;
    let cfg = trainer.eval_render();
    let mut renders = Vec::with_capacity(n_shapes * n_appearances);
    for i in 0..n_appearances {
        for j in 0..n_shapes {
            renders.push(render_image(
                &trainer.model.gen,
                z_s.row_slice(j),
                z_a.row_slice(i),
                pose,
                &cfg,
                0,
            )?);
        }
    }
    let images: Vec<Image> = renders.iter().map(Rendered::image).collect();
    Ok(DisentangleGrid {
        montage: montage(&images, n_appearances, n_shapes)?,
        renders,
        z_a,
        z_s,
    })
}
