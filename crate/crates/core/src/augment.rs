//! Dataset augmentation: flips and small random rotations.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Pixel};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{list_dataset, read_image, write_pnm, IMAGE_EXTENSIONS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentOps {
    pub hflip: bool,
    pub vflip: bool,
    /// Largest rotation angle in degrees, in `(0, 10]`.
    pub rotate: Option<f64>,
    /// Rotated copies written per image.
    pub rotations: usize,
}

impl Default for AugmentOps {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: true,
            rotate: Some(10.0),
            rotations: 1,
        }
    }
}

impl AugmentOps {
    pub fn validate(&self) -> Result<()> {
        if let Some(max) = self.rotate {
            if !(max > 0.0 && max <= 10.0) {
                return Err(Error::Config(format!("rotation bound must be in (0, 10] degrees, got {max}")));
            }
        }
        Ok(())
    }

    /// Files written per readable input, the original included.
    pub fn multiplier(&self) -> usize {
        1 + self.hflip as usize + self.vflip as usize + if self.rotate.is_some() { self.rotations } else { 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PrepareSummary {
    pub inputs: usize,
    pub written: usize,
    pub skipped: usize,
    pub positive: usize,
    pub negative: usize,
}

pub fn hflip(img: &DynamicImage) -> DynamicImage {
    img.fliph()
}

pub fn vflip(img: &DynamicImage) -> DynamicImage {
    img.flipv()
}

fn rotate_buffer<P>(src: &ImageBuffer<P, Vec<u8>>, degrees: f64) -> ImageBuffer<P, Vec<u8>>
where
    P: Pixel<Subpixel = u8>,
{
    let (w, h) = src.dimensions();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let channels = P::CHANNEL_COUNT as usize;
    let fetch = |x: i64, y: i64, ch: usize| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            src.get_pixel(x as u32, y as u32).channels()[ch] as f64
        }
    };
    let mut out = ImageBuffer::<P, Vec<u8>>::new(w, h);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        // Inverse map of a counter-clockwise turn (y axis pointing down).
        let sx = cx + cos * dx - sin * dy;
        let sy = cy + sin * dx + cos * dy;
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let dst = px.channels_mut();
        for (ch, d) in dst.iter_mut().enumerate().take(channels) {
            let v = (1.0 - fy) * ((1.0 - fx) * fetch(x0, y0, ch) + fx * fetch(x0 + 1, y0, ch))
                + fy * ((1.0 - fx) * fetch(x0, y0 + 1, ch) + fx * fetch(x0 + 1, y0 + 1, ch));
            *d = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Bilinear rotation about the image centre on a same-size canvas; samples
/// falling outside the source read as zero.
pub fn rotate_bilinear(img: &DynamicImage, degrees: f64) -> DynamicImage {
    if degrees == 0.0 {
        return img.clone();
    }
    match img {
        DynamicImage::ImageLuma8(g) => DynamicImage::ImageLuma8(rotate_buffer(g, degrees)),
        other => DynamicImage::ImageRgb8(rotate_buffer(&other.to_rgb8(), degrees)),
    }
}

fn extension_for(img: &DynamicImage) -> &'static str {
    match img {
        DynamicImage::ImageLuma8(_) => "pgm",
        _ => "ppm",
    }
}

/// Draws an angle uniformly from `(0, max]`.
fn draw_angle(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    max * (1.0 - rng.random::<f64>())
}

/// The augmented variants of one image as `(suffix, image)`.
pub fn variants(img: &DynamicImage, ops: &AugmentOps, rng: &mut ChaCha8Rng) -> Vec<(String, DynamicImage)> {
    let mut out = vec![(String::new(), img.clone())];
    if ops.hflip {
        out.push(("_hflip".into(), hflip(img)));
    }
    if ops.vflip {
        out.push(("_vflip".into(), vflip(img)));
    }
    if let Some(max) = ops.rotate {
        for r in 0..ops.rotations {
            let suffix = if ops.rotations == 1 { "_rot".to_string() } else { format!("_rot{r}") };
            out.push((suffix, rotate_bilinear(img, draw_angle(rng, max))));
        }
    }
    out
}

/// Writes every image of `in_dir` plus its enabled variants into the same
/// class layout under `out_dir`. Unreadable images are skipped and counted.
pub fn prepare(in_dir: &Path, out_dir: &Path, ops: &AugmentOps, seed: u64) -> Result<PrepareSummary> {
    ops.validate()?;
    let files: Vec<_> = list_dataset(in_dir)?
        .into_iter()
        .filter(|(_, _, p)| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    for (class, _) in crate::dataset::CLASS_DIRS {
        let d = out_dir.join(class);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let results: Vec<Result<Option<(u8, usize)>>> = files
        .par_iter()
        .enumerate()
        .map(|(idx, (id, label, path))| {
            let img = match read_image(path) {
                Ok(img) => img,
                Err(e @ Error::UnreadableImage { .. }) => {
                    warn!("skipping {e}");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            let (class, name) = id.split_once('/').unwrap_or(("", id));
            let stem = Path::new(name).file_stem().unwrap_or_default().to_string_lossy();
            let vs = variants(&img, ops, &mut rng);
            for (suffix, v) in &vs {
                let file = format!("{stem}{suffix}.{}", extension_for(v));
                write_pnm(&out_dir.join(class).join(file), v)?;
            }
            Ok(Some((*label, vs.len())))
        })
        .collect();
    let mut summary = PrepareSummary {
        inputs: files.len(),
        ..Default::default()
    };
    for r in results {
        match r? {
            None => summary.skipped += 1,
            Some((label, n)) => {
                summary.written += n;
                if label == 1 {
                    summary.positive += n;
                } else {
                    summary.negative += n;
                }
            }
        }
    }
    Ok(summary)
}
