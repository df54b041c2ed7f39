//! Labelled image datasets, PNM I/O, the train/val/interpretability split and
//! raw tensor dumps.

use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GenericImageView};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

pub const CLASS_DIRS: [(&str, u8); 2] = [("negative", 0), ("positive", 1)];

/// File extensions picked up from the class directories.
pub const IMAGE_EXTENSIONS: [&str; 3] = ["pgm", "ppm", "pnm"];
pub const TENSOR_EXTENSION: &str = "cxt";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Path relative to the dataset root, `/`-separated.
    pub id: String,
    pub label: u8,
    /// `(1, c, h, w)`.
    pub tensor: Tensor,
}

pub fn read_image(path: &Path) -> Result<DynamicImage> {
    let unreadable = |reason: String| Error::UnreadableImage {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm).map_err(|e| unreadable(e.to_string()))
}

/// Binary PGM for luma images, binary PPM for everything else (8 bits).
pub fn write_pnm(path: &Path, img: &DynamicImage) -> Result<()> {
    let (w, h) = img.dimensions();
    let (magic, data) = match img {
        DynamicImage::ImageLuma8(g) => ("P5", g.as_raw().clone()),
        other => ("P6", other.to_rgb8().into_raw()),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&data);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// ITU-R BT.601 luma, rounded to the nearest byte.
pub fn luma601(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round().clamp(0.0, 255.0) as u8
}

/// Scales pixels to `[0, 1]` and lays them out as `(1, c, h, w)`. A colour
/// image feeding a one-channel model is reduced with [`luma601`]; a gray
/// image feeding a three-channel model is replicated.
pub fn image_to_tensor(img: &DynamicImage, input_shape: [usize; 3]) -> Result<Tensor> {
    let [c, h, w] = input_shape;
    let (iw, ih) = img.dimensions();
    if (ih as usize, iw as usize) != (h, w) {
        return Err(Error::shape(format!("image is {iw}x{ih}, model expects {w}x{h}")));
    }
    let gray = matches!(img, DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_));
    let shape = Shape4::new(1, c, h, w);
    match c {
        1 => {
            let plane: Vec<u8> = if gray {
                img.to_luma8().into_raw()
            } else {
                img.to_rgb8().pixels().map(|p| luma601(p[0], p[1], p[2])).collect()
            };
            Tensor::new(shape, plane.into_iter().map(|v| v as f32 / 255.0).collect())
        }
        3 => {
            let rgb = img.to_rgb8();
            Ok(Tensor::from_fn(shape, |_, ch, y, x| {
                rgb.get_pixel(x as u32, y as u32)[ch] as f32 / 255.0
            }))
        }
        _ => Err(Error::shape(format!("images cannot feed a {c}-channel input"))),
    }
}

fn is_input_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| {
            let e = e.to_ascii_lowercase();
            IMAGE_EXTENSIONS.contains(&e.as_str()) || e == TENSOR_EXTENSION
        })
        .unwrap_or(false)
}

/// Files under `dir/{negative,positive}` as `(id, label, path)`, sorted by id.
pub fn list_dataset(dir: &Path) -> Result<Vec<(String, u8, PathBuf)>> {
    let mut out = Vec::new();
    for (class, label) in CLASS_DIRS {
        let sub = dir.join(class);
        if !sub.is_dir() {
            continue;
        }
        for entry in std::fs::read_dir(&sub).map_err(|e| Error::io(&sub, e))? {
            let path = entry.map_err(|e| Error::io(&sub, e))?.path();
            if path.is_file() && is_input_file(&path) {
                let name = path.file_name().unwrap_or_default().to_string_lossy();
                out.push((format!("{class}/{name}"), label, path));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

pub fn load_sample(id: &str, label: u8, path: &Path, input_shape: [usize; 3]) -> Result<Sample> {
    let wrap = |e: Error| Error::Sample {
        id: id.to_string(),
        source: Box::new(e),
    };
    let tensor = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case(TENSOR_EXTENSION)) {
        let t = read_tensor(path).map_err(wrap)?;
        let s = t.shape();
        if [s.n, s.c, s.h, s.w] != [1, input_shape[0], input_shape[1], input_shape[2]] {
            return Err(wrap(Error::shape(format!("tensor dump is {s}, model expects {input_shape:?}"))));
        }
        t
    } else {
        image_to_tensor(&read_image(path).map_err(wrap)?, input_shape).map_err(wrap)?
    };
    Ok(Sample {
        id: id.to_string(),
        label,
        tensor,
    })
}

/// Every sample of a `positive/` + `negative/` dataset, sorted by id.
pub fn load_dataset(dir: &Path, input_shape: [usize; 3]) -> Result<Vec<Sample>> {
    list_dataset(dir)?
        .into_iter()
        .map(|(id, label, path)| load_sample(&id, label, &path, input_shape))
        .collect()
}

/// Content hash over sample ids, labels and tensor values, in order.
pub fn samples_sha256(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update((s.id.len() as u64).to_le_bytes());
        h.update(s.id.as_bytes());
        h.update([s.label]);
        let sh = s.tensor.shape();
        for d in [sh.n, sh.c, sh.h, sh.w] {
            h.update((d as u64).to_le_bytes());
        }
        for v in s.tensor.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub interp: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            interp: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, interp: f64) -> Result<Self> {
        let all = [train, val, interp];
        if all.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!("split fractions must lie in [0, 1], got {all:?}")));
        }
        if (train + val + interp - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {}",
                train + val + interp
            )));
        }
        Ok(Self { train, val, interp })
    }

    /// Parses `a,b,c`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("split `{s}` is not three comma-separated numbers")))?;
        match parts[..] {
            [a, b, c] => Self::new(a, b, c),
            _ => Err(Error::Config(format!("split `{s}` needs exactly three fractions"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Val,
    Interp,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Interp => "interp",
        }
    }
}

/// Sample indices per partition, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub interp: Vec<usize>,
}

impl Split {
    pub fn partition_of(&self, n: usize) -> Vec<Partition> {
        let mut out = vec![Partition::Interp; n];
        for &i in &self.train {
            out[i] = Partition::Train;
        }
        for &i in &self.val {
            out[i] = Partition::Val;
        }
        out
    }
}

/// Seeded shuffle of `0..n`; the first `floor(n * train)` go to training, the
/// next `floor(n * val)` to validation and the rest to interpretability.
pub fn split(n: usize, fractions: SplitFractions, seed: u64) -> Split {
    let count = |f: f64| ((n as f64 * f) + 1e-9).floor() as usize;
    let n_train = count(fractions.train).min(n);
    let n_val = count(fractions.val).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut interp = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    interp.sort_unstable();
    Split { train, val, interp }
}

const TENSOR_MAGIC: &[u8; 4] = b"CXT1";

/// Raw tensor dump: `CXT1`, four little-endian `u32` dims `(n, c, h, w)`,
/// then little-endian `f32` data.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    let mut out = Vec::with_capacity(20 + 4 * t.data().len());
    out.extend_from_slice(TENSOR_MAGIC);
    for d in [s.n, s.c, s.h, s.w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::schema(path, "not a CXT1 tensor dump"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = Shape4::new(dim(0), dim(1), dim(2), dim(3));
    let body = &bytes[20..];
    if body.len() != 4 * shape.len() {
        return Err(Error::schema(
            path,
            format!("tensor {shape} needs {} data bytes, found {}", 4 * shape.len(), body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::schema(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    #[test]
    fn pnm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GrayImage::from_fn(3, 2, |x, y| Luma([(x * 40 + y * 100) as u8]));
        let path = dir.path().join("a.pgm");
        write_pnm(&path, &DynamicImage::ImageLuma8(g.clone())).unwrap();
        assert_eq!(&std::fs::read(&path).unwrap()[..11], b"P5\n3 2\n255\n");
        assert_eq!(read_image(&path).unwrap().to_luma8(), g);

        let c = RgbImage::from_fn(2, 2, |x, y| Rgb([x as u8 * 200, y as u8 * 100, 7]));
        let path = dir.path().join("b.ppm");
        write_pnm(&path, &DynamicImage::ImageRgb8(c.clone())).unwrap();
        assert_eq!(read_image(&path).unwrap().to_rgb8(), c);
    }

    #[test]
    fn garbage_is_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P5\n2 2\n255\n\x01").unwrap();
        assert!(matches!(read_image(&path), Err(Error::UnreadableImage { .. })));
    }

    #[test]
    fn tensor_scaling_and_luma() {
        let g = GrayImage::from_raw(2, 1, vec![0, 255]).unwrap();
        let t = image_to_tensor(&DynamicImage::ImageLuma8(g), [1, 1, 2]).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0]);
        assert_eq!(luma601(255, 0, 0), 76);
        assert_eq!(luma601(10, 10, 10), 10);
        let g = GrayImage::new(4, 4);
        assert!(image_to_tensor(&DynamicImage::ImageLuma8(g), [1, 3, 3]).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let f = SplitFractions::default();
        let a = split(200, f, 7);
        assert_eq!((a.train.len(), a.val.len(), a.interp.len()), (140, 30, 30));
        assert_eq!(a, split(200, f, 7));
        let b = split(200, f, 8);
        assert_ne!(a, b);
        assert_eq!((b.train.len(), b.val.len(), b.interp.len()), (140, 30, 30));
        let s = split(11, f, 1);
        assert_eq!((s.train.len(), s.val.len(), s.interp.len()), (7, 1, 3));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.interp).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn split_fraction_parsing() {
        assert_eq!(SplitFractions::parse("0.7,0.15,0.15").unwrap(), SplitFractions::default());
        assert!(SplitFractions::parse("0.5,0.5,0.5").unwrap_err().exit_code() == 2);
        assert!(SplitFractions::parse("1,0").is_err());
    }

    #[test]
    fn tensor_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cxt");
        let t = Tensor::from_fn(Shape4::new(1, 2, 3, 4), |_, c, y, x| (c * 100 + y * 10 + x) as f32 - 0.5);
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
        std::fs::write(&path, b"CXT1").unwrap();
        assert!(read_tensor(&path).is_err());
    }
}
