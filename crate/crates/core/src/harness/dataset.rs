//! Source images: seeded synthetic blobs or PGM/PPM files from disk.

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synth::blob_image;
use crate::tensor::Tensor;

use super::config::DatasetConfig;

/// `count` synthetic images; image `i` depends only on `(seed, i)`.
pub fn synthetic_images(seed: u64, count: usize, shape: [usize; 3]) -> Vec<Tensor> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            blob_image(&mut rng, shape)
        })
        .collect()
}

/// Loads the configured dataset.
pub fn load_dataset(cfg: &DatasetConfig) -> Result<Vec<Tensor>> {
    match &cfg.input_dir {
        None => Ok(synthetic_images(cfg.seed, cfg.count, cfg.shape)),
        Some(dir) => load_directory(dir, cfg.count, cfg.shape),
    }
}

fn is_netpbm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "ppm" | "pnm")
    )
}

/// Reads up to `count` PGM/PPM files from `dir` in lexicographic order.
pub fn load_directory(dir: &Path, count: usize, shape: [usize; 3]) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| is_netpbm(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("{}: no .pgm/.ppm images found", dir.display())));
    }
    paths.truncate(count);
    paths.iter().map(|p| read_image(p, shape)).collect()
}

/// Decodes one image into `[h, w, c]` with values in `[0, 1]`.
pub fn read_image(path: &Path, shape: [usize; 3]) -> Result<Tensor> {
    let decode = |message: String| Error::Decode {
        path: path.to_path_buf(),
        message,
    };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm).map_err(|e| decode(e.to_string()))?;
    let [h, w, c] = shape;
    if (img.height() as usize, img.width() as usize) != (h, w) {
        return Err(decode(format!(
            "image is {}x{}, expected {h}x{w}",
            img.height(),
            img.width()
        )));
    }
    let data: Vec<f64> = match c {
        1 => img.to_luma32f().into_raw().into_iter().map(f64::from).collect(),
        3 => img.to_rgb32f().into_raw().into_iter().map(f64::from).collect(),
        other => return Err(decode(format!("unsupported channel count {other}"))),
    };
    Tensor::new(shape.to_vec(), data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Writes a `[h, w, 1]` tensor as binary PGM or `[h, w, 3]` as PPM.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    let bad = || Error::Contract(format!("cannot encode tensor of shape {shape:?} as an image"));
    let &[h, w, c] = shape else { return Err(bad()) };
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let dynamic = match c {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, bytes).ok_or_else(bad)?),
        3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, bytes).ok_or_else(bad)?),
        _ => return Err(bad()),
    };
    dynamic.save_with_format(path, ImageFormat::Pnm).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}
