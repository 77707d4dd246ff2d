//! Reading and writing tensors, checkpoints, PNG images and datasets.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use asma_core::{LabelMask, ModelParams, Sample, Tensor};
use image::GrayImage;

use crate::error::{Error, Result};

fn write_bytes(path: &Path, bytes: Vec<u8>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    fs::write(path, bytes).map_err(Error::io(path))
}

pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    write_bytes(path, tensor.to_bytes())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    Tensor::from_bytes(&bytes).map_err(|source| Error::Decode { path: path.into(), source })
}

pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    write_bytes(path, params.to_bytes())
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    ModelParams::from_bytes(&bytes).map_err(|source| Error::Decode { path: path.into(), source })
}

/// Maps `[0, 1]` to `0..=255` with rounding; values outside are clipped.
pub fn unit_to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::Config(format!("{}: pixel buffer does not match {width}x{height}", path.display())))?;
    img.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

/// Writes channel 0 of a `C×H×W` image as 8-bit grayscale.
pub fn write_image_png(path: &Path, image: &Tensor) -> Result<()> {
    let (_, h, w) = image.dims3("write_image_png")?;
    let pixels = image.as_slice()[..h * w].iter().map(|&v| unit_to_byte(v)).collect();
    write_gray_png(path, w, h, pixels)
}

/// Background as 0, every other label as 255.
pub fn write_mask_png(path: &Path, mask: &LabelMask) -> Result<()> {
    let pixels = mask.as_slice().iter().map(|&l| if l == 0 { 0 } else { 255 }).collect();
    write_gray_png(path, mask.width(), mask.height(), pixels)
}

pub fn read_image_png(path: &Path) -> Result<Tensor> {
    let img = read_gray(path)?;
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Ok(Tensor::new(&[1, h as usize, w as usize], data)?)
}

pub fn read_mask_png(path: &Path) -> Result<LabelMask> {
    let img = read_gray(path)?;
    let (w, h) = img.dimensions();
    let labels = img.into_raw().into_iter().map(|b| (b >= 128) as u8).collect();
    Ok(LabelMask::new(h as usize, w as usize, labels)?)
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image { path: path.into(), source })?
        .into_luma8())
}

pub const INDEX_FILE: &str = "index.txt";

/// Exports `images/NNNN.png`, `masks/NNNN.png` and an index with one
/// `id<TAB>image path<TAB>mask path` line per sample (paths relative to `dir`).
pub fn export_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).map_err(Error::io(&images))?;
    fs::create_dir_all(&masks).map_err(Error::io(&masks))?;
    let mut index = String::new();
    for s in samples {
        let image_rel = format!("images/{:04}.png", s.id);
        let mask_rel = format!("masks/{:04}.png", s.id);
        write_image_png(&dir.join(&image_rel), &s.image)?;
        write_mask_png(&dir.join(&mask_rel), &s.mask)?;
        writeln!(index, "{}\t{image_rel}\t{mask_rel}", s.id).unwrap();
    }
    let index_path = dir.join(INDEX_FILE);
    fs::write(&index_path, index).map_err(Error::io(&index_path))?;
    Ok(index_path)
}

/// Reads a dataset written by [`export_dataset`]. Images come back quantized
/// to 8 bits.
pub fn import_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(Error::io(&index_path))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Config(format!("{}:{}: expected `id<TAB>image<TAB>mask`", index_path.display(), lineno + 1));
        let mut fields = line.split('\t');
        let (Some(id), Some(img), Some(mask), None) = (fields.next(), fields.next(), fields.next(), fields.next()) else {
            return Err(bad());
        };
        let id: u32 = id.parse().map_err(|_| bad())?;
        samples.push(Sample::new(id, read_image_png(&dir.join(img))?, read_mask_png(&dir.join(mask))?)?);
    }
    Ok(samples)
}
