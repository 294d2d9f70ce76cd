//! PNG/JPEG decode and encode, 8- and 16-bit, mapped to [0,1] floats.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};

/// Extensions the dataset walker accepts.
pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Loads an image as a 3-channel [0,1] tensor. Gray inputs are replicated,
/// alpha is dropped.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Array3::<f32>::zeros((3, h, w));
    match img {
        DynamicImage::ImageRgb16(buf) => {
            for (x, y, px) in buf.enumerate_pixels() {
                for c in 0..3 {
                    data[[c, y as usize, x as usize]] = px.0[c] as f32 / 65535.0;
                }
            }
        }
        DynamicImage::ImageLuma16(buf) => {
            for (x, y, px) in buf.enumerate_pixels() {
                let v = px.0[0] as f32 / 65535.0;
                for c in 0..3 {
                    data[[c, y as usize, x as usize]] = v;
                }
            }
        }
        other => {
            let rgb = other.to_rgb8();
            for (x, y, px) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    data[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
                }
            }
        }
    }
    ImageTensor::unit(data)
}

/// Saves a [0,1] image as 8-bit (or 16-bit) PNG/JPEG based on extension.
pub fn save_image(img: &ImageTensor, path: &Path, sixteen_bit: bool) -> Result<()> {
    img.expect_channels(3)?;
    let (h, w) = (img.height(), img.width());
    if sixteen_bit {
        let mut buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = img.data[[c, y as usize, x as usize]].clamp(0.0, 1.0);
                px.0[c] = (v * 65535.0).round() as u16;
            }
        }
        buf.save(path)?;
    } else {
        let mut buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = img.data[[c, y as usize, x as usize]].clamp(0.0, 1.0);
                px.0[c] = (v * 255.0).round() as u8;
            }
        }
        buf.save(path)?;
    }
    Ok(())
}

/// Sorted (stem, path) pairs of decodable images directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<(String, std::path::PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::data(format!("not a directory: {}", dir.display())));
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else {
            continue;
        };
        if !IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        out.push((stem.to_string(), path));
    }
    out.sort();
    Ok(out)
}
