//! Image codecs and conversions between [0,1] float tensors and 8-bit files.
//! Images are 3 x H x W tensors; masks are single-channel {0,255} PNGs.

use crate::error::Result;
use crate::mask::BitMask;
use crate::tensor::Tensor;
use image::codecs::jpeg::JpegEncoder;
use image::{GrayImage, ImageReader, RgbImage};
use std::io::Cursor;
use std::path::Path;

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn tensor_to_rgb8(img: &Tensor) -> RgbImage {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    quantize_u8(img.data()[i]),
                    quantize_u8(img.data()[plane + i]),
                    quantize_u8(img.data()[2 * plane + i]),
                ]),
            );
        }
    }
    out
}

pub fn rgb8_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32).0;
            let i = y * w + x;
            data[i] = p[0] as f64 / 255.0;
            data[plane + i] = p[1] as f64 / 255.0;
            data[2 * plane + i] = p[2] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).unwrap()
}

/// Quantize to 8-bit exactly as `save_png` would, then convert back. Keeps
/// in-memory pipelines bit-identical to load(save(x)).
pub fn quantize_round_trip(img: &Tensor) -> Tensor {
    rgb8_to_tensor(&tensor_to_rgb8(img))
}

pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    tensor_to_rgb8(img).save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = ImageReader::open(path)?.decode()?.to_rgb8();
    Ok(rgb8_to_tensor(&img))
}

pub fn save_mask_png(path: &Path, mask: &BitMask) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = GrayImage::new(mask.width as u32, mask.height as u32);
    for y in 0..mask.height {
        for x in 0..mask.width {
            out.put_pixel(
                x as u32,
                y as u32,
                image::Luma([if mask.get(y, x) { 255u8 } else { 0u8 }]),
            );
        }
    }
    out.save(path)?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<BitMask> {
    let img = ImageReader::open(path)?.decode()?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0[0] >= 128).collect();
    BitMask::new(h, w, data)
}

/// Encode to baseline JPEG at `quality` and decode back, entirely in memory.
pub fn jpeg_round_trip(img: &Tensor, quality: u8) -> Result<Tensor> {
    let rgb = tensor_to_rgb8(img);
    let mut bytes = Vec::new();
    let encoder = JpegEncoder::new_with_quality(&mut bytes, quality);
    rgb.write_with_encoder(encoder)?;
    let decoded = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()?
        .decode()?
        .to_rgb8();
    Ok(rgb8_to_tensor(&decoded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn png_round_trip_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = stream(1, "img", &[]);
        let img = Tensor::randn(&[3, 9, 7], 0.3, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0));
        let q = quantize_round_trip(&img);
        let p = dir.path().join("x.png");
        save_png(&p, &img).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!(q.data(), back.data());
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = BitMask::from_fn(6, 5, |r, c| (r + c) % 2 == 0);
        let p = dir.path().join("m.png");
        save_mask_png(&p, &mask).unwrap();
        assert_eq!(load_mask_png(&p).unwrap(), mask);
    }
}
