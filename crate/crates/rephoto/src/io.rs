//! PNG reading and writing.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rephoto_core::imagecore::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// Reads an 8- or 16-bit image into `[0, 1]`. Grayscale files give one
/// channel, colour files three; alpha is dropped.
pub fn read_image(path: &Path) -> Result<Image, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    decode(img)
}

pub fn decode(img: DynamicImage) -> Result<Image, String> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb16();
        let mut data = vec![0.0; 3 * w * h];
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[c * w * h + y as usize * w + x as usize] = p[c] as f64 / 65535.0;
            }
        }
        Image::new(3, w, h, data).map_err(|e| e.to_string())
    } else {
        let data = img
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect();
        Image::new(1, w, h, data).map_err(|e| e.to_string())
    }
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

pub fn encode(img: &Image, depth: BitDepth) -> Result<DynamicImage, String> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let at = |c: usize, x: u32, y: u32| img.get(c, x as usize, y as usize);
    Ok(match (img.channels(), depth) {
        (1, BitDepth::Eight) => DynamicImage::ImageLuma8(ImageBuffer::from_fn(w, h, |x, y| {
            Luma([quantize(at(0, x, y), 255.0) as u8])
        })),
        (1, BitDepth::Sixteen) => DynamicImage::ImageLuma16(ImageBuffer::from_fn(w, h, |x, y| {
            Luma([quantize(at(0, x, y), 65535.0) as u16])
        })),
        (3, BitDepth::Eight) => DynamicImage::ImageRgb8(ImageBuffer::from_fn(w, h, |x, y| {
            Rgb([0, 1, 2].map(|c| quantize(at(c, x, y), 255.0) as u8))
        })),
        (3, BitDepth::Sixteen) => DynamicImage::ImageRgb16(ImageBuffer::from_fn(w, h, |x, y| {
            Rgb([0, 1, 2].map(|c| quantize(at(c, x, y), 65535.0) as u16))
        })),
        (c, _) => return Err(format!("cannot encode a {c}-channel image")),
    })
}

/// Writes a PNG, clamping to `[0, 1]` and rounding to the nearest level.
pub fn write_png(path: &Path, img: &Image, depth: BitDepth) -> std::io::Result<()> {
    let encoded = encode(img, depth).map_err(std::io::Error::other)?;
    encoded
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(std::io::Error::other)
}
