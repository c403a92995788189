//! Image decoding, query preprocessing and training-time augmentation.
//!
//! Query preprocessing is shared by the CLI and the HTTP service so both see
//! identical pixels: decode, flatten alpha onto white, resize to the encoder
//! input with a triangle filter, then scale to `[0, 1]`.

use image::imageops::FilterType;
use image::{DynamicImage, ImageBuffer, ImageFormat, Rgb, RgbImage};
use ndarray::Array3;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("cannot encode image: {0}")]
    Encode(String),
}

/// Decodes PNG/JPEG bytes into an `H×W×C` array in `[0, 1]`.
pub fn decode_and_preprocess(bytes: &[u8], input_size: (usize, usize, usize)) -> Result<Array3<f64>, ImageError> {
    let img = image::load_from_memory(bytes).map_err(|e| ImageError::Decode(e.to_string()))?;
    preprocess(&img, input_size)
}

pub fn preprocess(img: &DynamicImage, (h, w, c): (usize, usize, usize)) -> Result<Array3<f64>, ImageError> {
    if c != 1 && c != 3 {
        return Err(ImageError::Channels(c));
    }
    let rgba = img.to_rgba8();
    let flat: RgbImage = ImageBuffer::from_fn(rgba.width(), rgba.height(), |x, y| {
        let p = rgba.get_pixel(x, y).0;
        let a = p[3] as u32;
        let blend = |v: u8| ((v as u32 * a + 255 * (255 - a) + 127) / 255) as u8;
        Rgb([blend(p[0]), blend(p[1]), blend(p[2])])
    });
    let resized = if flat.width() as usize == w && flat.height() as usize == h {
        flat
    } else {
        image::imageops::resize(&flat, w as u32, h as u32, FilterType::Triangle)
    };
    let out = if c == 3 {
        Array3::from_shape_fn((h, w, 3), |(y, x, k)| resized.get_pixel(x as u32, y as u32).0[k] as f64 / 255.0)
    } else {
        let luma = DynamicImage::ImageRgb8(resized).to_luma8();
        Array3::from_shape_fn((h, w, 1), |(y, x, _)| luma.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0)
    };
    Ok(out)
}

/// Encodes an `H×W×{1,3}` array in `[0, 1]` as PNG bytes.
pub fn encode_png(pixels: &Array3<f64>) -> Result<Vec<u8>, ImageError> {
    let (h, w, c) = pixels.dim();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let img = match c {
        3 => DynamicImage::ImageRgb8(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([q(pixels[[y, x, 0]]), q(pixels[[y, x, 1]]), q(pixels[[y, x, 2]])])
        })),
        1 => DynamicImage::ImageLuma8(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([q(pixels[[y as usize, x as usize, 0]])])
        })),
        other => return Err(ImageError::Channels(other)),
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| ImageError::Encode(e.to_string()))?;
    Ok(buf.into_inner())
}

/// Horizontal flip with probability 0.5, then a random resized crop covering
/// 60–100% of the area, resampled bilinearly back to the original size.
pub fn augment<R: Rng>(pixels: &Array3<f64>, rng: &mut R) -> Array3<f64> {
    let (h, w, c) = pixels.dim();
    let flip = rng.random_bool(0.5);
    let area_frac: f64 = rng.random_range(0.6..=1.0);
    let log_ratio: f64 = rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln());
    let ratio = log_ratio.exp();
    let area = area_frac * (h * w) as f64;
    let cw = ((area * ratio).sqrt()).clamp(1.0, w as f64);
    let ch = ((area / ratio).sqrt()).clamp(1.0, h as f64);
    let x0: f64 = rng.random_range(0.0..=(w as f64 - cw));
    let y0: f64 = rng.random_range(0.0..=(h as f64 - ch));

    Array3::from_shape_fn((h, w, c), |(y, x, k)| {
        let sx = x0 + (x as f64 + 0.5) * cw / w as f64 - 0.5;
        let sy = y0 + (y as f64 + 0.5) * ch / h as f64 - 0.5;
        let sx = sx.clamp(0.0, (w - 1) as f64);
        let sy = sy.clamp(0.0, (h - 1) as f64);
        let (ix, iy) = (sx.floor() as usize, sy.floor() as usize);
        let (fx, fy) = (sx - ix as f64, sy - iy as f64);
        let ix1 = (ix + 1).min(w - 1);
        let iy1 = (iy + 1).min(h - 1);
        let col = |xx: usize| if flip { w - 1 - xx } else { xx };
        let v00 = pixels[[iy, col(ix), k]];
        let v01 = pixels[[iy, col(ix1), k]];
        let v10 = pixels[[iy1, col(ix), k]];
        let v11 = pixels[[iy1, col(ix1), k]];
        (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy
    })
}
