//! Image tensors and PNG/JPEG I/O.
//!
//! Images are `(3, H, W)` arrays with values nominally in `[0, 1]`.
//! Quantization to 8 bits happens exactly once, at export.

use crate::autodiff::Scalar;
use crate::error::Result;
use ndarray::Array3;
use std::path::Path;

pub type Image<T> = Array3<T>;

pub fn constant<T: Scalar>(v: f64, h: usize, w: usize) -> Image<T> {
    Array3::from_elem((3, h, w), T::from_f(v))
}

/// Decode a PNG or JPEG file into a float image.
pub fn load<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let rgb = image::open(path)?.to_rgb8();
    Ok(from_rgb8(&rgb))
}

pub fn from_rgb8<T: Scalar>(rgb: &image::RgbImage) -> Image<T> {
    let (w, h) = rgb.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        T::from_f(rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    })
}

pub fn to_rgb8<T: Scalar>(img: &Image<T>) -> image::RgbImage {
    let (_, h, w) = img.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = img[[c, y as usize, x as usize]].to_f().clamp(0.0, 1.0);
            (v * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Write as 8-bit PNG (the single quantization point of the pipeline).
pub fn save<T: Scalar>(img: &Image<T>, path: &Path) -> Result<()> {
    to_rgb8(img).save(path)?;
    Ok(())
}

pub fn resize_nearest<T: Scalar>(img: &Image<T>, h2: usize, w2: usize) -> Image<T> {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h2, w2), |(ch, i, j)| img[[ch, i * h / h2, j * w / w2]])
}

pub fn max_abs_diff<T: Scalar>(a: &Image<T>, b: &Image<T>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs().to_f())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_for_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img: Image<f32> =
            Array3::from_shape_fn((3, 5, 7), |(c, y, x)| ((c + 2 * y + 3 * x) % 256) as f32 / 255.0);
        save(&img, &path).unwrap();
        let back: Image<f32> = load(&path).unwrap();
        assert!(max_abs_diff(&img, &back) < 1e-6);
    }

    #[test]
    fn resize_identity() {
        let img: Image<f32> = constant(0.25, 8, 8);
        let r = resize_nearest(&img, 8, 8);
        assert_eq!(img, r);
    }
}
