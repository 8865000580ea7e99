//! Image loading/saving and the conversions between 8-bit image semantics
//! ([C, H, W] f64 arrays in [0, 255]) and model tensors ([B, 3, H, W] in
//! [0, 1]).

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};
use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::error::{Error, Result};

/// Decode an image file to an RGB [3, H, W] array in [0, 255].
pub fn load_image(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let img = image::open(path.as_ref())
        .map_err(|e| Error::Image(format!("{}: {e}", path.as_ref().display())))?;
    Ok(dynamic_to_array(&img))
}

pub fn dynamic_to_array(img: &DynamicImage) -> Array3<f64> {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = px.0[c] as f64;
        }
    }
    out
}

/// Round, clip to [0, 255], and convert to an 8-bit RGB buffer.
pub fn array_to_rgb8(img: &Array3<f64>) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (_, h, w) = img.dim();
    let mut buf = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                img[(0, y, x)].round().clamp(0.0, 255.0) as u8,
                img[(1, y, x)].round().clamp(0.0, 255.0) as u8,
                img[(2, y, x)].round().clamp(0.0, 255.0) as u8,
            ];
            buf.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    buf
}

pub fn save_png(img: &Array3<f64>, path: impl AsRef<Path>) -> Result<()> {
    array_to_rgb8(img)
        .save(path.as_ref())
        .map_err(|e| Error::Image(format!("{}: {e}", path.as_ref().display())))
}

/// BT.601 luma from an RGB image in [0, 255].
pub fn luminance(img: &Array3<f64>) -> Array2<f64> {
    let (_, h, w) = img.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[(y, x)] =
                0.299 * img[(0, y, x)] + 0.587 * img[(1, y, x)] + 0.114 * img[(2, y, x)];
        }
    }
    out
}

/// Stack [3, H, W] images in [0, 255] into a model batch [B, 3, H, W] in [0, 1].
pub fn to_model_batch(images: &[Array3<f64>]) -> Result<ArrayD<f64>> {
    if images.is_empty() {
        return Err(Error::argument("batch", "empty image batch"));
    }
    let (c, h, w) = images[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[images.len(), c, h, w]));
    for (b, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(Error::shape(
                "to_model_batch",
                format!("{:?}", (c, h, w)),
                format!("{:?}", img.dim()),
            ));
        }
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[b, ci, y, x]] = img[(ci, y, x)] / 255.0;
                }
            }
        }
    }
    Ok(out)
}

/// Extract one sample of a model batch back to 8-bit scale, clipped.
pub fn from_model_output(batch: &ArrayD<f64>, index: usize) -> Array3<f64> {
    let shape = batch.shape();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ci, y, x)] = (batch[[index, ci, y, x]] * 255.0).clamp(0.0, 255.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_round_trip() {
        let mut img = Array3::zeros((3, 8, 8));
        img[(0, 2, 3)] = 128.0;
        img[(2, 7, 7)] = 255.0;
        let batch = to_model_batch(&[img.clone()]).unwrap();
        assert_eq!(batch.shape(), &[1, 3, 8, 8]);
        assert!((batch[[0, 0, 2, 3]] - 128.0 / 255.0).abs() < 1e-12);
        let back = from_model_output(&batch, 0);
        assert!(back
            .iter()
            .zip(img.iter())
            .all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn luminance_weights() {
        let mut img = Array3::zeros((3, 1, 1));
        img[(0, 0, 0)] = 255.0;
        assert!((luminance(&img)[(0, 0)] - 0.299 * 255.0).abs() < 1e-12);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut img = Array3::zeros((3, 4, 5));
        for (i, v) in img.iter_mut().enumerate() {
            *v = (i % 256) as f64;
        }
        save_png(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.dim(), (3, 4, 5));
        assert!(back.iter().zip(img.iter()).all(|(a, b)| (a - b).abs() < 0.5));
    }
}
