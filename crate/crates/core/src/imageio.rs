//! PGM/PPM reading and writing.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use ndarray::{Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Reads a PGM (1 channel) or PPM (3 channels) image as `[C, H, W]` in
/// `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::Image(other),
    })?;
    Ok(match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
                g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
            })
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
                rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
            })
        }
    })
}

fn to_byte(v: f64, lo: f64, span: f64) -> u8 {
    if span <= 0.0 {
        return 128;
    }
    ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
}

fn range<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Writes a binary PGM, min-max normalized when `normalize` is set and
/// clamped to `[0, 1]` otherwise. A constant map becomes mid-grey.
pub fn write_pgm(path: &Path, map: ArrayView2<'_, f64>, normalize: bool) -> Result<()> {
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("image for {}", path.display())));
    }
    let (lo, span) = if normalize {
        let (lo, hi) = range(map.iter());
        (lo, hi - lo)
    } else {
        (0.0, 1.0)
    };
    let (h, w) = map.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_byte(map[[y as usize, x as usize]], lo, span)])
    });
    img.save_with_format(path, ImageFormat::Pnm)?;
    Ok(())
}

/// Writes `[C, H, W]` as PGM (one channel) or PPM (three channels).
pub fn write_image(path: &Path, image: ArrayView3<'_, f64>, normalize: bool) -> Result<()> {
    match image.dim().0 {
        1 => write_pgm(path, image.index_axis(ndarray::Axis(0), 0), normalize),
        3 => {
            if image.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("image for {}", path.display())));
            }
            let (lo, span) = if normalize {
                let (lo, hi) = range(image.iter());
                (lo, hi - lo)
            } else {
                (0.0, 1.0)
            };
            let (_, h, w) = image.dim();
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let px = |c: usize| to_byte(image[[c, y as usize, x as usize]], lo, span);
                image::Rgb([px(0), px(1), px(2)])
            });
            img.save_with_format(path, ImageFormat::Pnm)?;
            Ok(())
        }
        c => Err(Error::Shape(format!("cannot write a {c}-channel image"))),
    }
}
