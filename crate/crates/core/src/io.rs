//! Raster I/O: 8-bit PNG (gray/RGB) and binary PGM/PPM.
//!
//! Tensors carry pixels in `[0, 1]`; quantization to 8 bits happens only here.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_for(path: &Path) -> Option<ImageFormat> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "png" => Some(ImageFormat::Png),
        "ppm" | "pgm" | "pnm" => Some(ImageFormat::Pnm),
        _ => None,
    }
}

/// Loads a PNG/PGM/PPM file as an `H×W×C` tensor with `C ∈ {1, 3}`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let format = format_for(path).ok_or_else(|| Error::UnsupportedFormat(path.to_path_buf()))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img =
        image::load_from_memory_with_format(&bytes, format).map_err(|e| Error::CorruptImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        DynamicImage::ImageRgb8(rgb) => (3, rgb.into_raw()),
        DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_) => (1, img.to_luma8().into_raw()),
        other => (3, other.to_rgb8().into_raw()),
    };
    let data = raw.into_iter().map(|b| b as f64 / 255.0).collect();
    Tensor::from_vec(h, w, channels, data)
}

/// Quantizes to 8 bits (after clamping to `[0, 1]`) and writes losslessly.
pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = format_for(path).ok_or_else(|| Error::UnsupportedFormat(path.to_path_buf()))?;
    let bytes: Vec<u8> = t.data().iter().map(|&v| quantize(v)).collect();
    let (w, h) = (t.width() as u32, t.height() as u32);
    let img = match t.channels() {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("buffer size")),
        3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("buffer size")),
        c => {
            return Err(Error::InvalidShape(format!(
                "cannot save a {c}-channel tensor as an image"
            )))
        }
    };
    img.save_with_format(path, format).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    })
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn white_png_loads_as_ones() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("white.png");
        RgbImage::from_pixel(2, 2, image::Rgb([255, 255, 255]))
            .save(&p)
            .unwrap();
        let t = load_image(&p).unwrap();
        assert_eq!(t.shape(), crate::tensor::Shape::new(2, 2, 3));
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn black_pixel_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("black.ppm");
        RgbImage::from_pixel(1, 1, image::Rgb([0, 0, 0]))
            .save(&p)
            .unwrap();
        let t = load_image(&p).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn random_8bit_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(5);
        for (name, c) in [("a.png", 3), ("b.png", 1), ("c.ppm", 3), ("d.pgm", 1)] {
            let bytes: Vec<u8> = (0..7 * 5 * c).map(|_| rng.index(256) as u8).collect();
            let src = dir.path().join(format!("src_{name}"));
            if c == 3 {
                RgbImage::from_raw(5, 7, bytes.clone())
                    .unwrap()
                    .save(&src)
                    .unwrap();
            } else {
                GrayImage::from_raw(5, 7, bytes.clone())
                    .unwrap()
                    .save(&src)
                    .unwrap();
            }
            let t = load_image(&src).unwrap();
            let dst = dir.path().join(name);
            save_image(&t, &dst).unwrap();
            let back = load_image(&dst).unwrap();
            let back_bytes: Vec<u8> = back.data().iter().map(|&v| quantize(v)).collect();
            assert_eq!(back_bytes, bytes, "{name}");
        }
    }

    #[test]
    fn midpoint_and_clamping() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("half.png");
        save_image(&Tensor::full(2, 2, 3, 0.5), &p).unwrap();
        let t = load_image(&p).unwrap();
        assert!(t.data().iter().all(|&v| (v * 255.0 - 128.0).abs() <= 1.0));

        let q = dir.path().join("clamp.png");
        let t = Tensor::from_vec(1, 2, 1, vec![-0.5, 1.7]).unwrap();
        save_image(&t, &q).unwrap();
        assert_eq!(load_image(&q).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn ramp_within_one_quantum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ramp.pgm");
        let ramp = Tensor::from_fn(3, 3, 1, |y, x, _| (y * 3 + x) as f64 / 8.0);
        save_image(&ramp, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert!(ramp.max_abs_diff(&back).unwrap() <= 1.0 / 255.0);
    }

    #[test]
    fn error_variants_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(dir.path().join("nope.png")),
            Err(Error::MissingFile(_))
        ));
        let jpg = dir.path().join("x.jpg");
        std::fs::write(&jpg, b"whatever").unwrap();
        assert!(matches!(load_image(&jpg), Err(Error::UnsupportedFormat(_))));
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"not a png at all").unwrap();
        assert!(matches!(load_image(&bad), Err(Error::CorruptImage { .. })));
    }

    #[test]
    fn unwritable_path() {
        let err = save_image(&Tensor::zeros(1, 1, 1), "/nonexistent-dir/x.png").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
