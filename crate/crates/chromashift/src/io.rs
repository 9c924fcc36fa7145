//! PNG/JPEG reading and 8-bit PNG writing.

use std::path::Path;

use chromashift_core::imaging::ImageTensor;
use image::{DynamicImage, ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Loads an 8- or 16-bit PNG/JPEG, scaling codes by the bit-depth maximum.
/// Grey images are replicated over the three channels; alpha is dropped.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let wrap = |source| Error::Image {
        path: path.into(),
        source,
    };
    let reader = image::ImageReader::open(path).map_err(Error::io(path))?;
    let reader = reader.with_guessed_format().map_err(Error::io(path))?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Jpeg) => {}
        other => {
            return Err(Error::Dataset(format!(
                "{}: unsupported image format {other:?}",
                path.display()
            )))
        }
    }
    let img = reader.decode().map_err(wrap)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Dataset(format!("{}: zero-size image", path.display())));
    }
    let planes = |pixels: &mut dyn Iterator<Item = [f32; 3]>| {
        let mut data = vec![0.0f32; 3 * h * w];
        for (i, px) in pixels.enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px[c];
            }
        }
        data
    };
    let data = match &img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            let rgb = img.to_rgb16();
            planes(&mut rgb.pixels().map(|p| p.0.map(|v| v as f32 / 65535.0)))
        }
        _ => {
            let rgb = img.to_rgb8();
            planes(&mut rgb.pixels().map(|p| p.0.map(|v| v as f32 / 255.0)))
        }
    };
    ImageTensor::new(h, w, data).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Nearest 8-bit code of a value, clamping first.
pub fn to_code(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit PNG.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, Rgb(img.pixel(y, x).map(to_code)));
        }
    }
    out.save_with_format(path, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
}

/// The image rounded to 8-bit codes, as a reload of [`save_image`] would give.
pub fn quantize(img: &ImageTensor) -> Result<ImageTensor> {
    let data = img.data().iter().map(|&v| to_code(v) as f32 / 255.0).collect();
    Ok(ImageTensor::new(img.height(), img.width(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageBuffer, Rgb};

    #[test]
    fn codes_scale_by_bit_depth() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let mut buf = RgbImage::new(8, 8);
        buf.put_pixel(0, 0, Rgb([255, 0, 128]));
        buf.save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.pixel(0, 0)[0], 1.0);
        assert_eq!(img.pixel(0, 0)[1], 0.0);
        assert!((img.pixel(0, 0)[2] - 128.0 / 255.0).abs() < 1e-7);

        let p16 = dir.path().join("b.png");
        let mut buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::new(8, 8);
        buf.put_pixel(1, 0, Rgb([65535, 0, 32768]));
        buf.save(&p16).unwrap();
        let img = load_image(&p16).unwrap();
        assert_eq!(img.pixel(0, 1)[0], 1.0);
        assert!((img.pixel(0, 1)[2] - 32768.0 / 65535.0).abs() < 1e-7);
    }

    #[test]
    fn save_clamps_and_rounds() {
        assert_eq!(to_code(1.0), 255);
        assert_eq!(to_code(0.50196), 128);
        assert_eq!(to_code(1.7), 255);
        assert_eq!(to_code(-0.2), 0);
    }

    #[test]
    fn eight_bit_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let data: Vec<f32> = (0..3 * 9 * 11).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
        let img = ImageTensor::new(9, 11, data).unwrap();
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back, img);
        save_image(&back, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn jpeg_and_grey_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.jpg");
        image::GrayImage::from_pixel(16, 8, image::Luma([200]))
            .save(&p)
            .unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.height(), img.width()), (8, 16));
        let px = img.pixel(3, 3);
        assert!(px[0] == px[1] && px[1] == px[2]);
        assert!((px[0] - 200.0 / 255.0).abs() < 3.0 / 255.0);
    }

    #[test]
    fn missing_and_unsupported_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_image(&dir.path().join("none.png")).is_err());
        let p = dir.path().join("x.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(load_image(&p).is_err());
    }
}
