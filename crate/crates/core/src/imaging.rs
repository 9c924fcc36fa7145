//! Image container, inversion, CIELAB conversion and reflect padding.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Smallest edge accepted for an image.
pub const MIN_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ColorSpace {
    Srgb,
    Lab,
}

/// Three-channel planar (CHW) 32-bit image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    space: ColorSpace,
    data: Vec<f32>,
}

impl ImageTensor {
    /// Builds an sRGB image, checking the size floor and the `[0, 1]` range.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::with_space(height, width, data, ColorSpace::Srgb)
    }

    /// sRGB values are snapped to multiples of 2^-24, a grid on which
    /// `1 - v` is exact in `f32`; this keeps [`invert`] an exact involution.
    pub fn with_space(height: usize, width: usize, mut data: Vec<f32>, space: ColorSpace) -> Result<Self> {
        if height < MIN_SIZE || width < MIN_SIZE {
            return Err(Error::TooSmall {
                height,
                width,
                min: MIN_SIZE,
            });
        }
        if data.len() != 3 * height * width {
            return Err(Error::Shape {
                op: "image",
                detail: alloc::format!("{} values for 3x{}x{}", data.len(), height, width),
            });
        }
        if space == ColorSpace::Srgb {
            if let Some((index, &v)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
                return Err(Error::OutOfRange {
                    index,
                    value: v as f64,
                    lo: 0.0,
                    hi: 1.0,
                });
            }
            for v in &mut data {
                *v = snap(*v);
            }
        }
        Ok(Self {
            height,
            width,
            space,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(core::iter::repeat_n(c, height * width));
        }
        Self::new(height, width, data)
    }

    /// Converts a `(1, 3, h, w)` tensor, clamping every value into `[0, 1]`.
    pub fn from_tensor_clamped<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 3 {
            return Err(Error::Shape {
                op: "from_tensor",
                detail: alloc::format!("{:?}", t.shape()),
            });
        }
        let data = t.data().iter().map(|v| v.to_f64().clamp(0.0, 1.0) as f32).collect();
        Self::new(h, w, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn color_space(&self) -> ColorSpace {
        self.space
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let hw = self.height * self.width;
        let p = y * self.width + x;
        [self.data[p], self.data[hw + p], self.data[2 * hw + p]]
    }

    /// `(1, 3, h, w)` tensor in the requested precision.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        Tensor::from_vec([1, 3, self.height, self.width], data).expect("consistent image")
    }

    /// Crops the window `[y, y+h) × [x, x+w)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::Invalid(alloc::format!(
                "crop {h}x{w}+{y}+{x} exceeds {}x{}",
                self.height,
                self.width
            )));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            let plane = self.plane(c);
            for yy in y..y + h {
                data.extend_from_slice(&plane[yy * self.width + x..yy * self.width + x + w]);
            }
        }
        Self::with_space(h, w, data, self.space)
    }

    /// Applies a pixel permutation: output `(y, x)` reads input `map(y, x)`.
    pub(crate) fn remap(&self, out_h: usize, out_w: usize, map: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut data = Vec::with_capacity(3 * out_h * out_w);
        for c in 0..3 {
            let plane = self.plane(c);
            for y in 0..out_h {
                for x in 0..out_w {
                    let (sy, sx) = map(y, x);
                    data.push(plane[sy * self.width + sx]);
                }
            }
        }
        Self {
            height: out_h,
            width: out_w,
            space: self.space,
            data,
        }
    }
}

const GRID: f32 = 16_777_216.0;

#[inline]
fn snap(v: f32) -> f32 {
    libm::rintf(v * GRID) / GRID
}

/// `1 - value` for every element.
pub fn invert(img: &ImageTensor) -> ImageTensor {
    debug_assert_eq!(img.space, ColorSpace::Srgb);
    ImageTensor {
        height: img.height,
        width: img.width,
        space: ColorSpace::Srgb,
        data: img.data.iter().map(|&v| 1.0 - v).collect(),
    }
}

// sRGB primaries to XYZ, D65.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];
const WHITE_D65: [f64; 3] = [0.95047, 1.0, 1.08883];

#[inline]
fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        libm::pow((c + 0.055) / 1.055, 2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        libm::cbrt(t)
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

/// CIE 1976 L*a*b* of one sRGB pixel under D65.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut f = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        let v = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
        f[i] = lab_f(v / WHITE_D65[i]);
    }
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

pub fn srgb_to_lab(img: &ImageTensor) -> ImageTensor {
    let hw = img.height * img.width;
    let mut data = alloc::vec![0.0f32; 3 * hw];
    for p in 0..hw {
        let rgb = [img.data[p] as f64, img.data[hw + p] as f64, img.data[2 * hw + p] as f64];
        let lab = srgb_pixel_to_lab(rgb);
        for c in 0..3 {
            data[c * hw + p] = lab[c] as f32;
        }
    }
    ImageTensor {
        height: img.height,
        width: img.width,
        space: ColorSpace::Lab,
        data,
    }
}

/// Symmetric reflection (`dcb|abcd|cba`) of an index into `[0, len)`.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= len as isize {
        r = period - r;
    }
    r as usize
}

/// Reflect-pads bottom/right so both sides are multiples of `multiple`.
/// Returns the padded image; crop back with [`ImageTensor::crop`].
pub fn pad_to_multiple(img: &ImageTensor, multiple: usize) -> ImageTensor {
    let h = img.height.div_ceil(multiple) * multiple;
    let w = img.width.div_ceil(multiple) * multiple;
    if (h, w) == (img.height, img.width) {
        return img.clone();
    }
    let (ih, iw) = (img.height, img.width);
    img.remap(h, w, |y, x| (reflect(y as isize, ih), reflect(x as isize, iw)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn invert_is_an_involution() {
        let img = ImageTensor::new(8, 8, (0..192).map(|i| i as f32 / 191.0).collect()).unwrap();
        let once = invert(&img);
        assert_eq!(invert(&once), img);
        let zeros = ImageTensor::filled(8, 8, [0.0; 3]).unwrap();
        assert!(invert(&zeros).data().iter().all(|&v| v == 1.0));
        let p = ImageTensor::filled(8, 8, [0.3; 3]).unwrap();
        assert!((invert(&p).data()[0] - 0.7).abs() < 1e-7);
    }

    #[test]
    fn lab_reference_points() {
        let white = srgb_pixel_to_lab([1.0; 3]);
        assert!((white[0] - 100.0).abs() < 1e-4);
        assert!(white[1].abs() <= 0.01 && white[2].abs() <= 0.01);
        assert_eq!(srgb_pixel_to_lab([0.0; 3]), [0.0, 0.0, 0.0]);
        // scikit-image rgb2lab (D65) reference values
        let gray = srgb_pixel_to_lab([0.5; 3]);
        assert!((gray[0] - 53.38896).abs() < 1e-3, "{gray:?}");
        let red = srgb_pixel_to_lab([1.0, 0.0, 0.0]);
        for (got, want) in red.iter().zip([53.24059, 80.09231, 67.20275]) {
            assert!((got - want).abs() < 0.05, "{red:?}");
        }
        let blue = srgb_pixel_to_lab([0.2, 0.6, 0.9]);
        for (got, want) in blue.iter().zip([60.92953, -3.06016, -46.83765]) {
            assert!((got - want).abs() < 0.05, "{blue:?}");
        }
    }

    #[test]
    fn rejects_small_and_out_of_range_images() {
        assert!(matches!(
            ImageTensor::filled(7, 8, [0.0; 3]),
            Err(Error::TooSmall { .. })
        ));
        let mut d = vec![0.5f32; 192];
        d[5] = 1.5;
        assert!(matches!(
            ImageTensor::new(8, 8, d),
            Err(Error::OutOfRange { index: 5, .. })
        ));
    }

    #[test]
    fn reflect_padding_round_trips_through_crop() {
        let img = ImageTensor::new(9, 10, (0..270).map(|i| (i % 17) as f32 / 16.0).collect()).unwrap();
        let padded = pad_to_multiple(&img, 8);
        assert_eq!((padded.height(), padded.width()), (16, 16));
        assert_eq!(padded.pixel(9, 0), img.pixel(7, 0));
        assert_eq!(padded.crop(0, 0, 9, 10).unwrap(), img);
    }
}
