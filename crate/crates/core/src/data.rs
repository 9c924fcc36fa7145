//! Training pairs, patch sampling and a synthetic mixed-exposure generator.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

/// An input image and its reference exposure.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub input: ImageTensor,
    pub gt: ImageTensor,
}

impl Pair {
    pub fn new(input: ImageTensor, gt: ImageTensor) -> Result<Self> {
        if (input.height(), input.width()) != (gt.height(), gt.width()) {
            return Err(Error::Shape {
                op: "pair",
                detail: alloc::format!(
                    "input {}x{} vs gt {}x{}",
                    input.height(),
                    input.width(),
                    gt.height(),
                    gt.width()
                ),
            });
        }
        Ok(Self { input, gt })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Augment {
    pub hflip: bool,
    pub rot90: bool,
}

pub fn flip_horizontal(img: &ImageTensor) -> ImageTensor {
    let w = img.width();
    img.remap(img.height(), w, |y, x| (y, w - 1 - x))
}

/// Rotates by `k` quarter turns counter-clockwise.
pub fn rot90(img: &ImageTensor, k: usize) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    match k % 4 {
        0 => img.clone(),
        1 => img.remap(w, h, |y, x| (x, w - 1 - y)),
        2 => img.remap(h, w, |y, x| (h - 1 - y, w - 1 - x)),
        _ => img.remap(w, h, |y, x| (h - 1 - x, y)),
    }
}

/// Random `patch × patch` window of a pair with the same crop and
/// augmentation applied to both images.
pub fn sample_patch<R: Rng + ?Sized>(pair: &Pair, patch: usize, aug: Augment, rng: &mut R) -> Result<Pair> {
    let (h, w) = (pair.gt.height(), pair.gt.width());
    if patch > h || patch > w {
        return Err(Error::Invalid(alloc::format!("patch {patch} exceeds image {h}x{w}")));
    }
    let y = rng.random_range(0..=h - patch);
    let x = rng.random_range(0..=w - patch);
    let flip = aug.hflip && rng.random::<bool>();
    let turns = if aug.rot90 { rng.random_range(0..4) } else { 0 };
    let apply = |img: &ImageTensor| -> Result<ImageTensor> {
        let c = img.crop(y, x, patch, patch)?;
        let c = if flip { flip_horizontal(&c) } else { c };
        Ok(rot90(&c, turns))
    };
    Ok(Pair {
        input: apply(&pair.input)?,
        gt: apply(&pair.gt)?,
    })
}

/// Binary per-pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Invalid(alloc::format!(
                "mask of {} values for {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// True when the pixel and its 8 neighbours share a value.
    pub fn is_interior(&self, y: usize, x: usize) -> bool {
        let v = self.get(y, x);
        let ys = y.saturating_sub(1)..=(y + 1).min(self.height - 1);
        ys.into_iter()
            .all(|yy| (x.saturating_sub(1)..=(x + 1).min(self.width - 1)).all(|xx| self.get(yy, xx) == v))
    }
}

/// Parameters of the mixed-exposure degradation.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DegradationSpec {
    /// Cells per side of the random field that is cut into regions.
    pub region_count: usize,
    /// Exponent range for over-exposed regions; below 1.
    pub gamma_over: [f64; 2],
    /// Exponent range for under-exposed regions; above 1.
    pub gamma_under: [f64; 2],
    /// Per-channel amplitude of the tone shift.
    pub tone_shift: [f64; 3],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            region_count: 3,
            gamma_over: [0.4, 0.55],
            gamma_under: [1.7, 2.3],
            tone_shift: [0.08; 3],
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        let [olo, ohi] = self.gamma_over;
        let [ulo, uhi] = self.gamma_under;
        if !(olo > 0.0 && olo <= ohi && ohi <= 0.9 + 1e-12) {
            return bad("gamma_over must satisfy 0 < lo <= hi <= 0.9");
        }
        if !(ulo >= 1.1 - 1e-12 && ulo <= uhi && uhi.is_finite()) {
            return bad("gamma_under must satisfy 1.1 <= lo <= hi");
        }
        if self.region_count == 0 {
            return bad("region_count must be positive");
        }
        if self.tone_shift.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(self.noise_sigma >= 0.0) {
            return bad("tone_shift and noise_sigma must be non-negative");
        }
        Ok(())
    }
}

/// Output of [`synthesize_degraded`].
#[derive(Clone, Debug, PartialEq)]
pub struct Degraded {
    pub input: ImageTensor,
    pub over: Mask,
    pub under: Mask,
    pub gamma_over: f64,
    pub gamma_under: f64,
    /// Offset added in over-exposed regions and subtracted in under-exposed
    /// ones. Sums to zero over channels.
    pub shift: [f64; 3],
}

fn field<R: Rng + ?Sized>(h: usize, w: usize, cells: usize, rng: &mut R) -> Vec<f64> {
    let g = cells + 1;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = (y as f64 + 0.5) / h as f64 * cells as f64;
        let (y0, ty) = ((fy as usize).min(cells - 1), fy - (fy as usize).min(cells - 1) as f64);
        for x in 0..w {
            let fx = (x as f64 + 0.5) / w as f64 * cells as f64;
            let (x0, tx) = ((fx as usize).min(cells - 1), fx - (fx as usize).min(cells - 1) as f64);
            // smoothstep weights remove the grid's creases
            let (sy, sx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
            let at = |yy: usize, xx: usize| grid[yy * g + xx];
            let top = at(y0, x0) * (1.0 - sx) + at(y0, x0 + 1) * sx;
            let bot = at(y0 + 1, x0) * (1.0 - sx) + at(y0 + 1, x0 + 1) * sx;
            out[y * w + x] = top * (1.0 - sy) + bot * sy;
        }
    }
    out
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    s[libm::round((s.len() - 1) as f64 * q) as usize]
}

/// Splits the image into under / normal / over regions by cutting a smooth
/// random field at its terciles, then applies per-region gamma curves, a
/// chroma offset `±shift` and noise in the dark regions.
pub fn synthesize_degraded(gt: &ImageTensor, spec: &DegradationSpec) -> Result<Degraded> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (gt.height(), gt.width());
    let f = field(h, w, spec.region_count, &mut rng);
    let (lo, hi) = (quantile(&f, 1.0 / 3.0), quantile(&f, 2.0 / 3.0));
    let over: Vec<bool> = f.iter().map(|&v| v > hi).collect();
    let under: Vec<bool> = f.iter().map(|&v| v < lo).collect();
    let pick = |r: [f64; 2], rng: &mut ChaCha8Rng| {
        if r[0] < r[1] {
            rng.random_range(r[0]..=r[1])
        } else {
            r[0]
        }
    };
    let gamma_over = pick(spec.gamma_over, &mut rng);
    let gamma_under = pick(spec.gamma_under, &mut rng);
    // random direction in the zero-sum (chroma) plane of RGB
    let theta = rng.random_range(0.0..core::f64::consts::TAU);
    let (a, b) = (libm::cos(theta) / libm::sqrt(2.0), libm::sin(theta) / libm::sqrt(6.0));
    let raw = [a + b, -a + b, -2.0 * b].map(|v| v * libm::sqrt(1.5));
    let scaled: [f64; 3] = core::array::from_fn(|c| spec.tone_shift[c] * raw[c]);
    let mean = (scaled[0] + scaled[1] + scaled[2]) / 3.0;
    let shift = scaled.map(|v| v - mean);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(alloc::format!("{e}")))?;
    let hw = h * w;
    let mut data = gt.data().to_vec();
    for c in 0..3 {
        for p in 0..hw {
            let v = data[c * hw + p] as f64;
            let out = if over[p] {
                libm::pow(v, gamma_over) + shift[c]
            } else if under[p] {
                let n = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                libm::pow(v, gamma_under) - shift[c] + n
            } else {
                v
            };
            data[c * hw + p] = out.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(Degraded {
        input: ImageTensor::new(h, w, data)?,
        over: Mask::new(h, w, over)?,
        under: Mask::new(h, w, under)?,
        gamma_over,
        gamma_under,
        shift,
    })
}

/// Smooth random scene: a two-colour gradient with soft-edged ellipses and
/// rectangles and a faint texture. Values stay in `[0.2, 0.75]`.
pub fn synthetic_scene(height: usize, width: usize, seed: u64) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (0.2f64, 0.75f64);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { core::array::from_fn(|_| rng.random_range(lo..=hi)) };
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle = rng.random_range(0.0..core::f64::consts::TAU);
    let (dx, dy) = (libm::cos(angle), libm::sin(angle));
    let hw = height * width;
    let mut img = vec![0.0f64; 3 * hw];
    let (hf, wf) = (height as f64, width as f64);
    for y in 0..height {
        for x in 0..width {
            let t = ((x as f64 / wf - 0.5) * dx + (y as f64 / hf - 0.5) * dy + 0.71) / 1.42;
            for c in 0..3 {
                img[c * hw + y * width + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let shapes = rng.random_range(3..=6);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let (cy, cx) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
        let (ry, rx) = (rng.random_range(0.1..0.35) * hf, rng.random_range(0.1..0.35) * wf);
        let ellipse = rng.random::<bool>();
        for y in 0..height {
            for x in 0..width {
                let (u, v) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                // signed distance in units of the radius, softened over ~1.5 px
                let d = if ellipse {
                    libm::sqrt(u * u + v * v)
                } else {
                    u.abs().max(v.abs())
                };
                let a = ((1.0 - d) * ry.min(rx) / 1.5 + 0.5).clamp(0.0, 1.0);
                for c in 0..3 {
                    let p = &mut img[c * hw + y * width + x];
                    *p = *p * (1.0 - a) + col[c] * a;
                }
            }
        }
    }
    let (fy, fx) = (rng.random_range(0.2..0.6), rng.random_range(0.2..0.6));
    for y in 0..height {
        for x in 0..width {
            let t = 0.02 * libm::sin(fy * y as f64) * libm::cos(fx * x as f64);
            for c in 0..3 {
                let p = &mut img[c * hw + y * width + x];
                *p = (*p + t).clamp(lo, hi);
            }
        }
    }
    ImageTensor::new(height, width, img.into_iter().map(|v| v as f32).collect())
}

/// A degraded scene together with its ground truth and masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub pair: Pair,
    pub degraded: Degraded,
}

/// `count` scenes of `size × size`; pair `i` is seeded from
/// `(spec.seed, i)` and does not depend on `count`.
pub fn synthetic_pairs(count: usize, size: usize, spec: &DegradationSpec) -> Result<Vec<SyntheticPair>> {
    (0..count)
        .map(|i| {
            let base = spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
            let gt = synthetic_scene(size, size, base)?;
            let d = synthesize_degraded(
                &gt,
                &DegradationSpec {
                    seed: base ^ 0x5eed,
                    ..spec.clone()
                },
            )?;
            Ok(SyntheticPair {
                pair: Pair::new(d.input.clone(), gt)?,
                degraded: d,
            })
        })
        .collect()
}
