//! Colour-shift diagnostic: exposure labels and PCA of per-pixel
//! `input − gt` differences.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Pair;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ExposureLabel {
    Over,
    Under,
    Normal,
}

impl ExposureLabel {
    pub const ALL: [Self; 3] = [Self::Over, Self::Under, Self::Normal];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Over => "over",
            Self::Under => "under",
            Self::Normal => "normal",
        }
    }
}

/// Labels each pixel by the channel-mean difference `input − gt` against
/// `±tau`.
pub fn classify_exposure(input: &ImageTensor, gt: &ImageTensor, tau: f64) -> Result<Vec<ExposureLabel>> {
    if (input.height(), input.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape {
            op: "classify_exposure",
            detail: alloc::format!("{}x{} vs {}x{}", input.height(), input.width(), gt.height(), gt.width()),
        });
    }
    let hw = input.height() * input.width();
    let (a, b) = (input.data(), gt.data());
    Ok((0..hw)
        .map(|p| {
            let d: f64 = (0..3).map(|c| a[c * hw + p] as f64 - b[c * hw + p] as f64).sum::<f64>() / 3.0;
            if d > tau {
                ExposureLabel::Over
            } else if d < -tau {
                ExposureLabel::Under
            } else {
                ExposureLabel::Normal
            }
        })
        .collect())
}

/// Eigenvalues (descending) and unit eigenvectors (rows) of a symmetric
/// 3×3 matrix by cyclic Jacobi rotations.
pub fn symmetric_eigen3(m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..64 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        let scale: f64 = (0..3).map(|i| a[i][i] * a[i][i]).sum::<f64>() + off;
        if off <= 1e-30 * scale || off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / libm::sqrt(t * t + 1.0);
            let s = t * c;
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.map(|i| a[i][i]);
    let vectors = order.map(|i| {
        let mut e = [v[0][i], v[1][i], v[2][i]];
        // sign convention: largest-magnitude component positive
        let big = (0..3).max_by(|&x, &y| e[x].abs().total_cmp(&e[y].abs())).unwrap_or(0);
        if e[big] < 0.0 {
            e = e.map(|x| -x);
        }
        e
    });
    (values, vectors)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftPoint {
    pub x: f64,
    pub y: f64,
    pub label: ExposureLabel,
}

/// Mean projection and sample count of one label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelMean {
    pub label: ExposureLabel,
    pub mean: [f64; 2],
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftPca {
    pub points: Vec<ShiftPoint>,
    /// Top two principal directions in RGB-difference space.
    pub components: [[f64; 3]; 2],
    pub eigenvalues: [f64; 3],
    /// Number of eigenvalues above a relative tolerance; below 2 the 2-D
    /// projection is degenerate.
    pub rank: usize,
    pub centre: [f64; 3],
    pub label_means: Vec<LabelMean>,
}

impl ShiftPca {
    pub fn label_mean(&self, label: ExposureLabel) -> Result<[f64; 2]> {
        self.label_means
            .iter()
            .find(|m| m.label == label)
            .map(|m| m.mean)
            .ok_or(Error::EmptyLabel(label.as_str()))
    }

    /// Dot product of the mean over- and under-exposure projections.
    pub fn over_under_dot(&self) -> Result<f64> {
        let o = self.label_mean(ExposureLabel::Over)?;
        let u = self.label_mean(ExposureLabel::Under)?;
        Ok(o[0] * u[0] + o[1] * u[1])
    }
}

/// Samples `samples_per_image` distinct pixels per pair, labels them and
/// projects their difference vectors onto the top two principal components.
pub fn pca_color_shift(pairs: &[Pair], samples_per_image: usize, seed: u64, tau: f64) -> Result<ShiftPca> {
    if pairs.is_empty() {
        return Err(Error::Invalid("need at least one image pair".into()));
    }
    if samples_per_image == 0 {
        return Err(Error::Invalid("samples_per_image must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diffs: Vec<([f64; 3], ExposureLabel)> = Vec::new();
    for pair in pairs {
        let labels = classify_exposure(&pair.input, &pair.gt, tau)?;
        let hw = labels.len();
        let (a, b) = (pair.input.data(), pair.gt.data());
        for p in sample(&mut rng, hw, samples_per_image.min(hw)) {
            let d = core::array::from_fn(|c| a[c * hw + p] as f64 - b[c * hw + p] as f64);
            diffs.push((d, labels[p]));
        }
    }
    let n = diffs.len() as f64;
    let mut centre = [0.0; 3];
    for (d, _) in &diffs {
        for c in 0..3 {
            centre[c] += d[c] / n;
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for (d, _) in &diffs {
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += (d[i] - centre[i]) * (d[j] - centre[j]) / n;
            }
        }
    }
    let (eigenvalues, vectors) = symmetric_eigen3(cov);
    let tol = 1e-12 * eigenvalues[0].abs().max(1e-300);
    let rank = if eigenvalues[0] <= 1e-300 {
        0
    } else {
        eigenvalues.iter().filter(|&&e| e > tol).count()
    };
    let components = [vectors[0], vectors[1]];
    let project = |d: &[f64; 3], k: usize| (0..3).map(|c| (d[c] - centre[c]) * components[k][c]).sum::<f64>();
    let points: Vec<ShiftPoint> = diffs
        .iter()
        .map(|(d, l)| ShiftPoint {
            x: project(d, 0),
            y: project(d, 1),
            label: *l,
        })
        .collect();
    let label_means = ExposureLabel::ALL
        .iter()
        .filter_map(|&label| {
            let sel: Vec<&ShiftPoint> = points.iter().filter(|p| p.label == label).collect();
            (!sel.is_empty()).then(|| {
                let k = sel.len() as f64;
                LabelMean {
                    label,
                    mean: [
                        sel.iter().map(|p| p.x).sum::<f64>() / k,
                        sel.iter().map(|p| p.y).sum::<f64>() / k,
                    ],
                    count: sel.len(),
                }
            })
        })
        .collect();
    Ok(ShiftPca {
        points,
        components,
        eigenvalues,
        rank,
        centre,
        label_means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_degraded, synthetic_scene, DegradationSpec};
    use rand::Rng;

    /// Closed-form eigenvalues of a symmetric 3×3 matrix (trigonometric
    /// solution of the characteristic cubic), descending.
    fn trig_eigenvalues(a: [[f64; 3]; 3]) -> [f64; 3] {
        let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
        let p2 = (0..3).map(|i| (a[i][i] - q) * (a[i][i] - q)).sum::<f64>() + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        if p == 0.0 {
            return [q; 3];
        }
        let b: [[f64; 3]; 3] =
            core::array::from_fn(|i| core::array::from_fn(|j| (a[i][j] - if i == j { q } else { 0.0 }) / p));
        let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
            + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
        let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * core::f64::consts::PI / 3.0).cos();
        [e1, 3.0 * q - e1 - e3, e3]
    }

    #[test]
    fn jacobi_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let mut m = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in i..3 {
                    let v = rng.random_range(-2.0..2.0);
                    m[i][j] = v;
                    m[j][i] = v;
                }
            }
            let (vals, vecs) = symmetric_eigen3(m);
            let want = trig_eigenvalues(m);
            for k in 0..3 {
                assert!((vals[k] - want[k]).abs() < 1e-10, "{vals:?} {want:?}");
                // A v = lambda v
                for i in 0..3 {
                    let av: f64 = (0..3).map(|j| m[i][j] * vecs[k][j]).sum();
                    assert!((av - vals[k] * vecs[k][i]).abs() < 1e-9);
                }
            }
        }
    }

    fn offset(img: &ImageTensor, d: f32) -> ImageTensor {
        ImageTensor::new(img.height(), img.width(), img.data().iter().map(|v| v + d).collect()).unwrap()
    }

    #[test]
    fn labels_for_simple_offsets() {
        let scene = synthetic_scene(16, 16, 1).unwrap();
        let gt = ImageTensor::new(16, 16, scene.data().iter().map(|v| v * 0.9).collect()).unwrap();
        let same = classify_exposure(&gt, &gt, DEFAULT_TAU).unwrap();
        assert!(same.iter().all(|&l| l == ExposureLabel::Normal));
        let up = classify_exposure(&offset(&gt, 0.3), &gt, DEFAULT_TAU).unwrap();
        assert!(up.iter().all(|&l| l == ExposureLabel::Over));
        let down = classify_exposure(&offset(&gt, -0.15), &gt, DEFAULT_TAU).unwrap();
        assert!(down.iter().all(|&l| l == ExposureLabel::Under));
    }

    #[test]
    fn labels_agree_with_generator_masks() {
        for seed in 0..6 {
            let gt = synthetic_scene(48, 48, 30 + seed).unwrap();
            let d = synthesize_degraded(
                &gt,
                &DegradationSpec {
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            let labels = classify_exposure(&d.input, &gt, DEFAULT_TAU).unwrap();
            let (mut hit, mut total) = (0, 0);
            for y in 0..48 {
                for x in 0..48 {
                    if !(d.over.is_interior(y, x) && d.under.is_interior(y, x)) {
                        continue;
                    }
                    let p = y * 48 + x;
                    let want = if d.over.get(y, x) {
                        ExposureLabel::Over
                    } else if d.under.get(y, x) {
                        ExposureLabel::Under
                    } else {
                        ExposureLabel::Normal
                    };
                    total += 1;
                    hit += (labels[p] == want) as usize;
                }
            }
            assert!(hit as f64 >= 0.9 * total as f64, "seed {seed}: {hit}/{total}");
        }
    }

    #[test]
    fn identical_pairs_are_degenerate() {
        let gt = synthetic_scene(16, 16, 2).unwrap();
        let pca = pca_color_shift(&[Pair::new(gt.clone(), gt).unwrap()], 50, 0, DEFAULT_TAU).unwrap();
        assert_eq!(pca.rank, 0);
        assert_eq!(pca.eigenvalues, [0.0; 3]);
        assert!(pca.over_under_dot().is_err());
        assert!(pca.label_mean(ExposureLabel::Normal).is_ok());
    }

    #[test]
    fn collinear_differences_have_rank_one() {
        // dyadic values keep every difference exactly on the line
        let gt = ImageTensor::filled(16, 16, [0.5; 3]).unwrap();
        let hw = 256;
        let mut data = gt.data().to_vec();
        for p in 0..hw {
            let t = ((p % 9) as f32 - 4.0) / 16.0;
            for (c, w) in [1.0f32, 0.5, -0.25].iter().enumerate() {
                data[c * hw + p] += t * w;
            }
        }
        let input = ImageTensor::new(16, 16, data).unwrap();
        let pca = pca_color_shift(&[Pair::new(input, gt).unwrap()], 256, 0, 0.01).unwrap();
        assert_eq!(pca.rank, 1);
        assert!(pca.eigenvalues[1].abs() < 1e-15 * pca.eigenvalues[0]);
    }

    #[test]
    fn reconstruction_loses_third_eigenvalue() {
        let gt = synthetic_scene(32, 32, 5).unwrap();
        let d = synthesize_degraded(&gt, &DegradationSpec::default()).unwrap();
        let pair = Pair::new(d.input.clone(), gt.clone()).unwrap();
        let pca = pca_color_shift(core::slice::from_ref(&pair), 400, 1, DEFAULT_TAU).unwrap();
        // rebuild the sampled differences from the same seed
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = sample(&mut rng, 1024, 400);
        let mut resid = 0.0;
        let mut trace = 0.0;
        for (k, p) in idx.into_iter().enumerate() {
            let diff: [f64; 3] = core::array::from_fn(|c| {
                d.input.data()[c * 1024 + p] as f64 - gt.data()[c * 1024 + p] as f64 - pca.centre[c]
            });
            let pt = pca.points[k];
            for c in 0..3 {
                let back = pt.x * pca.components[0][c] + pt.y * pca.components[1][c];
                resid += (diff[c] - back) * (diff[c] - back) / 400.0;
                trace += diff[c] * diff[c] / 400.0;
            }
        }
        let e = pca.eigenvalues;
        assert!((trace - e.iter().sum::<f64>()).abs() < 1e-12);
        assert!((resid - e[2]).abs() < 1e-12, "{resid} {}", e[2]);
    }

    #[test]
    fn opposite_shifts_on_synthetic_pairs() {
        let pairs: Vec<Pair> = (0..20)
            .map(|i| {
                let gt = synthetic_scene(32, 32, 200 + i).unwrap();
                let d = synthesize_degraded(
                    &gt,
                    &DegradationSpec {
                        seed: i,
                        ..Default::default()
                    },
                )
                .unwrap();
                Pair::new(d.input, gt).unwrap()
            })
            .collect();
        let a = pca_color_shift(&pairs, 200, 7, DEFAULT_TAU).unwrap();
        let b = pca_color_shift(&pairs, 200, 7, DEFAULT_TAU).unwrap();
        assert_eq!(a, b);
        assert!(a.over_under_dot().unwrap() < 0.0);
        assert!(pca_color_shift(&pairs, 0, 7, DEFAULT_TAU).is_err());
    }
}
