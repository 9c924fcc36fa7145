//! Colour shift estimation: offset prediction heads plus the colour-space
//! deformable convolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::illumination::FeatureMap;
use crate::nn::{ConvLayer, Init};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Which offsets the deformable convolution uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DeformMode {
    /// Plain convolution, no heads.
    None,
    /// Positional offsets only.
    Spatial,
    /// Positional offsets and modulation.
    SpatialModulation,
    /// Positional and colour offsets.
    SpatialColor,
    #[default]
    Full,
}

impl DeformMode {
    pub const ALL: [DeformMode; 5] = [
        DeformMode::None,
        DeformMode::Spatial,
        DeformMode::SpatialModulation,
        DeformMode::SpatialColor,
        DeformMode::Full,
    ];

    pub fn uses_offsets(self) -> bool {
        self != DeformMode::None
    }
    pub fn uses_color(self) -> bool {
        matches!(self, DeformMode::SpatialColor | DeformMode::Full)
    }
    pub fn uses_modulation(self) -> bool {
        matches!(self, DeformMode::SpatialModulation | DeformMode::Full)
    }
}

/// Per-pixel offsets for one feature map; absent parts are not predicted in
/// the configured mode.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetBundle<T> {
    /// `(n, 2K, h, w)`, `(dy, dx)` pairs per tap.
    pub dp: Option<Tensor<T>>,
    /// `(n, 3K, h, w)`, a colour vector per tap.
    pub dc: Option<Tensor<T>>,
    /// `(n, K, h, w)` in `[0, 1]`.
    pub dm: Option<Tensor<T>>,
}

/// Three-channel shift map produced for the brightened or darkened branch.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetMap<T>(pub Tensor<T>);

impl<T: Real> OffsetMap<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Heads and main kernel of one estimation module.
#[derive(Clone, Debug, PartialEq)]
pub struct Cose {
    offset_head: Option<ConvLayer>,
    color_head: Option<ConvLayer>,
    modulation_head: Option<ConvLayer>,
    kernel: ConvLayer,
    mode: DeformMode,
    size: usize,
}

impl Cose {
    /// Heads start at zero. The main kernel starts as a centre-tap identity
    /// plus small noise, so an untrained module passes a scaled copy of its
    /// input.
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        size: usize,
        mode: DeformMode,
        rng: &mut R,
    ) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::Config(alloc::format!("kernel size must be odd, got {size}")));
        }
        let taps = size * size;
        let head = |store: &mut ParamStore<T>, name: &str, cout: usize, rng: &mut R| {
            ConvLayer::register(
                store,
                &alloc::format!("{prefix}.{name}"),
                6,
                cout,
                3,
                true,
                Init::Zero,
                rng,
            )
        };
        let offset_head = match mode.uses_offsets() {
            true => Some(head(store, "offset_head", 2 * taps, rng)?),
            false => None,
        };
        let color_head = match mode.uses_color() {
            true => Some(head(store, "color_head", 3 * taps, rng)?),
            false => None,
        };
        let modulation_head = match mode.uses_modulation() {
            true => Some(head(store, "modulation_head", taps, rng)?),
            false => None,
        };
        let mut k = Tensor::<T>::uniform([3, 3, size, size], -0.05, 0.05, rng);
        for c in 0..3 {
            *k.at_mut(c, c, size / 2, size / 2) += T::ONE;
        }
        let name = alloc::format!("{prefix}.kernel");
        store.insert(&alloc::format!("{name}.weight"), k, true)?;
        Ok(Self {
            offset_head,
            color_head,
            modulation_head,
            kernel: ConvLayer::existing(&name, false),
            mode,
            size,
        })
    }

    pub fn mode(&self) -> DeformMode {
        self.mode
    }

    pub fn kernel_size(&self) -> usize {
        self.size
    }

    pub fn kernel_name(&self) -> &str {
        &self.kernel.weight
    }

    /// Graph nodes `(dp, dc, dm)` predicted from `concat(fn, fx)`.
    pub fn offsets<T: Real>(&self, g: &mut Graph<'_, T>, f_n: Var, fx: Var) -> Result<[Option<Var>; 3]> {
        let (a, b) = (g.shape(f_n), g.shape(fx));
        if a != b || a[1] != 3 {
            return Err(Error::Shape {
                op: "cose offsets",
                detail: alloc::format!("{a:?} and {b:?}"),
            });
        }
        if !self.mode.uses_offsets() {
            return Ok([None, None, None]);
        }
        let cat = g.concat(&[f_n, fx])?;
        let dp = match &self.offset_head {
            Some(h) => Some(h.apply(g, cat)?),
            None => None,
        };
        let dc = match &self.color_head {
            Some(h) => Some(h.apply(g, cat)?),
            None => None,
        };
        let dm = match &self.modulation_head {
            Some(h) => {
                let logits = h.apply(g, cat)?;
                Some(g.sigmoid(logits))
            }
            None => None,
        };
        Ok([dp, dc, dm])
    }

    /// Deformable convolution of `fx` with given offset nodes.
    pub fn deform<T: Real>(&self, g: &mut Graph<'_, T>, fx: Var, off: [Option<Var>; 3]) -> Result<Var> {
        let w = g.param_named(&self.kernel.weight)?;
        if !self.mode.uses_offsets() {
            return g.conv2d(fx, w, None);
        }
        let [dp, dc, dm] = off;
        g.color_deform(fx, dp, dc, dm, w)
    }

    /// Offsets followed by the deformable convolution.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, f_n: Var, fx: Var) -> Result<Var> {
        let off = self.offsets(g, f_n, fx)?;
        self.deform(g, fx, off)
    }
}

pub fn predict_offsets<T: Real>(
    f_n: &FeatureMap<T>,
    fx: &FeatureMap<T>,
    params: &ParamStore<T>,
    cose: &Cose,
) -> Result<OffsetBundle<T>> {
    let mut g = Graph::new(params);
    let a = g.constant(f_n.0.clone());
    let b = g.constant(fx.0.clone());
    let [dp, dc, dm] = cose.offsets(&mut g, a, b)?;
    let get = |v: Option<Var>| v.map(|v| g.value(v).clone());
    Ok(OffsetBundle {
        dp: get(dp),
        dc: get(dc),
        dm: get(dm),
    })
}

pub fn color_deformable_conv<T: Real>(
    fx: &FeatureMap<T>,
    bundle: &OffsetBundle<T>,
    params: &ParamStore<T>,
    cose: &Cose,
) -> Result<OffsetMap<T>> {
    let mut g = Graph::new(params);
    let x = g.constant(fx.0.clone());
    let mut node = |t: &Option<Tensor<T>>| t.as_ref().map(|t| g.constant(t.clone()));
    let off = [node(&bundle.dp), node(&bundle.dc), node(&bundle.dm)];
    let out = cose.deform(&mut g, x, off)?;
    Ok(OffsetMap(g.value(out).clone()))
}

pub fn cose_forward<T: Real>(
    f_n: &FeatureMap<T>,
    fx: &FeatureMap<T>,
    params: &ParamStore<T>,
    cose: &Cose,
) -> Result<OffsetMap<T>> {
    let bundle = predict_offsets(f_n, fx, params, cose)?;
    color_deformable_conv(fx, &bundle, params, cose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(mode: DeformMode) -> (ParamStore<f64>, Cose, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cose = Cose::register(&mut store, "cose", 3, mode, &mut rng).unwrap();
        (store, cose, rng)
    }

    #[test]
    fn zero_heads_give_neutral_offsets() {
        let (store, cose, mut rng) = setup(DeformMode::Full);
        let f = FeatureMap(Tensor::uniform([1, 3, 32, 32], 0.0, 1.0, &mut rng));
        let b = predict_offsets(&f, &f, &store, &cose).unwrap();
        let dp = b.dp.unwrap();
        assert_eq!(dp.shape(), [1, 18, 32, 32]);
        assert!(dp.data().iter().all(|&v| v == 0.0));
        assert_eq!(b.dc.as_ref().unwrap().shape(), [1, 27, 32, 32]);
        assert!(b.dc.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(b.dm.unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_kernel_halves_input() {
        let (mut store, cose, mut rng) = setup(DeformMode::Full);
        let mut k = Tensor::zeros([3, 3, 3, 3]);
        for c in 0..3 {
            *k.at_mut(c, c, 1, 1) = 1.0;
        }
        store.set(cose.kernel_name(), k).unwrap();
        let f = FeatureMap(Tensor::uniform([1, 3, 9, 7], 0.0, 1.0, &mut rng));
        let out = cose_forward(&f, &f, &store, &cose).unwrap();
        assert!(out.0.max_abs_diff(&f.0.map(|v| 0.5 * v)) < 1e-15);
    }

    #[test]
    fn none_mode_is_plain_convolution() {
        let (store, cose, mut rng) = setup(DeformMode::None);
        let f = FeatureMap(Tensor::uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng));
        let out = cose_forward(&f, &f, &store, &cose).unwrap();
        let want = reference::conv2d(&f.0, store.get(cose.kernel_name()).unwrap(), None);
        assert!(out.0.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn degenerate_offsets_match_plain_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (store, cose, _) = setup(DeformMode::Full);
        for _ in 0..10 {
            let x = Tensor::<f64>::uniform([1, 3, 16, 16], -1.0, 1.0, &mut rng);
            let bundle = OffsetBundle {
                dp: Some(Tensor::zeros([1, 18, 16, 16])),
                dc: Some(Tensor::zeros([1, 27, 16, 16])),
                dm: Some(Tensor::full([1, 9, 16, 16], 1.0)),
            };
            let out = color_deformable_conv(&FeatureMap(x.clone()), &bundle, &store, &cose).unwrap();
            let want = reference::conv2d(&x, store.get(cose.kernel_name()).unwrap(), None);
            assert!(out.0.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn zero_modulation_zeroes_output() {
        let (store, cose, mut rng) = setup(DeformMode::Full);
        let x = FeatureMap(Tensor::<f64>::uniform([1, 3, 6, 6], 0.0, 1.0, &mut rng));
        let bundle = OffsetBundle {
            dp: Some(Tensor::uniform([1, 18, 6, 6], -2.0, 2.0, &mut rng)),
            dc: Some(Tensor::uniform([1, 27, 6, 6], -1.0, 1.0, &mut rng)),
            dm: Some(Tensor::zeros([1, 9, 6, 6])),
        };
        let out = color_deformable_conv(&x, &bundle, &store, &cose).unwrap();
        assert!(out.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_offsets_match_scalar_oracle() {
        let (store, cose, mut rng) = setup(DeformMode::Full);
        for _ in 0..5 {
            let x = Tensor::<f64>::uniform([1, 3, 5, 5], 0.0, 1.0, &mut rng);
            let bundle = OffsetBundle {
                dp: Some(Tensor::uniform([1, 18, 5, 5], -3.0, 3.0, &mut rng)),
                dc: Some(Tensor::uniform([1, 27, 5, 5], -0.5, 0.5, &mut rng)),
                dm: Some(Tensor::uniform([1, 9, 5, 5], 0.0, 1.0, &mut rng)),
            };
            let out = color_deformable_conv(&FeatureMap(x.clone()), &bundle, &store, &cose).unwrap();
            let w = store.get(cose.kernel_name()).unwrap();
            let want = reference::color_deform(&x, bundle.dp.as_ref(), bundle.dc.as_ref(), bundle.dm.as_ref(), w);
            assert!(out.0.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn shifting_color_offsets_adds_modulation_mass() {
        let (store, cose, mut rng) = setup(DeformMode::Full);
        let x = FeatureMap(Tensor::<f64>::uniform([1, 3, 6, 6], 0.0, 1.0, &mut rng));
        let dc = Tensor::uniform([1, 27, 6, 6], -0.5, 0.5, &mut rng);
        let dm = Tensor::uniform([1, 9, 6, 6], 0.0, 1.0, &mut rng);
        let delta = [0.3, -0.2, 0.05];
        let mut shifted = dc.clone();
        for t in 0..9 {
            for (c, d) in delta.iter().enumerate() {
                for y in 0..6 {
                    for xx in 0..6 {
                        *shifted.at_mut(0, 3 * t + c, y, xx) += d;
                    }
                }
            }
        }
        let run = |dc: Tensor<f64>| {
            let b = OffsetBundle {
                dp: Some(Tensor::zeros([1, 18, 6, 6])),
                dc: Some(dc),
                dm: Some(dm.clone()),
            };
            color_deformable_conv(&x, &b, &store, &cose).unwrap().0
        };
        let (a, b) = (run(dc), run(shifted));
        for c in 0..3 {
            for y in 0..6 {
                for xx in 0..6 {
                    let mass: f64 = (0..9).map(|t| dm.at(0, t, y, xx)).sum();
                    let diff = b.at(0, c, y, xx) - a.at(0, c, y, xx);
                    assert!((diff - mass * delta[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn every_mode_preserves_shape() {
        for mode in DeformMode::ALL {
            let (store, cose, mut rng) = setup(mode);
            let f = FeatureMap(Tensor::uniform([2, 3, 8, 10], 0.0, 1.0, &mut rng));
            assert_eq!(cose_forward(&f, &f, &store, &cose).unwrap().0.shape(), [2, 3, 8, 10]);
        }
    }
}
