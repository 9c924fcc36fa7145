//! Illumination-map extraction, brighten/darken transforms and the
//! pseudo-normal feature generator.
//!
//! For an input `I` and extractor `f`:
//!
//! * brightened features `F_B = I / max(f(I), floor)`
//! * darkened features   `F_D = 1 - (1 - I) / max(f(1 - I), floor)`
//!
//! Both maps are at most one, so brightening never lowers a value and
//! darkening never raises one.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{div_floor_forward, Graph, Var};
use crate::nn::{ConvLayer, Init};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Default lower bound of illumination maps.
pub const DEFAULT_FLOOR: f64 = 1e-3;

/// Extractor output with values in `[floor, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IlluminationMap<T> {
    data: Tensor<T>,
    floor: T,
}

impl<T: Real> IlluminationMap<T> {
    pub fn new(data: Tensor<T>, floor: T) -> Result<Self> {
        if floor <= T::ZERO {
            return Err(Error::Config(alloc::format!(
                "illumination floor must be positive, got {floor}"
            )));
        }
        if let Some((index, &v)) = data
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v >= floor && v <= T::ONE))
        {
            return Err(Error::OutOfRange {
                index,
                value: v.to_f64(),
                lo: floor.to_f64(),
                hi: 1.0,
            });
        }
        Ok(Self { data, floor })
    }

    /// Wraps raw values without the range check; division still applies the
    /// floor. Used for probing the protected division directly.
    pub fn unchecked(data: Tensor<T>, floor: T) -> Self {
        Self { data, floor }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn floor(&self) -> T {
        self.floor
    }
}

/// Three-channel intermediate feature map (`F_B`, `F_D`, `F_N`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T>(pub Tensor<T>);

impl<T: Real> FeatureMap<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

/// `I / max(L, floor)`, broadcasting a one-channel map over colour channels.
pub fn brighten<T: Real>(img: &Tensor<T>, lum: &IlluminationMap<T>) -> FeatureMap<T> {
    FeatureMap(div_floor_forward(img, lum.tensor(), lum.floor()))
}

/// `1 - (1 - I) / max(L, floor)`.
pub fn darken<T: Real>(img: &Tensor<T>, lum: &IlluminationMap<T>) -> FeatureMap<T> {
    let inv = img.map(|v| T::ONE - v);
    FeatureMap(div_floor_forward(&inv, lum.tensor(), lum.floor()).map(|v| T::ONE - v))
}

pub fn brighten_graph<T: Real>(g: &mut Graph<'_, T>, img: Var, lum: Var, floor: f64) -> Result<Var> {
    g.div_floor(img, lum, T::from_f64(floor))
}

pub fn darken_graph<T: Real>(g: &mut Graph<'_, T>, img: Var, lum: Var, floor: f64) -> Result<Var> {
    let inv = g.one_minus(img);
    let q = g.div_floor(inv, lum, T::from_f64(floor))?;
    Ok(g.one_minus(q))
}

/// Encoder–decoder extractor `f(·)`: per level two 3×3 convolutions, average
/// pooling on the way down, bilinear upsampling with skip concatenation on
/// the way up, and a 1×1 head squashed into `[floor, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    encoder: Vec<(ConvLayer, ConvLayer)>,
    bottleneck: (ConvLayer, ConvLayer),
    decoder: Vec<(ConvLayer, ConvLayer)>,
    head: ConvLayer,
    floor: f64,
    slope: f64,
}

impl Extractor {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        depth: usize,
        width: usize,
        bottleneck: usize,
        out_channels: usize,
        floor: f64,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 || width == 0 {
            return Err(Error::Config("extractor depth and width must be positive".into()));
        }
        let ch = |l: usize| width << l;
        let mut encoder = Vec::with_capacity(depth);
        for l in 0..depth {
            let cin = if l == 0 { 3 } else { ch(l - 1) };
            let a = ConvLayer::register(
                store,
                &alloc::format!("{prefix}.enc{l}.conv0"),
                cin,
                ch(l),
                3,
                true,
                Init::He,
                rng,
            )?;
            let b = ConvLayer::register(
                store,
                &alloc::format!("{prefix}.enc{l}.conv1"),
                ch(l),
                ch(l),
                3,
                true,
                Init::He,
                rng,
            )?;
            encoder.push((a, b));
        }
        let deep = ch(depth - 1);
        let bottleneck = (
            ConvLayer::register(
                store,
                &alloc::format!("{prefix}.mid.conv0"),
                deep,
                bottleneck,
                3,
                true,
                Init::He,
                rng,
            )?,
            ConvLayer::register(
                store,
                &alloc::format!("{prefix}.mid.conv1"),
                bottleneck,
                deep,
                3,
                true,
                Init::He,
                rng,
            )?,
        );
        let mut decoder = Vec::with_capacity(depth);
        for l in (0..depth).rev() {
            let out = if l == 0 { ch(0) } else { ch(l - 1) };
            let a = ConvLayer::register(
                store,
                &alloc::format!("{prefix}.dec{l}.conv0"),
                2 * ch(l),
                ch(l),
                3,
                true,
                Init::He,
                rng,
            )?;
            let b = ConvLayer::register(
                store,
                &alloc::format!("{prefix}.dec{l}.conv1"),
                ch(l),
                out,
                3,
                true,
                Init::He,
                rng,
            )?;
            decoder.push((a, b));
        }
        let head = ConvLayer::register(
            store,
            &alloc::format!("{prefix}.head"),
            ch(0),
            out_channels,
            1,
            true,
            Init::Glorot,
            rng,
        )?;
        Ok(Self {
            encoder,
            bottleneck,
            decoder,
            head,
            floor,
            slope,
        })
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = g.shape(x);
        let m = 1usize << self.depth();
        if h % m != 0 || w % m != 0 {
            return Err(Error::NotDivisible {
                height: h,
                width: w,
                multiple: m,
            });
        }
        let slope = T::from_f64(self.slope);
        let mut skips = Vec::with_capacity(self.depth());
        let mut cur = x;
        for (a, b) in &self.encoder {
            let t = a.apply(g, cur)?;
            let t = g.leaky_relu(t, slope);
            let t = b.apply(g, t)?;
            let t = g.leaky_relu(t, slope);
            skips.push(t);
            cur = g.avg_pool(t, 2);
        }
        let t = self.bottleneck.0.apply(g, cur)?;
        let t = g.leaky_relu(t, slope);
        let t = self.bottleneck.1.apply(g, t)?;
        cur = g.leaky_relu(t, slope);
        for (a, b) in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            let [_, _, sh, sw] = g.shape(skip);
            let up = g.upsample(cur, sh, sw);
            let t = g.concat(&[up, skip])?;
            let t = a.apply(g, t)?;
            let t = g.leaky_relu(t, slope);
            let t = b.apply(g, t)?;
            cur = g.leaky_relu(t, slope);
        }
        let logits = self.head.apply(g, cur)?;
        let s = g.sigmoid(logits);
        let floor = T::from_f64(self.floor);
        Ok(g.affine(s, T::ONE - floor, floor))
    }
}

/// Runs the extractor on one image outside of training.
pub fn extract_illumination<T: Real>(
    img: &Tensor<T>,
    params: &ParamStore<T>,
    extractor: &Extractor,
) -> Result<IlluminationMap<T>> {
    let mut g = Graph::new(params);
    let x = g.constant(img.clone());
    let out = extractor.forward(&mut g, x)?;
    let floor = T::from_f64(extractor.floor());
    // sigmoid saturation in f32 can land a hair outside [floor, 1]
    let data = g.value(out).map(|v| v.max(floor).min(T::ONE));
    IlluminationMap::new(data, floor)
}

/// Pseudo-normal generator `g(F_B, F_D, I)`: per-input 1×1 embeddings,
/// three 3×3 convolutions and a residual connection from `I`.
///
/// The embeddings are either owned by the generator or borrowed from the
/// value projections of the modulation module (weight tying).
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    embed: [ConvLayer; 3],
    convs: [ConvLayer; 3],
    slope: f64,
}

impl Generator {
    /// `shared_embed`: names of existing `3 → embed_dim` 1×1 layers for the
    /// brightened, darkened and image inputs; `None` registers fresh ones.
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        embed_dim: usize,
        width: usize,
        shared_embed: Option<[String; 3]>,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let embed = match shared_embed {
            Some([b, d, i]) => [
                ConvLayer::existing(&b, true),
                ConvLayer::existing(&d, true),
                ConvLayer::existing(&i, true),
            ],
            None => [
                ConvLayer::register(
                    store,
                    &alloc::format!("{prefix}.embed_b"),
                    3,
                    embed_dim,
                    1,
                    true,
                    Init::Glorot,
                    rng,
                )?,
                ConvLayer::register(
                    store,
                    &alloc::format!("{prefix}.embed_d"),
                    3,
                    embed_dim,
                    1,
                    true,
                    Init::Glorot,
                    rng,
                )?,
                ConvLayer::register(
                    store,
                    &alloc::format!("{prefix}.embed_i"),
                    3,
                    embed_dim,
                    1,
                    true,
                    Init::Glorot,
                    rng,
                )?,
            ],
        };
        let convs = [
            ConvLayer::register(
                store,
                &alloc::format!("{prefix}.conv0"),
                3 * embed_dim,
                width,
                3,
                true,
                Init::He,
                rng,
            )?,
            ConvLayer::register(
                store,
                &alloc::format!("{prefix}.conv1"),
                width,
                width,
                3,
                true,
                Init::He,
                rng,
            )?,
            ConvLayer::register(
                store,
                &alloc::format!("{prefix}.conv2"),
                width,
                3,
                3,
                true,
                Init::Glorot,
                rng,
            )?,
        ];
        Ok(Self { embed, convs, slope })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, fb: Var, fd: Var, img: Var) -> Result<Var> {
        let eb = self.embed[0].apply(g, fb)?;
        let ed = self.embed[1].apply(g, fd)?;
        let ei = self.embed[2].apply(g, img)?;
        let slope = T::from_f64(self.slope);
        let mut t = g.concat(&[eb, ed, ei])?;
        for (i, c) in self.convs.iter().enumerate() {
            t = c.apply(g, t)?;
            if i + 1 < self.convs.len() {
                t = g.leaky_relu(t, slope);
            }
        }
        g.add(t, img)
    }
}

/// Runs the generator outside of training.
pub fn generate_pseudo_normal<T: Real>(
    fb: &FeatureMap<T>,
    fd: &FeatureMap<T>,
    img: &Tensor<T>,
    params: &ParamStore<T>,
    generator: &Generator,
) -> Result<FeatureMap<T>> {
    let mut g = Graph::new(params);
    let b = g.constant(fb.0.clone());
    let d = g.constant(fd.0.clone());
    let i = g.constant(img.clone());
    let out = generator.forward(&mut g, b, d, i)?;
    Ok(FeatureMap(g.value(out).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lum(v: f64, shape: [usize; 4]) -> IlluminationMap<f64> {
        IlluminationMap::unchecked(Tensor::full(shape, v), DEFAULT_FLOOR)
    }

    #[test]
    fn unit_illumination_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::<f64>::uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng);
        assert_eq!(brighten(&img, &lum(1.0, [1, 1, 8, 8])).0, img);
        assert_eq!(darken(&img, &lum(1.0, [1, 1, 8, 8])).0, img);
    }

    #[test]
    fn direct_substitution() {
        let img = Tensor::<f64>::full([1, 3, 8, 8], 0.2);
        assert!((brighten(&img, &lum(0.5, [1, 1, 8, 8])).0.data()[0] - 0.4).abs() < 1e-15);
        let img = Tensor::<f64>::full([1, 3, 8, 8], 0.8);
        assert!((darken(&img, &lum(0.5, [1, 1, 8, 8])).0.data()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn floor_protects_division() {
        let img = Tensor::<f64>::full([1, 3, 8, 8], 0.2);
        let out = brighten(&img, &lum(0.0, [1, 1, 8, 8]));
        // scalar evaluation of 0.2 / max(0, 1e-3)
        let want = 0.2 / f64::max(0.0, 1e-3);
        assert!(out.0.data().iter().all(|&v| (v - want).abs() < 1e-9));
        assert!((want - 200.0).abs() < 1e-9);
    }

    #[test]
    fn map_constructor_enforces_range() {
        assert!(IlluminationMap::new(Tensor::<f64>::full([1, 1, 8, 8], 0.0), 1e-3).is_err());
        assert!(IlluminationMap::new(Tensor::<f64>::full([1, 1, 8, 8], 1.2), 1e-3).is_err());
        assert!(IlluminationMap::new(Tensor::<f64>::full([1, 1, 8, 8], 0.5), 0.0).is_err());
        assert!(IlluminationMap::new(Tensor::<f64>::full([1, 1, 8, 8], 0.5), 1e-3).is_ok());
    }

    #[test]
    fn extractor_output_range_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f32>::new();
        let ex = Extractor::register(&mut store, "f", 3, 4, 8, 1, DEFAULT_FLOOR, 0.1, &mut rng).unwrap();
        let img = Tensor::<f32>::uniform([1, 3, 32, 32], 0.0, 1.0, &mut rng);
        let a = extract_illumination(&img, &store, &ex).unwrap();
        let b = extract_illumination(&img, &store, &ex).unwrap();
        assert_eq!(a.tensor().shape(), [1, 1, 32, 32]);
        assert!(a.tensor().all_finite());
        assert!(a.tensor().data().iter().all(|&v| (1e-3..=1.0).contains(&v)));
        assert_eq!(
            a.tensor().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.tensor().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn extractor_rejects_indivisible_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let ex = Extractor::register(&mut store, "f", 3, 4, 8, 1, DEFAULT_FLOOR, 0.1, &mut rng).unwrap();
        let img = Tensor::<f32>::zeros([1, 3, 20, 24]);
        assert!(matches!(
            extract_illumination(&img, &store, &ex),
            Err(Error::NotDivisible { multiple: 8, .. })
        ));
    }

    #[test]
    fn generator_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let gen = Generator::register(&mut store, "g", 8, 16, None, 0.1, &mut rng).unwrap();
        let img = Tensor::<f32>::uniform([1, 3, 12, 10], 0.0, 1.0, &mut rng);
        let fb = FeatureMap(img.map(|v| v * 1.5));
        let fd = FeatureMap(img.map(|v| v * 0.5));
        let a = generate_pseudo_normal(&fb, &fd, &img, &store, &gen).unwrap();
        let b = generate_pseudo_normal(&fb, &fd, &img, &store, &gen).unwrap();
        assert_eq!(a.0.shape(), [1, 3, 12, 10]);
        assert_eq!(a, b);
    }
}
