//! Colour modulation: symmetric-affinity attention fusing the image with the
//! brightened and darkened shift maps, plus a plain non-local block used as
//! an ablation.
//!
//! Attention runs on average-pooled token grids; the three-channel result is
//! resized back bilinearly and added to the input image.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNormLayer, ConvLayer, Init};
use crate::ops::attention;
use crate::ops::resample::pooled_size;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AttentionMode {
    #[default]
    Como,
    /// Non-local block over the concatenation of both shift maps and the image.
    NonlocalConcat,
}

/// Smallest power-of-two stride whose pooled grid has at most `max_tokens`
/// positions.
pub fn token_stride(height: usize, width: usize, max_tokens: usize) -> usize {
    let mut s = 1;
    while pooled_size(height, s) * pooled_size(width, s) > max_tokens.max(1) {
        s *= 2;
    }
    s
}

/// `(M, M)` affinity of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix<T> {
    size: usize,
    data: Vec<T>,
}

impl<T: Real> AffinityMatrix<T> {
    pub fn size(&self) -> usize {
        self.size
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn at(&self, p: usize, q: usize) -> T {
        self.data[p * self.size + q]
    }
    /// Bitwise comparison with the transpose.
    pub fn is_symmetric(&self) -> bool {
        let m = self.size;
        (0..m)
            .all(|p| (0..p).all(|q| self.data[p * m + q].to_f64().to_bits() == self.data[q * m + p].to_f64().to_bits()))
    }
    pub fn row_sums(&self) -> Vec<T> {
        self.data
            .chunks(self.size)
            .map(|r| r.iter().fold(T::ZERO, |a, &b| a + b))
            .collect()
    }
}

/// `psi`, `phi` and `z` projections of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchLayers {
    pub psi: ConvLayer,
    pub phi: ConvLayer,
    pub z: ConvLayer,
}

impl BranchLayers {
    fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut one = |what: &str| {
            ConvLayer::register(
                store,
                &alloc::format!("{prefix}.{what}"),
                3,
                d,
                1,
                true,
                Init::Glorot,
                rng,
            )
        };
        Ok(Self {
            psi: one("psi")?,
            phi: one("phi")?,
            z: one("z")?,
        })
    }
}

/// Branch order used throughout: image, brightened, darkened.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Image = 0,
    Bright = 1,
    Dark = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Como {
    prefix: String,
    branches: [BranchLayers; 3],
    w1: ConvLayer,
    w2: ConvLayer,
    w3: ConvLayer,
    w4: ConvLayer,
    bn: [BatchNormLayer; 2],
    max_tokens: usize,
}

/// Graph result of a modulation block.
pub struct ModulationOutput {
    pub image: Var,
    /// Training-mode normalisation nodes, aligned with [`Modulator::bn_layers`].
    pub bn_nodes: Vec<Var>,
}

impl Como {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        max_tokens: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || max_tokens == 0 {
            return Err(Error::Config(
                "embedding width and token budget must be positive".into(),
            ));
        }
        let branches = [
            BranchLayers::register(store, &alloc::format!("{prefix}.i"), d, rng)?,
            BranchLayers::register(store, &alloc::format!("{prefix}.b"), d, rng)?,
            BranchLayers::register(store, &alloc::format!("{prefix}.d"), d, rng)?,
        ];
        let mut mix = |name: &str| {
            ConvLayer::register(
                store,
                &alloc::format!("{prefix}.{name}"),
                d,
                d,
                1,
                false,
                Init::Glorot,
                rng,
            )
        };
        let (w1, w2, w3) = (mix("w1")?, mix("w2")?, mix("w3")?);
        let bn = [
            BatchNormLayer::register(store, &alloc::format!("{prefix}.bn_b"), d)?,
            BatchNormLayer::register(store, &alloc::format!("{prefix}.bn_d"), d)?,
        ];
        let w4 = ConvLayer::register(store, &alloc::format!("{prefix}.w4"), d, 3, 1, true, Init::Glorot, rng)?;
        // a small output projection keeps the untrained block close to identity
        let w4w = store.get_mut(&w4.weight).expect("registered");
        w4w.scale(T::from_f64(0.1));
        Ok(Self {
            prefix: prefix.into(),
            branches,
            w1,
            w2,
            w3,
            w4,
            bn,
            max_tokens,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    /// Value projections `[bright, dark, image]`, the layers a tied
    /// generator borrows.
    pub fn value_layer_names(&self) -> [String; 3] {
        let base = |b: &BranchLayers| b.z.weight.trim_end_matches(".weight").into();
        [
            base(&self.branches[1]),
            base(&self.branches[2]),
            base(&self.branches[0]),
        ]
    }

    pub fn output_layer(&self) -> &ConvLayer {
        &self.w4
    }

    /// Pooled token grid of one input.
    pub fn tokens<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let [_, _, h, w] = g.shape(x);
        g.avg_pool(x, token_stride(h, w, self.max_tokens))
    }

    /// `(psi, phi, z)` of an already pooled input.
    pub fn project<T: Real>(&self, g: &mut Graph<'_, T>, tokens: Var, branch: Branch) -> Result<[Var; 3]> {
        let l = &self.branches[branch as usize];
        Ok([l.psi.apply(g, tokens)?, l.phi.apply(g, tokens)?, l.z.apply(g, tokens)?])
    }

    /// `w1 A_j ⊗ Z_j + w2 A_j ⊗ Z_I`. Both weights are bias-free and act per
    /// token, so the sum is attended once as `A_j ⊗ (w1 Z_j + w2 Z_I)`.
    pub fn cross_modulate<T: Real>(&self, g: &mut Graph<'_, T>, a: Var, zj: Var, zi: Var) -> Result<Var> {
        let v = self.mixed_values(g, zj, zi)?;
        g.attend(v, a)
    }

    fn mixed_values<T: Real>(&self, g: &mut Graph<'_, T>, zj: Var, zi: Var) -> Result<Var> {
        let p = self.w1.apply(g, zj)?;
        let q = self.w2.apply(g, zi)?;
        g.add(p, q)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        img: Var,
        ob: Var,
        od: Var,
        training: bool,
    ) -> Result<ModulationOutput> {
        let s = g.shape(img);
        if g.shape(ob) != s || g.shape(od) != s || s[1] != 3 {
            return Err(Error::Shape {
                op: "como",
                detail: alloc::format!("{:?}, {:?}, {:?}", s, g.shape(ob), g.shape(od)),
            });
        }
        let mut keys = Vec::with_capacity(3);
        let mut vals = Vec::with_capacity(3);
        for (x, br) in [(img, Branch::Image), (ob, Branch::Bright), (od, Branch::Dark)] {
            let t = self.tokens(g, x);
            let [psi, phi, z] = self.project(g, t, br)?;
            keys.push((psi, phi));
            vals.push(z);
        }
        let vb = self.mixed_values(g, vals[1], vals[0])?;
        let fb = g.attention(keys[1].0, keys[1].1, vb, true)?;
        let vd = self.mixed_values(g, vals[2], vals[0])?;
        let fd = g.attention(keys[2].0, keys[2].1, vd, true)?;
        let nb = self.bn[0].apply(g, fb, training, BN_EPS)?;
        let nd = self.bn[1].apply(g, fd, training, BN_EPS)?;
        let zi = self.w3.apply(g, vals[0])?;
        let si = g.attention(keys[0].0, keys[0].1, zi, true)?;
        let mix = g.add(nb, nd)?;
        let mix = g.add(mix, si)?;
        let tok = self.w4.apply(g, mix)?;
        let up = g.upsample(tok, s[2], s[3]);
        let image = g.add(up, img)?;
        Ok(ModulationOutput {
            image,
            bn_nodes: if training { alloc::vec![nb, nd] } else { Vec::new() },
        })
    }
}

/// Non-local block on `concat(O_B, O_D, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NonLocal {
    theta: ConvLayer,
    phi: ConvLayer,
    value: ConvLayer,
    out: ConvLayer,
    max_tokens: usize,
}

impl NonLocal {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        max_tokens: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut one = |name: &str, cin: usize, cout: usize| {
            ConvLayer::register(
                store,
                &alloc::format!("{prefix}.{name}"),
                cin,
                cout,
                1,
                true,
                Init::Glorot,
                rng,
            )
        };
        let (theta, phi, value) = (one("theta", 9, d)?, one("phi", 9, d)?, one("g", 9, d)?);
        let out = one("w", d, 3)?;
        store.get_mut(&out.weight).expect("registered").scale(T::from_f64(0.1));
        Ok(Self {
            theta,
            phi,
            value,
            out,
            max_tokens,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, img: Var, ob: Var, od: Var) -> Result<ModulationOutput> {
        let [_, _, h, w] = g.shape(img);
        let cat = g.concat(&[ob, od, img])?;
        let t = g.avg_pool(cat, token_stride(h, w, self.max_tokens));
        let th = self.theta.apply(g, t)?;
        let ph = self.phi.apply(g, t)?;
        let v = self.value.apply(g, t)?;
        let y = g.attention(th, ph, v, false)?;
        let y = self.out.apply(g, y)?;
        let up = g.upsample(y, h, w);
        Ok(ModulationOutput {
            image: g.add(up, img)?,
            bn_nodes: Vec::new(),
        })
    }
}

/// The configured fusion block.
#[derive(Clone, Debug, PartialEq)]
pub enum Modulator {
    Como(Como),
    NonLocal(NonLocal),
}

impl Modulator {
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        img: Var,
        ob: Var,
        od: Var,
        training: bool,
    ) -> Result<ModulationOutput> {
        match self {
            Modulator::Como(c) => c.forward(g, img, ob, od, training),
            Modulator::NonLocal(n) => n.forward(g, img, ob, od),
        }
    }

    pub fn bn_layers(&self) -> &[BatchNormLayer] {
        match self {
            Modulator::Como(c) => &c.bn,
            Modulator::NonLocal(_) => &[],
        }
    }

    /// Final projection before the residual.
    pub fn output_layer(&self) -> &ConvLayer {
        match self {
            Modulator::Como(c) => &c.w4,
            Modulator::NonLocal(n) => &n.out,
        }
    }

    /// Zeroes the final projection; the block then returns its input image.
    pub fn zero_output<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let l = self.output_layer();
        for name in core::iter::once(&l.weight).chain(l.bias.as_ref()) {
            let t = store
                .get_mut(name)
                .ok_or_else(|| Error::Invalid(alloc::format!("unknown parameter {name}")))?;
            t.data_mut().fill(T::ZERO);
        }
        Ok(())
    }

    /// Batch statistics recorded by a training forward pass, one entry per
    /// normalisation layer.
    pub fn batch_stats<T: Real>(&self, g: &Graph<'_, T>, nodes: &[Var]) -> Vec<BatchStats<T>> {
        nodes
            .iter()
            .filter_map(|&v| g.batch_norm_stats(v))
            .map(|(mean, var, count)| BatchStats {
                mean: mean.to_vec(),
                var: var.to_vec(),
                count,
            })
            .collect()
    }

    /// Folds recorded batch statistics into the running estimates.
    pub fn update_running<T: Real>(&self, stats: &[BatchStats<T>], store: &mut ParamStore<T>) -> Result<()> {
        for (layer, s) in self.bn_layers().iter().zip(stats) {
            layer.update_running(store, &s.mean, &s.var, s.count, BN_MOMENTUM)?;
        }
        Ok(())
    }
}

/// Per-channel mean, biased variance and element count of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Projects one three-channel map of a single sample onto the pooled grid.
pub fn branch_project<T: Real>(
    x: &Tensor<T>,
    params: &ParamStore<T>,
    como: &Como,
    branch: Branch,
) -> Result<[Tensor<T>; 3]> {
    let mut g = Graph::new(params);
    let v = g.constant(x.clone());
    let t = como.tokens(&mut g, v);
    let out = como.project(&mut g, t, branch)?;
    Ok(out.map(|v| g.value(v).clone()))
}

/// Symmetrised logits and their row-normalised form for the first sample.
pub fn affinity<T: Real>(psi: &Tensor<T>, phi: &Tensor<T>) -> Result<(AffinityMatrix<T>, AffinityMatrix<T>)> {
    crate::tensor::check_same("affinity", psi.shape(), phi.shape())?;
    let m = psi.plane();
    let mut logits = attention::affinity_logits(psi, phi, true);
    let pre = AffinityMatrix {
        size: m,
        data: logits.sample(0).to_vec(),
    };
    attention::softmax_rows_in_place(&mut logits);
    let post = AffinityMatrix {
        size: m,
        data: logits.sample(0).to_vec(),
    };
    Ok((pre, post))
}

/// Eq.-style cross modulation of single-sample token maps.
pub fn cross_modulate<T: Real>(
    a: &AffinityMatrix<T>,
    zj: &Tensor<T>,
    zi: &Tensor<T>,
    params: &ParamStore<T>,
    como: &Como,
) -> Result<Tensor<T>> {
    let m = a.size();
    let mut g = Graph::new(params);
    let av = g.constant(Tensor::from_vec([1, 1, m, m], a.data().to_vec())?);
    let j = g.constant(zj.clone());
    let i = g.constant(zi.clone());
    let out = como.cross_modulate(&mut g, av, j, i)?;
    Ok(g.value(out).clone())
}

/// Inference pass (running normalisation statistics).
pub fn como_forward<T: Real>(
    img: &Tensor<T>,
    ob: &Tensor<T>,
    od: &Tensor<T>,
    params: &ParamStore<T>,
    modulator: &Modulator,
) -> Result<Tensor<T>> {
    let mut g = Graph::new(params);
    let i = g.constant(img.clone());
    let b = g.constant(ob.clone());
    let d = g.constant(od.clone());
    let out = modulator.forward(&mut g, i, b, d, false)?;
    Ok(g.value(out.image).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(max_tokens: usize) -> (ParamStore<f64>, Como, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let como = Como::register(&mut store, "como", 8, max_tokens, &mut rng).unwrap();
        (store, como, rng)
    }

    #[test]
    fn stride_policy() {
        assert_eq!(token_stride(64, 64, 4096), 1);
        assert_eq!(token_stride(128, 128, 4096), 2);
        assert_eq!(token_stride(64, 64, 256), 4);
        assert_eq!(token_stride(65, 64, 4096), 2);
    }

    #[test]
    fn projection_shapes_and_bias_broadcast() {
        let (mut store, como, _) = setup(256);
        let x = Tensor::zeros([1, 3, 64, 64]);
        let [psi, phi, z] = branch_project(&x, &store, &como, Branch::Image).unwrap();
        assert_eq!(psi.shape(), [1, 8, 16, 16]);
        assert_eq!(phi.plane(), 256);
        assert!(z.data().iter().all(|&v| v == 0.0));
        store
            .set(
                "como.i.z.bias",
                Tensor::uniform([1, 8, 1, 1], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)),
            )
            .unwrap();
        let [_, _, z] = branch_project(&x, &store, &como, Branch::Image).unwrap();
        let b = store.get("como.i.z.bias").unwrap();
        for k in 0..8 {
            assert!(z.data()[k * 256..(k + 1) * 256].iter().all(|&v| v == b.data()[k]));
        }
    }

    #[test]
    fn affinity_matches_naive_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let psi = Tensor::<f64>::uniform([1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let phi = Tensor::<f64>::uniform([1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let (pre, post) = affinity(&psi, &phi).unwrap();
        assert!(pre.is_symmetric());
        let want = reference::affinity_logits(psi.data(), phi.data(), 8, 16, true);
        assert!(pre.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(post.row_sums().iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_logits_give_even_rows() {
        let z = Tensor::<f64>::zeros([1, 8, 1, 2]);
        let (_, post) = affinity(&z, &z).unwrap();
        assert_eq!(post.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn cross_modulation_matches_oracle() {
        let (store, como, mut rng) = setup(16);
        let psi = Tensor::<f64>::uniform([1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let (_, a) = affinity(&psi, &psi).unwrap();
        let zj = Tensor::<f64>::uniform([1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let zi = Tensor::<f64>::uniform([1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let got = cross_modulate(&a, &zj, &zi, &store, &como).unwrap();
        let w1 = store.get("como.w1.weight").unwrap().data();
        let w2 = store.get("como.w2.weight").unwrap().data();
        let want = reference::cross_modulate(a.data(), zj.data(), zi.data(), w1, w2, 8, 16);
        assert!(got.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
        let zero = Tensor::zeros([1, 8, 4, 4]);
        let got = cross_modulate(&a, &zero, &zero, &store, &como).unwrap();
        assert!(got.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_matches_oracle() {
        let (store, como, mut rng) = setup(16);
        let img = Tensor::<f64>::uniform([1, 3, 8, 7], 0.0, 1.0, &mut rng);
        let ob = Tensor::<f64>::uniform([1, 3, 8, 7], -1.0, 1.0, &mut rng);
        let od = Tensor::<f64>::uniform([1, 3, 8, 7], -1.0, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let (i, b, d) = (g.constant(img.clone()), g.constant(ob.clone()), g.constant(od.clone()));
        let out = Modulator::Como(como.clone()).forward(&mut g, i, b, d, true).unwrap();
        let stride = token_stride(8, 7, 16);
        let want = reference::como(&store, "como", &img, &ob, &od, stride, BN_EPS).unwrap();
        assert!(g.value(out.image).max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn zeroed_output_is_exact_identity() {
        let (mut store, como, mut rng) = setup(64);
        let m = Modulator::Como(como);
        m.zero_output(&mut store).unwrap();
        let img = Tensor::<f64>::uniform([1, 3, 16, 16], 0.0, 1.0, &mut rng);
        let ob = Tensor::<f64>::uniform([1, 3, 16, 16], -1.0, 1.0, &mut rng);
        let out = como_forward(&img, &ob, &ob, &store, &m).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn nonlocal_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let m = Modulator::NonLocal(NonLocal::register(&mut store, "nl", 8, 64, &mut rng).unwrap());
        let img = Tensor::<f64>::uniform([2, 3, 12, 16], 0.0, 1.0, &mut rng);
        let out = como_forward(&img, &img, &img, &store, &m).unwrap();
        assert_eq!(out.shape(), img.shape());
    }
}
