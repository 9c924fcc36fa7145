//! Eager reverse-mode differentiation tape.
//!
//! Every builder method evaluates its result immediately and records how it
//! was produced; [`Graph::backward`] then walks the tape in reverse.

use alloc::collections::BTreeMap;
use alloc::rc::Rc;

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::{attention, conv, deform, norm, resample};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::{check_same, Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AvgPool {
        x: Var,
        stride: usize,
    },
    Upsample {
        x: Var,
    },
    Blur {
        x: Var,
        taps: Rc<Vec<f64>>,
    },
    Concat {
        xs: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    Sigmoid(Var),
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Abs(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    DivFloor {
        num: Var,
        den: Var,
        floor: T,
    },
    Mean(Var),
    CosineDistance {
        a: Var,
        b: Var,
        eps: T,
    },
    Affinity {
        psi: Var,
        phi: Var,
        symmetric: bool,
    },
    Attend {
        v: Var,
        a: Var,
    },
    Attention {
        psi: Var,
        phi: Var,
        v: Var,
        symmetric: bool,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
        batch_stats: bool,
    },
    ColorDeform {
        x: Var,
        dp: Option<Var>,
        dc: Option<Var>,
        dm: Option<Var>,
        w: Var,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    /// Indexed like the parameter store; `None` when a parameter did not
    /// influence the output.
    pub params: Vec<Option<Tensor<T>>>,
    inputs: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created with [`Graph::input`] and `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v)
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|v| v.to_f64() * v.to_f64())
            .sum::<f64>()
            .sqrt()
    }
}

fn accum<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_opt(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Option<Var>]) -> Var {
        let ins: Vec<Var> = inputs.iter().flatten().copied().collect();
        self.push(value, op, &ins)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match (&self.nodes[v.0].op, &self.nodes[v.0].value) {
            (Op::Param(i), _) => self.params.tensor(*i),
            (_, Some(t)) => t,
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    /// Leaf holding data. Gradients are kept for it when `requires_grad`.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    /// Leaf bound to a parameter of the store.
    pub fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
            needs_grad: self.params.is_trainable(index),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Invalid(alloc::format!("unknown parameter {name}")))?;
        Ok(self.param(idx))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs[1] != ws[1] || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(Error::Shape {
                op: "conv2d",
                detail: alloc::format!("input {:?}, kernel {:?}", xs, ws),
            });
        }
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        Ok(self.push_opt(out, Op::Conv2d { x, w, b }, &[Some(x), Some(w), b]))
    }

    pub fn avg_pool(&mut self, x: Var, stride: usize) -> Var {
        let out = resample::avg_pool_forward(self.value(x), stride);
        self.push(out, Op::AvgPool { x, stride }, &[x])
    }

    pub fn upsample(&mut self, x: Var, height: usize, width: usize) -> Var {
        let out = resample::upsample_bilinear_forward(self.value(x), height, width);
        self.push(out, Op::Upsample { x }, &[x])
    }

    /// Depthwise separable filter with the given 1-D taps, no padding.
    pub fn blur_valid(&mut self, x: Var, taps: Rc<Vec<f64>>) -> Result<Var> {
        let s = self.shape(x);
        if s[2] < taps.len() || s[3] < taps.len() {
            return Err(Error::TooSmall {
                height: s[2],
                width: s[3],
                min: taps.len(),
            });
        }
        let out = resample::blur_valid_forward(self.value(x), &taps);
        Ok(self.push(out, Op::Blur { x, taps }, &[x]))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]);
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            if s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::Shape {
                    op: "concat",
                    detail: alloc::format!("{:?} vs {:?}", s, first),
                });
            }
            channels += s[1];
        }
        let [n, _, h, w] = first;
        let mut out = Tensor::zeros([n, channels, h, w]);
        for b in 0..n {
            let mut off = 0;
            for &v in xs {
                let src = self.value(v).sample(b);
                out.sample_mut(b)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }, xs))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        check_same(name, self.shape(a), self.shape(b))?;
        Ok(self.value(a).zip_map(self.value(b), f))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        self.push(t, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::ZERO)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::ONE, T::ONE)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let t = self.value(x).map(|v| if v > T::ZERO { v } else { v * slope });
        self.push(t, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.abs());
        self.push(t, Op::Abs(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let t = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(t, Op::Clamp { x, lo, hi }, &[x])
    }

    /// `num / max(den, floor)`; a one-channel `den` broadcasts over channels.
    pub fn div_floor(&mut self, num: Var, den: Var, floor: T) -> Result<Var> {
        let (ns, ds) = (self.shape(num), self.shape(den));
        if ns[0] != ds[0] || ns[2..] != ds[2..] || (ds[1] != 1 && ds[1] != ns[1]) {
            return Err(Error::Shape {
                op: "div_floor",
                detail: alloc::format!("{:?} / {:?}", ns, ds),
            });
        }
        let out = div_floor_forward(self.value(num), self.value(den), floor);
        Ok(self.push(out, Op::DivFloor { num, den, floor }, &[num, den]))
    }

    /// Mean of every element, as a `[1,1,1,1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        self.push(t, Op::Mean(x), &[x])
    }

    /// Per-pixel `1 - cos(a, b)` over channels, shape `(n, 1, h, w)`.
    pub fn cosine_distance(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        check_same("cosine_distance", self.shape(a), self.shape(b))?;
        let [n, c, h, w] = self.shape(a);
        let hw = h * w;
        let mut out = Tensor::zeros([n, 1, h, w]);
        let (av, bv) = (self.value(a), self.value(b));
        for s in 0..n {
            let (xa, xb) = (av.sample(s), bv.sample(s));
            for p in 0..hw {
                let (mut dot, mut na, mut nb) = (T::ZERO, T::ZERO, T::ZERO);
                for ch in 0..c {
                    let (u, v) = (xa[ch * hw + p], xb[ch * hw + p]);
                    dot += u * v;
                    na += u * u;
                    nb += v * v;
                }
                out.sample_mut(s)[p] = T::ONE - dot / (na.sqrt().max(eps) * nb.sqrt().max(eps));
            }
        }
        Ok(self.push(out, Op::CosineDistance { a, b, eps }, &[a, b]))
    }

    /// Row-softmax of `psiᵀ·phi`, symmetrised before normalisation when asked.
    pub fn affinity(&mut self, psi: Var, phi: Var, symmetric: bool) -> Result<Var> {
        check_same("affinity", self.shape(psi), self.shape(phi))?;
        let a = attention::affinity_forward(self.value(psi), self.value(phi), symmetric);
        Ok(self.push(a, Op::Affinity { psi, phi, symmetric }, &[psi, phi]))
    }

    /// `attend(v, affinity(psi, phi, symmetric))` computed in row blocks,
    /// never holding the full affinity matrix.
    pub fn attention(&mut self, psi: Var, phi: Var, v: Var, symmetric: bool) -> Result<Var> {
        let (ps, vs) = (self.shape(psi), self.shape(v));
        check_same("attention", ps, self.shape(phi))?;
        if (vs[0], vs[2], vs[3]) != (ps[0], ps[2], ps[3]) {
            return Err(Error::Shape {
                op: "attention",
                detail: alloc::format!("keys {:?}, values {:?}", ps, vs),
            });
        }
        let out = attention::fused_forward(self.value(psi), self.value(phi), self.value(v), symmetric);
        Ok(self.push(out, Op::Attention { psi, phi, v, symmetric }, &[psi, phi, v]))
    }

    /// Attention-weighted aggregation `v · aᵀ` over tokens.
    pub fn attend(&mut self, v: Var, a: Var) -> Result<Var> {
        let (vs, as_) = (self.shape(v), self.shape(a));
        let m = vs[2] * vs[3];
        if as_ != [vs[0], 1, m, m] {
            return Err(Error::Shape {
                op: "attend",
                detail: alloc::format!("values {:?}, affinity {:?}", vs, as_),
            });
        }
        let out = attention::attend_forward(self.value(v), self.value(a));
        Ok(self.push(out, Op::Attend { v, a }, &[v, a]))
    }

    /// Batch normalisation. `running = None` normalises with batch statistics
    /// over batch and spatial axes; `Some((mean, var))` uses fixed statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: Option<(&[T], &[T])>, eps: T) -> Var {
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let st = norm::channel_stats(self.value(x));
                (st.mean, st.var, true)
            }
        };
        let out = norm::normalize_forward(self.value(x), self.value(gamma), self.value(beta), &mean, &var, eps);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                batch_stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Batch statistics recorded by a training-mode [`Graph::batch_norm`] node:
    /// `(mean, biased variance, element count)`.
    pub fn batch_norm_stats(&self, v: Var) -> Option<(&[T], &[T], usize)> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                x,
                mean,
                var,
                batch_stats: true,
                ..
            } => {
                let s = self.shape(*x);
                Some((mean, var, s[0] * s[2] * s[3]))
            }
            _ => None,
        }
    }

    pub fn color_deform(&mut self, x: Var, dp: Option<Var>, dc: Option<Var>, dm: Option<Var>, w: Var) -> Result<Var> {
        let [n, c, h, wd] = self.shape(x);
        let ws = self.shape(w);
        let taps = ws[2] * ws[3];
        let bad = |got: Shape, ch: usize| got != [n, ch, h, wd];
        if ws[0] != c || ws[1] != c || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(Error::Shape {
                op: "color_deform",
                detail: alloc::format!("kernel {:?} for {} channels", ws, c),
            });
        }
        for (v, ch, what) in [(dp, 2 * taps, "dp"), (dc, c * taps, "dc"), (dm, taps, "dm")] {
            if let Some(v) = v {
                if bad(self.shape(v), ch) {
                    return Err(Error::Shape {
                        op: "color_deform",
                        detail: alloc::format!("{what} has shape {:?}, expected {:?}", self.shape(v), [n, ch, h, wd]),
                    });
                }
            }
        }
        let off = deform::Offsets {
            dp: dp.map(|v| self.value(v)),
            dc: dc.map(|v| self.value(v)),
            dm: dm.map(|v| self.value(v)),
        };
        let out = deform::color_deform_forward(self.value(x), off, self.value(w));
        Ok(self.push_opt(
            out,
            Op::ColorDeform { x, dp, dc, dm, w },
            &[Some(x), dp, dc, dm, Some(w)],
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        let mut inputs = BTreeMap::new();
        let seed = Tensor::full(self.shape(root), T::ONE);
        grads[root.0] = Some(seed);
        let ng = |v: Var| self.nodes[v.0].needs_grad;

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = self.value(Var(i));
            match &node.op {
                Op::Input => {
                    inputs.insert(Var(i), g);
                }
                Op::Param(p) => match &mut param_grads[*p] {
                    Some(t) => t.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::Conv2d { x, w, b } => {
                    let cg =
                        conv::conv2d_backward(self.value(*x), self.value(*w), &g, ng(*x), ng(*w), b.is_some_and(ng));
                    if let Some(t) = cg.x {
                        accum(&mut grads, *x, t);
                    }
                    if let Some(t) = cg.weight {
                        accum(&mut grads, *w, t);
                    }
                    if let (Some(b), Some(t)) = (b, cg.bias) {
                        accum(&mut grads, *b, t);
                    }
                }
                Op::AvgPool { x, stride } => {
                    let t = resample::avg_pool_backward(&g, self.shape(*x), *stride);
                    accum(&mut grads, *x, t);
                }
                Op::Upsample { x } => {
                    let t = resample::upsample_bilinear_backward(&g, self.shape(*x));
                    accum(&mut grads, *x, t);
                }
                Op::Blur { x, taps } => {
                    let t = resample::blur_valid_backward(&g, self.shape(*x), taps);
                    accum(&mut grads, *x, t);
                }
                Op::Concat { xs } => {
                    let n = g.batch();
                    let mut off = 0;
                    for &v in xs {
                        let s = self.shape(v);
                        let per = s[1] * s[2] * s[3];
                        if ng(v) {
                            let mut t = Tensor::zeros(s);
                            for b in 0..n {
                                t.sample_mut(b).copy_from_slice(&g.sample(b)[off..off + per]);
                            }
                            accum(&mut grads, v, t);
                        }
                        off += per;
                    }
                }
                Op::Reshape { x } => {
                    let t = g.reshape(self.shape(*x)).expect("reshape grad");
                    accum(&mut grads, *x, t);
                }
                Op::Add(a, b) => {
                    if ng(*b) {
                        accum(&mut grads, *b, g.clone());
                    }
                    if ng(*a) {
                        accum(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if ng(*b) {
                        accum(&mut grads, *b, g.map(|v| -v));
                    }
                    if ng(*a) {
                        accum(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if ng(*a) {
                        accum(&mut grads, *a, g.zip_map(bv, |x, y| x * y));
                    }
                    if ng(*b) {
                        accum(&mut grads, *b, g.zip_map(av, |x, y| x * y));
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    if ng(*a) {
                        accum(&mut grads, *a, g.zip_map(bv, |x, y| x / y));
                    }
                    if ng(*b) {
                        // -g * a / b^2 == -g * out / b
                        let t = g.zip_map(out, |x, o| x * o).zip_map(bv, |x, y| -x / y);
                        accum(&mut grads, *b, t);
                    }
                }
                Op::Affine { x, scale } => {
                    let s = *scale;
                    accum(&mut grads, *x, g.map(|v| v * s));
                }
                Op::Sigmoid(x) => {
                    accum(&mut grads, *x, g.zip_map(out, |gv, y| gv * y * (T::ONE - y)));
                }
                Op::LeakyRelu { x, slope } => {
                    let s = *slope;
                    let t = g.zip_map(self.value(*x), |gv, v| if v > T::ZERO { gv } else { gv * s });
                    accum(&mut grads, *x, t);
                }
                Op::Abs(x) => {
                    let t = g.zip_map(self.value(*x), |gv, v| {
                        if v > T::ZERO {
                            gv
                        } else if v < T::ZERO {
                            -gv
                        } else {
                            T::ZERO
                        }
                    });
                    accum(&mut grads, *x, t);
                }
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let t = g.zip_map(self.value(*x), |gv, v| if v >= lo && v <= hi { gv } else { T::ZERO });
                    accum(&mut grads, *x, t);
                }
                Op::DivFloor { num, den, floor } => {
                    let (gn, gd) = div_floor_backward(self.value(*num), self.value(*den), *floor, &g);
                    if ng(*num) {
                        accum(&mut grads, *num, gn);
                    }
                    if ng(*den) {
                        accum(&mut grads, *den, gd);
                    }
                }
                Op::Mean(x) => {
                    let s = self.shape(*x);
                    let n = T::from_usize(crate::tensor::numel(s));
                    accum(&mut grads, *x, Tensor::full(s, g.data()[0] / n));
                }
                Op::CosineDistance { a, b, eps } => {
                    let (ga, gb) = cosine_backward(self.value(*a), self.value(*b), *eps, &g);
                    if ng(*a) {
                        accum(&mut grads, *a, ga);
                    }
                    if ng(*b) {
                        accum(&mut grads, *b, gb);
                    }
                }
                Op::Affinity { psi, phi, symmetric } => {
                    let (gpsi, gphi) =
                        attention::affinity_backward(self.value(*psi), self.value(*phi), out, &g, *symmetric);
                    if ng(*psi) {
                        accum(&mut grads, *psi, gpsi);
                    }
                    if ng(*phi) {
                        accum(&mut grads, *phi, gphi);
                    }
                }
                Op::Attend { v, a } => {
                    let (gv, ga) = attention::attend_backward(self.value(*v), self.value(*a), &g, ng(*v), ng(*a));
                    if let Some(t) = gv {
                        accum(&mut grads, *v, t);
                    }
                    if let Some(t) = ga {
                        accum(&mut grads, *a, t);
                    }
                }
                Op::Attention { psi, phi, v, symmetric } => {
                    let (gpsi, gphi, gv) =
                        attention::fused_backward(self.value(*psi), self.value(*phi), self.value(*v), &g, *symmetric);
                    for (x, t) in [(*psi, gpsi), (*phi, gphi), (*v, gv)] {
                        if ng(x) {
                            accum(&mut grads, x, t);
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                    batch_stats,
                } => {
                    let ngr = norm::normalize_backward(
                        self.value(*x),
                        self.value(*gamma),
                        mean,
                        var,
                        *eps,
                        &g,
                        *batch_stats,
                        ng(*x),
                    );
                    if let Some(t) = ngr.x {
                        accum(&mut grads, *x, t);
                    }
                    if ng(*gamma) {
                        accum(&mut grads, *gamma, ngr.gamma);
                    }
                    if ng(*beta) {
                        accum(&mut grads, *beta, ngr.beta);
                    }
                }
                Op::ColorDeform { x, dp, dc, dm, w } => {
                    let off = deform::Offsets {
                        dp: dp.map(|v| self.value(v)),
                        dc: dc.map(|v| self.value(v)),
                        dm: dm.map(|v| self.value(v)),
                    };
                    let need = [
                        ng(*x),
                        dp.is_some_and(ng),
                        dc.is_some_and(ng),
                        dm.is_some_and(ng),
                        ng(*w),
                    ];
                    let dg = deform::color_deform_backward(self.value(*x), off, self.value(*w), &g, need);
                    for (slot, t) in [
                        (Some(*x), dg.x),
                        (*dp, dg.dp),
                        (*dc, dg.dc),
                        (*dm, dg.dm),
                        (Some(*w), dg.weight),
                    ] {
                        if let (Some(v), Some(t)) = (slot, t) {
                            accum(&mut grads, v, t);
                        }
                    }
                }
            }
        }
        Gradients {
            params: param_grads,
            inputs,
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

pub(crate) fn div_floor_forward<T: Real>(num: &Tensor<T>, den: &Tensor<T>, floor: T) -> Tensor<T> {
    let [n, c, _, _] = num.shape();
    let hw = num.plane();
    let dc = den.channels();
    let mut out = Tensor::zeros(num.shape());
    for b in 0..n {
        let (ns, ds) = (num.sample(b), den.sample(b));
        let os = out.sample_mut(b);
        for ch in 0..c {
            let dplane = if dc == 1 {
                &ds[..hw]
            } else {
                &ds[ch * hw..(ch + 1) * hw]
            };
            for p in 0..hw {
                os[ch * hw + p] = ns[ch * hw + p] / dplane[p].max(floor);
            }
        }
    }
    out
}

fn div_floor_backward<T: Real>(num: &Tensor<T>, den: &Tensor<T>, floor: T, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [n, c, _, _] = num.shape();
    let hw = num.plane();
    let dc = den.channels();
    let mut gn = Tensor::zeros(num.shape());
    let mut gd = Tensor::zeros(den.shape());
    for b in 0..n {
        let (ns, ds, gs) = (num.sample(b), den.sample(b), g.sample(b));
        for ch in 0..c {
            let doff = if dc == 1 { 0 } else { ch * hw };
            for p in 0..hw {
                let d = ds[doff + p];
                let dd = d.max(floor);
                let gv = gs[ch * hw + p];
                gn.sample_mut(b)[ch * hw + p] = gv / dd;
                if d > floor {
                    gd.sample_mut(b)[doff + p] -= gv * ns[ch * hw + p] / (dd * dd);
                }
            }
        }
    }
    (gn, gd)
}

fn cosine_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, eps: T, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [n, c, _, _] = a.shape();
    let hw = a.plane();
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    for s in 0..n {
        let (xa, xb, gs) = (a.sample(s), b.sample(s), g.sample(s));
        for p in 0..hw {
            let (mut dot, mut sa, mut sb) = (T::ZERO, T::ZERO, T::ZERO);
            for ch in 0..c {
                let (u, v) = (xa[ch * hw + p], xb[ch * hw + p]);
                dot += u * v;
                sa += u * u;
                sb += v * v;
            }
            let (ra, rb) = (sa.sqrt(), sb.sqrt());
            let (na, nb) = (ra.max(eps), rb.max(eps));
            let cos = dot / (na * nb);
            let go = -gs[p];
            for ch in 0..c {
                let (u, v) = (xa[ch * hw + p], xb[ch * hw + p]);
                let mut da = v / (na * nb);
                if ra > eps {
                    da -= cos * u / (na * na);
                }
                let mut db = u / (na * nb);
                if rb > eps {
                    db -= cos * v / (nb * nb);
                }
                ga.sample_mut(s)[ch * hw + p] = go * da;
                gb.sample_mut(s)[ch * hw + p] = go * db;
            }
        }
    }
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_input_accumulates_both_paths() {
        let params = ParamStore::<f64>::new();
        let mut g = Graph::new(&params);
        let x = g.input(Tensor::from_vec([1, 1, 1, 2], vec![3.0, -2.0]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq);
        let grads = g.backward(m);
        assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, -2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let params = ParamStore::<f64>::new();
        let mut g = Graph::new(&params);
        let c = g.constant(Tensor::full([1, 1, 2, 2], 2.0));
        let x = g.input(Tensor::full([1, 1, 2, 2], 1.0), true);
        let y = g.mul(c, x).unwrap();
        let m = g.mean(y);
        let grads = g.backward(m);
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.5; 4]);
    }
}
