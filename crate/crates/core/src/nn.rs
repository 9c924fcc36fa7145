//! Small layer helpers binding parameter names to graph operations.

use alloc::string::{String, ToString};

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{glorot_uniform, he_uniform, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// He-uniform; for layers followed by a rectifier.
    He,
    /// Glorot-uniform; for linear projections.
    Glorot,
    Zero,
}

/// Square stride-1 convolution with "same" padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: String,
    pub bias: Option<String>,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = [cout, cin, kernel, kernel];
        let w = match init {
            Init::He => he_uniform(shape, rng),
            Init::Glorot => glorot_uniform(shape, rng),
            Init::Zero => Tensor::zeros(shape),
        };
        let weight = alloc::format!("{name}.weight");
        store.insert(&weight, w, true)?;
        let bias = if bias {
            let b = alloc::format!("{name}.bias");
            store.insert(&b, Tensor::zeros([1, cout, 1, 1]), true)?;
            Some(b)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Rebinds to an existing layer registered under `name`.
    pub fn existing(name: &str, bias: bool) -> Self {
        Self {
            weight: alloc::format!("{name}.weight"),
            bias: bias.then(|| alloc::format!("{name}.bias")),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param_named(&self.weight)?;
        let b = match &self.bias {
            Some(b) => Some(g.param_named(b)?),
            None => None,
        };
        g.conv2d(x, w, b)
    }
}

/// Batch-normalisation parameters plus running statistics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchNormLayer {
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
}

impl BatchNormLayer {
    pub fn register<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let layer = Self {
            gamma: alloc::format!("{name}.gamma"),
            beta: alloc::format!("{name}.beta"),
            running_mean: alloc::format!("{name}.running_mean"),
            running_var: alloc::format!("{name}.running_var"),
        };
        let shape = [1, channels, 1, 1];
        store.insert(&layer.gamma, Tensor::full(shape, T::ONE), true)?;
        store.insert(&layer.beta, Tensor::zeros(shape), true)?;
        store.insert(&layer.running_mean, Tensor::zeros(shape), false)?;
        store.insert(&layer.running_var, Tensor::full(shape, T::ONE), false)?;
        Ok(layer)
    }

    /// `training = true` normalises with batch statistics.
    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, training: bool, eps: f64) -> Result<Var> {
        let gamma = g.param_named(&self.gamma)?;
        let beta = g.param_named(&self.beta)?;
        let eps = T::from_f64(eps);
        if training {
            return Ok(g.batch_norm(x, gamma, beta, None, eps));
        }
        let store = g.params();
        let missing = |n: &str| crate::error::Error::Invalid(alloc::format!("unknown parameter {n}"));
        let mean = store
            .get(&self.running_mean)
            .ok_or_else(|| missing(&self.running_mean))?;
        let var = store.get(&self.running_var).ok_or_else(|| missing(&self.running_var))?;
        Ok(g.batch_norm(x, gamma, beta, Some((mean.data(), var.data())), eps))
    }

    /// Exponential moving update from recorded batch statistics; the variance
    /// is stored unbiased.
    pub fn update_running<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        mean: &[T],
        var: &[T],
        count: usize,
        momentum: f64,
    ) -> Result<()> {
        let m = T::from_f64(momentum);
        let keep = T::ONE - m;
        let unbias = if count > 1 {
            T::from_usize(count) / T::from_usize(count - 1)
        } else {
            T::ONE
        };
        let rm = store
            .get_mut(&self.running_mean)
            .ok_or_else(|| crate::error::Error::Invalid(self.running_mean.to_string()))?;
        for (r, &b) in rm.data_mut().iter_mut().zip(mean) {
            *r = keep * *r + m * b;
        }
        let rv = store
            .get_mut(&self.running_var)
            .ok_or_else(|| crate::error::Error::Invalid(self.running_var.to_string()))?;
        for (r, &b) in rv.data_mut().iter_mut().zip(var) {
            *r = keep * *r + m * b * unbias;
        }
        Ok(())
    }
}
