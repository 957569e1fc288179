//! Parameterised layers. Each layer registers its tensors in a
//! [`ParamStore`] under a dotted name and applies itself to a [`Graph`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, NormKind, RunningStats, Var};
use crate::im2col::ConvGeom;
use crate::params::{BufferId, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = store.add_param(format!("{name}.weight"), init.sample(&shape, rng))?;
        let bias =
            if bias { Some(store.add_param(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?) } else { None };
        Ok(Conv2d { weight, bias, geom: ConvGeom::square(kernel, stride, pad), in_channels, out_channels })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_padding: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = [in_channels, out_channels, kernel, kernel];
        let weight = store.add_param(format!("{name}.weight"), init.sample(&shape, rng))?;
        let bias =
            if bias { Some(store.add_param(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?) } else { None };
        Ok(ConvTranspose2d { weight, bias, geom: ConvGeom::square(kernel, stride, pad), output_padding })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv_transpose2d(x, w, b, self.geom, self.output_padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Self::with_gamma(store, name, channels, Tensor::full(&[channels], T::one()))
    }

    pub fn with_gamma<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        gamma: Tensor<T>,
    ) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add_param(format!("{name}.gamma"), gamma)?,
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one()))?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let stats = RunningStats { mean: self.running_mean, var: self.running_var, momentum: self.momentum };
        let xhat = g.normalize(x, NormKind::Batch, self.eps, Some(stats))?;
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.channel_affine(xhat, gamma, beta)
    }
}

/// Instance normalisation without affine parameters or running statistics.
#[derive(Clone, Copy, Debug)]
pub struct InstanceNorm2d {
    pub eps: f64,
}

impl Default for InstanceNorm2d {
    fn default() -> Self {
        InstanceNorm2d { eps: 1e-5 }
    }
}

impl InstanceNorm2d {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.normalize(x, NormKind::Instance, self.eps, None)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let init = Init::FanUniform { fan: in_features };
        Ok(Linear {
            weight: store.add_param(format!("{name}.weight"), init.sample(&[out_features, in_features], rng))?,
            bias: store.add_param(format!("{name}.bias"), init.sample(&[out_features], rng))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Applies queued running-statistic updates after a training pass.
pub fn apply_buffer_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<(BufferId, Tensor<T>)>) {
    for (id, t) in updates {
        *store.buffer_mut(id) = t;
    }
}
