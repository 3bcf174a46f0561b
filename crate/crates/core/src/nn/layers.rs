//! Parameterized wrappers over the tape primitives.

use rand::Rng;

use super::params::{he_std, normal_tensor, Ctx, ParamId, ParamStore, StatsId};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub out_channels: usize,
    pub in_channels: usize,
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// He-normal kernel, zero bias; padding keeps odd kernels centered.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        (in_channels, out_channels): (usize, usize),
        size: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = in_channels * size * size;
        let kernel = store.add(
            format!("{name}.kernel"),
            normal_tensor(rng, &[out_channels, in_channels, size, size], he_std(fan_in))?,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])?);
        Ok(Self {
            kernel,
            bias,
            out_channels,
            in_channels,
            size,
            stride,
            padding: size / 2,
        })
    }

    pub fn forward<T: Scalar, R: Rng + ?Sized>(&self, cx: &mut Ctx<'_, T, R>, x: Var) -> Result<Var> {
        let (k, b) = (cx.var(self.kernel), cx.var(self.bias));
        cx.tape.conv2d(x, k, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])?),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])?),
            stats: store.add_stats(name, channels),
        })
    }

    pub fn forward<T: Scalar, R: Rng + ?Sized>(&self, cx: &mut Ctx<'_, T, R>, x: Var) -> Result<Var> {
        let (g, b) = (cx.var(self.gamma), cx.var(self.beta));
        let (y, moments) = cx.tape.batch_norm(x, g, b, &cx.stats[self.stats.0], cx.mode)?;
        if let Some(m) = moments {
            cx.moments.push((self.stats, m));
        }
        Ok(y)
    }

    /// Normalization followed by relu.
    pub fn forward_relu<T: Scalar, R: Rng + ?Sized>(
        &self,
        cx: &mut Ctx<'_, T, R>,
        x: Var,
    ) -> Result<Var> {
        let y = self.forward(cx, x)?;
        cx.tape.relu(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weights: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        (inputs, outputs): (usize, usize),
        std: f64,
    ) -> Result<Self> {
        Ok(Self {
            weights: store.add(
                format!("{name}.weights"),
                normal_tensor(rng, &[inputs, outputs], std)?,
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])?),
        })
    }

    pub fn forward<T: Scalar, R: Rng + ?Sized>(&self, cx: &mut Ctx<'_, T, R>, x: Var) -> Result<Var> {
        let (w, b) = (cx.var(self.weights), cx.var(self.bias));
        cx.tape.dense(x, w, b)
    }
}
