use crate::error::Result;
use crate::nn::params::{Ctx, Init, ParamId};
use crate::real::Real;
use crate::tensor::Tensor;

/// `y = x·W + b` over the last axis, `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Truncation-free normal init with std 0.02, zero bias.
    pub fn new<T: Real>(init: &mut Init<'_, T>, in_dim: usize, out_dim: usize) -> Self {
        let weight = init.normal("weight", &[in_dim, out_dim], 0.02);
        let bias = Some(init.zeros("bias", &[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Xavier-uniform weight, zero bias.
    pub fn xavier<T: Real>(init: &mut Init<'_, T>, in_dim: usize, out_dim: usize) -> Self {
        let bound = libm::sqrt(6.0 / (in_dim + out_dim) as f64);
        let weight = init.uniform("weight", &[in_dim, out_dim], bound);
        let bias = Some(init.zeros("bias", &[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Both weight and bias start at zero.
    pub fn zeroed<T: Real>(init: &mut Init<'_, T>, in_dim: usize, out_dim: usize) -> Self {
        let weight = init.tensor("weight", Tensor::zeros(&[in_dim, out_dim]), true);
        let bias = Some(init.zeros("bias", &[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.map(|b| ctx.p(b));
        ctx.tape.linear(x, &ctx.p(self.weight), b.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(init: &mut Init<'_, T>, dim: usize, eps: f64) -> Self {
        Self {
            gamma: init.constant("weight", &[dim], 1.0),
            beta: init.zeros("bias", &[dim]),
            eps,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ctx.tape
            .layer_norm(x, &ctx.p(self.gamma), &ctx.p(self.beta), self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize, groups: usize) -> Self {
        Self {
            gamma: init.constant("weight", &[channels], 1.0),
            beta: init.zeros("bias", &[channels]),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ctx.tape.group_norm(
            x,
            self.groups,
            &ctx.p(self.gamma),
            &ctx.p(self.beta),
            self.eps,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal init (fan-in), optional zero bias.
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let weight = init.normal(
            "weight",
            &[cout, cin, kernel, kernel],
            libm::sqrt(2.0 / fan_in),
        );
        let bias = bias.then(|| init.zeros("bias", &[cout]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.map(|b| ctx.p(b));
        ctx.tape
            .conv2d(x, &ctx.p(self.weight), b.as_ref(), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let weight = init.normal(
            "weight",
            &[cin, cout, kernel, kernel],
            libm::sqrt(1.0 / fan_in),
        );
        let bias = Some(init.zeros("bias", &[cout]));
        Self {
            weight,
            bias,
            stride,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.map(|b| ctx.p(b));
        ctx.tape
            .conv_transpose2d(x, &ctx.p(self.weight), b.as_ref(), self.stride, 0)
    }
}
