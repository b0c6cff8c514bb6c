//! Parameter initialisation and keyed layer helpers shared by the model modules.
//!
//! A convolution or linear layer named `p` owns `p.weight` and `p.bias`.

use rand::Rng;

use crate::autograd::{Bound, Graph, Var};
use crate::error::Result;
use crate::tensor::{ParamSet, Tensor};

/// He-normal `[out, inp, k, k]` kernel scaled by `gain`, zero bias.
pub fn init_conv<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
    gain: f64,
    rng: &mut R,
) -> Result<()> {
    let std = gain * (2.0 / (inp * k * k) as f64).sqrt();
    ps.insert(format!("{name}.weight"), Tensor::randn([out, inp, k, k], std, rng))?;
    ps.insert(format!("{name}.bias"), Tensor::zeros([out]))
}

/// Gaussian `[out, inp]` weight with explicit standard deviation, zero bias.
pub fn init_linear<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    name: &str,
    out: usize,
    inp: usize,
    std: f64,
    rng: &mut R,
) -> Result<()> {
    ps.insert(format!("{name}.weight"), Tensor::randn([out, inp], std, rng))?;
    ps.insert(format!("{name}.bias"), Tensor::zeros([out]))
}

pub fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    g.conv2d(x, w, b, stride, pad)
}

/// Convolution with "same" padding for odd kernels.
pub fn conv_same(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let k = g.value(p.get(&format!("{name}.weight"))?).shape()[2];
    conv(g, p, name, x, 1, k / 2)
}

pub fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let flat = g.flatten(x);
    g.linear(flat, w, b)
}
