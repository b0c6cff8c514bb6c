//! Class-agnostic relation operators.
//!
//! * Spatial relation: `R_s(A, B) = A ⊙ MLP(Flatten(Conv(B)))`, a depth-wise
//!   correlation of `A` with a `C x k x k` kernel distilled from `B`.
//! * Channel relation: `R_c(A, B) = Conv(Cat(A, B)) + Cat(Conv(A), Conv(B))`.
//!
//! Parameters live under `{prefix}.relation.spatial.*` and
//! `{prefix}.relation.channel.*`.

use rand::Rng;

use crate::autograd::{Bound, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{conv, conv_same, init_conv, init_linear, linear};
use crate::tensor::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialMode {
    /// Conv + MLP produce the kernel.
    Learned,
    /// The kernel is the per-channel spatial mean of `B` (all-ones weights).
    FixedAverage,
}

/// Shape of a learned spatial relation.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialRelation {
    pub prefix: String,
    pub channels: usize,
    /// Side of both the Conv on `B` and the produced correlation kernel.
    pub kernel: usize,
    /// Spatial size `(h, w)` of `B`; fixes the MLP input width.
    pub source_hw: (usize, usize),
}

impl SpatialRelation {
    pub fn new(prefix: impl Into<String>, channels: usize, kernel: usize, source_hw: (usize, usize)) -> Self {
        SpatialRelation {
            prefix: prefix.into(),
            channels,
            kernel,
            source_hw,
        }
    }

    fn key(&self, part: &str) -> String {
        format!("{}.relation.spatial.{part}", self.prefix)
    }

    /// `out_std` scales the final MLP layer; a small value starts the relation
    /// near the zero map.
    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, out_std: f64, rng: &mut R) -> Result<()> {
        let c = self.channels;
        let flat = c * self.source_hw.0 * self.source_hw.1;
        init_conv(ps, &self.key("conv"), c, c, self.kernel, 1.0, rng)?;
        init_linear(ps, &self.key("mlp1"), c, flat, (2.0 / flat as f64).sqrt(), rng)?;
        init_linear(ps, &self.key("mlp2"), c * self.kernel * self.kernel, c, out_std, rng)
    }

    /// Produces the `C x k x k` correlation kernel from `b`.
    pub fn kernel_from(&self, g: &mut Graph, p: &Bound, b: Var) -> Result<Var> {
        let (c, h, w) = g.value(b).dims3()?;
        if c != self.channels || (h, w) != self.source_hw {
            return Err(Error::shape(format!(
                "spatial relation built for [{}, {}, {}], got [{c}, {h}, {w}]",
                self.channels, self.source_hw.0, self.source_hw.1
            )));
        }
        let fb = conv_same(g, p, &self.key("conv"), b)?;
        let hidden = linear(g, p, &self.key("mlp1"), fb)?;
        let hidden = g.relu(hidden);
        let k = linear(g, p, &self.key("mlp2"), hidden)?;
        g.reshape(k, [c, self.kernel, self.kernel])
    }

    /// `R_s(a, b)`; the output keeps `a`'s spatial size.
    pub fn forward(&self, g: &mut Graph, p: &Bound, a: Var, b: Var) -> Result<Var> {
        check_channels(g, a, b)?;
        let k = self.kernel_from(g, p, b)?;
        g.depthwise(a, k, self.kernel / 2)
    }
}

fn check_channels(g: &Graph, a: Var, b: Var) -> Result<()> {
    let ca = g.value(a).dims3()?.0;
    let cb = g.value(b).dims3()?.0;
    if ca != cb {
        return Err(Error::shape(format!("relation inputs have {ca} and {cb} channels")));
    }
    Ok(())
}

/// `R_s(a, b)` in fixed-average mode: `a` scaled per channel by the spatial mean of `b`.
pub fn spatial_relation_fixed(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    check_channels(g, a, b)?;
    let k = g.global_avg_pool(b)?;
    g.depthwise(a, k, 0)
}

/// Correlates `a` with an already pooled `[C,1,1]` kernel (the fixed-average
/// relation when the support mean has been precomputed).
pub fn correlate_with_kernel(g: &mut Graph, a: Var, kernel: Var) -> Result<Var> {
    check_channels(g, a, kernel)?;
    g.depthwise(a, kernel, 0)
}

/// Shape of a channel relation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRelation {
    pub prefix: String,
    pub channels: usize,
}

impl ChannelRelation {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "channel relation needs an even channel count, got {channels}"
            )));
        }
        Ok(ChannelRelation {
            prefix: prefix.into(),
            channels,
        })
    }

    fn key(&self, part: &str) -> String {
        format!("{}.relation.channel.{part}", self.prefix)
    }

    /// `gain` scales all three convolutions; 0 starts the relation at the
    /// zero map.
    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, gain: f64, rng: &mut R) -> Result<()> {
        let c = self.channels;
        init_conv(ps, &self.key("cat"), c, 2 * c, 3, gain, rng)?;
        init_conv(ps, &self.key("a"), c / 2, c, 1, gain, rng)?;
        init_conv(ps, &self.key("b"), c / 2, c, 1, gain, rng)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, a: Var, b: Var) -> Result<Var> {
        if g.value(a).shape() != g.value(b).shape() {
            return Err(Error::shape(format!(
                "channel relation inputs {:?} vs {:?}",
                g.value(a).shape(),
                g.value(b).shape()
            )));
        }
        if g.value(a).dims3()?.0 != self.channels {
            return Err(Error::shape(format!(
                "channel relation built for {} channels, got {:?}",
                self.channels,
                g.value(a).shape()
            )));
        }
        let cat = g.concat(&[a, b])?;
        let mixed = conv(g, p, &self.key("cat"), cat, 1, 1)?;
        let ca = conv(g, p, &self.key("a"), a, 1, 0)?;
        let cb = conv(g, p, &self.key("b"), b, 1, 0)?;
        let split = g.concat(&[ca, cb])?;
        g.add(mixed, split)
    }
}
