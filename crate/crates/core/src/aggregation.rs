//! Global-local shot aggregation.
//!
//! For `k` deepest support features `φ_i` (each `C x a x a`):
//!
//! ```text
//! f_i = R_c(Conv(φ_i), mean_j Conv(φ_j))
//! M   = softmax over shots of MLP(f_i)        (per channel and location)
//! e   = Σ_i φ_i ⊙ M_i
//! ```
//!
//! The MLP is two 1x1 convolutions with a rectifier between them, so it acts on
//! the channel vector at each location. Because the softmax runs over the shot
//! axis, `e` is a per-location convex combination of the shots; one shot gives
//! `e = φ_1` exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Bound, Graph, Var};
use crate::backbone;
use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::layers::{conv, init_conv};
use crate::proposal::ScsKernels;
use crate::relation::ChannelRelation;
use crate::tensor::{ParamSet, Tensor};

/// Aggregated support representation of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_id: u64,
    /// Number of shots aggregated.
    pub k: usize,
    /// `C4 x a x a` exemplar.
    pub e: Tensor,
    /// Shot means of the per-scale global support kernels.
    pub g2: Tensor,
    pub g3: Tensor,
    pub g4: Tensor,
}

impl ClassPrototype {
    /// Hex SHA-256 over the prototype values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.class_id.to_le_bytes());
        h.update((self.k as u64).to_le_bytes());
        for t in [&self.e, &self.g2, &self.g3, &self.g4] {
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Intermediate quantities of one aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationTrace {
    /// Per-shot channel-relation features.
    pub f: Vec<Tensor>,
    /// Per-shot confidence maps; they sum to one at every location.
    pub m: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct TraceVars {
    pub f: Vec<Var>,
    pub m: Vec<Var>,
}

/// A prototype living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct PrototypeVars {
    pub e: Var,
    pub kernels: ScsKernels,
}

fn channel_relation(channels: usize) -> Result<ChannelRelation> {
    ChannelRelation::new("glr", channels)
}

pub fn init<R: Rng + ?Sized>(arch: &ArchConfig, ps: &mut ParamSet, rng: &mut R) -> Result<()> {
    let c = arch.backbone.widths[3];
    init_conv(ps, "glr.conv", c, c, 3, 1.0, rng)?;
    channel_relation(c)?.init(ps, 0.5, rng)?;
    init_conv(ps, "glr.mlp1", c, c, 1, 1.0, rng)?;
    init_conv(ps, "glr.mlp2", c, c, 1, 0.5, rng)
}

fn check_shots(g: &Graph, shots: &[Var]) -> Result<()> {
    let first = shots
        .first()
        .ok_or_else(|| Error::InvalidArgument("aggregation needs at least one shot".into()))?;
    let shape = g.value(*first).shape();
    g.value(*first).dims3()?;
    if let Some(bad) = shots.iter().find(|s| g.value(**s).shape() != shape) {
        return Err(Error::shape(format!(
            "shots have different shapes: {:?} vs {:?}",
            shape,
            g.value(*bad).shape()
        )));
    }
    Ok(())
}

/// Weighted aggregation on a graph. Returns `e` and the per-shot trace.
pub fn aggregate_vars(g: &mut Graph, p: &Bound, shots: &[Var]) -> Result<(Var, TraceVars)> {
    check_shots(g, shots)?;
    let c = g.value(shots[0]).dims3()?.0;
    let rel = channel_relation(c)?;
    let convs = shots
        .iter()
        .map(|&s| conv(g, p, "glr.conv", s, 1, 1))
        .collect::<Result<Vec<_>>>()?;
    let mean = g.mean_n(&convs)?;
    let mut f = Vec::with_capacity(shots.len());
    let mut logits = Vec::with_capacity(shots.len());
    for &ci in &convs {
        let fi = rel.forward(g, p, ci, mean)?;
        let h = conv(g, p, "glr.mlp1", fi, 1, 0)?;
        let h = g.relu(h);
        logits.push(conv(g, p, "glr.mlp2", h, 1, 0)?);
        f.push(fi);
    }
    let stacked = g.stack(&logits)?;
    let weights = g.softmax(stacked, 0)?;
    let mut m = Vec::with_capacity(shots.len());
    let mut terms = Vec::with_capacity(shots.len());
    for (i, &s) in shots.iter().enumerate() {
        let mi = g.select(weights, i)?;
        terms.push(g.mul(s, mi)?);
        m.push(mi);
    }
    let e = g.add_n(&terms)?;
    Ok((e, TraceVars { f, m }))
}

/// Pure-tensor aggregation.
pub fn aggregate(support_feats: &[Tensor], params: &ParamSet) -> Result<(Tensor, AggregationTrace)> {
    let mut g = Graph::new();
    let p = g.bind(&params.subset("glr."), false);
    let shots: Vec<Var> = support_feats.iter().map(|t| g.constant(t.clone())).collect();
    let (e, tr) = aggregate_vars(&mut g, &p, &shots)?;
    Ok((
        g.value(e).clone(),
        AggregationTrace {
            f: tr.f.iter().map(|v| g.value(*v).clone()).collect(),
            m: tr.m.iter().map(|v| g.value(*v).clone()).collect(),
        },
    ))
}

/// Arithmetic mean over shots.
pub fn mean_prototype(support_feats: &[Tensor]) -> Result<Tensor> {
    let first = support_feats
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean prototype needs at least one shot".into()))?;
    if support_feats.iter().any(|t| t.shape() != first.shape()) {
        return Err(Error::shape("shots have different shapes"));
    }
    let k = support_feats.len() as f64;
    Ok(Tensor::from_fn(first.shape().to_vec(), |i| {
        support_feats.iter().map(|t| t.data()[i]).sum::<f64>() / k
    }))
}

/// Runs the backbone on each support chip and builds the class prototype on
/// `g`. With `relation.glr` off the exemplar is the shot mean.
pub fn prototype_vars(g: &mut Graph, p: &Bound, arch: &ArchConfig, chips: &[Tensor]) -> Result<PrototypeVars> {
    if chips.is_empty() {
        return Err(Error::InvalidArgument("a class needs at least one support chip".into()));
    }
    let mut pooled = Vec::with_capacity(chips.len());
    for chip in chips {
        let f = backbone::extract_on(g, p, &arch.backbone, chip)?;
        pooled.push(backbone::pool_support_vars(g, &f, arch.relation.prototype_size)?);
    }
    let deep: Vec<Var> = pooled.iter().map(|s| s.deep).collect();
    let e = if arch.relation.glr {
        aggregate_vars(g, p, &deep)?.0
    } else {
        g.mean_n(&deep)?
    };
    let g2: Vec<Var> = pooled.iter().map(|s| s.g2).collect();
    let g3: Vec<Var> = pooled.iter().map(|s| s.g3).collect();
    let g4: Vec<Var> = pooled.iter().map(|s| s.g4).collect();
    Ok(PrototypeVars {
        e,
        kernels: ScsKernels {
            g2: g.mean_n(&g2)?,
            g3: g.mean_n(&g3)?,
            g4: g.mean_n(&g4)?,
        },
    })
}

/// Builds a materialised prototype from support chips.
pub fn build_prototype(params: &ParamSet, arch: &ArchConfig, class_id: u64, chips: &[Tensor]) -> Result<ClassPrototype> {
    let mut g = Graph::new();
    let p = g.bind(params, false);
    let pv = prototype_vars(&mut g, &p, arch, chips)?;
    Ok(ClassPrototype {
        class_id,
        k: chips.len(),
        e: g.value(pv.e).clone(),
        g2: g.value(pv.kernels.g2).clone(),
        g3: g.value(pv.kernels.g3).clone(),
        g4: g.value(pv.kernels.g4).clone(),
    })
}

/// Puts a materialised prototype on `g` as constants.
pub fn prototype_constants(g: &mut Graph, proto: &ClassPrototype) -> PrototypeVars {
    PrototypeVars {
        e: g.constant(proto.e.clone()),
        kernels: ScsKernels {
            g2: g.constant(proto.g2.clone()),
            g3: g.constant(proto.g3.clone()),
            g4: g.constant(proto.g4.clone()),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_with, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch(c: usize) -> ArchConfig {
        let mut a = ArchConfig::default();
        a.backbone.widths = vec![4, 4, 4, c];
        a
    }

    fn params(c: usize, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        init(&arch(c), &mut ps, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        ps
    }

    fn shots(k: usize, c: usize, a: usize, seed: u64) -> Vec<Tensor> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..k).map(|_| Tensor::uniform([c, a, a], -1.0, 2.0, &mut r)).collect()
    }

    #[test]
    fn single_shot_is_identity() {
        let ps = params(4, 1);
        let s = shots(1, 4, 3, 2);
        let (e, tr) = aggregate(&s, &ps).unwrap();
        assert!(tr.m[0].data().iter().all(|&v| v == 1.0));
        assert_eq!(e, s[0]);
    }

    #[test]
    fn identical_shots_reproduce_the_shot() {
        let ps = params(4, 3);
        let s = shots(1, 4, 3, 4);
        let three = vec![s[0].clone(), s[0].clone(), s[0].clone()];
        let (e, _) = aggregate(&three, &ps).unwrap();
        assert!(e.max_abs_diff(&s[0]) < 1e-6);
    }

    #[test]
    fn weights_partition_unity_and_hull() {
        let ps = params(6, 5);
        let s = shots(4, 6, 3, 6);
        let (e, tr) = aggregate(&s, &ps).unwrap();
        for i in 0..e.len() {
            let total: f64 = tr.m.iter().map(|m| m.data()[i]).sum();
            assert!((total - 1.0).abs() < 1e-6);
            let lo = s.iter().map(|t| t.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = s.iter().map(|t| t.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(e.data()[i] >= lo - 1e-6 && e.data()[i] <= hi + 1e-6);
        }
    }

    #[test]
    fn permutation_invariant() {
        let ps = params(4, 7);
        let s = shots(3, 4, 3, 8);
        let (e1, _) = aggregate(&s, &ps).unwrap();
        let (e2, _) = aggregate(&[s[2].clone(), s[0].clone(), s[1].clone()], &ps).unwrap();
        assert!(e1.max_abs_diff(&e2) < 1e-6);
    }

    #[test]
    fn zero_mlp_equals_mean() {
        let mut ps = params(4, 9);
        for k in ["glr.mlp2.weight", "glr.mlp2.bias"] {
            ps.get_mut(k).unwrap().data_mut().fill(0.0);
        }
        let s = shots(4, 4, 3, 10);
        let (e, _) = aggregate(&s, &ps).unwrap();
        assert!(e.max_abs_diff(&mean_prototype(&s).unwrap()) < 1e-6);
    }

    #[test]
    fn mean_prototype_cases() {
        assert!(mean_prototype(&[]).is_err());
        let s = shots(1, 2, 2, 11);
        assert_eq!(mean_prototype(&s).unwrap(), s[0]);
        let neg = s[0].scale(-1.0);
        assert!(mean_prototype(&[s[0].clone(), neg]).unwrap().data().iter().all(|&v| v == 0.0));
        let s4 = shots(4, 3, 2, 12);
        let m = mean_prototype(&s4).unwrap();
        for i in 0..m.len() {
            let want = (s4[0].data()[i] + s4[1].data()[i] + s4[2].data()[i] + s4[3].data()[i]) / 4.0;
            assert!((m.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let ps = params(4, 0);
        assert!(aggregate(&[], &ps).is_err());
        let mut s = shots(2, 4, 3, 1);
        s[1] = Tensor::zeros([4, 2, 2]);
        assert!(aggregate(&s, &ps).is_err());
    }

    #[test]
    fn grad_check_params_and_inputs() {
        let mut ps = params(4, 13);
        for (i, s) in shots(3, 4, 3, 14).into_iter().enumerate() {
            ps.insert(format!("shot.{i}"), s).unwrap();
        }
        let rep = grad_check_with(
            |g, p| {
                let s = [p.get("shot.0")?, p.get("shot.1")?, p.get("shot.2")?];
                let (e, _) = aggregate_vars(g, p, &s)?;
                let sq = g.mul(e, e)?;
                Ok(g.sum(sq))
            },
            &ps,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn prototype_hash_tracks_content() {
        let mut a = ArchConfig::default();
        a.backbone.widths = vec![4, 4, 8, 8];
        let mut ps = ParamSet::new();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        crate::backbone::init(&a.backbone, &mut ps, &mut r).unwrap();
        init(&a, &mut ps, &mut r).unwrap();
        let chips: Vec<Tensor> = (0..2).map(|_| Tensor::uniform([3, 32, 32], 0.0, 1.0, &mut r)).collect();
        let one = build_prototype(&ps, &a, 6, &chips[..1]).unwrap();
        let two = build_prototype(&ps, &a, 6, &chips).unwrap();
        assert_eq!(one.e.shape(), &[8, 7, 7]);
        assert_eq!(one.k, 1);
        assert_ne!(one.content_hash(), two.content_hash());
        assert_eq!(two.content_hash(), build_prototype(&ps, &a, 6, &chips).unwrap().content_hash());
        assert!(build_prototype(&ps, &a, 6, &[]).is_err());
    }
}
