//! Whole-model parameter initialisation and checkpoint helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{ArchConfig, Config};
use crate::error::{Error, Result};
use crate::tensor::ParamSet;
use crate::{aggregation, backbone, head, proposal};

/// Architecture tag written into checkpoint metadata.
pub const ARCHITECTURE: &str = "airdet-desk-v1";

/// Fresh parameters for every module, seeded deterministically.
pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<ParamSet> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    backbone::init(&arch.backbone, &mut ps, &mut rng)?;
    proposal::init(arch, &mut ps, &mut rng)?;
    aggregation::init(arch, &mut ps, &mut rng)?;
    head::init(arch, &mut ps, &mut rng)?;
    Ok(ps)
}

/// Wraps parameters with metadata describing `cfg`.
pub fn checkpoint(cfg: &Config, params: ParamSet, iteration: u64) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            architecture: ARCHITECTURE.into(),
            config_hash: cfg.hash(),
            seed: cfg.training.seed,
            iteration,
            config: serde_json::to_value(cfg).ok(),
        },
        params,
    }
}

/// The configuration stored in a checkpoint, checked against its parameters.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<Config> {
    if ckpt.meta.architecture != ARCHITECTURE {
        return Err(Error::Format(format!(
            "checkpoint architecture `{}` is not `{ARCHITECTURE}`",
            ckpt.meta.architecture
        )));
    }
    let value = ckpt
        .meta
        .config
        .clone()
        .ok_or_else(|| Error::Format("checkpoint carries no configuration".into()))?;
    let cfg: Config = serde_json::from_value(value).map_err(|e| Error::Format(format!("checkpoint configuration: {e}")))?;
    cfg.validate()?;
    let expected = init_params(&cfg.arch(), 0)?;
    for (k, t) in expected.iter() {
        let got = ckpt.params.require(k)?;
        if got.shape() != t.shape() {
            return Err(Error::Format(format!(
                "parameter `{k}` has shape {:?}, configuration expects {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Config {
        let mut c = Config::default();
        c.backbone.widths = vec![4, 4, 8, 8];
        c.head.reg_hidden = 8;
        c
    }

    #[test]
    fn init_is_seeded() {
        let a = small().arch();
        let p1 = init_params(&a, 3).unwrap();
        assert_eq!(p1.content_hash(), init_params(&a, 3).unwrap().content_hash());
        assert_ne!(p1.content_hash(), init_params(&a, 4).unwrap().content_hash());
        assert!(p1.keys().any(|k| k.starts_with("glr.")));
        assert!(p1.keys().any(|k| k.starts_with("pre.relation.spatial.")));
        assert!(p1.keys().any(|k| k.starts_with("scs.relation.channel.")));
    }

    #[test]
    fn checkpoint_config_round_trip() {
        let c = small();
        let ck = checkpoint(&c, init_params(&c.arch(), 0).unwrap(), 5);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(checkpoint_config(&back).unwrap(), c);
        let mut wrong = back.clone();
        wrong.meta.config = serde_json::to_value(Config::default()).ok();
        assert!(checkpoint_config(&wrong).is_err());
    }
}
