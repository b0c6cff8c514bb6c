//! Two-way contrastive episodes: one query annotated with class `c1` only,
//! `k` supports of `c1` and `k` supports of a different class `c2`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::BBox;
use crate::error::{Error, Result};

use super::split::{DatasetSplit, QueryImage, SupportInstance};

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub query: QueryImage,
    pub c1: u64,
    pub c2: u64,
    /// Boxes of `c1` in the query.
    pub targets: Vec<BBox>,
    pub supports_c1: Vec<SupportInstance>,
    pub supports_c2: Vec<SupportInstance>,
}

/// Draws `k` distinct instances of `class_id` from `pool`, never from image
/// `exclude`.
pub fn sample_supports<R: Rng + ?Sized>(
    pool: &[SupportInstance],
    class_id: u64,
    k: usize,
    exclude: Option<usize>,
    rng: &mut R,
) -> Result<Vec<SupportInstance>> {
    let candidates: Vec<&SupportInstance> = pool
        .iter()
        .filter(|s| s.class_id == class_id && Some(s.image) != exclude)
        .collect();
    if candidates.len() < k {
        return Err(Error::InsufficientSupport {
            class: class_id,
            available: candidates.len(),
            required: k,
        });
    }
    Ok(sample(rng, candidates.len(), k).into_iter().map(|i| *candidates[i]).collect())
}

/// Deterministic in `seed`.
pub fn sample_episode(split: &DatasetSplit, shots: usize, seed: u64) -> Result<Episode> {
    split.check_disjoint()?;
    let classes: Vec<u64> = split.base_classes.iter().copied().collect();
    for &c in &classes {
        let n = split.base_supports.iter().filter(|s| s.class_id == c).count();
        if n < shots {
            return Err(Error::InsufficientSupport {
                class: c,
                available: n,
                required: shots,
            });
        }
        if !split.base_queries.iter().any(|q| q.boxes.iter().any(|(k, _)| *k == c)) {
            return Err(Error::Data(format!("base class {c} has no query image")));
        }
    }
    if classes.len() < 2 {
        return Err(Error::Data("episodes need at least two base classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c1 = classes[rng.random_range(0..classes.len())];
    let queries: Vec<&QueryImage> = split
        .base_queries
        .iter()
        .filter(|q| q.boxes.iter().any(|(k, _)| *k == c1))
        .collect();
    let query = queries[rng.random_range(0..queries.len())];
    let others: Vec<u64> = classes.iter().copied().filter(|&c| c != c1).collect();
    let c2 = others[rng.random_range(0..others.len())];
    let supports_c1 = sample_supports(&split.base_supports, c1, shots, Some(query.image), &mut rng)?;
    let supports_c2 = sample_supports(&split.base_supports, c2, shots, Some(query.image), &mut rng)?;
    Ok(Episode {
        seed,
        query: QueryImage {
            image: query.image,
            boxes: query.boxes.iter().filter(|(k, _)| *k == c1).copied().collect(),
        },
        c1,
        c2,
        targets: query.boxes_of(c1),
        supports_c1,
        supports_c2,
    })
}
