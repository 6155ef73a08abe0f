//! Squared-distance score, the triplet hinge loss with its gradients, and
//! triplet mining over identity-labelled embeddings.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MARGIN: f64 = 0.2;

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "vector length",
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// `||a - b||^2`, the verification score (lower means more alike).
pub fn squared_l2(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    Ok(sq_dist(a, b))
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn hinge_argument(a: &[f64], p: &[f64], n: &[f64], alpha: f64) -> Result<f64> {
    check_len(a, p)?;
    check_len(a, n)?;
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::InvalidConfig(format!("margin must be nonnegative, got {alpha}")));
    }
    Ok(sq_dist(a, p) - sq_dist(a, n) + alpha)
}

/// `max(||a - p||^2 - ||a - n||^2 + alpha, 0)`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], alpha: f64) -> Result<f64> {
    Ok(hinge_argument(anchor, positive, negative, alpha)?.max(0.0))
}

/// Gradients of [`triplet_loss`] with respect to anchor, positive and
/// negative. All zero when the hinge is inactive or exactly at its boundary.
pub fn triplet_loss_grad(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    alpha: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let arg = hinge_argument(anchor, positive, negative, alpha)?;
    let d = anchor.len();
    if arg <= 0.0 {
        return Ok((vec![0.0; d], vec![0.0; d], vec![0.0; d]));
    }
    let mut ga = Vec::with_capacity(d);
    let mut gp = Vec::with_capacity(d);
    let mut gn = Vec::with_capacity(d);
    for ((a, p), n) in anchor.iter().zip(positive).zip(negative) {
        ga.push(2.0 * (n - p));
        gp.push(-2.0 * (a - p));
        gn.push(2.0 * (a - n));
    }
    Ok((ga, gp, gn))
}

/// Indices of one training triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn new(anchor: usize, positive: usize, negative: usize) -> Triplet {
        Triplet {
            anchor,
            positive,
            negative,
        }
    }

    /// True when anchor/positive share an identity, the negative does not,
    /// and anchor differs from positive.
    pub fn is_valid<P: PartialEq>(&self, ids: &[P]) -> bool {
        let (a, p, n) = (self.anchor, self.positive, self.negative);
        a < ids.len()
            && p < ids.len()
            && n < ids.len()
            && a != p
            && ids[a] == ids[p]
            && ids[a] != ids[n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningStrategy {
    /// Uniform over all valid triplets.
    RandomWithinBatch,
    /// Per anchor-positive pair, the closest negative with
    /// `d_ap < d_an < d_ap + alpha`; the hardest negative if the band is empty.
    #[default]
    SemiHardNegative,
    /// Per anchor-positive pair, the negative closest to the anchor.
    HardestNegative,
}

/// Draws `count` triplets from `embeddings` labelled by `ids`.
///
/// Strategy-driven modes visit anchor-positive pairs in a seeded shuffled
/// order, reshuffling after each full pass, so `count` may exceed the number
/// of pairs. Ties between equally distant negatives go to the lowest index.
pub fn mine_triplets<P: Ord>(
    embeddings: &[Vec<f64>],
    ids: &[P],
    strategy: MiningStrategy,
    count: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if embeddings.len() != ids.len() {
        return Err(Error::DimensionMismatch {
            context: "mining labels",
            expected: embeddings.len(),
            actual: ids.len(),
        });
    }
    if count == 0 {
        return Err(Error::InvalidConfig("triplet count must be positive".into()));
    }
    let mut groups: BTreeMap<&P, Vec<usize>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        groups.entry(id).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::TooFewPatients(groups.len()));
    }
    let pairs: Vec<(usize, usize)> = groups
        .values()
        .flat_map(|g| {
            g.iter()
                .flat_map(move |&a| g.iter().filter(move |&&p| p != a).map(move |&p| (a, p)))
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::NoPositivePair);
    }
    let n = ids.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    if strategy == MiningStrategy::RandomWithinBatch {
        // Weight each anchor-positive pair by its number of negatives so the
        // draw is uniform over whole triplets.
        let mut cumulative = Vec::with_capacity(pairs.len());
        let mut total = 0usize;
        for &(a, _) in &pairs {
            total += n - groups[&ids[a]].len();
            cumulative.push(total);
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let r = rng.random_range(0..total);
            let k = cumulative.partition_point(|&c| c <= r);
            let (a, p) = pairs[k];
            let offset = r - if k == 0 { 0 } else { cumulative[k - 1] };
            let negative = (0..n)
                .filter(|&j| ids[j] != ids[a])
                .nth(offset)
                .expect("offset within negative count");
            out.push(Triplet::new(a, p, negative));
        }
        return Ok(out);
    }

    let dim = embeddings.first().map_or(0, Vec::len);
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::InvalidDataset("embeddings have differing lengths".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        order.shuffle(&mut rng);
        for &k in &order {
            if out.len() == count {
                break;
            }
            let (a, p) = pairs[k];
            let d_ap = sq_dist(&embeddings[a], &embeddings[p]);
            let mut hardest: Option<(f64, usize)> = None;
            let mut semi_hard: Option<(f64, usize)> = None;
            for j in (0..n).filter(|&j| ids[j] != ids[a]) {
                let d_an = sq_dist(&embeddings[a], &embeddings[j]);
                if hardest.is_none_or(|(best, _)| d_an < best) {
                    hardest = Some((d_an, j));
                }
                if d_ap < d_an && d_an < d_ap + alpha && semi_hard.is_none_or(|(best, _)| d_an < best) {
                    semi_hard = Some((d_an, j));
                }
            }
            let chosen = match strategy {
                MiningStrategy::SemiHardNegative => semi_hard.or(hardest),
                _ => hardest,
            };
            let (_, negative) = chosen.expect("at least two patients");
            out.push(Triplet::new(a, p, negative));
        }
    }
    Ok(out)
}
