//! Mini-batch SGD on the triplet loss.
//!
//! Each epoch shuffles the patients (seeded) and fills batches with whole
//! patients until `batch_size` records are reached, so every batch carries
//! anchor-positive pairs. Triplets are mined on fresh embeddings of the batch,
//! gradients of all three triplet members are summed per record, pushed
//! through the encoder, and averaged over the batch's triplet count.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{group_by_patient, DataSet};
use crate::encoder::{Embed, EncoderGrads, EncoderParams, ForwardTrace};
use crate::error::{Error, Result};
use crate::eval::{self, PairSetting};
use crate::metric::{self, MiningStrategy, Triplet};
use crate::seeds;

const VALIDATION_TAG: u64 = 0x7661_6c69_6461_7465;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Triplet margin.
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub triplets_per_batch: usize,
    pub mining: MiningStrategy,
    pub seed: u64,
    /// Learning-rate multiplier applied after every epoch.
    pub lr_decay: f64,
    /// Randomly mined triplets for the per-epoch validation loss.
    pub val_triplets: usize,
    /// Upper bound on positive and on negative pairs for validation AUROC.
    pub val_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: metric::DEFAULT_MARGIN,
            learning_rate: 0.05,
            batch_size: 64,
            epochs: 30,
            triplets_per_batch: 128,
            mining: MiningStrategy::SemiHardNegative,
            seed: 0,
            lr_decay: 0.97,
            val_triplets: 512,
            val_pairs: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        // A zero rate is accepted: it turns training into a pure evaluation run.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be nonnegative, got {}", self.learning_rate));
        }
        if self.batch_size < 2 || self.triplets_per_batch == 0 {
            return bad("batch_size must be at least 2 and triplets_per_batch positive".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.val_triplets == 0 || self.val_pairs == 0 {
            return bad("val_triplets and val_pairs must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_auroc: Vec<f64>,
    /// Mean triplet loss of every batch, before its update.
    pub batch_losses: Vec<Vec<f64>>,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    /// `epoch,train_loss,val_loss,val_auroc` with one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_auroc\n");
        for e in 0..self.epochs() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                e + 1,
                self.train_loss[e],
                self.val_loss[e],
                self.val_auroc[e]
            );
        }
        out
    }
}

/// Embeds every record of `dataset`, in record order.
pub fn embed_all<E: Embed + ?Sized>(embedder: &E, dataset: &DataSet) -> Result<Vec<Vec<f64>>> {
    dataset
        .records()
        .par_iter()
        .map(|r| embedder.embed(&r.features))
        .collect()
}

/// Mean triplet loss over `count` uniformly drawn triplets.
pub fn evaluate_mean_loss<E: Embed + ?Sized>(
    embedder: &E,
    dataset: &DataSet,
    alpha: f64,
    seed: u64,
    count: usize,
) -> Result<f64> {
    let embeddings = embed_all(embedder, dataset)?;
    let ids = dataset.patient_ids();
    let triplets = metric::mine_triplets(
        &embeddings,
        &ids,
        MiningStrategy::RandomWithinBatch,
        count,
        alpha,
        seed,
    )?;
    let mut total = 0.0;
    for t in &triplets {
        total += metric::triplet_loss(
            &embeddings[t.anchor],
            &embeddings[t.positive],
            &embeddings[t.negative],
            alpha,
        )?;
    }
    Ok(total / triplets.len() as f64)
}

/// Mean triplet loss and its parameter gradient for the given triplets over
/// the records `batch` (indices into `dataset`). Triplet indices refer to
/// positions within `batch`.
pub fn batch_gradient(
    params: &EncoderParams,
    dataset: &DataSet,
    batch: &[usize],
    triplets: &[Triplet],
    alpha: f64,
) -> Result<(f64, EncoderGrads)> {
    let traces = forward_batch(params, dataset, batch)?;
    gradient_from_traces(params, &traces, triplets, alpha)
}

fn forward_batch(params: &EncoderParams, dataset: &DataSet, batch: &[usize]) -> Result<Vec<ForwardTrace>> {
    let records = dataset.records();
    batch
        .par_iter()
        .map(|&i| {
            let r = records.get(i).ok_or(Error::IndexOutOfRange {
                index: i,
                len: records.len(),
            })?;
            params.forward(&r.features).map(|(_, t)| t)
        })
        .collect()
}

fn gradient_from_traces(
    params: &EncoderParams,
    traces: &[ForwardTrace],
    triplets: &[Triplet],
    alpha: f64,
) -> Result<(f64, EncoderGrads)> {
    let d = params.config().output_dim;
    let mut grad_emb = vec![vec![0.0; d]; traces.len()];
    let mut total = 0.0;
    for t in triplets {
        let (a, p, n) = (
            traces[t.anchor].embedding(),
            traces[t.positive].embedding(),
            traces[t.negative].embedding(),
        );
        total += metric::triplet_loss(a, p, n, alpha)?;
        let (ga, gp, gn) = metric::triplet_loss_grad(a, p, n, alpha)?;
        for (idx, g) in [(t.anchor, ga), (t.positive, gp), (t.negative, gn)] {
            grad_emb[idx].iter_mut().zip(&g).for_each(|(acc, v)| *acc += v);
        }
    }
    let per_record: Vec<Option<EncoderGrads>> = traces
        .par_iter()
        .zip(&grad_emb)
        .map(|(trace, g)| {
            if g.iter().all(|v| *v == 0.0) {
                Ok(None)
            } else {
                params.backward(trace, g).map(|(grads, _)| Some(grads))
            }
        })
        .collect::<Result<_>>()?;
    let mut grads = EncoderGrads::zeros_like(params);
    for g in per_record.iter().flatten() {
        grads.add_assign(g);
    }
    let count = triplets.len().max(1) as f64;
    grads.scale(1.0 / count);
    Ok((total / count, grads))
}

/// Patient-grouped batches for one epoch.
fn epoch_batches(dataset: &DataSet, batch_size: usize, rng: &mut ChaCha20Rng) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = group_by_patient(dataset).into_values().collect();
    groups.shuffle(rng);
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::with_capacity(batch_size);
    for g in groups {
        current.extend(g);
        if current.len() >= batch_size {
            batches.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

fn check_trainable(dataset: &DataSet, what: &str) -> Result<()> {
    let patients = dataset.num_patients();
    if patients < 2 {
        return Err(Error::TooFewPatients(patients).context(format!("{what} set")));
    }
    if !dataset.has_positive_pair() {
        return Err(Error::NoPositivePair.context(format!("{what} set")));
    }
    Ok(())
}

/// Validation AUROC on random-negative pairs, capped at `max_pairs` per class.
pub fn validation_auroc<E: Embed + ?Sized>(
    embedder: &E,
    dataset: &DataSet,
    max_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let (pos, neg) = eval::pair_capacity(dataset, &PairSetting::RandomNegatives)?;
    let pairs = eval::build_pairs(
        dataset,
        &PairSetting::RandomNegatives,
        pos.min(max_pairs),
        neg.min(max_pairs),
        seed,
    )?;
    let scored = eval::score_pairs(embedder, dataset, &pairs)?;
    eval::auroc(&scored)
}

/// Trains `params` on `train_set`, tracking loss and AUROC on `val_set`.
pub fn train(
    config: &TrainConfig,
    params: &EncoderParams,
    train_set: &DataSet,
    val_set: &DataSet,
) -> Result<(EncoderParams, TrainHistory)> {
    config.validate()?;
    if params.config().input_dim != train_set.ambient_dim() {
        return Err(Error::DimensionMismatch {
            context: "encoder input vs training features",
            expected: params.config().input_dim,
            actual: train_set.ambient_dim(),
        });
    }
    check_trainable(train_set, "training")?;
    check_trainable(val_set, "validation")?;
    let train_ids: HashSet<&str> = train_set.patient_ids().into_iter().collect();
    if let Some(shared) = val_set.patient_ids().into_iter().find(|p| train_ids.contains(p)) {
        return Err(Error::InvalidDataset(format!(
            "patient {shared:?} appears in both training and validation sets"
        )));
    }

    let mut params = params.clone();
    let mut history = TrainHistory::default();
    let mut lr = config.learning_rate;
    let records = train_set.records();

    for epoch in 0..config.epochs {
        let mut rng = ChaCha20Rng::seed_from_u64(seeds::derive(config.seed, &[epoch as u64]));
        let batches = epoch_batches(train_set, config.batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_triplets = 0usize;
        let mut batch_losses = Vec::with_capacity(batches.len());

        for (b, batch) in batches.iter().enumerate() {
            let ids: Vec<&str> = batch.iter().map(|&i| records[i].patient_id.as_str()).collect();
            let distinct: HashSet<&str> = ids.iter().copied().collect();
            if distinct.len() < 2 || distinct.len() == ids.len() {
                continue;
            }
            let traces = forward_batch(&params, train_set, batch)?;
            let embeddings: Vec<Vec<f64>> = traces.iter().map(|t| t.embedding().to_vec()).collect();
            let triplets = metric::mine_triplets(
                &embeddings,
                &ids,
                config.mining,
                config.triplets_per_batch,
                config.alpha,
                seeds::derive(config.seed, &[epoch as u64, b as u64]),
            )?;
            let (loss, grads) = gradient_from_traces(&params, &traces, &triplets, config.alpha)?;
            if !loss.is_finite() || grads.flatten().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "training loss {loss} at epoch {} batch {b}",
                    epoch + 1
                )));
            }
            params.apply_update(&grads, lr);
            epoch_loss += loss * triplets.len() as f64;
            epoch_triplets += triplets.len();
            batch_losses.push(loss);
        }
        if epoch_triplets == 0 {
            return Err(Error::InvalidConfig(format!(
                "epoch {} produced no usable batch; increase batch_size",
                epoch + 1
            )));
        }

        let val_seed = seeds::derive(config.seed, &[VALIDATION_TAG, epoch as u64]);
        history.train_loss.push(epoch_loss / epoch_triplets as f64);
        history
            .val_loss
            .push(evaluate_mean_loss(&params, val_set, config.alpha, val_seed, config.val_triplets)?);
        history
            .val_auroc
            .push(validation_auroc(&params, val_set, config.val_pairs, val_seed)?);
        history.batch_losses.push(batch_losses);
        lr *= config.lr_decay;
    }
    Ok((params, history))
}
