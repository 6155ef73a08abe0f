//! Verification evaluation: labelled pair construction, distance scoring,
//! ROC/AUROC/EER, threshold calibration and per-setting reports.
//!
//! Scores are squared embedding distances. Under the default
//! [`Orientation::LowerIsSame`] a pair is predicted to share an identity iff
//! `S <= t`, and AUROC is the probability that a same-identity pair scores
//! below a different-identity pair (ties count one half).

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{group_by_patient, AttrKind, DataSet};
use crate::encoder::Embed;
use crate::error::{Error, Result};
use crate::metric::sq_dist;
use crate::seeds;

/// How negative pairs are drawn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSetting {
    RandomNegatives,
    /// Negatives restricted to pairs agreeing on a categorical attribute.
    SameAttributeNegatives(String),
    /// Random pairs drawn from a separately supplied shifted dataset.
    Ood,
}

impl PairSetting {
    pub fn label(&self) -> String {
        match self {
            PairSetting::RandomNegatives => "random".into(),
            PairSetting::SameAttributeNegatives(a) => format!("same_attribute:{a}"),
            PairSetting::Ood => "ood".into(),
        }
    }

    /// Inverse of [`PairSetting::label`].
    pub fn parse(text: &str) -> Result<PairSetting> {
        match text {
            "random" => Ok(PairSetting::RandomNegatives),
            "ood" => Ok(PairSetting::Ood),
            _ => match text.strip_prefix("same_attribute:") {
                Some(attr) if !attr.is_empty() => Ok(PairSetting::SameAttributeNegatives(attr.into())),
                _ => Err(Error::InvalidConfig(format!(
                    "unknown pair setting {text:?}; expected random, ood or same_attribute:<name>"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLabel {
    Same,
    Different,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub a: usize,
    pub b: usize,
    pub label: PairLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pub pairs: Vec<LabeledPair>,
    pub setting: PairSetting,
    pub seed: u64,
}

impl PairSet {
    pub fn count(&self, label: PairLabel) -> usize {
        self.pairs.iter().filter(|p| p.label == label).count()
    }

    /// Brute-force check of every label against `dataset` patient ids, of
    /// distinct indices, of no repeated pair, and of the attribute constraint.
    pub fn verify(&self, dataset: &DataSet) -> Result<()> {
        let recs = dataset.records();
        let mut seen = HashSet::new();
        for (k, p) in self.pairs.iter().enumerate() {
            let (ra, rb) = (dataset.record(p.a)?, dataset.record(p.b)?);
            let fail = |m: &str| Err(Error::InvalidDataset(format!("pair {k} ({}, {}): {m}", p.a, p.b)));
            if p.a == p.b {
                return fail("indices coincide");
            }
            if !seen.insert((p.a.min(p.b), p.a.max(p.b))) {
                return fail("duplicate pair");
            }
            let same = ra.patient_id == rb.patient_id;
            match (p.label, same) {
                (PairLabel::Same, false) => return fail("labelled same but patients differ"),
                (PairLabel::Different, true) => return fail("labelled different but patients match"),
                _ => {}
            }
            if let (PairSetting::SameAttributeNegatives(attr), PairLabel::Different) = (&self.setting, p.label) {
                if recs[p.a].attributes.get(attr) != recs[p.b].attributes.get(attr) {
                    return fail("negative pair disagrees on the attribute");
                }
            }
        }
        Ok(())
    }
}

fn choose2(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

fn categorical_attribute<'a>(dataset: &'a DataSet, attr: &str) -> Result<&'a AttrKind> {
    let kind = dataset.attribute_kind(attr)?;
    if !matches!(kind, AttrKind::Categorical { .. }) {
        return Err(Error::InvalidConfig(format!(
            "attribute {attr:?} is numeric; same-attribute negatives need a categorical attribute"
        )));
    }
    Ok(kind)
}

/// Number of eligible (positive, negative) unordered pairs under `setting`.
pub fn pair_capacity(dataset: &DataSet, setting: &PairSetting) -> Result<(usize, usize)> {
    let groups = group_by_patient(dataset);
    let positives: usize = groups.values().map(|g| choose2(g.len())).sum();
    let negatives = match setting {
        PairSetting::RandomNegatives | PairSetting::Ood => choose2(dataset.len()) - positives,
        PairSetting::SameAttributeNegatives(attr) => {
            categorical_attribute(dataset, attr)?;
            let mut per_value: BTreeMap<&str, usize> = BTreeMap::new();
            let mut per_patient_value: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for r in dataset.records() {
                let v = r.attributes[attr].as_categorical().unwrap_or_default();
                *per_value.entry(v).or_default() += 1;
                *per_patient_value.entry((r.patient_id.as_str(), v)).or_default() += 1;
            }
            per_value.values().map(|&c| choose2(c)).sum::<usize>()
                - per_patient_value.values().map(|&c| choose2(c)).sum::<usize>()
        }
    };
    Ok((positives, negatives))
}

/// Above this many candidate pairs, negatives are drawn by rejection sampling
/// instead of enumeration.
const ENUMERATION_LIMIT: usize = 4_000_000;

/// Samples exactly `n_pos` same-patient and `n_neg` different-patient pairs,
/// uniformly without replacement from the eligible populations.
pub fn build_pairs(
    dataset: &DataSet,
    setting: &PairSetting,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<PairSet> {
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidConfig("pair counts must be positive".into()));
    }
    let (cap_pos, cap_neg) = pair_capacity(dataset, setting)?;
    if n_pos > cap_pos {
        return Err(Error::InsufficientPairs {
            kind: "positive",
            requested: n_pos,
            available: cap_pos,
        });
    }
    if n_neg > cap_neg {
        return Err(Error::InsufficientPairs {
            kind: "negative",
            requested: n_neg,
            available: cap_neg,
        });
    }
    let recs = dataset.records();
    let attr = match setting {
        PairSetting::SameAttributeNegatives(a) => Some(a.as_str()),
        _ => None,
    };
    let eligible_negative = |i: usize, j: usize| {
        recs[i].patient_id != recs[j].patient_id
            && attr.is_none_or(|a| recs[i].attributes.get(a) == recs[j].attributes.get(a))
    };

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let positives: Vec<(usize, usize)> = group_by_patient(dataset)
        .values()
        .flat_map(|g| {
            g.iter()
                .enumerate()
                .flat_map(move |(k, &i)| g[k + 1..].iter().map(move |&j| (i, j)))
        })
        .collect();
    let mut pairs: Vec<LabeledPair> = index::sample(&mut rng, positives.len(), n_pos)
        .into_iter()
        .map(|k| LabeledPair {
            a: positives[k].0,
            b: positives[k].1,
            label: PairLabel::Same,
        })
        .collect();

    let n = dataset.len();
    let negatives: Vec<(usize, usize)> = if choose2(n) > ENUMERATION_LIMIT && n_neg * 4 <= cap_neg {
        let mut chosen = Vec::with_capacity(n_neg);
        let mut seen = HashSet::with_capacity(n_neg);
        while chosen.len() < n_neg {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            let key = (i.min(j), i.max(j));
            if i != j && eligible_negative(i, j) && seen.insert(key) {
                chosen.push(key);
            }
        }
        chosen
    } else {
        let population: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| eligible_negative(i, j))
            .collect();
        index::sample(&mut rng, population.len(), n_neg)
            .into_iter()
            .map(|k| population[k])
            .collect()
    };
    pairs.extend(negatives.into_iter().map(|(a, b)| LabeledPair {
        a,
        b,
        label: PairLabel::Different,
    }));
    Ok(PairSet {
        pairs,
        setting: setting.clone(),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub score: f64,
    pub label: PairLabel,
}

/// `S = ||f(x_a) - f(x_b)||^2` for every pair, in pair order.
pub fn score_pairs<E: Embed + ?Sized>(embedder: &E, dataset: &DataSet, pairs: &PairSet) -> Result<Vec<ScoredPair>> {
    let n = dataset.len();
    let mut needed: Vec<usize> = pairs.pairs.iter().flat_map(|p| [p.a, p.b]).collect();
    if let Some(&bad) = needed.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    needed.sort_unstable();
    needed.dedup();
    let computed: Vec<Vec<f64>> = needed
        .par_iter()
        .map(|&i| embedder.embed(&dataset.records()[i].features))
        .collect::<Result<_>>()?;
    let mut embeddings: Vec<Option<Vec<f64>>> = vec![None; n];
    for (i, e) in needed.into_iter().zip(computed) {
        embeddings[i] = Some(e);
    }
    Ok(pairs
        .pairs
        .iter()
        .map(|p| ScoredPair {
            score: sq_dist(
                embeddings[p.a].as_deref().expect("embedded"),
                embeddings[p.b].as_deref().expect("embedded"),
            ),
            label: p.label,
        })
        .collect())
}

/// Direction of the decision rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Predict same identity iff `S <= t` (scores are distances).
    #[default]
    LowerIsSame,
    /// Predict same identity iff `S >= t`.
    HigherIsSame,
}

impl Orientation {
    /// Maps a score to a key where lower always means "more likely same".
    fn key(self, score: f64) -> f64 {
        match self {
            Orientation::LowerIsSame => score,
            Orientation::HigherIsSame => -score,
        }
    }

    fn unkey(self, key: f64) -> f64 {
        self.key(key)
    }

    pub fn predicts_same(self, score: f64, threshold: f64) -> bool {
        match self {
            Orientation::LowerIsSame => score <= threshold,
            Orientation::HigherIsSame => score >= threshold,
        }
    }
}

/// Scores keyed so that ascending order runs from "most same" to "least same".
type Keyed = Vec<(f64, PairLabel)>;

/// (key, label) sorted ascending by key, plus class counts.
fn keyed(scored: &[ScoredPair], orientation: Orientation) -> Result<(Keyed, usize, usize)> {
    let mut keys = Vec::with_capacity(scored.len());
    let (mut pos, mut neg) = (0, 0);
    for s in scored {
        if !s.score.is_finite() {
            return Err(Error::NonFinite(format!("score {}", s.score)));
        }
        match s.label {
            PairLabel::Same => pos += 1,
            PairLabel::Different => neg += 1,
        }
        keys.push((orientation.key(s.score), s.label));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass {
            positives: pos,
            negatives: neg,
        });
    }
    keys.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok((keys, pos, neg))
}

/// Groups of equal keys: (key, positives, negatives) in ascending key order.
fn tie_groups(keys: &[(f64, PairLabel)]) -> Vec<(f64, usize, usize)> {
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for &(k, label) in keys {
        if groups.last().is_none_or(|g| g.0 != k) {
            groups.push((k, 0, 0));
        }
        let g = groups.last_mut().expect("pushed");
        match label {
            PairLabel::Same => g.1 += 1,
            PairLabel::Different => g.2 += 1,
        }
    }
    groups
}

/// AUROC with the default lower-is-same orientation.
pub fn auroc(scored: &[ScoredPair]) -> Result<f64> {
    auroc_oriented(scored, Orientation::LowerIsSame)
}

/// Mann-Whitney AUROC from mid-ranks: the negative rank sum minus its
/// minimum counts (negative, positive) pairs ordered correctly, ties as one
/// half. All intermediate values are exact half-integers.
pub fn auroc_oriented(scored: &[ScoredPair], orientation: Orientation) -> Result<f64> {
    let (keys, pos, neg) = keyed(scored, orientation)?;
    let mut rank_sum_neg = 0.0;
    let mut start = 0usize;
    for (_, p, n) in tie_groups(&keys) {
        let size = p + n;
        let mid_rank = start as f64 + (size as f64 + 1.0) / 2.0;
        rank_sum_neg += n as f64 * mid_rank;
        start += size;
    }
    let u = rank_sum_neg - (neg as f64) * (neg as f64 + 1.0) / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Points along the threshold sweep, from (0, 0) to (1, 1).
    pub points: Vec<RocPoint>,
    pub orientation: Orientation,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }

    /// Best TPR among sweep points whose FPR does not exceed `fpr`.
    pub fn tpr_at_fpr(&self, fpr: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fpr <= fpr)
            .map(|p| p.tpr)
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
        }
        out
    }
}

/// ROC sweep over every distinct score.
pub fn roc_curve(scored: &[ScoredPair], orientation: Orientation) -> Result<RocCurve> {
    let (keys, pos, neg) = keyed(scored, orientation)?;
    let mut points = vec![RocPoint {
        threshold: orientation.unkey(f64::NEG_INFINITY),
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, p, n) in tie_groups(&keys) {
        tp += p;
        fp += n;
        points.push(RocPoint {
            threshold: orientation.unkey(k),
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(RocCurve { points, orientation })
}

/// Equal error rate: where FPR = 1 - TPR, linearly interpolated along the curve.
pub fn eer(curve: &RocCurve) -> f64 {
    let pts = &curve.points;
    let gap = |p: &RocPoint| p.fpr + p.tpr - 1.0;
    for k in 0..pts.len() {
        let g = gap(&pts[k]);
        if g >= 0.0 {
            if g == 0.0 || k == 0 {
                return pts[k].fpr;
            }
            let g0 = gap(&pts[k - 1]);
            let lambda = -g0 / (g - g0);
            return pts[k - 1].fpr + lambda * (pts[k].fpr - pts[k - 1].fpr);
        }
    }
    pts.last().map_or(0.5, |p| p.fpr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdCriterion {
    MaxAccuracy,
    TargetFpr(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub accuracy: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Picks a decision threshold on validation scores.
///
/// Candidates are midpoints between adjacent distinct scores plus one point
/// a unit beyond each end. `MaxAccuracy` takes the most accurate candidate
/// (the one predicting "same" least often on ties); `TargetFpr(v)` the most
/// permissive candidate whose FPR is at most `v`.
pub fn select_threshold(
    scored: &[ScoredPair],
    criterion: ThresholdCriterion,
    orientation: Orientation,
) -> Result<ThresholdChoice> {
    if let ThresholdCriterion::TargetFpr(v) = criterion {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidConfig(format!("target FPR must lie in [0, 1], got {v}")));
        }
    }
    let (keys, pos, neg) = keyed(scored, orientation)?;
    let groups = tie_groups(&keys);
    let total = (pos + neg) as f64;

    // (key threshold, tp, fp) for each candidate, ascending.
    let mut candidates = Vec::with_capacity(groups.len() + 1);
    candidates.push((groups[0].0 - 1.0, 0usize, 0usize));
    let (mut tp, mut fp) = (0, 0);
    for (k, w) in groups.iter().enumerate() {
        tp += w.1;
        fp += w.2;
        let t = match groups.get(k + 1) {
            Some(next) => {
                let mid = w.0 + (next.0 - w.0) / 2.0;
                if mid < next.0 {
                    mid
                } else {
                    w.0
                }
            }
            None => w.0 + 1.0,
        };
        candidates.push((t, tp, fp));
    }
    let choice = |&(t, tp, fp): &(f64, usize, usize)| ThresholdChoice {
        threshold: orientation.unkey(t),
        accuracy: (tp + (neg - fp)) as f64 / total,
        fpr: fp as f64 / neg as f64,
        tpr: tp as f64 / pos as f64,
    };
    let best = match criterion {
        ThresholdCriterion::MaxAccuracy => {
            let mut best = &candidates[0];
            for c in &candidates[1..] {
                if c.1 + (neg - c.2) > best.1 + (neg - best.2) {
                    best = c;
                }
            }
            best
        }
        ThresholdCriterion::TargetFpr(v) => candidates
            .iter()
            .rev()
            .find(|c| c.2 as f64 / neg as f64 <= v)
            .expect("the lowest candidate has FPR 0"),
    };
    Ok(choice(best))
}

/// Fraction of pairs classified correctly by the rule at `threshold`.
pub fn accuracy_at(scored: &[ScoredPair], threshold: f64, orientation: Orientation) -> f64 {
    if scored.is_empty() {
        return 0.0;
    }
    let correct = scored
        .iter()
        .filter(|s| orientation.predicts_same(s.score, threshold) == (s.label == PairLabel::Same))
        .count();
    correct as f64 / scored.len() as f64
}

fn default_fpr_targets() -> Vec<f64> {
    vec![0.01, 0.05, 0.1]
}

fn default_settings() -> Vec<String> {
    vec!["random".into()]
}

fn default_pairs() -> usize {
    1000
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Setting labels: `random`, `ood` or `same_attribute:<name>`.
    #[serde(default = "default_settings")]
    pub settings: Vec<String>,
    #[serde(default = "default_pairs")]
    pub n_pos: usize,
    #[serde(default = "default_pairs")]
    pub n_neg: usize,
    #[serde(default)]
    pub seed: u64,
    /// Lower the pair counts to what each dataset can supply instead of failing.
    #[serde(default = "default_true")]
    pub clamp_to_available: bool,
    #[serde(default)]
    pub orientation: Orientation,
    #[serde(default = "default_fpr_targets")]
    pub fpr_targets: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            settings: default_settings(),
            n_pos: default_pairs(),
            n_neg: default_pairs(),
            seed: 0,
            clamp_to_available: true,
            orientation: Orientation::LowerIsSame,
            fpr_targets: default_fpr_targets(),
        }
    }
}

impl EvalConfig {
    pub fn pair_settings(&self) -> Result<Vec<PairSetting>> {
        self.settings.iter().map(|s| PairSetting::parse(s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub setting: String,
    pub n_pos: usize,
    pub n_neg: usize,
    pub auroc: f64,
    pub eer: f64,
    pub tpr_at_fpr: BTreeMap<String, f64>,
    pub threshold: f64,
    pub validation_accuracy: f64,
    pub test_accuracy: f64,
    #[serde(skip)]
    pub roc: RocCurve,
}

fn counts_for(dataset: &DataSet, setting: &PairSetting, config: &EvalConfig) -> Result<(usize, usize)> {
    if !config.clamp_to_available {
        return Ok((config.n_pos, config.n_neg));
    }
    let (p, n) = pair_capacity(dataset, setting)?;
    Ok((config.n_pos.min(p), config.n_neg.min(n)))
}

/// One scored pair population: pairs, scores and summary statistics.
pub fn score_setting<E: Embed + ?Sized>(
    embedder: &E,
    dataset: &DataSet,
    setting: &PairSetting,
    config: &EvalConfig,
    seed: u64,
) -> Result<(PairSet, Vec<ScoredPair>)> {
    let (n_pos, n_neg) = counts_for(dataset, setting, config)?;
    let pairs = build_pairs(dataset, setting, n_pos, n_neg, seed)?;
    let scored = score_pairs(embedder, dataset, &pairs)?;
    Ok((pairs, scored))
}

/// Calibrates a MaxAccuracy threshold on random-negative validation pairs,
/// then reports every configured setting on `test` (or `ood` for the
/// out-of-distribution setting).
pub fn evaluate<E: Embed + ?Sized>(
    embedder: &E,
    test: &DataSet,
    validation: &DataSet,
    ood: Option<&DataSet>,
    config: &EvalConfig,
) -> Result<Vec<VerificationReport>> {
    let settings = config.pair_settings()?;
    let orientation = config.orientation;
    let (_, val_scored) = score_setting(
        embedder,
        validation,
        &PairSetting::RandomNegatives,
        config,
        seeds::derive(config.seed, &[u64::MAX]),
    )
    .map_err(|e| e.context("threshold calibration on validation pairs"))?;
    let calibrated = select_threshold(&val_scored, ThresholdCriterion::MaxAccuracy, orientation)?;

    let mut reports = Vec::with_capacity(settings.len());
    for (k, setting) in settings.iter().enumerate() {
        let run = || -> Result<VerificationReport> {
            let dataset = match setting {
                PairSetting::Ood => {
                    ood.ok_or_else(|| Error::InvalidConfig("ood setting requested without an ood dataset".into()))?
                }
                _ => test,
            };
            let (pairs, scored) = score_setting(embedder, dataset, setting, config, seeds::derive(config.seed, &[k as u64]))?;
            let roc = roc_curve(&scored, orientation)?;
            let tpr_at_fpr = config
                .fpr_targets
                .iter()
                .map(|&f| (format!("{f}"), roc.tpr_at_fpr(f)))
                .collect();
            Ok(VerificationReport {
                setting: setting.label(),
                n_pos: pairs.count(PairLabel::Same),
                n_neg: pairs.count(PairLabel::Different),
                auroc: auroc_oriented(&scored, orientation)?,
                eer: eer(&roc),
                tpr_at_fpr,
                threshold: calibrated.threshold,
                validation_accuracy: calibrated.accuracy,
                test_accuracy: accuracy_at(&scored, calibrated.threshold, orientation),
                roc,
            })
        };
        reports.push(run().map_err(|e| e.context(format!("setting {}", setting.label())))?);
    }
    Ok(reports)
}
