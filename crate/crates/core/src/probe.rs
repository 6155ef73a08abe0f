//! Linear probes on frozen embeddings: one softmax layer trained by
//! full-batch gradient descent to predict a record attribute.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{AttrKind, AttrValue, DataSet};
use crate::encoder::Embed;
use crate::error::{Error, Result};
use crate::eval::{self, Orientation, PairLabel, ScoredPair};
use crate::trainer::embed_all;

fn default_lr() -> f64 {
    0.5
}

fn default_epochs() -> usize {
    500
}

fn default_l2() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub task_attribute: String,
    /// Class boundaries for numeric attributes (strictly increasing).
    #[serde(default)]
    pub buckets: Option<Vec<f64>>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_l2")]
    pub l2_penalty: f64,
}

impl ProbeConfig {
    pub fn new(task_attribute: impl Into<String>) -> ProbeConfig {
        ProbeConfig {
            task_attribute: task_attribute.into(),
            buckets: None,
            learning_rate: default_lr(),
            epochs: default_epochs(),
            seed: 0,
            l2_penalty: default_l2(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("probe learning_rate must be positive".into()));
        }
        if !(self.l2_penalty.is_finite() && self.l2_penalty >= 0.0) {
            return Err(Error::InvalidConfig("probe l2_penalty must be nonnegative".into()));
        }
        if let Some(b) = &self.buckets {
            if b.is_empty() || b.windows(2).any(|w| w[0] >= w[1]) || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "bucket boundaries must be finite and strictly increasing, got {b:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Binary,
    Multiclass,
}

/// Embeddings with aligned class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

fn bucket_label(boundaries: &[f64], v: f64) -> String {
    let i = boundaries.partition_point(|&b| b <= v);
    if i == 0 {
        format!("<{}", boundaries[0])
    } else if i == boundaries.len() {
        format!(">={}", boundaries[i - 1])
    } else {
        format!("[{},{})", boundaries[i - 1], boundaries[i])
    }
}

/// Runs the frozen embedder over every record and pulls the task labels.
pub fn extract_embeddings<E: Embed + ?Sized>(
    embedder: &E,
    dataset: &DataSet,
    attribute: &str,
    buckets: Option<&[f64]>,
) -> Result<ProbeData> {
    if embedder.input_dim() != dataset.ambient_dim() {
        return Err(Error::DimensionMismatch {
            context: "embedder input vs dataset features",
            expected: embedder.input_dim(),
            actual: dataset.ambient_dim(),
        });
    }
    let kind = dataset.attribute_kind(attribute)?;
    let labels = dataset
        .records()
        .iter()
        .map(|r| match (kind, &r.attributes[attribute], buckets) {
            (AttrKind::Categorical { .. }, AttrValue::Categorical(v), None) => Ok(v.clone()),
            (AttrKind::Numeric, AttrValue::Numeric(v), Some(b)) => Ok(bucket_label(b, *v)),
            (AttrKind::Numeric, _, None) => Err(Error::InvalidConfig(format!(
                "numeric attribute {attribute:?} needs bucket boundaries"
            ))),
            (AttrKind::Categorical { .. }, _, Some(_)) => Err(Error::InvalidConfig(format!(
                "buckets given for categorical attribute {attribute:?}"
            ))),
            _ => Err(Error::InvalidDataset(format!("attribute {attribute:?} has the wrong kind"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeData {
        embeddings: embed_all(embedder, dataset)?,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub task: String,
    pub classes: Vec<String>,
    /// classes x d.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// Input normalization fitted on the training embeddings: per-dimension
    /// centering and one shared scale, so that the probe is equivariant to
    /// rotations of the embedding space.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LinearProbe {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn task_kind(&self) -> TaskKind {
        if self.classes.len() == 2 {
            TaskKind::Binary
        } else {
            TaskKind::Multiclass
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "probe input",
                expected: self.dim(),
                actual: x.len(),
            });
        }
        let z: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(&z).map(|(a, c)| a * c).sum::<f64>() + b)
            .collect())
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn predict(&self, x: &[f64]) -> Result<&str> {
        let p = self.logits(x)?;
        let best = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
        Ok(&self.classes[best])
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().flatten().map(|w| w * w).sum::<f64>().sqrt()
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Gradient of the probe objective with respect to weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGrads {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Mean cross-entropy plus `l2 * ||W||^2`, and its exact gradient.
/// `targets` are class indices into `probe.classes`.
pub fn probe_objective(
    probe: &LinearProbe,
    embeddings: &[Vec<f64>],
    targets: &[usize],
    l2: f64,
) -> Result<(f64, ProbeGrads)> {
    let k = probe.classes.len();
    let d = probe.dim();
    let n = embeddings.len() as f64;
    let mut grads = ProbeGrads {
        weights: vec![vec![0.0; d]; k],
        bias: vec![0.0; k],
    };
    let mut loss = 0.0;
    for (x, &y) in embeddings.iter().zip(targets) {
        let logits = probe.logits(x)?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += log_sum - logits[y];
        let z: Vec<f64> = x
            .iter()
            .zip(&probe.mean)
            .zip(&probe.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        for (c, &logit) in logits.iter().enumerate() {
            let delta = (logit - log_sum).exp() - if c == y { 1.0 } else { 0.0 };
            grads.bias[c] += delta / n;
            grads.weights[c].iter_mut().zip(&z).for_each(|(g, zi)| *g += delta * zi / n);
        }
    }
    loss /= n;
    for (gw, w) in grads.weights.iter_mut().zip(&probe.weights) {
        for (g, wi) in gw.iter_mut().zip(w) {
            loss += l2 * wi * wi;
            *g += 2.0 * l2 * wi;
        }
    }
    Ok((loss, grads))
}

/// Trains a softmax probe by full-batch (proximal) gradient descent.
pub fn train_probe(embeddings: &[Vec<f64>], labels: &[String], config: &ProbeConfig) -> Result<LinearProbe> {
    config.validate()?;
    if embeddings.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "probe labels",
            expected: embeddings.len(),
            actual: labels.len(),
        });
    }
    let classes: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::SingleClass {
            positives: labels.len(),
            negatives: 0,
        }
        .context(format!("probe task {:?} needs at least two classes", config.task_attribute)));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::InvalidDataset("embeddings have differing lengths".into()));
    }
    let n = embeddings.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| embeddings.iter().map(|e| e[j]).sum::<f64>() / n).collect();
    let total_var = embeddings
        .iter()
        .flat_map(|e| e.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)))
        .sum::<f64>()
        / (n * d as f64);
    let shared = if total_var.sqrt() > 1e-12 { total_var.sqrt() } else { 1.0 };
    let scale = vec![shared; d];
    let targets: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("class list built from labels"))
        .collect();

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let init = 0.01 / (d as f64).sqrt();
    let mut probe = LinearProbe {
        task: config.task_attribute.clone(),
        weights: (0..classes.len())
            .map(|_| (0..d).map(|_| init * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect(),
        bias: vec![0.0; classes.len()],
        classes,
        mean,
        scale,
    };
    // Proximal step for the penalty: W <- (W - lr * grad_ce) / (1 + 2 lr l2),
    // stable for any penalty strength. Biases are not penalized.
    let shrink = 1.0 / (1.0 + 2.0 * config.learning_rate * config.l2_penalty);
    for epoch in 0..config.epochs {
        let (loss, g) = probe_objective(&probe, embeddings, &targets, 0.0)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("probe loss {loss} at epoch {}", epoch + 1)));
        }
        for (w, gw) in probe.weights.iter_mut().zip(&g.weights) {
            w.iter_mut()
                .zip(gw)
                .for_each(|(a, b)| *a = (*a - config.learning_rate * b) * shrink);
        }
        probe
            .bias
            .iter_mut()
            .zip(&g.bias)
            .for_each(|(a, b)| *a -= config.learning_rate * b);
    }
    Ok(probe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub accuracy: f64,
    pub majority_baseline: f64,
    pub per_class_auroc: BTreeMap<String, f64>,
    pub n: usize,
}

/// Frequency of the most common label.
pub fn majority_baseline(labels: &[String]) -> f64 {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    counts.values().copied().max().unwrap_or(0) as f64 / labels.len().max(1) as f64
}

/// Accuracy, one-vs-rest AUROC per class (classes absent or universal in
/// `labels` are skipped) and the majority-class baseline.
pub fn probe_metrics(probe: &LinearProbe, embeddings: &[Vec<f64>], labels: &[String]) -> Result<ProbeReport> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(Error::DimensionMismatch {
            context: "probe evaluation labels",
            expected: embeddings.len(),
            actual: labels.len(),
        });
    }
    let probs = embeddings
        .iter()
        .map(|e| probe.probabilities(e))
        .collect::<Result<Vec<_>>>()?;
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(p, l)| {
            let best = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
            probe.classes[best] == **l
        })
        .count();
    let mut per_class_auroc = BTreeMap::new();
    for (c, class) in probe.classes.iter().enumerate() {
        let scored: Vec<ScoredPair> = probs
            .iter()
            .zip(labels)
            .map(|(p, l)| ScoredPair {
                score: p[c],
                label: if l == class {
                    PairLabel::Same
                } else {
                    PairLabel::Different
                },
            })
            .collect();
        match eval::auroc_oriented(&scored, Orientation::HigherIsSame) {
            Ok(a) => {
                per_class_auroc.insert(class.clone(), a);
            }
            Err(Error::SingleClass { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(ProbeReport {
        task: probe.task.clone(),
        accuracy: correct as f64 / labels.len() as f64,
        majority_baseline: majority_baseline(labels),
        per_class_auroc,
        n: labels.len(),
    })
}

/// Embedder followed by a probe: outputs class logits.
pub struct ProbeEmbedder<'a, E: Embed + ?Sized> {
    pub encoder: &'a E,
    pub probe: &'a LinearProbe,
}

impl<E: Embed + ?Sized> Embed for ProbeEmbedder<'_, E> {
    fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.probe.classes.len()
    }

    fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.probe.logits(&self.encoder.embed(x)?)
    }
}

/// Trains a probe on `train` and reports on the held-out `test` records.
pub fn run_probe<E: Embed + ?Sized>(
    embedder: &E,
    train: &DataSet,
    test: &DataSet,
    config: &ProbeConfig,
) -> Result<(LinearProbe, ProbeReport)> {
    let buckets = config.buckets.as_deref();
    let tr = extract_embeddings(embedder, train, &config.task_attribute, buckets)?;
    let te = extract_embeddings(embedder, test, &config.task_attribute, buckets)?;
    let probe = train_probe(&tr.embeddings, &tr.labels, config)?;
    let report = probe_metrics(&probe, &te.embeddings, &te.labels)?;
    Ok((probe, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AttributeSchema, Record};
    use crate::encoder::{EncoderConfig, EncoderParams};

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn separable() -> (Vec<Vec<f64>>, Vec<String>) {
        let e = vec![
            vec![-2.0, 0.1],
            vec![-1.5, -0.3],
            vec![-1.0, 0.4],
            vec![1.0, 0.2],
            vec![1.7, -0.1],
            vec![2.2, 0.0],
        ];
        (e, labels(&["a", "a", "a", "b", "b", "b"]))
    }

    #[test]
    fn separable_classes_reach_full_accuracy() {
        let (e, l) = separable();
        let probe = train_probe(&e, &l, &ProbeConfig::new("t")).unwrap();
        let r = probe_metrics(&probe, &e, &l).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.majority_baseline, 0.5);
        assert_eq!(r.per_class_auroc["a"], 1.0);
        assert_eq!(r.per_class_auroc["b"], 1.0);
        assert_eq!(probe.task_kind(), TaskKind::Binary);
    }

    #[test]
    fn single_class_is_rejected() {
        let e = vec![vec![0.0], vec![1.0]];
        assert!(train_probe(&e, &labels(&["x", "x"]), &ProbeConfig::new("t")).is_err());
    }

    #[test]
    fn heavy_penalty_shrinks_weights_to_priors() {
        let (e, _) = separable();
        let l = labels(&["a", "a", "a", "a", "b", "b"]);
        let cfg = ProbeConfig {
            l2_penalty: 1e6,
            ..ProbeConfig::new("t")
        };
        let probe = train_probe(&e, &l, &cfg).unwrap();
        assert!(probe.weight_norm() < 1e-5, "{}", probe.weight_norm());
        for x in &e {
            let p = probe.probabilities(x).unwrap();
            assert!((p[0] - 4.0 / 6.0).abs() < 1e-3, "{p:?}");
        }
    }

    #[test]
    fn majority_probe_matches_baseline() {
        let l = labels(&["a", "a", "a", "b"]);
        let probe = LinearProbe {
            task: "t".into(),
            classes: labels(&["a", "b"]),
            weights: vec![vec![0.0], vec![0.0]],
            bias: vec![1.0, 0.0],
            mean: vec![0.0],
            scale: vec![1.0],
        };
        let e = vec![vec![0.3]; 4];
        let r = probe_metrics(&probe, &e, &l).unwrap();
        assert_eq!(r.accuracy, r.majority_baseline);
        assert_eq!(r.accuracy, 0.75);
    }

    #[test]
    fn buckets_label_numeric_values() {
        let b = [30.0, 60.0];
        assert_eq!(bucket_label(&b, 10.0), "<30");
        assert_eq!(bucket_label(&b, 30.0), "[30,60)");
        assert_eq!(bucket_label(&b, 75.5), ">=60");
        let bad = ProbeConfig {
            buckets: Some(vec![2.0, 1.0]),
            ..ProbeConfig::new("age")
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn extraction_is_frozen_and_ordered() {
        let mut schema = AttributeSchema::new();
        schema.insert(
            "g".into(),
            AttrKind::Categorical {
                values: labels(&["x", "y"]),
            },
        );
        let records: Vec<Record> = (0..6)
            .rev()
            .map(|i| Record {
                image_id: format!("r{i}"),
                patient_id: format!("p{}", i / 2),
                attributes: [("g".to_string(), AttrValue::Categorical(if i % 2 == 0 { "x" } else { "y" }.into()))].into(),
                features: vec![i as f64, 1.0, -(i as f64)],
            })
            .collect();
        let ds = DataSet::new(records, 3, schema).unwrap();
        let id = EncoderParams::identity(3);
        let data = extract_embeddings(&id, &ds, "g", None).unwrap();
        for (e, r) in data.embeddings.iter().zip(ds.records()) {
            assert_eq!(e, &r.features);
        }
        assert_eq!(data.labels[0], "y");

        let enc = EncoderParams::init(&EncoderConfig::new(3, vec![4], 2)).unwrap();
        let before = enc.digest();
        let _ = run_probe(&enc, &ds, &ds, &ProbeConfig::new("g")).unwrap();
        assert_eq!(enc.digest(), before);

        assert!(matches!(
            extract_embeddings(&id, &ds, "species", None),
            Err(Error::UnknownAttribute { .. })
        ));
        assert!(extract_embeddings(&EncoderParams::identity(2), &ds, "g", None).is_err());
    }
}
