//! Records, manifests, patient-disjoint splits and the synthetic identity
//! generator.
//!
//! A manifest is a CSV file with header
//! `image_id,patient_id,<attr1>,...,<attrK>,f0,...,f{m-1}` plus a sidecar JSON
//! schema (`data.csv` -> `data.schema.json`) declaring attribute kinds and the
//! ambient dimension.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

/// Value of one attribute on one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Numeric(f64),
    Categorical(String),
}

impl AttrValue {
    pub fn as_categorical(&self) -> Option<&str> {
        match self {
            AttrValue::Categorical(s) => Some(s),
            AttrValue::Numeric(_) => None,
        }
    }

    pub fn as_numeric(&self) -> Option<f64> {
        match self {
            AttrValue::Numeric(v) => Some(*v),
            AttrValue::Categorical(_) => None,
        }
    }

    fn render(&self) -> String {
        match self {
            AttrValue::Numeric(v) => format!("{v}"),
            AttrValue::Categorical(s) => s.clone(),
        }
    }
}

/// Declared kind of an attribute column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttrKind {
    Categorical { values: Vec<String> },
    Numeric,
}

pub type AttributeSchema = BTreeMap<String, AttrKind>;

/// One visit: an image of a patient reduced to a feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub image_id: String,
    pub patient_id: String,
    pub attributes: BTreeMap<String, AttrValue>,
    pub features: Vec<f64>,
}

/// Validated, immutable collection of records sharing one ambient dimension
/// and attribute schema.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    records: Vec<Record>,
    ambient_dim: usize,
    schema: AttributeSchema,
}

#[derive(Debug, Serialize, Deserialize)]
struct SchemaFile {
    attributes: AttributeSchema,
    ambient_dim: usize,
}

impl DataSet {
    pub fn new(records: Vec<Record>, ambient_dim: usize, schema: AttributeSchema) -> Result<Self> {
        if ambient_dim == 0 {
            return Err(Error::InvalidDataset("ambient_dim must be positive".into()));
        }
        for (name, kind) in &schema {
            if is_feature_column(name) || name == "image_id" || name == "patient_id" {
                return Err(Error::InvalidDataset(format!(
                    "attribute name {name:?} collides with a reserved column"
                )));
            }
            if let AttrKind::Categorical { values } = kind {
                if values.is_empty() {
                    return Err(Error::InvalidDataset(format!(
                        "categorical attribute {name:?} declares no values"
                    )));
                }
            }
        }
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.patient_id.is_empty() {
                return Err(Error::InvalidDataset(format!("record {i} has an empty patient_id")));
            }
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::DuplicateImageId(r.image_id.clone()));
            }
            if r.features.len() != ambient_dim {
                return Err(Error::DimensionMismatch {
                    context: "record features",
                    expected: ambient_dim,
                    actual: r.features.len(),
                });
            }
            if let Some(bad) = r.features.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("feature {bad} in record {:?}", r.image_id)));
            }
            check_attributes(r, &schema)?;
        }
        Ok(DataSet {
            records,
            ambient_dim,
            schema,
        })
    }

    pub fn empty(ambient_dim: usize, schema: AttributeSchema) -> Result<Self> {
        Self::new(Vec::new(), ambient_dim, schema)
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn record(&self, index: usize) -> Result<&Record> {
        self.records.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.records.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn patient_ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.patient_id.as_str()).collect()
    }

    pub fn attribute_names(&self) -> Vec<String> {
        self.schema.keys().cloned().collect()
    }

    /// Returns the declared kind of `name`, or an error listing the known
    /// attributes.
    pub fn attribute_kind(&self, name: &str) -> Result<&AttrKind> {
        self.schema.get(name).ok_or_else(|| Error::UnknownAttribute {
            name: name.to_string(),
            available: self.attribute_names(),
        })
    }

    /// New dataset holding the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<DataSet> {
        let records = indices
            .iter()
            .map(|&i| self.record(i).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(DataSet {
            records,
            ambient_dim: self.ambient_dim,
            schema: self.schema.clone(),
        })
    }

    pub fn num_patients(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.patient_id.as_str())
            .collect::<HashSet<_>>()
            .len()
    }

    /// True when at least one patient has two or more records.
    pub fn has_positive_pair(&self) -> bool {
        group_by_patient(self).values().any(|g| g.len() >= 2)
    }
}

fn check_attributes(r: &Record, schema: &AttributeSchema) -> Result<()> {
    if r.attributes.len() != schema.len() {
        return Err(Error::InvalidDataset(format!(
            "record {:?} has {} attributes, schema declares {}",
            r.image_id,
            r.attributes.len(),
            schema.len()
        )));
    }
    for (name, kind) in schema {
        let value = r.attributes.get(name).ok_or_else(|| {
            Error::InvalidDataset(format!("record {:?} lacks attribute {name:?}", r.image_id))
        })?;
        match (kind, value) {
            (AttrKind::Categorical { values }, AttrValue::Categorical(v)) => {
                if !values.contains(v) {
                    return Err(Error::InvalidDataset(format!(
                        "record {:?}: value {v:?} not declared for attribute {name:?}",
                        r.image_id
                    )));
                }
            }
            (AttrKind::Numeric, AttrValue::Numeric(v)) => {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "attribute {name:?} of record {:?}",
                        r.image_id
                    )));
                }
            }
            _ => {
                return Err(Error::InvalidDataset(format!(
                    "record {:?}: attribute {name:?} has the wrong kind",
                    r.image_id
                )))
            }
        }
    }
    Ok(())
}

fn is_feature_column(name: &str) -> bool {
    name.len() > 1 && name.starts_with('f') && name[1..].bytes().all(|b| b.is_ascii_digit())
}

/// Sidecar schema path for a manifest: `dir/data.csv` -> `dir/data.schema.json`.
pub fn schema_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("schema.json")
}

/// Loads a CSV manifest. The sidecar schema is used when present; otherwise
/// attribute kinds are inferred (numeric when every value parses as a finite
/// number, categorical with sorted distinct values otherwise).
pub fn load_manifest(path: &Path) -> Result<DataSet> {
    let sidecar = schema_path_for(path);
    let declared = if sidecar.exists() {
        let bytes = fsutil::read(&sidecar)?;
        Some(serde_json::from_slice::<SchemaFile>(&bytes).map_err(|e| {
            Error::MalformedManifest {
                path: sidecar.clone(),
                message: e.to_string(),
            }
        })?)
    } else {
        None
    };

    let malformed = |message: String| Error::MalformedManifest {
        path: path.to_path_buf(),
        message,
    };

    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| malformed(e.to_string()))?
        .clone();
    if header.len() < 2 || &header[0] != "image_id" || &header[1] != "patient_id" {
        return Err(malformed("header must start with image_id,patient_id".into()));
    }
    let mut attr_cols: Vec<(usize, String)> = Vec::new();
    let mut feat_cols: Vec<usize> = Vec::new();
    for (col, name) in header.iter().enumerate().skip(2) {
        if is_feature_column(name) {
            let expected = format!("f{}", feat_cols.len());
            if name != expected {
                return Err(malformed(format!("feature column {name:?} out of order, expected {expected:?}")));
            }
            feat_cols.push(col);
        } else {
            attr_cols.push((col, name.to_string()));
        }
    }
    let ambient_dim = feat_cols.len();
    if ambient_dim == 0 {
        return Err(malformed("header declares no feature columns".into()));
    }
    if let Some(decl) = &declared {
        if decl.ambient_dim != ambient_dim {
            return Err(malformed(format!(
                "header declares {ambient_dim} feature columns, schema declares ambient_dim {}",
                decl.ambient_dim
            )));
        }
        let header_attrs: BTreeSet<&str> = attr_cols.iter().map(|(_, n)| n.as_str()).collect();
        let schema_attrs: BTreeSet<&str> = decl.attributes.keys().map(String::as_str).collect();
        if header_attrs != schema_attrs {
            return Err(malformed(format!(
                "attribute columns {header_attrs:?} disagree with schema {schema_attrs:?}"
            )));
        }
    }

    // Raw rows first; attribute values are typed once the schema is known.
    let mut raw_rows: Vec<(usize, u64, csv::StringRecord)> = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| malformed(format!("row {row_no}: {e}")))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != header.len() {
            let found_features = row.len().saturating_sub(2 + attr_cols.len());
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                row: row_no,
                line,
                message: format!(
                    "expected {} fields ({ambient_dim} features), found {} ({found_features} features)",
                    header.len(),
                    row.len()
                ),
            });
        }
        raw_rows.push((row_no, line, row));
    }

    let schema = match declared {
        Some(decl) => decl.attributes,
        None => infer_schema(&attr_cols, &raw_rows),
    };

    let mut records = Vec::with_capacity(raw_rows.len());
    for (row_no, line, row) in &raw_rows {
        let bad_row = |message: String| Error::MalformedRow {
            path: path.to_path_buf(),
            row: *row_no,
            line: *line,
            message,
        };
        let mut features = Vec::with_capacity(ambient_dim);
        for &col in &feat_cols {
            let v: f64 = row[col]
                .trim()
                .parse()
                .map_err(|_| bad_row(format!("feature {:?} is not a number", &row[col])))?;
            if !v.is_finite() {
                return Err(bad_row(format!("feature {:?} is not finite", &row[col])));
            }
            features.push(v);
        }
        let mut attributes = BTreeMap::new();
        for (col, name) in &attr_cols {
            let text = &row[*col];
            let value = match &schema[name] {
                AttrKind::Numeric => AttrValue::Numeric(
                    text.trim()
                        .parse()
                        .map_err(|_| bad_row(format!("attribute {name:?} value {text:?} is not a number")))?,
                ),
                AttrKind::Categorical { .. } => AttrValue::Categorical(text.to_string()),
            };
            attributes.insert(name.clone(), value);
        }
        records.push(Record {
            image_id: row[0].to_string(),
            patient_id: row[1].to_string(),
            attributes,
            features,
        });
    }
    DataSet::new(records, ambient_dim, schema).map_err(|e| e.context(format!("loading {}", path.display())))
}

fn infer_schema(attr_cols: &[(usize, String)], rows: &[(usize, u64, csv::StringRecord)]) -> AttributeSchema {
    attr_cols
        .iter()
        .map(|(col, name)| {
            let numeric = !rows.is_empty()
                && rows
                    .iter()
                    .all(|(_, _, r)| r[*col].trim().parse::<f64>().map(f64::is_finite).unwrap_or(false));
            let kind = if numeric {
                AttrKind::Numeric
            } else {
                let values: BTreeSet<String> = rows.iter().map(|(_, _, r)| r[*col].to_string()).collect();
                AttrKind::Categorical {
                    values: values.into_iter().collect(),
                }
            };
            (name.clone(), kind)
        })
        .collect()
}

/// Serializes a dataset to CSV text (shortest round-trip float formatting).
pub fn manifest_bytes(dataset: &DataSet) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = vec!["image_id".into(), "patient_id".into()];
    header.extend(dataset.schema.keys().cloned());
    header.extend((0..dataset.ambient_dim).map(|i| format!("f{i}")));
    let csv_err = |e: csv::Error| Error::InvalidDataset(format!("csv encoding failed: {e}"));
    writer.write_record(&header).map_err(csv_err)?;
    for r in &dataset.records {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        row.push(r.image_id.clone());
        row.push(r.patient_id.clone());
        row.extend(dataset.schema.keys().map(|k| r.attributes[k].render()));
        row.extend(r.features.iter().map(|v| format!("{v}")));
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer
        .into_inner()
        .map_err(|e| Error::InvalidDataset(format!("csv encoding failed: {e}")))
}

pub fn schema_bytes(dataset: &DataSet) -> Result<Vec<u8>> {
    let file = SchemaFile {
        attributes: dataset.schema.clone(),
        ambient_dim: dataset.ambient_dim,
    };
    let mut bytes = serde_json::to_vec_pretty(&file)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes the manifest and its sidecar schema atomically.
pub fn save_manifest(dataset: &DataSet, path: &Path) -> Result<()> {
    fsutil::write_atomic(&schema_path_for(path), &schema_bytes(dataset)?)?;
    fsutil::write_atomic(path, &manifest_bytes(dataset)?)
}

/// Record indices per patient, in record order.
pub fn group_by_patient(dataset: &DataSet) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in dataset.records.iter().enumerate() {
        groups.entry(r.patient_id.clone()).or_default().push(i);
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.validation, self.test];
        if f.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidConfig(format!("split fractions must be positive, got {f:?}")));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("split fractions must sum to 1, got {f:?}")));
        }
        Ok(())
    }
}

/// Patient counts per split by largest remainder on `fraction * n`.
fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| f * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Splits into (train, validation, test) with whole patients per split.
///
/// Sorted patient ids are shuffled under `spec.seed` and sliced contiguously,
/// so the assignment depends only on the patient id set and the seed.
pub fn split_by_patient(dataset: &DataSet, spec: &SplitSpec) -> Result<(DataSet, DataSet, DataSet)> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidDataset("cannot split an empty dataset".into()));
    }
    let groups = group_by_patient(dataset);
    let mut patients: Vec<&String> = groups.keys().collect();
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    patients.shuffle(&mut rng);

    let counts = apportion(patients.len(), [spec.train, spec.validation, spec.test]);
    for (count, name) in counts.iter().zip(["train", "validation", "test"]) {
        if *count == 0 {
            return Err(Error::EmptySplit {
                split: name,
                patients: patients.len(),
            });
        }
    }
    let mut assignment: BTreeMap<&str, usize> = BTreeMap::new();
    let mut start = 0;
    for (k, count) in counts.iter().enumerate() {
        for p in &patients[start..start + count] {
            assignment.insert(p.as_str(), k);
        }
        start += count;
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (i, r) in dataset.records.iter().enumerate() {
        parts[assignment[r.patient_id.as_str()]].push(i);
    }
    Ok((
        dataset.subset(&parts[0])?,
        dataset.subset(&parts[1])?,
        dataset.subset(&parts[2])?,
    ))
}

/// Visits per identity: a fixed count or an inclusive `[min, max]` range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VisitCount {
    Fixed(usize),
    Range(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAttribute {
    pub name: String,
    #[serde(flatten)]
    pub kind: AttrKind,
    pub signal_strength: f64,
}

/// Distribution shift applied to every record of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodShift {
    /// Length of a fixed offset added to every feature vector.
    pub offset_scale: f64,
    /// Multiplier on the visit noise standard deviation.
    pub noise_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_identities: usize,
    pub visits_per_identity: VisitCount,
    pub latent_dim: usize,
    pub ambient_dim: usize,
    pub visit_noise_sigma: f64,
    #[serde(default)]
    pub attributes: Vec<SyntheticAttribute>,
    #[serde(default)]
    pub projection_seed: u64,
    #[serde(default)]
    pub sample_seed: u64,
    #[serde(default)]
    pub ood_shift: Option<OodShift>,
}

const OOD_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_identities == 0 {
            return bad("num_identities must be positive".into());
        }
        match self.visits_per_identity {
            VisitCount::Fixed(0) => return bad("visits_per_identity must be positive".into()),
            VisitCount::Range(lo, hi) if lo == 0 || lo > hi => {
                return bad(format!("visits_per_identity range [{lo}, {hi}] is invalid"))
            }
            _ => {}
        }
        if self.latent_dim == 0 || self.ambient_dim < self.latent_dim {
            return bad(format!(
                "need 0 < latent_dim <= ambient_dim, got latent {} ambient {}",
                self.latent_dim, self.ambient_dim
            ));
        }
        if !(self.visit_noise_sigma.is_finite() && self.visit_noise_sigma >= 0.0) {
            return bad("visit_noise_sigma must be finite and nonnegative".into());
        }
        let mut names = HashSet::new();
        for a in &self.attributes {
            if !names.insert(a.name.as_str()) {
                return bad(format!("attribute {:?} declared twice", a.name));
            }
            if !(a.signal_strength.is_finite() && a.signal_strength >= 0.0) {
                return bad(format!("attribute {:?} signal_strength must be nonnegative", a.name));
            }
            if let AttrKind::Categorical { values } = &a.kind {
                if values.is_empty() {
                    return bad(format!("attribute {:?} declares no values", a.name));
                }
            }
        }
        if let Some(s) = &self.ood_shift {
            if !(s.offset_scale.is_finite() && s.noise_multiplier.is_finite() && s.noise_multiplier >= 0.0) {
                return bad("ood_shift needs finite offset_scale and nonnegative noise_multiplier".into());
            }
        }
        Ok(())
    }

    /// Unshifted configuration with `ood_shift` removed.
    pub fn in_distribution(&self) -> SyntheticConfig {
        SyntheticConfig {
            ood_shift: None,
            ..self.clone()
        }
    }

    /// Shifted companion configuration: same projection and attribute
    /// directions, fresh identities (derived sample seed). `None` when no
    /// shift is configured.
    pub fn out_of_distribution(&self) -> Option<SyntheticConfig> {
        self.ood_shift.map(|_| SyntheticConfig {
            sample_seed: self.sample_seed ^ OOD_SEED_SALT,
            ..self.clone()
        })
    }
}

fn normal_vec(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit vector orthogonal to `basis` (if the space allows), then appended to it.
fn fresh_direction(rng: &mut ChaCha20Rng, dim: usize, basis: &mut Vec<Vec<f64>>) -> Vec<f64> {
    let raw = normal_vec(rng, dim);
    let mut v = raw.clone();
    for b in basis.iter() {
        let c = dot(&v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
    }
    let norm = dot(&v, &v).sqrt();
    let raw_norm = dot(&raw, &raw).sqrt();
    if basis.len() < dim && norm > 1e-8 * raw_norm {
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v.clone());
        v
    } else {
        raw.into_iter().map(|x| x / raw_norm).collect()
    }
}

/// Fixed structure shared by every dataset drawn with one projection seed.
struct Geometry {
    /// ambient x latent, entries N(0, 1/latent).
    projection: Vec<Vec<f64>>,
    /// Per attribute: one unit direction per categorical value, or a single
    /// direction for numeric attributes.
    attribute_dirs: Vec<Vec<Vec<f64>>>,
    ood_dir: Vec<f64>,
}

impl Geometry {
    fn new(config: &SyntheticConfig) -> Geometry {
        let (m, k) = (config.ambient_dim, config.latent_dim);
        let mut rng = ChaCha20Rng::seed_from_u64(config.projection_seed);
        let scale = 1.0 / (k as f64).sqrt();
        let projection: Vec<Vec<f64>> = (0..m)
            .map(|_| normal_vec(&mut rng, k).into_iter().map(|v| v * scale).collect())
            .collect();

        // Orthonormal basis of the identity subspace; attribute directions are
        // drawn orthogonal to it so identity and attribute signal stay separable.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for j in 0..k {
            let mut col: Vec<f64> = projection.iter().map(|row| row[j]).collect();
            for b in &basis {
                let c = dot(&col, b);
                col.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
            let n = dot(&col, &col).sqrt();
            if n > 1e-10 {
                col.iter_mut().for_each(|x| *x /= n);
                basis.push(col);
            }
        }
        let attribute_dirs = config
            .attributes
            .iter()
            .map(|a| {
                let count = match &a.kind {
                    AttrKind::Categorical { values } => values.len(),
                    AttrKind::Numeric => 1,
                };
                (0..count).map(|_| fresh_direction(&mut rng, m, &mut basis)).collect()
            })
            .collect();
        let raw = normal_vec(&mut rng, m);
        let n = dot(&raw, &raw).sqrt();
        let ood_dir = raw.into_iter().map(|x| x / n).collect();
        Geometry {
            projection,
            attribute_dirs,
            ood_dir,
        }
    }
}

/// Draws a synthetic identity dataset.
///
/// Identity `i` gets a latent `z_i ~ N(0, I)`; each visit is
/// `P z_i + attribute terms + eps` with `eps ~ N(0, sigma^2 I)`. Categorical
/// values are balanced round-robin over a seeded permutation of identities and
/// contribute `signal_strength * direction(value)`; numeric attributes draw a
/// per-identity standard normal value scaled onto one direction.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<DataSet> {
    config.validate()?;
    let geometry = Geometry::new(config);
    let mut rng = ChaCha20Rng::seed_from_u64(config.sample_seed);
    let n = config.num_identities;
    let m = config.ambient_dim;

    let assignments: Vec<Option<Vec<usize>>> = config
        .attributes
        .iter()
        .map(|a| match &a.kind {
            AttrKind::Categorical { values } => {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                Some(perm.into_iter().map(|slot| slot % values.len()).collect())
            }
            AttrKind::Numeric => None,
        })
        .collect();

    let (prefix, offset, sigma) = match &config.ood_shift {
        Some(s) => ("ood-", s.offset_scale, config.visit_noise_sigma * s.noise_multiplier),
        None => ("", 0.0, config.visit_noise_sigma),
    };

    let mut records = Vec::new();
    for i in 0..n {
        let visits = match config.visits_per_identity {
            VisitCount::Fixed(v) => v,
            VisitCount::Range(lo, hi) => rng.random_range(lo..=hi),
        };
        let z = normal_vec(&mut rng, config.latent_dim);
        let mut center: Vec<f64> = geometry.projection.iter().map(|row| dot(row, &z)).collect();
        if offset != 0.0 {
            center.iter_mut().zip(&geometry.ood_dir).for_each(|(c, d)| *c += offset * d);
        }
        let mut attributes = BTreeMap::new();
        for (j, spec) in config.attributes.iter().enumerate() {
            let (value, dir, weight) = match &spec.kind {
                AttrKind::Categorical { values } => {
                    let v = assignments[j].as_ref().expect("categorical assignment")[i];
                    (
                        AttrValue::Categorical(values[v].clone()),
                        &geometry.attribute_dirs[j][v],
                        spec.signal_strength,
                    )
                }
                AttrKind::Numeric => {
                    let v: f64 = rng.sample(StandardNormal);
                    (AttrValue::Numeric(v), &geometry.attribute_dirs[j][0], spec.signal_strength * v)
                }
            };
            if weight != 0.0 {
                center.iter_mut().zip(dir).for_each(|(c, d)| *c += weight * d);
            }
            attributes.insert(spec.name.clone(), value);
        }
        for _ in 0..visits {
            let features: Vec<f64> = if sigma > 0.0 {
                center
                    .iter()
                    .map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            } else {
                center.clone()
            };
            records.push(Record {
                image_id: format!("{prefix}img{:06}", records.len()),
                patient_id: format!("{prefix}p{i:05}"),
                attributes: attributes.clone(),
                features,
            });
        }
    }
    let schema = config
        .attributes
        .iter()
        .map(|a| (a.name.clone(), a.kind.clone()))
        .collect();
    DataSet::new(records, m, schema)
}
