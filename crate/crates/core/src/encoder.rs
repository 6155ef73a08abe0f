//! The embedding network: a ReLU multilayer perceptron over feature vectors
//! with optional L2 normalization of its output, explicit backpropagation and
//! a binary checkpoint format.
//!
//! Checkpoint layout: the 8 magic bytes `REIDENC1`, a little-endian `u64`
//! header length, the JSON header (config, layer shapes, byte offsets), then
//! little-endian `f64` blocks in layer order, weights (row-major) before
//! biases.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"REIDENC1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "EncoderConfig::default_output_dim")]
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub normalize_output: bool,
    #[serde(default)]
    pub init_seed: u64,
}

impl EncoderConfig {
    pub const DEFAULT_OUTPUT_DIM: usize = 32;

    fn default_output_dim() -> usize {
        Self::DEFAULT_OUTPUT_DIM
    }

    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Relu,
            normalize_output: true,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "encoder dimensions must be positive: input {}, hidden {:?}, output {}",
                self.input_dim, self.hidden_dims, self.output_dim
            )));
        }
        Ok(())
    }

    /// (fan_in, fan_out) of every affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// One affine layer, `y = W x + b` with `W` stored row-major (fan_out x fan_in).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Layer {
        Layer {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.fan_in)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.fan_in + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    layers: Vec<Layer>,
}

/// Gradients with the same shapes as [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub layers: Vec<Layer>,
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> EncoderGrads {
        EncoderGrads {
            layers: params.layers.iter().map(|l| Layer::zeros(l.fan_in, l.fan_out)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= factor);
            l.bias.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Flattened view in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers(layers: &[Layer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
        .collect()
}

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Vec<f64>,
    /// Pre-activation output of each layer.
    pre_activations: Vec<Vec<f64>>,
    /// Input fed to each layer (the input itself, then ReLU outputs).
    layer_inputs: Vec<Vec<f64>>,
    /// Output norm before normalization, when normalization is on.
    output_norm: Option<f64>,
    embedding: Vec<f64>,
}

impl ForwardTrace {
    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    /// Output before normalization (equals the embedding when normalization is off).
    pub fn raw_output(&self) -> &[f64] {
        self.pre_activations.last().expect("at least one layer")
    }
}

/// Anything that maps a feature vector to an embedding.
pub trait Embed: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn embed(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// The identity map: scores raw features directly.
#[derive(Debug, Clone, Copy)]
pub struct RawFeatures {
    pub dim: usize,
}

impl Embed for RawFeatures {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "raw features",
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(x.to_vec())
    }
}

impl EncoderParams {
    /// He-initialized weights (`N(0, 2 / fan_in)`), zero biases.
    pub fn init(config: &EncoderConfig) -> Result<EncoderParams> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.init_seed);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let std = (2.0 / fan_in as f64).sqrt();
                let weights = (0..fan_in * fan_out)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Layer {
                    fan_in,
                    fan_out,
                    weights,
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(EncoderParams {
            config: config.clone(),
            layers,
        })
    }

    /// Builds params from explicit layers, checking they chain per `config`.
    pub fn from_layers(config: EncoderConfig, layers: Vec<Layer>) -> Result<EncoderParams> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::CheckpointShape(format!(
                "config implies {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (k, ((fan_in, fan_out), l)) in shapes.iter().zip(&layers).enumerate() {
            if l.fan_in != *fan_in
                || l.fan_out != *fan_out
                || l.weights.len() != fan_in * fan_out
                || l.bias.len() != *fan_out
            {
                return Err(Error::CheckpointShape(format!(
                    "layer {k}: expected {fan_out}x{fan_in}, got {}x{} ({} weights, {} biases)",
                    l.fan_out,
                    l.fan_in,
                    l.weights.len(),
                    l.bias.len()
                )));
            }
        }
        Ok(EncoderParams { config, layers })
    }

    /// Zero hidden layers, identity weights, no normalization: `forward(x) == x`.
    pub fn identity(dim: usize) -> EncoderParams {
        let mut layer = Layer::zeros(dim, dim);
        for i in 0..dim {
            layer.weights[i * dim + i] = 1.0;
        }
        EncoderParams {
            config: EncoderConfig {
                normalize_output: false,
                ..EncoderConfig::new(dim, vec![], dim)
            },
            layers: vec![layer],
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters flattened in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    /// `theta <- theta - lr * grads`.
    pub fn apply_update(&mut self, grads: &EncoderGrads, lr: f64) {
        for (p, g) in self.layers.iter_mut().zip(&grads.layers) {
            p.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= lr * d);
            p.bias.iter_mut().zip(&g.bias).for_each(|(b, d)| *b -= lr * d);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
        if x.len() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                context: "encoder input",
                expected: self.config.input_dim,
                actual: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&current);
            layer_inputs.push(std::mem::take(&mut current));
            current = if k < last {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pre_activations.push(z);
        }
        let mut output_norm = None;
        if self.config.normalize_output {
            let norm = current.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm);
            }
            current.iter_mut().for_each(|v| *v /= norm);
            output_norm = Some(norm);
        }
        let trace = ForwardTrace {
            input: x.to_vec(),
            pre_activations,
            layer_inputs,
            output_norm,
            embedding: current.clone(),
        };
        Ok((current, trace))
    }

    /// Reverse-mode gradients of `embedding . grad_embedding` with respect
    /// to every parameter and the input.
    pub fn backward(&self, trace: &ForwardTrace, grad_embedding: &[f64]) -> Result<(EncoderGrads, Vec<f64>)> {
        let d = self.config.output_dim;
        if grad_embedding.len() != d {
            return Err(Error::DimensionMismatch {
                context: "embedding gradient",
                expected: d,
                actual: grad_embedding.len(),
            });
        }
        if trace.pre_activations.len() != self.layers.len()
            || trace.input.len() != self.config.input_dim
            || trace.embedding.len() != d
            || trace.output_norm.is_some() != self.config.normalize_output
            || trace
                .pre_activations
                .iter()
                .zip(&self.layers)
                .any(|(z, l)| z.len() != l.fan_out)
        {
            return Err(Error::CheckpointShape("forward trace does not match these parameters".into()));
        }

        // Through the normalization: (I - y y^T) g / ||v||.
        let mut upstream: Vec<f64> = match trace.output_norm {
            Some(norm) => {
                let y = &trace.embedding;
                let proj: f64 = y.iter().zip(grad_embedding).map(|(a, b)| a * b).sum();
                grad_embedding
                    .iter()
                    .zip(y)
                    .map(|(g, yi)| (g - yi * proj) / norm)
                    .collect()
            }
            None => grad_embedding.to_vec(),
        };

        let mut grads = EncoderGrads::zeros_like(self);
        let last = self.layers.len() - 1;
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            if k < last {
                for (g, z) in upstream.iter_mut().zip(&trace.pre_activations[k]) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let input = &trace.layer_inputs[k];
            let gl = &mut grads.layers[k];
            for (r, g) in upstream.iter().enumerate() {
                gl.bias[r] = *g;
                if *g != 0.0 {
                    let row = &mut gl.weights[r * layer.fan_in..(r + 1) * layer.fan_in];
                    row.iter_mut().zip(input).for_each(|(w, x)| *w = g * x);
                }
            }
            let mut down = vec![0.0; layer.fan_in];
            for (r, g) in upstream.iter().enumerate() {
                if *g != 0.0 {
                    let row = &layer.weights[r * layer.fan_in..(r + 1) * layer.fan_in];
                    down.iter_mut().zip(row).for_each(|(dv, w)| *dv += g * w);
                }
            }
            upstream = down;
        }
        Ok((grads, upstream))
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0usize;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let weights_offset = offset;
                offset += 8 * l.weights.len();
                let bias_offset = offset;
                offset += 8 * l.bias.len();
                LayerHeader {
                    fan_in: l.fan_in,
                    fan_out: l.fan_out,
                    weights_offset,
                    bias_offset,
                }
            })
            .collect();
        let header = CheckpointHeader {
            version: 1,
            config: self.config.clone(),
            layers,
            data_bytes: offset,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<EncoderParams> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointVersion("missing REIDENC1 magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::CheckpointShape("header length exceeds file size".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| Error::CheckpointVersion(format!("unreadable header: {e}")))?;
        if header.version != 1 {
            return Err(Error::CheckpointVersion(format!("unsupported version {}", header.version)));
        }
        let data = &bytes[data_start..];
        if data.len() != header.data_bytes {
            return Err(Error::CheckpointShape(format!(
                "header declares {} data bytes, file holds {}",
                header.data_bytes,
                data.len()
            )));
        }
        let shapes = header.config.layer_shapes();
        if shapes.len() != header.layers.len() {
            return Err(Error::CheckpointShape(format!(
                "config implies {} layers, header lists {}",
                shapes.len(),
                header.layers.len()
            )));
        }
        let read_block = |offset: usize, count: usize| -> Result<Vec<f64>> {
            let end = offset
                .checked_add(count * 8)
                .filter(|&e| e <= data.len())
                .ok_or_else(|| Error::CheckpointShape("parameter block out of bounds".into()))?;
            Ok(data[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mut layers = Vec::with_capacity(shapes.len());
        for (k, (lh, (fan_in, fan_out))) in header.layers.iter().zip(shapes).enumerate() {
            if lh.fan_in != fan_in || lh.fan_out != fan_out {
                return Err(Error::CheckpointShape(format!(
                    "layer {k} is {}x{} but config implies {fan_out}x{fan_in}",
                    lh.fan_out, lh.fan_in
                )));
            }
            layers.push(Layer {
                fan_in,
                fan_out,
                weights: read_block(lh.weights_offset, fan_in * fan_out)?,
                bias: read_block(lh.bias_offset, fan_out)?,
            });
        }
        EncoderParams::from_layers(header.config, layers)
    }

    /// SHA-256 of the checkpoint encoding; equal digests mean bit-equal params.
    pub fn digest(&self) -> [u8; 32] {
        let bytes = self.to_checkpoint_bytes().expect("header serializes");
        Sha256::digest(&bytes).into()
    }
}

impl Embed for EncoderParams {
    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(y, _)| y)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerHeader {
    fan_in: usize,
    fan_out: usize,
    weights_offset: usize,
    bias_offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: EncoderConfig,
    layers: Vec<LayerHeader>,
    data_bytes: usize,
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &params.to_checkpoint_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    EncoderParams::from_checkpoint_bytes(&fsutil::read(path)?)
        .map_err(|e| e.context(format!("loading checkpoint {}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn single_layer_shapes_and_zero_bias() {
        let cfg = EncoderConfig {
            init_seed: 3,
            ..EncoderConfig::new(4, vec![], 4)
        };
        let p = EncoderParams::init(&cfg).unwrap();
        assert_eq!(p.layers().len(), 1);
        assert_eq!(p.layers()[0].weights.len(), 16);
        assert_eq!(p.layers()[0].bias, vec![0.0; 4]);
        assert_eq!(p, EncoderParams::init(&cfg).unwrap());
        let other = EncoderParams::init(&EncoderConfig { init_seed: 4, ..cfg }).unwrap();
        assert_ne!(p, other);
    }

    #[test]
    fn he_init_scale() {
        let p = EncoderParams::init(&EncoderConfig::new(256, vec![], 256)).unwrap();
        let w = &p.layers()[0].weights;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let target = (2.0f64 / 256.0).sqrt();
        assert!((var.sqrt() - target).abs() < 0.1 * target, "std {}", var.sqrt());
    }

    #[test]
    fn identity_forward() {
        let p = EncoderParams::identity(3);
        let x = [1.5, -2.0, 0.25];
        assert_eq!(p.forward(&x).unwrap().0, x.to_vec());
    }

    #[test]
    fn normalization_arithmetic() {
        let mut layer = Layer::zeros(2, 2);
        layer.weights = vec![1.0, 0.0, 0.0, 1.0];
        let p = EncoderParams::from_layers(EncoderConfig::new(2, vec![], 2), vec![layer]).unwrap();
        let (y, trace) = p.forward(&[3.0, 4.0]).unwrap();
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15);
        assert_eq!(trace.raw_output(), &[3.0, 4.0]);
        assert!(matches!(p.forward(&[0.0, 0.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn dimension_mismatch() {
        let p = EncoderParams::identity(3);
        assert!(matches!(p.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
        let (_, t) = p.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(p.backward(&t, &[1.0]).is_err());
        let other = EncoderParams::init(&EncoderConfig::new(3, vec![5], 3)).unwrap();
        assert!(other.backward(&t, &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = EncoderParams::init(&EncoderConfig::new(5, vec![7, 6], 4)).unwrap();
        let (_, t) = p.forward(&random_input(1, 5)).unwrap();
        let (g, gx) = p.backward(&t, &[0.0; 4]).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
        assert!(gx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_linear_layer_gradient_is_outer_product() {
        let cfg = EncoderConfig {
            normalize_output: false,
            ..EncoderConfig::new(3, vec![], 2)
        };
        let p = EncoderParams::init(&cfg).unwrap();
        let x = [0.5, -1.0, 2.0];
        let g = [3.0, -0.5];
        let (_, t) = p.forward(&x).unwrap();
        let (grads, gx) = p.backward(&t, &g).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(grads.layers[0].weights[r * 3 + c], g[r] * x[c]);
            }
            assert_eq!(grads.layers[0].bias[r], g[r]);
        }
        for c in 0..3 {
            let expect = g[0] * p.layers()[0].weight(0, c) + g[1] * p.layers()[0].weight(1, c);
            assert!((gx[c] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        // Hidden unit pre-activation exactly 0: no gradient passes through it.
        let hidden = Layer {
            fan_in: 1,
            fan_out: 1,
            weights: vec![1.0],
            bias: vec![0.0],
        };
        let out = Layer {
            fan_in: 1,
            fan_out: 1,
            weights: vec![2.0],
            bias: vec![1.0],
        };
        let cfg = EncoderConfig {
            normalize_output: false,
            ..EncoderConfig::new(1, vec![1], 1)
        };
        let p = EncoderParams::from_layers(cfg, vec![hidden, out]).unwrap();
        let (_, t) = p.forward(&[0.0]).unwrap();
        let (g, gx) = p.backward(&t, &[1.0]).unwrap();
        assert_eq!(g.layers[0].weights, vec![0.0]);
        assert_eq!(g.layers[0].bias, vec![0.0]);
        assert_eq!(gx, vec![0.0]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = EncoderParams::init(&EncoderConfig {
            init_seed: 11,
            ..EncoderConfig::new(6, vec![5, 4], 3)
        })
        .unwrap();
        let bytes = p.to_checkpoint_bytes().unwrap();
        let q = EncoderParams::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(q, p);
        assert_eq!(q.to_checkpoint_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(load_checkpoint(&path).unwrap().digest(), p.digest());
    }

    #[test]
    fn corrupted_magic_is_a_version_error() {
        let p = EncoderParams::identity(2);
        let mut bytes = p.to_checkpoint_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            EncoderParams::from_checkpoint_bytes(&bytes),
            Err(Error::CheckpointVersion(_))
        ));
    }

    #[test]
    fn shape_disagreeing_with_config_is_a_shape_error() {
        let p = EncoderParams::identity(2);
        let bytes = p.to_checkpoint_bytes().unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + header_len]).unwrap();
        let tampered = header.replacen("\"output_dim\":2", "\"output_dim\":3", 1);
        assert_ne!(tampered, header);
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[16 + header_len..]);
        assert!(matches!(
            EncoderParams::from_checkpoint_bytes(&out),
            Err(Error::CheckpointShape(_))
        ));
        assert!(matches!(
            EncoderParams::from_checkpoint_bytes(&bytes[..bytes.len() - 8]),
            Err(Error::CheckpointShape(_))
        ));
    }
}
