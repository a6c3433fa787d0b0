//! Fully-connected embedding network with manual backpropagation.
//!
//! Weights are stored row-major (`out x in`). Hidden layers use ReLU, the last
//! layer is affine so embeddings are unbounded. A [`FreezeMask`] pins the first
//! `n` layers: their gradients are exactly zero and optimizers skip them.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::seed::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        check_dim(in_dim * out_dim, weights.len())?;
        check_dim(out_dim, bias.len())?;
        Ok(Layer {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v))
            .collect()
    }
}

/// Parameters of the embedding map.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Number of leading layers excluded from training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreezeMask {
    pub frozen_layers: usize,
}

impl FreezeMask {
    pub fn new(frozen_layers: usize) -> Self {
        FreezeMask { frozen_layers }
    }

    pub fn none() -> Self {
        FreezeMask { frozen_layers: 0 }
    }

    pub fn is_frozen(&self, layer: usize) -> bool {
        layer < self.frozen_layers
    }
}

/// Values retained by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// Input of each layer.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pub pre_activations: Vec<Vec<f64>>,
}

/// Parameter gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(m: &Mlp) -> Self {
        Gradients {
            weights: m.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: m.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (dst, src) in self.buffers_mut().into_iter().zip(other.buffers()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for buf in self.buffers_mut() {
            buf.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Buffers in layer order: weights then bias of each layer.
    pub fn buffers(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.bias.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.buffers().iter().all(|b| b.iter().all(|&g| g == 0.0))
    }
}

/// Glorot-uniform weights, zero biases, ReLU hidden layers and an identity head.
///
/// `dims = [input, hidden..., output]`.
pub fn init_model(dims: &[usize], seed: u64) -> Result<Mlp> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "need at least an input and an output size, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Config(format!("layer sizes must be positive, got {dims:?}")));
    }
    let mut rng = seed::derived_rng(seed, stream::INIT, 0);
    let n_layers = dims.len() - 1;
    let mut layers = Vec::with_capacity(n_layers);
    for (k, pair) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-s..=s))
            .collect();
        let activation = if k + 1 == n_layers {
            Activation::Identity
        } else {
            Activation::Relu
        };
        layers.push(Layer::new(fan_in, fan_out, weights, vec![0.0; fan_out], activation)?);
    }
    Mlp::new(layers)
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::Config("a model needs at least one layer".into()))?;
        if last.activation != Activation::Identity {
            return Err(Error::Config("the output layer must be affine".into()));
        }
        for pair in layers.windows(2) {
            check_dim(pair[0].out_dim, pair[1].in_dim)?;
        }
        Ok(Mlp { layers })
    }

    /// One square identity layer: embeddings equal inputs.
    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for k in 0..dim {
            weights[k * dim + k] = 1.0;
        }
        Mlp {
            layers: vec![Layer {
                in_dim: dim,
                out_dim: dim,
                weights,
                bias: vec![0.0; dim],
                activation: Activation::Identity,
            }],
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// `[input, hidden..., output]`
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameter buffers in the same order as [`Gradients::buffers`].
    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn validate_freeze(&self, freeze: FreezeMask) -> Result<()> {
        if freeze.frozen_layers > self.layers.len() {
            return Err(Error::Config(format!(
                "cannot freeze {} layers of a {}-layer model",
                freeze.frozen_layers,
                self.layers.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Trace)> {
        check_dim(self.input_dim(), x.len())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let z = layer.affine(&h);
            let out = match layer.activation {
                Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
                Activation::Identity => z.clone(),
            };
            inputs.push(h);
            pre_activations.push(z);
            h = out;
        }
        Ok((
            h,
            Trace {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Embedding only, without a trace.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let mut h = x.to_vec();
        for layer in &self.layers {
            let mut z = layer.affine(&h);
            if layer.activation == Activation::Relu {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = z;
        }
        Ok(h)
    }

    /// Parameter gradients of a scalar loss whose gradient w.r.t. the output is `grad_out`.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64], freeze: FreezeMask) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        self.backward_into(trace, grad_out, freeze, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Mlp::backward`] but accumulates into `grads`.
    pub fn backward_into(&self, trace: &Trace, grad_out: &[f64], freeze: FreezeMask, grads: &mut Gradients) -> Result<()> {
        self.validate_freeze(freeze)?;
        if trace.inputs.len() != self.layers.len() || trace.pre_activations.len() != self.layers.len() {
            return Err(Error::Evaluation(format!(
                "trace has {} layers, model has {}",
                trace.inputs.len(),
                self.layers.len()
            )));
        }
        check_dim(self.output_dim(), grad_out.len())?;
        let mut delta = grad_out.to_vec();
        for k in (freeze.frozen_layers..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let x = &trace.inputs[k];
            let z = &trace.pre_activations[k];
            check_dim(layer.in_dim, x.len())?;
            check_dim(layer.out_dim, z.len())?;
            if layer.activation == Activation::Relu {
                for (d, z) in delta.iter_mut().zip(z) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let gw = &mut grads.weights[k];
            for (o, d) in delta.iter().enumerate() {
                if *d != 0.0 {
                    for (g, xi) in gw[o * layer.in_dim..(o + 1) * layer.in_dim].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            for (g, d) in grads.bias[k].iter_mut().zip(&delta) {
                *g += d;
            }
            if k > freeze.frozen_layers {
                let mut prev = vec![0.0; layer.in_dim];
                for (o, d) in delta.iter().enumerate() {
                    if *d != 0.0 {
                        let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += d * w;
                        }
                    }
                }
                delta = prev;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCLMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training provenance stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub epochs: u64,
    pub seed: u64,
    pub frozen_layers: u32,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub model: Mlp,
    pub meta: CheckpointMeta,
}

/// Serializes a checkpoint. Layout, all integers and floats little-endian:
///
/// ```text
/// magic "SCLMCKPT" | version u32 | n_layers u32
/// per layer: in u32 | out u32 | activation u8 | weights f64[out*in] (row-major) | bias f64[out]
/// epochs u64 | seed u64 | frozen_layers u32 | n_history u64 | history f64[n_history]
/// ```
pub fn write_checkpoint<W: Write>(model: &Mlp, meta: &CheckpointMeta, mut w: W) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(model.layers.len() as u32).to_le_bytes())?;
    for layer in &model.layers {
        w.write_all(&(layer.in_dim as u32).to_le_bytes())?;
        w.write_all(&(layer.out_dim as u32).to_le_bytes())?;
        w.write_all(&[layer.activation.code()])?;
        for v in layer.weights.iter().chain(&layer.bias) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&meta.epochs.to_le_bytes())?;
    w.write_all(&meta.seed.to_le_bytes())?;
    w.write_all(&meta.frozen_layers.to_le_bytes())?;
    w.write_all(&(meta.loss_history.len() as u64).to_le_bytes())?;
    for v in &meta.loss_history {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn save_checkpoint(model: &Mlp, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(model, meta, &mut buf).expect("writing to memory");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("{what} length overflows")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let n_layers = cur.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for k in 0..n_layers {
        let in_dim = cur.u32("layer input size")? as usize;
        let out_dim = cur.u32("layer output size")? as usize;
        let activation = Activation::from_code(cur.u8("activation")?)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("unknown activation in layer {k}")))?;
        let n_weights = in_dim
            .checked_mul(out_dim)
            .ok_or_else(|| Error::CorruptCheckpoint("layer size overflows".into()))?;
        let weights = cur.f64s(n_weights, "weights")?;
        let bias = cur.f64s(out_dim, "bias")?;
        layers.push(
            Layer::new(in_dim, out_dim, weights, bias, activation)
                .map_err(|e| Error::CorruptCheckpoint(format!("layer {k}: {e}")))?,
        );
    }
    let model = Mlp::new(layers).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let epochs = cur.u64("epochs")?;
    let seed = cur.u64("seed")?;
    let frozen_layers = cur.u32("frozen layer count")?;
    let n_history = cur.u64("history length")?;
    let n_history = usize::try_from(n_history)
        .map_err(|_| Error::CorruptCheckpoint("history length overflows".into()))?;
    let loss_history = cur.f64s(n_history, "loss history")?;
    if cur.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(Checkpoint {
        version,
        model,
        meta: CheckpointMeta {
            epochs,
            seed,
            frozen_layers,
            loss_history,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes_and_bounds() {
        let m = init_model(&[4, 8, 3], 1).unwrap();
        assert_eq!(m.n_layers(), 2);
        assert_eq!((m.layers()[0].out_dim, m.layers()[0].in_dim), (8, 4));
        assert_eq!((m.layers()[1].out_dim, m.layers()[1].in_dim), (3, 8));
        assert_eq!(m.layers()[0].activation, Activation::Relu);
        assert_eq!(m.layers()[1].activation, Activation::Identity);
        for l in m.layers() {
            let s = (6.0 / (l.in_dim + l.out_dim) as f64).sqrt();
            assert!(l.weights.iter().all(|w| w.abs() <= s));
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
        assert_eq!(m, init_model(&[4, 8, 3], 1).unwrap());
        assert_ne!(m, init_model(&[4, 8, 3], 2).unwrap());
        assert!(init_model(&[4], 1).is_err());
        assert!(init_model(&[4, 0, 2], 1).is_err());
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let m = Mlp::identity(3);
        let (y, _) = m.forward(&[1.5, -2.0, 0.25]).unwrap();
        assert_eq!(y, vec![1.5, -2.0, 0.25]);
        assert!(m.forward(&[1.0]).is_err());
    }

    #[test]
    fn relu_kills_negative_preactivations() {
        let hidden = Layer::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![-10.0, -10.0], Activation::Relu).unwrap();
        let head = Layer::new(2, 1, vec![1.0, 1.0], vec![0.0], Activation::Identity).unwrap();
        let m = Mlp::new(vec![hidden, head]).unwrap();
        let (_, trace) = m.forward(&[1.0, 2.0]).unwrap();
        assert_eq!(trace.inputs[1], vec![0.0, 0.0]);
    }

    #[test]
    fn model_rejects_bad_chains() {
        let a = Layer::new(2, 3, vec![0.0; 6], vec![0.0; 3], Activation::Relu).unwrap();
        let b = Layer::new(2, 1, vec![0.0; 2], vec![0.0], Activation::Identity).unwrap();
        assert!(Mlp::new(vec![a.clone(), b]).is_err());
        assert!(Mlp::new(vec![a]).is_err());
        assert!(Mlp::new(vec![]).is_err());
    }

    #[test]
    fn identity_layer_gradients() {
        let m = Mlp::identity(2);
        let x = [3.0, -1.0];
        let g = [0.5, 2.0];
        let (_, trace) = m.forward(&x).unwrap();
        let grads = m.backward(&trace, &g, FreezeMask::none()).unwrap();
        assert_eq!(grads.weights[0], vec![1.5, -0.5, 6.0, -2.0]);
        assert_eq!(grads.bias[0], vec![0.5, 2.0]);
    }

    #[test]
    fn fully_frozen_model_has_zero_gradients() {
        let m = init_model(&[3, 5, 2], 4).unwrap();
        let (_, trace) = m.forward(&[0.3, -0.2, 1.0]).unwrap();
        let grads = m.backward(&trace, &[1.0, -1.0], FreezeMask::new(2)).unwrap();
        assert!(grads.is_zero());
        assert!(m.backward(&trace, &[1.0, -1.0], FreezeMask::new(3)).is_err());
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let m = init_model(&[3, 5, 2], 4).unwrap();
        let other = init_model(&[3, 2], 4).unwrap();
        let (_, trace) = other.forward(&[0.3, -0.2, 1.0]).unwrap();
        assert!(m.backward(&trace, &[1.0, 0.0], FreezeMask::none()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = init_model(&[6, 4, 3], 9).unwrap();
        let meta = CheckpointMeta {
            epochs: 30,
            seed: 9,
            frozen_layers: 1,
            loss_history: vec![3.5, 2.25, f64::MIN_POSITIVE],
        };
        let mut buf = Vec::new();
        write_checkpoint(&m, &meta, &mut buf).unwrap();
        let ck = read_checkpoint(&buf).unwrap();
        assert_eq!(ck.model, m);
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.version, CHECKPOINT_VERSION);
    }

    #[test]
    fn checkpoint_rejects_truncation_and_versions() {
        let m = init_model(&[2, 2], 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &CheckpointMeta::default(), &mut buf).unwrap();
        for cut in [0, 5, 12, buf.len() - 1] {
            assert!(matches!(read_checkpoint(&buf[..cut]), Err(Error::CorruptCheckpoint(_))));
        }
        let mut bumped = buf.clone();
        bumped[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint(&bumped),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_checkpoint(&trailing).is_err());
        let mut bad_magic = buf;
        bad_magic[0] = b'X';
        assert!(read_checkpoint(&bad_magic).is_err());
    }
}
