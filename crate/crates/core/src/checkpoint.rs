//! Versioned little-endian binary checkpoints.
//!
//! Layout (all integers `u64` unless noted, all floats `f64`):
//!
//! ```text
//! magic "SUBFCKPT" (8 bytes) | version u32
//! spec:   input_dim | n_hidden | hidden_dims[n_hidden] | embedding_dim
//!         | activation u8 | init_seed
//! run:    iteration | seed | epoch | cursor
//! params: per layer: matrix(weights) vector(bias)
//!         matrix(class weights)
//! moment: n_blocks | vector[n_blocks] | vector(class weight velocity)
//! matrix = rows | cols | rows·cols values;  vector = len | len values
//! ```
//!
//! The batch-order and mask streams are reconstructed from `seed`, `epoch`,
//! `cursor` and `iteration`, so no generator internals are stored.

use std::path::Path;

use crate::error::{Error, Result};
use crate::head::ClassWeights;
use crate::math::DenseMatrix;
use crate::mlp::{Activation, Layer, MlpSpec, MlpState};
use crate::trainer::TrainerState;

pub const MAGIC: &[u8; 8] = b"SUBFCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainerState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn values(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn vector(&mut self, v: &[f64]) {
        self.usize(v.len());
        self.values(v);
    }

    fn matrix(&mut self, m: &DenseMatrix) {
        self.usize(m.rows());
        self.usize(m.cols());
        self.values(m.as_slice());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.off < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.off)));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let at = self.off;
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint(format!("size overflow at byte {at}")))
    }

    fn len(&mut self, elem: usize) -> Result<usize> {
        let at = self.off;
        let n = self.usize()?;
        if n.checked_mul(elem).is_none_or(|b| b > self.bytes.len() - self.off) {
            return Err(Error::Checkpoint(format!("implausible length {n} at byte {at}")));
        }
        Ok(n)
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn vector(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        self.values(n)
    }

    fn matrix(&mut self) -> Result<DenseMatrix> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.off))
            .ok_or_else(|| Error::Checkpoint(format!("implausible matrix {rows}x{cols}")))?;
        DenseMatrix::from_vec(rows, cols, self.values(n)?)
    }
}

impl Checkpoint {
    pub fn new(state: TrainerState) -> Self {
        Self { state }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let spec = &s.network.spec;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.usize(spec.input_dim);
        w.usize(spec.hidden_dims.len());
        spec.hidden_dims.iter().for_each(|&h| w.usize(h));
        w.usize(spec.embedding_dim);
        w.0.push(match spec.activation {
            Activation::Relu => 0,
        });
        w.u64(spec.init_seed);
        w.u64(s.iteration);
        w.u64(s.seed);
        w.u64(s.epoch);
        w.usize(s.cursor);
        for layer in &s.network.layers {
            w.matrix(&layer.weights);
            w.vector(&layer.bias);
        }
        w.matrix(s.weights.matrix());
        w.usize(s.network_velocity.len());
        s.network_velocity.iter().for_each(|v| w.vector(v));
        w.vector(&s.weight_velocity);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, off: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("missing checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let input_dim = r.usize()?;
        let n_hidden = r.len(8)?;
        let hidden_dims = (0..n_hidden).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let embedding_dim = r.usize()?;
        let activation = match r.take(1)?[0] {
            0 => Activation::Relu,
            other => return Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
        };
        let spec = MlpSpec {
            input_dim,
            hidden_dims,
            embedding_dim,
            activation,
            init_seed: r.u64()?,
        };
        spec.validate()
            .map_err(|e| Error::Checkpoint(format!("invalid network spec: {e}")))?;
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let epoch = r.u64()?;
        let cursor = r.usize()?;

        let mut layers = Vec::new();
        for (l, (fan_in, fan_out)) in spec.layer_shapes().into_iter().enumerate() {
            let weights = r.matrix()?;
            let bias = r.vector()?;
            if weights.rows() != fan_in || weights.cols() != fan_out || bias.len() != fan_out {
                return Err(Error::Checkpoint(format!("layer {l} shape disagrees with spec")));
            }
            layers.push(Layer { weights, bias });
        }
        let weights = ClassWeights::new(r.matrix()?);
        if weights.dim() != embedding_dim {
            return Err(Error::Checkpoint("class weights disagree with embedding_dim".into()));
        }
        let n_blocks = r.len(8)?;
        let network_velocity = (0..n_blocks).map(|_| r.vector()).collect::<Result<Vec<_>>>()?;
        let weight_velocity = r.vector()?;
        if r.off != bytes.len() {
            return Err(Error::Checkpoint(format!("trailing bytes after offset {}", r.off)));
        }
        let network = MlpState { spec, layers };
        let shapes_ok = network_velocity.len() == network.param_blocks().len()
            && network_velocity
                .iter()
                .zip(network.param_blocks())
                .all(|(v, p)| v.len() == p.len())
            && weight_velocity.len() == weights.matrix().as_slice().len();
        if !shapes_ok {
            return Err(Error::Checkpoint("momentum buffers disagree with parameters".into()));
        }
        Ok(Self {
            state: TrainerState {
                iteration,
                network,
                weights,
                network_velocity,
                weight_velocity,
                seed,
                epoch,
                cursor,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
