//! Feed-forward embedding extractor with hand-written backpropagation.
//!
//! Layers compute `z = a·W + b` with `W` stored `in × out`. Hidden layers
//! apply ReLU; the final layer is affine so embeddings may take any sign.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::math::DenseMatrix;
use crate::rng::{derive_seed, SeededRng};

const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    pub init_seed: u64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config("all layer widths must be positive"));
        }
        if self.embedding_dim < 2 {
            return Err(Error::config("embedding_dim must be at least 2"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in × fan_out`.
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpState {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

/// Activations retained by [`MlpState::forward_embed`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<DenseMatrix>,
    /// Pre-activations of the hidden layers.
    pre: Vec<DenseMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
    pub input: DenseMatrix,
}

impl MlpGrads {
    /// Gradient blocks in the same order as [`MlpState::param_blocks_mut`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }
}

/// Row-wise `a·W + b`; each output entry accumulates over ascending input index.
fn affine(a: &DenseMatrix, layer: &Layer, exec: Exec) -> DenseMatrix {
    let out = layer.fan_out();
    let mut z = DenseMatrix::zeros(a.rows(), out);
    exec.for_each_chunk(z.as_mut_slice(), out, |i, zr| {
        for (k, &x) in a.row(i).iter().enumerate() {
            let wr = layer.weights.row(k);
            for j in 0..out {
                zr[j] += x * wr[j];
            }
        }
        for j in 0..out {
            zr[j] += layer.bias[j];
        }
    });
    z
}

impl MlpState {
    pub fn init(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .enumerate()
            .map(|(l, (fan_in, fan_out))| {
                let mut rng = SeededRng::new(derive_seed(spec.init_seed, INIT_STREAM, l as u64));
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weights: DenseMatrix::from_fn(fan_in, fan_out, |_, _| rng.uniform_in(-bound, bound)),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn param_blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    /// Weight then bias for each layer, in layer order.
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.param_blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn forward_embed(&self, batch: &DenseMatrix, exec: Exec) -> Result<(DenseMatrix, ForwardCache)> {
        if batch.cols() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim,
                actual: batch.cols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut a = batch.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = affine(&a, layer, exec);
            inputs.push(a);
            if l == last {
                return Ok((z, ForwardCache { inputs, pre }));
            }
            let mut act = z.clone();
            act.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            pre.push(z);
            a = act;
        }
        unreachable!("network has at least one layer")
    }

    pub fn embed(&self, batch: &DenseMatrix, exec: Exec) -> Result<DenseMatrix> {
        Ok(self.forward_embed(batch, exec)?.0)
    }

    pub fn backward_embed(&self, cache: &ForwardCache, grad_embeddings: &DenseMatrix, exec: Exec) -> Result<MlpGrads> {
        let n = grad_embeddings.rows();
        let stale = cache.inputs.len() != self.layers.len()
            || cache.pre.len() + 1 != self.layers.len()
            || grad_embeddings.cols() != self.spec.embedding_dim
            || cache
                .inputs
                .iter()
                .zip(&self.layers)
                .any(|(a, l)| a.rows() != n || a.cols() != l.fan_in());
        if stale {
            return Err(Error::StaleCache);
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_embeddings.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let a = &cache.inputs[l];
            let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());

            // grad_W = aᵀ·δ, one row of grad_W per input unit.
            let mut gw = DenseMatrix::zeros(fan_in, fan_out);
            exec.for_each_chunk(gw.as_mut_slice(), fan_out, |k, row| {
                for i in 0..n {
                    let x = a.get(i, k);
                    let dr = delta.row(i);
                    for j in 0..fan_out {
                        row[j] += x * dr[j];
                    }
                }
            });
            let mut gb = vec![0.0; fan_out];
            for i in 0..n {
                for (g, d) in gb.iter_mut().zip(delta.row(i)) {
                    *g += d;
                }
            }

            // δ·Wᵀ, masked by the ReLU of the layer below.
            let mut ga = DenseMatrix::zeros(n, fan_in);
            let below = if l > 0 { Some(&cache.pre[l - 1]) } else { None };
            exec.for_each_chunk(ga.as_mut_slice(), fan_in, |i, row| {
                let dr = delta.row(i);
                for k in 0..fan_in {
                    if below.is_some_and(|z| z.get(i, k) <= 0.0) {
                        continue;
                    }
                    let wr = layer.weights.row(k);
                    let mut acc = 0.0;
                    for j in 0..fan_out {
                        acc += dr[j] * wr[j];
                    }
                    row[k] = acc;
                }
            });
            grads.push(LayerGrad { weights: gw, bias: gb });
            delta = ga;
        }
        grads.reverse();
        Ok(MlpGrads {
            layers: grads,
            input: delta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(hidden: Vec<usize>) -> MlpSpec {
        MlpSpec {
            input_dim: 5,
            hidden_dims: hidden,
            embedding_dim: 3,
            activation: Activation::Relu,
            init_seed: 17,
        }
    }

    fn batch(seed: u64, n: usize, d: usize) -> DenseMatrix {
        let mut rng = SeededRng::new(seed);
        DenseMatrix::from_fn(n, d, |_, _| rng.normal())
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = MlpState::init(&spec(vec![7, 4])).unwrap();
        let b = MlpState::init(&spec(vec![7, 4])).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(a.layers[0].weights.as_slice().iter().all(|w| w.abs() <= bound));
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
    }

    #[test]
    fn degenerate_depth_is_single_linear_map() {
        let s = MlpState::init(&spec(vec![])).unwrap();
        assert_eq!(s.layers.len(), 1);
        assert_eq!((s.layers[0].fan_in(), s.layers[0].fan_out()), (5, 3));
    }

    #[test]
    fn invalid_specs() {
        assert!(MlpState::init(&spec(vec![0])).is_err());
        let mut s = spec(vec![]);
        s.input_dim = 0;
        assert!(MlpState::init(&s).is_err());
        s.input_dim = 5;
        s.embedding_dim = 1;
        assert!(MlpState::init(&s).is_err());
    }

    #[test]
    fn zero_network_gives_zero_embeddings() {
        let mut s = MlpState::init(&spec(vec![4])).unwrap();
        s.param_blocks_mut().into_iter().for_each(|b| b.fill(0.0));
        let out = s.embed(&batch(1, 6, 5), Exec::Sequential).unwrap();
        assert!(out.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_network_is_transparent_on_positive_inputs() {
        let mut s = MlpState::init(&MlpSpec {
            input_dim: 4,
            hidden_dims: vec![4, 4],
            embedding_dim: 4,
            activation: Activation::Relu,
            init_seed: 0,
        })
        .unwrap();
        for l in &mut s.layers {
            l.weights = DenseMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 });
        }
        let x = DenseMatrix::from_fn(3, 4, |i, j| 0.5 + (i * 4 + j) as f64);
        assert_eq!(s.embed(&x, Exec::Sequential).unwrap(), x);
    }

    #[test]
    fn dimension_mismatch() {
        let s = MlpState::init(&spec(vec![])).unwrap();
        assert!(matches!(
            s.forward_embed(&batch(0, 2, 4), Exec::Sequential),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let s = MlpState::init(&spec(vec![6])).unwrap();
        let (_, cache) = s.forward_embed(&batch(2, 4, 5), Exec::Sequential).unwrap();
        let g = s.backward_embed(&cache, &DenseMatrix::zeros(4, 3), Exec::Sequential).unwrap();
        assert!(g.blocks().iter().all(|b| b.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn single_linear_layer_closed_form() {
        let s = MlpState::init(&spec(vec![])).unwrap();
        let x = batch(3, 4, 5);
        let (_, cache) = s.forward_embed(&x, Exec::Sequential).unwrap();
        let go = batch(4, 4, 3);
        let g = s.backward_embed(&cache, &go, Exec::Sequential).unwrap();
        for k in 0..5 {
            for j in 0..3 {
                let expect: f64 = (0..4).map(|i| x.get(i, k) * go.get(i, j)).sum();
                assert!((g.layers[0].weights.get(k, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stale_cache_detected() {
        let s = MlpState::init(&spec(vec![6])).unwrap();
        let (_, cache) = s.forward_embed(&batch(2, 4, 5), Exec::Sequential).unwrap();
        assert!(matches!(
            s.backward_embed(&cache, &DenseMatrix::zeros(3, 3), Exec::Sequential),
            Err(Error::StaleCache)
        ));
        let other = MlpState::init(&spec(vec![2, 2])).unwrap();
        assert!(matches!(
            other.backward_embed(&cache, &DenseMatrix::zeros(4, 3), Exec::Sequential),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn backends_agree_bitwise() {
        let s = MlpState::init(&spec(vec![9, 6])).unwrap();
        let x = batch(5, 33, 5);
        let (ya, ca) = s.forward_embed(&x, Exec::Sequential).unwrap();
        let (yb, cb) = s.forward_embed(&x, Exec::Parallel).unwrap();
        assert_eq!(ya, yb);
        let go = batch(6, 33, 3);
        assert_eq!(
            s.backward_embed(&ca, &go, Exec::Sequential).unwrap(),
            s.backward_embed(&cb, &go, Exec::Parallel).unwrap()
        );
    }
}
