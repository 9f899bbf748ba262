//! Straight-line reference implementations used as test oracles. Nothing here
//! calls into the library's numerical code paths.

#![allow(dead_code)]

use std::f64::consts::PI;

use subface::head::{ClassWeights, MarginConfig};
use subface::math::{DenseMatrix, IndexSet};
use subface::mlp::MlpState;
use subface::rng::SeededRng;

pub const FD_STEP: f64 = 1e-6;

/// Relative error with an absolute floor on the denominator. Below the floor,
/// central differences at step 1e-6 are dominated by round-off in the loss.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.normal())
}

pub fn random_mask(rng: &mut SeededRng, d: usize, k: usize) -> IndexSet {
    IndexSet::new(d, rng.sample_distinct(d, k)).unwrap()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Target cosines `cosθ_{i,y_i}` of the normalized gathered vectors.
pub fn target_cosines(f: &DenseMatrix, w: &ClassWeights, labels: &[usize], mask: &IndexSet) -> Vec<f64> {
    let idx = mask.indices();
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let x = unit(&idx.iter().map(|&c| f.get(i, c)).collect::<Vec<_>>());
            let o = unit(&idx.iter().map(|&r| w.matrix().get(r, y)).collect::<Vec<_>>());
            x.iter().zip(&o).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// True when a target cosine sits near a clamp boundary of the margin map.
pub fn near_clamp(margin: &MarginConfig, cosines: &[f64]) -> bool {
    if margin.m1 == 1.0 && margin.m2 == 0.0 {
        return false;
    }
    cosines.iter().any(|&c| {
        let t = margin.m1 * c;
        (1.0 - t.abs()) < 1e-3 || (t.clamp(-1.0, 1.0).acos() + margin.m2 - PI).abs() < 1e-3
    })
}

/// Batch-mean margin softmax loss evaluated directly from the definitions.
pub fn head_loss(f: &DenseMatrix, w: &ClassWeights, labels: &[usize], mask: &IndexSet, m: &MarginConfig) -> f64 {
    let idx = mask.indices();
    let classes = w.classes();
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|j| unit(&idx.iter().map(|&r| w.matrix().get(r, j)).collect::<Vec<_>>()))
        .collect();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let x = unit(&idx.iter().map(|&c| f.get(i, c)).collect::<Vec<_>>());
        let logits: Vec<f64> = (0..classes)
            .map(|j| {
                let c: f64 = x.iter().zip(&centers[j]).map(|(a, b)| a * b).sum();
                if j == y {
                    let t = (m.m1 * c).clamp(-1.0 + 1e-7, 1.0 - 1e-7);
                    let phi = if m.m1 == 1.0 && m.m2 == 0.0 {
                        c - m.m3
                    } else {
                        (t.acos() + m.m2).clamp(0.0, PI).cos() - m.m3
                    };
                    m.scale * phi
                } else {
                    m.scale * c
                }
            })
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
        total += lse - logits[y];
    }
    total / labels.len() as f64
}

/// Layer-by-layer affine + ReLU, returning the embeddings and every hidden
/// pre-activation.
pub fn mlp_forward(state: &MlpState, x: &DenseMatrix) -> (DenseMatrix, Vec<f64>) {
    let mut pre_all = Vec::new();
    let mut a: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row(i).to_vec()).collect();
    let last = state.layers.len() - 1;
    for (l, layer) in state.layers.iter().enumerate() {
        let (fan_in, fan_out) = (layer.weights.rows(), layer.weights.cols());
        a = a
            .iter()
            .map(|row| {
                (0..fan_out)
                    .map(|j| {
                        let mut z = layer.bias[j];
                        for k in 0..fan_in {
                            z += row[k] * layer.weights.get(k, j);
                        }
                        if l < last {
                            pre_all.push(z);
                            z.max(0.0)
                        } else {
                            z
                        }
                    })
                    .collect()
            })
            .collect();
    }
    (DenseMatrix::from_rows(&a).unwrap(), pre_all)
}

/// Central difference of `loss` with respect to `*slot`.
pub fn central_diff<T>(target: &mut T, get: impl Fn(&mut T) -> &mut f64, loss: impl Fn(&T) -> f64) -> f64 {
    let orig = *get(target);
    *get(target) = orig + FD_STEP;
    let up = loss(target);
    *get(target) = orig - FD_STEP;
    let down = loss(target);
    *get(target) = orig;
    (up - down) / (2.0 * FD_STEP)
}

/// One random end-to-end instance: network, class weights, batch, labels and
/// mask, resampled until no ReLU pre-activation or margin clamp is nearby.
pub struct E2eInstance {
    pub net: MlpState,
    pub weights: ClassWeights,
    pub x: DenseMatrix,
    pub labels: Vec<usize>,
    pub mask: IndexSet,
    pub margin: MarginConfig,
}

pub fn e2e_instance(seed: u64, margin: MarginConfig, mask_size: usize) -> E2eInstance {
    use subface::mlp::{Activation, MlpSpec};
    let (n, c, input, d) = (4, 5, 10, 8);
    for attempt in 0u64.. {
        let mut rng = SeededRng::new(seed).child(0xE2E, attempt);
        let spec = MlpSpec {
            input_dim: input,
            hidden_dims: vec![6],
            embedding_dim: d,
            activation: Activation::Relu,
            init_seed: rng.below(1 << 30) as u64,
        };
        let mut net = MlpState::init(&spec).unwrap();
        for layer in &mut net.layers {
            layer.bias.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
        }
        let weights = ClassWeights::new(random_matrix(&mut rng, d, c));
        let x = random_matrix(&mut rng, n, input);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let mask = random_mask(&mut rng, d, mask_size);
        let (emb, pre) = mlp_forward(&net, &x);
        if pre.iter().any(|z| z.abs() < 1e-4) {
            continue;
        }
        if near_clamp(&margin, &target_cosines(&emb, &weights, &labels, &mask)) {
            continue;
        }
        return E2eInstance {
            net,
            weights,
            x,
            labels,
            mask,
            margin,
        };
    }
    unreachable!()
}

impl E2eInstance {
    pub fn loss(&self, net: &MlpState, weights: &ClassWeights) -> f64 {
        let (emb, _) = mlp_forward(net, &self.x);
        head_loss(&emb, weights, &self.labels, &self.mask, &self.margin)
    }

    /// Largest elementwise relative error between the library's analytic
    /// gradients and central differences of the oracle loss, over every
    /// network parameter and every class-weight entry.
    pub fn max_rel_err(&self, exec: subface::Exec) -> f64 {
        use subface::head::MarginHead;
        let (emb, cache) = self.net.forward_embed(&self.x, exec).unwrap();
        let out = MarginHead::new(self.margin)
            .with_exec(exec)
            .forward(&emb, &self.weights, &self.labels, &self.mask)
            .unwrap();
        let grads = self.net.backward_embed(&cache, &out.grad_features, exec).unwrap();

        let mut worst = 0.0f64;
        let mut net = self.net.clone();
        for (l, g) in grads.layers.iter().enumerate() {
            for e in 0..g.weights.as_slice().len() {
                let fd = central_diff(&mut net, |n| &mut n.layers[l].weights.as_mut_slice()[e], |n| self.loss(n, &self.weights));
                worst = worst.max(rel_err(g.weights.as_slice()[e], fd));
            }
            for e in 0..g.bias.len() {
                let fd = central_diff(&mut net, |n| &mut n.layers[l].bias[e], |n| self.loss(n, &self.weights));
                worst = worst.max(rel_err(g.bias[e], fd));
            }
        }
        let mut w = self.weights.clone();
        for e in 0..out.grad_weights.as_slice().len() {
            let fd = central_diff(&mut w, |w| &mut w.matrix_mut().as_mut_slice()[e], |w| self.loss(&self.net, w));
            worst = worst.max(rel_err(out.grad_weights.as_slice()[e], fd));
        }
        worst
    }
}
