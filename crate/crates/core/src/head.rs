//! Margin-based softmax heads with random-subspace logits.
//!
//! For a batch mask `M`, every feature row and every class-weight column is
//! gathered to `M`, normalized, and compared by cosine. The target-class
//! cosine goes through the combined margin
//! `φ = cos(arccos(m1·cosθ) + m2) − m3`, all logits are scaled by `s`, and
//! the loss is the batch-mean softmax cross-entropy. Gradients are exact
//! reverse-mode derivatives of that loss and vanish on unselected
//! dimensions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::math::{norm, DenseMatrix, IndexSet, EPS_NORM};
use crate::rng::SeededRng;

/// `m1·cosθ` is clamped into `[-1 + CLAMP, 1 - CLAMP]` before `arccos`.
pub const ARCCOS_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginPreset {
    Softmax,
    ArcFace,
    CosFace,
    Combined,
}

impl MarginPreset {
    pub const ALL: [MarginPreset; 4] = [
        MarginPreset::Softmax,
        MarginPreset::ArcFace,
        MarginPreset::CosFace,
        MarginPreset::Combined,
    ];
}

impl std::str::FromStr for MarginPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softmax" => Ok(MarginPreset::Softmax),
            "arcface" => Ok(MarginPreset::ArcFace),
            "cosface" => Ok(MarginPreset::CosFace),
            "combined" => Ok(MarginPreset::Combined),
            other => Err(Error::config(format!("unknown margin preset `{other}`"))),
        }
    }
}

impl std::fmt::Display for MarginPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MarginPreset::Softmax => "softmax",
            MarginPreset::ArcFace => "arcface",
            MarginPreset::CosFace => "cosface",
            MarginPreset::Combined => "combined",
        })
    }
}

/// Scale `s` and margins `(m1, m2, m3)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub scale: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self::arcface()
    }
}

impl MarginConfig {
    pub const DEFAULT_SCALE: f64 = 64.0;

    pub fn new(scale: f64, m1: f64, m2: f64, m3: f64) -> Result<Self> {
        let cfg = Self { scale, m1, m2, m3 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(preset: MarginPreset) -> Self {
        let s = Self::DEFAULT_SCALE;
        let (m1, m2, m3) = match preset {
            MarginPreset::Softmax => (1.0, 0.0, 0.0),
            MarginPreset::ArcFace => (1.0, 0.5, 0.0),
            MarginPreset::CosFace => (1.0, 0.0, 0.4),
            MarginPreset::Combined => (1.0, 0.3, 0.2),
        };
        Self { scale: s, m1, m2, m3 }
    }

    pub fn softmax() -> Self {
        Self::preset(MarginPreset::Softmax)
    }

    pub fn arcface() -> Self {
        Self::preset(MarginPreset::ArcFace)
    }

    pub fn cosface() -> Self {
        Self::preset(MarginPreset::CosFace)
    }

    pub fn combined() -> Self {
        Self::preset(MarginPreset::Combined)
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.scale > 0.0
            && self.scale.is_finite()
            && self.m1 >= 1.0
            && self.m1.is_finite()
            && self.m2 >= 0.0
            && self.m2.is_finite()
            && self.m3 >= 0.0
            && self.m3.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "margin requires s > 0, m1 >= 1, m2 >= 0, m3 >= 0; got {self:?}"
            )))
        }
    }

    /// Whether the target cosine passes through `arccos`. With `m1 = 1` and
    /// `m2 = 0` the angular round trip is the identity and is skipped.
    pub fn is_angular(&self) -> bool {
        self.m1 != 1.0 || self.m2 != 0.0
    }

    /// Target-class value `φ(cosθ)`.
    pub fn phi(&self, cos: f64) -> f64 {
        if !self.is_angular() {
            return cos - self.m3;
        }
        let t = (self.m1 * cos).clamp(-1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP);
        let angle = (t.acos() + self.m2).clamp(0.0, PI);
        angle.cos() - self.m3
    }

    /// `dφ/dcosθ`, zero wherever a clamp is saturated.
    pub fn phi_derivative(&self, cos: f64) -> f64 {
        if !self.is_angular() {
            return 1.0;
        }
        let t = self.m1 * cos;
        if t <= -1.0 + ARCCOS_CLAMP || t >= 1.0 - ARCCOS_CLAMP {
            return 0.0;
        }
        let angle = t.acos() + self.m2;
        if !(0.0..=PI).contains(&angle) {
            return 0.0;
        }
        angle.sin() * self.m1 / (1.0 - t * t).sqrt()
    }
}

/// Classifier matrix of shape `d × C`; column `j` is the center of class `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(DenseMatrix);

impl ClassWeights {
    pub fn new(matrix: DenseMatrix) -> Self {
        Self(matrix)
    }

    /// Uniform init with bound `√(6 / (d + C))`.
    pub fn init(dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let bound = (6.0 / (dim + classes) as f64).sqrt();
        Self(DenseMatrix::from_fn(dim, classes, |_, _| {
            rng.uniform_in(-bound, bound)
        }))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn matrix_mut(&mut self) -> &mut DenseMatrix {
        &mut self.0
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.0
    }

    pub fn center(&self, class: usize) -> Vec<f64> {
        self.0.column(class)
    }
}

/// Which logits the head computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogitForm {
    /// Normalized subfeatures and subcenters with margin and scale.
    #[default]
    Normalized,
    /// Raw masked inner products `(M∘w_j)ᵀ f_i`, zero bias, no scale and no
    /// margin. Diagnostic only.
    Unnormalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `N × C`.
    pub logits: DenseMatrix,
    pub loss: f64,
    /// `N × d`, zero outside the mask.
    pub grad_features: DenseMatrix,
    /// `d × C`, zero on rows outside the mask.
    pub grad_weights: DenseMatrix,
    /// `N × C` cosines between subfeatures and subcenters. Under
    /// [`LogitForm::Unnormalized`] these are the raw masked inner products.
    pub cosines: DenseMatrix,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MarginHead {
    pub margin: MarginConfig,
    pub form: LogitForm,
    pub exec: Exec,
}

/// Rows of width `width`, optionally unit-normalized; `norms` holds the
/// pre-normalization norms (all 1.0 when not normalized).
struct Rows {
    data: Vec<f64>,
    norms: Vec<f64>,
    width: usize,
}

impl Rows {
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    fn collect(exec: Exec, n: usize, width: usize, normalize: bool, fetch: impl Fn(usize) -> Vec<f64> + Sync + Send) -> Result<Self> {
        let rows = exec.try_map(n, |i| {
            let mut v = fetch(i);
            if !normalize {
                return Ok((v, 1.0));
            }
            let nrm = norm(&v);
            if !(nrm > EPS_NORM) {
                return Err(Error::NormUnderflow { norm: nrm });
            }
            v.iter_mut().for_each(|x| *x /= nrm);
            Ok((v, nrm))
        })?;
        let mut data = Vec::with_capacity(n * width);
        let mut norms = Vec::with_capacity(n);
        for (v, nrm) in rows {
            data.extend_from_slice(&v);
            norms.push(nrm);
        }
        Ok(Self { data, norms, width })
    }
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// Gradients with respect to the (sub)feature rows and (sub)center rows,
/// before projection back to full dimension.
struct CoreOutput {
    logits: DenseMatrix,
    cosines: DenseMatrix,
    loss: f64,
    grad_x: Rows,
    grad_omega: Rows,
}

impl MarginHead {
    pub fn new(margin: MarginConfig) -> Self {
        Self {
            margin,
            form: LogitForm::Normalized,
            exec: Exec::default(),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn with_form(mut self, form: LogitForm) -> Self {
        self.form = form;
        self
    }

    fn check_inputs(&self, features: &DenseMatrix, weights: &ClassWeights, labels: &[usize]) -> Result<()> {
        self.margin.validate()?;
        if features.cols() != weights.dim() {
            return Err(Error::DimensionMismatch {
                expected: weights.dim(),
                actual: features.cols(),
            });
        }
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        if features.rows() == 0 {
            return Err(Error::config("empty batch"));
        }
        let classes = weights.classes();
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(())
    }

    /// Subspace forward and backward pass for one batch under `mask`.
    pub fn forward(
        &self,
        features: &DenseMatrix,
        weights: &ClassWeights,
        labels: &[usize],
        mask: &IndexSet,
    ) -> Result<HeadOutput> {
        self.check_inputs(features, weights, labels)?;
        if mask.source_dim() != features.cols() {
            return Err(Error::DimensionMismatch {
                expected: features.cols(),
                actual: mask.source_dim(),
            });
        }
        let normalize = self.form == LogitForm::Normalized;
        let idx = mask.indices();
        let k = idx.len();
        let w = weights.matrix();
        let x = Rows::collect(self.exec, features.rows(), k, normalize, |i| {
            let row = features.row(i);
            idx.iter().map(|&c| row[c]).collect()
        })?;
        let omega = Rows::collect(self.exec, weights.classes(), k, normalize, |j| {
            idx.iter().map(|&r| w.get(r, j)).collect()
        })?;
        let core = self.core(&x, &omega, labels)?;

        let d = features.cols();
        let mut grad_features = DenseMatrix::zeros(features.rows(), d);
        self.exec.for_each_chunk(grad_features.as_mut_slice(), d, |i, out| {
            for (kk, &c) in idx.iter().enumerate() {
                out[c] = core.grad_x.row(i)[kk];
            }
        });
        let mut grad_weights = DenseMatrix::zeros(d, weights.classes());
        for j in 0..weights.classes() {
            let g = core.grad_omega.row(j);
            for (kk, &r) in idx.iter().enumerate() {
                grad_weights.set(r, j, g[kk]);
            }
        }
        Ok(HeadOutput {
            logits: core.logits,
            loss: core.loss,
            grad_features,
            grad_weights,
            cosines: core.cosines,
        })
    }

    /// Gradients only; same computation as [`MarginHead::forward`].
    pub fn backward(
        &self,
        features: &DenseMatrix,
        weights: &ClassWeights,
        labels: &[usize],
        mask: &IndexSet,
    ) -> Result<(DenseMatrix, DenseMatrix)> {
        let out = self.forward(features, weights, labels, mask)?;
        Ok((out.grad_features, out.grad_weights))
    }

    /// Reference head on full features with no mask and no gathering.
    pub fn full_feature_forward(
        &self,
        features: &DenseMatrix,
        weights: &ClassWeights,
        labels: &[usize],
    ) -> Result<HeadOutput> {
        self.check_inputs(features, weights, labels)?;
        let normalize = self.form == LogitForm::Normalized;
        let d = features.cols();
        let w = weights.matrix();
        let x = Rows::collect(self.exec, features.rows(), d, normalize, |i| features.row(i).to_vec())?;
        let omega = Rows::collect(self.exec, weights.classes(), d, normalize, |j| w.column(j))?;
        let core = self.core(&x, &omega, labels)?;
        let grad_features = DenseMatrix::from_vec(features.rows(), d, core.grad_x.data)?;
        let grad_weights = DenseMatrix::from_vec(weights.classes(), d, core.grad_omega.data)?.transpose();
        Ok(HeadOutput {
            logits: core.logits,
            loss: core.loss,
            grad_features,
            grad_weights,
            cosines: core.cosines,
        })
    }

    /// Everything after projection: cosines, margin, cross-entropy, and the
    /// chain rule back through the normalization.
    fn core(&self, x: &Rows, omega: &Rows, labels: &[usize]) -> Result<CoreOutput> {
        let n = labels.len();
        let c = omega.norms.len();
        let k = x.width;
        let normalized = self.form == LogitForm::Normalized;
        let (scale, margin) = if normalized {
            (self.margin.scale, Some(self.margin))
        } else {
            (1.0, None)
        };
        let inv_n = 1.0 / n as f64;

        // Per sample: cosine row, logits row, loss term, dL/dcos row.
        let per_sample = self.exec.map(n, |i| {
            let xi = x.row(i);
            let y = labels[i];
            let cos: Vec<f64> = (0..c)
                .map(|j| {
                    let oj = omega.row(j);
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += xi[kk] * oj[kk];
                    }
                    acc
                })
                .collect();
            let logits: Vec<f64> = cos
                .iter()
                .enumerate()
                .map(|(j, &cj)| match margin {
                    Some(m) if j == y => scale * m.phi(cj),
                    _ => scale * cj,
                })
                .collect();
            let top = argmax(&logits);
            let max = logits[top];
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            // z = 1 + rest; ln_1p keeps tiny losses from rounding to zero.
            let mut rest = 0.0;
            for (j, e) in exps.iter().enumerate() {
                if j != top {
                    rest += e;
                }
            }
            let z = 1.0 + rest;
            let loss = rest.ln_1p() + (max - logits[y]);
            let dcos: Vec<f64> = exps
                .iter()
                .enumerate()
                .map(|(j, e)| {
                    let p = e / z;
                    let dlogit = (if j == y { p - 1.0 } else { p }) * inv_n;
                    match margin {
                        Some(m) if j == y => scale * dlogit * m.phi_derivative(cos[j]),
                        _ => scale * dlogit,
                    }
                })
                .collect();
            (cos, logits, loss, dcos)
        });

        let mut logits = DenseMatrix::zeros(n, c);
        let mut cosines = DenseMatrix::zeros(n, c);
        let mut dcos = DenseMatrix::zeros(n, c);
        let mut loss_sum = 0.0;
        for (i, (cr, lr, l, dr)) in per_sample.into_iter().enumerate() {
            cosines.row_mut(i).copy_from_slice(&cr);
            logits.row_mut(i).copy_from_slice(&lr);
            dcos.row_mut(i).copy_from_slice(&dr);
            loss_sum += l;
        }
        let loss = loss_sum * inv_n;
        if !loss.is_finite() {
            return Err(Error::NonFinite("head loss".into()));
        }

        // Back through cos_ij = x_i · ω_j and then through v / ‖v‖.
        let unproject = |v: &[f64], g: Vec<f64>, nrm: f64| -> Vec<f64> {
            if !normalized {
                return g;
            }
            let mut dot = 0.0;
            for kk in 0..k {
                dot += v[kk] * g[kk];
            }
            (0..k).map(|kk| (g[kk] - v[kk] * dot) / nrm).collect()
        };
        let grad_x = Rows::collect(self.exec, n, k, false, |i| {
            let mut g = vec![0.0; k];
            for j in 0..c {
                let gij = dcos.get(i, j);
                let oj = omega.row(j);
                for kk in 0..k {
                    g[kk] += gij * oj[kk];
                }
            }
            unproject(x.row(i), g, x.norms[i])
        })?;
        let grad_omega = Rows::collect(self.exec, c, k, false, |j| {
            let mut g = vec![0.0; k];
            for i in 0..n {
                let gij = dcos.get(i, j);
                let xi = x.row(i);
                for kk in 0..k {
                    g[kk] += gij * xi[kk];
                }
            }
            unproject(omega.row(j), g, omega.norms[j])
        })?;

        Ok(CoreOutput {
            logits,
            cosines,
            loss,
            grad_x,
            grad_omega,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(m: MarginConfig) -> MarginHead {
        MarginHead::new(m)
    }

    fn weights(cols: &[&[f64]]) -> ClassWeights {
        let d = cols[0].len();
        ClassWeights::new(DenseMatrix::from_fn(d, cols.len(), |i, j| cols[j][i]))
    }

    fn random_instance(seed: u64, n: usize, c: usize, d: usize) -> (DenseMatrix, ClassWeights, Vec<usize>) {
        let mut rng = SeededRng::new(seed);
        let f = DenseMatrix::from_fn(n, d, |_, _| rng.normal());
        let w = ClassWeights::new(DenseMatrix::from_fn(d, c, |_, _| rng.normal()));
        let labels = (0..n).map(|_| rng.below(c)).collect();
        (f, w, labels)
    }

    #[test]
    fn orthogonal_softmax_example() {
        let f = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let w = weights(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let out = head(MarginConfig::softmax())
            .forward(&f, &w, &[0], &IndexSet::full(2))
            .unwrap();
        assert_eq!(out.cosines.row(0), &[1.0, 0.0]);
        assert_eq!(out.logits.row(0), &[64.0, 0.0]);
        let expected = (-64.0f64).exp().ln_1p();
        assert!((out.loss - expected).abs() < 1e-40);
        assert!(out.loss > 1.5e-28 && out.loss < 1.7e-28);
    }

    #[test]
    fn arcface_phi_at_zero_angle() {
        // θ = 0 is saturated by the arccos clamp: the evaluated angle is
        // arccos(1 - 1e-7) ≈ 4.47e-4 rather than exactly 0.
        let m = MarginConfig::arcface();
        let phi = m.phi(1.0);
        let clamped = ((1.0f64 - ARCCOS_CLAMP).acos() + 0.5).cos();
        assert_eq!(phi, clamped);
        assert!((phi - 0.877_582_561_9).abs() < 3e-4);
        // Just inside the clamp the formula is unclamped.
        let c = 0.999;
        assert!((m.phi(c) - (c.acos() + 0.5).cos()).abs() < 1e-15);
        assert_eq!(m.phi_derivative(1.0), 0.0);
    }

    #[test]
    fn cosface_phi_exact() {
        assert_eq!(MarginConfig::cosface().phi(0.9), 0.5);
    }

    #[test]
    fn uniform_softmax_loss_is_ln_classes() {
        let f = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let w = weights(&[&[0.0, 1.0], &[0.0, -1.0], &[0.0, 2.0]]);
        let out = head(MarginConfig::softmax())
            .full_feature_forward(&f, &w, &[1])
            .unwrap();
        assert!((out.loss - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hand_built_instance_matches_direct_evaluation() {
        // Brute-force scalar evaluation of the normalized margin loss.
        let f = DenseMatrix::from_rows(&[vec![0.3, -1.2, 0.5], vec![2.0, 0.1, -0.4]]).unwrap();
        let w = weights(&[&[1.0, 0.2, -0.3], &[-0.5, 0.9, 0.4]]);
        let labels = [1usize, 0];
        for m in [MarginConfig::arcface(), MarginConfig::cosface(), MarginConfig::combined()] {
            let out = head(m).full_feature_forward(&f, &w, &labels).unwrap();
            let mut total = 0.0;
            for i in 0..2 {
                let fi = f.row(i);
                let nf = (fi.iter().map(|v| v * v).sum::<f64>()).sqrt();
                let mut logits = [0.0; 2];
                for j in 0..2 {
                    let wj = w.center(j);
                    let nw = (wj.iter().map(|v| v * v).sum::<f64>()).sqrt();
                    let cos = fi.iter().zip(&wj).map(|(a, b)| a * b).sum::<f64>() / (nf * nw);
                    logits[j] = if j == labels[i] {
                        m.scale * (((m.m1 * cos).acos() + m.m2).cos() - m.m3)
                    } else {
                        m.scale * cos
                    };
                }
                let denom: f64 = logits.iter().map(|l| l.exp()).sum();
                total += -(logits[labels[i]].exp() / denom).ln();
            }
            assert!((out.loss - total / 2.0).abs() < 1e-10, "{m:?}: {} vs {}", out.loss, total / 2.0);
        }
    }

    #[test]
    fn identity_mask_equals_full_head_bitwise() {
        for seed in 0..20 {
            let (f, w, l) = random_instance(seed, 6, 4, 5);
            for p in MarginPreset::ALL {
                let h = head(MarginConfig::preset(p));
                let a = h.forward(&f, &w, &l, &IndexSet::full(5)).unwrap();
                let b = h.full_feature_forward(&f, &w, &l).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn masked_dimensions_receive_no_gradient() {
        let (f, w, l) = random_instance(3, 5, 4, 10);
        let mask = IndexSet::new(10, vec![1, 4, 5, 8]).unwrap();
        let (gf, gw) = head(MarginConfig::arcface()).backward(&f, &w, &l, &mask).unwrap();
        for dim in (0..10).filter(|d| !mask.contains(*d)) {
            for i in 0..5 {
                assert_eq!(gf.get(i, dim), 0.0);
            }
            for j in 0..4 {
                assert_eq!(gw.get(dim, j), 0.0);
            }
        }
        assert!(gf.as_slice().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let (f, w, l) = random_instance(8, 40, 9, 12);
        let mask = IndexSet::new(12, vec![0, 2, 3, 7, 11]).unwrap();
        let h = head(MarginConfig::combined());
        let a = h.with_exec(Exec::Sequential).forward(&f, &w, &l, &mask).unwrap();
        let b = h.with_exec(Exec::Parallel).forward(&f, &w, &l, &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        let (f, w, _) = random_instance(1, 2, 3, 4);
        let h = head(MarginConfig::arcface());
        assert!(matches!(
            h.forward(&f, &w, &[0, 3], &IndexSet::full(4)),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
        assert!(matches!(
            h.forward(&f, &w, &[0, 1], &IndexSet::full(5)),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut z = f.clone();
        z.set(0, 1, 0.0);
        z.set(0, 2, 0.0);
        let mask = IndexSet::new(4, vec![1, 2]).unwrap();
        assert!(matches!(
            h.forward(&z, &w, &[0, 1], &mask),
            Err(Error::NormUnderflow { .. })
        ));
        assert!(MarginConfig::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(MarginConfig::new(64.0, 0.5, 0.0, 0.0).is_err());
    }

    #[test]
    fn margin_penalizes_target() {
        for m in [MarginConfig::arcface(), MarginConfig::cosface(), MarginConfig::combined()] {
            for step in 1..400 {
                let theta = step as f64 * (PI - m.m2) / 400.0;
                let c = theta.cos();
                assert!(m.phi(c) < c, "{m:?} θ={theta}");
            }
        }
    }

    #[test]
    fn scaling_a_feature_row_leaves_logits_unchanged() {
        let (f, w, l) = random_instance(5, 3, 4, 6);
        let mask = IndexSet::new(6, vec![0, 2, 5]).unwrap();
        let h = head(MarginConfig::arcface());
        let a = h.forward(&f, &w, &l, &mask).unwrap();
        let mut g = f.clone();
        g.row_mut(1).iter_mut().for_each(|v| *v *= 17.5);
        let b = h.forward(&g, &w, &l, &mask).unwrap();
        for (x, y) in a.logits.as_slice().iter().zip(b.logits.as_slice()) {
            assert!((x - y).abs() < 1e-10 * 64.0);
        }
        for (x, y) in a.cosines.as_slice().iter().zip(b.cosines.as_slice()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn normalized_gradient_has_no_radial_component() {
        let (f, w, l) = random_instance(12, 4, 5, 7);
        let h = head(MarginConfig::softmax());
        let out = h.full_feature_forward(&f, &w, &l).unwrap();
        for i in 0..4 {
            let radial: f64 = out.grad_features.row(i).iter().zip(f.row(i)).map(|(g, x)| g * x).sum();
            assert!(radial.abs() < 1e-10, "row {i}: {radial}");
            // Finite difference along the radial direction agrees.
            let eps = 1e-6;
            let loss_at = |t: f64| {
                let mut g = f.clone();
                g.row_mut(i).iter_mut().for_each(|v| *v *= 1.0 + t);
                h.full_feature_forward(&g, &w, &l).unwrap().loss
            };
            let fd = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
            assert!(fd.abs() < 1e-8, "row {i}: {fd}");
        }
    }

    #[test]
    fn unnormalized_form_uses_raw_masked_products() {
        let (f, w, l) = random_instance(2, 3, 4, 6);
        let mask = IndexSet::new(6, vec![1, 3]).unwrap();
        let out = head(MarginConfig::arcface())
            .with_form(LogitForm::Unnormalized)
            .forward(&f, &w, &l, &mask)
            .unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let wj = w.center(j);
                let expect = crate::math::masked_inner(&wj, f.row(i), &mask).unwrap();
                assert_eq!(out.logits.get(i, j), expect);
            }
        }
        // Raw products are gradient-checked like the normalized form.
        let eps = 1e-6;
        let h = head(MarginConfig::arcface()).with_form(LogitForm::Unnormalized);
        for (i, dim) in [(0, 1), (2, 3)] {
            let mut p = f.clone();
            p.set(i, dim, f.get(i, dim) + eps);
            let mut m = f.clone();
            m.set(i, dim, f.get(i, dim) - eps);
            let fd = (h.forward(&p, &w, &l, &mask).unwrap().loss - h.forward(&m, &w, &l, &mask).unwrap().loss) / (2.0 * eps);
            assert!((fd - out.grad_features.get(i, dim)).abs() < 1e-7);
        }
    }
}
