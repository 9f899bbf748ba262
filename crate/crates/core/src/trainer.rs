//! SGD training loop: batch → embed → mask → margin head → backprop → update.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::head::{ClassWeights, LogitForm, MarginConfig, MarginHead};
use crate::math::{cosine_similarity, gather, DenseMatrix, IndexSet};
use crate::mlp::{MlpSpec, MlpState};
use crate::rng::{derive_seed, SeededRng};
use crate::sampler::{sample_mask, MaskMode, SubspaceConfig};

const BATCH_STREAM: u64 = 0xBA7C;
const MASK_STREAM: u64 = 0x3A5C;
const WEIGHT_STREAM: u64 = 0x3E16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iterations: u64,
    pub base_lr: f64,
    pub lr_milestones: Vec<u64>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `None` trains the plain margin head with no sampler at all.
    pub subspace: Option<SubspaceConfig>,
    pub margin: MarginConfig,
    pub seed: u64,
    pub log_interval: u64,
    #[serde(default)]
    pub logit_form: LogitForm,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    /// Large-scale face-recognition schedule with a 512-d embedding.
    fn default() -> Self {
        Self {
            batch_size: 512,
            total_iterations: 65_000,
            base_lr: 0.1,
            lr_milestones: vec![36_000, 52_000],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            subspace: Some(SubspaceConfig {
                ratio: 0.7,
                mode: MaskMode::FixedCount,
                feature_dim: 512,
            }),
            margin: MarginConfig::arcface(),
            seed: 0,
            log_interval: 50,
            logit_form: LogitForm::Normalized,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_iterations == 0 || self.log_interval == 0 {
            return Err(Error::config("batch size, iterations and log interval must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::config("lr_decay_factor must be positive"));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("lr milestones must be strictly increasing"));
        }
        if self.lr_milestones.last().is_some_and(|&m| m >= self.total_iterations) {
            return Err(Error::config("lr milestones must precede the final iteration"));
        }
        self.margin.validate()?;
        if let Some(s) = &self.subspace {
            s.validate()?;
        }
        Ok(())
    }

    pub fn mask_size(&self, dim: usize) -> usize {
        match &self.subspace {
            Some(s) if !s.is_identity() && s.mode == MaskMode::FixedCount => s.count(),
            _ => dim,
        }
    }
}

/// `base_lr · decay^(milestones ≤ iteration)`.
pub fn lr_at(iteration: u64, cfg: &TrainConfig) -> f64 {
    let passed = cfg.lr_milestones.iter().filter(|&&m| m <= iteration).count();
    cfg.base_lr * cfg.lr_decay_factor.powi(passed as i32)
}

/// Momentum SGD with coupled weight decay:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: grads.len().min(velocity.len()),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            block: format!("{}-element parameter block", params.len()),
        });
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// Batch mean of `|cosθ_target(full) − cosθ'_target(masked)|`.
pub fn angle_diff_diagnostic(features: &DenseMatrix, weights: &ClassWeights, labels: &[usize], mask: &IndexSet) -> Result<f64> {
    if labels.len() != features.rows() || features.rows() == 0 {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            actual: labels.len(),
        });
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= weights.classes() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: weights.classes(),
            });
        }
        let f = features.row(i);
        let w = weights.center(y);
        let full = cosine_similarity(f, &w)?;
        let sub = cosine_similarity(&gather(f, mask)?, &gather(&w, mask)?)?;
        total += (full - sub).abs();
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    pub mask_size: usize,
    pub angle_diff: f64,
    pub wall_ms: f64,
}

impl TrainRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_numerics(&self, other: &TrainRecord) -> bool {
        self.iteration == other.iteration
            && self.loss.to_bits() == other.loss.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
            && self.mask_size == other.mask_size
            && self.angle_diff.to_bits() == other.angle_diff.to_bits()
    }
}

/// Shuffled-epoch batch order. Each epoch's permutation is derived from the
/// seed and epoch number, so `(epoch, cursor)` fully describes the position.
#[derive(Debug, Clone)]
struct BatchOrder {
    seed: u64,
    len: usize,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl BatchOrder {
    fn new(seed: u64, len: usize, epoch: u64, cursor: usize) -> Self {
        let mut b = Self {
            seed,
            len,
            epoch,
            cursor,
            order: Vec::new(),
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        SeededRng::new(derive_seed(self.seed, BATCH_STREAM, self.epoch)).shuffle(&mut self.order);
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.len {
                self.epoch += 1;
                self.cursor = 0;
                self.reshuffle();
            }
            let take = (size - out.len()).min(self.len - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

/// Everything needed to continue a run bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub iteration: u64,
    pub network: MlpState,
    pub weights: ClassWeights,
    /// Momentum buffers, one per network parameter block.
    pub network_velocity: Vec<Vec<f64>>,
    pub weight_velocity: Vec<f64>,
    pub seed: u64,
    pub epoch: u64,
    pub cursor: usize,
}

pub struct Trainer<'a> {
    data: &'a LabeledDataset,
    cfg: TrainConfig,
    head: MarginHead,
    network: MlpState,
    weights: ClassWeights,
    network_velocity: Vec<Vec<f64>>,
    weight_velocity: Vec<f64>,
    iteration: u64,
    batches: BatchOrder,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a LabeledDataset, spec: &MlpSpec, cfg: TrainConfig) -> Result<Self> {
        let network = MlpState::init(spec)?;
        let weights = ClassWeights::init(
            spec.embedding_dim,
            data.class_count,
            derive_seed(cfg.seed, WEIGHT_STREAM, 0),
        );
        let network_velocity = network.param_blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        let state = TrainerState {
            iteration: 0,
            weight_velocity: vec![0.0; weights.matrix().as_slice().len()],
            network,
            weights,
            network_velocity,
            seed: cfg.seed,
            epoch: 0,
            cursor: 0,
        };
        Self::resume(data, cfg, state)
    }

    pub fn resume(data: &'a LabeledDataset, cfg: TrainConfig, state: TrainerState) -> Result<Self> {
        cfg.validate()?;
        let spec = &state.network.spec;
        if data.is_empty() {
            return Err(Error::InsufficientSamples("training set is empty".into()));
        }
        if data.class_count < 2 {
            return Err(Error::InsufficientSamples("training needs at least 2 classes".into()));
        }
        if data.input_dim() != spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: spec.input_dim,
                actual: data.input_dim(),
            });
        }
        if let Some(s) = &cfg.subspace {
            if s.feature_dim != spec.embedding_dim {
                return Err(Error::config(format!(
                    "subspace feature_dim {} differs from embedding_dim {}",
                    s.feature_dim, spec.embedding_dim
                )));
            }
        }
        if state.weights.dim() != spec.embedding_dim || state.weights.classes() != data.class_count {
            return Err(Error::config("class weights do not match the network and dataset"));
        }
        if state.seed != cfg.seed {
            return Err(Error::config(format!(
                "state was produced with seed {}, config has {}",
                state.seed, cfg.seed
            )));
        }
        if state.cursor > data.len() {
            return Err(Error::config("batch cursor beyond the dataset"));
        }
        let head = MarginHead::new(cfg.margin)
            .with_form(cfg.logit_form)
            .with_exec(cfg.exec);
        Ok(Self {
            data,
            head,
            batches: BatchOrder::new(cfg.seed, data.len(), state.epoch, state.cursor),
            network: state.network,
            weights: state.weights,
            network_velocity: state.network_velocity,
            weight_velocity: state.weight_velocity,
            iteration: state.iteration,
            cfg,
            started: Instant::now(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.total_iterations
    }

    pub fn network(&self) -> &MlpState {
        &self.network
    }

    pub fn weights(&self) -> &ClassWeights {
        &self.weights
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn snapshot(&self) -> TrainerState {
        TrainerState {
            iteration: self.iteration,
            network: self.network.clone(),
            weights: self.weights.clone(),
            network_velocity: self.network_velocity.clone(),
            weight_velocity: self.weight_velocity.clone(),
            seed: self.cfg.seed,
            epoch: self.batches.epoch,
            cursor: self.batches.cursor,
        }
    }

    pub fn into_parts(self) -> (MlpState, ClassWeights) {
        (self.network, self.weights)
    }

    fn batch_mask(&self) -> IndexSet {
        let dim = self.network.embedding_dim();
        match &self.cfg.subspace {
            Some(s) => {
                let mut rng = SeededRng::new(derive_seed(self.cfg.seed, MASK_STREAM, self.iteration));
                sample_mask(s, &mut rng)
            }
            None => IndexSet::full(dim),
        }
    }

    /// One optimization step. Returns a record when the step falls on the log
    /// interval or is the last one.
    pub fn step(&mut self) -> Result<Option<TrainRecord>> {
        let it = self.iteration;
        self.step_inner()
            .map_err(|e| Error::AtIteration {
                iteration: it,
                source: Box::new(e),
            })
    }

    fn step_inner(&mut self) -> Result<Option<TrainRecord>> {
        let it = self.iteration;
        let exec = self.cfg.exec;
        let lr = lr_at(it, &self.cfg);
        let idx = self.batches.next_batch(self.cfg.batch_size);
        let x = self.data.samples.select_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| self.data.labels[i]).collect();

        let (emb, cache) = self.network.forward_embed(&x, exec)?;
        let mask = self.batch_mask();
        let out = match &self.cfg.subspace {
            Some(_) => self.head.forward(&emb, &self.weights, &labels, &mask)?,
            None => self.head.full_feature_forward(&emb, &self.weights, &labels)?,
        };
        let log = it.is_multiple_of(self.cfg.log_interval) || it + 1 == self.cfg.total_iterations;
        let angle_diff = if log && !mask.is_full() {
            angle_diff_diagnostic(&emb, &self.weights, &labels, &mask)?
        } else {
            0.0
        };

        let grads = self.network.backward_embed(&cache, &out.grad_features, exec)?;
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for ((p, g), v) in self
            .network
            .param_blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(self.network_velocity.iter_mut())
        {
            sgd_step(p, g, v, lr, mu, wd)?;
        }
        sgd_step(
            self.weights.matrix_mut().as_mut_slice(),
            out.grad_weights.as_slice(),
            &mut self.weight_velocity,
            lr,
            mu,
            wd,
        )?;
        self.iteration += 1;

        Ok(log.then(|| TrainRecord {
            iteration: it,
            loss: out.loss,
            lr,
            mask_size: mask.len(),
            angle_diff,
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
        }))
    }

    /// Runs until `total_iterations` or `stop_at`, whichever comes first.
    pub fn run_until(&mut self, stop_at: u64, mut on_record: impl FnMut(&TrainRecord) -> Result<()>) -> Result<Vec<TrainRecord>> {
        let stop = stop_at.min(self.cfg.total_iterations);
        let mut records = Vec::new();
        while self.iteration < stop {
            if let Some(r) = self.step()? {
                on_record(&r)?;
                records.push(r);
            }
        }
        Ok(records)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: MlpState,
    pub weights: ClassWeights,
    pub records: Vec<TrainRecord>,
}

pub fn train(data: &LabeledDataset, spec: &MlpSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(data, spec, cfg.clone())?;
    let records = t.run_until(u64::MAX, |_| Ok(()))?;
    let (network, weights) = t.into_parts();
    Ok(TrainOutcome {
        network,
        weights,
        records,
    })
}
