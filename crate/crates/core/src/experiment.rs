//! End-to-end runs on synthetic identities: generate, train, evaluate on
//! held-out samples, and ratio sweeps over many such runs.

use serde::{Deserialize, Serialize};

use crate::data::{generate, generate_holdout, make_pairs, LabeledDataset, PairList, SyntheticSpec};
use crate::error::Result;
use crate::eval::{embed_all, verification_accuracy, VerificationOptions, VerificationReport};
use crate::exec::Exec;
use crate::head::MarginConfig;
use crate::mlp::{Activation, MlpSpec};
use crate::rng::derive_seed;
use crate::sampler::{MaskMode, SubspaceConfig};
use crate::trainer::{train, TrainConfig, TrainOutcome};

const RUN_STREAM: u64 = 0x5EED;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: SyntheticSpec,
    pub holdout_per_class: usize,
    pub holdout_seed: u64,
    pub num_pos: usize,
    pub num_neg: usize,
    pub pair_seed: u64,
    pub network: MlpSpec,
    pub train: TrainConfig,
    pub verification: VerificationOptions,
}

impl ExperimentConfig {
    /// Desk-scale setup: 50 identities, 200 samples each, 32-d inputs,
    /// 16-d embeddings, 3k iterations at batch 128.
    ///
    /// CosFace at lr 0.01: the angular margin at lr 0.1 intermittently kills
    /// every hidden unit of this small ReLU network.
    pub fn toy(ratio: f64) -> Self {
        let embedding_dim = 16;
        Self {
            data: SyntheticSpec {
                num_classes: 50,
                samples_per_class: 200,
                input_dim: 32,
                noise_sigma: 0.15,
                seed: 2024,
            },
            holdout_per_class: 20,
            holdout_seed: 1,
            num_pos: 500,
            num_neg: 500,
            pair_seed: 7,
            network: MlpSpec {
                input_dim: 32,
                hidden_dims: vec![64],
                embedding_dim,
                activation: Activation::Relu,
                init_seed: 0,
            },
            train: TrainConfig {
                batch_size: 128,
                total_iterations: 3000,
                base_lr: 0.01,
                lr_milestones: vec![1800, 2500],
                lr_decay_factor: 0.1,
                momentum: 0.9,
                weight_decay: 5e-4,
                subspace: Some(SubspaceConfig {
                    ratio,
                    mode: MaskMode::FixedCount,
                    feature_dim: embedding_dim,
                }),
                margin: MarginConfig::cosface(),
                seed: 0,
                log_interval: 50,
                logit_form: Default::default(),
                exec: Exec::default(),
            },
            verification: VerificationOptions::default(),
        }
    }

    pub fn with_ratio(mut self, ratio: f64) -> Self {
        let dim = self.network.embedding_dim;
        self.train.subspace = Some(SubspaceConfig {
            ratio,
            mode: self.train.subspace.map_or(MaskMode::FixedCount, |s| s.mode),
            feature_dim: dim,
        });
        self
    }

    /// Reseeds training, network init and mask streams; data and pairs are
    /// left alone so runs differ only in optimization randomness.
    pub fn with_run_seed(mut self, seed: u64) -> Self {
        self.train.seed = derive_seed(seed, RUN_STREAM, 0);
        self.network.init_seed = derive_seed(seed, RUN_STREAM, 1);
        self
    }

    pub fn datasets(&self) -> Result<(LabeledDataset, LabeledDataset, PairList)> {
        let train_set = generate(&self.data)?;
        let holdout = generate_holdout(&self.data, self.holdout_per_class, self.holdout_seed)?;
        let pairs = make_pairs(&holdout, self.num_pos, self.num_neg, self.pair_seed)?;
        Ok((train_set, holdout, pairs))
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub report: VerificationReport,
}

pub fn evaluate(outcome: &TrainOutcome, holdout: &LabeledDataset, pairs: &PairList, opts: &VerificationOptions, exec: Exec) -> Result<VerificationReport> {
    let emb = embed_all(&outcome.network, holdout, exec)?;
    verification_accuracy(&emb, pairs, opts, exec)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    let (train_set, holdout, pairs) = cfg.datasets()?;
    run_on(cfg, &train_set, &holdout, &pairs)
}

/// Like [`run_experiment`] with the datasets already materialized.
pub fn run_on(cfg: &ExperimentConfig, train_set: &LabeledDataset, holdout: &LabeledDataset, pairs: &PairList) -> Result<RunResult> {
    let outcome = train(train_set, &cfg.network, &cfg.train)?;
    let report = evaluate(&outcome, holdout, pairs, &cfg.verification, cfg.train.exec)?;
    Ok(RunResult { outcome, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub mean_pos_distance: Option<f64>,
    pub mean_neg_distance: Option<f64>,
    pub error: Option<String>,
}

/// One run per `(ratio, seed)`, ratio-major. Failed runs are recorded and the
/// sweep continues.
pub fn sweep_ratio(base: &ExperimentConfig, ratios: &[f64], seeds: &[u64], exec: Exec) -> Result<Vec<SweepRow>> {
    let (train_set, holdout, pairs) = base.datasets()?;
    let jobs: Vec<(f64, u64)> = ratios
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    Ok(exec.map(jobs.len(), |j| {
        let (ratio, seed) = jobs[j];
        let cfg = base.clone().with_ratio(ratio).with_run_seed(seed);
        let res = cfg
            .train
            .subspace
            .as_ref()
            .map_or(Ok(()), SubspaceConfig::validate)
            .and_then(|_| run_on(&cfg, &train_set, &holdout, &pairs));
        match res {
            Ok(r) => SweepRow {
                ratio,
                seed,
                accuracy: Some(r.report.accuracy_best_threshold),
                mean_pos_distance: Some(r.report.mean_pos_distance()),
                mean_neg_distance: Some(r.report.mean_neg_distance()),
                error: None,
            },
            Err(e) => {
                log::warn!("sweep run ratio={ratio} seed={seed} failed: {e}");
                SweepRow {
                    ratio,
                    seed,
                    accuracy: None,
                    mean_pos_distance: None,
                    mean_neg_distance: None,
                    error: Some(e.to_string()),
                }
            }
        }
    }))
}

/// Mean accuracy per ratio over successful runs, in input ratio order.
pub fn mean_accuracy_by_ratio(rows: &[SweepRow], ratios: &[f64]) -> Vec<(f64, Option<f64>)> {
    ratios
        .iter()
        .map(|&r| {
            let acc: Vec<f64> = rows
                .iter()
                .filter(|row| row.ratio == r)
                .filter_map(|row| row.accuracy)
                .collect();
            let mean = (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64);
            (r, mean)
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("ratio,seed,accuracy,mean_pos_distance,mean_neg_distance,error\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.ratio,
            r.seed,
            opt(r.accuracy),
            opt(r.mean_pos_distance),
            opt(r.mean_neg_distance),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        ));
    }
    out
}
