use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use subface::checkpoint::Checkpoint;
use subface::data::{generate, generate_holdout, load_dataset, make_pairs, save_dataset, DataFormat, LabeledDataset, PairList, SyntheticSpec};
use subface::eval::{
    distance_distribution, embed_all, subfeature_compactness, verification_accuracy, SubfeatureCompactnessReport,
    TarAtFar, VerificationOptions,
};
use subface::experiment::{sweep_csv, ExperimentConfig};
use subface::mlp::{MlpSpec, MlpState};
use subface::trainer::{TrainConfig, TrainRecord, Trainer};
use subface::{Error, Exec, MarginConfig, Result, SubspaceConfig};

use crate::cli::{
    CompactnessArgs, CompactnessFlags, DataFlags, EvalArgs, GenerateArgs, NetFlags, PairFlags, SweepArgs, TrainArgs,
    TrainFlags,
};

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| Error::config(format!("missing --{flag}")))
}

fn parse_list<T: FromStr>(text: &str, flag: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| Error::config(format!("--{flag}: `{s}`: {e}"))))
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn json_line<T: Serialize>(value: &T) -> String {
    let mut line = serde_json::to_string(value).expect("plain structs serialize");
    line.push('\n');
    line
}

impl DataFlags {
    fn apply(&self, mut spec: SyntheticSpec) -> SyntheticSpec {
        spec.num_classes = self.num_classes.unwrap_or(spec.num_classes);
        spec.samples_per_class = self.samples_per_class.unwrap_or(spec.samples_per_class);
        spec.input_dim = self.input_dim.unwrap_or(spec.input_dim);
        spec.noise_sigma = self.noise_sigma.unwrap_or(spec.noise_sigma);
        spec
    }
}

impl NetFlags {
    fn apply(&self, mut spec: MlpSpec) -> Result<MlpSpec> {
        if let Some(h) = &self.hidden {
            spec.hidden_dims = parse_list(h, "hidden")?;
        }
        spec.embedding_dim = self.embedding_dim.unwrap_or(spec.embedding_dim);
        spec.validate()?;
        Ok(spec)
    }
}

impl TrainFlags {
    fn margin(&self, base: MarginConfig) -> Result<MarginConfig> {
        let p = self.margin_preset.map_or(base, MarginConfig::preset);
        MarginConfig::new(
            self.s.unwrap_or(p.scale),
            self.m1.unwrap_or(p.m1),
            self.m2.unwrap_or(p.m2),
            self.m3.unwrap_or(p.m3),
        )
    }

    fn apply(&self, mut cfg: TrainConfig, embedding_dim: usize) -> Result<TrainConfig> {
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.total_iterations = self.iters.unwrap_or(cfg.total_iterations);
        cfg.base_lr = self.lr.unwrap_or(cfg.base_lr);
        if let Some(m) = &self.milestones {
            cfg.lr_milestones = parse_list(m, "milestones")?;
        }
        cfg.lr_decay_factor = self.lr_decay.unwrap_or(cfg.lr_decay_factor);
        cfg.momentum = self.momentum.unwrap_or(cfg.momentum);
        cfg.weight_decay = self.weight_decay.unwrap_or(cfg.weight_decay);
        cfg.log_interval = self.log_interval.unwrap_or(cfg.log_interval);
        cfg.margin = self.margin(cfg.margin)?;
        let base = cfg.subspace.unwrap_or(SubspaceConfig {
            ratio: 1.0,
            mode: Default::default(),
            feature_dim: embedding_dim,
        });
        cfg.subspace = if self.baseline {
            if self.ratio.is_some_and(|r| r != 1.0) {
                return Err(Error::config("--baseline conflicts with --ratio below 1"));
            }
            None
        } else {
            Some(SubspaceConfig::new(
                self.ratio.unwrap_or(base.ratio),
                self.mask_mode.unwrap_or(base.mode),
                embedding_dim,
            )?)
        };
        cfg.exec = if self.sequential { Exec::Sequential } else { Exec::default() };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn generate_cmd(args: &GenerateArgs) -> Result<()> {
    let toy = ExperimentConfig::toy(1.0).data;
    let mut spec = args.data.apply(toy);
    spec.seed = args.seed.unwrap_or(spec.seed);
    spec.validate()?;
    let out = required(&args.out, "out")?;
    let data = match args.holdout_seed {
        Some(h) => generate_holdout(&spec, spec.samples_per_class, h)?,
        None => generate(&spec)?,
    };
    save_dataset(&data, out, args.format)?;
    log::info!("wrote {} samples of {} classes to {}", data.len(), data.class_count, out.display());
    Ok(())
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    let data = load_dataset(required(&args.data, "data")?, args.format)?;
    let seed = args.seed.unwrap_or(0);
    let base_spec = MlpSpec {
        input_dim: data.input_dim(),
        hidden_dims: vec![256],
        embedding_dim: 512,
        activation: Default::default(),
        init_seed: args.init_seed.unwrap_or(seed),
    };
    let spec = args.net.apply(base_spec)?;
    let cfg = args.train.apply(
        TrainConfig {
            seed,
            ..TrainConfig::default()
        },
        spec.embedding_dim,
    )?;
    if args.checkpoint_every == Some(0) {
        return Err(Error::config("--checkpoint-every must be positive"));
    }
    if args.dry_run {
        #[derive(Serialize)]
        struct Resolved<'a> {
            network: &'a MlpSpec,
            train: &'a TrainConfig,
        }
        print!("{}", json_line(&Resolved { network: &spec, train: &cfg }));
        return Ok(());
    }
    let out_dir = required(&args.out, "out")?;
    ensure_dir(out_dir)?;

    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.state.network.spec != spec {
                return Err(Error::config(format!(
                    "{} was written for a different network configuration",
                    path.display()
                )));
            }
            log::info!("resuming from iteration {}", ck.state.iteration);
            Trainer::resume(&data, cfg, ck.state)?
        }
        None => Trainer::new(&data, &spec, cfg)?,
    };

    let metrics_path = out_dir.join("metrics.jsonl");
    let metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.resume.is_some())
        .truncate(args.resume.is_none())
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(metrics);
    let every = args.checkpoint_every;
    while !trainer.is_done() {
        let stop = match every {
            Some(k) => (trainer.iteration() / k + 1) * k,
            None => u64::MAX,
        };
        trainer.run_until(stop, |r: &TrainRecord| {
            log::info!("iter {} loss {:.6} lr {} mask {}", r.iteration, r.loss, r.lr, r.mask_size);
            metrics
                .write_all(json_line(r).as_bytes())
                .and_then(|_| metrics.flush())
                .map_err(|e| Error::io(&metrics_path, e))
        })?;
        if every.is_some() && !trainer.is_done() {
            let path = out_dir.join(format!("checkpoint-{}.bin", trainer.iteration()));
            Checkpoint::new(trainer.snapshot()).save(&path)?;
        }
    }
    let path = out_dir.join("checkpoint.bin");
    Checkpoint::new(trainer.snapshot()).save(&path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Network and evaluation pairs shared by `eval` and `compactness`.
fn load_eval_inputs(checkpoint: &Option<PathBuf>, data: &Option<PathBuf>, format: DataFormat, pairs: &PairFlags) -> Result<(MlpState, LabeledDataset, PairList)> {
    let net = Checkpoint::load(required(checkpoint, "checkpoint")?)?.state.network;
    let data = load_dataset(required(data, "data")?, format)?;
    if data.input_dim() != net.spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: net.spec.input_dim,
            actual: data.input_dim(),
        });
    }
    let list = make_pairs(&data, pairs.num_pos, pairs.num_neg, pairs.pair_seed)?;
    Ok((net, data, list))
}

fn compactness(emb: &subface::DenseMatrix, pairs: &PairList, flags: &CompactnessFlags) -> Result<SubfeatureCompactnessReport> {
    let d = emb.cols();
    let sub_dim = flags.sub_dim.unwrap_or((d / 4).max(1));
    subfeature_compactness(emb, pairs, sub_dim, flags.num_draws, flags.compactness_seed, Exec::default())
}

fn compactness_csv(report: &SubfeatureCompactnessReport) -> String {
    let mut out = String::from("pair_index,full_cosine,min_sub_cosine\n");
    for e in &report.entries {
        out.push_str(&format!("{},{},{}\n", e.pair_index, e.full_cosine, e.min_sub_cosine));
    }
    out
}

#[derive(Serialize)]
struct CompactnessSummary {
    sub_dim: usize,
    num_draws: usize,
    mean_full_cosine: f64,
    mean_min_sub_cosine: f64,
}

#[derive(Serialize)]
struct EvalReport {
    num_pos: usize,
    num_neg: usize,
    accuracy: f64,
    threshold: f64,
    ten_fold_accuracy: Option<f64>,
    tar_at_far: Vec<TarAtFar>,
    mean_pos_distance: f64,
    mean_neg_distance: f64,
    compactness: Option<CompactnessSummary>,
}

pub fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let out_dir = required(&args.out, "out")?;
    let (net, data, pairs) = load_eval_inputs(&args.checkpoint, &args.data, args.format, &args.pairs)?;
    let exec = Exec::default();
    let emb = embed_all(&net, &data, exec)?;
    let opts = VerificationOptions {
        fars: parse_list(&args.fars, "fars")?,
        ten_fold: args.ten_fold,
    };
    let report = verification_accuracy(&emb, &pairs, &opts, exec)?;
    let hist = distance_distribution(&emb, &pairs, args.metric, exec)?;
    let comp = if pairs.count_positive() > 0 {
        Some(compactness(&emb, &pairs, &args.compactness)?)
    } else {
        None
    };
    ensure_dir(out_dir)?;
    let summary = EvalReport {
        num_pos: report.num_pos,
        num_neg: report.num_neg,
        accuracy: report.accuracy_best_threshold,
        threshold: report.threshold,
        ten_fold_accuracy: report.ten_fold_accuracy,
        tar_at_far: report.tar_at_far.clone(),
        mean_pos_distance: report.mean_pos_distance(),
        mean_neg_distance: report.mean_neg_distance(),
        compactness: comp.as_ref().map(|c| CompactnessSummary {
            sub_dim: c.sub_dim,
            num_draws: c.num_draws,
            mean_full_cosine: c.mean_full_cosine(),
            mean_min_sub_cosine: c.mean_min_sub_cosine(),
        }),
    };
    write_text(&out_dir.join("report.jsonl"), &json_line(&summary))?;
    write_text(&out_dir.join("histogram.csv"), &hist.to_csv())?;
    if let Some(c) = &comp {
        write_text(&out_dir.join("compactness.csv"), &compactness_csv(c))?;
    }
    log::info!("accuracy {:.4} at threshold {:.4}", summary.accuracy, summary.threshold);
    Ok(())
}

pub fn compactness_cmd(args: &CompactnessArgs) -> Result<()> {
    let out = required(&args.out, "out")?;
    let (net, data, pairs) = load_eval_inputs(&args.checkpoint, &args.data, args.format, &args.pairs)?;
    let emb = embed_all(&net, &data, Exec::default())?;
    let report = compactness(&emb, &pairs, &args.compactness)?;
    let mut w = create(out)?;
    w.write_all(compactness_csv(&report).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(out, e))?;
    log::info!(
        "mean full cosine {:.4}, mean min subfeature cosine {:.4}",
        report.mean_full_cosine(),
        report.mean_min_sub_cosine()
    );
    Ok(())
}

pub fn sweep_cmd(args: &SweepArgs) -> Result<()> {
    if args.train.ratio.is_some() || args.train.baseline {
        return Err(Error::config("sweep-ratio takes --ratios, not --ratio or --baseline"));
    }
    let out = required(&args.out, "out")?;
    let ratios: Vec<f64> = parse_list(&args.ratios, "ratios")?;
    let seeds: Vec<u64> = parse_list(&args.seeds, "seeds")?;
    if ratios.is_empty() || seeds.is_empty() {
        return Err(Error::config("--ratios and --seeds must be non-empty"));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::config(format!("ratio {r} is outside (0, 1]")));
    }
    let mut base = ExperimentConfig::toy(1.0);
    base.data = args.data.apply(base.data);
    base.data.seed = args.data_seed.unwrap_or(base.data.seed);
    base.data.validate()?;
    base.network.input_dim = base.data.input_dim;
    base.network = args.net.apply(base.network)?;
    base.train = args.train.apply(base.train, base.network.embedding_dim)?;
    base.holdout_per_class = args.holdout_per_class;
    base.num_pos = args.pairs.num_pos;
    base.num_neg = args.pairs.num_neg;
    base.pair_seed = args.pairs.pair_seed;
    // Sweep rows only need accuracy; skip TAR so small pair counts work.
    base.verification = VerificationOptions {
        fars: vec![],
        ten_fold: false,
    };
    let exec = base.train.exec;
    let rows = subface::experiment::sweep_ratio(&base, &ratios, &seeds, exec)?;
    for r in rows.iter().filter(|r| r.error.is_some()) {
        log::warn!("ratio {} seed {} failed", r.ratio, r.seed);
    }
    write_text(out, &sweep_csv(&rows))
}
