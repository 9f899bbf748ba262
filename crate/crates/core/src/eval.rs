//! Verification metrics and embedding-geometry diagnostics.

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, PairList};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::math::{cosine_similarity, euclidean, gather, l2_normalize, DenseMatrix, IndexSet};
use crate::mlp::MlpState;
use crate::rng::{derive_seed, SeededRng};

const COMPACTNESS_STREAM: u64 = 0xC0C0;
pub const HISTOGRAM_BINS: usize = 64;

/// Full-dimension embeddings of every sample, unit-normalized per row.
pub fn embed_all(state: &MlpState, dataset: &LabeledDataset, exec: Exec) -> Result<DenseMatrix> {
    let raw = state.embed(&dataset.samples, exec)?;
    let d = raw.cols();
    let rows = exec.try_map(raw.rows(), |i| l2_normalize(raw.row(i)))?;
    DenseMatrix::from_vec(raw.rows(), d, rows.concat())
}

/// Cosine similarity of every pair, in pair order.
pub fn pair_scores(embeddings: &DenseMatrix, pairs: &PairList, exec: Exec) -> Result<Vec<f64>> {
    let m = embeddings.rows();
    exec.try_map(pairs.len(), |k| {
        let p = pairs.pairs[k];
        if p.a >= m || p.b >= m {
            return Err(Error::config(format!("pair {k} references a missing embedding")));
        }
        cosine_similarity(embeddings.row(p.a), embeddings.row(p.b))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far: f64,
    pub tar: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub num_pos: usize,
    pub num_neg: usize,
    pub accuracy_best_threshold: f64,
    pub threshold: f64,
    pub ten_fold_accuracy: Option<f64>,
    pub tar_at_far: Vec<TarAtFar>,
    /// Euclidean distances between unit-normalized embeddings.
    pub pos_distances: Vec<f64>,
    pub neg_distances: Vec<f64>,
}

impl VerificationReport {
    pub fn mean_pos_distance(&self) -> f64 {
        mean(&self.pos_distances)
    }

    pub fn mean_neg_distance(&self) -> f64 {
        mean(&self.neg_distances)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationOptions {
    pub fars: Vec<f64>,
    pub ten_fold: bool,
}

impl Default for VerificationOptions {
    fn default() -> Self {
        Self {
            fars: vec![0.1, 0.01],
            ten_fold: false,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Accuracy-maximizing threshold; a pair is predicted "same" iff its score is
/// strictly greater than the threshold.
///
/// Candidates are every midpoint between consecutive distinct scores plus one
/// threshold below the minimum and one above the maximum. Ties in accuracy
/// go to the lowest threshold. Returns `(accuracy, threshold)`.
pub fn best_threshold(scores: &[f64], is_same: &[bool]) -> Result<(f64, f64)> {
    if scores.is_empty() || scores.len() != is_same.len() {
        return Err(Error::InsufficientPairs("no scored pairs".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Distinct scores with their (positive, negative) counts.
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for &i in &order {
        let s = scores[i];
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if is_same[i] {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, usize::from(is_same[i]), usize::from(!is_same[i]))),
        }
    }
    let total_pos: usize = groups.iter().map(|g| g.1).sum();

    // Threshold k sits below group k: groups before it are predicted negative.
    let mut best = (total_pos, groups[0].0 - 1.0);
    let (mut neg_below, mut pos_below) = (0, 0);
    for k in 1..=groups.len() {
        neg_below += groups[k - 1].2;
        pos_below += groups[k - 1].1;
        let correct = neg_below + (total_pos - pos_below);
        if correct > best.0 {
            let t = if k == groups.len() {
                groups[k - 1].0 + 1.0
            } else {
                // Adjacent floats can round the midpoint up onto the next score.
                let mid = 0.5 * (groups[k - 1].0 + groups[k].0);
                if mid < groups[k].0 {
                    mid
                } else {
                    groups[k - 1].0
                }
            };
            best = (correct, t);
        }
    }
    Ok((best.0 as f64 / scores.len() as f64, best.1))
}

/// True-accept rate at the threshold admitting at most `⌊far·#neg⌋` false
/// accepts.
pub fn tar_at_far(scores: &[f64], is_same: &[bool], far: f64) -> Result<TarAtFar> {
    if !(far > 0.0 && far <= 1.0) {
        return Err(Error::config(format!("FAR must lie in (0, 1], got {far}")));
    }
    let mut neg: Vec<f64> = scores.iter().zip(is_same).filter(|(_, &s)| !s).map(|(v, _)| *v).collect();
    let pos: Vec<f64> = scores.iter().zip(is_same).filter(|(_, &s)| s).map(|(v, _)| *v).collect();
    if pos.is_empty() {
        return Err(Error::InsufficientPairs("TAR needs positive pairs".into()));
    }
    if (neg.len() as f64) * far < 1.0 - 1e-9 {
        return Err(Error::InsufficientPairs(format!(
            "{} negative pairs cannot resolve FAR {far}",
            neg.len()
        )));
    }
    neg.sort_by(|a, b| b.total_cmp(a));
    let allowed = ((far * neg.len() as f64) + 1e-9).floor() as usize;
    let threshold = if allowed >= neg.len() {
        scores.iter().copied().fold(f64::INFINITY, f64::min) - 1.0
    } else {
        neg[allowed]
    };
    let accepted = pos.iter().filter(|&&s| s > threshold).count();
    Ok(TarAtFar {
        far,
        tar: accepted as f64 / pos.len() as f64,
        threshold,
    })
}

/// Interleaved 10-fold protocol: threshold chosen on nine folds, accuracy
/// measured on the tenth, averaged.
pub fn ten_fold_accuracy(scores: &[f64], is_same: &[bool]) -> Result<f64> {
    const FOLDS: usize = 10;
    if scores.len() < FOLDS {
        return Err(Error::InsufficientPairs("10-fold protocol needs at least 10 pairs".into()));
    }
    let mut total = 0.0;
    for f in 0..FOLDS {
        let (mut tr_s, mut tr_y) = (Vec::new(), Vec::new());
        for (k, (&s, &y)) in scores.iter().zip(is_same).enumerate() {
            if k % FOLDS != f {
                tr_s.push(s);
                tr_y.push(y);
            }
        }
        let (_, t) = best_threshold(&tr_s, &tr_y)?;
        let (mut correct, mut n) = (0usize, 0usize);
        for (k, (&s, &y)) in scores.iter().zip(is_same).enumerate() {
            if k % FOLDS == f {
                n += 1;
                correct += usize::from((s > t) == y);
            }
        }
        total += correct as f64 / n as f64;
    }
    Ok(total / FOLDS as f64)
}

fn pair_distances(embeddings: &DenseMatrix, pairs: &PairList, exec: Exec) -> Result<Vec<f64>> {
    let m = embeddings.rows();
    exec.try_map(pairs.len(), |k| {
        let p = pairs.pairs[k];
        if p.a >= m || p.b >= m {
            return Err(Error::config(format!("pair {k} references a missing embedding")));
        }
        Ok(euclidean(&l2_normalize(embeddings.row(p.a))?, &l2_normalize(embeddings.row(p.b))?))
    })
}

pub fn verification_accuracy(
    embeddings: &DenseMatrix,
    pairs: &PairList,
    opts: &VerificationOptions,
    exec: Exec,
) -> Result<VerificationReport> {
    let num_pos = pairs.count_positive();
    let num_neg = pairs.len() - num_pos;
    if num_pos == 0 || num_neg == 0 {
        return Err(Error::InsufficientPairs(format!(
            "need positive and negative pairs, got {num_pos} and {num_neg}"
        )));
    }
    let scores = pair_scores(embeddings, pairs, exec)?;
    let same: Vec<bool> = pairs.pairs.iter().map(|p| p.is_same).collect();
    let (accuracy, threshold) = best_threshold(&scores, &same)?;
    let tar = opts
        .fars
        .iter()
        .map(|&far| tar_at_far(&scores, &same, far))
        .collect::<Result<Vec<_>>>()?;
    let ten_fold = if opts.ten_fold {
        Some(ten_fold_accuracy(&scores, &same)?)
    } else {
        None
    };
    let dist = pair_distances(embeddings, pairs, exec)?;
    let (mut pos_distances, mut neg_distances) = (Vec::new(), Vec::new());
    for (d, s) in dist.into_iter().zip(&same) {
        if *s {
            pos_distances.push(d)
        } else {
            neg_distances.push(d)
        }
    }
    Ok(VerificationReport {
        num_pos,
        num_neg,
        accuracy_best_threshold: accuracy,
        threshold,
        ten_fold_accuracy: ten_fold,
        tar_at_far: tar,
        pos_distances,
        neg_distances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    /// Distance between unit-normalized embeddings, in `[0, 2]`.
    #[default]
    Euclidean,
    /// Cosine similarity (higher means closer).
    Cosine,
}

impl std::str::FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(DistanceMetric::Euclidean),
            "cosine" => Ok(DistanceMetric::Cosine),
            other => Err(Error::config(format!("unknown metric `{other}`"))),
        }
    }
}

impl std::fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub pos: usize,
    pub neg: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceDistribution {
    pub metric: DistanceMetric,
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
    /// [`HISTOGRAM_BINS`] equal-width bins over the observed range of both series.
    pub bins: Vec<HistogramBin>,
}

impl DistanceDistribution {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,pos_count,neg_count\n");
        for b in &self.bins {
            out.push_str(&format!("{},{},{},{}\n", b.lo, b.hi, b.pos, b.neg));
        }
        out
    }
}

pub fn distance_distribution(
    embeddings: &DenseMatrix,
    pairs: &PairList,
    metric: DistanceMetric,
    exec: Exec,
) -> Result<DistanceDistribution> {
    if pairs.is_empty() {
        return Err(Error::InsufficientPairs("no pairs to measure".into()));
    }
    let values = match metric {
        DistanceMetric::Euclidean => pair_distances(embeddings, pairs, exec)?,
        DistanceMetric::Cosine => pair_scores(embeddings, pairs, exec)?,
    };
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (v, p) in values.iter().zip(&pairs.pairs) {
        if p.is_same {
            pos.push(*v)
        } else {
            neg.push(*v)
        }
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let mut bins: Vec<HistogramBin> = (0..HISTOGRAM_BINS)
        .map(|b| HistogramBin {
            lo: lo + b as f64 * width,
            hi: if b + 1 == HISTOGRAM_BINS { hi } else { lo + (b + 1) as f64 * width },
            pos: 0,
            neg: 0,
        })
        .collect();
    let bin_of = |v: f64| {
        if width > 0.0 {
            (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1)
        } else {
            0
        }
    };
    for &v in &pos {
        bins[bin_of(v)].pos += 1;
    }
    for &v in &neg {
        bins[bin_of(v)].neg += 1;
    }
    Ok(DistanceDistribution { metric, pos, neg, bins })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompactnessEntry {
    pub pair_index: usize,
    pub full_cosine: f64,
    pub min_sub_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubfeatureCompactnessReport {
    pub sub_dim: usize,
    pub num_draws: usize,
    pub entries: Vec<CompactnessEntry>,
}

impl SubfeatureCompactnessReport {
    pub fn mean_full_cosine(&self) -> f64 {
        mean(&self.entries.iter().map(|e| e.full_cosine).collect::<Vec<_>>())
    }

    pub fn mean_min_sub_cosine(&self) -> f64 {
        mean(&self.entries.iter().map(|e| e.min_sub_cosine).collect::<Vec<_>>())
    }
}

/// For every positive pair, the smallest cosine over `num_draws` random
/// `sub_dim`-dimensional subfeatures. Each pair draws from its own stream,
/// so a longer run extends a shorter one with the same seed.
pub fn subfeature_compactness(
    embeddings: &DenseMatrix,
    pairs: &PairList,
    sub_dim: usize,
    num_draws: usize,
    seed: u64,
    exec: Exec,
) -> Result<SubfeatureCompactnessReport> {
    let d = embeddings.cols();
    if sub_dim == 0 || sub_dim >= d {
        return Err(Error::config(format!("sub_dim must lie in [1, {d}), got {sub_dim}")));
    }
    if num_draws == 0 {
        return Err(Error::config("num_draws must be positive"));
    }
    let positives: Vec<usize> = (0..pairs.len()).filter(|&k| pairs.pairs[k].is_same).collect();
    let m = embeddings.rows();
    let entries = exec.try_map(positives.len(), |n| {
        let k = positives[n];
        let p = pairs.pairs[k];
        if p.a >= m || p.b >= m {
            return Err(Error::config(format!("pair {k} references a missing embedding")));
        }
        let (u, v) = (embeddings.row(p.a), embeddings.row(p.b));
        let full_cosine = cosine_similarity(u, v)?;
        let mut rng = SeededRng::new(derive_seed(seed, COMPACTNESS_STREAM, k as u64));
        let mut min_sub_cosine = f64::INFINITY;
        for _ in 0..num_draws {
            let mask = IndexSet::new(d, rng.sample_distinct(d, sub_dim))?;
            let c = cosine_similarity(&gather(u, &mask)?, &gather(v, &mask)?)?;
            min_sub_cosine = min_sub_cosine.min(c);
        }
        Ok(CompactnessEntry {
            pair_index: k,
            full_cosine,
            min_sub_cosine,
        })
    })?;
    Ok(SubfeatureCompactnessReport {
        sub_dim,
        num_draws,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Pair;

    fn pairs_of(flags: &[bool]) -> PairList {
        PairList {
            pairs: flags
                .iter()
                .enumerate()
                .map(|(k, &s)| Pair { a: 2 * k, b: 2 * k + 1, is_same: s })
                .collect(),
        }
    }

    #[test]
    fn perfectly_separated_scores() {
        let scores = [0.9, 0.8, 0.95, 0.1, -0.2, 0.3];
        let same = [true, true, true, false, false, false];
        let (acc, t) = best_threshold(&scores, &same).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(t, 0.5 * (0.3 + 0.8));
    }

    #[test]
    fn indistinguishable_scores_give_chance() {
        let scores = [0.4; 6];
        let same = [true, false, true, false, true, false];
        let (acc, t) = best_threshold(&scores, &same).unwrap();
        assert_eq!(acc, 0.5);
        assert_eq!(t, 0.4 - 1.0);
    }

    #[test]
    fn tar_examples() {
        let scores = [0.9, 0.7, 0.5, 0.8, 0.6, 0.4, 0.2, 0.1, 0.0, -0.1, -0.2, -0.3];
        let same = [true, true, true, false, false, false, false, false, false, false, false, false];
        // 9 negatives: FAR 0.2 admits one false accept (0.8).
        let r = tar_at_far(&scores, &same, 0.2).unwrap();
        assert_eq!(r.threshold, 0.6);
        assert!((r.tar - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(tar_at_far(&scores, &same, 1.0).unwrap().tar, 1.0);
        assert!(matches!(tar_at_far(&scores, &same, 0.01), Err(Error::InsufficientPairs(_))));
    }

    #[test]
    fn ten_fold_on_separable_scores() {
        let mut scores = Vec::new();
        let mut same = Vec::new();
        for k in 0..40 {
            same.push(k % 2 == 0);
            scores.push(if k % 2 == 0 { 0.5 + k as f64 / 100.0 } else { -(k as f64) / 100.0 });
        }
        assert_eq!(ten_fold_accuracy(&scores, &same).unwrap(), 1.0);
        assert!(ten_fold_accuracy(&scores[..5], &same[..5]).is_err());
    }

    #[test]
    fn verification_report_counts_and_errors() {
        let e = DenseMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.1],
            vec![1.0, 0.0],
            vec![-1.0, 0.2],
        ])
        .unwrap();
        let pl = pairs_of(&[true, false]);
        let opts = VerificationOptions { fars: vec![1.0], ten_fold: false };
        let r = verification_accuracy(&e, &pl, &opts, Exec::Sequential).unwrap();
        assert_eq!((r.num_pos, r.num_neg), (1, 1));
        assert_eq!(r.accuracy_best_threshold, 1.0);
        assert_eq!(r.pos_distances.len(), 1);
        let only_pos = pairs_of(&[true]);
        assert!(matches!(
            verification_accuracy(&e, &only_pos, &opts, Exec::Sequential),
            Err(Error::InsufficientPairs(_))
        ));
    }

    #[test]
    fn distance_examples() {
        let e = DenseMatrix::from_rows(&[
            vec![0.6, 0.8],
            vec![0.6, 0.8],
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
        ])
        .unwrap();
        let pl = pairs_of(&[true, false]);
        let eu = distance_distribution(&e, &pl, DistanceMetric::Euclidean, Exec::Sequential).unwrap();
        assert_eq!(eu.pos, vec![0.0]);
        assert!((eu.neg[0] - 2.0).abs() < 1e-12);
        let co = distance_distribution(&e, &pl, DistanceMetric::Cosine, Exec::Sequential).unwrap();
        assert!((co.pos[0] - 1.0).abs() < 1e-15);
        assert_eq!(eu.bins.len(), HISTOGRAM_BINS);
        assert_eq!(eu.bins.iter().map(|b| b.pos).sum::<usize>(), 1);
        assert_eq!(eu.bins.iter().map(|b| b.neg).sum::<usize>(), 1);
        assert_eq!(eu.bins[HISTOGRAM_BINS - 1].neg, 1);
        assert!(eu.to_csv().lines().count() == HISTOGRAM_BINS + 1);
        assert!(distance_distribution(&e, &PairList::default(), DistanceMetric::Cosine, Exec::Sequential).is_err());
    }

    #[test]
    fn histogram_conserves_counts() {
        let mut rng = SeededRng::new(3);
        let e = DenseMatrix::from_fn(200, 5, |_, _| rng.normal());
        let flags: Vec<bool> = (0..100).map(|k| k % 3 == 0).collect();
        let pl = pairs_of(&flags);
        let dd = distance_distribution(&e, &pl, DistanceMetric::Euclidean, Exec::Parallel).unwrap();
        assert_eq!(dd.bins.iter().map(|b| b.pos).sum::<usize>(), dd.pos.len());
        assert_eq!(dd.bins.iter().map(|b| b.neg).sum::<usize>(), dd.neg.len());
    }

    #[test]
    fn compactness_examples() {
        let mut rng = SeededRng::new(8);
        let row: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let e = DenseMatrix::from_rows(&[row.clone(), row]).unwrap();
        let pl = PairList { pairs: vec![Pair { a: 0, b: 1, is_same: true }] };
        let r = subfeature_compactness(&e, &pl, 7, 5, 1, Exec::Sequential).unwrap();
        assert!((r.entries[0].min_sub_cosine - 1.0).abs() < 1e-12);
        assert!(subfeature_compactness(&e, &pl, 8, 5, 1, Exec::Sequential).is_err());
        assert!(subfeature_compactness(&e, &pl, 3, 0, 1, Exec::Sequential).is_err());
    }

    #[test]
    fn compactness_min_is_monotone_in_draws() {
        let mut rng = SeededRng::new(21);
        let e = DenseMatrix::from_fn(40, 16, |_, _| rng.normal());
        let flags = vec![true; 20];
        let pl = pairs_of(&flags);
        let few = subfeature_compactness(&e, &pl, 4, 10, 77, Exec::Sequential).unwrap();
        let many = subfeature_compactness(&e, &pl, 4, 100, 77, Exec::Parallel).unwrap();
        // Replay the first ten draws of each stream independently.
        for (a, b) in few.entries.iter().zip(&many.entries) {
            assert!(b.min_sub_cosine <= a.min_sub_cosine);
            let p = pl.pairs[a.pair_index];
            let mut r = SeededRng::new(derive_seed(77, COMPACTNESS_STREAM, a.pair_index as u64));
            let mut m = f64::INFINITY;
            for _ in 0..10 {
                let mask = IndexSet::new(16, r.sample_distinct(16, 4)).unwrap();
                let c = cosine_similarity(&gather(e.row(p.a), &mask).unwrap(), &gather(e.row(p.b), &mask).unwrap()).unwrap();
                m = m.min(c);
            }
            assert_eq!(m, a.min_sub_cosine);
        }
        assert_eq!(few, subfeature_compactness(&e, &pl, 4, 10, 77, Exec::Parallel).unwrap());
    }
}
