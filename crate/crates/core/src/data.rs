//! Synthetic identity clusters, verification pairs, and dataset files.
//!
//! Two on-disk formats are supported:
//!
//! * `csv`: one sample per row, features then the integer label in the
//!   final column, no header. Floats use the shortest round-trip
//!   representation.
//! * `raw-f64`: little-endian header `M, input_dim, C` as `u64`, then
//!   `M·input_dim` row-major `f64`, then `M` labels as `u32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::DenseMatrix;
use crate::rng::{derive_seed, SeededRng};

const CENTER_STREAM: u64 = 0xC3;
const NOISE_STREAM: u64 = 0x4E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.samples_per_class < 2 {
            return Err(Error::config("synthetic data needs at least 2 samples per class"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be positive"));
        }
        Ok(())
    }

    /// Class centers, uniform on the unit sphere of the input space.
    pub fn centers(&self) -> DenseMatrix {
        let mut rng = SeededRng::new(derive_seed(self.seed, CENTER_STREAM, 0));
        let mut centers = DenseMatrix::zeros(self.num_classes, self.input_dim);
        for c in 0..self.num_classes {
            let row = centers.row_mut(c);
            loop {
                row.iter_mut().for_each(|v| *v = rng.normal());
                let n = crate::math::norm(row);
                if n > 1e-12 {
                    row.iter_mut().for_each(|v| *v /= n);
                    break;
                }
            }
        }
        centers
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub samples: DenseMatrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(samples: DenseMatrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.len() != samples.rows() {
            return Err(Error::DimensionMismatch {
                expected: samples.rows(),
                actual: labels.len(),
            });
        }
        let mut seen = vec![false; class_count];
        for &l in &labels {
            if l >= class_count {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: class_count,
                });
            }
            seen[l] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::InsufficientSamples(format!("class {empty} has no samples")));
        }
        Ok(Self {
            samples,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.cols()
    }

    /// Sample indices grouped by class.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }
}

/// Draws `samples_per_class` noisy samples around each class center.
pub fn generate(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let noise = SeededRng::new(derive_seed(spec.seed, NOISE_STREAM, 0));
    sample_around(spec, &spec.centers(), spec.samples_per_class, noise)
}

/// Fresh samples from the same identities as [`generate`], with noise drawn
/// from a stream keyed by `holdout_seed`.
pub fn generate_holdout(spec: &SyntheticSpec, per_class: usize, holdout_seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    if per_class < 2 {
        return Err(Error::config("holdout needs at least 2 samples per class"));
    }
    let noise = SeededRng::new(derive_seed(spec.seed, NOISE_STREAM, holdout_seed.wrapping_add(1)));
    sample_around(spec, &spec.centers(), per_class, noise)
}

fn sample_around(spec: &SyntheticSpec, centers: &DenseMatrix, per_class: usize, mut rng: SeededRng) -> Result<LabeledDataset> {
    let m = spec.num_classes * per_class;
    let mut samples = DenseMatrix::zeros(m, spec.input_dim);
    let mut labels = Vec::with_capacity(m);
    for c in 0..spec.num_classes {
        for s in 0..per_class {
            let row = samples.row_mut(c * per_class + s);
            for (v, &mu) in row.iter_mut().zip(centers.row(c)) {
                *v = mu + spec.noise_sigma * rng.normal();
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(samples, labels, spec.num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub is_same: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairList {
    pub pairs: Vec<Pair>,
}

impl PairList {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> impl Iterator<Item = &Pair> {
        self.pairs.iter().filter(|p| p.is_same)
    }

    pub fn count_positive(&self) -> usize {
        self.positives().count()
    }

    /// Checks indices and that every flag agrees with the labels.
    pub fn validate(&self, dataset: &LabeledDataset) -> Result<()> {
        for (k, p) in self.pairs.iter().enumerate() {
            if p.a >= dataset.len() || p.b >= dataset.len() {
                return Err(Error::config(format!("pair {k} references a missing sample")));
            }
            if (dataset.labels[p.a] == dataset.labels[p.b]) != p.is_same {
                return Err(Error::config(format!("pair {k} flag disagrees with labels")));
            }
        }
        Ok(())
    }
}

/// Uniform random positive pairs followed by uniform random negative pairs.
pub fn make_pairs(dataset: &LabeledDataset, num_pos: usize, num_neg: usize, seed: u64) -> Result<PairList> {
    let groups = dataset.by_class();
    let eligible: Vec<usize> = (0..dataset.len())
        .filter(|&i| groups[dataset.labels[i]].len() >= 2)
        .collect();
    if num_pos > 0 && eligible.is_empty() {
        return Err(Error::InsufficientSamples("no class has two samples".into()));
    }
    if num_neg > 0 && groups.iter().filter(|g| !g.is_empty()).count() < 2 {
        return Err(Error::InsufficientSamples("negative pairs need two classes".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut pairs = Vec::with_capacity(num_pos + num_neg);
    for _ in 0..num_pos {
        let a = eligible[rng.below(eligible.len())];
        let group = &groups[dataset.labels[a]];
        let b = loop {
            let b = group[rng.below(group.len())];
            if b != a {
                break b;
            }
        };
        pairs.push(Pair { a, b, is_same: true });
    }
    for _ in 0..num_neg {
        let a = rng.below(dataset.len());
        let b = loop {
            let b = rng.below(dataset.len());
            if dataset.labels[b] != dataset.labels[a] {
                break b;
            }
        };
        pairs.push(Pair { a, b, is_same: false });
    }
    Ok(PairList { pairs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Csv,
    #[default]
    RawF64,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "raw-f64" | "raw" => Ok(DataFormat::RawF64),
            other => Err(Error::config(format!("unknown data format `{other}`"))),
        }
    }
}

impl std::fmt::Display for DataFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataFormat::Csv => "csv",
            DataFormat::RawF64 => "raw-f64",
        })
    }
}

pub fn save_dataset(dataset: &LabeledDataset, path: &Path, format: DataFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    match format {
        DataFormat::Csv => {
            let mut line = String::new();
            for i in 0..dataset.len() {
                line.clear();
                for v in dataset.samples.row(i) {
                    line.push_str(&v.to_string());
                    line.push(',');
                }
                line.push_str(&dataset.labels[i].to_string());
                line.push('\n');
                w.write_all(line.as_bytes()).map_err(io)?;
            }
        }
        DataFormat::RawF64 => {
            for h in [dataset.len(), dataset.input_dim(), dataset.class_count] {
                w.write_all(&(h as u64).to_le_bytes()).map_err(io)?;
            }
            for v in dataset.samples.as_slice() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
            for &l in &dataset.labels {
                let l = u32::try_from(l).map_err(|_| Error::config("label exceeds u32"))?;
                w.write_all(&l.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<LabeledDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        DataFormat::Csv => parse_csv(BufReader::new(file), path),
        DataFormat::RawF64 => {
            let mut bytes = Vec::new();
            BufReader::new(file)
                .read_to_end(&mut bytes)
                .map_err(|e| Error::io(path, e))?;
            parse_raw(&bytes)
        }
    }
}

fn parse_err(location: String, message: impl Into<String>) -> Error {
    Error::Parse {
        location,
        message: message.into(),
    }
}

fn parse_csv(reader: impl Read, path: &Path) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 1;
        let loc = || format!("{}:{line}", path.display());
        let rec = rec.map_err(|e| {
            let at = e.position().map_or(line as u64, |p| p.line());
            parse_err(format!("{}:{at}", path.display()), e.to_string())
        })?;
        if rec.len() < 2 {
            return Err(parse_err(loc(), "need at least one feature and a label"));
        }
        let dim = rec.len() - 1;
        if *width.get_or_insert(dim) != dim {
            return Err(parse_err(loc(), format!("expected {} features, found {dim}", width.unwrap())));
        }
        for (col, cell) in rec.iter().take(dim).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(loc(), format!("column {}: `{cell}` is not a number", col + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(loc(), format!("column {}: non-finite value", col + 1)));
            }
            values.push(v);
        }
        let cell = &rec[dim];
        let label: usize = cell
            .parse()
            .map_err(|_| parse_err(loc(), format!("label `{cell}` is not a class id")))?;
        labels.push(label);
    }
    let Some(dim) = width else {
        return Err(parse_err(format!("{}:1", path.display()), "empty dataset"));
    };
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let samples = DenseMatrix::from_vec(labels.len(), dim, values)?;
    LabeledDataset::new(samples, labels, classes)
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> ByteCursor<'a> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        if self.bytes.len() - self.off < N {
            return Err(parse_err(
                format!("byte {}", self.off),
                format!("truncated while reading {what}"),
            ));
        }
        let out = self.bytes[self.off..self.off + N].try_into().unwrap();
        self.off += N;
        Ok(out)
    }
}

fn parse_raw(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut cur = ByteCursor { bytes, off: 0 };
    let mut header = [0usize; 3];
    for (h, name) in header.iter_mut().zip(["sample count", "input dim", "class count"]) {
        let v = u64::from_le_bytes(cur.take(name)?);
        *h = usize::try_from(v).map_err(|_| parse_err("header".into(), format!("{name} too large")))?;
    }
    let [m, dim, classes] = header;
    if m == 0 || dim == 0 {
        return Err(parse_err("header".into(), "empty dataset"));
    }
    let count = m
        .checked_mul(dim)
        .filter(|c| c.checked_mul(8).is_some_and(|b| b <= bytes.len()))
        .ok_or_else(|| parse_err("header".into(), format!("{m}x{dim} samples exceed the file size")))?;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let start = cur.off;
        let v = f64::from_le_bytes(cur.take("samples")?);
        if !v.is_finite() {
            return Err(parse_err(format!("byte {start}"), "non-finite sample value"));
        }
        values.push(v);
    }
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        labels.push(u32::from_le_bytes(cur.take("labels")?) as usize);
    }
    if cur.off != bytes.len() {
        return Err(parse_err(format!("byte {}", cur.off), "trailing bytes after labels"));
    }
    let samples = DenseMatrix::from_vec(m, dim, values)?;
    LabeledDataset::new(samples, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::cosine_similarity;

    fn spec(c: usize, per: usize, dim: usize, sigma: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: c,
            samples_per_class: per,
            input_dim: dim,
            noise_sigma: sigma,
            seed: 99,
        }
    }

    #[test]
    fn tiny_noise_collapses_classes() {
        let ds = generate(&spec(4, 5, 8, 1e-8)).unwrap();
        for group in ds.by_class() {
            for &a in &group {
                for &b in &group {
                    let c = cosine_similarity(ds.samples.row(a), ds.samples.row(b)).unwrap();
                    assert!(c > 1.0 - 1e-6);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(3, 4, 6, 0.2);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let h = generate_holdout(&s, 3, 1).unwrap();
        assert_ne!(h.samples.row(0), generate(&s).unwrap().samples.row(0));
    }

    #[test]
    fn nearest_center_classification_is_near_perfect() {
        let s = spec(10, 100, 32, 0.1);
        let ds = generate(&s).unwrap();
        let centers = s.centers();
        let mut correct = 0;
        for i in 0..ds.len() {
            let best = (0..10)
                .max_by(|&a, &b| {
                    let ca = cosine_similarity(ds.samples.row(i), centers.row(a)).unwrap();
                    let cb = cosine_similarity(ds.samples.row(i), centers.row(b)).unwrap();
                    ca.total_cmp(&cb)
                })
                .unwrap();
            correct += usize::from(best == ds.labels[i]);
        }
        assert!(correct as f64 / ds.len() as f64 >= 0.99, "{correct}");
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&spec(1, 5, 8, 0.1)).is_err());
        assert!(generate(&spec(3, 1, 8, 0.1)).is_err());
        assert!(generate(&spec(3, 5, 8, 0.0)).is_err());
    }

    #[test]
    fn pairs() {
        let ds = generate(&spec(5, 10, 4, 0.1)).unwrap();
        let neg_only = make_pairs(&ds, 0, 50, 1).unwrap();
        assert!(neg_only.pairs.iter().all(|p| !p.is_same));
        let pl = make_pairs(&ds, 3000, 3000, 2).unwrap();
        assert_eq!(pl.len(), 6000);
        assert_eq!(pl.count_positive(), 3000);
        pl.validate(&ds).unwrap();
        assert!(pl.pairs.iter().all(|p| p.a != p.b));
        assert_eq!(pl, make_pairs(&ds, 3000, 3000, 2).unwrap());
    }

    #[test]
    fn insufficient_samples_for_pairs() {
        let samples = DenseMatrix::from_fn(3, 2, |i, j| (i + j) as f64);
        let ds = LabeledDataset::new(samples, vec![0, 1, 2], 3).unwrap();
        assert!(matches!(make_pairs(&ds, 1, 0, 0), Err(Error::InsufficientSamples(_))));
        assert!(make_pairs(&ds, 0, 4, 0).is_ok());
    }

    #[test]
    fn raw_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&spec(3, 4, 5, 0.3)).unwrap();
        let p = dir.path().join("d.bin");
        save_dataset(&ds, &p, DataFormat::RawF64).unwrap();
        assert_eq!(load_dataset(&p, DataFormat::RawF64).unwrap(), ds);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 24 + 12 * 5 * 8 + 12 * 4);
        assert_eq!(&bytes[0..8], &12u64.to_le_bytes());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&spec(3, 4, 5, 0.3)).unwrap();
        let p = dir.path().join("d.csv");
        save_dataset(&ds, &p, DataFormat::Csv).unwrap();
        let back = load_dataset(&p, DataFormat::Csv).unwrap();
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.samples.as_slice().iter().zip(ds.samples.as_slice()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "1.0,2.0,0\n1.0,abc,1\n").unwrap();
        match load_dataset(&p, DataFormat::Csv) {
            Err(Error::Parse { location, message }) => {
                assert!(location.ends_with(":2"), "{location}");
                assert!(message.contains("abc"));
            }
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "").unwrap();
        assert!(matches!(load_dataset(&p, DataFormat::Csv), Err(Error::Parse { .. })));
        let raw = dir.path().join("empty.bin");
        std::fs::write(&raw, []).unwrap();
        assert!(matches!(load_dataset(&raw, DataFormat::RawF64), Err(Error::Parse { .. })));
    }

    #[test]
    fn raw_label_out_of_range() {
        let mut bytes = Vec::new();
        for h in [1u64, 1, 2] {
            bytes.extend(h.to_le_bytes());
        }
        bytes.extend(1.5f64.to_le_bytes());
        bytes.extend(7u32.to_le_bytes());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_dataset(&p, DataFormat::RawF64),
            Err(Error::LabelOutOfRange { label: 7, classes: 2 })
        ));
        std::fs::write(&p, &bytes[..30]).unwrap();
        match load_dataset(&p, DataFormat::RawF64) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "byte 24"),
            other => panic!("{other:?}"),
        }
    }
}
