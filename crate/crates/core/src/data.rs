//! Review corpus ingestion, paired-embedding datasets and splits.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{self, FormatError, Reader, Writer};
use crate::nn::{Layer, LayerSpec, MlpModel};
use crate::numerics::{dot, mean_vector, norm, EmbeddingVector, Matrix, NumericsError};
use crate::rng::{self, Purpose};

pub const PAIR_MAGIC: &[u8; 4] = b"V2VP";
pub const PAIR_VERSION: u32 = 1;
const PAIR_HEADER_BYTES: u64 = 4 + 4 + 8 + 4 + 4;

pub const DEFAULT_MAX_TOKENS: usize = 8000;
pub const DEFAULT_CHUNK_WORDS: usize = 128;
pub const DEFAULT_TEST_FRAC: f64 = 0.2;
pub const DEFAULT_VAL_FRAC: f64 = 0.2;

pub const CORPUS_COLUMNS: [&str; 6] = ["Id", "ProductId", "UserId", "Score", "Summary", "Text"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corpus header is missing column(s): {0:?}")]
    HeaderMismatch(Vec<String>),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("requested {requested} records but only {available} are available")]
    NotEnoughRecords { requested: usize, available: usize },
    #[error("fraction {0} is outside [0, 1)")]
    BadFraction(f64),
    #[error("bad dimension: {0}")]
    BadDimension(String),
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("unknown id {0}")]
    UnknownId(u64),
    #[error("non-finite value in record {0}")]
    NonFinite(u64),
    #[error("split file line {line}: {message}")]
    SplitSyntax { line: usize, message: String },
    #[error("split leaves the training set empty")]
    EmptyTrain,
}

pub type Result<T> = std::result::Result<T, DataError>;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::FileNotFound(path.to_path_buf()),
        _ => DataError::Io { path: path.to_path_buf(), source: e },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub id: u64,
    pub product_id: String,
    pub user_id: String,
    pub score: u8,
    pub summary: String,
    pub body: String,
}

impl ReviewRecord {
    /// Text handed to the embedding models: `"<summary>: <body>"`.
    pub fn embedding_text(&self) -> String {
        if self.summary.trim().is_empty() {
            self.body.clone()
        } else {
            format!("{}: {}", self.summary, self.body)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowDiagnostic {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub records: Vec<ReviewRecord>,
    pub diagnostics: Vec<RowDiagnostic>,
}

pub fn parse_corpus(path: &Path) -> Result<Corpus> {
    let bytes = read_file(path)?;
    parse_corpus_bytes(&bytes)
}

/// Columns are bound by header name; malformed rows are skipped and reported.
pub fn parse_corpus_bytes(bytes: &[u8]) -> Result<Corpus> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(bytes);
    let headers = rdr.headers()?.clone();
    let mut cols = [0usize; 6];
    let mut missing = Vec::new();
    for (slot, name) in cols.iter_mut().zip(CORPUS_COLUMNS) {
        match headers.iter().position(|h| h.trim() == name) {
            Some(i) => *slot = i,
            None => missing.push(name.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(DataError::HeaderMismatch(missing));
    }
    let [c_id, c_product, c_user, c_score, c_summary, c_text] = cols;

    let mut corpus = Corpus::default();
    let mut seen = HashSet::new();
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                corpus.diagnostics.push(RowDiagnostic { line, message: e.to_string() });
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i);
        let mut reject = |message: String| corpus.diagnostics.push(RowDiagnostic { line, message });
        let (Some(id), Some(product), Some(user), Some(score), Some(summary), Some(body)) =
            (field(c_id), field(c_product), field(c_user), field(c_score), field(c_summary), field(c_text))
        else {
            reject(format!("expected at least {} fields, found {}", headers.len(), row.len()));
            continue;
        };
        let Ok(id) = id.trim().parse::<u64>() else {
            reject(format!("invalid Id {id:?}"));
            continue;
        };
        let score = match score.trim().parse::<u8>() {
            Ok(s @ 1..=5) => s,
            _ => {
                reject(format!("Score {score:?} is not an integer in 1..=5"));
                continue;
            }
        };
        if body.trim().is_empty() {
            reject(format!("record {id} has an empty Text"));
            continue;
        }
        if !seen.insert(id) {
            reject(format!("duplicate Id {id}"));
            continue;
        }
        corpus.records.push(ReviewRecord {
            id,
            product_id: product.to_string(),
            user_id: user.to_string(),
            score,
            summary: summary.to_string(),
            body: body.to_string(),
        });
    }
    Ok(corpus)
}

pub fn write_corpus_csv(records: &[ReviewRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CORPUS_COLUMNS)?;
    for r in records {
        w.write_record([
            r.id.to_string().as_str(),
            &r.product_id,
            &r.user_id,
            r.score.to_string().as_str(),
            &r.summary,
            &r.body,
        ])?;
    }
    w.into_inner().map_err(|e| DataError::Io { path: PathBuf::from("<memory>"), source: e.into_error() })
}

/// `ceil(words * 4 / 3)`, words being maximal non-whitespace runs.
pub fn approx_token_count(text: &str) -> usize {
    let words = text.split_whitespace().count();
    (words * 4).div_ceil(3)
}

pub fn filter_by_length(records: Vec<ReviewRecord>, max_tokens: usize) -> Vec<ReviewRecord> {
    records.into_iter().filter(|r| approx_token_count(&r.body) <= max_tokens).collect()
}

/// Uniform sample without replacement, returned in ascending id order.
pub fn sample_subset(records: &[ReviewRecord], n: usize, seed: u64) -> Result<Vec<ReviewRecord>> {
    if n > records.len() {
        return Err(DataError::NotEnoughRecords { requested: n, available: records.len() });
    }
    let mut sorted: Vec<&ReviewRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.id);
    let mut r = rng::stream(seed, Purpose::Sample, 0);
    let mut picked: Vec<ReviewRecord> =
        index::sample(&mut r, sorted.len(), n).into_iter().map(|i| sorted[i].clone()).collect();
    picked.sort_by_key(|r| r.id);
    Ok(picked)
}

/// Greedy split into runs of `chunk_words` whitespace-delimited words.
pub fn chunk_text(text: &str, chunk_words: usize) -> Vec<String> {
    assert!(chunk_words >= 1, "chunk_words must be positive");
    let words: Vec<&str> = text.split_whitespace().collect();
    words.chunks(chunk_words).map(|c| c.join(" ")).collect()
}

pub fn average_chunk_embeddings(chunks: &[EmbeddingVector]) -> Result<EmbeddingVector> {
    Ok(mean_vector(chunks)?)
}

/// Aligned `(id, source, target)` records with `f32` payloads.
///
/// Either side may have dimension zero; a dataset with `d_in = 0` is how a
/// plain set of target-space vectors is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    d_in: usize,
    d_out: usize,
    ids: Vec<u64>,
    sources: Vec<f32>,
    targets: Vec<f32>,
    index: HashMap<u64, usize>,
}

impl PairDataset {
    pub fn new(d_in: usize, d_out: usize) -> Self {
        Self { d_in, d_out, ids: Vec::new(), sources: Vec::new(), targets: Vec::new(), index: HashMap::new() }
    }

    pub fn push(&mut self, id: u64, source: &[f32], target: &[f32]) -> Result<()> {
        if source.len() != self.d_in || target.len() != self.d_out {
            return Err(DataError::BadDimension(format!(
                "record {id} has dims ({}, {}), dataset is ({}, {})",
                source.len(),
                target.len(),
                self.d_in,
                self.d_out
            )));
        }
        if source.iter().chain(target).any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(id));
        }
        if self.index.insert(id, self.ids.len()).is_some() {
            return Err(DataError::DuplicateId(id));
        }
        self.ids.push(id);
        self.sources.extend_from_slice(source);
        self.targets.extend_from_slice(target);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn source(&self, i: usize) -> &[f32] {
        &self.sources[i * self.d_in..(i + 1) * self.d_in]
    }

    pub fn target(&self, i: usize) -> &[f32] {
        &self.targets[i * self.d_out..(i + 1) * self.d_out]
    }

    pub fn source_vector(&self, i: usize) -> Result<EmbeddingVector> {
        Ok(EmbeddingVector::from_scalars(self.source(i))?)
    }

    pub fn target_vector(&self, i: usize) -> Result<EmbeddingVector> {
        Ok(EmbeddingVector::from_scalars(self.target(i))?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let rec = 8 + 4 * (self.d_in + self.d_out);
        let mut w = Writer::with_capacity(PAIR_HEADER_BYTES as usize + self.len() * rec + 8);
        w.bytes(PAIR_MAGIC);
        w.u32(PAIR_VERSION);
        w.u64(self.len() as u64);
        w.u32(self.d_in as u32);
        w.u32(self.d_out as u32);
        for i in 0..self.len() {
            w.u64(self.ids[i]);
            w.f32s(self.source(i));
            w.f32s(self.target(i));
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        format::check_magic(bytes, PAIR_MAGIC)?;
        let mut r = Reader::new(bytes);
        r.take(4)?;
        let version = r.u32()?;
        if version != PAIR_VERSION {
            return Err(FormatError::VersionUnsupported(version).into());
        }
        let n = r.u64()?;
        let d_in = r.u32()? as usize;
        let d_out = r.u32()? as usize;
        let rec = 8 + 4 * (d_in as u64 + d_out as u64);
        let expected = n
            .checked_mul(rec)
            .and_then(|b| b.checked_add(PAIR_HEADER_BYTES + 8))
            .ok_or_else(|| FormatError::Malformed(format!("record count {n} overflows")))?;
        format::check_length(bytes, expected)?;
        let body = format::verify_trailer(bytes)?;
        let mut r = Reader::new(body);
        r.take(PAIR_HEADER_BYTES as usize)?;
        let mut ds = Self::new(d_in, d_out);
        let (mut s, mut t) = (Vec::with_capacity(d_in), Vec::with_capacity(d_out));
        for _ in 0..n {
            let id = r.u64()?;
            s.clear();
            t.clear();
            r.f32s_into(&mut s, d_in)?;
            r.f32s_into(&mut t, d_out)?;
            ds.push(id, &s, &t)?;
        }
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Keeps only the target side.
    pub fn targets_only(&self) -> Self {
        let mut out = Self::new(0, self.d_out);
        for i in 0..self.len() {
            out.push(self.ids[i], &[], self.target(i)).expect("valid by construction");
        }
        out
    }

    pub fn subset(&self, ids: &[u64]) -> Result<Self> {
        let mut out = Self::new(self.d_in, self.d_out);
        for &id in ids {
            let i = self.position(id).ok_or(DataError::UnknownId(id))?;
            out.push(id, self.source(i), self.target(i))?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub seed: u64,
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    pub test: Vec<u64>,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

fn check_fraction(f: f64) -> Result<()> {
    if (0.0..1.0).contains(&f) {
        Ok(())
    } else {
        Err(DataError::BadFraction(f))
    }
}

/// Test ids first, then validation from the remainder; the rest trains.
pub fn split_dataset(ds: &PairDataset, test_frac: f64, val_frac: f64, seed: u64) -> Result<SplitIndices> {
    split_ids(ds.ids(), test_frac, val_frac, seed)
}

pub fn split_ids(ids: &[u64], test_frac: f64, val_frac: f64, seed: u64) -> Result<SplitIndices> {
    check_fraction(test_frac)?;
    check_fraction(val_frac)?;
    let n = ids.len();
    let mut order = ids.to_vec();
    order.sort_unstable();
    order.dedup();
    if order.len() != n {
        return Err(DataError::BadDimension("split input has duplicate ids".into()));
    }
    order.shuffle(&mut rng::stream(seed, Purpose::Split, 0));
    let n_test = round_half_up(test_frac * n as f64).min(n);
    let rest = n - n_test;
    let n_val = round_half_up(val_frac * rest as f64).min(rest);
    if n > 0 && rest - n_val == 0 {
        return Err(DataError::EmptyTrain);
    }
    let mut test = order[..n_test].to_vec();
    let mut validation = order[n_test..n_test + n_val].to_vec();
    let mut train = order[n_test + n_val..].to_vec();
    test.sort_unstable();
    validation.sort_unstable();
    train.sort_unstable();
    Ok(SplitIndices { seed, train, validation, test })
}

impl SplitIndices {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "seed: {}", self.seed).unwrap();
        for (name, ids) in [("train", &self.train), ("validation", &self.validation), ("test", &self.test)] {
            writeln!(s, "{name}:").unwrap();
            for id in ids {
                writeln!(s, "{id}").unwrap();
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, message: &str| DataError::SplitSyntax { line, message: message.to_string() };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let (ln, first) = lines.next().ok_or_else(|| err(1, "empty split file"))?;
        let seed = first
            .strip_prefix("seed:")
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| err(ln, "expected `seed: <u64>`"))?;
        let mut sections: [Option<Vec<u64>>; 3] = [None, None, None];
        let mut current: Option<usize> = None;
        for (ln, line) in lines {
            let header = match line {
                "train:" => Some(0),
                "validation:" => Some(1),
                "test:" => Some(2),
                _ => None,
            };
            if let Some(h) = header {
                if sections[h].is_some() {
                    return Err(err(ln, "section repeated"));
                }
                if current.map_or(h != 0, |c| h != c + 1) {
                    return Err(err(ln, "sections must appear as train, validation, test"));
                }
                sections[h] = Some(Vec::new());
                current = Some(h);
                continue;
            }
            let c = current.ok_or_else(|| err(ln, "id before any section header"))?;
            let id = line.parse::<u64>().map_err(|_| err(ln, "expected an unsigned id"))?;
            sections[c].as_mut().unwrap().push(id);
        }
        let [Some(train), Some(validation), Some(test)] = sections else {
            return Err(err(text.lines().count(), "missing section"));
        };
        let split = SplitIndices { seed, train, validation, test };
        let mut seen = HashSet::new();
        for id in split.all_ids() {
            if !seen.insert(id) {
                return Err(DataError::DuplicateId(id));
            }
        }
        Ok(split)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| err_utf8(path))?;
        Self::parse(&text)
    }

    pub fn all_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.train.iter().chain(&self.validation).chain(&self.test).copied()
    }

    /// Every id must exist in `ds`.
    pub fn check_against(&self, ds: &PairDataset) -> Result<()> {
        match self.all_ids().find(|id| ds.position(*id).is_none()) {
            Some(id) => Err(DataError::UnknownId(id)),
            None => Ok(()),
        }
    }
}

fn err_utf8(path: &Path) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, "split file is not UTF-8"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapKind {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "linear+tanh")]
    LinearTanh,
}

impl std::str::FromStr for MapKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(MapKind::Linear),
            "linear+tanh" => Ok(MapKind::LinearTanh),
            other => Err(format!("unknown map kind {other:?} (expected linear or linear+tanh)")),
        }
    }
}

impl std::fmt::Display for MapKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MapKind::Linear => "linear",
            MapKind::LinearTanh => "linear+tanh",
        })
    }
}

/// The seed-derived map that generated a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMap {
    pub kind: MapKind,
    pub matrix: Matrix,
}

impl GroundTruthMap {
    pub fn apply(&self, source: &[f32]) -> Vec<f64> {
        (0..self.matrix.rows())
            .map(|o| {
                let z = dot(self.matrix.row(o), source);
                match self.kind {
                    MapKind::Linear => z,
                    MapKind::LinearTanh => z.tanh(),
                }
            })
            .collect()
    }

    /// The linear map as a one-layer model; `None` for the tanh variant.
    pub fn to_model(&self) -> Option<MlpModel> {
        if self.kind != MapKind::Linear {
            return None;
        }
        let spec = LayerSpec::output(self.matrix.cols(), self.matrix.rows());
        let layer = Layer::new(spec, self.matrix.clone(), vec![0.0; spec.out_dim]).ok()?;
        MlpModel::from_layers(vec![layer]).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub map_kind: MapKind,
}

/// Unit-norm gaussian sources mapped through a fixed random matrix with
/// entries `N(0, 1/d_in)`, optional `tanh`, plus gaussian noise. Record ids
/// are `0..n`.
pub fn generate_synthetic_pairs(spec: &SyntheticSpec) -> Result<(PairDataset, GroundTruthMap)> {
    let SyntheticSpec { n, d_in, d_out, seed, noise_sigma, map_kind } = *spec;
    if n == 0 || d_in == 0 || d_out == 0 {
        return Err(DataError::BadDimension(format!("n={n}, d_in={d_in}, d_out={d_out} must all be positive")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(DataError::BadDimension(format!("noise sigma {noise_sigma} must be finite and non-negative")));
    }
    let scale = 1.0 / (d_in as f64).sqrt();
    let mut rm = rng::stream(seed, Purpose::SyntheticMap, 0);
    let entries = (0..d_in * d_out).map(|_| (rm.sample::<f64, _>(StandardNormal) * scale) as f32).collect();
    let map = GroundTruthMap { kind: map_kind, matrix: Matrix::new(d_out, d_in, entries)? };

    let mut rs = rng::stream(seed, Purpose::SyntheticSource, 0);
    let mut rn = rng::stream(seed, Purpose::SyntheticNoise, 0);
    let mut ds = PairDataset::new(d_in, d_out);
    let mut raw = vec![0.0f64; d_in];
    for id in 0..n as u64 {
        let source = loop {
            raw.iter_mut().for_each(|v| *v = rs.sample(StandardNormal));
            let nr = norm(&raw);
            if nr > 1e-6 {
                break raw.iter().map(|v| (v / nr) as f32).collect::<Vec<f32>>();
            }
        };
        let mut target = map.apply(&source);
        if noise_sigma > 0.0 {
            target.iter_mut().for_each(|t| *t += noise_sigma * rn.sample::<f64, _>(StandardNormal));
        }
        let target: Vec<f32> = target.iter().map(|&v| v as f32).collect();
        ds.push(id, &source, &target)?;
    }
    Ok((ds, map))
}
