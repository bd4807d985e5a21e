//! Exhaustive cosine top-k search and the translated-vs-true query comparison.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PairDataset, ReviewRecord};
use crate::exec::Exec;
use crate::numerics::{dot, norm, NORM_EPS};

/// Store entries scored per task.
const SCORE_BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("vector for id {0} has zero norm")]
    ZeroNorm(u64),
    #[error("query has zero norm")]
    ZeroNormQuery,
    #[error("dimension mismatch: store has {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("store is empty")]
    Empty,
    #[error("k must be at least 1")]
    ZeroK,
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

/// Unit-normalized vectors indexed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    ids: Vec<u64>,
    vectors: Vec<f64>,
    index: HashMap<u64, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub k: usize,
    pub hits: Vec<Hit>,
}

impl SearchResult {
    pub fn ids(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.id).collect()
    }
}

/// Score descending, then id ascending.
pub fn rank_order(a: &Hit, b: &Hit) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

impl VectorStore {
    pub fn build<S: crate::numerics::Scalar>(entries: &[(u64, &[S])]) -> Result<Self> {
        let dim = entries.first().ok_or(RetrievalError::Empty)?.1.len();
        if dim == 0 {
            return Err(RetrievalError::DimensionMismatch { expected: 1, got: 0 });
        }
        let mut store =
            Self { dim, ids: Vec::new(), vectors: Vec::with_capacity(entries.len() * dim), index: HashMap::new() };
        for &(id, v) in entries {
            if v.len() != dim {
                return Err(RetrievalError::DimensionMismatch { expected: dim, got: v.len() });
            }
            let n = norm(v);
            if !(n >= NORM_EPS && n.is_finite()) {
                return Err(RetrievalError::ZeroNorm(id));
            }
            if store.index.insert(id, store.ids.len()).is_some() {
                return Err(RetrievalError::DuplicateId(id));
            }
            store.ids.push(id);
            store.vectors.extend(v.iter().map(|x| x.to_f64() / n));
        }
        Ok(store)
    }

    /// Store over the target side of `pairs`, optionally restricted to `ids`.
    pub fn from_targets(pairs: &PairDataset, ids: Option<&[u64]>) -> std::result::Result<Self, crate::data::DataError> {
        let pos: Vec<usize> = match ids {
            Some(ids) => ids
                .iter()
                .map(|&id| pairs.position(id).ok_or(crate::data::DataError::UnknownId(id)))
                .collect::<std::result::Result<_, _>>()?,
            None => (0..pairs.len()).collect(),
        };
        let entries: Vec<(u64, &[f32])> = pos.iter().map(|&i| (pairs.ids()[i], pairs.target(i))).collect();
        Self::build(&entries).map_err(|e| crate::data::DataError::BadDimension(e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vector(&self, id: u64) -> Option<&[f64]> {
        self.index.get(&id).map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    fn normalized_query<S: crate::numerics::Scalar>(&self, query: &[S]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch { expected: self.dim, got: query.len() });
        }
        let n = norm(query);
        if !(n >= NORM_EPS && n.is_finite()) {
            return Err(RetrievalError::ZeroNormQuery);
        }
        Ok(query.iter().map(|x| x.to_f64() / n).collect())
    }

    pub fn top_k<S: crate::numerics::Scalar>(&self, query: &[S], k: usize) -> Result<SearchResult> {
        self.top_k_with(query, k, Exec::default())
    }

    pub fn top_k_with<S: crate::numerics::Scalar>(&self, query: &[S], k: usize, exec: Exec) -> Result<SearchResult> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let q = self.normalized_query(query)?;
        let mut scores = vec![0.0; self.len()];
        exec.for_each_chunk(&mut scores, SCORE_BLOCK, |blk, out| {
            for (j, s) in out.iter_mut().enumerate() {
                let i = blk * SCORE_BLOCK + j;
                *s = dot(&self.vectors[i * self.dim..(i + 1) * self.dim], &q).clamp(-1.0, 1.0);
            }
        });
        let mut hits: Vec<Hit> = self.ids.iter().zip(&scores).map(|(&id, &score)| Hit { id, score }).collect();
        let take = k.min(hits.len());
        if take < hits.len() {
            hits.select_nth_unstable_by(take - 1, rank_order);
            hits.truncate(take);
        }
        hits.sort_unstable_by(rank_order);
        Ok(SearchResult { k, hits })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    pub id: u64,
    /// 1-based ranks.
    pub rank_translated: usize,
    pub rank_true: usize,
    /// `rank_translated - rank_true`
    pub displacement: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplayText {
    pub title: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub k: usize,
    pub translated: Vec<Hit>,
    pub truth: Vec<Hit>,
    pub overlap: f64,
    pub shared: Vec<Displacement>,
    /// Title/content per id, when a corpus was joined.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub display: BTreeMap<u64, DisplayText>,
}

/// `|a ∩ b| / k`
pub fn overlap_at_k(a: &[u64], b: &[u64], k: usize) -> f64 {
    let shared = a.iter().filter(|id| b.contains(id)).count();
    shared as f64 / k as f64
}

pub fn compare_retrieval<S: crate::numerics::Scalar, T: crate::numerics::Scalar>(
    store: &VectorStore,
    q_translated: &[S],
    q_true: &[T],
    k: usize,
) -> Result<ComparisonReport> {
    let a = store.top_k(q_translated, k)?;
    let b = store.top_k(q_true, k)?;
    let (ia, ib) = (a.ids(), b.ids());
    let shared = ia
        .iter()
        .enumerate()
        .filter_map(|(ra, id)| {
            ib.iter().position(|x| x == id).map(|rb| Displacement {
                id: *id,
                rank_translated: ra + 1,
                rank_true: rb + 1,
                displacement: ra as i64 - rb as i64,
            })
        })
        .collect();
    Ok(ComparisonReport {
        k,
        overlap: overlap_at_k(&ia, &ib, k),
        translated: a.hits,
        truth: b.hits,
        shared,
        display: BTreeMap::new(),
    })
}

impl ComparisonReport {
    pub fn join_corpus(&mut self, records: &[ReviewRecord]) {
        let by_id: HashMap<u64, &ReviewRecord> = records.iter().map(|r| (r.id, r)).collect();
        for h in self.translated.iter().chain(&self.truth) {
            if let Some(r) = by_id.get(&h.id) {
                self.display.insert(h.id, DisplayText { title: r.summary.clone(), content: r.body.clone() });
            }
        }
    }

    /// Two aligned columns, translated query on the left, one row per rank.
    pub fn to_text(&self, col_width: usize) -> String {
        let col_width = col_width.max(24);
        let cell = |h: Option<&Hit>| -> Vec<String> {
            let Some(h) = h else { return vec![String::new()] };
            let mut lines = vec![format!("id {}  score {:.4}", h.id, h.score)];
            if let Some(d) = self.display.get(&h.id) {
                lines.extend(wrap(&format!("Title: {}", d.title), col_width));
                lines.extend(wrap(&format!("Content: {}", d.content), col_width));
            }
            lines
        };
        let mut s = String::new();
        let rule = "-".repeat(col_width);
        writeln!(s, "{:<6} {:<w$} | true query", "rank", "translated query", w = col_width).unwrap();
        writeln!(s, "{:<6} {} | {}", "------", rule, rule).unwrap();
        let rows = self.translated.len().max(self.truth.len());
        for r in 0..rows {
            let left = cell(self.translated.get(r));
            let right = cell(self.truth.get(r));
            for line in 0..left.len().max(right.len()) {
                let label = if line == 0 { format!("{}", r + 1) } else { String::new() };
                let l = left.get(line).map_or("", |x| x.as_str());
                let rt = right.get(line).map_or("", |x| x.as_str());
                writeln!(s, "{:<6} {:<w$} | {}", label, l, rt, w = col_width).unwrap();
            }
        }
        writeln!(s, "overlap@{}: {:.3}", self.k, self.overlap).unwrap();
        for d in &self.shared {
            writeln!(
                s,
                "  id {}: rank {} (translated) vs {} (true), displacement {:+}",
                d.id, d.rank_translated, d.rank_true, d.displacement
            )
            .unwrap();
        }
        s
    }
}

fn wrap(text: &str, width: usize) -> Vec<String> {
    let mut lines = Vec::new();
    let mut cur = String::new();
    for word in text.split_whitespace() {
        let word: String = word.chars().take(width).collect();
        if !cur.is_empty() && cur.chars().count() + 1 + word.chars().count() > width {
            lines.push(std::mem::take(&mut cur));
        }
        if !cur.is_empty() {
            cur.push(' ');
        }
        cur.push_str(&word);
    }
    if !cur.is_empty() {
        lines.push(cur);
    }
    lines
}
