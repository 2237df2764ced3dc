//! Exact cosine top-k retrieval over a cached subject index.
//!
//! Distances are `1 - a.s / (|a| |s|)` evaluated in `f64`, with dot products
//! and squared norms accumulated in index order. Ranking is by distance, then
//! by catalog position.

use std::cmp::Ordering;

use crate::dataio::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::model::{forward_eval, transform_rows, ModelParams};
use crate::numerics::DenseMatrix;
use crate::objective::TargetMode;

const DEGENERATE_NORM: f64 = 1e-12;
const MAX_LISTED: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexMode {
    /// Subject rows pass through the transform once at build time.
    Transform,
    Raw,
}

impl From<TargetMode> for IndexMode {
    fn from(t: TargetMode) -> Self {
        match t {
            TargetMode::Both => IndexMode::Transform,
            TargetMode::None => IndexMode::Raw,
        }
    }
}

/// Immutable subject vectors with cached norms.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectIndex {
    codes: Vec<String>,
    vectors: DenseMatrix<f32>,
    norms: Vec<f64>,
    mode: IndexMode,
}

impl SubjectIndex {
    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn vectors(&self) -> &DenseMatrix<f32> {
        &self.vectors
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Cosine distance from `a` (with norm `a_norm`) to every row.
    pub fn distances(&self, a: &[f32], a_norm: f64) -> Vec<f64> {
        (0..self.len())
            .map(|i| 1.0 - dot64(a, self.vectors.row(i)) / (a_norm * self.norms[i]))
            .collect()
    }
}

/// A ranked list of `(code, distance)` pairs for one article.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub article_id: String,
    pub ranked: Vec<(String, f64)>,
}

impl RankingResult {
    pub fn codes(&self) -> Vec<&str> {
        self.ranked.iter().map(|(c, _)| c.as_str()).collect()
    }
}

pub fn dot64(x: &[f32], y: &[f32]) -> f64 {
    x.iter().zip(y).map(|(a, b)| *a as f64 * *b as f64).sum()
}

pub fn norm64(x: &[f32]) -> f64 {
    dot64(x, x).sqrt()
}

fn check_dim(params: &ModelParams<f32>, dim: usize, what: &str) -> Result<()> {
    let d = params.config().d;
    if d != dim {
        return Err(Error::Validation(format!(
            "{what} have dimension {dim}, model expects {d}"
        )));
    }
    Ok(())
}

pub fn build_index(
    subjects: &EmbeddingMatrix,
    params: Option<&ModelParams<f32>>,
    mode: IndexMode,
) -> Result<SubjectIndex> {
    let vectors = match mode {
        IndexMode::Raw => subjects.matrix().clone(),
        IndexMode::Transform => {
            let params = params.ok_or_else(|| Error::contract("transform index needs model parameters"))?;
            check_dim(params, subjects.dim(), "subject embeddings")?;
            transform_rows(params, subjects.matrix())?
        }
    };
    let norms: Vec<f64> = (0..vectors.rows()).map(|i| norm64(vectors.row(i))).collect();
    let bad: Vec<&str> = norms
        .iter()
        .enumerate()
        .filter(|(_, n)| **n < DEGENERATE_NORM)
        .map(|(i, _)| subjects.ids()[i].as_str())
        .collect();
    if !bad.is_empty() {
        let more = bad.len().saturating_sub(MAX_LISTED);
        let suffix = if more > 0 { format!(" (and {more} more)") } else { String::new() };
        return Err(Error::Degenerate(format!(
            "zero-norm subject rows: {}{suffix}",
            bad[..bad.len().min(MAX_LISTED)].join(", ")
        )));
    }
    Ok(SubjectIndex {
        codes: subjects.ids().to_vec(),
        vectors,
        norms,
        mode,
    })
}

fn by_distance_then_index(dist: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |a, b| dist[*a].total_cmp(&dist[*b]).then(a.cmp(b))
}

/// Ranks the index against an already transformed query.
pub fn rank(index: &SubjectIndex, a: &[f32], k: usize) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::contract("k must be >= 1"));
    }
    if a.len() != index.dim() {
        return Err(Error::Validation(format!(
            "query has dimension {}, index has {}",
            a.len(),
            index.dim()
        )));
    }
    let a_norm = norm64(a);
    if !a_norm.is_finite() || a_norm < DEGENERATE_NORM {
        return Err(Error::Degenerate(format!("query norm {a_norm}")));
    }
    let dist = index.distances(a, a_norm);
    let mut order: Vec<usize> = (0..index.len()).collect();
    let cmp = by_distance_then_index(&dist);
    let k = k.min(order.len());
    if k > 0 && k < order.len() {
        order.select_nth_unstable_by(k - 1, &cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(&cmp);
    Ok(order.into_iter().map(|i| (index.codes[i].clone(), dist[i])).collect())
}

/// Transforms `m` (eval mode) when `params` is given and returns the `k`
/// nearest subjects. `article_id` is left empty.
pub fn query_topk(
    index: &SubjectIndex,
    m: &[f32],
    params: Option<&ModelParams<f32>>,
    k: usize,
) -> Result<RankingResult> {
    let ranked = match params {
        Some(p) => {
            check_dim(p, m.len(), "query")?;
            rank(index, &forward_eval(p, m)?, k)?
        }
        None => rank(index, m, k)?,
    };
    Ok(RankingResult {
        article_id: String::new(),
        ranked,
    })
}

/// One result per article row, in input order.
pub fn batch_infer(
    index: &SubjectIndex,
    articles: &EmbeddingMatrix,
    params: Option<&ModelParams<f32>>,
    k: usize,
) -> Result<Vec<RankingResult>> {
    if let Some(p) = params {
        check_dim(p, articles.dim(), "article embeddings")?;
    }
    let mut out = Vec::with_capacity(articles.rows());
    for (i, id) in articles.ids().iter().enumerate() {
        let mut r = query_topk(index, articles.row(i), params, k).map_err(|e| e.context(format!("article '{id}'")))?;
        r.article_id = id.clone();
        out.push(r);
    }
    Ok(out)
}
