//! Cosine-distance margin objective and negative sampling.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, RngState};

/// Whether positives and negatives pass through the transform during
/// training (and, consistently, whether the subject index is transformed).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// Raw subject vectors; only anchors are transformed.
    None,
    #[default]
    Both,
}

impl std::str::FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TargetMode::None),
            "both" => Ok(TargetMode::Both),
            other => Err(Error::config(format!("unknown transform_targets '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossHyper {
    pub margin: f64,
    pub negatives: usize,
    pub transform_targets: TargetMode,
}

impl Default for LossHyper {
    fn default() -> Self {
        LossHyper {
            margin: 0.2,
            negatives: 15,
            transform_targets: TargetMode::Both,
        }
    }
}

impl LossHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::config(format!("margin {} must be >= 0", self.margin)));
        }
        if self.negatives == 0 {
            return Err(Error::config("negatives must be >= 1"));
        }
        Ok(())
    }
}

/// One article with its gold subjects and their averaged base embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub article_row: usize,
    /// Subject-matrix rows of the gold codes, parallel to `gold_codes`.
    pub gold_rows: Vec<usize>,
    pub gold_codes: Vec<String>,
    pub positive: Vec<f32>,
}

fn norm<T: Real>(x: &[T]) -> T {
    x.iter().map(|v| *v * *v).sum::<T>().sqrt()
}

fn degenerate_tol<T: Real>() -> T {
    T::lit(1e-12)
}

/// `1 - x.y / (|x| |y|)`.
pub fn cosine_distance<T: Real>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::contract(format!(
            "cosine_distance lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx < degenerate_tol() || ny < degenerate_tol() {
        return Err(Error::Degenerate(format!("vector norm below 1e-12 (|x|={nx}, |y|={ny})")));
    }
    let dot: T = x.iter().zip(y).map(|(a, b)| *a * *b).sum();
    Ok(T::one() - dot / (nx * ny))
}

/// Distance plus its gradients w.r.t. both arguments.
fn cosine_distance_grad<T: Real>(x: &[T], y: &[T]) -> Result<(T, Vec<T>, Vec<T>)> {
    let (nx, ny) = (norm(x), norm(y));
    if nx < degenerate_tol() || ny < degenerate_tol() {
        return Err(Error::Degenerate(format!("vector norm below 1e-12 (|x|={nx}, |y|={ny})")));
    }
    let dot: T = x.iter().zip(y).map(|(a, b)| *a * *b).sum();
    let inv = T::one() / (nx * ny);
    let cos = dot * inv;
    // d(1 - cos)/dx = -(y / (|x||y|) - cos * x / |x|^2)
    let cx = cos / (nx * nx);
    let cy = cos / (ny * ny);
    let dx = x.iter().zip(y).map(|(a, b)| cx * *a - *b * inv).collect();
    let dy = x.iter().zip(y).map(|(a, b)| cy * *b - *a * inv).collect();
    Ok((T::one() - cos, dx, dy))
}

/// Elementwise mean of equal-length rows.
pub fn gold_average<T: Real>(rows: &[&[T]]) -> Result<Vec<T>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::contract("gold_average of an empty list"))?;
    let d = first.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::contract("gold_average rows differ in length"));
    }
    // Summing each coordinate in sorted order makes the result independent
    // of the order the gold codes were listed in.
    let n = rows.len() as f64;
    let mut column = Vec::with_capacity(rows.len());
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        column.clear();
        column.extend(rows.iter().map(|r| r[j].to_f64().unwrap()));
        column.sort_by(f64::total_cmp);
        out.push(T::lit(column.iter().sum::<f64>() / n));
    }
    Ok(out)
}

/// Value and gradients of the margin loss for one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginLoss<T> {
    pub loss: T,
    pub d_anchor: Vec<T>,
    pub d_positive: Vec<T>,
    pub d_negatives: Vec<Vec<T>>,
    /// Number of negatives whose hinge term is positive.
    pub active: usize,
}

/// `sum_i max(0, margin + d(a, p) - d(a, n_i))` with exact subgradients
/// (zero at the kink).
pub fn margin_loss<T: Real>(a: &[T], p: &[T], negs: &[&[T]], margin: T) -> Result<MarginLoss<T>> {
    if negs.is_empty() {
        return Err(Error::contract("margin_loss needs at least one negative"));
    }
    let d = a.len();
    if p.len() != d || negs.iter().any(|n| n.len() != d) {
        return Err(Error::contract("margin_loss vectors differ in length"));
    }
    let (d_pos, da_pos, dp) = cosine_distance_grad(a, p)?;
    let mut loss = T::zero();
    let mut d_anchor = vec![T::zero(); d];
    let mut d_negatives = Vec::with_capacity(negs.len());
    let mut active = 0usize;
    for n in negs {
        let (d_neg, da_neg, dn) = cosine_distance_grad(a, n)?;
        let term = margin + d_pos - d_neg;
        if term > T::zero() {
            loss += term;
            active += 1;
            for i in 0..d {
                d_anchor[i] += da_pos[i] - da_neg[i];
            }
            d_negatives.push(dn.into_iter().map(|v| -v).collect());
        } else {
            d_negatives.push(vec![T::zero(); d]);
        }
    }
    let scale = T::from_usize(active).unwrap();
    let d_positive = dp.into_iter().map(|v| v * scale).collect();
    Ok(MarginLoss {
        loss,
        d_anchor,
        d_positive,
        d_negatives,
        active,
    })
}

/// `k` distinct indices drawn uniformly from `0..catalog_size` minus `gold_rows`.
pub fn sample_negatives(
    catalog_size: usize,
    gold_rows: &[usize],
    k: usize,
    rng: &mut RngState,
) -> Result<Vec<usize>> {
    let gold: HashSet<usize> = gold_rows.iter().copied().filter(|g| *g < catalog_size).collect();
    let available = catalog_size - gold.len();
    if k > available {
        return Err(Error::Sampling(format!(
            "need {k} negatives but only {available} of {catalog_size} subjects are non-gold"
        )));
    }
    if 2 * k > available {
        // dense: partial Fisher-Yates over the explicit candidate list
        let mut pool: Vec<usize> = (0..catalog_size).filter(|i| !gold.contains(i)).collect();
        for i in 0..k {
            let j = i + rng.below((pool.len() - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        return Ok(pool);
    }
    let mut picked = Vec::with_capacity(k);
    let mut seen = HashSet::with_capacity(k);
    while picked.len() < k {
        let i = rng.below(catalog_size as u64) as usize;
        if !gold.contains(&i) && seen.insert(i) {
            picked.push(i);
        }
    }
    Ok(picked)
}
