#![allow(dead_code)]

pub mod fixtures;
pub mod gradcheck;
pub mod oracles;

use std::collections::HashSet;

use nbalign::dataio::{EmbeddingMatrix, Record, RecordSet};
use nbalign::numerics::{DenseMatrix, RngState};

/// Clustered toy data: unit-norm random centers, subjects and articles drawn
/// around them with isotropic Gaussian noise. Gold for an article is every
/// subject of its cluster.
pub struct Synthetic {
    pub subjects: EmbeddingMatrix,
    pub articles: EmbeddingMatrix,
    pub records: RecordSet,
    pub subject_cluster: Vec<usize>,
    pub article_cluster: Vec<usize>,
}

pub fn unit_centers(k: usize, dim: usize, rng: &mut RngState) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn around(centers: &[Vec<f64>], n: usize, sigma: f64, prefix: &str, rng: &mut RngState) -> (EmbeddingMatrix, Vec<usize>) {
    let dim = centers[0].len();
    let mut data = Vec::with_capacity(n * dim);
    let mut cluster = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % centers.len();
        cluster.push(c);
        data.extend(centers[c].iter().map(|x| (x + sigma * rng.normal()) as f32));
    }
    let ids = (0..n).map(|i| format!("{prefix}{i}")).collect();
    (EmbeddingMatrix::new(ids, DenseMatrix::from_vec(n, dim, data).unwrap()).unwrap(), cluster)
}

pub fn synthetic(clusters: usize, dim: usize, n_subjects: usize, n_articles: usize, s_sigma: f64, a_sigma: f64, seed: u64) -> Synthetic {
    let mut rng = RngState::new(seed, 4);
    let centers = unit_centers(clusters, dim, &mut rng);
    let (subjects, subject_cluster) = around(&centers, n_subjects, s_sigma, "s", &mut rng);
    let (articles, article_cluster) = around(&centers, n_articles, a_sigma, "a", &mut rng);
    let records = RecordSet {
        records: (0..n_articles)
            .map(|i| Record {
                id: format!("a{i}"),
                title: format!("article {i}"),
                abstract_text: String::new(),
                subjects: (0..n_subjects)
                    .filter(|&s| subject_cluster[s] == article_cluster[i])
                    .map(|s| format!("s{s}"))
                    .collect(),
            })
            .collect(),
    };
    Synthetic {
        subjects,
        articles,
        records,
        subject_cluster,
        article_cluster,
    }
}

/// The configuration used by the overfit criterion.
pub fn overfit_data() -> Synthetic {
    synthetic(4, 768, 60, 40, 0.05, 0.1, 2024)
}

pub fn gold_sets(records: &RecordSet) -> Vec<HashSet<String>> {
    records.records.iter().map(|r| r.subjects.iter().cloned().collect()).collect()
}
