mod common;

use common::oracles::{brute_force, retrieval_oracle};
use nbalign::dataio::EmbeddingMatrix;
use nbalign::model::{forward_eval, init_params, ModelConfig, ModelParams};
use nbalign::numerics::{DenseMatrix, RngState};
use nbalign::retrieval::{batch_infer, build_index, query_topk, IndexMode};

#[test]
fn topk_equals_full_argsort() {
    let summary = retrieval_oracle(60, 2000, 99).unwrap();
    eprintln!("{summary}");
}

#[test]
fn many_small_instances() {
    retrieval_oracle(400, 12, 7).unwrap();
}

#[test]
fn all_rows_identical_rank_by_catalog_order() {
    let rows = 37;
    let m = EmbeddingMatrix::new(
        (0..rows).map(|i| format!("z{:02}", rows - i)).collect(),
        DenseMatrix::from_vec(rows, 3, [0.5f32, -1.0, 2.0].repeat(rows)).unwrap(),
    )
    .unwrap();
    let index = build_index(&m, None, IndexMode::Raw).unwrap();
    let got = query_topk(&index, &[1.0, 1.0, 1.0], None, 10).unwrap();
    let want: Vec<String> = (0..10).map(|i| format!("z{:02}", rows - i)).collect();
    assert_eq!(got.codes(), want);
}

#[test]
fn transformed_queries_match_oracle_on_transformed_rows() {
    let cfg = ModelConfig {
        d: 24,
        mlp_hidden: 16,
        ..ModelConfig::default()
    };
    let params: ModelParams<f32> = init_params(&cfg, &mut RngState::new(4, 0)).unwrap();
    let mut rng = RngState::new(4, 4);
    let n = 150;
    let subj = EmbeddingMatrix::new(
        (0..n).map(|i| format!("s{i}")).collect(),
        DenseMatrix::from_vec(n, cfg.d, (0..n * cfg.d).map(|_| rng.normal() as f32).collect()).unwrap(),
    )
    .unwrap();
    let arts = EmbeddingMatrix::new(
        (0..5).map(|i| format!("a{i}")).collect(),
        DenseMatrix::from_vec(5, cfg.d, (0..5 * cfg.d).map(|_| rng.normal() as f32).collect()).unwrap(),
    )
    .unwrap();
    let index = build_index(&subj, Some(&params), IndexMode::Transform).unwrap();
    let zs: Vec<Vec<f32>> = (0..n).map(|i| forward_eval(&params, subj.row(i)).unwrap()).collect();
    let results = batch_infer(&index, &arts, Some(&params), 20).unwrap();
    for (j, r) in results.iter().enumerate() {
        assert_eq!(r.article_id, format!("a{j}"));
        let q = forward_eval(&params, arts.row(j)).unwrap();
        let want: Vec<(String, f64)> =
            brute_force(&zs, &q).into_iter().take(20).map(|(i, d)| (format!("s{i}"), d)).collect();
        assert_eq!(r.ranked, want);
    }
}
