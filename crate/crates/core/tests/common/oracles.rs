//! Checks shared by the focused test files and the acceptance report. Each
//! returns a one-line summary on success and the first discrepancy on failure.

use std::collections::HashSet;

use nbalign::dataio::{decode_embeddings, encode_embeddings, EmbeddingMatrix};
use nbalign::metrics::{eval_judged, eval_quantitative, pr_at_k, GoldLabels, JudgedCase, Judgment, JudgmentSet};
use nbalign::model::{decode_checkpoint, encode_checkpoint, init_params, ModelConfig, ModelParams};
use nbalign::numerics::{DenseMatrix, RngState};
use nbalign::objective::TargetMode;
use nbalign::retrieval::{build_index, query_topk, IndexMode, RankingResult};
use nbalign::Error;
use sha2::{Digest, Sha256};

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Retrieval

/// Full argsort of cosine distances with index tie-break, accumulated in f64.
pub fn brute_force(rows: &[Vec<f32>], q: &[f32]) -> Vec<(usize, f64)> {
    let dot = |x: &[f32], y: &[f32]| {
        let mut s = 0.0f64;
        for (a, b) in x.iter().zip(y) {
            s += *a as f64 * *b as f64;
        }
        s
    };
    let qn = dot(q, q).sqrt();
    let mut all: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (i, 1.0 - dot(q, r) / (qn * dot(r, r).sqrt())))
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all
}

/// Random instance with planted exact ties (duplicated rows) and a query that
/// sometimes coincides with a row.
pub fn retrieval_instance(rng: &mut RngState, max_rows: usize) -> (Vec<Vec<f32>>, Vec<f32>, usize) {
    let n = 1 + rng.below(max_rows as u64) as usize;
    let dim = 1 + rng.below(48) as usize;
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 && rng.uniform() < 0.2 {
            let j = rng.below(i as u64) as usize;
            rows.push(rows[j].clone());
        } else {
            let mut v: Vec<f32> = (0..dim).map(|_| rng.normal() as f32).collect();
            if v.iter().all(|x| *x == 0.0) {
                v[0] = 1.0;
            }
            rows.push(v);
        }
    }
    let q = if rng.uniform() < 0.3 {
        rows[rng.below(n as u64) as usize].clone()
    } else {
        (0..dim).map(|_| rng.normal() as f32 + 1e-3).collect()
    };
    let k = 1 + rng.below(n as u64 + 10) as usize;
    (rows, q, k)
}

pub fn retrieval_oracle(instances: usize, max_rows: usize, seed: u64) -> Check {
    let mut rng = RngState::new(seed, 4);
    let mut largest = 0;
    for inst in 0..instances {
        let (rows, q, k) = retrieval_instance(&mut rng, max_rows);
        largest = largest.max(rows.len());
        let dim = q.len();
        let ids: Vec<String> = (0..rows.len()).map(|i| format!("c{i:05}")).collect();
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        let m = EmbeddingMatrix::new(ids.clone(), DenseMatrix::from_vec(rows.len(), dim, flat).unwrap())
            .map_err(|e| e.to_string())?;
        let index = build_index(&m, None, IndexMode::Raw).map_err(|e| e.to_string())?;
        let got = query_topk(&index, &q, None, k).map_err(|e| e.to_string())?;
        let want: Vec<(String, f64)> = brute_force(&rows, &q)
            .into_iter()
            .take(k)
            .map(|(i, d)| (ids[i].clone(), d))
            .collect();
        ensure(got.ranked == want, || {
            let at = got.ranked.iter().zip(&want).position(|(a, b)| a != b).unwrap_or(0);
            format!(
                "instance {inst} (n={}, k={k}): rank {at} got {:?}, want {:?}",
                rows.len(),
                got.ranked.get(at),
                want.get(at)
            )
        })?;
    }
    Ok(format!("{instances} instances, up to {largest} subjects, exact match"))
}

// ---------------------------------------------------------------------------
// Metrics

/// Random ranked lists over a small code pool with Y/I/N judgments for every
/// code in the top 20, plus gold sets for the quantitative side.
pub struct MetricFixture {
    pub preds: Vec<RankingResult>,
    pub judgments: JudgmentSet,
    pub gold: GoldLabels,
}

pub fn metric_fixture(rng: &mut RngState, records: usize) -> MetricFixture {
    let pool: Vec<String> = (0..80).map(|i| format!("g{i}")).collect();
    let mut preds = Vec::new();
    let mut judgments = JudgmentSet::default();
    let mut gold = GoldLabels::default();
    for r in 0..records {
        let id = format!("r{r}");
        let mut codes = pool.clone();
        rng.shuffle(&mut codes);
        codes.truncate(50);
        for c in &codes[..20] {
            let j = match rng.below(3) {
                0 => Judgment::Y,
                1 => Judgment::I,
                _ => Judgment::N,
            };
            judgments.insert(&id, c, j).unwrap();
        }
        let n_gold = 1 + rng.below(12) as usize;
        let mut g = pool.clone();
        rng.shuffle(&mut g);
        gold.insert(id.clone(), g[..n_gold].to_vec()).unwrap();
        preds.push(RankingResult {
            article_id: id,
            ranked: codes.into_iter().enumerate().map(|(i, c)| (c, i as f64 * 0.01)).collect(),
        });
    }
    MetricFixture { preds, judgments, gold }
}

/// P@k from the library, with an empty relevant set scored as zero.
fn precision(codes: &[&str], relevant: &HashSet<String>, k: usize) -> Result<f64, String> {
    if relevant.is_empty() {
        return Ok(0.0);
    }
    pr_at_k(codes, relevant, k).map(|(p, _)| p).map_err(|e| e.to_string())
}

pub fn metric_properties(fixtures: usize, seed: u64) -> Check {
    let mut rng = RngState::new(seed, 4);
    let mut checked = 0usize;
    for f in 0..fixtures {
        let records = 1 + rng.below(30) as usize;
        let fx = metric_fixture(&mut rng, records);
        for p in &fx.preds {
            let codes = p.codes();
            let gold = fx.gold.get(&p.article_id).unwrap();

            // recall never decreases with k
            let mut last = 0.0;
            for k in 1..=50 {
                let (_, r) = pr_at_k(&codes, gold, k).map_err(|e| e.to_string())?;
                ensure(r >= last, || format!("fixture {f} {}: R@{k} = {r} < {last}", p.article_id))?;
                last = r;
            }

            let lenient = fx.judgments.relevant(&p.article_id, JudgedCase::Lenient);
            let strict = fx.judgments.relevant(&p.article_id, JudgedCase::Strict);
            for k in [5, 10, 15, 20] {
                let p1 = precision(&codes, &lenient, k)?;
                let p2 = precision(&codes, &strict, k)?;
                ensure(p2 <= p1, || format!("fixture {f} {}: strict P@{k} {p2} > lenient {p1}", p.article_id))?;
                for pk in [p1, p2] {
                    let hits = pk * k as f64;
                    ensure((hits - hits.round()).abs() < 1e-9, || {
                        format!("fixture {f} {}: P@{k} * k = {hits}", p.article_id)
                    })?;
                }
            }
            checked += 1;
        }

        // the same orderings hold for the macro-averaged reports
        let cut: Vec<usize> = (5..=50).step_by(5).collect();
        let q = eval_quantitative(&fx.preds, &fx.gold, &cut).map_err(|e| e.to_string())?;
        ensure(q.recall.windows(2).all(|w| w[0] <= w[1]), || format!("fixture {f}: macro recall not monotone"))?;
        let jc: Vec<usize> = (5..=20).step_by(5).collect();
        let c1 = eval_judged(&fx.preds, &fx.judgments, JudgedCase::Lenient, &jc).map_err(|e| e.to_string())?;
        let c2 = eval_judged(&fx.preds, &fx.judgments, JudgedCase::Strict, &jc).map_err(|e| e.to_string())?;
        ensure(c2.precision.iter().zip(&c1.precision).all(|(a, b)| a <= b), || {
            format!("fixture {f}: macro strict precision above lenient")
        })?;
    }
    Ok(format!("{fixtures} fixtures, {checked} records"))
}

// ---------------------------------------------------------------------------
// Formats

pub fn random_embeddings(rows: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = RngState::new(seed, 4);
    let data = (0..rows * dim).map(|_| rng.normal() as f32).collect();
    EmbeddingMatrix::new(
        (0..rows).map(|i| format!("id-{i}")).collect(),
        DenseMatrix::from_vec(rows, dim, data).unwrap(),
    )
    .unwrap()
}

pub fn sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn expect_err<T>(what: &str, r: nbalign::Result<T>, ok: impl Fn(&Error) -> bool) -> Result<(), String> {
    match r {
        Ok(_) => Err(format!("{what}: accepted")),
        Err(e) if ok(&e) => Ok(()),
        Err(e) => Err(format!("{what}: wrong error class: {e:?}")),
    }
}

pub fn embeddings_round_trip(rows: usize, dim: usize) -> Check {
    let m = random_embeddings(rows, dim, 17);
    let first = encode_embeddings(&m).map_err(|e| e.to_string())?;
    let back = decode_embeddings(&first).map_err(|e| e.to_string())?;
    ensure(back.ids() == m.ids(), || "id order changed".into())?;
    ensure(
        back.matrix().data().iter().zip(m.matrix().data()).all(|(a, b)| a.to_bits() == b.to_bits()),
        || "payload changed".into(),
    )?;
    let second = encode_embeddings(&back).map_err(|e| e.to_string())?;
    let (h1, h2) = (sha256(&first), sha256(&second));
    ensure(h1 == h2, || format!("re-encode hash {h2} != {h1}"))?;
    Ok(format!("{rows}x{dim} sha256 {}", &h1[..16]))
}

pub fn embeddings_rejections() -> Result<usize, String> {
    let good = encode_embeddings(&random_embeddings(5, 3, 2)).unwrap();
    let mut n = 0;
    for cut in [0, 3, 4, 7, 11, 19, 20, 25, good.len() - 1] {
        expect_err(&format!(".nbemb cut at {cut}"), decode_embeddings(&good[..cut]), |e| {
            matches!(e, Error::Corruption(_))
        })?;
        n += 1;
    }
    let mut b = good.clone();
    b[0] = b'X';
    expect_err(".nbemb bad magic", decode_embeddings(&b), |e| matches!(e, Error::Format { offset: 0, .. }))?;
    let mut b = good.clone();
    b[4] = 9;
    expect_err(".nbemb bad version", decode_embeddings(&b), |e| matches!(e, Error::Format { offset: 4, .. }))?;
    let mut b = good.clone();
    b[8..12].copy_from_slice(&0u32.to_le_bytes());
    expect_err(".nbemb dim 0", decode_embeddings(&b), |e| matches!(e, Error::Format { offset: 8, .. }))?;
    let mut b = good.clone();
    b.push(0);
    expect_err(".nbemb trailing byte", decode_embeddings(&b), |e| matches!(e, Error::Corruption(_)))?;
    let mut b = good.clone();
    let at = b.len() - 4;
    b[at..].copy_from_slice(&f32::NAN.to_le_bytes());
    expect_err(".nbemb NaN", decode_embeddings(&b), |e| {
        matches!(e, Error::Validation(m) if m.contains("row 4"))
    })?;
    // ids are "id-0".."id-4"; rename id-1 to id-0
    let mut b = good.clone();
    let pos = b.windows(4).position(|w| w == b"id-1").unwrap();
    b[pos + 3] = b'0';
    expect_err(".nbemb duplicate id", decode_embeddings(&b), |e| matches!(e, Error::Validation(_)))?;
    Ok(n + 6)
}

pub fn default_params(seed: u64) -> ModelParams<f32> {
    init_params(&ModelConfig::default(), &mut RngState::new(seed, 0)).unwrap()
}

pub fn checkpoint_round_trip() -> Check {
    let p = default_params(11);
    let first = encode_checkpoint(&p, TargetMode::Both);
    let ck = decode_checkpoint(&first).map_err(|e| e.to_string())?;
    ensure(ck.params == p, || "parameters changed".into())?;
    ensure(ck.transform_targets == TargetMode::Both, || "target mode changed".into())?;
    let second = encode_checkpoint(&ck.params, ck.transform_targets);
    ensure(first == second, || "re-encoded bytes differ".into())?;
    Ok(format!("{} params, {} bytes", p.num_params(), first.len()))
}

pub fn checkpoint_rejections() -> Result<usize, String> {
    let cfg = ModelConfig {
        d: 6,
        model_dim: 4,
        heads: 2,
        head_dim: 2,
        layers: 1,
        ffn_dim: 8,
        mlp_hidden: 5,
        dropout_p: 0.0,
    };
    let p: ModelParams<f32> = init_params(&cfg, &mut RngState::new(1, 0)).unwrap();
    let good = encode_checkpoint(&p, TargetMode::Both);
    let mut n = 0;
    let cuts: HashSet<usize> = [0, 2, 4, 8, 11, 12, 40, good.len() / 2, good.len() - 4, good.len() - 1].into();
    for cut in cuts {
        expect_err(&format!(".nbckpt cut at {cut}"), decode_checkpoint(&good[..cut]), |e| {
            matches!(e, Error::Corruption(_))
        })?;
        n += 1;
    }
    let mut b = good.clone();
    b[1] = b'?';
    expect_err(".nbckpt bad magic", decode_checkpoint(&b), |e| matches!(e, Error::Format { offset: 0, .. }))?;
    let mut b = good.clone();
    b[4..8].copy_from_slice(&7u32.to_le_bytes());
    expect_err(".nbckpt bad version", decode_checkpoint(&b), |e| matches!(e, Error::Format { offset: 4, .. }))?;
    let mut b = good.clone();
    b.extend_from_slice(&[0, 0, 0, 0]);
    expect_err(".nbckpt trailing bytes", decode_checkpoint(&b), |e| matches!(e, Error::Corruption(_)))?;
    // same-length edit of the manifest: in.weight claims shape [2,4]
    let mut b = good.clone();
    let pat = b"[1,4]";
    let pos = b.windows(pat.len()).position(|w| w == pat).ok_or("manifest shape not found")?;
    b[pos + 1] = b'2';
    expect_err(".nbckpt shape mismatch", decode_checkpoint(&b), |e| matches!(e, Error::Corruption(_)))?;
    // garbage inside the manifest JSON
    let mut b = good.clone();
    b[13] = b'#';
    expect_err(".nbckpt broken manifest", decode_checkpoint(&b), |e| matches!(e, Error::Format { .. }))?;
    Ok(n + 5)
}

pub fn format_round_trips(rows: usize, dim: usize) -> Check {
    let emb = embeddings_round_trip(rows, dim)?;
    let ck = checkpoint_round_trip()?;
    let rejected = embeddings_rejections()? + checkpoint_rejections()?;
    Ok(format!(".nbemb {emb}; .nbckpt {ck}; {rejected} malformed fixtures rejected"))
}
