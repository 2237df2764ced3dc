//! On-disk formats: the `.nbemb` embedding container and the JSON Lines /
//! TSV text files exchanged with the ingestion pipeline and the evaluators.
//!
//! `.nbemb` layout (all integers little-endian, no padding):
//!
//! ```text
//! "NBE1" | u32 version=1 | u32 dim | u64 rows
//! rows x (u16 id byte length | UTF-8 id bytes)
//! rows x dim f32 payload, row-major
//! ```
//!
//! Readers either return a fully validated object or an error; nothing is
//! partially constructed.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{GoldLabels, Judgment, JudgmentSet};
use crate::model::ModelConfig;
use crate::numerics::DenseMatrix;
use crate::objective::{gold_average, TrainingExample};
use crate::retrieval::RankingResult;
use crate::trainer::TrainConfig;

const EMB_MAGIC: &[u8; 4] = b"NBE1";
const EMB_VERSION: u32 = 1;

/// Row-major `f32` matrix with one unique string id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    data: DenseMatrix<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, data: DenseMatrix<f32>) -> Result<Self> {
        if ids.len() != data.rows() {
            return Err(Error::Validation(format!(
                "{} ids for {} rows",
                ids.len(),
                data.rows()
            )));
        }
        if data.cols() == 0 {
            return Err(Error::Validation("embedding dim must be >= 1".into()));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate id '{id}' at row {i}")));
            }
        }
        for i in 0..data.rows() {
            if let Some(j) = data.row(i).iter().position(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "non-finite value at row {i} (id '{}'), column {j}",
                    ids[i]
                )));
            }
        }
        Ok(EmbeddingMatrix { ids, data, index })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.data.row(i)
    }

    pub fn matrix(&self) -> &DenseMatrix<f32> {
        &self.data
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

pub fn encode_embeddings(m: &EmbeddingMatrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + m.rows() * (8 + 4 * m.dim()));
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&EMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    for id in &m.ids {
        let len = u16::try_from(id.len())
            .map_err(|_| Error::Validation(format!("id longer than 65535 bytes: '{id:.40}...'")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for v in m.data.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corruption(format!(
                "truncated while reading {what} at byte {} (need {n}, have {})",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != EMB_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().unwrap());
    if version != EMB_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let dim = u32::from_le_bytes(cur.take(4, "dim")?.try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::Format {
            offset: 8,
            detail: "dim is 0".into(),
        });
    }
    let rows = u64::from_le_bytes(cur.take(8, "row count")?.try_into().unwrap());
    // each row needs at least 2 id-length bytes and 4*dim payload bytes
    let min_row = 2u64 + 4 * dim as u64;
    if rows.saturating_mul(min_row) > (bytes.len() - cur.pos) as u64 {
        return Err(Error::Corruption(format!(
            "{rows} rows of dim {dim} cannot fit in {} remaining bytes",
            bytes.len() - cur.pos
        )));
    }
    let rows = rows as usize;
    let mut ids = Vec::with_capacity(rows);
    for r in 0..rows {
        let len = u16::from_le_bytes(cur.take(2, "id length")?.try_into().unwrap()) as usize;
        let at = cur.pos;
        let raw = cur.take(len, "id")?;
        let id = std::str::from_utf8(raw).map_err(|e| Error::Format {
            offset: at as u64,
            detail: format!("id of row {r} is not UTF-8: {e}"),
        })?;
        ids.push(id.to_string());
    }
    let payload = cur.take(rows * dim * 4, "payload")?;
    if cur.pos != bytes.len() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.pos
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingMatrix::new(ids, DenseMatrix::from_vec(rows, dim, data)?)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embeddings(m)?).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// JSON Lines

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses non-blank lines; errors carry 1-based line numbers.
fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push((i + 1, item));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default, rename = "abstract")]
    pub abstract_text: String,
    /// Gold subject codes; empty for blind test records.
    #[serde(default)]
    pub subjects: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordSet {
    pub records: Vec<Record>,
}

pub fn parse_records(text: &str) -> Result<RecordSet> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (line, rec) in parse_jsonl::<Record>(text)? {
        if rec.title.trim().is_empty() && rec.abstract_text.trim().is_empty() {
            return Err(Error::Validation(format!("line {line}: record '{}' has no text", rec.id)));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Validation(format!("line {line}: duplicate record id '{}'", rec.id)));
        }
        records.push(rec);
    }
    Ok(RecordSet { records })
}

pub fn read_records(path: impl AsRef<Path>) -> Result<RecordSet> {
    parse_records(&read_text(path.as_ref())?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub code: String,
    /// Original (German) preferred label.
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_en: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SubjectCatalog {
    pub subjects: Vec<Subject>,
}

impl SubjectCatalog {
    pub fn contains(&self, code: &str) -> bool {
        self.subjects.iter().any(|s| s.code == code)
    }
}

pub fn parse_catalog(text: &str) -> Result<SubjectCatalog> {
    let mut seen = HashSet::new();
    let mut subjects = Vec::new();
    for (line, s) in parse_jsonl::<Subject>(text)? {
        if s.label.trim().is_empty() {
            return Err(Error::Validation(format!("line {line}: subject '{}' has an empty label", s.code)));
        }
        if !seen.insert(s.code.clone()) {
            return Err(Error::Validation(format!("line {line}: duplicate subject code '{}'", s.code)));
        }
        subjects.push(s);
    }
    Ok(SubjectCatalog { subjects })
}

pub fn read_catalog(path: impl AsRef<Path>) -> Result<SubjectCatalog> {
    parse_catalog(&read_text(path.as_ref())?)
}

#[derive(Deserialize)]
struct GoldLine {
    id: String,
    subjects: Vec<String>,
}

pub fn parse_gold(text: &str) -> Result<GoldLabels> {
    let mut gold = GoldLabels::default();
    for (line, g) in parse_jsonl::<GoldLine>(text)? {
        gold.insert(g.id, g.subjects).map_err(|e| e.context(format!("line {line}")))?;
    }
    Ok(gold)
}

pub fn read_gold(path: impl AsRef<Path>) -> Result<GoldLabels> {
    parse_gold(&read_text(path.as_ref())?)
}

/// `record_id<TAB>subject_code<TAB>label`; a blank or missing label is `N`.
pub fn parse_judgments(text: &str) -> Result<JudgmentSet> {
    let mut set = JudgmentSet::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let record = fields.next().unwrap_or("").trim();
        let code = fields.next().map(str::trim).ok_or_else(|| Error::Parse {
            line: line_no,
            detail: "expected record_id<TAB>subject_code<TAB>label".into(),
        })?;
        let label = fields.next().unwrap_or("").trim();
        if fields.next().is_some() {
            return Err(Error::Parse {
                line: line_no,
                detail: "more than three tab-separated fields".into(),
            });
        }
        if record.is_empty() || code.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                detail: "empty record id or subject code".into(),
            });
        }
        let judgment = match label {
            "Y" => Judgment::Y,
            "I" => Judgment::I,
            "N" | "" => Judgment::N,
            other => {
                return Err(Error::Validation(format!(
                    "line {line_no}: unknown judgment label '{other}'"
                )))
            }
        };
        set.insert(record, code, judgment)
            .map_err(|e| e.context(format!("line {line_no}")))?;
    }
    Ok(set)
}

pub fn read_judgments(path: impl AsRef<Path>) -> Result<JudgmentSet> {
    parse_judgments(&read_text(path.as_ref())?)
}

#[derive(Deserialize)]
struct PredictionLine {
    id: String,
    codes: Vec<String>,
    distances: Vec<f64>,
}

/// One JSON object per line; distances printed with 6 decimals.
pub fn format_predictions(results: &[RankingResult]) -> String {
    let mut out = String::new();
    for r in results {
        let codes: Vec<&str> = r.ranked.iter().map(|(c, _)| c.as_str()).collect();
        let dists: Vec<String> = r.ranked.iter().map(|(_, d)| format!("{d:.6}")).collect();
        out.push_str(&format!(
            "{{\"id\":{},\"codes\":{},\"distances\":[{}]}}\n",
            serde_json::to_string(&r.article_id).expect("string serializes"),
            serde_json::to_string(&codes).expect("strings serialize"),
            dists.join(",")
        ));
    }
    out
}

pub fn parse_predictions(text: &str) -> Result<Vec<RankingResult>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, p) in parse_jsonl::<PredictionLine>(text)? {
        if p.codes.len() != p.distances.len() {
            return Err(Error::Parse {
                line,
                detail: format!("{} codes but {} distances", p.codes.len(), p.distances.len()),
            });
        }
        if !seen.insert(p.id.clone()) {
            return Err(Error::Validation(format!("line {line}: duplicate prediction id '{}'", p.id)));
        }
        out.push(RankingResult {
            article_id: p.id,
            ranked: p.codes.into_iter().zip(p.distances).collect(),
        });
    }
    Ok(out)
}

pub fn write_predictions(results: &[RankingResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(format_predictions(results).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<RankingResult>> {
    parse_predictions(&read_text(path.as_ref())?)
}

// ---------------------------------------------------------------------------
// Configuration

/// Training plus model configuration, read from one flat JSON object.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub model: ModelConfig,
    /// Whether `d` was given explicitly; otherwise it follows the data.
    #[serde(skip)]
    pub d_explicit: bool,
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::config("config must be a JSON object"))?;
    let known: HashSet<&str> = [
        "epochs", "batch_size", "lr0", "weight_decay", "T_max", "t_max", "eta_min", "adam_beta1",
        "adam_beta2", "adam_eps", "seed", "margin", "negatives", "transform_targets", "d",
        "model_dim", "heads", "head_dim", "layers", "ffn_dim", "mlp_hidden", "dropout_p",
    ]
    .into_iter()
    .collect();
    if let Some(k) = obj.keys().find(|k| !known.contains(k.as_str())) {
        return Err(Error::config(format!("unknown config key '{k}'")));
    }
    let mut cfg: RunConfig =
        serde_json::from_value(value.clone()).map_err(|e| Error::config(format!("config: {e}")))?;
    cfg.d_explicit = obj.contains_key("d");
    Ok(cfg)
}

pub fn read_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    parse_run_config(&read_text(path)?)
}

// ---------------------------------------------------------------------------
// Joining records with embeddings

#[derive(Clone, Debug, PartialEq)]
pub struct JoinOutcome {
    pub examples: Vec<TrainingExample>,
    /// Records skipped because they carry no gold subjects.
    pub skipped_without_gold: usize,
}

const MAX_REPORTED: usize = 20;

/// One training example per record with gold subjects; the positive is the
/// mean of the gold subjects' base embeddings.
pub fn join_examples(
    records: &RecordSet,
    articles: &EmbeddingMatrix,
    subjects: &EmbeddingMatrix,
    catalog: Option<&SubjectCatalog>,
) -> Result<JoinOutcome> {
    let catalog_codes: Option<HashSet<&str>> =
        catalog.map(|c| c.subjects.iter().map(|s| s.code.as_str()).collect());
    let mut offenders = Vec::new();
    let mut offender_count = 0usize;
    let mut examples = Vec::new();
    let mut skipped = 0;

    for rec in &records.records {
        let mut report = |msg: String| {
            offender_count += 1;
            if offenders.len() < MAX_REPORTED {
                offenders.push(msg);
            }
        };
        let Some(article_row) = articles.position(&rec.id) else {
            report(format!("record '{}' has no article embedding", rec.id));
            continue;
        };
        if rec.subjects.is_empty() {
            skipped += 1;
            continue;
        }
        let mut gold_rows = Vec::with_capacity(rec.subjects.len());
        let mut ok = true;
        for code in &rec.subjects {
            let in_catalog = catalog_codes.as_ref().is_none_or(|c| c.contains(code.as_str()));
            match subjects.position(code) {
                Some(r) if in_catalog => gold_rows.push(r),
                _ => {
                    report(format!("record '{}' references unknown subject '{code}'", rec.id));
                    ok = false;
                }
            }
        }
        if !ok {
            continue;
        }
        let rows: Vec<&[f32]> = gold_rows.iter().map(|&r| subjects.row(r)).collect();
        let positive = gold_average(&rows)?;
        examples.push(TrainingExample {
            article_row,
            gold_rows,
            gold_codes: rec.subjects.clone(),
            positive,
        });
    }
    if offender_count > 0 {
        let more = offender_count.saturating_sub(offenders.len());
        let suffix = if more > 0 { format!(" (and {more} more)") } else { String::new() };
        return Err(Error::Join(format!("{}{suffix}", offenders.join("; "))));
    }
    Ok(JoinOutcome {
        examples,
        skipped_without_gold: skipped,
    })
}
