//! On-disk inputs for command-line runs.

use std::path::{Path, PathBuf};

use nbalign::dataio::write_embeddings;

use super::{synthetic, Synthetic};

pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub data: Synthetic,
}

/// Small model that trains in well under a second on the fixture data.
pub const SMALL_CONFIG: &str = r#"{
  "epochs": 2, "batch_size": 4, "negatives": 5, "seed": 3,
  "model_dim": 4, "heads": 2, "head_dim": 2, "ffn_dim": 8, "mlp_hidden": 16
}"#;

impl Workspace {
    /// 24 subjects and 12 articles in 3 clusters, `dim` dimensions.
    pub fn new(dim: usize) -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
            data: synthetic(3, dim, 24, 12, 0.05, 0.1, 31),
        };
        write_embeddings(&ws.data.subjects, ws.path("subjects.nbemb")).unwrap();
        write_embeddings(&ws.data.articles, ws.path("articles.nbemb")).unwrap();
        let mut records = String::new();
        let mut gold = String::new();
        let mut judgments = String::new();
        for r in &ws.data.records.records {
            records += &serde_json::to_string(r).unwrap();
            records.push('\n');
            gold += &serde_json::json!({"id": r.id, "subjects": r.subjects}).to_string();
            gold.push('\n');
            // every subject judged: same cluster Y, the rest I or N
            for (s, code) in ws.data.subjects.ids().iter().enumerate() {
                let label = if r.subjects.contains(code) {
                    "Y"
                } else if s % 3 == 0 {
                    "I"
                } else {
                    ""
                };
                judgments += &format!("{}\t{code}\t{label}\n", r.id);
            }
        }
        ws.write("records.jsonl", &records);
        ws.write("gold.jsonl", &gold);
        ws.write("judgments.tsv", &judgments);
        ws.write("config.json", SMALL_CONFIG);
        ws
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    pub fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    /// `train` arguments writing `<out>` from the standard fixture files.
    pub fn train_args(&self, out: &str) -> Vec<String> {
        let mut a = vec!["nbalign".to_string(), "train".into()];
        for (flag, file) in [
            ("--subjects", "subjects.nbemb"),
            ("--articles", "articles.nbemb"),
            ("--records", "records.jsonl"),
            ("--config", "config.json"),
            ("--out", out),
        ] {
            a.push(flag.into());
            a.push(self.arg(file));
        }
        a
    }

    pub fn infer_args(&self, model: &str, articles: &str, out: &str, k: usize) -> Vec<String> {
        vec![
            "nbalign".into(),
            "infer".into(),
            "--model".into(),
            self.arg(model),
            "--subjects".into(),
            self.arg("subjects.nbemb"),
            "--articles".into(),
            self.arg(articles),
            "--k".into(),
            k.to_string(),
            "--out".into(),
            self.arg(out),
        ]
    }
}

pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the command in-process.
pub fn run(args: &[String]) -> Outcome {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = nbalign::cli::run(args, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}
