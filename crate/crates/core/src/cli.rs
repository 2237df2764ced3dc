//! Command-line surface: `train`, `infer`, `eval`, `eval-judged`, `inspect`.
//!
//! Every successful run ends with one summary line on stdout,
//! `OK cmd=<name> key=value ...`; failures print `ERROR exit=<code> <message>`
//! on stderr. Exit codes: 0 success, 1 usage or configuration, 2 data,
//! 3 numeric.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::dataio::{
    join_examples, read_catalog, read_embeddings, read_gold, read_judgments, read_predictions, read_records,
    read_run_config, write_predictions,
};
use crate::error::{Error, Result};
use crate::metrics::{eval_judged, eval_quantitative, parse_cutoffs, EvalReport, JudgedCase};
use crate::model::{decode_checkpoint, load_checkpoint, save_checkpoint};
use crate::retrieval::{batch_infer, build_index, IndexMode};
use crate::trainer::train;

#[derive(Debug, Parser)]
#[command(name = "nbalign", version, about = "Embedding alignment for subject retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the transform and write a checkpoint.
    Train {
        #[arg(long)]
        subjects: PathBuf,
        #[arg(long)]
        articles: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Training log (JSON Lines); defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Restrict gold codes to this subject catalog.
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Rank subjects for every article.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        subjects: PathBuf,
        #[arg(long)]
        articles: PathBuf,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against gold labels.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value = "5:50:5")]
        cutoffs: String,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score predictions against Y/I/N judgments.
    EvalJudged {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        judgments: PathBuf,
        /// 1: Y and I count as correct; 2: only Y.
        #[arg(long)]
        case: u32,
        #[arg(long, default_value = "5:20:5")]
        cutoffs: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Describe a checkpoint or embedding file.
    Inspect { path: PathBuf },
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(stderr, "{text}");
                1
            } else {
                let _ = write!(stdout, "{text}");
                0
            };
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(summary) => {
            let _ = writeln!(stdout, "OK {summary}");
            0
        }
        Err(e) => {
            let code = e.exit_code();
            let _ = writeln!(stderr, "ERROR exit={code} {e}");
            code
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn dispatch(cmd: Command, stdout: &mut dyn Write) -> Result<String> {
    match cmd {
        Command::Train {
            subjects,
            articles,
            records,
            config,
            out,
            seed,
            log,
            catalog,
        } => cmd_train(&subjects, &articles, &records, &config, &out, seed, log, catalog.as_deref()),
        Command::Infer {
            model,
            subjects,
            articles,
            k,
            out,
        } => cmd_infer(&model, &subjects, &articles, k, &out),
        Command::Eval {
            preds,
            gold,
            cutoffs,
            report,
        } => {
            let cutoffs = parse_cutoffs(&cutoffs)?;
            let rep = eval_quantitative(&read_predictions(&preds)?, &read_gold(&gold)?, &cutoffs)?;
            emit_report("eval", &rep, report.as_deref(), stdout)
        }
        Command::EvalJudged {
            preds,
            judgments,
            case,
            cutoffs,
            report,
        } => {
            let case = JudgedCase::from_number(case)?;
            let cutoffs = parse_cutoffs(&cutoffs)?;
            let rep = eval_judged(&read_predictions(&preds)?, &read_judgments(&judgments)?, case, &cutoffs)?;
            emit_report("eval-judged", &rep, report.as_deref(), stdout)
        }
        Command::Inspect { path } => cmd_inspect(&path),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    subjects: &Path,
    articles: &Path,
    records: &Path,
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    log: Option<PathBuf>,
    catalog: Option<&Path>,
) -> Result<String> {
    let started = Instant::now();
    let mut cfg = read_run_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let subj = read_embeddings(subjects)?;
    let arts = read_embeddings(articles)?;
    if subj.dim() != arts.dim() {
        return Err(Error::Validation(format!(
            "subject dim {} != article dim {}",
            subj.dim(),
            arts.dim()
        )));
    }
    if !cfg.d_explicit {
        cfg.model.d = subj.dim();
    } else if cfg.model.d != subj.dim() {
        return Err(Error::Validation(format!(
            "config d={} but embeddings have dim {}",
            cfg.model.d,
            subj.dim()
        )));
    }
    let recs = read_records(records)?;
    let cat = catalog.map(read_catalog).transpose()?;
    let joined = join_examples(&recs, &arts, &subj, cat.as_ref())?;
    let (params, train_log) = train(&subj, &arts, &joined.examples, &cfg.train, &cfg.model)?;
    save_checkpoint(&params, cfg.train.loss.transform_targets, out)?;
    let log_path = log.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    write_file(&log_path, &train_log.to_jsonl())?;
    Ok(format!(
        "cmd=train seed={} examples={} skipped_without_gold={} epochs={} first_loss={:.6} final_loss={:.6} elapsed_s={:.3} out={} log={}",
        cfg.train.seed,
        joined.examples.len(),
        joined.skipped_without_gold,
        train_log.epochs.len(),
        train_log.first_loss().unwrap_or(f64::NAN),
        train_log.final_loss().unwrap_or(f64::NAN),
        started.elapsed().as_secs_f64(),
        out.display(),
        log_path.display()
    ))
}

fn cmd_infer(model: &Path, subjects: &Path, articles: &Path, k: usize, out: &Path) -> Result<String> {
    if k == 0 {
        return Err(Error::config("--k must be >= 1"));
    }
    let started = Instant::now();
    let ck = load_checkpoint(model)?;
    let d = ck.config().d;
    let subj = read_embeddings(subjects)?;
    let arts = read_embeddings(articles)?;
    for (what, dim) in [("subjects", subj.dim()), ("articles", arts.dim())] {
        if dim != d {
            return Err(Error::Validation(format!(
                "{what} have dim {dim}, checkpoint expects dim {d}"
            )));
        }
    }
    let mode = IndexMode::from(ck.transform_targets);
    let index = build_index(&subj, Some(&ck.params), mode)?;
    let results = batch_infer(&index, &arts, Some(&ck.params), k)?;
    write_predictions(&results, out)?;
    Ok(format!(
        "cmd=infer articles={} subjects={} k={k} index={} elapsed_s={:.3} out={}",
        results.len(),
        index.len(),
        match mode {
            IndexMode::Transform => "transform",
            IndexMode::Raw => "raw",
        },
        started.elapsed().as_secs_f64(),
        out.display()
    ))
}

fn emit_report(cmd: &str, rep: &EvalReport, report: Option<&Path>, stdout: &mut dyn Write) -> Result<String> {
    let _ = write!(stdout, "{}", rep.render_table());
    if let Some(p) = report {
        write_file(p, &(rep.to_json() + "\n"))?;
    }
    let mut s = format!(
        "cmd={cmd} records={} cutoffs={} average_precision={:.4} average_recall={:.4} average_f1={:.4}",
        rep.records,
        rep.cutoffs.len(),
        rep.average_precision,
        rep.average_recall,
        rep.average_f1
    );
    if let Some(p) = report {
        s.push_str(&format!(" report={}", p.display()));
    }
    Ok(s)
}

fn cmd_inspect(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match bytes.get(..4) {
        Some(b"NBC1") => {
            let ck = decode_checkpoint(&bytes)?;
            let c = ck.config();
            Ok(format!(
                "cmd=inspect kind=checkpoint d={} model_dim={} heads={} head_dim={} layers={} ffn_dim={} mlp_hidden={} dropout_p={} params={} transform_targets={}",
                c.d,
                c.model_dim,
                c.heads,
                c.head_dim,
                c.layers,
                c.ffn_dim,
                c.mlp_hidden,
                c.dropout_p,
                ck.params.num_params(),
                serde_json::to_value(ck.transform_targets)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default()
            ))
        }
        Some(b"NBE1") => {
            let m = crate::dataio::decode_embeddings(&bytes)?;
            Ok(format!("cmd=inspect kind=embeddings rows={} dim={}", m.rows(), m.dim()))
        }
        _ => Err(Error::Format {
            offset: 0,
            detail: format!("{}: not a checkpoint or embedding file", path.display()),
        }),
    }
}
