//! AdamW training loop with a per-epoch cosine-annealed learning rate.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::model::{backward_into, forward, init_params, ForwardTrace, ModelConfig, ModelParams};
use crate::numerics::{Mode, RngState, Stream};
use crate::objective::{margin_loss, sample_negatives, LossHyper, TargetMode, TrainingExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    #[serde(rename = "T_max", alias = "t_max")]
    pub t_max: usize,
    pub eta_min: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub loss: LossHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 4,
            lr0: 1e-4,
            weight_decay: 0.0,
            t_max: 20,
            eta_min: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss: LossHyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.t_max == 0 {
            return Err(Error::config("T_max must be >= 1"));
        }
        if !(self.eta_min >= 0.0 && self.lr0 >= self.eta_min && self.lr0.is_finite()) {
            return Err(Error::config(format!(
                "learning rates must satisfy lr0 ({}) >= eta_min ({}) >= 0",
                self.lr0, self.eta_min
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("adam_eps must be > 0 and weight_decay >= 0"));
        }
        self.loss.validate()
    }
}

/// `eta_min + (lr0 - eta_min) (1 + cos(pi epoch / T_max)) / 2`, clamped to
/// `eta_min` past `T_max`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch >= cfg.t_max {
        return cfg.eta_min;
    }
    let frac = epoch as f64 / cfg.t_max as f64;
    cfg.eta_min + (cfg.lr0 - cfg.eta_min) * (1.0 + (PI * frac).cos()) / 2.0
}

/// Adam moment estimates, shaped like the parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub first: ModelParams<f32>,
    pub second: ModelParams<f32>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        OptimizerState {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update with bias correction; decoupled decay is skipped
/// entirely when `weight_decay == 0`.
pub fn adamw_step(
    params: &mut ModelParams<f32>,
    grads: &ModelParams<f32>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.config() != params.config() || state.first.config() != params.config() {
        return Err(Error::contract("optimizer shapes do not match parameters"));
    }
    if !(lr >= 0.0) {
        return Err(Error::contract(format!("learning rate {lr} must be >= 0")));
    }
    for (name, g) in crate::model::tensor_names(params.config()).iter().zip(grads.tensors()) {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "optimizer",
                format!("non-finite gradient in {name} at index {i}"),
            ));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = cfg.adam_beta1 as f32;
    let b2 = cfg.adam_beta2 as f32;
    let bc1 = (1.0 - cfg.adam_beta1.powi(t)) as f32;
    let bc2 = (1.0 - cfg.adam_beta2.powi(t)) as f32;
    let eps = cfg.adam_eps as f32;
    let lr32 = lr as f32;
    let decay = (lr * cfg.weight_decay) as f32;

    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first.tensors_mut())
        .zip(state.second.tensors_mut());
    for (((p, g), m), v) in tensors {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut());
        for (((p, &g), m), v) in it {
            if cfg.weight_decay != 0.0 {
                *p -= decay * *p;
            }
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr32 * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub seconds: f64,
    pub examples_seen: usize,
    /// Optimizer steps completed so far.
    pub steps: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// JSON Lines, one epoch per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch log serializes") + "\n")
            .collect()
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.mean_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// Trains a freshly initialized transform (init stream of `cfg.seed`).
pub fn train(
    subjects: &EmbeddingMatrix,
    articles: &EmbeddingMatrix,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<(ModelParams<f32>, TrainLog)> {
    model_cfg.validate()?;
    let params = init_params(model_cfg, &mut RngState::for_stream(cfg.seed, Stream::Init))?;
    train_from(params, subjects, articles, examples, cfg)
}

/// Trains starting from the given parameters. The embedding matrices are
/// only read.
pub fn train_from(
    mut params: ModelParams<f32>,
    subjects: &EmbeddingMatrix,
    articles: &EmbeddingMatrix,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainLog)> {
    cfg.validate()?;
    validate_inputs(&params, subjects, articles, examples)?;

    let mut shuffle_rng = RngState::for_stream(cfg.seed, Stream::Shuffle);
    let mut neg_rng = RngState::for_stream(cfg.seed, Stream::Negatives);
    let mut drop_rng = RngState::for_stream(cfg.seed, Stream::Dropout);
    let mut opt = OptimizerState::new(&params);
    let mut log = TrainLog::default();
    let mut seen = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, cfg);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut epoch_loss = 0.0f64;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut ctx = StepContext {
                params: &params,
                subjects,
                articles,
                loss: &cfg.loss,
                neg_rng: &mut neg_rng,
                drop_rng: &mut drop_rng,
            };
            let (grads, batch_loss) = ctx.run(&batch).map_err(|e| match e {
                Error::Numeric { stage, detail } => Error::numeric(
                    format!("epoch {epoch} step {step}: {stage}"),
                    detail,
                ),
                other => other,
            })?;
            if !batch_loss.is_finite() {
                return Err(Error::numeric(
                    format!("epoch {epoch} step {step}"),
                    format!("loss is {batch_loss}"),
                ));
            }
            epoch_loss += batch_loss;
            adamw_step(&mut params, &grads, &mut opt, lr, cfg)?;
            seen += batch.len();
        }

        log.epochs.push(EpochLog {
            epoch,
            mean_loss: epoch_loss / examples.len() as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
            examples_seen: seen,
            steps: opt.step,
        });
    }
    Ok((params, log))
}

fn validate_inputs(
    params: &ModelParams<f32>,
    subjects: &EmbeddingMatrix,
    articles: &EmbeddingMatrix,
    examples: &[TrainingExample],
) -> Result<()> {
    let d = params.config().d;
    if examples.is_empty() {
        return Err(Error::config("no training examples"));
    }
    if subjects.dim() != d || articles.dim() != d {
        return Err(Error::contract(format!(
            "embedding dims (subjects {}, articles {}) do not match model d = {d}",
            subjects.dim(),
            articles.dim()
        )));
    }
    for (i, ex) in examples.iter().enumerate() {
        if ex.article_row >= articles.rows() {
            return Err(Error::contract(format!("example {i}: article row {} out of range", ex.article_row)));
        }
        if ex.gold_rows.is_empty() || ex.gold_rows.iter().any(|r| *r >= subjects.rows()) {
            return Err(Error::contract(format!("example {i}: gold rows missing or out of range")));
        }
        if ex.positive.len() != d {
            return Err(Error::contract(format!("example {i}: positive has wrong length")));
        }
    }
    Ok(())
}

struct Forwarded {
    z: Vec<f32>,
    trace: Option<ForwardTrace<f32>>,
    dz: Vec<f32>,
}

struct StepContext<'a> {
    params: &'a ModelParams<f32>,
    subjects: &'a EmbeddingMatrix,
    articles: &'a EmbeddingMatrix,
    loss: &'a LossHyper,
    neg_rng: &'a mut RngState,
    drop_rng: &'a mut RngState,
}

impl StepContext<'_> {
    fn transform(&mut self, m: &[f32]) -> Result<Forwarded> {
        let (z, trace) = forward(self.params, m, Mode::Train, Some(self.drop_rng))?;
        let dz = vec![0.0; z.len()];
        Ok(Forwarded { z, trace, dz })
    }

    fn raw(m: &[f32]) -> Forwarded {
        Forwarded {
            z: m.to_vec(),
            trace: None,
            dz: Vec::new(),
        }
    }

    /// Summed margin loss over the batch and its parameter gradient.
    ///
    /// A subject drawn as a negative by several articles of the batch is
    /// transformed once; its gradient contributions add up.
    fn run(&mut self, batch: &[&TrainingExample]) -> Result<(ModelParams<f32>, f64)> {
        let n_subjects = self.subjects.rows();
        let negatives: Vec<Vec<usize>> = batch
            .iter()
            .map(|ex| sample_negatives(n_subjects, &ex.gold_rows, self.loss.negatives, self.neg_rng))
            .collect::<Result<_>>()?;
        let transform_targets = self.loss.transform_targets == TargetMode::Both;

        let mut anchors = Vec::with_capacity(batch.len());
        let mut positives = Vec::with_capacity(batch.len());
        for ex in batch {
            anchors.push(self.transform(self.articles.row(ex.article_row))?);
            positives.push(if transform_targets {
                self.transform(&ex.positive)?
            } else {
                Self::raw(&ex.positive)
            });
        }

        let mut slot_of: HashMap<usize, usize> = HashMap::new();
        let mut negs: Vec<Forwarded> = Vec::new();
        for rows in &negatives {
            for &r in rows {
                if slot_of.contains_key(&r) {
                    continue;
                }
                slot_of.insert(r, negs.len());
                let row = self.subjects.row(r);
                negs.push(if transform_targets {
                    self.transform(row)?
                } else {
                    Self::raw(row)
                });
            }
        }

        let margin = self.loss.margin as f32;
        let mut total = 0.0f64;
        for (j, rows) in negatives.iter().enumerate() {
            let neg_vecs: Vec<&[f32]> = rows.iter().map(|r| negs[slot_of[r]].z.as_slice()).collect();
            let out = margin_loss(&anchors[j].z, &positives[j].z, &neg_vecs, margin)?;
            total += out.loss as f64;
            add_into(&mut anchors[j].dz, &out.d_anchor);
            if transform_targets {
                add_into(&mut positives[j].dz, &out.d_positive);
                for (r, g) in rows.iter().zip(&out.d_negatives) {
                    add_into(&mut negs[slot_of[r]].dz, g);
                }
            }
        }

        let mut grads = self.params.zeros_like();
        for f in anchors.iter().chain(&positives).chain(&negs) {
            if let Some(trace) = &f.trace {
                if f.dz.iter().any(|v| *v != 0.0) {
                    backward_into(self.params, trace, &f.dz, &mut grads)?;
                }
            }
        }
        Ok((grads, total))
    }
}

fn add_into(acc: &mut [f32], g: &[f32]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += *b;
    }
}
