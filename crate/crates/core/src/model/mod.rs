//! The dimension-as-token transform.
//!
//! Each coordinate of an input embedding becomes a token with a scalar
//! feature. Tokens are lifted to `model_dim`, pass through pre-norm attention
//! encoder layers attending across the `d` positions, collapse back to one
//! scalar each, and the resulting `d`-vector is refined by a 3-layer MLP.
//!
//! Matrices use the row-vector convention `x W`: a weight of shape
//! `(fan_in, fan_out)` maps `fan_in -> fan_out`.

mod attention;
mod checkpoint;
mod forward;

use serde::{Deserialize, Serialize};

pub use attention::HeadStats;
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use forward::{
    backward, backward_into, forward, forward_eval, transform_rows, ForwardTrace, LayerTrace,
};

use crate::error::{Error, Result};
use crate::numerics::{check_dropout_p, DenseMatrix, Real, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding dimension (number of tokens).
    pub d: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub mlp_hidden: usize,
    pub dropout_p: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 768,
            model_dim: 16,
            heads: 2,
            head_dim: 8,
            layers: 1,
            ffn_dim: 64,
            mlp_hidden: 256,
            dropout_p: 0.03,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d", self.d),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("layers", self.layers),
            ("ffn_dim", self.ffn_dim),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.heads * self.head_dim != self.model_dim {
            return Err(Error::config(format!(
                "heads ({}) x head_dim ({}) != model_dim ({})",
                self.heads, self.head_dim, self.model_dim
            )));
        }
        check_dropout_p(self.dropout_p)
    }

    /// Closed-form count of learnable scalars.
    pub fn param_count(&self) -> usize {
        let md = self.model_dim;
        let linear = |i: usize, o: usize| i * o + o;
        let per_layer = 4 * md // two layer norms, gain + bias
            + 4 * linear(md, md)
            + linear(md, self.ffn_dim)
            + linear(self.ffn_dim, md);
        linear(1, md)
            + self.layers * per_layer
            + linear(md, 1)
            + linear(self.d, self.mlp_hidden)
            + linear(self.mlp_hidden, self.mlp_hidden)
            + linear(self.mlp_hidden, self.d)
    }
}

/// One pre-norm encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub ln1_gain: DenseMatrix<T>,
    pub ln1_bias: DenseMatrix<T>,
    pub w_q: DenseMatrix<T>,
    pub b_q: DenseMatrix<T>,
    pub w_k: DenseMatrix<T>,
    pub b_k: DenseMatrix<T>,
    pub w_v: DenseMatrix<T>,
    pub b_v: DenseMatrix<T>,
    pub w_o: DenseMatrix<T>,
    pub b_o: DenseMatrix<T>,
    pub ln2_gain: DenseMatrix<T>,
    pub ln2_bias: DenseMatrix<T>,
    pub ffn_w1: DenseMatrix<T>,
    pub ffn_b1: DenseMatrix<T>,
    pub ffn_w2: DenseMatrix<T>,
    pub ffn_b2: DenseMatrix<T>,
}

/// All learnable tensors. Biases and gains are stored as `1 x n` matrices.
///
/// Also used as the gradient container: `backward` returns a `ModelParams`
/// of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    pub w_in: DenseMatrix<T>,
    pub b_in: DenseMatrix<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub w_out: DenseMatrix<T>,
    pub b_out: DenseMatrix<T>,
    pub mlp_w1: DenseMatrix<T>,
    pub mlp_b1: DenseMatrix<T>,
    pub mlp_w2: DenseMatrix<T>,
    pub mlp_b2: DenseMatrix<T>,
    pub mlp_w3: DenseMatrix<T>,
    pub mlp_b3: DenseMatrix<T>,
}

/// Tensor names in serialization order (also the init and optimizer order).
pub fn tensor_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names = vec!["in.weight".to_string(), "in.bias".to_string()];
    for l in 0..cfg.layers {
        for t in [
            "ln1.gain", "ln1.bias", "attn.q.weight", "attn.q.bias", "attn.k.weight", "attn.k.bias",
            "attn.v.weight", "attn.v.bias", "attn.o.weight", "attn.o.bias", "ln2.gain", "ln2.bias",
            "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
        ] {
            names.push(format!("layers.{l}.{t}"));
        }
    }
    for t in [
        "out.weight", "out.bias", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2", "mlp.w3", "mlp.b3",
    ] {
        names.push(t.to_string());
    }
    names
}

impl<T: Real> ModelParams<T> {
    /// Zero weights, unit layer-norm gains.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let md = cfg.model_dim;
        let z = |r, c| DenseMatrix::zeros(r, c);
        let layers = (0..cfg.layers)
            .map(|_| EncoderLayer {
                ln1_gain: DenseMatrix::filled(1, md, T::one()),
                ln1_bias: z(1, md),
                w_q: z(md, md),
                b_q: z(1, md),
                w_k: z(md, md),
                b_k: z(1, md),
                w_v: z(md, md),
                b_v: z(1, md),
                w_o: z(md, md),
                b_o: z(1, md),
                ln2_gain: DenseMatrix::filled(1, md, T::one()),
                ln2_bias: z(1, md),
                ffn_w1: z(md, cfg.ffn_dim),
                ffn_b1: z(1, cfg.ffn_dim),
                ffn_w2: z(cfg.ffn_dim, md),
                ffn_b2: z(1, md),
            })
            .collect();
        Ok(ModelParams {
            config: cfg.clone(),
            w_in: z(1, md),
            b_in: z(1, md),
            layers,
            w_out: z(md, 1),
            b_out: z(1, 1),
            mlp_w1: z(cfg.d, cfg.mlp_hidden),
            mlp_b1: z(1, cfg.mlp_hidden),
            mlp_w2: z(cfg.mlp_hidden, cfg.mlp_hidden),
            mlp_b2: z(1, cfg.mlp_hidden),
            mlp_w3: z(cfg.mlp_hidden, cfg.d),
            mlp_b3: z(1, cfg.d),
        })
    }

    /// A gradient accumulator of matching shape (every entry zero, gains included).
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.tensors_mut().into_iter().for_each(|t| t.fill(T::zero()));
        g
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Tensors in the fixed order of [`tensor_names`].
    pub fn tensors(&self) -> Vec<&DenseMatrix<T>> {
        let mut out = vec![&self.w_in, &self.b_in];
        for l in &self.layers {
            out.extend([
                &l.ln1_gain, &l.ln1_bias, &l.w_q, &l.b_q, &l.w_k, &l.b_k, &l.w_v, &l.b_v, &l.w_o,
                &l.b_o, &l.ln2_gain, &l.ln2_bias, &l.ffn_w1, &l.ffn_b1, &l.ffn_w2, &l.ffn_b2,
            ]);
        }
        out.extend([
            &self.w_out, &self.b_out, &self.mlp_w1, &self.mlp_b1, &self.mlp_w2, &self.mlp_b2,
            &self.mlp_w3, &self.mlp_b3,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix<T>> {
        let mut out = vec![&mut self.w_in, &mut self.b_in];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.w_q,
                &mut l.b_q,
                &mut l.w_k,
                &mut l.b_k,
                &mut l.w_v,
                &mut l.b_v,
                &mut l.w_o,
                &mut l.b_o,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.ffn_w1,
                &mut l.ffn_b1,
                &mut l.ffn_w2,
                &mut l.ffn_b2,
            ]);
        }
        out.extend([
            &mut self.w_out,
            &mut self.b_out,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
            &mut self.mlp_w3,
            &mut self.mlp_b3,
        ]);
        out
    }

    /// Names paired with tensors.
    pub fn named_tensors(&self) -> Vec<(String, &DenseMatrix<T>)> {
        tensor_names(&self.config).into_iter().zip(self.tensors()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Concatenation of all tensors in canonical order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::contract(format!(
                "flat parameter vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParams<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += *y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config).expect("config already validated");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    pub fn with_config(mut self, cfg: ModelConfig) -> Result<Self> {
        let probe = ModelParams::<T>::zeros(&cfg)?;
        let same = probe
            .tensors()
            .iter()
            .zip(self.tensors())
            .all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::contract("config change would alter tensor shapes"));
        }
        self.config = cfg;
        Ok(self)
    }
}

/// Xavier-uniform weights, zero biases, unit layer-norm gains.
pub fn init_params<T: Real>(cfg: &ModelConfig, rng: &mut RngState) -> Result<ModelParams<T>> {
    let mut params = ModelParams::<T>::zeros(cfg)?;
    let names = tensor_names(cfg);
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if !is_weight(name) {
            continue;
        }
        let (fan_in, fan_out) = t.shape();
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for x in t.data_mut() {
            *x = T::lit(rng.uniform_range(-bound, bound));
        }
    }
    Ok(params)
}

pub(crate) fn is_weight(name: &str) -> bool {
    name.ends_with(".weight") || name.ends_with(".w1") || name.ends_with(".w2") || name.ends_with(".w3")
}
