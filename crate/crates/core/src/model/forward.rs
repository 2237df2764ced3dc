use crate::error::{Error, Result};
use crate::numerics::{
    all_finite, dropout_mask, gemm, layer_norm_row, layer_norm_row_backward, mat_vec, outer_acc, vec_mat_acc,
    DenseMatrix, Mode, Real, RngState, LN_EPS,
};

use super::attention::{self, HeadInputs, HeadStats};
use super::{EncoderLayer, ModelParams};

/// Activations of one encoder layer, kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    /// Normalized layer input (before gain/bias) and per-token `1/sigma`.
    pub z_hat: DenseMatrix<T>,
    pub z_inv_std: Vec<T>,
    /// `LayerNorm(X)`.
    pub z: DenseMatrix<T>,
    pub q: DenseMatrix<T>,
    pub k: DenseMatrix<T>,
    pub v: DenseMatrix<T>,
    /// Softmax row statistics per head; the weights are recomputed when
    /// needed.
    pub attn: Vec<HeadStats<T>>,
    /// Concatenated head outputs before the output projection.
    pub heads_out: DenseMatrix<T>,
    pub attn_mask: Option<DenseMatrix<T>>,
    /// Residual stream after attention.
    pub y: DenseMatrix<T>,
    pub u_hat: DenseMatrix<T>,
    pub u_inv_std: Vec<T>,
    pub u: DenseMatrix<T>,
    /// FFN pre-activation and its ReLU.
    pub ff_pre: DenseMatrix<T>,
    pub ff_act: DenseMatrix<T>,
    pub ff_mask: Option<DenseMatrix<T>>,
}

/// Everything the reverse pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    /// Input embedding, one scalar per token.
    pub input: Vec<T>,
    pub x0: DenseMatrix<T>,
    pub layers: Vec<LayerTrace<T>>,
    pub x_l: DenseMatrix<T>,
    pub x_attn: Vec<T>,
    pub mlp_pre1: Vec<T>,
    pub mlp_mask1: Option<Vec<T>>,
    pub h1: Vec<T>,
    pub mlp_pre2: Vec<T>,
    pub mlp_mask2: Option<Vec<T>>,
    pub h2: Vec<T>,
}

fn check_stage<T: Real>(stage: &str, xs: &[T]) -> Result<()> {
    if all_finite(xs) {
        Ok(())
    } else {
        let idx = xs.iter().position(|x| !x.is_finite()).unwrap_or(0);
        Err(Error::numeric(stage, format!("non-finite activation at index {idx}")))
    }
}

fn linear<T: Real>(x: &DenseMatrix<T>, w: &DenseMatrix<T>, b: &DenseMatrix<T>) -> DenseMatrix<T> {
    let mut out = DenseMatrix::zeros(x.rows(), w.cols());
    gemm(T::one(), x.view(), w.view(), T::zero(), out.view_mut());
    out.add_row_vector(b.data());
    out
}

/// Multiplies by the mask when dropout is active, returning the mask used.
fn maybe_dropout<T: Real>(
    xs: &mut [T],
    dropout: &mut Option<(&mut RngState, f64)>,
) -> Option<Vec<T>> {
    match dropout {
        Some((rng, p)) if *p > 0.0 => {
            let mask = dropout_mask::<T>(xs.len(), *p, rng);
            for (x, m) in xs.iter_mut().zip(&mask) {
                *x *= *m;
            }
            Some(mask)
        }
        _ => None,
    }
}

fn layer_forward<T: Real>(
    layer: &EncoderLayer<T>,
    x: &DenseMatrix<T>,
    heads: usize,
    head_dim: usize,
    dropout: &mut Option<(&mut RngState, f64)>,
) -> (DenseMatrix<T>, LayerTrace<T>) {
    let (d, md) = x.shape();
    let eps = T::lit(LN_EPS);

    let mut z = DenseMatrix::zeros(d, md);
    let mut z_hat = DenseMatrix::zeros(d, md);
    let mut z_inv_std = Vec::with_capacity(d);
    for t in 0..d {
        let inv = layer_norm_row(
            x.row(t),
            layer.ln1_gain.data(),
            layer.ln1_bias.data(),
            eps,
            z.row_mut(t),
            Some(z_hat.row_mut(t)),
        );
        z_inv_std.push(inv);
    }

    let q = linear(&z, &layer.w_q, &layer.b_q);
    let k = linear(&z, &layer.w_k, &layer.b_k);
    let v = linear(&z, &layer.w_v, &layer.b_v);

    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
    let mut heads_out = DenseMatrix::zeros(d, md);
    let mut attn = Vec::with_capacity(heads);
    let mut out_t = vec![T::zero(); d * head_dim];
    for h in 0..heads {
        let off = h * head_dim;
        let (qt, kt, vt) = (block_t(&q, off, head_dim), block_t(&k, off, head_dim), block_t(&v, off, head_dim));
        let inputs = HeadInputs {
            qt: &qt,
            kt: &kt,
            vt: &vt,
            d,
            head_dim,
            scale,
        };
        attn.push(attention::forward(&inputs, &mut out_t));
        set_block_from_t(&mut heads_out, off, head_dim, &out_t);
    }

    let mut attn_proj = linear(&heads_out, &layer.w_o, &layer.b_o);
    let attn_mask = maybe_dropout(attn_proj.data_mut(), dropout)
        .map(|m| DenseMatrix::from_vec(d, md, m).expect("mask shape"));
    let mut y = attn_proj;
    for (yi, xi) in y.data_mut().iter_mut().zip(x.data()) {
        *yi += *xi;
    }

    let mut u = DenseMatrix::zeros(d, md);
    let mut u_hat = DenseMatrix::zeros(d, md);
    let mut u_inv_std = Vec::with_capacity(d);
    for t in 0..d {
        let inv = layer_norm_row(
            y.row(t),
            layer.ln2_gain.data(),
            layer.ln2_bias.data(),
            eps,
            u.row_mut(t),
            Some(u_hat.row_mut(t)),
        );
        u_inv_std.push(inv);
    }

    let ff_pre = linear(&u, &layer.ffn_w1, &layer.ffn_b1);
    let mut ff_act = ff_pre.clone();
    crate::numerics::relu_in_place(ff_act.data_mut());
    let mut ff_out = linear(&ff_act, &layer.ffn_w2, &layer.ffn_b2);
    let ff_mask = maybe_dropout(ff_out.data_mut(), dropout)
        .map(|m| DenseMatrix::from_vec(d, md, m).expect("mask shape"));
    let mut next = ff_out;
    for (ni, yi) in next.data_mut().iter_mut().zip(y.data()) {
        *ni += *yi;
    }

    let trace = LayerTrace {
        z_hat,
        z_inv_std,
        z,
        q,
        k,
        v,
        attn,
        heads_out,
        attn_mask,
        y,
        u_hat,
        u_inv_std,
        u,
        ff_pre,
        ff_act,
        ff_mask,
    };
    (next, trace)
}

/// Runs the transform on one embedding.
///
/// `Mode::Train` draws dropout masks from `rng` and returns a trace;
/// `Mode::Eval` disables dropout, ignores `rng` and returns no trace.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    m: &[T],
    mode: Mode,
    rng: Option<&mut RngState>,
) -> Result<(Vec<T>, Option<ForwardTrace<T>>)> {
    let cfg = params.config();
    if m.len() != cfg.d {
        return Err(Error::contract(format!(
            "input has {} dims, model expects {}",
            m.len(),
            cfg.d
        )));
    }
    let mut dropout = match mode {
        Mode::Eval => None,
        Mode::Train => {
            let rng = rng.ok_or_else(|| Error::contract("train-mode forward needs an rng"))?;
            Some((rng, cfg.dropout_p))
        }
    };
    check_stage("input", m)?;

    let d = cfg.d;
    let md = cfg.model_dim;

    // token projection: X0[t] = m[t] * w_in + b_in
    let mut x0 = DenseMatrix::zeros(d, md);
    for t in 0..d {
        let row = x0.row_mut(t);
        for ((r, w), b) in row.iter_mut().zip(params.w_in.data()).zip(params.b_in.data()) {
            *r = m[t] * *w + *b;
        }
    }

    let mut x = x0.clone();
    let mut layer_traces = Vec::with_capacity(cfg.layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let (next, trace) = layer_forward(layer, &x, cfg.heads, cfg.head_dim, &mut dropout);
        check_stage(&format!("encoder layer {l}"), next.data())?;
        layer_traces.push(trace);
        x = next;
    }

    // scalar re-projection back to R^d
    let mut x_attn = vec![T::zero(); d];
    gemm(
        T::one(),
        x.view(),
        params.w_out.view(),
        T::zero(),
        crate::numerics::MatViewMut::new(&mut x_attn, d, 1),
    );
    let b_out = params.b_out.data()[0];
    x_attn.iter_mut().for_each(|v| *v += b_out);
    check_stage("token re-projection", &x_attn)?;

    // MLP: h = ReLU(Dropout(x W + b)) twice, then affine
    let mlp_pre1 = row_linear(&x_attn, &params.mlp_w1, &params.mlp_b1);
    let mut h1 = mlp_pre1.clone();
    let mlp_mask1 = maybe_dropout(&mut h1, &mut dropout);
    crate::numerics::relu_in_place(&mut h1);
    let mlp_pre2 = row_linear(&h1, &params.mlp_w2, &params.mlp_b2);
    let mut h2 = mlp_pre2.clone();
    let mlp_mask2 = maybe_dropout(&mut h2, &mut dropout);
    crate::numerics::relu_in_place(&mut h2);
    let out = row_linear(&h2, &params.mlp_w3, &params.mlp_b3);
    check_stage("mlp", &out)?;

    let trace = match mode {
        Mode::Eval => None,
        Mode::Train => Some(ForwardTrace {
            input: m.to_vec(),
            x0,
            layers: layer_traces,
            x_l: x,
            x_attn,
            mlp_pre1,
            mlp_mask1,
            h1,
            mlp_pre2,
            mlp_mask2,
            h2,
        }),
    };
    Ok((out, trace))
}

/// Eval-mode forward.
pub fn forward_eval<T: Real>(params: &ModelParams<T>, m: &[T]) -> Result<Vec<T>> {
    forward(params, m, Mode::Eval, None).map(|(z, _)| z)
}

/// Eval-mode forward over every row of a matrix. Rows never interact.
pub fn transform_rows<T: Real>(params: &ModelParams<T>, rows: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let d = params.config().d;
    if rows.cols() != d {
        return Err(Error::contract(format!(
            "matrix has {} columns, model expects {d}",
            rows.cols()
        )));
    }
    let mut out = DenseMatrix::zeros(rows.rows(), d);
    for i in 0..rows.rows() {
        let z = forward_eval(params, rows.row(i))?;
        out.row_mut(i).copy_from_slice(&z);
    }
    Ok(out)
}

/// Columns `off..off + width` of `m`, transposed to `width x rows`.
fn block_t<T: Real>(m: &DenseMatrix<T>, off: usize, width: usize) -> Vec<T> {
    let rows = m.rows();
    let mut t = vec![T::zero(); rows * width];
    for r in 0..rows {
        for (c, v) in m.row(r)[off..off + width].iter().enumerate() {
            t[c * rows + r] = *v;
        }
    }
    t
}

fn set_block_from_t<T: Real>(m: &mut DenseMatrix<T>, off: usize, width: usize, t: &[T]) {
    let rows = m.rows();
    for r in 0..rows {
        for (c, v) in m.row_mut(r)[off..off + width].iter_mut().enumerate() {
            *v = t[c * rows + r];
        }
    }
}

fn row_linear<T: Real>(x: &[T], w: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Vec<T> {
    let mut out = b.data().to_vec();
    vec_mat_acc(x, w, &mut out);
    out
}

/// Row-vector form of [`linear_backward`].
fn row_linear_backward<T: Real>(
    x: &[T],
    w: &DenseMatrix<T>,
    dy: &[T],
    grad_w: &mut DenseMatrix<T>,
    grad_b: &mut DenseMatrix<T>,
) -> Vec<T> {
    outer_acc(x, dy, grad_w);
    for (g, v) in grad_b.data_mut().iter_mut().zip(dy) {
        *g += *v;
    }
    let mut dx = vec![T::zero(); x.len()];
    mat_vec(w, dy, &mut dx);
    dx
}

// ---------------------------------------------------------------------------
// Reverse pass

/// `grad_w += x^T dy`, `grad_b += colsum(dy)`, returns `dy w^T`.
fn linear_backward<T: Real>(
    x: &DenseMatrix<T>,
    w: &DenseMatrix<T>,
    dy: &DenseMatrix<T>,
    grad_w: &mut DenseMatrix<T>,
    grad_b: &mut DenseMatrix<T>,
) -> DenseMatrix<T> {
    gemm(T::one(), x.view().t(), dy.view(), T::one(), grad_w.view_mut());
    dy.col_sums_into(grad_b.data_mut());
    let mut dx = DenseMatrix::zeros(x.rows(), x.cols());
    gemm(T::one(), dy.view(), w.view().t(), T::zero(), dx.view_mut());
    dx
}

fn apply_mask<T: Real>(xs: &mut [T], mask: Option<&[T]>) {
    if let Some(mask) = mask {
        for (x, m) in xs.iter_mut().zip(mask) {
            *x *= *m;
        }
    }
}

/// Backprop through one layer. `dx` holds the gradient w.r.t. the layer
/// output on entry and w.r.t. the layer input on exit.
fn layer_backward<T: Real>(
    layer: &EncoderLayer<T>,
    trace: &LayerTrace<T>,
    grad: &mut EncoderLayer<T>,
    dx: &mut DenseMatrix<T>,
    heads: usize,
    head_dim: usize,
) {
    let (d, md) = dx.shape();

    // X_out = Y + Dropout(FFN(U))
    let mut d_ff = dx.clone();
    apply_mask(d_ff.data_mut(), trace.ff_mask.as_ref().map(|m| m.data()));
    let mut d_act = linear_backward(&trace.ff_act, &layer.ffn_w2, &d_ff, &mut grad.ffn_w2, &mut grad.ffn_b2);
    for (g, pre) in d_act.data_mut().iter_mut().zip(trace.ff_pre.data()) {
        if *pre <= T::zero() {
            *g = T::zero();
        }
    }
    let d_u = linear_backward(&trace.u, &layer.ffn_w1, &d_act, &mut grad.ffn_w1, &mut grad.ffn_b1);

    // dY = dX + LN2'(dU)
    let mut d_y = dx.clone();
    for t in 0..d {
        layer_norm_row_backward(
            d_u.row(t),
            trace.u_hat.row(t),
            trace.u_inv_std[t],
            layer.ln2_gain.data(),
            grad.ln2_gain.data_mut(),
            grad.ln2_bias.data_mut(),
            d_y.row_mut(t),
        );
    }

    // Y = X + Dropout(MultiHead(Z))
    let mut d_attn = d_y.clone();
    apply_mask(d_attn.data_mut(), trace.attn_mask.as_ref().map(|m| m.data()));
    let d_heads = linear_backward(&trace.heads_out, &layer.w_o, &d_attn, &mut grad.w_o, &mut grad.b_o);

    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
    let mut d_q = DenseMatrix::zeros(d, md);
    let mut d_k = DenseMatrix::zeros(d, md);
    let mut d_v = DenseMatrix::zeros(d, md);
    for h in 0..heads {
        let off = h * head_dim;
        let (qt, kt, vt) = (
            block_t(&trace.q, off, head_dim),
            block_t(&trace.k, off, head_dim),
            block_t(&trace.v, off, head_dim),
        );
        let inputs = HeadInputs {
            qt: &qt,
            kt: &kt,
            vt: &vt,
            d,
            head_dim,
            scale,
        };
        let g = attention::backward(&inputs, &trace.attn[h], &block_t(&d_heads, off, head_dim));
        set_block_from_t(&mut d_q, off, head_dim, &g.dqt);
        set_block_from_t(&mut d_k, off, head_dim, &g.dkt);
        set_block_from_t(&mut d_v, off, head_dim, &g.dvt);
    }

    let mut d_z = linear_backward(&trace.z, &layer.w_q, &d_q, &mut grad.w_q, &mut grad.b_q);
    let dz_k = linear_backward(&trace.z, &layer.w_k, &d_k, &mut grad.w_k, &mut grad.b_k);
    let dz_v = linear_backward(&trace.z, &layer.w_v, &d_v, &mut grad.w_v, &mut grad.b_v);
    for ((a, b), c) in d_z.data_mut().iter_mut().zip(dz_k.data()).zip(dz_v.data()) {
        *a += *b + *c;
    }

    // dX = dY + LN1'(dZ)
    *dx = d_y;
    for t in 0..d {
        layer_norm_row_backward(
            d_z.row(t),
            trace.z_hat.row(t),
            trace.z_inv_std[t],
            layer.ln1_gain.data(),
            grad.ln1_gain.data_mut(),
            grad.ln1_bias.data_mut(),
            dx.row_mut(t),
        );
    }
}

/// Gradients of `<z, dz>` w.r.t. every parameter and the input embedding.
///
/// Replays the dropout masks recorded in `trace`.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    trace: &ForwardTrace<T>,
    dz: &[T],
) -> Result<(ModelParams<T>, Vec<T>)> {
    let mut grads = params.zeros_like();
    let dm = backward_into(params, trace, dz, &mut grads)?;
    Ok((grads, dm))
}

/// Like [`backward`] but accumulates into an existing gradient buffer.
pub fn backward_into<T: Real>(
    params: &ModelParams<T>,
    trace: &ForwardTrace<T>,
    dz: &[T],
    grads: &mut ModelParams<T>,
) -> Result<Vec<T>> {
    let cfg = params.config();
    let d = cfg.d;
    if dz.len() != d
        || trace.input.len() != d
        || trace.layers.len() != cfg.layers
        || trace.h2.len() != cfg.mlp_hidden
        || trace.x_l.shape() != (d, cfg.model_dim)
    {
        return Err(Error::contract("trace does not match model parameters"));
    }
    if grads.config() != cfg {
        return Err(Error::contract("gradient buffer shaped for another config"));
    }

    // z = h2 W3 + b3
    let mut d_h2 = row_linear_backward(&trace.h2, &params.mlp_w3, dz, &mut grads.mlp_w3, &mut grads.mlp_b3);
    mlp_relu_dropout_backward(&mut d_h2, &trace.mlp_pre2, trace.mlp_mask2.as_deref());
    let mut d_h1 = row_linear_backward(&trace.h1, &params.mlp_w2, &d_h2, &mut grads.mlp_w2, &mut grads.mlp_b2);
    mlp_relu_dropout_backward(&mut d_h1, &trace.mlp_pre1, trace.mlp_mask1.as_deref());
    let d_xattn = row_linear_backward(&trace.x_attn, &params.mlp_w1, &d_h1, &mut grads.mlp_w1, &mut grads.mlp_b1);

    // x_attn[t] = X_L[t] . w_out + b_out
    let d_col = DenseMatrix::from_vec(d, 1, d_xattn)?;
    let mut dx = linear_backward(&trace.x_l, &params.w_out, &d_col, &mut grads.w_out, &mut grads.b_out);

    for l in (0..cfg.layers).rev() {
        layer_backward(
            &params.layers[l],
            &trace.layers[l],
            &mut grads.layers[l],
            &mut dx,
            cfg.heads,
            cfg.head_dim,
        );
    }

    // X0[t] = m[t] w_in + b_in
    let mut dm = vec![T::zero(); d];
    let w_in = params.w_in.data();
    let gw = grads.w_in.data_mut();
    for t in 0..d {
        let row = dx.row(t);
        for j in 0..row.len() {
            gw[j] += trace.input[t] * row[j];
        }
        dm[t] = row.iter().zip(w_in).map(|(g, w)| *g * *w).sum();
    }
    dx.col_sums_into(grads.b_in.data_mut());

    if !all_finite(&dm) {
        return Err(Error::numeric("backward", "non-finite input gradient"));
    }
    Ok(dm)
}

/// Reverse of `h = ReLU(mask * pre)`.
fn mlp_relu_dropout_backward<T: Real>(d_h: &mut [T], pre: &[T], mask: Option<&[T]>) {
    for i in 0..d_h.len() {
        let m = mask.map_or(T::one(), |m| m[i]);
        if pre[i] * m <= T::zero() {
            d_h[i] = T::zero();
        } else {
            d_h[i] *= m;
        }
    }
}
