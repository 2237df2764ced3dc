//! Dense numeric kernels shared by the model and the objective.
//!
//! Everything here is generic over [`Real`] so the same forward/backward code
//! runs in `f32` for training and in `f64` for finite-difference checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default layer-norm epsilon (population variance).
pub const LN_EPS: f64 = 1e-5;

pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` over strided views.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn exp_in_place(xs: &mut [Self]);

    /// Scalar exponential; the vectorizable polynomial for `f32`.
    fn fast_exp(self) -> Self;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: `gemm` checks every view against its backing slice before calling in.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    #[inline(always)]
    fn fast_exp(self) -> f32 {
        exp_f32(self)
    }

    fn exp_in_place(xs: &mut [f32]) {
        for x in xs.iter_mut() {
            *x = exp_f32(*x);
        }
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    #[inline(always)]
    fn fast_exp(self) -> f64 {
        self.exp()
    }

    fn exp_in_place(xs: &mut [f64]) {
        for x in xs.iter_mut() {
            *x = x.exp();
        }
    }
}

/// Branch-free single-precision exponential (Cephes `expf` polynomial).
///
/// Written without early returns so the softmax loop vectorizes. Relative
/// error stays within a few ulp over the normal range; inputs below
/// `ln(f32::MIN_POSITIVE)` flush to zero.
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    const LO: f32 = -87.336_54;
    const HI: f32 = 88.0;
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const C1: f32 = 0.693_359_4;
    const C2: f32 = -2.121_944_4e-4;

    // Round to nearest with the 1.5 * 2^23 shifter: the low mantissa bits of
    // `t` then hold n as an integer. `floor` and `as i32` both block
    // vectorization on baseline x86-64.
    const SHIFTER: f32 = 12_582_912.0;
    let xc = if x < LO { LO } else if x > HI { HI } else { x };
    let t = xc.mul_add(LOG2E, SHIFTER);
    let n = t - SHIFTER;
    let ni = (t.to_bits() as i32).wrapping_sub(SHIFTER.to_bits() as i32);
    let r = (-n).mul_add(C2, (-n).mul_add(C1, xc));
    let mut p = 1.987_569_1e-4_f32;
    p = p.mul_add(r, 1.398_199_9e-3);
    p = p.mul_add(r, 8.333_452e-3);
    p = p.mul_add(r, 4.166_579_6e-2);
    p = p.mul_add(r, 1.666_666_5e-1);
    p = p.mul_add(r, 5.000_000_1e-1);
    let y = (p * r).mul_add(r, r) + 1.0;
    let scale = f32::from_bits((ni.wrapping_add(127) as u32) << 23);
    if x < LO {
        0.0
    } else {
        y * scale
    }
}

/// Defines `$name` as a runtime dispatcher over copies of `$body` compiled
/// for AVX-512F+FMA, AVX2+FMA and the baseline target. The body must not
/// depend on vector width for its rounding: reductions use fixed lanes and
/// fused multiply-adds are written out with `mul_add` (a libm call on the
/// baseline), so every copy returns identical bits.
macro_rules! multiversion {
    ($(#[$m:meta])* $vis:vis fn $name:ident<T: Real>($($arg:ident : $ty:ty),* $(,)?) $(-> $ret:ty)? => $body:ident) => {
        $(#[$m])*
        $vis fn $name<T: Real>($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx512f,fma")]
                unsafe fn v512<T: Real>($($arg: $ty),*) $(-> $ret)? {
                    $body($($arg),*)
                }
                #[target_feature(enable = "avx2,fma")]
                unsafe fn v256<T: Real>($($arg: $ty),*) $(-> $ret)? {
                    $body($($arg),*)
                }
                // SAFETY: each copy runs only after the CPU reports its feature.
                if is_x86_feature_detected!("avx512f") && is_x86_feature_detected!("fma") {
                    return unsafe { v512($($arg),*) };
                }
                if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                    return unsafe { v256($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}
pub(crate) use multiversion;

pub(crate) const LANES: usize = 16;

/// Dot product over 16 interleaved accumulators.
#[inline(always)]
pub(crate) fn lane_dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let (xc, yc) = (x.chunks_exact(LANES), y.chunks_exact(LANES));
    let (xt, yt) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..LANES {
            acc[l] = a[l].mul_add(b[l], acc[l]);
        }
    }
    let mut r = T::zero();
    for a in acc {
        r += a;
    }
    for (a, b) in xt.iter().zip(yt) {
        r = a.mul_add(*b, r);
    }
    r
}

#[inline(always)]
pub(crate) fn axpy_inline<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = alpha.mul_add(*xi, *yi);
    }
}

#[inline(always)]
fn vec_mat_acc_body<T: Real>(x: &[T], w: &DenseMatrix<T>, out: &mut [T]) {
    assert!(x.len() == w.rows() && out.len() == w.cols(), "vec_mat_acc shape");
    for (k, xk) in x.iter().enumerate() {
        axpy_inline(*xk, w.row(k), out);
    }
}

#[inline(always)]
fn mat_vec_body<T: Real>(w: &DenseMatrix<T>, y: &[T], out: &mut [T]) {
    assert!(y.len() == w.cols() && out.len() == w.rows(), "mat_vec shape");
    for (k, o) in out.iter_mut().enumerate() {
        *o = lane_dot(w.row(k), y);
    }
}

#[inline(always)]
fn outer_acc_body<T: Real>(x: &[T], y: &[T], g: &mut DenseMatrix<T>) {
    assert!(x.len() == g.rows() && y.len() == g.cols(), "outer_acc shape");
    for (k, xk) in x.iter().enumerate() {
        axpy_inline(*xk, y, g.row_mut(k));
    }
}

multiversion! {
    /// `out += x W` for a row vector `x`.
    pub fn vec_mat_acc<T: Real>(x: &[T], w: &DenseMatrix<T>, out: &mut [T]) => vec_mat_acc_body
}

multiversion! {
    /// `out = W y`.
    pub fn mat_vec<T: Real>(w: &DenseMatrix<T>, y: &[T], out: &mut [T]) => mat_vec_body
}

multiversion! {
    /// `G += x^T y` for row vectors `x` and `y`.
    pub fn outer_acc<T: Real>(x: &[T], y: &[T], g: &mut DenseMatrix<T>) => outer_acc_body
}

// ---------------------------------------------------------------------------
// Matrices and views

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn view(&self) -> MatView<'_, T> {
        MatView {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    pub fn view_mut(&mut self) -> MatViewMut<'_, T> {
        MatViewMut {
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
            data: &mut self.data,
        }
    }

    /// Columns `[start, start + width)` as a strided view.
    pub fn col_block(&self, start: usize, width: usize) -> MatView<'_, T> {
        assert!(start + width <= self.cols);
        MatView {
            data: &self.data[start.min(self.data.len())..],
            rows: self.rows,
            cols: width,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    pub fn col_block_mut(&mut self, start: usize, width: usize) -> MatViewMut<'_, T> {
        assert!(start + width <= self.cols);
        let rs = self.cols as isize;
        let rows = self.rows;
        let off = start.min(self.data.len());
        MatViewMut {
            data: &mut self.data[off..],
            rows,
            cols: width,
            rs,
            cs: 1,
        }
    }

    /// Matrix product `self * rhs` as a new matrix.
    pub fn matmul(&self, rhs: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        if self.cols != rhs.rows {
            return Err(Error::contract(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        gemm(T::one(), self.view(), rhs.view(), T::zero(), out.view_mut());
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[T]) {
        debug_assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += *b;
            }
        }
    }

    /// Accumulates the column sums into `acc`.
    pub fn col_sums_into(&self, acc: &mut [T]) {
        debug_assert_eq!(acc.len(), self.cols);
        for row in self.data.chunks_exact(self.cols.max(1)) {
            for (a, x) in acc.iter_mut().zip(row) {
                *a += *x;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MatView<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T> MatView<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols);
        MatView {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows as isize - 1) as usize * self.rs as usize
                + (self.cols as isize - 1) as usize * self.cs as usize
                + 1
        }
    }
}

pub struct MatViewMut<'a, T> {
    data: &'a mut [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T> MatViewMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols);
        MatViewMut {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize + 1
        }
    }
}

/// `c = alpha * a * b + beta * c`.
///
/// Panics on shape mismatch; all callers construct shapes from a validated
/// model configuration.
pub fn gemm<T: Real>(alpha: T, a: MatView<'_, T>, b: MatView<'_, T>, beta: T, c: MatViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    assert!(a.span() <= a.data.len());
    assert!(b.span() <= b.data.len());
    assert!(c.span() <= c.data.len());
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    T::gemm_raw(
        a.rows, a.cols, b.cols, alpha, a.data, a.rs, a.cs, b.data, b.rs, b.cs, beta, c.data, c.rs,
        c.cs,
    );
}

// ---------------------------------------------------------------------------
// Vector helpers

pub fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).fold(T::zero(), |acc, (a, b)| acc + *a * *b)
}

pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = alpha.mul_add(*xi, *yi);
    }
}

pub fn all_finite<T: Real>(xs: &[T]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

// ---------------------------------------------------------------------------
// Layer normalization

/// `gain * (x - mean) / sqrt(var + eps) + bias` with population variance.
pub fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::contract(format!(
            "layer_norm lengths x={} gain={} bias={}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::contract("layer_norm of empty vector"));
    }
    if eps < T::zero() {
        return Err(Error::contract("layer_norm eps must be nonnegative"));
    }
    let mut out = vec![T::zero(); x.len()];
    layer_norm_row(x, gain, bias, eps, &mut out, None);
    Ok(out)
}

/// Normalizes one row into `out`; optionally stores `x_hat`. Returns `1/sigma`.
pub(crate) fn layer_norm_row<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
    out: &mut [T],
    x_hat: Option<&mut [T]>,
) -> T {
    let n = T::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    match x_hat {
        Some(xh) => {
            for i in 0..x.len() {
                let h = (x[i] - mean) * inv_std;
                xh[i] = h;
                out[i] = gain[i] * h + bias[i];
            }
        }
        None => {
            for i in 0..x.len() {
                out[i] = gain[i] * (x[i] - mean) * inv_std + bias[i];
            }
        }
    }
    inv_std
}

/// Reverse of [`layer_norm_row`]: accumulates gain/bias gradients and writes
/// (or adds, when `accumulate`) the input gradient into `dx`.
pub(crate) fn layer_norm_row_backward<T: Real>(
    dy: &[T],
    x_hat: &[T],
    inv_std: T,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    let n = T::from_usize(dy.len()).unwrap();
    let mut mean_g = T::zero();
    let mut mean_gx = T::zero();
    for i in 0..dy.len() {
        dgain[i] += dy[i] * x_hat[i];
        dbias[i] += dy[i];
        let g = dy[i] * gain[i];
        mean_g += g;
        mean_gx += g * x_hat[i];
    }
    mean_g /= n;
    mean_gx /= n;
    for i in 0..dy.len() {
        let g = dy[i] * gain[i];
        dx[i] += inv_std * (g - mean_g - x_hat[i] * mean_gx);
    }
}

// ---------------------------------------------------------------------------
// Softmax / activations

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(m: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if !m.all_finite() {
        return Err(Error::numeric("softmax", "non-finite input"));
    }
    let mut out = m.clone();
    softmax_rows_in_place(out.data_mut(), m.cols());
    Ok(out)
}

pub(crate) fn softmax_rows_in_place<T: Real>(data: &mut [T], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_exact_mut(cols) {
        let max = lane_reduce(row, T::neg_infinity(), |a, b| if b > a { b } else { a });
        for x in row.iter_mut() {
            *x -= max;
        }
        T::exp_in_place(row);
        let sum = lane_reduce(row, T::zero(), |a, b| a + b);
        let inv = T::one() / sum;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

/// Reduction over 8 interleaved accumulators, so the loop vectorizes.
#[inline(always)]
fn lane_reduce<T: Real>(xs: &[T], init: T, f: impl Fn(T, T) -> T) -> T {
    let mut acc = [init; 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] = f(acc[i], c[i]);
        }
    }
    let mut r = init;
    for a in acc.into_iter().chain(tail.iter().copied()) {
        r = f(r, a);
    }
    r
}

pub fn relu_in_place<T: Real>(xs: &mut [T]) {
    for x in xs.iter_mut() {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

// ---------------------------------------------------------------------------
// Dropout

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout: survivors are scaled by `1/(1-p)`, eval mode is identity.
pub fn dropout_apply<T: Real>(x: &[T], p: f64, rng: &mut RngState, mode: Mode) -> Result<Vec<T>> {
    check_dropout_p(p)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.to_vec());
    }
    let mask = dropout_mask::<T>(x.len(), p, rng);
    Ok(x.iter().zip(&mask).map(|(a, m)| *a * *m).collect())
}

pub(crate) fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
    }
    Ok(())
}

/// Per-entry multipliers: 0 with probability `p`, else `1/(1-p)`.
pub(crate) fn dropout_mask<T: Real>(len: usize, p: f64, rng: &mut RngState) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.uniform() < p { T::zero() } else { keep })
        .collect()
}

// ---------------------------------------------------------------------------
// Randomness

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 0,
    Shuffle = 1,
    Negatives = 2,
    Dropout = 3,
    /// Free for tests and fixtures.
    Aux = 4,
}

/// Seeded ChaCha8 generator with a 64-bit stream selector.
///
/// ChaCha output is specified byte-for-byte, so identical `(seed, stream)`
/// produce identical sequences on every platform.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngState {
            seed,
            stream,
            inner,
        }
    }

    pub fn for_stream(seed: u64, stream: Stream) -> Self {
        Self::new(seed, stream as u64)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Unbiased integer in `[0, n)` (Lemire's multiply-and-reject).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central-difference gradient of `f` at `theta`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle {
                coordinate: i,
                detail: format!("f(theta+h)={plus}, f(theta-h)={minus}"),
            });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Elementwise relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let out = layer_norm(&[1.0f64; 4], &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_norm_unit_variance_symmetric() {
        let out = layer_norm(&[1.0f64, -1.0], &[1.0; 2], &[0.0; 2], 0.0).unwrap();
        assert_eq!(out, vec![1.0, -1.0]);
    }

    #[test]
    fn layer_norm_moments() {
        let out = layer_norm(&[0.3f64, -1.2, 2.5, 0.0], &[1.0; 4], &[0.0; 4], 0.0).unwrap();
        let mean = out.iter().sum::<f64>() / 4.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_length_mismatch() {
        let err = layer_norm(&[1.0f32, 2.0], &[1.0], &[0.0, 0.0], 1e-5).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let m = DenseMatrix::from_vec(2, 3, vec![0.0f32, 0.0, 0.0, 1000.0, 0.0, -5.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        for v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        assert!((s.get(1, 0) - 1.0).abs() < 1e-7);
        assert!(s.get(1, 1) < 1e-30);
        assert!(s.all_finite());
    }

    #[test]
    fn softmax_matches_naive() {
        let m = DenseMatrix::from_vec(1, 3, vec![1.0f32, 2.0, 3.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        for (got, want) in s.row(0).iter().zip(e.iter().map(|v| v / z)) {
            assert!((*got as f64 - want).abs() < 1e-7, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let m = DenseMatrix::from_vec(1, 2, vec![f32::NAN, 0.0]).unwrap();
        assert!(softmax_rows(&m).is_err());
    }

    #[test]
    fn fast_exp_accuracy() {
        let mut worst = 0.0f64;
        let mut x = -87.0f32;
        while x < 80.0 {
            let got = exp_f32(x) as f64;
            let want = (x as f64).exp();
            worst = worst.max((got - want).abs() / want);
            x += 0.01337;
        }
        assert!(worst < 3e-7, "worst relative error {worst}");
        assert_eq!(exp_f32(-200.0), 0.0);
        assert_eq!(exp_f32(0.0), 1.0);
    }

    #[test]
    fn dropout_eval_and_zero_p_are_identity() {
        let x: Vec<f32> = (0..100).map(|i| i as f32 * 0.1).collect();
        let mut rng = RngState::new(1, 0);
        assert_eq!(dropout_apply(&x, 0.03, &mut rng, Mode::Eval).unwrap(), x);
        assert_eq!(dropout_apply(&x, 0.0, &mut rng, Mode::Train).unwrap(), x);
    }

    #[test]
    fn dropout_rejects_bad_p() {
        let mut rng = RngState::new(1, 0);
        assert!(matches!(
            dropout_apply(&[1.0f32], 1.0, &mut rng, Mode::Train),
            Err(Error::Config(_))
        ));
        assert!(dropout_apply(&[1.0f32], -0.1, &mut rng, Mode::Train).is_err());
    }

    #[test]
    fn dropout_half_keeps_mean() {
        let x = vec![1.0f64; 100_000];
        let mut rng = RngState::new(5, 0);
        let y = dropout_apply(&x, 0.5, &mut rng, Mode::Train).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!((0.98..=1.02).contains(&mean), "mean {mean}");
    }

    #[test]
    fn dropout_paper_rate_is_unbiased() {
        // per-entry output is 0 or 1/(1-p); std of the mean is sqrt(p/(1-p)/n).
        let n = 200_000usize;
        let p = 0.03;
        let x = vec![1.0f64; n];
        let mut rng = RngState::new(11, 0);
        let y = dropout_apply(&x, p, &mut rng, Mode::Train).unwrap();
        let mean = y.iter().sum::<f64>() / n as f64;
        let sigma = (p / (1.0 - p) / n as f64).sqrt();
        assert!((mean - 1.0).abs() <= 3.0 * sigma, "mean {mean}, sigma {sigma}");
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = {
            let mut r = RngState::new(9, 2);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = RngState::new(9, 2);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut r = RngState::new(9, 3);
            (0..8).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn finite_diff_reports_coordinate() {
        let err = finite_diff_grad(|t| if t[1] > 0.5 { f64::NAN } else { 0.0 }, &[0.0, 0.5], 1e-3)
            .unwrap_err();
        match err {
            Error::Oracle { coordinate, .. } => assert_eq!(coordinate, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gemm_transposed_views() {
        let a = DenseMatrix::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut c = DenseMatrix::zeros(3, 3);
        gemm(1.0, a.view().t(), a.view(), 0.0, c.view_mut());
        // a^T a
        assert_eq!(c.row(0), &[17.0, 22.0, 27.0]);
        assert_eq!(c.row(2), &[27.0, 36.0, 45.0]);
        let mut blk = DenseMatrix::zeros(2, 2);
        gemm(1.0, a.col_block(1, 2), a.col_block(1, 2).t(), 0.0, blk.view_mut());
        assert_eq!(blk.data(), &[13.0, 28.0, 28.0, 61.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn layer_norm_standardizes(x in proptest::collection::vec(-10.0f64..10.0, 2..40)) {
                let mean = x.iter().sum::<f64>() / x.len() as f64;
                prop_assume!(x.iter().any(|v| (v - mean).abs() > 1e-3));
                let ones = vec![1.0; x.len()];
                let zeros = vec![0.0; x.len()];
                let out = layer_norm(&x, &ones, &zeros, 0.0).unwrap();
                let m = out.iter().sum::<f64>() / out.len() as f64;
                let v = out.iter().map(|o| (o - m).powi(2)).sum::<f64>() / out.len() as f64;
                prop_assert!(m.abs() <= 1e-6);
                prop_assert!((v - 1.0).abs() <= 1e-5);
            }

            #[test]
            fn softmax_sums_to_one_and_shift_invariant(
                row in proptest::collection::vec(-30.0f64..30.0, 1..50),
                shift in -100.0f64..100.0,
            ) {
                let n = row.len();
                let m = DenseMatrix::from_vec(1, n, row.clone()).unwrap();
                let shifted = DenseMatrix::from_vec(1, n, row.iter().map(|v| v + shift).collect()).unwrap();
                let a = softmax_rows(&m).unwrap();
                let b = softmax_rows(&shifted).unwrap();
                let s: f64 = a.data().iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert!(*x >= 0.0);
                    prop_assert!((x - y).abs() <= 1e-6);
                }
            }
        }
    }
}
