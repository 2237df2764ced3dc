//! Fused single-head attention over token rows.
//!
//! Operands are stored transposed (`head_dim x d`, one contiguous row per
//! channel) so every inner loop runs over tokens. The forward pass keeps only
//! the per-row max and reciprocal sum; the backward pass recomputes each
//! probability row with the same instruction sequence, so it sees exactly the
//! forward values.
//!
//! Reductions use 16 fixed lanes, which keeps results identical whichever
//! vector width the dispatcher picks.

use crate::numerics::{axpy_inline as axpy, lane_dot as dot, multiversion, Real, LANES};

/// Operands of one head, each `head_dim x d`.
pub(crate) struct HeadInputs<'a, T> {
    pub qt: &'a [T],
    pub kt: &'a [T],
    pub vt: &'a [T],
    pub d: usize,
    pub head_dim: usize,
    pub scale: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadStats<T> {
    pub row_max: Vec<T>,
    pub row_inv_sum: Vec<T>,
}

pub(crate) struct HeadGrads<T> {
    pub dqt: Vec<T>,
    pub dkt: Vec<T>,
    pub dvt: Vec<T>,
}

#[inline(always)]
fn reduce<T: Real>(xs: &[T], init: T, f: impl Fn(T, T) -> T) -> T {
    let mut acc = [init; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] = f(acc[l], c[l]);
        }
    }
    let mut r = init;
    for a in acc.into_iter().chain(tail.iter().copied()) {
        r = f(r, a);
    }
    r
}

/// Raw scaled scores of query row `i` against every key.
#[inline(always)]
fn scores_row<T: Real>(h: &HeadInputs<'_, T>, i: usize, s: &mut [T]) {
    let a0 = h.scale * h.qt[i];
    for (sj, kj) in s.iter_mut().zip(&h.kt[..h.d]) {
        *sj = a0 * *kj;
    }
    for c in 1..h.head_dim {
        let a = h.scale * h.qt[c * h.d + i];
        axpy(a, &h.kt[c * h.d..(c + 1) * h.d], s);
    }
}

#[inline(always)]
fn max_of<T: Real>(xs: &[T]) -> T {
    reduce(xs, T::neg_infinity(), |a, b| if b > a { b } else { a })
}

#[inline(always)]
fn exp_shifted<T: Real>(s: &mut [T], max: T) {
    for x in s.iter_mut() {
        *x = (*x - max).fast_exp();
    }
}

#[inline(always)]
fn scale_in_place<T: Real>(s: &mut [T], inv: T) {
    for x in s.iter_mut() {
        *x *= inv;
    }
}

#[inline(always)]
fn forward_body<T: Real>(h: &HeadInputs<'_, T>, out_t: &mut [T]) -> HeadStats<T> {
    let (d, hd) = (h.d, h.head_dim);
    let mut row_max = Vec::with_capacity(d);
    let mut row_inv_sum = Vec::with_capacity(d);
    let mut p = vec![T::zero(); d];
    for i in 0..d {
        scores_row(h, i, &mut p);
        let max = max_of(&p);
        exp_shifted(&mut p, max);
        let inv = T::one() / reduce(&p, T::zero(), |a, b| a + b);
        scale_in_place(&mut p, inv);
        for c in 0..hd {
            out_t[c * d + i] = dot(&p, &h.vt[c * d..(c + 1) * d]);
        }
        row_max.push(max);
        row_inv_sum.push(inv);
    }
    HeadStats { row_max, row_inv_sum }
}

#[inline(always)]
fn backward_body<T: Real>(h: &HeadInputs<'_, T>, stats: &HeadStats<T>, d_out_t: &[T]) -> HeadGrads<T> {
    let (d, hd) = (h.d, h.head_dim);
    let mut g = HeadGrads {
        dqt: vec![T::zero(); hd * d],
        dkt: vec![T::zero(); hd * d],
        dvt: vec![T::zero(); hd * d],
    };
    let mut p = vec![T::zero(); d];
    let mut dp = vec![T::zero(); d];
    for i in 0..d {
        scores_row(h, i, &mut p);
        exp_shifted(&mut p, stats.row_max[i]);
        scale_in_place(&mut p, stats.row_inv_sum[i]);

        let g0 = d_out_t[i];
        for (g_p, v) in dp.iter_mut().zip(&h.vt[..d]) {
            *g_p = g0 * *v;
        }
        for c in 1..hd {
            axpy(d_out_t[c * d + i], &h.vt[c * d..(c + 1) * d], &mut dp);
        }
        for c in 0..hd {
            axpy(d_out_t[c * d + i], &p, &mut g.dvt[c * d..(c + 1) * d]);
        }
        // softmax reverse: dS = P * (dP - <P, dP>)
        let r = dot(&p, &dp);
        for (g_s, p_j) in dp.iter_mut().zip(&p) {
            *g_s = *p_j * (*g_s - r);
        }
        for c in 0..hd {
            let row = c * d..(c + 1) * d;
            g.dqt[c * d + i] = h.scale * dot(&dp, &h.kt[row.clone()]);
            axpy(h.scale * h.qt[c * d + i], &dp, &mut g.dkt[row]);
        }
    }
    g
}

#[inline(always)]
fn lanes<T>(s: &[T], at: usize) -> &[T; LANES] {
    s[at..at + LANES].try_into().unwrap()
}

#[inline(always)]
fn lanes_mut<T>(s: &mut [T], at: usize) -> &mut [T; LANES] {
    (&mut s[at..at + LANES]).try_into().unwrap()
}

/// `acc = sum_c a[c] * rows[c][jb..jb+LANES]`, first channel assigning.
#[inline(always)]
fn mix<T: Real, const H: usize>(a: &[T; H], rows: &[&[T]; H], jb: usize) -> [T; LANES] {
    let r0 = lanes(rows[0], jb);
    let mut acc = [T::zero(); LANES];
    for l in 0..LANES {
        acc[l] = a[0] * r0[l];
    }
    for c in 1..H {
        let rc = lanes(rows[c], jb);
        for l in 0..LANES {
            acc[l] = a[c].mul_add(rc[l], acc[l]);
        }
    }
    acc
}

#[inline(always)]
fn mix_scalar<T: Real, const H: usize>(a: &[T; H], rows: &[&[T]; H], j: usize) -> T {
    let mut s = a[0] * rows[0][j];
    for c in 1..H {
        s = a[c].mul_add(rows[c][j], s);
    }
    s
}

#[inline(always)]
fn hsum<T: Real>(acc: &[T; LANES]) -> T {
    let mut s = T::zero();
    for &x in acc {
        s += x;
    }
    s
}

/// `forward_body` with the channel loops unrolled to `H` and fused into
/// three sweeps per query row.
#[inline(always)]
fn forward_blocked<T: Real, const H: usize>(h: &HeadInputs<'_, T>, out_t: &mut [T]) -> HeadStats<T> {
    let d = h.d;
    let full = d - d % LANES;
    let mut row_max = Vec::with_capacity(d);
    let mut row_inv_sum = Vec::with_capacity(d);
    let mut p = vec![T::zero(); d];
    let k: [&[T]; H] = std::array::from_fn(|c| &h.kt[c * d..(c + 1) * d]);
    let v: [&[T]; H] = std::array::from_fn(|c| &h.vt[c * d..(c + 1) * d]);
    for i in 0..d {
        let a: [T; H] = std::array::from_fn(|c| h.scale * h.qt[c * d + i]);

        // scores and running max
        let mut mx = [T::neg_infinity(); LANES];
        for jb in (0..full).step_by(LANES) {
            let acc = mix(&a, &k, jb);
            *lanes_mut(&mut p, jb) = acc;
            for l in 0..LANES {
                mx[l] = if acc[l] > mx[l] { acc[l] } else { mx[l] };
            }
        }
        let mut max = T::neg_infinity();
        for m in mx {
            if m > max {
                max = m;
            }
        }
        for j in full..d {
            let s = mix_scalar(&a, &k, j);
            p[j] = s;
            if s > max {
                max = s;
            }
        }

        // exponentials and their sum
        let mut sm = [T::zero(); LANES];
        for jb in (0..full).step_by(LANES) {
            let pj = lanes_mut(&mut p, jb);
            for l in 0..LANES {
                pj[l] = (pj[l] - max).fast_exp();
                sm[l] += pj[l];
            }
        }
        let mut sum = hsum(&sm);
        for x in &mut p[full..] {
            *x = (*x - max).fast_exp();
            sum += *x;
        }
        let inv = T::one() / sum;

        // normalize and mix values
        let mut acc = [[T::zero(); LANES]; H];
        for jb in (0..full).step_by(LANES) {
            let pc = lanes(&p, jb);
            let mut pj = [T::zero(); LANES];
            for l in 0..LANES {
                pj[l] = pc[l] * inv;
            }
            for c in 0..H {
                let vc = lanes(v[c], jb);
                for l in 0..LANES {
                    acc[c][l] = pj[l].mul_add(vc[l], acc[c][l]);
                }
            }
        }
        for c in 0..H {
            let mut o = hsum(&acc[c]);
            for j in full..d {
                o = (p[j] * inv).mul_add(v[c][j], o);
            }
            out_t[c * d + i] = o;
        }
        row_max.push(max);
        row_inv_sum.push(inv);
    }
    HeadStats { row_max, row_inv_sum }
}

#[inline(always)]
fn backward_blocked<T: Real, const H: usize>(h: &HeadInputs<'_, T>, stats: &HeadStats<T>, d_out_t: &[T]) -> HeadGrads<T> {
    let d = h.d;
    let full = d - d % LANES;
    let mut dqt = vec![T::zero(); H * d];
    let mut dkt = vec![T::zero(); H * d];
    let mut dvt = vec![T::zero(); H * d];
    let k: [&[T]; H] = std::array::from_fn(|c| &h.kt[c * d..(c + 1) * d]);
    let v: [&[T]; H] = std::array::from_fn(|c| &h.vt[c * d..(c + 1) * d]);
    let mut p = vec![T::zero(); d];
    let mut dp = vec![T::zero(); d];
    for i in 0..d {
        let a: [T; H] = std::array::from_fn(|c| h.scale * h.qt[c * d + i]);
        let go: [T; H] = std::array::from_fn(|c| d_out_t[c * d + i]);
        let (max, inv) = (stats.row_max[i], stats.row_inv_sum[i]);

        // probabilities, dP = dO V^T, dV += dO p, <p, dP>
        let mut rr = [T::zero(); LANES];
        for jb in (0..full).step_by(LANES) {
            let mut pj = mix(&a, &k, jb);
            for x in &mut pj {
                *x = (*x - max).fast_exp() * inv;
            }
            let g = mix(&go, &v, jb);
            for c in 0..H {
                let row = lanes_mut(&mut dvt, c * d + jb);
                for l in 0..LANES {
                    row[l] = go[c].mul_add(pj[l], row[l]);
                }
            }
            for l in 0..LANES {
                rr[l] = pj[l].mul_add(g[l], rr[l]);
            }
            *lanes_mut(&mut p, jb) = pj;
            *lanes_mut(&mut dp, jb) = g;
        }
        let mut r = hsum(&rr);
        for j in full..d {
            let pj = (mix_scalar(&a, &k, j) - max).fast_exp() * inv;
            let g = mix_scalar(&go, &v, j);
            for c in 0..H {
                dvt[c * d + j] = go[c].mul_add(pj, dvt[c * d + j]);
            }
            r = pj.mul_add(g, r);
            p[j] = pj;
            dp[j] = g;
        }

        // dS = p (dP - r); dQ = scale dS K; dK += scale q dS
        let mut accq = [[T::zero(); LANES]; H];
        for jb in (0..full).step_by(LANES) {
            let (pc, gc) = (lanes(&p, jb), lanes(&dp, jb));
            let mut ds = [T::zero(); LANES];
            for l in 0..LANES {
                ds[l] = pc[l] * (gc[l] - r);
            }
            for c in 0..H {
                let kc = lanes(k[c], jb);
                for l in 0..LANES {
                    accq[c][l] = ds[l].mul_add(kc[l], accq[c][l]);
                }
                let row = lanes_mut(&mut dkt, c * d + jb);
                for l in 0..LANES {
                    row[l] = a[c].mul_add(ds[l], row[l]);
                }
            }
        }
        for c in 0..H {
            let mut q = hsum(&accq[c]);
            for j in full..d {
                let ds = p[j] * (dp[j] - r);
                q = ds.mul_add(k[c][j], q);
                dkt[c * d + j] = a[c].mul_add(ds, dkt[c * d + j]);
            }
            dqt[c * d + i] = h.scale * q;
        }
    }
    HeadGrads { dqt, dkt, dvt }
}

fn check<T>(h: &HeadInputs<'_, T>) {
    let n = h.d * h.head_dim;
    assert!(h.qt.len() == n && h.kt.len() == n && h.vt.len() == n, "head operand shape");
}

#[inline(always)]
fn forward_checked<T: Real>(h: &HeadInputs<'_, T>, out_t: &mut [T]) -> HeadStats<T> {
    check(h);
    assert_eq!(out_t.len(), h.d * h.head_dim, "head output shape");
    match h.head_dim {
        1 => forward_blocked::<T, 1>(h, out_t),
        2 => forward_blocked::<T, 2>(h, out_t),
        4 => forward_blocked::<T, 4>(h, out_t),
        8 => forward_blocked::<T, 8>(h, out_t),
        16 => forward_blocked::<T, 16>(h, out_t),
        _ => forward_body(h, out_t),
    }
}

#[inline(always)]
fn backward_checked<T: Real>(h: &HeadInputs<'_, T>, stats: &HeadStats<T>, d_out_t: &[T]) -> HeadGrads<T> {
    check(h);
    assert_eq!(d_out_t.len(), h.d * h.head_dim, "head gradient shape");
    assert!(stats.row_max.len() == h.d && stats.row_inv_sum.len() == h.d, "head stats shape");
    match h.head_dim {
        1 => backward_blocked::<T, 1>(h, stats, d_out_t),
        2 => backward_blocked::<T, 2>(h, stats, d_out_t),
        4 => backward_blocked::<T, 4>(h, stats, d_out_t),
        8 => backward_blocked::<T, 8>(h, stats, d_out_t),
        16 => backward_blocked::<T, 16>(h, stats, d_out_t),
        _ => backward_body(h, stats, d_out_t),
    }
}

multiversion! {
    /// Writes the head output (transposed) into `out_t` and returns the row
    /// statistics needed by [`backward`].
    pub(crate) fn forward<T: Real>(h: &HeadInputs<'_, T>, out_t: &mut [T]) -> HeadStats<T> => forward_checked
}

multiversion! {
    /// Gradients w.r.t. the transposed Q, K and V given the transposed
    /// output gradient.
    pub(crate) fn backward<T: Real>(h: &HeadInputs<'_, T>, stats: &HeadStats<T>, d_out_t: &[T]) -> HeadGrads<T> => backward_checked
}
