//! Raw compute kernels on flat row-major `f64` buffers.
//!
//! Every kernel has a sequential implementation; the hot row-wise ones also
//! have a rayon version behind the `parallel` feature. Work is always split
//! by output row, so results are bit-identical regardless of thread count.
//! The `*_auto` dispatchers switch to the parallel path once a problem is
//! large enough to amortize the fork/join overhead.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Additive-mask sentinel standing in for negative infinity. Any mask entry
/// at or below this value blocks its key entirely: the softmax assigns it
/// probability exactly 0.0 instead of relying on `exp` underflow.
pub const MASK_BLOCKED: f64 = -1e9;

/// Returns `true` when an additive mask entry means "prevent from attending".
#[inline]
pub fn is_blocked(mask_value: f64) -> bool {
    mask_value <= MASK_BLOCKED
}

const PAR_FLOP_THRESHOLD: usize = 32 * 1024;

// ---------------------------------------------------------------------------
// matmul

/// `out[m,n] = a[m,k] @ b[k,n]`, single-threaded.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
        matmul_row(&a[i * k..(i + 1) * k], b, n, out_row);
    }
}

/// `out[m,n] = a[m,k] @ b[k,n]`, rows split across the rayon pool.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_exact_mut(n)
        .enumerate()
        .for_each(|(i, out_row)| matmul_row(&a[i * k..(i + 1) * k], b, n, out_row));
}

#[inline]
fn matmul_row(a_row: &[f64], b: &[f64], n: usize, out_row: &mut [f64]) {
    out_row.fill(0.0);
    // k-outer / j-inner keeps both b and out accesses unit-stride.
    for (aik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
        if *aik == 0.0 {
            continue;
        }
        for (o, bkj) in out_row.iter_mut().zip(b_row) {
            *o += aik * bkj;
        }
    }
}

pub fn matmul_auto(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if m > 1 && m * k * n >= PAR_FLOP_THRESHOLD {
        return matmul_par(a, b, m, k, n, out);
    }
    matmul_seq(a, b, m, k, n, out)
}

// ---------------------------------------------------------------------------
// transpose

pub fn transpose(a: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

// ---------------------------------------------------------------------------
// layer norm

/// Row-wise normalization to zero mean / unit variance (no affine part).
/// Writes the per-row `1/sqrt(var + eps)` into `inv_std` for the backward
/// pass. A constant row normalizes to all zeros thanks to `eps`.
pub fn layer_norm_seq(x: &[f64], rows: usize, cols: usize, eps: f64, out: &mut [f64], inv_std: &mut [f64]) {
    for i in 0..rows {
        layer_norm_row(
            &x[i * cols..(i + 1) * cols],
            eps,
            &mut out[i * cols..(i + 1) * cols],
            &mut inv_std[i],
        );
    }
}

#[cfg(feature = "parallel")]
pub fn layer_norm_par(x: &[f64], rows: usize, cols: usize, eps: f64, out: &mut [f64], inv_std: &mut [f64]) {
    let _ = rows;
    out.par_chunks_exact_mut(cols)
        .zip(inv_std.par_iter_mut())
        .enumerate()
        .for_each(|(i, (out_row, inv))| {
            layer_norm_row(&x[i * cols..(i + 1) * cols], eps, out_row, inv);
        });
}

#[inline]
fn layer_norm_row(row: &[f64], eps: f64, out_row: &mut [f64], inv_std: &mut f64) {
    let k = row.len() as f64;
    let mean = row.iter().sum::<f64>() / k;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    let inv = 1.0 / (var + eps).sqrt();
    *inv_std = inv;
    for (o, v) in out_row.iter_mut().zip(row) {
        *o = (v - mean) * inv;
    }
}

pub fn layer_norm_auto(x: &[f64], rows: usize, cols: usize, eps: f64, out: &mut [f64], inv_std: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if rows > 1 && rows * cols >= PAR_FLOP_THRESHOLD {
        return layer_norm_par(x, rows, cols, eps, out, inv_std);
    }
    layer_norm_seq(x, rows, cols, eps, out, inv_std)
}

/// Backward of [`layer_norm_seq`]: `dx` from upstream `dy`, the normalized
/// output `y`, and the saved `inv_std`.
pub fn layer_norm_backward(dy: &[f64], y: &[f64], inv_std: &[f64], rows: usize, cols: usize, dx: &mut [f64]) {
    let k = cols as f64;
    for i in 0..rows {
        let dy_row = &dy[i * cols..(i + 1) * cols];
        let y_row = &y[i * cols..(i + 1) * cols];
        let mean_dy = dy_row.iter().sum::<f64>() / k;
        let mean_dy_y = dy_row.iter().zip(y_row).map(|(d, v)| d * v).sum::<f64>() / k;
        let inv = inv_std[i];
        for j in 0..cols {
            dx[i * cols + j] += inv * (dy_row[j] - mean_dy - y_row[j] * mean_dy_y);
        }
    }
}

// ---------------------------------------------------------------------------
// gelu

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

/// Derivative of the tanh-form GELU above.
#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu_seq(x: &[f64], out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = gelu_scalar(*v);
    }
}

#[cfg(feature = "parallel")]
pub fn gelu_par(x: &[f64], out: &mut [f64]) {
    out.par_iter_mut()
        .zip(x.par_iter())
        .for_each(|(o, v)| *o = gelu_scalar(*v));
}

pub fn gelu_auto(x: &[f64], out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if x.len() >= PAR_FLOP_THRESHOLD {
        return gelu_par(x, out);
    }
    gelu_seq(x, out)
}

// ---------------------------------------------------------------------------
// masked softmax

/// Row-wise softmax under an additive mask.
///
/// `mask` has either `rows` rows (one per logit row) or a single row that is
/// broadcast. Blocked keys (entries `<= MASK_BLOCKED`) get probability
/// exactly 0.0; other entries are added to the logits before normalization.
/// A fully blocked row produces all zeros and its index is appended to
/// `fully_masked`.
pub fn masked_softmax_seq(
    x: &[f64],
    mask: &[f64],
    rows: usize,
    cols: usize,
    mask_rows: usize,
    out: &mut [f64],
    fully_masked: &mut Vec<usize>,
) {
    for i in 0..rows {
        let mask_row = mask_row(mask, cols, mask_rows, i);
        let all_blocked = softmax_row(&x[i * cols..(i + 1) * cols], mask_row, &mut out[i * cols..(i + 1) * cols]);
        if all_blocked {
            fully_masked.push(i);
        }
    }
}

#[cfg(feature = "parallel")]
pub fn masked_softmax_par(
    x: &[f64],
    mask: &[f64],
    rows: usize,
    cols: usize,
    mask_rows: usize,
    out: &mut [f64],
    fully_masked: &mut Vec<usize>,
) {
    let _ = rows;
    let flags: Vec<usize> = out
        .par_chunks_exact_mut(cols)
        .enumerate()
        .filter_map(|(i, out_row)| {
            let mask_row = mask_row(mask, cols, mask_rows, i);
            softmax_row(&x[i * cols..(i + 1) * cols], mask_row, out_row).then_some(i)
        })
        .collect();
    fully_masked.extend(flags);
}

#[inline]
fn mask_row(mask: &[f64], cols: usize, mask_rows: usize, i: usize) -> &[f64] {
    let r = if mask_rows == 1 { 0 } else { i };
    &mask[r * cols..(r + 1) * cols]
}

/// Returns `true` if the row was fully blocked.
fn softmax_row(x: &[f64], mask: &[f64], out: &mut [f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (v, m) in x.iter().zip(mask) {
        if !is_blocked(*m) && v + m > max {
            max = v + m;
        }
    }
    if max == f64::NEG_INFINITY {
        out.fill(0.0);
        return true;
    }
    let mut sum = 0.0;
    for ((o, v), m) in out.iter_mut().zip(x).zip(mask) {
        if is_blocked(*m) {
            *o = 0.0;
        } else {
            *o = (v + m - max).exp();
            sum += *o;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    false
}

pub fn masked_softmax_auto(
    x: &[f64],
    mask: &[f64],
    rows: usize,
    cols: usize,
    mask_rows: usize,
    out: &mut [f64],
    fully_masked: &mut Vec<usize>,
) {
    #[cfg(feature = "parallel")]
    if rows > 1 && rows * cols >= PAR_FLOP_THRESHOLD {
        return masked_softmax_par(x, mask, rows, cols, mask_rows, out, fully_masked);
    }
    masked_softmax_seq(x, mask, rows, cols, mask_rows, out, fully_masked)
}

/// Backward of softmax given its own output `y`: `dx = y * (dy - sum(dy * y))`
/// per row. Masked keys have `y = 0`, so their gradient is exactly zero.
pub fn softmax_backward(dy: &[f64], y: &[f64], rows: usize, cols: usize, dx: &mut [f64]) {
    for i in 0..rows {
        let dy_row = &dy[i * cols..(i + 1) * cols];
        let y_row = &y[i * cols..(i + 1) * cols];
        let dot: f64 = dy_row.iter().zip(y_row).map(|(d, v)| d * v).sum();
        for j in 0..cols {
            dx[i * cols + j] += y_row[j] * (dy_row[j] - dot);
        }
    }
}

// ---------------------------------------------------------------------------
// label-smoothed cross entropy

/// Smoothed target distribution: `q_j = smoothing / V + (1 - smoothing) * [j == target]`.
/// Per-row loss is `logsumexp(x) - sum_j q_j x_j`; rows with `active[i] == false`
/// contribute nothing. Returns `(total_loss, active_count)` where `total_loss`
/// is the sum over active rows (callers divide for the mean).
pub fn cross_entropy_forward(
    logits: &[f64],
    targets: &[u32],
    active: &[bool],
    smoothing: f64,
    rows: usize,
    cols: usize,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..rows {
        if !active[i] {
            continue;
        }
        let row = &logits[i * cols..(i + 1) * cols];
        let lse = log_sum_exp(row);
        let mean_x = row.iter().sum::<f64>() / cols as f64;
        let t = targets[i] as usize;
        total += lse - (1.0 - smoothing) * row[t] - smoothing * mean_x;
        count += 1;
    }
    (total, count)
}

/// Gradient of the summed loss w.r.t. the logits: `p_j - q_j` per active row,
/// scaled by `upstream`.
pub fn cross_entropy_backward(
    logits: &[f64],
    targets: &[u32],
    active: &[bool],
    smoothing: f64,
    rows: usize,
    cols: usize,
    upstream: f64,
    dx: &mut [f64],
) {
    let uniform = smoothing / cols as f64;
    for i in 0..rows {
        if !active[i] {
            continue;
        }
        let row = &logits[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let t = targets[i] as usize;
        for j in 0..cols {
            let p = (row[j] - max).exp() / sum;
            let q = uniform + if j == t { 1.0 - smoothing } else { 0.0 };
            dx[i * cols + j] += upstream * (p - q);
        }
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// dropout

/// Inverted-dropout multipliers: 0.0 with probability `rate`, otherwise
/// `1 / (1 - rate)`. Deterministic in `seed`.
pub fn dropout_mask(len: usize, rate: f64, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        // I3 @ X == X for any 3x3 X.
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let x = vec![2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 1.5, 7.0];
        let mut out = vec![0.0; 9];
        matmul_seq(&eye, &x, 3, 3, 3, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn matmul_hand_oracle() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        let mut out = vec![0.0; 4];
        matmul_seq(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn matmul_par_matches_seq_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (33, 17, 29);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut seq = vec![0.0; m * n];
        let mut par = vec![0.0; m * n];
        matmul_seq(&a, &b, m, k, n, &mut seq);
        matmul_par(&a, &b, m, k, n, &mut par);
        assert_eq!(seq, par);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = vec![3.0; 5];
        let mut out = vec![0.0; 5];
        let mut inv = vec![0.0; 1];
        layer_norm_seq(&x, 1, 5, 1e-6, &mut out, &mut inv);
        assert!(out.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn softmax_uniform_logits() {
        let x = vec![1.0; 4];
        let mask = vec![0.0; 4];
        let mut out = vec![0.0; 4];
        let mut flags = Vec::new();
        masked_softmax_seq(&x, &mask, 1, 4, 1, &mut out, &mut flags);
        for v in out {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert!(flags.is_empty());
    }

    #[test]
    fn softmax_single_unmasked_key() {
        let x = vec![1.0, 1.0];
        let mask = vec![0.0, MASK_BLOCKED];
        let mut out = vec![0.0; 2];
        let mut flags = Vec::new();
        masked_softmax_seq(&x, &mask, 1, 2, 1, &mut out, &mut flags);
        assert_eq!(out, vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_scalar_oracle() {
        // Independent exponential-normalization oracle for [0.5, 1.5, -0.5].
        let x = vec![0.5, 1.5, -0.5];
        let mask = vec![0.0; 3];
        let mut out = vec![0.0; 3];
        let mut flags = Vec::new();
        masked_softmax_seq(&x, &mask, 1, 3, 1, &mut out, &mut flags);
        let exps: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        for (got, e) in out.iter().zip(&exps) {
            assert!((got - e / z).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_flagged() {
        let x = vec![1.0, 2.0];
        let mask = vec![MASK_BLOCKED, MASK_BLOCKED];
        let mut out = vec![9.0; 2];
        let mut flags = Vec::new();
        masked_softmax_seq(&x, &mask, 1, 2, 1, &mut out, &mut flags);
        assert_eq!(out, vec![0.0, 0.0]);
        assert_eq!(flags, vec![0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let v = 11;
        let logits = vec![0.3; v];
        let (loss, count) = cross_entropy_forward(&logits, &[4], &[true], 0.0, 1, v);
        assert_eq!(count, 1);
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_peaked_logits_go_to_zero() {
        let mut logits = vec![0.0; 8];
        logits[3] = 50.0;
        let (loss, _) = cross_entropy_forward(&logits, &[3], &[true], 0.0, 1, 8);
        assert!(loss < 1e-12);
    }

    #[test]
    fn cross_entropy_smoothed_formula_oracle() {
        // 3 classes, logits [2,0,0], target 0, smoothing 0.1; direct formula.
        let logits = vec![2.0, 0.0, 0.0];
        let (loss, _) = cross_entropy_forward(&logits, &[0], &[true], 0.1, 1, 3);
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        let logp: Vec<f64> = logits.iter().map(|v| v - z.ln()).collect();
        let q = [0.1 / 3.0 + 0.9, 0.1 / 3.0, 0.1 / 3.0];
        let expect: f64 = -q.iter().zip(&logp).map(|(qi, lp)| qi * lp).sum::<f64>();
        assert!((loss - expect).abs() <= 1e-12);
    }

    #[test]
    fn dropout_mask_deterministic_and_inverted() {
        let a = dropout_mask(1000, 0.3, 42);
        let b = dropout_mask(1000, 0.3, 42);
        assert_eq!(a, b);
        let keep = 1.0 / 0.7;
        assert!(a.iter().all(|&v| v == 0.0 || (v - keep).abs() < 1e-15));
        let zeros = a.iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 200 && zeros < 400);
    }
}
