//! Additive attention masks for the three flows.
//!
//! Orientation: rows are queries, columns are keys. An entry of 0 means the
//! key can be attended; [`MASK_BLOCKED`] prevents it.
//!
//! - contextual `M_C` over `X = [S'; T']`: source queries see every source
//!   key; the target query at index `i` sees all source keys and target
//!   keys `<= i`.
//! - word flow `M_W` over keys `[X; A_W]`: query `i` sees source keys,
//!   target keys `< i`, and only its own `[ATTN]` key.
//! - span flow `M_S` over keys `[X; A_S]`: query `j` inside the span
//!   starting at `b` sees source keys, target keys `< b`, and only its own
//!   `[ATTN]` key.

use std::sync::Arc;

use flowgen_tensor::kernels::MASK_BLOCKED;
use flowgen_tensor::Tensor;

use crate::error::{Error, Result};
use crate::spans::SpanBoundaries;

/// The three additive mask matrices for one example layout.
#[derive(Debug, Clone)]
pub struct FlowMasks {
    /// `(n+m) x (n+m)`
    pub contextual: Arc<Tensor>,
    /// `(m) x (n+m+m)`
    pub word: Arc<Tensor>,
    /// `(m) x (n+m+m)`
    pub span: Arc<Tensor>,
}

/// Pure function of the layout `(|S'|, |T'|, span boundaries)`.
pub fn build_masks(n: usize, m: usize, boundaries: &SpanBoundaries) -> Result<FlowMasks> {
    if m == 0 {
        return Err(Error::data("mask construction requires a non-empty target"));
    }
    boundaries.validate(m)?;

    let x_len = n + m;
    let mut contextual = vec![MASK_BLOCKED; x_len * x_len];
    for q in 0..x_len {
        for k in 0..x_len {
            let allowed = if q < n {
                k < n
            } else {
                k < n || (k - n) <= (q - n)
            };
            if allowed {
                contextual[q * x_len + k] = 0.0;
            }
        }
    }

    let kv_len = x_len + m;
    let mut word = vec![MASK_BLOCKED; m * kv_len];
    let mut span = vec![MASK_BLOCKED; m * kv_len];
    for q in 0..m {
        let b = boundaries.span_start(q);
        for k in 0..kv_len {
            let word_ok = if k < n {
                true
            } else if k < x_len {
                (k - n) < q
            } else {
                (k - x_len) == q
            };
            if word_ok {
                word[q * kv_len + k] = 0.0;
            }
            let span_ok = if k < n {
                true
            } else if k < x_len {
                (k - n) < b
            } else {
                (k - x_len) == q
            };
            if span_ok {
                span[q * kv_len + k] = 0.0;
            }
        }
    }

    Ok(FlowMasks {
        contextual: Arc::new(Tensor::from_vec(vec![x_len, x_len], contextual)?),
        word: Arc::new(Tensor::from_vec(vec![m, kv_len], word)?),
        span: Arc::new(Tensor::from_vec(vec![m, kv_len], span)?),
    })
}

/// Render a mask as a 0/1 text grid (1 = can attend), queries as rows.
pub fn render_mask_grid(mask: &Tensor) -> String {
    let (rows, cols) = mask.dims2().expect("masks are 2-D");
    let mut out = String::with_capacity(rows * (cols * 2 + 1));
    for i in 0..rows {
        let row: Vec<&str> = mask.data()[i * cols..(i + 1) * cols]
            .iter()
            .map(|&v| if v <= MASK_BLOCKED { "0" } else { "1" })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn allowed(mask: &Tensor, q: usize, k: usize) -> bool {
        let (_, cols) = mask.dims2().unwrap();
        mask.data()[q * cols + k] > MASK_BLOCKED
    }

    #[test]
    fn worked_example_n2_m2_single_span() {
        // |S'| = 2, |T'| = 2, one span [0, 2).
        let masks = build_masks(2, 2, &SpanBoundaries(vec![0])).unwrap();
        // word-flow query 1 sees {s0, s1, t0, own symbol}
        let w = &masks.word;
        assert!(allowed(w, 1, 0) && allowed(w, 1, 1));
        assert!(allowed(w, 1, 2));
        assert!(!allowed(w, 1, 3)); // own target position hidden
        assert!(!allowed(w, 1, 4)); // other symbol hidden
        assert!(allowed(w, 1, 5));
        // span-flow query 1 (span starts at 0) sees {s0, s1, own symbol} only
        let s = &masks.span;
        assert!(allowed(s, 1, 0) && allowed(s, 1, 1));
        assert!(!allowed(s, 1, 2) && !allowed(s, 1, 3));
        assert!(!allowed(s, 1, 4));
        assert!(allowed(s, 1, 5));
    }

    #[test]
    fn single_word_target_makes_word_and_span_masks_equal() {
        let masks = build_masks(3, 1, &SpanBoundaries(vec![0])).unwrap();
        assert_eq!(masks.word.data(), masks.span.data());
    }

    #[test]
    fn contextual_target_row_key_count() {
        // target row i allows exactly |S'| + i + 1 keys
        let (n, m) = (4, 3);
        let masks = build_masks(n, m, &SpanBoundaries(vec![0, 2])).unwrap();
        let (_, cols) = masks.contextual.dims2().unwrap();
        for i in 0..m {
            let q = n + i;
            let count = (0..cols).filter(|&k| allowed(&masks.contextual, q, k)).count();
            assert_eq!(count, n + i + 1);
        }
        // source rows attend exactly the source block
        for q in 0..n {
            let count = (0..cols).filter(|&k| allowed(&masks.contextual, q, k)).count();
            assert_eq!(count, n);
        }
    }

    #[test]
    fn out_of_range_boundary_is_error() {
        assert!(build_masks(2, 2, &SpanBoundaries(vec![0, 5])).is_err());
        assert!(build_masks(2, 2, &SpanBoundaries(vec![1])).is_err());
        assert!(build_masks(2, 0, &SpanBoundaries(vec![])).is_err());
    }

    #[test]
    fn masks_match_reachability_oracle_on_random_layouts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let n = rng.random_range(1..=12usize);
            let m = rng.random_range(1..=12usize);
            // random tiling of m by spans of length 1..=3
            let mut starts = vec![0usize];
            let mut c = 0usize;
            loop {
                let step = rng.random_range(1..=3usize).min(m - c);
                c += step;
                if c >= m {
                    break;
                }
                starts.push(c);
            }
            let b = SpanBoundaries(starts.clone());
            let masks = build_masks(n, m, &b).unwrap();

            // independent reachability enumeration
            for q in 0..m {
                let span_start = *starts.iter().rev().find(|&&s| s <= q).unwrap();
                for k in 0..n + m + m {
                    let word_expect = k < n || (k < n + m && k - n < q) || k == n + m + q;
                    let span_expect =
                        k < n || (k < n + m && k - n < span_start) || k == n + m + q;
                    assert_eq!(allowed(&masks.word, q, k), word_expect, "word q={q} k={k}");
                    assert_eq!(allowed(&masks.span, q, k), span_expect, "span q={q} k={k}");
                }
            }
            for q in 0..n + m {
                for k in 0..n + m {
                    let expect = if q < n { k < n } else { k < n || k - n <= q - n };
                    assert_eq!(allowed(&masks.contextual, q, k), expect);
                }
            }
        }
    }

    #[test]
    fn grid_rendering_is_binary() {
        let masks = build_masks(1, 2, &SpanBoundaries(vec![0, 1])).unwrap();
        let grid = render_mask_grid(&masks.contextual);
        assert_eq!(grid, "1 0 0\n1 1 0\n1 1 1\n");
    }
}
