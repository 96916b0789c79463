//! Training-example assembly: multi-granularity fragment sampling, target
//! noising, artificial-symbol layout, and token-budget batching.
//!
//! Unpaired documents go through fragment sampling: random fragments are cut
//! out of the input until the length budget `floor(gamma * |S|)` is spent,
//! the fragments (in original order) become the target `T`, and the
//! remainder becomes the residual source `S'`. Paired data maps directly to
//! `(S', T)` with an `[EOS]` appended to the target.
//!
//! The noised target `T'` feeds the model input; the clean `T` stays as the
//! training target. Span boundaries are computed over `T'` (segmentation
//! runs after noising).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::corpus::{read_varint, write_varint};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, stream};
use crate::spans::{segment_spans, SpanBoundaries, SpanVocab};
use crate::vocab::{ATTN, EOS, MASK, NUM_RESERVED, PAD};

/// Inclusive integer-uniform fragment length distribution with a mixture
/// probability.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthDist {
    pub low: usize,
    pub high: usize,
    pub prob: f64,
}

/// Fragment sampling hyperparameters: the length budget fraction and the
/// length-distribution mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentSamplingConfig {
    pub gamma: f64,
    pub distributions: Vec<LengthDist>,
    pub seed: u64,
}

impl Default for FragmentSamplingConfig {
    fn default() -> Self {
        FragmentSamplingConfig {
            gamma: 0.25,
            distributions: vec![
                LengthDist { low: 1, high: 4, prob: 0.4 },
                LengthDist { low: 4, high: 32, prob: 0.6 },
            ],
            seed: 0,
        }
    }
}

impl FragmentSamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::usage(format!("gamma must be in (0, 1), got {}", self.gamma)));
        }
        if self.distributions.is_empty() {
            return Err(Error::usage("at least one length distribution required"));
        }
        let mut total = 0.0;
        for d in &self.distributions {
            if d.low < 1 || d.high < d.low {
                return Err(Error::usage(format!(
                    "bad length distribution bounds ({}, {})",
                    d.low, d.high
                )));
            }
            total += d.prob;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::usage(format!(
                "distribution probabilities sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Random target-side word replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    /// Per-position replacement probability.
    pub rate: f64,
    pub seed: u64,
    /// Replacements draw uniformly from non-reserved ids `[6, vocab_size)`.
    pub vocab_size: u32,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::usage(format!("noise rate must be in [0, 1], got {}", self.rate)));
        }
        if self.rate > 0.0 && self.vocab_size <= NUM_RESERVED {
            return Err(Error::usage("noising needs at least one non-reserved vocab id"));
        }
        Ok(())
    }
}

/// A sampled fragment: `len` tokens starting at `start` in the original S.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FragmentSpan {
    pub start: usize,
    pub len: usize,
}

/// Output of [`sample_fragments`].
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentSample {
    pub s_prime: Vec<u32>,
    pub t: Vec<u32>,
    /// Non-overlapping, sorted by original start position.
    pub spans: Vec<FragmentSpan>,
    /// Which mixture component supplied the fragment lengths.
    pub dist_index: usize,
}

/// Cut random fragments out of `s` until the budget `floor(gamma * |s|)` is
/// spent.
///
/// One length distribution is drawn per call with its mixture probability.
/// Each fragment length draw is clipped to the remaining budget, the start
/// is uniform over placements that do not overlap earlier fragments, and a
/// draw with no feasible placement shrinks until one fits (length 1 always
/// does while budget remains). A zero budget degenerates to a single
/// length-1 fragment.
pub fn sample_fragments(
    s: &[u32],
    config: &FragmentSamplingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FragmentSample> {
    config.validate()?;
    let n = s.len();
    if n < 2 {
        return Err(Error::data(format!("fragment sampling needs |S| >= 2, got {n}")));
    }
    let budget = ((config.gamma * n as f64).floor() as usize).max(1);

    let pick = rng.random::<f64>();
    let mut acc = 0.0;
    let mut dist_index = config.distributions.len() - 1;
    for (i, d) in config.distributions.iter().enumerate() {
        acc += d.prob;
        if pick < acc {
            dist_index = i;
            break;
        }
    }
    let dist = &config.distributions[dist_index];

    let mut occupied = vec![false; n];
    let mut spans: Vec<FragmentSpan> = Vec::new();
    let mut remaining = budget;
    while remaining > 0 {
        let drawn = rng.random_range(dist.low..=dist.high).min(remaining);
        let mut len = drawn;
        let placed = loop {
            let feasible: Vec<usize> = (0..=n.saturating_sub(len))
                .filter(|&start| occupied[start..start + len].iter().all(|o| !o))
                .collect();
            if let Some(&start) = (!feasible.is_empty())
                .then(|| &feasible[rng.random_range(0..feasible.len())])
            {
                break FragmentSpan { start, len };
            }
            // No room at this length; shrink the draw.
            len -= 1;
            debug_assert!(len > 0, "length-1 placement must exist while budget remains");
        };
        occupied[placed.start..placed.start + placed.len].fill(true);
        remaining -= placed.len;
        spans.push(placed);
    }
    spans.sort_by_key(|f| f.start);

    let mut s_prime = Vec::with_capacity(n - budget);
    let mut t = Vec::with_capacity(budget);
    for (i, &tok) in s.iter().enumerate() {
        if occupied[i] {
            t.push(tok);
        } else {
            s_prime.push(tok);
        }
    }
    Ok(FragmentSample {
        s_prime,
        t,
        spans,
        dist_index,
    })
}

/// Replace each position independently with probability `rate` by a uniform
/// non-reserved id (which may equal the original by chance). Returns the
/// noised sequence and the positions where the replacement draw fired.
pub fn apply_noise(t: &[u32], config: &NoiseConfig, rng: &mut ChaCha8Rng) -> (Vec<u32>, Vec<usize>) {
    let mut out = t.to_vec();
    let mut fired = Vec::new();
    if config.rate == 0.0 {
        return (out, fired);
    }
    for (i, slot) in out.iter_mut().enumerate() {
        if rng.random::<f64>() < config.rate {
            *slot = rng.random_range(NUM_RESERVED..config.vocab_size);
            fired.push(i);
        }
    }
    (out, fired)
}

/// How a paired target is corrupted during fine-tuning.
#[derive(Debug, Clone, Copy)]
pub enum TargetCorruption<'a> {
    /// Random word replacement; the loss covers every target position.
    Noise(&'a NoiseConfig),
    /// `[MASK]` replacement; the loss covers only the masked positions.
    Mask { prob: f64, seed: u64 },
}

/// One assembled training instance.
///
/// Layout invariants: positions are contiguous over `[S'; T']`
/// (`0..n` source, `n..n+m` target); the artificial word/span symbols share
/// the position id of the target token they predict; segments are 0 for
/// source rows and 1 for target and symbol rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub s_prime: Vec<u32>,
    pub t_clean: Vec<u32>,
    pub t_noised: Vec<u32>,
    pub fragment_spans: Vec<FragmentSpan>,
    pub boundaries: SpanBoundaries,
    /// Position ids for the `[S'; T']` rows.
    pub positions: Vec<u32>,
    /// Segment ids for the `[S'; T']` rows.
    pub segments: Vec<u8>,
    /// Which target positions contribute to the loss.
    pub loss_mask: Vec<bool>,
    /// Target positions where `t_noised` actually differs from `t_clean`.
    pub corrupted_positions: Vec<usize>,
}

impl TrainingExample {
    pub fn source_len(&self) -> usize {
        self.s_prime.len()
    }

    pub fn target_len(&self) -> usize {
        self.t_clean.len()
    }

    /// `|A_W| == |A_S| == |T'|` by construction.
    pub fn a_len(&self) -> usize {
        self.t_clean.len()
    }

    pub fn x_len(&self) -> usize {
        self.s_prime.len() + self.t_noised.len()
    }

    /// Position ids of the target rows (shared by the artificial symbols).
    pub fn target_positions(&self) -> &[u32] {
        &self.positions[self.s_prime.len()..]
    }

    fn finish(
        s_prime: Vec<u32>,
        t_clean: Vec<u32>,
        t_noised: Vec<u32>,
        fragment_spans: Vec<FragmentSpan>,
        loss_mask: Vec<bool>,
        span_vocab: &SpanVocab,
    ) -> TrainingExample {
        let n = s_prime.len();
        let m = t_noised.len();
        let boundaries = segment_spans(&t_noised, span_vocab);
        let positions = (0..(n + m) as u32).collect();
        let mut segments = vec![0u8; n];
        segments.extend(std::iter::repeat(1u8).take(m));
        let corrupted_positions = t_clean
            .iter()
            .zip(&t_noised)
            .enumerate()
            .filter_map(|(i, (c, nz))| (c != nz).then_some(i))
            .collect();
        TrainingExample {
            s_prime,
            t_clean,
            t_noised,
            fragment_spans,
            boundaries,
            positions,
            segments,
            loss_mask,
            corrupted_positions,
        }
    }
}

/// Assemble a pretraining example from an unpaired document: sample
/// fragments, noise the target, segment spans over `T'`.
///
/// `example_key` separates the random streams of different examples drawn
/// from the same configs.
pub fn assemble_example(
    s: &[u32],
    span_vocab: &SpanVocab,
    frag_config: &FragmentSamplingConfig,
    noise_config: &NoiseConfig,
    example_key: u64,
) -> Result<TrainingExample> {
    noise_config.validate()?;
    let mut frag_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(frag_config.seed, stream::FRAGMENTS, example_key, 0));
    let sample = sample_fragments(s, frag_config, &mut frag_rng)?;
    let mut noise_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(noise_config.seed, stream::NOISE, example_key, 0));
    let (t_noised, _) = apply_noise(&sample.t, noise_config, &mut noise_rng);
    let loss_mask = vec![true; sample.t.len()];
    Ok(TrainingExample::finish(
        sample.s_prime,
        sample.t,
        t_noised,
        sample.spans,
        loss_mask,
        span_vocab,
    ))
}

/// Assemble a fine-tuning example from a (source, target) pair. An `[EOS]`
/// is appended to the target before corruption so the model learns to stop.
pub fn assemble_paired(
    source: &[u32],
    target: &[u32],
    span_vocab: &SpanVocab,
    corruption: TargetCorruption<'_>,
    example_key: u64,
) -> Result<TrainingExample> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::data("paired example with an empty side"));
    }
    let mut t_clean = target.to_vec();
    t_clean.push(EOS);
    let (t_noised, loss_mask) = match corruption {
        TargetCorruption::Noise(cfg) => {
            cfg.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::NOISE, example_key, 0));
            let (noised, _) = apply_noise(&t_clean, cfg, &mut rng);
            let mask = vec![true; t_clean.len()];
            (noised, mask)
        }
        TargetCorruption::Mask { prob, seed } => {
            if !(0.0..=1.0).contains(&prob) {
                return Err(Error::usage(format!("mask probability must be in [0, 1], got {prob}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::MASKING, example_key, 0));
            let mut noised = t_clean.clone();
            let mut mask = vec![false; t_clean.len()];
            for (slot, m) in noised.iter_mut().zip(mask.iter_mut()) {
                if rng.random::<f64>() < prob {
                    *slot = MASK;
                    *m = true;
                }
            }
            (noised, mask)
        }
    };
    Ok(TrainingExample::finish(
        source.to_vec(),
        t_clean,
        t_noised,
        Vec::new(),
        loss_mask,
        span_vocab,
    ))
}

/// Assemble one example per document, sequentially.
pub fn assemble_corpus_seq(
    docs: &[Vec<u32>],
    span_vocab: &SpanVocab,
    frag_config: &FragmentSamplingConfig,
    noise_config: &NoiseConfig,
    base_key: u64,
) -> Result<Vec<TrainingExample>> {
    docs.iter()
        .enumerate()
        .map(|(i, d)| {
            assemble_example(d, span_vocab, frag_config, noise_config, derive_seed(base_key, 0, i as u64, 0))
        })
        .collect()
}

/// Parallel assembly. Per-example seeds derive from `(base_key, index)`, so
/// the result is identical to [`assemble_corpus_seq`] for any thread count.
#[cfg(feature = "parallel")]
pub fn assemble_corpus_par(
    docs: &[Vec<u32>],
    span_vocab: &SpanVocab,
    frag_config: &FragmentSamplingConfig,
    noise_config: &NoiseConfig,
    base_key: u64,
) -> Result<Vec<TrainingExample>> {
    docs.par_iter()
        .enumerate()
        .map(|(i, d)| {
            assemble_example(d, span_vocab, frag_config, noise_config, derive_seed(base_key, 0, i as u64, 0))
        })
        .collect()
}

pub fn assemble_corpus(
    docs: &[Vec<u32>],
    span_vocab: &SpanVocab,
    frag_config: &FragmentSamplingConfig,
    noise_config: &NoiseConfig,
    base_key: u64,
) -> Result<Vec<TrainingExample>> {
    #[cfg(feature = "parallel")]
    {
        assemble_corpus_par(docs, span_vocab, frag_config, noise_config, base_key)
    }
    #[cfg(not(feature = "parallel"))]
    {
        assemble_corpus_seq(docs, span_vocab, frag_config, noise_config, base_key)
    }
}

// ---------------------------------------------------------------------------
// batching

/// A padded batch. Matrices are row-major `examples.len() x width` with
/// `[PAD]` filling; the loss mask never covers padding.
#[derive(Debug, Clone)]
pub struct Batch {
    pub examples: Vec<TrainingExample>,
    pub max_x: usize,
    pub max_t: usize,
    /// `[S'; T']` ids padded to `max_x`.
    pub x_ids: Vec<u32>,
    /// `[ATTN]` rows padded to `max_t` (word flow).
    pub a_w_ids: Vec<u32>,
    /// `[ATTN]` rows padded to `max_t` (span flow).
    pub a_s_ids: Vec<u32>,
    /// Clean targets padded to `max_t`.
    pub targets: Vec<u32>,
    pub positions: Vec<u32>,
    pub segments: Vec<u8>,
    /// `(source_len, target_len)` per example.
    pub lengths: Vec<(usize, usize)>,
    /// Loss mask padded to `max_t`.
    pub loss_mask: Vec<bool>,
}

impl Batch {
    fn build(examples: Vec<TrainingExample>) -> Batch {
        let max_x = examples.iter().map(|e| e.x_len()).max().unwrap_or(0);
        let max_t = examples.iter().map(|e| e.target_len()).max().unwrap_or(0);
        let rows = examples.len();
        let mut x_ids = vec![PAD; rows * max_x];
        let mut a_w_ids = vec![PAD; rows * max_t];
        let mut a_s_ids = vec![PAD; rows * max_t];
        let mut targets = vec![PAD; rows * max_t];
        let mut positions = vec![0u32; rows * max_x];
        let mut segments = vec![0u8; rows * max_x];
        let mut loss_mask = vec![false; rows * max_t];
        let mut lengths = Vec::with_capacity(rows);
        for (r, e) in examples.iter().enumerate() {
            let n = e.source_len();
            let m = e.target_len();
            lengths.push((n, m));
            let xrow = &mut x_ids[r * max_x..r * max_x + n + m];
            xrow[..n].copy_from_slice(&e.s_prime);
            xrow[n..].copy_from_slice(&e.t_noised);
            positions[r * max_x..r * max_x + n + m].copy_from_slice(&e.positions);
            segments[r * max_x..r * max_x + n + m].copy_from_slice(&e.segments);
            for j in 0..m {
                a_w_ids[r * max_t + j] = ATTN;
                a_s_ids[r * max_t + j] = ATTN;
                targets[r * max_t + j] = e.t_clean[j];
                loss_mask[r * max_t + j] = e.loss_mask[j];
            }
        }
        Batch {
            examples,
            max_x,
            max_t,
            x_ids,
            a_w_ids,
            a_s_ids,
            targets,
            positions,
            segments,
            lengths,
            loss_mask,
        }
    }

    /// Padded token count: rows times the padded `[S'; T']` width.
    pub fn padded_tokens(&self) -> usize {
        self.examples.len() * self.max_x
    }
}

/// Greedy in-order packing under a padded-token budget.
pub fn batch(examples: Vec<TrainingExample>, max_tokens: usize) -> Result<Vec<Batch>> {
    let mut batches = Vec::new();
    let mut current: Vec<TrainingExample> = Vec::new();
    let mut current_max = 0usize;
    for e in examples {
        let x = e.x_len();
        if x > max_tokens {
            return Err(Error::data(format!(
                "example of {x} tokens exceeds the batch budget {max_tokens}"
            )));
        }
        let would_max = current_max.max(x);
        if !current.is_empty() && (current.len() + 1) * would_max > max_tokens {
            batches.push(Batch::build(std::mem::take(&mut current)));
            current_max = 0;
        }
        current_max = current_max.max(x);
        current.push(e);
    }
    if !current.is_empty() {
        batches.push(Batch::build(current));
    }
    Ok(batches)
}

// ---------------------------------------------------------------------------
// assembled-example cache

const EXAMPLE_MAGIC: &[u8; 4] = b"FGEX";
const EXAMPLE_VERSION: u32 = 1;

pub fn write_examples(path: &Path, examples: &[TrainingExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EXAMPLE_MAGIC)?;
    w.write_all(&EXAMPLE_VERSION.to_le_bytes())?;
    w.write_all(&(examples.len() as u64).to_le_bytes())?;
    for e in examples {
        write_varint(&mut w, e.s_prime.len() as u64)?;
        write_varint(&mut w, e.t_clean.len() as u64)?;
        for &id in e.s_prime.iter().chain(&e.t_clean).chain(&e.t_noised) {
            write_varint(&mut w, id as u64)?;
        }
        write_varint(&mut w, e.fragment_spans.len() as u64)?;
        for f in &e.fragment_spans {
            write_varint(&mut w, f.start as u64)?;
            write_varint(&mut w, f.len as u64)?;
        }
        write_varint(&mut w, e.boundaries.0.len() as u64)?;
        for &b in &e.boundaries.0 {
            write_varint(&mut w, b as u64)?;
        }
        for &p in &e.positions {
            write_varint(&mut w, p as u64)?;
        }
        for &s in &e.segments {
            write_varint(&mut w, s as u64)?;
        }
        for &m in &e.loss_mask {
            write_varint(&mut w, m as u64)?;
        }
        write_varint(&mut w, e.corrupted_positions.len() as u64)?;
        for &p in &e.corrupted_positions {
            write_varint(&mut w, p as u64)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_examples(path: &Path) -> Result<Vec<TrainingExample>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EXAMPLE_MAGIC {
        return Err(Error::data("not an example cache file (bad magic)"));
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf)?;
    if u32::from_le_bytes(vbuf) != EXAMPLE_VERSION {
        return Err(Error::data("unsupported example cache version"));
    }
    let mut cbuf = [0u8; 8];
    r.read_exact(&mut cbuf)?;
    let count = u64::from_le_bytes(cbuf);
    let mut examples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n = read_varint(&mut r)? as usize;
        let m = read_varint(&mut r)? as usize;
        let mut ids = |k: usize| -> Result<Vec<u32>> {
            (0..k).map(|_| Ok(read_varint(&mut r)? as u32)).collect()
        };
        let s_prime = ids(n)?;
        let t_clean = ids(m)?;
        let t_noised = ids(m)?;
        let frag_count = read_varint(&mut r)? as usize;
        let mut fragment_spans = Vec::with_capacity(frag_count);
        for _ in 0..frag_count {
            fragment_spans.push(FragmentSpan {
                start: read_varint(&mut r)? as usize,
                len: read_varint(&mut r)? as usize,
            });
        }
        let b_count = read_varint(&mut r)? as usize;
        let mut starts = Vec::with_capacity(b_count);
        for _ in 0..b_count {
            starts.push(read_varint(&mut r)? as usize);
        }
        let mut positions = Vec::with_capacity(n + m);
        for _ in 0..n + m {
            positions.push(read_varint(&mut r)? as u32);
        }
        let mut segments = Vec::with_capacity(n + m);
        for _ in 0..n + m {
            segments.push(read_varint(&mut r)? as u8);
        }
        let mut loss_mask = Vec::with_capacity(m);
        for _ in 0..m {
            loss_mask.push(read_varint(&mut r)? != 0);
        }
        let c_count = read_varint(&mut r)? as usize;
        let mut corrupted_positions = Vec::with_capacity(c_count);
        for _ in 0..c_count {
            corrupted_positions.push(read_varint(&mut r)? as usize);
        }
        examples.push(TrainingExample {
            s_prime,
            t_clean,
            t_noised,
            fragment_spans,
            boundaries: SpanBoundaries(starts),
            positions,
            segments,
            loss_mask,
            corrupted_positions,
        });
    }
    Ok(examples)
}

/// Human-readable dump of assembled examples for golden tests.
pub fn dump_examples_text(examples: &[TrainingExample]) -> String {
    fn join<T: ToString>(v: &[T]) -> String {
        v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
    }
    let mut out = String::new();
    for (i, e) in examples.iter().enumerate() {
        out.push_str(&format!("example {i}\n"));
        out.push_str(&format!("  s_prime: {}\n", join(&e.s_prime)));
        out.push_str(&format!("  t_clean: {}\n", join(&e.t_clean)));
        out.push_str(&format!("  t_noised: {}\n", join(&e.t_noised)));
        let frags: Vec<String> = e
            .fragment_spans
            .iter()
            .map(|f| format!("{}+{}", f.start, f.len))
            .collect();
        out.push_str(&format!("  fragments: {}\n", frags.join(" ")));
        out.push_str(&format!("  boundaries: {}\n", join(&e.boundaries.0)));
        out.push_str(&format!("  positions: {}\n", join(&e.positions)));
        out.push_str(&format!("  segments: {}\n", join(&e.segments)));
        let mask: Vec<u8> = e.loss_mask.iter().map(|&b| b as u8).collect();
        out.push_str(&format!("  loss_mask: {}\n", join(&mask)));
    }
    out
}
