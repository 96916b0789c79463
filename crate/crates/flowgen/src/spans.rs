//! Statistical span vocabulary: t-statistic scored bigrams/trigrams plus all
//! unigrams, and greedy longest-match segmentation of token sequences.
//!
//! The t statistic tests an n-gram against the independence hypothesis:
//! `t = (p(w) - p'(w)) / sqrt(sigma^2 / N)` with `p(w) = Count(w)/N`,
//! `p'(w)` the product of the constituent unigram probabilities, and
//! `sigma^2 = p(w) (1 - p(w))`. `N` is the total number of n-grams of that
//! order in the corpus.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Sliding-window n-gram counts for n in 1..=3. Windows never cross document
/// boundaries.
#[derive(Debug, Clone, Default)]
pub struct NgramCounts {
    pub unigrams: HashMap<u32, u64>,
    pub bigrams: HashMap<(u32, u32), u64>,
    pub trigrams: HashMap<(u32, u32, u32), u64>,
    /// Total n-gram occurrences per order, indexed by `n - 1`.
    pub totals: [u64; 3],
}

impl NgramCounts {
    pub fn count_doc(&mut self, tokens: &[u32]) {
        for &t in tokens {
            *self.unigrams.entry(t).or_insert(0) += 1;
        }
        self.totals[0] += tokens.len() as u64;
        for w in tokens.windows(2) {
            *self.bigrams.entry((w[0], w[1])).or_insert(0) += 1;
        }
        self.totals[1] += tokens.len().saturating_sub(1) as u64;
        for w in tokens.windows(3) {
            *self.trigrams.entry((w[0], w[1], w[2])).or_insert(0) += 1;
        }
        self.totals[2] += tokens.len().saturating_sub(2) as u64;
    }

    pub fn merge(&mut self, other: NgramCounts) {
        for (k, v) in other.unigrams {
            *self.unigrams.entry(k).or_insert(0) += v;
        }
        for (k, v) in other.bigrams {
            *self.bigrams.entry(k).or_insert(0) += v;
        }
        for (k, v) in other.trigrams {
            *self.trigrams.entry(k).or_insert(0) += v;
        }
        for n in 0..3 {
            self.totals[n] += other.totals[n];
        }
    }
}

pub fn count_ngrams_seq<D: AsRef<[u32]>>(docs: &[D]) -> NgramCounts {
    let mut counts = NgramCounts::default();
    for doc in docs {
        counts.count_doc(doc.as_ref());
    }
    counts
}

/// Shard the corpus across the rayon pool and merge the per-shard maps.
/// Addition commutes, so the result is identical to the sequential count.
#[cfg(feature = "parallel")]
pub fn count_ngrams_par<D: AsRef<[u32]> + Sync>(docs: &[D]) -> NgramCounts {
    docs.par_chunks(256.max(docs.len() / (4 * rayon::current_num_threads()).max(1)))
        .map(count_ngrams_seq)
        .reduce(NgramCounts::default, |mut a, b| {
            a.merge(b);
            a
        })
}

pub fn count_ngrams<D: AsRef<[u32]> + Sync>(docs: &[D]) -> NgramCounts {
    #[cfg(feature = "parallel")]
    if docs.len() >= 512 {
        return count_ngrams_par(docs);
    }
    count_ngrams_seq(docs)
}

/// An n-gram of order 1..=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ngram {
    Uni(u32),
    Bi(u32, u32),
    Tri(u32, u32, u32),
}

impl Ngram {
    pub fn order(&self) -> usize {
        match self {
            Ngram::Uni(_) => 1,
            Ngram::Bi(..) => 2,
            Ngram::Tri(..) => 3,
        }
    }

    pub fn ids(&self) -> Vec<u32> {
        match *self {
            Ngram::Uni(a) => vec![a],
            Ngram::Bi(a, b) => vec![a, b],
            Ngram::Tri(a, b, c) => vec![a, b, c],
        }
    }
}

impl fmt::Display for Ngram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids = self.ids();
        let strs: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
        write!(f, "{}", strs.join(" "))
    }
}

/// T-statistic of `w` under the independence null hypothesis.
///
/// Degenerate case: `p(w) = 1` makes the variance zero; the score is defined
/// as `+inf` so such n-grams always rank first. Unseen n-grams are an error.
pub fn t_statistic(w: &Ngram, counts: &NgramCounts) -> Result<f64> {
    let n_total = counts.totals[w.order() - 1];
    let count = match *w {
        Ngram::Uni(a) => counts.unigrams.get(&a).copied(),
        Ngram::Bi(a, b) => counts.bigrams.get(&(a, b)).copied(),
        Ngram::Tri(a, b, c) => counts.trigrams.get(&(a, b, c)).copied(),
    };
    let Some(count) = count else {
        return Err(Error::data(format!("n-gram [{w}] not present in counts")));
    };
    let p = count as f64 / n_total as f64;
    if p >= 1.0 {
        return Ok(f64::INFINITY);
    }
    let n1 = counts.totals[0] as f64;
    let p_indep: f64 = w
        .ids()
        .iter()
        .map(|id| counts.unigrams.get(id).copied().unwrap_or(0) as f64 / n1)
        .product();
    let sigma_sq = p * (1.0 - p);
    Ok((p - p_indep) / (sigma_sq / n_total as f64).sqrt())
}

/// The span vocabulary: every unigram, plus the top bigrams/trigrams by
/// `(-t, lexicographic id tuple)`.
#[derive(Debug, Clone)]
pub struct SpanVocab {
    unigrams: HashSet<u32>,
    bigrams: HashSet<(u32, u32)>,
    trigrams: HashSet<(u32, u32, u32)>,
    pub bigram_top: usize,
    pub trigram_top: usize,
    /// Selected members with their scores, in rank order (audit trail and
    /// file serialization).
    pub scores: Vec<(Ngram, f64)>,
}

impl SpanVocab {
    pub fn contains_bigram(&self, a: u32, b: u32) -> bool {
        self.bigrams.contains(&(a, b))
    }

    pub fn contains_trigram(&self, a: u32, b: u32, c: u32) -> bool {
        self.trigrams.contains(&(a, b, c))
    }

    pub fn contains_unigram(&self, a: u32) -> bool {
        self.unigrams.contains(&a)
    }

    pub fn len(&self) -> usize {
        self.unigrams.len() + self.bigrams.len() + self.trigrams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rank bigrams and trigrams by `(-t, id tuple)`, truncate to the limits,
/// and include every observed unigram unconditionally.
pub fn build_span_vocab(counts: &NgramCounts, bigram_top: usize, trigram_top: usize) -> Result<SpanVocab> {
    let mut scores = Vec::new();

    let mut unigrams: Vec<u32> = counts.unigrams.keys().copied().collect();
    unigrams.sort_unstable();
    for &u in &unigrams {
        scores.push((Ngram::Uni(u), t_statistic(&Ngram::Uni(u), counts)?));
    }

    let mut bi: Vec<((u32, u32), f64)> = counts
        .bigrams
        .keys()
        .map(|&k| Ok((k, t_statistic(&Ngram::Bi(k.0, k.1), counts)?)))
        .collect::<Result<_>>()?;
    bi.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    bi.truncate(bigram_top);

    let mut tri: Vec<((u32, u32, u32), f64)> = counts
        .trigrams
        .keys()
        .map(|&k| Ok((k, t_statistic(&Ngram::Tri(k.0, k.1, k.2), counts)?)))
        .collect::<Result<_>>()?;
    tri.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    tri.truncate(trigram_top);

    let bigrams: HashSet<(u32, u32)> = bi.iter().map(|(k, _)| *k).collect();
    let trigrams: HashSet<(u32, u32, u32)> = tri.iter().map(|(k, _)| *k).collect();
    scores.extend(bi.into_iter().map(|(k, t)| (Ngram::Bi(k.0, k.1), t)));
    scores.extend(tri.into_iter().map(|(k, t)| (Ngram::Tri(k.0, k.1, k.2), t)));

    Ok(SpanVocab {
        unigrams: unigrams.into_iter().collect(),
        bigrams,
        trigrams,
        bigram_top,
        trigram_top,
        scores,
    })
}

/// Span start indices over a token sequence. The final span implicitly ends
/// at the sequence length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanBoundaries(pub Vec<usize>);

impl SpanBoundaries {
    /// Check tiling: starts at 0, strictly increasing, span lengths in 1..=3.
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if seq_len == 0 || self.0.is_empty() || self.0[0] != 0 {
            return Err(Error::data(format!(
                "invalid span boundaries {:?} for length {seq_len}",
                self.0
            )));
        }
        for w in self.0.windows(2) {
            if !(1..=3).contains(&(w[1].wrapping_sub(w[0]))) {
                return Err(Error::data(format!("bad span step in {:?}", self.0)));
            }
        }
        let last = *self.0.last().unwrap();
        if !(1..=3).contains(&(seq_len - last)) {
            return Err(Error::data(format!(
                "final span of {:?} does not tile length {seq_len}",
                self.0
            )));
        }
        Ok(())
    }

    /// Index of the span containing target position `j`.
    pub fn span_of(&self, j: usize) -> usize {
        match self.0.binary_search(&j) {
            Ok(i) => i,
            Err(i) => i - 1,
        }
    }

    /// Start of the span containing target position `j`.
    pub fn span_start(&self, j: usize) -> usize {
        self.0[self.span_of(j)]
    }
}

/// Greedy left-to-right longest match: at each cursor try the trigram, then
/// the bigram, then fall back to a unigram (unconditionally, so unseen
/// tokens still segment).
pub fn segment_spans(tokens: &[u32], vocab: &SpanVocab) -> SpanBoundaries {
    let mut starts = Vec::new();
    let mut c = 0;
    while c < tokens.len() {
        starts.push(c);
        if c + 3 <= tokens.len() && vocab.contains_trigram(tokens[c], tokens[c + 1], tokens[c + 2]) {
            c += 3;
        } else if c + 2 <= tokens.len() && vocab.contains_bigram(tokens[c], tokens[c + 1]) {
            c += 2;
        } else {
            c += 1;
        }
    }
    SpanBoundaries(starts)
}

// ---------------------------------------------------------------------------
// file format

/// Write the span vocabulary as text: `#`-prefixed header lines carrying the
/// selection limits and a corpus hash, then one member per line as
/// `order<TAB>ids<TAB>t-score`.
pub fn save_span_vocab(path: &Path, vocab: &SpanVocab, corpus_hash: &str) -> Result<()> {
    let mut out = String::new();
    out.push_str("# span-vocab v1\n");
    out.push_str(&format!(
        "# bigram_top {} trigram_top {}\n",
        vocab.bigram_top, vocab.trigram_top
    ));
    out.push_str(&format!("# corpus_sha256 {corpus_hash}\n"));
    for (ngram, t) in &vocab.scores {
        out.push_str(&format!("{}\t{}\t{}\n", ngram.order(), ngram, t));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_span_vocab(path: &Path) -> Result<SpanVocab> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read span vocab {}: {e}", path.display())))?;
    let mut bigram_top = 0;
    let mut trigram_top = 0;
    let mut scores = Vec::new();
    let mut unigrams = HashSet::new();
    let mut bigrams = HashSet::new();
    let mut trigrams = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let fields: Vec<&str> = rest.split_whitespace().collect();
            if fields.first() == Some(&"bigram_top") && fields.len() >= 4 {
                bigram_top = fields[1].parse().map_err(|_| bad_line(path, lineno))?;
                trigram_top = fields[3].parse().map_err(|_| bad_line(path, lineno))?;
            }
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(order), Some(ids_str), Some(t_str)) = (cols.next(), cols.next(), cols.next())
        else {
            return Err(bad_line(path, lineno));
        };
        let ids: Vec<u32> = ids_str
            .split_whitespace()
            .map(|s| s.parse::<u32>().map_err(|_| bad_line(path, lineno)))
            .collect::<Result<_>>()?;
        let t: f64 = if t_str == "inf" {
            f64::INFINITY
        } else {
            t_str.parse().map_err(|_| bad_line(path, lineno))?
        };
        let ngram = match (order, ids.as_slice()) {
            ("1", [a]) => {
                unigrams.insert(*a);
                Ngram::Uni(*a)
            }
            ("2", [a, b]) => {
                bigrams.insert((*a, *b));
                Ngram::Bi(*a, *b)
            }
            ("3", [a, b, c]) => {
                trigrams.insert((*a, *b, *c));
                Ngram::Tri(*a, *b, *c)
            }
            _ => return Err(bad_line(path, lineno)),
        };
        scores.push((ngram, t));
    }
    Ok(SpanVocab {
        unigrams,
        bigrams,
        trigrams,
        bigram_top,
        trigram_top,
        scores,
    })
}

fn bad_line(path: &Path, lineno: usize) -> Error {
    Error::data(format!(
        "malformed span vocab line {} in {}",
        lineno + 1,
        path.display()
    ))
}
