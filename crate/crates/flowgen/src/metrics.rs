//! Token-level generation metrics: ROUGE-N F1, ROUGE-L F1, corpus BLEU with
//! add-one smoothing, and Distinct-N.
//!
//! Comparisons run over whitespace tokens after lowercasing (the eval
//! harness lowercases; these functions treat tokens opaquely). Scores live
//! in [0, 1] and empty hypotheses score zero rather than erroring. BLEU uses
//! add-one smoothing for orders >= 2: `p_n = (clipped + 1) / (total + 1)`.

use std::collections::HashMap;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// One hypothesis with its reference(s).
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(hypothesis: Vec<String>, references: Vec<Vec<String>>) -> Self {
        assert!(!references.is_empty(), "at least one reference required");
        EvalPair {
            hypothesis,
            references,
        }
    }
}

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], u64> {
    let mut map = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Clipped n-gram overlap F1; multiple references take the best F1.
pub fn rouge_n(pair: &EvalPair, n: usize) -> f64 {
    assert!(n >= 1);
    let hyp = ngram_counts(&pair.hypothesis, n);
    let hyp_total: u64 = hyp.values().sum();
    let mut best = 0.0f64;
    for reference in &pair.references {
        let rf = ngram_counts(reference, n);
        let ref_total: u64 = rf.values().sum();
        if hyp_total == 0 || ref_total == 0 {
            continue;
        }
        let overlap: u64 = hyp
            .iter()
            .map(|(gram, &c)| c.min(rf.get(gram).copied().unwrap_or(0)))
            .sum();
        let p = overlap as f64 / hyp_total as f64;
        let r = overlap as f64 / ref_total as f64;
        best = best.max(f1(p, r));
    }
    best
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F1 (beta = 1); multi-reference takes the best.
pub fn rouge_l(pair: &EvalPair) -> f64 {
    let hyp = &pair.hypothesis;
    let mut best = 0.0f64;
    for reference in &pair.references {
        if hyp.is_empty() || reference.is_empty() {
            continue;
        }
        let lcs = lcs_len(hyp, reference) as f64;
        let p = lcs / hyp.len() as f64;
        let r = lcs / reference.len() as f64;
        best = best.max(f1(p, r));
    }
    best
}

/// Corpus BLEU: geometric mean of clipped n-gram precisions up to `max_n`
/// with a brevity penalty. The reference length per pair is the one closest
/// to the hypothesis length (ties prefer the shorter).
pub fn bleu(pairs: &[EvalPair], max_n: usize) -> f64 {
    assert!(max_n >= 1);
    let mut clipped = vec![0u64; max_n];
    let mut total = vec![0u64; max_n];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for pair in pairs {
        hyp_len += pair.hypothesis.len() as u64;
        let closest = pair
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| {
                let diff = (l as i64 - pair.hypothesis.len() as i64).abs();
                (diff, l)
            })
            .unwrap_or(0);
        ref_len += closest as u64;
        for n in 1..=max_n {
            let hyp = ngram_counts(&pair.hypothesis, n);
            total[n - 1] += hyp.values().sum::<u64>();
            let mut best: HashMap<&[String], u64> = HashMap::new();
            for reference in &pair.references {
                for (gram, c) in ngram_counts(reference, n) {
                    let slot = best.entry(gram).or_insert(0);
                    *slot = (*slot).max(c);
                }
            }
            clipped[n - 1] += hyp
                .iter()
                .map(|(gram, &c)| c.min(best.get(gram).copied().unwrap_or(0)))
                .sum::<u64>();
        }
    }
    if hyp_len == 0 || total[0] == 0 || clipped[0] == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        // add-one smoothing for n >= 2
        let (c, t) = if n == 1 {
            (clipped[0] as f64, total[0] as f64)
        } else {
            (clipped[n - 1] as f64 + 1.0, total[n - 1] as f64 + 1.0)
        };
        if c == 0.0 {
            return 0.0;
        }
        log_sum += (c / t).ln() / max_n as f64;
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * log_sum.exp()
}

/// Unique n-grams across all hypotheses divided by total n-grams; defined 0
/// when no n-grams exist.
pub fn distinct_n(hypotheses: &[Vec<String>], n: usize) -> f64 {
    assert!(n >= 1);
    let mut seen: HashMap<&[String], u64> = HashMap::new();
    let mut total = 0u64;
    for hyp in hypotheses {
        if hyp.len() >= n {
            for w in hyp.windows(n) {
                *seen.entry(w).or_insert(0) += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

/// Which metrics a report includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Rouge1,
    Rouge2,
    RougeL,
    Bleu4,
    Distinct1,
    Distinct2,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Rouge1 => "rouge-1",
            Metric::Rouge2 => "rouge-2",
            Metric::RougeL => "rouge-l",
            Metric::Bleu4 => "bleu-4",
            Metric::Distinct1 => "distinct-1",
            Metric::Distinct2 => "distinct-2",
        }
    }

    pub fn parse(name: &str) -> Option<Metric> {
        match name.trim().to_lowercase().as_str() {
            "rouge-1" | "rouge1" | "rg-1" => Some(Metric::Rouge1),
            "rouge-2" | "rouge2" | "rg-2" => Some(Metric::Rouge2),
            "rouge-l" | "rougel" | "rg-l" => Some(Metric::RougeL),
            "bleu-4" | "bleu4" | "bleu" => Some(Metric::Bleu4),
            "distinct-1" | "distinct1" => Some(Metric::Distinct1),
            "distinct-2" | "distinct2" => Some(Metric::Distinct2),
        _ => None,
        }
    }

    pub const ALL: [Metric; 6] = [
        Metric::Rouge1,
        Metric::Rouge2,
        Metric::RougeL,
        Metric::Bleu4,
        Metric::Distinct1,
        Metric::Distinct2,
    ];
}

pub const BLEU_SMOOTHING_NOTE: &str = "bleu smoothing: add-one on n>=2 precisions";

/// Corpus scores plus per-pair values for the pairwise metrics.
#[derive(Debug, Clone)]
pub struct ScoreReport {
    pub corpus: Vec<(Metric, f64)>,
    /// Per-pair (metric, value) rows for ROUGE metrics and sentence BLEU.
    pub per_pair: Vec<Vec<(Metric, f64)>>,
    pub pair_count: usize,
}

impl ScoreReport {
    pub fn corpus_value(&self, metric: Metric) -> Option<f64> {
        self.corpus.iter().find(|(m, _)| *m == metric).map(|(_, v)| *v)
    }

    /// Structured text rendering: header, then `metric  value  pair-count`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("# eval report\n");
        out.push_str(&format!("# {BLEU_SMOOTHING_NOTE}\n"));
        for (metric, value) in &self.corpus {
            out.push_str(&format!("{}\t{:.6}\t{}\n", metric.name(), value, self.pair_count));
        }
        out
    }

    pub fn render_per_pair_tsv(&self) -> String {
        let mut out = String::new();
        let metrics: Vec<Metric> = self
            .per_pair
            .first()
            .map(|row| row.iter().map(|(m, _)| *m).collect())
            .unwrap_or_default();
        out.push_str("pair");
        for m in &metrics {
            out.push('\t');
            out.push_str(m.name());
        }
        out.push('\n');
        for (i, row) in self.per_pair.iter().enumerate() {
            out.push_str(&i.to_string());
            for (_, v) in row {
                out.push_str(&format!("\t{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

fn per_pair_scores(pair: &EvalPair, metrics: &[Metric]) -> Vec<(Metric, f64)> {
    metrics
        .iter()
        .map(|&m| {
            let v = match m {
                Metric::Rouge1 => rouge_n(pair, 1),
                Metric::Rouge2 => rouge_n(pair, 2),
                Metric::RougeL => rouge_l(pair),
                Metric::Bleu4 => bleu(std::slice::from_ref(pair), 4),
                Metric::Distinct1 => distinct_n(std::slice::from_ref(&pair.hypothesis), 1),
                Metric::Distinct2 => distinct_n(std::slice::from_ref(&pair.hypothesis), 2),
            };
            (m, v)
        })
        .collect()
}

/// Score a corpus. Per-pair work fans out over rayon (ordered collect keeps
/// the reduction deterministic); corpus values aggregate sequentially.
pub fn score_corpus(pairs: &[EvalPair], metrics: &[Metric]) -> ScoreReport {
    #[cfg(feature = "parallel")]
    let per_pair: Vec<Vec<(Metric, f64)>> = pairs
        .par_iter()
        .map(|p| per_pair_scores(p, metrics))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let per_pair: Vec<Vec<(Metric, f64)>> = pairs.iter().map(|p| per_pair_scores(p, metrics)).collect();

    let hyps: Vec<Vec<String>> = pairs.iter().map(|p| p.hypothesis.clone()).collect();
    let corpus = metrics
        .iter()
        .map(|&m| {
            let v = match m {
                Metric::Rouge1 => mean(per_pair.iter().zip(metrics_index(metrics, m))),
                Metric::Rouge2 => mean(per_pair.iter().zip(metrics_index(metrics, m))),
                Metric::RougeL => mean(per_pair.iter().zip(metrics_index(metrics, m))),
                Metric::Bleu4 => bleu(pairs, 4),
                Metric::Distinct1 => distinct_n(&hyps, 1),
                Metric::Distinct2 => distinct_n(&hyps, 2),
            };
            (m, v)
        })
        .collect();
    ScoreReport {
        corpus,
        per_pair,
        pair_count: pairs.len(),
    }
}

fn metrics_index(metrics: &[Metric], m: Metric) -> std::iter::Repeat<usize> {
    let idx = metrics.iter().position(|&x| x == m).unwrap();
    std::iter::repeat(idx)
}

fn mean<'a, I>(rows: I) -> f64
where
    I: Iterator<Item = (&'a Vec<(Metric, f64)>, usize)>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, idx) in rows {
        total += row[idx].1;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
