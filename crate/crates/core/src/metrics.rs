//! Corpus caption metrics: BLEU-n, ROUGE-L and CIDEr-D.
//!
//! All functions work on any ordered token type, so string tokens and ids
//! give identical scores under a consistent relabeling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub type NGramCounts<T> = BTreeMap<Vec<T>, usize>;

/// Counts of every n-gram of order `n` in `tokens`.
pub fn ngram_counts<T: Ord + Clone>(tokens: &[T], n: usize) -> NGramCounts<T> {
    let mut counts = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.to_vec()).or_insert(0) += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub name: String,
    pub corpus: f64,
    pub per_instance: Vec<f64>,
}

/// Matched (clipped) and total candidate n-grams of order `n`.
fn clipped<T: Ord + Clone>(cand: &[T], refs: &[Vec<T>], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let mut max_ref: NGramCounts<T> = BTreeMap::new();
    for r in refs {
        for (g, k) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(k);
        }
    }
    let matched = c
        .iter()
        .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`; ties go to the shorter one.
fn closest_ref_len<T>(c: usize, refs: &[Vec<T>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn bleu_from_counts(matched: &[usize], totals: &[usize], c: usize, r: usize) -> f64 {
    if c == 0 || matched.iter().zip(totals).any(|(&m, &t)| m == 0 || t == 0) {
        return 0.0;
    }
    let log_p: f64 = matched
        .iter()
        .zip(totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / matched.len() as f64;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * log_p.exp()
}

/// Corpus BLEU-`n` with uniform weights, clipped counts pooled over the
/// corpus and no smoothing. Per-instance values are sentence BLEU.
pub fn bleu<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>], n: usize) -> CorpusScore {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    assert_eq!(candidates.len(), references.len(), "one reference set per candidate");
    let mut matched = vec![0; n];
    let mut totals = vec![0; n];
    let (mut c_total, mut r_total) = (0, 0);
    let mut per_instance = Vec::with_capacity(candidates.len());
    for (cand, refs) in candidates.iter().zip(references) {
        let mut m = vec![0; n];
        let mut t = vec![0; n];
        for k in 1..=n {
            (m[k - 1], t[k - 1]) = clipped(cand, refs, k);
            matched[k - 1] += m[k - 1];
            totals[k - 1] += t[k - 1];
        }
        let r = closest_ref_len(cand.len(), refs);
        c_total += cand.len();
        r_total += r;
        per_instance.push(bleu_from_counts(&m, &t, cand.len(), r));
    }
    CorpusScore {
        name: format!("BLEU-{n}"),
        corpus: bleu_from_counts(&matched, &totals, c_total, r_total),
        per_instance,
    }
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

fn rouge_f(lcs: usize, c: usize, r: usize) -> f64 {
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / c as f64;
    let rec = lcs as f64 / r as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// ROUGE-L F-measure (β = 1.2), best over references; corpus is the mean.
pub fn rouge_l<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> CorpusScore {
    assert_eq!(candidates.len(), references.len(), "one reference set per candidate");
    let per_instance: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| {
            refs.iter()
                .map(|r| rouge_f(lcs_len(c, r), c.len(), r.len()))
                .fold(0.0, f64::max)
        })
        .collect();
    CorpusScore {
        name: "ROUGE-L".into(),
        corpus: mean(&per_instance),
        per_instance,
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub const CIDER_SIGMA: f64 = 6.0;

fn tfidf<T: Ord + Clone>(counts: &NGramCounts<T>, df: &NGramCounts<T>, log_n: f64) -> BTreeMap<Vec<T>, f64> {
    counts
        .iter()
        .map(|(g, &k)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g.clone(), k as f64 * (log_n - d.ln()))
        })
        .collect()
}

fn cosine<T: Ord>(a: &BTreeMap<Vec<T>, f64>, b: &BTreeMap<Vec<T>, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr-D: per order, tf-idf cosine between candidate and each reference
/// (idf from reference document frequencies), times the Gaussian length
/// penalty, averaged over references; mean over orders 1..=`n_max`, ×10.
pub fn cider<T: Ord + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    n_max: usize,
    sigma: f64,
) -> CorpusScore {
    assert_eq!(candidates.len(), references.len(), "one reference set per candidate");
    let log_n = (candidates.len() as f64).ln();
    let mut per_instance = vec![0.0; candidates.len()];
    for n in 1..=n_max {
        let mut df: NGramCounts<T> = BTreeMap::new();
        for refs in references {
            let mut seen: Vec<Vec<T>> = refs.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            seen.sort();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (i, (cand, refs)) in candidates.iter().zip(references).enumerate() {
            let vc = tfidf(&ngram_counts(cand, n), &df, log_n);
            let mut acc = 0.0;
            for r in refs {
                let vr = tfidf(&ngram_counts(r, n), &df, log_n);
                let delta = cand.len() as f64 - r.len() as f64;
                acc += cosine(&vc, &vr) * (-(delta * delta) / (2.0 * sigma * sigma)).exp();
            }
            if !refs.is_empty() {
                per_instance[i] += acc / refs.len() as f64;
            }
        }
    }
    for v in &mut per_instance {
        *v *= 10.0 / n_max as f64;
    }
    CorpusScore {
        name: "CIDEr".into(),
        corpus: mean(&per_instance),
        per_instance,
    }
}

/// The standard report: BLEU-1..4, ROUGE-L and CIDEr.
pub fn caption_scores<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Vec<CorpusScore> {
    let mut out: Vec<CorpusScore> = (1..=4).map(|n| bleu(candidates, references, n)).collect();
    out.push(rouge_l(candidates, references));
    out.push(cider(candidates, references, 4, CIDER_SIGMA));
    out
}

/// `{metric: {"corpus": v, "per_instance": [...]}}`
pub fn report_json(scores: &[CorpusScore]) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = scores
        .iter()
        .map(|s| {
            (
                s.name.clone(),
                serde_json::json!({ "corpus": s.corpus, "per_instance": s.per_instance }),
            )
        })
        .collect();
    serde_json::Value::Object(map)
}

pub fn report_table(scores: &[CorpusScore]) -> String {
    let mut out = String::from("metric     corpus\n");
    for s in scores {
        out.push_str(&format!("{:<10} {:.4}\n", s.name, s.corpus));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn ngram_totals() {
        let t = toks("a b a b");
        assert_eq!(ngram_counts(&t, 2).values().sum::<usize>(), 3);
        assert_eq!(ngram_counts(&t, 2)[&toks("a b")], 2);
        assert!(ngram_counts(&t, 5).is_empty());
    }

    #[test]
    fn lcs_basic() {
        assert_eq!(lcs_len(&toks("a b c d"), &toks("a c b d")), 3);
        assert_eq!(lcs_len(&toks("a b"), &toks("c d")), 0);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        let s = bleu(&[vec![]], &[vec![toks("a b")]], 1);
        assert_eq!(s.corpus, 0.0);
        assert_eq!(rouge_l(&[vec![]], &[vec![toks("a b")]]).corpus, 0.0);
    }
}
