//! Corpus BLEU-4 and CIDEr-D.
//!
//! BLEU is unsmoothed with corpus-level pooling and closest reference length
//! (shorter wins ties). CIDEr-D follows the common COCO evaluation code:
//! tf-idf n-gram vectors for n = 1..4, clipped hypothesis weights, a gaussian
//! length penalty with [`CIDER_SIGMA`], mean over references, times
//! [`CIDER_SCALE`].

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::lexicon::tokenize;

pub const MAX_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;

type NGram = Vec<String>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NGramStats {
    /// `counts[n - 1]` holds the n-grams of order n
    pub counts: [BTreeMap<NGram, usize>; MAX_N],
    pub length: usize,
}

impl NGramStats {
    pub fn new(tokens: &[String]) -> Self {
        let mut counts: [BTreeMap<NGram, usize>; MAX_N] = Default::default();
        for (k, slot) in counts.iter_mut().enumerate() {
            for w in tokens.windows(k + 1) {
                *slot.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        Self {
            counts,
            length: tokens.len(),
        }
    }

    pub fn of(caption: &str) -> Self {
        Self::new(&tokenize(caption))
    }
}

fn check_corpus<R>(hypotheses: &BTreeMap<String, String>, references: &BTreeMap<String, Vec<R>>) -> Result<()> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for id in hypotheses.keys() {
        match references.get(id) {
            None => return Err(Error::MissingReference(id.clone())),
            Some(r) if r.is_empty() => return Err(Error::NoReferences(id.clone())),
            _ => {}
        }
    }
    Ok(())
}

pub fn bleu4<R: AsRef<str>>(
    hypotheses: &BTreeMap<String, String>,
    references: &BTreeMap<String, Vec<R>>,
) -> Result<f64> {
    check_corpus(hypotheses, references)?;
    let mut matches = [0usize; MAX_N];
    let mut totals = [0usize; MAX_N];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (id, hyp) in hypotheses {
        let h = NGramStats::of(hyp);
        let refs: Vec<NGramStats> = references[id].iter().map(|r| NGramStats::of(r.as_ref())).collect();
        for k in 0..MAX_N {
            for (g, &c) in &h.counts[k] {
                let max_ref = refs
                    .iter()
                    .map(|r| r.counts[k].get(g).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matches[k] += c.min(max_ref);
            }
            totals[k] += h.length.saturating_sub(k);
        }
        hyp_len += h.length;
        ref_len += refs
            .iter()
            .map(|r| r.length)
            .min_by_key(|&l| (l.abs_diff(h.length), l))
            .unwrap_or(0);
    }
    if hyp_len == 0 || (0..MAX_N).any(|k| matches[k] == 0 || totals[k] == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_N)
        .map(|k| (matches[k] as f64 / totals[k] as f64).ln())
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

struct TfIdf {
    vec: [BTreeMap<NGram, f64>; MAX_N],
    norm: [f64; MAX_N],
    length: usize,
}

fn tfidf(stats: &NGramStats, df: &BTreeMap<&NGram, usize>, log_docs: f64) -> TfIdf {
    let mut vec: [BTreeMap<NGram, f64>; MAX_N] = Default::default();
    let mut norm = [0.0; MAX_N];
    for k in 0..MAX_N {
        for (g, &tf) in &stats.counts[k] {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (log_docs - d.ln());
            norm[k] += w * w;
            vec[k].insert(g.clone(), w);
        }
        norm[k] = norm[k].sqrt();
    }
    TfIdf {
        vec,
        norm,
        length: stats.length,
    }
}

fn cider_sim(h: &TfIdf, r: &TfIdf) -> [f64; MAX_N] {
    let delta = h.length as f64 - r.length as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut val = [0.0; MAX_N];
    for k in 0..MAX_N {
        for (g, &wh) in &h.vec[k] {
            if let Some(&wr) = r.vec[k].get(g) {
                val[k] += wh.min(wr) * wr;
            }
        }
        if h.norm[k] != 0.0 && r.norm[k] != 0.0 {
            val[k] /= h.norm[k] * r.norm[k];
        }
        val[k] *= penalty;
    }
    val
}

/// Document frequencies come from the references of the hypothesized videos.
pub fn cider_d<R: AsRef<str>>(
    hypotheses: &BTreeMap<String, String>,
    references: &BTreeMap<String, Vec<R>>,
) -> Result<f64> {
    check_corpus(hypotheses, references)?;
    let ref_stats: Vec<Vec<NGramStats>> = hypotheses
        .keys()
        .map(|id| references[id].iter().map(|r| NGramStats::of(r.as_ref())).collect())
        .collect();
    let mut df: BTreeMap<&NGram, usize> = BTreeMap::new();
    for refs in &ref_stats {
        let seen: BTreeSet<&NGram> = refs
            .iter()
            .flat_map(|r| r.counts.iter().flat_map(|c| c.keys()))
            .collect();
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_docs = (hypotheses.len() as f64).ln();
    let mut total = 0.0;
    for (hyp, refs) in hypotheses.values().zip(&ref_stats) {
        let h = tfidf(&NGramStats::of(hyp), &df, log_docs);
        let mut acc = [0.0; MAX_N];
        for r in refs {
            let s = cider_sim(&h, &tfidf(r, &df, log_docs));
            for k in 0..MAX_N {
                acc[k] += s[k];
            }
        }
        let per_n: f64 = acc.iter().map(|a| a / refs.len() as f64).sum::<f64>() / MAX_N as f64;
        total += per_n * CIDER_SCALE;
    }
    Ok(total / hypotheses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(items: &[(&str, &str, &[&str])]) -> (BTreeMap<String, String>, BTreeMap<String, Vec<String>>) {
        let hyps = items.iter().map(|(id, h, _)| (id.to_string(), h.to_string())).collect();
        let refs = items
            .iter()
            .map(|(id, _, r)| (id.to_string(), r.iter().map(|s| s.to_string()).collect()))
            .collect();
        (hyps, refs)
    }

    #[test]
    fn ngram_totals() {
        let s = NGramStats::of("a b a b c");
        for k in 0..MAX_N {
            assert_eq!(s.counts[k].values().sum::<usize>(), 5 - k);
        }
        assert_eq!(s.counts[1][&vec!["a".to_string(), "b".to_string()]], 2);
        assert!(NGramStats::of("a").counts[1].is_empty());
    }

    #[test]
    fn bleu_perfect_and_zero() {
        let (h, r) = corpus(&[("v", "a man is riding a motorcycle", &["a man is riding a motorcycle"])]);
        assert_eq!(bleu4(&h, &r).unwrap(), 1.0);
        let (h, r) = corpus(&[("v", "a a a a", &["a b c d"])]);
        assert_eq!(bleu4(&h, &r).unwrap(), 0.0);
    }

    #[test]
    fn bleu_brevity_penalty() {
        // precisions all 1, hyp 4 tokens vs closest ref 6
        let (h, r) = corpus(&[("v", "a b c d", &["a b c d e f", "x a b c d e f g h"])]);
        let expected = (1.0f64 - 6.0 / 4.0).exp();
        assert!((bleu4(&h, &r).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn closest_length_tie_takes_shorter() {
        // hyp 5 tokens, refs 4 and 6 tokens: r = 4, so no penalty
        let (h, r) = corpus(&[("v", "a b c d e", &["a b c d", "a b c d e f"])]);
        assert_eq!(bleu4(&h, &r).unwrap(), 1.0);
    }

    #[test]
    fn cider_degenerate_cases() {
        let (h, r) = corpus(&[("v", "a man is riding", &["a man is riding"])]);
        assert_eq!(cider_d(&h, &r).unwrap(), 0.0);
        let (h, r) = corpus(&[("v", "x y z", &["a b c"]), ("w", "p q", &["d e f"])]);
        assert_eq!(cider_d(&h, &r).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        let (h, r) = corpus(&[]);
        assert!(bleu4(&h, &r).is_err());
        assert!(cider_d(&h, &r).is_err());
        let (h, _) = corpus(&[("v", "a", &["a"])]);
        assert!(bleu4(&h, &BTreeMap::<String, Vec<String>>::new()).is_err());
    }
}
