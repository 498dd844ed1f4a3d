//! Independent recounts shared by the metric tests and the acceptance run.
#![allow(dead_code)]

use std::collections::BTreeMap;

use hrig_core::embeddings::EmbeddingTable;
use hrig_core::lexicon::{build_lexica, Lexica};

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

pub fn grams(tokens: &[String], n: usize) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *out.entry(tokens[i..i + n].join(" ")).or_insert(0.0) += 1.0;
        }
    }
    out
}

/// Direct recount: clipped matches per order, closest reference lengths.
pub fn bleu_oracle(corpus: &[(&str, Vec<&str>)]) -> f64 {
    let mut matched = [0.0; 4];
    let mut total = [0.0; 4];
    let (mut c, mut r) = (0.0, 0.0);
    for (hyp, refs) in corpus {
        let h = words(hyp);
        let rs: Vec<Vec<String>> = refs.iter().map(|x| words(x)).collect();
        for n in 1..=4 {
            for (g, k) in grams(&h, n) {
                let best = rs
                    .iter()
                    .map(|x| grams(x, n).get(&g).copied().unwrap_or(0.0))
                    .fold(0.0, f64::max);
                matched[n - 1] += k.min(best);
                total[n - 1] += k;
            }
        }
        c += h.len() as f64;
        let mut best_len = rs[0].len();
        for x in &rs {
            let (d, bd) = (x.len().abs_diff(h.len()), best_len.abs_diff(h.len()));
            if d < bd || (d == bd && x.len() < best_len) {
                best_len = x.len();
            }
        }
        r += best_len as f64;
    }
    if matched.contains(&0.0) {
        return 0.0;
    }
    let log_p: f64 = (0..4).map(|n| (matched[n] / total[n]).ln()).sum::<f64>() / 4.0;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_p.exp()
}

/// Spreadsheet-style tf-idf recount of CIDEr-D.
pub fn cider_oracle(corpus: &[(&str, Vec<&str>)]) -> f64 {
    let n_docs = corpus.len() as f64;
    let mut total = 0.0;
    for (hyp, refs) in corpus {
        let h = words(hyp);
        let mut per_n = 0.0;
        for n in 1..=4 {
            let df = |g: &str| -> f64 {
                corpus
                    .iter()
                    .filter(|(_, rs)| rs.iter().any(|x| grams(&words(x), n).contains_key(g)))
                    .count() as f64
            };
            let vec = |t: &[String]| -> BTreeMap<String, f64> {
                grams(t, n)
                    .into_iter()
                    .map(|(g, tf)| {
                        let w = tf * (n_docs.ln() - df(&g).max(1.0).ln());
                        (g, w)
                    })
                    .collect()
            };
            let norm = |v: &BTreeMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
            let vh = vec(&h);
            let mut sims = 0.0;
            for x in refs {
                let rt = words(x);
                let vr = vec(&rt);
                let mut dot = 0.0;
                for (g, a) in &vh {
                    if let Some(b) = vr.get(g) {
                        dot += a.min(*b) * b;
                    }
                }
                let (nh, nr) = (norm(&vh), norm(&vr));
                let mut s = if nh != 0.0 && nr != 0.0 { dot / (nh * nr) } else { 0.0 };
                let delta = h.len() as f64 - rt.len() as f64;
                s *= (-(delta * delta) / (2.0 * 36.0)).exp();
                sims += s;
            }
            per_n += sims / refs.len() as f64;
        }
        total += per_n / 4.0 * 10.0;
    }
    total / n_docs
}

pub fn maps(corpus: &[(&str, Vec<&str>)]) -> (BTreeMap<String, String>, BTreeMap<String, Vec<String>>) {
    let mut h = BTreeMap::new();
    let mut r = BTreeMap::new();
    for (i, (hyp, refs)) in corpus.iter().enumerate() {
        let id = format!("v{i}");
        h.insert(id.clone(), hyp.to_string());
        r.insert(id, refs.iter().map(|s| s.to_string()).collect());
    }
    (h, r)
}

pub fn micro_corpus() -> Vec<(&'static str, Vec<&'static str>)> {
    vec![
        (
            "a man is riding a horse on the beach",
            vec![
                "a man is riding a motorcycle",
                "a man rides a horse along the beach",
                "someone is riding",
            ],
        ),
        (
            "the dog is running in the park",
            vec!["a dog is running in a park", "the puppy runs through the grass"],
        ),
        (
            "a woman is slicing a tomato",
            vec![
                "a woman is cutting a tomato",
                "a woman slices tomatoes",
                "a lady is slicing a tomato on a board",
            ],
        ),
    ]
}

// 0.7071 is the table as written, not an approximation of 1/sqrt(2)
#[allow(clippy::approx_constant)]
pub fn mini_table() -> EmbeddingTable {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    EmbeddingTable::from_entries(
        2,
        [
            ("hors", vec![0.0, 1.0]),
            ("man", vec![0.7071, 0.7071]),
            ("motorcycl", vec![1.0, 0.0]),
            ("ride", vec![1.0, 0.0]),
            ("walk", vec![h, h]),
            ("eat", vec![0.0, 1.0]),
            ("dog", vec![-1.0, 0.2]),
        ]
        .into_iter()
        .map(|(t, v)| (t.to_string(), v)),
    )
    .unwrap()
}

pub fn mini_lexica() -> Lexica {
    build_lexica(
        &["a man is riding a motorcycle"],
        &["horse".into(), "dog".into()],
        &["walking".into(), "eating".into()],
    )
    .unwrap()
}
