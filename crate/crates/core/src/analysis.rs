//! Decoding diagnostics: confidence per output position, and decoder-gate
//! activity on visual versus non-visual words.

use serde::{Deserialize, Serialize};

use crate::captioner::Captioner;
use crate::error::Result;
use crate::features::VideoFeatures;
use crate::lexicon::{porter_stem, Lexica};
use crate::trainer::MAX_DECODE_LEN;
use crate::vocab::{Vocab, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRow {
    /// 1-based output position
    pub position: usize,
    pub mean_confidence: f64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Visual,
    NonVisual,
}

impl TokenClass {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Visual => "visual",
            Self::NonVisual => "non_visual",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub class: TokenClass,
    pub source_gate_mean: f64,
    pub target_gate_mean: f64,
    pub count: usize,
}

/// Mean probability of the emitted token at each position of greedy
/// captions (EOS included). Positions no caption reaches are omitted.
pub fn confidence_by_position(model: &Captioner, videos: &[VideoFeatures]) -> Result<Vec<ConfidenceRow>> {
    let mut sums = vec![0.0; MAX_DECODE_LEN];
    let mut counts = vec![0usize; MAX_DECODE_LEN];
    for vf in videos {
        let d = model.greedy_decode(vf, MAX_DECODE_LEN)?;
        for (i, c) in d.confidence.iter().enumerate() {
            sums[i] += c;
            counts[i] += 1;
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .enumerate()
        .filter(|(_, (_, &n))| n > 0)
        .map(|(i, (s, &n))| ConfidenceRow {
            position: i + 1,
            mean_confidence: s / n as f64,
            count: n,
        })
        .collect())
}

pub fn classify(token: &str, lexica: &Lexica) -> TokenClass {
    if lexica.is_visual(&porter_stem(token)) {
        TokenClass::Visual
    } else {
        TokenClass::NonVisual
    }
}

/// Source (visual) and target (language) decoder-gate means at the steps
/// that emitted each word, grouped by word class. Reserved ids (EOS, UNK and
/// friends) are not words and are skipped, matching [`Vocab::decode`];
/// classes with no tokens are omitted.
pub fn gate_contributions(
    model: &Captioner,
    vocab: &Vocab,
    lexica: &Lexica,
    videos: &[VideoFeatures],
) -> Result<Vec<GateRow>> {
    let mut acc = [(0.0, 0.0, 0usize); 2];
    for vf in videos {
        let d = model.greedy_decode(vf, MAX_DECODE_LEN)?;
        for (&tok, gates) in d.tokens.iter().zip(&d.gates) {
            if tok <= UNK {
                continue;
            }
            let k = classify(vocab.token(tok), lexica) as usize;
            acc[k].0 += gates.source;
            acc[k].1 += gates.target;
            acc[k].2 += 1;
        }
    }
    Ok([TokenClass::Visual, TokenClass::NonVisual]
        .into_iter()
        .zip(acc)
        .filter(|(_, (_, _, n))| *n > 0)
        .map(|(class, (s, t, n))| GateRow {
            class,
            source_gate_mean: s / n as f64,
            target_gate_mean: t / n as f64,
            count: n,
        })
        .collect())
}

pub fn confidence_csv(rows: &[ConfidenceRow]) -> String {
    let mut out = String::from("position,mean_confidence,count\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.position, r.mean_confidence, r.count));
    }
    out
}

pub fn gates_csv(rows: &[GateRow]) -> String {
    let mut out = String::from("class,source_gate_mean,target_gate_mean,count\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.class.as_str(),
            r.source_gate_mean,
            r.target_gate_mean,
            r.count
        ));
    }
    out
}
