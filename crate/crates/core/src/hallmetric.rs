//! Object/action hallucination scores: OH, AH and COAHA = OH + AH.
//!
//! Each hallucinated term contributes its mean cosine distance to the
//! video's ground-truth terms of the same kind, normalized by the mean
//! reference length. Reported values are multiplied by [`SCALE`]; the
//! unscaled sums are kept alongside as `raw_oh` / `raw_ah`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::lexicon::{extract_terms, Lexica, ReferenceSet, Term};

pub const SCALE: f64 = 100.0;

/// Used when a term has no vector or there is nothing to compare against.
pub const FALLBACK_DISTANCE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceReport {
    pub video_id: String,
    pub oh: f64,
    pub ah: f64,
    pub coaha: f64,
    pub raw_oh: f64,
    pub raw_ah: f64,
    pub h_o: Vec<String>,
    pub h_a: Vec<String>,
    pub oov: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusReport {
    pub mean_oh: f64,
    pub mean_ah: f64,
    pub mean_coaha: f64,
    pub mean_raw_oh: f64,
    pub mean_raw_ah: f64,
    pub per_instance: Vec<InstanceReport>,
}

/// Exact stem-set differences `(cand_O \ N_O, cand_A \ N_A)`.
pub fn hallucinated_sets(
    candidate_objects: &BTreeSet<String>,
    candidate_actions: &BTreeSet<String>,
    reference: &ReferenceSet,
) -> (BTreeSet<String>, BTreeSet<String>) {
    (
        candidate_objects.difference(&reference.object_stems).cloned().collect(),
        candidate_actions.difference(&reference.action_stems).cloned().collect(),
    )
}

/// Mean distance plus the lookup keys that had to fall back.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanDistance {
    pub value: f64,
    pub fallback: Vec<String>,
}

fn vector<'t>(table: &'t EmbeddingTable, key: Option<&str>) -> Option<&'t [f64]> {
    key.and_then(|k| table.get(k)).filter(|v| v.iter().any(|&x| x != 0.0))
}

/// `key` and `ref_keys` are already-resolved table lookups; `None` means out
/// of vocabulary. Labels name the terms in the fallback list.
fn mean_distance(
    table: &EmbeddingTable,
    label: &str,
    key: Option<&str>,
    refs: &[(&str, Option<&str>)],
) -> MeanDistance {
    let Some(v) = vector(table, key) else {
        return MeanDistance {
            value: FALLBACK_DISTANCE,
            fallback: vec![label.to_string()],
        };
    };
    if refs.is_empty() {
        return MeanDistance {
            value: FALLBACK_DISTANCE,
            fallback: vec![label.to_string()],
        };
    }
    let mut fallback = Vec::new();
    let mut total = 0.0;
    for (ref_label, ref_key) in refs {
        match vector(table, *ref_key) {
            Some(w) => {
                // zero vectors were filtered out above
                total += crate::embeddings::cosine(v, w).map_or(FALLBACK_DISTANCE, |c| 1.0 - c);
            }
            None => {
                total += FALLBACK_DISTANCE;
                fallback.push(ref_label.to_string());
            }
        }
    }
    MeanDistance {
        value: total / refs.len() as f64,
        fallback,
    }
}

/// Mean of `1 - cos(term, w)` over `ref_terms`, looking tokens up verbatim.
/// Out-of-vocabulary or empty references score [`FALLBACK_DISTANCE`].
pub fn mean_semantic_distance(term: &str, ref_terms: &BTreeSet<String>, table: &EmbeddingTable) -> MeanDistance {
    let refs: Vec<(&str, Option<&str>)> = ref_terms.iter().map(|r| (r.as_str(), Some(r.as_str()))).collect();
    mean_distance(table, term, Some(term), &refs)
}

fn side(
    hallucinated: &BTreeSet<String>,
    surfaces: &BTreeMap<&str, &str>,
    ground: &BTreeSet<String>,
    reference: &ReferenceSet,
    table: &EmbeddingTable,
    oov: &mut BTreeSet<String>,
) -> f64 {
    let refs: Vec<(&str, Option<&str>)> = ground
        .iter()
        .map(|stem| (stem.as_str(), table.resolve(reference.surface(stem), stem)))
        .collect();
    let mut sum = 0.0;
    for h in hallucinated {
        let key = table.resolve(surfaces.get(h.as_str()).copied(), h);
        let d = mean_distance(table, h, key, &refs);
        oov.extend(d.fallback);
        sum += d.value;
    }
    sum
}

fn first_surfaces(terms: &[Term]) -> BTreeMap<&str, &str> {
    let mut out = BTreeMap::new();
    for t in terms {
        out.entry(t.stem.as_str()).or_insert(t.surface.as_str());
    }
    out
}

pub fn score_instance(
    candidate: &str,
    reference: &ReferenceSet,
    lexica: &Lexica,
    table: &EmbeddingTable,
) -> Result<InstanceReport> {
    if !(reference.mean_len > 0.0) {
        return Err(Error::ZeroLength(reference.video_id.clone()));
    }
    let terms = extract_terms(candidate, lexica);
    let (h_o, h_a) = hallucinated_sets(&terms.object_stems(), &terms.action_stems(), reference);
    let mut oov = BTreeSet::new();
    let sum_o = side(
        &h_o,
        &first_surfaces(&terms.objects),
        &reference.object_stems,
        reference,
        table,
        &mut oov,
    );
    let sum_a = side(
        &h_a,
        &first_surfaces(&terms.actions),
        &reference.action_stems,
        reference,
        table,
        &mut oov,
    );
    let raw_oh = sum_o / reference.mean_len;
    let raw_ah = sum_a / reference.mean_len;
    let oh = SCALE * raw_oh;
    let ah = SCALE * raw_ah;
    Ok(InstanceReport {
        video_id: reference.video_id.clone(),
        oh,
        ah,
        coaha: oh + ah,
        raw_oh,
        raw_ah,
        h_o: h_o.into_iter().collect(),
        h_a: h_a.into_iter().collect(),
        oov: oov.into_iter().collect(),
    })
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

/// Instances are scored in `video_id` order.
pub fn score_corpus(
    candidates: &BTreeMap<String, String>,
    refs: &BTreeMap<String, ReferenceSet>,
    lexica: &Lexica,
    table: &EmbeddingTable,
) -> Result<CorpusReport> {
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let per_instance = candidates
        .iter()
        .map(|(id, caption)| {
            let r = refs.get(id).ok_or_else(|| Error::MissingReference(id.clone()))?;
            score_instance(caption, r, lexica, table)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_instance.len();
    Ok(CorpusReport {
        mean_oh: mean(per_instance.iter().map(|r| r.oh), n),
        mean_ah: mean(per_instance.iter().map(|r| r.ah), n),
        mean_coaha: mean(per_instance.iter().map(|r| r.coaha), n),
        mean_raw_oh: mean(per_instance.iter().map(|r| r.raw_oh), n),
        mean_raw_ah: mean(per_instance.iter().map(|r| r.raw_ah), n),
        per_instance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::build_lexica;

    // the table as written; 0.7071 is not meant as 1/sqrt(2)
    #[allow(clippy::approx_constant)]
    fn mini_table() -> EmbeddingTable {
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
            ]
            .into_iter()
            .map(|(t, v)| (t.to_string(), v)),
        )
        .unwrap()
    }

    fn setup() -> (Lexica, ReferenceSet) {
        let lex = build_lexica(
            &["a man is riding a motorcycle"],
            &["horse".into(), "dog".into()],
            &["walking".into(), "eating".into()],
        )
        .unwrap();
        let r = ReferenceSet::from_captions("v", &["a man is riding a motorcycle"], &lex).unwrap();
        (lex, r)
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn set_difference() {
        let (_, r) = setup();
        let (h_o, h_a) = hallucinated_sets(&set(&["man", "hors"]), &set(&[]), &r);
        assert_eq!(h_o, set(&["hors"]));
        assert!(h_a.is_empty());
        let (h_o, _) = hallucinated_sets(&set(&["man"]), &set(&[]), &r);
        assert!(h_o.is_empty());
    }

    #[test]
    fn mean_distance_worked_example() {
        let t = mini_table();
        let d = mean_semantic_distance("hors", &set(&["man", "motorcycl"]), &t);
        let expected = ((1.0 - std::f64::consts::FRAC_1_SQRT_2) + 1.0) / 2.0;
        assert!((d.value - expected).abs() < 1e-12);
        assert!((d.value - 0.64645).abs() < 1e-5);
        assert!(d.fallback.is_empty());
        assert_eq!(mean_semantic_distance("man", &set(&["man"]), &t).value, 0.0);
    }

    #[test]
    fn fallbacks_are_exactly_one_and_flagged() {
        let t = mini_table();
        let d = mean_semantic_distance("hors", &set(&[]), &t);
        assert_eq!(d.value, 1.0);
        assert_eq!(d.fallback, ["hors"]);
        let d = mean_semantic_distance("zebra", &set(&["man"]), &t);
        assert_eq!(d.value, 1.0);
        assert_eq!(d.fallback, ["zebra"]);
    }

    #[test]
    fn identical_caption_scores_zero() {
        let (lex, r) = setup();
        let rep = score_instance("A man is riding a motorcycle", &r, &lex, &mini_table()).unwrap();
        assert_eq!((rep.oh, rep.ah, rep.coaha), (0.0, 0.0, 0.0));
    }

    #[test]
    fn worked_example_oh() {
        let (lex, r) = setup();
        let rep = score_instance("a man is riding a horse", &r, &lex, &mini_table()).unwrap();
        let expected = 100.0 * (2.0 - std::f64::consts::FRAC_1_SQRT_2) / 2.0 / 6.0;
        assert!((rep.oh - expected).abs() < 1e-9, "{}", rep.oh);
        assert!((rep.oh - 10.774).abs() < 5e-4);
        assert_eq!(rep.ah, 0.0);
        assert_eq!(rep.h_o, ["hors"]);
        assert_eq!(rep.coaha, rep.oh + rep.ah);
    }

    #[test]
    fn related_action_scores_below_unrelated() {
        let (lex, r) = setup();
        let t = mini_table();
        let walk = score_instance("a man is walking a motorcycle", &r, &lex, &t).unwrap();
        let eat = score_instance("a man is eating a motorcycle", &r, &lex, &t).unwrap();
        assert!(eat.ah > walk.ah && walk.ah > 0.0);
        let both = score_instance("a man is eating a horse", &r, &lex, &t).unwrap();
        let horse = score_instance("a man is riding a horse", &r, &lex, &t).unwrap();
        assert!(both.coaha > eat.coaha && both.coaha > horse.coaha);
    }

    #[test]
    fn no_terms_no_score() {
        let (lex, r) = setup();
        let rep = score_instance("hello world", &r, &lex, &mini_table()).unwrap();
        assert!(rep.h_o.is_empty() && rep.h_a.is_empty());
        assert_eq!(rep.coaha, 0.0);
    }

    #[test]
    fn oov_hallucination_is_flagged() {
        let (lex, r) = setup();
        let rep = score_instance("a man is riding a dog", &r, &lex, &mini_table()).unwrap();
        assert_eq!(rep.oov, ["dog"]);
        assert!((rep.oh - 100.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn corpus_means() {
        let (lex, r) = setup();
        let mut refs = BTreeMap::new();
        refs.insert("v".to_string(), r.clone());
        let mut r2 = r;
        r2.video_id = "w".into();
        refs.insert("w".to_string(), r2);
        let mut cands = BTreeMap::new();
        cands.insert("v".to_string(), "a man is riding a motorcycle".to_string());
        cands.insert("w".to_string(), "a man is riding a horse".to_string());
        let rep = score_corpus(&cands, &refs, &lex, &mini_table()).unwrap();
        let w = rep.per_instance[1].coaha;
        assert!((rep.mean_coaha - w / 2.0).abs() < 1e-12);

        assert!(matches!(
            score_corpus(&BTreeMap::new(), &refs, &lex, &mini_table()),
            Err(Error::EmptyCorpus)
        ));
        cands.insert("x".to_string(), "a man".to_string());
        assert!(matches!(
            score_corpus(&cands, &refs, &lex, &mini_table()),
            Err(Error::MissingReference(_))
        ));
    }
}
