//! Evaluation report combining hallucination and n-gram metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::hallmetric::{score_corpus, InstanceReport, SCALE};
use crate::lexicon::{build_reference_sets, Lexica};
use crate::stdmetrics::{bleu4, cider_d, CIDER_SCALE, CIDER_SIGMA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSummary {
    pub count: usize,
    pub mean_oh: f64,
    pub mean_ah: f64,
    pub mean_coaha: f64,
    pub mean_raw_oh: f64,
    pub mean_raw_ah: f64,
    pub scale: f64,
    pub bleu4: f64,
    pub cider_d: f64,
    pub cider_sigma: f64,
    pub cider_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub corpus: CorpusSummary,
    pub instances: Vec<InstanceReport>,
}

/// Scores every hypothesis against the references of its video.
pub fn evaluate(
    hypotheses: &BTreeMap<String, String>,
    references: &BTreeMap<String, Vec<String>>,
    lexica: &Lexica,
    table: &EmbeddingTable,
) -> Result<EvaluationReport> {
    let mut refs = BTreeMap::new();
    for id in hypotheses.keys() {
        let r = references.get(id).ok_or_else(|| Error::MissingReference(id.clone()))?;
        refs.insert(id.clone(), r.clone());
    }
    let sets = build_reference_sets(&refs, lexica)?;
    let hall = score_corpus(hypotheses, &sets, lexica, table)?;
    let report = EvaluationReport {
        corpus: CorpusSummary {
            count: hall.per_instance.len(),
            mean_oh: hall.mean_oh,
            mean_ah: hall.mean_ah,
            mean_coaha: hall.mean_coaha,
            mean_raw_oh: hall.mean_raw_oh,
            mean_raw_ah: hall.mean_raw_ah,
            scale: SCALE,
            bleu4: bleu4(hypotheses, &refs)?,
            cider_d: cider_d(hypotheses, &refs)?,
            cider_sigma: CIDER_SIGMA,
            cider_scale: CIDER_SCALE,
        },
        instances: hall.per_instance,
    };
    report.validate()?;
    Ok(report)
}

impl EvaluationReport {
    /// Consistency checks on a (possibly re-read) report.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("report: {m}")));
        let c = &self.corpus;
        if c.count != self.instances.len() || c.count == 0 {
            return bad(format!("count {} but {} instances", c.count, self.instances.len()));
        }
        let summary = [
            c.mean_oh,
            c.mean_ah,
            c.mean_coaha,
            c.mean_raw_oh,
            c.mean_raw_ah,
            c.bleu4,
            c.cider_d,
        ];
        if summary.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("corpus metrics must be finite and non-negative".into());
        }
        if c.bleu4 > 1.0 {
            return bad("bleu4 above 1".into());
        }
        for r in &self.instances {
            let vals = [r.oh, r.ah, r.coaha, r.raw_oh, r.raw_ah];
            if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad(format!("{}: metrics must be finite and non-negative", r.video_id));
            }
            if r.coaha != r.oh + r.ah {
                return bad(format!("{}: coaha differs from oh + ah", r.video_id));
            }
        }
        let mut ids: Vec<&str> = self.instances.iter().map(|r| r.video_id.as_str()).collect();
        ids.dedup();
        if ids.len() != self.instances.len() {
            return bad("instances must be unique and sorted by video id".into());
        }
        Ok(())
    }
}
