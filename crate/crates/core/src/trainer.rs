//! Optimization loop: Adam with global-norm clipping, teacher forcing or
//! scheduled sampling, per-epoch validation and resumable checkpoints.
//!
//! A checkpoint directory holds
//!
//! ```text
//! params.bin      model tensors plus adam.m.* / adam.v.* moments and adam.step
//! manifest.json   model and training configuration, completed epochs, log history
//! vocab.txt       one token per line
//! lexica/         objects.txt, actions.txt
//! log.csv         epoch,l_ce,l_ah,l_cl,coaha,bleu4
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use hrig_autodiff::checkpoint::{load_tensors, save_tensors};
use hrig_autodiff::{Graph, ParamSet, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::{argmax, Captioner, LabelTargets, LossWeights, ModelConfig};
use crate::config::KeyValues;
use crate::corpus::{read_json, write_json, Corpus};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::features::VideoFeatures;
use crate::hallmetric::score_corpus;
use crate::lexicon::{build_reference_sets, Lexica, ReferenceSet};
use crate::stdmetrics::bleu4;
use crate::vocab::Vocab;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const MAX_DECODE_LEN: usize = 30;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    TeacherForcing,
    ScheduledSampling,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_forcing" => Ok(Self::TeacherForcing),
            "scheduled_sampling" => Ok(Self::ScheduledSampling),
            _ => Err(Error::Config(format!(
                "strategy must be teacher_forcing or scheduled_sampling, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TeacherForcing => "teacher_forcing",
            Self::ScheduledSampling => "scheduled_sampling",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lambda_acl: f64,
    pub lambda_fcl: f64,
    pub lambda_mcl: f64,
    pub lambda_ocl: f64,
    pub lambda_c: f64,
    pub lambda_a: f64,
    pub lambda_o: f64,
    pub strategy: Strategy,
    pub ss_floor: f64,
    pub d: usize,
    pub e: usize,
    pub m: usize,
    /// frames per video; must match the corpus
    pub n: usize,
    pub use_heads: bool,
    pub use_gates: bool,
    pub min_count: usize,
    /// validate every k epochs (the final epoch is always validated)
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            learning_rate: 1e-4,
            clip_norm: 5.0,
            batch_size: 8,
            epochs: 60,
            seed: 0,
            lambda_acl: w.acl,
            lambda_fcl: w.fcl,
            lambda_mcl: w.mcl,
            lambda_ocl: w.ocl,
            lambda_c: w.c,
            lambda_a: w.a,
            lambda_o: w.o,
            strategy: Strategy::TeacherForcing,
            ss_floor: 0.75,
            d: 32,
            e: 32,
            m: 32,
            n: 8,
            use_heads: true,
            use_gates: true,
            min_count: 5,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let mut c = Self::default();
        kv.take("learning_rate", &mut c.learning_rate)?;
        kv.take("clip_norm", &mut c.clip_norm)?;
        kv.take("batch_size", &mut c.batch_size)?;
        kv.take("epochs", &mut c.epochs)?;
        kv.take("seed", &mut c.seed)?;
        kv.take("lambda_acl", &mut c.lambda_acl)?;
        kv.take("lambda_fcl", &mut c.lambda_fcl)?;
        kv.take("lambda_mcl", &mut c.lambda_mcl)?;
        kv.take("lambda_ocl", &mut c.lambda_ocl)?;
        kv.take("lambda_c", &mut c.lambda_c)?;
        kv.take("lambda_a", &mut c.lambda_a)?;
        kv.take("lambda_o", &mut c.lambda_o)?;
        kv.take("strategy", &mut c.strategy)?;
        kv.take("ss_floor", &mut c.ss_floor)?;
        kv.take("d", &mut c.d)?;
        kv.take("e", &mut c.e)?;
        kv.take("m", &mut c.m)?;
        kv.take("n", &mut c.n)?;
        kv.take("use_heads", &mut c.use_heads)?;
        kv.take("use_gates", &mut c.use_gates)?;
        kv.take("min_count", &mut c.min_count)?;
        kv.take("eval_every", &mut c.eval_every)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_key_values(KeyValues::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad("clip_norm must be positive");
        }
        if [
            self.batch_size,
            self.epochs,
            self.d,
            self.e,
            self.m,
            self.min_count,
            self.eval_every,
        ]
        .contains(&0)
        {
            return bad("batch_size, epochs, d, e, m, min_count and eval_every must be positive");
        }
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        let lambdas = [
            self.lambda_acl,
            self.lambda_fcl,
            self.lambda_mcl,
            self.lambda_ocl,
            self.lambda_c,
            self.lambda_a,
            self.lambda_o,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("loss weights must be non-negative");
        }
        if self.strategy == Strategy::ScheduledSampling && !(self.ss_floor > 0.0 && self.ss_floor <= 1.0) {
            return bad("ss_floor must be in (0, 1]");
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            acl: self.lambda_acl,
            fcl: self.lambda_fcl,
            mcl: self.lambda_mcl,
            ocl: self.lambda_ocl,
            c: self.lambda_c,
            a: self.lambda_a,
            o: self.lambda_o,
        }
    }

    /// Whether two configs describe the same run apart from its length.
    fn same_run(&self, other: &Self) -> bool {
        Self {
            epochs: other.epochs,
            ..self.clone()
        } == *other
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Model("gradient and parameter counts differ".into()));
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite("gradients".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let p = params.get_mut(id).data_mut();
        if g.len() != p.len() {
            return Err(Error::Model("gradient shape differs from its parameter".into()));
        }
        for i in 0..p.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales to `max_norm` when the global L2 norm exceeds it. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// Teacher-forcing probability: 1 at epoch 0, falling linearly to `floor`
/// at the last epoch. A single-epoch run stays at 1.
pub fn scheduled_sampling_prob(epoch: usize, total_epochs: usize, floor: f64) -> Result<f64> {
    if !(floor > 0.0 && floor <= 1.0) {
        return Err(Error::Config(format!(
            "scheduled sampling floor {floor} outside (0, 1]"
        )));
    }
    if epoch >= total_epochs {
        return Err(Error::Config(format!("epoch {epoch} outside 0..{total_epochs}")));
    }
    if total_epochs == 1 {
        return Ok(1.0);
    }
    Ok(1.0 - (1.0 - floor) * epoch as f64 / (total_epochs - 1) as f64)
}

/// Multi-hot object/action targets over the lexica (sorted order) and a
/// one-hot category when the corpus has categories.
pub fn label_targets(reference: &ReferenceSet, lexica: &Lexica, category: Option<(usize, usize)>) -> LabelTargets {
    let hot = |set: &std::collections::BTreeSet<String>, wanted: &std::collections::BTreeSet<String>| {
        set.iter().map(|s| f64::from(u8::from(wanted.contains(s)))).collect()
    };
    LabelTargets {
        objects: hot(lexica.objects(), &reference.object_stems),
        actions: hot(lexica.actions(), &reference.action_stems),
        category: category.map(|(c, count)| (0..count).map(|k| f64::from(u8::from(k == c))).collect()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_ah: f64,
    pub l_cl: f64,
    pub coaha: Option<f64>,
    pub bleu4: Option<f64>,
    /// largest global gradient norm before and after clipping
    pub max_grad_norm: f64,
    pub max_clipped_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub epochs_completed: usize,
    pub history: Vec<EpochLog>,
}

pub fn log_csv(history: &[EpochLog]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,l_ce,l_ah,l_cl,coaha,bleu4\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.l_ce,
            r.l_ah,
            r.l_cl,
            cell(r.coaha),
            cell(r.bleu4)
        ));
    }
    out
}

/// A trained model with everything needed to caption and evaluate.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Captioner,
    pub vocab: Vocab,
    pub lexica: Lexica,
    pub manifest: CheckpointManifest,
    pub adam: AdamState,
}

impl Checkpoint {
    /// Untrained model seeded from `config.seed`, with zeroed optimiser state.
    pub fn fresh(corpus: &Corpus, data: &TrainingData, config: &TrainConfig) -> Result<Self> {
        let model = Captioner::new(data.model_config(corpus, config), config.seed)?;
        let adam = AdamState::new(model.params());
        Ok(Self {
            manifest: CheckpointManifest {
                format_version: CHECKPOINT_VERSION,
                model: model.config().clone(),
                train: config.clone(),
                seed: config.seed,
                epochs_completed: 0,
                history: Vec::new(),
            },
            model,
            vocab: data.vocab.clone(),
            lexica: data.lexica.clone(),
            adam,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        // write into a sibling directory first so an interrupted save never
        // clobbers the last good checkpoint
        let tmp = dir.join(".partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let params = self.model.params();
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        let m_names: Vec<String> = names.iter().map(|n| format!("adam.m.{n}")).collect();
        let v_names: Vec<String> = names.iter().map(|n| format!("adam.v.{n}")).collect();
        let step = Tensor::scalar(self.adam.step as f64);
        let entries = params
            .iter()
            .chain(m_names.iter().map(String::as_str).zip(&self.adam.m))
            .chain(v_names.iter().map(String::as_str).zip(&self.adam.v))
            .chain(std::iter::once(("adam.step", &step)));
        save_tensors(&tmp.join("params.bin"), entries)?;
        write_json(&tmp.join("manifest.json"), &self.manifest)?;
        self.vocab.save(&tmp.join("vocab.txt"))?;
        self.lexica.save(&tmp.join("lexica"))?;
        let log = tmp.join("log.csv");
        fs::write(&log, log_csv(&self.manifest.history)).map_err(|e| Error::io(&log, e))?;
        for name in ["params.bin", "manifest.json", "vocab.txt", "log.csv"] {
            let (from, to) = (tmp.join(name), dir.join(name));
            fs::rename(&from, &to).map_err(|e| Error::io(&to, e))?;
        }
        let lex = dir.join("lexica");
        if lex.exists() {
            fs::remove_dir_all(&lex).map_err(|e| Error::io(&lex, e))?;
        }
        fs::rename(tmp.join("lexica"), &lex).map_err(|e| Error::io(&lex, e))?;
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                manifest.format_version
            )));
        }
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        if vocab.len() != manifest.model.vocab {
            return Err(Error::Config("vocabulary size differs from the model manifest".into()));
        }
        let lexica = Lexica::load(&dir.join("lexica"))?;
        let mut tensors = load_tensors(&dir.join("params.bin"))?;
        let mut moments: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut step = 0;
        tensors.retain(|(name, t)| {
            if name == "adam.step" {
                step = t.data().first().copied().unwrap_or(0.0) as u64;
                false
            } else if name.starts_with("adam.") {
                moments.insert(name.clone(), t.clone());
                false
            } else {
                true
            }
        });
        let model = Captioner::from_tensors(manifest.model.clone(), &tensors)?;
        let mut adam = AdamState::new(model.params());
        if !moments.is_empty() {
            for (k, (name, _)) in model.params().iter().enumerate() {
                let take = |kind: &str| {
                    moments
                        .get(&format!("adam.{kind}.{name}"))
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("checkpoint lacks adam.{kind}.{name}")))
                };
                adam.m[k] = take("m")?;
                adam.v[k] = take("v")?;
            }
            adam.step = step;
        }
        Ok(Self {
            model,
            vocab,
            lexica,
            manifest,
            adam,
        })
    }
}

/// Greedy captions for `ids`, keyed by video id.
pub fn caption_videos(
    model: &Captioner,
    vocab: &Vocab,
    features: &[VideoFeatures],
) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for vf in features {
        let d = model.greedy_decode(vf, MAX_DECODE_LEN)?;
        out.insert(vf.video_id.clone(), vocab.decode(&d.tokens));
    }
    Ok(out)
}

/// In-memory view of a corpus prepared for training.
pub struct TrainingData {
    pub vocab: Vocab,
    pub lexica: Lexica,
    pub embeddings: EmbeddingTable,
    pub references: BTreeMap<String, ReferenceSet>,
    pub train: Vec<VideoFeatures>,
    pub val: Vec<VideoFeatures>,
    /// (index into `train`, token ids ending in EOS)
    samples: Vec<(usize, Vec<usize>)>,
    labels: Vec<LabelTargets>,
    val_refs: BTreeMap<String, Vec<String>>,
}

impl TrainingData {
    pub fn prepare(corpus: &Corpus, config: &TrainConfig, vocab: Option<Vocab>) -> Result<Self> {
        if corpus.manifest.frames != config.n {
            return Err(Error::Config(format!(
                "config n = {} but the corpus has {} frames per video",
                config.n, corpus.manifest.frames
            )));
        }
        let lexica = corpus.lexica()?;
        let references = build_reference_sets(&corpus.references, &lexica)?;
        let embeddings = EmbeddingTable::load(&corpus.embeddings_path(), None)?;
        let train_ids = corpus.split("train")?;
        if train_ids.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let vocab = match vocab {
            Some(v) => v,
            None => {
                let caps: Vec<&String> = train_ids.iter().flat_map(|id| &corpus.references[id]).collect();
                Vocab::build(&caps, config.min_count)
            }
        };
        let mut train = Vec::with_capacity(train_ids.len());
        let mut samples = Vec::new();
        let mut labels = Vec::with_capacity(train_ids.len());
        for (k, id) in train_ids.iter().enumerate() {
            train.push(corpus.features(id)?);
            for c in &corpus.references[id] {
                samples.push((k, vocab.encode(c)));
            }
            let cat = corpus
                .categories
                .as_ref()
                .map(|m| {
                    m.get(id)
                        .map(|&c| (c, corpus.manifest.category_count))
                        .ok_or_else(|| Error::Config(format!("video {id:?} has no category")))
                })
                .transpose()?;
            labels.push(label_targets(&references[id], &lexica, cat));
        }
        let val_ids = corpus.split("val")?;
        let val = val_ids
            .iter()
            .map(|id| corpus.features(id))
            .collect::<Result<Vec<_>>>()?;
        let val_refs = val_ids
            .iter()
            .map(|id| (id.clone(), corpus.references[id].clone()))
            .collect();
        Ok(Self {
            vocab,
            lexica,
            embeddings,
            references,
            train,
            val,
            samples,
            labels,
            val_refs,
        })
    }

    pub fn model_config(&self, corpus: &Corpus, config: &TrainConfig) -> ModelConfig {
        let m = &corpus.manifest;
        ModelConfig {
            d_a: m.d_a,
            d_m: m.d_m,
            d_o: m.d_o,
            hidden: config.d,
            embed: config.e,
            memory: config.m,
            vocab: self.vocab.len(),
            n_objects: self.lexica.objects().len(),
            n_actions: self.lexica.actions().len(),
            n_categories: m.category_count,
            use_heads: config.use_heads,
            use_gates: config.use_gates,
        }
    }

    /// Mean COAHA and BLEU-4 of greedy captions on the validation split.
    pub fn validate(&self, model: &Captioner) -> Result<(f64, f64)> {
        let hyps = caption_videos(model, &self.vocab, &self.val)?;
        let refs: BTreeMap<String, ReferenceSet> = hyps
            .keys()
            .map(|id| (id.clone(), self.references[id].clone()))
            .collect();
        let report = score_corpus(&hyps, &refs, &self.lexica, &self.embeddings)?;
        let b = bleu4(&hyps, &self.val_refs)?;
        Ok((report.mean_coaha, b))
    }
}

/// Deterministic RNG for one epoch, independent of earlier epochs.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Runs one epoch over `data`, updating the checkpoint in place.
pub fn train_epoch(ck: &mut Checkpoint, data: &TrainingData, epoch: usize) -> Result<EpochLog> {
    let cfg = ck.manifest.train.clone();
    let weights = cfg.loss_weights();
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    order.shuffle(&mut rng);
    let teacher_p = match cfg.strategy {
        Strategy::TeacherForcing => 1.0,
        Strategy::ScheduledSampling => scheduled_sampling_prob(epoch, cfg.epochs, cfg.ss_floor)?,
    };
    let (mut ce_sum, mut ah_sum, mut cl_sum) = (0.0, 0.0, 0.0);
    let (mut max_norm, mut max_clipped) = (0.0f64, 0.0f64);
    for batch in order.chunks(cfg.batch_size) {
        let mut g = Graph::new();
        let b = g.bind(ck.model.params());
        let mut totals = Vec::with_capacity(batch.len());
        for &s in batch {
            let (video, tokens) = &data.samples[s];
            let labels = cfg.use_heads.then(|| &data.labels[*video]);
            let mut feed = |teacher: usize, logits: &[f64]| {
                if teacher_p < 1.0 && rng.random::<f64>() >= teacher_p {
                    argmax(logits)
                } else {
                    teacher
                }
            };
            let parts = ck
                .model
                .loss(&mut g, &b, &data.train[*video], tokens, labels, &weights, &mut feed)?;
            ce_sum += g.scalar(parts.ce);
            ah_sum += parts.ah.map_or(0.0, |v| g.scalar(v));
            cl_sum += g.scalar(parts.cl);
            totals.push(parts.total);
        }
        let sum = g.add_all(&totals)?;
        let loss = g.scale(sum, 1.0 / batch.len() as f64)?;
        g.backward(loss)?;
        let mut grads: Vec<Tensor> = g
            .param_grads(&b)
            .into_iter()
            .zip(ck.model.params().iter())
            .map(|(grad, (_, p))| grad.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let norm = clip_gradients(&mut grads, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradients in epoch {epoch}")));
        }
        max_norm = max_norm.max(norm);
        max_clipped = max_clipped.max(global_norm(&grads));
        adam_step(ck.model.params_mut(), &grads, &mut ck.adam, cfg.learning_rate)?;
    }
    let n = data.samples.len() as f64;
    let mut log = EpochLog {
        epoch,
        l_ce: ce_sum / n,
        l_ah: ah_sum / n,
        l_cl: cl_sum / n,
        coaha: None,
        bleu4: None,
        max_grad_norm: max_norm,
        max_clipped_norm: max_clipped,
    };
    if [log.l_ce, log.l_ah, log.l_cl].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("epoch {epoch} losses")));
    }
    if (epoch + 1).is_multiple_of(cfg.eval_every) || epoch + 1 == cfg.epochs {
        let (coaha, b4) = data.validate(&ck.model)?;
        log.coaha = Some(coaha);
        log.bleu4 = Some(b4);
    }
    Ok(log)
}

/// Trains into `out`, saving a checkpoint after every epoch. With `resume`
/// an existing checkpoint in `out` is continued up to `config.epochs`.
pub fn train(config: &TrainConfig, corpus: &Corpus, out: &Path, resume: bool) -> Result<Checkpoint> {
    config.validate()?;
    let existing = resume && out.join("manifest.json").exists();
    let (mut ck, data) = if existing {
        let mut ck = Checkpoint::load(out)?;
        if !ck.manifest.train.same_run(config) {
            return Err(Error::Config(
                "resume config differs from the checkpoint's (only epochs may change)".into(),
            ));
        }
        ck.manifest.train.epochs = config.epochs;
        let data = TrainingData::prepare(corpus, config, Some(ck.vocab.clone()))?;
        if data.lexica != ck.lexica {
            return Err(Error::Config("corpus lexica differ from the checkpoint's".into()));
        }
        (ck, data)
    } else {
        let data = TrainingData::prepare(corpus, config, None)?;
        (Checkpoint::fresh(corpus, &data, config)?, data)
    };
    for epoch in ck.manifest.epochs_completed..config.epochs {
        let log = train_epoch(&mut ck, &data, epoch)?;
        ck.manifest.history.push(log);
        ck.manifest.epochs_completed = epoch + 1;
        ck.save(out)?;
    }
    if ck.manifest.epochs_completed == 0 {
        ck.save(out)?;
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("w", Tensor::row(vec![v])).unwrap();
        p
    }

    #[test]
    fn adam_first_steps_match_hand_trace() {
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(&p);
        let lr = 0.1;
        adam_step(&mut p, &[Tensor::row(vec![0.5])], &mut s, lr).unwrap();
        // m_hat = g, v_hat = g^2 on the first step
        let expected1 = 1.0 - lr * 0.5 / (0.5 + ADAM_EPS);
        assert!((p.by_name("w").unwrap().data()[0] - expected1).abs() < 1e-15);
        adam_step(&mut p, &[Tensor::row(vec![-1.0])], &mut s, lr).unwrap();
        let m = 0.9 * 0.05 + 0.1 * -1.0;
        let v = 0.999 * (0.001 * 0.25) + 0.001 * 1.0;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let expected2 = expected1 - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        assert!((p.by_name("w").unwrap().data()[0] - expected2).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = scalar_params(2.5);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::row(vec![0.0])], &mut s, 0.1).unwrap();
        assert_eq!(p.by_name("w").unwrap().data()[0], 2.5);
        assert!(adam_step(&mut p, &[Tensor::row(vec![f64::NAN])], &mut s, 0.1).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::row(vec![3.0, 0.0]), Tensor::row(vec![4.0])];
        assert_eq!(clip_gradients(&mut g, 5.0), 5.0);
        assert_eq!(g[0].data(), [3.0, 0.0]);
        let mut g = vec![Tensor::row(vec![6.0, 0.0]), Tensor::row(vec![8.0])];
        assert_eq!(clip_gradients(&mut g, 5.0), 10.0);
        assert!((global_norm(&g) - 5.0).abs() < 1e-9);
        assert_eq!(g[1].data(), [4.0]);
        let mut z = vec![Tensor::zeros(&[1, 3])];
        clip_gradients(&mut z, 5.0);
        assert_eq!(z[0].data(), [0.0; 3]);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(scheduled_sampling_prob(0, 11, 0.75).unwrap(), 1.0);
        assert_eq!(scheduled_sampling_prob(10, 11, 0.75).unwrap(), 0.75);
        assert!((scheduled_sampling_prob(5, 11, 0.75).unwrap() - 0.875).abs() < 1e-15);
        assert!(scheduled_sampling_prob(0, 5, 0.0).is_err());
        assert!(scheduled_sampling_prob(0, 5, 1.5).is_err());
        assert!(scheduled_sampling_prob(5, 5, 0.75).is_err());
    }

    #[test]
    fn config_parsing() {
        let kv = KeyValues::parse("learning_rate = 0.001\nstrategy = scheduled_sampling\nuse_gates = false\n").unwrap();
        let c = TrainConfig::from_key_values(kv).unwrap();
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.strategy, Strategy::ScheduledSampling);
        assert!(!c.use_gates);
        assert!(TrainConfig::from_key_values(KeyValues::parse("strategy = beam").unwrap()).is_err());
        assert!(TrainConfig::from_key_values(KeyValues::parse("bogus = 1").unwrap()).is_err());
        assert!(TrainConfig::from_key_values(KeyValues::parse("batch_size = 0").unwrap()).is_err());
    }
}
