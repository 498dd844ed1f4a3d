//! Procedural corpus with known object/action semantics.
//!
//! Every video shows one object concept and one action concept. Appearance
//! and object streams are the object's prototype plus gaussian noise per
//! frame, the motion stream the action's prototype plus noise. Captions come
//! from a four-template grammar whose noun and verb slots line up with the
//! lexicon's positional rules. Concept words are grouped in synonym pairs;
//! the embedding table gives a pair a shared direction (cosine
//! [`SYNONYM_COSINE`]) and keeps different pairs orthogonal.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hrig_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::config::KeyValues;
use crate::corpus::{write_json, write_jsonl, CaptionRecord, CategoryRecord, Manifest, Splits};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::features::VideoFeatures;
use crate::lexicon::{porter_stem, write_term_list};

/// Object words, synonyms adjacent.
pub const OBJECT_WORDS: &[&str] = &[
    "man",
    "woman",
    "dog",
    "puppy",
    "car",
    "truck",
    "horse",
    "pony",
    "cat",
    "kitten",
    "boy",
    "girl",
    "guitar",
    "violin",
    "ball",
    "toy",
    "bird",
    "parrot",
    "bike",
    "motorcycle",
    "fish",
    "shark",
    "baby",
    "child",
    "monkey",
    "ape",
    "train",
    "bus",
    "boat",
    "ship",
];

/// `(base, progressive)` action forms, synonyms adjacent.
pub const ACTION_WORDS: &[(&str, &str)] = &[
    ("ride", "riding"),
    ("drive", "driving"),
    ("run", "running"),
    ("jog", "jogging"),
    ("eat", "eating"),
    ("drink", "drinking"),
    ("swim", "swimming"),
    ("dive", "diving"),
    ("sing", "singing"),
    ("hum", "humming"),
    ("jump", "jumping"),
    ("hop", "hopping"),
    ("walk", "walking"),
    ("stroll", "strolling"),
    ("cut", "cutting"),
    ("slice", "slicing"),
];

pub const TEMPLATES: &[&str] = &[
    "a {o} is {a}",
    "the {o} is {a}",
    "a {o} is {a} there",
    "there is a {o} {a}",
];

pub const SYNONYM_COSINE: f64 = 0.85;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub frames: usize,
    pub objects: usize,
    pub actions: usize,
    pub d_a: usize,
    pub d_m: usize,
    pub d_o: usize,
    pub embed_dim: usize,
    pub noise_sigma: f64,
    /// frame-to-frame correlation of the noise, in [0, 1)
    pub noise_corr: f64,
    pub refs_per_video: usize,
    pub seed: u64,
    pub category_count: usize,
    /// probability that a video's action is its object's habitual one
    pub pair_bias: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 200,
            frames: 8,
            objects: 10,
            actions: 8,
            d_a: 16,
            d_m: 16,
            d_o: 16,
            embed_dim: 32,
            noise_sigma: 0.1,
            noise_corr: 0.9,
            refs_per_video: 3,
            seed: 7,
            category_count: 3,
            pair_bias: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let mut c = Self::default();
        kv.take("num_videos", &mut c.num_videos)?;
        kv.take("frames", &mut c.frames)?;
        kv.take("objects", &mut c.objects)?;
        kv.take("actions", &mut c.actions)?;
        kv.take("d_a", &mut c.d_a)?;
        kv.take("d_m", &mut c.d_m)?;
        kv.take("d_o", &mut c.d_o)?;
        kv.take("embed_dim", &mut c.embed_dim)?;
        kv.take("noise_sigma", &mut c.noise_sigma)?;
        kv.take("noise_corr", &mut c.noise_corr)?;
        kv.take("refs_per_video", &mut c.refs_per_video)?;
        kv.take("seed", &mut c.seed)?;
        kv.take("category_count", &mut c.category_count)?;
        kv.take("pair_bias", &mut c.pair_bias)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_key_values(KeyValues::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.objects < 2 || self.objects > OBJECT_WORDS.len() {
            return bad(format!("objects must be in 2..={}", OBJECT_WORDS.len()));
        }
        if self.actions < 2 || self.actions > ACTION_WORDS.len() {
            return bad(format!("actions must be in 2..={}", ACTION_WORDS.len()));
        }
        if self.num_videos == 0 || self.refs_per_video == 0 {
            return bad("num_videos and refs_per_video must be positive".into());
        }
        if self.frames < 2 {
            return bad("frames must be at least 2".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a non-negative number".into());
        }
        if !(0.0..1.0).contains(&self.noise_corr) {
            return bad("noise_corr must be in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.pair_bias) {
            return bad("pair_bias must be in [0, 1]".into());
        }
        if self.d_a < self.objects || self.d_o < self.objects || self.d_m < self.actions {
            return bad(format!(
                "feature dims too small for orthogonal prototypes: need d_a, d_o >= {} and d_m >= {}",
                self.objects, self.actions
            ));
        }
        let needed = embedding_directions(self.objects) + embedding_directions(self.actions);
        if self.embed_dim < needed {
            return bad(format!(
                "embed_dim must be at least {needed} for {} concepts",
                self.objects + self.actions
            ));
        }
        Ok(())
    }

    pub fn object_words(&self) -> &'static [&'static str] {
        &OBJECT_WORDS[..self.objects]
    }

    pub fn action_words(&self) -> &'static [(&'static str, &'static str)] {
        &ACTION_WORDS[..self.actions]
    }
}

/// One direction per synonym cluster plus one per word.
fn embedding_directions(words: usize) -> usize {
    words.div_ceil(2) + words
}

/// `count` orthonormal vectors in `dim` dimensions (Gram-Schmidt on gaussian draws).
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            out.push(v);
        }
    }
    out
}

/// Word vectors: `sqrt(c) * cluster + sqrt(1 - c) * own` so synonyms have cosine `c`.
fn concept_vectors(words: usize, dims: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let clusters = words.div_ceil(2);
    let (shared, own) = (SYNONYM_COSINE.sqrt(), (1.0 - SYNONYM_COSINE).sqrt());
    (0..words)
        .map(|w| {
            let base = &dims[w / 2];
            let private = &dims[clusters + w];
            base.iter().zip(private).map(|(b, p)| shared * b + own * p).collect()
        })
        .collect()
}

pub fn build_embeddings(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<EmbeddingTable> {
    let obj_dirs = embedding_directions(config.objects);
    let act_dirs = embedding_directions(config.actions);
    let dirs = orthonormal(rng, obj_dirs + act_dirs, config.embed_dim);
    let objects = concept_vectors(config.objects, &dirs[..obj_dirs]);
    let actions = concept_vectors(config.actions, &dirs[obj_dirs..]);
    let mut entries: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (w, v) in config.object_words().iter().zip(objects) {
        entries.insert(porter_stem(w), v.clone());
        entries.insert(w.to_string(), v);
    }
    for ((base, ing), v) in config.action_words().iter().zip(actions) {
        entries.insert(porter_stem(ing), v.clone());
        entries.insert(base.to_string(), v.clone());
        entries.insert(ing.to_string(), v);
    }
    EmbeddingTable::from_entries(config.embed_dim, entries)
}

/// What one generated video shows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoSpec {
    pub video_id: String,
    pub object: usize,
    pub action: usize,
    pub category: Option<usize>,
}

pub struct Generated {
    pub manifest: Manifest,
    pub videos: Vec<VideoSpec>,
    pub features: Vec<VideoFeatures>,
    pub captions: Vec<CaptionRecord>,
    pub embeddings: EmbeddingTable,
}

fn caption(template: &str, object: &str, action: &str) -> String {
    template.replace("{o}", object).replace("{a}", action)
}

/// Prototype (an orthonormal direction scaled to unit variance per
/// component) plus AR(1) gaussian noise: every frame's noise has standard
/// deviation sigma, consecutive frames correlate with `corr`.
fn stream(rng: &mut ChaCha8Rng, proto: &[f64], frames: usize, noise: &Normal<f64>, corr: f64) -> Tensor {
    let d = proto.len();
    let scale = (d as f64).sqrt();
    let innovation = (1.0 - corr * corr).sqrt();
    let mut state: Vec<f64> = (0..d).map(|_| noise.sample(rng)).collect();
    let mut data = Vec::with_capacity(frames * d);
    for n in 0..frames {
        if n > 0 {
            for x in state.iter_mut() {
                *x = corr * *x + innovation * noise.sample(rng);
            }
        }
        data.extend(proto.iter().zip(&state).map(|(p, e)| scale * p + e));
    }
    Tensor::new(vec![frames, d], data).expect("frames x d values")
}

pub fn generate(config: &SynthConfig) -> Result<Generated> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let embeddings = build_embeddings(config, &mut rng)?;
    let proto_a = orthonormal(&mut rng, config.objects, config.d_a);
    let proto_o = orthonormal(&mut rng, config.objects, config.d_o);
    let proto_m = orthonormal(&mut rng, config.actions, config.d_m);
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let width = (config.num_videos.max(2) - 1).to_string().len().max(4);
    let mut videos = Vec::with_capacity(config.num_videos);
    let mut features = Vec::with_capacity(config.num_videos);
    let mut captions = Vec::new();
    for i in 0..config.num_videos {
        // per-video stream so each video depends only on (seed, index)
        let mut vr = ChaCha8Rng::seed_from_u64(config.seed);
        vr.set_stream(i as u64 + 1);
        let video_id = format!("video{i:0width$}");
        let object = vr.random_range(0..config.objects);
        let action = if vr.random_bool(config.pair_bias) {
            object % config.actions
        } else {
            vr.random_range(0..config.actions)
        };
        let category = (config.category_count > 0).then(|| (object / 2) % config.category_count);
        let a = stream(&mut vr, &proto_a[object], config.frames, &noise, config.noise_corr);
        let m = stream(&mut vr, &proto_m[action], config.frames, &noise, config.noise_corr);
        let o = stream(&mut vr, &proto_o[object], config.frames, &noise, config.noise_corr);
        features.push(VideoFeatures::new(video_id.clone(), a, m, o)?);
        let (obj_word, act_word) = (config.object_words()[object], config.action_words()[action].1);
        for _ in 0..config.refs_per_video {
            let t = TEMPLATES[vr.random_range(0..TEMPLATES.len())];
            captions.push(CaptionRecord {
                video_id: video_id.clone(),
                caption: caption(t, obj_word, act_word),
            });
        }
        videos.push(VideoSpec {
            video_id,
            object,
            action,
            category,
        });
    }

    let mut ids: Vec<String> = videos.iter().map(|v| v.video_id.clone()).collect();
    ids.shuffle(&mut rng);
    let n_train = config.num_videos * 70 / 100;
    let n_val = config.num_videos * 15 / 100;
    let mut splits = Splits {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    splits.train.sort();
    splits.val.sort();
    splits.test.sort();

    let manifest = Manifest {
        format_version: 1,
        seed: config.seed,
        num_videos: config.num_videos,
        frames: config.frames,
        d_a: config.d_a,
        d_m: config.d_m,
        d_o: config.d_o,
        objects: config.object_words().iter().map(|s| s.to_string()).collect(),
        actions: config.action_words().iter().map(|(b, _)| b.to_string()).collect(),
        category_count: config.category_count,
        noise_sigma: config.noise_sigma,
        refs_per_video: config.refs_per_video,
        splits,
    };
    manifest.validate()?;
    Ok(Generated {
        manifest,
        videos,
        features,
        captions,
        embeddings,
    })
}

/// Generate and write the corpus layout described in [`crate::corpus`].
pub fn write_corpus(config: &SynthConfig, dir: &Path) -> Result<Generated> {
    let g = generate(config)?;
    let feat_dir = dir.join("features");
    let seed_dir = dir.join("seeds");
    for d in [dir, &feat_dir, &seed_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for f in &g.features {
        f.save(&feat_dir.join(format!("{}.hrig", f.video_id)))?;
    }
    write_jsonl(&dir.join("captions.jsonl"), &g.captions)?;
    if config.category_count > 0 {
        let cats: Vec<CategoryRecord> = g
            .videos
            .iter()
            .filter_map(|v| {
                v.category.map(|c| CategoryRecord {
                    video_id: v.video_id.clone(),
                    category: c,
                })
            })
            .collect();
        write_jsonl(&dir.join("categories.jsonl"), &cats)?;
    }
    let emb_path = dir.join("embeddings.txt");
    let mut buf = Vec::new();
    g.embeddings.write(&mut buf).map_err(|e| Error::io(&emb_path, e))?;
    fs::write(&emb_path, buf).map_err(|e| Error::io(&emb_path, e))?;
    write_term_list(&seed_dir.join("objects.txt"), &g.manifest.objects)?;
    write_term_list(&seed_dir.join("actions.txt"), &g.manifest.actions)?;
    write_json(&dir.join("manifest.json"), &g.manifest)?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn porter_recovers_concept_stems() {
        for (base, ing) in ACTION_WORDS {
            assert_eq!(porter_stem(ing), porter_stem(base), "{ing}");
        }
    }

    #[test]
    fn synonyms_close_others_far() {
        let c = SynthConfig {
            objects: 30,
            actions: 16,
            embed_dim: 80,
            ..SynthConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = build_embeddings(&c, &mut rng).unwrap();
        for pair in OBJECT_WORDS.chunks(2) {
            assert!(t.distance(pair[0], pair[1]).unwrap() < 0.3);
        }
        assert!(t.distance("man", "dog").unwrap() > 0.7);
        assert!(t.distance("riding", "eating").unwrap() > 0.7);
        assert!(t.distance("riding", "driving").unwrap() < 0.3);
        assert!(t.distance("man", "riding").unwrap() > 0.7);
    }

    #[test]
    fn too_small_dims_are_rejected() {
        let c = SynthConfig {
            embed_dim: 10,
            ..SynthConfig::default()
        };
        assert!(c.validate().is_err());
        let c = SynthConfig {
            d_m: 4,
            ..SynthConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn splits_partition_videos() {
        let g = generate(&SynthConfig {
            num_videos: 20,
            ..SynthConfig::default()
        })
        .unwrap();
        let s = &g.manifest.splits;
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (14, 3, 3));
        assert_eq!(g.captions.len(), 60);
    }
}
