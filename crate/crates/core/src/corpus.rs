//! On-disk corpus layout shared by the generator, trainer and CLI.
//!
//! ```text
//! manifest.json        splits and generation parameters
//! captions.jsonl       {"video_id": .., "caption": ..} per line
//! categories.jsonl     {"video_id": .., "category": ..} per line (optional)
//! embeddings.txt       word vectors
//! seeds/objects.txt    object seed terms
//! seeds/actions.txt    action seed terms
//! features/<id>.hrig   feature streams
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::VideoFeatures;
use crate::lexicon::{build_lexica, read_term_list, Lexica};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub video_id: String,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryRecord {
    pub video_id: String,
    pub category: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub num_videos: usize,
    pub frames: usize,
    pub d_a: usize,
    pub d_m: usize,
    pub d_o: usize,
    pub objects: Vec<String>,
    pub actions: Vec<String>,
    pub category_count: usize,
    pub noise_sigma: f64,
    pub refs_per_video: usize,
    pub splits: Splits,
}

impl Manifest {
    /// Structural checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("manifest: {m}")));
        let total = self.splits.train.len() + self.splits.val.len() + self.splits.test.len();
        if total != self.num_videos {
            return bad(format!("splits list {total} videos, expected {}", self.num_videos));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in self
            .splits
            .train
            .iter()
            .chain(&self.splits.val)
            .chain(&self.splits.test)
        {
            if !seen.insert(id) {
                return bad(format!("video {id:?} listed twice"));
            }
        }
        if self.frames < 2 || self.d_a == 0 || self.d_m == 0 || self.d_o == 0 {
            return bad("frame count and feature dims must be positive (frames >= 2)".into());
        }
        if self.objects.len() < 2 || self.actions.len() < 2 || self.refs_per_video == 0 {
            return bad("need at least two objects, two actions and one reference".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        Ok(())
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Captions grouped per video, in file order within each video.
pub fn group_by_video(records: &[CaptionRecord]) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in records {
        out.entry(r.video_id.clone()).or_default().push(r.caption.clone());
    }
    out
}

/// One caption per video; a repeated id is an error.
pub fn single_caption_map(records: &[CaptionRecord]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for r in records {
        if out.insert(r.video_id.clone(), r.caption.clone()).is_some() {
            return Err(Error::Config(format!(
                "video {:?} has more than one hypothesis",
                r.video_id
            )));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub references: BTreeMap<String, Vec<String>>,
    pub categories: Option<BTreeMap<String, usize>>,
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
            ));
        }
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        manifest.validate()?;
        let references = group_by_video(&read_jsonl::<CaptionRecord>(&dir.join("captions.jsonl"))?);
        for id in manifest
            .splits
            .train
            .iter()
            .chain(&manifest.splits.val)
            .chain(&manifest.splits.test)
        {
            if !references.contains_key(id) {
                return Err(Error::NoReferences(id.clone()));
            }
        }
        let cat_path = dir.join("categories.jsonl");
        let categories = if manifest.category_count > 0 {
            let recs: Vec<CategoryRecord> = read_jsonl(&cat_path)?;
            let mut map = BTreeMap::new();
            for r in recs {
                if r.category >= manifest.category_count {
                    return Err(Error::Config(format!(
                        "category {} of {:?} is out of range",
                        r.category, r.video_id
                    )));
                }
                map.insert(r.video_id, r.category);
            }
            Some(map)
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            references,
            categories,
        })
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.dir.join("embeddings.txt")
    }

    pub fn features_path(&self, video_id: &str) -> PathBuf {
        self.dir.join("features").join(format!("{video_id}.hrig"))
    }

    pub fn features(&self, video_id: &str) -> Result<VideoFeatures> {
        VideoFeatures::load(video_id, &self.features_path(video_id))
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.manifest.splits.get(name)
    }

    /// Lexica from every reference caption plus the seed lists.
    pub fn lexica(&self) -> Result<Lexica> {
        let seeds = |name: &str| -> Result<Vec<String>> {
            let p = self.dir.join("seeds").join(name);
            if p.exists() {
                read_term_list(&p)
            } else {
                Ok(Vec::new())
            }
        };
        let refs: Vec<&String> = self.references.values().flatten().collect();
        build_lexica(&refs, &seeds("objects.txt")?, &seeds("actions.txt")?)
    }
}
