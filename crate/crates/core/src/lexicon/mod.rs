//! Object/action vocabularies and per-video ground-truth term sets.
//!
//! Term categories come from a small positional grammar rather than a tagger:
//! a token right after a determiner is a noun, a token right after an
//! auxiliary verb (or any `-ing` form) is a verb.

mod porter;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub use porter::porter_stem;

const DETERMINERS: &[&str] = &["a", "an", "the"];

/// Auxiliaries that mark the next token as a verb and are never actions.
pub const STOP_VERBS: &[&str] = &[
    "be", "is", "are", "was", "were", "been", "being", "am", "do", "does", "did", "doing", "have", "has", "had",
    "having",
];

/// Lowercase, split on whitespace, strip leading/trailing punctuation.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split_whitespace()
        .map(|w| {
            w.to_lowercase()
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_string()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn is_determiner(token: &str) -> bool {
    DETERMINERS.contains(&token)
}

fn is_stop_verb(token: &str) -> bool {
    STOP_VERBS.contains(&token)
}

fn verb_inflected(token: &str) -> bool {
    token.ends_with("ing") || token.ends_with('s') || token.ends_with("ed")
}

fn progressive(token: &str) -> bool {
    token.len() >= 5 && token.ends_with("ing")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexica {
    objects: BTreeSet<String>,
    actions: BTreeSet<String>,
    stop_verbs: BTreeSet<String>,
}

impl Lexica {
    /// Stop-verb stems are removed from `actions`.
    pub fn new(objects: impl IntoIterator<Item = String>, actions: impl IntoIterator<Item = String>) -> Self {
        let stop_verbs: BTreeSet<String> = STOP_VERBS.iter().map(|w| porter_stem(w)).collect();
        let actions = actions.into_iter().filter(|a| !stop_verbs.contains(a)).collect();
        Self {
            objects: objects.into_iter().collect(),
            actions,
            stop_verbs,
        }
    }

    pub fn objects(&self) -> &BTreeSet<String> {
        &self.objects
    }

    pub fn actions(&self) -> &BTreeSet<String> {
        &self.actions
    }

    pub fn stop_verbs(&self) -> &BTreeSet<String> {
        &self.stop_verbs
    }

    pub fn is_visual(&self, stem: &str) -> bool {
        self.objects.contains(stem) || self.actions.contains(stem)
    }

    /// Writes `objects.txt` and `actions.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_term_list(&dir.join("objects.txt"), &self.objects)?;
        write_term_list(&dir.join("actions.txt"), &self.actions)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self::new(
            read_term_list(&dir.join("objects.txt"))?,
            read_term_list(&dir.join("actions.txt"))?,
        ))
    }
}

/// One term per line; blank lines ignored.
pub fn read_term_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

pub fn write_term_list<'a>(path: &Path, terms: impl IntoIterator<Item = &'a String>) -> Result<()> {
    let mut text = String::new();
    for t in terms {
        text.push_str(t);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Seed terms are stemmed before merging.
pub fn build_lexica<S: AsRef<str>>(
    references: &[S],
    object_seeds: &[String],
    action_seeds: &[String],
) -> Result<Lexica> {
    if references.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut objects: BTreeSet<String> = object_seeds.iter().map(|w| porter_stem(w)).collect();
    let mut actions: BTreeSet<String> = action_seeds.iter().map(|w| porter_stem(w)).collect();
    for caption in references {
        let tokens = tokenize(caption.as_ref());
        for (i, tok) in tokens.iter().enumerate() {
            if is_determiner(tok) || is_stop_verb(tok) {
                continue;
            }
            let prev = i.checked_sub(1).map(|p| tokens[p].as_str());
            let after_det = prev.is_some_and(is_determiner);
            let after_aux = prev.is_some_and(is_stop_verb);
            if after_det {
                objects.insert(porter_stem(tok));
            } else if (after_aux && verb_inflected(tok)) || progressive(tok) {
                actions.insert(porter_stem(tok));
            }
        }
    }
    Ok(Lexica::new(objects, actions))
}

/// A stemmed term with the surface token it came from.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Term {
    pub stem: String,
    pub surface: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Terms {
    pub objects: Vec<Term>,
    pub actions: Vec<Term>,
}

impl Terms {
    pub fn object_stems(&self) -> BTreeSet<String> {
        self.objects.iter().map(|t| t.stem.clone()).collect()
    }

    pub fn action_stems(&self) -> BTreeSet<String> {
        self.actions.iter().map(|t| t.stem.clone()).collect()
    }
}

/// Terms in caption order, duplicates kept. Position decides first
/// (verb slot, then noun slot); a stem known as both defaults to action.
pub fn extract_terms(caption: &str, lexica: &Lexica) -> Terms {
    let tokens = tokenize(caption);
    let mut out = Terms::default();
    for (i, tok) in tokens.iter().enumerate() {
        let stem = porter_stem(tok);
        let prev = i.checked_sub(1).map(|p| tokens[p].as_str());
        let verb_slot = prev.is_some_and(is_stop_verb) || progressive(tok);
        let noun_slot = prev.is_some_and(is_determiner);
        let is_obj = lexica.objects.contains(&stem);
        let is_act = lexica.actions.contains(&stem);
        let as_action = if verb_slot && is_act {
            true
        } else if noun_slot && is_obj {
            false
        } else if is_act {
            true
        } else if is_obj {
            false
        } else {
            continue;
        };
        let term = Term {
            stem,
            surface: tok.clone(),
        };
        if as_action {
            out.actions.push(term);
        } else {
            out.objects.push(term);
        }
    }
    out
}

/// Ground truth for one video: N_O, N_A and the mean reference length T.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSet {
    pub video_id: String,
    pub object_stems: BTreeSet<String>,
    pub action_stems: BTreeSet<String>,
    pub mean_len: f64,
    /// smallest surface form seen for each stem, for embedding lookup
    pub surfaces: BTreeMap<String, String>,
}

impl ReferenceSet {
    pub fn from_captions<S: AsRef<str>>(video_id: &str, captions: &[S], lexica: &Lexica) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::NoReferences(video_id.to_string()));
        }
        let mut set = ReferenceSet {
            video_id: video_id.to_string(),
            object_stems: BTreeSet::new(),
            action_stems: BTreeSet::new(),
            mean_len: 0.0,
            surfaces: BTreeMap::new(),
        };
        let mut total = 0usize;
        for c in captions {
            let c = c.as_ref();
            total += tokenize(c).len();
            let terms = extract_terms(c, lexica);
            for (t, is_obj) in terms
                .objects
                .into_iter()
                .map(|t| (t, true))
                .chain(terms.actions.into_iter().map(|t| (t, false)))
            {
                let slot = set.surfaces.entry(t.stem.clone()).or_insert_with(|| t.surface.clone());
                if t.surface < *slot {
                    *slot = t.surface;
                }
                if is_obj {
                    set.object_stems.insert(t.stem);
                } else {
                    set.action_stems.insert(t.stem);
                }
            }
        }
        set.mean_len = total as f64 / captions.len() as f64;
        if set.mean_len <= 0.0 {
            return Err(Error::ZeroLength(video_id.to_string()));
        }
        Ok(set)
    }

    pub fn surface(&self, stem: &str) -> Option<&str> {
        self.surfaces.get(stem).map(String::as_str)
    }
}

pub fn build_reference_sets<S: AsRef<str>>(
    refs_by_video: &BTreeMap<String, Vec<S>>,
    lexica: &Lexica,
) -> Result<BTreeMap<String, ReferenceSet>> {
    refs_by_video
        .iter()
        .map(|(id, caps)| Ok((id.clone(), ReferenceSet::from_captions(id, caps, lexica)?)))
        .collect()
}
