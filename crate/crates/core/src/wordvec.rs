//! Word-vector tables: text-format loading, case-normalized lookup and a
//! small skip-gram trainer with negative sampling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::text::normalize_text;

#[derive(Clone, Debug, PartialEq)]
pub struct WordVectorTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
    pub source: String,
    pub corpus_id: String,
    /// Number of entries overwritten by a later line with the same word.
    pub duplicates: usize,
}

/// Key under which a word is stored and looked up.
pub fn normalize_word(word: &str) -> String {
    let mut parts = normalize_text(word);
    if parts.len() == 1 {
        parts.pop().expect("one element")
    } else {
        word.trim().to_lowercase()
    }
}

impl WordVectorTable {
    pub fn new(dim: usize, source: impl Into<String>, corpus_id: impl Into<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("word-vector dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            vectors: BTreeMap::new(),
            source: source.into(),
            corpus_id: corpus_id.into(),
            duplicates: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Inserts a vector; returns true when an existing entry was replaced.
    pub fn insert(&mut self, word: &str, vector: Vec<f64>) -> Result<bool> {
        if vector.len() != self.dim {
            return Err(Error::Invalid(format!(
                "vector for `{word}` has length {}, table dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid(format!("vector for `{word}` is not finite")));
        }
        Ok(self.vectors.insert(normalize_word(word), vector).is_some())
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(&normalize_word(word)).map(Vec::as_slice)
    }

    /// Stored vector, or a zero vector with the OOV flag set.
    pub fn lookup(&self, word: &str) -> (Vec<f64>, bool) {
        match self.get(word) {
            Some(v) => (v.to_vec(), false),
            None => (vec![0.0; self.dim], true),
        }
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (w, v) in &self.vectors {
            out.push_str(w);
            for x in v {
                write!(out, " {x:?}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        std::fs::write(path, self.to_text()).at(path)
    }

    /// Parses `word x1 .. xD` lines. D comes from the first non-blank line.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut table: Option<Self> = None;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let vector = fields
                .map(|f| {
                    f.parse::<f64>().map_err(|_| Error::Parse {
                        line: lineno,
                        msg: format!("`{f}` is not a number"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let t = match &mut table {
                Some(t) => t,
                None => {
                    if vector.is_empty() {
                        return Err(Error::Parse {
                            line: lineno,
                            msg: "no vector components".into(),
                        });
                    }
                    table.insert(Self::new(vector.len(), source, "unknown")?)
                }
            };
            if vector.len() != t.dim {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {} components, found {}", t.dim, vector.len()),
                });
            }
            if !vector.iter().all(|v| v.is_finite()) {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "non-finite component".into(),
                });
            }
            if t.insert(word, vector)? {
                t.duplicates += 1;
            }
        }
        let t = table.ok_or_else(|| Error::Empty(format!("word-vector file {source}")))?;
        if t.duplicates > 0 {
            log::warn!("{source}: {} duplicate words, last entry kept", t.duplicates);
        }
        Ok(t)
    }
}

pub fn load_table(path: &Path) -> Result<WordVectorTable> {
    let text = std::fs::read_to_string(path).at(path)?;
    WordVectorTable::parse(&text, &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            window: 2,
            epochs: 5,
            negatives: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SkipGramOutput {
    pub table: WordVectorTable,
    /// Mean negative-sampling loss per (centre, context) pair, one entry per epoch.
    pub epoch_losses: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains skip-gram embeddings with negative sampling over sentences of
/// normalized words. Output vectors are the unit-normalized input embeddings.
pub fn train_skipgram(sentences: &[Vec<String>], cfg: &SkipGramConfig, corpus_id: &str) -> Result<SkipGramOutput> {
    if cfg.dim == 0 || cfg.window == 0 || cfg.negatives == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Invalid("skip-gram dim, window, negatives and learning rate must be positive".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in sentences {
        for w in s {
            *counts.entry(normalize_word(w)).or_default() += 1;
        }
    }
    if counts.len() < 2 {
        return Err(Error::Invalid(format!(
            "skip-gram needs at least 2 distinct words, corpus has {}",
            counts.len()
        )));
    }
    let vocab: Vec<String> = counts.keys().cloned().collect();
    let index: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    let corpus: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| s.iter().map(|w| index[normalize_word(w).as_str()]).collect())
        .collect();

    let mut cdf = Vec::with_capacity(vocab.len());
    let mut acc = 0.0;
    for w in &vocab {
        acc += (counts[w] as f64).powf(0.75);
        cdf.push(acc);
    }
    for c in &mut cdf {
        *c /= acc;
    }

    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w_in: Vec<f64> = (0..vocab.len() * d).map(|_| (rng.gen::<f64>() - 0.5) / d as f64).collect();
    let mut w_out = vec![0.0; vocab.len() * d];

    let total_pairs: usize = corpus
        .iter()
        .map(|s| (0..s.len()).map(|i| s.len().min(i + cfg.window + 1) - i.saturating_sub(cfg.window) - 1).sum::<usize>())
        .sum();
    let total_steps = (total_pairs * cfg.epochs).max(1) as f64;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut grad_h = vec![0.0; d];
    for _ in 0..cfg.epochs {
        let mut loss = 0.0;
        let mut pairs = 0usize;
        for sent in &corpus {
            for (i, &c) in sent.iter().enumerate() {
                let lo = i.saturating_sub(cfg.window);
                let hi = sent.len().min(i + cfg.window + 1);
                for (j, &o) in sent.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    let lr = cfg.learning_rate * (1.0 - step as f64 / total_steps).max(1e-4);
                    step += 1;
                    pairs += 1;
                    grad_h.iter_mut().for_each(|g| *g = 0.0);
                    let h = c * d..(c + 1) * d;
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (o, 1.0)
                        } else {
                            let u: f64 = rng.gen();
                            let t = cdf.partition_point(|&p| p < u).min(vocab.len() - 1);
                            if t == o {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let out = target * d..(target + 1) * d;
                        let s = sigmoid(dot(&w_in[h.clone()], &w_out[out.clone()]));
                        loss -= if label > 0.0 { s.max(1e-12).ln() } else { (1.0 - s).max(1e-12).ln() };
                        let g = (label - s) * lr;
                        for (a, (gh, wo)) in grad_h.iter_mut().zip(&mut w_out[out]).enumerate() {
                            *gh += g * *wo;
                            *wo += g * w_in[h.start + a];
                        }
                    }
                    for (wi, gh) in w_in[h].iter_mut().zip(&grad_h) {
                        *wi += gh;
                    }
                }
            }
        }
        epoch_losses.push(if pairs > 0 { loss / pairs as f64 } else { 0.0 });
    }

    let mut table = WordVectorTable::new(d, "skipgram", corpus_id)?;
    for (i, w) in vocab.iter().enumerate() {
        let v = &w_in[i * d..(i + 1) * d];
        let n = dot(v, v).sqrt().max(1e-12);
        table.insert(w, v.iter().map(|x| x / n).collect())?;
    }
    Ok(SkipGramOutput { table, epoch_losses })
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = (dot(a, a) * dot(b, b)).sqrt();
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}
