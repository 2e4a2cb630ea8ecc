use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

const SUBSAMPLE_SALT: u64 = 0x7375_6273_616d_706c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub audio_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub duration_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestKind {
    Paired,
    Unpaired,
    /// No entries, so either.
    Empty,
}

/// JSON-lines list of utterances, either all transcribed or none.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative audio paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            entries,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Validation(format!("duplicate manifest id `{}`", e.id)));
            }
            if !(e.duration_seconds.is_finite() && e.duration_seconds >= 0.0) {
                return Err(Error::Validation(format!("`{}` has an invalid duration", e.id)));
            }
        }
        self.kind().map(|_| ())
    }

    pub fn kind(&self) -> Result<ManifestKind> {
        let with_text = self.entries.iter().filter(|e| e.text.is_some()).count();
        match with_text {
            0 if self.entries.is_empty() => Ok(ManifestKind::Empty),
            0 => Ok(ManifestKind::Unpaired),
            n if n == self.entries.len() => Ok(ManifestKind::Paired),
            _ => Err(Error::Validation(
                "manifest mixes transcribed and untranscribed entries".into(),
            )),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn audio_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.audio_path)
    }

    pub fn total_seconds(&self) -> f64 {
        self.entries.iter().map(|e| e.duration_seconds).sum()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).at(path)?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.at(path)?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: format!("{}: {e}", path.display()),
            })?;
            entries.push(e);
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(entries, base)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        std::fs::File::create(path).and_then(|mut f| f.write_all(&out)).at(path)
    }

    /// The shortest prefix of a seeded shuffle whose duration reaches
    /// `minutes`. Prefixes of one order are nested, so smaller amounts are
    /// always subsets of larger ones.
    pub fn subsample_minutes(&self, minutes: f64, seed: u64) -> Result<Self> {
        let target = minutes * 60.0;
        if !(target > 0.0) {
            return Err(Error::Validation(format!("paired amount must be positive, got {minutes} minutes")));
        }
        let total = self.total_seconds();
        if target > total + 1e-9 {
            return Err(Error::Validation(format!(
                "{minutes} minutes requested but the manifest holds {:.3}",
                total / 60.0
            )));
        }
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by(|&a, &b| self.entries[a].id.cmp(&self.entries[b].id));
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SUBSAMPLE_SALT));
        let mut acc = 0.0;
        let mut picked = Vec::new();
        for i in order {
            if acc >= target - 1e-9 {
                break;
            }
            acc += self.entries[i].duration_seconds;
            picked.push(i);
        }
        picked.sort_unstable();
        Ok(Self {
            entries: picked.into_iter().map(|i| self.entries[i].clone()).collect(),
            base_dir: self.base_dir.clone(),
        })
    }

    /// Copy whose audio paths are absolute, so it can be saved elsewhere.
    pub fn absolutized(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    audio_path: self.audio_path(e),
                    ..e.clone()
                })
                .collect(),
            base_dir: PathBuf::new(),
        }
    }
}
