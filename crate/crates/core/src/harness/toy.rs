use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestEntry};
use crate::dsp::{save_wav, Waveform};
use crate::error::{Error, IoContext, Result};
use crate::text::{Lexicon, TokenSequence, EOS, PAD, SIL};

pub const TOY_SAMPLE_RATE: u32 = 8000;
/// 60 ms per phoneme or silence.
pub const SEGMENT_SAMPLES: usize = 480;
/// Raised-cosine fade at both ends of every tone segment.
pub const FADE_SAMPLES: usize = 40;
pub const TONE_AMPLITUDE: f64 = 0.5;
const LOWEST_HZ: f64 = 200.0;
const HIGHEST_HZ: f64 = 3500.0;
const SYLLABLES: [&str; 16] = [
    "ba", "de", "fi", "go", "ku", "la", "me", "ni", "po", "ru", "sa", "te", "vi", "wo", "zu", "ha",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusSpec {
    pub n_paired: usize,
    pub n_unpaired: usize,
    pub n_eval: usize,
    pub lexicon_size: usize,
    pub n_phonemes: usize,
    pub phonemes_per_word: usize,
    /// Words cluster into this many classes; a class fixes the first phoneme
    /// set of its words and sentences favour a single class.
    pub n_classes: usize,
    pub words_per_utterance: usize,
    /// Unpaired clips range over `1..=max_unpaired_words` words.
    pub max_unpaired_words: usize,
    /// Probability that a word is drawn from the sentence's class.
    pub class_affinity: f64,
    pub text_sentences: usize,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            n_paired: 80,
            n_unpaired: 500,
            n_eval: 12,
            lexicon_size: 24,
            n_phonemes: 12,
            phonemes_per_word: 3,
            n_classes: 4,
            words_per_utterance: 3,
            max_unpaired_words: 4,
            class_affinity: 0.8,
            text_sentences: 3000,
            seed: 0,
        }
    }
}

impl ToyCorpusSpec {
    /// Distinct words the phoneme inventory supports within one class.
    pub fn class_capacity(&self) -> usize {
        let per_class = self.n_phonemes / self.n_classes.max(1);
        per_class.saturating_mul(self.n_phonemes.saturating_pow(self.phonemes_per_word.saturating_sub(1) as u32))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_paired", self.n_paired),
            ("n_unpaired", self.n_unpaired),
            ("n_eval", self.n_eval),
            ("lexicon_size", self.lexicon_size),
            ("n_phonemes", self.n_phonemes),
            ("phonemes_per_word", self.phonemes_per_word),
            ("n_classes", self.n_classes),
            ("words_per_utterance", self.words_per_utterance),
            ("max_unpaired_words", self.max_unpaired_words),
            ("text_sentences", self.text_sentences),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Validation(format!("toy corpus `{name}` must be at least 1")));
            }
        }
        if self.n_classes > self.n_phonemes {
            return Err(Error::Validation("more word classes than phonemes".into()));
        }
        if self.lexicon_size > SYLLABLES.len() * SYLLABLES.len() {
            return Err(Error::Validation(format!(
                "lexicon size {} exceeds the {} available word names",
                self.lexicon_size,
                SYLLABLES.len() * SYLLABLES.len()
            )));
        }
        if self.lexicon_size.div_ceil(self.n_classes) > self.class_capacity() {
            return Err(Error::Validation(format!(
                "lexicon size {} exceeds phoneme-inventory capacity ({} words per class)",
                self.lexicon_size,
                self.class_capacity()
            )));
        }
        if !(0.0..=1.0).contains(&self.class_affinity) {
            return Err(Error::Validation("class_affinity must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Frequency of phoneme `k` of `n`, log-spaced across the band.
pub fn phoneme_hz(k: usize, n: usize) -> f64 {
    if n <= 1 {
        return LOWEST_HZ;
    }
    LOWEST_HZ * (HIGHEST_HZ / LOWEST_HZ).powf(k as f64 / (n - 1) as f64)
}

pub fn phoneme_name(k: usize) -> String {
    format!("ph{k:02}")
}

fn fade(n: usize) -> f64 {
    let edge = n.min(SEGMENT_SAMPLES - 1 - n);
    if edge >= FADE_SAMPLES {
        1.0
    } else {
        0.5 - 0.5 * (PI * (edge as f64 + 0.5) / FADE_SAMPLES as f64).cos()
    }
}

/// Audio for a token sequence: one tone segment per phoneme, silence for
/// `sil`; `eos` and padding contribute nothing.
pub fn render_tokens(tokens: &[usize], lex: &Lexicon) -> Result<Waveform> {
    let n_ph = lex.phonemes().len();
    let mut samples = Vec::with_capacity(tokens.len() * SEGMENT_SAMPLES);
    for &t in tokens {
        match t {
            EOS | PAD => {}
            SIL => samples.extend(std::iter::repeat(0.0).take(SEGMENT_SAMPLES)),
            _ => {
                let k = t - 3;
                if k >= n_ph {
                    return Err(Error::Invalid(format!("token {t} is not a phoneme")));
                }
                let w = 2.0 * PI * phoneme_hz(k, n_ph) / TOY_SAMPLE_RATE as f64;
                samples.extend((0..SEGMENT_SAMPLES).map(|n| TONE_AMPLITUDE * fade(n) * (w * n as f64).sin()));
            }
        }
    }
    Waveform::new(samples, TOY_SAMPLE_RATE)
}

pub fn render_sequence(seq: &TokenSequence, lex: &Lexicon) -> Result<Waveform> {
    render_tokens(&seq.token_ids, lex)
}

fn word_name(i: usize) -> String {
    format!("{}{}", SYLLABLES[i / SYLLABLES.len()], SYLLABLES[i % SYLLABLES.len()])
}

/// Lexicon plus each word's class. Word `i` belongs to class `i % n_classes`; a class owns the
/// phonemes `k` with `k % n_classes == class` as word-initial sounds.
pub fn toy_lexicon(spec: &ToyCorpusSpec) -> Result<(Lexicon, BTreeMap<String, usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phonemes: Vec<String> = (0..spec.n_phonemes).map(phoneme_name).collect();
    let mut used = BTreeSet::new();
    let mut words = BTreeMap::new();
    let mut classes = BTreeMap::new();
    for i in 0..spec.lexicon_size {
        let class = i % spec.n_classes;
        let initials: Vec<usize> = (0..spec.n_phonemes).filter(|k| k % spec.n_classes == class).collect();
        let pron = loop {
            let mut p = vec![initials[rng.gen_range(0..initials.len())]];
            p.extend((1..spec.phonemes_per_word).map(|_| rng.gen_range(0..spec.n_phonemes)));
            if used.insert(p.clone()) {
                break p;
            }
        };
        words.insert(word_name(i), pron.into_iter().map(phoneme_name).collect());
        classes.insert(word_name(i), class);
    }
    Ok((Lexicon::new(&phonemes, &words)?, classes))
}

/// Draws sentences: pick a class, then each word from that class with
/// probability `class_affinity`, otherwise from the whole lexicon.
struct SentenceSampler {
    by_class: Vec<Vec<String>>,
    all: Vec<String>,
    affinity: f64,
}

impl SentenceSampler {
    fn new(spec: &ToyCorpusSpec) -> Self {
        let all: Vec<String> = (0..spec.lexicon_size).map(word_name).collect();
        let mut by_class = vec![Vec::new(); spec.n_classes];
        for (i, w) in all.iter().enumerate() {
            by_class[i % spec.n_classes].push(w.clone());
        }
        Self {
            by_class,
            all,
            affinity: spec.class_affinity,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, n_words: usize) -> Vec<String> {
        let class = &self.by_class[rng.gen_range(0..self.by_class.len())];
        (0..n_words)
            .map(|_| {
                let pool = if rng.gen::<f64>() < self.affinity { class } else { &self.all };
                pool[rng.gen_range(0..pool.len())].clone()
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub paired: Manifest,
    pub unpaired: Manifest,
    pub eval: Manifest,
    pub lexicon: Lexicon,
    /// One sentence per entry, for word-vector training.
    pub text_corpus: Vec<Vec<String>>,
}

pub const PAIRED_MANIFEST: &str = "paired.jsonl";
pub const UNPAIRED_MANIFEST: &str = "unpaired.jsonl";
pub const EVAL_MANIFEST: &str = "eval.jsonl";
pub const LEXICON_FILE: &str = "lexicon.json";
pub const TEXT_CORPUS_FILE: &str = "text_corpus.txt";

/// Writes WAVs, manifests, lexicon and text corpus under `dir`. Paired and
/// evaluation transcripts are distinct; unpaired audio comes from separate
/// sentences whose transcripts are dropped.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec, dir: &Path) -> Result<ToyCorpus> {
    let (lexicon, _) = toy_lexicon(spec)?;
    let sampler = SentenceSampler::new(spec);
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        r.set_stream(s);
        r
    };
    let mut seen = BTreeSet::new();
    let mut distinct = |rng: &mut ChaCha8Rng, n: usize| -> Result<Vec<Vec<String>>> {
        let mut out = Vec::with_capacity(n);
        let mut tries = 0usize;
        while out.len() < n {
            let s = sampler.sample(rng, spec.words_per_utterance);
            if seen.insert(s.clone()) {
                out.push(s);
            }
            tries += 1;
            if tries > 100 * (n + 10) {
                return Err(Error::Validation("lexicon too small for the requested distinct utterances".into()));
            }
        }
        Ok(out)
    };
    let paired_text = distinct(&mut stream(1), spec.n_paired)?;
    let eval_text = distinct(&mut stream(2), spec.n_eval)?;
    let mut urng = stream(3);
    let unpaired_text: Vec<Vec<String>> = (0..spec.n_unpaired)
        .map(|_| {
            let n = urng.gen_range(1..=spec.max_unpaired_words);
            sampler.sample(&mut urng, n)
        })
        .collect();
    let mut trng = stream(4);
    let text_corpus: Vec<Vec<String>> = (0..spec.text_sentences)
        .map(|_| {
            let n = trng.gen_range(spec.words_per_utterance.max(2)..=spec.words_per_utterance.max(2) + 3);
            sampler.sample(&mut trng, n)
        })
        .collect();

    std::fs::create_dir_all(dir).at(dir)?;
    let write_set = |name: &str, texts: &[Vec<String>], keep_text: bool| -> Result<Manifest> {
        let mut entries = Vec::with_capacity(texts.len());
        for (i, words) in texts.iter().enumerate() {
            let id = format!("{name}-{i:04}");
            let seq = crate::text::tokenize(words, &lexicon, crate::text::TokenMode::Phoneme, crate::text::OovPolicy::Error)?;
            let wave = render_sequence(&seq, &lexicon)?;
            let rel = PathBuf::from("wavs").join(name).join(format!("{id}.wav"));
            save_wav(&dir.join(&rel), &wave)?;
            entries.push(ManifestEntry {
                id,
                audio_path: rel,
                text: keep_text.then(|| words.join(" ")),
                duration_seconds: wave.duration_seconds(),
            });
        }
        Manifest::new(entries, dir)
    };
    let paired = write_set("paired", &paired_text, true)?;
    let unpaired = write_set("unpaired", &unpaired_text, false)?;
    let eval = write_set("eval", &eval_text, true)?;
    paired.save(&dir.join(PAIRED_MANIFEST))?;
    unpaired.save(&dir.join(UNPAIRED_MANIFEST))?;
    eval.save(&dir.join(EVAL_MANIFEST))?;
    lexicon.save(&dir.join(LEXICON_FILE))?;
    let corpus_path = dir.join(TEXT_CORPUS_FILE);
    let lines: String = text_corpus.iter().map(|s| s.join(" ") + "\n").collect();
    std::fs::write(&corpus_path, lines).at(&corpus_path)?;
    Ok(ToyCorpus {
        paired,
        unpaired,
        eval,
        lexicon,
        text_corpus,
    })
}
