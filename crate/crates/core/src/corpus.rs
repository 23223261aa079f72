//! Synthetic byte corpus: Zipf-distributed lowercase words with planted
//! capitalized entities (short multi-byte strings) at known offsets.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{LngramError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub train_len: usize,
    pub val_len: usize,
    /// Size of the background word list.
    pub vocab_words: usize,
    pub zipf_exponent: f64,
    pub min_word_len: usize,
    pub max_word_len: usize,
    /// Probability that a background word ends a sentence.
    pub sentence_break: f64,
    pub entities: usize,
    /// Entity length range in tokens (bytes).
    pub entity_min_len: usize,
    pub entity_max_len: usize,
    /// Planted occurrences per output byte.
    pub entity_rate: f64,
    /// Context length of the model the corpus feeds; every entity must fit.
    pub seq_len: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 17,
            train_len: 2_000_000,
            val_len: 100_000,
            vocab_words: 2000,
            zipf_exponent: 1.1,
            min_word_len: 2,
            max_word_len: 8,
            sentence_break: 0.08,
            entities: 50,
            entity_min_len: 3,
            entity_max_len: 5,
            entity_rate: 0.002,
            seq_len: 128,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_words == 0 || self.min_word_len == 0 || self.min_word_len > self.max_word_len {
            return Err(LngramError::Config("background words need a non-empty list and a valid length range".into()));
        }
        if self.entity_min_len < 2 || self.entity_min_len > self.entity_max_len {
            return Err(LngramError::Config("entity length range must be non-empty and at least 2".into()));
        }
        if !(self.zipf_exponent > 0.0) || !(0.0..1.0).contains(&self.sentence_break) || !(self.entity_rate >= 0.0) {
            return Err(LngramError::Config("zipf_exponent must be positive, sentence_break in [0, 1), entity_rate non-negative".into()));
        }
        if self.entity_rate > 0.0 && self.entities == 0 {
            return Err(LngramError::Config("a positive entity_rate needs at least one entity".into()));
        }
        Ok(())
    }
}

/// One planted occurrence; `end` is exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub entity: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub entities: Vec<String>,
    pub train: Vec<u8>,
    pub val: Vec<u8>,
    pub train_index: Vec<EntitySpan>,
    pub val_index: Vec<EntitySpan>,
}

impl Corpus {
    pub fn entity_final_positions(index: &[EntitySpan]) -> Vec<usize> {
        index.iter().map(|s| s.end - 1).collect()
    }
}

fn random_word<R: Rng>(rng: &mut R, min: usize, max: usize, capital: bool) -> String {
    let len = rng.random_range(min..=max);
    let mut w: String = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
    if capital {
        w[..1].make_ascii_uppercase();
    }
    w
}

/// Deterministic per seed. Train and val share the word list and entities but
/// draw their text from separate streams.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let words: Vec<String> = (0..spec.vocab_words).map(|_| random_word(&mut rng, spec.min_word_len, spec.max_word_len, false)).collect();
    let mut entities = Vec::with_capacity(spec.entities);
    while entities.len() < spec.entities {
        let e = random_word(&mut rng, spec.entity_min_len, spec.entity_max_len, true);
        if e.len() > spec.seq_len {
            return Err(LngramError::Config(format!("entity of {} bytes does not fit sequence length {}", e.len(), spec.seq_len)));
        }
        if !entities.contains(&e) {
            entities.push(e);
        }
    }
    let train_seed = rng.random::<u64>();
    let val_seed = rng.random::<u64>();
    let (train, train_index) = gen_split(spec, &words, &entities, spec.train_len, train_seed)?;
    let (val, val_index) = gen_split(spec, &words, &entities, spec.val_len, val_seed)?;
    Ok(Corpus { entities, train, val, train_index, val_index })
}

fn gen_split(spec: &CorpusSpec, words: &[String], entities: &[String], len: usize, seed: u64) -> Result<(Vec<u8>, Vec<EntitySpan>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted = (spec.entity_rate * len as f64).round() as usize;
    let picks: Vec<usize> = (0..planted).map(|_| rng.random_range(0..entities.len())).collect();
    let entity_bytes: usize = picks.iter().map(|&e| entities[e].len() + 1).sum();
    if entity_bytes > len / 2 {
        return Err(LngramError::Config(format!("entity_rate {} leaves too little background text", spec.entity_rate)));
    }
    let zipf = Zipf::new(words.len() as f64, spec.zipf_exponent).map_err(|e| LngramError::Config(e.to_string()))?;
    let background_len = len - entity_bytes;
    let mut bg = Vec::with_capacity(background_len + spec.max_word_len + 2);
    let mut boundaries = Vec::new();
    while bg.len() < background_len {
        let w = &words[zipf.sample(&mut rng) as usize - 1];
        bg.extend_from_slice(w.as_bytes());
        if rng.random_bool(spec.sentence_break) {
            bg.push(b'.');
        }
        bg.push(b' ');
        boundaries.push(bg.len());
    }
    bg.truncate(background_len);
    boundaries.retain(|&b| b <= background_len);
    if planted > boundaries.len() {
        return Err(LngramError::Config("not enough word boundaries to plant every entity".into()));
    }
    let mut slots: Vec<usize> = boundaries.choose_multiple(&mut rng, planted).copied().collect();
    slots.sort_unstable();

    let mut out = Vec::with_capacity(len);
    let mut index = Vec::with_capacity(planted);
    let mut prev = 0;
    for (&at, &e) in slots.iter().zip(&picks) {
        out.extend_from_slice(&bg[prev..at]);
        let start = out.len();
        out.extend_from_slice(entities[e].as_bytes());
        index.push(EntitySpan { entity: e, start, end: out.len() });
        out.push(b' ');
        prev = at;
    }
    out.extend_from_slice(&bg[prev..]);
    debug_assert_eq!(out.len(), len);
    Ok((out, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec { train_len: 50_000, val_len: 5_000, ..Default::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(gen_corpus(&small()).unwrap(), gen_corpus(&small()).unwrap());
        let other = gen_corpus(&CorpusSpec { seed: 18, ..small() }).unwrap();
        assert_ne!(other.train, gen_corpus(&small()).unwrap().train);
    }

    #[test]
    fn lengths_and_splits() {
        let c = gen_corpus(&small()).unwrap();
        assert_eq!(c.train.len(), 50_000);
        assert_eq!(c.val.len(), 5_000);
        assert_ne!(&c.train[..5_000], &c.val[..]);
        assert_eq!(c.entities.len(), 50);
        for e in &c.entities {
            assert!((3..=5).contains(&e.len()), "{e}");
            assert!(e.as_bytes()[0].is_ascii_uppercase() && e.bytes().skip(1).all(|b| b.is_ascii_lowercase()), "{e}");
        }
    }

    #[test]
    fn zero_rate_gives_pure_background() {
        let c = gen_corpus(&CorpusSpec { entity_rate: 0.0, ..small() }).unwrap();
        assert!(c.train_index.is_empty() && c.val_index.is_empty());
        assert!(c.train.iter().all(|b| !b.is_ascii_uppercase()));
    }

    #[test]
    fn index_points_at_verbatim_entities() {
        let c = gen_corpus(&small()).unwrap();
        for span in &c.train_index {
            assert_eq!(&c.train[span.start..span.end], c.entities[span.entity].as_bytes());
        }
        for span in &c.val_index {
            assert_eq!(&c.val[span.start..span.end], c.entities[span.entity].as_bytes());
        }
    }

    #[test]
    fn planted_count_matches_rate() {
        let spec = small();
        let c = gen_corpus(&spec).unwrap();
        // independent count: scan the text for every entity string
        let text = String::from_utf8(c.train.clone()).unwrap();
        let found: usize = c.entities.iter().map(|e| text.matches(e.as_str()).count()).sum();
        let expected = spec.entity_rate * spec.train_len as f64;
        assert!((found as f64 - expected).abs() <= 0.05 * expected, "{found} vs {expected}");
        assert_eq!(c.train_index.len(), expected.round() as usize);
    }

    #[test]
    fn entity_longer_than_context_is_rejected() {
        assert!(matches!(gen_corpus(&CorpusSpec { seq_len: 4, ..small() }), Err(LngramError::Config(_))));
    }
}
