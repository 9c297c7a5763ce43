//! Deterministic synthetic corpus.
//!
//! Each persona owns a marker lexicon, disjoint from every other persona's.
//! A story sentence is a few content words in canonical order followed by one
//! marker of the story's persona. The image feature of a sentence is a fixed
//! random projection of its content-word bag plus small uniform noise, so
//! images carry the content but never the persona.
//!
//! Utterances are grouped into fine-grained personalities. Every persona has
//! `personalities_per_persona` personalities sharing its lexicon. Distractor
//! personality `d` draws markers from the window `dx{d}..dx{d+lexicon_size}`
//! of a separate pool, so neighbouring distractors overlap: they form a
//! chain that clusters loosely and classifies worse than any persona.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::derive_seed;
use crate::text::{PersonaUtterance, StoryExample, STORY_LEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Number of content words.
    pub vocab_size: usize,
    pub n_personas: usize,
    /// Markers per persona lexicon.
    pub lexicon_size: usize,
    /// Explicit lexicons; generated as `p{j}m{i}` when absent.
    pub lexicons: Option<Vec<Vec<String>>>,
    pub stories_per_persona: usize,
    /// Inclusive range of content words per story sentence.
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    pub image_dim: usize,
    pub noise: f64,
    pub utterances_per_personality: usize,
    pub personalities_per_persona: usize,
    pub distractor_personalities: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 24,
            n_personas: 5,
            lexicon_size: 3,
            lexicons: None,
            stories_per_persona: 40,
            min_sentence_len: 2,
            max_sentence_len: 3,
            image_dim: 64,
            noise: 0.05,
            utterances_per_personality: 100,
            personalities_per_persona: 2,
            distractor_personalities: 6,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub stories: Vec<StoryExample>,
    pub utterances: Vec<PersonaUtterance>,
    pub lexicons: Vec<Vec<String>>,
    pub content_words: Vec<String>,
}

impl SynthConfig {
    pub fn lexicons(&self) -> Vec<Vec<String>> {
        match &self.lexicons {
            Some(l) => l.clone(),
            None => (0..self.n_personas)
                .map(|p| (0..self.lexicon_size).map(|i| format!("p{p}m{i}")).collect())
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lex = self.lexicons();
        if lex.len() != self.n_personas || self.n_personas == 0 {
            return Err(Error::Config(format!(
                "need one lexicon per persona ({}), got {}",
                self.n_personas,
                lex.len()
            )));
        }
        let mut seen = HashSet::new();
        for (p, l) in lex.iter().enumerate() {
            if l.is_empty() {
                return Err(Error::Config(format!("persona {p} has an empty lexicon")));
            }
            for w in l {
                if w.starts_with('w') && w[1..].parse::<usize>().is_ok() || w.starts_with("dx") {
                    return Err(Error::Config(format!("marker `{w}` collides with generated words")));
                }
                if !seen.insert(w.as_str()) {
                    return Err(Error::Config(format!("marker `{w}` appears in more than one lexicon")));
                }
            }
        }
        if self.min_sentence_len == 0 || self.min_sentence_len > self.max_sentence_len {
            return Err(Error::Config("sentence length range is empty".into()));
        }
        if self.max_sentence_len > self.vocab_size {
            return Err(Error::Config("max_sentence_len exceeds vocab_size".into()));
        }
        if self.image_dim == 0 || self.personalities_per_persona == 0 {
            return Err(Error::Config("image_dim and personalities_per_persona must be positive".into()));
        }
        Ok(())
    }
}

/// Builds the corpus described by `cfg`. Identical configs give identical
/// corpora.
pub fn synthesize_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let lexicons = cfg.lexicons();
    let content_words: Vec<String> = (0..cfg.vocab_size).map(|i| format!("w{i}")).collect();

    let mut proj_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "projection"));
    let projection: Vec<Vec<f64>> = (0..cfg.image_dim)
        .map(|_| (0..cfg.vocab_size).map(|_| proj_rng.random_range(-1.0..1.0)).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "stories"));
    let mut stories = Vec::with_capacity(cfg.n_personas * cfg.stories_per_persona);
    for (persona, lexicon) in lexicons.iter().enumerate() {
        for i in 0..cfg.stories_per_persona {
            let mut sentences = Vec::with_capacity(STORY_LEN);
            let mut features = Vec::with_capacity(STORY_LEN);
            for _ in 0..STORY_LEN {
                let bag = sample_bag(&mut rng, cfg.vocab_size, cfg.min_sentence_len, cfg.max_sentence_len);
                let feature = (0..cfg.image_dim)
                    .map(|r| {
                        let signal: f64 = bag.iter().map(|&w| projection[r][w]).sum();
                        signal + rng.random_range(-cfg.noise..=cfg.noise)
                    })
                    .collect();
                let mut tokens: Vec<String> = bag.iter().map(|&w| content_words[w].clone()).collect();
                tokens.push(lexicon.choose(&mut rng).expect("non-empty").clone());
                sentences.push(tokens);
                features.push(feature);
            }
            stories.push(StoryExample {
                id: format!("syn-{persona}-{i}"),
                image_features: features,
                sentences,
                persona: Some(persona),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "utterances"));
    let pool: Vec<String> = (0..cfg.distractor_personalities + cfg.lexicon_size)
        .map(|i| format!("dx{i}"))
        .collect();
    let mut utterances = Vec::new();
    let n_persona_labels = cfg.n_personas * cfg.personalities_per_persona;
    for label in 0..n_persona_labels + cfg.distractor_personalities {
        let markers: &[String] = if label < n_persona_labels {
            &lexicons[label / cfg.personalities_per_persona]
        } else {
            let d = label - n_persona_labels;
            &pool[d..d + cfg.lexicon_size]
        };
        for _ in 0..cfg.utterances_per_personality {
            let bag = sample_bag(&mut rng, cfg.vocab_size, 2, 4.min(cfg.vocab_size).max(2));
            let mut tokens: Vec<String> = bag.iter().map(|&w| content_words[w].clone()).collect();
            for _ in 0..rng.random_range(1..=2) {
                tokens.push(markers.choose(&mut rng).expect("non-empty").clone());
            }
            tokens.shuffle(&mut rng);
            utterances.push(PersonaUtterance { tokens, cluster: label, label: None });
        }
    }

    Ok(SynthCorpus { stories, utterances, lexicons, content_words })
}

/// Distinct content-word indices in ascending order.
fn sample_bag(rng: &mut ChaCha8Rng, vocab: usize, min_len: usize, max_len: usize) -> Vec<usize> {
    let len = rng.random_range(min_len..=max_len.min(vocab));
    let mut all: Vec<usize> = (0..vocab).collect();
    all.partial_shuffle(rng, len);
    let mut bag = all[..len].to_vec();
    bag.sort_unstable();
    bag
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicons_never_mix_within_an_utterance() {
        let cfg = SynthConfig {
            n_personas: 2,
            lexicons: Some(vec![
                vec!["alpha".into(), "alphab".into()],
                vec!["beta".into(), "betab".into()],
            ]),
            stories_per_persona: 4,
            distractor_personalities: 0,
            ..SynthConfig::default()
        };
        let c = synthesize_corpus(&cfg).unwrap();
        for u in &c.utterances {
            let has = |l: &Vec<String>| u.tokens.iter().any(|t| l.contains(t));
            assert!(has(&c.lexicons[0]) ^ has(&c.lexicons[1]));
        }
        for s in &c.stories {
            let own = &c.lexicons[s.persona.unwrap()];
            for sent in &s.sentences {
                assert!(sent.iter().any(|t| own.contains(t)));
            }
        }
    }

    #[test]
    fn overlapping_lexicons_are_rejected() {
        let cfg = SynthConfig {
            n_personas: 2,
            lexicons: Some(vec![vec!["same".into()], vec!["same".into()]]),
            ..SynthConfig::default()
        };
        assert!(matches!(synthesize_corpus(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SynthConfig { stories_per_persona: 3, ..SynthConfig::default() };
        assert_eq!(synthesize_corpus(&cfg).unwrap(), synthesize_corpus(&cfg).unwrap());
        let other = SynthConfig { seed: 18, ..cfg.clone() };
        assert_ne!(synthesize_corpus(&cfg).unwrap(), synthesize_corpus(&other).unwrap());
    }

    #[test]
    fn stories_are_well_formed() {
        let cfg = SynthConfig::default();
        let c = synthesize_corpus(&cfg).unwrap();
        assert_eq!(c.stories.len(), cfg.n_personas * cfg.stories_per_persona);
        for s in &c.stories {
            s.validate().unwrap();
            assert_eq!(s.feature_dim(), cfg.image_dim);
        }
        let labels = cfg.n_personas * cfg.personalities_per_persona + cfg.distractor_personalities;
        assert_eq!(c.utterances.len(), labels * cfg.utterances_per_personality);
    }
}
