//! Tokenization, the shared vocabulary, and line-oriented story and
//! utterance records.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Images and sentences per story.
pub const STORY_LEN: usize = 5;
/// Number of target personas.
pub const NUM_PERSONAS: usize = 5;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases, splits on whitespace and splits off `. , ! ? ; :`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if matches!(ch, '.' | ',' | '!' | '?' | ';' | ':') {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    min_count: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times. Ids after the reserved
    /// block are ordered by descending frequency, then lexicographically.
    pub fn build<'a, I>(corpora: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in corpora {
            for t in seq {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && !RESERVED.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Ok(Self::from_tokens(tokens, min_count))
    }

    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, min_count, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::Index { index: id, len: self.tokens.len() })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Content ids of `tokens`, mapping unknown tokens to UNK.
    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// `BOS tokens… EOS` truncated to `max_len` (keeping the EOS) and
    /// padded with PAD.
    pub fn encode_sentence(&self, tokens: &[String], max_len: usize) -> Result<Vec<usize>> {
        if max_len < 2 {
            return Err(Error::Config(format!("max_len {max_len} must be at least 2")));
        }
        let mut out = Vec::with_capacity(max_len);
        out.push(BOS);
        out.extend(tokens.iter().take(max_len - 2).map(|t| self.id(t)));
        out.push(EOS);
        out.resize(max_len, PAD);
        Ok(out)
    }

    /// Inverse of [`Vocabulary::encode_sentence`]: skips BOS and PAD, stops
    /// at EOS.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                BOS | PAD => {}
                _ => out.push(self.token(id)?.to_string()),
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: Vocabulary = serde_json::from_str(&fs::read_to_string(path)?)?;
        if raw.tokens.len() < RESERVED.len() || raw.tokens[..4] != RESERVED.map(String::from) {
            return Err(Error::Data(format!("{}: reserved tokens missing", path.display())));
        }
        Ok(Self::from_tokens(raw.tokens, raw.min_count))
    }
}

/// One visual story: five image feature vectors, five tokenized sentences
/// and an optional target persona.
#[derive(Clone, Debug, PartialEq)]
pub struct StoryExample {
    pub id: String,
    pub image_features: Vec<Vec<f64>>,
    pub sentences: Vec<Vec<String>>,
    pub persona: Option<usize>,
}

impl StoryExample {
    pub fn validate(&self) -> Result<()> {
        if self.image_features.len() != STORY_LEN {
            return Err(Error::Data(format!(
                "story {}: expected {STORY_LEN} image features, found {}",
                self.id,
                self.image_features.len()
            )));
        }
        if self.sentences.len() != STORY_LEN {
            return Err(Error::Data(format!(
                "story {}: expected {STORY_LEN} sentences, found {}",
                self.id,
                self.sentences.len()
            )));
        }
        let d = self.image_features[0].len();
        if d == 0 || self.image_features.iter().any(|f| f.len() != d) {
            return Err(Error::Data(format!("story {}: image feature dims differ", self.id)));
        }
        if self.image_features.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("story {}: non-finite image feature", self.id)));
        }
        if let Some(p) = self.persona {
            if p >= NUM_PERSONAS {
                return Err(Error::Data(format!("story {}: persona {p} out of range", self.id)));
            }
        }
        Ok(())
    }

    pub fn persona(&self) -> Result<usize> {
        self.persona
            .ok_or_else(|| Error::Data(format!("story {} has no persona assigned", self.id)))
    }

    pub fn feature_dim(&self) -> usize {
        self.image_features.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryRecord {
    pub id: String,
    pub image_features: Vec<Vec<f64>>,
    pub sentences: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona: Option<usize>,
}

impl From<&StoryExample> for StoryRecord {
    fn from(s: &StoryExample) -> Self {
        Self {
            id: s.id.clone(),
            image_features: s.image_features.clone(),
            sentences: s.sentences.iter().map(|t| t.join(" ")).collect(),
            persona: s.persona,
        }
    }
}

impl StoryRecord {
    pub fn into_example(self) -> StoryExample {
        StoryExample {
            id: self.id,
            image_features: self.image_features,
            sentences: self.sentences.iter().map(|s| tokenize(s)).collect(),
            persona: self.persona,
        }
    }
}

/// A persona-annotated utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonaUtterance {
    pub tokens: Vec<String>,
    pub cluster: usize,
    pub label: Option<u8>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub text: String,
    pub cluster: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

fn read_jsonl<T, F>(path: &Path, mut convert: F) -> Result<Vec<T>>
where
    F: FnMut(usize, &str) -> Result<T>,
{
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(convert(i + 1, &line)?);
    }
    Ok(out)
}

fn record_id(line: &str) -> String {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("id").and_then(|id| id.as_str()).map(String::from))
        .unwrap_or_else(|| "?".into())
}

pub fn parse_story_line(line_no: usize, line: &str) -> Result<StoryExample> {
    let rec: StoryRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        record: record_id(line),
        message: e.to_string(),
    })?;
    let id = rec.id.clone();
    let story = rec.into_example();
    story.validate().map_err(|e| Error::Parse {
        line: line_no,
        record: id,
        message: e.to_string(),
    })?;
    Ok(story)
}

/// Reads one JSON story record per line. Blank lines are skipped.
pub fn load_stories(path: &Path) -> Result<Vec<StoryExample>> {
    let stories = read_jsonl(path, parse_story_line)?;
    if let Some(first) = stories.first() {
        let d = first.feature_dim();
        if let Some(bad) = stories.iter().find(|s| s.feature_dim() != d) {
            return Err(Error::Data(format!(
                "story {} has feature dim {}, expected {d}",
                bad.id,
                bad.feature_dim()
            )));
        }
    }
    Ok(stories)
}

pub fn load_utterances(path: &Path) -> Result<Vec<PersonaUtterance>> {
    read_jsonl(path, |line_no, line| {
        let rec: UtteranceRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            record: format!("line {line_no}"),
            message: e.to_string(),
        })?;
        let tokens = tokenize(&rec.text);
        if tokens.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                record: format!("line {line_no}"),
                message: "utterance has no tokens".into(),
            });
        }
        if matches!(rec.label, Some(l) if l > 1) {
            return Err(Error::Parse {
                line: line_no,
                record: format!("line {line_no}"),
                message: "label must be 0 or 1".into(),
            });
        }
        Ok(PersonaUtterance { tokens, cluster: rec.cluster, label: rec.label })
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(&r)?);
        buf.push('\n');
    }
    crate::checkpoint::write_atomic(path, buf.as_bytes())
}

pub fn write_stories(path: &Path, stories: &[StoryExample]) -> Result<()> {
    write_jsonl(path, stories.iter().map(StoryRecord::from))
}

pub fn write_utterances(path: &Path, utterances: &[PersonaUtterance]) -> Result<()> {
    write_jsonl(
        path,
        utterances.iter().map(|u| UtteranceRecord {
            text: u.tokens.join(" "),
            cluster: u.cluster,
            label: u.label,
        }),
    )
}

/// Shuffles stories with `seed` and cuts the permutation into `n_personas`
/// contiguous segments whose sizes differ by at most one; segment `j`
/// becomes persona `j`.
pub fn assign_personas(stories: &mut [StoryExample], n_personas: usize, seed: u64) -> Result<()> {
    if n_personas == 0 {
        return Err(Error::Config("n_personas must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..stories.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = stories.len() / n_personas;
    let extra = stories.len() % n_personas;
    let mut pos = 0;
    for persona in 0..n_personas {
        let size = base + usize::from(persona < extra);
        for &i in &order[pos..pos + size] {
            stories[i].persona = Some(persona);
        }
        pos += size;
    }
    Ok(())
}

/// Seeded train/dev/test split by fractions of `n` items. Returns index
/// lists; the test split receives the remainder.
pub fn split_indices(n: usize, train: f64, dev: f64, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * train).round() as usize;
    let n_dev = (((n as f64) * dev).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let test = order.split_off(n_train + n_dev);
    let dev = order.split_off(n_train);
    (order, dev, test)
}
