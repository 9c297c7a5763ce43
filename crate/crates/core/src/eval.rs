//! ROUGE-L, sentence-level persona accuracy and corpus reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classifier::TextCnnClassifier;
use crate::error::{Error, Result};
use crate::model::{DecodeConfig, EncodedStory, GeneratorModel};
use crate::text::{Vocabulary, BOS, EOS};

pub const DEFAULT_BETA: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub beta: f64,
}

/// Length of the longest common subsequence.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based precision, recall and `F_beta = (1+b²)PR / (R + b²P)`.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T], beta: f64) -> Result<RougeScore> {
    if reference.is_empty() {
        return Err(Error::Contract("rouge_l reference is empty".into()));
    }
    let lcs = lcs_length(candidate, reference) as f64;
    let precision = if candidate.is_empty() { 0.0 } else { lcs / candidate.len() as f64 };
    let recall = lcs / reference.len() as f64;
    let b2 = beta * beta;
    let f = if precision == 0.0 && recall == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / (recall + b2 * precision)
    };
    Ok(RougeScore { precision, recall, f, beta })
}

/// Per-persona share of sentences scored strictly above 0.5 by the target
/// persona's classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonaAccuracy {
    /// `None` when no story targets that persona.
    pub per_persona: Vec<Option<f64>>,
    pub sentences: Vec<usize>,
}

impl PersonaAccuracy {
    /// Mean over the personas that are present.
    pub fn macro_mean(&self) -> Option<f64> {
        let present: Vec<f64> = self.per_persona.iter().flatten().copied().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// One classified generated sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub story: String,
    pub index: usize,
    pub persona: usize,
    pub tokens: Vec<String>,
    pub probability: f64,
}

fn accuracy_from_probabilities(records: impl IntoIterator<Item = (usize, f64)>, n: usize) -> PersonaAccuracy {
    let mut hits = vec![0usize; n];
    let mut counts = vec![0usize; n];
    for (persona, p) in records {
        counts[persona] += 1;
        hits[persona] += usize::from(p > 0.5);
    }
    PersonaAccuracy {
        per_persona: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
        sentences: counts,
    }
}

/// `stories[i]` holds the generated id sentences of a story targeted at
/// `personas[i]`.
pub fn persona_accuracy(
    stories: &[Vec<Vec<usize>>],
    personas: &[usize],
    classifiers: &[TextCnnClassifier],
) -> Result<PersonaAccuracy> {
    if stories.len() != personas.len() {
        return Err(Error::Contract(format!("{} stories but {} personas", stories.len(), personas.len())));
    }
    let mut probs = Vec::new();
    for (story, &j) in stories.iter().zip(personas) {
        let clf = classifiers
            .get(j)
            .ok_or_else(|| Error::Contract(format!("no classifier for persona {j}")))?;
        for sentence in story {
            probs.push((j, clf.classify_hard(sentence)?));
        }
    }
    Ok(accuracy_from_probabilities(probs, classifiers.len()))
}

/// Recomputes persona accuracy from a raw per-sentence dump.
pub fn accuracy_from_dump(records: &[SentenceRecord], n_personas: usize) -> PersonaAccuracy {
    accuracy_from_probabilities(records.iter().map(|r| (r.persona, r.probability)), n_personas)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RougeGranularity {
    /// Five sentences concatenated per story.
    Story,
    /// Each sentence scored against its reference.
    Sentence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub stories: usize,
    pub sentences: usize,
    pub persona_accuracy: PersonaAccuracy,
    pub mean_persona_accuracy: Option<f64>,
    pub rouge_l: RougeScore,
    pub rouge_granularity: RougeGranularity,
    pub decode: DecodeConfig,
    /// Free-form echo of the run configuration.
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "variant      {}", self.variant);
        let _ = writeln!(out, "stories      {}", self.stories);
        let _ = writeln!(out, "sentences    {}", self.sentences);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<8} {:>9} {:>10}", "persona", "sentences", "accuracy");
        for (j, (acc, n)) in self
            .persona_accuracy
            .per_persona
            .iter()
            .zip(&self.persona_accuracy.sentences)
            .enumerate()
        {
            let acc = acc.map_or("absent".to_string(), |a| format!("{:.2}", 100.0 * a));
            let _ = writeln!(out, "{:<8} {:>9} {:>10}", format!("C{}", j + 1), n, acc);
        }
        let mean = self.mean_persona_accuracy.map_or("absent".into(), |a| format!("{:.2}", 100.0 * a));
        let _ = writeln!(out, "{:<8} {:>9} {:>10}", "mean", self.sentences, mean);
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "ROUGE-L ({:?}, beta {}): P {:.4}  R {:.4}  F {:.4}",
            self.rouge_granularity, self.rouge_l.beta, self.rouge_l.precision, self.rouge_l.recall, self.rouge_l.f
        );
        out
    }
}

/// Strips BOS and EOS from a gold sentence.
fn content(ids: &[usize]) -> &[usize] {
    let start = usize::from(ids.first() == Some(&BOS));
    let end = if ids.last() == Some(&EOS) { ids.len() - 1 } else { ids.len() };
    &ids[start..end.max(start)]
}

/// Generates every test story at its own target persona and scores the
/// results. Returns the report and the per-sentence dump it was computed
/// from.
pub fn corpus_report(
    model: &GeneratorModel,
    testset: &[EncodedStory],
    classifiers: &[TextCnnClassifier],
    vocab: &Vocabulary,
    decode: &DecodeConfig,
    granularity: RougeGranularity,
    beta: f64,
    config: serde_json::Value,
) -> Result<(EvalReport, Vec<SentenceRecord>)> {
    if testset.is_empty() {
        return Err(Error::EmptyInput("corpus_report"));
    }
    let mut dump = Vec::new();
    let (mut p, mut r, mut f, mut scored) = (0.0, 0.0, 0.0, 0usize);
    for story in testset {
        let persona = story
            .persona
            .ok_or_else(|| Error::Data(format!("test story {} has no persona", story.id)))?;
        let clf = classifiers
            .get(persona)
            .ok_or_else(|| Error::Contract(format!("no classifier for persona {persona}")))?;
        let generated = model.generate_story(&story.features, persona, decode)?;
        for (k, sentence) in generated.iter().enumerate() {
            dump.push(SentenceRecord {
                story: story.id.clone(),
                index: k,
                persona,
                tokens: vocab.decode(sentence)?,
                probability: clf.classify_hard(sentence)?,
            });
        }
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = match granularity {
            RougeGranularity::Story => vec![(
                generated.concat(),
                story.sentences.iter().flat_map(|s| content(s).to_vec()).collect(),
            )],
            RougeGranularity::Sentence => generated
                .iter()
                .zip(&story.sentences)
                .map(|(g, s)| (g.clone(), content(s).to_vec()))
                .filter(|(_, s)| !s.is_empty())
                .collect(),
        };
        for (cand, reference) in pairs {
            if reference.is_empty() {
                continue;
            }
            let s = rouge_l(&cand, &reference, beta)?;
            p += s.precision;
            r += s.recall;
            f += s.f;
            scored += 1;
        }
    }
    let n = scored.max(1) as f64;
    let accuracy = accuracy_from_dump(&dump, classifiers.len());
    let report = EvalReport {
        variant: model.variant().name().into(),
        stories: testset.len(),
        sentences: dump.len(),
        mean_persona_accuracy: accuracy.macro_mean(),
        persona_accuracy: accuracy,
        rouge_l: RougeScore { precision: p / n, recall: r / n, f: f / n, beta },
        rouge_granularity: granularity,
        decode: decode.clone(),
        config,
    };
    Ok((report, dump))
}
