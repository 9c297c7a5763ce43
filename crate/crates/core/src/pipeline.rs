//! Persona discovery and classifier training stages.
//!
//! Utterances arrive labeled with a fine-grained personality id. Each
//! personality is summarized by its mean sentence embedding, the summaries
//! are clustered, a binary classifier is trained per cluster, and the most
//! classifiable clusters become the personas. Personas are numbered by the
//! smallest personality id they contain.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::classifier::{
    evaluate_classifier, train_classifier, ClassifierConfig, ClassifierMetrics, ClassifierShape, LabeledSeq,
    TextCnnClassifier,
};
use crate::error::{Error, Result};
use crate::params::derive_seed;
use crate::persona::{
    build_balanced_dataset, kmeans_restarts, persona_representation, select_top_clusters, PersonaRepr,
    SentenceEncoder,
};
use crate::text::{split_indices, PersonaUtterance, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersonaConfig {
    pub n_personas: usize,
    pub n_clusters: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_restarts: usize,
    pub encoder_dim: usize,
    pub encoder_seed: u64,
    /// Fractions of each balanced dataset used for training and dev; the
    /// rest is the test split.
    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub seed: u64,
}

impl Default for PersonaConfig {
    fn default() -> Self {
        Self {
            n_personas: 5,
            n_clusters: 8,
            kmeans_max_iter: 100,
            kmeans_restarts: 10,
            encoder_dim: 32,
            encoder_seed: 99,
            train_fraction: 0.8,
            dev_fraction: 0.1,
            seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonaSelection {
    /// Personality id → k-means cluster.
    pub label_cluster: BTreeMap<usize, usize>,
    /// Held-out accuracy of each cluster's selection classifier.
    pub cluster_accuracy: BTreeMap<usize, f64>,
    /// Selected cluster of each persona, in persona order.
    pub persona_clusters: Vec<usize>,
    pub inertia: f64,
}

impl PersonaSelection {
    /// Persona of a personality id, if its cluster was selected.
    pub fn persona_of(&self, label: usize) -> Option<usize> {
        let cluster = self.label_cluster.get(&label)?;
        self.persona_clusters.iter().position(|c| c == cluster)
    }

    /// Rewrites `cluster` to the persona id for selected clusters and to
    /// `n_personas + cluster` otherwise, so that every utterance keeps a
    /// distinct non-persona group.
    pub fn relabel(&self, utterances: &[PersonaUtterance]) -> Result<Vec<PersonaUtterance>> {
        let n = self.persona_clusters.len();
        utterances
            .iter()
            .map(|u| {
                let cluster = *self
                    .label_cluster
                    .get(&u.cluster)
                    .ok_or_else(|| Error::Data(format!("personality {} was not clustered", u.cluster)))?;
                let group = self.persona_of(u.cluster).unwrap_or(n + cluster);
                Ok(PersonaUtterance { cluster: group, ..u.clone() })
            })
            .collect()
    }
}

/// Balanced binary dataset for `target`, split into train/dev/test id
/// sequences.
pub fn classifier_splits(
    target: usize,
    utterances: &[PersonaUtterance],
    vocab: &Vocabulary,
    cfg: &PersonaConfig,
) -> Result<[Vec<LabeledSeq>; 3]> {
    let data = build_balanced_dataset(target, utterances, derive_seed(cfg.seed, &format!("balance/{target}")))?;
    let (tr, dv, te) = split_indices(
        data.len(),
        cfg.train_fraction,
        cfg.dev_fraction,
        derive_seed(cfg.seed, &format!("split/{target}")),
    );
    let take = |idx: Vec<usize>| -> Vec<LabeledSeq> {
        idx.into_iter()
            .map(|i| LabeledSeq { ids: vocab.ids(&data[i].tokens), label: data[i].label.unwrap_or(0) })
            .collect()
    };
    Ok([take(tr), take(dv), take(te)])
}

fn train_one(
    target: usize,
    persona: usize,
    utterances: &[PersonaUtterance],
    vocab: &Vocabulary,
    pcfg: &PersonaConfig,
    ccfg: &ClassifierConfig,
) -> Result<(TextCnnClassifier, ClassifierMetrics)> {
    let [train, dev, test] = classifier_splits(target, utterances, vocab, pcfg)?;
    if test.is_empty() {
        return Err(Error::Data(format!("group {target} is too small for a test split")));
    }
    let shape = ClassifierShape {
        persona,
        cluster: target,
        vocab_size: vocab.len(),
        embed_dim: ccfg.embed_dim,
        widths: ccfg.widths.clone(),
        channels: ccfg.channels,
    };
    let cfg = ClassifierConfig { seed: derive_seed(ccfg.seed, &format!("clf/{target}")), ..ccfg.clone() };
    let (model, _) = train_classifier(shape, &train, &dev, &cfg)?;
    let metrics = evaluate_classifier(&model, &test)?;
    Ok((model, metrics))
}

/// Clusters personalities and selects the `n_personas` most classifiable
/// clusters.
pub fn cluster_personas(
    utterances: &[PersonaUtterance],
    encoder: &dyn SentenceEncoder,
    vocab: &Vocabulary,
    pcfg: &PersonaConfig,
    ccfg: &ClassifierConfig,
) -> Result<PersonaSelection> {
    let labels: BTreeSet<usize> = utterances.iter().map(|u| u.cluster).collect();
    if labels.is_empty() {
        return Err(Error::Data("no utterances".into()));
    }
    let mut reps = Vec::with_capacity(labels.len());
    for &label in &labels {
        let sentences = utterances.iter().filter(|u| u.cluster == label).map(|u| u.tokens.as_slice());
        reps.push(persona_representation(label, sentences, encoder)?.vector);
    }
    let km = kmeans_restarts(
        &reps,
        pcfg.n_clusters,
        derive_seed(pcfg.seed, "kmeans"),
        pcfg.kmeans_max_iter,
        pcfg.kmeans_restarts,
    )?;
    let label_cluster: BTreeMap<usize, usize> = labels.iter().copied().zip(km.assignment.iter().copied()).collect();
    let grouped: Vec<PersonaUtterance> = utterances
        .iter()
        .map(|u| PersonaUtterance { cluster: label_cluster[&u.cluster], ..u.clone() })
        .collect();

    let mut cluster_accuracy = BTreeMap::new();
    for cluster in 0..pcfg.n_clusters {
        match train_one(cluster, cluster, &grouped, vocab, pcfg, ccfg) {
            Ok((_, m)) => {
                cluster_accuracy.insert(cluster, m.accuracy);
            }
            // A cluster that cannot be balanced or split is never selected.
            Err(Error::Data(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let mut selected = select_top_clusters(&cluster_accuracy, pcfg.n_personas)?;
    let smallest = |c: usize| label_cluster.iter().find(|(_, &k)| k == c).map(|(&l, _)| l);
    selected.sort_by_key(|&c| smallest(c));
    Ok(PersonaSelection { label_cluster, cluster_accuracy, persona_clusters: selected, inertia: km.inertia })
}

/// One classifier per persona. `utterances` must already be relabeled so
/// that `cluster` holds the persona id (see [`PersonaSelection::relabel`]).
pub fn train_persona_classifiers(
    utterances: &[PersonaUtterance],
    vocab: &Vocabulary,
    pcfg: &PersonaConfig,
    ccfg: &ClassifierConfig,
) -> Result<Vec<(TextCnnClassifier, ClassifierMetrics)>> {
    (0..pcfg.n_personas)
        .map(|j| train_one(j, j, utterances, vocab, pcfg, ccfg))
        .collect()
}

/// Persona representations from relabeled utterances.
pub fn persona_representations(
    utterances: &[PersonaUtterance],
    n_personas: usize,
    encoder: &dyn SentenceEncoder,
) -> Result<Vec<PersonaRepr>> {
    (0..n_personas)
        .map(|j| {
            let sentences = utterances.iter().filter(|u| u.cluster == j).map(|u| u.tokens.as_slice());
            persona_representation(j, sentences, encoder)
                .map_err(|_| Error::Data(format!("persona {j} has no utterances")))
        })
        .collect()
}
