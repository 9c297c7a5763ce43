//! Binary text CNN persona classifiers.
//!
//! A classifier embeds each position, convolves filter banks of several
//! widths, max-pools over time and projects to one logit. Positions can be
//! hard token ids or probability distributions over the vocabulary; a
//! distribution is embedded as the probability-weighted mean of embedding
//! rows, so a one-hot distribution reproduces the hard lookup.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::layers::{conv1d_maxpool, dropout, linear, ConvFilter};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tape::{sigmoid, Binding, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub embed_dim: usize,
    pub widths: Vec<usize>,
    pub channels: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            widths: vec![2, 3, 4],
            channels: 32,
            lr: 1e-3,
            weight_decay: 1e-5,
            epochs: 15,
            batch_size: 16,
            dropout: 0.5,
            seed: 7,
        }
    }
}

/// Architecture fields stored alongside classifier weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierShape {
    pub persona: usize,
    pub cluster: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub widths: Vec<usize>,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextCnnClassifier {
    pub shape: ClassifierShape,
    pub params: ParamStore,
}

/// A token-id sequence with a binary label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSeq {
    pub ids: Vec<usize>,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    /// Mean evaluation-mode training loss after each epoch.
    pub epoch_losses: Vec<f64>,
    pub dev_accuracy: Vec<f64>,
    pub best_epoch: usize,
}

/// Input positions of a classifier: hard ids or nodes holding distributions.
pub enum Positions<'a> {
    Hard(&'a [usize]),
    Soft(&'a [NodeId]),
}

impl TextCnnClassifier {
    pub fn new(shape: ClassifierShape, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let d = shape.embed_dim;
        params.init_uniform(seed, "emb", &[shape.vocab_size, d], d);
        for &w in &shape.widths {
            params.init_uniform(seed, &format!("conv{w}/w"), &[shape.channels, w * d], w * d);
            params.init_uniform(seed, &format!("conv{w}/b"), &[shape.channels], w * d);
        }
        let feat = shape.channels * shape.widths.len();
        params.init_uniform(seed, "out/w", &[1, feat], feat);
        params.init_uniform(seed, "out/b", &[1], feat);
        Self { shape, params }
    }

    pub fn vocab_size(&self) -> usize {
        self.shape.vocab_size
    }

    /// Logit for one sequence on an existing tape.
    pub fn logit(
        &self,
        tape: &mut Tape,
        b: &Binding,
        input: Positions<'_>,
        dropout_rng: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<NodeId> {
        let emb = b.get("emb")?;
        let seq: Vec<NodeId> = match input {
            Positions::Hard(ids) => ids.iter().map(|&i| tape.row(emb, i)).collect::<Result<_>>()?,
            Positions::Soft(dists) => dists
                .iter()
                .map(|&p| tape.vecmat(p, emb))
                .collect::<Result<_>>()?,
        };
        let filters: Vec<ConvFilter> = self
            .shape
            .widths
            .iter()
            .map(|&w| {
                Ok(ConvFilter {
                    width: w,
                    w: b.get(&format!("conv{w}/w"))?,
                    b: b.get(&format!("conv{w}/b"))?,
                })
            })
            .collect::<Result<_>>()?;
        let mut features = conv1d_maxpool(tape, &seq, &filters)?;
        if let Some((rng, p)) = dropout_rng {
            features = dropout(tape, features, p, rng, true)?;
        }
        linear(tape, b.get("out/w")?, b.get("out/b")?, features)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.shape.vocab_size) {
            Some(&i) => Err(Error::Index { index: i, len: self.shape.vocab_size }),
            None => Ok(()),
        }
    }

    /// Probability that `ids` belongs to this classifier's persona.
    pub fn classify_hard(&self, ids: &[usize]) -> Result<f64> {
        self.check_ids(ids)?;
        let mut tape = Tape::new();
        let b = tape.bind(&self.params, false);
        let z = self.logit(&mut tape, &b, Positions::Hard(ids), None)?;
        Ok(sigmoid(tape.scalar(z)))
    }

    /// Probability for a sequence of distributions over the vocabulary.
    pub fn classify_soft(&self, dists: &[Vec<f64>]) -> Result<f64> {
        for (t, p) in dists.iter().enumerate() {
            check_distribution(p, self.shape.vocab_size).map_err(|m| Error::Contract(format!("position {t}: {m}")))?;
        }
        let mut tape = Tape::new();
        let b = tape.bind(&self.params, false);
        let nodes: Vec<NodeId> = dists.iter().map(|p| tape.constant(Tensor::vector(p.clone()))).collect();
        let z = self.logit(&mut tape, &b, Positions::Soft(&nodes), None)?;
        Ok(sigmoid(tape.scalar(z)))
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        let prefix = format!("clf/{}/", self.shape.persona);
        ckpt.meta.insert(format!("{prefix}shape"), serde_json::to_string(&self.shape)?);
        self.params.export_prefixed(&prefix, &mut ckpt.tensors);
        Ok(())
    }

    pub fn load_from(ckpt: &Checkpoint, persona: usize) -> Result<Self> {
        let prefix = format!("clf/{persona}/");
        let shape: ClassifierShape = serde_json::from_str(ckpt.meta(&format!("{prefix}shape"))?)?;
        let params = ckpt.tensors.with_prefix_stripped(&prefix);
        let reference = TextCnnClassifier::new(shape.clone(), 0);
        for (name, t) in reference.params.iter() {
            let got = params.get(name).map_err(|_| Error::Format(format!("missing tensor {prefix}{name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!("tensor {prefix}{name} has shape {:?}", got.shape())));
            }
        }
        Ok(Self { shape, params })
    }
}

fn check_distribution(p: &[f64], vocab: usize) -> std::result::Result<(), String> {
    if p.len() != vocab {
        return Err(format!("distribution has length {}, vocabulary {vocab}", p.len()));
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err("distribution has a negative or non-finite entry".into());
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(format!("distribution sums to {s}"));
    }
    Ok(())
}

pub fn save_classifiers(path: &Path, classifiers: &[TextCnnClassifier]) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    ckpt.meta.insert("kind".into(), "classifiers".into());
    ckpt.meta.insert("count".into(), classifiers.len().to_string());
    for c in classifiers {
        c.save_into(&mut ckpt)?;
    }
    ckpt.save(path)
}

pub fn load_classifiers(path: &Path) -> Result<Vec<TextCnnClassifier>> {
    let ckpt = Checkpoint::load(path)?;
    let count: usize = ckpt
        .meta("count")?
        .parse()
        .map_err(|_| Error::Format("bad classifier count".into()))?;
    (0..count).map(|j| TextCnnClassifier::load_from(&ckpt, j)).collect()
}

/// Accuracy, precision, recall and positive-class F1 for boolean predictions.
pub fn metrics_from_predictions(pred: &[bool], gold: &[bool]) -> ClassifierMetrics {
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gold) {
        match (p, g) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    ClassifierMetrics {
        accuracy: ratio(tp + tn, tp + tn + fp + fn_),
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
    }
}

/// Threshold 0.5 (strict) on the test set.
pub fn evaluate_classifier(model: &TextCnnClassifier, testset: &[LabeledSeq]) -> Result<ClassifierMetrics> {
    if testset.is_empty() {
        return Err(Error::EmptyInput("evaluate_classifier"));
    }
    let mut pred = Vec::with_capacity(testset.len());
    for ex in testset {
        pred.push(model.classify_hard(&ex.ids)? > 0.5);
    }
    let gold: Vec<bool> = testset.iter().map(|e| e.label == 1).collect();
    Ok(metrics_from_predictions(&pred, &gold))
}

fn mean_loss(model: &TextCnnClassifier, data: &[LabeledSeq]) -> Result<f64> {
    let mut total = 0.0;
    for ex in data {
        let mut tape = Tape::new();
        let b = tape.bind(&model.params, false);
        let z = model.logit(&mut tape, &b, Positions::Hard(&ex.ids), None)?;
        total += crate::tape::bce_with_logit(tape.scalar(z), ex.label as f64);
    }
    Ok(total / data.len() as f64)
}

/// Minimizes per-example sigmoid binary cross-entropy with Adam and returns
/// the parameters of the epoch with the best dev accuracy, breaking ties by
/// lower dev loss. With an empty dev set the final epoch is kept.
pub fn train_classifier(
    shape: ClassifierShape,
    train: &[LabeledSeq],
    dev: &[LabeledSeq],
    cfg: &ClassifierConfig,
) -> Result<(TextCnnClassifier, TrainSummary)> {
    if train.is_empty() {
        return Err(Error::Data("classifier training set is empty".into()));
    }
    if let Some(ex) = train.iter().find(|e| e.label > 1) {
        return Err(Error::Data(format!("label {} is not binary", ex.label)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut model = TextCnnClassifier::new(shape, cfg.seed);
    for ex in train.iter().chain(dev) {
        model.check_ids(&ex.ids)?;
    }
    let mut adam = AdamState::new(cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut summary = TrainSummary { epoch_losses: vec![], dev_accuracy: vec![], best_epoch: 0 };
    let mut best: Option<(f64, f64, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let b = tape.bind(&model.params, true);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let ex = &train[i];
                let z = model.logit(&mut tape, &b, Positions::Hard(&ex.ids), Some((&mut rng, cfg.dropout)))?;
                losses.push(tape.sigmoid_bce(z, ex.label as f64)?);
            }
            let loss = tape.mean(&losses)?;
            let grads = tape.backward(loss)?;
            adam.step(&mut model.params, grads.params())?;
        }
        summary.epoch_losses.push(mean_loss(&model, train)?);
        if !dev.is_empty() {
            let acc = evaluate_classifier(&model, dev)?.accuracy;
            let loss = mean_loss(&model, dev)?;
            summary.dev_accuracy.push(acc);
            if best.as_ref().is_none_or(|(a, l, _)| acc > *a || (acc == *a && loss < *l)) {
                best = Some((acc, loss, model.params.clone()));
                summary.best_epoch = epoch;
            }
        } else {
            summary.best_epoch = epoch;
        }
    }
    if let Some((_, _, params)) = best {
        model.params = params;
    }
    Ok((model, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use rand::Rng;
    use std::collections::BTreeMap;

    fn shape(vocab: usize) -> ClassifierShape {
        ClassifierShape { persona: 0, cluster: 0, vocab_size: vocab, embed_dim: 4, widths: vec![2, 3], channels: 3 }
    }

    #[test]
    fn zero_projection_gives_half() {
        let mut m = TextCnnClassifier::new(shape(10), 1);
        for name in ["out/w", "out/b"] {
            m.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        assert_eq!(m.classify_hard(&[4, 5, 6]).unwrap(), 0.5);
        assert_eq!(m.classify_hard(&[]).unwrap(), 0.5);
    }

    #[test]
    fn hard_errors_and_range() {
        let m = TextCnnClassifier::new(shape(10), 1);
        assert!(matches!(m.classify_hard(&[10]), Err(Error::Index { .. })));
        for ids in [vec![1], vec![2, 3, 9, 9, 0], vec![]] {
            let p = m.classify_hard(&ids).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
    }

    fn onehot(i: usize, v: usize) -> Vec<f64> {
        let mut x = vec![0.0; v];
        x[i] = 1.0;
        x
    }

    #[test]
    fn soft_onehot_matches_hard() {
        let m = TextCnnClassifier::new(shape(12), 3);
        let ids = [3, 7, 7, 11, 0];
        let dists: Vec<Vec<f64>> = ids.iter().map(|&i| onehot(i, 12)).collect();
        let hard = m.classify_hard(&ids).unwrap();
        let soft = m.classify_soft(&dists).unwrap();
        assert!((hard - soft).abs() < 1e-9);
    }

    #[test]
    fn soft_uniform_is_mean_embedding() {
        let m = TextCnnClassifier::new(shape(6), 3);
        let uni = vec![vec![1.0 / 6.0; 6]; 4];
        let soft = m.classify_soft(&uni).unwrap();
        // Feed the mean embedding row directly through the same network.
        let emb = m.params.get("emb").unwrap();
        let mean: Vec<f64> = (0..4).map(|d| (0..6).map(|r| emb.row(r)[d]).sum::<f64>() / 6.0).collect();
        let mut tape = Tape::new();
        let b = tape.bind(&m.params, false);
        let seq: Vec<NodeId> = (0..4).map(|_| tape.constant(Tensor::vector(mean.clone()))).collect();
        let filters: Vec<ConvFilter> = m
            .shape
            .widths
            .iter()
            .map(|&w| ConvFilter { width: w, w: b.get(&format!("conv{w}/w")).unwrap(), b: b.get(&format!("conv{w}/b")).unwrap() })
            .collect();
        let f = conv1d_maxpool(&mut tape, &seq, &filters).unwrap();
        let z = linear(&mut tape, b.get("out/w").unwrap(), b.get("out/b").unwrap(), f).unwrap();
        assert!((sigmoid(tape.scalar(z)) - soft).abs() < 1e-12);
    }

    #[test]
    fn soft_rejects_unnormalized() {
        let m = TextCnnClassifier::new(shape(4), 3);
        assert!(matches!(m.classify_soft(&[vec![0.5, 0.2, 0.2, 0.0]]), Err(Error::Contract(_))));
        assert!(matches!(m.classify_soft(&[vec![1.0, 0.0]]), Err(Error::Contract(_))));
    }

    #[test]
    fn soft_input_gradient_matches_finite_differences() {
        let m = TextCnnClassifier::new(shape(5), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        for t in 0..4 {
            let raw: Vec<f64> = (0..5).map(|_| rng.random::<f64>() + 0.1).collect();
            let s: f64 = raw.iter().sum();
            store.insert(format!("d{t}"), Tensor::vector(raw.iter().map(|x| x / s).collect()));
        }
        let build = |tape: &mut Tape, s: &ParamStore| -> Result<NodeId> {
            let inputs = tape.bind(s, true);
            let b = tape.bind(&m.params, false);
            let nodes: Vec<NodeId> = (0..4).map(|t| inputs.get(&format!("d{t}")).unwrap()).collect();
            let z = m.logit(tape, &b, Positions::Soft(&nodes), None)?;
            tape.sigmoid_bce(z, 1.0)
        };
        let mut tape = Tape::new();
        let root = build(&mut tape, &store).unwrap();
        let analytic: BTreeMap<String, Tensor> = tape.backward(root).unwrap().into_params();
        let err = finite_difference_check(
            |s| {
                let mut t = Tape::new();
                let r = build(&mut t, s)?;
                Ok(t.scalar(r))
            },
            &store,
            &analytic,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn metrics_cases() {
        let gold = [true, true, false, false];
        let m = metrics_from_predictions(&gold, &gold);
        assert_eq!((m.accuracy, m.f1), (1.0, 1.0));
        let m = metrics_from_predictions(&[true; 4], &gold);
        assert_eq!(m.accuracy, 0.5);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn metrics_match_confusion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pred: Vec<bool> = (0..100).map(|_| rng.random()).collect();
        let gold: Vec<bool> = (0..100).map(|_| rng.random()).collect();
        let mut cm = [[0u32; 2]; 2];
        for i in 0..100 {
            cm[pred[i] as usize][gold[i] as usize] += 1;
        }
        let (tp, fp, fn_, tn) = (cm[1][1] as f64, cm[1][0] as f64, cm[0][1] as f64, cm[0][0] as f64);
        let p = tp / (tp + fp);
        let r = tp / (tp + fn_);
        let m = metrics_from_predictions(&pred, &gold);
        assert_eq!(m.accuracy, (tp + tn) / 100.0);
        assert!((m.f1 - 2.0 * p * r / (p + r)).abs() < 1e-15);
    }

    #[test]
    fn empty_training_set_is_data_error() {
        let r = train_classifier(shape(5), &[], &[], &ClassifierConfig::default());
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = TextCnnClassifier::new(shape(7), 1);
        let mut b = TextCnnClassifier::new(ClassifierShape { persona: 1, ..shape(7) }, 2);
        b.params.get_mut("out/b").unwrap().data_mut()[0] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.ckpt");
        save_classifiers(&path, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(load_classifiers(&path).unwrap(), vec![a, b]);
    }
}
