mod common;

use std::sync::OnceLock;

use pstory::classifier::{evaluate_classifier, train_classifier, ClassifierConfig, ClassifierShape};
use pstory::eval::{accuracy_from_dump, corpus_report, RougeGranularity, DEFAULT_BETA};
use pstory::model::{train_generator, DecodeConfig, GeneratorModel, ModelConfig, TrainConfig, VariantKind};
use pstory::pipeline::{classifier_splits, PersonaConfig};
use pstory::synth::{synthesize_corpus, SynthConfig};
use pstory::text::{load_stories, write_stories, PersonaUtterance, Vocabulary};

use common::World;

fn shared() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(common::world)
}

#[test]
fn both_personalities_of_a_persona_land_in_its_cluster() {
    let w = shared();
    let cfg = SynthConfig::default();
    for p in 0..cfg.n_personas {
        for k in 0..cfg.personalities_per_persona {
            assert_eq!(w.selection.persona_of(p * cfg.personalities_per_persona + k), Some(p));
        }
    }
    let first_distractor = cfg.n_personas * cfg.personalities_per_persona;
    for d in 0..cfg.distractor_personalities {
        assert_eq!(w.selection.persona_of(first_distractor + d), None, "distractor {d} selected");
    }
}

#[test]
fn pure_marker_sentences_score_above_point_nine() {
    let w = shared();
    for (j, clf) in w.classifiers.iter().enumerate() {
        let ids = w.vocab.ids(&w.corpus.lexicons[j]);
        let p = clf.classify_hard(&ids).unwrap();
        assert!(p > 0.9, "persona {j}: {p}");
    }
}

#[test]
fn five_hundred_marker_records_reach_dev_accuracy() {
    // 2 personalities x 160 utterances, balanced to 640 and split 80/10/10.
    let synth = SynthConfig { utterances_per_personality: 160, ..SynthConfig::default() };
    let corpus = synthesize_corpus(&synth).unwrap();
    let utterances: Vec<PersonaUtterance> = corpus
        .utterances
        .iter()
        .map(|u| PersonaUtterance { cluster: u.cluster / 2, ..u.clone() })
        .collect();
    let vocab = Vocabulary::build(utterances.iter().map(|u| u.tokens.as_slice()), 1).unwrap();
    let [train, dev, _] = classifier_splits(0, &utterances, &vocab, &PersonaConfig::default()).unwrap();
    assert!(train.len() >= 500, "{}", train.len());
    let cfg = ClassifierConfig::default();
    let shape = ClassifierShape {
        persona: 0,
        cluster: 0,
        vocab_size: vocab.len(),
        embed_dim: cfg.embed_dim,
        widths: cfg.widths.clone(),
        channels: cfg.channels,
    };
    let (model, _) = train_classifier(shape, &train, &dev, &cfg).unwrap();
    let acc = evaluate_classifier(&model, &dev).unwrap().accuracy;
    assert!(acc >= 0.95, "{acc}");
}

/// Plain logistic regression on standardized features.
fn fit_probe(x: &[Vec<f64>], y: &[bool]) -> impl Fn(&[f64]) -> bool {
    let d = x[0].len();
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-9))
        .collect();
    let norm = move |r: &[f64]| -> Vec<f64> { r.iter().enumerate().map(|(j, v)| (v - mean[j]) / sd[j]).collect() };
    let xs: Vec<Vec<f64>> = x.iter().map(|r| norm(r)).collect();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..1500 {
        let (mut gw, mut gb) = (vec![0.0; d], 0.0);
        for (r, &t) in xs.iter().zip(y) {
            let z: f64 = b + r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - f64::from(u8::from(t));
            gb += err;
            for j in 0..d {
                gw[j] += err * r[j];
            }
        }
        b -= 0.5 * gb / n;
        for j in 0..d {
            w[j] -= 0.5 * gw[j] / n;
        }
    }
    move |r: &[f64]| {
        let r = norm(r);
        b + r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() > 0.0
    }
}

#[test]
fn image_features_predict_content_words() {
    let corpus = synthesize_corpus(&SynthConfig::default()).unwrap();
    let pairs: Vec<(&Vec<f64>, &Vec<String>)> = corpus
        .stories
        .iter()
        .flat_map(|s| s.image_features.iter().zip(&s.sentences))
        .collect();
    let cut = pairs.len() * 4 / 5;
    for word in ["w0", "w7", "w19"] {
        let x: Vec<Vec<f64>> = pairs[..cut].iter().map(|(f, _)| f.to_vec()).collect();
        let y: Vec<bool> = pairs[..cut].iter().map(|(_, t)| t.iter().any(|s| s == word)).collect();
        let probe = fit_probe(&x, &y);
        let held = &pairs[cut..];
        let correct = held
            .iter()
            .filter(|(f, t)| probe(f) == t.iter().any(|s| s == word))
            .count();
        let acc = correct as f64 / held.len() as f64;
        assert!(acc >= 0.95, "{word}: {acc}");
    }
}

#[test]
fn report_accuracy_recomputes_from_its_dump() {
    let w = shared();
    let model = GeneratorModel::new(
        VariantKind::Lepc,
        &ModelConfig::default(),
        w.train[0].features[0].len(),
        w.vocab.len(),
        &w.personas,
        &w.style,
        3,
    )
    .unwrap();
    let cfg = TrainConfig { epochs: 3, lr: 5e-3, ..TrainConfig::default() };
    let (model, _) = train_generator(model, &w.train, &w.classifiers, &cfg).unwrap();
    let (report, dump) = corpus_report(
        &model,
        &w.test,
        &w.classifiers,
        &w.vocab,
        &DecodeConfig::default(),
        RougeGranularity::Story,
        DEFAULT_BETA,
        serde_json::Value::Null,
    )
    .unwrap();
    assert_eq!(dump.len(), 5 * w.test.len());
    assert_eq!(accuracy_from_dump(&dump, w.classifiers.len()), report.persona_accuracy);
    for rec in &dump {
        let p = w.classifiers[rec.persona].classify_hard(&w.vocab.ids(&rec.tokens)).unwrap();
        assert_eq!(p.to_bits(), rec.probability.to_bits());
    }
}

#[test]
fn story_files_round_trip() {
    let w = shared();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stories.jsonl");
    write_stories(&path, &w.corpus.stories).unwrap();
    assert_eq!(load_stories(&path).unwrap(), w.corpus.stories);
}
