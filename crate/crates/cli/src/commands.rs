use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pstory::checkpoint::write_atomic;
use pstory::classifier::{load_classifiers, save_classifiers, ClassifierMetrics, TextCnnClassifier};
use pstory::eval::corpus_report;
use pstory::model::{encode_stories, train_generator, EncodedStory, GeneratorModel, ModelShape, VariantKind};
use pstory::persona::{story_style_representation, HashingEncoder, PersonaRepr, StoryStyleRepr};
use pstory::pipeline::{cluster_personas, persona_representations, train_persona_classifiers, PersonaSelection};
use pstory::synth::synthesize_corpus;
use pstory::text::{
    assign_personas, load_stories, load_utterances, split_indices, write_jsonl, write_stories, write_utterances,
    StoryExample, Vocabulary, EOS,
};
use pstory::{Error, Result};

use crate::config::PipelineConfig;

/// Output of `cluster-personas`, consumed by every later stage.
#[derive(Debug, Serialize, Deserialize)]
struct PersonaArtifacts {
    selection: PersonaSelection,
    personas: Vec<PersonaRepr>,
    style: StoryStyleRepr,
}

#[derive(Serialize)]
struct GeneratedStory<'a> {
    id: &'a str,
    persona: usize,
    sentences: Vec<String>,
}

#[derive(Serialize)]
struct ClassifierRecord {
    persona: usize,
    cluster: usize,
    #[serde(flatten)]
    metrics: ClassifierMetrics,
}

fn out(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.paths.out.join(name)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `<out>/<stem>.resolved.toml`.
pub fn echo_config(cfg: &PipelineConfig, stem: &str) -> Result<()> {
    std::fs::create_dir_all(&cfg.paths.out)?;
    write_atomic(&out(cfg, &format!("{stem}.resolved.toml")), cfg.to_toml()?.as_bytes())
}

fn stories(cfg: &PipelineConfig) -> Result<Vec<StoryExample>> {
    let mut stories = load_stories(&cfg.stories_path())?;
    if stories.is_empty() {
        return Err(Error::Data(format!("{} holds no stories", cfg.stories_path().display())));
    }
    if stories.iter().any(|s| s.persona.is_none()) {
        assign_personas(&mut stories, cfg.persona.n_personas, cfg.data.assign_seed)?;
    }
    Ok(stories)
}

struct Splits {
    train: Vec<EncodedStory>,
    test: Vec<EncodedStory>,
}

fn splits(cfg: &PipelineConfig, stories: &[StoryExample], vocab: &Vocabulary) -> Result<Splits> {
    let d = &cfg.data;
    let (tr, _, te) = split_indices(stories.len(), d.train_fraction, d.dev_fraction, d.split_seed);
    let pick = |idx: &[usize]| {
        let chosen: Vec<_> = idx.iter().map(|&i| stories[i].clone()).collect();
        encode_stories(&chosen, vocab, cfg.model.max_sentence_len)
    };
    Ok(Splits { train: pick(&tr)?, test: pick(&te)? })
}

fn encoder(cfg: &PipelineConfig) -> HashingEncoder {
    HashingEncoder::new(cfg.persona.encoder_dim, cfg.persona.encoder_seed)
}

fn generator_path(cfg: &PipelineConfig, variant: VariantKind) -> PathBuf {
    out(cfg, &format!("generator-{variant}.ckpt"))
}

fn load_generator(cfg: &PipelineConfig) -> Result<GeneratorModel> {
    let variant = cfg.run.variant;
    GeneratorModel::load(&generator_path(cfg, variant), Some(variant))
}

pub fn synth_data(cfg: &PipelineConfig) -> Result<()> {
    let corpus = synthesize_corpus(&cfg.synth)?;
    std::fs::create_dir_all(&cfg.paths.out)?;
    write_stories(&cfg.stories_path(), &corpus.stories)?;
    write_utterances(&cfg.utterances_path(), &corpus.utterances)?;
    eprintln!("wrote {} stories and {} utterances", corpus.stories.len(), corpus.utterances.len());
    Ok(())
}

pub fn cluster(cfg: &PipelineConfig) -> Result<()> {
    let stories = stories(cfg)?;
    let utterances = load_utterances(&cfg.utterances_path())?;
    let vocab = Vocabulary::build(
        stories
            .iter()
            .flat_map(|s| s.sentences.iter().map(Vec::as_slice))
            .chain(utterances.iter().map(|u| u.tokens.as_slice())),
        cfg.data.min_count,
    )?;
    let encoder = encoder(cfg);
    let selection = cluster_personas(&utterances, &encoder, &vocab, &cfg.persona, &cfg.classifier)?;
    let relabeled = selection.relabel(&utterances)?;
    let personas = persona_representations(&relabeled, cfg.persona.n_personas, &encoder)?;
    let style = story_style_representation(&stories, &encoder)?;
    vocab.save(&out(cfg, "vocab.json"))?;
    write_json(&out(cfg, "personas.json"), &PersonaArtifacts { selection, personas, style })?;
    eprintln!("vocabulary of {} tokens; {} personas selected", vocab.len(), cfg.persona.n_personas);
    Ok(())
}

pub fn train_classifiers(cfg: &PipelineConfig) -> Result<()> {
    let vocab = Vocabulary::load(&out(cfg, "vocab.json"))?;
    let artifacts: PersonaArtifacts = read_json(&out(cfg, "personas.json"))?;
    let utterances = load_utterances(&cfg.utterances_path())?;
    let relabeled = artifacts.selection.relabel(&utterances)?;
    let trained = train_persona_classifiers(&relabeled, &vocab, &cfg.persona, &cfg.classifier)?;
    let records: Vec<ClassifierRecord> = trained
        .iter()
        .map(|(c, m)| ClassifierRecord { persona: c.shape.persona, cluster: c.shape.cluster, metrics: m.clone() })
        .collect();
    let classifiers: Vec<TextCnnClassifier> = trained.into_iter().map(|(c, _)| c).collect();
    save_classifiers(&out(cfg, "classifiers.ckpt"), &classifiers)?;
    write_json(&out(cfg, "classifiers.json"), &records)?;
    for r in &records {
        eprintln!("persona {} test accuracy {:.4}", r.persona, r.metrics.accuracy);
    }
    Ok(())
}

pub fn train(cfg: &PipelineConfig) -> Result<()> {
    let variant = cfg.run.variant;
    // Surface shape errors before touching any artifact.
    ModelShape {
        variant,
        image_dim: cfg.synth.image_dim.max(1),
        vocab_size: EOS + 2,
        persona_dim: cfg.persona.encoder_dim,
        n_personas: cfg.persona.n_personas,
        config: cfg.model.clone(),
    }
    .validate()?;

    let vocab = Vocabulary::load(&out(cfg, "vocab.json"))?;
    let artifacts: PersonaArtifacts = read_json(&out(cfg, "personas.json"))?;
    let classifiers = load_classifiers(&out(cfg, "classifiers.ckpt"))?;
    let stories = stories(cfg)?;
    let data = splits(cfg, &stories, &vocab)?;
    let model = GeneratorModel::new(
        variant,
        &cfg.model,
        stories[0].feature_dim(),
        vocab.len(),
        &artifacts.personas,
        &artifacts.style,
        cfg.train.seed,
    )?;
    let (model, report) = train_generator(model, &data.train, &classifiers, &cfg.train)?;
    model.save(&generator_path(cfg, variant))?;
    write_json(&out(cfg, &format!("train-{variant}.json")), &report)?;
    if let Some(last) = report.epoch_losses.last() {
        eprintln!("{variant}: {} epochs, final loss {last:.6}", report.epochs_run);
    }
    Ok(())
}

pub fn generate(cfg: &PipelineConfig) -> Result<()> {
    let vocab = Vocabulary::load(&out(cfg, "vocab.json"))?;
    let model = load_generator(cfg)?;
    let stories = stories(cfg)?;
    let data = splits(cfg, &stories, &vocab)?;
    let mut records = Vec::with_capacity(data.test.len());
    for story in &data.test {
        let persona = match (cfg.run.persona, story.persona) {
            (Some(p), _) | (None, Some(p)) => p,
            (None, None) => return Err(Error::Data(format!("story {} has no persona", story.id))),
        };
        let sentences = model
            .generate_story(&story.features, persona, &cfg.decode)?
            .iter()
            .map(|s| vocab.decode(s).map(|t| t.join(" ")))
            .collect::<Result<Vec<_>>>()?;
        records.push(GeneratedStory { id: &story.id, persona, sentences });
    }
    write_jsonl(&out(cfg, &format!("generated-{}.jsonl", cfg.run.variant)), &records)?;
    eprintln!("generated {} stories", records.len());
    Ok(())
}

pub fn evaluate(cfg: &PipelineConfig) -> Result<()> {
    let variant = cfg.run.variant;
    let vocab = Vocabulary::load(&out(cfg, "vocab.json"))?;
    let classifiers = load_classifiers(&out(cfg, "classifiers.ckpt"))?;
    let model = load_generator(cfg)?;
    let stories = stories(cfg)?;
    let data = splits(cfg, &stories, &vocab)?;
    let (report, dump) = corpus_report(
        &model,
        &data.test,
        &classifiers,
        &vocab,
        &cfg.decode,
        cfg.eval.granularity,
        cfg.eval.beta,
        serde_json::to_value(cfg)?,
    )?;
    write_atomic(&out(cfg, &format!("report-{variant}.json")), report.to_json()?.as_bytes())?;
    write_atomic(&out(cfg, &format!("report-{variant}.txt")), report.table().as_bytes())?;
    write_jsonl(&out(cfg, &format!("dump-{variant}.jsonl")), &dump)?;
    print!("{}", report.table());
    Ok(())
}
