#![allow(dead_code)]

use pstory::classifier::{ClassifierConfig, ClassifierMetrics, TextCnnClassifier};
use pstory::model::{encode_stories, EncodedStory};
use pstory::persona::{story_style_representation, HashingEncoder, PersonaRepr, StoryStyleRepr};
use pstory::pipeline::{
    cluster_personas, persona_representations, train_persona_classifiers, PersonaConfig, PersonaSelection,
};
use pstory::synth::{synthesize_corpus, SynthConfig, SynthCorpus};
use pstory::text::{split_indices, Vocabulary};

/// The synthetic corpus pushed through persona discovery and classifier
/// training with default settings.
pub struct World {
    pub corpus: SynthCorpus,
    pub vocab: Vocabulary,
    pub selection: PersonaSelection,
    pub classifiers: Vec<TextCnnClassifier>,
    pub metrics: Vec<ClassifierMetrics>,
    pub personas: Vec<PersonaRepr>,
    pub style: StoryStyleRepr,
    pub train: Vec<EncodedStory>,
    pub test: Vec<EncodedStory>,
}

pub fn world() -> World {
    let corpus = synthesize_corpus(&SynthConfig::default()).unwrap();
    let vocab = Vocabulary::build(
        corpus
            .stories
            .iter()
            .flat_map(|s| s.sentences.iter().map(Vec::as_slice))
            .chain(corpus.utterances.iter().map(|u| u.tokens.as_slice())),
        1,
    )
    .unwrap();
    let pcfg = PersonaConfig::default();
    let ccfg = ClassifierConfig::default();
    let encoder = HashingEncoder::new(pcfg.encoder_dim, pcfg.encoder_seed);
    let selection = cluster_personas(&corpus.utterances, &encoder, &vocab, &pcfg, &ccfg).unwrap();
    let relabeled = selection.relabel(&corpus.utterances).unwrap();
    let (classifiers, metrics) = train_persona_classifiers(&relabeled, &vocab, &pcfg, &ccfg)
        .unwrap()
        .into_iter()
        .unzip();
    let personas = persona_representations(&relabeled, pcfg.n_personas, &encoder).unwrap();
    let style = story_style_representation(&corpus.stories, &encoder).unwrap();
    let (tr, _, te) = split_indices(corpus.stories.len(), 0.8, 0.1, 5);
    let pick = |idx: &[usize]| {
        let stories: Vec<_> = idx.iter().map(|&i| corpus.stories[i].clone()).collect();
        encode_stories(&stories, &vocab, 16).unwrap()
    };
    let (train, test) = (pick(&tr), pick(&te));
    World { corpus, vocab, selection, classifiers, metrics, personas, style, train, test }
}

/// Eight training stories covering every persona.
pub fn overfit_set(w: &World) -> Vec<EncodedStory> {
    let per = w.corpus.stories.len() / 5;
    let stories: Vec<_> = (0..8).map(|i| w.corpus.stories[(i % 5) * per + i].clone()).collect();
    encode_stories(&stories, &w.vocab, 16).unwrap()
}
