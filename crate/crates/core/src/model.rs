//! The glocal story generator and its persona-conditioned variants.
//!
//! Five image features are projected, passed through a Bi-LSTM, and each
//! projected feature is concatenated with the Bi-LSTM output at its position
//! to form the glocal vector `z_k`. Sentence `k` is decoded by an LSTM that
//! receives a variant-dependent context vector at every step:
//!
//! | variant | context            | token input     |
//! |---------|--------------------|-----------------|
//! | Glocal  | `z`                | `E[x]`          |
//! | Mpp     | `[z; p]`           | `E[x]`          |
//! | Lepc    | `[z; P; p]`        | `E[x]`          |
//! | Lepd    | `[z; p]`           | `[E[x]; P]`     |
//! | Sepc    | `[z + W(P-S); p]`  | `E[x]`          |
//! | Sepd    | `[z; p]`           | `E[x] + (P-S)`  |
//!
//! `p` is the one-hot persona, `P` the persona representation and `S` the
//! story-style representation. `W` is a learned map into `dim z`, or the
//! identity when the dimensions already agree. The difference `P - S` is
//! formed before it touches the model, so `P == S` contributes an exact zero.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::classifier::{Positions, TextCnnClassifier};
use crate::error::{Error, Result};
use crate::layers::{bilstm_encode, dropout, linear, lstm_cell_step, LstmParams};
use crate::optim::AdamState;
use crate::params::{derive_seed, ParamStore};
use crate::persona::{PersonaRepr, StoryStyleRepr};
use crate::tape::{softmax, Binding, NodeId, Tape};
use crate::tensor::Tensor;
use crate::text::{StoryExample, Vocabulary, BOS, EOS, PAD, STORY_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Glocal,
    Mpp,
    Lepc,
    Lepd,
    Sepc,
    Sepd,
}

impl VariantKind {
    pub const ALL: [VariantKind; 6] = [
        VariantKind::Glocal,
        VariantKind::Mpp,
        VariantKind::Lepc,
        VariantKind::Lepd,
        VariantKind::Sepc,
        VariantKind::Sepd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Glocal => "glocal",
            VariantKind::Mpp => "mpp",
            VariantKind::Lepc => "lepc",
            VariantKind::Lepd => "lepd",
            VariantKind::Sepc => "sepc",
            VariantKind::Sepd => "sepd",
        }
    }

    /// Whether the persona reaches the model and the classifier loss applies.
    pub fn is_persona_conditioned(self) -> bool {
        self != VariantKind::Glocal
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_proj_dim: usize,
    /// Hidden size of each Bi-LSTM direction.
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub embed_dim: usize,
    /// Learn a map from the persona space into `dim z` for Sepc when the
    /// dimensions differ. Without it a mismatch is a config error.
    pub sepc_projection: bool,
    /// Longest training sentence in tokens, BOS and EOS included.
    pub max_sentence_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_proj_dim: 32,
            encoder_hidden: 32,
            decoder_hidden: 64,
            embed_dim: 32,
            sepc_projection: true,
            max_sentence_len: 16,
        }
    }
}

impl ModelConfig {
    /// 1024-dim projection plus 512 per Bi-LSTM direction gives the 2048-dim
    /// glocal vector; word embeddings are 256 wide.
    pub fn full_scale() -> Self {
        Self {
            image_proj_dim: 1024,
            encoder_hidden: 512,
            decoder_hidden: 1024,
            embed_dim: 256,
            sepc_projection: true,
            max_sentence_len: 30,
        }
    }

    pub fn glocal_dim(&self) -> usize {
        self.image_proj_dim + 2 * self.encoder_hidden
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the generation loss; the classifier losses share `1 - alpha`.
    pub alpha: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Stop once the evaluation-mode training loss falls below this value.
    pub stop_below: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lr: 1e-3,
            weight_decay: 1e-5,
            epochs: 30,
            batch_size: 8,
            dropout: 0.5,
            seed: 1,
            stop_below: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} must be in [0, 1]", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    /// Decoding steps per sentence, the EOS step included.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { mode: DecodeMode::Greedy, temperature: 1.0, max_len: 16, seed: 0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 2 {
            return Err(Error::Config(format!("max_len {} must be at least 2", self.max_len)));
        }
        if self.mode == DecodeMode::Sample && !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive when sampling".into()));
        }
        Ok(())
    }
}

/// Everything needed to rebuild the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub variant: VariantKind,
    pub image_dim: usize,
    pub vocab_size: usize,
    pub persona_dim: usize,
    pub n_personas: usize,
    pub config: ModelConfig,
}

impl ModelShape {
    pub fn glocal_dim(&self) -> usize {
        self.config.glocal_dim()
    }

    fn sepc_needs_projection(&self) -> bool {
        self.variant == VariantKind::Sepc && self.persona_dim != self.glocal_dim()
    }

    pub fn context_dim(&self) -> usize {
        let z = self.glocal_dim();
        match self.variant {
            VariantKind::Glocal => z,
            VariantKind::Lepc => z + self.persona_dim + self.n_personas,
            _ => z + self.n_personas,
        }
    }

    pub fn token_input_dim(&self) -> usize {
        match self.variant {
            VariantKind::Lepd => self.config.embed_dim + self.persona_dim,
            _ => self.config.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        if [c.image_proj_dim, c.encoder_hidden, c.decoder_hidden, c.embed_dim, self.image_dim, self.persona_dim]
            .contains(&0)
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.vocab_size <= EOS + 1 {
            return Err(Error::Config(format!("vocabulary of {} has no content tokens", self.vocab_size)));
        }
        if self.n_personas == 0 {
            return Err(Error::Config("at least one persona is required".into()));
        }
        if c.max_sentence_len < 2 {
            return Err(Error::Config("max_sentence_len must be at least 2".into()));
        }
        if self.variant == VariantKind::Sepd && c.embed_dim != self.persona_dim {
            return Err(Error::Config(format!(
                "sepd requires embed_dim == persona dimension d_e, got embed_dim {} and d_e {}",
                c.embed_dim, self.persona_dim
            )));
        }
        if self.sepc_needs_projection() && !c.sepc_projection {
            return Err(Error::Config(format!(
                "sepc: persona dimension {} differs from glocal dimension {} and sepc_projection is off",
                self.persona_dim,
                self.glocal_dim()
            )));
        }
        Ok(())
    }
}

/// A story ready for the generator: gold sentences are `BOS … EOS` id
/// sequences without padding.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedStory {
    pub id: String,
    pub features: Vec<Vec<f64>>,
    pub sentences: Vec<Vec<usize>>,
    pub persona: Option<usize>,
}

pub fn encode_story(story: &StoryExample, vocab: &Vocabulary, max_len: usize) -> Result<EncodedStory> {
    story.validate()?;
    let sentences = story
        .sentences
        .iter()
        .map(|s| {
            let mut ids = vocab.encode_sentence(s, max_len)?;
            while ids.last() == Some(&PAD) {
                ids.pop();
            }
            Ok(ids)
        })
        .collect::<Result<_>>()?;
    Ok(EncodedStory {
        id: story.id.clone(),
        features: story.image_features.clone(),
        sentences,
        persona: story.persona,
    })
}

pub fn encode_stories(stories: &[StoryExample], vocab: &Vocabulary, max_len: usize) -> Result<Vec<EncodedStory>> {
    stories.iter().map(|s| encode_story(s, vocab, max_len)).collect()
}

/// `alpha * l_g + (1 - alpha) / n * sum(l_c)` for `n` classifier losses.
pub fn multitask_loss(l_g: f64, l_c: &[f64], alpha: f64) -> f64 {
    if l_c.is_empty() {
        return alpha * l_g;
    }
    alpha * l_g + (1.0 - alpha) / l_c.len() as f64 * l_c.iter().sum::<f64>()
}

fn multitask_node(tape: &mut Tape, l_g: NodeId, l_c: &[NodeId], alpha: f64) -> Result<NodeId> {
    let g = tape.scale(l_g, alpha);
    if l_c.is_empty() {
        return Ok(g);
    }
    let c = tape.add_n(l_c)?;
    let c = tape.scale(c, (1.0 - alpha) / l_c.len() as f64);
    tape.add(g, c)
}

/// Loss components averaged over a set of stories.
#[derive(Clone, Debug, PartialEq)]
pub struct LossParts {
    pub generation: f64,
    /// One entry per classifier; empty for Glocal.
    pub classifier: Vec<f64>,
    /// The objective the variant optimizes.
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training objective over each epoch, as seen during updates.
    pub epoch_losses: Vec<f64>,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    pub shape: ModelShape,
    pub params: ParamStore,
    pub personas: Vec<Vec<f64>>,
    pub style: Vec<f64>,
    /// Free-form header fields persisted with the checkpoint.
    pub meta: BTreeMap<String, String>,
}

struct Dropout<'r> {
    rng: Option<&'r mut ChaCha8Rng>,
    p: f64,
}

impl Dropout<'_> {
    fn off() -> Self {
        Dropout { rng: None, p: 0.0 }
    }

    fn apply(&mut self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => dropout(tape, x, self.p, rng, true),
            _ => Ok(x),
        }
    }
}

/// Per-tape constants: persona vectors, the persona-minus-style deltas and
/// one-hot codes.
struct PersonaNodes {
    persona: Vec<NodeId>,
    delta: Vec<NodeId>,
    onehot: Vec<NodeId>,
}

struct StoryNodes {
    generation: NodeId,
    classifier: Vec<NodeId>,
    total: NodeId,
}

struct Frozen<'a> {
    classifiers: &'a [TextCnnClassifier],
    bindings: Vec<Binding>,
}

impl GeneratorModel {
    pub fn new(
        variant: VariantKind,
        config: &ModelConfig,
        image_dim: usize,
        vocab_size: usize,
        personas: &[PersonaRepr],
        style: &StoryStyleRepr,
        seed: u64,
    ) -> Result<Self> {
        let persona_dim = style.vector.len();
        for p in personas {
            if p.vector.len() != persona_dim {
                return Err(Error::Config(format!(
                    "persona {} has dimension {}, story style has {persona_dim}",
                    p.id,
                    p.vector.len()
                )));
            }
        }
        let shape = ModelShape {
            variant,
            image_dim,
            vocab_size,
            persona_dim,
            n_personas: personas.len(),
            config: config.clone(),
        };
        shape.validate()?;
        let params = init_params(&shape, seed);
        Ok(Self {
            shape,
            params,
            personas: personas.iter().map(|p| p.vector.clone()).collect(),
            style: style.vector.clone(),
            meta: BTreeMap::new(),
        })
    }

    pub fn variant(&self) -> VariantKind {
        self.shape.variant
    }

    fn check_persona(&self, persona: usize) -> Result<()> {
        if persona >= self.shape.n_personas {
            return Err(Error::Contract(format!(
                "persona {persona} out of range for {} personas",
                self.shape.n_personas
            )));
        }
        Ok(())
    }

    fn persona_nodes(&self, tape: &mut Tape) -> Result<PersonaNodes> {
        let s = tape.constant(Tensor::vector(self.style.clone()));
        let n = self.shape.n_personas;
        let mut out = PersonaNodes { persona: vec![], delta: vec![], onehot: vec![] };
        for (j, p) in self.personas.iter().enumerate() {
            let pn = tape.constant(Tensor::vector(p.clone()));
            out.delta.push(tape.sub(pn, s)?);
            out.persona.push(pn);
            let mut code = vec![0.0; n];
            code[j] = 1.0;
            out.onehot.push(tape.constant(Tensor::vector(code)));
        }
        Ok(out)
    }

    fn encode_on(&self, tape: &mut Tape, b: &Binding, features: &[Vec<f64>], drop: &mut Dropout) -> Result<Vec<NodeId>> {
        if features.len() != STORY_LEN {
            return Err(Error::Contract(format!("expected {STORY_LEN} image features, got {}", features.len())));
        }
        let (w, bias) = (b.get("img/w")?, b.get("img/b")?);
        let mut projected = Vec::with_capacity(STORY_LEN);
        for f in features {
            let x = tape.constant(Tensor::vector(f.clone()));
            let y = linear(tape, w, bias, x)?;
            projected.push(drop.apply(tape, y)?);
        }
        let fwd = LstmParams::bind(b, "enc_f/", self.shape.config.encoder_hidden)?;
        let bwd = LstmParams::bind(b, "enc_b/", self.shape.config.encoder_hidden)?;
        let global = bilstm_encode(tape, &fwd, &bwd, &projected)?;
        projected
            .into_iter()
            .zip(global)
            .map(|(local, g)| {
                let g = drop.apply(tape, g)?;
                tape.concat(&[local, g])
            })
            .collect()
    }

    fn context_on(&self, tape: &mut Tape, b: &Binding, pn: &PersonaNodes, z: NodeId, persona: Option<usize>) -> Result<NodeId> {
        let variant = self.shape.variant;
        if variant == VariantKind::Glocal {
            return Ok(z);
        }
        let j = persona.ok_or_else(|| Error::Contract(format!("{variant} needs a target persona")))?;
        let onehot = pn.onehot[j];
        match variant {
            VariantKind::Glocal => unreachable!(),
            VariantKind::Lepc => tape.concat(&[z, pn.persona[j], onehot]),
            VariantKind::Sepc => {
                let shift = if self.shape.sepc_needs_projection() {
                    tape.matvec(b.get("strip/w")?, pn.delta[j])?
                } else {
                    pn.delta[j]
                };
                let m = tape.add(z, shift)?;
                tape.concat(&[m, onehot])
            }
            VariantKind::Mpp | VariantKind::Lepd | VariantKind::Sepd => tape.concat(&[z, onehot]),
        }
    }

    fn token_input_on(&self, tape: &mut Tape, emb: NodeId, pn: &PersonaNodes, id: usize, persona: Option<usize>) -> Result<NodeId> {
        let e = tape.row(emb, id)?;
        match (self.shape.variant, persona) {
            (VariantKind::Lepd, Some(j)) => tape.concat(&[e, pn.persona[j]]),
            (VariantKind::Sepd, Some(j)) => tape.add(e, pn.delta[j]),
            _ => Ok(e),
        }
    }

    fn check_gold(&self, gold: &[usize]) -> Result<()> {
        let n = gold.len();
        if n < 2 || gold[0] != BOS || gold[n - 1] != EOS {
            return Err(Error::Contract("gold sentence must start with BOS and end with EOS".into()));
        }
        if let Some(&bad) = gold[1..n - 1].iter().find(|&&t| t == BOS || t == EOS || t == PAD) {
            return Err(Error::Contract(format!("reserved token {bad} inside gold sentence")));
        }
        if let Some(&bad) = gold.iter().find(|&&t| t >= self.shape.vocab_size) {
            return Err(Error::Index { index: bad, len: self.shape.vocab_size });
        }
        Ok(())
    }

    /// Teacher-forced decoding of one sentence. Returns per-step cross-entropy
    /// nodes and the output distributions of the steps whose target is a
    /// content token.
    #[allow(clippy::too_many_arguments)]
    fn decode_train_on(
        &self,
        tape: &mut Tape,
        b: &Binding,
        pn: &PersonaNodes,
        context: NodeId,
        gold: &[usize],
        persona: Option<usize>,
        keep_dists: bool,
    ) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        self.check_gold(gold)?;
        let hidden = self.shape.config.decoder_hidden;
        let dec = LstmParams::bind(b, "dec/", hidden)?;
        let (emb, out_w, out_b) = (b.get("emb")?, b.get("out/w")?, b.get("out/b")?);
        let mut h = tape.constant(Tensor::zeros(&[hidden]));
        let mut c = tape.constant(Tensor::zeros(&[hidden]));
        let mut losses = Vec::with_capacity(gold.len() - 1);
        let mut dists = Vec::new();
        for t in 0..gold.len() - 1 {
            let tok = self.token_input_on(tape, emb, pn, gold[t], persona)?;
            let x = tape.concat(&[tok, context])?;
            (h, c) = lstm_cell_step(tape, &dec, x, h, c)?;
            let logits = linear(tape, out_w, out_b, h)?;
            losses.push(tape.softmax_ce(logits, gold[t + 1])?);
            if keep_dists && gold[t + 1] != EOS {
                dists.push(tape.softmax(logits));
            }
        }
        Ok((losses, dists))
    }

    fn story_on(
        &self,
        tape: &mut Tape,
        b: &Binding,
        pn: &PersonaNodes,
        story: &EncodedStory,
        frozen: Option<&Frozen>,
        alpha: f64,
        drop: &mut Dropout,
    ) -> Result<StoryNodes> {
        if story.sentences.len() != STORY_LEN {
            return Err(Error::Contract(format!("story {} has {} sentences", story.id, story.sentences.len())));
        }
        let variant = self.shape.variant;
        let persona = if variant.is_persona_conditioned() {
            let j = story
                .persona
                .ok_or_else(|| Error::Data(format!("story {} has no persona", story.id)))?;
            self.check_persona(j).map_err(|_| Error::Data(format!("story {} has persona {j}", story.id)))?;
            Some(j)
        } else {
            None
        };
        let frozen = frozen.filter(|_| variant.is_persona_conditioned());
        let zs = self.encode_on(tape, b, &story.features, drop)?;
        let mut token_losses = Vec::new();
        let mut per_classifier: Vec<Vec<NodeId>> = vec![Vec::new(); frozen.map_or(0, |f| f.classifiers.len())];
        for (z, gold) in zs.into_iter().zip(&story.sentences) {
            let ctx = self.context_on(tape, b, pn, z, persona)?;
            let (losses, dists) = self.decode_train_on(tape, b, pn, ctx, gold, persona, frozen.is_some())?;
            token_losses.extend(losses);
            if let Some(f) = frozen {
                for (j, (clf, cb)) in f.classifiers.iter().zip(&f.bindings).enumerate() {
                    let logit = clf.logit(tape, cb, Positions::Soft(&dists), None)?;
                    let label = if Some(j) == persona { 1.0 } else { 0.0 };
                    per_classifier[j].push(tape.sigmoid_bce(logit, label)?);
                }
            }
        }
        let generation = tape.mean(&token_losses)?;
        let classifier: Vec<NodeId> = per_classifier.iter().map(|l| tape.mean(l)).collect::<Result<_>>()?;
        let total = if frozen.is_some() { multitask_node(tape, generation, &classifier, alpha)? } else { generation };
        Ok(StoryNodes { generation, classifier, total })
    }

    fn frozen<'a>(&self, tape: &mut Tape, classifiers: &'a [TextCnnClassifier]) -> Result<Option<Frozen<'a>>> {
        if !self.shape.variant.is_persona_conditioned() {
            return Ok(None);
        }
        self.check_classifiers(classifiers)?;
        let bindings = classifiers.iter().map(|c| tape.bind(&c.params, false)).collect();
        Ok(Some(Frozen { classifiers, bindings }))
    }

    fn check_classifiers(&self, classifiers: &[TextCnnClassifier]) -> Result<()> {
        if classifiers.len() != self.shape.n_personas {
            return Err(Error::Config(format!(
                "{} needs {} classifiers, got {}",
                self.shape.variant,
                self.shape.n_personas,
                classifiers.len()
            )));
        }
        for c in classifiers {
            if c.vocab_size() != self.shape.vocab_size {
                return Err(Error::Config(format!(
                    "classifier {} has vocabulary size {}, generator has {}",
                    c.shape.persona,
                    c.vocab_size(),
                    self.shape.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Evaluation-mode glocal vectors for five image features.
    pub fn encode_images(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let b = tape.bind(&self.params, false);
        let zs = self.encode_on(&mut tape, &b, features, &mut Dropout::off())?;
        Ok(zs.into_iter().map(|z| tape.value(z).data().to_vec()).collect())
    }

    /// The decoder context for glocal vector `z` and target `persona`.
    pub fn condition_context(&self, z: &[f64], persona: usize) -> Result<Vec<f64>> {
        self.check_persona(persona)?;
        if z.len() != self.shape.glocal_dim() {
            return Err(Error::dim("condition_context", &[z.len()], &[self.shape.glocal_dim()]));
        }
        let mut tape = Tape::new();
        let b = tape.bind(&self.params, false);
        let pn = self.persona_nodes(&mut tape)?;
        let zn = tape.constant(Tensor::vector(z.to_vec()));
        let ctx = self.context_on(&mut tape, &b, &pn, zn, Some(persona))?;
        Ok(tape.value(ctx).data().to_vec())
    }

    /// Mean teacher-forced cross-entropy of `gold` under `context`, plus the
    /// output distribution at every step.
    pub fn sentence_loss(&self, context: &[f64], gold: &[usize], persona: usize) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_persona(persona)?;
        if context.len() != self.shape.context_dim() {
            return Err(Error::dim("sentence_loss", &[context.len()], &[self.shape.context_dim()]));
        }
        let mut tape = Tape::new();
        let b = tape.bind(&self.params, false);
        let pn = self.persona_nodes(&mut tape)?;
        let ctx = tape.constant(Tensor::vector(context.to_vec()));
        let (losses, _) = self.decode_train_on(&mut tape, &b, &pn, ctx, gold, Some(persona), false)?;
        let mean = tape.mean(&losses)?;
        let dists = self.step_distributions(context, gold, persona)?;
        Ok((tape.scalar(mean), dists))
    }

    fn step_distributions(&self, context: &[f64], gold: &[usize], persona: usize) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let b = tape.bind(&self.params, false);
        let pn = self.persona_nodes(&mut tape)?;
        let hidden = self.shape.config.decoder_hidden;
        let dec = LstmParams::bind(&b, "dec/", hidden)?;
        let (emb, out_w, out_b) = (b.get("emb")?, b.get("out/w")?, b.get("out/b")?);
        let ctx = tape.constant(Tensor::vector(context.to_vec()));
        let mut h = tape.constant(Tensor::zeros(&[hidden]));
        let mut c = tape.constant(Tensor::zeros(&[hidden]));
        let mut out = Vec::new();
        for &id in &gold[..gold.len() - 1] {
            let tok = self.token_input_on(&mut tape, emb, &pn, id, Some(persona))?;
            let x = tape.concat(&[tok, ctx])?;
            (h, c) = lstm_cell_step(&mut tape, &dec, x, h, c)?;
            let logits = linear(&mut tape, out_w, out_b, h)?;
            out.push(softmax(tape.value(logits).data()));
        }
        Ok(out)
    }

    /// Evaluation-mode losses averaged over `stories`.
    pub fn evaluate_loss(&self, stories: &[EncodedStory], classifiers: &[TextCnnClassifier], alpha: f64) -> Result<LossParts> {
        Ok(self.loss_and_gradients(stories, classifiers, alpha, false)?.0)
    }

    /// Evaluation-mode mean objective over `stories` and, when requested,
    /// its gradient with respect to every generator parameter.
    pub fn loss_and_gradients(
        &self,
        stories: &[EncodedStory],
        classifiers: &[TextCnnClassifier],
        alpha: f64,
        with_gradients: bool,
    ) -> Result<(LossParts, BTreeMap<String, Tensor>)> {
        if stories.is_empty() {
            return Err(Error::EmptyInput("evaluate_loss"));
        }
        let mut tape = Tape::new();
        let b = tape.bind(&self.params, with_gradients);
        let pn = self.persona_nodes(&mut tape)?;
        let frozen = self.frozen(&mut tape, classifiers)?;
        let nodes: Vec<StoryNodes> = stories
            .iter()
            .map(|s| self.story_on(&mut tape, &b, &pn, s, frozen.as_ref(), alpha, &mut Dropout::off()))
            .collect::<Result<_>>()?;
        let totals: Vec<NodeId> = nodes.iter().map(|n| n.total).collect();
        let root = tape.mean(&totals)?;
        let n = stories.len() as f64;
        let k = nodes.first().map_or(0, |s| s.classifier.len());
        let parts = LossParts {
            generation: nodes.iter().map(|s| tape.scalar(s.generation)).sum::<f64>() / n,
            classifier: (0..k)
                .map(|j| nodes.iter().map(|s| tape.scalar(s.classifier[j])).sum::<f64>() / n)
                .collect(),
            total: tape.scalar(root),
        };
        let grads = if with_gradients { tape.backward(root)?.into_params() } else { BTreeMap::new() };
        Ok((parts, grads))
    }

    /// Generates five sentences (without BOS/EOS) for the images at `persona`.
    pub fn generate_story(&self, features: &[Vec<f64>], persona: usize, cfg: &DecodeConfig) -> Result<Vec<Vec<usize>>> {
        cfg.validate()?;
        self.check_persona(persona)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut tape = Tape::new();
        let b = tape.bind(&self.params, false);
        let pn = self.persona_nodes(&mut tape)?;
        let zs = self.encode_on(&mut tape, &b, features, &mut Dropout::off())?;
        let persona = self.shape.variant.is_persona_conditioned().then_some(persona);
        let hidden = self.shape.config.decoder_hidden;
        let dec = LstmParams::bind(&b, "dec/", hidden)?;
        let (emb, out_w, out_b) = (b.get("emb")?, b.get("out/w")?, b.get("out/b")?);
        let mut story = Vec::with_capacity(STORY_LEN);
        for z in zs {
            let ctx = self.context_on(&mut tape, &b, &pn, z, persona)?;
            let mut h = tape.constant(Tensor::zeros(&[hidden]));
            let mut c = tape.constant(Tensor::zeros(&[hidden]));
            let mut prev = BOS;
            let mut sentence = Vec::new();
            for _ in 0..cfg.max_len {
                let tok = self.token_input_on(&mut tape, emb, &pn, prev, persona)?;
                let x = tape.concat(&[tok, ctx])?;
                (h, c) = lstm_cell_step(&mut tape, &dec, x, h, c)?;
                let logits = linear(&mut tape, out_w, out_b, h)?;
                let next = pick_token(tape.value(logits).data(), cfg, &mut rng);
                if next == EOS {
                    break;
                }
                sentence.push(next);
                prev = next;
            }
            story.push(sentence);
        }
        Ok(story)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        ckpt.meta.clone_from(&self.meta);
        ckpt.meta.insert("kind".into(), "generator".into());
        ckpt.meta.insert("variant".into(), self.shape.variant.name().into());
        ckpt.meta.insert("shape".into(), serde_json::to_string(&self.shape)?);
        self.params.export_prefixed("gen/", &mut ckpt.tensors);
        for (j, p) in self.personas.iter().enumerate() {
            ckpt.tensors.insert(format!("persona_repr/{j}"), Tensor::vector(p.clone()));
        }
        ckpt.tensors.insert("story_style_repr", Tensor::vector(self.style.clone()));
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Loads a generator, refusing a checkpoint of another variant when
    /// `expected` is given.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<VariantKind>) -> Result<Self> {
        if ckpt.meta("kind")? != "generator" {
            return Err(Error::Format("not a generator checkpoint".into()));
        }
        let found: VariantKind = ckpt.meta("variant")?.parse().map_err(|_| Error::Format("bad variant tag".into()))?;
        if let Some(want) = expected {
            if want != found {
                return Err(Error::VariantMismatch { expected: want.name().into(), found: found.name().into() });
            }
        }
        let shape: ModelShape = serde_json::from_str(ckpt.meta("shape")?)?;
        if shape.variant != found {
            return Err(Error::Format("variant tag disagrees with shape".into()));
        }
        shape.validate().map_err(|e| Error::Format(e.to_string()))?;
        let params = ckpt.tensors.with_prefix_stripped("gen/");
        let reference = init_params(&shape, 0);
        if params.len() != reference.len() {
            return Err(Error::Format(format!("expected {} generator tensors, found {}", reference.len(), params.len())));
        }
        for (name, t) in reference.iter() {
            let got = params.get(name).map_err(|_| Error::Format(format!("missing tensor gen/{name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!("tensor gen/{name} has shape {:?}", got.shape())));
            }
        }
        let fetch = |name: &str| -> Result<Vec<f64>> {
            let t = ckpt.tensors.get(name).map_err(|_| Error::Format(format!("missing tensor {name}")))?;
            if t.len() != shape.persona_dim {
                return Err(Error::Format(format!("tensor {name} has {} values", t.len())));
            }
            Ok(t.data().to_vec())
        };
        let personas = (0..shape.n_personas).map(|j| fetch(&format!("persona_repr/{j}"))).collect::<Result<_>>()?;
        let style = fetch("story_style_repr")?;
        let meta = ckpt
            .meta
            .iter()
            .filter(|(k, _)| !["kind", "variant", "shape"].contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(Self { shape, params, personas, style, meta })
    }

    pub fn load(path: &Path, expected: Option<VariantKind>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, expected)
    }
}

fn init_params(shape: &ModelShape, seed: u64) -> ParamStore {
    let c = &shape.config;
    let mut p = ParamStore::new();
    p.init_uniform(seed, "img/w", &[c.image_proj_dim, shape.image_dim], shape.image_dim);
    p.init_uniform(seed, "img/b", &[c.image_proj_dim], shape.image_dim);
    LstmParams::init(&mut p, seed, "enc_f/", c.image_proj_dim, c.encoder_hidden);
    LstmParams::init(&mut p, seed, "enc_b/", c.image_proj_dim, c.encoder_hidden);
    p.init_uniform(seed, "emb", &[shape.vocab_size, c.embed_dim], c.embed_dim);
    LstmParams::init(&mut p, seed, "dec/", shape.token_input_dim() + shape.context_dim(), c.decoder_hidden);
    p.init_uniform(seed, "out/w", &[shape.vocab_size, c.decoder_hidden], c.decoder_hidden);
    p.init_uniform(seed, "out/b", &[shape.vocab_size], c.decoder_hidden);
    if shape.sepc_needs_projection() {
        p.init_uniform(seed, "strip/w", &[shape.glocal_dim(), shape.persona_dim], shape.persona_dim);
    }
    p
}

/// Greedy argmax (ties to the lowest id) or temperature sampling, never
/// returning PAD or BOS.
fn pick_token(logits: &[f64], cfg: &DecodeConfig, rng: &mut ChaCha8Rng) -> usize {
    let allowed = |i: usize| i != PAD && i != BOS;
    match cfg.mode {
        DecodeMode::Greedy => {
            let mut best = EOS;
            for i in (0..logits.len()).filter(|&i| allowed(i)) {
                if logits[i] > logits[best] {
                    best = i;
                }
            }
            best
        }
        DecodeMode::Sample => {
            let scaled: Vec<f64> = logits
                .iter()
                .enumerate()
                .map(|(i, &l)| if allowed(i) { l / cfg.temperature } else { f64::NEG_INFINITY })
                .collect();
            let probs = softmax(&scaled);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut last = EOS;
            for (i, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    last = i;
                    acc += p;
                    if u < acc {
                        return i;
                    }
                }
            }
            last
        }
    }
}

/// Trains `model` in place of a fresh copy and returns it. Persona variants
/// optimize the multitask objective through the frozen `classifiers`;
/// Glocal optimizes the generation loss alone.
pub fn train_generator(
    mut model: GeneratorModel,
    stories: &[EncodedStory],
    classifiers: &[TextCnnClassifier],
    cfg: &TrainConfig,
) -> Result<(GeneratorModel, TrainReport)> {
    cfg.validate()?;
    if stories.is_empty() {
        return Err(Error::Data("generator training set is empty".into()));
    }
    if model.shape.variant.is_persona_conditioned() {
        model.check_classifiers(classifiers)?;
    }
    for s in stories {
        if s.features.iter().any(|f| f.len() != model.shape.image_dim) {
            return Err(Error::Data(format!("story {} has image features of the wrong dimension", s.id)));
        }
    }
    model.meta.insert("train_config".into(), serde_json::to_string(cfg)?);
    let mut adam = AdamState::new(cfg.lr, cfg.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "order"));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout"));
    let mut order: Vec<usize> = (0..stories.len()).collect();
    let mut report = TrainReport { epoch_losses: Vec::new(), epochs_run: 0 };

    for _ in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let b = tape.bind(&model.params, true);
            let pn = model.persona_nodes(&mut tape)?;
            let frozen = model.frozen(&mut tape, classifiers)?;
            let mut drop = Dropout { rng: Some(&mut drop_rng), p: cfg.dropout };
            let mut totals = Vec::with_capacity(batch.len());
            for &i in batch {
                let nodes = model.story_on(&mut tape, &b, &pn, &stories[i], frozen.as_ref(), cfg.alpha, &mut drop)?;
                epoch_sum += tape.scalar(nodes.total);
                totals.push(nodes.total);
            }
            let loss = tape.mean(&totals)?;
            let grads = tape.backward(loss)?;
            adam.step(&mut model.params, grads.params())?;
        }
        report.epoch_losses.push(epoch_sum / stories.len() as f64);
        report.epochs_run += 1;
        if let Some(threshold) = cfg.stop_below {
            if model.evaluate_loss(stories, classifiers, cfg.alpha)?.total < threshold {
                break;
            }
        }
    }
    Ok((model, report))
}
