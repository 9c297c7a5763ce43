//! The pipeline config file.
//!
//! Every section is optional and falls back to the library defaults. A
//! top-level `seed` replaces every stage seed with one derived from it, so a
//! single number pins a whole run. The resolved form, with the derived seeds
//! written out, is echoed next to each command's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pstory::classifier::ClassifierConfig;
use pstory::eval::{RougeGranularity, DEFAULT_BETA};
use pstory::model::{DecodeConfig, ModelConfig, TrainConfig, VariantKind};
use pstory::params::derive_seed;
use pstory::pipeline::PersonaConfig;
use pstory::synth::SynthConfig;
use pstory::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub run: RunConfig,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub persona: PersonaConfig,
    pub classifier: ClassifierConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: VariantKind,
    /// Target persona for `generate`; each story's own persona when unset.
    pub persona: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { variant: VariantKind::Glocal, persona: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: PathBuf,
    /// Story JSONL; `<out>/stories.jsonl` when unset.
    pub stories: Option<PathBuf>,
    /// Utterance JSONL; `<out>/utterances.jsonl` when unset.
    pub utterances: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out: PathBuf::from("run"), stories: None, utterances: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub min_count: usize,
    /// Story split; the test split gets the remainder.
    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub split_seed: u64,
    /// Seed for assigning personas to stories that arrive without one.
    pub assign_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { min_count: 1, train_fraction: 0.8, dev_fraction: 0.1, split_seed: 5, assign_seed: 11 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beta: f64,
    pub granularity: RougeGranularity,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { beta: DEFAULT_BETA, granularity: RougeGranularity::Story }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the master seed and checks cross-field constraints.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(s) = self.seed {
            // TOML integers are signed 64-bit, so derived seeds keep 63 bits.
            let sub = |label: &str| derive_seed(s, label) >> 1;
            self.synth.seed = sub("synth");
            self.persona.seed = sub("persona");
            self.persona.encoder_seed = sub("encoder");
            self.classifier.seed = sub("classifier");
            self.train.seed = sub("train");
            self.decode.seed = sub("decode");
            self.data.split_seed = sub("split");
            self.data.assign_seed = sub("assign");
        }
        self.train.validate()?;
        self.decode.validate()?;
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.dev_fraction >= 0.0 && d.train_fraction + d.dev_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data fractions {} + {} leave no test split",
                d.train_fraction, d.dev_fraction
            )));
        }
        if !(self.eval.beta > 0.0) {
            return Err(Error::Config("eval.beta must be positive".into()));
        }
        if let Some(p) = self.run.persona {
            if p >= self.persona.n_personas {
                return Err(Error::Config(format!("persona {p} out of range 0..{}", self.persona.n_personas)));
            }
        }
        Ok(self)
    }

    pub fn stories_path(&self) -> PathBuf {
        self.paths.stories.clone().unwrap_or_else(|| self.paths.out.join("stories.jsonl"))
    }

    pub fn utterances_path(&self) -> PathBuf {
        self.paths.utterances.clone().unwrap_or_else(|| self.paths.out.join("utterances.jsonl"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
        assert!(PipelineConfig::from_toml("[train]\nlearning_rate = 0.1").is_err());
    }

    #[test]
    fn resolved_echo_round_trips() {
        let cfg = PipelineConfig::from_toml("seed = 42\n[run]\nvariant = \"sepc\"\npersona = 3\n[train]\nstop_below = 0.1")
            .unwrap()
            .resolve()
            .unwrap();
        let echo = cfg.to_toml().unwrap();
        let again = PipelineConfig::from_toml(&echo).unwrap().resolve().unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.run.variant, VariantKind::Sepc);
    }

    #[test]
    fn master_seed_reaches_every_stage() {
        let a = PipelineConfig { seed: Some(1), ..Default::default() }.resolve().unwrap();
        let b = PipelineConfig { seed: Some(2), ..Default::default() }.resolve().unwrap();
        assert_ne!(a.synth.seed, b.synth.seed);
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(a.data.split_seed, b.data.split_seed);
    }
}
