//! Run configuration: one JSON document, every field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aligner::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::{TextAggregation, DEFAULT_KS, DEFAULT_TEMPLATE};
use crate::lm::{LmConfig, LmPreset, DEFAULT_LM_SEED};
use crate::prompts::PromptSet;
use crate::store::DEFAULT_SHARD_SIZE;
use crate::vit::ViTConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub preset: LmPreset,
    pub seed: u64,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            preset: LmPreset::Tiny,
            seed: DEFAULT_LM_SEED,
        }
    }
}

impl LmSection {
    pub fn config(&self) -> LmConfig {
        LmConfig::preset(self.preset)
    }
}

/// Prompt inventory source. Without `ids`, the long-default subset is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub file: Option<PathBuf>,
    pub ids: Option<Vec<u32>>,
}

impl PromptSection {
    pub fn inventory(&self) -> Result<PromptSet> {
        match &self.file {
            Some(path) => PromptSet::load(path),
            None => Ok(PromptSet::builtin()),
        }
    }

    pub fn resolve(&self) -> Result<PromptSet> {
        let inventory = self.inventory()?;
        match &self.ids {
            Some(ids) => inventory.select(ids),
            None => inventory.filter(|p| p.default_long),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreSection {
    pub shard_size: usize,
}

impl Default for StoreSection {
    fn default() -> Self {
        StoreSection {
            shard_size: DEFAULT_SHARD_SIZE,
        }
    }
}

/// Which text vector represents a sample at retrieval time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalText {
    /// The facet produced by the short-default prompt.
    #[default]
    Short,
    Mean,
    /// A facet by position in the prompt set.
    Facet(usize),
}

impl EvalText {
    pub fn aggregation(self, prompts: &PromptSet) -> Result<TextAggregation> {
        match self {
            EvalText::Mean => Ok(TextAggregation::Mean),
            EvalText::Facet(k) => Ok(TextAggregation::Facet(k)),
            EvalText::Short => prompts
                .prompts()
                .iter()
                .position(|p| p.default_short)
                .map(TextAggregation::Facet)
                .ok_or_else(|| Error::Config("prompt set has no short-default prompt".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub text: EvalText,
    pub template: String,
    pub pool: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ks: DEFAULT_KS.to_vec(),
            text: EvalText::Short,
            template: DEFAULT_TEMPLATE.into(),
            pool: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lm: LmSection,
    pub prompts: PromptSection,
    pub store: StoreSection,
    pub vit: ViTConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.train.validate()?;
        self.lm.config().validate()?;
        if self.store.shard_size == 0 {
            return Err(Error::Config("store.shard_size must be positive".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config(
                "eval.ks must be non-empty and positive".into(),
            ));
        }
        if self.eval.pool == 0 {
            return Err(Error::Config("eval.pool must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::parse("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(RunConfig::parse(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.prompts.resolve().unwrap().len(), 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            r#"{"trian": {}}"#,
            r#"{"train": {"stpes": 3}}"#,
            r#"{"vit": {"depth": 2}}"#,
        ] {
            assert!(
                matches!(RunConfig::parse(doc), Err(Error::Config(_))),
                "{doc}"
            );
        }
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let cfg =
            RunConfig::parse(r#"{"train": {"steps": 7}, "eval": {"text": {"facet": 2}}}"#).unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.eval.text, EvalText::Facet(2));
        assert!(RunConfig::parse(r#"{"vit": {"image_size": 60}}"#).is_err());
    }

    #[test]
    fn short_text_resolves_to_its_facet() {
        let prompts = PromptSet::default_long();
        let agg = EvalText::Short.aggregation(&prompts).unwrap();
        let TextAggregation::Facet(k) = agg else {
            panic!()
        };
        assert!(prompts.get(k).default_short);
    }
}
