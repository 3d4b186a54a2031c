//! Facet prompts and the token layouts built from them.
//!
//! Every prompt shares the scaffold
//! `Detailed image description: "<caption>". After thinking step by step,`
//! followed by a space and a facet-specific suffix ending in `:"`. The
//! hidden state at that final quote is the facet embedding.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{tokenize, tokenize_raw, TokenSeq};

pub const PREFIX_HEAD: &str = "Detailed image description: \"";
pub const PREFIX_TAIL: &str = "\". After thinking step by step,";
pub const SUFFIX_END: &str = ":\"";
/// Separator between the shared prefix and a facet suffix.
pub const SEPARATOR: &str = " ";

pub const QUOTE_TOKEN: u32 = b'"' as u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Entity,
    Interaction,
    Scene,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Entity => "entity",
            Level::Interaction => "interaction",
            Level::Scene => "scene",
        })
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entity" => Ok(Level::Entity),
            "interaction" => Ok(Level::Interaction),
            "scene" => Ok(Level::Scene),
            other => Err(Error::Config(format!("unknown prompt level {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FacetPrompt {
    pub id: u32,
    pub level: Level,
    /// Text after the shared prefix and separator, ending in `:"`.
    pub suffix: String,
    pub default_long: bool,
    pub default_short: bool,
}

impl FacetPrompt {
    fn builtin(
        id: u32,
        level: Level,
        focus: &str,
        default_long: bool,
        default_short: bool,
    ) -> Self {
        FacetPrompt {
            id,
            level,
            suffix: format!("{focus} means in just one word:\""),
            default_long,
            default_short,
        }
    }

    /// Tokens of this facet's span: separator plus suffix.
    pub fn span_tokens(&self) -> TokenSeq {
        tokenize_raw(&format!("{SEPARATOR}{}", self.suffix))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    prompts: Vec<FacetPrompt>,
}

impl PromptSet {
    pub fn new(prompts: Vec<FacetPrompt>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Config(
                "a prompt set needs at least one prompt".into(),
            ));
        }
        for (i, p) in prompts.iter().enumerate() {
            if !p.suffix.ends_with(SUFFIX_END) {
                return Err(Error::Config(format!(
                    "prompt {} does not end with {SUFFIX_END}",
                    p.id
                )));
            }
            if prompts[..i].iter().any(|q| q.id == p.id) {
                return Err(Error::Config(format!("duplicate prompt id {}", p.id)));
            }
        }
        Ok(PromptSet { prompts })
    }

    /// The nine built-in prompts in their canonical order (ids 1..=9).
    pub fn builtin() -> Self {
        use Level::*;
        let prompts = vec![
            FacetPrompt::builtin(
                1,
                Entity,
                "the category of the main object in this image",
                true,
                false,
            ),
            FacetPrompt::builtin(
                2,
                Entity,
                "the prominent characteristic or pattern of the main object in this image",
                true,
                false,
            ),
            FacetPrompt::builtin(
                3,
                Entity,
                "the category of the minor object in this image",
                true,
                false,
            ),
            FacetPrompt::builtin(
                4,
                Entity,
                "the prominent characteristic or pattern of the minor object in this image",
                true,
                false,
            ),
            FacetPrompt::builtin(
                5,
                Interaction,
                "the primary action or event taking place in this image",
                true,
                false,
            ),
            FacetPrompt::builtin(
                6,
                Interaction,
                "the positioning layout or spatial relationship in this image",
                false,
                false,
            ),
            FacetPrompt::builtin(7, Scene, "this image description", true, true),
            FacetPrompt::builtin(
                8,
                Scene,
                "the overall atmosphere or emotion of this image",
                true,
                false,
            ),
            FacetPrompt::builtin(
                9,
                Scene,
                "the dominant color or color combination of this image",
                false,
                false,
            ),
        ];
        PromptSet { prompts }
    }

    /// The seven prompts flagged as defaults for long captions.
    pub fn default_long() -> Self {
        Self::builtin()
            .filter(|p| p.default_long)
            .expect("builtin has long defaults")
    }

    /// The single-prompt set used for short text at inference.
    pub fn default_short() -> Self {
        Self::builtin()
            .filter(|p| p.default_short)
            .expect("builtin has a short default")
    }

    pub fn filter(&self, keep: impl Fn(&FacetPrompt) -> bool) -> Result<Self> {
        Self::new(self.prompts.iter().filter(|p| keep(p)).cloned().collect())
    }

    /// Prompts with the given ids, in the given order.
    pub fn select(&self, ids: &[u32]) -> Result<Self> {
        let prompts = ids
            .iter()
            .map(|id| {
                self.prompts
                    .iter()
                    .find(|p| p.id == *id)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("no prompt with id {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(prompts)
    }

    /// First `k` prompts.
    pub fn take(&self, k: usize) -> Result<Self> {
        Self::new(self.prompts.iter().take(k).cloned().collect())
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompts(&self) -> &[FacetPrompt] {
        &self.prompts
    }

    pub fn get(&self, k: usize) -> &FacetPrompt {
        &self.prompts[k]
    }

    pub fn ids(&self) -> Vec<u32> {
        self.prompts.iter().map(|p| p.id).collect()
    }

    pub fn short_prompt(&self) -> Option<&FacetPrompt> {
        self.prompts.iter().find(|p| p.default_short)
    }

    /// Parses a prompt inventory: one prompt per line, `level<TAB>flags<TAB>suffix`.
    ///
    /// `flags` is `-`, or any of `L` (long default) and `S` (short default).
    /// Blank lines and lines starting with `#` are skipped; ids follow line order
    /// starting at 1. Exactly one prompt must carry `S`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut prompts = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let mut parts = trimmed.splitn(3, '\t');
            let (Some(level), Some(flags), Some(suffix)) =
                (parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::Config(format!(
                    "prompt file line {}: expected level<TAB>flags<TAB>suffix",
                    lineno + 1
                )));
            };
            let flags = flags.trim();
            if flags != "-" && !flags.chars().all(|c| c == 'L' || c == 'S') {
                return Err(Error::Config(format!(
                    "prompt file line {}: bad flags {flags:?}",
                    lineno + 1
                )));
            }
            prompts.push(FacetPrompt {
                id: prompts.len() as u32 + 1,
                level: level.trim().parse()?,
                suffix: suffix.to_string(),
                default_long: flags.contains('L'),
                default_short: flags.contains('S'),
            });
        }
        let shorts = prompts.iter().filter(|p| p.default_short).count();
        if shorts != 1 {
            return Err(Error::Config(format!(
                "prompt inventory needs exactly one short default, found {shorts}"
            )));
        }
        Self::new(prompts)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.prompts {
            let mut flags = String::new();
            if p.default_long {
                flags.push('L');
            }
            if p.default_short {
                flags.push('S');
            }
            if flags.is_empty() {
                flags.push('-');
            }
            out.push_str(&format!("{}\t{}\t{}\n", p.level, flags, p.suffix));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// A single prompt assembled around a caption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assembled {
    pub tokens: TokenSeq,
    pub extraction: usize,
    /// The caption was cut to fit `max_seq`.
    pub truncated: bool,
}

/// `⟨prefix, span_1, …, span_K⟩` with per-facet extraction indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConcatLayout {
    pub tokens: TokenSeq,
    pub prefix_len: usize,
    pub spans: Vec<Range<usize>>,
    pub extraction: Vec<usize>,
    pub prompt_ids: Vec<u32>,
    pub truncated: bool,
}

impl ConcatLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn facets(&self) -> usize {
        self.spans.len()
    }

    pub fn prefix(&self) -> TokenSeq {
        TokenSeq(self.tokens.0[..self.prefix_len].to_vec())
    }

    /// Tokens after the prefix.
    pub fn facet_tokens(&self) -> TokenSeq {
        TokenSeq(self.tokens.0[self.prefix_len..].to_vec())
    }

    /// Longest single-facet sequence (prefix plus one span).
    pub fn max_facet_len(&self) -> usize {
        self.prefix_len + self.spans.iter().map(|s| s.len()).max().unwrap_or(0)
    }

    /// Facet whose span contains `index`, if any.
    pub fn facet_of(&self, index: usize) -> Option<usize> {
        if index < self.prefix_len {
            return None;
        }
        self.spans.iter().position(|s| s.contains(&index))
    }
}

fn prefix_tokens(caption: &[u8]) -> TokenSeq {
    let mut seq = tokenize(PREFIX_HEAD);
    seq.0.extend(caption.iter().map(|&b| u32::from(b)));
    seq.extend_bytes(PREFIX_TAIL);
    seq
}

/// Caption bytes kept so that `scaffold + caption + longest span ≤ max_seq`.
fn fit_caption<'a>(
    caption: &'a str,
    longest_span: usize,
    max_seq: usize,
) -> Result<(&'a [u8], bool)> {
    let scaffold = 1 + PREFIX_HEAD.len() + PREFIX_TAIL.len();
    let fixed = scaffold + longest_span;
    if fixed > max_seq {
        return Err(Error::Capacity {
            needed: fixed,
            max: max_seq,
        });
    }
    let budget = max_seq - fixed;
    let bytes = caption.as_bytes();
    if bytes.len() > budget {
        log::warn!("caption truncated from {} to {budget} bytes", bytes.len());
        Ok((&bytes[..budget], true))
    } else {
        Ok((bytes, false))
    }
}

pub fn assemble_single(caption: &str, prompt: &FacetPrompt, max_seq: usize) -> Result<Assembled> {
    let span = prompt.span_tokens();
    let (cap, truncated) = fit_caption(caption, span.len(), max_seq)?;
    let mut tokens = prefix_tokens(cap);
    tokens.0.extend_from_slice(span.as_slice());
    let extraction = tokens.len() - 1;
    Ok(Assembled {
        tokens,
        extraction,
        truncated,
    })
}

pub fn assemble_concat(caption: &str, prompts: &PromptSet, max_seq: usize) -> Result<ConcatLayout> {
    let spans: Vec<TokenSeq> = prompts
        .prompts()
        .iter()
        .map(FacetPrompt::span_tokens)
        .collect();
    let longest = spans.iter().map(TokenSeq::len).max().unwrap_or(0);
    let (cap, truncated) = fit_caption(caption, longest, max_seq)?;
    let mut tokens = prefix_tokens(cap);
    let prefix_len = tokens.len();
    let mut ranges = Vec::with_capacity(spans.len());
    let mut extraction = Vec::with_capacity(spans.len());
    for span in &spans {
        let start = tokens.len();
        tokens.0.extend_from_slice(span.as_slice());
        ranges.push(start..tokens.len());
        extraction.push(tokens.len() - 1);
    }
    Ok(ConcatLayout {
        tokens,
        prefix_len,
        spans: ranges,
        extraction,
        prompt_ids: prompts.ids(),
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::detokenize;
    use proptest::prelude::*;

    #[test]
    fn builtin_inventory() {
        let set = PromptSet::builtin();
        assert_eq!(set.len(), 9);
        assert_eq!(set.prompts().iter().filter(|p| p.default_long).count(), 7);
        let levels: Vec<Level> = set.prompts().iter().map(|p| p.level).collect();
        assert_eq!(levels.iter().filter(|&&l| l == Level::Entity).count(), 4);
        assert_eq!(
            levels.iter().filter(|&&l| l == Level::Interaction).count(),
            2
        );
        assert_eq!(levels.iter().filter(|&&l| l == Level::Scene).count(), 3);
        let short: Vec<&FacetPrompt> = set.prompts().iter().filter(|p| p.default_short).collect();
        assert_eq!(short.len(), 1);
        assert!(short[0]
            .suffix
            .contains("this image description means in just one word"));
        assert_eq!(short[0].level, Level::Scene);
        assert!(set.prompts().iter().all(|p| p.suffix.ends_with(":\"")));
        assert_eq!(set.ids(), (1..=9).collect::<Vec<_>>());
        assert_eq!(PromptSet::default_long().ids(), vec![1, 2, 3, 4, 5, 7, 8]);
    }

    #[test]
    fn single_template_text() {
        let p = PromptSet::default_short().get(0).clone();
        let a = assemble_single("a cat", &p, 512).unwrap();
        assert_eq!(
            detokenize(&a.tokens),
            "Detailed image description: \"a cat\". After thinking step by step, this image description means in just one word:\""
        );
        assert_eq!(a.tokens.0[a.extraction], QUOTE_TOKEN);
        assert_eq!(a.extraction, a.tokens.len() - 1);
        assert!(!a.truncated);

        let empty = assemble_single("", &p, 512).unwrap();
        assert!(detokenize(&empty.tokens).contains("description: \"\""));
    }

    #[test]
    fn concat_with_one_prompt_is_single() {
        let set = PromptSet::builtin();
        for p in set.prompts() {
            let one = PromptSet::new(vec![p.clone()]).unwrap();
            let layout = assemble_concat("a red square", &one, 512).unwrap();
            let single = assemble_single("a red square", p, 512).unwrap();
            assert_eq!(layout.tokens, single.tokens);
            assert_eq!(layout.extraction, vec![single.extraction]);
        }
    }

    #[test]
    fn seven_defaults_layout() {
        let set = PromptSet::default_long();
        let layout = assemble_concat("two dogs play in the snow", &set, 512).unwrap();
        assert_eq!(layout.facets(), 7);
        let total: usize = layout.prefix_len + layout.spans.iter().map(|s| s.len()).sum::<usize>();
        assert_eq!(total, layout.len());
        for (span, &x) in layout.spans.iter().zip(&layout.extraction) {
            assert_eq!(x, span.end - 1);
            assert_eq!(layout.tokens.0[x], QUOTE_TOKEN);
        }
        assert_eq!(detokenize(&layout.prefix()), "Detailed image description: \"two dogs play in the snow\". After thinking step by step,");
    }

    #[test]
    fn truncation_keeps_scaffold() {
        let p = PromptSet::builtin().get(1).clone();
        let caption = "z".repeat(1000);
        let a = assemble_single(&caption, &p, 200).unwrap();
        assert!(a.truncated);
        assert_eq!(a.tokens.len(), 200);
        assert_eq!(a.tokens.0[a.extraction], QUOTE_TOKEN);
        assert!(detokenize(&a.tokens).contains("\". After thinking step by step, the prominent"));
        assert!(matches!(
            assemble_single("x", &p, 50),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn prompt_file_roundtrip_and_validation() {
        let set = PromptSet::builtin();
        let text = set.to_text();
        assert_eq!(PromptSet::parse(&text).unwrap(), set);
        let custom = "# custom\nentity\tL\tthe shape in this image means in just one word:\"\n\nscene\tLS\tthis caption means in just one word:\"\n";
        let parsed = PromptSet::parse(custom).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed.short_prompt().unwrap().id, 2);
        assert!(PromptSet::parse("entity\tL\tno closing quote\n").is_err());
        assert!(
            PromptSet::parse("entity\tL\tword:\"\n").is_err(),
            "missing short default"
        );
        assert!(PromptSet::parse("object\tS\tword:\"\n").is_err());
    }

    proptest! {
        #[test]
        fn layout_invariants(caption in ".{0,300}", k in 1usize..=9) {
            let set = PromptSet::builtin().take(k).unwrap();
            let layout = assemble_concat(&caption, &set, 512).unwrap();
            // spans partition [prefix_len, len)
            let mut cursor = layout.prefix_len;
            for span in &layout.spans {
                prop_assert_eq!(span.start, cursor);
                prop_assert!(span.end > span.start);
                cursor = span.end;
            }
            prop_assert_eq!(cursor, layout.len());
            for &x in &layout.extraction {
                prop_assert_eq!(layout.tokens.0[x], QUOTE_TOKEN);
            }
            // prefix equals the common prefix of every single-prompt assembly
            if !layout.truncated {
                for p in set.prompts() {
                    let single = assemble_single(&caption, p, 512).unwrap();
                    prop_assert_eq!(&single.tokens.0[..layout.prefix_len], &layout.tokens.0[..layout.prefix_len]);
                    prop_assert_eq!(&single.tokens.0[layout.prefix_len..], &p.span_tokens().0[..]);
                }
            }
        }
    }
}
