//! Facet-decoupled attention: one forward pass embeds a caption under K prompts.
//!
//! The shared prefix is encoded once into a KV cache. All facet spans then run
//! together as a single pass whose mask lets each facet see the prefix and its
//! own earlier tokens, never another facet. Each facet's rotary positions
//! continue from the end of the prefix, exactly as in its standalone sequence,
//! so every row matches the per-prompt forward.

use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lm::{AttentionMask, CausalMask, FrozenLm};
use crate::numerics::Tensor;
use crate::prompts::{
    assemble_concat, assemble_single, ConcatLayout, FacetPrompt, Level, PromptSet, PREFIX_HEAD,
    PREFIX_TAIL,
};

/// Span-parameterised facet mask over a [`ConcatLayout`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FacetMask {
    prefix_len: usize,
    spans: Vec<Range<usize>>,
    len: usize,
}

impl FacetMask {
    pub fn new(layout: &ConcatLayout) -> Self {
        FacetMask {
            prefix_len: layout.prefix_len,
            spans: layout.spans.clone(),
            len: layout.len(),
        }
    }

    fn span_of(&self, index: usize) -> Option<&Range<usize>> {
        if index < self.prefix_len {
            return None;
        }
        // spans are sorted and contiguous
        let k = self.spans.partition_point(|s| s.end <= index);
        self.spans.get(k)
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        if key > query {
            return false;
        }
        match self.span_of(query) {
            None => true,
            Some(span) => key < self.prefix_len || span.contains(&key),
        }
    }
}

impl AttentionMask for FacetMask {
    fn len(&self) -> usize {
        self.len
    }

    fn position(&self, index: usize) -> usize {
        match self.span_of(index) {
            None => index,
            Some(span) => self.prefix_len + (index - span.start),
        }
    }

    fn key_ranges(&self, query: usize, out: &mut Vec<Range<usize>>) {
        out.clear();
        match self.span_of(query) {
            None => out.push(0..query + 1),
            Some(span) => {
                if self.prefix_len > 0 {
                    out.push(0..self.prefix_len);
                }
                out.push(span.start..query + 1);
            }
        }
    }
}

pub fn build_mask(layout: &ConcatLayout) -> FacetMask {
    FacetMask::new(layout)
}

/// `K × d_model` text embeddings of one caption, row k for prompt k.
#[derive(Clone, Debug, PartialEq)]
pub struct FacetEmbeddings {
    pub caption_id: Option<u64>,
    pub prompt_ids: Vec<u32>,
    pub rows: Tensor,
}

impl FacetEmbeddings {
    pub fn row(&self, k: usize) -> &[f32] {
        self.rows.row(k)
    }
}

/// Baseline: one full causal forward for a single prompt.
pub fn embed_naive(lm: &FrozenLm, caption: &str, prompt: &FacetPrompt) -> Result<Vec<f32>> {
    let a = assemble_single(caption, prompt, lm.config().max_seq)?;
    let mask = CausalMask::new(a.tokens.len());
    let h = lm.forward_rows(&a.tokens, &mask, None, &[a.extraction])?;
    Ok(h.into_data())
}

/// Single-pass embedding of all facets with a shared prefix cache.
pub fn embed_multifacet(
    lm: &FrozenLm,
    caption: &str,
    prompts: &PromptSet,
) -> Result<FacetEmbeddings> {
    let layout = assemble_concat(caption, prompts, lm.config().max_seq)?;
    embed_layout(lm, &layout)
}

pub fn embed_layout(lm: &FrozenLm, layout: &ConcatLayout) -> Result<FacetEmbeddings> {
    let cache = lm.build_kv_cache(&layout.prefix())?;
    let mask = FacetMask::new(layout);
    let rows: Vec<usize> = layout
        .extraction
        .iter()
        .map(|&x| x - layout.prefix_len)
        .collect();
    let hidden = lm.forward_rows(&layout.facet_tokens(), &mask, Some(&cache), &rows)?;
    Ok(FacetEmbeddings {
        caption_id: None,
        prompt_ids: layout.prompt_ids.clone(),
        rows: hidden,
    })
}

/// Timing of naive K-pass embedding against the single-pass path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdaReport {
    pub facets: usize,
    pub captions: usize,
    pub reps: usize,
    pub mean_prefix_tokens: f64,
    pub mean_suffix_tokens: f64,
    pub naive_ms: f64,
    pub single_pass_ms: f64,
    pub speedup: f64,
}

impl FdaReport {
    pub fn to_text(&self) -> String {
        format!(
            "facets        {}\ncaptions      {}\nreps          {}\nprefix tokens {:.1}\nsuffix tokens {:.1}\nnaive         {:.3} ms\nsingle-pass   {:.3} ms\nspeedup       {:.2}x\n",
            self.facets,
            self.captions,
            self.reps,
            self.mean_prefix_tokens,
            self.mean_suffix_tokens,
            self.naive_ms,
            self.single_pass_ms,
            self.speedup
        )
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median wall-clock of both paths over `reps` (at least 3) repetitions.
pub fn bench_fda(
    lm: &FrozenLm,
    captions: &[String],
    prompts: &PromptSet,
    reps: usize,
) -> Result<FdaReport> {
    let reps = reps.max(3);
    let mut naive = Vec::with_capacity(reps);
    let mut single = Vec::with_capacity(reps);
    let mut sink = 0.0f32;
    for _ in 0..reps {
        let t = Instant::now();
        for c in captions {
            for p in prompts.prompts() {
                sink += embed_naive(lm, c, p)?[0];
            }
        }
        naive.push(t.elapsed().as_secs_f64() * 1e3);

        let t = Instant::now();
        for c in captions {
            sink += embed_multifacet(lm, c, prompts)?.rows.data()[0];
        }
        single.push(t.elapsed().as_secs_f64() * 1e3);
    }
    std::hint::black_box(sink);

    let mut prefix = 0usize;
    let mut suffix = 0usize;
    for c in captions {
        let layout = assemble_concat(c, prompts, lm.config().max_seq)?;
        prefix += layout.prefix_len;
        suffix += layout.spans.iter().map(|s| s.len()).sum::<usize>();
    }
    let n = captions.len().max(1) as f64;
    let naive_ms = median(naive);
    let single_pass_ms = median(single);
    Ok(FdaReport {
        facets: prompts.len(),
        captions: captions.len(),
        reps,
        mean_prefix_tokens: prefix as f64 / n,
        mean_suffix_tokens: suffix as f64 / (n * prompts.len() as f64),
        naive_ms,
        single_pass_ms,
        speedup: naive_ms / single_pass_ms,
    })
}

/// `k` short synthetic prompts (16-token spans) for benchmarking.
pub fn bench_prompts(k: usize) -> Result<PromptSet> {
    let prompts = (0..k)
        .map(|i| FacetPrompt {
            id: i as u32 + 1,
            level: Level::Entity,
            suffix: format!("aspect {} word:\"", (b'a' + (i % 26) as u8) as char),
            default_long: true,
            default_short: i == 0,
        })
        .collect();
    PromptSet::new(prompts)
}

/// Deterministic filler caption of exactly `len` bytes.
pub fn bench_caption(len: usize, salt: usize) -> String {
    const WORDS: [&str; 8] = [
        "red", "circle", "left", "small", "blue", "square", "above", "bright",
    ];
    let mut s = String::with_capacity(len + 8);
    let mut i = salt;
    while s.len() < len {
        s.push_str(WORDS[i % WORDS.len()]);
        s.push(' ');
        i = i.wrapping_mul(31).wrapping_add(7);
    }
    s.truncate(len);
    s
}

/// `n` filler captions whose shared prefix (BOS and scaffold included) is `prefix_tokens` long.
pub fn bench_captions(n: usize, prefix_tokens: usize) -> Vec<String> {
    let scaffold = 1 + PREFIX_HEAD.len() + PREFIX_TAIL.len();
    let len = prefix_tokens.saturating_sub(scaffold);
    (0..n).map(|i| bench_caption(len, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_prefix_hits_target_length() {
        let prompts = bench_prompts(7).unwrap();
        for c in bench_captions(3, 256) {
            let layout = assemble_concat(&c, &prompts, 1024).unwrap();
            assert_eq!(layout.prefix_len, 256);
            assert!(layout.spans.iter().all(|s| s.len() == 16));
        }
    }
    use crate::lm::{densify, LmConfig, DEFAULT_LM_SEED};

    fn lm() -> FrozenLm {
        FrozenLm::init(LmConfig::default(), DEFAULT_LM_SEED).unwrap()
    }

    fn toy_layout() -> ConcatLayout {
        // prefix of 3, facets of lengths 2, 3, 1
        ConcatLayout {
            tokens: crate::lm::TokenSeq(vec![1; 9]),
            prefix_len: 3,
            spans: vec![3..5, 5..8, 8..9],
            extraction: vec![4, 7, 8],
            prompt_ids: vec![1, 2, 3],
            truncated: false,
        }
    }

    #[test]
    fn dense_mask_matches_enumeration() {
        let layout = toy_layout();
        let mask = build_mask(&layout);
        let facet_of =
            |i: usize| -> Option<usize> { layout.spans.iter().position(|s| s.contains(&i)) };
        let mut expected = vec![vec![false; 9]; 9];
        for (t, row) in expected.iter_mut().enumerate() {
            for (u, cell) in row.iter_mut().enumerate() {
                *cell = u <= t
                    && match (facet_of(t), facet_of(u)) {
                        (None, _) => true,
                        (Some(_), None) => true,
                        (Some(a), Some(b)) => a == b,
                    };
            }
        }
        assert_eq!(densify(&mask), expected);
        for t in 0..9 {
            for u in 0..9 {
                assert_eq!(mask.allows(t, u), expected[t][u]);
            }
        }
        // query in facet 2 never sees facet 1
        for t in 5..8 {
            for u in 3..5 {
                assert!(!mask.allows(t, u));
            }
        }
        let positions: Vec<usize> = (0..9).map(|i| mask.position(i)).collect();
        assert_eq!(positions, vec![0, 1, 2, 3, 4, 3, 4, 5, 3]);
    }

    #[test]
    fn single_facet_mask_is_causal() {
        let set = PromptSet::default_short();
        let layout = assemble_concat("a dog", &set, 512).unwrap();
        let mask = build_mask(&layout);
        assert_eq!(densify(&mask), densify(&CausalMask::new(layout.len())));
    }

    #[test]
    fn multifacet_equals_naive() {
        let lm = lm();
        let set = PromptSet::default_long();
        let caption = "A large red circle sits on the left side of a gray canvas.";
        let multi = embed_multifacet(&lm, caption, &set).unwrap();
        assert_eq!(multi.rows.shape(), &[7, 64]);
        for (k, p) in set.prompts().iter().enumerate() {
            let naive = embed_naive(&lm, caption, p).unwrap();
            let diff = naive
                .iter()
                .zip(multi.row(k))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max);
            assert!(diff <= 1e-5, "facet {k}: {diff}");
        }
    }

    #[test]
    fn naive_is_pure_and_prompt_dependent() {
        let lm = lm();
        let set = PromptSet::builtin();
        let a = embed_naive(&lm, "a cat", set.get(0)).unwrap();
        let b = embed_naive(&lm, "a cat", set.get(0)).unwrap();
        let c = embed_naive(&lm, "a cat", set.get(1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn single_prompt_set_is_exactly_naive() {
        let lm = lm();
        let set = PromptSet::default_short();
        let multi = embed_multifacet(&lm, "two birds", &set).unwrap();
        let naive = embed_naive(&lm, "two birds", set.get(0)).unwrap();
        let diff = naive
            .iter()
            .zip(multi.row(0))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(diff <= 1e-6);
    }

    #[test]
    fn permuting_prompts_permutes_rows() {
        let lm = lm();
        let set = PromptSet::default_long();
        let rev_ids: Vec<u32> = set.ids().into_iter().rev().collect();
        let rev = set.select(&rev_ids).unwrap();
        let a = embed_multifacet(&lm, "a yellow star", &set).unwrap();
        let b = embed_multifacet(&lm, "a yellow star", &rev).unwrap();
        assert_eq!(b.prompt_ids, rev_ids);
        for k in 0..7 {
            assert_eq!(a.row(k), b.row(6 - k));
        }
    }

    #[test]
    fn fresh_prefix_per_facet_matches_distributed_cache() {
        let lm = lm();
        let set = PromptSet::default_long();
        let layout = assemble_concat("a green triangle", &set, 512).unwrap();
        let shared = embed_layout(&lm, &layout).unwrap();
        for k in 0..set.len() {
            let cache = lm.build_kv_cache(&layout.prefix()).unwrap();
            let one = PromptSet::new(vec![set.get(k).clone()]).unwrap();
            let single_layout = assemble_concat("a green triangle", &one, 512).unwrap();
            let mask = build_mask(&single_layout);
            let row = single_layout.extraction[0] - single_layout.prefix_len;
            let h = lm
                .forward_rows(&single_layout.facet_tokens(), &mask, Some(&cache), &[row])
                .unwrap();
            let diff = h
                .data()
                .iter()
                .zip(shared.row(k))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max);
            assert!(diff <= 1e-6);
        }
    }

    #[test]
    fn report_arithmetic() {
        let lm = lm();
        let set = bench_prompts(2).unwrap();
        let caps = vec![bench_caption(40, 1)];
        let r = bench_fda(&lm, &caps, &set, 3).unwrap();
        assert_eq!(r.speedup, r.naive_ms / r.single_pass_ms);
        assert_eq!(r.facets, 2);
        let json: serde_json::Value = serde_json::from_str(&r.to_json_line()).unwrap();
        assert!(json["speedup"].is_number());
        assert!(r.to_text().contains("speedup"));
    }

    #[test]
    fn bench_helpers_shape() {
        let set = bench_prompts(7).unwrap();
        assert!(set.prompts().iter().all(|p| p.span_tokens().len() == 16));
        assert_eq!(bench_caption(195, 3).len(), 195);
    }
}
