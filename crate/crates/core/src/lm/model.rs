use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::{AttentionMask, CausalMask};
use super::tokenizer::{TokenSeq, MIN_VOCAB};
use crate::container::{self, take_tensor, NamedTensors};
use crate::error::{Error, FormatError, Result};
use crate::numerics::{dot, softmax_in_place, Tensor};

pub const LN_EPS: f32 = 1e-5;

/// Seed used by `init-lm` when none is given.
pub const DEFAULT_LM_SEED: u64 = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmPreset {
    Tiny,
    Small,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    /// Largest rotary position + 1 a single sequence may use.
    pub max_seq: usize,
    /// Rotary embedding base; rotary is the only positional scheme.
    pub rope_base: f32,
}

impl LmConfig {
    pub fn preset(preset: LmPreset) -> Self {
        match preset {
            LmPreset::Tiny => LmConfig {
                vocab_size: 260,
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                d_head: 16,
                d_ff: 256,
                max_seq: 512,
                rope_base: 10_000.0,
            },
            LmPreset::Small => LmConfig {
                vocab_size: 260,
                d_model: 128,
                n_layers: 4,
                n_heads: 4,
                d_head: 32,
                d_ff: 512,
                max_seq: 1024,
                rope_base: 10_000.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::Config(
                "rotary embeddings need an even d_head".into(),
            ));
        }
        if self.vocab_size < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size must be at least {MIN_VOCAB}"
            )));
        }
        if self.n_layers == 0 || self.max_seq == 0 || self.d_ff == 0 {
            return Err(Error::Config(
                "layers, max_seq and d_ff must be positive".into(),
            ));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::Config("rope_base must exceed 1".into()));
        }
        Ok(())
    }

    fn to_tensor(&self) -> Tensor {
        let v = vec![
            self.vocab_size as f32,
            self.d_model as f32,
            self.n_layers as f32,
            self.n_heads as f32,
            self.d_head as f32,
            self.d_ff as f32,
            self.max_seq as f32,
            self.rope_base,
        ];
        Tensor::new(&[8], v).expect("8 values")
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 8 {
            return Err(FormatError::TensorShape {
                name: "config".into(),
                expected: vec![8],
                found: t.shape().to_vec(),
            }
            .into());
        }
        let c = LmConfig {
            vocab_size: d[0] as usize,
            d_model: d[1] as usize,
            n_layers: d[2] as usize,
            n_heads: d[3] as usize,
            d_head: d[4] as usize,
            d_ff: d[5] as usize,
            max_seq: d[6] as usize,
            rope_base: d[7],
        };
        c.validate()?;
        Ok(c)
    }
}

impl Default for LmConfig {
    fn default() -> Self {
        Self::preset(LmPreset::Tiny)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_gain: Tensor,
    pub attn_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_gain: Tensor,
    pub mlp_bias: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

/// Per-layer keys (rotated) and values for a span of leading positions.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    /// `(keys, values)` per layer, each `[span × d_model]` row-major.
    pub layers: Vec<(Vec<f32>, Vec<f32>)>,
    pub span: usize,
}

impl KvCache {
    pub fn empty(n_layers: usize) -> Self {
        KvCache {
            layers: vec![(Vec::new(), Vec::new()); n_layers],
            span: 0,
        }
    }
}

/// Frozen decoder-only transformer: pre-norm blocks, rotary attention, GELU MLP,
/// final layer norm, untied bias-free LM head.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLm {
    config: LmConfig,
    tok_embed: Tensor,
    layers: Vec<LayerWeights>,
    final_gain: Tensor,
    final_bias: Tensor,
    head: Tensor,
    rope_cos: Vec<f32>,
    rope_sin: Vec<f32>,
}

impl FrozenLm {
    /// Seeded random weights.
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let ff = config.d_ff;
        let s_d = 1.0 / (d as f32).sqrt();
        let s_ff = 1.0 / (ff as f32).sqrt();
        let tok_embed = Tensor::randn(&[config.vocab_size, d], 1.0, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_gain: Tensor::ones(&[d]),
                attn_bias: Tensor::zeros(&[d]),
                // small query/key scale keeps attention near uniform, so facet
                // readouts agree across prompts; value/output scale spreads texts apart
                wq: Tensor::randn(&[d, d], 0.1 * s_d, &mut rng),
                wk: Tensor::randn(&[d, d], 0.1 * s_d, &mut rng),
                wv: Tensor::randn(&[d, d], 2.0 * s_d, &mut rng),
                wo: Tensor::randn(&[d, d], 2.0 * s_d, &mut rng),
                mlp_gain: Tensor::ones(&[d]),
                mlp_bias: Tensor::zeros(&[d]),
                w_up: Tensor::randn(&[d, ff], s_d, &mut rng),
                b_up: Tensor::zeros(&[ff]),
                w_down: Tensor::randn(&[ff, d], s_ff, &mut rng),
                b_down: Tensor::zeros(&[d]),
            });
        }
        let head = Tensor::randn(&[d, config.vocab_size], s_d, &mut rng);
        Self::from_parts(
            config,
            tok_embed,
            layers,
            Tensor::ones(&[d]),
            Tensor::zeros(&[d]),
            head,
        )
    }

    pub fn from_parts(
        config: LmConfig,
        tok_embed: Tensor,
        layers: Vec<LayerWeights>,
        final_gain: Tensor,
        final_bias: Tensor,
        head: Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let (rope_cos, rope_sin) = rope_tables(&config);
        let lm = FrozenLm {
            config,
            tok_embed,
            layers,
            final_gain,
            final_bias,
            head,
            rope_cos,
            rope_sin,
        };
        lm.check_shapes()?;
        Ok(lm)
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn head(&self) -> &Tensor {
        &self.head
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    fn expected_shapes(config: &LmConfig) -> Vec<(String, Vec<usize>)> {
        let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut out = vec![("tok_embed".to_string(), vec![v, d])];
        for i in 0..config.n_layers {
            for (name, shape) in [
                ("attn_norm.gain", vec![d]),
                ("attn_norm.bias", vec![d]),
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("mlp_norm.gain", vec![d]),
                ("mlp_norm.bias", vec![d]),
                ("w_up", vec![d, ff]),
                ("b_up", vec![ff]),
                ("w_down", vec![ff, d]),
                ("b_down", vec![d]),
            ] {
                out.push((format!("layers.{i}.{name}"), shape));
            }
        }
        out.push(("final_norm.gain".into(), vec![d]));
        out.push(("final_norm.bias".into(), vec![d]));
        out.push(("lm_head".into(), vec![d, v]));
        out
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("tok_embed".into(), &self.tok_embed)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("attn_norm.gain", &l.attn_gain),
                ("attn_norm.bias", &l.attn_bias),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("mlp_norm.gain", &l.mlp_gain),
                ("mlp_norm.bias", &l.mlp_bias),
                ("w_up", &l.w_up),
                ("b_up", &l.b_up),
                ("w_down", &l.w_down),
                ("b_down", &l.b_down),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm.gain".into(), &self.final_gain));
        out.push(("final_norm.bias".into(), &self.final_bias));
        out.push(("lm_head".into(), &self.head));
        out
    }

    fn check_shapes(&self) -> Result<()> {
        if self.layers.len() != self.config.n_layers {
            return Err(Error::Config(format!(
                "config declares {} layers, weights have {}",
                self.config.n_layers,
                self.layers.len()
            )));
        }
        for ((name, expected), (_, t)) in
            Self::expected_shapes(&self.config).iter().zip(self.named())
        {
            if t.shape() != expected.as_slice() {
                return Err(FormatError::TensorShape {
                    name: name.clone(),
                    expected: expected.clone(),
                    found: t.shape().to_vec(),
                }
                .into());
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = self.config.to_tensor();
        let named = self.named();
        let entries =
            std::iter::once(("config", &config)).chain(named.iter().map(|(n, t)| (n.as_str(), *t)));
        container::encode_flmw(entries)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_named(container::decode_flmw(bytes)?)
    }

    fn from_named(mut tensors: NamedTensors) -> Result<Self> {
        let config = LmConfig::from_tensor(&take_tensor(&mut tensors, "config", None)?)?;
        let shapes = Self::expected_shapes(&config);
        let mut get = |i: usize| -> Result<Tensor> {
            let (name, shape) = &shapes[i];
            take_tensor(&mut tensors, name, Some(shape))
        };
        let tok_embed = get(0)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let base = 1 + l * 12;
            layers.push(LayerWeights {
                attn_gain: get(base)?,
                attn_bias: get(base + 1)?,
                wq: get(base + 2)?,
                wk: get(base + 3)?,
                wv: get(base + 4)?,
                wo: get(base + 5)?,
                mlp_gain: get(base + 6)?,
                mlp_bias: get(base + 7)?,
                w_up: get(base + 8)?,
                b_up: get(base + 9)?,
                w_down: get(base + 10)?,
                b_down: get(base + 11)?,
            });
        }
        let n = shapes.len();
        let final_gain = get(n - 3)?;
        let final_bias = get(n - 2)?;
        let head = get(n - 1)?;
        Self::from_parts(config, tok_embed, layers, final_gain, final_bias, head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_named(container::read_flmw(path)?)
    }

    /// Final-layer hidden states (after the final norm) for `tokens`.
    ///
    /// Tokens occupy absolute indices `[cache.span, cache.span + len)` of `mask`.
    pub fn forward_hidden(
        &self,
        tokens: &TokenSeq,
        mask: &dyn AttentionMask,
        cache: Option<&KvCache>,
    ) -> Result<Tensor> {
        Ok(self.run(tokens.as_slice(), mask, cache, false, None)?.0)
    }

    /// Causal forward without a cache.
    pub fn forward_causal(&self, tokens: &TokenSeq) -> Result<Tensor> {
        self.forward_hidden(tokens, &CausalMask::new(tokens.len()), None)
    }

    /// Hidden states of selected rows only; the last layer skips every other query.
    pub fn forward_rows(
        &self,
        tokens: &TokenSeq,
        mask: &dyn AttentionMask,
        cache: Option<&KvCache>,
        rows: &[usize],
    ) -> Result<Tensor> {
        Ok(self
            .run(tokens.as_slice(), mask, cache, false, Some(rows))?
            .0)
    }

    pub fn build_kv_cache(&self, prefix: &TokenSeq) -> Result<KvCache> {
        let mask = CausalMask::new(prefix.len());
        let (_, kv) = self.run(prefix.as_slice(), &mask, None, true, None)?;
        Ok(KvCache {
            layers: kv.expect("kv requested"),
            span: prefix.len(),
        })
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        tokens: &[u32],
        mask: &dyn AttentionMask,
        cache: Option<&KvCache>,
        keep_kv: bool,
        final_rows: Option<&[usize]>,
    ) -> Result<(Tensor, Option<Vec<(Vec<f32>, Vec<f32>)>>)> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let span = cache.map_or(0, |c| c.span);
        let n = tokens.len();
        let total = span + n;
        if total > mask.len() {
            return Err(Error::Contract(format!(
                "mask covers {} positions, forward needs {total}",
                mask.len()
            )));
        }
        if let Some(c) = cache {
            if c.layers.len() != cfg.n_layers
                || c.layers
                    .iter()
                    .any(|(k, v)| k.len() != c.span * d || v.len() != c.span * d)
            {
                return Err(Error::Contract("KV cache does not match the model".into()));
            }
        }
        let positions: Vec<usize> = (span..total).map(|i| mask.position(i)).collect();
        if let Some(&max_pos) = positions.iter().max() {
            if max_pos >= cfg.max_seq {
                return Err(Error::Capacity {
                    needed: max_pos + 1,
                    max: cfg.max_seq,
                });
            }
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary"
            )));
        }
        if let Some(rows) = final_rows {
            if rows.iter().any(|&r| r >= n) {
                return Err(Error::Contract("requested row outside the sequence".into()));
            }
        }

        let mut x = vec![0.0f32; n * d];
        for (i, &t) in tokens.iter().enumerate() {
            x[i * d..(i + 1) * d].copy_from_slice(self.tok_embed.row(t as usize));
        }
        let mut x = Tensor::new(&[n, d], x)?;
        let mut kept = keep_kv.then(|| Vec::with_capacity(cfg.n_layers));
        let mut ranges: Vec<Range<usize>> = Vec::with_capacity(2);
        let mut scores: Vec<f32> = Vec::with_capacity(total);
        let scale = 1.0 / (cfg.d_head as f32).sqrt();

        for (l, layer) in self.layers.iter().enumerate() {
            let last = l + 1 == cfg.n_layers;
            let xn = x.layer_norm(&layer.attn_gain, &layer.attn_bias, LN_EPS)?;
            let mut k = xn.matmul(&layer.wk)?;
            let v = xn.matmul(&layer.wv)?;
            // on the last layer only the requested query rows matter
            let query_rows: Vec<usize> = match (last, final_rows) {
                (true, Some(rows)) => rows.to_vec(),
                _ => (0..n).collect(),
            };
            let xq = gather_rows(&xn, &query_rows);
            let mut q = xq.matmul(&layer.wq)?;
            for (qi, &row) in query_rows.iter().enumerate() {
                self.rotate(q.row_mut(qi), positions[row]);
            }
            for (i, &pos) in positions.iter().enumerate() {
                self.rotate(k.row_mut(i), pos);
            }
            let (cache_k, cache_v): (&[f32], &[f32]) = match cache {
                Some(c) => (&c.layers[l].0, &c.layers[l].1),
                None => (&[], &[]),
            };
            let key_row = |u: usize| -> &[f32] {
                if u < span {
                    &cache_k[u * d..(u + 1) * d]
                } else {
                    k.row(u - span)
                }
            };
            let value_row = |u: usize| -> &[f32] {
                if u < span {
                    &cache_v[u * d..(u + 1) * d]
                } else {
                    v.row(u - span)
                }
            };

            let mut attn = vec![0.0f32; query_rows.len() * d];
            for (qi, &row) in query_rows.iter().enumerate() {
                mask.key_ranges(span + row, &mut ranges);
                let qrow = q.row(qi);
                let out = &mut attn[qi * d..(qi + 1) * d];
                for h in 0..cfg.n_heads {
                    let hs = h * cfg.d_head..(h + 1) * cfg.d_head;
                    let qh = &qrow[hs.clone()];
                    scores.clear();
                    for r in &ranges {
                        for u in r.clone() {
                            let kh = &key_row(u)[hs.clone()];
                            scores.push(dot(qh, kh) * scale);
                        }
                    }
                    softmax_in_place(&mut scores);
                    let oh = &mut out[hs.clone()];
                    let mut s = 0;
                    for r in &ranges {
                        for u in r.clone() {
                            let w = scores[s];
                            s += 1;
                            for (o, &vv) in oh.iter_mut().zip(&value_row(u)[hs.clone()]) {
                                *o += w * vv;
                            }
                        }
                    }
                }
            }
            let attn = Tensor::new(&[query_rows.len(), d], attn)?.matmul(&layer.wo)?;
            if query_rows.len() != n {
                x = gather_rows(&x, &query_rows);
            }
            x = x.add(&attn)?;
            let xn2 = x.layer_norm(&layer.mlp_gain, &layer.mlp_bias, LN_EPS)?;
            let hidden = xn2.matmul(&layer.w_up)?.add_row(&layer.b_up)?.gelu();
            let mlp = hidden.matmul(&layer.w_down)?.add_row(&layer.b_down)?;
            x = x.add(&mlp)?;
            if let Some(kept) = kept.as_mut() {
                kept.push((k.into_data(), v.into_data()));
            }
        }
        let out = x.layer_norm(&self.final_gain, &self.final_bias, LN_EPS)?;
        Ok((out, kept))
    }

    fn rotate(&self, row: &mut [f32], pos: usize) {
        let half = self.config.d_head / 2;
        let cos = &self.rope_cos[pos * half..(pos + 1) * half];
        let sin = &self.rope_sin[pos * half..(pos + 1) * half];
        for head in row.chunks_mut(self.config.d_head) {
            for i in 0..half {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * cos[i] - b * sin[i];
                head[2 * i + 1] = a * sin[i] + b * cos[i];
            }
        }
    }

    /// Next-token logits `[… × vocab]` for hidden states `[… × d_model]`.
    pub fn lm_head(&self, hidden: &Tensor) -> Result<Tensor> {
        let d = self.config.d_model;
        if hidden.last_dim() != d {
            return Err(Error::shape("lm_head", hidden.shape(), self.head.shape()));
        }
        let flat = hidden.reshape(&[hidden.rows(), d])?;
        let logits = flat.matmul(&self.head)?;
        let mut shape = hidden.shape().to_vec();
        *shape.last_mut().unwrap() = self.config.vocab_size;
        logits.into_reshaped(&shape)
    }
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let d = t.last_dim();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(&[rows.len(), d], data).expect("row gather")
}

fn rope_tables(config: &LmConfig) -> (Vec<f32>, Vec<f32>) {
    let half = config.d_head / 2;
    let mut cos = Vec::with_capacity(config.max_seq * half);
    let mut sin = Vec::with_capacity(config.max_seq * half);
    for pos in 0..config.max_seq {
        for i in 0..half {
            let theta = (config.rope_base as f64).powf(-2.0 * i as f64 / config.d_head as f64);
            let angle = pos as f64 * theta;
            cos.push(angle.cos() as f32);
            sin.push(angle.sin() as f32);
        }
    }
    (cos, sin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::tokenizer::tokenize;

    fn tiny() -> FrozenLm {
        FrozenLm::init(LmConfig::default(), DEFAULT_LM_SEED).unwrap()
    }

    /// One layer, one head, d = 4, identity value/output maps and a
    /// zero MLP except for its output bias.
    ///
    /// For a single token with embedding e = [1, 2, 3, 4]:
    ///   attention attends only to itself, so attn = LN(e) Wv Wo = LN(e)
    ///   LN(e) = (e - 2.5) / sqrt(1.25 + eps)
    ///   h1 = e + LN(e)
    ///   MLP: up = 0 -> gelu(0) = 0 -> out = b_down = [0.5, 0, 0, -0.5]
    ///   h2 = h1 + b_down, hidden = LN(h2)
    fn hand_model() -> FrozenLm {
        let config = LmConfig {
            vocab_size: 260,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_head: 4,
            d_ff: 2,
            max_seq: 8,
            rope_base: 10_000.0,
        };
        let mut embed = Tensor::zeros(&[260, 4]);
        embed.row_mut(7).copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let layer = LayerWeights {
            attn_gain: Tensor::ones(&[4]),
            attn_bias: Tensor::zeros(&[4]),
            wq: Tensor::eye(4),
            wk: Tensor::eye(4),
            wv: Tensor::eye(4),
            wo: Tensor::eye(4),
            mlp_gain: Tensor::ones(&[4]),
            mlp_bias: Tensor::zeros(&[4]),
            w_up: Tensor::zeros(&[4, 2]),
            b_up: Tensor::zeros(&[2]),
            w_down: Tensor::zeros(&[2, 4]),
            b_down: Tensor::new(&[4], vec![0.5, 0.0, 0.0, -0.5]).unwrap(),
        };
        FrozenLm::from_parts(
            config,
            embed,
            vec![layer],
            Tensor::ones(&[4]),
            Tensor::zeros(&[4]),
            Tensor::zeros(&[4, 260]),
        )
        .unwrap()
    }

    #[test]
    fn single_token_matches_hand_computation() {
        let lm = hand_model();
        let out = lm.forward_causal(&TokenSeq(vec![7])).unwrap();
        let eps = LN_EPS as f64;
        let ln = |x: [f64; 4]| {
            let m = x.iter().sum::<f64>() / 4.0;
            let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0;
            x.map(|a| (a - m) / (v + eps).sqrt())
        };
        let e = [1.0, 2.0, 3.0, 4.0];
        let a = ln(e);
        let h2 = [
            e[0] + a[0] + 0.5,
            e[1] + a[1],
            e[2] + a[2],
            e[3] + a[3] - 0.5,
        ];
        let expected = ln(h2);
        for (got, want) in out.data().iter().zip(expected) {
            assert!((*got as f64 - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn appending_tokens_keeps_earlier_states() {
        let lm = tiny();
        let a = lm.forward_causal(&tokenize("hello")).unwrap();
        let b = lm.forward_causal(&tokenize("hello world")).unwrap();
        assert_eq!(a.data(), &b.data()[..a.numel()]);
    }

    #[test]
    fn cached_forward_matches_full_forward() {
        let lm = tiny();
        let full = tokenize("the quick brown fox jumps over the lazy dog");
        let (prefix, suffix) = full.0.split_at(17);
        let cache = lm.build_kv_cache(&TokenSeq(prefix.to_vec())).unwrap();
        let mask = CausalMask::new(full.len());
        let tail = lm
            .forward_hidden(&TokenSeq(suffix.to_vec()), &mask, Some(&cache))
            .unwrap();
        let whole = lm.forward_causal(&full).unwrap();
        let expected = &whole.data()[17 * 64..];
        let max = tail
            .data()
            .iter()
            .zip(expected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(max <= 1e-5, "max diff {max}");
    }

    #[test]
    fn empty_prefix_cache_is_noop() {
        let lm = tiny();
        let cache = lm.build_kv_cache(&TokenSeq(vec![])).unwrap();
        assert_eq!(cache.span, 0);
        let seq = tokenize("abc");
        let a = lm
            .forward_hidden(&seq, &CausalMask::new(4), Some(&cache))
            .unwrap();
        let b = lm.forward_causal(&seq).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cache_is_slice_of_full_forward_and_pure() {
        let lm = tiny();
        let text: String = "0123456789".repeat(5);
        let seq = tokenize(&text);
        let prefix = TokenSeq(seq.0[..40].to_vec());
        let c1 = lm.build_kv_cache(&prefix).unwrap();
        let c2 = lm.build_kv_cache(&prefix).unwrap();
        assert_eq!(c1, c2);
        let full = lm.build_kv_cache(&seq).unwrap();
        for (l, ((k, v), (fk, fv))) in c1.layers.iter().zip(&full.layers).enumerate() {
            let dk = k
                .iter()
                .zip(&fk[..40 * 64])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max);
            let dv = v
                .iter()
                .zip(&fv[..40 * 64])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max);
            assert!(dk <= 1e-6 && dv <= 1e-6, "layer {l}: {dk} {dv}");
        }
    }

    #[test]
    fn capacity_error_on_overflow() {
        let lm = tiny();
        let long = "x".repeat(600);
        assert!(matches!(
            lm.forward_causal(&tokenize(&long)),
            Err(Error::Capacity { .. })
        ));
        assert!(matches!(
            lm.build_kv_cache(&tokenize(&long)),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn forward_rows_matches_full() {
        let lm = tiny();
        let seq = tokenize("some caption text");
        let full = lm.forward_causal(&seq).unwrap();
        let rows = lm
            .forward_rows(&seq, &CausalMask::new(seq.len()), None, &[3, seq.len() - 1])
            .unwrap();
        assert_eq!(rows.row(0), full.row(3));
        assert_eq!(rows.row(1), full.row(seq.len() - 1));
    }

    #[test]
    fn lm_head_contracts() {
        let lm = tiny();
        let zero = lm.lm_head(&Tensor::zeros(&[1, 64])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let grid = lm.lm_head(&Tensor::zeros(&[4, 4, 64])).unwrap();
        assert_eq!(grid.shape(), &[4, 4, 260]);
        assert!(lm.lm_head(&Tensor::zeros(&[2, 63])).is_err());

        // a hidden row equal to head column t has the largest inner product with it
        // whenever column t has the largest norm; build such a head explicitly
        let mut head = Tensor::zeros(&[64, 260]);
        let designed = 123;
        for j in 0..260 {
            let angle = j as f32 * 0.37;
            head.data_mut()[j] = angle.cos();
            head.data_mut()[260 + j] = angle.sin();
        }
        for r in 0..64 {
            head.data_mut()[r * 260 + designed] = 1.5;
        }
        let lm2 = FrozenLm::from_parts(
            lm.config().clone(),
            lm.tok_embed.clone(),
            lm.layers.clone(),
            lm.final_gain.clone(),
            lm.final_bias.clone(),
            head.clone(),
        )
        .unwrap();
        let column: Vec<f32> = (0..64).map(|r| head.data()[r * 260 + designed]).collect();
        let logits = lm2
            .lm_head(&Tensor::new(&[1, 64], column).unwrap())
            .unwrap();
        assert_eq!(logits.argmax_rows(), vec![designed]);
    }

    #[test]
    fn weights_roundtrip_and_errors() {
        let lm = tiny();
        let bytes = lm.to_bytes();
        let back = FrozenLm::from_bytes(&bytes).unwrap();
        assert_eq!(back, lm);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(
            FrozenLm::from_bytes(&bytes[..bytes.len() - 100]),
            Err(Error::Format(FormatError::Checksum { .. }))
        ));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = FrozenLm::init(LmConfig::default(), 42).unwrap();
        let b = FrozenLm::from_bytes(&FrozenLm::init(LmConfig::default(), 42).unwrap().to_bytes())
            .unwrap();
        let seq = tokenize("hello");
        assert_eq!(
            a.forward_causal(&seq).unwrap(),
            b.forward_causal(&seq).unwrap()
        );
        let c = FrozenLm::init(LmConfig::default(), 43).unwrap();
        assert_ne!(
            a.forward_causal(&seq).unwrap(),
            c.forward_causal(&seq).unwrap()
        );
    }
}
