//! Tiny vision transformer: patch embedding, class token, learned positions,
//! pre-norm blocks. Outputs are the raw residual stream; the projection head
//! that follows does its own normalization through the cosine.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::ImageTensor;
use crate::lm::LN_EPS;
use crate::numerics::{ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Cls,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_v: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub pooling: Pooling,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 64,
            patch_size: 16,
            d_v: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            pooling: Pooling::Cls,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0
            || self.patch_size == 0
            || self.d_v == 0
            || self.n_heads == 0
            || self.d_ff == 0
        {
            return fail("vit sizes must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.d_v % self.n_heads != 0 {
            return fail(format!(
                "d_v {} is not divisible by {} heads",
                self.d_v, self.n_heads
            ));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    attn_gain: ParamId,
    attn_bias: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    mlp_gain: ParamId,
    mlp_bias: ParamId,
    w_up: ParamId,
    b_up: ParamId,
    w_down: ParamId,
    b_down: ParamId,
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    config: ViTConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
}

/// Tape handles of an encoded batch.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[N, d_v]`
    pub global: Var,
    /// `[N · grid², d_v]`, image-major, patches in raster order.
    pub patches: Var,
}

fn linear_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], (rows as f32).powf(-0.5), rng)
}

impl VisionEncoder {
    /// Registers all weights in `params` under the `vit.` prefix.
    pub fn new<R: Rng + ?Sized>(
        config: ViTConfig,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_v;
        let patch_w = params.add("vit.patch.w", linear_init(config.patch_dim(), d, rng), true);
        let patch_b = params.add("vit.patch.b", Tensor::zeros(&[d]), false);
        let cls = params.add("vit.cls", Tensor::randn(&[1, d], 0.02, rng), false);
        let pos = params.add(
            "vit.pos",
            Tensor::randn(&[config.seq_len(), d], 0.5, rng),
            false,
        );
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let name = |s: &str| format!("vit.blocks.{l}.{s}");
            blocks.push(BlockIds {
                attn_gain: params.add(name("attn_norm.gain"), Tensor::ones(&[d]), false),
                attn_bias: params.add(name("attn_norm.bias"), Tensor::zeros(&[d]), false),
                wq: params.add(name("wq"), linear_init(d, d, rng), true),
                wk: params.add(name("wk"), linear_init(d, d, rng), true),
                wv: params.add(name("wv"), linear_init(d, d, rng), true),
                wo: params.add(name("wo"), linear_init(d, d, rng), true),
                bo: params.add(name("bo"), Tensor::zeros(&[d]), false),
                mlp_gain: params.add(name("mlp_norm.gain"), Tensor::ones(&[d]), false),
                mlp_bias: params.add(name("mlp_norm.bias"), Tensor::zeros(&[d]), false),
                w_up: params.add(name("w_up"), linear_init(d, config.d_ff, rng), true),
                b_up: params.add(name("b_up"), Tensor::zeros(&[config.d_ff]), false),
                w_down: params.add(name("w_down"), linear_init(config.d_ff, d, rng), true),
                b_down: params.add(name("b_down"), Tensor::zeros(&[d]), false),
            });
        }
        Ok(VisionEncoder {
            config,
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn patch_weight(&self) -> ParamId {
        self.patch_w
    }

    /// Encodes a batch. `vars` comes from [`ParamSet::bind_all`].
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        images: &[&ImageTensor],
    ) -> Result<Encoded> {
        let cfg = &self.config;
        if images.is_empty() {
            return Err(Error::Contract("cannot encode an empty image batch".into()));
        }
        let (n, p, t, d) = (images.len(), cfg.n_patches(), cfg.seq_len(), cfg.d_v);
        let mut rows = Vec::with_capacity(n * p * cfg.patch_dim());
        for img in images {
            rows.extend(patchify(cfg, img)?.into_data());
        }
        let patches_in = tape.constant(Tensor::new(&[n * p, cfg.patch_dim()], rows)?);
        let emb = tape.matmul(patches_in, vars[self.patch_w.0])?;
        let emb = tape.add_row(emb, vars[self.patch_b.0])?;

        let mut parts = Vec::with_capacity(2 * n);
        for i in 0..n {
            parts.push(vars[self.cls.0]);
            parts.push(tape.slice_rows(emb, i * p, p)?);
        }
        let tokens = tape.concat_rows(&parts)?;
        let pos = tape.concat_rows(&vec![vars[self.pos.0]; n])?;
        let mut x = tape.add(tokens, pos)?;

        let d_head = d / cfg.n_heads;
        let inv_sqrt = 1.0 / (d_head as f32).sqrt();
        for b in &self.blocks {
            let h = tape.layer_norm(x, vars[b.attn_gain.0], vars[b.attn_bias.0], LN_EPS)?;
            let q = tape.matmul(h, vars[b.wq.0])?;
            let k = tape.matmul(h, vars[b.wk.0])?;
            let v = tape.matmul(h, vars[b.wv.0])?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                heads.push((
                    tape.slice_cols(q, hd * d_head, d_head)?,
                    tape.slice_cols(k, hd * d_head, d_head)?,
                    tape.slice_cols(v, hd * d_head, d_head)?,
                ));
            }
            let mut per_image = Vec::with_capacity(n);
            for i in 0..n {
                let mut outs = Vec::with_capacity(cfg.n_heads);
                for &(qh, kh, vh) in &heads {
                    let qi = tape.slice_rows(qh, i * t, t)?;
                    let ki = tape.slice_rows(kh, i * t, t)?;
                    let vi = tape.slice_rows(vh, i * t, t)?;
                    let kt = tape.transpose(ki)?;
                    let scores = tape.matmul(qi, kt)?;
                    let scores = tape.scale(scores, inv_sqrt);
                    let probs = tape.softmax(scores)?;
                    outs.push(tape.matmul(probs, vi)?);
                }
                per_image.push(tape.concat_cols(&outs)?);
            }
            let attn = tape.concat_rows(&per_image)?;
            let attn = tape.matmul(attn, vars[b.wo.0])?;
            let attn = tape.add_row(attn, vars[b.bo.0])?;
            x = tape.add(x, attn)?;

            let h = tape.layer_norm(x, vars[b.mlp_gain.0], vars[b.mlp_bias.0], LN_EPS)?;
            let up = tape.matmul(h, vars[b.w_up.0])?;
            let up = tape.add_row(up, vars[b.b_up.0])?;
            let up = tape.gelu(up);
            let down = tape.matmul(up, vars[b.w_down.0])?;
            let down = tape.add_row(down, vars[b.b_down.0])?;
            x = tape.add(x, down)?;
        }

        let mut cls_rows = Vec::with_capacity(n);
        let mut patch_rows = Vec::with_capacity(n);
        for i in 0..n {
            cls_rows.push(tape.slice_rows(x, i * t, 1)?);
            patch_rows.push(tape.slice_rows(x, i * t + 1, p)?);
        }
        let patches = tape.concat_rows(&patch_rows)?;
        let global = match cfg.pooling {
            Pooling::Cls => tape.concat_rows(&cls_rows)?,
            Pooling::Mean => {
                let mut avg = Tensor::zeros(&[n, n * p]);
                for i in 0..n {
                    avg.row_mut(i)[i * p..(i + 1) * p].fill(1.0 / p as f32);
                }
                let avg = tape.constant(avg);
                tape.matmul(avg, patches)?
            }
        };
        Ok(Encoded { global, patches })
    }

    /// Forward without gradients: `(global [N, d_v], patches [N · grid², d_v])`.
    pub fn infer(&self, params: &ParamSet, images: &[&ImageTensor]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .ids()
            .map(|id| tape.constant(params.get(id).clone()))
            .collect();
        let enc = self.encode(&mut tape, &vars, images)?;
        Ok((
            tape.value(enc.global).clone(),
            tape.value(enc.patches).clone(),
        ))
    }
}

/// `[grid², 3 · patch²]` rows, raster order, each flattened channel-major.
pub fn patchify(cfg: &ViTConfig, img: &ImageTensor) -> Result<Tensor> {
    if img.size != cfg.image_size {
        return Err(Error::shape(
            "image",
            &[3, cfg.image_size, cfg.image_size],
            &[3, img.size, img.size],
        ));
    }
    let (g, ps) = (cfg.grid(), cfg.patch_size);
    let mut data = Vec::with_capacity(cfg.n_patches() * cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for dy in 0..ps {
                    let row = (c * img.size + gy * ps + dy) * img.size + gx * ps;
                    data.extend_from_slice(&img.data[row..row + ps]);
                }
            }
        }
    }
    Tensor::new(&[cfg.n_patches(), cfg.patch_dim()], data)
}
