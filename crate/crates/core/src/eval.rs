//! Retrieval recall, zero-shot classification and patch-to-word mapping.

use std::fmt;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::aligner::{AlignModel, TextSource};
use crate::error::{Error, Result};
use crate::facet::embed_naive;
use crate::imageio::ImageTensor;
use crate::lm::{token_text, FrozenLm};
use crate::numerics::Tensor;
use crate::prompts::FacetPrompt;

pub const DEFAULT_TEMPLATE: &str = "a photo of a {label}";
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "i2t")]
    ImageToText,
    #[serde(rename = "t2i")]
    TextToImage,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::ImageToText => "image->text",
            Direction::TextToImage => "text->image",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub n_queries: usize,
    /// `(k, recall@k)` in ascending k.
    pub recall: Vec<(usize, f32)>,
}

impl RetrievalReport {
    pub fn at(&self, k: usize) -> Option<f32> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

fn unit_rows(t: &Tensor, what: &str) -> Result<Vec<Vec<f32>>> {
    let (m, _) = t.dims2()?;
    (0..m)
        .map(|i| {
            let row = t.row(i);
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Numeric(format!("{what} row {i} has norm {n}")));
            }
            Ok(row.iter().map(|v| v / n).collect())
        })
        .collect()
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity matrix `[queries × candidates]`.
pub fn cosine_matrix(queries: &Tensor, candidates: &Tensor) -> Result<Vec<Vec<f32>>> {
    if queries.last_dim() != candidates.last_dim() {
        return Err(Error::shape("cosine", queries.shape(), candidates.shape()));
    }
    let q = unit_rows(queries, "query")?;
    let c = unit_rows(candidates, "candidate")?;
    Ok(q.iter()
        .map(|qi| c.iter().map(|cj| dot(qi, cj)).collect())
        .collect())
}

/// Zero-based rank of `gold` when candidates are sorted by descending score, lower index first on ties.
pub fn rank_of(scores: &[f32], gold: usize) -> usize {
    let g = scores[gold];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > g || (s == g && j < gold))
        .count()
}

/// Index of the highest score; ties go to the lower index.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = j;
        }
    }
    best
}

pub fn recall_at_k(
    queries: &Tensor,
    candidates: &Tensor,
    gold: &[usize],
    ks: &[usize],
    direction: Direction,
) -> Result<RetrievalReport> {
    let (nq, _) = queries.dims2()?;
    let (nc, _) = candidates.dims2()?;
    if gold.len() != nq {
        return Err(Error::shape("gold", &[nq], &[gold.len()]));
    }
    if let Some(&bad) = gold.iter().find(|&&g| g >= nc) {
        return Err(Error::Config(format!(
            "gold index {bad} outside {nc} candidates"
        )));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > nc) {
        return Err(Error::Config(format!(
            "recall@{k} is undefined for {nc} candidates"
        )));
    }
    let sims = cosine_matrix(queries, candidates)?;
    let ranks: Vec<usize> = sims.iter().zip(gold).map(|(s, &g)| rank_of(s, g)).collect();
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let recall = ks
        .into_iter()
        .map(|k| {
            (
                k,
                ranks.iter().filter(|&&r| r < k).count() as f32 / nq.max(1) as f32,
            )
        })
        .collect();
    Ok(RetrievalReport {
        direction,
        n_queries: nq,
        recall,
    })
}

/// How a sample's K facet embeddings become one retrieval vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextAggregation {
    /// A single facet row, by position in the prompt set.
    Facet(usize),
    Mean,
}

pub fn text_matrix(source: &dyn TextSource, ids: &[u64], mode: TextAggregation) -> Result<Tensor> {
    let (k, d) = (source.facets(), source.d_t());
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let block = source.text(id)?;
        match mode {
            TextAggregation::Facet(f) => {
                if f >= k {
                    return Err(Error::NotFound {
                        sample_id: id,
                        facet: Some(f),
                    });
                }
                out.extend_from_slice(&block[f * d..(f + 1) * d]);
            }
            TextAggregation::Mean => {
                for c in 0..d {
                    out.push((0..k).map(|f| block[f * d + c]).sum::<f32>() / k as f32);
                }
            }
        }
    }
    Tensor::new(&[ids.len(), d], out)
}

/// Retrieval in both directions over paired rows.
pub fn evaluate_retrieval(
    image_embs: &Tensor,
    text_embs: &Tensor,
    ks: &[usize],
) -> Result<[RetrievalReport; 2]> {
    let gold: Vec<usize> = (0..image_embs.rows()).collect();
    Ok([
        recall_at_k(image_embs, text_embs, &gold, ks, Direction::ImageToText)?,
        recall_at_k(text_embs, image_embs, &gold, ks, Direction::TextToImage)?,
    ])
}

pub fn retrieval_table(reports: &[RetrievalReport]) -> String {
    let ks: Vec<usize> = reports
        .first()
        .map(|r| r.recall.iter().map(|(k, _)| *k).collect())
        .unwrap_or_default();
    let mut out = format!("{:<12} {:>8}", "direction", "queries");
    for k in &ks {
        out.push_str(&format!(" {:>9}", format!("R@{k}")));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{:<12} {:>8}",
            r.direction.to_string(),
            r.n_queries
        ));
        for (_, v) in &r.recall {
            out.push_str(&format!(" {v:>9.4}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub labels: Vec<String>,
    pub accuracy: f32,
    pub n: usize,
    pub truth: Vec<usize>,
    pub predictions: Vec<usize>,
}

impl ClassifyReport {
    pub fn to_text(&self) -> String {
        let width = self
            .labels
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = format!("{:<width$} {:>8} {:>8}\n", "label", "support", "correct");
        for (l, name) in self.labels.iter().enumerate() {
            let support = self.truth.iter().filter(|&&t| t == l).count();
            let correct = self
                .truth
                .iter()
                .zip(&self.predictions)
                .filter(|&(&t, &p)| t == l && p == l)
                .count();
            out.push_str(&format!("{name:<width$} {support:>8} {correct:>8}\n"));
        }
        out.push_str(&format!(
            "accuracy {:.4} over {} images\n",
            self.accuracy, self.n
        ));
        out
    }
}

/// Argmax cosine per image; ties go to the lower label index.
pub fn classify_embeddings(image_embs: &Tensor, label_embs: &Tensor) -> Result<Vec<usize>> {
    Ok(cosine_matrix(image_embs, label_embs)?
        .iter()
        .map(|s| argmax(s))
        .collect())
}

pub fn fill_template(template: &str, label: &str) -> Result<String> {
    if !template.contains("{label}") {
        return Err(Error::Config(format!(
            "template {template:?} has no {{label}} placeholder"
        )));
    }
    Ok(template.replace("{label}", label))
}

/// Text embeddings of `template(label)` under one prompt, `[labels × d_t]`.
pub fn label_embeddings(
    lm: &FrozenLm,
    prompt: &FacetPrompt,
    labels: &[String],
    template: &str,
) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::Config("no labels to classify against".into()));
    }
    let mut data = Vec::with_capacity(labels.len() * lm.d_model());
    for label in labels {
        data.extend(embed_naive(lm, &fill_template(template, label)?, prompt)?);
    }
    Tensor::new(&[labels.len(), lm.d_model()], data)
}

pub fn zero_shot_classify(
    model: &AlignModel,
    lm: &FrozenLm,
    prompt: &FacetPrompt,
    images: &[&ImageTensor],
    truth: &[usize],
    labels: &[String],
    template: &str,
) -> Result<ClassifyReport> {
    if truth.len() != images.len() {
        return Err(Error::shape("labels", &[images.len()], &[truth.len()]));
    }
    let label_embs = label_embeddings(lm, prompt, labels, template)?;
    let image_embs = model.embed_images(images)?;
    let predictions = classify_embeddings(&image_embs, &label_embs)?;
    let correct = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| p == t)
        .count();
    Ok(ClassifyReport {
        labels: labels.to_vec(),
        accuracy: correct as f32 / images.len().max(1) as f32,
        n: images.len(),
        truth: truth.to_vec(),
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabMap {
    /// Cells per side after pooling.
    pub side: usize,
    pub pool: usize,
    /// Raster order.
    pub tokens: Vec<u32>,
    pub words: Vec<String>,
}

impl VocabMap {
    pub fn to_text(&self) -> String {
        let width = self.words.iter().map(|w| w.len()).max().unwrap_or(1).max(1);
        let mut out = String::new();
        for r in 0..self.side {
            let cells: Vec<String> = (0..self.side)
                .map(|c| format!("{:<width$}", self.words[r * self.side + c]))
                .collect();
            out.push_str(cells.join(" | ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Average-pools a `[side², d]` raster of features over `pool × pool` windows.
pub fn pool_grid(features: &Tensor, side: usize, pool: usize) -> Result<Tensor> {
    if pool == 0 || side % pool != 0 {
        return Err(Error::Config(format!(
            "pool window {pool} does not divide a {side}×{side} grid"
        )));
    }
    let d = features.last_dim();
    if features.rows() != side * side {
        return Err(Error::shape(
            "patch grid",
            &[side * side, d],
            features.shape(),
        ));
    }
    let out_side = side / pool;
    let mut out = vec![0.0f32; out_side * out_side * d];
    let inv = 1.0 / (pool * pool) as f32;
    for r in 0..out_side {
        for c in 0..out_side {
            let dst = &mut out[(r * out_side + c) * d..(r * out_side + c + 1) * d];
            for dy in 0..pool {
                for dx in 0..pool {
                    let src = features.row((r * pool + dy) * side + c * pool + dx);
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += s;
                    }
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Tensor::new(&[out_side * out_side, d], out)
}

/// Pools raw patch features, projects them into the LM space and reads the argmax token.
pub fn vocab_map(
    model: &AlignModel,
    lm: &FrozenLm,
    image: &ImageTensor,
    pool: usize,
) -> Result<VocabMap> {
    if model.d_t() != lm.d_model() {
        return Err(Error::shape(
            "projection output",
            &[lm.d_model()],
            &[model.d_t()],
        ));
    }
    let side = model.vit_config().grid();
    let (_, patches) = model.vit().infer(&model.params, &[image])?;
    let pooled = pool_grid(&patches, side, pool)?;
    let projected = model.project_features(&pooled)?;
    let tokens: Vec<u32> = lm
        .lm_head(&projected)?
        .argmax_rows()
        .into_iter()
        .map(|t| t as u32)
        .collect();
    let words = tokens.iter().map(|&t| token_text(t)).collect();
    Ok(VocabMap {
        side: side / pool,
        pool,
        tokens,
        words,
    })
}

/// The source image scaled up with each cell tinted by a token-derived color and outlined.
pub fn render_overlay(image: &RgbImage, map: &VocabMap, scale: u32) -> RgbImage {
    let (w, h) = (image.width() * scale, image.height() * scale);
    let cell_w = w / map.side as u32;
    let cell_h = h / map.side as u32;
    RgbImage::from_fn(w, h, |x, y| {
        let src = image.get_pixel(
            (x / scale).min(image.width() - 1),
            (y / scale).min(image.height() - 1),
        );
        let (cx, cy) = (
            (x / cell_w).min(map.side as u32 - 1),
            (y / cell_h).min(map.side as u32 - 1),
        );
        if x % cell_w == 0 || y % cell_h == 0 {
            return Rgb([255, 255, 255]);
        }
        let t = map.tokens[(cy * map.side as u32 + cx) as usize];
        let tint = [
            (t * 97 % 256) as u8,
            (t * 57 % 256) as u8,
            (t * 151 % 256) as u8,
        ];
        let mut out = [0u8; 3];
        for c in 0..3 {
            out[c] = ((src[c] as u16 + tint[c] as u16) / 2) as u8;
        }
        Rgb(out)
    })
}
