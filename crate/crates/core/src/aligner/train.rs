use std::borrow::Cow;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::contrastive_loss_vars;
use super::model::AlignModel;
use super::optim::{learning_rate, AdamW, AdamWConfig, Schedule};
use crate::container::{read_flmw, take_tensor, write_flmw, NamedTensors};
use crate::error::{Error, FormatError, Result};
use crate::facet::embed_multifacet;
use crate::imageio::{load_image, ImageTensor};
use crate::lm::FrozenLm;
use crate::numerics::{Tape, Tensor};
use crate::prompts::PromptSet;
use crate::store::{Corpus, EmbeddingStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f32,
    pub warmup: usize,
    pub schedule: Schedule,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        TrainConfig {
            batch_size: 64,
            steps: 500,
            lr: 1e-3,
            warmup: 100,
            schedule: Schedule::Cosine,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} is invalid",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Per-sample facet embeddings, `K × d_t` row-major.
pub trait TextSource {
    fn facets(&self) -> usize;
    fn d_t(&self) -> usize;
    fn contains(&self, id: u64) -> bool;
    fn text(&self, id: u64) -> Result<Cow<'_, [f32]>>;
}

impl TextSource for EmbeddingStore {
    fn facets(&self) -> usize {
        EmbeddingStore::facets(self)
    }

    fn d_t(&self) -> usize {
        EmbeddingStore::d_t(self)
    }

    fn contains(&self, id: u64) -> bool {
        self.sample(id).is_ok()
    }

    fn text(&self, id: u64) -> Result<Cow<'_, [f32]>> {
        self.sample(id).map(Cow::Borrowed)
    }
}

/// Runs the frozen LM for every request instead of reading a store.
pub struct OnlineText<'a> {
    lm: &'a FrozenLm,
    prompts: &'a PromptSet,
    captions: HashMap<u64, &'a str>,
}

impl<'a> OnlineText<'a> {
    pub fn new(lm: &'a FrozenLm, prompts: &'a PromptSet, corpus: &'a Corpus) -> Self {
        let captions = corpus
            .records
            .iter()
            .map(|r| (r.id, r.caption.as_str()))
            .collect();
        OnlineText {
            lm,
            prompts,
            captions,
        }
    }
}

impl TextSource for OnlineText<'_> {
    fn facets(&self) -> usize {
        self.prompts.len()
    }

    fn d_t(&self) -> usize {
        self.lm.d_model()
    }

    fn contains(&self, id: u64) -> bool {
        self.captions.contains_key(&id)
    }

    fn text(&self, id: u64) -> Result<Cow<'_, [f32]>> {
        let caption = self.captions.get(&id).ok_or(Error::NotFound {
            sample_id: id,
            facet: None,
        })?;
        Ok(Cow::Owned(
            embed_multifacet(self.lm, caption, self.prompts)?
                .rows
                .into_data(),
        ))
    }
}

/// Preprocessed images in corpus order.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub ids: Vec<u64>,
    pub images: Vec<ImageTensor>,
}

impl TrainData {
    pub fn load(corpus: &Corpus, image_size: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(corpus.len());
        let mut images = Vec::with_capacity(corpus.len());
        for r in &corpus.records {
            ids.push(r.id);
            images.push(load_image(&corpus.image_path(r), image_size)?);
        }
        Ok(TrainData { ids, images })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
    pub tau: f32,
}

pub struct Trainer<'a> {
    pub model: AlignModel,
    pub optim: AdamW,
    pub step: usize,
    config: TrainConfig,
    data: &'a TrainData,
    text: &'a dyn TextSource,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: AlignModel,
        config: TrainConfig,
        data: &'a TrainData,
        text: &'a dyn TextSource,
    ) -> Result<Self> {
        let optim = AdamW::new(config.adam(), &model.params);
        Self::resume(
            Checkpoint {
                model,
                optim,
                step: 0,
            },
            config,
            data,
            text,
        )
    }

    pub fn resume(
        ckpt: Checkpoint,
        config: TrainConfig,
        data: &'a TrainData,
        text: &'a dyn TextSource,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Config("training data is empty".into()));
        }
        if text.d_t() != ckpt.model.d_t() {
            return Err(Error::shape(
                "text embeddings",
                &[ckpt.model.d_t()],
                &[text.d_t()],
            ));
        }
        if let Some(&missing) = data.ids.iter().find(|&&id| !text.contains(id)) {
            return Err(Error::NotFound {
                sample_id: missing,
                facet: None,
            });
        }
        let mut optim = ckpt.optim;
        optim.config = config.adam();
        Ok(Trainer {
            model: ckpt.model,
            optim,
            step: ckpt.step,
            config,
            data,
            text,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    pub fn batch_size(&self) -> usize {
        self.config.batch_size.min(self.data.len())
    }

    /// Sample indices for `step`: consecutive slices of a per-epoch seeded permutation.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.data.len();
        let b = self.batch_size();
        let per_epoch = n / b;
        let epoch = (step / per_epoch) as u64;
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.config.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pos = step % per_epoch;
        perm[pos * b..(pos + 1) * b].to_vec()
    }

    /// One optimizer update; the logged loss is measured before it.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let idx = self.batch_indices(step);
        let (n, k, d) = (idx.len(), self.text.facets(), self.text.d_t());
        let mut blocks = Vec::with_capacity(n);
        for &i in &idx {
            let block = self.text.text(self.data.ids[i])?;
            if block.len() != k * d {
                return Err(Error::shape("text block", &[k, d], &[block.len()]));
            }
            blocks.push(block);
        }
        let mut text = Vec::with_capacity(n * k * d);
        for f in 0..k {
            for block in &blocks {
                text.extend_from_slice(&block[f * d..(f + 1) * d]);
            }
        }
        let images: Vec<&ImageTensor> = idx.iter().map(|&i| &self.data.images[i]).collect();

        let mut tape = Tape::new();
        let vars = self.model.params.bind_all(&mut tape);
        let enc = self.model.vit().encode(&mut tape, &vars, &images)?;
        let image = self.model.project(&mut tape, &vars, enc.global)?;
        let text = tape.constant(Tensor::new(&[k * n, d], text)?);
        let tau_var = vars[self.model.log_inv_tau_id().0];
        let loss_vars =
            contrastive_loss_vars(&mut tape, text, image, tau_var, k).map_err(|e| match e {
                Error::Numeric(_) => Error::NonFiniteLoss { step },
                other => other,
            })?;
        let loss = tape.value(loss_vars.loss).item()?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = tape.backward(loss_vars.loss)?.into_params();
        if grads.values().any(|g| !g.all_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        let c = &self.config;
        let lr = learning_rate(c.schedule, step, c.lr, c.warmup, c.steps);
        let tau = self.model.tau();
        self.optim.step(&mut self.model.params, &grads, lr)?;
        self.model.clamp_temperature();
        self.step += 1;
        Ok(StepMetrics {
            step,
            loss,
            lr,
            tau,
        })
    }

    /// Runs until `config.steps`, writing one JSON line per step to `log`.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::new();
        while !self.is_done() {
            let m = self.step()?;
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&m).expect("metrics serialize");
                writeln!(w, "{line}").map_err(|e| Error::io(Path::new("<metrics>"), e))?;
            }
            if m.step % 50 == 0 {
                log::info!(
                    "step {} loss {:.4} lr {:.2e} tau {:.4}",
                    m.step,
                    m.loss,
                    m.lr,
                    m.tau
                );
            }
            out.push(m);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optim: self.optim.clone(),
            step: self.step,
        }
    }
}

/// Model weights plus optimizer state, stored as one FLMW file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: AlignModel,
    pub optim: AdamW,
    pub step: usize,
}

impl Checkpoint {
    pub fn to_named(&self) -> NamedTensors {
        let mut out: NamedTensors = vec![
            ("meta.model".into(), self.model.meta()),
            ("optim.step".into(), Tensor::scalar(self.step as f32)),
            ("optim.t".into(), Tensor::scalar(self.optim.t as f32)),
        ];
        for (id, p) in self.model.params.iter() {
            out.push((format!("model.{}", p.name), p.value.clone()));
            out.push((format!("optim.m.{}", p.name), self.optim.m[id.0].clone()));
            out.push((format!("optim.v.{}", p.name), self.optim.v[id.0].clone()));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.to_named();
        write_flmw(path, named.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Loads into the architecture recorded in the file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut named = read_flmw(path)?;
        let meta = take_tensor(&mut named, "meta.model", Some(&[8]))?;
        let (vit, d_t) = AlignModel::config_from_meta(&meta)?;
        Self::from_named(named, AlignModel::new(vit, d_t, 0)?)
    }

    /// Loads into `template`'s architecture; shapes must agree tensor by tensor.
    pub fn load_into(path: &Path, template: AlignModel) -> Result<Self> {
        Self::from_named(read_flmw(path)?, template)
    }

    fn from_named(mut named: NamedTensors, mut model: AlignModel) -> Result<Self> {
        let counter = |named: &mut NamedTensors, name: &str| -> Result<u64> {
            let v = take_tensor(named, name, Some(&[1]))?.data()[0];
            if !(v >= 0.0 && v.fract() == 0.0) {
                return Err(FormatError::Malformed(format!("{name} is not a step count")).into());
            }
            Ok(v as u64)
        };
        let step = counter(&mut named, "optim.step")? as usize;
        let mut optim = AdamW::new(AdamWConfig::default(), &model.params);
        optim.t = counter(&mut named, "optim.t")?;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.param(id).name.clone();
            let shape = model.params.get(id).shape().to_vec();
            *model.params.get_mut(id) =
                take_tensor(&mut named, &format!("model.{name}"), Some(&shape))?;
            optim.m[id.0] = take_tensor(&mut named, &format!("optim.m.{name}"), Some(&shape))?;
            optim.v[id.0] = take_tensor(&mut named, &format!("optim.v.{name}"), Some(&shape))?;
        }
        Ok(Checkpoint { model, optim, step })
    }
}

/// Loads a trained model for inference.
pub fn load_model(path: &Path) -> Result<AlignModel> {
    Checkpoint::load(path).map(|c| c.model)
}
