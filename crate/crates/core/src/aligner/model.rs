use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::ImageTensor;
use crate::numerics::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::vit::{Pooling, ViTConfig, VisionEncoder};

pub const TAU_INIT: f32 = 0.07;
pub const TAU_MIN: f32 = 0.01;
pub const TAU_MAX: f32 = 1.0;

/// Inference batch size; rows are independent so this never changes results.
const INFER_CHUNK: usize = 64;

#[derive(Clone, Debug)]
struct ProjectionIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Visual encoder, two-layer projection into the LM hidden space, and temperature.
#[derive(Clone, Debug)]
pub struct AlignModel {
    vit: VisionEncoder,
    proj: ProjectionIds,
    log_inv_tau: ParamId,
    d_t: usize,
    pub params: ParamSet,
}

impl AlignModel {
    pub fn new(vit: ViTConfig, d_t: usize, seed: u64) -> Result<Self> {
        if d_t == 0 {
            return Err(Error::Config("d_t must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d_v = vit.d_v;
        let vit = VisionEncoder::new(vit, &mut params, &mut rng)?;
        let proj = ProjectionIds {
            w1: params.add(
                "proj.w1",
                Tensor::randn(&[d_v, d_t], (d_v as f32).powf(-0.5), &mut rng),
                true,
            ),
            b1: params.add("proj.b1", Tensor::zeros(&[d_t]), false),
            w2: params.add(
                "proj.w2",
                Tensor::randn(&[d_t, d_t], (d_t as f32).powf(-0.5), &mut rng),
                true,
            ),
            b2: params.add("proj.b2", Tensor::zeros(&[d_t]), false),
        };
        let log_inv_tau = params.add("log_inv_tau", Tensor::scalar((1.0 / TAU_INIT).ln()), false);
        Ok(AlignModel {
            vit,
            proj,
            log_inv_tau,
            d_t,
            params,
        })
    }

    pub fn vit(&self) -> &VisionEncoder {
        &self.vit
    }

    pub fn vit_config(&self) -> &ViTConfig {
        self.vit.config()
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    pub fn log_inv_tau_id(&self) -> ParamId {
        self.log_inv_tau
    }

    pub fn tau(&self) -> f32 {
        (-self.params.get(self.log_inv_tau).data()[0]).exp()
    }

    /// Keeps the temperature inside `[TAU_MIN, TAU_MAX]`.
    pub fn clamp_temperature(&mut self) {
        let v = &mut self.params.get_mut(self.log_inv_tau).data_mut()[0];
        *v = v.clamp((1.0 / TAU_MAX).ln(), (1.0 / TAU_MIN).ln());
    }

    pub fn project(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars[self.proj.w1.0])?;
        let h = tape.add_row(h, vars[self.proj.b1.0])?;
        let h = tape.gelu(h);
        let out = tape.matmul(h, vars[self.proj.w2.0])?;
        tape.add_row(out, vars[self.proj.b2.0])
    }

    /// Projected global features `[N, d_t]` and projected patches `[N · grid², d_t]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        images: &[&ImageTensor],
    ) -> Result<(Var, Var)> {
        let enc = self.vit.encode(tape, vars, images)?;
        let global = self.project(tape, vars, enc.global)?;
        let patches = self.project(tape, vars, enc.patches)?;
        Ok((global, patches))
    }

    fn constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .ids()
            .map(|id| tape.constant(self.params.get(id).clone()))
            .collect()
    }

    /// Projected global image embeddings, `[N, d_t]`.
    pub fn embed_images(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        let mut parts = Vec::new();
        for chunk in images.chunks(INFER_CHUNK) {
            let mut tape = Tape::new();
            let vars = self.constants(&mut tape);
            let enc = self.vit.encode(&mut tape, &vars, chunk)?;
            let g = self.project(&mut tape, &vars, enc.global)?;
            parts.push(tape.value(g).clone());
        }
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    /// Projected patch features of one image, `[grid², d_t]`.
    pub fn embed_patches(&self, image: &ImageTensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape);
        let enc = self.vit.encode(&mut tape, &vars, &[image])?;
        let p = self.project(&mut tape, &vars, enc.patches)?;
        Ok(tape.value(p).clone())
    }

    /// Applies the projection head to raw visual features `[M, d_v]`.
    pub fn project_features(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape);
        let x = tape.constant(features.clone());
        let y = self.project(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }

    /// Architecture descriptor stored alongside weights.
    pub fn meta(&self) -> Tensor {
        let c = self.vit_config();
        let pooling = match c.pooling {
            Pooling::Cls => 0.0,
            Pooling::Mean => 1.0,
        };
        let v = [
            c.image_size,
            c.patch_size,
            c.d_v,
            c.n_layers,
            c.n_heads,
            c.d_ff,
        ];
        let mut data: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        data.push(pooling);
        data.push(self.d_t as f32);
        Tensor::new(&[8], data).expect("meta shape")
    }

    pub fn config_from_meta(meta: &Tensor) -> Result<(ViTConfig, usize)> {
        let d = meta.data();
        if d.len() != 8
            || d.iter()
                .any(|v| !(v.is_finite() && *v >= 0.0 && v.fract() == 0.0))
        {
            return Err(
                crate::error::FormatError::Malformed("bad model meta tensor".into()).into(),
            );
        }
        let u = |i: usize| d[i] as usize;
        let cfg = ViTConfig {
            image_size: u(0),
            patch_size: u(1),
            d_v: u(2),
            n_layers: u(3),
            n_heads: u(4),
            d_ff: u(5),
            pooling: if d[6] == 0.0 {
                Pooling::Cls
            } else {
                Pooling::Mean
            },
        };
        cfg.validate()?;
        Ok((cfg, u(7)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_init_and_clamp() {
        let mut m = AlignModel::new(ViTConfig::default(), 64, 0).unwrap();
        assert!((m.tau() - 0.07).abs() < 1e-6);
        m.params.get_mut(m.log_inv_tau_id()).data_mut()[0] = 9.0;
        m.clamp_temperature();
        assert!((m.tau() - TAU_MIN).abs() < 1e-6);
        m.params.get_mut(m.log_inv_tau_id()).data_mut()[0] = -3.0;
        m.clamp_temperature();
        assert!((m.tau() - TAU_MAX).abs() < 1e-6);
    }

    #[test]
    fn embedding_shapes_and_meta() {
        let m = AlignModel::new(ViTConfig::default(), 48, 1).unwrap();
        let img = ImageTensor::new(64, vec![0.1; 3 * 64 * 64]).unwrap();
        assert_eq!(m.embed_images(&[&img, &img]).unwrap().shape(), &[2, 48]);
        assert_eq!(m.embed_patches(&img).unwrap().shape(), &[16, 48]);
        let (cfg, d_t) = AlignModel::config_from_meta(&m.meta()).unwrap();
        assert_eq!((cfg, d_t), (ViTConfig::default(), 48));
    }
}
