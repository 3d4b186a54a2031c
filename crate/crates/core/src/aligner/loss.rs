//! Symmetric multi-facet contrastive loss.
//!
//! Text embeddings enter in facet-major order: row `k · N + j` holds caption `j`
//! under prompt `k`. For each facet the similarity block is `[N texts × N images]`;
//! the text-anchored term classifies each row over images, the image-anchored term
//! classifies each column over that facet's texts. Both are normalized by `N · K`.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub loss: Var,
    pub image_to_text: Var,
    pub text_to_image: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub loss: f32,
    pub image_to_text: f32,
    pub text_to_image: f32,
}

pub fn contrastive_loss_vars(
    tape: &mut Tape,
    text_facet_major: Var,
    image: Var,
    log_inv_tau: Var,
    facets: usize,
) -> Result<LossVars> {
    let (n, d) = tape.value(image).dims2()?;
    let (rows, dt) = tape.value(text_facet_major).dims2()?;
    if facets == 0 || rows != n * facets || dt != d {
        return Err(Error::shape(
            "contrastive loss",
            &[facets * n, d],
            &[rows, dt],
        ));
    }
    let text = tape.normalize_rows(text_facet_major)?;
    let img = tape.normalize_rows(image)?;
    let img_t = tape.transpose(img)?;
    let cos = tape.matmul(text, img_t)?;
    let inv_tau = tape.exp(log_inv_tau);
    let logits = tape.scale_by(cos, inv_tau)?;

    let targets: Vec<usize> = (0..n).collect();
    let mut i2t = Vec::with_capacity(facets);
    let mut t2i = Vec::with_capacity(facets);
    for k in 0..facets {
        let block = tape.slice_rows(logits, k * n, n)?;
        t2i.push(tape.cross_entropy(block, &targets)?);
        let block_t = tape.transpose(block)?;
        i2t.push(tape.cross_entropy(block_t, &targets)?);
    }
    let norm = 1.0 / (n * facets) as f32;
    let sum_terms = |tape: &mut Tape, terms: &[Var]| -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Ok(tape.scale(acc, norm))
    };
    let image_to_text = sum_terms(tape, &i2t)?;
    let text_to_image = sum_terms(tape, &t2i)?;
    let both = tape.add(image_to_text, text_to_image)?;
    let loss = tape.scale(both, 0.5);
    Ok(LossVars {
        loss,
        image_to_text,
        text_to_image,
    })
}

/// Reorders caption-major `[N · K, d]` rows (row `i · K + k`) into facet-major order.
pub fn to_facet_major(text: &Tensor, n: usize, facets: usize) -> Result<Tensor> {
    let d = text.last_dim();
    if text.numel() != n * facets * d {
        return Err(Error::shape(
            "text embeddings",
            &[n, facets, d],
            text.shape(),
        ));
    }
    let mut out = Vec::with_capacity(text.numel());
    for k in 0..facets {
        for i in 0..n {
            let r = i * facets + k;
            out.extend_from_slice(&text.data()[r * d..(r + 1) * d]);
        }
    }
    Tensor::new(&[facets * n, d], out)
}

/// Loss value for caption-major text `[N, K, d]` and images `[N, d]`.
pub fn contrastive_loss(text: &Tensor, image: &Tensor, tau: f32) -> Result<LossParts> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (n, _) = image.dims2()?;
    let facets = match text.shape() {
        [tn, k, _] if *tn == n => *k,
        [rows, _] if n > 0 && rows % n == 0 => rows / n,
        other => {
            return Err(Error::shape(
                "contrastive loss",
                &[n, 0, image.last_dim()],
                other,
            ))
        }
    };
    let mut tape = Tape::new();
    let t = tape.constant(to_facet_major(text, n, facets)?);
    let i = tape.constant(image.clone());
    let s = tape.constant(Tensor::scalar((1.0 / tau).ln()));
    let vars = contrastive_loss_vars(&mut tape, t, i, s, facets)?;
    let get = |v: Var| tape.value(v).item();
    Ok(LossParts {
        loss: get(vars.loss)?,
        image_to_text: get(vars.image_to_text)?,
        text_to_image: get(vars.text_to_image)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent double loop in f64, caption-major indexing.
    fn oracle(text: &[f32], image: &[f32], n: usize, k: usize, d: usize, tau: f64) -> f64 {
        let cos = |a: &[f32], b: &[f32]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
            let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let t = |i: usize, f: usize| &text[(i * k + f) * d..(i * k + f + 1) * d];
        let im = |i: usize| &image[i * d..(i + 1) * d];
        let mut l_i = 0.0;
        let mut l_t = 0.0;
        for i in 0..n {
            for f in 0..k {
                let denom: f64 = (0..n).map(|j| (cos(t(j, f), im(i)) / tau).exp()).sum();
                l_i -= ((cos(t(i, f), im(i)) / tau).exp() / denom).ln();
                let denom: f64 = (0..n).map(|j| (cos(t(i, f), im(j)) / tau).exp()).sum();
                l_t -= ((cos(t(i, f), im(i)) / tau).exp() / denom).ln();
            }
        }
        0.5 * (l_i + l_t) / (n * k) as f64
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_pair_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 1..5 {
            let parts = contrastive_loss(
                &random(&[1, k, 6], &mut rng),
                &random(&[1, 6], &mut rng),
                0.07,
            )
            .unwrap();
            assert_eq!(parts.loss, 0.0);
        }
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let text = random(&[4, 2, 8], &mut rng);
        let image = random(&[4, 8], &mut rng);
        let got = contrastive_loss(&text, &image, 0.07).unwrap().loss as f64;
        let want = oracle(text.data(), image.data(), 4, 2, 8, 0.07);
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn orthonormal_pairs_near_zero() {
        let n = 4;
        let mut text = vec![0.0; n * 2 * n];
        let mut image = vec![0.0; n * n];
        for i in 0..n {
            for f in 0..2 {
                text[(i * 2 + f) * n + i] = 1.0;
            }
            image[i * n + i] = 1.0;
        }
        let loss = contrastive_loss(
            &Tensor::new(&[n, 2, n], text).unwrap(),
            &Tensor::new(&[n, n], image).unwrap(),
            0.01,
        )
        .unwrap()
        .loss;
        let bound = -(100f64.exp() / (100f64.exp() + (n as f64 - 1.0))).ln();
        assert!(loss < 0.01 && (loss as f64 - bound).abs() < 1e-6);
    }

    #[test]
    fn zero_vector_is_numeric_error() {
        let text = Tensor::zeros(&[2, 1, 3]);
        let image = Tensor::ones(&[2, 3]);
        assert!(matches!(
            contrastive_loss(&text, &image, 0.1),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn matched_pairs_make_halves_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let image = random(&[5, 6], &mut rng);
        let mut text = Vec::new();
        for i in 0..5 {
            for _ in 0..3 {
                text.extend_from_slice(image.row(i));
            }
        }
        let parts = contrastive_loss(&Tensor::new(&[5, 3, 6], text).unwrap(), &image, 0.2).unwrap();
        assert_eq!(parts.image_to_text, parts.text_to_image);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn invariances(seed in 0u64..10_000, n in 2usize..6, k in 1usize..4, scale in 0.1f32..10.0) {
            let d = 5;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let text = random(&[n, k, d], &mut rng);
            let image = random(&[n, d], &mut rng);
            let base = contrastive_loss(&text, &image, 0.1).unwrap().loss;
            prop_assert!(base >= 0.0);
            let want = oracle(text.data(), image.data(), n, k, d, 0.1);
            prop_assert!((base as f64 - want).abs() < 1e-5);

            let perm: Vec<usize> = (0..n).rev().collect();
            let mut pt = Vec::new();
            let mut pi = Vec::new();
            for &p in &perm {
                pt.extend_from_slice(&text.data()[p * k * d..(p + 1) * k * d]);
                pi.extend_from_slice(image.row(p));
            }
            let permuted = contrastive_loss(&Tensor::new(&[n, k, d], pt).unwrap(), &Tensor::new(&[n, d], pi).unwrap(), 0.1).unwrap().loss;
            prop_assert!((permuted - base).abs() <= 1e-6);

            let mut scaled = image.clone();
            let r = rng.random_range(0..n);
            scaled.row_mut(r).iter_mut().for_each(|v| *v *= scale);
            let rescaled = contrastive_loss(&text, &scaled, 0.1).unwrap().loss;
            prop_assert!((rescaled - base).abs() <= 1e-6);
        }
    }
}
