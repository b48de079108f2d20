//! Browser playground comparing plain TopK with gradient-aware TopK
//! selection on a random unit-norm dictionary.
//!
//! The activation is a sparse mix of dictionary atoms plus noise, and the
//! loss gradient leans on a few atoms the activation barely uses. The
//! first-order loss change of a reconstruction is `g · (x̂ − x)`.

use gsae::sae::{
    decode_sparse, encode_pre, gradient_scores, init_params, select_gradient_topk, select_topk,
    SaeConfig, SaeParams, Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Reconstruction {
    indices: Vec<usize>,
    nmse: f64,
    first_order_loss: f64,
}

#[derive(Serialize)]
struct Comparison {
    topk: Reconstruction,
    gsae: Reconstruction,
    overlap: usize,
    /// `(latent, z, |W_dec^T g|, score)` for the highest-scoring latents.
    leaders: Vec<(usize, f32, f32, f32)>,
}

#[derive(Serialize)]
struct SweepPoint {
    beta: f32,
    overlap: usize,
    nmse: f64,
    first_order_loss: f64,
}

#[wasm_bindgen]
pub struct Playground {
    params: SaeParams,
    x: Vec<f32>,
    g: Vec<f32>,
    z: Vec<f32>,
    attribution: Vec<f32>,
}

fn unit_gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|a| a * a).sum::<f32>().sqrt();
    v.into_iter().map(|a| a / norm).collect()
}

#[wasm_bindgen]
impl Playground {
    /// A fresh random dictionary with `d × expansion` latents, one
    /// activation and one gradient.
    #[wasm_bindgen(constructor)]
    pub fn new(d: usize, expansion: usize, seed: u64) -> Result<Playground, JsError> {
        let config = SaeConfig {
            seed,
            ..SaeConfig::new(Variant::Gsae, d, expansion, 1)
        };
        config
            .validate()
            .map_err(|e| JsError::new(&e.to_string()))?;
        let params = init_params(&config);
        let h = params.h();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut x = vec![0.0f32; d];
        for _ in 0..6 {
            let col = params.dec_column(rng.random_range(0..h));
            let c = rng.random_range(0.5..2.0f32);
            x.iter_mut().zip(&col).for_each(|(a, b)| *a += c * b);
        }
        let noise = unit_gaussian(d, &mut rng);
        x.iter_mut().zip(&noise).for_each(|(a, b)| *a += 0.2 * b);
        let mut g = unit_gaussian(d, &mut rng);
        for _ in 0..3 {
            let col = params.dec_column(rng.random_range(0..h));
            g.iter_mut().zip(&col).for_each(|(a, b)| *a += 0.8 * b);
        }
        g.iter_mut().for_each(|a| *a *= 0.05);
        let z = encode_pre(&params, &x).map_err(|e| JsError::new(&e.to_string()))?;
        let attribution: Vec<f32> = (0..h)
            .map(|i| {
                params
                    .dec_column(i)
                    .iter()
                    .zip(&g)
                    .map(|(a, b)| a * b)
                    .sum::<f32>()
                    .abs()
            })
            .collect();
        Ok(Playground {
            params,
            x,
            g,
            z,
            attribution,
        })
    }

    pub fn latents(&self) -> usize {
        self.params.h()
    }

    /// JSON comparison of both selections at `(k, beta)`.
    pub fn compare(&self, k: usize, beta: f32) -> Result<String, JsError> {
        let k = k.clamp(1, self.params.h());
        let plain = self.reconstruct(&select_topk(&self.z, k).indices);
        let mask = select_gradient_topk(&self.z, &self.g, &self.params, k, beta)
            .map_err(|e| JsError::new(&e.to_string()))?;
        let aware = self.reconstruct(&mask.indices);
        let overlap = aware
            .indices
            .iter()
            .filter(|i| plain.indices.contains(i))
            .count();
        let scores = gradient_scores(&self.z, &self.attribution, beta);
        let leaders = mask
            .indices
            .iter()
            .take(12)
            .map(|&i| (i, self.z[i], self.attribution[i], scores[i]))
            .collect();
        let out = Comparison {
            topk: plain,
            gsae: aware,
            overlap,
            leaders,
        };
        Ok(serde_json::to_string(&out)?)
    }

    /// JSON list of gradient-aware reconstructions over a range of `beta`
    /// spaced evenly in log scale from `10^lo` to `10^hi`.
    pub fn sweep(&self, k: usize, lo: f32, hi: f32, points: usize) -> Result<String, JsError> {
        let k = k.clamp(1, self.params.h());
        let plain = select_topk(&self.z, k).indices;
        let n = points.max(2);
        let mut out = Vec::with_capacity(n + 1);
        for j in 0..=n {
            let beta = if j == 0 {
                0.0
            } else {
                10f32.powf(lo + (hi - lo) * (j - 1) as f32 / (n - 1) as f32)
            };
            let mask = select_gradient_topk(&self.z, &self.g, &self.params, k, beta)
                .map_err(|e| JsError::new(&e.to_string()))?;
            let r = self.reconstruct(&mask.indices);
            out.push(SweepPoint {
                beta,
                overlap: r.indices.iter().filter(|i| plain.contains(i)).count(),
                nmse: r.nmse,
                first_order_loss: r.first_order_loss,
            });
        }
        Ok(serde_json::to_string(&out)?)
    }
}

impl Playground {
    fn reconstruct(&self, indices: &[usize]) -> Reconstruction {
        let active: Vec<(usize, f32)> = indices.iter().map(|&i| (i, self.z[i])).collect();
        let xhat = decode_sparse(&self.params, &active);
        let err: f64 = self
            .x
            .iter()
            .zip(&xhat)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = self
            .x
            .iter()
            .map(|a| (*a as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let first_order_loss = self
            .g
            .iter()
            .zip(xhat.iter().zip(&self.x))
            .map(|(g, (a, b))| *g as f64 * (a - b) as f64)
            .sum();
        Reconstruction {
            indices: indices.to_vec(),
            nmse: err / norm,
            first_order_loss,
        }
    }
}
