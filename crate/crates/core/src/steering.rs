//! Steering with SAE decoder directions: associated logits, added
//! probability on and off those logits, sweeps and paired case studies.

use serde::Serialize;

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};
use crate::sae::{encode_pre_batch, top_k, SaeCheckpoint, SaeParams};
use crate::transformer::Transformer;

/// The `n` tokens whose unembedding rows score highest against `direction`,
/// best first, ties to the lower token id.
pub fn associated_logits<T: Real>(
    model: &Transformer<T>,
    direction: &[f32],
    n: usize,
) -> Result<Vec<u32>> {
    let (v, d) = model.w_u.dims2().expect("w_u is 2-D");
    if direction.len() != d {
        return Err(Error::Shape {
            op: "associated_logits",
            lhs: vec![direction.len()],
            rhs: vec![d],
        });
    }
    if n > v {
        return Err(Error::Invalid(format!("n={n} exceeds vocabulary {v}")));
    }
    let logits: Vec<f32> = (0..v)
        .map(|t| {
            model
                .w_u
                .row(t)
                .iter()
                .zip(direction)
                .map(|(a, &b)| a.to_f64().unwrap_or(f64::NAN) * b as f64)
                .sum::<f64>() as f32
        })
        .collect();
    Ok(top_k(&logits, n)
        .indices
        .into_iter()
        .map(|t| t as u32)
        .collect())
}

/// Associated logits of one latent; warns when the latent is dead.
pub fn latent_associated_logits<T: Real>(
    model: &Transformer<T>,
    sae: &SaeCheckpoint,
    latent: usize,
    n: usize,
) -> Result<Vec<u32>> {
    if sae
        .tracker
        .as_ref()
        .is_some_and(|t| t.dead_flags.get(latent) == Some(&true))
    {
        log::warn!("latent {latent} is dead; associated logits computed anyway");
    }
    associated_logits(model, &sae.params.dec_column(latent), n)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SteeringResult {
    pub latent_index: usize,
    pub alpha: f64,
    pub added_prob_associated: f64,
    pub added_prob_other: f64,
    pub context_count: usize,
    /// Contexts dropped for non-finite probabilities.
    pub skipped: usize,
    /// Largest `|Σ Δp|` over the whole vocabulary among the contexts.
    pub max_conservation_error: f64,
}

/// Final-position output distribution after splicing `x` in at `layer`,
/// normalized in f64.
pub fn final_probs<T: Real>(
    model: &Transformer<T>,
    layer: usize,
    x: &Tensor<T>,
) -> Result<Vec<f64>> {
    let logits = model.logits_from_resid(layer, x)?;
    let (len, _) = logits.dims2().expect("2-D logits");
    let row = logits.row(len - 1);
    let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// A context: its activation at the steering layer and unsteered output
/// distribution.
#[derive(Clone, Debug)]
pub struct Context<T> {
    pub x: Tensor<T>,
    pub base_probs: Vec<f64>,
}

impl<T: Real> Context<T> {
    pub fn new(model: &Transformer<T>, layer: usize, x: Tensor<T>) -> Result<Self> {
        let base_probs = final_probs(model, layer, &x)?;
        Ok(Self { x, base_probs })
    }

    /// Activations at `layer` for the given token sequence.
    pub fn from_tokens(model: &Transformer<T>, layer: usize, tokens: &[u32]) -> Result<Self> {
        let x = model.forward_full(tokens)?.resid_post[layer].clone();
        Self::new(model, layer, x)
    }
}

/// Probability change per token after adding `alpha · direction/‖direction‖`
/// at the final position.
pub fn steered_delta<T: Real>(
    model: &Transformer<T>,
    layer: usize,
    ctx: &Context<T>,
    direction: &[f32],
    alpha: f64,
) -> Result<Vec<f64>> {
    let (len, d) = ctx.x.dims2().expect("2-D context");
    if direction.len() != d {
        return Err(Error::Shape {
            op: "steer",
            lhs: vec![direction.len()],
            rhs: vec![d],
        });
    }
    let norm = direction
        .iter()
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 {
        return Err(Error::Invalid("steering direction has zero norm".into()));
    }
    let mut x = ctx.x.clone();
    let last = &mut x.data_mut()[(len - 1) * d..];
    for (v, &u) in last.iter_mut().zip(direction) {
        *v += T::lit(alpha * u as f64 / norm);
    }
    let p = final_probs(model, layer, &x)?;
    Ok(p.iter().zip(&ctx.base_probs).map(|(a, b)| a - b).collect())
}

/// Average added probability on `associated` and on every other token.
pub fn steering_effect<T: Real>(
    model: &Transformer<T>,
    layer: usize,
    latent_index: usize,
    direction: &[f32],
    alpha: f64,
    contexts: &[Context<T>],
    associated: &[u32],
) -> Result<SteeringResult> {
    if contexts.is_empty() {
        return Err(Error::Invalid("steering needs at least one context".into()));
    }
    let mut res = SteeringResult {
        latent_index,
        alpha,
        added_prob_associated: 0.0,
        added_prob_other: 0.0,
        context_count: 0,
        skipped: 0,
        max_conservation_error: 0.0,
    };
    if alpha == 0.0 {
        res.context_count = contexts.len();
        return Ok(res);
    }
    for ctx in contexts {
        let delta = steered_delta(model, layer, ctx, direction, alpha)?;
        if delta.iter().any(|v| !v.is_finite()) {
            res.skipped += 1;
            continue;
        }
        let assoc: f64 = associated.iter().map(|&t| delta[t as usize]).sum();
        let all: f64 = delta.iter().sum();
        res.added_prob_associated += assoc;
        res.added_prob_other += all - assoc;
        res.max_conservation_error = res.max_conservation_error.max(all.abs());
        res.context_count += 1;
    }
    if res.context_count > 0 {
        res.added_prob_associated /= res.context_count as f64;
        res.added_prob_other /= res.context_count as f64;
    }
    Ok(res)
}

/// One row per `(latent, alpha)`; failed cells are logged and skipped.
pub fn steering_sweep<T: Real>(
    model: &Transformer<T>,
    layer: usize,
    params: &SaeParams,
    latents: &[usize],
    alphas: &[f64],
    contexts: &[Context<T>],
    n: usize,
) -> Result<Vec<SteeringResult>> {
    let mut rows = Vec::with_capacity(latents.len() * alphas.len());
    for &i in latents {
        let dir = params.dec_column(i);
        let assoc = associated_logits(model, &dir, n)?;
        for &alpha in alphas {
            match steering_effect(model, layer, i, &dir, alpha, contexts, &assoc) {
                Ok(r) => rows.push(r),
                Err(e) => log::warn!("steering latent {i} alpha {alpha}: {e}"),
            }
        }
    }
    Ok(rows)
}

/// `{0.5, 1, 2, 4, 8} × median_norm / 10`.
pub fn default_alpha_grid(median_norm: f64) -> Vec<f64> {
    [0.5, 1.0, 2.0, 4.0, 8.0]
        .iter()
        .map(|m| m * median_norm / 10.0)
        .collect()
}

pub fn results_jsonl(rows: &[SteeringResult]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("plain struct") + "\n")
        .collect()
}

/// The latent with the largest mean pre-activation over the probe's
/// positions.
pub fn probe_latent<T: Real>(
    model: &Transformer<T>,
    layer: usize,
    params: &SaeParams,
    probe: &[u32],
) -> Result<usize> {
    let x: Tensor<f32> = model.forward_full(probe)?.resid_post[layer].cast();
    let (len, _) = x.dims2().expect("2-D");
    let z = encode_pre_batch(params, x.data(), len);
    let h = params.h();
    let mean: Vec<f32> = (0..h)
        .map(|i| (0..len).map(|r| z[r * h + i]).sum::<f32>() / len as f32)
        .collect();
    let best = top_k(&mean, 1);
    match best.scores.first() {
        Some(&s) if s > 0.0 => Ok(best.indices[0]),
        _ => Err(Error::Invalid("probe text activates no latent".into())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseStudy {
    pub latent_a: usize,
    pub latent_b: usize,
    /// `(token, mean Δp with SAE a, mean Δp with SAE b)` over the union of
    /// both associated sets, in order of first appearance.
    pub rows: Vec<(u32, f64, f64)>,
    /// Mean added probability on tokens outside each SAE's own set.
    pub other_a: f64,
    pub other_b: f64,
}

impl CaseStudy {
    pub fn csv(&self) -> String {
        let mut s = String::from("token,delta_prob_sae_a,delta_prob_sae_b\n");
        for (t, a, b) in &self.rows {
            s.push_str(&format!("{t},{a},{b}\n"));
        }
        s
    }
}

/// Steers with the probe's latent from each SAE and reports per-token
/// probability changes side by side.
#[allow(clippy::too_many_arguments)]
pub fn case_study<T: Real>(
    model: &Transformer<T>,
    layer: usize,
    sae_a: &SaeParams,
    sae_b: &SaeParams,
    probe: &[u32],
    alpha: f64,
    n: usize,
    contexts: &[Context<T>],
) -> Result<CaseStudy> {
    if contexts.is_empty() {
        return Err(Error::Invalid(
            "case study needs at least one context".into(),
        ));
    }
    let run = |params: &SaeParams| -> Result<(usize, Vec<u32>, Vec<f64>, f64)> {
        let latent = probe_latent(model, layer, params, probe)?;
        let dir = params.dec_column(latent);
        let assoc = associated_logits(model, &dir, n)?;
        let mut mean = vec![0.0; model.config.vocab_size];
        if alpha != 0.0 {
            for ctx in contexts {
                for (m, d) in mean
                    .iter_mut()
                    .zip(steered_delta(model, layer, ctx, &dir, alpha)?)
                {
                    *m += d / contexts.len() as f64;
                }
            }
        }
        let other = mean.iter().sum::<f64>() - assoc.iter().map(|&t| mean[t as usize]).sum::<f64>();
        Ok((latent, assoc, mean, other))
    };
    let (la, assoc_a, mean_a, other_a) = run(sae_a)?;
    let (lb, assoc_b, mean_b, other_b) = run(sae_b)?;
    let mut tokens: Vec<u32> = assoc_a.clone();
    tokens.extend(assoc_b.iter().filter(|t| !assoc_a.contains(t)));
    let rows = tokens
        .iter()
        .map(|&t| (t, mean_a[t as usize], mean_b[t as usize]))
        .collect();
    Ok(CaseStudy {
        latent_a: la,
        latent_b: lb,
        rows,
        other_a,
        other_b,
    })
}
