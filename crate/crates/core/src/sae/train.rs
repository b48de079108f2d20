use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{init_params, reconstruct_batch, DeadLatentTracker, SaeConfig, SaeParams, Variant};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::store::{ActivationCache, SequenceSpan};
use crate::transformer::{ModelCheckpoint, Site};

/// Stacked records for one optimizer step. For `e2e_topk` the rows are
/// whole sequences back to back, with lengths in `seq_lens`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub d: usize,
    pub xs: Vec<f32>,
    pub gs: Vec<f32>,
    pub seq_lens: Vec<usize>,
}

impl Batch {
    pub fn new(d: usize, xs: Vec<f32>, gs: Vec<f32>) -> Result<Self> {
        if d == 0 || !xs.len().is_multiple_of(d) || gs.len() != xs.len() {
            return Err(Error::Invalid(format!(
                "batch of {} / {} values with d={d}",
                xs.len(),
                gs.len()
            )));
        }
        Ok(Self {
            n: xs.len() / d,
            d,
            xs,
            gs,
            seq_lens: vec![],
        })
    }

    pub fn gather(cache: &ActivationCache, indices: &[usize]) -> Self {
        let d = cache.d_model;
        let mut b = Self {
            n: indices.len(),
            d,
            ..Self::default()
        };
        b.xs.reserve(indices.len() * d);
        b.gs.reserve(indices.len() * d);
        for &i in indices {
            let r = cache.get(i);
            b.xs.extend_from_slice(r.x);
            b.gs.extend_from_slice(r.g);
        }
        b
    }

    pub fn gather_sequences(cache: &ActivationCache, spans: &[&SequenceSpan]) -> Self {
        let idx: Vec<usize> = spans
            .iter()
            .flat_map(|s| s.records.iter().copied())
            .collect();
        let mut b = Self::gather(cache, &idx);
        b.seq_lens = spans.iter().map(|s| s.records.len()).collect();
        b
    }

    pub fn x(&self, r: usize) -> &[f32] {
        &self.xs[r * self.d..(r + 1) * self.d]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeGrads {
    pub w_enc: Vec<f32>,
    pub b_enc: Vec<f32>,
    pub w_dec: Vec<f32>,
    pub b_dec: Vec<f32>,
}

impl SaeGrads {
    fn zeros(d: usize, h: usize) -> Self {
        Self {
            w_enc: vec![0.0; h * d],
            b_enc: vec![0.0; h],
            w_dec: vec![0.0; d * h],
            b_dec: vec![0.0; d],
        }
    }

    pub fn all_finite(&self) -> bool {
        [&self.w_enc, &self.b_enc, &self.w_dec, &self.b_dec]
            .iter()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Objective of the variant, averaged over the batch.
    pub loss: f32,
    /// Mean squared reconstruction error per record.
    pub mse: f32,
    pub grads: SaeGrads,
    /// Latents that were active with a nonzero value on some record.
    pub fired: Vec<bool>,
}

/// Loss and parameter gradients for one batch. Gradients pass only
/// through active latents; the selection itself is held fixed.
///
/// `e2e` supplies the model and hook layer for `e2e_topk`.
pub fn batch_grads(
    params: &SaeParams,
    config: &SaeConfig,
    batch: &Batch,
    e2e: Option<(&ModelCheckpoint, usize)>,
) -> Result<StepOutput> {
    let (d, h, n) = (params.d(), params.h(), batch.n);
    if batch.d != d {
        return Err(Error::Shape {
            op: "batch_grads",
            lhs: vec![batch.n, batch.d],
            rhs: vec![d],
        });
    }
    if n == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let (actives, xhat) = reconstruct_batch(params, config, &batch.xs, &batch.gs, n);
    let mse = xhat
        .iter()
        .zip(&batch.xs)
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / n as f64;

    let (loss, dxhat) = if config.variant == Variant::E2eTopK {
        let (model, layer) =
            e2e.ok_or_else(|| Error::Invalid("e2e_topk needs a model checkpoint".into()))?;
        if batch.seq_lens.is_empty() || batch.seq_lens.iter().sum::<usize>() != n {
            return Err(Error::Invalid(
                "e2e_topk batches must consist of whole sequences".into(),
            ));
        }
        let n_seq = batch.seq_lens.len() as f32;
        let mut dxhat = Vec::with_capacity(n * d);
        let mut total = 0.0f64;
        let mut start = 0;
        for &len in &batch.seq_lens {
            let rows = start * d..(start + len) * d;
            let reference = Tensor::new(vec![len, d], batch.xs[rows.clone()].to_vec())?;
            let recon = Tensor::new(vec![len, d], xhat[rows].to_vec())?;
            let (kl, g) = model.kl_from_resid(layer, &reference, &recon)?;
            total += kl as f64;
            dxhat.extend(g.data().iter().map(|v| v / n_seq));
            start += len;
        }
        ((total / n_seq as f64) as f32, dxhat)
    } else {
        let scale = 2.0 / n as f32;
        let dxhat: Vec<f32> = xhat
            .iter()
            .zip(&batch.xs)
            .map(|(a, b)| scale * (a - b))
            .collect();
        let l1 = if config.variant == Variant::ReluL1 {
            config.l1_coefficient as f64
                * actives
                    .iter()
                    .flatten()
                    .map(|&(_, v)| v.abs() as f64)
                    .sum::<f64>()
                / n as f64
        } else {
            0.0
        };
        ((mse + l1) as f32, dxhat)
    };

    let l1_grad = if config.variant == Variant::ReluL1 {
        config.l1_coefficient / n as f32
    } else {
        0.0
    };
    let mut grads = SaeGrads::zeros(d, h);
    let mut fired = vec![false; h];
    let (w_enc, w_dec, b_dec) = (
        params.w_enc.data(),
        params.w_dec.data(),
        params.b_dec.data(),
    );
    let mut centered = vec![0.0f32; d];
    for (r, act) in actives.iter().enumerate() {
        let dx = &dxhat[r * d..(r + 1) * d];
        for (g, &v) in grads.b_dec.iter_mut().zip(dx) {
            *g += v;
        }
        for ((c, &x), &b) in centered.iter_mut().zip(batch.x(r)).zip(b_dec) {
            *c = x - b;
        }
        for &(i, y) in act {
            if y != 0.0 {
                fired[i] = true;
            }
            let mut dy = 0.0f32;
            for j in 0..d {
                grads.w_dec[j * h + i] += dx[j] * y;
                dy += w_dec[j * h + i] * dx[j];
            }
            if y > 0.0 {
                dy += l1_grad;
            } else if y < 0.0 {
                dy -= l1_grad;
            }
            grads.b_enc[i] += dy;
            let row = &mut grads.w_enc[i * d..(i + 1) * d];
            let enc_row = &w_enc[i * d..(i + 1) * d];
            for j in 0..d {
                row[j] += dy * centered[j];
                grads.b_dec[j] -= dy * enc_row[j];
            }
        }
    }
    Ok(StepOutput {
        loss,
        mse: mse as f32,
        grads,
        fired,
    })
}

/// Trained parameters plus the training history.
#[derive(Clone, Debug)]
pub struct TrainedSae {
    pub config: SaeConfig,
    pub params: SaeParams,
    pub tracker: DeadLatentTracker,
    pub losses: Vec<f32>,
    /// `(step, mean squared reconstruction error)` on the evaluation cache.
    pub eval_curve: Vec<(usize, f64)>,
}

/// Owns the parameters, Adam state and dead-latent tracker of one run.
pub struct SaeTrainer<'m> {
    pub config: SaeConfig,
    pub params: SaeParams,
    pub tracker: DeadLatentTracker,
    adam: Adam,
    step: usize,
    e2e: Option<(&'m ModelCheckpoint, usize)>,
}

impl<'m> SaeTrainer<'m> {
    pub fn new(config: SaeConfig) -> Result<Self> {
        config.validate()?;
        if config.variant == Variant::E2eTopK {
            return Err(Error::Invalid(
                "e2e_topk needs a model checkpoint, use with_model".into(),
            ));
        }
        Ok(Self::from_params(config, init_params(&config)))
    }

    /// Trainer for any variant; `model` and `layer` are used by `e2e_topk`.
    pub fn with_model(config: SaeConfig, model: &'m ModelCheckpoint, layer: usize) -> Result<Self> {
        config.validate()?;
        if model.config.d_model != config.d {
            return Err(Error::Invalid(format!(
                "model d_model {} != SAE d {}",
                model.config.d_model, config.d
            )));
        }
        let mut t = Self::from_params(config, init_params(&config));
        t.e2e = Some((model, layer));
        Ok(t)
    }

    /// Trainer starting from given parameters, without validation.
    pub fn from_params(config: SaeConfig, params: SaeParams) -> Self {
        let sizes = [
            params.w_enc.len(),
            params.b_enc.len(),
            params.w_dec.len(),
            params.b_dec.len(),
        ];
        Self {
            tracker: DeadLatentTracker::new(params.h(), config.dead_window),
            adam: Adam::new(config.lr, &sizes),
            config,
            params,
            step: 0,
            e2e: None,
        }
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One optimizer step: gradients, Adam, decoder renormalization,
    /// dead-latent bookkeeping.
    pub fn step(&mut self, batch: &Batch) -> Result<StepOutput> {
        let out = batch_grads(&self.params, &self.config, batch, self.e2e)?;
        if !out.loss.is_finite() || !out.grads.all_finite() {
            return Err(Error::Diverged { step: self.step });
        }
        let g = &out.grads;
        let p = &mut self.params;
        self.adam.step(
            &mut [
                p.w_enc.data_mut(),
                p.b_enc.data_mut(),
                p.w_dec.data_mut(),
                p.b_dec.data_mut(),
            ],
            &[&g.w_enc, &g.b_enc, &g.w_dec, &g.b_dec],
        );
        p.normalize_decoder();
        self.tracker.track(&out.fired);
        self.step += 1;
        Ok(out)
    }

    /// Runs `train_steps` steps over `cache`. With `eval`, the mean squared
    /// reconstruction error on it is logged `eval_points` times, evenly
    /// spaced and including the final step.
    pub fn fit(
        mut self,
        cache: &ActivationCache,
        eval: Option<&ActivationCache>,
        eval_points: usize,
    ) -> Result<TrainedSae> {
        if cache.d_model != self.config.d {
            return Err(Error::Invalid(format!(
                "cache d_model {} != SAE d {}",
                cache.d_model, self.config.d
            )));
        }
        if cache.is_empty() {
            return Err(Error::Invalid("training cache is empty".into()));
        }
        let steps = self.config.train_steps;
        let eval_at: Vec<usize> = match eval {
            Some(_) if eval_points > 0 => (1..=eval_points)
                .map(|i| (i * steps).div_ceil(eval_points))
                .collect(),
            _ => vec![],
        };
        let mut losses = Vec::with_capacity(steps);
        let mut eval_curve = Vec::new();
        let mut next_batch = self.batch_source(cache)?;
        for s in 0..steps {
            let batch = next_batch();
            losses.push(self.step(&batch)?.loss);
            if eval_at.contains(&(s + 1)) {
                if let Some(ev) = eval {
                    eval_curve.push((s + 1, reconstruction_mse(&self.params, &self.config, ev)));
                }
            }
            if s % 500 == 0 || s + 1 == steps {
                log::debug!(
                    "{} k={} step {s}: loss {:.5}",
                    self.config.variant,
                    self.config.k,
                    losses[s]
                );
            }
        }
        Ok(TrainedSae {
            config: self.config,
            params: self.params,
            tracker: self.tracker,
            losses,
            eval_curve,
        })
    }

    fn batch_source<'c>(
        &self,
        cache: &'c ActivationCache,
    ) -> Result<Box<dyn FnMut() -> Batch + 'c>> {
        let bs = self.config.batch_size;
        let seed = self.config.seed;
        if self.config.variant == Variant::E2eTopK {
            let site = cache.hook.site;
            if site != Site::ResidPost {
                return Err(Error::Invalid(format!(
                    "e2e_topk needs a resid_post cache, got {site}"
                )));
            }
            let spans = cache.sequences();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            let mut order: Vec<usize> = Vec::new();
            return Ok(Box::new(move || {
                let mut picked = Vec::with_capacity(bs);
                while picked.len() < bs.min(spans.len()) {
                    if order.is_empty() {
                        order = (0..spans.len()).collect();
                        order.shuffle(&mut rng);
                        order.reverse();
                    }
                    picked.push(&spans[order.pop().unwrap()]);
                }
                Batch::gather_sequences(cache, &picked)
            }));
        }
        let mut it = cache.batches(bs, seed ^ 0x9E37_79B9_7F4A_7C15)?;
        Ok(Box::new(move || {
            Batch::gather(cache, &it.next().expect("endless stream"))
        }))
    }
}

/// Mean squared reconstruction error over a cache.
pub fn reconstruction_mse(params: &SaeParams, config: &SaeConfig, cache: &ActivationCache) -> f64 {
    let n = cache.len();
    let chunk = 1024;
    let mut total = 0.0f64;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let d = cache.d_model;
        let xs = &cache.xs()[start * d..end * d];
        let gs = &cache.gs()[start * d..end * d];
        let (_, xhat) = reconstruct_batch(params, config, xs, gs, end - start);
        total += xhat
            .iter()
            .zip(xs)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>();
    }
    total / n.max(1) as f64
}
