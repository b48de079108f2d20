use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{next_token_targets, ModelCheckpoint, ModelConfig, Transformer};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::optim::Adam;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Linear warmup steps; the rate then follows a cosine down to 10%.
    pub warmup: usize,
    /// Global gradient-norm clip, 0 disables.
    pub clip: f32,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            lr: 3e-3,
            warmup: 50,
            clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct LmTrainReport {
    pub losses: Vec<f32>,
}

impl LmTrainReport {
    /// Mean of the last `n` logged losses.
    pub fn tail_mean(&self, n: usize) -> Option<f32> {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().sum::<f32>() / tail.len() as f32)
    }
}

fn lr_at(cfg: &LmTrainConfig, step: usize) -> f32 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f32 / cfg.warmup as f32;
    }
    let span = (cfg.steps - cfg.warmup).max(1) as f32;
    let t = (step - cfg.warmup) as f32 / span;
    cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f32::consts::PI * t).cos()))
}

/// Window of `len` tokens starting at `start`, wrapping around the stream.
fn window(tokens: &[u32], start: usize, len: usize) -> Vec<u32> {
    (0..len)
        .map(|i| tokens[(start + i) % tokens.len()])
        .collect()
}

/// Trains a fresh model on random context windows of `tokens`.
pub fn train_lm(
    tokens: &[u32],
    config: ModelConfig,
    cfg: &LmTrainConfig,
) -> Result<(ModelCheckpoint, LmTrainReport)> {
    let mut model = Transformer::<f32>::init(config)?;
    let mut report = LmTrainReport::default();
    if cfg.steps == 0 {
        return Ok((model, report));
    }
    if tokens.len() < 2 {
        return Err(Error::Invalid("corpus needs at least 2 tokens".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be >= 1".into()));
    }
    let len = config.context_length;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(cfg.lr, &sizes);

    for step in 0..cfg.steps {
        let seqs: Vec<Vec<u32>> = (0..cfg.batch_size)
            .map(|_| {
                let start = if tokens.len() > len {
                    rng.random_range(0..=tokens.len() - len)
                } else {
                    rng.random_range(0..tokens.len())
                };
                window(tokens, start, len)
            })
            .collect();
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let targets: Vec<Option<usize>> = seqs.iter().flat_map(|s| next_token_targets(s)).collect();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let x = model.embed(&mut tape, &bound, &refs)?;
        let logits = model.run_from(&mut tape, &bound, 0, x, refs.len(), len)?;
        let ce = tape.cross_entropy(logits, &targets)?;
        let loss = tape.value(ce).item();
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        report.losses.push(loss);
        let vars = bound.all.clone();
        let mut grads = tape.backward(ce)?;
        let mut gbufs: Vec<Vec<f32>> = vars
            .iter()
            .zip(&sizes)
            .map(|(&v, &n)| grads.take(v).unwrap_or_else(|| vec![0.0; n]))
            .collect();
        if cfg.clip > 0.0 {
            let norm = gbufs
                .iter()
                .flatten()
                .map(|g| (*g as f64) * (*g as f64))
                .sum::<f64>()
                .sqrt() as f32;
            if !norm.is_finite() {
                return Err(Error::Diverged { step });
            }
            if norm > cfg.clip {
                let s = cfg.clip / norm;
                gbufs.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        adam.lr = lr_at(cfg, step);
        let grefs: Vec<&[f32]> = gbufs.iter().map(Vec::as_slice).collect();
        let mut prefs: Vec<&mut [f32]> = model
            .params_mut()
            .into_iter()
            .map(|t| t.data_mut())
            .collect();
        adam.step(&mut prefs, &grefs);
        if step % 50 == 0 || step + 1 == cfg.steps {
            log::info!("train-lm step {step}: loss {loss:.4}");
        }
    }
    Ok((model, report))
}
