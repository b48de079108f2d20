//! Sparse autoencoders over cached activations: parameters, the four
//! activation variants, selection, and dead-latent tracking.

mod io;
mod train;


use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};

pub use io::SaeCheckpoint;
pub use train::{
    batch_grads, reconstruction_mse, Batch, SaeGrads, SaeTrainer, StepOutput, TrainedSae,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    ReluL1,
    TopK,
    Gsae,
    E2eTopK,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::ReluL1,
        Variant::TopK,
        Variant::Gsae,
        Variant::E2eTopK,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ReluL1 => "relu_l1",
            Variant::TopK => "topk",
            Variant::Gsae => "gsae",
            Variant::E2eTopK => "e2e_topk",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    /// Variants that keep exactly `k` latents per input.
    pub fn is_topk_family(self) -> bool {
        !matches!(self, Variant::ReluL1)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown variant {s:?}, expected relu_l1|topk|gsae|e2e_topk"
                ))
            })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaeConfig {
    pub d: usize,
    pub h: usize,
    pub k: usize,
    pub beta: f32,
    pub variant: Variant,
    pub l1_coefficient: f32,
    pub lr: f32,
    /// Records per batch; for `e2e_topk`, whole sequences per batch.
    pub batch_size: usize,
    pub train_steps: usize,
    pub seed: u64,
    pub dead_window: u32,
}

impl SaeConfig {
    pub fn new(variant: Variant, d: usize, expansion: usize, k: usize) -> Self {
        Self {
            d,
            h: d * expansion,
            k,
            beta: 1e5,
            variant,
            l1_coefficient: 1e-3,
            lr: 1e-3,
            batch_size: 64,
            train_steps: 1000,
            seed: 0,
            dead_window: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.d == 0 || self.h <= self.d {
            return bad(format!(
                "dictionary size h={} must exceed d={}",
                self.h, self.d
            ));
        }
        if self.variant.is_topk_family() && !(1..=self.h).contains(&self.k) {
            return bad(format!("k={} must be in 1..={}", self.k, self.h));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta={} must be finite and >= 0", self.beta));
        }
        if !(self.l1_coefficient >= 0.0) {
            return bad("l1_coefficient must be >= 0".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr={} must be positive", self.lr));
        }
        if self.batch_size == 0 || self.dead_window == 0 {
            return bad("batch_size and dead_window must be >= 1".into());
        }
        Ok(())
    }
}

/// `w_enc` is `h x d`, `w_dec` is `d x h` (one dictionary direction per
/// column).
#[derive(Clone, Debug, PartialEq)]
pub struct SaeParams {
    pub w_enc: Tensor<f32>,
    pub b_enc: Tensor<f32>,
    pub w_dec: Tensor<f32>,
    pub b_dec: Tensor<f32>,
}

impl SaeParams {
    pub fn d(&self) -> usize {
        self.b_dec.len()
    }

    pub fn h(&self) -> usize {
        self.b_enc.len()
    }

    /// Column `i` of the decoder.
    pub fn dec_column(&self, i: usize) -> Vec<f32> {
        let h = self.h();
        self.w_dec
            .data()
            .iter()
            .skip(i)
            .step_by(h)
            .copied()
            .collect()
    }

    pub fn set_dec_column(&mut self, i: usize, col: &[f32]) {
        let h = self.h();
        for (r, &v) in col.iter().enumerate() {
            self.w_dec.data_mut()[r * h + i] = v;
        }
    }

    /// Scales every nonzero decoder column to unit L2 norm.
    pub fn normalize_decoder(&mut self) {
        let (d, h) = (self.d(), self.h());
        let mut norms = vec![0.0f64; h];
        let w = self.w_dec.data_mut();
        for r in 0..d {
            for (n, &v) in norms.iter_mut().zip(&w[r * h..(r + 1) * h]) {
                *n += (v as f64) * (v as f64);
            }
        }
        let inv: Vec<f32> = norms
            .iter()
            .map(|&n| {
                if n > 0.0 {
                    (1.0 / n.sqrt()) as f32
                } else {
                    1.0
                }
            })
            .collect();
        for r in 0..d {
            for (v, &s) in w[r * h..(r + 1) * h].iter_mut().zip(&inv) {
                *v *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        [&self.w_enc, &self.b_enc, &self.w_dec, &self.b_dec]
            .iter()
            .all(|t| t.all_finite())
    }
}

/// Gaussian decoder columns scaled to unit norm, `W_enc = W_decᵀ`, zero
/// biases.
pub fn init_params(config: &SaeConfig) -> SaeParams {
    let (d, h) = (config.d, config.h);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let raw: Vec<f32> = (0..d * h)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut p = SaeParams {
        w_enc: Tensor::zeros(&[h, d]),
        b_enc: Tensor::zeros(&[h]),
        w_dec: Tensor::new(vec![d, h], raw).expect("d*h values"),
        b_dec: Tensor::zeros(&[d]),
    };
    p.normalize_decoder();
    let w_dec = p.w_dec.data().to_vec();
    let w_enc = p.w_enc.data_mut();
    for r in 0..d {
        for c in 0..h {
            w_enc[c * d + r] = w_dec[r * h + c];
        }
    }
    p
}

fn check_len(op: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape {
            op,
            lhs: vec![got],
            rhs: vec![want],
        });
    }
    Ok(())
}

/// `z = W_enc (x - b_dec) + b_enc`.
pub fn encode_pre(params: &SaeParams, x: &[f32]) -> Result<Vec<f32>> {
    check_len("encode_pre", x.len(), params.d())?;
    Ok(encode_pre_batch(params, x, 1))
}

/// Pre-activations for `n` stacked inputs (`n x d` in, `n x h` out).
pub fn encode_pre_batch(params: &SaeParams, xs: &[f32], n: usize) -> Vec<f32> {
    let (d, h) = (params.d(), params.h());
    assert_eq!(xs.len(), n * d, "encode_pre_batch: input length");
    let b_dec = params.b_dec.data();
    let centered: Vec<f32> = xs
        .chunks_exact(d)
        .flat_map(|x| x.iter().zip(b_dec).map(|(a, b)| a - b))
        .collect();
    let mut z: Vec<f32> = (0..n)
        .flat_map(|_| params.b_enc.data().iter().copied())
        .collect();
    f32::gemm(
        n,
        d,
        h,
        1.0,
        &centered,
        (d, 1),
        params.w_enc.data(),
        (1, d),
        1.0,
        &mut z,
        (h, 1),
    );
    z
}

/// `|W_decᵀ g|` for `n` stacked gradients (`n x d` in, `n x h` out).
pub fn attribution_batch(params: &SaeParams, gs: &[f32], n: usize) -> Vec<f32> {
    let (d, h) = (params.d(), params.h());
    assert_eq!(gs.len(), n * d, "attribution_batch: input length");
    let mut a = vec![0.0f32; n * h];
    f32::gemm(
        n,
        d,
        h,
        1.0,
        gs,
        (d, 1),
        params.w_dec.data(),
        (h, 1),
        0.0,
        &mut a,
        (h, 1),
    );
    a.iter_mut().for_each(|v| *v = v.abs());
    a
}

/// The `beta` at which `beta * |W_decᵀ g|` averages `target` over the first
/// `max_records` gradients, for `params` (normally a fresh initialization).
pub fn calibrate_beta(
    params: &SaeParams,
    gs: &[f32],
    max_records: usize,
    target: f64,
) -> Result<f32> {
    let d = params.d();
    let n = (gs.len() / d).min(max_records);
    let a = attribution_batch(params, &gs[..n * d], n);
    let mean = a.iter().map(|&v| v as f64).sum::<f64>() / a.len().max(1) as f64;
    if !(mean > 0.0 && mean.is_finite()) || !(target >= 0.0) {
        return Err(Error::Invalid(
            "cannot calibrate beta: gradients are all zero or not finite".into(),
        ));
    }
    Ok((target / mean) as f32)
}

/// Chosen latents in rank order, with the score each was ranked by.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMask {
    pub indices: Vec<usize>,
    pub scores: Vec<f32>,
}

impl SelectionMask {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.contains(&i)
    }
}

fn rank(scores: &[f32], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// The `k` highest scores, ties going to the lower index.
pub fn top_k(scores: &[f32], k: usize) -> SelectionMask {
    let k = k.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k == 0 {
        return SelectionMask {
            indices: vec![],
            scores: vec![],
        };
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank(scores, a, b));
    let s = idx.iter().map(|&i| scores[i]).collect();
    SelectionMask {
        indices: idx,
        scores: s,
    }
}

pub fn select_topk(z: &[f32], k: usize) -> SelectionMask {
    top_k(z, k)
}

/// Score used by the gradient-aware selection: `z + β·z·|a|` with
/// `a = W_decᵀ g`.
pub fn gradient_scores(z: &[f32], attribution: &[f32], beta: f32) -> Vec<f32> {
    z.iter()
        .zip(attribution)
        .map(|(&zi, &ai)| zi + (beta * zi) * ai.abs())
        .collect()
}

/// Top-k of `z + β·z·|W_decᵀ g|`.
pub fn select_gradient_topk(
    z: &[f32],
    g: &[f32],
    params: &SaeParams,
    k: usize,
    beta: f32,
) -> Result<SelectionMask> {
    check_len("select_gradient_topk", g.len(), params.d())?;
    check_len("select_gradient_topk", z.len(), params.h())?;
    if let Some(j) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient component {j}")));
    }
    let a = attribution_batch(params, g, 1);
    Ok(top_k(&gradient_scores(z, &a, beta), k))
}

/// Keeps `z_i` for selected latents, zero elsewhere.
pub fn apply_mask(z: &[f32], mask: &SelectionMask) -> Vec<f32> {
    let mut y = vec![0.0; z.len()];
    for &i in &mask.indices {
        y[i] = z[i];
    }
    y
}

/// `x̂ = W_dec y + b_dec`.
pub fn decode(params: &SaeParams, y: &[f32]) -> Result<Vec<f32>> {
    check_len("decode", y.len(), params.h())?;
    let h = params.h();
    let mut out = params.b_dec.data().to_vec();
    f32::gemm(
        params.d(),
        h,
        1,
        1.0,
        params.w_dec.data(),
        (h, 1),
        y,
        (1, 1),
        1.0,
        &mut out,
        (1, 1),
    );
    Ok(out)
}

/// `b_dec + Σ y_i W_dec[:, i]` over the listed latents.
pub fn decode_sparse(params: &SaeParams, active: &[(usize, f32)]) -> Vec<f32> {
    let h = params.h();
    let w = params.w_dec.data();
    let mut out = params.b_dec.data().to_vec();
    for &(i, v) in active {
        for (r, o) in out.iter_mut().enumerate() {
            *o += v * w[r * h + i];
        }
    }
    out
}

/// Active latents of one record per variant, as `(index, value)` pairs.
/// `z` and `attribution` are the record's rows; the latter is only read by
/// `gsae`.
pub fn activate(config: &SaeConfig, z: &[f32], attribution: Option<&[f32]>) -> Vec<(usize, f32)> {
    match config.variant {
        Variant::ReluL1 => z
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, &v)| (i, v))
            .collect(),
        Variant::TopK | Variant::E2eTopK => top_k(z, config.k)
            .indices
            .iter()
            .map(|&i| (i, z[i]))
            .collect(),
        Variant::Gsae => {
            let a = attribution.expect("gsae needs attribution");
            top_k(&gradient_scores(z, a, config.beta), config.k)
                .indices
                .iter()
                .map(|&i| (i, z[i]))
                .collect()
        }
    }
}

/// Active latents and reconstructions for `n` stacked records.
pub fn reconstruct_batch(
    params: &SaeParams,
    config: &SaeConfig,
    xs: &[f32],
    gs: &[f32],
    n: usize,
) -> (Vec<Vec<(usize, f32)>>, Vec<f32>) {
    let h = params.h();
    let z = encode_pre_batch(params, xs, n);
    let a = (config.variant == Variant::Gsae).then(|| attribution_batch(params, gs, n));
    let mut xhat = Vec::with_capacity(xs.len());
    let mut actives = Vec::with_capacity(n);
    for r in 0..n {
        let act = activate(
            config,
            &z[r * h..(r + 1) * h],
            a.as_ref().map(|a| &a[r * h..(r + 1) * h]),
        );
        xhat.extend(decode_sparse(params, &act));
        actives.push(act);
    }
    (actives, xhat)
}

/// Consecutive-silence counters per latent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeadLatentTracker {
    pub window: u32,
    pub consecutive_inactive: Vec<u32>,
    pub dead_flags: Vec<bool>,
    pub batches_seen: u64,
}

impl DeadLatentTracker {
    pub fn new(h: usize, window: u32) -> Self {
        Self {
            window,
            consecutive_inactive: vec![0; h],
            dead_flags: vec![false; h],
            batches_seen: 0,
        }
    }

    pub fn track(&mut self, fired: &[bool]) {
        assert_eq!(
            fired.len(),
            self.consecutive_inactive.len(),
            "tracker: latent count"
        );
        for ((c, flag), &f) in self
            .consecutive_inactive
            .iter_mut()
            .zip(&mut self.dead_flags)
            .zip(fired)
        {
            *c = if f { 0 } else { c.saturating_add(1) };
            *flag = *c >= self.window;
        }
        self.batches_seen += 1;
    }

    pub fn dead_count(&self) -> usize {
        self.dead_flags.iter().filter(|&&d| d).count()
    }

    pub fn alive(&self) -> impl Iterator<Item = usize> + '_ {
        self.dead_flags
            .iter()
            .enumerate()
            .filter(|(_, &d)| !d)
            .map(|(i, _)| i)
    }
}

pub fn track_dead(tracker: &mut DeadLatentTracker, fired: &[bool]) {
    tracker.track(fired);
}
