//! Reconstruction and downstream-loss metrics, sweeps, and latent
//! profiles (density, decoder similarity, similarity-bucket derivatives).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};
use crate::sae::{
    reconstruct_batch, DeadLatentTracker, SaeCheckpoint, SaeConfig, SaeParams, SaeTrainer, Variant,
};
use crate::store::ActivationCache;
use crate::transformer::{ModelCheckpoint, Site};

/// `‖x − x̂‖ / ‖x‖`.
pub fn nmse(x: &[f32], xhat: &[f32]) -> Result<f64> {
    if x.len() != xhat.len() {
        return Err(Error::Shape {
            op: "nmse",
            lhs: vec![x.len()],
            rhs: vec![xhat.len()],
        });
    }
    let nx = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    if nx == 0.0 {
        return Err(Error::Invalid("nmse is undefined for x = 0".into()));
    }
    let ne = x
        .iter()
        .zip(xhat)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(ne / nx)
}

/// `(L(x̂) − L(x)) / L(x)` for one sequence spliced in at `layer`.
pub fn loss_added<T: Real>(
    model: &crate::transformer::Transformer<T>,
    layer: usize,
    x: &Tensor<T>,
    xhat: &Tensor<T>,
    targets: &[Option<usize>],
) -> Result<f64> {
    let base = model
        .loss_from_resid(layer, x, targets)?
        .to_f64()
        .unwrap_or(f64::NAN);
    let recon = model
        .loss_from_resid(layer, xhat, targets)?
        .to_f64()
        .unwrap_or(f64::NAN);
    if !base.is_finite() || !recon.is_finite() {
        return Err(Error::NonFinite(format!("loss {base} / {recon}")));
    }
    if base <= 0.0 {
        return Err(Error::Invalid("loss_added needs L(x) > 0".into()));
    }
    Ok((recon - base) / base)
}

pub fn dead_fraction(tracker: &DeadLatentTracker) -> f64 {
    tracker.dead_count() as f64 / tracker.dead_flags.len().max(1) as f64
}

/// One evaluated SAE.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub variant: Variant,
    pub k: usize,
    pub h: usize,
    pub beta: f32,
    pub seed: u64,
    pub nmse: f64,
    pub loss_added: f64,
    pub dead_fraction: f64,
    pub n_eval: usize,
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl MetricRow {
    pub const CSV_HEADER: &'static str =
        "variant,k,h,beta,seed,nmse,loss_added,dead_fraction,n_eval";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.k,
            self.h,
            self.beta,
            self.seed,
            self.nmse,
            self.loss_added,
            self.dead_fraction,
            self.n_eval
        )
    }
}

pub fn metric_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(MetricRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Mean per-record NMSE over a cache, skipping records with `x = 0`.
pub fn mean_nmse(params: &SaeParams, config: &SaeConfig, cache: &ActivationCache) -> f64 {
    let d = cache.d_model;
    let (mut total, mut n) = (0.0, 0usize);
    for start in (0..cache.len()).step_by(1024) {
        let end = (start + 1024).min(cache.len());
        let xs = &cache.xs()[start * d..end * d];
        let (_, xhat) = reconstruct_batch(
            params,
            config,
            xs,
            &cache.gs()[start * d..end * d],
            end - start,
        );
        for r in 0..end - start {
            if let Ok(v) = nmse(&xs[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]) {
                total += v;
                n += 1;
            }
        }
    }
    total / n.max(1) as f64
}

/// Mean `L_added` over up to `max_sequences` sequences of a `resid_post`
/// cache, splicing each full reconstructed sequence in.
pub fn mean_loss_added(
    model: &ModelCheckpoint,
    params: &SaeParams,
    config: &SaeConfig,
    cache: &ActivationCache,
    max_sequences: usize,
) -> Result<(f64, usize)> {
    if cache.hook.site != Site::ResidPost {
        return Err(Error::Invalid("loss_added needs a resid_post cache".into()));
    }
    let layer = cache.hook.layer;
    let (mut total, mut n) = (0.0, 0usize);
    for span in cache.sequences().iter().take(max_sequences) {
        let targets = cache.targets(span);
        if targets.iter().all(Option::is_none) {
            continue;
        }
        let x = cache.stack_x(span);
        let len = span.records.len();
        let gs: Vec<f32> = span
            .records
            .iter()
            .flat_map(|&i| cache.get(i).g.iter().copied())
            .collect();
        let (_, xhat) = reconstruct_batch(params, config, x.data(), &gs, len);
        let xhat = Tensor::new(vec![len, cache.d_model], xhat)?;
        total += loss_added(model, layer, &x, &xhat, &targets)
            .map_err(|e| Error::NonFinite(format!("sequence {}: {e}", span.sequence_id)))?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Invalid(
            "evaluation cache has no sequence with a target".into(),
        ));
    }
    Ok((total / n as f64, n))
}

/// Metrics of a trained SAE on a held-out cache.
pub fn evaluate(
    model: &ModelCheckpoint,
    sae: &SaeCheckpoint,
    eval: &ActivationCache,
    max_sequences: usize,
) -> Result<MetricRow> {
    let c = &sae.config;
    let (la, _) = mean_loss_added(model, &sae.params, c, eval, max_sequences)?;
    Ok(MetricRow {
        variant: c.variant,
        k: c.k,
        h: c.h,
        beta: c.beta,
        seed: c.seed,
        nmse: mean_nmse(&sae.params, c, eval),
        loss_added: la,
        dead_fraction: sae.tracker.as_ref().map_or(0.0, dead_fraction),
        n_eval: eval.len(),
    })
}

/// Grid for [`pareto_sweep`]; every cell shares the base config otherwise.
#[derive(Clone, Debug)]
pub struct SweepGrid {
    pub variants: Vec<Variant>,
    pub ks: Vec<usize>,
    pub expansions: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOutcome {
    pub rows: Vec<MetricRow>,
    pub saes: Vec<SaeCheckpoint>,
    /// `(cell label, error)` for runs that failed.
    pub failures: Vec<(String, String)>,
}

/// Trains and evaluates one SAE per grid cell with identical budgets.
pub fn pareto_sweep(
    model: &ModelCheckpoint,
    train: &ActivationCache,
    eval: &ActivationCache,
    base: &SaeConfig,
    grid: &SweepGrid,
    max_eval_sequences: usize,
) -> Result<SweepOutcome> {
    if grid.variants.is_empty()
        || grid.ks.is_empty()
        || grid.expansions.is_empty()
        || grid.seeds.is_empty()
    {
        return Err(Error::Invalid("sweep grid has an empty axis".into()));
    }
    let mut out = SweepOutcome::default();
    for &variant in &grid.variants {
        for &e in &grid.expansions {
            for &k in &grid.ks {
                for &seed in &grid.seeds {
                    let c = SaeConfig {
                        variant,
                        k,
                        h: base.d * e,
                        seed,
                        ..*base
                    };
                    let label = format!("{variant} k={k} h={} seed={seed}", c.h);
                    let run = || -> Result<(MetricRow, SaeCheckpoint)> {
                        let trained = SaeTrainer::with_model(c, model, train.hook.layer)?
                            .fit(train, None, 0)?;
                        let ck = SaeCheckpoint::from(trained);
                        Ok((evaluate(model, &ck, eval, max_eval_sequences)?, ck))
                    };
                    match run() {
                        Ok((row, ck)) => {
                            log::info!(
                                "{label}: nmse {:.4} loss_added {:.4} dead {:.3}",
                                row.nmse,
                                row.loss_added,
                                row.dead_fraction
                            );
                            out.rows.push(row);
                            out.saes.push(ck);
                        }
                        Err(e) => {
                            log::warn!("{label} failed: {e}");
                            out.failures.push((label, e.to_string()));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-latent firing frequency over an evaluation cache.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityProfile {
    pub frequencies: Vec<f64>,
    pub n_tokens: usize,
}

/// A latent fires on a record when it is active with a nonzero value.
pub fn activation_density(
    params: &SaeParams,
    config: &SaeConfig,
    cache: &ActivationCache,
) -> Result<DensityProfile> {
    if cache.is_empty() {
        return Err(Error::Invalid("density needs a nonempty cache".into()));
    }
    let d = cache.d_model;
    let mut counts = vec![0u64; params.h()];
    for start in (0..cache.len()).step_by(1024) {
        let end = (start + 1024).min(cache.len());
        let (actives, _) = reconstruct_batch(
            params,
            config,
            &cache.xs()[start * d..end * d],
            &cache.gs()[start * d..end * d],
            end - start,
        );
        for &(i, v) in actives.iter().flatten() {
            if v != 0.0 {
                counts[i] += 1;
            }
        }
    }
    let n = cache.len();
    Ok(DensityProfile {
        frequencies: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        n_tokens: n,
    })
}

/// Cosine similarity of each decoder column to its nearest other column.
/// Zero-norm columns have no value and are listed in `excluded`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityProfile {
    pub values: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

impl SimilarityProfile {
    pub fn defined(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }
}

pub fn decoder_similarity(params: &SaeParams) -> Result<SimilarityProfile> {
    let (d, h) = (params.d(), params.h());
    if h < 2 {
        return Err(Error::Invalid("decoder similarity needs h >= 2".into()));
    }
    // unit columns as rows of an h x d matrix, in f64
    let w = params.w_dec.data();
    let mut unit = vec![0.0f64; h * d];
    let mut excluded = Vec::new();
    for i in 0..h {
        let norm = (0..d)
            .map(|r| (w[r * h + i] as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            excluded.push(i);
            continue;
        }
        for r in 0..d {
            unit[i * d + r] = w[r * h + i] as f64 / norm;
        }
    }
    if !excluded.is_empty() {
        log::warn!(
            "decoder similarity: {} zero-norm columns excluded",
            excluded.len()
        );
    }
    let mut gram = vec![0.0f64; h * h];
    f64::gemm(
        h,
        d,
        h,
        1.0,
        &unit,
        (d, 1),
        &unit,
        (1, d),
        0.0,
        &mut gram,
        (h, 1),
    );
    let values = (0..h)
        .map(|i| {
            if excluded.contains(&i) {
                return None;
            }
            (0..h)
                .filter(|&j| j != i && !excluded.contains(&j))
                .map(|j| gram[i * h + j].clamp(-1.0, 1.0))
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        })
        .collect();
    Ok(SimilarityProfile { values, excluded })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bucket {
    Left,
    Middle,
    Right,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Left, Bucket::Middle, Bucket::Right];

    pub fn name(self) -> &'static str {
        match self {
            Bucket::Left => "left",
            Bucket::Middle => "middle",
            Bucket::Right => "right",
        }
    }

    /// Quantile range of the similarity distribution covered by the bucket.
    pub fn range(self) -> (f64, f64) {
        match self {
            Bucket::Left => (0.0, 0.1),
            Bucket::Middle => (0.45, 0.55),
            Bucket::Right => (0.9, 1.0),
        }
    }
}

impl std::str::FromStr for Bucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown bucket {s:?}")))
    }
}

/// Latents whose similarity falls in the bucket's quantile range, ordered
/// by similarity.
pub fn bucket_latents(profile: &SimilarityProfile, bucket: Bucket) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = profile
        .values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i, v)))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let n = order.len();
    let (lo, hi) = bucket.range();
    let (a, b) = (
        (lo * n as f64 + 1e-9).floor() as usize,
        ((hi * n as f64 - 1e-9).ceil() as usize).min(n),
    );
    order[a..b.max(a)].iter().map(|&(i, _)| i).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketDerivative {
    pub bucket: Bucket,
    pub mean_abs: f64,
    pub n_latents: usize,
    pub n_tokens: usize,
}

/// Mean over sampled latents and records of `|g · W_dec^i|` with unit
/// columns. Records with a zero gradient are not sampled.
pub fn similarity_bucket_derivatives(
    params: &SaeParams,
    profile: &SimilarityProfile,
    cache: &ActivationCache,
    bucket: Bucket,
    n_latents: usize,
    n_tokens: usize,
    seed: u64,
) -> Result<BucketDerivative> {
    let region = bucket_latents(profile, bucket);
    if region.is_empty() {
        return Err(Error::Invalid(format!("{} bucket is empty", bucket.name())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latents: Vec<usize> = if region.len() <= n_latents {
        if region.len() < n_latents {
            log::warn!(
                "{} bucket holds {} latents, fewer than {n_latents}; using all",
                bucket.name(),
                region.len()
            );
        }
        region
    } else {
        sample(&mut rng, region.len(), n_latents)
            .into_iter()
            .map(|j| region[j])
            .collect()
    };
    let usable: Vec<usize> = (0..cache.len())
        .filter(|&i| !cache.get(i).zero_grad())
        .collect();
    if usable.is_empty() {
        return Err(Error::Invalid(
            "cache has no record with a nonzero gradient".into(),
        ));
    }
    let records: Vec<usize> = if usable.len() <= n_tokens {
        usable
    } else {
        sample(&mut rng, usable.len(), n_tokens)
            .into_iter()
            .map(|j| usable[j])
            .collect()
    };
    let cols: Vec<Vec<f64>> = latents
        .iter()
        .map(|&i| {
            let c = params.dec_column(i);
            let n = c.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            c.iter().map(|&v| v as f64 / n).collect()
        })
        .collect();
    let mut total = 0.0;
    for &r in &records {
        let g = cache.get(r).g;
        for c in &cols {
            total += c
                .iter()
                .zip(g)
                .map(|(a, &b)| a * b as f64)
                .sum::<f64>()
                .abs();
        }
    }
    Ok(BucketDerivative {
        bucket,
        mean_abs: total / (records.len() * cols.len()) as f64,
        n_latents: cols.len(),
        n_tokens: records.len(),
    })
}

/// Summary statistics of a profile.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileSummary {
    pub name: String,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub p10: f64,
    pub p25: f64,
    pub p75: f64,
    pub p90: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(name: &str, values: &[f64]) -> ProfileSummary {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    ProfileSummary {
        name: name.to_string(),
        n: s.len(),
        mean: s.iter().sum::<f64>() / s.len().max(1) as f64,
        median: quantile(&s, 0.5),
        p10: quantile(&s, 0.1),
        p25: quantile(&s, 0.25),
        p75: quantile(&s, 0.75),
        p90: quantile(&s, 0.9),
    }
}

/// Values sorted ascending, one per line.
pub fn sorted_lines(values: &[f64]) -> String {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    s.iter().map(|v| format!("{v}\n")).collect()
}

pub fn summary_json_line(summary: &ProfileSummary) -> String {
    serde_json::to_string(summary).expect("plain struct")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::init_params;
    use crate::store::ActivationRecord;
    use crate::transformer::{HookPoint, ModelConfig};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn nmse_hand_values() {
        assert_eq!(nmse(&[3., 4.], &[3., 4.]).unwrap(), 0.0);
        assert_eq!(nmse(&[3., 4.], &[0., 0.]).unwrap(), 1.0);
        assert!((nmse(&[3., 4.], &[3., 0.]).unwrap() - 0.8).abs() < 1e-12);
        assert!(nmse(&[0., 0.], &[1., 0.]).is_err());
    }

    proptest! {
        #[test]
        fn nmse_doubles_with_error(x in prop::collection::vec(-5f32..5.0, 4), e in prop::collection::vec(-1f32..1.0, 4)) {
            prop_assume!(x.iter().any(|v| v.abs() > 0.1));
            // a power-of-two factor keeps x + 2e exact enough for the ratio
            let a: Vec<f32> = x.iter().zip(&e).map(|(a, b)| a + b).collect();
            let b: Vec<f32> = x.iter().zip(&e).map(|(a, b)| a + 2.0 * b).collect();
            let (na, nb) = (nmse(&x, &a).unwrap(), nmse(&x, &b).unwrap());
            prop_assert!((nb - 2.0 * na).abs() <= 1e-5 * (1.0 + nb));
        }

        #[test]
        fn similarity_permutes_with_columns(seed in any::<u64>()) {
            let c = SaeConfig { seed, h: 12, ..SaeConfig::new(Variant::TopK, 4, 1, 2) };
            let p = init_params(&c);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..12).collect();
            rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
            let mut q = p.clone();
            for (new, &old) in perm.iter().enumerate() {
                q.set_dec_column(new, &p.dec_column(old));
            }
            let a = decoder_similarity(&p).unwrap().values;
            let b = decoder_similarity(&q).unwrap().values;
            for (new, &old) in perm.iter().enumerate() {
                prop_assert!((a[old].unwrap() - b[new].unwrap()).abs() < 1e-12);
            }
        }
    }

    fn tiny_model() -> ModelCheckpoint {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            vocab_size: 16,
            context_length: 8,
            seed: 1,
        };
        let mut m = ModelCheckpoint::init(cfg).unwrap();
        for (i, v) in m.w_u.data_mut().iter_mut().enumerate() {
            *v = ((i * 29 % 17) as f32 - 8.0) * 0.1;
        }
        m
    }

    #[test]
    fn loss_added_identity_and_average() {
        let m = tiny_model();
        let toks = [1u32, 4, 2, 8, 5, 7];
        let targets = crate::transformer::next_token_targets(&toks);
        let x = m.forward_full(&toks).unwrap().resid_post[0].clone();
        assert_eq!(loss_added(&m, 0, &x, &x, &targets).unwrap(), 0.0);
        let degraded = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| v * 0.3).collect(),
        )
        .unwrap();
        let la = loss_added(&m, 0, &x, &degraded, &targets).unwrap();
        let mean = (0.0 + la) / 2.0;
        assert!(mean > 0.0f64.min(la) && mean < 0.0f64.max(la));
    }

    #[test]
    fn bias_only_reconstruction_adds_loss() {
        let m = tiny_model();
        let toks = [1u32, 4, 2, 8, 5, 7, 3, 3];
        let targets = crate::transformer::next_token_targets(&toks);
        let x = m.forward_full(&toks).unwrap().resid_post[0].clone();
        let mean: Vec<f32> = (0..8)
            .map(|j| (0..8).map(|r| x.row(r)[j]).sum::<f32>() / 8.0)
            .collect();
        let xhat =
            Tensor::new(vec![8, 8], mean.iter().cycle().take(64).copied().collect()).unwrap();
        let direct = {
            let l0 = m.loss_from_resid(0, &x, &targets).unwrap() as f64;
            let l1 = m.loss_from_resid(0, &xhat, &targets).unwrap() as f64;
            (l1 - l0) / l0
        };
        let la = loss_added(&m, 0, &x, &xhat, &targets).unwrap();
        assert_eq!(la, direct);
        assert!(la > 0.0);
    }

    #[test]
    fn dead_fraction_extremes() {
        let mut t = DeadLatentTracker::new(4, 5);
        t.track(&[true; 4]);
        assert_eq!(dead_fraction(&t), 0.0);
        let mut never = DeadLatentTracker::new(4, 5);
        for _ in 0..5 {
            never.track(&[false; 4]);
        }
        assert_eq!(dead_fraction(&never), 1.0);
    }

    fn random_cache(d: usize, n: usize, seed: u64) -> ActivationCache {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = ActivationCache::new(d, HookPoint::resid_post(0), [0; 32]);
        for s in 0..n {
            let x = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let g = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            c.push(&ActivationRecord {
                x,
                g,
                token_id: rng.random_range(0..16),
                position: 0,
                sequence_id: s as u32,
            })
            .unwrap();
        }
        c
    }

    #[test]
    fn density_counting_identity() {
        let c = SaeConfig::new(Variant::Gsae, 6, 4, 5);
        let cache = random_cache(6, 300, 2);
        let p = init_params(&SaeConfig { beta: 1.0, ..c });
        let prof = activation_density(&p, &c, &cache).unwrap();
        let total: f64 = prof.frequencies.iter().map(|f| f * 300.0).sum();
        assert!((total - 5.0 * 300.0).abs() < 1e-6);
        assert!(prof.frequencies.iter().all(|f| (0.0..=1.0).contains(f)));
    }

    #[test]
    fn density_extremes() {
        // latent 0 always wins through a huge bias, latent 1 never does
        let c = SaeConfig {
            h: 3,
            ..SaeConfig::new(Variant::TopK, 2, 1, 1)
        };
        let mut p = init_params(&c);
        p.b_enc.data_mut().copy_from_slice(&[1e6, -1e6, 0.0]);
        let prof = activation_density(&p, &c, &random_cache(2, 50, 1)).unwrap();
        assert_eq!(prof.frequencies[0], 1.0);
        assert_eq!(prof.frequencies[1], 0.0);
    }

    #[test]
    fn similarity_hand_cases() {
        let c = SaeConfig {
            h: 3,
            ..SaeConfig::new(Variant::TopK, 3, 1, 1)
        };
        let mut p = init_params(&c);
        p.w_dec = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert!(decoder_similarity(&p)
            .unwrap()
            .values
            .iter()
            .all(|v| v.unwrap().abs() < 1e-12));
        p.set_dec_column(2, &[1., 0., 0.]);
        let s = decoder_similarity(&p).unwrap();
        assert!(
            (s.values[0].unwrap() - 1.0).abs() < 1e-12
                && (s.values[2].unwrap() - 1.0).abs() < 1e-12
        );
        p.set_dec_column(1, &[0., 0., 0.]);
        let s = decoder_similarity(&p).unwrap();
        assert_eq!(s.excluded, vec![1]);
        assert_eq!(s.values[1], None);
    }

    #[test]
    fn similarity_matches_brute_force() {
        let c = SaeConfig {
            seed: 4,
            ..SaeConfig::new(Variant::TopK, 16, 4, 2)
        };
        let p = init_params(&c);
        let s = decoder_similarity(&p).unwrap();
        let cols: Vec<Vec<f32>> = (0..64).map(|i| p.dec_column(i)).collect();
        for i in 0..64 {
            let mut best = f64::NEG_INFINITY;
            for j in 0..64 {
                if i != j {
                    let dot: f64 = cols[i]
                        .iter()
                        .zip(&cols[j])
                        .map(|(a, b)| *a as f64 * *b as f64)
                        .sum();
                    let ni: f64 = cols[i]
                        .iter()
                        .map(|a| (*a as f64).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    let nj: f64 = cols[j]
                        .iter()
                        .map(|a| (*a as f64).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    best = best.max(dot / (ni * nj));
                }
            }
            assert!((s.values[i].unwrap() - best).abs() < 1e-9);
        }
    }

    #[test]
    fn bucket_regions_are_deciles() {
        let prof = SimilarityProfile {
            values: (0..100).map(|i| Some(i as f64 / 100.0)).collect(),
            excluded: vec![],
        };
        assert_eq!(
            bucket_latents(&prof, Bucket::Left),
            (0..10).collect::<Vec<_>>()
        );
        assert_eq!(
            bucket_latents(&prof, Bucket::Middle),
            (45..55).collect::<Vec<_>>()
        );
        assert_eq!(
            bucket_latents(&prof, Bucket::Right),
            (90..100).collect::<Vec<_>>()
        );
    }

    #[test]
    fn bucket_derivative_projection_cases() {
        let c = SaeConfig {
            h: 2,
            ..SaeConfig::new(Variant::TopK, 2, 1, 1)
        };
        let mut p = init_params(&c);
        p.w_dec = Tensor::new(vec![2, 2], vec![1., 0.6, 0., 0.8]).unwrap();
        let prof = SimilarityProfile {
            values: vec![Some(0.0), Some(1.0)],
            excluded: vec![],
        };
        let mut cache = ActivationCache::new(2, HookPoint::resid_post(0), [0; 32]);
        cache
            .push(&ActivationRecord {
                x: vec![1., 1.],
                g: vec![0., 3.],
                token_id: 0,
                position: 0,
                sequence_id: 0,
            })
            .unwrap();
        // column 0 is orthogonal to g
        let left =
            similarity_bucket_derivatives(&p, &prof, &cache, Bucket::Left, 1, 10, 0).unwrap();
        assert_eq!(left.mean_abs, 0.0);
        // column 1 against g = [0, 3]: 0.8 * 3
        let right =
            similarity_bucket_derivatives(&p, &prof, &cache, Bucket::Right, 1, 10, 0).unwrap();
        assert!((right.mean_abs - 2.4).abs() < 1e-6);
        // a column equal to g/|g| gives |g|
        p.set_dec_column(1, &[0., 1.]);
        let r = similarity_bucket_derivatives(&p, &prof, &cache, Bucket::Right, 1, 10, 0).unwrap();
        assert!((r.mean_abs - 3.0).abs() < 1e-12);
    }

    #[test]
    fn summary_and_lines() {
        let s = summarize("x", &[3.0, 1.0, 2.0]);
        assert_eq!((s.median, s.n), (2.0, 3));
        assert_eq!(sorted_lines(&[3.0, 1.0]), "1\n3\n");
        assert!(summary_json_line(&s).contains("\"median\":2.0"));
        let row = MetricRow {
            variant: Variant::Gsae,
            k: 8,
            h: 64,
            beta: 1e5,
            seed: 0,
            nmse: 0.5,
            loss_added: 0.1,
            dead_fraction: 0.0,
            n_eval: 9,
        };
        assert_eq!(
            metric_csv(&[row]).lines().next().unwrap(),
            MetricRow::CSV_HEADER
        );
    }
}
