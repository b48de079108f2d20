//! Directional derivatives along activation differences and random
//! directions, and rank correlations between perturbation size, the
//! first-order estimate, and the actual loss change.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};
use crate::store::{ActivationCache, SequenceSpan};
use crate::transformer::{HookPoint, Site, Transformer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FamilyKind {
    ActivationDiff,
    IsotropicRandom,
    CovarianceRandom,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 3] = [
        FamilyKind::ActivationDiff,
        FamilyKind::IsotropicRandom,
        FamilyKind::CovarianceRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::ActivationDiff => "activation_diff",
            FamilyKind::IsotropicRandom => "isotropic_random",
            FamilyKind::CovarianceRandom => "covariance_random",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DirectionFamily {
    pub kind: FamilyKind,
    pub seed: u64,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

/// Draws unit directions of one family from a pool of activations.
pub struct DirectionSampler {
    pub kind: FamilyKind,
    d: usize,
    pool: Vec<Vec<f64>>,
    chol: Option<DMatrix<f64>>,
    /// Diagonal jitter that was needed to factor the covariance.
    pub jitter: Option<f64>,
}

impl DirectionSampler {
    pub fn new(kind: FamilyKind, pool: &[Vec<f64>]) -> Result<Self> {
        let d = pool.first().map_or(0, Vec::len);
        if kind != FamilyKind::IsotropicRandom && pool.len() < 2 {
            return Err(Error::Invalid(format!(
                "{} needs a pool of at least 2 activations",
                kind.name()
            )));
        }
        if pool.iter().any(|x| x.len() != d) {
            return Err(Error::Invalid("pool activations differ in length".into()));
        }
        let mut s = Self {
            kind,
            d,
            pool: pool.to_vec(),
            chol: None,
            jitter: None,
        };
        if kind == FamilyKind::CovarianceRandom {
            let (chol, jitter) = covariance_factor(pool)?;
            s.chol = Some(chol);
            s.jitter = jitter;
        }
        Ok(s)
    }

    pub fn isotropic(d: usize) -> Self {
        Self {
            kind: FamilyKind::IsotropicRandom,
            d,
            pool: vec![],
            chol: None,
            jitter: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Unnormalized draw; activation differences use random distinct pool
    /// members.
    pub fn sample_raw(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self.kind {
            FamilyKind::IsotropicRandom => {
                (0..self.d).map(|_| StandardNormal.sample(rng)).collect()
            }
            FamilyKind::CovarianceRandom => {
                let z = DVector::from_fn(self.d, |_, _| StandardNormal.sample(rng));
                (self.chol.as_ref().expect("factor computed") * z)
                    .iter()
                    .copied()
                    .collect()
            }
            FamilyKind::ActivationDiff => {
                let i = rng.random_range(0..self.pool.len());
                let mut j = rng.random_range(0..self.pool.len() - 1);
                if j >= i {
                    j += 1;
                }
                self.pool[i]
                    .iter()
                    .zip(&self.pool[j])
                    .map(|(a, b)| a - b)
                    .collect()
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        loop {
            let v = self.sample_raw(rng);
            if v.iter().any(|&a| a != 0.0) {
                return unit(v);
            }
        }
    }
}

/// Lower Cholesky factor of the mean-centered pool covariance, with
/// `1e-6·trace/d` added to the diagonal if the plain factorization fails.
fn covariance_factor(pool: &[Vec<f64>]) -> Result<(DMatrix<f64>, Option<f64>)> {
    let (n, d) = (pool.len(), pool[0].len());
    let mean: Vec<f64> = (0..d)
        .map(|j| pool.iter().map(|x| x[j]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |r, c| pool[r][c] - mean[c]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    if let Some(ch) = cov.clone().cholesky() {
        return Ok((ch.l(), None));
    }
    let jitter = (1e-6 * cov.trace() / d as f64).max(f64::MIN_POSITIVE);
    let mut j = cov;
    for i in 0..d {
        j[(i, i)] += jitter;
    }
    log::warn!("covariance is singular; added diagonal jitter {jitter:e}");
    let ch = j.cholesky().ok_or_else(|| {
        Error::Invalid("covariance could not be factored even with jitter".into())
    })?;
    Ok((ch.l(), Some(jitter)))
}

pub fn sample_direction(family: DirectionFamily, pool: &[Vec<f64>]) -> Result<Vec<f64>> {
    let s = if family.kind == FamilyKind::IsotropicRandom && pool.is_empty() {
        return Err(Error::Invalid(
            "isotropic sampling needs the dimension from a pool".into(),
        ));
    } else {
        DirectionSampler::new(family.kind, pool)?
    };
    Ok(s.sample(&mut ChaCha8Rng::seed_from_u64(family.seed)))
}

fn records_with_grad(cache: &ActivationCache) -> Vec<usize> {
    (0..cache.len())
        .filter(|&i| !cache.get(i).zero_grad())
        .collect()
}

fn pool_of(cache: &ActivationCache, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let idx = rand::seq::index::sample(rng, cache.len(), n.min(cache.len()));
    idx.into_iter()
        .map(|i| cache.get(i).x.iter().map(|&v| v as f64).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamilyDerivative {
    pub layer: usize,
    pub family: FamilyKind,
    pub mean_abs: f64,
    pub n: usize,
}

/// Mean `|∇ₓL · d|` per family, one cache per layer.
///
/// Activation differences point from the record whose gradient is used to
/// another activation from a different sequence; the random families are
/// drawn independently of the record.
pub fn directional_derivative_comparison(
    caches: &[ActivationCache],
    n_per_family: usize,
    pool_size: usize,
    seed: u64,
) -> Result<Vec<FamilyDerivative>> {
    let mut out = Vec::new();
    for cache in caches {
        let layer = cache.hook.layer;
        let usable = records_with_grad(cache);
        if usable.is_empty() || cache.len() < 2 {
            return Err(Error::Invalid(format!(
                "layer {layer} cache has too few records with gradients"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(layer as u64);
        let pool = pool_of(cache, pool_size, &mut rng);
        let cov = DirectionSampler::new(FamilyKind::CovarianceRandom, &pool)?;
        let iso = DirectionSampler::isotropic(cache.d_model);
        for kind in FamilyKind::ALL {
            let mut total = 0.0;
            for _ in 0..n_per_family {
                let r = cache.get(usable[rng.random_range(0..usable.len())]);
                let dir = match kind {
                    FamilyKind::ActivationDiff => loop {
                        let other = cache.get(rng.random_range(0..cache.len()));
                        if other.sequence_id == r.sequence_id {
                            continue;
                        }
                        let v: Vec<f64> = other
                            .x
                            .iter()
                            .zip(r.x)
                            .map(|(&a, &b)| a as f64 - b as f64)
                            .collect();
                        if v.iter().any(|&a| a != 0.0) {
                            break unit(v);
                        }
                    },
                    FamilyKind::IsotropicRandom => iso.sample(&mut rng),
                    FamilyKind::CovarianceRandom => cov.sample(&mut rng),
                };
                total +=
                    r.g.iter()
                        .zip(&dir)
                        .map(|(&g, d)| g as f64 * d)
                        .sum::<f64>()
                        .abs();
            }
            out.push(FamilyDerivative {
                layer,
                family: kind,
                mean_abs: total / n_per_family.max(1) as f64,
                n: n_per_family,
            });
        }
    }
    Ok(out)
}

/// A sequence's activations and targets at one hook, ready for perturbing
/// single positions.
#[derive(Clone, Debug)]
pub struct PerturbSite<T> {
    pub hook: HookPoint,
    /// The activation at the hook, `len x d`.
    pub x: Tensor<T>,
    /// Added to `x` before splicing as `resid_post`: the block's mid
    /// residual for `mlp_out`, zero otherwise.
    pub offset: Option<Tensor<T>>,
    pub targets: Vec<Option<usize>>,
}

impl<T: Real> PerturbSite<T> {
    pub fn from_tokens(model: &Transformer<T>, hook: HookPoint, tokens: &[u32]) -> Result<Self> {
        let ff = model.forward_full(tokens)?;
        let offset = (hook.site == Site::MlpOut).then(|| ff.resid_mid[hook.layer].clone());
        Ok(Self {
            hook,
            x: ff.hook(hook).clone(),
            offset,
            targets: crate::transformer::next_token_targets(tokens),
        })
    }

    /// A `resid_post` site rebuilt from cached records of one sequence.
    pub fn from_cache(cache: &ActivationCache, span: &SequenceSpan) -> Result<Self> {
        if cache.hook.site != Site::ResidPost {
            return Err(Error::Invalid(
                "rebuilding from a cache needs resid_post records".into(),
            ));
        }
        Ok(Self {
            hook: cache.hook,
            x: cache.stack_x(span).cast(),
            offset: None,
            targets: cache.targets(span),
        })
    }

    fn loss_with(&self, model: &Transformer<T>, x: &Tensor<T>) -> Result<f64> {
        let resid = match &self.offset {
            Some(o) => Tensor::new(
                x.shape().to_vec(),
                x.data()
                    .iter()
                    .zip(o.data())
                    .map(|(&a, &b)| a + b)
                    .collect(),
            )?,
            None => x.clone(),
        };
        Ok(model
            .loss_from_resid(self.hook.layer, &resid, &self.targets)?
            .to_f64()
            .unwrap_or(f64::NAN))
    }

    pub fn base_loss(&self, model: &Transformer<T>) -> Result<f64> {
        self.loss_with(model, &self.x)
    }
}

/// `L(x + δ) − L(x)` with `δ` added at one position of the hook.
pub fn perturbation_response<T: Real>(
    model: &Transformer<T>,
    site: &PerturbSite<T>,
    base_loss: f64,
    position: usize,
    delta: &[f64],
) -> Result<f64> {
    let (len, d) = site.x.dims2().expect("2-D site");
    if delta.len() != d || position >= len {
        return Err(Error::Shape {
            op: "perturbation_response",
            lhs: vec![position, delta.len()],
            rhs: vec![len, d],
        });
    }
    if delta.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let mut x = site.x.clone();
    for (v, &e) in x.data_mut()[position * d..(position + 1) * d]
        .iter_mut()
        .zip(delta)
    {
        *v += T::lit(e);
    }
    Ok(site.loss_with(model, &x)? - base_loss)
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side has no rank variance or fewer than two points.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationReport {
    pub layer: usize,
    pub bucket_mean: f64,
    pub spearman_norm_vs_dloss: Option<f64>,
    pub spearman_firstorder_vs_dloss: Option<f64>,
    /// `log10(max |Δloss| / min |Δloss|)` over the bucket's samples.
    pub dloss_orders_of_magnitude: Option<f64>,
    pub n_samples: usize,
    /// Fewer than 10 usable samples.
    pub insufficient: bool,
}

/// Norm draw for a bucket: uniform with the given mean and standard
/// deviation, clipped below at `1e-6`.
pub fn bucket_norm(mean: f64, std: f64, rng: &mut impl Rng) -> f64 {
    let half = std * 3f64.sqrt();
    let r = if half > 0.0 {
        rng.random_range(mean - half..mean + half)
    } else {
        mean
    };
    r.max(1e-6)
}

/// Per bucket: isotropic perturbations of random cached positions with
/// norms drawn around the bucket mean (standard deviation half the mean),
/// correlating `|Δloss|` with `‖δ‖` and with `|g·δ|`.
///
/// `cache` must hold whole `resid_post` sequences captured from `model`.
pub fn correlation_study<T: Real>(
    model: &Transformer<T>,
    cache: &ActivationCache,
    bucket_means: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<CorrelationReport>> {
    bucket_study(model, cache, bucket_means, n_samples, seed, 0.5)
}

/// [`correlation_study`] with the standard deviation given as a fraction
/// of each bucket mean.
pub fn bucket_study<T: Real>(
    model: &Transformer<T>,
    cache: &ActivationCache,
    bucket_means: &[f64],
    n_samples: usize,
    seed: u64,
    std_fraction: f64,
) -> Result<Vec<CorrelationReport>> {
    if bucket_means.is_empty() {
        return Err(Error::Invalid("no norm buckets given".into()));
    }
    let layer = cache.hook.layer;
    // whole sequences only: their final position carries a zero gradient
    let spans: Vec<SequenceSpan> = cache
        .sequences()
        .into_iter()
        .filter(|s| s.records.len() >= 2 && cache.get(*s.records.last().unwrap()).zero_grad())
        .collect();
    if spans.is_empty() {
        return Err(Error::Invalid(format!(
            "layer {layer} cache holds no complete sequence"
        )));
    }
    let mut sites: Vec<Option<(PerturbSite<T>, f64)>> = vec![None; spans.len()];
    let iso = DirectionSampler::isotropic(cache.d_model);
    let mut reports = Vec::new();
    for (b, &mean) in bucket_means.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((layer as u64) << 32) | b as u64);
        let (mut norms, mut first, mut dloss) = (vec![], vec![], vec![]);
        for _ in 0..n_samples {
            let s = rng.random_range(0..spans.len());
            let span = &spans[s];
            let pos = rng.random_range(0..span.records.len() - 1);
            if sites[s].is_none() {
                let site = PerturbSite::from_cache(cache, span)?;
                let base = site.base_loss(model)?;
                sites[s] = Some((site, base));
            }
            let (site, base) = sites[s].as_ref().unwrap();
            let r = bucket_norm(mean, mean * std_fraction, &mut rng);
            let delta: Vec<f64> = iso.sample(&mut rng).iter().map(|u| u * r).collect();
            let g = cache.get(span.records[pos]).g;
            let fo = g
                .iter()
                .zip(&delta)
                .map(|(&a, b)| a as f64 * b)
                .sum::<f64>()
                .abs();
            let dl = perturbation_response(model, site, *base, pos, &delta)?;
            if !dl.is_finite() {
                continue;
            }
            norms.push(r);
            first.push(fo);
            dloss.push(dl.abs());
        }
        let n = dloss.len();
        let positive: Vec<f64> = dloss.iter().copied().filter(|&v| v > 0.0).collect();
        let spread = (positive.len() >= 2).then(|| {
            let (lo, hi) = positive
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
            (hi / lo).log10()
        });
        let insufficient = n < 10;
        reports.push(CorrelationReport {
            layer,
            bucket_mean: mean,
            spearman_norm_vs_dloss: if insufficient {
                None
            } else {
                spearman(&norms, &dloss)
            },
            spearman_firstorder_vs_dloss: if insufficient {
                None
            } else {
                spearman(&first, &dloss)
            },
            dloss_orders_of_magnitude: spread,
            n_samples: n,
            insufficient,
        });
    }
    Ok(reports)
}

pub const CSV_HEADER: &str = "layer,family_or_bucket,metric,value,n";

pub fn derivatives_csv(rows: &[FamilyDerivative]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},mean_abs_directional_derivative,{},{}\n",
            r.layer,
            r.family.name(),
            r.mean_abs,
            r.n
        ));
    }
    s
}

pub fn correlations_csv(rows: &[CorrelationReport]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        for (metric, v) in [
            ("spearman_norm_vs_dloss", r.spearman_norm_vs_dloss),
            (
                "spearman_firstorder_vs_dloss",
                r.spearman_firstorder_vs_dloss,
            ),
            ("dloss_orders_of_magnitude", r.dloss_orders_of_magnitude),
        ] {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.layer,
                r.bucket_mean,
                metric,
                fmt(v),
                r.n_samples
            ));
        }
    }
    s
}
