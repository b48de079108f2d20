//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 4-9 share one desk-scale lab (5 MiB corpus, 4-layer d_model 128
//! model, twelve SAEs). Its artifacts are cached under the cargo target tmp
//! dir, keyed by the lab configuration; delete that directory for a cold run.

use std::ffi::OsString;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use gsae::autograd::{grad_check, Tape, Tensor, Var};
use gsae::corpus::{chunk_sequences, split_sequences, synthetic_corpus, tokenize};
use gsae::metrics::{
    decoder_similarity, evaluate, similarity_bucket_derivatives, summarize, Bucket, MetricRow,
};
use gsae::perturb::{
    correlation_study, directional_derivative_comparison, CorrelationReport, FamilyDerivative,
    FamilyKind,
};
use gsae::sae::{
    calibrate_beta, decode, encode_pre, init_params, select_gradient_topk, select_topk, Batch,
    SaeCheckpoint, SaeConfig, SaeParams, SaeTrainer, Variant,
};
use gsae::steering::{default_alpha_grid, steering_sweep, Context, SteeringResult};
use gsae::store::{capture, capture_many, ActivationCache, ActivationRecord};
use gsae::transformer::{
    next_token_targets, train_lm, HookPoint, LmTrainConfig, ModelCheckpoint, ModelConfig,
    Transformer,
};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn uniform(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn gaussian32(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// 1. finite differences
// ---------------------------------------------------------------------------

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> gsae::Result<Var>>;

fn op_table() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let reference = {
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(
            Tensor::new(
                vec![3, 5],
                uniform(15, &mut ChaCha8Rng::seed_from_u64(12_345)),
            )
            .unwrap(),
        );
        let p = tape.softmax(r).unwrap();
        tape.value(p).clone()
    };
    vec![
        (
            "add",
            vec![vec![3, 4], vec![4]],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![vec![3, 4], vec![4]],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        (
            "scale",
            vec![vec![3, 4]],
            Box::new(|t, v| Ok(t.scale(v[0], 0.7))),
        ),
        ("relu", vec![vec![4, 5]], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("gelu", vec![vec![4, 5]], Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("abs", vec![vec![4, 5]], Box::new(|t, v| Ok(t.abs(v[0])))),
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "matmul_t",
            vec![vec![3, 4], vec![5, 4]],
            Box::new(|t, v| t.matmul_t(v[0], v[1])),
        ),
        (
            "layer_norm",
            vec![vec![3, 6], vec![6], vec![6]],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "softmax",
            vec![vec![3, 5]],
            Box::new(|t, v| t.softmax(v[0])),
        ),
        (
            "causal_softmax",
            vec![vec![4, 4]],
            Box::new(|t, v| t.causal_softmax(v[0])),
        ),
        (
            "cross_entropy",
            vec![vec![4, 6]],
            Box::new(|t, v| t.cross_entropy(v[0], &[Some(1), None, Some(5), Some(0)])),
        ),
        (
            "kl_div",
            vec![vec![3, 5]],
            Box::new(move |t, v| t.kl_div(v[0], &reference)),
        ),
        (
            "embedding",
            vec![vec![6, 3]],
            Box::new(|t, v| t.embedding(v[0], &[2, 0, 2, 5])),
        ),
        (
            "slice",
            vec![vec![5, 6]],
            Box::new(|t, v| t.slice(v[0], 1..4, 2..5)),
        ),
        (
            "slice_rows",
            vec![vec![5, 3]],
            Box::new(|t, v| t.slice_rows(v[0], 1..3)),
        ),
        (
            "concat",
            vec![vec![2, 3], vec![2, 1]],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        (
            "transpose",
            vec![vec![3, 4]],
            Box::new(|t, v| t.transpose(v[0])),
        ),
        ("sum", vec![vec![3, 4]], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![vec![3, 4]], Box::new(|t, v| Ok(t.mean(v[0])))),
    ]
}

fn project(t: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    if t.value(v).is_scalar() {
        return v;
    }
    let shape = t.shape(v).to_vec();
    let w = uniform(
        shape.iter().product(),
        &mut ChaCha8Rng::seed_from_u64(seed ^ 0xfeed),
    );
    let w = t.constant(Tensor::new(shape, w).unwrap());
    let p = t.mul(v, w).unwrap();
    t.sum(p)
}

fn random_model(seed: u64) -> Transformer<f64> {
    let config = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_head: 4,
        vocab_size: 7,
        context_length: 6,
        seed,
    };
    let mut m = Transformer::<f64>::init(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for p in m.params_mut() {
        p.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    m
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut worst_op = (0.0f64, "");
    for (name, shapes, f) in op_table() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|s| Tensor::new(s.clone(), uniform(s.iter().product(), &mut rng)).unwrap())
                .collect();
            let r = grad_check(
                |t, v| {
                    let o = f(t, v)?;
                    Ok(project(t, o, seed))
                },
                &pts,
                1e-5,
            )
            .unwrap();
            if r.max_rel_error > worst_op.0 {
                worst_op = (r.max_rel_error, name);
            }
        }
    }
    let mut worst_resid = 0.0f64;
    for seed in 0..100u64 {
        let m = random_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens: Vec<u32> = (0..6).map(|_| rng.random_range(0..7)).collect();
        let layer = seed as usize % 2;
        let (x, g) = m.grad_wrt_resid(layer, &tokens).unwrap();
        let targets = next_token_targets(&tokens);
        let loss = |y: &Tensor<f64>| m.loss_from_resid(layer, y, &targets).unwrap();
        let mut numeric = vec![0.0; x.len()];
        let mut y = x.clone();
        for (c, n) in numeric.iter_mut().enumerate() {
            let orig = x.data()[c];
            y.data_mut()[c] = orig + 1e-5;
            let up = loss(&y);
            y.data_mut()[c] = orig - 1e-5;
            let down = loss(&y);
            y.data_mut()[c] = orig;
            *n = (up - down) / 2e-5;
        }
        let diff: Vec<f64> = g.data().iter().zip(&numeric).map(|(a, b)| a - b).collect();
        worst_resid = worst_resid.max(norm(&diff) / norm(&numeric));
    }
    let elapsed = t0.elapsed();
    outcome(
        worst_op.0 < 1e-4 && worst_resid < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "max rel error over ops {:.2e} ({}), grad_wrt_resid {:.2e}, 100 seeds each, {:.1}s",
            worst_op.0,
            worst_op.1,
            worst_resid,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. beta = 0 reduction
// ---------------------------------------------------------------------------

fn synthetic_cache(d: usize, n: usize, seed: u64) -> ActivationCache {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atoms: Vec<Vec<f32>> = (0..3 * d).map(|_| gaussian32(d, &mut rng)).collect();
    let mut c = ActivationCache::new(d, HookPoint::resid_post(0), [0; 32]);
    for s in 0..n {
        let mut x = gaussian32(d, &mut rng)
            .iter()
            .map(|v| 0.05 * v)
            .collect::<Vec<_>>();
        for _ in 0..3 {
            let a = &atoms[rng.random_range(0..atoms.len())];
            let w: f32 = rng.random_range(0.5..2.0);
            x.iter_mut().zip(a).for_each(|(xi, ai)| *xi += w * ai);
        }
        let g = gaussian32(d, &mut rng).iter().map(|v| v * 0.01).collect();
        c.push(&ActivationRecord {
            x,
            g,
            token_id: 0,
            position: 0,
            sequence_id: s as u32,
        })
        .unwrap();
    }
    c
}

fn bits(p: &SaeParams) -> Vec<u32> {
    [&p.w_enc, &p.b_enc, &p.w_dec, &p.b_dec]
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let (d, h) = (12, 48);
    let mut mask_mismatch = 0usize;
    let mut params = init_params(&SaeConfig::new(Variant::Gsae, d, 4, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for pair in 0..100_000usize {
        if pair % 1000 == 0 {
            params = init_params(&SaeConfig {
                seed: pair as u64,
                ..SaeConfig::new(Variant::Gsae, d, 4, 1)
            });
        }
        let mut z = gaussian32(h, &mut rng);
        if pair % 7 == 0 {
            // ties
            z.iter_mut().for_each(|v| *v = (*v * 2.0).round() / 2.0);
        }
        let g: Vec<f32> = gaussian32(d, &mut rng)
            .iter()
            .map(|v| v * 10f32.powi(rng.random_range(-6..3)))
            .collect();
        let k = rng.random_range(1..=h);
        let a = select_topk(&z, k);
        let b = select_gradient_topk(&z, &g, &params, k, 0.0).unwrap();
        let same_scores = a
            .scores
            .iter()
            .zip(&b.scores)
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if a.indices != b.indices || !same_scores {
            mask_mismatch += 1;
        }
    }
    let cache = synthetic_cache(d, 2048, 5);
    let mut diverged_at = None;
    for seed in 0..3u64 {
        let base = SaeConfig {
            batch_size: 32,
            lr: 3e-3,
            seed,
            ..SaeConfig::new(Variant::TopK, d, 4, 3)
        };
        let mut topk = SaeTrainer::new(base).unwrap();
        let mut gsae = SaeTrainer::new(SaeConfig {
            variant: Variant::Gsae,
            beta: 0.0,
            ..base
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for step in 0..200 {
            let idx: Vec<usize> = (0..base.batch_size)
                .map(|_| rng.random_range(0..cache.len()))
                .collect();
            let batch = Batch::gather(&cache, &idx);
            let a = topk.step(&batch).unwrap();
            let b = gsae.step(&batch).unwrap();
            if bits(&topk.params) != bits(&gsae.params)
                || a.loss.to_bits() != b.loss.to_bits()
                || topk.tracker != gsae.tracker
            {
                diverged_at.get_or_insert((seed, step));
            }
        }
    }
    let elapsed = t0.elapsed();
    outcome(
        mask_mismatch == 0 && diverged_at.is_none() && elapsed < Duration::from_secs(300),
        format!(
            "{mask_mismatch} mask mismatches in 1e5 pairs; trajectories over 3 seeds x 200 steps {}; {:.1}s",
            match diverged_at {
                None => "bit-identical".to_string(),
                Some((s, t)) => format!("diverged at seed {s} step {t}"),
            },
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. oracles
// ---------------------------------------------------------------------------

fn random_params(d: usize, h: usize, rng: &mut ChaCha8Rng) -> SaeParams {
    let mut p = init_params(&SaeConfig {
        seed: rng.random(),
        ..SaeConfig::new(Variant::Gsae, d, h / d, 1)
    });
    for t in [&mut p.w_enc, &mut p.b_enc, &mut p.b_dec] {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    p
}

/// Indices of the `k` largest of `s`, ties to the lowest index, by a full sort.
fn full_sort_topk(s: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 4];
    let mut set_mismatch = [0usize; 2];
    for _ in 0..1000 {
        let d = rng.random_range(2..10);
        let h = d * rng.random_range(2..6);
        let p = random_params(d, h, &mut rng);
        let x: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (we, be, wd, bd) = (
            p.w_enc.data(),
            p.b_enc.data(),
            p.w_dec.data(),
            p.b_dec.data(),
        );

        // encode_pre: W_enc (x - b_dec) + b_enc
        let z = encode_pre(&p, &x).unwrap();
        for i in 0..h {
            let (mut acc, mut scale) = (be[i] as f64, 1.0f64);
            for j in 0..d {
                let t = we[i * d + j] as f64 * (x[j] as f64 - bd[j] as f64);
                acc += t;
                scale += t.abs();
            }
            worst[0] = worst[0].max((z[i] as f64 - acc).abs() / scale);
        }

        // decode: W_dec y + b_dec
        let y: Vec<f32> = (0..h)
            .map(|_| {
                if rng.random_bool(0.3) {
                    rng.random_range(-1.0..1.0)
                } else {
                    0.0
                }
            })
            .collect();
        let xh = decode(&p, &y).unwrap();
        for j in 0..d {
            let (mut acc, mut scale) = (bd[j] as f64, 1.0f64);
            for i in 0..h {
                let t = wd[j * h + i] as f64 * y[i] as f64;
                acc += t;
                scale += t.abs();
            }
            worst[1] = worst[1].max((xh[j] as f64 - acc).abs() / scale);
        }

        // select_topk against a full sort
        let k = rng.random_range(1..=h);
        let zf: Vec<f64> = z.iter().map(|&v| v as f64).collect();
        if select_topk(&z, k).indices != full_sort_topk(&zf, k) {
            set_mismatch[0] += 1;
        }

        // select_gradient_topk against the hand-evaluated score formula
        let g: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let beta: f32 = rng.random_range(0.0..5.0);
        let score: Vec<f64> = (0..h)
            .map(|i| {
                let proj: f64 = (0..d).map(|j| wd[j * h + i] as f64 * g[j] as f64).sum();
                zf[i] + beta as f64 * zf[i] * proj.abs()
            })
            .collect();
        let mask = select_gradient_topk(&z, &g, &p, k, beta).unwrap();
        for (&i, &s) in mask.indices.iter().zip(&mask.scores) {
            worst[2] = worst[2].max((s as f64 - score[i]).abs() / score[i].abs().max(1.0));
        }
        let oracle = full_sort_topk(&score, k);
        if mask.indices != oracle {
            // accept only rank swaps between scores that agree within tolerance
            let kth = score[oracle[k - 1]];
            let ok = mask
                .indices
                .iter()
                .all(|&i| score[i] >= kth - 1e-6 * kth.abs().max(1.0));
            if !ok {
                set_mismatch[1] += 1;
            }
        }
        let selected_min = mask
            .indices
            .iter()
            .map(|&i| score[i])
            .fold(f64::INFINITY, f64::min);
        let rejected_max = (0..h)
            .filter(|i| !mask.indices.contains(i))
            .map(|i| score[i])
            .fold(f64::NEG_INFINITY, f64::max);
        worst[3] = worst[3].max((rejected_max - selected_min) / selected_min.abs().max(1.0));
    }
    outcome(
        worst[..3].iter().all(|&w| w < 1e-6) && worst[3] < 1e-6 && set_mismatch == [0, 0],
        format!(
            "1e3 instances each, relative errors: encode_pre {:.1e}, decode {:.1e}, score {:.1e}, ranking slack {:.1e}; set mismatches topk {} gsae {}",
            worst[0],
            worst[1],
            worst[2],
            worst[3].max(0.0),
            set_mismatch[0],
            set_mismatch[1]
        ),
    )
}

// ---------------------------------------------------------------------------
// desk-scale lab
// ---------------------------------------------------------------------------

const LAYER: usize = 2;
const LM_STEPS: usize = 1500;
const TRAIN_SEQS: usize = 1600;
const EVAL_SEQS: usize = 160;
const BETA_SCALE: f64 = 0.4;
const SEEDS: u64 = 3;

struct Lab {
    model: ModelCheckpoint,
    eval: Vec<Vec<u32>>,
    eval_caches: Vec<ActivationCache>,
    beta: f32,
    saes: Vec<(MetricRow, SaeCheckpoint)>,
    build_time: Duration,
}

fn lab_dir() -> PathBuf {
    let key = format!("lm{LM_STEPS}-t{TRAIN_SEQS}-e{EVAL_SEQS}-b{BETA_SCALE}-s{SEEDS}");
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance-lab")
        .join(key)
}

fn cached<T>(
    path: &Path,
    load: impl FnOnce(&Path) -> T,
    build: impl FnOnce() -> T,
    save: impl FnOnce(&T, &Path),
) -> T {
    if path.exists() {
        return load(path);
    }
    let v = build();
    save(&v, path);
    v
}

fn median_norm(cache: &ActivationCache) -> f64 {
    let norms: Vec<f64> = cache
        .iter()
        .map(|r| r.x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    summarize("norm", &norms).median
}

fn build_lab() -> Lab {
    let t0 = Instant::now();
    let dir = lab_dir();
    std::fs::create_dir_all(&dir).unwrap();
    let corpus = synthetic_corpus(5 << 20, 0);
    assert!(corpus.len() >= 5_000_000);
    let config = ModelConfig::desk();
    let (train, eval) = split_sequences(
        chunk_sequences(&tokenize(corpus.as_bytes()), config.context_length),
        0.1,
    );
    let model = cached(
        &dir.join("model.gslm"),
        |p| ModelCheckpoint::load(p).unwrap(),
        || {
            let (m, r) = train_lm(
                &train.concat(),
                config,
                &LmTrainConfig {
                    steps: LM_STEPS,
                    ..Default::default()
                },
            )
            .unwrap();
            eprintln!(
                "lab: language model trained, final loss {:.3}",
                r.tail_mean(50).unwrap()
            );
            m
        },
        |m, p| m.save(p).unwrap(),
    );
    let hash = model.content_hash();
    let train_cache = cached(
        &dir.join("train.gsac"),
        |p| ActivationCache::load(p, Some(&hash)).unwrap(),
        || {
            capture(
                &model,
                HookPoint::resid_post(LAYER),
                &train[..TRAIN_SEQS],
                usize::MAX,
            )
            .unwrap()
        },
        |c, p| c.save(p).unwrap(),
    );
    let paths: Vec<PathBuf> = (0..config.n_layers)
        .map(|l| dir.join(format!("eval_L{l}.gsac")))
        .collect();
    let eval_caches = if paths.iter().all(|p| p.exists()) {
        paths
            .iter()
            .map(|p| ActivationCache::load(p, Some(&hash)).unwrap())
            .collect()
    } else {
        let hooks: Vec<HookPoint> = (0..config.n_layers).map(HookPoint::resid_post).collect();
        let cs = capture_many(
            &model,
            &hooks,
            &eval[..EVAL_SEQS],
            usize::MAX,
            train.len() as u32,
        )
        .unwrap();
        cs.iter().zip(&paths).for_each(|(c, p)| c.save(p).unwrap());
        cs
    };
    eprintln!("lab: caches ready after {:.0}s", t0.elapsed().as_secs_f64());

    let base = SaeConfig {
        train_steps: 500,
        batch_size: 1024,
        lr: 2e-3,
        ..SaeConfig::new(Variant::Gsae, config.d_model, 20, 32)
    };
    let beta = calibrate_beta(&init_params(&base), train_cache.gs(), 4096, BETA_SCALE).unwrap();
    let mut saes = Vec::new();
    for k in [8, 32] {
        for variant in [Variant::TopK, Variant::Gsae] {
            for seed in 0..SEEDS {
                let c = SaeConfig {
                    k,
                    variant,
                    beta,
                    seed,
                    ..base
                };
                let ck = cached(
                    &dir.join(format!("{variant}_k{k}_seed{seed}.gsae")),
                    |p| SaeCheckpoint::load(p).unwrap(),
                    || {
                        SaeCheckpoint::from(
                            SaeTrainer::new(c)
                                .unwrap()
                                .fit(&train_cache, None, 0)
                                .unwrap(),
                        )
                    },
                    |s, p| s.save(p).unwrap(),
                );
                let row = evaluate(&model, &ck, &eval_caches[LAYER], usize::MAX).unwrap();
                eprintln!("lab: {}", row.csv_line());
                saes.push((row, ck));
            }
        }
    }
    Lab {
        model,
        eval: eval[..EVAL_SEQS].to_vec(),
        eval_caches,
        beta,
        saes,
        build_time: t0.elapsed(),
    }
}

fn lab() -> &'static Lab {
    static LAB: OnceLock<Lab> = OnceLock::new();
    LAB.get_or_init(build_lab)
}

impl Lab {
    fn runs(
        &self,
        variant: Variant,
        k: usize,
    ) -> impl Iterator<Item = &(MetricRow, SaeCheckpoint)> {
        self.saes
            .iter()
            .filter(move |(r, _)| r.variant == variant && r.k == k)
    }

    fn mean(&self, variant: Variant, ks: &[usize], f: impl Fn(&MetricRow) -> f64) -> f64 {
        let v: Vec<f64> = ks
            .iter()
            .flat_map(|&k| self.runs(variant, k).map(|(r, _)| f(r)))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn criterion_4() -> Outcome {
    let lab = lab();
    let mut pass = true;
    let mut parts = vec![format!("beta {:.4e}", lab.beta)];
    for k in [8, 32] {
        let (lt, lg) = (
            lab.mean(Variant::TopK, &[k], |r| r.loss_added),
            lab.mean(Variant::Gsae, &[k], |r| r.loss_added),
        );
        let (nt, ng) = (
            lab.mean(Variant::TopK, &[k], |r| r.nmse),
            lab.mean(Variant::Gsae, &[k], |r| r.nmse),
        );
        pass &= lg <= lt && ng <= 1.1 * nt;
        parts.push(format!(
            "k={k}: L_added gsae {lg:.4} vs topk {lt:.4}, NMSE gsae {ng:.4} vs topk {nt:.4}"
        ));
    }
    pass &= lab.build_time < Duration::from_secs(7200);
    parts.push(format!("lab built in {:.0}s", lab.build_time.as_secs_f64()));
    outcome(pass, parts.join("; "))
}

fn criterion_5() -> Outcome {
    let lab = lab();
    let (t, g) = (
        lab.mean(Variant::TopK, &[32], |r| r.dead_fraction),
        lab.mean(Variant::Gsae, &[32], |r| r.dead_fraction),
    );
    outcome(
        g < t,
        format!("k=32 dead fraction gsae {g:.4} vs topk {t:.4}"),
    )
}

fn steering_rows(
    lab: &Lab,
    variant: Variant,
    alpha: f64,
    contexts: &[Context<f32>],
) -> Vec<SteeringResult> {
    let mut rows = Vec::new();
    for (_, ck) in lab.runs(variant, 32) {
        let alive: Vec<usize> = ck.tracker.as_ref().unwrap().alive().collect();
        assert!(
            alive.len() >= 200,
            "{variant} seed {} has only {} alive latents",
            ck.config.seed,
            alive.len()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(ck.config.seed);
        let latents: Vec<usize> = sample(&mut rng, alive.len(), 200)
            .into_iter()
            .map(|j| alive[j])
            .collect();
        rows.extend(
            steering_sweep(
                &lab.model,
                LAYER,
                &ck.params,
                &latents,
                &[alpha],
                contexts,
                10,
            )
            .unwrap(),
        );
    }
    rows
}

fn criterion_6() -> Outcome {
    let lab = lab();
    let alpha = default_alpha_grid(median_norm(&lab.eval_caches[LAYER]))[2];
    let picks = sample(&mut ChaCha8Rng::seed_from_u64(7), lab.eval.len(), 10);
    let contexts: Vec<Context<f32>> = picks
        .iter()
        .map(|i| Context::from_tokens(&lab.model, LAYER, &lab.eval[i]).unwrap())
        .collect();
    let mean = |rows: &[SteeringResult], f: fn(&SteeringResult) -> f64| {
        rows.iter().map(f).sum::<f64>() / rows.len() as f64
    };
    let t = steering_rows(lab, Variant::TopK, alpha, &contexts);
    let g = steering_rows(lab, Variant::Gsae, alpha, &contexts);
    let (at, ag) = (
        mean(&t, |r| r.added_prob_associated),
        mean(&g, |r| r.added_prob_associated),
    );
    let (ot, og) = (
        mean(&t, |r| r.added_prob_other),
        mean(&g, |r| r.added_prob_other),
    );
    let cons = t
        .iter()
        .chain(&g)
        .map(|r| r.max_conservation_error)
        .fold(0.0, f64::max);
    let complete = t.iter().chain(&g).all(|r| r.context_count == 10);
    outcome(
        ag > at && og < ot && cons <= 1e-6 && complete,
        format!(
            "alpha {alpha:.3}, {} + {} latent rows x 10 contexts: associated gsae {ag:.5} vs topk {at:.5}, other gsae {og:.5} vs topk {ot:.5}, conservation error {cons:.1e}",
            t.len(),
            g.len()
        ),
    )
}

fn criterion_7() -> Outcome {
    let lab = lab();
    let rows: Vec<FamilyDerivative> =
        directional_derivative_comparison(&lab.eval_caches, 1000, 2000, 0).unwrap();
    let get =
        |l: usize, f: FamilyKind| rows.iter().find(|r| r.layer == l && r.family == f).unwrap();
    let mut pass = true;
    let mut parts = vec![];
    for l in lab.eval_caches.len() / 2..lab.eval_caches.len() {
        let (a, i, c) = (
            get(l, FamilyKind::ActivationDiff),
            get(l, FamilyKind::IsotropicRandom),
            get(l, FamilyKind::CovarianceRandom),
        );
        pass &= a.mean_abs > i.mean_abs
            && a.mean_abs > c.mean_abs
            && a.n >= 1000
            && i.n >= 1000
            && c.n >= 1000;
        parts.push(format!(
            "layer {l}: activation_diff {:.3e}, isotropic {:.3e}, covariance {:.3e}",
            a.mean_abs, i.mean_abs, c.mean_abs
        ));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_8() -> Outcome {
    let lab = lab();
    let m64 = lab.model.cast::<f64>();
    let mut pass = true;
    let mut parts = vec![];
    for l in lab.eval_caches.len() / 2..lab.eval_caches.len() {
        let cache = &lab.eval_caches[l];
        let smallest = 0.01 * median_norm(cache);
        let reports: Vec<CorrelationReport> =
            correlation_study(&m64, cache, &[smallest], 200, 0).unwrap();
        let r = &reports[0];
        let (first, norm, spread) = (
            r.spearman_firstorder_vs_dloss,
            r.spearman_norm_vs_dloss,
            r.dloss_orders_of_magnitude,
        );
        pass &= !r.insufficient
            && matches!((first, norm, spread), (Some(f), Some(n), Some(s)) if f > n && s >= 2.0);
        parts.push(format!(
            "layer {l} bucket {smallest:.3}: spearman first-order {} vs norm {}, |dloss| spread {} orders (n={})",
            fmt_opt(first),
            fmt_opt(norm),
            fmt_opt(spread),
            r.n_samples
        ));
    }
    outcome(pass, parts.join("; "))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("NA".into(), |v| format!("{v:.3}"))
}

fn criterion_9() -> Outcome {
    let lab = lab();
    let mean_for = |bucket: Bucket| {
        let v: Vec<f64> = lab
            .runs(Variant::Gsae, 32)
            .map(|(_, ck)| {
                let profile = decoder_similarity(&ck.params).unwrap();
                similarity_bucket_derivatives(
                    &ck.params,
                    &profile,
                    &lab.eval_caches[LAYER],
                    bucket,
                    30,
                    3000,
                    0,
                )
                .unwrap()
                .mean_abs
            })
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (left, right) = (mean_for(Bucket::Left), mean_for(Bucket::Right));
    outcome(
        right >= left,
        format!(
            "gsae k=32 mean |directional derivative| right bucket {right:.4e} vs left {left:.4e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 10-11. determinism and round trips
// ---------------------------------------------------------------------------

fn tiny_lm() -> ModelCheckpoint {
    let config = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        vocab_size: 256,
        context_length: 16,
        seed: 1,
    };
    let tokens = tokenize(synthetic_corpus(20_000, 1).as_bytes());
    train_lm(
        &tokens,
        config,
        &LmTrainConfig {
            steps: 20,
            batch_size: 4,
            ..Default::default()
        },
    )
    .unwrap()
    .0
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_lm();
    let seqs = chunk_sequences(&tokenize(synthetic_corpus(30_000, 2).as_bytes()), 16);
    let cache_path = dir.path().join("cache.gsac");
    capture(&model, HookPoint::resid_post(1), &seqs[..60], usize::MAX)
        .unwrap()
        .save(&cache_path)
        .unwrap();
    let first = dir.path().join("first.gsae");
    let args = |extra: &[&str]| -> Vec<OsString> {
        ["gsae"].iter().chain(extra).map(OsString::from).collect()
    };
    let cache = cache_path.to_str().unwrap();
    let a = gsae::cli::dispatch(args(&[
        "train-sae",
        "--cache",
        cache,
        "--variant",
        "gsae",
        "--k",
        "4",
        "--expansion",
        "4",
        "--beta-scale",
        "1",
        "--steps",
        "80",
        "--seed",
        "9",
        "--out",
        first.to_str().unwrap(),
    ]));
    let config = format!("{}.runconfig", first.display());
    let mut identical = 0;
    for i in 0..2 {
        let again = dir.path().join(format!("again{i}.gsae"));
        let b = gsae::cli::dispatch(args(&[
            "train-sae",
            "--config",
            &config,
            "--out",
            again.to_str().unwrap(),
        ]));
        if a == 0 && b == 0 && std::fs::read(&first).unwrap() == std::fs::read(&again).unwrap() {
            identical += 1;
        }
    }
    outcome(
        identical == 2,
        format!(
            "{identical}/2 re-runs from {} reproduced the checkpoint byte for byte",
            Path::new(&config).file_name().unwrap().to_string_lossy()
        ),
    )
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_lm();
    let seqs = chunk_sequences(&tokenize(synthetic_corpus(30_000, 3).as_bytes()), 16);
    let cache = capture(&model, HookPoint::resid_post(0), &seqs[..20], usize::MAX).unwrap();
    let sae = SaeCheckpoint::from(
        SaeTrainer::new(SaeConfig {
            train_steps: 30,
            batch_size: 16,
            ..SaeConfig::new(Variant::Gsae, 16, 4, 4)
        })
        .unwrap()
        .fit(&cache, None, 0)
        .unwrap(),
    );
    let hash = model.content_hash();
    let mut results = vec![];
    let mut check = |name: &str, first: Vec<u8>, reread: &dyn Fn(&Path) -> Vec<u8>| {
        let p = dir.path().join(name);
        std::fs::write(&p, &first).unwrap();
        let second = reread(&p);
        let p2 = dir.path().join(format!("{name}.2"));
        std::fs::write(&p2, &second).unwrap();
        let third = reread(&p2);
        results.push((name.to_string(), first == second && second == third));
    };
    check("model.gslm", model.to_bytes(), &|p| {
        ModelCheckpoint::load(p).unwrap().to_bytes()
    });
    check("sae.gsae", sae.to_bytes(), &|p| {
        SaeCheckpoint::load(p).unwrap().to_bytes()
    });
    check("cache.gsac", cache.to_bytes(), &|p| {
        ActivationCache::load(p, Some(&hash)).unwrap().to_bytes()
    });
    let ok = results.iter().all(|(_, ok)| *ok);
    outcome(
        ok,
        results
            .iter()
            .map(|(n, ok)| format!("{n} {}", if *ok { "identical" } else { "differs" }))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "gradient correctness", criterion_1),
        (2, "beta=0 reduction identity", criterion_2),
        (3, "formula conformance", criterion_3),
        (10, "determinism", criterion_10),
        (11, "round-trip integrity", criterion_11),
        (4, "frontier: loss added and NMSE", criterion_4),
        (5, "dead latents", criterion_5),
        (6, "steering", criterion_6),
        (7, "directional derivatives by family", criterion_7),
        (8, "first-order vs norm correlation", criterion_8),
        (9, "similarity-bucket derivatives", criterion_9),
    ];
    // `cargo test --test acceptance -- 1 3` runs only criteria 1 and 3
    let only: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut lines = Vec::new();
    for (n, name, f) in criteria
        .into_iter()
        .filter(|c| only.is_empty() || only.contains(&c.0))
    {
        let t = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let line = format!(
            "{} criterion {n:>2} ({name}): {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        println!("{line}");
        lines.push((n, o.pass, line));
    }
    lines.sort_by_key(|l| l.0);
    let passed = lines.iter().filter(|l| l.1).count();
    println!("\nsummary: {passed}/{} criteria passed", lines.len());
    for (_, _, line) in &lines {
        println!("{line}");
    }
    if passed != lines.len() {
        std::process::exit(1);
    }
}
