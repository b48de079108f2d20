//! Activation and gradient capture, the binary cache format, and seeded
//! batch serving.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::io::{put_f32s, write_atomic, Reader};
use crate::transformer::{HookPoint, ModelCheckpoint, Site};

const MAGIC: &[u8; 4] = b"GSAC";
const VERSION: u32 = 1;

/// One owned `(x, ∇ₓL)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    pub x: Vec<f32>,
    pub g: Vec<f32>,
    pub token_id: u32,
    pub position: u16,
    pub sequence_id: u32,
}

/// Borrowed view of a cached record.
#[derive(Clone, Copy, Debug)]
pub struct RecordRef<'a> {
    pub x: &'a [f32],
    pub g: &'a [f32],
    pub token_id: u32,
    pub position: u16,
    pub sequence_id: u32,
}

impl RecordRef<'_> {
    /// True for records whose gradient is identically zero, such as the
    /// final position of a sequence.
    pub fn zero_grad(&self) -> bool {
        self.g.iter().all(|&v| v == 0.0)
    }

    pub fn to_owned(&self) -> ActivationRecord {
        ActivationRecord {
            x: self.x.to_vec(),
            g: self.g.to_vec(),
            token_id: self.token_id,
            position: self.position,
            sequence_id: self.sequence_id,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheHeader {
    pub version: u32,
    pub d_model: u32,
    pub count: u64,
    pub layer: u32,
    pub site: Site,
    pub checkpoint_hash: [u8; 32],
}

impl CacheHeader {
    pub fn hook(&self) -> HookPoint {
        HookPoint {
            layer: self.layer as usize,
            site: self.site,
        }
    }
}

/// Records stored column-wise: `xs` and `gs` are `count x d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache {
    pub d_model: usize,
    pub hook: HookPoint,
    pub checkpoint_hash: [u8; 32],
    xs: Vec<f32>,
    gs: Vec<f32>,
    token_ids: Vec<u32>,
    positions: Vec<u16>,
    sequence_ids: Vec<u32>,
}

impl ActivationCache {
    pub fn new(d_model: usize, hook: HookPoint, checkpoint_hash: [u8; 32]) -> Self {
        Self {
            d_model,
            hook,
            checkpoint_hash,
            xs: Vec::new(),
            gs: Vec::new(),
            token_ids: Vec::new(),
            positions: Vec::new(),
            sequence_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn header(&self) -> CacheHeader {
        CacheHeader {
            version: VERSION,
            d_model: self.d_model as u32,
            count: self.len() as u64,
            layer: self.hook.layer as u32,
            site: self.hook.site,
            checkpoint_hash: self.checkpoint_hash,
        }
    }

    pub fn push(&mut self, r: &ActivationRecord) -> Result<()> {
        if r.x.len() != self.d_model || r.g.len() != self.d_model {
            return Err(Error::Shape {
                op: "cache push",
                lhs: vec![r.x.len(), r.g.len()],
                rhs: vec![self.d_model],
            });
        }
        if !r.x.iter().chain(&r.g).all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "sequence {} position {}",
                r.sequence_id, r.position
            )));
        }
        self.xs.extend_from_slice(&r.x);
        self.gs.extend_from_slice(&r.g);
        self.token_ids.push(r.token_id);
        self.positions.push(r.position);
        self.sequence_ids.push(r.sequence_id);
        Ok(())
    }

    pub fn get(&self, i: usize) -> RecordRef<'_> {
        let d = self.d_model;
        RecordRef {
            x: &self.xs[i * d..(i + 1) * d],
            g: &self.gs[i * d..(i + 1) * d],
            token_id: self.token_ids[i],
            position: self.positions[i],
            sequence_id: self.sequence_ids[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = RecordRef<'_>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn xs(&self) -> &[f32] {
        &self.xs
    }

    pub fn gs(&self) -> &[f32] {
        &self.gs
    }

    /// A new cache holding the records at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::new(self.d_model, self.hook, self.checkpoint_hash);
        for &i in indices {
            let d = self.d_model;
            out.xs.extend_from_slice(&self.xs[i * d..(i + 1) * d]);
            out.gs.extend_from_slice(&self.gs[i * d..(i + 1) * d]);
            out.token_ids.push(self.token_ids[i]);
            out.positions.push(self.positions[i]);
            out.sequence_ids.push(self.sequence_ids[i]);
        }
        out
    }

    /// Records split by `sequence_id`: ids below `first_eval_id` go to the
    /// first cache, the rest to the second.
    pub fn split_by_sequence(&self, first_eval_id: u32) -> (Self, Self) {
        let (a, b): (Vec<usize>, Vec<usize>) =
            (0..self.len()).partition(|&i| self.sequence_ids[i] < first_eval_id);
        (self.select(&a), self.select(&b))
    }

    /// Record indices grouped by sequence, each group ordered by position.
    pub fn sequences(&self) -> Vec<SequenceSpan> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for i in 0..self.len() {
            groups.entry(self.sequence_ids[i]).or_default().push(i);
        }
        groups
            .into_iter()
            .map(|(sequence_id, mut idx)| {
                idx.sort_by_key(|&i| self.positions[i]);
                SequenceSpan {
                    sequence_id,
                    records: idx,
                }
            })
            .collect()
    }

    /// Activations of a sequence as a `len x d_model` tensor.
    pub fn stack_x(&self, span: &SequenceSpan) -> Tensor<f32> {
        let d = self.d_model;
        let mut data = Vec::with_capacity(span.records.len() * d);
        for &i in &span.records {
            data.extend_from_slice(&self.xs[i * d..(i + 1) * d]);
        }
        Tensor::new(vec![span.records.len(), d], data).expect("consistent rows")
    }

    /// Next-token targets recovered from the cached token ids. A position
    /// has a target only when the following position is also cached.
    pub fn targets(&self, span: &SequenceSpan) -> Vec<Option<usize>> {
        let r = &span.records;
        (0..r.len())
            .map(|j| {
                let next = r.get(j + 1)?;
                (self.positions[*next] == self.positions[r[j]] + 1)
                    .then_some(self.token_ids[*next] as usize)
            })
            .collect()
    }

    /// Record indices of each batch of one epoch: a seeded permutation cut
    /// into `batch_size` chunks, the last possibly short.
    pub fn epoch_batches(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: u64,
    ) -> Result<Vec<Vec<usize>>> {
        if batch_size == 0 {
            return Err(Error::Invalid("batch_size must be >= 1".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
    }

    /// Endless stream of batches over successive epochs.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<Batches<'_>> {
        if self.is_empty() {
            return Err(Error::Invalid("cannot batch an empty cache".into()));
        }
        let current = self.epoch_batches(batch_size, seed, 0)?;
        Ok(Batches {
            cache: self,
            batch_size,
            seed,
            epoch: 0,
            current,
            next: 0,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.d_model;
        let mut out = Vec::with_capacity(64 + self.len() * (8 * d + 10));
        out.extend_from_slice(MAGIC);
        let h = self.header();
        out.extend_from_slice(&h.version.to_le_bytes());
        out.extend_from_slice(&h.d_model.to_le_bytes());
        out.extend_from_slice(&h.count.to_le_bytes());
        out.extend_from_slice(&h.layer.to_le_bytes());
        out.push(h.site.code());
        out.extend_from_slice(&h.checkpoint_hash);
        for i in 0..self.len() {
            put_f32s(&mut out, &self.xs[i * d..(i + 1) * d]);
            put_f32s(&mut out, &self.gs[i * d..(i + 1) * d]);
            out.extend_from_slice(&self.token_ids[i].to_le_bytes());
            out.extend_from_slice(&self.positions[i].to_le_bytes());
            out.extend_from_slice(&self.sequence_ids[i].to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, origin);
        if r.take(4)? != MAGIC {
            return Err(r.bad("not an activation cache"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.bad(&format!("unsupported version {version}")));
        }
        let d = r.u32()? as usize;
        let count = r.u64()? as usize;
        let layer = r.u32()? as usize;
        let site = Site::from_code(r.u8()?).ok_or_else(|| r.bad("unknown hook site"))?;
        let hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let rec_bytes = 8 * d + 10;
        if r.remaining() != count * rec_bytes {
            return Err(r.bad(&format!("expected {count} records of {rec_bytes} bytes")));
        }
        let mut c = Self::new(d, HookPoint { layer, site }, hash);
        c.xs.reserve(count * d);
        c.gs.reserve(count * d);
        for _ in 0..count {
            c.xs.extend(r.f32s(d)?);
            c.gs.extend(r.f32s(d)?);
            c.token_ids.push(r.u32()?);
            c.positions.push(r.u16()?);
            c.sequence_ids.push(r.u32()?);
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        write_atomic(path, |w| Ok(w.write_all(&bytes)?))
    }

    /// Loads a cache; with `expected_hash`, rejects caches produced by a
    /// different checkpoint.
    pub fn load(path: &Path, expected_hash: Option<&[u8; 32]>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let c = Self::from_bytes(&bytes, path)?;
        match expected_hash {
            Some(h) if *h != c.checkpoint_hash => Err(Error::HashMismatch),
            _ => Ok(c),
        }
    }
}

/// Record indices of one sequence, in position order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceSpan {
    pub sequence_id: u32,
    pub records: Vec<usize>,
}

pub struct Batches<'a> {
    cache: &'a ActivationCache,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    current: Vec<Vec<usize>>,
    next: usize,
}

impl Batches<'_> {
    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for Batches<'_> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.next == self.current.len() {
            self.epoch += 1;
            self.current = self
                .cache
                .epoch_batches(self.batch_size, self.seed, self.epoch)
                .ok()?;
            self.next = 0;
        }
        self.next += 1;
        Some(self.current[self.next - 1].clone())
    }
}

/// Captures records at every hook in one pass per sequence. Sequence ids
/// are `first_sequence_id` plus the index into `sequences`; sequences
/// shorter than two tokens are skipped. Capture stops once each cache
/// holds `max_records`.
pub fn capture_many(
    model: &ModelCheckpoint,
    hooks: &[HookPoint],
    sequences: &[Vec<u32>],
    max_records: usize,
    first_sequence_id: u32,
) -> Result<Vec<ActivationCache>> {
    let d = model.config.d_model;
    let hash = model.content_hash();
    let mut caches: Vec<ActivationCache> = hooks
        .iter()
        .map(|&h| ActivationCache::new(d, h, hash))
        .collect();
    for (s, seq) in sequences.iter().enumerate() {
        if caches.first().is_none_or(|c| c.len() >= max_records) {
            break;
        }
        if seq.len() < 2 {
            continue;
        }
        let sequence_id = first_sequence_id + s as u32;
        let out = model.hooked_gradients(seq, hooks)?;
        for (cache, (x, g)) in caches.iter_mut().zip(&out.per_hook) {
            for (p, &tok) in seq.iter().enumerate() {
                if cache.len() >= max_records {
                    break;
                }
                cache.push(&ActivationRecord {
                    x: x.row(p).to_vec(),
                    g: g.row(p).to_vec(),
                    token_id: tok,
                    position: p as u16,
                    sequence_id,
                })?;
            }
        }
    }
    Ok(caches)
}

pub fn capture(
    model: &ModelCheckpoint,
    hook: HookPoint,
    sequences: &[Vec<u32>],
    max_records: usize,
) -> Result<ActivationCache> {
    Ok(capture_many(model, &[hook], sequences, max_records, 0)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::ModelConfig;
    use proptest::prelude::*;

    fn tiny_model() -> ModelCheckpoint {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            vocab_size: 16,
            context_length: 8,
            seed: 3,
        };
        let mut m = ModelCheckpoint::init(cfg).unwrap();
        // give the unembedding some weight so gradients are nonzero
        for (i, v) in m.w_u.data_mut().iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f32 - 5.0) * 0.05;
        }
        m
    }

    fn seqs() -> Vec<Vec<u32>> {
        vec![vec![1, 2, 3, 4, 5, 6, 7, 8], vec![9], vec![3, 1, 4, 1, 5]]
    }

    fn synthetic(count: usize) -> ActivationCache {
        let mut c = ActivationCache::new(2, HookPoint::resid_post(0), [7; 32]);
        for i in 0..count {
            c.push(&ActivationRecord {
                x: vec![i as f32, 1.0],
                g: vec![0.5, -(i as f32)],
                token_id: i as u32,
                position: (i % 4) as u16,
                sequence_id: (i / 4) as u32,
            })
            .unwrap();
        }
        c
    }

    #[test]
    fn capture_records_every_position_of_usable_sequences() {
        let m = tiny_model();
        let c = capture(&m, HookPoint::resid_post(1), &seqs(), usize::MAX).unwrap();
        assert_eq!(c.len(), 8 + 5);
        assert_eq!(c.header().count, 13);
        let last = c.get(7);
        assert_eq!((last.position, last.sequence_id, last.token_id), (7, 0, 8));
        assert!(last.zero_grad());
        assert!(!c.get(0).zero_grad());
        assert_eq!(c.get(8).sequence_id, 2);
    }

    #[test]
    fn captured_x_matches_forward() {
        let m = tiny_model();
        let s = seqs();
        let c = capture(&m, HookPoint::resid_post(0), &s, usize::MAX).unwrap();
        let ff = m.forward_full(&s[2]).unwrap();
        for p in 0..5 {
            assert_eq!(c.get(8 + p).x, ff.resid_post[0].row(p));
        }
    }

    #[test]
    fn zero_max_records_gives_header_only() {
        let c = capture(&tiny_model(), HookPoint::resid_post(0), &seqs(), 0).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.to_bytes().len(), 4 + 4 + 4 + 8 + 4 + 1 + 32);
    }

    #[test]
    fn max_records_truncates() {
        let c = capture(&tiny_model(), HookPoint::resid_post(0), &seqs(), 10).unwrap();
        assert_eq!(c.len(), 10);
    }

    #[test]
    fn multi_hook_matches_single() {
        let m = tiny_model();
        let hooks = [
            HookPoint::resid_post(0),
            HookPoint {
                layer: 1,
                site: Site::MlpOut,
            },
        ];
        let many = capture_many(&m, &hooks, &seqs(), usize::MAX, 0).unwrap();
        for (h, c) in hooks.iter().zip(&many) {
            assert_eq!(&capture(&m, *h, &seqs(), usize::MAX).unwrap(), c);
        }
    }

    #[test]
    fn recapture_is_byte_identical() {
        let m = tiny_model();
        let a = capture(&m, HookPoint::resid_post(1), &seqs(), 100)
            .unwrap()
            .to_bytes();
        let b = capture(&m, HookPoint::resid_post(1), &seqs(), 100)
            .unwrap()
            .to_bytes();
        assert_eq!(a, b);
    }

    #[test]
    fn file_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.gsac");
        let m = tiny_model();
        let c = capture(&m, HookPoint::resid_post(1), &seqs(), 100).unwrap();
        c.save(&p).unwrap();
        let back = ActivationCache::load(&p, Some(&m.content_hash())).unwrap();
        assert_eq!(back, c);
        let other = ModelCheckpoint::init(ModelConfig {
            seed: 4,
            ..m.config
        })
        .unwrap();
        assert!(matches!(
            ActivationCache::load(&p, Some(&other.content_hash())),
            Err(Error::HashMismatch)
        ));
        assert!(!dir.path().join("c.partial").exists());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = synthetic(3).to_bytes();
        let p = Path::new("mem");
        assert!(ActivationCache::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ActivationCache::from_bytes(&bad, p).is_err());
    }

    #[test]
    fn non_finite_record_is_rejected() {
        let mut c = synthetic(0);
        let r = ActivationRecord {
            x: vec![f32::NAN, 0.0],
            g: vec![0.0; 2],
            token_id: 0,
            position: 0,
            sequence_id: 5,
        };
        assert!(matches!(c.push(&r), Err(Error::NonFinite(_))));
    }

    #[test]
    fn batch_sizes_for_ten_by_three() {
        let c = synthetic(10);
        let sizes: Vec<usize> = c
            .epoch_batches(3, 0, 0)
            .unwrap()
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert_eq!(c.epoch_batches(50, 0, 0).unwrap().len(), 1);
        assert!(c.epoch_batches(0, 0, 0).is_err());
    }

    #[test]
    fn batch_order_is_seeded() {
        let c = synthetic(40);
        assert_eq!(
            c.epoch_batches(7, 1, 0).unwrap(),
            c.epoch_batches(7, 1, 0).unwrap()
        );
        assert_ne!(
            c.epoch_batches(7, 1, 0).unwrap(),
            c.epoch_batches(7, 2, 0).unwrap()
        );
        assert_ne!(
            c.epoch_batches(7, 1, 0).unwrap(),
            c.epoch_batches(7, 1, 1).unwrap()
        );
    }

    #[test]
    fn stream_crosses_epochs() {
        let c = synthetic(10);
        let mut b = c.batches(4, 9).unwrap();
        let first: Vec<Vec<usize>> = b.by_ref().take(3).collect();
        assert_eq!(b.epoch(), 0);
        let _ = b.next();
        assert_eq!(b.epoch(), 1);
        let mut seen: Vec<usize> = first.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn sequences_and_targets() {
        let c = synthetic(10);
        let spans = c.sequences();
        assert_eq!(spans.len(), 3);
        assert_eq!(spans[1].records, vec![4, 5, 6, 7]);
        assert_eq!(c.targets(&spans[1]), vec![Some(5), Some(6), Some(7), None]);
        assert_eq!(c.targets(&spans[2]), vec![Some(9), None]);
        assert_eq!(c.stack_x(&spans[2]).shape(), &[2, 2]);
        let (a, b) = c.split_by_sequence(2);
        assert_eq!((a.len(), b.len()), (8, 2));
    }

    proptest! {
        #[test]
        fn every_epoch_is_a_permutation(count in 1usize..60, bs in 1usize..17, seed in any::<u64>(), epoch in 0u64..4) {
            let c = synthetic(count);
            let batches = c.epoch_batches(bs, seed, epoch).unwrap();
            prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == bs));
            let mut yielded: Vec<ActivationRecord> = batches.concat().iter().map(|&i| c.get(i).to_owned()).collect();
            let mut stored: Vec<ActivationRecord> = c.iter().map(|r| r.to_owned()).collect();
            let key = |r: &ActivationRecord| (r.sequence_id, r.position, r.token_id);
            yielded.sort_by_key(key);
            stored.sort_by_key(key);
            prop_assert_eq!(yielded, stored);
        }
    }
}
