use std::io::Write;
use std::path::Path;

use super::{DeadLatentTracker, SaeConfig, SaeParams, TrainedSae, Variant};
use crate::error::Result;
use crate::io::{read_tensor, write_atomic, write_tensor, Reader};

const MAGIC: &[u8; 4] = b"GSAE";
const VERSION: u32 = 1;
const TRACKER_TAG: &[u8; 4] = b"DEAD";

/// An SAE as stored on disk, optionally with the dead-latent state at the
/// end of training.
#[derive(Clone, Debug, PartialEq)]
pub struct SaeCheckpoint {
    pub config: SaeConfig,
    pub params: SaeParams,
    pub tracker: Option<DeadLatentTracker>,
}

impl From<TrainedSae> for SaeCheckpoint {
    fn from(t: TrainedSae) -> Self {
        Self {
            config: t.config,
            params: t.params,
            tracker: Some(t.tracker),
        }
    }
}

impl SaeCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [c.d as u32, c.h as u32, c.k as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&c.beta.to_le_bytes());
        out.push(c.variant.code());
        out.extend_from_slice(&c.l1_coefficient.to_le_bytes());
        out.extend_from_slice(&c.lr.to_le_bytes());
        out.extend_from_slice(&(c.batch_size as u32).to_le_bytes());
        out.extend_from_slice(&(c.train_steps as u64).to_le_bytes());
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&c.dead_window.to_le_bytes());
        let p = &self.params;
        for t in [&p.w_enc, &p.b_enc, &p.w_dec, &p.b_dec] {
            write_tensor(&mut out, t);
        }
        if let Some(t) = &self.tracker {
            out.extend_from_slice(TRACKER_TAG);
            out.extend_from_slice(&t.window.to_le_bytes());
            out.extend_from_slice(&t.batches_seen.to_le_bytes());
            out.extend_from_slice(&(t.consecutive_inactive.len() as u32).to_le_bytes());
            for c in &t.consecutive_inactive {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, origin);
        if r.take(4)? != MAGIC {
            return Err(r.bad("not an SAE checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.bad(&format!("unsupported version {version}")));
        }
        let (d, h, k) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let beta = r.f32()?;
        let variant = Variant::from_code(r.u8()?).ok_or_else(|| r.bad("unknown variant"))?;
        let config = SaeConfig {
            d,
            h,
            k,
            beta,
            variant,
            l1_coefficient: r.f32()?,
            lr: r.f32()?,
            batch_size: r.u32()? as usize,
            train_steps: r.u64()? as usize,
            seed: r.u64()?,
            dead_window: r.u32()?,
        };
        let params = SaeParams {
            w_enc: read_tensor(&mut r)?,
            b_enc: read_tensor(&mut r)?,
            w_dec: read_tensor(&mut r)?,
            b_dec: read_tensor(&mut r)?,
        };
        let shapes = [
            params.w_enc.shape(),
            params.b_enc.shape(),
            params.w_dec.shape(),
            params.b_dec.shape(),
        ];
        if shapes != [&[h, d][..], &[h], &[d, h], &[d]] {
            return Err(r.bad(&format!(
                "parameter shapes {shapes:?} do not match d={d}, h={h}"
            )));
        }
        let tracker = if r.is_done() {
            None
        } else {
            if r.take(4)? != TRACKER_TAG {
                return Err(r.bad("unexpected trailing data"));
            }
            let window = r.u32()?;
            let batches_seen = r.u64()?;
            let n = r.u32()? as usize;
            if n != h {
                return Err(r.bad(&format!("tracker has {n} latents, expected {h}")));
            }
            let counts = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let dead_flags = counts.iter().map(|&c| c >= window).collect();
            if !r.is_done() {
                return Err(r.bad("unexpected trailing data"));
            }
            Some(DeadLatentTracker {
                window,
                consecutive_inactive: counts,
                dead_flags,
                batches_seen,
            })
        };
        Ok(Self {
            config,
            params,
            tracker,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        write_atomic(path, |w| Ok(w.write_all(&bytes)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }
}
