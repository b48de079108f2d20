use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelCheckpoint, ModelConfig, Transformer};
use crate::autograd::Tensor;
use crate::error::Result;
use crate::io::{read_tensor, write_tensor, Reader};

const MAGIC: &[u8; 4] = b"GSLM";
const VERSION: u32 = 1;

impl ModelCheckpoint {
    /// Little-endian image: magic, version, config, then every parameter
    /// with its shape header in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.param_count() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = &self.config;
        for v in [
            c.n_layers,
            c.d_model,
            c.n_heads,
            c.d_head,
            c.vocab_size,
            c.context_length,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        for p in self.params() {
            write_tensor(&mut out, p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, origin);
        if r.take(4)? != MAGIC {
            return Err(r.bad("not a model checkpoint (magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.bad(&format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = ModelConfig {
            n_layers: dims[0],
            d_model: dims[1],
            n_heads: dims[2],
            d_head: dims[3],
            vocab_size: dims[4],
            context_length: dims[5],
            seed: r.u64()?,
        };
        config.validate().map_err(|e| r.bad(&e.to_string()))?;
        let mut model = Transformer::<f32>::init_shapes(config);
        for p in model.params_mut() {
            let t = read_tensor(&mut r)?;
            if t.shape() != p.shape() {
                return Err(r.bad(&format!(
                    "parameter shape {:?}, expected {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            *p = t;
        }
        if !r.is_done() {
            return Err(r.bad("trailing bytes"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }

    /// SHA-256 of the serialized checkpoint; ties activation caches to
    /// the model that produced them.
    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    fn init_shapes(config: ModelConfig) -> Self {
        let mut m = Transformer::<f32>::init(config).expect("validated");
        for p in m.params_mut() {
            *p = Tensor::zeros(p.shape());
        }
        m
    }
}
