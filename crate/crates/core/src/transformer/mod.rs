//! Tiny pre-norm GPT-style language model over bytes.
//!
//! Besides ordinary training, the model exposes the pieces the SAE work
//! needs: the residual stream at every block, the loss as a function of a
//! spliced-in residual activation, and the gradient of that loss with
//! respect to the activation.

mod io;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use train::{train_lm, LmTrainConfig, LmTrainReport};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 4 layers, d_model 128, 4 heads, context 128, byte vocabulary.
    pub fn desk() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_head: 32,
            vocab_size: 256,
            context_length: 128,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Invalid(format!(
                "n_heads ({}) x d_head ({}) != d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.vocab_size < 2 || self.context_length < 2 || self.n_layers == 0 {
            return Err(Error::Invalid(
                "vocab_size and context_length must be >= 2, n_layers >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Site {
    ResidPost,
    MlpOut,
}

impl Site {
    pub fn code(self) -> u8 {
        match self {
            Site::ResidPost => 0,
            Site::MlpOut => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Site::ResidPost),
            1 => Some(Site::MlpOut),
            _ => None,
        }
    }
}

impl std::str::FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resid_post" => Ok(Site::ResidPost),
            "mlp_out" => Ok(Site::MlpOut),
            other => Err(Error::Invalid(format!("unknown hook site {other:?}"))),
        }
    }
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Site::ResidPost => "resid_post",
            Site::MlpOut => "mlp_out",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HookPoint {
    pub layer: usize,
    pub site: Site,
}

impl HookPoint {
    pub fn resid_post(layer: usize) -> Self {
        Self {
            layer,
            site: Site::ResidPost,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub w_qkv: Tensor<T>,
    pub b_qkv: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w_fc: Tensor<T>,
    pub b_fc: Tensor<T>,
    pub w_proj: Tensor<T>,
    pub b_proj: Tensor<T>,
}

/// Model weights plus config. `w_u` is the `vocab x d_model` unembedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
    pub w_u: Tensor<T>,
    pub b_u: Tensor<T>,
}

/// The f32 model as saved to disk.
pub type ModelCheckpoint = Transformer<f32>;

struct BlockVars {
    ln1_g: Var,
    ln1_b: Var,
    w_qkv: Var,
    b_qkv: Var,
    w_o: Var,
    b_o: Var,
    ln2_g: Var,
    ln2_b: Var,
    w_fc: Var,
    b_fc: Var,
    w_proj: Var,
    b_proj: Var,
}

/// Model parameters bound onto a tape.
pub(crate) struct Bound {
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BlockVars>,
    lnf_g: Var,
    lnf_b: Var,
    w_u: Var,
    b_u: Var,
    pub(crate) all: Vec<Var>,
}

struct BlockOut {
    mlp_out: Var,
    resid_mid: Var,
    resid_post: Var,
}

/// Output of [`Transformer::forward_full`] for one sequence.
#[derive(Clone, Debug)]
pub struct FullForward<T> {
    /// `len x vocab`.
    pub logits: Tensor<T>,
    /// Mean next-token loss; absent for a single-token input.
    pub loss: Option<T>,
    /// `resid_post` after each block, `len x d_model`.
    pub resid_post: Vec<Tensor<T>>,
    /// MLP output of each block, `len x d_model`.
    pub mlp_out: Vec<Tensor<T>>,
    /// Residual stream between attention and MLP of each block.
    pub resid_mid: Vec<Tensor<T>>,
}

impl<T: Real> FullForward<T> {
    pub fn hook(&self, hook: HookPoint) -> &Tensor<T> {
        match hook.site {
            Site::ResidPost => &self.resid_post[hook.layer],
            Site::MlpOut => &self.mlp_out[hook.layer],
        }
    }
}

/// Next-token targets for a sequence: position `i` predicts `tokens[i + 1]`,
/// the final position has none.
pub fn next_token_targets(tokens: &[u32]) -> Vec<Option<usize>> {
    (0..tokens.len())
        .map(|i| tokens.get(i + 1).map(|&t| t as usize))
        .collect()
}

impl<T: Real> Transformer<T> {
    /// GPT-2 style initialization with the unembedding zeroed, so the
    /// untrained model predicts the uniform distribution.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let std = 0.02;
        let proj_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let mut normal = |shape: &[usize], s: f64| -> Tensor<T> {
            let dist = Normal::new(0.0, s).unwrap();
            let n = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect(),
            )
            .unwrap()
        };
        let ones = |n: usize| Tensor::vector(vec![T::one(); n]);
        let zeros = |n: usize| Tensor::<T>::zeros(&[n]);
        let tok_emb = normal(&[config.vocab_size, d], std);
        let pos_emb = normal(&[config.context_length, d], 0.01);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                w_qkv: normal(&[d, 3 * d], std),
                b_qkv: zeros(3 * d),
                w_o: normal(&[d, d], proj_std),
                b_o: zeros(d),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                w_fc: normal(&[d, 4 * d], std),
                b_fc: zeros(4 * d),
                w_proj: normal(&[4 * d, d], proj_std),
                b_proj: zeros(d),
            })
            .collect();
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: ones(d),
            lnf_b: zeros(d),
            w_u: Tensor::zeros(&[config.vocab_size, d]),
            b_u: zeros(config.vocab_size),
        })
    }

    /// Parameters in declaration order (the on-disk order).
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend([
                &b.ln1_g, &b.ln1_b, &b.w_qkv, &b.b_qkv, &b.w_o, &b.b_o, &b.ln2_g, &b.ln2_b,
                &b.w_fc, &b.b_fc, &b.w_proj, &b.b_proj,
            ]);
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.w_u, &self.b_u]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.w_qkv,
                &mut b.b_qkv,
                &mut b.w_o,
                &mut b.b_o,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w_fc,
                &mut b.b_fc,
                &mut b.w_proj,
                &mut b.b_proj,
            ]);
        }
        out.extend([
            &mut self.lnf_g,
            &mut self.lnf_b,
            &mut self.w_u,
            &mut self.b_u,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Transformer<U> {
        let c = |t: &Tensor<T>| t.cast::<U>();
        Transformer {
            config: self.config,
            tok_emb: c(&self.tok_emb),
            pos_emb: c(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_g: c(&b.ln1_g),
                    ln1_b: c(&b.ln1_b),
                    w_qkv: c(&b.w_qkv),
                    b_qkv: c(&b.b_qkv),
                    w_o: c(&b.w_o),
                    b_o: c(&b.b_o),
                    ln2_g: c(&b.ln2_g),
                    ln2_b: c(&b.ln2_b),
                    w_fc: c(&b.w_fc),
                    b_fc: c(&b.b_fc),
                    w_proj: c(&b.w_proj),
                    b_proj: c(&b.b_proj),
                })
                .collect(),
            lnf_g: c(&self.lnf_g),
            lnf_b: c(&self.lnf_b),
            w_u: c(&self.w_u),
            b_u: c(&self.b_u),
        }
    }

    pub(crate) fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let mut all = Vec::new();
        let mut put = |t: &Tensor<T>| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            all.push(v);
            v
        };
        let tok_emb = put(&self.tok_emb);
        let pos_emb = put(&self.pos_emb);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1_g: put(&b.ln1_g),
                ln1_b: put(&b.ln1_b),
                w_qkv: put(&b.w_qkv),
                b_qkv: put(&b.b_qkv),
                w_o: put(&b.w_o),
                b_o: put(&b.b_o),
                ln2_g: put(&b.ln2_g),
                ln2_b: put(&b.ln2_b),
                w_fc: put(&b.w_fc),
                b_fc: put(&b.b_fc),
                w_proj: put(&b.w_proj),
                b_proj: put(&b.b_proj),
            })
            .collect();
        let lnf_g = put(&self.lnf_g);
        let lnf_b = put(&self.lnf_b);
        let w_u = put(&self.w_u);
        let b_u = put(&self.b_u);
        Bound {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            w_u,
            b_u,
            all,
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.context_length {
            return Err(Error::Invalid(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                self.config.context_length
            )));
        }
        if let Some(bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Invalid(format!(
                "token id {bad} >= vocab size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token plus position embeddings for equal-length sequences, stacked
    /// into `(n_seq * len) x d_model`.
    pub(crate) fn embed(&self, tape: &mut Tape<T>, bound: &Bound, seqs: &[&[u32]]) -> Result<Var> {
        let len = seqs.first().map_or(0, |s| s.len());
        for s in seqs {
            self.check_tokens(s)?;
            if s.len() != len {
                return Err(Error::Invalid(
                    "batched sequences must share a length".into(),
                ));
            }
        }
        let ids: Vec<usize> = seqs
            .iter()
            .flat_map(|s| s.iter().map(|&t| t as usize))
            .collect();
        let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..len).collect();
        let tok = tape.embedding(bound.tok_emb, &ids)?;
        let pos = tape.embedding(bound.pos_emb, &positions)?;
        tape.add(tok, pos)
    }

    fn block(
        &self,
        tape: &mut Tape<T>,
        bv: &BlockVars,
        x: Var,
        n_seq: usize,
        len: usize,
        mlp_override: Option<Var>,
    ) -> Result<BlockOut> {
        let d = self.config.d_model;
        let dh = self.config.d_head;
        let h = tape.layer_norm(x, bv.ln1_g, bv.ln1_b, LN_EPS)?;
        let qkv = tape.matmul(h, bv.w_qkv)?;
        let qkv = tape.add(qkv, bv.b_qkv)?;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut seq_outs = Vec::with_capacity(n_seq);
        for s in 0..n_seq {
            let rows = s * len..(s + 1) * len;
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for hd in 0..self.config.n_heads {
                let c = hd * dh;
                let q = tape.slice(qkv, rows.clone(), c..c + dh)?;
                let k = tape.slice(qkv, rows.clone(), d + c..d + c + dh)?;
                let v = tape.slice(qkv, rows.clone(), 2 * d + c..2 * d + c + dh)?;
                let scores = tape.matmul_t(q, k)?;
                let scores = tape.scale(scores, scale);
                let p = tape.causal_softmax(scores)?;
                heads.push(tape.matmul(p, v)?);
            }
            seq_outs.push(if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat(&heads, 1)?
            });
        }
        let attn = if seq_outs.len() == 1 {
            seq_outs[0]
        } else {
            tape.concat(&seq_outs, 0)?
        };
        let attn = tape.matmul(attn, bv.w_o)?;
        let attn = tape.add(attn, bv.b_o)?;
        let resid_mid = tape.add(x, attn)?;
        let mlp_out = match mlp_override {
            Some(v) => v,
            None => {
                let h = tape.layer_norm(resid_mid, bv.ln2_g, bv.ln2_b, LN_EPS)?;
                let h = tape.matmul(h, bv.w_fc)?;
                let h = tape.add(h, bv.b_fc)?;
                let h = tape.gelu(h);
                let o = tape.matmul(h, bv.w_proj)?;
                tape.add(o, bv.b_proj)?
            }
        };
        let resid_post = tape.add(resid_mid, mlp_out)?;
        Ok(BlockOut {
            mlp_out,
            resid_mid,
            resid_post,
        })
    }

    fn head(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.layer_norm(x, bound.lnf_g, bound.lnf_b, LN_EPS)?;
        let logits = tape.matmul_t(h, bound.w_u)?;
        tape.add(logits, bound.b_u)
    }

    /// Runs blocks `start..` and the head on a stacked residual stream.
    pub(crate) fn run_from(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        start: usize,
        mut x: Var,
        n_seq: usize,
        len: usize,
    ) -> Result<Var> {
        for bv in &bound.blocks[start..] {
            x = self.block(tape, bv, x, n_seq, len, None)?.resid_post;
        }
        self.head(tape, bound, x)
    }

    /// Forward pass over a batch of equal-length sequences, returning the
    /// logits var and the per-block vars.
    fn forward_vars(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        seqs: &[&[u32]],
        leaf_embedding: bool,
    ) -> Result<(Var, Vec<BlockOut>)> {
        let len = seqs[0].len();
        let mut x = self.embed(tape, bound, seqs)?;
        if leaf_embedding {
            // Detach and re-enter as a leaf so gradients reach every
            // downstream activation without touching the parameters.
            let v = tape.value(x).clone();
            x = tape.param(v);
        }
        let mut outs = Vec::with_capacity(self.config.n_layers);
        for bv in &bound.blocks {
            let o = self.block(tape, bv, x, seqs.len(), len, None)?;
            x = o.resid_post;
            outs.push(o);
        }
        Ok((self.head(tape, bound, x)?, outs))
    }

    /// Logits, loss and every hooked activation for one sequence.
    pub fn forward_full(&self, tokens: &[u32]) -> Result<FullForward<T>> {
        self.check_tokens(tokens)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let (logits, outs) = self.forward_vars(&mut tape, &bound, &[tokens], false)?;
        let loss = if tokens.len() >= 2 {
            let ce = tape.cross_entropy(logits, &next_token_targets(tokens))?;
            Some(tape.value(ce).item())
        } else {
            None
        };
        Ok(FullForward {
            logits: tape.value(logits).clone(),
            loss,
            resid_post: outs
                .iter()
                .map(|o| tape.value(o.resid_post).clone())
                .collect(),
            mlp_out: outs.iter().map(|o| tape.value(o.mlp_out).clone()).collect(),
            resid_mid: outs
                .iter()
                .map(|o| tape.value(o.resid_mid).clone())
                .collect(),
        })
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.n_layers {
            return Err(Error::Invalid(format!(
                "layer {layer} >= n_layers {}",
                self.config.n_layers
            )));
        }
        Ok(())
    }

    fn check_resid(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let (len, d) = x
            .dims2()
            .ok_or_else(|| Error::Invalid("residual must be 2-D".into()))?;
        if d != self.config.d_model || len == 0 || len > self.config.context_length {
            return Err(Error::Shape {
                op: "resid",
                lhs: x.shape().to_vec(),
                rhs: vec![self.config.d_model],
            });
        }
        Ok((len, d))
    }

    /// Logits (`len x vocab`) obtained by splicing `x` in as `resid_post`
    /// of `layer` and running only the later blocks.
    pub fn logits_from_resid(&self, layer: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_layer(layer)?;
        let (len, _) = self.check_resid(x)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let logits = self.run_from(&mut tape, &bound, layer + 1, xv, 1, len)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean cross-entropy over rows with a target after splicing `x` in as
    /// `resid_post` of `layer`.
    pub fn loss_from_resid(
        &self,
        layer: usize,
        x: &Tensor<T>,
        targets: &[Option<usize>],
    ) -> Result<T> {
        self.check_layer(layer)?;
        let (len, _) = self.check_resid(x)?;
        if targets.len() != len {
            return Err(Error::Invalid(format!(
                "{} targets for {len} positions",
                targets.len()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let logits = self.run_from(&mut tape, &bound, layer + 1, xv, 1, len)?;
        let ce = tape.cross_entropy(logits, targets)?;
        Ok(tape.value(ce).item())
    }

    /// Loss after replacing the activation at `hook`. For `mlp_out` the
    /// replacement is added to the block's `resid_mid`.
    pub fn loss_from_hook(
        &self,
        hook: HookPoint,
        base: &FullForward<T>,
        x: &Tensor<T>,
        targets: &[Option<usize>],
    ) -> Result<T> {
        match hook.site {
            Site::ResidPost => self.loss_from_resid(hook.layer, x, targets),
            Site::MlpOut => {
                let mid = &base.resid_mid[hook.layer];
                if mid.shape() != x.shape() {
                    return Err(Error::Shape {
                        op: "loss_from_hook",
                        lhs: mid.shape().to_vec(),
                        rhs: x.shape().to_vec(),
                    });
                }
                let data = mid
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&a, &b)| a + b)
                    .collect();
                self.loss_from_resid(hook.layer, &Tensor::new(x.shape().to_vec(), data)?, targets)
            }
        }
    }

    /// Softmax of the final-position logits after splicing `x` in at `layer`.
    pub fn probs_from_resid(&self, layer: usize, x: &Tensor<T>) -> Result<Vec<T>> {
        let logits = self.logits_from_resid(layer, x)?;
        let (len, _) = logits.dims2().unwrap();
        Ok(softmax(logits.row(len - 1)))
    }

    /// Activations at `hooks` together with the gradient of the sequence's
    /// mean next-token loss with respect to them, from one backward pass.
    ///
    /// The final position only influences its own (target-less) logits, so
    /// its gradient is exactly zero.
    pub fn hooked_gradients(
        &self,
        tokens: &[u32],
        hooks: &[HookPoint],
    ) -> Result<HookedGradients<T>> {
        if tokens.len() < 2 {
            return Err(Error::Invalid(
                "need at least 2 tokens for a predictive loss".into(),
            ));
        }
        for h in hooks {
            self.check_layer(h.layer)?;
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let (logits, outs) = self.forward_vars(&mut tape, &bound, &[tokens], true)?;
        let ce = tape.cross_entropy(logits, &next_token_targets(tokens))?;
        let loss = tape.value(ce).item();
        let vars: Vec<Var> = hooks
            .iter()
            .map(|h| match h.site {
                Site::ResidPost => outs[h.layer].resid_post,
                Site::MlpOut => outs[h.layer].mlp_out,
            })
            .collect();
        let acts: Vec<Tensor<T>> = vars.iter().map(|&v| tape.value(v).clone()).collect();
        let grads = tape.backward(ce)?;
        let per_hook = vars
            .iter()
            .zip(acts)
            .map(|(&v, x)| {
                let g = grads
                    .get(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); x.len()]);
                let g = Tensor::new(x.shape().to_vec(), g).expect("same shape");
                (x, g)
            })
            .collect();
        Ok(HookedGradients { loss, per_hook })
    }

    /// Mean over positions of `KL(p(reference) ‖ p(x))` after splicing each
    /// activation in at `layer`, with its gradient with respect to `x`.
    pub fn kl_from_resid(
        &self,
        layer: usize,
        reference: &Tensor<T>,
        x: &Tensor<T>,
    ) -> Result<(T, Tensor<T>)> {
        self.check_layer(layer)?;
        let (len, _) = self.check_resid(x)?;
        if reference.shape() != x.shape() {
            return Err(Error::Shape {
                op: "kl_from_resid",
                lhs: reference.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let ref_logits = self.logits_from_resid(layer, reference)?;
        let (_, v) = ref_logits.dims2().unwrap();
        let probs: Vec<T> = (0..len).flat_map(|r| softmax(ref_logits.row(r))).collect();
        let probs = Tensor::new(vec![len, v], probs)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.param(x.clone());
        let logits = self.run_from(&mut tape, &bound, layer + 1, xv, 1, len)?;
        let kl = tape.kl_div(logits, &probs)?;
        let value = tape.value(kl).item();
        let grads = tape.backward(kl)?;
        let g = grads
            .get(xv)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); x.len()]);
        Ok((value, Tensor::new(x.shape().to_vec(), g)?))
    }

    /// `(x, ∇ₓL)` at `resid_post` of `layer`, one row per position.
    pub fn grad_wrt_resid(&self, layer: usize, tokens: &[u32]) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut out = self.hooked_gradients(tokens, &[HookPoint::resid_post(layer)])?;
        Ok(out.per_hook.remove(0))
    }
}

#[derive(Clone, Debug)]
pub struct HookedGradients<T> {
    pub loss: T,
    /// `(activation, gradient)` per requested hook, each `len x d_model`.
    pub per_hook: Vec<(Tensor<T>, Tensor<T>)>,
}

pub fn softmax<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}
