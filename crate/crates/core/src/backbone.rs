//! A small frozen transformer classifier. Prompt rows are prepended to token
//! embeddings, the whole sequence runs through pre-norm blocks with full
//! self-attention, final states are mean-pooled and projected to vocabulary
//! logits. Backbone parameters never receive gradients; only prompt inputs do.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor};

pub const BACKBONE_MAGIC: &[u8; 5] = b"CPTB1";

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            vocab_size: 64,
            max_len: 48,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Head {
    wq: Vec<f64>, // d_model x d_head
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>, // d_head x d_model
}

#[derive(Clone, Debug)]
struct Block {
    heads: Vec<Head>,
    ffn_w1: Vec<f64>, // d_model x d_ff
    ffn_b1: Vec<f64>,
    ffn_w2: Vec<f64>, // d_ff x d_model
    ffn_b2: Vec<f64>,
}

/// Immutable after construction; forward is a pure function of
/// (parameters, inputs).
#[derive(Clone, Debug)]
pub struct FrozenBackbone {
    cfg: BackboneConfig,
    token_embedding: Vec<f64>, // vocab x d_model
    blocks: Vec<Block>,
    out_proj: Vec<f64>, // d_model x vocab
    out_bias: Vec<f64>,
    positional: Vec<f64>, // max_len x d_model, sinusoidal
}

fn sinusoidal(max_len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let rate = (pos as f64) / 10_000_f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = rate.sin();
            if 2 * i + 1 < d {
                pe[pos * d + 2 * i + 1] = rate.cos();
            }
        }
    }
    pe
}

pub fn build_backbone(cfg: &BackboneConfig) -> Result<FrozenBackbone> {
    FrozenBackbone::build(cfg)
}

impl FrozenBackbone {
    pub fn build(cfg: &BackboneConfig) -> Result<Self> {
        if cfg.d_model == 0 || cfg.n_heads == 0 || cfg.d_model % cfg.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                cfg.d_model, cfg.n_heads
            )));
        }
        if cfg.vocab_size == 0 || cfg.max_len == 0 {
            return Err(Error::Config("vocab_size and max_len must be positive".into()));
        }
        let d = cfg.d_model;
        let dh = d / cfg.n_heads;
        let std = 1.0 / (d as f64).sqrt();
        let mut r = rng::stream(cfg.seed, "backbone-init");
        let token_embedding = rng::gaussian_vec(&mut r, cfg.vocab_size * d, std);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for _ in 0..cfg.n_heads {
                heads.push(Head {
                    wq: rng::gaussian_vec(&mut r, d * dh, std),
                    wk: rng::gaussian_vec(&mut r, d * dh, std),
                    wv: rng::gaussian_vec(&mut r, d * dh, std),
                    wo: rng::gaussian_vec(&mut r, dh * d, std),
                });
            }
            blocks.push(Block {
                heads,
                ffn_w1: rng::gaussian_vec(&mut r, d * cfg.d_ff, std),
                ffn_b1: vec![0.0; cfg.d_ff],
                ffn_w2: rng::gaussian_vec(&mut r, cfg.d_ff * d, std),
                ffn_b2: vec![0.0; d],
            });
        }
        let out_proj = rng::gaussian_vec(&mut r, d * cfg.vocab_size, std);
        let out_bias = vec![0.0; cfg.vocab_size];
        Ok(Self {
            positional: sinusoidal(cfg.max_len, d),
            cfg: cfg.clone(),
            token_embedding,
            blocks,
            out_proj,
            out_bias,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    fn param_vecs(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.token_embedding];
        for b in &self.blocks {
            for h in &b.heads {
                out.push(&h.wq);
                out.push(&h.wk);
                out.push(&h.wv);
                out.push(&h.wo);
            }
            out.push(&b.ffn_w1);
            out.push(&b.ffn_b1);
            out.push(&b.ffn_w2);
            out.push(&b.ffn_b2);
        }
        out.push(&self.out_proj);
        out.push(&self.out_bias);
        out
    }

    fn param_vecs_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.token_embedding];
        for b in &mut self.blocks {
            for h in &mut b.heads {
                out.push(&mut h.wq);
                out.push(&mut h.wk);
                out.push(&mut h.wv);
                out.push(&mut h.wo);
            }
            out.push(&mut b.ffn_w1);
            out.push(&mut b.ffn_b1);
            out.push(&mut b.ffn_w2);
            out.push(&mut b.ffn_b2);
        }
        out.push(&mut self.out_proj);
        out.push(&mut self.out_bias);
        out
    }

    /// Total number of backbone parameters.
    pub fn parameter_count(&self) -> usize {
        self.param_vecs().iter().map(|v| v.len()).sum()
    }

    /// Fingerprint of all parameter bytes, used by freezing-contract tests.
    pub fn parameter_fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325_u64;
        for v in self.param_vecs() {
            for x in v.iter() {
                for b in x.to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Inserts the parameters on a tape once so batched forwards share them.
    pub fn on_tape<'a>(&'a self, tape: &Tape) -> TapedBackbone<'a> {
        let d = self.cfg.d_model;
        let dh = d / self.cfg.n_heads;
        let leaf = |shape: &[usize], v: &Vec<f64>| {
            tape
                .leaf(shape, v.clone(), false)
                .expect("backbone parameter shapes are construction-checked")
        };
        TapedBackbone {
            model: self,
            emb: leaf(&[self.cfg.vocab_size, d], &self.token_embedding),
            pos: leaf(&[self.cfg.max_len, d], &self.positional),
            blocks: self
                .blocks
                .iter()
                .map(|b| TapedBlock {
                    heads: b
                        .heads
                        .iter()
                        .map(|h| TapedHead {
                            wq: leaf(&[d, dh], &h.wq),
                            wk: leaf(&[d, dh], &h.wk),
                            wv: leaf(&[d, dh], &h.wv),
                            wo: leaf(&[dh, d], &h.wo),
                        })
                        .collect(),
                    ffn_w1: leaf(&[d, self.cfg.d_ff], &b.ffn_w1),
                    ffn_b1: leaf(&[self.cfg.d_ff], &b.ffn_b1),
                    ffn_w2: leaf(&[self.cfg.d_ff, d], &b.ffn_w2),
                    ffn_b2: leaf(&[d], &b.ffn_b2),
                })
                .collect(),
            out_proj: leaf(&[d, self.cfg.vocab_size], &self.out_proj),
            out_bias: leaf(&[self.cfg.vocab_size], &self.out_bias),
        }
    }

    /// One-shot forward: vocabulary logits for a prompt plus token sequence.
    /// An empty prompt (0 rows) runs the backbone on the tokens alone.
    pub fn forward(&self, tape: &Tape, prompt: &Tensor, tokens: &[u32]) -> Result<Tensor> {
        self.on_tape(tape).forward(prompt, tokens)
    }

    /// Forward without any prompt.
    pub fn forward_tokens(&self, tape: &Tape, tokens: &[u32]) -> Result<Tensor> {
        let empty = tape.leaf(&[0, self.cfg.d_model], vec![], false)?;
        self.forward(tape, &empty, tokens)
    }

    /// Cross-entropy of the forward logits against a label token, plus the
    /// gradient with respect to the prompt entries only.
    pub fn loss_and_prompt_grad(
        &self,
        prompt: &[f64],
        prompt_rows: usize,
        tokens: &[u32],
        label_token: u32,
    ) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let p = tape.leaf(&[prompt_rows, self.cfg.d_model], prompt.to_vec(), true)?;
        let logits = self.forward(&tape, &p, tokens)?;
        let loss = logits.cross_entropy(&[label_token as usize])?;
        loss.backward()?;
        Ok((
            loss.scalar()?,
            p.grad().unwrap_or_else(|| vec![0.0; prompt.len()]),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(BACKBONE_MAGIC);
        for v in [
            self.cfg.d_model,
            self.cfg.n_layers,
            self.cfg.n_heads,
            self.cfg.d_ff,
            self.cfg.vocab_size,
            self.cfg.max_len,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.cfg.seed.to_le_bytes());
        for vec in self.param_vecs() {
            for x in vec.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut off = 0;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(Error::Format("backbone checkpoint truncated".into()));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 5)? != BACKBONE_MAGIC {
            return Err(Error::Format("bad backbone checkpoint magic".into()));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        }
        let seed = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let cfg = BackboneConfig {
            d_model: dims[0],
            n_layers: dims[1],
            n_heads: dims[2],
            d_ff: dims[3],
            vocab_size: dims[4],
            max_len: dims[5],
            seed,
        };
        let mut model = Self::build(&cfg)?;
        for vec in model.param_vecs_mut() {
            for x in vec.iter_mut() {
                *x = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
            }
        }
        if off != bytes.len() {
            return Err(Error::Format("trailing bytes in backbone checkpoint".into()));
        }
        Ok(model)
    }
}

pub struct TapedHead {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
}

pub struct TapedBlock {
    heads: Vec<TapedHead>,
    ffn_w1: Tensor,
    ffn_b1: Tensor,
    ffn_w2: Tensor,
    ffn_b2: Tensor,
}

/// A backbone whose parameters are already inserted on one tape.
pub struct TapedBackbone<'a> {
    model: &'a FrozenBackbone,
    emb: Tensor,
    pos: Tensor,
    blocks: Vec<TapedBlock>,
    out_proj: Tensor,
    out_bias: Tensor,
}

const LN_EPS: f64 = 1e-5;

impl TapedBackbone<'_> {
    /// Logits `[1 x vocab]` for one sequence with the given prompt prepended.
    pub fn forward(&self, prompt: &Tensor, tokens: &[u32]) -> Result<Tensor> {
        let cfg = &self.model.cfg;
        let pshape = prompt.shape();
        if pshape.len() != 2 || pshape[1] != cfg.d_model {
            return Err(Error::Dimension {
                op: "forward",
                lhs: pshape,
                rhs: vec![0, cfg.d_model],
            });
        }
        let k = pshape[0];
        let n = k + tokens.len();
        if n > cfg.max_len {
            return Err(Error::Length(format!(
                "sequence length {n} exceeds max_len {}",
                cfg.max_len
            )));
        }
        if n == 0 {
            return Err(Error::Length("empty prompt and empty token sequence".into()));
        }
        let mut ids = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if t as usize >= cfg.vocab_size {
                return Err(Error::Vocab(format!(
                    "token id {t} outside vocabulary of size {}",
                    cfg.vocab_size
                )));
            }
            ids.push(t as usize);
        }

        // Embed, scale, prepend the prompt, add positions 0..n.
        let scale = (cfg.d_model as f64).sqrt();
        let mut x = if ids.is_empty() {
            prompt.clone()
        } else {
            let tok = self.emb.gather_rows(&ids)?.scale(scale);
            if k == 0 {
                tok
            } else {
                Tensor::concat_rows(&[prompt, &tok])?
            }
        };
        let pos = self.pos.gather_rows(&(0..n).collect::<Vec<_>>())?;
        x = x.add(&pos)?;

        let dh = cfg.d_model / cfg.n_heads;
        let att_scale = 1.0 / (dh as f64).sqrt();
        for block in &self.blocks {
            let h = x.layer_norm_rows(LN_EPS)?;
            let mut attn_out: Option<Tensor> = None;
            for head in &block.heads {
                let q = h.matmul(&head.wq)?;
                let kref = h.matmul(&head.wk)?;
                let v = h.matmul(&head.wv)?;
                let scores = q.matmul(&kref.transpose()?)?.scale(att_scale);
                let weights = scores.softmax_with_temperature(1.0)?;
                let per_head = weights.matmul(&v)?.matmul(&head.wo)?;
                attn_out = Some(match attn_out {
                    None => per_head,
                    Some(acc) => acc.add(&per_head)?,
                });
            }
            x = x.add(&attn_out.expect("n_heads >= 1"))?;

            let h2 = x.layer_norm_rows(LN_EPS)?;
            let f = h2
                .matmul(&block.ffn_w1)?
                .add_row(&block.ffn_b1)?
                .gelu()
                .matmul(&block.ffn_w2)?
                .add_row(&block.ffn_b2)?;
            x = x.add(&f)?;
        }

        // The head reads the raw residual stream; normalizing here would cap
        // the logit scale and starve prompt gradients.
        let pooled = x.mean_rows()?;
        pooled
            .reshape(&[1, cfg.d_model])?
            .matmul(&self.out_proj)?
            .add_row(&self.out_bias)
    }

    /// Stacked logits `[batch x vocab]`; every sequence shares the prompt.
    pub fn forward_batch(&self, prompt: &Tensor, batch: &[&[u32]]) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let rows = batch
            .iter()
            .map(|tokens| self.forward(prompt, tokens))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = rows.iter().collect();
        Tensor::concat_rows(&refs)
    }
}
