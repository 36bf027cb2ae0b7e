//! Prompt embeddings, the shared linear prompt encoder, and prompt
//! persistence. Checkpoints store the raw token embeddings `E`, never the
//! encoded form, so a reloaded prompt composes correctly with whatever
//! encoder the next stage trains.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::param::Param;
use crate::rng;
use crate::tensor::{Tape, Tensor};

pub const PROMPT_MAGIC: &[u8; 5] = b"CPTP1";

/// Default prompt length in tokens.
pub const DEFAULT_PROMPT_LEN: usize = 10;

/// Standard deviation for fresh Gaussian prompt embeddings.
pub const PROMPT_INIT_STD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptRole {
    Source,
    Private,
    Target,
}

impl PromptRole {
    fn to_byte(self) -> u8 {
        match self {
            PromptRole::Source => 0,
            PromptRole::Private => 1,
            PromptRole::Target => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(PromptRole::Source),
            1 => Ok(PromptRole::Private),
            2 => Ok(PromptRole::Target),
            other => Err(Error::Format(format!("unknown prompt role byte {other}"))),
        }
    }
}

/// A `k x d` matrix of raw prompt token embeddings plus identity metadata.
#[derive(Clone, Debug)]
pub struct SoftPrompt {
    pub name: String,
    pub role: PromptRole,
    /// Raw token embeddings, trainable unless the configuration freezes them.
    pub embeddings: Param,
}

impl SoftPrompt {
    pub fn rows(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.embeddings.shape()[1]
    }
}

/// Initialization scheme for [`init_prompt`].
pub enum InitScheme<'a> {
    Gaussian,
    FromCheckpoint(&'a PromptStore),
}

/// Creates a prompt. `Gaussian` draws `E ~ N(0, 0.5^2)` from the seed;
/// `FromCheckpoint` copies the stored embeddings with the same name.
pub fn init_prompt(
    name: &str,
    role: PromptRole,
    k: usize,
    d: usize,
    seed: u64,
    scheme: InitScheme<'_>,
) -> Result<SoftPrompt> {
    match scheme {
        InitScheme::Gaussian => {
            let mut r = rng::stream(seed, &format!("prompt-init:{name}"));
            let values = rng::gaussian_vec(&mut r, k * d, PROMPT_INIT_STD);
            Ok(SoftPrompt {
                name: name.to_string(),
                role,
                embeddings: Param::new(&[k, d], values)?,
            })
        }
        InitScheme::FromCheckpoint(store) => {
            let stored = store.load(name)?;
            let shape = stored.embeddings.shape();
            if shape != [k, d] {
                return Err(Error::Dimension {
                    op: "init_prompt",
                    lhs: shape,
                    rhs: vec![k, d],
                });
            }
            Ok(SoftPrompt {
                name: name.to_string(),
                role,
                embeddings: stored.embeddings,
            })
        }
    }
}

/// The shared linear map from raw prompt embeddings to the embeddings the
/// backbone consumes: row-wise `h_i = W e_i + b`.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub w: Param, // d x d
    pub b: Param, // d
    pub trainable: bool,
}

impl PromptEncoder {
    /// Identity transform; training moves it away from the identity.
    pub fn identity(d: usize) -> Self {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        Self {
            w: Param::new(&[d, d], w).expect("square shape"),
            b: Param::zeros(&[d]),
            trainable: true,
        }
    }

    pub fn width(&self) -> usize {
        self.b.len()
    }

    pub fn clone_values(&self) -> Self {
        Self {
            w: Param::new(&[self.width(), self.width()], self.w.values()).unwrap(),
            b: Param::new(&[self.width()], self.b.values()).unwrap(),
            trainable: self.trainable,
        }
    }

    /// Inserts `W` and `b` on the tape once; [`TapedEncoder::encode`] then
    /// shares those leaves across every prompt encoded in the same step, so
    /// gradients accumulate on a single pair of tensors.
    pub fn on_tape(&self, tape: &Tape, train: bool) -> TapedEncoder {
        TapedEncoder {
            w: tape.leaf_param(&self.w, train),
            b: tape.leaf_param(&self.b, train),
            width: self.width(),
        }
    }

    /// Applies the encoder to raw embeddings already on a tape, inserting a
    /// fresh pair of `W`/`b` leaves.
    pub fn encode_tensor(&self, tape: &Tape, raw: &Tensor) -> Result<Tensor> {
        self.on_tape(tape, self.trainable).encode(raw)
    }

    /// Encodes a prompt, inserting its embeddings as a leaf.
    /// `train_embeddings` controls whether gradients reach `E`.
    pub fn encode_prompt(
        &self,
        tape: &Tape,
        prompt: &SoftPrompt,
        train_embeddings: bool,
    ) -> Result<Tensor> {
        let raw = tape.leaf_param(&prompt.embeddings, train_embeddings);
        self.encode_tensor(tape, &raw)
    }

    /// Pure value-level encoding for inference/metrics paths; runs the same
    /// kernels as the tape path, so results are bit-identical.
    pub fn encode_values(&self, raw: &[f64], rows: usize) -> Vec<f64> {
        let d = self.width();
        let wt = crate::tensor::transpose_slice(&self.w.values(), d, d);
        let product = crate::tensor::matmul_slices(raw, &wt, rows, d, d);
        crate::tensor::add_row_slices(&product, &self.b.values(), rows, d)
    }
}

/// Encoder weights already inserted on a tape.
pub struct TapedEncoder {
    pub w: Tensor,
    pub b: Tensor,
    width: usize,
}

impl TapedEncoder {
    /// Row-wise `h_i = W e_i + b`.
    pub fn encode(&self, raw: &Tensor) -> Result<Tensor> {
        let shape = raw.shape();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::Dimension {
                op: "encode",
                lhs: shape,
                rhs: vec![0, self.width],
            });
        }
        raw.matmul(&self.w.transpose()?)?.add_row(&self.b)
    }
}

/// Directory-backed prompt persistence: one `<name>.cptp` file per prompt.
pub struct PromptStore {
    dir: PathBuf,
}

impl PromptStore {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    fn path_for(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.cptp"))
    }

    /// Names of all stored prompts, sorted.
    pub fn index(&self) -> Result<BTreeMap<String, PathBuf>> {
        let mut out = BTreeMap::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("cptp") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    out.insert(stem.to_string(), path.clone());
                }
            }
        }
        Ok(out)
    }

    /// Writes the prompt, overwriting any previous checkpoint of that name.
    pub fn save(&self, prompt: &SoftPrompt) -> Result<()> {
        let shape = prompt.embeddings.shape();
        let (k, d) = (shape[0], shape[1]);
        let name_bytes = prompt.name.as_bytes();
        let mut buf = Vec::new();
        buf.extend_from_slice(PROMPT_MAGIC);
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(prompt.role.to_byte());
        buf.extend_from_slice(&(k as u32).to_le_bytes());
        buf.extend_from_slice(&(d as u32).to_le_bytes());
        for x in prompt.embeddings.values() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        let path = self.path_for(&prompt.name);
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::Store(format!("writing {}: {e}", path.display())))
    }

    pub fn load(&self, name: &str) -> Result<SoftPrompt> {
        let path = self.path_for(name);
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .map_err(|e| Error::Store(format!("prompt '{name}' not found: {e}")))?
            .read_to_end(&mut bytes)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(Error::Format(format!("prompt checkpoint '{name}' truncated")));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 5)? != PROMPT_MAGIC {
            return Err(Error::Format(format!(
                "bad prompt checkpoint magic in {}",
                path.display()
            )));
        }
        let name_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let stored_name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| Error::Format("prompt name is not valid UTF-8".into()))?;
        let role = PromptRole::from_byte(take(&mut off, 1)?[0])?;
        let k = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut values = Vec::with_capacity(k * d);
        for _ in 0..k * d {
            values.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
        }
        if off != bytes.len() {
            return Err(Error::Format("trailing bytes in prompt checkpoint".into()));
        }
        Ok(SoftPrompt {
            name: stored_name,
            role,
            embeddings: Param::new(&[k, d], values)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_encoder_is_identity() {
        let enc = PromptEncoder::identity(3);
        let tape = Tape::new();
        let raw = tape
            .leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false)
            .unwrap();
        let out = enc.encode_tensor(&tape, &raw).unwrap();
        assert_eq!(out.values(), raw.values());
    }

    #[test]
    fn zero_embeddings_encode_to_bias() {
        let enc = PromptEncoder::identity(2);
        enc.b.set_values(vec![0.5, -1.0]).unwrap();
        let tape = Tape::new();
        let raw = tape.leaf(&[3, 2], vec![0.0; 6], false).unwrap();
        let out = enc.encode_tensor(&tape, &raw).unwrap();
        assert_eq!(out.values(), vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn encode_matches_per_row_reference() {
        let d = 4;
        let mut r = crate::rng::stream(21, "enc-oracle");
        let wv = crate::rng::gaussian_vec(&mut r, d * d, 0.7);
        let bv = crate::rng::gaussian_vec(&mut r, d, 0.7);
        let ev = crate::rng::gaussian_vec(&mut r, 3 * d, 0.7);
        let enc = PromptEncoder {
            w: Param::new(&[d, d], wv.clone()).unwrap(),
            b: Param::new(&[d], bv.clone()).unwrap(),
            trainable: false,
        };
        let tape = Tape::new();
        let raw = tape.leaf(&[3, d], ev.clone(), false).unwrap();
        let got = enc.encode_tensor(&tape, &raw).unwrap().values();
        // h_i = W e_i + b, one row at a time.
        for row in 0..3 {
            for i in 0..d {
                let mut expect = bv[i];
                for j in 0..d {
                    expect += wv[i * d + j] * ev[row * d + j];
                }
                assert!((got[row * d + i] - expect).abs() < 1e-12);
            }
        }
        // Value-level path agrees with the tape path.
        assert_eq!(got, enc.encode_values(&ev, 3));
    }

    #[test]
    fn encoding_is_linear_in_the_embeddings() {
        let d = 3;
        let mut r = crate::rng::stream(22, "enc-linear");
        let enc = PromptEncoder {
            w: Param::new(&[d, d], crate::rng::gaussian_vec(&mut r, d * d, 1.0)).unwrap(),
            b: Param::new(&[d], crate::rng::gaussian_vec(&mut r, d, 1.0)).unwrap(),
            trainable: false,
        };
        let e1 = crate::rng::gaussian_vec(&mut r, 2 * d, 1.0);
        let e2 = crate::rng::gaussian_vec(&mut r, 2 * d, 1.0);
        let (alpha, beta) = (0.3, 1.7);
        let mixed: Vec<f64> = e1
            .iter()
            .zip(&e2)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        let lhs = enc.encode_values(&mixed, 2);
        let h1 = enc.encode_values(&e1, 2);
        let h2 = enc.encode_values(&e2, 2);
        let bias = enc.b.values();
        for r2 in 0..2 {
            for i in 0..d {
                let rhs = alpha * h1[r2 * d + i] + beta * h2[r2 * d + i]
                    - (alpha + beta - 1.0) * bias[i];
                assert!((lhs[r2 * d + i] - rhs).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gaussian_init_is_deterministic_and_centered() {
        let a = init_prompt("t", PromptRole::Source, 10, 8, 3, InitScheme::Gaussian).unwrap();
        let b = init_prompt("t", PromptRole::Source, 10, 8, 3, InitScheme::Gaussian).unwrap();
        assert_eq!(a.embeddings.values(), b.embeddings.values());

        // Sample mean over 10*k*d draws stays within 0.05 of zero.
        let mut total = 0.0;
        let mut n = 0usize;
        for seed in 0..10 {
            let p =
                init_prompt("m", PromptRole::Source, 10, 8, seed, InitScheme::Gaussian).unwrap();
            total += p.embeddings.values().iter().sum::<f64>();
            n += p.embeddings.len();
        }
        assert!((total / n as f64).abs() < 0.05);
    }

    #[test]
    fn store_roundtrip_overwrite_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let store = PromptStore::open(dir.path()).unwrap();
        let p = init_prompt("alpha", PromptRole::Private, 4, 6, 9, InitScheme::Gaussian).unwrap();
        store.save(&p).unwrap();
        let loaded = store.load("alpha").unwrap();
        assert_eq!(loaded.name, "alpha");
        assert_eq!(loaded.role, PromptRole::Private);
        assert_eq!(loaded.embeddings.values(), p.embeddings.values());

        // Second save under the same name wins.
        let p2 = init_prompt("alpha", PromptRole::Private, 4, 6, 10, InitScheme::Gaussian).unwrap();
        store.save(&p2).unwrap();
        assert_eq!(
            store.load("alpha").unwrap().embeddings.values(),
            p2.embeddings.values()
        );

        assert!(matches!(store.load("missing"), Err(Error::Store(_))));
        assert_eq!(store.index().unwrap().len(), 1);
    }

    #[test]
    fn from_checkpoint_requires_matching_shape() {
        let dir = tempfile::tempdir().unwrap();
        let store = PromptStore::open(dir.path()).unwrap();
        let p = init_prompt("s", PromptRole::Source, 4, 6, 9, InitScheme::Gaussian).unwrap();
        store.save(&p).unwrap();
        let again = init_prompt(
            "s",
            PromptRole::Private,
            4,
            6,
            0,
            InitScheme::FromCheckpoint(&store),
        )
        .unwrap();
        assert_eq!(again.embeddings.values(), p.embeddings.values());
        assert!(init_prompt(
            "s",
            PromptRole::Private,
            5,
            6,
            0,
            InitScheme::FromCheckpoint(&store)
        )
        .is_err());
        assert!(init_prompt(
            "nope",
            PromptRole::Private,
            4,
            6,
            0,
            InitScheme::FromCheckpoint(&store)
        )
        .is_err());
    }
}
