//! Contextual encoders: anything that maps a [`TokenizedText`] to one raw vector
//! per subword plus a CLS vector.
//!
//! [`ReferenceEncoder`] is a deterministic stand-in that mixes seeded random
//! subword vectors over a sliding window. [`PrecomputedEncoder`] serves vectors
//! produced elsewhere and shipped in the `CBEM` embedding file.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::tokenizer::TokenizedText;
use crate::{Error, Result};

pub const DEFAULT_ENCODER_DIM: usize = 64;
pub const DEFAULT_WINDOW: usize = 2;

const EMBEDDING_MAGIC: &[u8; 4] = b"CBEM";
const EMBEDDING_VERSION: u32 = 1;

/// Raw encoder output for one text.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub cls_raw: Vec<f32>,
    /// One vector per subword position.
    pub token_raw: Vec<Vec<f32>>,
}

impl EncoderOutput {
    pub fn dim(&self) -> usize {
        self.cls_raw.len()
    }

    pub fn check(&self, dim: usize, tokens: usize) -> Result<()> {
        if self.token_raw.len() != tokens {
            return Err(Error::Dimension {
                operand: "encoder token count",
                expected: tokens,
                actual: self.token_raw.len(),
            });
        }
        if self.cls_raw.len() != dim {
            return Err(Error::Dimension {
                operand: "encoder cls width",
                expected: dim,
                actual: self.cls_raw.len(),
            });
        }
        if let Some(bad) = self.token_raw.iter().find(|v| v.len() != dim) {
            return Err(Error::Dimension {
                operand: "encoder token width",
                expected: dim,
                actual: bad.len(),
            });
        }
        Ok(())
    }
}

pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;

    /// Encodes `text`. `key` identifies the text for encoders backed by a lookup
    /// table (document or query id); computing encoders ignore it.
    fn encode(&self, key: &str, text: &TokenizedText) -> Result<EncoderOutput>;
}

/// How an index's encoder can be reconstructed at query time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    Reference { seed: u64, dim: usize, window: usize },
    Precomputed { dim: usize },
}

impl EncoderSpec {
    pub fn dim(&self) -> usize {
        match self {
            EncoderSpec::Reference { dim, .. } | EncoderSpec::Precomputed { dim } => *dim,
        }
    }

    /// Rebuilds the encoder for query time. Precomputed indexes need a table of
    /// query embeddings keyed by query id.
    pub fn instantiate(&self, queries: Option<PrecomputedEncoder>) -> Result<Box<dyn Encoder>> {
        match (self, queries) {
            (EncoderSpec::Reference { seed, dim, window }, _) => {
                Ok(Box::new(ReferenceEncoder::new(*seed, *dim, *window)?))
            }
            (EncoderSpec::Precomputed { dim }, Some(table)) => {
                if table.dim() != *dim {
                    return Err(Error::Dimension {
                        operand: "query embeddings",
                        expected: *dim,
                        actual: table.dim(),
                    });
                }
                Ok(Box::new(table))
            }
            (EncoderSpec::Precomputed { .. }, None) => Err(Error::InvalidArgument(
                "index was built from precomputed embeddings; query embeddings are required".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReferenceEncoder {
    pub seed: u64,
    pub dim: usize,
    pub window: usize,
}

impl ReferenceEncoder {
    pub fn new(seed: u64, dim: usize, window: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("encoder dimension must be >= 1".into()));
        }
        Ok(Self { seed, dim, window })
    }

    pub fn with_defaults(seed: u64) -> Self {
        Self {
            seed,
            dim: DEFAULT_ENCODER_DIM,
            window: DEFAULT_WINDOW,
        }
    }

    pub fn spec(&self) -> EncoderSpec {
        EncoderSpec::Reference {
            seed: self.seed,
            dim: self.dim,
            window: self.window,
        }
    }

    /// Unit-norm Gaussian vector drawn from the ChaCha stream selected by `stream`.
    fn seeded_vector(&self, stream: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalized(v)
    }

    /// Base vector of a subword id.
    pub fn base_vector(&self, subword_id: u32) -> Vec<f32> {
        to_f32(&self.seeded_vector(u64::from(subword_id)))
    }

    pub fn encode_tokens(&self, text: &TokenizedText) -> EncoderOutput {
        let n = text.subword_ids.len();
        if n == 0 {
            // the "position -1" vector: a stream no subword id can select
            return EncoderOutput {
                cls_raw: to_f32(&self.seeded_vector(u64::MAX)),
                token_raw: Vec::new(),
            };
        }
        let base: Vec<Vec<f64>> = text
            .subword_ids
            .iter()
            .map(|&id| self.seeded_vector(u64::from(id)))
            .collect();

        let mut ctx = Vec::with_capacity(n);
        for i in 0..n {
            let lo = i.saturating_sub(self.window);
            let hi = (i + self.window).min(n - 1);
            let mut acc = vec![0f64; self.dim];
            for b in &base[lo..=hi] {
                for (a, x) in acc.iter_mut().zip(b) {
                    *a += x;
                }
            }
            let count = (hi - lo + 1) as f64;
            acc.iter_mut().for_each(|a| *a /= count);
            ctx.push(normalized(acc));
        }

        let mut cls = vec![0f64; self.dim];
        for v in &ctx {
            for (a, x) in cls.iter_mut().zip(v) {
                *a += x;
            }
        }
        cls.iter_mut().for_each(|a| *a /= n as f64);

        EncoderOutput {
            cls_raw: to_f32(&normalized(cls)),
            token_raw: ctx.iter().map(|v| to_f32(v)).collect(),
        }
    }
}

impl Encoder for ReferenceEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, _key: &str, text: &TokenizedText) -> Result<EncoderOutput> {
        Ok(self.encode_tokens(text))
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Encoder outputs computed elsewhere, keyed by text id.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEncoder {
    dim: usize,
    outputs: HashMap<String, EncoderOutput>,
}

impl PrecomputedEncoder {
    pub fn new(dim: usize, outputs: HashMap<String, EncoderOutput>) -> Self {
        Self { dim, outputs }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (dim, docs) = read_embedding_file(path)?;
        Ok(Self::new(dim, docs.into_iter().collect()))
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

impl Encoder for PrecomputedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, key: &str, text: &TokenizedText) -> Result<EncoderOutput> {
        let out = self
            .outputs
            .get(key)
            .ok_or_else(|| Error::UnknownDoc(key.to_string()))?;
        out.check(self.dim, text.len())?;
        Ok(out.clone())
    }
}

pub fn encode_embedding_file(dim: usize, docs: &[(String, EncoderOutput)]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(EMBEDDING_MAGIC);
    w.u32(EMBEDDING_VERSION);
    w.u32(dim as u32);
    w.u64(docs.len() as u64);
    for (id, out) in docs {
        out.check(dim, out.token_raw.len())?;
        w.u64(id.len() as u64);
        w.bytes(id.as_bytes());
        w.u32(out.token_raw.len() as u32);
        w.f32s(&out.cls_raw);
        for v in &out.token_raw {
            w.f32s(v);
        }
    }
    Ok(w.buf)
}

pub fn decode_embedding_file(data: &[u8]) -> Result<(usize, Vec<(String, EncoderOutput)>)> {
    let mut r = ByteReader::new(data, "embedding header");
    r.expect_magic(EMBEDDING_MAGIC)?;
    r.expect_version(EMBEDDING_VERSION)?;
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    let mut docs = Vec::new();
    for i in 0..count {
        r.set_context(format!("embedding doc index {i}"));
        let id_len = r.u64()? as usize;
        let id = r.utf8(id_len)?;
        let n = r.u32()? as usize;
        let cls_raw = r.f32s(dim)?;
        let mut token_raw = Vec::with_capacity(n);
        for _ in 0..n {
            token_raw.push(r.f32s(dim)?);
        }
        docs.push((id, EncoderOutput { cls_raw, token_raw }));
    }
    r.set_context("embedding file");
    r.finish()?;
    Ok((dim, docs))
}

pub fn write_embedding_file(
    path: impl AsRef<Path>,
    dim: usize,
    docs: &[(String, EncoderOutput)],
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_embedding_file(dim, docs)?).map_err(|e| Error::io(path, e))
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<(usize, Vec<(String, EncoderOutput)>)> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embedding_file(&data)
}
