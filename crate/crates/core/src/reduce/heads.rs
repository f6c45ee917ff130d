use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::linalg::Matrix;
use crate::{Error, Result};

const HEADS_MAGIC: &[u8; 4] = b"CBHD";
const HEADS_VERSION: u32 = 1;

/// Initial gate bias: gates start open so no word is dropped before training.
pub const INITIAL_GATE_BIAS: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadDims {
    /// Encoder width.
    pub enc: usize,
    pub cls: usize,
    pub token: usize,
    /// Width of the uni layer output, 0 when there is none.
    pub uni: usize,
}

impl HeadDims {
    pub fn new(enc: usize, cls: usize, token: usize, uni: bool) -> Self {
        Self {
            enc,
            cls,
            token,
            uni: usize::from(uni),
        }
    }

    pub fn has_uni(&self) -> bool {
        self.uni > 0
    }

    /// Width of stored word vectors.
    pub fn word_dim(&self) -> usize {
        if self.has_uni() {
            self.uni
        } else {
            self.token
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc == 0 || self.cls == 0 || self.token == 0 {
            return Err(Error::InvalidArgument(format!(
                "head dimensions must be >= 1: {self:?}"
            )));
        }
        if self.uni > 1 {
            return Err(Error::InvalidArgument(format!(
                "uni layer must have width 1, got {}",
                self.uni
            )));
        }
        Ok(())
    }
}

/// Every trainable parameter of the reduction stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionHeads {
    /// `enc x cls`
    pub w_cls: Matrix,
    /// `enc x token`
    pub w_t: Matrix,
    /// Gate weights, length `token`.
    pub w_s: Vec<f32>,
    pub b_s: f32,
    /// Score mixing logit; the CLS share is `sigmoid(gamma)`.
    pub gamma: f32,
    /// `token x 1`, present in uni mode only.
    pub w_u: Option<Matrix>,
}

impl ReductionHeads {
    /// Seeded initialization: projections uniform in `±1/sqrt(fan_in)`, gate weights
    /// zero with bias [`INITIAL_GATE_BIAS`], `gamma = 0`.
    pub fn init(dims: HeadDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f32).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
        };
        let w_cls = uniform(dims.enc, dims.cls);
        let w_t = uniform(dims.enc, dims.token);
        let w_u = dims.has_uni().then(|| uniform(dims.token, dims.uni));
        Ok(Self {
            w_cls,
            w_t,
            w_s: vec![0.0; dims.token],
            b_s: INITIAL_GATE_BIAS,
            gamma: 0.0,
            w_u,
        })
    }

    pub fn dims(&self) -> HeadDims {
        HeadDims {
            enc: self.w_cls.rows(),
            cls: self.w_cls.cols(),
            token: self.w_t.cols(),
            uni: self.w_u.as_ref().map_or(0, Matrix::cols),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        dims.validate()?;
        if self.w_t.rows() != dims.enc {
            return Err(Error::Dimension {
                operand: "W_t rows",
                expected: dims.enc,
                actual: self.w_t.rows(),
            });
        }
        if self.w_s.len() != dims.token {
            return Err(Error::Dimension {
                operand: "W_s",
                expected: dims.token,
                actual: self.w_s.len(),
            });
        }
        if let Some(w_u) = &self.w_u {
            if w_u.rows() != dims.token {
                return Err(Error::Dimension {
                    operand: "W_u rows",
                    expected: dims.token,
                    actual: w_u.rows(),
                });
            }
        }
        let finite = self.w_cls.is_finite()
            && self.w_t.is_finite()
            && self.w_s.iter().all(|v| v.is_finite())
            && self.b_s.is_finite()
            && self.gamma.is_finite()
            && self.w_u.as_ref().is_none_or(Matrix::is_finite);
        if !finite {
            return Err(Error::InvalidArgument("non-finite head parameter".into()));
        }
        Ok(())
    }

    /// `sigmoid(gamma)`, the weight of the CLS score.
    pub fn sigma_gamma(&self) -> f64 {
        sigmoid(f64::from(self.gamma))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.dims();
        let mut w = ByteWriter::new();
        w.bytes(HEADS_MAGIC);
        w.u32(HEADS_VERSION);
        for d in [dims.enc, dims.cls, dims.token, dims.uni] {
            w.u32(d as u32);
        }
        w.f32s(self.w_cls.as_slice());
        w.f32s(self.w_t.as_slice());
        w.f32s(&self.w_s);
        w.f32(self.b_s);
        w.f32(self.gamma);
        if let Some(w_u) = &self.w_u {
            w.f32s(w_u.as_slice());
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data, "heads file");
        r.expect_magic(HEADS_MAGIC)?;
        r.expect_version(HEADS_VERSION)?;
        let mut dim = || r.u32().map(|v| v as usize);
        let dims = HeadDims {
            enc: dim()?,
            cls: dim()?,
            token: dim()?,
            uni: dim()?,
        };
        dims.validate()?;
        let w_cls = Matrix::from_vec(dims.enc, dims.cls, r.f32s(dims.enc * dims.cls)?);
        let w_t = Matrix::from_vec(dims.enc, dims.token, r.f32s(dims.enc * dims.token)?);
        let w_s = r.f32s(dims.token)?;
        let b_s = r.f32()?;
        let gamma = r.f32()?;
        let w_u = if dims.has_uni() {
            Some(Matrix::from_vec(
                dims.token,
                dims.uni,
                r.f32s(dims.token * dims.uni)?,
            ))
        } else {
            None
        };
        r.finish()?;
        let heads = Self {
            w_cls,
            w_t,
            w_s,
            b_s,
            gamma,
            w_u,
        };
        heads.validate()?;
        Ok(heads)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
