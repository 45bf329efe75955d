//! Versioned little-endian binary checkpoint.
//!
//! ```text
//! magic "TTAWMODL" | version u32 | input c,h,w u32 | layer count u32 | layers...
//! ```
//! Each layer is a one-byte tag followed by its dimensions (u32/u64) and
//! weights (f64), always in declaration order.

use std::fs;
use std::path::Path;

use super::layers::{BatchNorm, BnMode, Conv2d, Layer, Linear, MapShape, SpectralLayer};
use super::Model;
use crate::error::{Error, Result};
use crate::filter::{FilterKind, SpectralFilter};
use crate::pca::PcaBasis;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"TTAWMODL";
pub const MODEL_FILE_VERSION: u32 = 1;

const TAG_CONV: u8 = 1;
const TAG_BN: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_FLATTEN: u8 = 4;
const TAG_LINEAR: u8 = 5;
const TAG_SPECTRAL: u8 = 6;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend((v as u64).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn floats(&mut self, xs: &[f64]) {
        self.u64(xs.len());
        for x in xs {
            self.f64(*x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> std::result::Result<usize, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn floats(&mut self, expect: usize) -> std::result::Result<Vec<f64>, String> {
        let n = self.u64()?;
        if n != expect {
            return Err(format!("expected {expect} values, found {n}"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend(MAGIC);
        w.u32(MODEL_FILE_VERSION as usize);
        w.u32(self.input.c);
        w.u32(self.input.h);
        w.u32(self.input.w);
        w.u32(self.layers.len());
        for l in &self.layers {
            match l {
                Layer::Conv2d(c) => {
                    w.u8(TAG_CONV);
                    w.u32(c.in_c);
                    w.u32(c.out_c);
                    w.u32(c.kernel);
                    w.u32(c.padding);
                    w.floats(&c.weight);
                    w.floats(&c.bias);
                }
                Layer::BatchNorm(b) => {
                    w.u8(TAG_BN);
                    w.u32(b.channels);
                    w.f64(b.eps);
                    w.u8(match b.mode {
                        BnMode::FrozenStats => 0,
                        BnMode::BatchStats => 1,
                    });
                    w.floats(&b.running_mean);
                    w.floats(&b.running_var);
                    w.floats(&b.scale);
                    w.floats(&b.shift);
                }
                Layer::Relu => w.u8(TAG_RELU),
                Layer::Flatten => w.u8(TAG_FLATTEN),
                Layer::Linear(lin) => {
                    w.u8(TAG_LINEAR);
                    w.u32(lin.in_f);
                    w.u32(lin.out_f);
                    w.floats(&lin.weight);
                    w.floats(&lin.bias);
                }
                Layer::Spectral(s) => {
                    w.u8(TAG_SPECTRAL);
                    w.u32(s.basis.features());
                    w.u32(s.basis.rank());
                    w.u64(s.basis.n_fitted());
                    w.u8(match s.filter.kind() {
                        FilterKind::ReluRidge => 0,
                        FilterKind::NegExp => 1,
                    });
                    w.floats(s.basis.mean());
                    w.floats(s.basis.components().data());
                    w.floats(s.basis.singular_values());
                    w.floats(s.filter.gamma());
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Model, String> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != MODEL_FILE_VERSION as usize {
            return Err(format!("unsupported version {version}"));
        }
        let input = MapShape::new(r.u32()?, r.u32()?, r.u32()?);
        let count = r.u32()?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let layer = match r.u8()? {
                TAG_CONV => {
                    let (in_c, out_c, kernel, padding) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                    Layer::Conv2d(Conv2d {
                        in_c,
                        out_c,
                        kernel,
                        padding,
                        weight: r.floats(out_c * in_c * kernel * kernel)?,
                        bias: r.floats(out_c)?,
                    })
                }
                TAG_BN => {
                    let channels = r.u32()?;
                    let eps = r.f64()?;
                    let mode = match r.u8()? {
                        0 => BnMode::FrozenStats,
                        1 => BnMode::BatchStats,
                        m => return Err(format!("unknown batch-norm mode {m}")),
                    };
                    Layer::BatchNorm(BatchNorm {
                        channels,
                        eps,
                        mode,
                        running_mean: r.floats(channels)?,
                        running_var: r.floats(channels)?,
                        scale: r.floats(channels)?,
                        shift: r.floats(channels)?,
                    })
                }
                TAG_RELU => Layer::Relu,
                TAG_FLATTEN => Layer::Flatten,
                TAG_LINEAR => {
                    let (in_f, out_f) = (r.u32()?, r.u32()?);
                    Layer::Linear(Linear {
                        in_f,
                        out_f,
                        weight: r.floats(in_f * out_f)?,
                        bias: r.floats(out_f)?,
                    })
                }
                TAG_SPECTRAL => {
                    let (p, l, n_fitted) = (r.u32()?, r.u32()?, r.u64()?);
                    let kind = match r.u8()? {
                        0 => FilterKind::ReluRidge,
                        1 => FilterKind::NegExp,
                        k => return Err(format!("unknown filter kind {k}")),
                    };
                    let mean = r.floats(p)?;
                    let comps = Matrix::new(l, p, r.floats(l * p)?).map_err(|e| e.to_string())?;
                    let s = r.floats(l)?;
                    let gamma = r.floats(l)?;
                    let basis = PcaBasis::from_parts(mean, comps, s, n_fitted).map_err(|e| e.to_string())?;
                    let filter = SpectralFilter::with_gamma(kind, basis.singular_values().to_vec(), gamma)
                        .map_err(|e| e.to_string())?;
                    Layer::Spectral(SpectralLayer { basis, filter })
                }
                t => return Err(format!("unknown layer tag {t}")),
            };
            layers.push(layer);
        }
        if r.pos != buf.len() {
            return Err(format!("{} trailing bytes", buf.len() - r.pos));
        }
        Model::new(input, layers).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&buf).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }
}
