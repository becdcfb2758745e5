//! Binary checkpoints for backbone and classifier parameters.
//!
//! Layout (all integers `u32` little-endian, values `f64` little-endian):
//!
//! ```text
//! backbone:   "SGBB" version config_len config(TOML) n_tensors {h w c data}*
//! classifier: "SGCL" version gamma feature side_h side_w slope {h w c data}×6
//! ```

use std::fs;
use std::path::Path;

use crate::backbone::{BackboneConfig, BackboneParams};
use crate::classifier::{ClassifierParams, SpectrumFeature};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const BACKBONE_MAGIC: &[u8; 4] = b"SGBB";
const CLASSIFIER_MAGIC: &[u8; 4] = b"SGCL";
const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    put_u32(buf, t.height());
    put_u32(buf, t.width());
    put_u32(buf, t.channels());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bad(&self, reason: impl Into<String>) -> Error {
        Error::BadCheckpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.bad("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(self.bad("wrong magic bytes"));
        }
        let v = self.u32()?;
        if v != VERSION as usize {
            return Err(self.bad(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let (h, w, c) = (self.u32()?, self.u32()?, self.u32()?);
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .filter(|&n| n <= (self.bytes.len() - self.pos) / 8)
            .ok_or_else(|| self.bad("tensor size exceeds file"))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::from_vec(h, w, c, data).map_err(|e| self.bad(e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.bad("trailing bytes"));
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_backbone(params: &BackboneParams, config: &BackboneConfig) -> Result<Vec<u8>> {
    let cfg = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(BACKBONE_MAGIC);
    put_u32(&mut buf, VERSION as usize);
    put_u32(&mut buf, cfg.len());
    buf.extend_from_slice(cfg.as_bytes());
    let tensors = params.tensors();
    put_u32(&mut buf, tensors.len());
    for t in tensors {
        put_tensor(&mut buf, t);
    }
    Ok(buf)
}

pub fn save_backbone(
    path: impl AsRef<Path>,
    params: &BackboneParams,
    config: &BackboneConfig,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_backbone(params, config)?).map_err(|e| Error::io(path, e))
}

pub fn load_backbone(path: impl AsRef<Path>) -> Result<(BackboneParams, BackboneConfig)> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    r.header(BACKBONE_MAGIC)?;
    let len = r.u32()?;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| r.bad("config is not UTF-8"))?;
    let config: BackboneConfig = toml::from_str(text).map_err(|e| r.bad(e.to_string()))?;
    config.validate().map_err(|e| r.bad(e.to_string()))?;
    let mut params = BackboneParams::init(&config, &mut RngStream::new(0))?;
    let n = r.u32()?;
    if n != params.tensors().len() {
        return Err(r.bad(format!(
            "expected {} tensors for this configuration, found {n}",
            params.tensors().len()
        )));
    }
    for slot in params.tensors_mut() {
        let t = r.tensor()?;
        if t.shape() != slot.shape() {
            return Err(r.bad(format!(
                "tensor shape {} does not match configuration ({})",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    r.finish()?;
    Ok((params, config))
}

pub fn encode_classifier(params: &ClassifierParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CLASSIFIER_MAGIC);
    put_u32(&mut buf, VERSION as usize);
    put_u32(&mut buf, params.gamma);
    put_u32(&mut buf, params.feature.code() as usize);
    put_u32(&mut buf, params.input_side.0);
    put_u32(&mut buf, params.input_side.1);
    buf.extend_from_slice(&params.leaky_slope.to_le_bytes());
    for t in params.tensors() {
        put_tensor(&mut buf, t);
    }
    buf
}

pub fn save_classifier(path: impl AsRef<Path>, params: &ClassifierParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_classifier(params)).map_err(|e| Error::io(path, e))
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<ClassifierParams> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    r.header(CLASSIFIER_MAGIC)?;
    let gamma = r.u32()?;
    let code = r.u32()?;
    let feature = SpectrumFeature::from_code(code as u32)
        .ok_or_else(|| r.bad(format!("unknown spectrum feature {code}")))?;
    let input_side = (r.u32()?, r.u32()?);
    let leaky_slope = r.f64()?;
    let mut ts = Vec::with_capacity(6);
    for _ in 0..6 {
        ts.push(r.tensor()?);
    }
    r.finish()?;
    let [w1, b1, w2, b2, w3, b3]: [Tensor; 6] = ts.try_into().expect("six tensors");
    let p = ClassifierParams {
        gamma,
        feature,
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
        leaky_slope,
        input_side,
    };
    p.validate().map_err(|e| r.bad(e.to_string()))?;
    Ok(p)
}
