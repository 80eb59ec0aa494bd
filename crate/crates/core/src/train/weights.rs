//! Weight file: magic `TRTW`, format version (u32 LE), then one record per
//! parameter: name length (u32), UTF-8 name, rank (u32), dims (u32 each),
//! little-endian f32 values. Records run to the end of the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::params::ParamTree;
use crate::tensor::{Rng, Tensor};

pub const MAGIC: &[u8; 4] = b"TRTW";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_model(params: &ModelParams) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, t) in params.leaves() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Load(format!("file truncated at byte {} while reading {what}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Decodes into the layout of `like`; every parameter must be present with
/// the same shape and no unknown names may appear. Nothing is returned on
/// error.
pub fn decode_model(bytes: &[u8], like: &ModelParams) -> Result<ModelParams> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Load("bad magic, not a weight file".into()));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Load(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let mut records = BTreeMap::new();
    while c.pos < bytes.len() {
        let len = c.u32("name length")?;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Load(format!("parameter name at byte {} is not UTF-8", c.pos - len)))?
            .to_string();
        let rank = c.u32("rank")?;
        let dims = (0..rank).map(|_| c.u32("dims")).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = c.take(count.checked_mul(4).ok_or_else(|| Error::Load(format!("{name}: size overflow")))?, &name)?;
        let data: Vec<f64> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        if records.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::Load(format!("duplicate parameter {name}")));
        }
    }
    let mut out = like.clone();
    let mut err = None;
    out.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match records.remove(&name) {
            None => err = Some(Error::Load(format!("missing parameter {name}"))),
            Some((dims, _)) if dims != t.shape() => {
                err = Some(Error::Load(format!("parameter {name} has shape {dims:?}, model expects {:?}", t.shape())))
            }
            Some((dims, data)) => *t = Tensor::new(&dims, data).expect("shape checked"),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = records.keys().next() {
        return Err(Error::Load(format!("unknown parameter {name}")));
    }
    Ok(out)
}

pub fn save_model(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_model(params)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Loads weights for a model of configuration `cfg`.
pub fn load_model(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let like = ModelParams::init(cfg, &mut Rng::new(0))?;
    decode_model(&bytes, &like).map_err(|e| match e {
        Error::Load(msg) => Error::Load(format!("{}: {msg}", path.display())),
        other => other,
    })
}
