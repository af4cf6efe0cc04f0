//! Little-endian binary weight files.
//!
//! ```text
//! magic          4 bytes  "TATK"
//! version        u32      1
//! arch tag       u32 length + UTF-8 bytes ("linear" | "mlp" | "conv")
//! input shape    3 × u32  height, width, channels
//! classes        u32
//! blocks (until end of file), each:
//!   name         u32 length + UTF-8 bytes
//!   rank         u32
//!   dims         rank × u32
//!   payload      prod(dims) × f64
//! ```
//! Hyper-parameters (hidden width, filter count, kernel size) are recovered
//! from the block dims and then cross-checked against the declared shape.

use std::path::Path;

use super::nets::{param_layout, Architecture, Param, ToyModel};
use super::{Classifier, InputShape};
use crate::error::{Error, Result};

pub const WEIGHT_MAGIC: &[u8; 4] = b"TATK";
pub const WEIGHT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(u32::try_from(v).expect("dimension exceeds u32")).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn write_weights(model: &ToyModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    put_str(&mut out, model.architecture().tag());
    let shape = model.input_shape();
    put_u32(&mut out, shape.height);
    put_u32(&mut out, shape.width);
    put_u32(&mut out, shape.channels);
    put_u32(&mut out, model.num_classes());
    for p in model.params() {
        put_str(&mut out, &p.name);
        put_u32(&mut out, p.dims.len());
        for &d in &p.dims {
            put_u32(&mut out, d);
        }
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_weights(model: &ToyModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_weights(model)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ToyModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_weights(&bytes).map_err(|e| match e {
        Error::WeightFile(msg) => Error::WeightFile(format!("{}: {msg}", path.display())),
        other => other,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::WeightFile(format!(
                "truncated: missing {what} at byte {} (need {n} bytes, {} left)",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(&format!("{what} length"))?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::WeightFile(format!("{what} is not UTF-8")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn infer_arch(tag: &str, blocks: &[Param]) -> Result<Architecture> {
    let dims = |name: &str| {
        blocks
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.dims.clone())
            .ok_or_else(|| Error::WeightFile(format!("truncated or incomplete: missing parameter block '{name}'")))
    };
    match tag {
        "linear" => Ok(Architecture::Linear),
        "mlp" => Ok(Architecture::Mlp { hidden: *dims("w1")?.first().unwrap_or(&0) }),
        "conv" => {
            let k = dims("k")?;
            if k.len() != 4 || k[1] != k[2] {
                return Err(Error::WeightFile(format!("conv kernel block has dims {k:?}, expected [f, k, k, c]")));
            }
            Ok(Architecture::Conv { filters: k[0], kernel: k[1] })
        }
        other => Err(Error::WeightFile(format!("unknown architecture tag '{other}'"))),
    }
}

pub fn read_weights(bytes: &[u8]) -> Result<ToyModel> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "header magic")?;
    if magic != WEIGHT_MAGIC {
        return Err(Error::WeightFile(format!("bad magic {magic:02x?}, expected \"TATK\"")));
    }
    let version = r.u32("header version")?;
    if version != WEIGHT_VERSION as usize {
        return Err(Error::WeightFile(format!("unsupported version {version}")));
    }
    let tag = r.string("header architecture tag")?;
    let shape = InputShape::new(
        r.u32("header input height")?,
        r.u32("header input width")?,
        r.u32("header input channels")?,
    );
    let classes = r.u32("header class count")?;

    let mut blocks = Vec::new();
    while !r.done() {
        let name = r.string("parameter block name")?;
        let rank = r.u32(&format!("rank of block '{name}'"))?;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&format!("dims of block '{name}'"))?);
        }
        let n: usize = dims.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::WeightFile("block too large".into()))?, &format!("payload of block '{name}'"))?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        blocks.push(Param { name, dims, data });
    }
    let arch = infer_arch(&tag, &blocks)?;
    // Surface missing blocks as truncation before dim checks.
    for (name, _) in param_layout(arch, shape, classes)? {
        if !blocks.iter().any(|b| b.name == name) {
            return Err(Error::WeightFile(format!("truncated or incomplete: missing parameter block '{name}'")));
        }
    }
    ToyModel::from_params(arch, shape, classes, blocks)
}
