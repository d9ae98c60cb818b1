//! Weights file: `ZTOY <patch> <dim> <blocks> <steps> <channels> <mlp_hidden>\n`
//! followed by every parameter tensor as a ZTEN block, in
//! [`ToyDenoiser::tensors`] order.

use std::path::Path;

use super::{ToyConfig, ToyDenoiser};
use crate::error::{Error, Result};
use crate::numerics::{write_zten, ZtenReader};

const MAGIC: &str = "ZTOY";

pub fn encode_weights(d: &ToyDenoiser) -> Vec<u8> {
    let c = &d.config;
    let mut buf = format!(
        "{MAGIC} {} {} {} {} {} {}\n",
        c.patch, c.dim, c.blocks, c.steps, c.channels, c.mlp_hidden
    )
    .into_bytes();
    for t in d.tensors() {
        write_zten(&mut buf, t).expect("writing to a Vec cannot fail");
    }
    buf
}

pub fn decode_weights(bytes: &[u8]) -> Result<ToyDenoiser> {
    let mut r = ZtenReader::new(bytes);
    let line = r.read_line()?;
    let fields: Vec<&str> = line.split_ascii_whitespace().collect();
    let bad = |reason: &str| Error::Format { offset: 0, reason: reason.into() };
    if fields.first() != Some(&MAGIC) {
        return Err(bad("missing ZTOY magic"));
    }
    let nums: Vec<usize> = fields[1..]
        .iter()
        .map(|f| f.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad("bad architecture header"))?;
    let &[patch, dim, blocks, steps, channels, mlp_hidden] = nums.as_slice() else {
        return Err(bad("architecture header needs six fields"));
    };
    let config = ToyConfig { patch, channels, dim, blocks, mlp_hidden, steps };
    let mut model = ToyDenoiser::zeros(config)?;
    for slot in model.tensors_mut() {
        let at = r.offset();
        let t = r.read_tensor()?;
        if t.shape() != slot.shape() {
            return Err(Error::Format {
                offset: at,
                reason: format!("tensor shape {:?} does not match expected {:?}", t.shape(), slot.shape()),
            });
        }
        *slot = t;
    }
    if !r.is_at_end() {
        return Err(Error::Format { offset: r.offset(), reason: "trailing bytes after weights".into() });
    }
    Ok(model)
}

pub fn save_weights(path: impl AsRef<Path>, d: &ToyDenoiser) -> Result<()> {
    std::fs::write(path.as_ref(), encode_weights(d)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ToyDenoiser> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    decode_weights(&bytes)
}
