//! Raw tensor files: an ASCII header line `ZTEN <rank> <extent...>\n`
//! followed by little-endian `f64` values in row-major order.

use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const ZTEN_MAGIC: &str = "ZTEN";

pub fn write_zten<W: Write>(out: &mut W, t: &Tensor) -> std::io::Result<()> {
    let extents: Vec<String> = t.shape().iter().map(|e| e.to_string()).collect();
    writeln!(out, "{ZTEN_MAGIC} {} {}", t.rank(), extents.join(" "))?;
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn encode_zten(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(32 + 8 * t.len());
    write_zten(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

/// Sequential reader over a byte buffer holding one or more ZTEN blocks.
pub struct ZtenReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ZtenReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn is_at_end(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn fail<T>(&self, offset: usize, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset, reason: reason.into() })
    }

    /// Reads one newline-terminated ASCII line.
    pub fn read_line(&mut self) -> Result<&'a str> {
        let start = self.pos;
        let rest = &self.buf[start..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return self.fail(start, "unterminated header line");
        };
        let line = std::str::from_utf8(&rest[..nl])
            .or_else(|_| self.fail(start, "header is not valid UTF-8"))?;
        self.pos = start + nl + 1;
        Ok(line)
    }

    pub fn read_tensor(&mut self) -> Result<Tensor> {
        let header_at = self.pos;
        let line = self.read_line()?;
        let mut fields = line.split_ascii_whitespace();
        if fields.next() != Some(ZTEN_MAGIC) {
            return self.fail(header_at, "missing ZTEN magic");
        }
        let rank: usize = match fields.next().map(str::parse) {
            Some(Ok(r)) if r >= 1 => r,
            _ => return self.fail(header_at, "bad rank field"),
        };
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            match fields.next().map(str::parse::<usize>) {
                Some(Ok(e)) if e > 0 => shape.push(e),
                _ => return self.fail(header_at, "bad extent field"),
            }
        }
        if fields.next().is_some() {
            return self.fail(header_at, "extra header fields");
        }
        let count: usize = shape.iter().product();
        let payload_at = self.pos;
        let needed = count * 8;
        if self.buf.len() - payload_at < needed {
            return self.fail(
                self.buf.len(),
                format!("truncated payload: expected {needed} bytes from offset {payload_at}"),
            );
        }
        let data = self.buf[payload_at..payload_at + needed]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        self.pos = payload_at + needed;
        Tensor::new(shape, data)
    }
}

pub fn decode_zten(buf: &[u8]) -> Result<Tensor> {
    let mut r = ZtenReader::new(buf);
    let t = r.read_tensor()?;
    if !r.is_at_end() {
        return Err(Error::Format { offset: r.offset(), reason: "trailing bytes after tensor".into() });
    }
    Ok(t)
}

pub fn save_zten(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path.as_ref(), encode_zten(t)).map_err(|e| Error::io(path, e))
}

pub fn load_zten(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    decode_zten(&bytes)
}
