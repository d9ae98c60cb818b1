//! Binary 8-bit PGM (P5) and PPM (P6) images as `[H, W, C]` tensors in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn fail<T>(offset: usize, reason: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset, reason: reason.into() })
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

fn skip_space_and_comments(buf: &[u8], mut pos: usize) -> usize {
    loop {
        match buf.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(b'#') => {
                while let Some(&b) = buf.get(pos) {
                    pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            _ => return pos,
        }
    }
}

fn read_number(buf: &[u8], pos: usize, what: &str) -> Result<(usize, usize)> {
    let start = skip_space_and_comments(buf, pos);
    let mut end = start;
    while buf.get(end).is_some_and(u8::is_ascii_digit) {
        end += 1;
    }
    if end == start {
        return fail(start, format!("expected {what}"));
    }
    let text = std::str::from_utf8(&buf[start..end]).expect("ascii digits");
    match text.parse::<usize>() {
        Ok(v) => Ok((v, end)),
        Err(_) => fail(start, format!("{what} out of range")),
    }
}

fn parse_header(buf: &[u8]) -> Result<Header> {
    let channels = match buf.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return fail(0, "expected P5 or P6 magic"),
    };
    let (width, pos) = read_number(buf, 2, "width")?;
    let (height, pos) = read_number(buf, pos, "height")?;
    let (maxval, pos) = read_number(buf, pos, "maxval")?;
    if width == 0 || height == 0 {
        return fail(2, "zero image extent");
    }
    if maxval == 0 || maxval > 255 {
        return fail(pos, format!("maxval {maxval} is not an 8-bit depth"));
    }
    match buf.get(pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return fail(pos, "expected a single whitespace byte after maxval"),
    }
    Ok(Header { channels, width, height, maxval, data_offset: pos + 1 })
}

pub fn decode_image(buf: &[u8]) -> Result<Tensor> {
    let h = parse_header(buf)?;
    let count = h.width * h.height * h.channels;
    let payload = &buf[h.data_offset..];
    if payload.len() < count {
        return fail(
            buf.len(),
            format!("truncated payload: expected {count} bytes from offset {}", h.data_offset),
        );
    }
    let scale = h.maxval as f64;
    let data = payload[..count].iter().map(|&b| b as f64 / scale).collect();
    Tensor::new(vec![h.height, h.width, h.channels], data)
}

pub fn encode_image(t: &Tensor) -> Result<Vec<u8>> {
    let &[height, width, channels] = t.shape() else {
        return Err(Error::Dimension(format!("image tensors are [H, W, C], got {:?}", t.shape())));
    };
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Dimension(format!("images need 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| {
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        (v * 255.0).round() as u8
    }));
    Ok(out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    decode_image(&bytes)
}

pub fn write_image(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let bytes = encode_image(t)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

/// Replicates a single-channel image into three channels.
pub fn gray_to_rgb(t: &Tensor) -> Result<Tensor> {
    let &[h, w, 1] = t.shape() else {
        return Err(Error::Dimension(format!("expected [H, W, 1], got {:?}", t.shape())));
    };
    let data = t.data().iter().flat_map(|&v| [v, v, v]).collect();
    Tensor::new(vec![h, w, 3], data)
}
