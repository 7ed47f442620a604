//! Binary greymap (P5) encoding of `[0, 1]` maps.

use std::io::{self, Write};

/// `round(255 v)` with `v` clamped to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantize(v)));
    out
}

pub fn write(path: &std::path::Path, width: usize, height: usize, values: &[f64]) -> io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(width, height, values))
}

/// Returns `(width, height, pixels)`.
#[cfg(test)]
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), String> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(format!("unsupported PGM header {fields:?}"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| format!("bad PGM size {s:?}: {e}"));
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(format!("{} pixels for a {w}x{h} image", data.len()));
    }
    Ok((w, h, data.to_vec()))
}
