//! Binary portable pixmap (P6) reading and writing; byte-deterministic.

use std::path::Path;

use crcrisk_core::raster::Raster;

use crate::error::{read_artifact, CliError, Result};

pub fn encode(raster: &Raster) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", raster.width(), raster.height()).into_bytes();
    out.extend_from_slice(raster.data());
    out
}

pub fn write(path: &Path, raster: &Raster) -> Result<()> {
    std::fs::write(path, encode(raster))?;
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<Raster> {
    let bad = |m: &str| CliError::Format(format!("ppm: {m}"));
    // Header: "P6" <ws> width <ws> height <ws> maxval <single ws> data.
    let mut pos = 0usize;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(&bytes[start..pos]);
    }
    if fields[0] != b"P6" {
        return Err(bad("not a P6 file"));
    }
    let parse = |b: &[u8]| -> Result<u32> {
        std::str::from_utf8(b)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))
    };
    let width = parse(fields[1])?;
    let height = parse(fields[2])?;
    if parse(fields[3])? != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = (width as usize) * (height as usize) * 3;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| bad("pixel data truncated"))?
        .to_vec();
    Raster::from_raw(width, height, data).ok_or_else(|| bad("dimension mismatch"))
}

pub fn read(path: &Path) -> Result<Raster> {
    decode(&read_artifact(path)?)
}
