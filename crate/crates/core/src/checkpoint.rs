//! Checkpoint plumbing: newline-terminated text header lines followed by a
//! little-endian `f32` payload.

use std::io::{Read, Write};

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads one `\n`-terminated UTF-8 line without buffering past it.
pub fn read_line<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let mut bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(CheckpointError::Format("unexpected end of header".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        bytes.push(byte[0]);
    }
    String::from_utf8(bytes).map_err(|_| CheckpointError::Format("header is not UTF-8".into()))
}

/// Reads the first line, checks it starts with `magic`, and returns the rest.
pub fn read_header<R: Read>(r: &mut R, magic: &str) -> Result<String, CheckpointError> {
    let line = read_line(r)?;
    line.strip_prefix(magic)
        .map(|rest| rest.trim().to_owned())
        .ok_or_else(|| {
            CheckpointError::Format(format!("expected `{magic}` header, found `{line}`"))
        })
}

/// Reads a `key value...` line and returns the value part.
pub fn read_field<R: Read>(r: &mut R, key: &str) -> Result<String, CheckpointError> {
    let line = read_line(r)?;
    match line.split_once(' ') {
        Some((k, v)) if k == key => Ok(v.to_owned()),
        _ if line == key => Ok(String::new()),
        _ => Err(CheckpointError::Format(format!(
            "expected `{key}` line, found `{line}`"
        ))),
    }
}

pub fn parse_usize(s: &str) -> Result<usize, CheckpointError> {
    s.trim()
        .parse()
        .map_err(|_| CheckpointError::Format(format!("bad integer `{s}`")))
}

pub fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> Result<(), CheckpointError> {
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>, CheckpointError> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| CheckpointError::Format(format!("payload shorter than {count} floats")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Fails unless the reader is exhausted.
pub fn expect_end<R: Read>(r: &mut R) -> Result<(), CheckpointError> {
    let mut byte = [0u8; 1];
    if r.read(&mut byte)? != 0 {
        return Err(CheckpointError::Format(
            "trailing bytes after payload".into(),
        ));
    }
    Ok(())
}
