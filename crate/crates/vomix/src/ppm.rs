//! Binary PPM (P6) reading and writing, 8-bit RGB only.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

/// Reads one whitespace/comment-separated header token.
fn read_token<R: Read>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(Error::Config("truncated PPM header".into()));
            }
            return Ok(tok);
        }
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
    }
}

pub fn read_ppm(path: &Path) -> Result<PpmImage> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_token(&mut r)?;
    if magic != "P6" {
        return Err(Error::Config(format!(
            "not a binary PPM (expected P6, got \"{magic}\")"
        )));
    }
    let parse = |s: String| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Config(format!("bad PPM header field \"{s}\"")))
    };
    let width = parse(read_token(&mut r)?)?;
    let height = parse(read_token(&mut r)?)?;
    let maxval = parse(read_token(&mut r)?)?;
    if maxval != 255 {
        return Err(Error::Config(format!(
            "unsupported PPM maxval {maxval}, only 255"
        )));
    }
    let mut pixels = vec![0u8; width * height * 3];
    r.read_exact(&mut pixels)
        .map_err(|_| Error::Config("truncated PPM pixel data".into()))?;
    Ok(PpmImage {
        width,
        height,
        pixels,
    })
}

pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height * 3);
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    w.flush()?;
    Ok(())
}
