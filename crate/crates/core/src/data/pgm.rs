//! Binary PGM (P5) reading and writing.

use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

/// Encodes the channel mean as 8-bit P5.
pub fn encode(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_gray().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Image("truncated PGM header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::Image("non-ASCII PGM header".into()))
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    tok.parse().map_err(|_| Error::Image(format!("bad PGM {what} `{tok}`")))
}

/// Decodes P5 with 8- or 16-bit samples into a three-channel image.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != "P5" {
        return Err(Error::Image("not a binary PGM (P5) file".into()));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 || !(1..=65535).contains(&maxval) {
        return Err(Error::Image(format!("unsupported PGM geometry {width}×{height}, maxval {maxval}")));
    }
    pos += 1;
    let n = width * height;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    let body = bytes.get(pos..pos + need).ok_or_else(|| Error::Image("truncated PGM pixel data".into()))?;
    let scale = maxval as f32;
    let gray: Vec<f32> = if wide {
        body.chunks(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / scale).collect()
    } else {
        body.iter().map(|&b| b as f32 / scale).collect()
    };
    Image::from_gray(height, width, &gray)
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode(img))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Image> {
    decode(&std::fs::read(path)?)
}
