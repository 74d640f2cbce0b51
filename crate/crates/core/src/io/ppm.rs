//! Binary PPM (`P6`, 8-bit) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbBytes {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode(img: &RgbBytes) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<RgbBytes> {
    let fail = |reason: &str| Error::format(origin, reason.to_string());
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(fail("not a binary PPM (P6) file"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(fail("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fail("malformed header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail("header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail("missing separator after header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(fail("only 8-bit (maxval 255) images are supported"));
    }
    if width == 0 || height == 0 {
        return Err(fail("empty image"));
    }
    let need = width * height * 3;
    if bytes.len() - pos != need {
        return Err(fail("pixel payload length does not match header"));
    }
    Ok(RgbBytes { width, height, pixels: bytes[pos..].to_vec() })
}

pub fn write(path: impl AsRef<Path>, img: &RgbBytes) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<RgbBytes> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
