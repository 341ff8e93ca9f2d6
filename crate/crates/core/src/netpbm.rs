//! Binary PGM (P5) and PPM (P6) images with maxval 255.
//!
//! Arrays are `[1, h, w]` (gray) or `[3, h, w]` (RGB, channel-major). A
//! 1-D array of length `n` is written as a `1 x n` gray image. Values are
//! clamped to `[0, 1]` and scaled by 255 on export; reading divides by 255.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::array::Array;
use crate::error::{Error, Result};

fn geometry(arr: &Array) -> Result<(usize, usize, usize)> {
    match *arr.shape() {
        [n] => Ok((1, 1, n)),
        [h, w] => Ok((1, h, w)),
        [c @ (1 | 3), h, w] => Ok((c, h, w)),
        _ => Err(Error::format(
            "image",
            format!("cannot render array of shape {:?}", arr.shape()),
        )),
    }
}

#[inline]
fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode as P5 (one channel) or P6 (three channels).
pub fn encode(arr: &Array) -> Result<Vec<u8>> {
    let (c, h, w) = geometry(arr)?;
    let mut out = Vec::with_capacity(20 + c * h * w);
    write!(out, "{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" })?;
    let data = arr.data();
    if c == 1 {
        out.extend(data.iter().map(|&v| to_byte(v)));
    } else {
        let plane = h * w;
        for i in 0..plane {
            for ch in 0..3 {
                out.push(to_byte(data[ch * plane + i]));
            }
        }
    }
    Ok(out)
}

pub fn write_image(arr: &Array, path: &Path) -> Result<()> {
    fs::write(path, encode(arr)?)?;
    Ok(())
}

struct Header<'a> {
    rest: &'a [u8],
}

impl<'a> Header<'a> {
    fn skip_ws_and_comments(&mut self) {
        loop {
            while let Some((&b, tail)) = self.rest.split_first() {
                if b.is_ascii_whitespace() {
                    self.rest = tail;
                } else {
                    break;
                }
            }
            if self.rest.first() == Some(&b'#') {
                let end = self
                    .rest
                    .iter()
                    .position(|&b| b == b'\n')
                    .unwrap_or(self.rest.len());
                self.rest = &self.rest[end..];
            } else {
                return;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_ws_and_comments();
        let end = self
            .rest
            .iter()
            .position(|b| !b.is_ascii_digit())
            .unwrap_or(self.rest.len());
        if end == 0 {
            return Err(Error::format("netpbm", "expected a number in header"));
        }
        let s = std::str::from_utf8(&self.rest[..end]).expect("ascii digits");
        self.rest = &self.rest[end..];
        s.parse()
            .map_err(|_| Error::format("netpbm", format!("header value {s} out of range")))
    }
}

/// Decode a P5/P6 image into `[c, h, w]` with values in `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Array> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::format("netpbm", "expected P5 or P6 magic")),
    };
    let mut hdr = Header { rest: &bytes[2..] };
    let w = hdr.number()?;
    let h = hdr.number()?;
    let maxval = hdr.number()?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            "netpbm",
            format!("unsupported maxval {maxval}"),
        ));
    }
    match hdr.rest.split_first() {
        Some((b, tail)) if b.is_ascii_whitespace() => hdr.rest = tail,
        _ => return Err(Error::format("netpbm", "missing whitespace before raster")),
    }
    let plane = w * h;
    let need = plane * channels;
    if hdr.rest.len() < need {
        return Err(Error::format(
            "netpbm",
            format!("raster has {} bytes, need {need}", hdr.rest.len()),
        ));
    }
    let scale = maxval as f32;
    let raster = &hdr.rest[..need];
    let mut data = vec![0.0f32; need];
    if channels == 1 {
        for (d, &b) in data.iter_mut().zip(raster) {
            *d = f32::from(b) / scale;
        }
    } else {
        for i in 0..plane {
            for ch in 0..3 {
                data[ch * plane + i] = f32::from(raster[i * 3 + ch]) / scale;
            }
        }
    }
    Array::new(vec![channels, h, w], data)
}

pub fn read_image(path: &Path) -> Result<Array> {
    decode(&fs::read(path)?)
}
