//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit raster with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::invalid(format!("rasters have 1 or 3 channels, not {channels}")));
        }
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{width}x{height}x{channels} raster needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    fn magic(&self) -> &'static str {
        if self.channels == 3 {
            "P6"
        } else {
            "P5"
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("{}\n{} {}\n255\n", self.magic(), self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format!("missing {what} in header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| format!("{what} out of range"))
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err("not a binary PPM (P6) or PGM (P5) file".into()),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("degenerate extents {width}x{height}"));
    }
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported, expected 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err("header not terminated by whitespace".into()),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or("extents overflow")?;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        return Err(format!("raster truncated: {} of {need} bytes", raster.len()));
    }
    if raster.len() > need {
        return Err(format!("{} trailing bytes after raster", raster.len() - need));
    }
    Ok(Raster {
        width,
        height,
        channels,
        data: raster.to_vec(),
    })
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Raster> {
    parse(bytes).map_err(|reason| Error::format(path, reason))
}

fn read_expecting(path: &Path, channels: usize) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let raster = decode(&bytes, path)?;
    if raster.channels != channels {
        let want = if channels == 3 { "PPM (P6)" } else { "PGM (P5)" };
        return Err(Error::format(path, format!("expected a {want} file")));
    }
    Ok(raster)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Raster> {
    read_expecting(path.as_ref(), 3)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Raster> {
    read_expecting(path.as_ref(), 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P5 # gray\n# another\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 200]);
        let r = decode(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!((r.width, r.height, r.channels), (2, 1, 1));
        assert_eq!(r.data, vec![7, 200]);
    }

    #[test]
    fn encode_decode_round_trip() {
        let r = Raster::new(3, 2, 3, (0..18).collect()).unwrap();
        assert_eq!(decode(&r.encode(), Path::new("a.ppm")).unwrap(), r);
    }

    #[test]
    fn malformed_inputs_name_the_file() {
        let cases: [&[u8]; 5] = [b"P3\n1 1\n255\n", b"P6\n1\n", b"P6\n1 1\n65535\n\0\0\0", b"P6\n1 1\n255\n\0\0", b"P5\n1 1\n255"];
        for bytes in cases {
            let err = decode(bytes, Path::new("bad.ppm")).unwrap_err();
            assert!(err.to_string().starts_with("bad.ppm: "), "{err}");
        }
    }
}
