//! Binary PPM (P6) reading and writing, 8-bit RGB only.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl Rgb8 {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Rgb8 {
            width,
            height,
            pixels: fill.repeat(width * height),
        }
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::Format(format!("unsupported PPM kind {:?}", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PPM header field {s:?}")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("PPM maxval {maxval} is not 255")));
        }
        pos += 1;
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(Error::Format("truncated PPM pixel data".into()));
        }
        Ok(Rgb8 {
            width,
            height,
            pixels: bytes[pos..pos + need].to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_comment() {
        let mut img = Rgb8::new(3, 2, [1, 2, 3]);
        img.set(2, 1, [255, 0, 9]);
        assert_eq!(Rgb8::decode(&img.encode()).unwrap(), img);
        let mut commented = b"P6\n# made by hand\n3 2\n255\n".to_vec();
        commented.extend_from_slice(&img.pixels);
        assert_eq!(Rgb8::decode(&commented).unwrap(), img);
        assert_eq!(img.mirrored().get(0, 1), [255, 0, 9]);
    }

    #[test]
    fn rejects_other_formats() {
        assert!(Rgb8::decode(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(Rgb8::decode(b"P6\n2 2\n255\n\x00").is_err());
    }
}
