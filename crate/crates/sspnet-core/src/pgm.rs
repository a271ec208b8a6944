//! Binary 8-bit PGM (P5) reading and writing.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Pixels as f64 scaled into [0, 1].
    pub fn to_unit_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }
}

pub fn write_pgm<W: Write>(w: &mut W, img: &GrayImage) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.pixels)?;
    Ok(())
}

pub fn write_pgm_file(path: &Path, img: &GrayImage) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pgm(&mut f, img)
}

pub fn read_pgm<R: Read>(r: &mut R) -> Result<GrayImage> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_pgm(&bytes)
}

pub fn read_pgm_file(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path)?;
    parse_pgm(&bytes)
}

fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and '#' comment lines
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data("truncated pgm header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token(bytes)?;
    if magic != "P5" {
        return Err(Error::data(format!("expected P5 pgm, got '{magic}'")));
    }
    let width: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::data("bad pgm width"))?;
    let height: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::data("bad pgm height"))?;
    let maxval: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::data("bad pgm maxval"))?;
    if maxval != 255 {
        return Err(Error::data(format!("unsupported pgm maxval {maxval}")));
    }
    // exactly one whitespace byte separates header and payload
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(Error::data("pgm payload truncated"));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}
