//! 8-bit grayscale raster with edge-clamped access and binary PGM (P5)
//! reading and writing. The raster format is deliberately dependency-free;
//! PGM is the interchange format the CLI reads and writes.

use crate::error::{Error, Result};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DegenerateImage);
        }
        Ok(Self {
            width,
            height,
            pixels: vec![0; width * height],
        })
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DegenerateImage);
        }
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch {
                context: "image pixel buffer",
                expected: width * height,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Pixel read with coordinates clamped to the image border. Landmark
    /// estimates can wander outside small images; clamping keeps feature
    /// extraction total.
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64) -> u8 {
        let cx = x.clamp(0, self.width as i64 - 1) as usize;
        let cy = y.clamp(0, self.height as i64 - 1) as usize;
        self.pixels[cy * self.width + cx]
    }

    pub fn fill(&mut self, v: u8) {
        self.pixels.fill(v);
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let bad = |msg: String| Error::ModelFormat(format!("{}: {msg}", path.display()));
        let magic = read_token(&mut reader)?.ok_or_else(|| bad("empty file".into()))?;
        if magic != "P5" {
            return Err(bad(format!("expected P5 magic, found {magic:?}")));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let tok = read_token(&mut reader)?.ok_or_else(|| bad("truncated header".into()))?;
            *d = tok
                .parse()
                .map_err(|_| bad(format!("bad header token {tok:?}")))?;
        }
        let [width, height, maxval] = dims;
        if maxval != 255 {
            return Err(bad(format!("unsupported maxval {maxval}, expected 255")));
        }
        if width == 0 || height == 0 {
            return Err(Error::DegenerateImage);
        }
        let mut pixels = vec![0u8; width * height];
        reader.read_exact(&mut pixels).map_err(|_| {
            bad(format!(
                "pixel payload shorter than {} bytes",
                width * height
            ))
        })?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }
}

/// Next whitespace-delimited header token, skipping `#` comments. Exactly
/// one byte of whitespace terminates the token, so the pixel payload that
/// follows the maxval stays untouched.
fn read_token<R: BufRead>(r: &mut R) -> Result<Option<String>> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Ok(if tok.is_empty() { None } else { Some(tok) });
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            while r.read(&mut byte)? == 1 && byte[0] != b'\n' {}
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(Some(tok));
        }
        tok.push(b as char);
    }
}
