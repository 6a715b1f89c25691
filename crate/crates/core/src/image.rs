//! Grayscale images plus binary PGM (P5) and PEPF float32 raster I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grayscale image with finite real intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        Error::check_len(width * height, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite intensity at pixel {i}")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Same dimensions, new pixel values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.width, self.height, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    /// Top-left `w × h` window.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid("crop window exceeds image"));
        }
        let mut out = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            out.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Self::new(w, h, out)
    }

    /// Reads a P5 PGM; samples are returned unscaled (0..=maxval).
    pub fn read_pgm(path: impl AsRef<Path>) -> Result<(Self, u16)> {
        let bytes = fs::read(path)?;
        decode_pgm(&bytes)
    }

    /// Writes a P5 PGM. Values are multiplied by `scale`, rounded and clipped to `[0, maxval]`.
    pub fn write_pgm(&self, path: impl AsRef<Path>, maxval: u16, scale: f64) -> Result<()> {
        let bytes = encode_pgm(self, maxval, scale)?;
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read_pepf(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        decode_pepf(&bytes)
    }

    pub fn write_pepf(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&encode_pepf(self)?)?;
        Ok(())
    }

    /// Loads either format, dispatching on the magic bytes. PGM samples are divided by `maxval`.
    pub fn read_any(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(PEPF_MAGIC) {
            decode_pepf(&bytes)
        } else {
            let (img, maxval) = decode_pgm(&bytes)?;
            img.map(|v| v / maxval as f64)
        }
    }
}

const PEPF_MAGIC: &[u8; 4] = b"PEPF";

pub fn encode_pepf(img: &Image) -> Result<Vec<u8>> {
    let w = u32::try_from(img.width).map_err(|_| Error::invalid("width exceeds u32"))?;
    let h = u32::try_from(img.height).map_err(|_| Error::invalid("height exceeds u32"))?;
    let mut out = Vec::with_capacity(16 + 4 * img.len());
    out.extend_from_slice(PEPF_MAGIC);
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &v in &img.data {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::invalid("value overflows float32"));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_pepf(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 16 || &bytes[..4] != PEPF_MAGIC {
        return Err(Error::Format("missing PEPF header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (w, h) = (word(4), word(8));
    let n = w
        .checked_mul(h)
        .ok_or_else(|| Error::Format("PEPF dimensions overflow".into()))?;
    if bytes.len() != 16 + 4 * n {
        return Err(Error::Format(format!(
            "PEPF payload has {} bytes, expected {}",
            bytes.len() - 16,
            4 * n
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Image::new(w, h, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn encode_pgm(img: &Image, maxval: u16, scale: f64) -> Result<Vec<u8>> {
    if maxval == 0 {
        return Err(Error::invalid("maxval must be positive"));
    }
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, maxval).into_bytes();
    for &v in &img.data {
        let s = (v * scale).round().clamp(0.0, maxval as f64) as u16;
        if maxval < 256 {
            out.push(s as u8);
        } else {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(Image, u16)> {
    let mut pos = 0usize;
    let mut fields = [0usize; 3];
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("not a binary PGM (P5)".into()));
    }
    pos += 2;
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated PGM header".into())),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad PGM header field".into()))?;
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let n = w * h;
    if bytes.len() < pos + n * bps {
        return Err(Error::Format("truncated PGM raster".into()));
    }
    let raster = &bytes[pos..pos + n * bps];
    let data = if bps == 1 {
        raster.iter().map(|&b| b as f64).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
            .collect()
    };
    let img = Image::new(w, h, data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((img, maxval as u16))
}
