//! Float images and the `VIARIM1` binary layout: 7-byte magic, height,
//! width, channels as little-endian `u32`, then `h·w·c` little-endian `f32`
//! pixels, row-major with channels innermost.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenizer::{read_f32, read_u32};

const IMAGE_MAGIC: &[u8; 7] = b"VIARIM1";

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::shape(
                "image",
                &[height, width, channels],
                &[pixels.len()],
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        let mut pixels = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len().max(1) as f64
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(IMAGE_MAGIC)?;
        for d in [self.height, self.width, self.channels] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.pixels.len() * 4);
        for p in &self.pixels {
            buf.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != IMAGE_MAGIC {
            return Err(Error::Format("not a VIARIM1 image".into()));
        }
        let h = read_u32(&mut r)? as usize;
        let w = read_u32(&mut r)? as usize;
        let c = read_u32(&mut r)? as usize;
        let pixels = (0..h * w * c)
            .map(|_| read_f32(&mut r).map(f64::from))
            .collect::<Result<_>>()?;
        Self::new(h, w, c, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Portable graymap rendering (first channel, clamped to `[0, 1]`).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in 0..self.height {
            for x in 0..self.width {
                out.push((self.get(y, x, 0).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }
}
