//! Dense scene-coordinate maps and the `SCM1` binary file format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! b"SCM1" | u32 width | u32 height | u32 channels (= 3)
//! width * height * 3 f32, row-major, X Y Z interleaved per pixel (meters)
//! width * height u8 validity mask (1 valid, 0 invalid)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"SCM1";

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}, expected SCM1")]
    BadMagic([u8; 4]),
    #[error("unsupported channel count {0}, expected 3")]
    Channels(u32),
    #[error("mask value {0} at pixel {1} is neither 0 nor 1")]
    BadMask(u8, usize),
    #[error("map dimensions {width}x{height} do not match data length")]
    Dimensions { width: u32, height: u32 },
}

/// H×W world coordinates with a per-pixel validity mask. Invalid pixels
/// hold `(0, 0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCoordMap {
    width: u32,
    height: u32,
    coords: Vec<[f32; 3]>,
    mask: Vec<u8>,
}

impl SceneCoordMap {
    /// All-invalid map.
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self { width, height, coords: vec![[0.0; 3]; n], mask: vec![0; n] }
    }

    pub fn from_parts(width: u32, height: u32, coords: Vec<[f32; 3]>, mask: Vec<u8>) -> Result<Self, ScmError> {
        let n = width as usize * height as usize;
        if coords.len() != n || mask.len() != n {
            return Err(ScmError::Dimensions { width, height });
        }
        if let Some((i, &m)) = mask.iter().enumerate().find(|(_, &m)| m > 1) {
            return Err(ScmError::BadMask(m, i));
        }
        Ok(Self { width, height, coords, mask })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y as usize * self.width as usize + x as usize
    }

    pub fn is_valid(&self, x: u32, y: u32) -> bool {
        self.mask[self.offset(x, y)] == 1
    }

    pub fn get(&self, x: u32, y: u32) -> Option<[f32; 3]> {
        let i = self.offset(x, y);
        (self.mask[i] == 1).then_some(self.coords[i])
    }

    pub fn set(&mut self, x: u32, y: u32, world: [f32; 3]) {
        let i = self.offset(x, y);
        self.coords[i] = world;
        self.mask[i] = 1;
    }

    pub fn invalidate(&mut self, x: u32, y: u32) {
        let i = self.offset(x, y);
        self.coords[i] = [0.0; 3];
        self.mask[i] = 0;
    }

    pub fn coords(&self) -> &[[f32; 3]] {
        &self.coords
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.valid_count() as f64 / self.mask.len() as f64
    }

    /// Iterates `(x, y, world)` over valid pixels in row-major order.
    pub fn valid_pixels(&self) -> impl Iterator<Item = (u32, u32, [f32; 3])> + '_ {
        let w = self.width as usize;
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 1)
            .map(move |(i, _)| ((i % w) as u32, (i / w) as u32, self.coords[i]))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.width, self.height, 3] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.coords.len() * 12);
        for c in &self.coords {
            for v in c {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        w.write_all(&self.mask)?;
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ScmError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ScmError::BadMagic(magic));
        }
        let mut word = [0u8; 4];
        let mut next_u32 = |r: &mut R| -> Result<u32, ScmError> {
            r.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        let width = next_u32(&mut r)?;
        let height = next_u32(&mut r)?;
        let channels = next_u32(&mut r)?;
        if channels != 3 {
            return Err(ScmError::Channels(channels));
        }
        let n = (width as usize)
            .checked_mul(height as usize)
            .ok_or(ScmError::Dimensions { width, height })?;
        let mut raw = vec![0u8; n * 12];
        r.read_exact(&mut raw)?;
        let coords = raw
            .chunks_exact(12)
            .map(|c| {
                let f = |k: usize| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap());
                [f(0), f(1), f(2)]
            })
            .collect();
        let mut mask = vec![0u8; n];
        r.read_exact(&mut mask)?;
        Self::from_parts(width, height, coords, mask)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScmError> {
        self.write_to(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScmError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
