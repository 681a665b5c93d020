//! Vision-embedding fixtures.
//!
//! The vision tower is out of scope; images enter the model as precomputed
//! per-image embeddings (256 rows of `d_vision` floats) read from a fixture
//! file: header (magic, version, d_vision, image count) followed by
//! row-major 32-bit little-endian floats, 256 rows per image.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::TOKENS_PER_IMAGE;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VEMB";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct VisionFixture {
    pub d_vision: usize,
    images: Vec<Tensor>,
}

impl VisionFixture {
    pub fn new(d_vision: usize, images: Vec<Tensor>) -> Result<VisionFixture> {
        for (i, img) in images.iter().enumerate() {
            if img.shape() != [TOKENS_PER_IMAGE, d_vision] {
                return Err(Error::shape(format!(
                    "image {i} has shape {:?}, expected [{TOKENS_PER_IMAGE}, {d_vision}]",
                    img.shape()
                )));
            }
        }
        Ok(VisionFixture { d_vision, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, index: u32) -> Result<&Tensor> {
        self.images.get(index as usize).ok_or_else(|| {
            Error::data(format!(
                "image index {index} out of range for fixture with {} images",
                self.images.len()
            ))
        })
    }

    /// Deterministic synthetic fixture for tests and demos.
    pub fn synthetic(count: usize, d_vision: usize, seed: u64) -> VisionFixture {
        let mut images = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = Rng::from_stream(seed, i as u64);
            images.push(Tensor::uniform(
                vec![TOKENS_PER_IMAGE, d_vision],
                -1.0,
                1.0,
                &mut rng,
            ));
        }
        VisionFixture { d_vision, images }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.d_vision as u32).to_le_bytes());
        buf.extend_from_slice(&(self.images.len() as u32).to_le_bytes());
        for img in &self.images {
            for &v in img.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::data(format!("cannot create {}: {e}", path.display())))?;
        f.write_all(&buf)
            .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<VisionFixture> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        if bytes.len() < 16 {
            return Err(Error::format(format!(
                "vision fixture too short: {} bytes, header needs 16",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::format("bad vision fixture magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(format!(
                "vision fixture version {version}, expected {VERSION}"
            )));
        }
        let d_vision = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let expected = 16 + count * TOKENS_PER_IMAGE * d_vision * 4;
        if bytes.len() != expected {
            return Err(Error::format(format!(
                "vision fixture truncated: expected {expected} bytes, got {}",
                bytes.len()
            )));
        }
        let mut images = Vec::with_capacity(count);
        let mut off = 16;
        for _ in 0..count {
            let n = TOKENS_PER_IMAGE * d_vision;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                data.push(v as f64);
                off += 4;
            }
            images.push(Tensor::from_vec(vec![TOKENS_PER_IMAGE, d_vision], data)?);
        }
        Ok(VisionFixture { d_vision, images })
    }
}
