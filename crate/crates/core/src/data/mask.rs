//! Binary masks, their run-length encoding, and bounding boxes.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Row-major binary raster.
///
/// Serialized as `{height, width, runs}` where `runs` alternates zero/one run
/// lengths starting with a (possibly empty) run of zeros.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "mask raster has {} cells, expected {height}×{width}",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Pixels set in both masks.
    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn or(&self, other: &BinaryMask) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        }
    }

    /// Run-length encoding, row-major, beginning with a run of zeros.
    pub fn rle_encode(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn rle_decode(runs: &[u32], height: usize, width: usize) -> Result<Self> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != (height * width) as u64 {
            return Err(Error::CorruptRle(format!(
                "runs sum to {total}, expected {height}×{width} = {}",
                height * width
            )));
        }
        let mut bits = Vec::with_capacity(height * width);
        for (i, &r) in runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    /// Smallest box containing every set pixel.
    pub fn bounding_box(&self) -> Result<BoundingBox> {
        let mut rows = (usize::MAX, 0usize);
        let mut cols = (usize::MAX, 0usize);
        for r in 0..self.height {
            let line = &self.bits[r * self.width..(r + 1) * self.width];
            let Some(first) = line.iter().position(|&b| b) else { continue };
            let last = line.iter().rposition(|&b| b).unwrap_or(first);
            rows = (rows.0.min(r), r + 1);
            cols = (cols.0.min(first), cols.1.max(last + 1));
        }
        if rows.0 == usize::MAX {
            return Err(Error::EmptyMask);
        }
        Ok(BoundingBox {
            row0: rows.0,
            col0: cols.0,
            row1: rows.1,
            col1: cols.1,
        })
    }

    /// The filled bounding box as a mask of the same dims.
    pub fn to_box_mask(&self) -> Result<BinaryMask> {
        let b = self.bounding_box()?;
        Ok(b.to_mask(self.height, self.width))
    }
}

/// Half-open pixel rectangle `[row0, row1) × [col0, col1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BoundingBox {
    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }

    pub fn to_mask(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |r, c| self.contains(r, c))
    }
}

#[derive(Serialize, Deserialize)]
struct MaskRecord {
    height: usize,
    width: usize,
    runs: Vec<u32>,
}

impl Serialize for BinaryMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MaskRecord {
            height: self.height,
            width: self.width,
            runs: self.rle_encode(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for BinaryMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = MaskRecord::deserialize(d)?;
        BinaryMask::rle_decode(&rec.runs, rec.height, rec.width).map_err(serde::de::Error::custom)
    }
}
