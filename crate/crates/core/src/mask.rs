//! Packed binary masks over a fixed H×W pixel grid.
//!
//! Rows are stored as u8 bitsets, MSB-first, each row padded to a byte
//! boundary. This is also the on-disk layout of `AR2MASKB` records.

use crate::error::{Error, Result};
use crate::types::BBox;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        let stride = width.div_ceil(8);
        BinaryMask {
            height,
            width,
            bits: vec![0; stride * height],
        }
    }

    /// Wraps packed rows. Padding bits past `width` must be zero.
    pub fn from_packed(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        let stride = width.div_ceil(8);
        if bits.len() != stride * height {
            return Err(Error::format(format!(
                "mask payload is {} bytes, expected {}",
                bits.len(),
                stride * height
            )));
        }
        let pad = stride * 8 - width;
        if pad > 0 {
            let pad_mask = (1u8 << pad) - 1;
            if bits.chunks(stride).any(|row| row[stride - 1] & pad_mask != 0) {
                return Err(Error::format("mask padding bits are set"));
            }
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = BinaryMask::empty(height, width);
        for r in 0..height {
            for c in 0..width {
                if f(r, c) {
                    m.set(r, c, true);
                }
            }
        }
        m
    }

    /// Mask covering the half-open box.
    pub fn from_box(height: usize, width: usize, b: &BBox) -> Self {
        let (r0, r1) = (b.y0 as usize, (b.y1 as usize).min(height));
        let (c0, c1) = (b.x0 as usize, (b.x1 as usize).min(width));
        BinaryMask::from_fn(height, width, |r, c| {
            (r0..r1).contains(&r) && (c0..c1).contains(&c)
        })
    }

    /// Ellipse inscribed in the box (pixel centers inside the ellipse).
    pub fn ellipse_in_box(height: usize, width: usize, b: &BBox) -> Self {
        let cy = (b.y0 + b.y1) as f64 / 2.0;
        let cx = (b.x0 + b.x1) as f64 / 2.0;
        let ry = b.height() as f64 / 2.0;
        let rx = b.width() as f64 / 2.0;
        let mut m = BinaryMask::empty(height, width);
        for r in b.y0 as usize..(b.y1 as usize).min(height) {
            for c in b.x0 as usize..(b.x1 as usize).min(width) {
                let dy = (r as f64 + 0.5 - cy) / ry;
                let dx = (c as f64 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    m.set(r, c, true);
                }
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> usize {
        self.width.div_ceil(8)
    }

    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        let byte = self.bits[row * self.stride() + col / 8];
        byte & (0x80 >> (col % 8)) != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        let idx = row * self.stride() + col / 8;
        let bit = 0x80 >> (col % 8);
        if on {
            self.bits[idx] |= bit;
        } else {
            self.bits[idx] &= !bit;
        }
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn same_extent(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Iterates set pixels as `(row, col)` in raster order.
    pub fn iter_ones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let stride = self.stride();
        let width = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .flat_map(move |(i, &b)| {
                let row = i / stride;
                let base = (i % stride) * 8;
                (0..8usize).filter_map(move |k| {
                    let col = base + k;
                    (b & (0x80 >> k) != 0 && col < width).then_some((row, col))
                })
            })
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    /// Mask IoU; zero when both masks are empty or extents differ.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        if !self.same_extent(other) {
            return 0.0;
        }
        let inter = self.intersection_count(other);
        let union = self.popcount() + other.popcount() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Arithmetic mean of member pixel coordinates, `(row, col)`.
    pub fn centroid(&self) -> Result<(f64, f64)> {
        let mut n = 0usize;
        let (mut sr, mut sc) = (0f64, 0f64);
        for (r, c) in self.iter_ones() {
            n += 1;
            sr += r as f64;
            sc += c as f64;
        }
        if n == 0 {
            return Err(Error::EmptyMask);
        }
        Ok((sr / n as f64, sc / n as f64))
    }

    /// Tight half-open bounding box of the set pixels.
    pub fn bounding_box(&self) -> Option<BBox> {
        let mut it = self.iter_ones();
        let (r, c) = it.next()?;
        let (mut r0, mut r1, mut c0, mut c1) = (r, r, c, c);
        for (r, c) in it {
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
        }
        Some(BBox::new(c0 as u32, r0 as u32, c1 as u32 + 1, r1 as u32 + 1))
    }
}
