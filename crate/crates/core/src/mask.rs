//! Binary masks, bounding boxes and the morphology used by mask extraction.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Axis-aligned box, top-left corner plus size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn longer_side(&self) -> u32 {
        self.w.max(self.h)
    }

    /// `[x, y, w, h]` as COCO floats.
    pub fn to_coco(&self) -> [f64; 4] {
        [self.x as f64, self.y as f64, self.w as f64, self.h as f64]
    }
}

/// Row-major bitset mask.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("count", &self.count())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        let bits = width as usize * height as usize;
        BinaryMask {
            width,
            height,
            words: vec![0; bits.div_ceil(64)],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut mask = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    mask.set(x, y, true);
                }
            }
        }
        mask
    }

    /// Build from a row-major slice of booleans.
    pub fn from_bools(width: u32, height: u32, bits: &[bool]) -> Self {
        assert_eq!(bits.len(), width as usize * height as usize);
        let mut mask = Self::new(width, height);
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            mask.words[i / 64] |= 1 << (i % 64);
        }
        mask
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.get_index(i)).collect()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    #[inline]
    fn get_index(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        debug_assert!(x < self.width && y < self.height);
        self.get_index(y as usize * self.width as usize + x as usize)
    }

    /// Like [`get`](Self::get) but false outside the mask.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as u64) < self.width as u64 && (y as u64) < self.height as u64 && self.get(x as u32, y as u32)
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        debug_assert!(x < self.width && y < self.height);
        let i = y as usize * self.width as usize + x as usize;
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn area_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.count() as f64 / self.len() as f64
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.words.iter().enumerate().flat_map(move |(wi, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let i = wi * 64 + b;
                Some(((i % w) as u32, (i / w) as u32))
            })
        })
    }

    fn same_shape(&self, other: &BinaryMask) {
        assert_eq!(
            (self.width, self.height),
            (other.width, other.height),
            "mask dimensions differ"
        );
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.same_shape(other);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn union_count(&self, other: &BinaryMask) -> usize {
        self.same_shape(other);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum()
    }

    /// Intersection over union; two empty masks have IoU 1.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let union = self.union_count(other);
        if union == 0 {
            return 1.0;
        }
        self.intersection_count(other) as f64 / union as f64
    }

    /// Clear every bit that is set in `other`.
    pub fn subtract(&mut self, other: &BinaryMask) {
        self.same_shape(other);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= !b;
        }
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        self.same_shape(other);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn is_disjoint(&self, other: &BinaryMask) -> bool {
        self.intersection_count(other) == 0
    }

    pub fn invert(&self) -> BinaryMask {
        let mut out = self.clone();
        for w in &mut out.words {
            *w = !*w;
        }
        let tail = self.len() % 64;
        if tail != 0 {
            if let Some(last) = out.words.last_mut() {
                *last &= (1u64 << tail) - 1;
            }
        }
        out
    }

    /// Copy of the region `bbox` as a new mask.
    pub fn crop(&self, bbox: BBox) -> BinaryMask {
        BinaryMask::from_fn(bbox.w, bbox.h, |x, y| self.get(bbox.x + x, bbox.y + y))
    }

    /// Place this mask with its origin at `(x, y)` on an empty
    /// `width`x`height` canvas; bits falling outside are dropped.
    pub fn placed(&self, width: u32, height: u32, x: i64, y: i64) -> BinaryMask {
        let mut out = BinaryMask::new(width, height);
        for (mx, my) in self.iter_set() {
            let (cx, cy) = (x + mx as i64, y + my as i64);
            if cx >= 0 && cy >= 0 && cx < width as i64 && cy < height as i64 {
                out.set(cx as u32, cy as u32, true);
            }
        }
        out
    }

    /// Number of set pixels on the outermost row/column ring.
    pub fn border_count(&self) -> usize {
        border_positions(self.width, self.height)
            .filter(|&(x, y)| self.get(x, y))
            .count()
    }

    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut sx, mut sy) = (0.0, 0.0);
        for (x, y) in self.iter_set() {
            n += 1;
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    pub fn dilate(&self, radius: u32) -> BinaryMask {
        if radius == 0 {
            return self.clone();
        }
        let offsets = disk_offsets(radius);
        let mut out = BinaryMask::new(self.width, self.height);
        for (x, y) in self.iter_set() {
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && nx < self.width as i64 && ny < self.height as i64 {
                    out.set(nx as u32, ny as u32, true);
                }
            }
        }
        out
    }

    /// Erosion with a disk; pixels outside the image do not erode.
    pub fn erode(&self, radius: u32) -> BinaryMask {
        if radius == 0 {
            return self.clone();
        }
        let offsets = disk_offsets(radius);
        let (w, h) = (self.width as i64, self.height as i64);
        let mut out = BinaryMask::new(self.width, self.height);
        for (x, y) in self.iter_set() {
            let keep = offsets.iter().all(|&(dx, dy)| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx < 0 || ny < 0 || nx >= w || ny >= h || self.get(nx as u32, ny as u32)
            });
            if keep {
                out.set(x, y, true);
            }
        }
        out
    }

    pub fn close(&self, radius: u32) -> BinaryMask {
        self.dilate(radius).erode(radius)
    }

    pub fn open(&self, radius: u32) -> BinaryMask {
        self.erode(radius).dilate(radius)
    }

    /// 4-connected components as separate masks, ordered by first pixel in
    /// row-major scan.
    pub fn components(&self) -> Vec<BinaryMask> {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut label = vec![0u32; w * h];
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        for (sx, sy) in self.iter_set() {
            let start = sy as usize * w + sx as usize;
            if label[start] != 0 {
                continue;
            }
            let id = out.len() as u32 + 1;
            let mut comp = BinaryMask::new(self.width, self.height);
            label[start] = id;
            queue.push_back((sx as usize, sy as usize));
            while let Some((x, y)) = queue.pop_front() {
                comp.set(x as u32, y as u32, true);
                let mut visit = |nx: usize, ny: usize| {
                    let i = ny * w + nx;
                    if label[i] == 0 && self.get_index(i) {
                        label[i] = id;
                        queue.push_back((nx, ny));
                    }
                };
                if x > 0 {
                    visit(x - 1, y);
                }
                if x + 1 < w {
                    visit(x + 1, y);
                }
                if y > 0 {
                    visit(x, y - 1);
                }
                if y + 1 < h {
                    visit(x, y + 1);
                }
            }
            out.push(comp);
        }
        out
    }

    /// Largest 4-connected component (earliest in scan order on ties).
    pub fn largest_component(&self) -> BinaryMask {
        let mut best: Option<(usize, BinaryMask)> = None;
        for comp in self.components() {
            let n = comp.count();
            if best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, comp));
            }
        }
        best.map(|(_, m)| m)
            .unwrap_or_else(|| BinaryMask::new(self.width, self.height))
    }
}

/// Offsets of a digital disk `dx² + dy² ≤ r²`.
pub fn disk_offsets(radius: u32) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Positions of the outermost one-pixel ring, each listed once.
pub fn border_positions(width: u32, height: u32) -> impl Iterator<Item = (u32, u32)> {
    ring_positions(width, height, 1)
}

/// Positions within `thickness` pixels of the image edge, each listed once.
pub fn ring_positions(width: u32, height: u32, thickness: u32) -> impl Iterator<Item = (u32, u32)> {
    (0..height).flat_map(move |y| {
        (0..width).filter_map(move |x| {
            let d = x.min(y).min(width - 1 - x).min(height - 1 - y);
            (d < thickness).then_some((x, y))
        })
    })
}

/// Tightest box containing every set pixel.
pub fn mask_to_bbox(mask: &BinaryMask) -> Result<BBox> {
    let mut iter = mask.iter_set();
    let (fx, fy) = iter.next().ok_or(Error::EmptyMask)?;
    let (mut x0, mut y0, mut x1, mut y1) = (fx, fy, fx, fy);
    for (x, y) in iter {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    Ok(BBox {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    })
}
