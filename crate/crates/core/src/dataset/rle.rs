//! Uncompressed COCO run-length encoding.
//!
//! Counts alternate between runs of unset and set pixels in column-major
//! order, always starting with an unset run (possibly 0).

use serde::{Deserialize, Serialize};

use crate::mask::{BBox, BinaryMask};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [u32; 2],
    pub counts: Vec<u64>,
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Rle {
        let (w, h) = (mask.width(), mask.height());
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for x in 0..w {
            for y in 0..h {
                let bit = mask.get(x, y);
                if bit != current {
                    counts.push(run);
                    run = 0;
                    current = bit;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle { size: [h, w], counts }
    }

    pub fn height(&self) -> u32 {
        self.size[0]
    }

    pub fn width(&self) -> u32 {
        self.size[1]
    }

    fn check(&self) -> Result<()> {
        let total: u64 = self.counts.iter().sum();
        let expected = self.width() as u64 * self.height() as u64;
        if total != expected {
            return Err(Error::SchemaInvariantViolation(format!(
                "RLE counts sum to {total}, mask has {expected} pixels"
            )));
        }
        Ok(())
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        self.check()?;
        let h = self.height() as u64;
        let mut mask = BinaryMask::new(self.width(), self.height());
        let mut pos = 0u64;
        for (i, &run) in self.counts.iter().enumerate() {
            if i % 2 == 1 {
                for p in pos..pos + run {
                    mask.set((p / h) as u32, (p % h) as u32, true);
                }
            }
            pos += run;
        }
        Ok(mask)
    }

    /// Number of set pixels.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }

    /// Tight box of the set pixels, computed from the runs alone.
    pub fn bbox(&self) -> Result<BBox> {
        self.check()?;
        let h = self.height() as u64;
        let (mut x0, mut x1, mut y0, mut y1) = (u64::MAX, 0, u64::MAX, 0);
        let mut pos = 0u64;
        for (i, &run) in self.counts.iter().enumerate() {
            if i % 2 == 1 && run > 0 {
                let (first, last) = (pos, pos + run - 1);
                let (cx0, cx1) = (first / h, last / h);
                x0 = x0.min(cx0);
                x1 = x1.max(cx1);
                if cx0 == cx1 {
                    y0 = y0.min(first % h);
                    y1 = y1.max(last % h);
                } else {
                    // the bottom of one column joined to the top of the next
                    y0 = 0;
                    y1 = h - 1;
                }
            }
            pos += run;
        }
        if x0 == u64::MAX {
            return Err(Error::EmptyMask);
        }
        Ok(BBox {
            x: x0 as u32,
            y: y0 as u32,
            w: (x1 - x0 + 1) as u32,
            h: (y1 - y0 + 1) as u32,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::mask_to_bbox;
    use proptest::prelude::*;

    #[test]
    fn known_encoding() {
        // 2x3 (w x h), set pixels (0,1), (1,0), (1,1)
        let mask = BinaryMask::from_fn(2, 3, |x, y| (x, y) == (0, 1) || (x == 1 && y < 2));
        let rle = Rle::encode(&mask);
        assert_eq!(rle.size, [3, 2]);
        assert_eq!(rle.counts, vec![1, 1, 1, 2, 1]);
        assert_eq!(rle.area(), 3);
        let first_set = Rle::encode(&BinaryMask::from_fn(2, 2, |_, _| true));
        assert_eq!(first_set.counts, vec![0, 4]);
    }

    #[test]
    fn bad_counts_rejected() {
        let rle = Rle { size: [2, 2], counts: vec![1, 1] };
        assert!(matches!(rle.decode(), Err(Error::SchemaInvariantViolation(_))));
        let empty = Rle { size: [2, 2], counts: vec![4] };
        assert!(matches!(empty.bbox(), Err(Error::EmptyMask)));
    }

    fn masks() -> impl Strategy<Value = BinaryMask> {
        (1u32..24, 1u32..24, any::<u64>(), 0.0f64..1.0).prop_map(|(w, h, seed, density)| {
            let mut state = seed | 1;
            BinaryMask::from_fn(w, h, |_, _| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % 1000) as f64 / 1000.0 < density
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip(mask in masks()) {
            let rle = Rle::encode(&mask);
            prop_assert_eq!(rle.decode().unwrap(), mask.clone());
            prop_assert_eq!(rle.area(), mask.count() as u64);
            prop_assert_eq!(rle.bbox().ok(), mask_to_bbox(&mask).ok());
        }
    }
}
