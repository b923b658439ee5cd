//! Binary masks, polygon rasterisation and COCO uncompressed RLE.

use serde::{Deserialize, Serialize};

/// Row-major `height×width` mask of 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = u8::from(f(y, x));
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// `[x, y, w, h]` of the set pixels, or zeros for an empty mask.
    pub fn bbox(&self) -> [f64; 4] {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        if x0 == usize::MAX {
            return [0.0; 4];
        }
        [x0 as f64, y0 as f64, (x1 - x0) as f64, (y1 - y0) as f64]
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
    }
}

/// COCO uncompressed RLE: alternating run lengths over the column-major
/// flattening, starting with a run of zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub counts: Vec<u64>,
    /// `[height, width]`.
    pub size: [usize; 2],
}

pub fn rle_encode(mask: &BinaryMask) -> Rle {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u64;
    for x in 0..mask.width {
        for y in 0..mask.height {
            let v = u8::from(mask.get(y, x));
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle { counts, size: [mask.height, mask.width] }
}

/// Fails when the runs do not cover exactly `height·width` pixels.
pub fn rle_decode(rle: &Rle) -> Result<BinaryMask, String> {
    let [h, w] = rle.size;
    let total: u64 = rle.counts.iter().sum();
    if total != (h * w) as u64 {
        return Err(format!("RLE covers {total} pixels, expected {}", h * w));
    }
    let mut mask = BinaryMask::empty(h, w);
    let mut pos = 0usize;
    for (i, &run) in rle.counts.iter().enumerate() {
        let run = run as usize;
        if i % 2 == 1 {
            for p in pos..pos + run {
                let (x, y) = (p / h, p % h);
                mask.data[y * w + x] = 1;
            }
        }
        pos += run;
    }
    Ok(mask)
}

/// Even-odd fill of polygons given as flat `[x0, y0, x1, y1, …]` lists. A
/// pixel is set when its centre lies inside; several polygons are unioned.
pub fn rasterize_polygons(polygons: &[Vec<f64>], height: usize, width: usize) -> Result<BinaryMask, String> {
    let mut mask = BinaryMask::empty(height, width);
    for poly in polygons {
        if poly.len() < 6 || poly.len() % 2 != 0 {
            return Err(format!("polygon with {} coordinates", poly.len()));
        }
        if poly.iter().any(|v| !v.is_finite()) {
            return Err("non-finite polygon coordinate".into());
        }
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let mut crossings = Vec::new();
        for y in 0..height {
            let yc = y as f64 + 0.5;
            crossings.clear();
            for i in 0..pts.len() {
                let (xi, yi) = pts[i];
                let (xj, yj) = pts[(i + pts.len() - 1) % pts.len()];
                if (yi > yc) != (yj > yc) {
                    crossings.push(xi + (yc - yi) * (xj - xi) / (yj - yi));
                }
            }
            crossings.sort_by(f64::total_cmp);
            for x in 0..width {
                let xc = x as f64 + 0.5;
                // Number of crossings strictly right of the centre.
                let right = crossings.len() - crossings.partition_point(|&c| c <= xc);
                if right % 2 == 1 {
                    mask.data[y * width + x] = 1;
                }
            }
        }
    }
    Ok(mask)
}
