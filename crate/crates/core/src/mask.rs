//! Boolean rasters and binary morphology.

use crate::error::{Error, Result};
use std::collections::VecDeque;

/// Per-pixel flags; `true` marks a specular or invalid pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::dim(format!("mask length {} != {}x{}", bits.len(), width, height)));
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    fn check(&self, other: &BinaryMask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::dim("mask dimensions differ"));
        }
        Ok(())
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Ok(BinaryMask { width: self.width, height: self.height, bits })
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Ok(BinaryMask { width: self.width, height: self.height, bits })
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask { width: self.width, height: self.height, bits: self.bits.iter().map(|b| !b).collect() }
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        self.check(other)?;
        let (mut i, mut u) = (0usize, 0usize);
        for (a, b) in self.bits.iter().zip(&other.bits) {
            i += (*a && *b) as usize;
            u += (*a || *b) as usize;
        }
        Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
    }

    /// Dilation by a disc; pixels outside the image count as clear.
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        let offs = disc_offsets(radius);
        let (w, h) = (self.width as i64, self.height as i64);
        let mut out = vec![false; self.bits.len()];
        for y in 0..h {
            for x in 0..w {
                if !self.bits[(y * w + x) as usize] {
                    continue;
                }
                for (dx, dy) in &offs {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx >= 0 && yy >= 0 && xx < w && yy < h {
                        out[(yy * w + xx) as usize] = true;
                    }
                }
            }
        }
        BinaryMask { width: self.width, height: self.height, bits: out }
    }

    /// Erosion by a disc; pixels outside the image count as set, so
    /// regions touching the border are not eaten from outside.
    pub fn erode(&self, radius: usize) -> BinaryMask {
        let offs = disc_offsets(radius);
        let (w, h) = (self.width as i64, self.height as i64);
        let mut out = vec![false; self.bits.len()];
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) as usize] = offs.iter().all(|(dx, dy)| {
                    let (xx, yy) = (x + dx, y + dy);
                    xx < 0 || yy < 0 || xx >= w || yy >= h || self.bits[(yy * w + xx) as usize]
                });
            }
        }
        BinaryMask { width: self.width, height: self.height, bits: out }
    }

    /// Sets every clear component (4-connected) that does not reach the border.
    pub fn fill_holes(&self) -> BinaryMask {
        let (w, h) = (self.width, self.height);
        let mut outside = vec![false; w * h];
        let mut queue = VecDeque::new();
        let seed = |x: usize, y: usize, outside: &mut Vec<bool>, q: &mut VecDeque<usize>| {
            let i = y * w + x;
            if !self.bits[i] && !outside[i] {
                outside[i] = true;
                q.push_back(i);
            }
        };
        for x in 0..w {
            seed(x, 0, &mut outside, &mut queue);
            seed(x, h - 1, &mut outside, &mut queue);
        }
        for y in 0..h {
            seed(0, y, &mut outside, &mut queue);
            seed(w - 1, y, &mut outside, &mut queue);
        }
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            let mut push = |j: usize| {
                if !self.bits[j] && !outside[j] {
                    outside[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        BinaryMask { width: w, height: h, bits: outside.iter().map(|o| !o).collect() }
    }

    /// 4-connected components of set pixels, as lists of pixel indices.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let (w, h) = (self.width, self.height);
        let mut seen = vec![false; w * h];
        let mut out = Vec::new();
        for start in 0..w * h {
            if !self.bits[start] || seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut k = 0;
            while k < comp.len() {
                let i = comp[k];
                k += 1;
                let (x, y) = (i % w, i / w);
                let mut nbrs = [usize::MAX; 4];
                if x > 0 {
                    nbrs[0] = i - 1;
                }
                if x + 1 < w {
                    nbrs[1] = i + 1;
                }
                if y > 0 {
                    nbrs[2] = i - w;
                }
                if y + 1 < h {
                    nbrs[3] = i + w;
                }
                for j in nbrs {
                    if j != usize::MAX && self.bits[j] && !seen[j] {
                        seen[j] = true;
                        comp.push(j);
                    }
                }
            }
            out.push(comp);
        }
        out
    }
}

/// Offsets of a digital disc `dx² + dy² <= r²`.
pub fn disc_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                v.push((dx, dy));
            }
        }
    }
    v
}
