//! Single-channel score maps and binary masks in image space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Row-major single-channel map of scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Map {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "map",
                format!("{height}x{width} map given {} values", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn full(height: usize, width: usize, v: f32) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    /// Channel `c` of a `[C, H, W]` tensor.
    pub fn from_channel<T: Real>(t: &Tensor<T>, c: usize) -> Self {
        let (_, h, w) = t.chw().expect("map source must be [C, H, W]");
        let plane = h * w;
        Self {
            height: h,
            width: w,
            data: t.data()[c * plane..(c + 1) * plane]
                .iter()
                .map(|v| v.as_f64() as f32)
                .collect(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("consistent shape")
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Map {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let coord = |o: usize, scale: f64, n: usize| {
            let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, c - i0 as f64)
        };
        let mut data = Vec::with_capacity(height * width);
        for oy in 0..height {
            let (y0, y1, fy) = coord(oy, sy, self.height);
            for ox in 0..width {
                let (x0, x1, fx) = coord(ox, sx, self.width);
                let top = self.get(y0, x0) as f64 * (1.0 - fx) + self.get(y0, x1) as f64 * fx;
                let bot = self.get(y1, x0) as f64 * (1.0 - fx) + self.get(y1, x1) as f64 * fx;
                data.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
        Map {
            height,
            width,
            data,
        }
    }

    /// Min-max normalization to [0, 1]; constant maps become all zeros.
    pub fn normalized(&self) -> Map {
        let lo = self.data.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = self.max();
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data.iter().map(|&v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Map {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{height}x{width} mask given {} values", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn to_map(&self) -> Map {
        Map {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Fraction of foreground pixels in each `factor x factor` cell.
    pub fn area_average(&self, factor: usize) -> Result<Map> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::shape(
                "area_average",
                format!(
                    "mask {}x{} not divisible by factor {factor}",
                    self.height, self.width
                ),
            ));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut counts = vec![0u32; h * w];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    counts[(y / factor) * w + x / factor] += 1;
                }
            }
        }
        let cell = (factor * factor) as f32;
        Ok(Map {
            height: h,
            width: w,
            data: counts.into_iter().map(|c| c as f32 / cell).collect(),
        })
    }
}
