//! Rank-4 feature maps in `(batch, channel, height, width)` layout.
//!
//! Storage is row-major `f64` with the spatial plane of each `(b, c)` pair
//! contiguous, so per-channel statistics reduce over a single slice.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl FeatureMap {
    /// Builds a feature map, validating dimensions, length, and finiteness.
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "all dimensions must be >= 1, got {dims:?}"
            )));
        }
        let expect = dims.iter().product::<usize>();
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match dims {:?} (= {})",
                data.len(),
                dims,
                expect
            )));
        }
        let fm = FeatureMap { dims, data };
        fm.ensure_finite()?;
        Ok(fm)
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        let len = dims.iter().product();
        FeatureMap { dims, data: vec![0.0; len] }
    }

    /// Builds from a function of `(b, c, h, w)` indices.
    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut fm = FeatureMap::zeros(dims);
        let [bs, cs, hs, ws] = dims;
        let mut i = 0;
        for b in 0..bs {
            for c in 0..cs {
                for h in 0..hs {
                    for w in 0..ws {
                        fm.data[i] = f(b, c, h, w);
                        i += 1;
                    }
                }
            }
        }
        fm
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.dims[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// Number of spatial positions per channel (H * W).
    #[inline]
    pub fn spatial_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.idx(b, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous spatial slice of one `(b, c)` channel.
    #[inline]
    pub fn channel(&self, b: usize, c: usize) -> &[f64] {
        let n = self.spatial_len();
        let start = (b * self.dims[1] + c) * n;
        &self.data[start..start + n]
    }

    #[inline]
    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let n = self.spatial_len();
        let start = (b * self.dims[1] + c) * n;
        &mut self.data[start..start + n]
    }

    /// Rejects NaN/Inf entries. Every statistics operation calls this on
    /// entry rather than letting NaN propagate silently.
    pub fn ensure_finite(&self) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                let w = self.dims[3];
                let h = self.dims[2];
                let c = self.dims[1];
                let pos = (i / (c * h * w), (i / (h * w)) % c, (i / w) % h, i % w);
                return Err(Error::NonFinite(format!(
                    "value {v} at (b, c, h, w) = {pos:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn same_dims(&self, other: &FeatureMap) -> bool {
        self.dims == other.dims
    }
}
