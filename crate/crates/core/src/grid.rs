//! Dense 2D frames, binary masks and 2D+time stacks.
//!
//! Pixels are addressed as `(i, j)` where `i` is the column (the `x₁`
//! direction) and `j` the row (`x₂`). Storage is row-major.

use crate::error::{Error, Result};

/// Symmetric (half-sample) mirror of an index into `0..n`: `-1 → 0`,
/// `-2 → 1`, `n → n - 1`. Periodic with period `2n`, so any offset is valid.
#[inline]
pub fn mirror(idx: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    let n = n as isize;
    if (0..n).contains(&idx) {
        return idx as usize;
    }
    let m = idx.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// A real-valued 2D image.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Frame {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                found: (data.len(), 1),
            });
        }
        Ok(Frame {
            width,
            height,
            data,
        })
    }

    /// Builds a frame by evaluating `f(i, j)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                data.push(f(i, j));
            }
        }
        Frame {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.width + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.width + i] = v;
    }

    /// Value at a possibly out-of-range position, with mirrored boundaries.
    #[inline]
    pub fn get_mirrored(&self, i: isize, j: isize) -> f64 {
        self.get(mirror(i, self.width), mirror(j, self.height))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Frame {
        Frame {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sum of absolute pixel differences.
    pub fn l1_distance(&self, other: &Frame) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    /// `1` where the value is strictly above `level`.
    pub fn threshold(&self, level: f64) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v > level).collect(),
        }
    }
}

/// A binary image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                found: (data.len(), 1),
            });
        }
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                data.push(f(i, j));
            }
        }
        Mask {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[j * self.width + i]
    }

    /// Out-of-range positions read as background.
    #[inline]
    pub fn get_or_false(&self, i: isize, j: isize) -> bool {
        i >= 0
            && j >= 0
            && (i as usize) < self.width
            && (j as usize) < self.height
            && self.get(i as usize, j as usize)
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[j * self.width + i] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_blank(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Foreground as a `{0, 1}` frame.
    pub fn to_frame(&self) -> Frame {
        Frame {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(k, _)| (k % w, k / w))
    }
}

/// Intensity convention carried by a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntensityRange {
    /// Real values in `[0, 1]`.
    Unit,
    /// Integer values in `[0, 255]`.
    Byte,
    /// Raw integer values as loaded (8- or 16-bit).
    Raw,
}

/// A 2D+time sequence of equally sized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    frames: Vec<Frame>,
    /// Physical pixel side.
    pub pixel_size: f64,
    pub range: IntensityRange,
}

impl ImageStack {
    pub fn new(frames: Vec<Frame>, pixel_size: f64, range: IntensityRange) -> Result<Self> {
        let first = frames.first().ok_or(Error::Empty("stack has no frames"))?;
        let dims = first.dims();
        for f in &frames {
            if f.dims() != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    found: f.dims(),
                });
            }
        }
        Ok(ImageStack {
            frames,
            pixel_size,
            range,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [Frame] {
        &mut self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn frame(&self, k: usize) -> &Frame {
        &self.frames[k]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.frames
            .iter()
            .map(Frame::min_max)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| {
                (lo.min(a), hi.max(b))
            })
    }

    /// Replaces the frames, keeping metadata.
    pub fn with_frames(&self, frames: Vec<Frame>, range: IntensityRange) -> Result<Self> {
        ImageStack::new(frames, self.pixel_size, range)
    }
}

/// One mask per slice.
pub type BinaryStack = Vec<Mask>;
