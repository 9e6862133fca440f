//! Dense cell-state grids and the living-cell rule.
//!
//! A grid holds `C = 4 + n_hidden` channels per cell: RGB in channels 0..3,
//! the living (alpha) channel at index 3, and hidden state after that. Data
//! is channel-major, rows within a channel, so channel `c` of cell `(y, x)`
//! lives at `c * H * W + y * W + x`.

use crate::error::{Error, Result};

/// Number of visible channels (RGB plus alpha).
pub const RGBA: usize = 4;
/// Index of the living channel.
pub const ALPHA: usize = 3;
/// States are clamped to `[-CLIP, CLIP]` after every step.
pub const CLIP: f32 = 10.0;
/// A cell dies when every cell in its 3x3 neighborhood has alpha below this.
pub const ALIVE_THRESHOLD: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct CellGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl CellGrid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} scalars for a {channels}x{height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// The training seed: one live cell in the center with alpha and every
    /// hidden channel set to one, everything else zero.
    pub fn new_seed(height: usize, width: usize, n_hidden: usize) -> Result<Self> {
        if height < 3 || width < 3 {
            return Err(Error::InvalidDimension(format!(
                "seed grid must be at least 3x3, got {height}x{width}"
            )));
        }
        if n_hidden < 1 {
            return Err(Error::InvalidDimension(
                "seed grid needs at least one hidden channel".into(),
            ));
        }
        let mut grid = Self::zeros(RGBA + n_hidden, height, width);
        let (cy, cx) = (height / 2, width / 2);
        for c in ALPHA..grid.channels {
            grid.set(c, cy, cx, 1.0);
        }
        Ok(grid)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_hidden(&self) -> usize {
        self.channels.saturating_sub(RGBA)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// All channels of one cell.
    pub fn cell(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    pub fn same_shape(&self, other: &CellGrid) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Copy this grid into the center of a larger (or equal) grid.
    pub fn embed_centered(&self, height: usize, width: usize) -> Result<CellGrid> {
        if height < self.height || width < self.width {
            return Err(Error::InvalidDimension(format!(
                "cannot embed {}x{} grid into {height}x{width}",
                self.height, self.width
            )));
        }
        let oy = height / 2 - self.height / 2;
        let ox = width / 2 - self.width / 2;
        let mut out = CellGrid::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y + oy, x + ox, self.get(c, y, x));
                }
            }
        }
        Ok(out)
    }

    pub fn alive_mask(&self) -> AliveMask {
        let (h, w) = (self.height, self.width);
        let alpha = self.channel(ALPHA);
        // Separable 3x3 max: rows first, then columns.
        let mut row_max = vec![f32::NEG_INFINITY; h * w];
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(1);
                let hi = (x + 1).min(w - 1);
                let mut m = alpha[y * w + lo];
                for xx in lo + 1..=hi {
                    m = m.max(alpha[y * w + xx]);
                }
                row_max[y * w + x] = m;
            }
        }
        let mut bits = vec![false; h * w];
        for y in 0..h {
            let lo = y.saturating_sub(1);
            let hi = (y + 1).min(h - 1);
            for x in 0..w {
                let mut m = row_max[lo * w + x];
                for yy in lo + 1..=hi {
                    m = m.max(row_max[yy * w + x]);
                }
                // Out-of-bounds neighbors count as zero.
                let at_border = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
                if at_border {
                    m = m.max(0.0);
                }
                bits[y * w + x] = m >= ALIVE_THRESHOLD;
            }
        }
        AliveMask {
            height: h,
            width: w,
            bits,
        }
    }

    /// Zero dead cells and clamp the rest to `[-CLIP, CLIP]`, returning a new grid.
    pub fn apply_alive_and_clip(&self, mask: &AliveMask) -> Result<CellGrid> {
        let mut out = self.clone();
        out.mask_and_clip_in_place(mask)?;
        Ok(out)
    }

    pub fn mask_and_clip_in_place(&mut self, mask: &AliveMask) -> Result<()> {
        if mask.height != self.height || mask.width != self.width {
            return Err(Error::DimensionMismatch(format!(
                "mask is {}x{}, grid is {}x{}",
                mask.height, mask.width, self.height, self.width
            )));
        }
        let n = self.plane_len();
        for plane in self.data.chunks_exact_mut(n) {
            for (v, &alive) in plane.iter_mut().zip(&mask.bits) {
                *v = if alive { v.clamp(-CLIP, CLIP) } else { 0.0 };
            }
        }
        Ok(())
    }

    /// Both grid invariants: finite values inside the clip range, and dead cells all zero.
    pub fn satisfies_invariants(&self) -> bool {
        if !self.data.iter().all(|v| v.is_finite() && v.abs() <= CLIP) {
            return false;
        }
        let mask = self.alive_mask();
        let n = self.plane_len();
        (0..n)
            .filter(|&i| !mask.bits[i])
            .all(|i| (0..self.channels).all(|c| self.data[c * n + i] == 0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AliveMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl AliveMask {
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} bits for a {height}x{width} mask",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn all(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &AliveMask) -> AliveMask {
        AliveMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        }
    }
}
