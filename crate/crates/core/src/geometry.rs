//! Boxes, binary masks, the run-length codec, IoU kernels and ROI Align.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::tensor::Matrix;

/// Upper bound of the normalized integer box coordinate range.
pub const NORM_MAX: f64 = 999.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordSpace {
    Pixel,
    Norm999,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub space: CoordSpace,
}

impl BoundingBox {
    pub fn pixel(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new(x0, y0, x1, y1, CoordSpace::Pixel)
    }

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, space: CoordSpace) -> Result<Self> {
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite box coordinate"));
        }
        if x0 > x1 || y0 > y1 {
            return Err(invalid(format!("box corners out of order: ({x0},{y0})-({x1},{y1})")));
        }
        if space == CoordSpace::Norm999
            && ![x0, y0, x1, y1].iter().all(|v| v.fract() == 0.0 && (0.0..=NORM_MAX).contains(v))
        {
            return Err(invalid("normalized coordinates must be integers in [0,999]"));
        }
        Ok(Self { x0, y0, x1, y1, space })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Maps a pixel box onto the integer `[0,999]` grid. Normalized inputs pass through unchanged.
pub fn normalize_box(b: &BoundingBox, img_w: u32, img_h: u32) -> Result<BoundingBox> {
    if img_w == 0 || img_h == 0 {
        return Err(invalid(format!("degenerate image size {img_w}x{img_h}")));
    }
    if b.space == CoordSpace::Norm999 {
        return Ok(*b);
    }
    let nx = |c: f64| round_half_up(c * NORM_MAX / f64::from(img_w)).clamp(0.0, NORM_MAX);
    let ny = |c: f64| round_half_up(c * NORM_MAX / f64::from(img_h)).clamp(0.0, NORM_MAX);
    BoundingBox::new(nx(b.x0), ny(b.y0), nx(b.x1), ny(b.y1), CoordSpace::Norm999)
}

/// Row-major boolean grid.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}x{}, area {})", self.height, self.width, self.area())
    }
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(invalid(format!("{} bits for a {height}x{width} mask", bits.len())));
        }
        Ok(Self { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(invalid(format!("mask shapes differ: {:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.check_shape(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect();
        Ok(Self { height: self.height, width: self.width, bits })
    }

    pub fn intersection_area(&self, other: &Self) -> Result<usize> {
        self.check_shape(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count())
    }

    pub fn union_area(&self, other: &Self) -> Result<usize> {
        self.check_shape(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a || b).count())
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.shape() == other.shape() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Tight pixel box around the foreground, if any.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    r0 = r0.min(r);
                    c0 = c0.min(c);
                    r1 = r1.max(r + 1);
                    c1 = c1.max(c + 1);
                }
            }
        }
        (r0 != usize::MAX).then(|| BoundingBox {
            x0: c0 as f64,
            y0: r0 as f64,
            x1: c1 as f64,
            y1: r1 as f64,
            space: CoordSpace::Pixel,
        })
    }
}

/// Column-major run-length encoding; runs alternate background/foreground starting with
/// background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct RleWire {
    size: [usize; 2],
    counts: Vec<u64>,
}

impl Serialize for RleMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RleWire { size: [self.height, self.width], counts: self.counts.clone() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RleMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = RleWire::deserialize(d)?;
        Ok(RleMask { height: w.size[0], width: w.size[1], counts: w.counts })
    }
}

impl RleMask {
    pub fn validate(&self) -> Result<()> {
        let total: u64 = self.counts.iter().sum();
        let expect = (self.height * self.width) as u64;
        if total != expect {
            return Err(Error::CorruptMask(format!("run lengths sum to {total}, expected {expect}")));
        }
        if self.counts.iter().skip(1).any(|&c| c == 0) {
            return Err(Error::CorruptMask("zero-length interior run".into()));
        }
        Ok(())
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let (h, w) = mask.shape();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for c in 0..w {
        for r in 0..h {
            let v = mask.get(r, c);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    if run > 0 || counts.is_empty() {
        counts.push(run);
    }
    RleMask { height: h, width: w, counts }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask> {
    rle.validate()?;
    let (h, w) = (rle.height, rle.width);
    let mut mask = BinaryMask::empty(h, w);
    let mut idx = 0usize;
    let mut value = false;
    for &run in &rle.counts {
        for k in idx..idx + run as usize {
            if value {
                mask.set(k % h, k / h, true);
            }
        }
        idx += run as usize;
        value = !value;
    }
    Ok(mask)
}

/// `|a∩b| / |a∪b|`; two empty masks score 1.0.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let union = a.union_area(b)?;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLevel {
    Image,
    HighRes,
    Object,
    Part,
    Grounding,
}

/// A `grid_h × grid_w` patch grid of `C`-dimensional features covering a source image of
/// `extent_h × extent_w` pixels. Row `i*grid_w + j` holds patch `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub extent_h: f64,
    pub extent_w: f64,
    pub values: Matrix,
    pub level: FeatureLevel,
}

impl FeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, extent_h: f64, extent_w: f64, values: Matrix, level: FeatureLevel) -> Result<Self> {
        if values.rows() != grid_h * grid_w {
            return Err(invalid(format!("{} rows for a {grid_h}x{grid_w} grid", values.rows())));
        }
        if !values.is_finite() {
            return Err(invalid("non-finite feature values"));
        }
        Ok(Self { grid_h, grid_w, extent_h, extent_w, values, level })
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Geometry of the patch grid that ROI Align samples from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub grid_h: usize,
    pub grid_w: usize,
    pub extent_h: f64,
    pub extent_w: f64,
}

impl From<&FeatureMap> for GridGeometry {
    fn from(fm: &FeatureMap) -> Self {
        Self { grid_h: fm.grid_h, grid_w: fm.grid_w, extent_h: fm.extent_h, extent_w: fm.extent_w }
    }
}

/// Linear ROI Align operator: a `(out_h·out_w) × (grid_h·grid_w)` matrix `W` such that
/// `W · values` is the pooled feature map. Sample points sit at regular sub-bin offsets
/// in half-pixel-center coordinates, bilinear weights, border-replicated.
pub fn roi_align_weights(
    grid: GridGeometry,
    b: &BoundingBox,
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
) -> Result<Matrix> {
    if b.space != CoordSpace::Pixel {
        return Err(invalid("roi_align expects a pixel-space box"));
    }
    if b.width() <= 0.0 || b.height() <= 0.0 {
        return Err(invalid(format!("zero-area box {:?}", b.to_array())));
    }
    if b.x1 <= 0.0 || b.y1 <= 0.0 || b.x0 >= grid.extent_w || b.y0 >= grid.extent_h {
        return Err(invalid(format!("box {:?} lies outside the feature extent", b.to_array())));
    }
    if out_h == 0 || out_w == 0 || samples_per_bin == 0 {
        return Err(invalid("roi_align needs at least one bin and one sample"));
    }
    if grid.grid_h == 0 || grid.grid_w == 0 {
        return Err(invalid("empty feature grid"));
    }
    let sx = grid.extent_w / grid.grid_w as f64;
    let sy = grid.extent_h / grid.grid_h as f64;
    let n = grid.grid_h * grid.grid_w;
    let mut w = Matrix::zeros(out_h * out_w, n);
    let bin_h = b.height() / out_h as f64;
    let bin_w = b.width() / out_w as f64;
    let per_sample = 1.0 / (samples_per_bin * samples_per_bin) as f64;
    for ph in 0..out_h {
        for pw in 0..out_w {
            let row = w.row_mut(ph * out_w + pw);
            for iy in 0..samples_per_bin {
                let y = b.y0 + bin_h * (ph as f64 + (iy as f64 + 0.5) / samples_per_bin as f64);
                let fy = (y / sy - 0.5).clamp(0.0, (grid.grid_h - 1) as f64);
                for ix in 0..samples_per_bin {
                    let x = b.x0 + bin_w * (pw as f64 + (ix as f64 + 0.5) / samples_per_bin as f64);
                    let fx = (x / sx - 0.5).clamp(0.0, (grid.grid_w - 1) as f64);
                    accumulate_bilinear(row, grid.grid_w, grid.grid_h, fy, fx, per_sample);
                }
            }
        }
    }
    Ok(w)
}

fn accumulate_bilinear(row: &mut [f64], gw: usize, gh: usize, fy: f64, fx: f64, scale: f64) {
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(gh - 1);
    let x1 = (x0 + 1).min(gw - 1);
    let ly = fy - y0 as f64;
    let lx = fx - x0 as f64;
    row[y0 * gw + x0] += scale * (1.0 - ly) * (1.0 - lx);
    row[y0 * gw + x1] += scale * (1.0 - ly) * lx;
    row[y1 * gw + x0] += scale * ly * (1.0 - lx);
    row[y1 * gw + x1] += scale * ly * lx;
}

pub fn roi_align(fm: &FeatureMap, b: &BoundingBox, out_h: usize, out_w: usize, samples_per_bin: usize) -> Result<FeatureMap> {
    let w = roi_align_weights(fm.into(), b, out_h, out_w, samples_per_bin)?;
    FeatureMap::new(out_h, out_w, b.height(), b.width(), w.matmul(&fm.values), fm.level)
}

/// Mean of the ROI Align bins as a `1 × N` weight row (one C-vector per region).
pub fn region_mean_weights(grid: GridGeometry, b: &BoundingBox, bins: usize, samples_per_bin: usize) -> Result<Matrix> {
    Ok(roi_align_weights(grid, b, bins, bins, samples_per_bin)?.mean_rows())
}
