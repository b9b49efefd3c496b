//! Patch grid geometry and per-patch binary masks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::SeededRng;

/// Grid dimensions before they are bound to an image, written `RxC`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn for_image(&self, height: usize, width: usize) -> Result<PatchGrid> {
        make_grid(height, width, self.rows, self.cols)
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::new(7, 7)
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("grid must look like 7x7, got {s:?}"));
        let (r, c) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        let rows: usize = r.trim().parse().map_err(|_| bad())?;
        let cols: usize = c.trim().parse().map_err(|_| bad())?;
        if rows == 0 || cols == 0 {
            return Err(bad());
        }
        Ok(Self { rows, cols })
    }
}

impl Serialize for GridSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GridSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A `rows x cols` partition of an image into equal rectangles, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    patch_h: usize,
    patch_w: usize,
}

pub fn make_grid(img_h: usize, img_w: usize, rows: usize, cols: usize) -> Result<PatchGrid> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid {rows}x{cols} must have at least one row and column"
        )));
    }
    let mut problems = Vec::new();
    if !img_h.is_multiple_of(rows) {
        problems.push(format!("height {img_h} is not divisible by rows {rows}"));
    }
    if !img_w.is_multiple_of(cols) {
        problems.push(format!("width {img_w} is not divisible by cols {cols}"));
    }
    if !problems.is_empty() {
        return Err(Error::Divisibility {
            height: img_h,
            width: img_w,
            rows,
            cols,
            detail: problems.join("; "),
        });
    }
    Ok(PatchGrid {
        rows,
        cols,
        patch_h: img_h / rows,
        patch_w: img_w / cols,
    })
}

impl PatchGrid {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn patch_h(&self) -> usize {
        self.patch_h
    }

    pub fn patch_w(&self) -> usize {
        self.patch_w
    }

    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image_height(&self) -> usize {
        self.rows * self.patch_h
    }

    pub fn image_width(&self) -> usize {
        self.cols * self.patch_w
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec::new(self.rows, self.cols)
    }

    /// Top-left pixel `(y, x)` of patch `idx`.
    pub fn patch_origin(&self, idx: usize) -> (usize, usize) {
        ((idx / self.cols) * self.patch_h, (idx % self.cols) * self.patch_w)
    }

    pub fn patch_of_pixel(&self, y: usize, x: usize) -> usize {
        (y / self.patch_h) * self.cols + x / self.patch_w
    }

    pub fn check_image(&self, img: &ImageTensor) -> Result<()> {
        if img.height() != self.image_height() || img.width() != self.image_width() {
            return Err(Error::shape(
                format!(
                    "{}x{} image for grid {}x{}",
                    self.image_height(),
                    self.image_width(),
                    self.rows,
                    self.cols
                ),
                format!("{}x{}", img.height(), img.width()),
            ));
        }
        Ok(())
    }
}

/// One flag per patch; `true` marks a replaced (out-of-context) patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    grid: PatchGrid,
    bits: Vec<bool>,
}

impl PatchMask {
    pub fn new(grid: PatchGrid, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.n_patches() {
            return Err(Error::shape(
                format!("{} mask bits", grid.n_patches()),
                bits.len(),
            ));
        }
        Ok(Self { grid, bits })
    }

    pub fn empty(grid: PatchGrid) -> Self {
        Self {
            bits: vec![false; grid.n_patches()],
            grid,
        }
    }

    pub fn full(grid: PatchGrid) -> Self {
        Self {
            bits: vec![true; grid.n_patches()],
            grid,
        }
    }

    pub fn from_indices(grid: PatchGrid, indices: &[usize]) -> Result<Self> {
        let mut bits = vec![false; grid.n_patches()];
        for &i in indices {
            *bits.get_mut(i).ok_or_else(|| {
                Error::InvalidArgument(format!("patch index {i} outside grid of {}", grid.n_patches()))
            })? = true;
        }
        Ok(Self { grid, bits })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_set(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of patches marked; this is the mixing ratio `N1 / N`.
    pub fn ratio(&self) -> f64 {
        self.popcount() as f64 / self.grid.n_patches() as f64
    }

    pub fn set_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    #[inline]
    pub fn covers_pixel(&self, y: usize, x: usize) -> bool {
        self.bits[self.grid.patch_of_pixel(y, x)]
    }

    /// Row-major per-pixel 0/1 values.
    pub fn pixel_values(&self) -> Vec<f64> {
        let (h, w) = (self.grid.image_height(), self.grid.image_width());
        let mut field = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                field.push(if self.covers_pixel(y, x) { 1.0 } else { 0.0 });
            }
        }
        field
    }

    /// Compact text form `RxC:hex`, bit `i` stored most significant first within its nibble.
    pub fn to_text(&self) -> String {
        let mut hex = String::with_capacity(self.bits.len().div_ceil(4));
        for nibble in self.bits.chunks(4) {
            let mut v = 0u32;
            for (j, &b) in nibble.iter().enumerate() {
                if b {
                    v |= 1 << (3 - j);
                }
            }
            hex.push(char::from_digit(v, 16).expect("nibble"));
        }
        format!("{}x{}:{}", self.grid.rows, self.grid.cols, hex)
    }

    /// Parses the text form; patch size comes from the image the mask belongs to.
    pub fn parse_text(text: &str, img_h: usize, img_w: usize) -> Result<Self> {
        let bad = |why: &str| Error::InvalidArgument(format!("mask {text:?}: {why}"));
        let (spec, hex) = text.split_once(':').ok_or_else(|| bad("missing ':'"))?;
        let spec: GridSpec = spec.parse()?;
        let grid = spec.for_image(img_h, img_w)?;
        let hex = hex.trim();
        let n = grid.n_patches();
        if hex.len() != n.div_ceil(4) {
            return Err(bad("wrong number of hex digits"));
        }
        let mut bits = Vec::with_capacity(hex.len() * 4);
        for ch in hex.chars() {
            let v = ch.to_digit(16).ok_or_else(|| bad("non-hex digit"))?;
            for j in 0..4 {
                bits.push(v & (1 << (3 - j)) != 0);
            }
        }
        if bits[n..].iter().any(|&b| b) {
            return Err(bad("padding bits set"));
        }
        bits.truncate(n);
        Ok(Self { grid, bits })
    }
}

pub fn mask_to_pixel_field(mask: &PatchMask) -> ImageTensor {
    let g = mask.grid();
    ImageTensor::from_parts(g.image_height(), g.image_width(), 1, mask.pixel_values())
}

/// Marks `round(ratio * N)` patches chosen uniformly without replacement.
pub fn sample_patch_mask(grid: &PatchGrid, ratio: f64, rng: &mut SeededRng) -> Result<PatchMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} outside [0, 1]"
        )));
    }
    let n = grid.n_patches();
    let n1 = patch_count_for(ratio, n);
    let picked = rng.sample_indices(n, n1);
    PatchMask::from_indices(*grid, &picked)
}

/// `round(ratio * n)` clamped to `[0, n]`.
pub fn patch_count_for(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round().max(0.0) as usize).min(n)
}
