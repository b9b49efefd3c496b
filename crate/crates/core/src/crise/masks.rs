use rayon::prelude::*;

use super::RiseConfig;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Deterministic source of RISE masks for one image size.
///
/// Mask `i` depends only on `(seed, i)`: a `cells_y x cells_x` Bernoulli(p)
/// grid, bilinearly stretched to `(cells + 1) * stride` pixels per axis and
/// cropped at a uniform offset in `[0, stride)^2`.
#[derive(Debug, Clone)]
pub struct RiseMaskGenerator {
    seed: u64,
    keep_prob: f64,
    stride: usize,
    height: usize,
    width: usize,
    cells_y: usize,
    cells_x: usize,
    taps_y: Vec<Tap>,
    taps_x: Vec<Tap>,
}

/// Bilinear source cells and weight for one upsampled coordinate.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    t: f64,
}

fn taps(cells: usize, upsampled: usize) -> Vec<Tap> {
    let scale = cells as f64 / upsampled as f64;
    (0..upsampled)
        .map(|u| {
            // half-pixel centres, edge clamped
            let src = ((u as f64 + 0.5) * scale - 0.5).clamp(0.0, (cells - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(cells - 1);
            Tap { lo, hi, t: src - lo as f64 }
        })
        .collect()
}

impl RiseMaskGenerator {
    pub fn new(cfg: &RiseConfig, height: usize, width: usize) -> Result<Self> {
        cfg.validate(height, width)?;
        let stride = cfg.cell_stride;
        let cells_y = height / stride;
        let cells_x = width / stride;
        Ok(Self {
            seed: cfg.seed,
            keep_prob: cfg.keep_prob,
            stride,
            height,
            width,
            cells_y,
            cells_x,
            taps_y: taps(cells_y, (cells_y + 1) * stride),
            taps_x: taps(cells_x, (cells_x + 1) * stride),
        })
    }

    pub fn cells(&self) -> (usize, usize) {
        (self.cells_y, self.cells_x)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Low-resolution grid and crop offset of mask `index`.
    pub fn draw(&self, index: usize) -> (Vec<bool>, (usize, usize)) {
        let mut rng = SeededRng::derive(self.seed, (index as u64).to_le_bytes());
        let grid = (0..self.cells_y * self.cells_x)
            .map(|_| rng.unit_f64() < self.keep_prob)
            .collect();
        let offset = (rng.below(self.stride), rng.below(self.stride));
        (grid, offset)
    }

    pub fn mask(&self, index: usize) -> Vec<f64> {
        let (grid, offset) = self.draw(index);
        self.render(&grid, offset)
    }

    /// Upsamples a cell grid (row-major, `true` = keep) and crops at `offset = (dy, dx)`.
    pub fn render(&self, grid: &[bool], offset: (usize, usize)) -> Vec<f64> {
        let values: Vec<f64> = grid.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        self.render_values(&values, offset)
    }

    /// Same as [`render`](Self::render) for arbitrary cell values.
    pub fn render_values(&self, cells: &[f64], offset: (usize, usize)) -> Vec<f64> {
        assert_eq!(cells.len(), self.cells_y * self.cells_x, "cell grid size");
        let (dy, dx) = offset;
        assert!(dy < self.stride && dx < self.stride, "offset outside one cell");
        let cx = self.cells_x;
        let mut out = Vec::with_capacity(self.height * self.width);
        let mut row = vec![0.0; cx];
        for y in dy..dy + self.height {
            let ty = self.taps_y[y];
            for (j, r) in row.iter_mut().enumerate() {
                let a = cells[ty.lo * cx + j];
                let b = cells[ty.hi * cx + j];
                *r = a + (b - a) * ty.t;
            }
            for x in dx..dx + self.width {
                let tx = self.taps_x[x];
                let (a, b) = (row[tx.lo], row[tx.hi]);
                out.push((a + (b - a) * tx.t).clamp(0.0, 1.0));
            }
        }
        out
    }

    pub fn masks(&self, range: std::ops::Range<usize>) -> Vec<Vec<f64>> {
        range.into_par_iter().map(|i| self.mask(i)).collect()
    }
}

/// All `cfg.n_masks` masks for an image of the given size.
pub fn generate_rise_masks(cfg: &RiseConfig, height: usize, width: usize) -> Result<Vec<Vec<f64>>> {
    let gen = RiseMaskGenerator::new(cfg, height, width)?;
    if cfg.n_masks == 0 {
        return Err(Error::InvalidArgument("n_masks must be at least 1".into()));
    }
    Ok(gen.masks(0..cfg.n_masks))
}
