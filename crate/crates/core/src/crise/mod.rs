//! Contrastive RISE saliency and patch selectivity.
//!
//! The estimator weights each random mask by how much more the classifier
//! favours the category than its flipped-head twin does on the masked image:
//!
//! ```text
//! S(l) = 1 / (p * N_B) * sum_i [f(x * B_i) - f'(x * B_i)] * B_i(l)
//! ```

mod masks;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::PatchMask;
use crate::image::ImageTensor;
use crate::oracle::{softmax, ContrastiveClassifier, OracleScores, ScoreKind};

pub use masks::{generate_rise_masks, RiseMaskGenerator};

/// Which quantity `f` denotes in the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSpace {
    /// Class probability; logit oracles are passed through a softmax.
    #[default]
    Probability,
    /// Raw logit; only valid for oracles that report logits.
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiseConfig {
    pub n_masks: usize,
    /// Cell size in pixels of the low-resolution Bernoulli grid.
    pub cell_stride: usize,
    pub keep_prob: f64,
    pub seed: u64,
    /// Masked images per oracle request. Does not affect results.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub score_space: ScoreSpace,
}

fn default_batch() -> usize {
    64
}

impl Default for RiseConfig {
    fn default() -> Self {
        Self {
            n_masks: 14_000,
            cell_stride: 14,
            keep_prob: 0.5,
            seed: 0,
            batch_size: default_batch(),
            score_space: ScoreSpace::Probability,
        }
    }
}

impl RiseConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.n_masks == 0 {
            return Err(Error::InvalidArgument("n_masks must be at least 1".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "keep_prob {} outside (0, 1)",
                self.keep_prob
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        let s = self.cell_stride;
        if s == 0 || !height.is_multiple_of(s) || !width.is_multiple_of(s) || height / s < 2 || width / s < 2 {
            return Err(Error::InvalidArgument(format!(
                "stride {s} must divide {height}x{width} into at least 2 cells per axis"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!("{} values", height * width), values.len()));
        }
        Ok(Self {
            height,
            width,
            values,
            normalized: false,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = self
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        (i / self.width, i % self.width)
    }

    /// Row-major little-endian `f32` dump.
    pub fn to_le_f32_bytes(&self) -> Vec<u8> {
        self.values
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect()
    }

    /// Jet-coloured map, min-max scaled, blended half and half over `image`.
    pub fn render_overlay(&self, image: &ImageTensor) -> Result<ImageTensor> {
        if image.height() != self.height || image.width() != self.width {
            return Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", image.height(), image.width()),
            ));
        }
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut data = Vec::with_capacity(self.values.len() * 3);
        for (i, &v) in self.values.iter().enumerate() {
            let t = (v - lo) / span;
            let color = jet(t);
            let px = image.pixel(i / self.width, i % self.width);
            for c in 0..3 {
                let base = if image.channels() >= 3 { px[c] } else { px[0] };
                data.push((0.5 * base + 0.5 * color[c]).clamp(0.0, 1.0));
            }
        }
        ImageTensor::new(self.height, self.width, 3, data)
    }
}

fn jet(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |center: f64| (1.5 - (4.0 * t - center).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

fn category_value(s: &OracleScores, category: usize, space: ScoreSpace) -> Result<f64> {
    match (space, s.kind) {
        (ScoreSpace::Probability, ScoreKind::Probability) | (ScoreSpace::Logit, ScoreKind::Logit) => {
            Ok(s.scores[category])
        }
        (ScoreSpace::Probability, ScoreKind::Logit) => Ok(softmax(&s.scores)[category]),
        (ScoreSpace::Logit, ScoreKind::Probability) => Err(Error::Contract(
            "logit score space requested but the oracle reports probabilities".into(),
        )),
    }
}

/// c-RISE saliency of `category` with masks drawn from `cfg`.
pub fn crise_map<C: ContrastiveClassifier + ?Sized>(
    x: &ImageTensor,
    oracle: &C,
    category: usize,
    cfg: &RiseConfig,
) -> Result<SaliencyMap> {
    let gen = RiseMaskGenerator::new(cfg, x.height(), x.width())?;
    estimate(
        x,
        oracle,
        category,
        cfg.n_masks,
        |i| gen.mask(i),
        cfg.keep_prob,
        cfg.batch_size,
        cfg.score_space,
    )
}

/// The estimator over an explicit mask set, each weighted `1 / (p * len)`.
pub fn crise_map_with_masks<C: ContrastiveClassifier + ?Sized>(
    x: &ImageTensor,
    oracle: &C,
    category: usize,
    masks: &[Vec<f64>],
    keep_prob: f64,
    batch_size: usize,
    space: ScoreSpace,
) -> Result<SaliencyMap> {
    if masks.is_empty() {
        return Err(Error::InvalidArgument("empty mask set".into()));
    }
    if !(keep_prob > 0.0 && keep_prob <= 1.0) || batch_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "keep_prob {keep_prob} / batch_size {batch_size}"
        )));
    }
    estimate(
        x,
        oracle,
        category,
        masks.len(),
        |i| masks[i].clone(),
        keep_prob,
        batch_size,
        space,
    )
}

#[allow(clippy::too_many_arguments)]
fn estimate<C, F>(
    x: &ImageTensor,
    oracle: &C,
    category: usize,
    n_masks: usize,
    mask_at: F,
    keep_prob: f64,
    batch_size: usize,
    space: ScoreSpace,
) -> Result<SaliencyMap>
where
    C: ContrastiveClassifier + ?Sized,
    F: Fn(usize) -> Vec<f64> + Sync,
{
    if category >= oracle.categories() {
        return Err(Error::InvalidArgument(format!(
            "category {category} >= k = {}",
            oracle.categories()
        )));
    }
    let n_pixels = x.pixel_count();
    let mut acc = vec![0.0f64; n_pixels];
    let mut done = 0;
    while done < n_masks {
        let end = (done + batch_size).min(n_masks);
        let batch: Vec<(Vec<f64>, ImageTensor)> = (done..end)
            .into_par_iter()
            .map(|i| {
                let m = mask_at(i);
                let masked = x.multiply_field(&m)?;
                Ok((m, masked))
            })
            .collect::<Result<_>>()?;
        let (masks, images): (Vec<Vec<f64>>, Vec<ImageTensor>) = batch.into_iter().unzip();
        let abort = |source: Error| Error::Aborted {
            completed: done,
            total: n_masks,
            source: Box::new(source),
        };
        let scores = oracle.score_contrastive(&images).map_err(abort)?;
        if scores.len() != images.len() {
            return Err(abort(Error::Protocol(format!(
                "{} responses for {} masked images",
                scores.len(),
                images.len()
            ))));
        }
        // fixed index order keeps the sum independent of batching and threads
        for (mask, (f, fp)) in masks.iter().zip(&scores) {
            let w = category_value(f, category, space)? - category_value(fp, category, space)?;
            if w != 0.0 {
                for (a, &m) in acc.iter_mut().zip(mask) {
                    *a += w * m;
                }
            }
        }
        done = end;
    }
    let norm = 1.0 / (keep_prob * n_masks as f64);
    let values = acc.into_iter().map(|v| v * norm).collect();
    SaliencyMap::new(x.height(), x.width(), values)
}

/// Softmax over all pixels, shifted by the maximum. Already-normalized maps are returned unchanged.
pub fn softmax_normalize(s: &SaliencyMap) -> SaliencyMap {
    if s.normalized {
        return s.clone();
    }
    SaliencyMap {
        height: s.height,
        width: s.width,
        values: softmax(&s.values),
        normalized: true,
    }
}

fn check_mask(s: &SaliencyMap, mask: &PatchMask) -> Result<()> {
    let g = mask.grid();
    if g.image_height() != s.height || g.image_width() != s.width {
        return Err(Error::shape(
            format!("{}x{} map", g.image_height(), g.image_width()),
            format!("{}x{}", s.height, s.width),
        ));
    }
    Ok(())
}

/// In-context saliency mass divided by the patch count `N`.
pub fn patch_selectivity(s: &SaliencyMap, mask: &PatchMask) -> Result<f64> {
    check_mask(s, mask)?;
    let mut sum = 0.0;
    for y in 0..s.height {
        for x in 0..s.width {
            if !mask.covers_pixel(y, x) {
                sum += s.get(y, x);
            }
        }
    }
    Ok(sum / mask.grid().n_patches() as f64)
}

/// Normalized saliency mass on out-of-context patches; lower is better.
pub fn inverse_patch_selectivity(s: &SaliencyMap, mask: &PatchMask) -> Result<f64> {
    if !s.normalized {
        return Err(Error::Contract(
            "inverse patch selectivity needs a softmax-normalized map".into(),
        ));
    }
    check_mask(s, mask)?;
    let mut sum = 0.0;
    for y in 0..s.height {
        for x in 0..s.width {
            if mask.covers_pixel(y, x) {
                sum += s.get(y, x);
            }
        }
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::oracle::{Contrastive, LinearProbe};

    #[test]
    fn identical_heads_give_zero_map() {
        let probe = LinearProbe::new(28, 28, 1, vec![vec![1.0; 784]], vec![0.0]).unwrap();
        let oracle = Contrastive::new(probe.clone(), probe).unwrap();
        let x = ImageTensor::filled(28, 28, 1, 0.5).unwrap();
        let cfg = RiseConfig { n_masks: 50, cell_stride: 7, score_space: ScoreSpace::Logit, ..RiseConfig::default() };
        let s = crise_map(&x, &oracle, 0, &cfg).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_examples() {
        let s = SaliencyMap::new(2, 3, vec![4.0; 6]).unwrap();
        let n = softmax_normalize(&s);
        assert!(n.values.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));

        let two = SaliencyMap::new(1, 2, vec![0.0, 3f64.ln()]).unwrap();
        let n = softmax_normalize(&two);
        assert!((n.values[0] - 0.25).abs() < 1e-15);
        assert!((n.values[1] - 0.75).abs() < 1e-15);

        let shifted = SaliencyMap::new(1, 2, vec![10.0, 10.0 + 3f64.ln()]).unwrap();
        let m = softmax_normalize(&shifted);
        for (a, b) in n.values.iter().zip(&m.values) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(softmax_normalize(&n), n);
    }

    #[test]
    fn selectivity_examples() {
        let g = make_grid(224, 224, 7, 7).unwrap();
        let raw = SaliencyMap::new(224, 224, vec![1.0; 224 * 224]).unwrap();
        assert_eq!(patch_selectivity(&raw, &PatchMask::full(g)).unwrap(), 0.0);
        assert!((patch_selectivity(&raw, &PatchMask::empty(g)).unwrap() - 50176.0 / 49.0).abs() < 1e-9);

        let uniform = softmax_normalize(&raw);
        let m = PatchMask::from_indices(g, &(0..15).collect::<Vec<_>>()).unwrap();
        let p = patch_selectivity(&uniform, &m).unwrap();
        assert!((p - (1.0 / 49.0) * (34.0 / 49.0)).abs() < 1e-12);
        assert_eq!(inverse_patch_selectivity(&uniform, &PatchMask::empty(g)).unwrap(), 0.0);
        let inv = inverse_patch_selectivity(&uniform, &m).unwrap();
        assert!((inv - 15.0 / 49.0).abs() < 1e-12);
        assert!(matches!(inverse_patch_selectivity(&raw, &m), Err(Error::Contract(_))));
    }

    #[test]
    fn selectivity_shape_mismatch() {
        let g = make_grid(28, 28, 7, 7).unwrap();
        let s = softmax_normalize(&SaliencyMap::new(14, 14, vec![0.0; 196]).unwrap());
        assert!(patch_selectivity(&s, &PatchMask::empty(g)).is_err());
        assert!(inverse_patch_selectivity(&s, &PatchMask::empty(g)).is_err());
    }

    #[test]
    fn logit_space_rejects_probability_oracles() {
        let s = OracleScores::new(ScoreKind::Probability, vec![0.5, 0.5]).unwrap();
        assert!(category_value(&s, 0, ScoreSpace::Logit).is_err());
        assert_eq!(category_value(&s, 0, ScoreSpace::Probability).unwrap(), 0.5);
        let l = OracleScores::new(ScoreKind::Logit, vec![0.0, 0.0]).unwrap();
        assert_eq!(category_value(&l, 1, ScoreSpace::Probability).unwrap(), 0.5);
    }

    #[test]
    fn overlay_and_raw_dump() {
        let s = SaliencyMap::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.to_le_f32_bytes().len(), 16);
        assert_eq!(&s.to_le_f32_bytes()[4..8], &1.0f32.to_le_bytes());
        let img = ImageTensor::filled(2, 2, 1, 0.5).unwrap();
        let o = s.render_overlay(&img).unwrap();
        assert_eq!(o.dims(), (2, 2, 3));
        assert_eq!(s.argmax(), (1, 1));
    }
}
