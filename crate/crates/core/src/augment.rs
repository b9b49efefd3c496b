//! Training-time mixing: Patch Mixing, Mixup and CutMix, with proportional,
//! label-smoothed targets.
//!
//! Random erasing is deliberately absent; combining it with patch mixing
//! destroys too much of the source image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{sample_patch_mask, GridSpec, PatchMask};
use crate::image::ImageTensor;
use crate::rng::SeededRng;

const DIST_TOLERANCE: f64 = 1e-9;

/// Probability vector over `k` categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CategoryDistribution {
    probs: Vec<f64>,
}

impl CategoryDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("distribution over zero categories".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument(format!("negative or non-finite probability {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DIST_TOLERANCE {
            return Err(Error::InvalidArgument(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(k: usize, category: usize) -> Result<Self> {
        if category >= k {
            return Err(Error::InvalidArgument(format!("category {category} >= k = {k}")));
        }
        let mut probs = vec![0.0; k];
        probs[category] = 1.0;
        Ok(Self { probs })
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Label smoothing at rate `eps` (mixing with the uniform distribution).
    pub fn smoothed(&self, eps: f64) -> Result<Self> {
        mix_labels(self, self, 0.0, eps)
    }
}

impl TryFrom<Vec<f64>> for CategoryDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CategoryDistribution> for Vec<f64> {
    fn from(d: CategoryDistribution) -> Self {
        d.probs
    }
}

/// Composites `x_b` into `x_a` on every patch the mask marks. Pixels are copied, never blended.
pub fn patch_mix(x_a: &ImageTensor, x_b: &ImageTensor, mask: &PatchMask) -> Result<ImageTensor> {
    x_a.ensure_same_shape(x_b)?;
    mask.grid().check_image(x_a)?;
    let grid = mask.grid();
    let c = x_a.channels();
    let row_len = grid.patch_w() * c;
    let mut out = x_a.clone();
    let src = x_b.data();
    let dst = out.data_mut();
    for idx in mask.set_indices() {
        let (y0, x0) = grid.patch_origin(idx);
        for y in y0..y0 + grid.patch_h() {
            let start = (y * x_a.width() + x0) * c;
            dst[start..start + row_len].copy_from_slice(&src[start..start + row_len]);
        }
    }
    Ok(out)
}

/// `(1 - eps) * ((1 - r) * y_a + r * y_b) + eps / k`.
pub fn mix_labels(
    y_a: &CategoryDistribution,
    y_b: &CategoryDistribution,
    ratio: f64,
    eps: f64,
) -> Result<CategoryDistribution> {
    if y_a.k() != y_b.k() {
        return Err(Error::shape(format!("{} categories", y_a.k()), y_b.k()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("ratio {ratio} outside [0, 1]")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("smoothing {eps} outside [0, 1)")));
    }
    let k = y_a.k() as f64;
    let probs = y_a
        .probs
        .iter()
        .zip(&y_b.probs)
        .map(|(&a, &b)| (1.0 - eps) * ((1.0 - ratio) * a + ratio * b) + eps / k)
        .collect();
    CategoryDistribution::new(probs)
}

/// `lam * x_a + (1 - lam) * x_b` per sample.
pub fn mixup(x_a: &ImageTensor, x_b: &ImageTensor, lam: f64) -> Result<ImageTensor> {
    x_a.ensure_same_shape(x_b)?;
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::InvalidArgument(format!("lambda {lam} outside [0, 1]")));
    }
    let data = x_a
        .data()
        .iter()
        .zip(x_b.data())
        .map(|(&a, &b)| (lam * a + (1.0 - lam) * b).clamp(a.min(b), a.max(b)))
        .collect();
    let (h, w, c) = x_a.dims();
    Ok(ImageTensor::from_parts(h, w, c, data))
}

/// Half-open pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

/// Pastes one rectangle of `x_b` into `x_a`.
pub fn paste_rect(x_a: &ImageTensor, x_b: &ImageTensor, rect: Rect) -> Result<ImageTensor> {
    x_a.ensure_same_shape(x_b)?;
    if rect.y0 > rect.y1 || rect.x0 > rect.x1 || rect.y1 > x_a.height() || rect.x1 > x_a.width() {
        return Err(Error::InvalidArgument(format!("{rect:?} outside image")));
    }
    let c = x_a.channels();
    let mut out = x_a.clone();
    let dst = out.data_mut();
    for y in rect.y0..rect.y1 {
        let start = (y * x_a.width() + rect.x0) * c;
        let end = (y * x_a.width() + rect.x1) * c;
        dst[start..end].copy_from_slice(&x_b.data()[start..end]);
    }
    Ok(out)
}

/// Box of nominal area `(1 - lam) * H * W` centred on a uniform pixel, clipped to the image.
pub fn cutmix_rect(height: usize, width: usize, lam: f64, rng: &mut SeededRng) -> Rect {
    let cut = (1.0 - lam).max(0.0).sqrt();
    let cut_h = (height as f64 * cut) as usize;
    let cut_w = (width as f64 * cut) as usize;
    let cy = rng.below(height);
    let cx = rng.below(width);
    Rect {
        y0: cy.saturating_sub(cut_h / 2),
        y1: (cy + cut_h / 2).min(height),
        x0: cx.saturating_sub(cut_w / 2),
        x1: (cx + cut_w / 2).min(width),
    }
}

/// Returns the mixed image and the achieved pasted-area fraction after clipping.
pub fn cutmix(
    x_a: &ImageTensor,
    x_b: &ImageTensor,
    lam: f64,
    rng: &mut SeededRng,
) -> Result<(ImageTensor, f64)> {
    x_a.ensure_same_shape(x_b)?;
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::InvalidArgument(format!("lambda {lam} outside [0, 1]")));
    }
    let rect = cutmix_rect(x_a.height(), x_a.width(), lam, rng);
    let out = paste_rect(x_a, x_b, rect)?;
    Ok((out, rect.area() as f64 / x_a.pixel_count() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMethod {
    Mixup,
    Cutmix,
    PatchMixing,
}

impl MixMethod {
    pub const ALL: [MixMethod; 3] = [MixMethod::Mixup, MixMethod::Cutmix, MixMethod::PatchMixing];

    pub fn as_str(&self) -> &'static str {
        match self {
            MixMethod::Mixup => "mixup",
            MixMethod::Cutmix => "cutmix",
            MixMethod::PatchMixing => "patch_mixing",
        }
    }
}

/// Where the mixing ratio comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioDraw {
    Beta { alpha: f64, beta: f64 },
    Fixed(f64),
}

impl RatioDraw {
    pub fn draw(&self, rng: &mut SeededRng) -> Result<f64> {
        match *self {
            RatioDraw::Beta { alpha, beta } => rng.beta(alpha, beta),
            RatioDraw::Fixed(r) => Ok(r),
        }
    }
}

/// Whether one ratio/method draw covers a whole batch or each pair separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawScope {
    #[default]
    PerPair,
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub ratio: RatioDraw,
    pub smoothing_eps: f64,
    /// Weights over `[mixup, cutmix, patch_mixing]`.
    pub method_weights: [f64; 3],
    pub grid: GridSpec,
    #[serde(default)]
    pub scope: DrawScope,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            ratio: RatioDraw::Beta {
                alpha: 0.3,
                beta: 0.3,
            },
            smoothing_eps: 0.1,
            method_weights: [1.0 / 3.0; 3],
            grid: GridSpec::new(7, 7),
            scope: DrawScope::PerPair,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.method_weights.iter().sum();
        if self.method_weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "method weights {:?} must be nonnegative and sum to 1",
                self.method_weights
            )));
        }
        if !(0.0..1.0).contains(&self.smoothing_eps) {
            return Err(Error::InvalidArgument(format!(
                "smoothing_eps {} outside [0, 1)",
                self.smoothing_eps
            )));
        }
        match self.ratio {
            RatioDraw::Beta { alpha, beta } if !(alpha > 0.0 && beta > 0.0) => Err(
                Error::InvalidArgument(format!("beta parameters must be positive, got {alpha},{beta}")),
            ),
            RatioDraw::Fixed(r) if !(0.0..=1.0).contains(&r) => {
                Err(Error::InvalidArgument(format!("fixed ratio {r} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    pub fn draw_method(&self, rng: &mut SeededRng) -> MixMethod {
        let u = rng.unit_f64();
        let mut acc = 0.0;
        for (method, w) in MixMethod::ALL.iter().zip(self.method_weights) {
            acc += w;
            if u < acc {
                return *method;
            }
        }
        // u landed in the rounding gap above the last cumulative weight
        MixMethod::ALL
            .iter()
            .zip(self.method_weights)
            .rev()
            .find(|(_, w)| *w > 0.0)
            .map(|(m, _)| *m)
            .unwrap_or(MixMethod::PatchMixing)
    }
}

#[derive(Debug, Clone)]
pub struct MixedSample {
    pub image: ImageTensor,
    pub label: CategoryDistribution,
    pub method: MixMethod,
    /// Share of `x_b` used for the label, after clipping or patch rounding.
    pub ratio: f64,
    pub mask: Option<PatchMask>,
    pub rect: Option<Rect>,
}

/// Applies one method with an already drawn ratio.
///
/// `draw` is the Beta/fixed sample: the `x_a` weight for mixup and cutmix,
/// the replaced-patch proportion for patch mixing.
#[allow(clippy::too_many_arguments)]
pub fn apply_method(
    method: MixMethod,
    draw: f64,
    x_a: &ImageTensor,
    y_a: &CategoryDistribution,
    x_b: &ImageTensor,
    y_b: &CategoryDistribution,
    policy: &AugmentPolicy,
    rng: &mut SeededRng,
) -> Result<MixedSample> {
    let (image, ratio, mask, rect) = match method {
        MixMethod::Mixup => (mixup(x_a, x_b, draw)?, 1.0 - draw, None, None),
        MixMethod::Cutmix => {
            x_a.ensure_same_shape(x_b)?;
            let rect = cutmix_rect(x_a.height(), x_a.width(), draw, rng);
            let img = paste_rect(x_a, x_b, rect)?;
            (img, rect.area() as f64 / x_a.pixel_count() as f64, None, Some(rect))
        }
        MixMethod::PatchMixing => {
            let grid = policy.grid.for_image(x_a.height(), x_a.width())?;
            let mask = sample_patch_mask(&grid, draw, rng)?;
            let img = patch_mix(x_a, x_b, &mask)?;
            (img, mask.ratio(), Some(mask), None)
        }
    };
    let label = mix_labels(y_a, y_b, ratio, policy.smoothing_eps)?;
    Ok(MixedSample {
        image,
        label,
        method,
        ratio,
        mask,
        rect,
    })
}

/// Draws a method by the policy weights, draws a ratio, mixes images and labels.
pub fn augment_pair(
    x_a: &ImageTensor,
    y_a: &CategoryDistribution,
    x_b: &ImageTensor,
    y_b: &CategoryDistribution,
    policy: &AugmentPolicy,
    rng: &mut SeededRng,
) -> Result<MixedSample> {
    policy.validate()?;
    let method = policy.draw_method(rng);
    let draw = policy.ratio.draw(rng)?;
    apply_method(method, draw, x_a, y_a, x_b, y_b, policy, rng)
}

/// Pairs up each sample with its mirror in the batch (`i` with `n - 1 - i`), as batch mixers do.
pub fn augment_batch(
    images: &[ImageTensor],
    labels: &[CategoryDistribution],
    policy: &AugmentPolicy,
    rng: &mut SeededRng,
) -> Result<Vec<MixedSample>> {
    if images.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", images.len()), labels.len()));
    }
    policy.validate()?;
    let n = images.len();
    let shared = match policy.scope {
        DrawScope::PerBatch => Some((policy.draw_method(rng), policy.ratio.draw(rng)?)),
        DrawScope::PerPair => None,
    };
    (0..n)
        .map(|i| {
            let j = n - 1 - i;
            let (method, draw) = match shared {
                Some(s) => s,
                None => (policy.draw_method(rng), policy.ratio.draw(rng)?),
            };
            apply_method(method, draw, &images[i], &labels[i], &images[j], &labels[j], policy, rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;

    fn constant(v: f64) -> ImageTensor {
        ImageTensor::filled(224, 224, 3, v).unwrap()
    }

    #[test]
    fn patch_mix_extremes() {
        let a = constant(0.2);
        let b = constant(0.9);
        let g = make_grid(224, 224, 7, 7).unwrap();
        assert_eq!(patch_mix(&a, &b, &PatchMask::empty(g)).unwrap(), a);
        assert_eq!(patch_mix(&a, &b, &PatchMask::full(g)).unwrap(), b);
    }

    #[test]
    fn patch_mix_shape_errors() {
        let a = constant(0.2);
        let b = ImageTensor::filled(224, 224, 1, 0.5).unwrap();
        let g = make_grid(224, 224, 7, 7).unwrap();
        assert!(matches!(patch_mix(&a, &b, &PatchMask::empty(g)), Err(Error::Shape { .. })));
        let g = make_grid(112, 112, 7, 7).unwrap();
        assert!(patch_mix(&a, &a, &PatchMask::empty(g)).is_err());
    }

    #[test]
    fn label_examples() {
        let y3 = CategoryDistribution::one_hot(10, 3).unwrap();
        let y7 = CategoryDistribution::one_hot(10, 7).unwrap();
        assert_eq!(mix_labels(&y3, &y7, 0.0, 0.0).unwrap(), y3);

        let a = CategoryDistribution::one_hot(2, 0).unwrap();
        let b = CategoryDistribution::one_hot(2, 1).unwrap();
        assert_eq!(mix_labels(&a, &b, 0.5, 0.0).unwrap().probs(), &[0.5, 0.5]);

        let m = mix_labels(&y3, &y7, 0.3, 0.1).unwrap();
        for (i, &p) in m.probs().iter().enumerate() {
            let want = match i {
                3 => 0.64,
                7 => 0.28,
                _ => 0.01,
            };
            assert!((p - want).abs() < 1e-12, "{i}: {p}");
        }
        assert!((m.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn label_size_mismatch() {
        let a = CategoryDistribution::one_hot(3, 0).unwrap();
        let b = CategoryDistribution::one_hot(4, 0).unwrap();
        assert!(matches!(mix_labels(&a, &b, 0.5, 0.0), Err(Error::Shape { .. })));
    }

    #[test]
    fn mixup_examples() {
        let a = constant(0.8);
        let b = constant(0.4);
        assert_eq!(mixup(&a, &b, 1.0).unwrap(), a);
        assert_eq!(mixup(&a, &b, 0.0).unwrap(), b);
        let m = mixup(&a, &b, 0.25).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn cutmix_examples() {
        let a = constant(0.1);
        let b = constant(0.7);
        let mut rng = SeededRng::new(8);
        let (out, r) = cutmix(&a, &b, 1.0, &mut rng).unwrap();
        assert_eq!(out, a);
        assert_eq!(r, 0.0);

        let full = Rect { y0: 0, x0: 0, y1: 224, x1: 224 };
        assert_eq!(paste_rect(&a, &b, full).unwrap(), b);

        for seed in 0..50 {
            let mut rng = SeededRng::new(seed);
            let (out, r) = cutmix(&a, &b, 0.75, &mut rng).unwrap();
            let diff = out.data().chunks(3).filter(|px| px[0] != 0.1).count();
            assert!(diff as f64 <= 0.25 * 224.0 * 224.0);
            assert_eq!(r, diff as f64 / (224.0 * 224.0));
        }
    }

    #[test]
    fn policy_identity_cases() {
        let a = constant(0.3);
        let b = constant(0.6);
        let ya = CategoryDistribution::one_hot(5, 1).unwrap();
        let yb = CategoryDistribution::one_hot(5, 4).unwrap();
        let mut policy = AugmentPolicy {
            ratio: RatioDraw::Fixed(0.0),
            method_weights: [0.0, 0.0, 1.0],
            ..AugmentPolicy::default()
        };
        let mut rng = SeededRng::new(0);
        let s = augment_pair(&a, &ya, &b, &yb, &policy, &mut rng).unwrap();
        assert_eq!(s.method, MixMethod::PatchMixing);
        assert_eq!(s.image, a);
        assert_eq!(s.label, ya.smoothed(0.1).unwrap());

        policy.method_weights = [1.0, 0.0, 0.0];
        policy.ratio = RatioDraw::Fixed(1.0);
        let s = augment_pair(&a, &ya, &b, &yb, &policy, &mut rng).unwrap();
        assert_eq!(s.method, MixMethod::Mixup);
        assert_eq!(s.image, a);
        assert_eq!(s.label, ya.smoothed(0.1).unwrap());
    }

    #[test]
    fn policy_validation() {
        let mut p = AugmentPolicy::default();
        p.validate().unwrap();
        p.method_weights = [0.5, 0.5, 0.5];
        assert!(p.validate().is_err());
        p = AugmentPolicy { smoothing_eps: 1.0, ..AugmentPolicy::default() };
        assert!(p.validate().is_err());
        p = AugmentPolicy { ratio: RatioDraw::Beta { alpha: 0.0, beta: 1.0 }, ..AugmentPolicy::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn method_frequencies_are_balanced() {
        let policy = AugmentPolicy::default();
        let mut rng = SeededRng::new(2024);
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            counts[policy.draw_method(&mut rng) as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / 3000.0;
            assert!((f - 1.0 / 3.0).abs() <= 0.025, "{counts:?}");
        }
    }

    #[test]
    fn per_batch_scope_shares_one_draw() {
        let imgs: Vec<_> = (0..4).map(|i| ImageTensor::filled(28, 28, 1, i as f64 / 4.0).unwrap()).collect();
        let labels: Vec<_> = (0..4).map(|i| CategoryDistribution::one_hot(4, i).unwrap()).collect();
        let policy = AugmentPolicy { scope: DrawScope::PerBatch, ..AugmentPolicy::default() };
        let mut rng = SeededRng::new(12);
        let out = augment_batch(&imgs, &labels, &policy, &mut rng).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|s| s.method == out[0].method));
    }

    #[test]
    fn distribution_serde_validates() {
        let d: CategoryDistribution = serde_json::from_str("[0.25,0.75]").unwrap();
        assert_eq!(d.k(), 2);
        assert!(serde_json::from_str::<CategoryDistribution>("[0.5,0.6]").is_err());
    }
}
