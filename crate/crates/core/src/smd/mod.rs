//! Superimposed masked dataset generation.
//!
//! Occluder sprites of a single category are rotated, scaled and pasted onto
//! an image until the union of their opaque pixels reaches a target fraction
//! of the image. Every placement is recorded so the result can be replayed.

mod render;
mod rle;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, save_png, ImageTensor};
use crate::rng::{SeededRng, RNG_ALGORITHM};

pub use render::{composite, render_sprite, RenderedSprite, ALPHA_THRESHOLD};
pub use rle::RleMask;

#[derive(Debug, Clone)]
pub struct OccluderSprite {
    image: ImageTensor,
    category: String,
    source_id: String,
}

impl OccluderSprite {
    pub fn new(image: ImageTensor, category: impl Into<String>, source_id: impl Into<String>) -> Result<Self> {
        let source_id = source_id.into();
        if image.channels() != 4 {
            return Err(Error::InvalidArgument(format!(
                "sprite {source_id} has {} channels, expected RGBA",
                image.channels()
            )));
        }
        let opaque = image.data().chunks_exact(4).filter(|p| p[3] >= ALPHA_THRESHOLD).count();
        if opaque == 0 {
            return Err(Error::InvalidArgument(format!("sprite {source_id} has no opaque pixels")));
        }
        Ok(Self {
            image,
            category: category.into(),
            source_id,
        })
    }

    pub fn image(&self) -> &ImageTensor {
        &self.image
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }
}

/// Sprites grouped by occluder category, in sorted order.
#[derive(Debug, Clone, Default)]
pub struct SpriteLibrary {
    categories: BTreeMap<String, Vec<OccluderSprite>>,
}

impl SpriteLibrary {
    pub fn new(sprites: impl IntoIterator<Item = OccluderSprite>) -> Self {
        let mut categories: BTreeMap<String, Vec<OccluderSprite>> = BTreeMap::new();
        for s in sprites {
            categories.entry(s.category.clone()).or_default().push(s);
        }
        Self { categories }
    }

    /// Reads `<dir>/<category>/<sprite>.png`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut sprites = Vec::new();
        for cat_dir in sorted_entries(dir)? {
            if !cat_dir.is_dir() {
                continue;
            }
            let category = file_name(&cat_dir);
            for file in sorted_entries(&cat_dir)? {
                if !has_extension(&file, &["png"]) {
                    continue;
                }
                let stem = file.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let image = load_image(&file)?;
                sprites.push(OccluderSprite::new(image, &category, format!("{category}/{stem}"))?);
            }
        }
        if sprites.is_empty() {
            return Err(Error::InvalidArgument(format!("no sprites under {}", dir.display())));
        }
        Ok(Self::new(sprites))
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.categories.keys().map(String::as_str)
    }

    pub fn sprites(&self, category: &str) -> Option<&[OccluderSprite]> {
        self.categories.get(category).map(Vec::as_slice)
    }

    pub fn find(&self, source_id: &str) -> Option<&OccluderSprite> {
        self.categories.values().flatten().find(|s| s.source_id == source_id)
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmdConfig {
    /// Allowed absolute deviation of the achieved fraction from the target.
    pub tol: f64,
    /// Targets at or below this place occluders without overlap.
    pub overlap_threshold: f64,
    /// Longest sprite side as a fraction of the image's shorter side.
    pub scale_range: (f64, f64),
    pub max_attempts: usize,
    #[serde(default = "default_true")]
    pub rotate: bool,
    #[serde(default = "default_position_tries")]
    pub position_tries: usize,
}

fn default_true() -> bool {
    true
}

fn default_position_tries() -> usize {
    50
}

impl Default for SmdConfig {
    fn default() -> Self {
        Self {
            tol: 0.01,
            overlap_threshold: 0.15,
            scale_range: (0.15, 0.35),
            max_attempts: 200,
            rotate: true,
            position_tries: default_position_tries(),
        }
    }
}

impl SmdConfig {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale range {lo}..{hi}")));
        }
        if !(self.tol >= 0.0) || self.max_attempts == 0 || self.position_tries == 0 {
            return Err(Error::InvalidArgument(
                "tol must be nonnegative, attempts and position tries positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub sprite_id: String,
    pub rotation_degrees: f64,
    pub scale: f64,
    /// Centre of the rendered sprite box; its top-left is `center - size / 2` (integer halves).
    pub center_xy: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionManifest {
    pub source_image: String,
    pub height: usize,
    pub width: usize,
    pub target_fraction: f64,
    pub achieved_fraction: f64,
    pub tolerance: f64,
    pub occluder_category: String,
    pub placements: Vec<Placement>,
    pub union_mask: RleMask,
    pub seed: u64,
    pub rng: String,
}

fn render_for(sprite: &OccluderSprite, scale: f64, degrees: f64, min_dim: usize) -> Option<RenderedSprite> {
    let img = sprite.image();
    let longest = img.height().max(img.width()) as f64;
    render_sprite(img, scale * min_dim as f64 / longest, degrees)
}

/// Pastes occluders of one category onto `x` until the union covers
/// `target +- cfg.tol` of the pixels.
pub fn place_occluders(
    x: &ImageTensor,
    sprites: &[OccluderSprite],
    target: f64,
    cfg: &SmdConfig,
    rng: &mut SeededRng,
) -> Result<(ImageTensor, OcclusionManifest)> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!("target {target} outside [0, 1]")));
    }
    let category = sprites
        .first()
        .ok_or_else(|| Error::InvalidArgument("no occluder sprites".into()))?
        .category()
        .to_string();
    if let Some(odd) = sprites.iter().find(|s| s.category() != category) {
        return Err(Error::InvalidArgument(format!(
            "sprites mix categories {category:?} and {:?}",
            odd.category()
        )));
    }

    let (h, w) = (x.height(), x.width());
    let total = (h * w) as f64;
    let mut union = vec![false; h * w];
    let mut covered = 0usize;
    let mut out = x.clone();
    let mut placements = Vec::new();
    let allow_overlap = target > cfg.overlap_threshold;
    let goal = target * total;
    let ceiling = (target + cfg.tol) * total;
    let floor = (target - cfg.tol) * total;
    let (lo, hi) = cfg.scale_range;
    let min_dim = h.min(w);

    let mut attempts = 0;
    while target > 0.0 && (covered as f64) < floor {
        if attempts >= cfg.max_attempts {
            return Err(Error::TargetUnreachable {
                target,
                best: covered as f64 / total,
                attempts,
            });
        }
        attempts += 1;

        let sprite = &sprites[rng.below(sprites.len())];
        let degrees = if cfg.rotate { rng.uniform(0.0, 360.0) } else { 0.0 };
        let mut scale = if hi > lo { rng.uniform(lo, hi) } else { lo };
        let Some(mut rendered) = render_for(sprite, scale, degrees, min_dim) else {
            continue;
        };
        // shrink towards the remaining deficit rather than overshooting it
        let remaining = goal - covered as f64;
        let area = rendered.opaque_count() as f64;
        if area > remaining + cfg.tol * total {
            let shrunk = (scale * (remaining / area).sqrt()).clamp(lo, hi);
            if shrunk != scale {
                scale = shrunk;
                match render_for(sprite, scale, degrees, min_dim) {
                    Some(r) => rendered = r,
                    None => continue,
                }
            }
        }
        if rendered.height > h || rendered.width > w {
            log::debug!("sprite {} too large at scale {scale:.3}, resampling", sprite.source_id());
            continue;
        }

        let mut accepted = None;
        for _ in 0..cfg.position_tries {
            let top = rng.below(h - rendered.height + 1);
            let left = rng.below(w - rendered.width + 1);
            let mut gain = 0usize;
            let mut overlap = false;
            for y in 0..rendered.height {
                for xx in 0..rendered.width {
                    if rendered.occludes(y, xx) {
                        if union[(top + y) * w + left + xx] {
                            overlap = true;
                        } else {
                            gain += 1;
                        }
                    }
                }
            }
            if (overlap && !allow_overlap) || gain == 0 || (covered + gain) as f64 > ceiling {
                continue;
            }
            accepted = Some((top, left, gain));
            break;
        }
        let Some((top, left, gain)) = accepted else {
            continue;
        };

        composite(&mut out, &rendered, top, left);
        for y in 0..rendered.height {
            for xx in 0..rendered.width {
                if rendered.occludes(y, xx) {
                    union[(top + y) * w + left + xx] = true;
                }
            }
        }
        covered += gain;
        placements.push(Placement {
            sprite_id: sprite.source_id().to_string(),
            rotation_degrees: degrees,
            scale,
            center_xy: [left + rendered.width / 2, top + rendered.height / 2],
        });
    }

    let manifest = OcclusionManifest {
        source_image: String::new(),
        height: h,
        width: w,
        target_fraction: target,
        achieved_fraction: covered as f64 / total,
        tolerance: cfg.tol,
        occluder_category: category,
        placements,
        union_mask: RleMask::encode(h, w, &union),
        seed: rng.seed(),
        rng: RNG_ALGORITHM.to_string(),
    };
    Ok((out, manifest))
}

/// Re-renders a manifest's placements onto the source image.
pub fn replay_manifest(
    x: &ImageTensor,
    manifest: &OcclusionManifest,
    library: &SpriteLibrary,
) -> Result<ImageTensor> {
    if (x.height(), x.width()) != (manifest.height, manifest.width) {
        return Err(Error::shape(
            format!("{}x{}", manifest.height, manifest.width),
            format!("{}x{}", x.height(), x.width()),
        ));
    }
    let min_dim = x.height().min(x.width());
    let mut out = x.clone();
    for p in &manifest.placements {
        let sprite = library
            .find(&p.sprite_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sprite {}", p.sprite_id)))?;
        let r = render_for(sprite, p.scale, p.rotation_degrees, min_dim)
            .ok_or_else(|| Error::InvalidArgument(format!("sprite {} renders empty", p.sprite_id)))?;
        let top = p.center_xy[1]
            .checked_sub(r.height / 2)
            .filter(|t| t + r.height <= x.height());
        let left = p.center_xy[0]
            .checked_sub(r.width / 2)
            .filter(|l| l + r.width <= x.width());
        let (Some(top), Some(left)) = (top, left) else {
            return Err(Error::InvalidArgument(format!("placement of {} outside image", p.sprite_id)));
        };
        composite(&mut out, &r, top, left);
    }
    Ok(out)
}

/// Occludes one image the way [`generate_smd`] does: the generator is keyed by
/// `(seed, image_id, target)` and picks one occluder category uniformly.
pub fn occlude_image(
    x: &ImageTensor,
    image_id: &str,
    target: f64,
    library: &SpriteLibrary,
    cfg: &SmdConfig,
    seed: u64,
) -> Result<(ImageTensor, OcclusionManifest)> {
    let categories: Vec<&str> = library.categories().collect();
    if categories.is_empty() {
        return Err(Error::InvalidArgument("empty sprite library".into()));
    }
    let mut rng = SeededRng::derive(seed, format!("{image_id}|{target:.6}"));
    let category = categories[rng.below(categories.len())];
    let sprites = library.sprites(category).expect("listed category");
    let (img, mut manifest) = place_occluders(x, sprites, target, cfg, &mut rng)?;
    manifest.occluder_category = category.to_string();
    manifest.source_image = image_id.to_string();
    Ok((img, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    Error,
}

/// One line of `index.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmdRecord {
    pub image_id: String,
    pub target: f64,
    pub status: RecordStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub achieved: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn target_dir_name(target: f64) -> String {
    format!("occ_{target:.2}")
}

/// Generates one occluded copy of every image per target under `out_dir`,
/// writing `<out_dir>/occ_<target>/<stem>.png` plus `.json` manifests and
/// `<out_dir>/index.jsonl`.
pub fn generate_smd(
    image_dir: impl AsRef<Path>,
    library: &SpriteLibrary,
    targets: &[f64],
    cfg: &SmdConfig,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<SmdRecord>> {
    let image_dir = image_dir.as_ref();
    let out_dir = out_dir.as_ref();
    cfg.validate()?;
    if library.is_empty() {
        return Err(Error::InvalidArgument("empty sprite library".into()));
    }
    let images = list_images(image_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for &t in targets {
        let d = out_dir.join(target_dir_name(t));
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let jobs: Vec<(&PathBuf, f64)> = images
        .iter()
        .flat_map(|p| targets.iter().map(move |&t| (p, t)))
        .collect();
    let records: Vec<SmdRecord> = jobs
        .par_iter()
        .map(|&(path, target)| {
            let image_id = file_name(path);
            let result = (|| {
                let x = load_image(path)?.without_alpha();
                let (img, mut manifest) = occlude_image(&x, &image_id, target, library, cfg, seed)?;
                manifest.source_image = path.to_string_lossy().into_owned();
                let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let dir = out_dir.join(target_dir_name(target));
                let png = dir.join(format!("{stem}.png"));
                let json = dir.join(format!("{stem}.json"));
                save_png(&img, &png)?;
                fs::write(&json, serde_json::to_string_pretty(&manifest)? + "\n")
                    .map_err(|e| Error::io(&json, e))?;
                Ok::<_, Error>((png, json, manifest))
            })();
            match result {
                Ok((png, json, manifest)) => SmdRecord {
                    image_id,
                    target,
                    status: RecordStatus::Ok,
                    output: Some(relative(out_dir, &png)),
                    manifest: Some(relative(out_dir, &json)),
                    achieved: Some(manifest.achieved_fraction),
                    category: Some(manifest.occluder_category),
                    error: None,
                },
                Err(e) => {
                    log::warn!("smd: skipping {image_id} at target {target}: {e}");
                    SmdRecord {
                        image_id,
                        target,
                        status: RecordStatus::Error,
                        output: None,
                        manifest: None,
                        achieved: None,
                        category: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();

    let index = out_dir.join("index.jsonl");
    let mut file = fs::File::create(&index).map_err(|e| Error::io(&index, e))?;
    for r in &records {
        writeln!(file, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&index, e))?;
    }
    Ok(records)
}

fn relative(base: &Path, p: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
}

pub(crate) fn file_name(p: &Path) -> String {
    p.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

pub(crate) fn has_extension(p: &Path, exts: &[&str]) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| exts.iter().any(|x| e.eq_ignore_ascii_case(x)))
        .unwrap_or(false)
}

pub(crate) fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// PNG and JPEG files directly inside `dir`, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir.as_ref())?
        .into_iter()
        .filter(|p| p.is_file() && has_extension(p, &["png", "jpg", "jpeg"]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_sprite(side: usize) -> OccluderSprite {
        let img = ImageTensor::from_fn(side, side, 4, |_, _, c| if c == 3 { 1.0 } else { 0.9 }).unwrap();
        OccluderSprite::new(img, "block", "block/a").unwrap()
    }

    #[test]
    fn zero_target_is_identity() {
        let x = ImageTensor::filled(64, 64, 3, 0.2).unwrap();
        let (out, m) = place_occluders(&x, &[square_sprite(16)], 0.0, &SmdConfig::default(), &mut SeededRng::new(0)).unwrap();
        assert_eq!(out, x);
        assert!(m.placements.is_empty());
        assert_eq!(m.achieved_fraction, 0.0);
        assert_eq!(m.union_mask.popcount(), 0);
    }

    #[test]
    fn single_exact_square() {
        let x = ImageTensor::filled(224, 224, 3, 0.2).unwrap();
        let cfg = SmdConfig {
            scale_range: (32.0 / 224.0, 32.0 / 224.0),
            rotate: false,
            ..SmdConfig::default()
        };
        let target = 1024.0 / 50176.0;
        let (_, m) = place_occluders(&x, &[square_sprite(32)], target, &cfg, &mut SeededRng::new(3)).unwrap();
        assert_eq!(m.placements.len(), 1);
        assert_eq!(m.achieved_fraction, target);
        assert_eq!(m.union_mask.popcount(), 1024);
    }

    #[test]
    fn sprite_validation() {
        let gray = ImageTensor::filled(4, 4, 3, 1.0).unwrap();
        assert!(OccluderSprite::new(gray, "a", "a/x").is_err());
        let clear = ImageTensor::filled(4, 4, 4, 0.0).unwrap();
        assert!(OccluderSprite::new(clear, "a", "a/x").is_err());
    }

    #[test]
    fn mixed_categories_rejected() {
        let x = ImageTensor::filled(64, 64, 3, 0.2).unwrap();
        let a = square_sprite(8);
        let img = ImageTensor::filled(8, 8, 4, 1.0).unwrap();
        let b = OccluderSprite::new(img, "other", "other/b").unwrap();
        assert!(place_occluders(&x, &[a, b], 0.1, &SmdConfig::default(), &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn unreachable_target_reports_best() {
        let x = ImageTensor::filled(64, 64, 3, 0.2).unwrap();
        let cfg = SmdConfig {
            scale_range: (0.1, 0.1),
            tol: 0.0,
            max_attempts: 5,
            overlap_threshold: 1.0,
            ..SmdConfig::default()
        };
        let err = place_occluders(&x, &[square_sprite(16)], 0.9, &cfg, &mut SeededRng::new(0)).unwrap_err();
        match err {
            Error::TargetUnreachable { best, attempts, .. } => {
                assert_eq!(attempts, 5);
                assert!(best > 0.0 && best < 0.9);
            }
            other => panic!("{other}"),
        }
    }
}
