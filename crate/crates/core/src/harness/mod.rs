//! Dataset-level sweeps: attack or occlude every image of a labeled folder,
//! score it with an oracle and aggregate accuracy per information-loss level.

mod dataset;
mod plot;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{patch_drop, patch_mix_attack, patch_permute, AttackKind, AttackSpec, DropFill};
use crate::crise::{crise_map, inverse_patch_selectivity, softmax_normalize, RiseConfig};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::image::ImageTensor;
use crate::oracle::{score_batch, Classifier, ContrastiveClassifier};
use crate::rng::{derive_seed, SeededRng};
use crate::smd::{occlude_image, SmdConfig, SpriteLibrary};

pub use dataset::{read_labels, Dataset, LabeledImage};
pub use plot::{emit_plots, PlotSeries};

/// One evaluated setting of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Condition {
    Mix { grid: GridSpec, loss: f64 },
    Drop {
        grid: GridSpec,
        loss: f64,
        #[serde(default)]
        fill: DropFill,
    },
    /// Level is the number of shuffled patches.
    Permute { grid: GridSpec },
    /// Level is the target occlusion fraction.
    Occlusion { target: f64 },
}

impl Condition {
    pub fn level(&self) -> f64 {
        match self {
            Condition::Mix { loss, .. } | Condition::Drop { loss, .. } => *loss,
            Condition::Permute { grid } => grid.n_patches() as f64,
            Condition::Occlusion { target } => *target,
        }
    }

    /// Conditions with the same family form one curve.
    pub fn family(&self) -> String {
        match self {
            Condition::Mix { grid, .. } => format!("mix {grid}"),
            Condition::Drop { grid, .. } => format!("drop {grid}"),
            Condition::Permute { .. } => "permute".into(),
            Condition::Occlusion { .. } => "smd".into(),
        }
    }

    pub fn kind_str(&self) -> &'static str {
        match self {
            Condition::Mix { .. } => "mix",
            Condition::Drop { .. } => "drop",
            Condition::Permute { .. } => "permute",
            Condition::Occlusion { .. } => "smd",
        }
    }

    pub fn grid(&self) -> Option<GridSpec> {
        match self {
            Condition::Mix { grid, .. } | Condition::Drop { grid, .. } | Condition::Permute { grid } => Some(*grid),
            Condition::Occlusion { .. } => None,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} @ {}", self.family(), self.level())
    }
}

/// Conditions for `kind` at every level; permute ignores the levels and uses `grid` once.
pub fn attack_conditions(kind: AttackKind, grid: GridSpec, levels: &[f64], fill: &DropFill) -> Vec<Condition> {
    match kind {
        AttackKind::Mix => levels.iter().map(|&loss| Condition::Mix { grid, loss }).collect(),
        AttackKind::Drop => levels
            .iter()
            .map(|&loss| Condition::Drop {
                grid,
                loss,
                fill: fill.clone(),
            })
            .collect(),
        AttackKind::Permute => vec![Condition::Permute { grid }],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub conditions: Vec<Condition>,
    pub seed: u64,
    /// Images per oracle request.
    pub batch_size: usize,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    /// Center-crop images so the largest grid divides them.
    pub center_crop: bool,
    #[serde(default)]
    pub smd: SmdConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            conditions: Vec::new(),
            seed: 0,
            batch_size: 32,
            workers: 0,
            center_crop: false,
            smd: SmdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub oracle: String,
    pub image_id: String,
    pub ground_truth: Option<usize>,
    pub condition: String,
    pub level: f64,
    pub grid: Option<GridSpec>,
    pub top1: Option<usize>,
    pub top5: Vec<usize>,
    pub correct1: bool,
    pub correct5: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub oracle: String,
    pub family: String,
    pub level: f64,
    pub top1_acc: f64,
    pub top5_acc: f64,
    pub n: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub levels: Vec<LevelSummary>,
}

impl SweepSummary {
    pub fn extend(&mut self, other: SweepSummary) {
        self.levels.extend(other.levels);
    }

    /// One series per oracle label, or per (oracle, family) when a sweep mixes families.
    pub fn series(&self, top5: bool) -> Vec<PlotSeries> {
        let families: std::collections::BTreeSet<&str> = self.levels.iter().map(|l| l.family.as_str()).collect();
        let mut out: Vec<PlotSeries> = Vec::new();
        for l in &self.levels {
            let label = if families.len() > 1 {
                format!("{} {}", l.oracle, l.family)
            } else {
                l.oracle.clone()
            };
            let y = if top5 { l.top5_acc } else { l.top1_acc };
            match out.iter_mut().find(|s| s.label == label) {
                Some(s) => s.points.push((l.level, y)),
                None => out.push(PlotSeries {
                    label,
                    points: vec![(l.level, y)],
                }),
            }
        }
        out
    }
}

/// Accuracy per condition as the mean of per-record flags over labeled, error-free records.
pub fn summarize(records: &[EvalRecord]) -> SweepSummary {
    let mut order: Vec<(String, String, u64)> = Vec::new();
    let mut acc: BTreeMap<(String, String, u64), (usize, usize, usize, usize)> = BTreeMap::new();
    for r in records {
        let family = match r.grid {
            Some(g) if r.condition != "permute" => format!("{} {g}", r.condition),
            _ => r.condition.clone(),
        };
        let key = (r.oracle.clone(), family, r.level.to_bits());
        let e = acc.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (0, 0, 0, 0)
        });
        if r.error.is_some() {
            e.3 += 1;
        } else {
            e.0 += 1;
            e.1 += r.correct1 as usize;
            e.2 += r.correct5 as usize;
        }
    }
    let levels = order
        .into_iter()
        .map(|key| {
            let (n, c1, c5, errors) = acc[&key];
            let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
            LevelSummary {
                oracle: key.0,
                family: key.1,
                level: f64::from_bits(key.2),
                top1_acc: frac(c1),
                top5_acc: frac(c5),
                n,
                errors,
            }
        })
        .collect();
    SweepSummary { levels }
}

fn largest_grid(conditions: &[Condition]) -> Option<GridSpec> {
    let mut rows = 1;
    let mut cols = 1;
    for g in conditions.iter().filter_map(Condition::grid) {
        rows = lcm(rows, g.rows);
        cols = lcm(cols, g.cols);
    }
    (rows > 1 || cols > 1).then_some(GridSpec::new(rows, cols))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

fn load_for(image: &LabeledImage, crop: Option<GridSpec>) -> Result<ImageTensor> {
    let x = image.load()?;
    match crop {
        Some(g) => x.center_crop_to_multiple(g.rows, g.cols),
        None => Ok(x),
    }
}

struct SweepContext<'a> {
    dataset: &'a Dataset,
    donors: &'a Dataset,
    sprites: Option<&'a SpriteLibrary>,
    cfg: &'a SweepConfig,
    crop: Option<GridSpec>,
}

impl SweepContext<'_> {
    fn transform(&self, image: &LabeledImage, cond: &Condition) -> Result<ImageTensor> {
        let x = load_for(image, self.crop)?;
        let seed = self.cfg.seed;
        // keyed by image only, so masks for increasing loss are nested
        let mut rng = SeededRng::derive(seed, image.image_id.as_bytes());
        match cond {
            Condition::Mix { grid, loss } => {
                let donor = self.donors.donor_for(image, seed).ok_or_else(|| {
                    Error::InvalidArgument(format!("no donor with a different label for {}", image.image_id))
                })?;
                let donor = load_for(donor, self.crop)?;
                let spec = AttackSpec::unbounded(AttackKind::Mix, *grid, *loss, seed);
                Ok(patch_mix_attack(&x, &donor, &spec, &mut rng)?.0)
            }
            Condition::Drop { grid, loss, fill } => {
                let spec = AttackSpec::unbounded(AttackKind::Drop, *grid, *loss, seed).with_fill(fill.clone());
                Ok(patch_drop(&x, &spec, &mut rng)?.0)
            }
            Condition::Permute { grid } => Ok(patch_permute(&x, *grid, &mut rng)?.0),
            Condition::Occlusion { target } => {
                let lib = self
                    .sprites
                    .ok_or_else(|| Error::InvalidArgument("occlusion sweep needs a sprite library".into()))?;
                Ok(occlude_image(&x, &image.image_id, *target, lib, &self.cfg.smd, seed)?.0)
            }
        }
    }
}

fn validate_conditions(conditions: &[Condition]) -> Result<()> {
    if conditions.is_empty() {
        return Err(Error::InvalidArgument("no sweep levels".into()));
    }
    for c in conditions {
        match c {
            Condition::Mix { loss, .. } | Condition::Drop { loss, .. } if !(0.0..=1.0).contains(loss) => {
                return Err(Error::InvalidArgument(format!("loss {loss} outside [0, 1]")));
            }
            Condition::Occlusion { target } if !(0.0..=1.0).contains(target) => {
                return Err(Error::InvalidArgument(format!("target {target} outside [0, 1]")));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Evaluates `oracle` on every image under every condition.
///
/// Records come back in (condition, image) order regardless of worker count.
/// Unlabeled images and per-image failures become error records; oracle
/// failures abort the sweep.
pub fn run_sweep<C: Classifier + ?Sized>(
    oracle_label: &str,
    oracle: &C,
    dataset: &Dataset,
    donors: Option<&Dataset>,
    sprites: Option<&SpriteLibrary>,
    cfg: &SweepConfig,
) -> Result<(Vec<EvalRecord>, SweepSummary)> {
    validate_conditions(&cfg.conditions)?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let k = oracle.categories();
    if let Some(bad) = dataset.images.iter().find(|im| im.label.is_some_and(|l| l >= k)) {
        return Err(Error::InvalidArgument(format!(
            "{} has label {} but the oracle has {k} categories",
            bad.image_id,
            bad.label.unwrap_or_default()
        )));
    }
    let ctx = SweepContext {
        dataset,
        donors: donors.unwrap_or(dataset),
        sprites,
        cfg,
        crop: if cfg.center_crop { largest_grid(&cfg.conditions) } else { None },
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;

    let jobs: Vec<(&Condition, &[LabeledImage])> = cfg
        .conditions
        .iter()
        .flat_map(|c| ctx.dataset.images.chunks(cfg.batch_size).map(move |chunk| (c, chunk)))
        .collect();
    let chunks: Vec<Vec<EvalRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(cond, chunk)| evaluate_chunk(oracle_label, oracle, &ctx, cond, chunk))
            .collect::<Result<_>>()
    })?;
    let records: Vec<EvalRecord> = chunks.into_iter().flatten().collect();
    let summary = summarize(&records);
    Ok((records, summary))
}

fn evaluate_chunk<C: Classifier + ?Sized>(
    oracle_label: &str,
    oracle: &C,
    ctx: &SweepContext<'_>,
    cond: &Condition,
    chunk: &[LabeledImage],
) -> Result<Vec<EvalRecord>> {
    let mut records: Vec<EvalRecord> = Vec::with_capacity(chunk.len());
    let mut pending: Vec<(usize, ImageTensor)> = Vec::new();
    for image in chunk {
        let mut rec = EvalRecord {
            oracle: oracle_label.to_string(),
            image_id: image.image_id.clone(),
            ground_truth: image.label,
            condition: cond.kind_str().to_string(),
            level: cond.level(),
            grid: cond.grid(),
            top1: None,
            top5: Vec::new(),
            correct1: false,
            correct5: false,
            error: None,
        };
        if image.label.is_none() {
            rec.error = Some("missing label".into());
        } else {
            match ctx.transform(image, cond) {
                Ok(img) => pending.push((records.len(), img)),
                Err(e) => {
                    log::warn!("{}: {cond}: {e}", image.image_id);
                    rec.error = Some(e.to_string());
                }
            }
        }
        records.push(rec);
    }
    // images of differing sizes go in separate requests
    let mut start = 0;
    while start < pending.len() {
        let dims = pending[start].1.dims();
        let end = pending[start..]
            .iter()
            .position(|(_, im)| im.dims() != dims)
            .map_or(pending.len(), |p| start + p);
        let batch: Vec<ImageTensor> = pending[start..end].iter().map(|(_, im)| im.clone()).collect();
        let scores = score_batch(oracle, &batch)?;
        for ((idx, _), s) in pending[start..end].iter().zip(scores) {
            let rec = &mut records[*idx];
            let top5 = s.top_k(5.min(s.k()));
            let truth = rec.ground_truth.expect("pending records are labeled");
            rec.top1 = top5.first().copied();
            rec.correct1 = rec.top1 == Some(truth);
            rec.correct5 = top5.contains(&truth);
            rec.top5 = top5;
        }
        start = end;
    }
    Ok(records)
}

/// Patch-attack sweep over `levels` with a single attack kind.
pub fn run_attack_sweep<C: Classifier + ?Sized>(
    oracle: &C,
    dataset: &Dataset,
    kind: AttackKind,
    grid: GridSpec,
    levels: &[f64],
    seed: u64,
) -> Result<(Vec<EvalRecord>, SweepSummary)> {
    let cfg = SweepConfig {
        conditions: attack_conditions(kind, grid, levels, &DropFill::default()),
        seed,
        ..SweepConfig::default()
    };
    run_sweep("oracle", oracle, dataset, None, None, &cfg)
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

/// Long-format `oracle,family,level,metric,value` table.
pub fn write_summary_csv(summary: &SweepSummary, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["oracle", "family", "level", "metric", "value"])?;
    for l in &summary.levels {
        let level = fmt_f64(l.level);
        for (metric, value) in [
            ("top1_acc", fmt_f64(l.top1_acc)),
            ("top5_acc", fmt_f64(l.top5_acc)),
            ("n", l.n.to_string()),
            ("errors", l.errors.to_string()),
        ] {
            w.write_record([l.oracle.as_str(), l.family.as_str(), &level, metric, &value])?;
        }
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(())
}

pub fn write_records_csv(records: &[EvalRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record([
        "oracle", "image_id", "ground_truth", "condition", "level", "grid", "top1", "top5", "correct1", "correct5",
        "error",
    ])?;
    for r in records {
        let top5: Vec<String> = r.top5.iter().map(ToString::to_string).collect();
        w.write_record([
            r.oracle.clone(),
            r.image_id.clone(),
            fmt_opt(&r.ground_truth),
            r.condition.clone(),
            fmt_f64(r.level),
            fmt_opt(&r.grid),
            fmt_opt(&r.top1),
            top5.join(" "),
            (r.correct1 as u8).to_string(),
            (r.correct5 as u8).to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(())
}

/// Writes `summary.csv`, `records.csv` and, when `plot` is set, `curves.svg` into `dir`.
pub fn write_eval_outputs(dir: impl AsRef<Path>, records: &[EvalRecord], summary: &SweepSummary, plot: bool) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_summary_csv(summary, dir.join("summary.csv"))?;
    write_records_csv(records, dir.join("records.csv"))?;
    if plot && !summary.levels.is_empty() {
        let svg = emit_plots(&summary.series(false), "top-1 accuracy")?;
        let path = dir.join("curves.svg");
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityConfig {
    pub grid: GridSpec,
    /// Fraction of patches replaced by the donor before explaining.
    pub level: f64,
    pub rise: RiseConfig,
    pub per_class_cap: usize,
    pub seed: u64,
    pub center_crop: bool,
}

impl Default for SelectivityConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            level: 0.3,
            rise: RiseConfig::default(),
            per_class_cap: 5,
            seed: 0,
            center_crop: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityRecord {
    pub image_id: String,
    pub ground_truth: usize,
    pub predicted: Option<usize>,
    /// Out-of-context pixel fraction, the value a uniform map would score.
    pub uniform_baseline: f64,
    pub inverse_selectivity: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSelectivity {
    pub category: usize,
    pub n: usize,
    pub mean_inverse_selectivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityReport {
    pub records: Vec<SelectivityRecord>,
    pub per_class: Vec<ClassSelectivity>,
    /// Mean over successful images; `None` when every image failed.
    pub mean_inverse_selectivity: Option<f64>,
}

/// The first `per_class_cap` labeled images of every category, in file order.
pub fn sample_per_class(dataset: &Dataset, cap: usize) -> Vec<&LabeledImage> {
    let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
    dataset
        .images
        .iter()
        .filter(|im| {
            let Some(label) = im.label else { return false };
            let n = taken.entry(label).or_default();
            *n += 1;
            *n <= cap
        })
        .collect()
}

/// Mixes out-of-context patches into each sampled image, explains the top-1
/// prediction with c-RISE and measures the normalized saliency on the mixed-in patches.
pub fn run_selectivity_eval<C: ContrastiveClassifier + ?Sized>(
    oracle: &C,
    dataset: &Dataset,
    donors: Option<&Dataset>,
    cfg: &SelectivityConfig,
) -> Result<SelectivityReport> {
    if cfg.per_class_cap == 0 {
        return Err(Error::InvalidArgument("per_class_cap must be at least 1".into()));
    }
    let donors = donors.unwrap_or(dataset);
    let crop = cfg.center_crop.then(|| {
        let s = cfg.rise.cell_stride.max(1);
        GridSpec::new(lcm(cfg.grid.rows, s), lcm(cfg.grid.cols, s))
    });
    let mut records = Vec::new();
    for image in sample_per_class(dataset, cfg.per_class_cap) {
        let truth = image.label.expect("sampled images are labeled");
        let mut rec = SelectivityRecord {
            image_id: image.image_id.clone(),
            ground_truth: truth,
            predicted: None,
            uniform_baseline: 0.0,
            inverse_selectivity: None,
            error: None,
        };
        match selectivity_for(oracle, image, donors, cfg, crop, &mut rec) {
            Ok(v) => rec.inverse_selectivity = Some(v),
            Err(e) => {
                log::warn!("selectivity: {} aborted: {e}", image.image_id);
                rec.error = Some(e.to_string());
            }
        }
        records.push(rec);
    }

    let mut by_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &records {
        if let Some(v) = r.inverse_selectivity {
            by_class.entry(r.ground_truth).or_default().push(v);
        }
    }
    let per_class = by_class
        .iter()
        .map(|(&category, v)| ClassSelectivity {
            category,
            n: v.len(),
            mean_inverse_selectivity: v.iter().sum::<f64>() / v.len() as f64,
        })
        .collect();
    let all: Vec<f64> = records.iter().filter_map(|r| r.inverse_selectivity).collect();
    let mean = (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64);
    Ok(SelectivityReport {
        records,
        per_class,
        mean_inverse_selectivity: mean,
    })
}

fn selectivity_for<C: ContrastiveClassifier + ?Sized>(
    oracle: &C,
    image: &LabeledImage,
    donors: &Dataset,
    cfg: &SelectivityConfig,
    crop: Option<GridSpec>,
    rec: &mut SelectivityRecord,
) -> Result<f64> {
    let x = load_for(image, crop)?;
    let donor = donors
        .donor_for(image, cfg.seed)
        .ok_or_else(|| Error::InvalidArgument(format!("no donor with a different label for {}", image.image_id)))?;
    let donor = load_for(donor, crop)?;
    let mut rng = SeededRng::derive(cfg.seed, image.image_id.as_bytes());
    let spec = AttackSpec::unbounded(AttackKind::Mix, cfg.grid, cfg.level, cfg.seed);
    let (attacked, mask) = patch_mix_attack(&x, &donor, &spec, &mut rng)?;
    rec.uniform_baseline = mask.ratio();
    let predicted = score_batch(oracle, std::slice::from_ref(&attacked))?
        .pop()
        .ok_or_else(|| Error::Protocol("empty response".into()))?
        .argmax();
    rec.predicted = Some(predicted);
    let rise = RiseConfig {
        seed: derive_seed(cfg.rise.seed, format!("crise|{}", image.image_id)),
        ..cfg.rise.clone()
    };
    let map = softmax_normalize(&crise_map(&attacked, oracle, predicted, &rise)?);
    inverse_patch_selectivity(&map, &mask)
}

pub fn write_selectivity_csv(report: &SelectivityReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let per_image = dir.join("selectivity.csv");
    let mut w = csv::Writer::from_path(&per_image)?;
    w.write_record(["image_id", "ground_truth", "predicted", "uniform_baseline", "inverse_selectivity", "error"])?;
    for r in &report.records {
        w.write_record([
            r.image_id.clone(),
            r.ground_truth.to_string(),
            fmt_opt(&r.predicted),
            fmt_f64(r.uniform_baseline),
            r.inverse_selectivity.map(fmt_f64).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&per_image, e))?;

    let per_class = dir.join("per_class.csv");
    let mut w = csv::Writer::from_path(&per_class)?;
    w.write_record(["category", "n", "mean_inverse_selectivity"])?;
    for c in &report.per_class {
        w.write_record([c.category.to_string(), c.n.to_string(), fmt_f64(c.mean_inverse_selectivity)])?;
    }
    w.write_record([
        "all".to_string(),
        report.records.iter().filter(|r| r.inverse_selectivity.is_some()).count().to_string(),
        report.mean_inverse_selectivity.map(fmt_f64).unwrap_or_default(),
    ])?;
    w.flush().map_err(|e| Error::io(&per_class, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(level: f64, c1: bool, c5: bool, err: bool) -> EvalRecord {
        EvalRecord {
            oracle: "o".into(),
            image_id: "i".into(),
            ground_truth: Some(0),
            condition: "drop".into(),
            level,
            grid: Some(GridSpec::new(7, 7)),
            top1: Some(0),
            top5: vec![0],
            correct1: c1,
            correct5: c5,
            error: err.then(|| "x".into()),
        }
    }

    #[test]
    fn summary_is_mean_of_flags() {
        let records = vec![
            rec(0.0, true, true, false),
            rec(0.0, false, true, false),
            rec(0.0, true, true, true),
            rec(0.5, false, false, false),
        ];
        let s = summarize(&records);
        assert_eq!(s.levels.len(), 2);
        assert_eq!(s.levels[0].n, 2);
        assert_eq!(s.levels[0].errors, 1);
        assert_eq!(s.levels[0].top1_acc, 0.5);
        assert_eq!(s.levels[0].top5_acc, 1.0);
        assert_eq!(s.levels[1].top1_acc, 0.0);
        assert_eq!(s.levels[0].family, "drop 7x7");
    }

    #[test]
    fn permute_levels_are_patch_counts() {
        let c = attack_conditions(AttackKind::Permute, GridSpec::new(4, 4), &[0.1, 0.2], &DropFill::default());
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].level(), 16.0);
    }

    #[test]
    fn crop_grid_is_common_multiple() {
        let conds = vec![
            Condition::Drop { grid: GridSpec::new(7, 7), loss: 0.1, fill: DropFill::default() },
            Condition::Drop { grid: GridSpec::new(14, 14), loss: 0.1, fill: DropFill::default() },
            Condition::Drop { grid: GridSpec::new(16, 16), loss: 0.1, fill: DropFill::default() },
        ];
        assert_eq!(largest_grid(&conds), Some(GridSpec::new(112, 112)));
    }
}
