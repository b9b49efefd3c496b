use std::fs;
use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use anyhow::{bail, Context, Result};
use patchlab_core::attacks::{patch_drop, patch_mix_attack, patch_permute};
use patchlab_core::augment::{apply_method, augment_pair};
use patchlab_core::harness::{attack_conditions, write_selectivity_csv, LabeledImage};
use patchlab_core::oracle::protocol::serve_connection;
use patchlab_core::oracle::{score_batch, LinearProbeFile};
use patchlab_core::smd::{generate_smd, RecordStatus};
use patchlab_core::{
    crise_map, open_oracle, run_selectivity_eval, run_sweep, save_png, softmax_normalize, write_eval_outputs,
    AttackKind, AttackSpec, AugmentPolicy, CategoryDistribution, Condition, ContrastiveClassifier, Dataset, DropFill,
    EvalRecord, GridSpec, ImageTensor, MixMethod, OracleSpec, RatioDraw, RiseConfig, ScoreSpace, SeededRng,
    SelectivityConfig, SmdConfig, SpriteLibrary, SweepConfig, SweepSummary, MAX_LOSS,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::args::{
    AttackArgs, CriseArgs, EvalArgs, MethodArg, MixArgs, RiseArgs, SelectivityArgs, ServeArgs, SmdArgs, SpaceArg,
    SweepKind,
};
use crate::config::{usage, ResolvedConfig};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_rgb(path: &Path) -> Result<ImageTensor> {
    Ok(patchlab_core::load_image(path)?.without_alpha())
}

fn stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn drop_fill(values: &[f64]) -> Result<DropFill> {
    match values {
        [] => Err(usage("--fill needs at least one value")),
        [v] => Ok(DropFill::Constant(*v)),
        vs => Ok(DropFill::PerChannel(vs.to_vec())),
    }
}

fn oracle_spec(s: &str) -> Result<OracleSpec> {
    s.parse().map_err(|e: patchlab_core::Error| usage(e.to_string()))
}

fn rise_config(r: &RiseArgs, seed: u64) -> RiseConfig {
    RiseConfig {
        n_masks: r.n_masks,
        cell_stride: r.stride,
        keep_prob: r.keep_prob,
        seed,
        batch_size: r.batch_size,
        score_space: match r.score_space {
            SpaceArg::Probability => ScoreSpace::Probability,
            SpaceArg::Logit => ScoreSpace::Logit,
        },
    }
}

fn donors_for(dir: &Option<PathBuf>, labels_for_main: &Dataset) -> Result<Option<Dataset>> {
    match dir {
        Some(d) if d != &labels_for_main.dir => Ok(Some(Dataset::load(d, None)?)),
        _ => Ok(None),
    }
}

pub fn mix(a: &MixArgs) -> Result<()> {
    if a.ratio.is_some() && a.beta.is_some() {
        return Err(usage("the argument '--ratio' cannot be used with '--beta'"));
    }
    let x_a = load_rgb(&a.image_a)?;
    let x_b = load_rgb(&a.image_b)?;
    let (k, la, lb) = match (a.k, a.label_a, a.label_b) {
        (Some(k), Some(la), Some(lb)) => (k, la, lb),
        (None, None, None) => (2, 0, 1),
        _ => return Err(usage("--k, --label-a and --label-b go together")),
    };
    let y_a = CategoryDistribution::one_hot(k, la)?;
    let y_b = CategoryDistribution::one_hot(k, lb)?;
    let ratio = match (a.ratio, a.beta) {
        (Some(r), _) => RatioDraw::Fixed(r),
        (None, Some(b)) => RatioDraw::Beta { alpha: b.alpha, beta: b.beta },
        (None, None) => AugmentPolicy::default().ratio,
    };
    let policy = AugmentPolicy {
        ratio,
        smoothing_eps: a.eps,
        grid: a.grid,
        ..AugmentPolicy::default()
    };
    policy.validate().map_err(|e| usage(e.to_string()))?;
    let mut rng = SeededRng::new(a.seed);
    let sample = match a.method {
        MethodArg::Policy => augment_pair(&x_a, &y_a, &x_b, &y_b, &policy, &mut rng)?,
        m => {
            let method = match m {
                MethodArg::PatchMixing => MixMethod::PatchMixing,
                MethodArg::Mixup => MixMethod::Mixup,
                _ => MixMethod::Cutmix,
            };
            let draw = policy.ratio.draw(&mut rng)?;
            apply_method(method, draw, &x_a, &y_a, &x_b, &y_b, &policy, &mut rng)?
        }
    };

    create_dir(&a.out_dir)?;
    save_png(&sample.image, a.out_dir.join("mixed.png"))?;
    let labeled = a.k.is_some();
    let sidecar = json!({
        "source_a": a.image_a,
        "source_b": a.image_b,
        "method": sample.method.as_str(),
        "ratio": sample.ratio,
        "mask": sample.mask.as_ref().map(|m| m.to_text()),
        "rect": sample.rect,
        "label": labeled.then(|| sample.label.probs().to_vec()),
    });
    write_json(&a.out_dir.join("mixed.json"), &sidecar)?;
    ResolvedConfig::new("mix", a)?.write(&a.out_dir.join("config.json"))?;
    log::info!("mix: {} ratio {:.4} -> {}", sample.method.as_str(), sample.ratio, a.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct AttackRecord {
    image_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    permutation: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    donor: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn attack_one(
    image: &LabeledImage,
    a: &AttackArgs,
    spec: &AttackSpec,
    donors: &Dataset,
) -> patchlab_core::Result<(ImageTensor, AttackRecord)> {
    let crop = |x: ImageTensor| {
        if a.center_crop {
            x.center_crop_to_multiple(a.grid.rows, a.grid.cols)
        } else {
            Ok(x)
        }
    };
    let x = crop(image.load()?)?;
    let mut rng = SeededRng::derive(a.seed, image.image_id.as_bytes());
    let mut rec = AttackRecord {
        image_id: image.image_id.clone(),
        output: None,
        mask: None,
        permutation: None,
        donor: None,
        error: None,
    };
    let out = match a.kind {
        AttackKind::Mix => {
            let donor = donors.donor_for(image, a.seed).ok_or_else(|| {
                patchlab_core::Error::InvalidArgument(format!("no donor with a different label for {}", image.image_id))
            })?;
            rec.donor = Some(donor.image_id.clone());
            let (out, mask) = patch_mix_attack(&x, &crop(donor.load()?)?, spec, &mut rng)?;
            rec.mask = Some(mask.to_text());
            out
        }
        AttackKind::Drop => {
            let (out, mask) = patch_drop(&x, spec, &mut rng)?;
            rec.mask = Some(mask.to_text());
            out
        }
        AttackKind::Permute => {
            let (out, perm) = patch_permute(&x, a.grid, &mut rng)?;
            rec.permutation = Some(perm);
            out
        }
    };
    Ok((out, rec))
}

pub fn attack(a: &AttackArgs) -> Result<()> {
    let spec = AttackSpec::new(a.kind, a.grid, a.loss, a.seed)
        .map_err(|e| usage(e.to_string()))?
        .with_fill(drop_fill(&a.fill)?);
    let dataset = Dataset::load(&a.in_dir, a.labels.as_deref())?;
    if dataset.is_empty() {
        bail!("no images in {}", a.in_dir.display());
    }
    let donor_set = donors_for(&a.donor_dir, &dataset)?;
    let donors = donor_set.as_ref().unwrap_or(&dataset);
    create_dir(&a.out_dir)?;

    let records: Vec<AttackRecord> = dataset
        .images
        .par_iter()
        .map(|image| {
            let name = stem(&image.path);
            let result = attack_one(image, a, &spec, donors).and_then(|(out, mut rec)| {
                let png = format!("{name}.png");
                save_png(&out, a.out_dir.join(&png))?;
                rec.output = Some(png);
                Ok(rec)
            });
            match result {
                Ok(rec) => rec,
                Err(e) => {
                    log::warn!("attack: {} failed: {e}", image.image_id);
                    AttackRecord {
                        image_id: image.image_id.clone(),
                        output: None,
                        mask: None,
                        permutation: None,
                        donor: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();

    let mut index = String::new();
    for r in &records {
        index.push_str(&serde_json::to_string(r)?);
        index.push('\n');
    }
    fs::write(a.out_dir.join("index.jsonl"), index)?;
    ResolvedConfig::new("attack", a)?.write(&a.out_dir.join("config.json"))?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    log::info!(
        "attack: {} {} loss {} on {} images ({failed} failed) -> {}",
        a.kind,
        a.grid,
        a.loss,
        records.len(),
        a.out_dir.display()
    );
    Ok(())
}

pub fn smd(a: &SmdArgs) -> Result<()> {
    let cfg = SmdConfig {
        tol: a.tol,
        overlap_threshold: a.overlap_threshold,
        scale_range: (a.scale_min, a.scale_max),
        max_attempts: a.max_attempts,
        rotate: !a.no_rotate,
        ..SmdConfig::default()
    };
    let library = SpriteLibrary::load(&a.sprites)?;
    let records = generate_smd(&a.in_dir, &library, &a.targets, &cfg, a.seed, &a.out_dir)?;
    ResolvedConfig::new("smd", a)?.write(&a.out_dir.join("config.json"))?;
    let failed = records.iter().filter(|r| r.status == RecordStatus::Error).count();
    log::info!(
        "smd: {} outputs ({failed} failed) -> {}",
        records.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn open(spec: &str) -> Result<Box<dyn ContrastiveClassifier>> {
    let spec = oracle_spec(spec)?;
    open_oracle(&spec).with_context(|| format!("opening oracle {spec:?}"))
}

pub fn crise(a: &CriseArgs) -> Result<()> {
    let oracle = open(&a.oracle)?;
    let mut x = load_rgb(&a.image)?;
    if a.center_crop {
        x = x.center_crop_to_multiple(a.rise.stride, a.rise.stride)?;
    }
    let category = match a.category {
        Some(c) if c >= oracle.categories() => {
            return Err(usage(format!("--category {c} but the oracle has {} categories", oracle.categories())))
        }
        Some(c) => c,
        None => score_batch(&*oracle, std::slice::from_ref(&x))?
            .pop()
            .context("oracle returned no scores")?
            .argmax(),
    };
    let cfg = rise_config(&a.rise, a.seed);
    let mut map = crise_map(&x, &*oracle, category, &cfg)?;
    if a.softmax {
        map = softmax_normalize(&map);
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_png(&map.render_overlay(&x)?, &a.out)?;
    if let Some(raw) = &a.out_raw {
        fs::write(raw, map.to_le_f32_bytes()).with_context(|| format!("writing {}", raw.display()))?;
    }
    ResolvedConfig::new("crise", a)?.write(&config_beside(&a.out))?;
    let (py, px) = map.argmax();
    println!(
        "{}",
        json!({"category": category, "height": map.height, "width": map.width, "peak": [py, px]})
    );
    Ok(())
}

/// `<dir>/<stem>.config.json` next to an output file.
pub fn config_beside(out: &Path) -> PathBuf {
    out.with_file_name(format!("{}.config.json", stem(out)))
}

pub fn selectivity(a: &SelectivityArgs) -> Result<()> {
    let oracle = open(&a.oracle)?;
    let dataset = Dataset::load(&a.dataset, a.labels.as_deref())?;
    if dataset.images.iter().all(|im| im.label.is_none()) {
        bail!("no labeled images in {}", a.dataset.display());
    }
    let donors = donors_for(&a.donor_dir, &dataset)?;
    let cfg = SelectivityConfig {
        grid: a.grid,
        level: a.level,
        rise: rise_config(&a.rise, a.seed),
        per_class_cap: a.per_class_cap,
        seed: a.seed,
        center_crop: a.center_crop,
    };
    let report = run_selectivity_eval(&*oracle, &dataset, donors.as_ref(), &cfg)?;
    write_selectivity_csv(&report, &a.out_dir)?;
    write_json(&a.out_dir.join("summary.json"), &report)?;
    ResolvedConfig::new("selectivity", a)?.write(&a.out_dir.join("config.json"))?;
    match report.mean_inverse_selectivity {
        Some(m) => println!("mean inverse selectivity {m:.4} over {} images", report.records.len()),
        None => println!("every image failed; see {}", a.out_dir.join("selectivity.csv").display()),
    }
    Ok(())
}

fn eval_conditions(a: &EvalArgs) -> Result<Vec<Condition>> {
    if a.grid.is_empty() {
        return Err(usage("--grid needs at least one value"));
    }
    let fill = drop_fill(&a.fill)?;
    let bounded = |kind: &str| -> Result<()> {
        match a.levels.iter().find(|&&l| l > MAX_LOSS) {
            Some(l) => Err(usage(format!("{kind} level {l} above the evaluated maximum {MAX_LOSS}"))),
            None => Ok(()),
        }
    };
    Ok(match a.kind {
        SweepKind::Mix => {
            bounded("mix")?;
            grids_then(&a.grid, |g| attack_conditions(AttackKind::Mix, g, &a.levels, &fill))
        }
        SweepKind::Drop => {
            bounded("drop")?;
            grids_then(&a.grid, |g| attack_conditions(AttackKind::Drop, g, &a.levels, &fill))
        }
        SweepKind::Permute => grids_then(&a.grid, |g| attack_conditions(AttackKind::Permute, g, &[], &fill)),
        SweepKind::Smd => {
            if a.sprites.is_none() {
                return Err(usage("--kind smd needs --sprites"));
            }
            a.levels.iter().map(|&target| Condition::Occlusion { target }).collect()
        }
    })
}

fn grids_then(grids: &[GridSpec], f: impl Fn(GridSpec) -> Vec<Condition>) -> Vec<Condition> {
    grids.iter().flat_map(|&g| f(g)).collect()
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if !a.name.is_empty() && a.name.len() != a.oracle.len() {
        return Err(usage(format!("{} --name values for {} --oracle values", a.name.len(), a.oracle.len())));
    }
    let conditions = eval_conditions(a)?;
    let dataset = Dataset::load(&a.dataset, a.labels.as_deref())?;
    if dataset.is_empty() {
        bail!("no images in {}", a.dataset.display());
    }
    let donors = donors_for(&a.donor_dir, &dataset)?;
    let sprites = a.sprites.as_ref().map(SpriteLibrary::load).transpose()?;
    let cfg = SweepConfig {
        conditions,
        seed: a.seed,
        batch_size: a.batch_size,
        workers: a.workers,
        center_crop: a.center_crop,
        smd: SmdConfig::default(),
    };

    let mut records: Vec<EvalRecord> = Vec::new();
    let mut summary = SweepSummary::default();
    for (i, spec) in a.oracle.iter().enumerate() {
        let label = a.name.get(i).cloned().unwrap_or_else(|| spec.clone());
        let oracle = open(spec)?;
        let (recs, summ) = run_sweep(&label, &*oracle, &dataset, donors.as_ref(), sprites.as_ref(), &cfg)
            .with_context(|| format!("sweep with {label}"))?;
        records.extend(recs);
        summary.extend(summ);
    }
    write_eval_outputs(&a.out_dir, &records, &summary, !a.no_plot)?;
    ResolvedConfig::new("eval", a)?.write(&a.out_dir.join("config.json"))?;

    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "oracle\tfamily\tlevel\ttop1\ttop5\tn\terrors")?;
    for l in &summary.levels {
        writeln!(
            out,
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{}\t{}",
            l.oracle, l.family, l.level, l.top1_acc, l.top5_acc, l.n, l.errors
        )?;
    }
    Ok(())
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let file = LinearProbeFile::load(&a.probe)?;
    let keep_bias = file.keep_bias_in_contrast;
    let oracle = Arc::new(file.into_probe()?.contrastive(keep_bias));
    let contrastive = !a.no_contrast;
    let mut extra = serde_json::Map::new();
    extra.insert("model".into(), json!("builtin-linear"));

    let Some(addr) = &a.listen else {
        let stdin = io::stdin();
        return Ok(serve_connection(&*oracle, contrastive, extra, stdin.lock(), io::stdout().lock())?);
    };
    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    let local = listener.local_addr()?;
    // announced on stdout so callers binding port 0 learn the real port
    println!("listening on {local}");
    io::stdout().flush()?;
    log::info!("serve: listening on {local}");
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("serve: accept failed: {e}");
                continue;
            }
        };
        let oracle = Arc::clone(&oracle);
        let extra = extra.clone();
        thread::spawn(move || {
            let peer = stream.peer_addr().map(|p| p.to_string()).unwrap_or_default();
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(e) => {
                    log::warn!("serve: {peer}: {e}");
                    return;
                }
            };
            if let Err(e) = serve_connection(&*oracle, contrastive, extra, reader, stream) {
                log::warn!("serve: {peer}: {e}");
            }
        });
    }
    Ok(())
}
