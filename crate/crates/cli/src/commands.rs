use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use fastc::cloud::{PointCloud, Pose};
use fastc::dataset::{generate_dataset, load_poses, load_scan, AggregationConfig, Ontology, SequenceIndex};
use fastc::eval::{ablate_fusion_order, benchmark_speed, evaluate, ConfusionMatrix, RegionMask};
use fastc::model::{DType, Fastc, FrameInput, FusionStrategy};
use fastc::rng::derive_seed;
use fastc::synth::{build_scene, generate_sequence, simulate_scan};
use fastc::tmap::TraversabilityMap;
use fastc::train::{train_stage1, train_stage2, Checkpoint, FrameSet, TrainOutcome};
use log::info;
use serde_json::json;

use crate::config::RunConfig;
use crate::palette;

/// Stream labels under the root seed for the stages that draw randomness
/// outside training.
const INFER_STREAM: u64 = 6;
const TIME_STREAM: u64 = 7;
const EVAL_STREAM: u64 = 2;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(d)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Records the resolved configuration next to a command's outputs.
fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, extra: serde_json::Value) -> Result<()> {
    let manifest = json!({
        "command": command,
        "seed": cfg.seed,
        "config": toml::Value::try_from(cfg)?,
        "outputs": extra,
    });
    write(&dir.join(format!("{command}.manifest.json")), &serde_json::to_string_pretty(&manifest)?)
}

fn load_checkpoint(path: &Path, flag: &str) -> Result<Checkpoint> {
    ensure!(path.is_file(), "{flag} {}: no such file", path.display());
    Checkpoint::load(path).with_context(|| format!("{flag} {}", path.display()))
}

fn load_sets(dirs: &[PathBuf], what: &str) -> Result<FrameSet> {
    ensure!(!dirs.is_empty(), "no {what} data: set data.{what} in the config or pass --data");
    let mut set = FrameSet::default();
    for d in dirs {
        set = set.merge(FrameSet::load(d).with_context(|| format!("loading {what} data from {}", d.display()))?);
    }
    Ok(set)
}

pub fn parse_region(text: &str) -> Result<RegionMask> {
    let radius = |r: &str| -> Result<f64> {
        let v: f64 = r.parse().with_context(|| format!("bad radius {r:?}"))?;
        ensure!(v.is_finite() && v >= 0.0, "radius must be non-negative");
        Ok(v)
    };
    match text.split_once(':') {
        None if text == "all" => Ok(RegionMask::All),
        Some(("beyond", r)) => Ok(RegionMask::Beyond(radius(r)?)),
        Some(("within", r)) => Ok(RegionMask::Within(radius(r)?)),
        _ => bail!("region must be all, beyond:<m> or within:<m>, got {text:?}"),
    }
}

pub fn synth(cfg: &RunConfig, out: Option<PathBuf>, frames: Option<usize>) -> Result<()> {
    let out = out.unwrap_or_else(|| cfg.output_dir.join("synth"));
    let frames = frames.unwrap_or(cfg.synth.frames);
    let s = &cfg.synth;
    let meta = generate_sequence(cfg.seed, frames, &s.scene, &s.ego, &s.lidar, &cfg.grid()?, &out)?;
    info!("wrote {} frames to {}", meta.frames, out.display());
    write_manifest(&out, "synth", cfg, json!({ "frames": meta.frames }))?;
    println!("{}", out.display());
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, sequence: &Path, out: &Path, preset: Option<&str>) -> Result<()> {
    let seq = SequenceIndex::open(sequence).with_context(|| format!("--sequence {}", sequence.display()))?;
    let ontology = match &cfg.data.ontology {
        Some(p) => Ontology::load(p).with_context(|| format!("ontology {}", p.display()))?,
        None => Ontology::shipped_default(),
    };
    let agg = match preset {
        None => cfg.aggregation,
        Some("on-road") => AggregationConfig::on_road(),
        Some("off-road") => AggregationConfig::off_road(),
        Some(other) => bail!("--preset must be on-road or off-road, got {other:?}"),
    };
    let manifest = generate_dataset(&seq, &ontology, &agg, &cfg.grid()?, out)?;
    info!("wrote {} maps to {}", manifest.frames.len(), out.display());
    write_manifest(out, "gen-data", cfg, json!({ "frames": manifest.frames.len() }))
}

fn save_outcome(cfg: &RunConfig, outcome: &TrainOutcome, name: &str) -> Result<PathBuf> {
    create_dir(&cfg.output_dir)?;
    let ckpt = cfg.output_dir.join(format!("{name}.ckpt"));
    outcome.checkpoint()?.save(&ckpt)?;
    let losses = cfg.output_dir.join(format!("{name}_loss.csv"));
    outcome.report.write_loss_csv(&losses)?;
    info!(
        "{name}: {} steps ({:?}), kept step {}; checkpoint {}",
        outcome.report.steps,
        outcome.report.stop,
        outcome.report.kept_step,
        ckpt.display()
    );
    write_manifest(
        &cfg.output_dir,
        name,
        cfg,
        json!({
            "checkpoint": ckpt,
            "loss_csv": losses,
            "steps": outcome.report.steps,
            "kept_step": outcome.report.kept_step,
            "validations": outcome.report.validations,
        }),
    )?;
    println!("{}", ckpt.display());
    Ok(ckpt)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let train = load_sets(&cfg.data.train, "train")?;
    let val = if cfg.data.val.is_empty() {
        None
    } else {
        Some(load_sets(&cfg.data.val, "val")?)
    };
    let outcome = train_stage1(&cfg.model_config()?, &train, val.as_ref(), &cfg.train)?;
    save_outcome(cfg, &outcome, "stage1")?;
    Ok(())
}

pub fn train_fusion(cfg: &RunConfig, checkpoint: &Path, strategy: Option<FusionStrategy>) -> Result<()> {
    let stage1 = load_checkpoint(checkpoint, "--checkpoint")?;
    let strategy = strategy.unwrap_or(cfg.model.strategy);
    let train = load_sets(&cfg.data.train, "train")?;
    let val = if cfg.data.val.is_empty() {
        None
    } else {
        Some(load_sets(&cfg.data.val, "val")?)
    };
    let outcome = train_stage2(&stage1, strategy, &train, val.as_ref(), &cfg.train)?;
    save_outcome(cfg, &outcome, &format!("stage2_{}", strategy.name()))?;
    Ok(())
}

fn print_metrics(cm: &ConfusionMatrix) {
    print!("{}", cm.summary_table());
    println!("mIoU {:.4}", cm.miou());
    println!("mAcc {:.4}", cm.macc());
}

/// Pairs `.tmap` files by name and accumulates one confusion matrix.
fn compare_dirs(pred: &Path, gt: &Path, region: &RegionMask) -> Result<ConfusionMatrix> {
    let mut names: Vec<PathBuf> = fs::read_dir(gt)
        .with_context(|| format!("--gt {}", gt.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "tmap"))
        .collect();
    names.sort();
    ensure!(!names.is_empty(), "--gt {} holds no .tmap files", gt.display());
    let mut cm = ConfusionMatrix::new();
    for g in names {
        let name = g.file_name().expect("listed file");
        let p = pred.join(name);
        let truth = TraversabilityMap::load(&g)?;
        let guess = TraversabilityMap::load(&p).with_context(|| format!("--pred {}", p.display()))?;
        let spec = fastc::grid::GridSpec::new(
            (truth.origin.0, truth.origin.0 + truth.width as f64 * truth.cell_size),
            (truth.origin.1, truth.origin.1 + truth.height as f64 * truth.cell_size),
            (-1.0, 1.0),
            truth.cell_size,
        )?;
        let mask = region.cells(&spec);
        cm.accumulate_where(&guess, &truth, |r, c| mask[r * truth.width + c])?;
    }
    Ok(cm)
}

pub struct EvalArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub data: &'a [PathBuf],
    pub pred: Option<&'a Path>,
    pub gt: Option<&'a Path>,
    pub region: RegionMask,
}

pub fn eval(cfg: &RunConfig, args: EvalArgs<'_>) -> Result<()> {
    let cm = match (args.checkpoint, args.pred, args.gt) {
        (None, Some(pred), Some(gt)) => compare_dirs(pred, gt, &args.region)?,
        (Some(ckpt), None, None) => {
            let model = load_checkpoint(ckpt, "--checkpoint")?.build_model()?;
            let dirs = if args.data.is_empty() { &cfg.data.test } else { args.data };
            let set = load_sets(dirs, "test")?;
            let prepared = set.prepare(&model.cfg, &cfg.train.offsets, derive_seed(cfg.seed, EVAL_STREAM))?;
            evaluate(&model, &prepared, cfg.train.batch_size, &args.region)?
        }
        _ => bail!("pass either --checkpoint or both --pred and --gt"),
    };
    print_metrics(&cm);
    write(&cfg.output_dir.join("eval_classes.csv"), &cm.class_csv())?;
    write_manifest(
        &cfg.output_dir,
        "eval",
        cfg,
        json!({ "miou": cm.miou(), "macc": cm.macc(), "evaluated": cm.evaluated(), "rejected": cm.rejected }),
    )
}

pub fn ablate(cfg: &RunConfig, checkpoints: [&Path; 3], data: &[PathBuf], region: RegionMask, control: bool) -> Result<()> {
    let models = FusionStrategy::ALL
        .iter()
        .zip(checkpoints)
        .map(|(s, p)| Ok((*s, load_checkpoint(p, &format!("--{}", s.name()))?.build_model()?)))
        .collect::<Result<Vec<(FusionStrategy, Fastc)>>>()?;
    let first = &models[0].1.cfg;
    ensure!(
        models.iter().all(|(_, m)| m.cfg.frames == first.frames && m.cfg.grid == first.grid),
        "ablation checkpoints disagree on frame count or grid"
    );
    let dirs = if data.is_empty() { &cfg.data.test } else { data };
    let set = load_sets(dirs, "test")?;
    let prepared = set.prepare(first, &cfg.train.offsets, derive_seed(cfg.seed, EVAL_STREAM))?;
    let variants: Vec<(FusionStrategy, &Fastc)> = models.iter().map(|(s, m)| (*s, m)).collect();
    let report = ablate_fusion_order(&variants, &prepared, cfg.train.batch_size, &region, !control)?;
    print!("{}", report.table());
    if !report.pre_leads() {
        log::warn!("pre-fusion does not lead this ablation");
    }
    write(&cfg.output_dir.join("ablation.csv"), &report.csv())?;
    write_manifest(&cfg.output_dir, "ablate", cfg, json!({ "rows": report.rows, "pre_leads": report.pre_leads() }))
}

fn read_frames(model: &Fastc, scans: &[PathBuf], poses: Option<&Path>, seed: u64) -> Result<Vec<FrameInput>> {
    ensure!(
        scans.len() == model.cfg.frames,
        "the checkpoint fuses {} frames but {} --scan were given",
        model.cfg.frames,
        scans.len()
    );
    let poses = match poses {
        Some(p) => load_poses(p).with_context(|| format!("--poses {}", p.display()))?,
        None => vec![Pose::identity(); scans.len()],
    };
    ensure!(poses.len() == scans.len(), "--poses lists {} poses for {} scans", poses.len(), scans.len());
    scans
        .iter()
        .zip(poses)
        .enumerate()
        .map(|(k, (s, pose))| {
            let cloud = load_scan(s).with_context(|| format!("--scan {}", s.display()))?;
            Ok(FrameInput::from_cloud(&cloud, pose, &model.cfg, derive_seed(seed, k as u64))?)
        })
        .collect()
}

pub fn infer(cfg: &RunConfig, checkpoint: &Path, scans: &[PathBuf], poses: Option<&Path>, out: &Path, png: Option<&Path>) -> Result<()> {
    let model = load_checkpoint(checkpoint, "--checkpoint")?.build_model()?;
    let sample = read_frames(&model, scans, poses, derive_seed(cfg.seed, INFER_STREAM))?;
    let map = model.predict(&[sample])?.remove(0);
    if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(d)?;
    }
    map.save(out).with_context(|| format!("--out {}", out.display()))?;
    if let Some(p) = png {
        palette::render(&map).save(p).with_context(|| format!("--png {}", p.display()))?;
    }
    info!("class histogram {:?}", map.histogram());
    println!("{}", out.display());
    Ok(())
}

fn synthetic_scan(cfg: &RunConfig) -> Result<PointCloud> {
    let scene = build_scene(derive_seed(cfg.seed, 1), &cfg.synth.scene)?;
    let pose = cfg.synth.ego.pose(&scene, 0);
    Ok(simulate_scan(&scene, &pose, &cfg.synth.lidar, derive_seed(cfg.seed, TIME_STREAM)))
}

pub fn time(cfg: &RunConfig, checkpoint: Option<&Path>, scan: Option<&Path>, warmup: usize, iters: usize) -> Result<()> {
    let model = match checkpoint {
        Some(p) => load_checkpoint(p, "--checkpoint")?.build_model()?,
        None => Fastc::new(cfg.model_config()?, derive_seed(cfg.seed, 1), DType::F32)?,
    };
    let cloud = match scan {
        Some(s) => load_scan(s).with_context(|| format!("--scan {}", s.display()))?,
        None => synthetic_scan(cfg)?,
    };
    let sample = (0..model.cfg.frames)
        .map(|k| FrameInput::from_cloud(&cloud, Pose::identity(), &model.cfg, derive_seed(cfg.seed, k as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let report = benchmark_speed(&model, &sample, warmup, iters)?;
    println!(
        "{:.2} fps (median {:.1} ms over {} runs) on {}",
        report.fps,
        1e3 * report.median_seconds,
        report.iterations,
        report.hardware
    );
    Ok(())
}

pub fn viz(cfg: &RunConfig, input: &Path, out: &Path, decode: bool) -> Result<()> {
    if decode {
        let img = image::open(input).with_context(|| format!("--map {}", input.display()))?.to_rgb8();
        let (height, width, cells) = palette::decode(&img)?;
        let cs = cfg.grid.cell_size;
        let map = TraversabilityMap {
            height,
            width,
            cell_size: cs,
            origin: (-(width as f64) * cs / 2.0, -(height as f64) * cs / 2.0),
            cells,
        };
        map.save(out).with_context(|| format!("--out {}", out.display()))?;
    } else {
        let map = TraversabilityMap::load(input).with_context(|| format!("--map {}", input.display()))?;
        palette::render(&map).save(out).with_context(|| format!("--out {}", out.display()))?;
    }
    println!("{}", out.display());
    Ok(())
}
