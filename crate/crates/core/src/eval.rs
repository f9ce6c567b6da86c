//! Confusion-matrix metrics, inference timing and the fusion-placement
//! ablation.

use std::fmt::Write as _;
use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridSpec;
use crate::model::{Fastc, FusionStrategy, ModelError, Sample};
use crate::tmap::{CostClass, TraversabilityMap, NUM_CLASSES, NUM_EVAL_CLASSES};
use crate::train::{PreparedSet, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction is {pred:?} but ground truth is {gt:?}")]
    Shape { pred: (usize, usize), gt: (usize, usize) },
    #[error("class id {0} out of range")]
    ClassId(u8),
    #[error("ablation is missing the {0} checkpoint")]
    MissingVariant(&'static str),
    #[error("ablation variant {name} was trained with the {actual} strategy")]
    WrongVariant { name: &'static str, actual: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => TrainError::Model(m),
            other => TrainError::Target(other.to_string()),
        }
    }
}

/// Counts indexed by (ground truth, prediction) over the four evaluated
/// classes. The fifth prediction column holds cells predicted unknown;
/// they count as misses of the true class. Cells whose ground truth is
/// unknown are only counted as rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_EVAL_CLASSES],
    pub rejected: u64,
}

/// Per-class counts behind the metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&mut self, pred: u8, gt: u8) -> Result<(), EvalError> {
        if pred as usize >= NUM_CLASSES {
            return Err(EvalError::ClassId(pred));
        }
        match gt {
            g if g == CostClass::Unknown.id() => self.rejected += 1,
            g if (g as usize) < NUM_EVAL_CLASSES => self.counts[g as usize][pred as usize] += 1,
            g => return Err(EvalError::ClassId(g)),
        }
        Ok(())
    }

    pub fn accumulate(&mut self, pred: &TraversabilityMap, gt: &TraversabilityMap) -> Result<(), EvalError> {
        self.accumulate_where(pred, gt, |_, _| true)
    }

    /// Accumulates only the cells where `keep(row, col)` holds.
    pub fn accumulate_where(
        &mut self,
        pred: &TraversabilityMap,
        gt: &TraversabilityMap,
        keep: impl Fn(usize, usize) -> bool,
    ) -> Result<(), EvalError> {
        if pred.shape() != gt.shape() {
            return Err(EvalError::Shape {
                pred: pred.shape(),
                gt: gt.shape(),
            });
        }
        for r in 0..gt.height {
            for c in 0..gt.width {
                if keep(r, c) {
                    self.record(pred.get(r, c), gt.get(r, c))?;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in row.iter_mut().zip(o) {
                *a += b;
            }
        }
        self.rejected += other.rejected;
    }

    /// Cells scored against a known ground-truth class.
    pub fn evaluated(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn class_counts(&self, class: usize) -> ClassCounts {
        let tp = self.counts[class][class];
        let fp = (0..NUM_EVAL_CLASSES).filter(|&g| g != class).map(|g| self.counts[g][class]).sum();
        let fn_ = self.counts[class].iter().sum::<u64>() - tp;
        ClassCounts { tp, fp, fn_ }
    }

    /// TP/(TP+FP+FN); `None` when the denominator is zero.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let c = self.class_counts(class);
        let d = c.tp + c.fp + c.fn_;
        (d > 0).then(|| c.tp as f64 / d as f64)
    }

    /// TP/(TP+FP), i.e. per-class precision rather than recall.
    pub fn precision(&self, class: usize) -> Option<f64> {
        let c = self.class_counts(class);
        let d = c.tp + c.fp;
        (d > 0).then(|| c.tp as f64 / d as f64)
    }

    fn mean(&self, per_class: impl Fn(usize) -> Option<f64>, what: &str) -> f64 {
        let vals: Vec<f64> = (0..NUM_EVAL_CLASSES).filter_map(per_class).collect();
        if vals.is_empty() {
            warn!("{what} is undefined on an empty confusion matrix");
            return f64::NAN;
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// Mean IoU over classes with a non-zero denominator; NaN if none.
    pub fn miou(&self) -> f64 {
        self.mean(|c| self.iou(c), "mIoU")
    }

    /// Mean precision over classes with a non-zero denominator; NaN if none.
    pub fn macc(&self) -> f64 {
        self.mean(|c| self.precision(c), "mAcc")
    }

    /// `class,tp,fp,fn,iou` rows; undefined IoU is left empty.
    pub fn class_csv(&self) -> String {
        let mut out = String::from("class,tp,fp,fn,iou\n");
        for (i, class) in CostClass::ALL.iter().take(NUM_EVAL_CLASSES).enumerate() {
            let c = self.class_counts(i);
            let iou = self.iou(i).map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{iou}", class.name(), c.tp, c.fp, c.fn_);
        }
        out
    }

    /// Per-class IoU table with the two summary metrics.
    pub fn summary_table(&self) -> String {
        let pct = |v: Option<f64>| v.map(|x| format!("{:>11.1}", 100.0 * x)).unwrap_or_else(|| format!("{:>11}", "-"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>11} {:>11} {:>11} {:>11} {:>11} {:>11}",
            "free", "low-cost", "medium-cost", "lethal", "mIoU", "mAcc"
        );
        let cells: Vec<String> = (0..NUM_EVAL_CLASSES).map(|c| pct(self.iou(c))).collect();
        let finite = |v: f64| (!v.is_nan()).then_some(v);
        let _ = writeln!(out, "{} {} {}", cells.join(" "), pct(finite(self.miou())), pct(finite(self.macc())));
        out
    }
}

/// Cells included in a metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegionMask {
    All,
    /// Cells whose centre lies farther than this from the sensor.
    Beyond(f64),
    /// Cells whose centre lies within this distance of the sensor.
    Within(f64),
}

impl RegionMask {
    pub fn contains(&self, g: &GridSpec, row: usize, col: usize) -> bool {
        let dist = || {
            let (x, y) = g.cell_center(row, col).expect("cell inside grid");
            x.hypot(y)
        };
        match *self {
            RegionMask::All => true,
            RegionMask::Beyond(r) => dist() > r,
            RegionMask::Within(r) => dist() <= r,
        }
    }

    /// Row-major cell mask for `g`.
    pub fn cells(&self, g: &GridSpec) -> Vec<bool> {
        (0..g.height)
            .flat_map(|r| (0..g.width).map(move |c| (r, c)))
            .map(|(r, c)| self.contains(g, r, c))
            .collect()
    }
}

/// Confusion matrix of `model` over every sample of `data`.
pub fn evaluate(model: &Fastc, data: &PreparedSet<'_>, batch: usize, region: &RegionMask) -> Result<ConfusionMatrix, EvalError> {
    let g = model.cfg.grid;
    let mask = region.cells(&g);
    let mut cm = ConfusionMatrix::new();
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let samples: Vec<Sample> = chunk.iter().map(|&i| data.sample(i)).collect();
        let preds = model.predict(&samples)?;
        for (&i, pred) in chunk.iter().zip(&preds) {
            cm.accumulate_where(pred, data.target(i), |r, c| mask[g.flat_index(r, c)])?;
        }
    }
    Ok(cm)
}

/// Inference throughput measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub fps: f64,
    pub median_seconds: f64,
    pub iterations: usize,
    pub hardware: String,
}

pub fn hardware_descriptor() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("{cpu}, {threads} threads, CPU backend")
}

/// Median wall-clock time of single-sample inference after `warmup` runs.
/// Each iteration covers the full network from pillar batches to class maps.
pub fn benchmark_speed(model: &Fastc, sample: &Sample, warmup: usize, iters: usize) -> Result<SpeedReport, EvalError> {
    let iters = iters.max(1);
    let batch = std::slice::from_ref(sample);
    for _ in 0..warmup {
        model.predict(batch)?;
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        model.predict(batch)?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = if iters % 2 == 1 {
        times[iters / 2]
    } else {
        0.5 * (times[iters / 2 - 1] + times[iters / 2])
    };
    Ok(SpeedReport {
        fps: 1.0 / median.max(f64::MIN_POSITIVE),
        median_seconds: median,
        iterations: iters,
        hardware: hardware_descriptor(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub miou: f64,
    pub macc: f64,
}

/// Pre/in/post fusion results on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("strategy,miou,macc\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6},{:.6}", r.strategy, r.miou, r.macc);
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<10} {:>8} {:>8}\n", "strategy", "mIoU", "mAcc");
        for r in &self.rows {
            let _ = writeln!(out, "{:<10} {:>8.1} {:>8.1}", r.strategy, 100.0 * r.miou, 100.0 * r.macc);
        }
        out
    }

    /// Whether pre-fusion scores at least as high as both alternatives.
    pub fn pre_leads(&self) -> bool {
        let get = |s: &str| self.rows.iter().find(|r| r.strategy == s).map(|r| r.miou);
        match (get("pre"), get("in"), get("post")) {
            (Some(p), Some(i), Some(o)) => p >= i && p >= o,
            _ => false,
        }
    }
}

/// Evaluates the three fusion placements on the same prepared inputs. Each
/// entry of `variants` is `(strategy, model)`; all three must be present.
/// When `require_matching` is set every model must have been built with the
/// strategy it is listed under.
pub fn ablate_fusion_order(
    variants: &[(FusionStrategy, &Fastc)],
    data: &PreparedSet<'_>,
    batch: usize,
    region: &RegionMask,
    require_matching: bool,
) -> Result<AblationReport, EvalError> {
    let mut rows = Vec::new();
    for s in FusionStrategy::ALL {
        let model = variants
            .iter()
            .find(|(v, _)| *v == s)
            .map(|(_, m)| *m)
            .ok_or(EvalError::MissingVariant(s.name()))?;
        if require_matching && model.cfg.strategy != s {
            return Err(EvalError::WrongVariant {
                name: s.name(),
                actual: model.cfg.strategy.name(),
            });
        }
        let cm = evaluate(model, data, batch, region)?;
        rows.push(AblationRow {
            strategy: s.name().to_string(),
            miou: cm.miou(),
            macc: cm.macc(),
        });
    }
    Ok(AblationReport { rows })
}
