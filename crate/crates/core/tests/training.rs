//! End-to-end training behaviour on small synthetic inputs.

use fastc::eval::benchmark_speed;
use fastc::grid::GridSpec;
use fastc::model::{DType, Fastc, FusionStrategy, ModelConfig, Pass};
use fastc::rng::derive_seed;
use fastc::synth::{generate_sequence, EgoPath, LidarModel, SceneParams};
use fastc::train::{build_stage2, cross_entropy, gradients, train_stage1, Batch, FrameSet, PreparedSet, TrainConfig};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        grid: GridSpec::centered(3.2, (-3.0, 3.0), 0.2).unwrap(),
        max_pillars: 256,
        max_points: 8,
        channels: 16,
        width_divisor: 8,
        frames: 1,
        strategy: FusionStrategy::Pre,
    }
}

fn synthetic(frames: usize) -> FrameSet {
    let dir = tempfile::tempdir().unwrap();
    generate_sequence(21, frames, &SceneParams::default(), &EgoPath::default(), &LidarModel::default(), &tiny_model().grid, dir.path()).unwrap();
    FrameSet::load_synthetic(dir.path()).unwrap()
}

fn single_frame(steps: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        stage1_steps: steps,
        eval_every: 0,
        seed: 4,
        frames: 1,
        offsets: vec![0],
        ..TrainConfig::default()
    }
}

/// Mean cross-entropy of `model` in inference mode over every sample.
fn eval_loss(model: &Fastc, data: &PreparedSet<'_>) -> f64 {
    let samples: Vec<_> = (0..data.len()).map(|i| data.sample(i)).collect();
    let targets: Vec<_> = (0..data.len()).map(|i| data.target(i)).collect();
    let logits = model.forward(&samples, Pass::EVAL).unwrap();
    cross_entropy(&logits, &targets).unwrap().to_scalar::<f32>().unwrap() as f64
}

#[test]
fn two_hundred_steps_lower_the_loss_on_five_samples() {
    let set = synthetic(5);
    let cfg = single_frame(200);
    let data = set.prepare(&tiny_model(), &[0], derive_seed(cfg.seed, 2)).unwrap();
    let batch = Batch::gather(&data, &[0, 1, 2, 3, 4]);
    let initial = Fastc::new(tiny_model(), derive_seed(cfg.seed, 1), DType::F32).unwrap();
    let (before, _) = gradients(&initial, &batch, Pass::TRAIN).unwrap();

    let out = train_stage1(&tiny_model(), &set, None, &cfg).unwrap();
    assert_eq!(out.report.steps, 200);
    let (after, _) = gradients(&out.model, &batch, Pass::TRAIN).unwrap();
    assert!(after < before, "loss {before} -> {after}");
    assert!(out.report.losses.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn single_frame_fusion_starts_at_the_stage1_loss() {
    let set = synthetic(4);
    let cfg = single_frame(20);
    let stage1 = train_stage1(&tiny_model(), &set, None, &cfg).unwrap();
    let fused = build_stage2(&stage1.checkpoint().unwrap(), FusionStrategy::Pre, &cfg).unwrap();
    assert_eq!(fused.cfg.frames, 1);
    let data = set.prepare(&tiny_model(), &[0], 9).unwrap();
    let (s, m) = (eval_loss(&stage1.model, &data), eval_loss(&fused, &data));
    assert!((m - s).abs() <= 0.05 * s, "stage 1 {s}, identity fusion {m}");
}

#[test]
fn speed_report_is_self_consistent() {
    let set = synthetic(1);
    let model = Fastc::new(tiny_model(), 1, DType::F32).unwrap();
    let data = set.prepare(&tiny_model(), &[0], 0).unwrap();
    let report = benchmark_speed(&model, &data.sample(0), 1, 3).unwrap();
    assert_eq!(report.iterations, 3);
    assert!(report.median_seconds > 0.0);
    assert!((report.fps * report.median_seconds - 1.0).abs() < 1e-9);
    assert!(!report.hardware.is_empty());
}
