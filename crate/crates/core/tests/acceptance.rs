//! Acceptance suite. Run everything with
//! `cargo test -p fastc-core --test acceptance`, or pass criterion numbers
//! (`-- 1 5 7`) to run a subset. Prints one PASS/FAIL line per criterion.

use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use fastc::cloud::{PointCloud, Pose};
use fastc::completion::{BackboneSpec, CompletionNet, DBlock, DBlockSpec, Decoder, EncoderTaps};
use fastc::eval::{ablate_fusion_order, evaluate, ConfusionMatrix, RegionMask};
use fastc::fusion::{channel_attention, relative_transform, spatial_attention, warp, Fusion, PlanarTransform};
use fastc::grid::GridSpec;
use fastc::model::{Fastc, FusionStrategy, ModelConfig, Pass};
use fastc::nn::{Conv2d, ConvSpec, Mode, ParamStore};
use fastc::pillar::{gather, pillarize, pseudo_images, scatter, PillarEncoder, PillarEncoderConfig, POINT_FEATURES};
use fastc::rng::derive_seed;
use fastc::synth::{generate_sequence, EgoPath, LidarModel, SceneParams};
use fastc::tmap::{TraversabilityMap, NUM_EVAL_CLASSES};
use fastc::train::{train_stage1, train_stage2, Checkpoint, FrameSet, TrainConfig};
use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn values(t: &Tensor) -> Result<Vec<f64>, String> {
    t.to_dtype(DType::F64).and_then(|t| t.flatten_all()).and_then(|t| t.to_vec1()).map_err(err)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Result<Tensor, String> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).map_err(err)
}

/// Sum over the leading (frame) axis of a list of weight tensors.
fn frame_sum(weights: &[Tensor]) -> Result<Vec<f64>, String> {
    let mut acc = values(&weights[0])?;
    for w in &weights[1..] {
        for (a, b) in acc.iter_mut().zip(values(w)?) {
            *a += b;
        }
    }
    Ok(acc)
}

fn c1_attention() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    let mut stacks = 0;
    for k in 1..=3 {
        for c in [4, 128] {
            let mut store = ParamStore::new(derive_seed(1, (k * 1000 + c) as u64), DType::F64);
            let conv = Conv2d::new(&mut store, "spatial", ConvSpec::new(2, 1, 7)).map_err(err)?;
            for _ in 0..4 {
                let stack: Vec<Tensor> = (0..k)
                    .map(|_| random_tensor(&mut rng, &[2, c, 9, 11], 3.0))
                    .collect::<Result<_, _>>()?;
                let cw = channel_attention(&stack).map_err(err)?;
                let sw = spatial_attention(&stack, &conv).map_err(err)?;
                ensure(cw[0].dims() == [2, c, 1, 1] && sw[0].dims() == [2, 1, 9, 11], "weight shapes")?;
                for s in frame_sum(&cw)?.into_iter().chain(frame_sum(&sw)?) {
                    worst = worst.max((s - 1.0).abs());
                }
                stacks += 1;

                let same = vec![stack[0].clone(); k];
                let expect = 1.0 / k as f64;
                for w in channel_attention(&same).map_err(err)?.iter().chain(&spatial_attention(&same, &conv).map_err(err)?) {
                    ensure(values(w)?.iter().all(|&v| v == expect), format!("identical frames did not give exactly 1/{k}"))?;
                }
            }
        }
    }
    ensure(worst <= 1e-6, format!("max |sum - 1| = {worst:e}"))?;
    Ok(format!("{stacks} stacks, max |sum - 1| = {worst:.1e}; identical frames exactly 1/K"))
}

fn c2_warp() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let map = random_tensor(&mut rng, &[3, 32, 32], 1.0)?;

    let same = warp(&map, &PlanarTransform::IDENTITY).map_err(err)?;
    let pose = Pose::from_xyz_yaw(4.0, -1.0, 0.3, 0.9);
    let g = GridSpec::centered(3.2, (-3.0, 3.0), 0.2).map_err(err)?;
    let h = relative_transform(&pose, &pose, &g).map_err(err)?;
    let again = warp(&map, &h).map_err(err)?;
    let bits = |t: &Tensor| values(t).map(|v| v.into_iter().map(f64::to_bits).collect::<Vec<_>>());
    ensure(bits(&same)? == bits(&map)? && bits(&again)? == bits(&map)?, "identity warp is not bit-exact")?;

    let mut trip = 0f64;
    for _ in 0..20 {
        let (du, dv) = (rng.gen_range(-5i32..=5), rng.gen_range(-5i32..=5));
        let there = warp(&map, &PlanarTransform::translation(du as f64, dv as f64)).map_err(err)?;
        let back = warp(&there, &PlanarTransform::translation(-du as f64, -dv as f64)).map_err(err)?;
        let (a, b) = (values(&map)?, values(&back)?);
        let m = (du.unsigned_abs() as usize, dv.unsigned_abs() as usize);
        for ch in 0..3 {
            for v in m.1..32 - m.1 {
                for u in m.0..32 - m.0 {
                    let i = (ch * 32 + v) * 32 + u;
                    trip = trip.max((a[i] - b[i]).abs());
                }
            }
        }
    }
    ensure(trip <= 1e-5, format!("translation round trip error {trip:e}"))?;

    // Impulse relocation against a metric-space oracle: every target cell is
    // mapped to world coordinates and back into the source frame.
    let g = GridSpec::centered(6.4, (-3.0, 3.0), 0.2).map_err(err)?;
    let (rows, cols) = (g.height, g.width);
    for trial in 0..20 {
        let source = Pose::from_xyz_yaw(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), 0.0, rng.gen_range(-3.1..3.1));
        let step = Pose::from_xyz_yaw(rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5), 0.0, rng.gen_range(-3.1..3.1));
        let target = source.compose(&step);
        let (ir, ic) = (rng.gen_range(24..40), rng.gen_range(24..40));
        let mut imp = vec![0.0f64; rows * cols];
        imp[ir * cols + ic] = 1.0;
        let imp = Tensor::from_vec(imp, (1, rows, cols), &Device::Cpu).map_err(err)?;
        let h = relative_transform(&source, &target, &g).map_err(err)?;
        let got = values(&warp(&imp, &h).map_err(err)?)?;

        let to_source = source.inverse().compose(&target);
        let mut expect = vec![0.0f64; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let (x, y) = g.cell_center(r, c).map_err(err)?;
                let p = to_source.matrix() * nalgebra::Vector4::new(x, y, 0.0, 1.0);
                let su = (p.x - g.x_min) / g.cell_size - 0.5;
                let sv = (p.y - g.y_min) / g.cell_size - 0.5;
                let wu = (1.0 - (su - ic as f64).abs()).max(0.0);
                let wv = (1.0 - (sv - ir as f64).abs()).max(0.0);
                expect[r * cols + c] = wu * wv;
            }
        }
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a))).unwrap();
        let (ga, ea) = (argmax(&got), argmax(&expect));
        let dev = got.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(
            ga == ea && dev <= 1e-6,
            format!("pose {trial}: impulse at cell {} expected {} (max deviation {dev:e})", ga, ea),
        )?;
    }
    Ok(format!("identity bit-exact; round-trip error {trip:.1e}; 20/20 impulses at the predicted cell"))
}

/// `f` at `x`, reduced to a scalar by a fixed random projection.
fn projected(out: &Tensor, probe: &Tensor) -> Result<Tensor, String> {
    out.mul(probe).and_then(|t| t.sum_all()).map_err(err)
}

/// Largest relative error between autograd and central differences over
/// `samples` random entries of every variable.
fn grad_check(
    vars: &[(String, Var)],
    rng: &mut ChaCha8Rng,
    samples: usize,
    mut loss: impl FnMut() -> Result<Tensor, String>,
) -> Result<(f64, String), String> {
    let grads = loss()?.backward().map_err(err)?;
    let eps = 1e-6;
    let mut worst = (0f64, String::new());
    for (name, var) in vars {
        let base = values(var.as_tensor())?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => values(g)?,
            None => vec![0.0; base.len()],
        };
        for _ in 0..samples.min(base.len()) {
            let i = rng.gen_range(0..base.len());
            let mut bumped = base.clone();
            let mut eval_at = |v: f64| -> Result<f64, String> {
                bumped[i] = v;
                var.set(&Tensor::from_vec(bumped.clone(), var.dims(), &Device::Cpu).map_err(err)?).map_err(err)?;
                loss()?.to_scalar::<f64>().map_err(err)
            };
            let numeric = (eval_at(base[i] + eps)? - eval_at(base[i] - eps)?) / (2.0 * eps);
            var.set(&Tensor::from_vec(base.clone(), var.dims(), &Device::Cpu).map_err(err)?).map_err(err)?;
            let a = analytic[i];
            let scale = a.abs().max(numeric.abs());
            let rel = if scale < 1e-7 { 0.0 } else { (a - numeric).abs() / scale };
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]: autograd {a:e} vs numeric {numeric:e}"));
            }
        }
    }
    Ok(worst)
}

fn c3_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut report = Vec::new();
    let mut worst = 0f64;
    let mut record = |what: &str, (rel, at): (f64, String)| {
        worst = worst.max(rel);
        report.push(format!("{what} {rel:.1e}"));
        if rel > 1e-3 {
            Err(format!("{what}: relative error {rel:e} at {at}"))
        } else {
            Ok(())
        }
    };

    // Fusion of two 4-channel 16×16 frames with non-trivial attention.
    let mut store = ParamStore::new(31, DType::F64);
    let fusion = Fusion::new(&mut store, "fusion", 2, 4).map_err(err)?;
    store.assign("fusion.spatial.weight", &random_tensor(&mut rng, &[1, 2, 7, 7], 0.3)?).map_err(err)?;
    let frames: Vec<Var> = (0..2)
        .map(|_| random_tensor(&mut rng, &[2, 4, 16, 16], 1.0).and_then(|t| Var::from_tensor(&t).map_err(err)))
        .collect::<Result<_, _>>()?;
    let probe = random_tensor(&mut rng, &[2, 4, 16, 16], 1.0)?;
    let mut vars: Vec<(String, Var)> = store.params().to_vec();
    vars.extend(frames.iter().enumerate().map(|(k, v)| (format!("frame{k}"), v.clone())));
    let r = grad_check(&vars, &mut rng, 12, || {
        let stack: Vec<Tensor> = frames.iter().map(|v| v.as_tensor().clone()).collect();
        projected(&fusion.forward(&stack).map_err(err)?, &probe)
    })?;
    record("fusion", r)?;

    // One strided, dilated D block in training mode.
    let mut store = ParamStore::new(32, DType::F64);
    let spec = DBlockSpec {
        in_ch: 4,
        out_ch: 8,
        dilations: (1, 2),
        stride: 2,
    };
    let block = DBlock::new(&mut store, "block", spec).map_err(err)?;
    let x = Var::from_tensor(&random_tensor(&mut rng, &[2, 4, 16, 16], 1.0)?).map_err(err)?;
    let probe = random_tensor(&mut rng, &[2, 8, 8, 8], 1.0)?;
    let mut vars: Vec<(String, Var)> = store.params().to_vec();
    vars.push(("input".into(), x.clone()));
    let r = grad_check(&vars, &mut rng, 12, || projected(&block.forward(x.as_tensor(), Mode::Train).map_err(err)?, &probe))?;
    record("D block", r)?;

    // Decoder on taps of a 16×16 quarter-resolution map.
    let spec = BackboneSpec::scaled(8, 32);
    let [c4, c8, c16] = spec.tap_channels();
    let mut store = ParamStore::new(33, DType::F64);
    let decoder = Decoder::new(&mut store, "decoder", &spec).map_err(err)?;
    let taps: Vec<Var> = [(c4, 16), (c8, 8), (c16, 4)]
        .iter()
        .map(|&(c, s)| random_tensor(&mut rng, &[2, c, s, s], 1.0).and_then(|t| Var::from_tensor(&t).map_err(err)))
        .collect::<Result<_, _>>()?;
    let probe = random_tensor(&mut rng, &[2, 5, 16, 16], 1.0)?;
    let mut vars: Vec<(String, Var)> = store.params().to_vec();
    vars.extend(taps.iter().enumerate().map(|(k, v)| (format!("tap{k}"), v.clone())));
    let r = grad_check(&vars, &mut rng, 8, || {
        let t = EncoderTaps {
            quarter: taps[0].as_tensor().clone(),
            eighth: taps[1].as_tensor().clone(),
            sixteenth: taps[2].as_tensor().clone(),
        };
        projected(&decoder.forward(&t, Mode::Train).map_err(err)?, &probe)
    })?;
    record("decoder", r)?;
    Ok(format!("max relative error {worst:.1e} ({})", report.join(", ")))
}

fn random_cloud(rng: &mut ChaCha8Rng) -> PointCloud {
    let n = rng.gen_range(1..3000);
    let points = (0..n)
        .map(|_| {
            [
                rng.gen_range(-8.0f32..8.0),
                rng.gen_range(-8.0f32..8.0),
                rng.gen_range(-4.0f32..4.0),
                rng.gen_range(0.0f32..1.0),
            ]
        })
        .collect();
    PointCloud::new(points)
}

fn c4_pillars() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = GridSpec::centered(6.4, (-3.0, 3.0), 0.2).map_err(err)?;
    let half = g.cell_size / 2.0;
    let mut store = ParamStore::new(4, DType::F32);
    let encoder = PillarEncoder::new(&mut store, "pillar", PillarEncoderConfig { channels: 16, normalize: true }).map_err(err)?;
    let (mut mean_err, mut center_excess, mut perm_err) = (0f64, 0f64, 0f64);
    for trial in 0..100 {
        let cloud = random_cloud(&mut rng);
        let max_points = if trial % 2 == 0 { 64 } else { 3 };
        let batch = pillarize(&cloud, &g, 4096, max_points, trial).map_err(err)?;
        for p in 0..batch.max_pillars {
            let rows: Vec<&[f32]> = (0..max_points)
                .filter(|&n| batch.point_mask[p * max_points + n])
                .map(|n| batch.point(p, n))
                .collect();
            ensure(batch.pillar_mask[p] == !rows.is_empty(), "pillar mask disagrees with its points")?;
            for d in 4..7 {
                let m = rows.iter().map(|r| r[d] as f64).sum::<f64>() / rows.len().max(1) as f64;
                mean_err = mean_err.max(m.abs());
            }
            for r in &rows {
                center_excess = center_excess.max((r[7].abs() as f64 - half).max(r[8].abs() as f64 - half));
            }
        }
        let padding_zero = (0..batch.max_pillars * max_points)
            .filter(|&i| !batch.point_mask[i])
            .all(|i| batch.points[i * POINT_FEATURES..(i + 1) * POINT_FEATURES].iter().all(|&v| v == 0.0));
        ensure(padding_zero, "padding entries are not zero")?;

        // Point order never matters: reverse the points inside every pillar,
        // and for unsampled pillars also shuffle the raw cloud.
        let mut reversed = batch.clone();
        for p in 0..batch.max_pillars {
            let k = (0..max_points).filter(|&n| batch.point_mask[p * max_points + n]).count();
            for n in 0..k {
                let (dst, src) = ((p * max_points + n) * POINT_FEATURES, (p * max_points + k - 1 - n) * POINT_FEATURES);
                reversed.points[dst..dst + POINT_FEATURES].copy_from_slice(&batch.points[src..src + POINT_FEATURES]);
            }
        }
        let mut variants = vec![reversed];
        if max_points == 64 {
            let mut pts = cloud.points.clone();
            pts.shuffle(&mut rng);
            variants.push(pillarize(&PointCloud::new(pts), &g, 4096, max_points, trial).map_err(err)?);
        }
        let base = values(&pseudo_images(&encoder, std::slice::from_ref(&batch), &g, DType::F32, Mode::Eval).map_err(err)?)?;
        for v in variants {
            let other = values(&pseudo_images(&encoder, &[v], &g, DType::F32, Mode::Eval).map_err(err)?)?;
            perm_err = perm_err.max(base.iter().zip(&other).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }

        let feats = random_tensor(&mut rng, &[batch.max_pillars, 5], 1.0)?;
        let map = scatter(&feats, &batch.coords, &batch.pillar_mask, &g).map_err(err)?;
        let back = values(&gather(&map, &batch.coords, &batch.pillar_mask, &g).map_err(err)?)?;
        let orig = values(&feats)?;
        let exact = (0..batch.max_pillars).all(|p| {
            (0..5).all(|c| back[p * 5 + c] == if batch.pillar_mask[p] { orig[p * 5 + c] } else { 0.0 })
        });
        ensure(exact, "scatter/gather round trip is not exact")?;
    }
    ensure(mean_err <= 1e-5, format!("offset mean {mean_err:e}"))?;
    ensure(center_excess <= 1e-5, format!("centre offset exceeds half a cell by {center_excess:e}"))?;
    ensure(perm_err <= 1e-5, format!("permutation changed the pseudo-image by {perm_err:e}"))?;
    Ok(format!(
        "100 clouds: |offset mean| {mean_err:.1e}, centre offsets within cell/2, permutation error {perm_err:.1e}, round trip exact"
    ))
}

fn c5_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = GridSpec::centered(1.6, (-3.0, 3.0), 0.2).map_err(err)?;
    for pair in 0..50 {
        let mut draw = |unknown_rate: f64| -> Vec<u8> {
            (0..g.num_cells())
                .map(|_| if rng.gen::<f64>() < unknown_rate { 4 } else { rng.gen_range(0..4) })
                .collect()
        };
        let gt = draw(0.1);
        let pred = draw(0.05);
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(
            &TraversabilityMap::from_cells(&g, pred.clone()).map_err(err)?,
            &TraversabilityMap::from_cells(&g, gt.clone()).map_err(err)?,
        )
        .map_err(err)?;

        // Brute force: per class, walk every cell.
        let mut ious = Vec::new();
        let mut accs = Vec::new();
        for class in 0..NUM_EVAL_CLASSES as u8 {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (&p, &t) in pred.iter().zip(&gt) {
                if t == 4 {
                    continue;
                }
                match (p == class, t == class) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let c = cm.class_counts(class as usize);
            ensure((c.tp, c.fp, c.fn_) == (tp, fp, fn_), format!("pair {pair} class {class}: counts differ"))?;
            if tp + fp + fn_ > 0 {
                ious.push(Ratio::new(tp, tp + fp + fn_));
            }
            if tp + fp > 0 {
                accs.push(Ratio::new(tp, tp + fp));
            }
        }
        let mean = |v: &[Ratio<u64>]| {
            let s = v.iter().fold(Ratio::from_integer(0u64), |a, b| a + b) / Ratio::from_integer(v.len() as u64);
            *s.numer() as f64 / *s.denom() as f64
        };
        let (miou, macc) = (mean(&ious), mean(&accs));
        ensure(
            (cm.miou() - miou).abs() <= 1e-12 && (cm.macc() - macc).abs() <= 1e-12,
            format!("pair {pair}: mIoU {} vs {miou}, mAcc {} vs {macc}", cm.miou(), cm.macc()),
        )?;
    }
    Ok("50 map pairs: integer counts identical, mIoU/mAcc equal the rational oracle".into())
}

fn c6_shapes() -> Outcome {
    let grid = GridSpec::full_scale();
    ensure((grid.height, grid.width) == (512, 512), "full-scale grid is not 512x512")?;
    let spec = BackboneSpec::standard(128);
    let mut store = ParamStore::new(6, DType::F32);
    let net = CompletionNet::new(&mut store, "net", &spec).map_err(err)?;
    let x = Tensor::zeros((1, 128, grid.height, grid.width), DType::F32, &Device::Cpu).map_err(err)?;
    let taps = net.encoder.forward(&x, Mode::Eval).map_err(err)?;
    let logits = net.decoder.forward(&taps, Mode::Eval).map_err(err)?;
    let shapes = [taps.quarter.dims(), taps.eighth.dims(), taps.sixteenth.dims(), logits.dims()];
    let expect: [&[usize]; 4] = [&[1, 96, 128, 128], &[1, 128, 64, 64], &[1, 320, 32, 32], &[1, 5, 128, 128]];
    ensure(shapes == expect, format!("shapes {shapes:?}"))?;
    Ok(format!("taps {:?} {:?} {:?}, logits {:?}", shapes[0], shapes[1], shapes[2], shapes[3]))
}

fn sequence(dir: &Path, seed: u64, frames: usize, lidar: &LidarModel, grid: &GridSpec) -> FrameSet {
    generate_sequence(seed, frames, &SceneParams::default(), &EgoPath::default(), lidar, grid, dir)
        .expect("synthetic sequence");
    FrameSet::load_synthetic(dir).expect("load sequence")
}

fn c7_overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let grid = GridSpec::desk_scale();
    let data = sequence(dir.path(), 7, 20, &LidarModel::default(), &grid);
    let model_cfg = ModelConfig {
        grid,
        max_pillars: 4096,
        max_points: 32,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        learning_rate: 2e-3,
        stage1_steps: 500,
        eval_every: 25,
        patience: usize::MAX,
        target_miou: Some(0.90),
        seed: 7,
        frames: 1,
        offsets: vec![0],
        ..TrainConfig::default()
    };
    let out = train_stage1(&model_cfg, &data, Some(&data), &cfg).map_err(|e| e.to_string())?;
    let curve: Vec<String> = out.report.validations.iter().map(|(s, m)| format!("{s}:{m:.3}")).collect();
    let prepared = data.prepare(&out.model.cfg, &cfg.offsets, derive_seed(cfg.seed, 2)).map_err(|e| e.to_string())?;
    let miou = evaluate(&out.model, &prepared, 2, &RegionMask::All).map_err(|e| e.to_string())?.miou();
    let first = out.report.validations.iter().find(|(_, m)| *m >= 0.90).map(|(s, _)| *s);
    let detail = format!("training mIoU {miou:.4}, first >= 0.90 at {first:?}, curve [{}]", curve.join(" "));
    ensure(first.is_some(), detail.clone())?;
    Ok(detail)
}

/// Sensor range of the sparse lidar; the far annulus starts at half of it.
const SPARSE_RANGE: f64 = 20.0;
const FUSION_OFFSETS: [i64; 3] = [0, -5, -10];

/// Held-out synthetic splits recorded with the sparse 16-ring lidar, each
/// from its own scene.
struct Splits {
    train: FrameSet,
    val: FrameSet,
    test: FrameSet,
}

/// Stage-1 and pre-fusion stage-2 models shared by criteria 8 and 9.
struct FusionRuns {
    splits: Splits,
    stage1: Checkpoint,
    pre: Checkpoint,
    log: String,
}

fn sparse_splits() -> Result<Splits, String> {
    let lidar = LidarModel::sparse16();
    ensure(lidar.max_range == SPARSE_RANGE, "sparse lidar range changed")?;
    let grid = GridSpec::desk_scale();
    let load = |seeds: &[u64], frames: usize| -> Result<FrameSet, String> {
        let mut set: Option<FrameSet> = None;
        for &seed in seeds {
            let dir = tempfile::tempdir().map_err(err)?;
            let s = sequence(dir.path(), seed, frames, &lidar, &grid);
            set = Some(match set {
                Some(acc) => acc.merge(s),
                None => s,
            });
        }
        set.ok_or_else(|| "no sequences".to_string())
    };
    Ok(Splits {
        train: load(&[81, 82], 30)?,
        val: load(&[83], 15)?,
        test: load(&[84], 20)?,
    })
}

fn sparse_model() -> ModelConfig {
    ModelConfig {
        grid: GridSpec::desk_scale(),
        max_pillars: 4096,
        max_points: 32,
        ..ModelConfig::default()
    }
}

fn stage1_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        stage1_steps: 400,
        eval_every: 50,
        patience: 3,
        seed: 8,
        frames: 1,
        offsets: vec![0],
        ..TrainConfig::default()
    }
}

fn stage2_config(steps: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        stage2_steps: steps,
        eval_every: 50,
        patience: 3,
        seed: 8,
        frames: 3,
        offsets: FUSION_OFFSETS.to_vec(),
        ..TrainConfig::default()
    }
}

fn curve(v: &[(u64, f64)]) -> String {
    v.iter().map(|(s, m)| format!("{s}:{m:.3}")).collect::<Vec<_>>().join(" ")
}

fn build_fusion_runs() -> Result<FusionRuns, String> {
    let splits = sparse_splits()?;
    let s = train_stage1(&sparse_model(), &splits.train, Some(&splits.val), &stage1_config()).map_err(err)?;
    let stage1 = s.checkpoint().map_err(err)?;
    let m = train_stage2(&stage1, FusionStrategy::Pre, &splits.train, Some(&splits.val), &stage2_config(300)).map_err(err)?;
    let log = format!(
        "stage 1 kept step {} [{}]; stage 2 kept step {} [{}]",
        s.report.kept_step,
        curve(&s.report.validations),
        m.report.kept_step,
        curve(&m.report.validations)
    );
    Ok(FusionRuns {
        splits,
        stage1,
        pre: m.checkpoint().map_err(err)?,
        log,
    })
}

fn fusion_runs() -> Result<&'static FusionRuns, String> {
    static RUNS: OnceLock<Result<FusionRuns, String>> = OnceLock::new();
    RUNS.get_or_init(build_fusion_runs).as_ref().map_err(Clone::clone)
}

/// mIoU of `model` on `set` over all cells and over the far annulus.
fn scores(model: &Fastc, set: &FrameSet, offsets: &[i64]) -> Result<(f64, f64), String> {
    let data = set.prepare(&model.cfg, offsets, derive_seed(8, 2)).map_err(err)?;
    let all = evaluate(model, &data, 2, &RegionMask::All).map_err(err)?.miou();
    let far = evaluate(model, &data, 2, &RegionMask::Beyond(SPARSE_RANGE / 2.0)).map_err(err)?.miou();
    Ok((all, far))
}

fn c8_multi_frame() -> Outcome {
    let runs = fusion_runs()?;
    let single = runs.stage1.build_model().map_err(err)?;
    let fused = runs.pre.build_model().map_err(err)?;
    let (s_all, s_far) = scores(&single, &runs.splits.test, &[0])?;
    let (m_all, m_far) = scores(&fused, &runs.splits.test, &FUSION_OFFSETS)?;
    let gain = 100.0 * (m_far - s_far);
    let detail = format!(
        "far-annulus mIoU single {:.2} vs K=3 {:.2} (gain {gain:+.2} points); all cells {:.2} vs {:.2}; {}",
        100.0 * s_far,
        100.0 * m_far,
        100.0 * s_all,
        100.0 * m_all,
        runs.log
    );
    ensure(gain >= 2.0, detail.clone())?;
    Ok(detail)
}

fn c9_ablation() -> Outcome {
    let runs = fusion_runs()?;
    let steps = 120;
    let mut ckpts = Vec::new();
    for strategy in FusionStrategy::ALL {
        let out = train_stage2(&runs.stage1, strategy, &runs.splits.train, Some(&runs.splits.val), &stage2_config(steps)).map_err(err)?;
        ckpts.push((strategy, out.checkpoint().map_err(err)?));
    }
    let models: Vec<(FusionStrategy, Fastc)> = ckpts
        .iter()
        .map(|(s, c)| c.build_model().map(|m| (*s, m)))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let data = runs.splits.test.prepare(&models[0].1.cfg, &FUSION_OFFSETS, derive_seed(8, 2)).map_err(err)?;
    let variants: Vec<(FusionStrategy, &Fastc)> = models.iter().map(|(s, m)| (*s, m)).collect();
    let report = ablate_fusion_order(&variants, &data, 2, &RegionMask::All, true).map_err(err)?;
    ensure(
        report.rows.iter().map(|r| r.strategy.as_str()).eq(["pre", "in", "post"]),
        format!("rows {:?}", report.rows),
    )?;
    ensure(report.rows.iter().all(|r| r.miou.is_finite() && r.macc.is_finite()), "non-finite scores")?;

    // Control: one checkpoint loaded three times under all three labels.
    let bytes = ckpts[0].1.to_bytes().map_err(err)?;
    let copies: Vec<Fastc> = (0..3)
        .map(|_| Checkpoint::from_bytes(&bytes).and_then(|c| c.build_model()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let control: Vec<(FusionStrategy, &Fastc)> = FusionStrategy::ALL.into_iter().zip(&copies).collect();
    let same = ablate_fusion_order(&control, &data, 2, &RegionMask::All, false).map_err(err)?;
    let first = (same.rows[0].miou.to_bits(), same.rows[0].macc.to_bits());
    ensure(
        same.rows.iter().all(|r| (r.miou.to_bits(), r.macc.to_bits()) == first),
        format!("control rows differ:\n{}", same.table()),
    )?;
    let rows: Vec<String> = report.rows.iter().map(|r| format!("{} {:.2}/{:.2}", r.strategy, 100.0 * r.miou, 100.0 * r.macc)).collect();
    Ok(format!(
        "{steps} stage-2 steps each, mIoU/mAcc {}; pre leads: {}; control rows identical",
        rows.join(", "),
        report.pre_leads()
    ))
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn tree_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(err)? {
            let path = entry.map_err(err)?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).map_err(err)?.display().to_string();
                out.push((rel, std::fs::read(&path).map_err(err)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn c10_determinism() -> Outcome {
    let grid = GridSpec::desk_scale();
    let (a, b) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    let gen = |dir: &Path| generate_sequence(7, 12, &SceneParams::default(), &EgoPath::default(), &LidarModel::default(), &grid, dir).map_err(err);
    gen(a.path())?;
    gen(b.path())?;
    let files = tree_bytes(a.path())?;
    ensure(!files.is_empty() && files == tree_bytes(b.path())?, "regenerated sequence differs")?;
    let data = FrameSet::load_synthetic(a.path()).map_err(err)?;

    // The overfit run of criterion 7, shortened; both stages twice.
    let model_cfg = ModelConfig {
        grid,
        max_pillars: 4096,
        max_points: 32,
        ..ModelConfig::default()
    };
    let s1 = TrainConfig {
        learning_rate: 2e-3,
        stage1_steps: 30,
        eval_every: 15,
        patience: usize::MAX,
        seed: 7,
        frames: 1,
        offsets: vec![0],
        ..TrainConfig::default()
    };
    let stage1 = || -> Result<(Vec<u8>, String), String> {
        let out = train_stage1(&model_cfg, &data, Some(&data), &s1).map_err(err)?;
        Ok((out.checkpoint().and_then(|c| c.to_bytes()).map_err(err)?, format!("{:?}", out.report)))
    };
    let first = stage1()?;
    ensure(first == stage1()?, "stage-1 checkpoint or report differs between runs")?;
    let ckpt = Checkpoint::from_bytes(&first.0).map_err(err)?;
    let s2 = TrainConfig {
        stage2_steps: 10,
        eval_every: 5,
        frames: 3,
        offsets: vec![0, -2, -4],
        ..s1.clone()
    };
    let stage2 = || -> Result<Vec<u8>, String> {
        let out = train_stage2(&ckpt, FusionStrategy::Pre, &data, Some(&data), &s2).map_err(err)?;
        out.checkpoint().and_then(|c| c.to_bytes()).map_err(err)
    };
    let fused = stage2()?;
    ensure(fused == stage2()?, "stage-2 checkpoint differs between runs")?;

    // Inference and metrics from two independently restored models.
    let restore = || Checkpoint::from_bytes(&fused).and_then(|c| c.build_model()).map_err(err);
    let (m1, m2) = (restore()?, restore()?);
    let prepared = data.prepare(&m1.cfg, &s2.offsets, derive_seed(7, 2)).map_err(err)?;
    let again = data.prepare(&m1.cfg, &s2.offsets, derive_seed(7, 2)).map_err(err)?;
    let logits = |m: &Fastc, i: usize| -> Result<Vec<u64>, String> {
        let t = m.forward(&[prepared.sample(i)], Pass::EVAL).map_err(err)?;
        Ok(values(&t)?.into_iter().map(f64::to_bits).collect())
    };
    for i in [0, prepared.len() - 1] {
        ensure(prepared.sample(i) == again.sample(i), "pillarization differs between runs")?;
        ensure(logits(&m1, i)? == logits(&m2, i)? && logits(&m1, i)? == logits(&m1, i)?, "logits differ between runs")?;
    }
    let cm1 = evaluate(&m1, &prepared, 2, &RegionMask::All).map_err(err)?;
    let cm2 = evaluate(&m2, &again, 2, &RegionMask::All).map_err(err)?;
    ensure(cm1 == cm2 && cm1.miou().to_bits() == cm2.miou().to_bits(), "metrics differ between runs")?;
    ensure(c5_metrics()? == c5_metrics()?, "metric oracle run differs")?;
    Ok(format!(
        "{} generated files, stage-1/2 checkpoints ({} / {} bytes), logits and metrics bit-identical across reruns",
        files.len(),
        first.0.len(),
        fused.len()
    ))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let criteria = [
        Criterion {
            id: 1,
            name: "attention normalization",
            budget: Duration::from_secs(10),
            run: c1_attention,
        },
        Criterion {
            id: 2,
            name: "warp contracts",
            budget: Duration::from_secs(30),
            run: c2_warp,
        },
        Criterion {
            id: 3,
            name: "gradient checks",
            budget: Duration::from_secs(120),
            run: c3_gradients,
        },
        Criterion {
            id: 4,
            name: "pillar invariants",
            budget: Duration::from_secs(30),
            run: c4_pillars,
        },
        Criterion {
            id: 5,
            name: "metric oracle",
            budget: Duration::from_secs(10),
            run: c5_metrics,
        },
        Criterion {
            id: 6,
            name: "shape walk",
            budget: Duration::from_secs(10),
            run: c6_shapes,
        },
        Criterion {
            id: 7,
            name: "desk-scale overfit",
            budget: Duration::from_secs(15 * 60),
            run: c7_overfit,
        },
        Criterion {
            id: 8,
            name: "multi-frame benefit",
            budget: Duration::from_secs(45 * 60),
            run: c8_multi_frame,
        },
        Criterion {
            id: 9,
            name: "ablation runner",
            budget: Duration::from_secs(60 * 60),
            run: c9_ablation,
        },
        Criterion {
            id: 10,
            name: "determinism",
            budget: Duration::from_secs(15 * 60),
            run: c10_determinism,
        },
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let took = start.elapsed();
        let outcome = outcome.and_then(|d| {
            if took <= c.budget {
                Ok(d)
            } else {
                Err(format!("{d}; over budget {:.0?} > {:.0?}", took, c.budget))
            }
        });
        match outcome {
            Ok(d) => println!("PASS criterion {} ({}) [{:.1?}]: {d}", c.id, c.name, took),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {} ({}) [{:.1?}]: {d}", c.id, c.name, took)
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
