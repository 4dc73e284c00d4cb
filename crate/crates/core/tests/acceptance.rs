//! Acceptance gate: one `[PASS]` / `[FAIL]` line per criterion.
//!
//! Every check compares the library against an oracle written here, at the
//! tolerance the criterion states. The process exits non-zero if any fails.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rangeseg::evaluation::{lovasz_softmax, one_hot, ConfusionMatrix};
use rangeseg::kitti_io::{read_labels, read_point_cloud, write_labels, ClassRemap, Point, PointCloudScan};
use rangeseg::network::{build_network, Init, Model, NetworkConfig};
use rangeseg::ops::{bilinear_resize, conv2d, ConvSpec};
use rangeseg::pipeline::{gops_per_second, gops_per_watt, split_forward, BenchmarkReport, Pipeline, PipelineConfig};
use rangeseg::postprocess::{nla, PatchConfig};
use rangeseg::projection::{spherical_project, PointPixelMap, ProjectionConfig};
use rangeseg::quantization::{calibrate, exponent_for, fake_quant, scale_of};
use rangeseg::receptive_field::ReceptiveField;
use rangeseg::synthetic::{generate, SceneConfig};
use rangeseg::{Error, Grid, LabelImage, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.2} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

// 1 ---------------------------------------------------------------------

/// Pixel of a point, from the angles in degrees.
fn pixel_oracle(p: &Point, h: usize, w: usize, up: f64, down: f64) -> (usize, usize) {
    let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
    let r = (x * x + y * y + z * z).sqrt();
    let yaw = y.atan2(x);
    let col = ((1.0 - yaw / std::f64::consts::PI) * 0.5 * w as f64).floor();
    let pitch_deg = (z / r).asin().to_degrees();
    let row = ((up - pitch_deg) / (up - down) * h as f64).floor();
    let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    (clamp(row, h), clamp(col, w))
}

fn projection_geometry() -> Outcome {
    let t = Instant::now();
    let cfg = ProjectionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut points: Vec<Point> = (0..1000)
        .map(|_| {
            let r = rng.gen_range(1.0..80.0f32);
            let az = rng.gen_range(-std::f32::consts::PI..std::f32::consts::PI);
            let el = rng.gen_range(-0.6..0.2f32);
            Point::new(r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin(), rng.gen())
        })
        .collect();
    // force collisions: copies of earlier points pushed further out or equal
    for i in 0..100 {
        let p = points[i];
        let s = if i % 2 == 0 { 1.0 } else { 1.5 };
        points.push(Point::new(p.x * s, p.y * s, p.z * s, 0.0));
    }
    let scan = PointCloudScan::new(points.clone());
    let (img, map) = spherical_project(&scan, &cfg).map_err(|e| e.to_string())?;
    map.check_bounds(cfg.height, cfg.width).map_err(|e| e.to_string())?;

    let mut owner: Vec<Option<usize>> = vec![None; cfg.height * cfg.width];
    for (i, p) in points.iter().enumerate() {
        let (row, col) = pixel_oracle(p, cfg.height, cfg.width, cfg.fov_up, cfg.fov_down);
        ensure(map.pixel(i) == (row, col), || {
            format!("point {i}: library {:?}, oracle {:?}", map.pixel(i), (row, col))
        })?;
        let slot = &mut owner[row * cfg.width + col];
        let closer = match *slot {
            None => true,
            Some(j) => map.ranges[i] < map.ranges[j],
        };
        if closer {
            *slot = Some(i);
        }
    }
    let mut collisions = 0;
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            let expect = owner[row * cfg.width + col];
            ensure(img.owner(row, col) == expect, || {
                format!("pixel ({row},{col}) owned by {:?}, oracle {expect:?}", img.owner(row, col))
            })?;
        }
    }
    for i in 0..map.len() {
        if owner[map.rows[i] as usize * cfg.width + map.cols[i] as usize] != Some(i) {
            collisions += 1;
        }
    }
    ensure(collisions >= 100, || format!("only {collisions} collisions exercised"))?;

    let (one, m) = spherical_project(&PointCloudScan::new(vec![Point::new(10.0, 0.0, 0.0, 0.0)]), &cfg)
        .map_err(|e| e.to_string())?;
    ensure(m.pixel(0) == (6, 1024) && one.is_valid(6, 1024), || format!("(10,0,0) → {:?}", m.pixel(0)))?;
    ensure(pixel_oracle(&Point::new(10.0, 0.0, 0.0, 0.0), 64, 2048, 3.0, -25.0) == (6, 1024), || {
        "oracle disagrees on (10,0,0)".into()
    })?;
    within(t.elapsed(), 1.0)?;
    Ok(format!("1,100 points, {collisions} collisions, {:.3} s", t.elapsed().as_secs_f64()))
}

// 2 ---------------------------------------------------------------------

/// Enumerates every patch offset and keeps the smallest difference,
/// breaking ties by (row, col).
/// Also counts points whose minimum is shared by several pixels.
fn nla_oracle(range: &Grid<f32>, labels: &LabelImage, map: &PointPixelMap, k: usize) -> (Vec<u8>, usize) {
    let half = (k / 2) as isize;
    let (h, w) = (range.height() as isize, range.width() as isize);
    let mut ties = 0;
    let out = (0..map.len())
        .map(|i| {
            let (row, col) = map.pixel(i);
            let mut cands: Vec<(f32, isize, isize)> = Vec::new();
            for dr in -half..=half {
                for dc in -half..=half {
                    let (r, c) = (row as isize + dr, col as isize + dc);
                    if r < 0 || c < 0 || r >= h || c >= w {
                        continue;
                    }
                    let rv = range.at(r as usize, c as usize);
                    if rv > 0.0 {
                        cands.push(((rv - map.ranges[i]).abs(), r, c));
                    }
                }
            }
            if let Some(min) = cands.iter().map(|c| c.0).min_by(f32::total_cmp) {
                if cands.iter().filter(|c| c.0 == min).count() > 1 {
                    ties += 1;
                }
            }
            match cands.into_iter().min_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2)))) {
                Some((_, r, c)) => labels.at(r as usize, c as usize),
                None => labels.at(row, col),
            }
        })
        .collect();
    (out, ties)
}

fn nla_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ties = 0usize;
    for inst in 0..200 {
        let k = [1, 3, 5][inst % 3];
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..40));
        // small integer ranges make equal differences common
        let range = Grid::from_vec(
            h,
            w,
            (0..h * w)
                .map(|_| if rng.gen_bool(0.25) { 0.0 } else { rng.gen_range(1..5) as f32 })
                .collect(),
        );
        let labels = Grid::from_vec(h, w, (0..h * w).map(|_| rng.gen_range(0..20)).collect());
        let n = rng.gen_range(0..60);
        let map = PointPixelMap {
            rows: (0..n).map(|_| rng.gen_range(0..h) as u16).collect(),
            cols: (0..n).map(|_| rng.gen_range(0..w) as u16).collect(),
            ranges: (0..n).map(|_| rng.gen_range(1..5) as f32 + 0.5 * rng.gen_range(0..2) as f32).collect(),
        };
        let cfg = PatchConfig { k, ..Default::default() };
        let got = nla(&range, &labels, &map, &cfg).map_err(|e| e.to_string())?;
        let (want, t) = nla_oracle(&range, &labels, &map, k);
        ensure(got == want, || format!("instance {inst} (k={k}) differs"))?;
        ties += t;
    }
    ensure(ties > 0, || "no tie cases exercised".into())?;
    within(t.elapsed(), 5.0)?;
    Ok(format!("200 instances, {ties} points with tied minima, {:.3} s", t.elapsed().as_secs_f64()))
}

// 3 ---------------------------------------------------------------------

/// Textbook direct convolution; `T` is the accumulator type.
fn conv_oracle<T>(x: &Tensor, spec: &ConvSpec, w: &[f32], b: &[f32]) -> Vec<T>
where
    T: Copy + From<f32> + std::ops::Add<Output = T> + std::ops::Mul<Output = T>,
{
    let (cin, ih, iw) = x.shape();
    let (k, s, d, p) = (spec.kernel.0, spec.stride.0, spec.dilation.0, spec.padding.0 as isize);
    let oh = (ih as isize + 2 * p - (d * (k - 1)) as isize - 1) / s as isize + 1;
    let ow = (iw as isize + 2 * p - (d * (k - 1)) as isize - 1) / s as isize + 1;
    let mut out = Vec::new();
    for oc in 0..spec.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::from(b[oc]);
                for ic in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy * s as isize - p + (ky * d) as isize;
                            let ix = ox * s as isize - p + (kx * d) as isize;
                            if (0..ih as isize).contains(&iy) && (0..iw as isize).contains(&ix) {
                                acc = acc
                                    + T::from(w[((oc * cin + ic) * k + ky) * k + kx])
                                        * T::from(x.at(ic, iy as usize, ix as usize));
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn convolution_engine() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut worst_exact = 0.0f64;
    for case in 0..100 {
        let (s, d) = [(1, 1), (1, 2), (2, 1), (2, 2)][case % 4];
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let (h, w) = (rng.gen_range(3..14), rng.gen_range(3..14));
        let spec = ConvSpec::square(cin, cout, 3, s, d).with_bias(true);
        let x = Tensor::from_vec(cin, h, w, (0..cin * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let wt: Vec<f32> = (0..spec.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = conv2d(&x, &spec, &wt, Some(&b)).map_err(|e| e.to_string())?;
        let want = conv_oracle::<f32>(&x, &spec, &wt, &b);
        let exact = conv_oracle::<f64>(&x, &spec, &wt, &b);
        ensure(got.data().len() == want.len(), || format!("case {case}: output size"))?;
        for ((g, o), e) in got.data().iter().zip(&want).zip(&exact) {
            worst = worst.max((g - o).abs() as f64);
            worst_exact = worst_exact.max((*g as f64 - e).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max error {worst:e}"))?;

    let x = Tensor::from_vec(3, 5, 7, (0..105).map(|_| rng.gen_range(-9.0..9.0)).collect());
    let same = bilinear_resize(&x, 5, 7).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&same) == bits(&x), || "identity resize is not bit-exact".into())?;

    let up = bilinear_resize(&Tensor::from_vec(1, 1, 2, vec![0.0, 1.0]), 1, 4).map_err(|e| e.to_string())?;
    for (g, e) in up.data().iter().zip([0.0, 0.25, 0.75, 1.0]) {
        ensure((*g as f64 - e).abs() <= 1e-9, || format!("[0,1] upsampled to {:?}", up.data()))?;
    }
    Ok(format!(
        "100 cases, max error {worst:.1e} (vs f64 accumulation {worst_exact:.1e})"
    ))
}

// 4 ---------------------------------------------------------------------

fn architecture_contract(model: &Model) -> Outcome {
    let params = model.count_parameters();
    ensure((1_190_000..=1_610_000).contains(&params), || format!("{params} parameters"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::from_vec(8, 64, 2048, (0..8 * 64 * 2048).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let t = Instant::now();
    let y = model.forward(&x).map_err(|e| e.to_string())?;
    let secs = t.elapsed();
    ensure(y.shape() == (20, 64, 2048), || format!("output shape {:?}", y.shape()))?;
    ensure(y.all_finite(), || "non-finite logits".into())?;
    within(secs, 60.0)?;
    Ok(format!("{params} parameters, forward {:.2} s", secs.as_secs_f64()))
}

// 5 ---------------------------------------------------------------------

fn lovasz_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=64);
        let classes = rng.gen_range(1..=5u8);
        let gt: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=classes)).collect();
        let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=classes)).collect();
        let gt_img = LabelImage::from_vec(1, n, gt.clone());
        let loss = lovasz_softmax(&one_hot(&LabelImage::from_vec(1, n, pred.clone()), 20), &gt_img)
            .map_err(|e| e.to_string())?;
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&pred, &gt).map_err(|e| e.to_string())?;
        let iou = cm.per_class_iou();
        let present: Vec<usize> = (1..20).filter(|c| gt.contains(&(*c as u8))).collect();
        let expect = if present.is_empty() {
            0.0
        } else {
            present.iter().map(|&c| 1.0 - iou[c - 1]).sum::<f64>() / present.len() as f64
        };
        worst = worst.max((loss - expect).abs());
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    let gt = LabelImage::from_vec(2, 3, vec![1, 2, 3, 0, 2, 1]);
    let perfect = lovasz_softmax(&one_hot(&gt, 20), &gt).map_err(|e| e.to_string())?;
    ensure(perfect == 0.0, || format!("perfect predictions give {perfect}"))?;
    Ok(format!("100 instances, max deviation {worst:.1e}"))
}

// 6 ---------------------------------------------------------------------

fn miou_machinery() -> Outcome {
    let mut cm = ConfusionMatrix::new();
    cm.accumulate(&[1, 2, 2], &[1, 1, 2]).map_err(|e| e.to_string())?;
    let iou = cm.per_class_iou();
    ensure(iou[0] == 0.5 && iou[1] == 0.5, || format!("hand case IoU {:?}", &iou[..2]))?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let gt: Vec<u8> = (0..10_000).map(|_| rng.gen_range(0..20)).collect();
    let pred: Vec<u8> = gt.iter().map(|&g| if rng.gen_bool(0.7) { g } else { rng.gen_range(0..20) }).collect();
    let mut whole = ConfusionMatrix::new();
    whole.accumulate(&pred, &gt).map_err(|e| e.to_string())?;
    for trial in 0..20 {
        let mut cuts: Vec<usize> = (0..rng.gen_range(1..12)).map(|_| rng.gen_range(0..=10_000)).collect();
        cuts.push(0);
        cuts.push(10_000);
        cuts.sort_unstable();
        let mut shards: Vec<ConfusionMatrix> = cuts
            .windows(2)
            .map(|w| {
                let mut m = ConfusionMatrix::new();
                m.accumulate(&pred[w[0]..w[1]], &gt[w[0]..w[1]]).unwrap();
                m
            })
            .collect();
        if trial % 2 == 1 {
            shards.reverse();
        }
        let mut merged = ConfusionMatrix::new();
        for s in &shards {
            merged.merge(s);
        }
        ensure(merged == whole, || format!("trial {trial}: merged matrix differs"))?;
        ensure(merged.mean_iou() == whole.mean_iou(), || "mIoU differs".into())?;
    }
    Ok(format!("hand case (0.5, 0.5), 20 shardings of 10,000 points, mIoU {:.4}", whole.mean_iou()))
}

// 7 ---------------------------------------------------------------------

/// Smallest e with 127·2^e ≥ m, by counting.
fn exponent_oracle(m: f64) -> i32 {
    let mut e = -60;
    while 127.0 * 2f64.powi(e) < m {
        e += 1;
    }
    e
}

fn quantization_bounds(model: &Model) -> Outcome {
    ensure(scale_of(exponent_for(3.0)) == 0.03125, || "maxabs 3.0 does not give scale 0.03125".into())?;
    ensure(exponent_oracle(3.0) == exponent_for(3.0), || "exponent disagrees with oracle at 3.0".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let calib = Tensor::from_vec(8, 16, 32, (0..8 * 16 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let q = calibrate(model, &[calib]).map_err(|e| e.to_string())?;
    let mut checked = 0usize;
    for p in model.params().iter().filter(|p| p.kind.is_learned()) {
        let e = q.weights[&p.name];
        let m = p.values.iter().fold(0.0f32, |a, v| a.max(v.abs()));
        if m > 0.0 {
            ensure(e == exponent_oracle(m as f64), || format!("{}: exponent {e}", p.name))?;
        }
        let s = scale_of(e);
        ensure(s.to_bits() & 0x007f_ffff == 0 && s as f64 == 2f64.powi(e), || {
            format!("{}: scale {s} is not a power of two", p.name)
        })?;
        for &v in p.values {
            let err = (fake_quant(v, s) - v).abs();
            ensure(err <= s / 2.0, || format!("{}: error {err} > {}", p.name, s / 2.0))?;
        }
        checked += 1;
    }
    for (name, &e) in &q.activations {
        let s = scale_of(e);
        ensure(s.to_bits() & 0x007f_ffff == 0, || format!("activation {name}: scale {s}"))?;
    }
    Ok(format!("{checked} weight tensors, {} activation edges", q.activations.len()))
}

// 8 ---------------------------------------------------------------------

fn split_equivalence() -> Outcome {
    let t = Instant::now();
    let net = NetworkConfig::default();
    let cfg = PipelineConfig {
        projection: ProjectionConfig { height: 16, width: 512, ..Default::default() },
        split_cores: 2,
        ..Default::default()
    };
    let scene = SceneConfig::for_image(16, 512, 3.0, -25.0);
    let rf = ReceptiveField::of_network(&net).horizontal;
    let seam = 256usize;
    let mut seam_cols = 0usize;
    let mut points = 0usize;
    for frame in 0..10u64 {
        let p = Pipeline::with_seeded_weights(cfg.clone(), 100 + frame).map_err(|e| e.to_string())?;
        let scan = generate(&scene, frame).scan;
        let (img, _) = p.project(&scan).map_err(|e| e.to_string())?;
        let img = p.normals(&img);
        let full = p.logits(&img).map_err(|e| e.to_string())?;
        let split = p.logits_split(&img).map_err(|e| e.to_string())?;
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(&full) == bits(&split), || format!("frame {frame}: split logits differ"))?;
        let labels = |l: &Tensor| rangeseg::network::argmax_labels(l);
        let post = p.postprocess(&img, &labels(&full), &p.project(&scan).unwrap().1).map_err(|e| e.to_string())?;
        let post_split = p.postprocess(&img, &labels(&split), &p.project(&scan).unwrap().1).map_err(|e| e.to_string())?;
        ensure(post == post_split, || format!("frame {frame}: point labels differ"))?;
        points += post.len();

        if frame < 3 {
            let x = img.to_tensor();
            let no_halo = split_forward(&x, 0, net.total_stride(), |t| p.model().forward(t)).map_err(|e| e.to_string())?;
            let (c, h, w) = full.shape();
            for col in 0..w {
                let differs = (0..c).any(|ch| (0..h).any(|r| full.at(ch, r, col).to_bits() != no_halo.at(ch, r, col).to_bits()));
                if differs {
                    seam_cols += 1;
                    let dist = if col < seam { seam - 1 - col } else { col - seam };
                    ensure(dist < rf, || format!("frame {frame}: no-halo difference at column {col}, {dist} from seam"))?;
                }
            }
        }
    }
    // the full pipeline entry points agree too
    let p = Pipeline::with_seeded_weights(cfg.clone(), 7).map_err(|e| e.to_string())?;
    let scan = generate(&scene, 42).scan;
    ensure(p.run_frame(&scan).unwrap() == p.run_frame_split(&scan).unwrap(), || "run_frame_split differs".into())?;
    ensure(seam_cols > 0, || "halo 0 never changed the output; seam check is vacuous".into())?;
    Ok(format!(
        "10 frames ({points} points) bit-identical; no-halo diffs in {seam_cols} columns, all within {rf} of the seam ({:.1} s)",
        t.elapsed().as_secs_f64()
    ))
}

// 9 ---------------------------------------------------------------------

fn benchmark_arithmetic() -> Outcome {
    let e = gops_per_watt(714.0, 16.8);
    ensure(e == 42.5, || format!("714.0 GOP/s at 16.8 W gives {e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let frames = rng.gen_range(1..500);
        let secs = rng.gen_range(0.01..100.0);
        let gops = rng.gen_range(0.1..100.0);
        let watts = rng.gen_range(1.0..50.0);
        let r = BenchmarkReport::from_measurements(frames, secs, gops, Some(watts));
        let fps = frames as f64 / secs;
        ensure(r.fps == fps, || "fps identity".into())?;
        ensure(r.gops_per_second == gops * fps && gops_per_second(gops, fps) == gops * fps, || "GOP/s identity".into())?;
        ensure(r.gops_per_watt == Some(gops * fps / watts), || "GOP/W identity".into())?;
    }
    let r = BenchmarkReport::from_measurements(10, 1.0, 71.4, None);
    ensure(r.fps == 10.0 && r.gops_per_watt.is_none(), || "10 frames in 1 s".into())?;
    Ok("42.5 GOP/W from (714.0, 16.8); identities exact on 100 draws".into())
}

// 10 --------------------------------------------------------------------

fn io_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let remap = ClassRemap::semantic_kitti();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let path = dir.path().join("x.label");
    for i in 0..1000 {
        let n = rng.gen_range(0..300);
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..20)).collect();
        write_labels(&labels, &remap, &path).map_err(|e| e.to_string())?;
        let back = read_labels(&path, &remap).map_err(|e| e.to_string())?;
        ensure(back.semantic == labels, || format!("vector {i} changed on round trip"))?;
    }
    std::fs::write(&path, [0u8; 7]).unwrap();
    ensure(matches!(read_labels(&path, &remap), Err(Error::MalformedFile { .. })), || {
        "7-byte label file accepted".into()
    })?;
    let scan = dir.path().join("x.bin");
    std::fs::write(&scan, [0u8; 33]).unwrap();
    ensure(matches!(read_point_cloud(&scan), Err(Error::MalformedFile { .. })), || {
        "33-byte scan accepted".into()
    })?;
    ensure(matches!(read_point_cloud(dir.path().join("none.bin")), Err(Error::Io { .. })), || {
        "missing scan not reported as I/O".into()
    })?;
    Ok("1,000 label vectors; bad sizes rejected".into())
}

// 11 --------------------------------------------------------------------

/// 100 ground-truth points per class; class c has its first c points
/// predicted as the next class, so IoU_c = (100 − c) / (100 + prev(c)).
fn synthetic_scoring() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let remap = ClassRemap::semantic_kitti();
    let next = |c: u8| if c == 19 { 1 } else { c + 1 };
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for c in 1..=19u8 {
        for i in 0..100 {
            gt.push(c);
            pred.push(if i < c as usize { next(c) } else { c });
        }
    }
    // plus unlabeled points, which must not count
    gt.extend([0u8; 50]);
    pred.extend([3u8; 50]);
    // split over three frames on disk, scored the way `eval` does
    let bounds = [0, 700, 1400, gt.len()];
    let mut cm = ConfusionMatrix::new();
    for f in 0..3 {
        let (a, b) = (bounds[f], bounds[f + 1]);
        let pp = dir.path().join(format!("p{f}.label"));
        let gp = dir.path().join(format!("g{f}.label"));
        write_labels(&pred[a..b], &remap, &pp).map_err(|e| e.to_string())?;
        write_labels(&gt[a..b], &remap, &gp).map_err(|e| e.to_string())?;
        let p = read_labels(&pp, &remap).map_err(|e| e.to_string())?;
        let g = read_labels(&gp, &remap).map_err(|e| e.to_string())?;
        cm.accumulate(&p.semantic, &g.semantic).map_err(|e| e.to_string())?;
    }
    let iou = cm.per_class_iou();
    let mut mean = 0.0;
    for c in 1..=19usize {
        let prev = if c == 1 { 19 } else { c - 1 };
        let expect = (100 - c) as f64 / (100 + prev) as f64;
        ensure((iou[c - 1] - expect).abs() < 1e-12, || format!("class {c}: {} vs {expect}", iou[c - 1]))?;
        mean += expect / 19.0;
    }
    ensure((cm.mean_iou() - mean).abs() < 1e-12, || "mIoU".into())?;
    Ok(format!(
        "analytic mIoU {:.4} reproduced; the published 56.4 needs trained weights and is not checked",
        mean
    ))
}

fn main() -> ExitCode {
    panic::set_hook(Box::new(|_| {}));
    let model = build_network(&NetworkConfig::default(), Init::Seeded(2024)).expect("default network builds");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("projection geometry", Box::new(projection_geometry)),
        ("NLA oracle equivalence", Box::new(nla_equivalence)),
        ("convolution engine", Box::new(convolution_engine)),
        ("architecture contract", Box::new(|| architecture_contract(&model))),
        ("Lovász-Softmax identity", Box::new(lovasz_identity)),
        ("mIoU machinery", Box::new(miou_machinery)),
        ("quantization bounds", Box::new(|| quantization_bounds(&model))),
        ("split equivalence", Box::new(split_equivalence)),
        ("benchmark arithmetic", Box::new(benchmark_arithmetic)),
        ("I/O round-trips", Box::new(io_round_trips)),
        ("accuracy scoring", Box::new(synthetic_scoring)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("[PASS] {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
