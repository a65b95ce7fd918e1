//! Acceptance criteria, one line per criterion. Exits non-zero if any fails.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mamp::checkpoint;
use mamp::flo;
use mamp_core::alignment::{align_down, align_up};
use mamp_core::color::{rgb_to_lab, LabChannel};
use mamp_core::encoder::{EncoderConfig, EncoderParams};
use mamp_core::flow::{FlowOverrides, ZeroFlow};
use mamp_core::matching::{
    local_affinity, match_local, motion_aware_match, one_hot, propagate_labels, topk_filter, RoiConfig, TopK,
};
use mamp_core::memory::{select_references, MemoryBank, MemoryMode};
use mamp_core::metrics::{contour_f, generalization_gap, region_j, BinaryView};
use mamp_core::oracle::{
    max_weight_diff, naive_argmax, naive_local_affinity, synth_moving_square, synth_translating_texture, SquareSpec,
    SyntheticVideo,
};
use mamp_core::pipeline::{segment_video, SegmentConfig};
use mamp_core::resample::{pad_to_multiple, unpad};
use mamp_core::train::{example_loss, gradient_check, train, Example, TrainConfig, TrainOutput};
use mamp_core::{FlowField, Image, IndexedMask, Raster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn random_raster(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Raster {
    Raster::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
}

fn random_simplex(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> Raster {
    let mut r = Raster::from_fn(h, w, k, |_, _, _| rng.random_range(0.01..1.0));
    for px in r.data_mut().chunks_exact_mut(k) {
        let s: f64 = px.iter().sum();
        px.iter_mut().for_each(|v| *v /= s);
    }
    r
}

fn mask_j(pred: &IndexedMask, gt: &IndexedMask, id: u8) -> f64 {
    let (p, g) = (pred.binary(id), gt.binary(id));
    region_j(
        BinaryView::new(pred.height(), pred.width(), &p).unwrap(),
        BinaryView::new(gt.height(), gt.width(), &g).unwrap(),
    )
    .unwrap()
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let enc = EncoderConfig::toy();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..3u64 {
        let frames: Vec<Image> = synth_translating_texture(2, 8, 8, (1, 1), 100 + seed)
            .unwrap()
            .iter()
            .map(|f| rgb_to_lab(f).unwrap())
            .collect();
        let params = EncoderParams::init(&enc, seed).unwrap();
        let ex = Example::new(frames[0].clone(), frames[1].clone(), LabChannel::B).unwrap();
        let report = gradient_check(&ex, &params, &enc, &RoiConfig::vanilla(6), 1e-2, 4).unwrap();
        if report.checked != params.num_values() {
            return outcome(
                false,
                format!("checked {} of {} parameters", report.checked, params.num_values()),
            );
        }
        checked += report.checked;
        worst = worst.max(report.max_relative_error);
    }
    let took = start.elapsed();
    outcome(
        worst <= 1e-3 && took < Duration::from_secs(120),
        format!(
            "max relative error {worst:.2e} over {checked} parameter checks (3 seeds), {}",
            secs(took)
        ),
    )
}

fn kernel_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut argmax_ok = 0;
    for _ in 0..100 {
        let (h, w, c) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=4),
        );
        let frames = rng.random_range(1..=3);
        let r = rng.random_range(0..=2);
        let q = random_raster(&mut rng, h, w, c);
        let refs: Vec<Raster> = (0..frames).map(|_| random_raster(&mut rng, h, w, c)).collect();
        let refs: Vec<&Raster> = refs.iter().collect();
        let cfg = RoiConfig::vanilla(r);
        let fast = local_affinity(&q, &refs, &cfg).unwrap();
        let slow = naive_local_affinity(&q, &refs, &cfg).unwrap();
        worst = worst.max(max_weight_diff(&fast, &slow));
        let top1 = topk_filter(&fast, TopK::K(1)).unwrap();
        let picked: Vec<(u32, u32)> = top1.rows().map(|row| (row[0].frame, row[0].cell)).collect();
        if picked == naive_argmax(&slow) {
            argmax_ok += 1;
        }
    }
    outcome(
        worst <= 1e-5 && argmax_ok == 100,
        format!("max |diff| {worst:.1e} on 100 instances; top-1 equals brute-force argmax on {argmax_ok}/100"),
    )
}

fn motion_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut identical = 0;
    let trials = 50;
    for _ in 0..trials {
        let (h, w, c, k) = (
            rng.random_range(1..=10),
            rng.random_range(1..=10),
            rng.random_range(1..=6),
            rng.random_range(1..=4),
        );
        let n = rng.random_range(1..=5);
        let q = random_raster(&mut rng, h, w, c);
        let keys: Vec<Raster> = (0..n).map(|_| random_raster(&mut rng, h, w, c)).collect();
        let values: Vec<Raster> = (0..n).map(|_| random_simplex(&mut rng, h, w, k)).collect();
        let keys: Vec<&Raster> = keys.iter().collect();
        let values: Vec<&Raster> = values.iter().collect();
        let cfg = RoiConfig {
            radius: rng.random_range(0..=3),
            top_k: if rng.random_bool(0.5) {
                TopK::All
            } else {
                TopK::K(rng.random_range(1..=9))
            },
            temperature: None,
        };
        let flows = vec![FlowField::zeros(h, w); n];
        let motion = motion_aware_match(&q, &keys, &values, &flows, &cfg).unwrap();
        let vanilla = match_local(&q, &keys, &values, &cfg).unwrap();
        let bitwise = motion.data().len() == vanilla.data().len()
            && motion
                .data()
                .iter()
                .zip(vanilla.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        // the same path spelled out stage by stage
        let staged = propagate_labels(
            &topk_filter(&local_affinity(&q, &keys, &cfg).unwrap(), cfg.top_k).unwrap(),
            &values,
        )
        .unwrap();
        if bitwise && motion.max_abs_diff(&staged) < 1e-12 {
            identical += 1;
        }
    }
    outcome(
        identical == trials,
        format!("zero-flow motion-aware output bitwise equal to the vanilla matcher on {identical}/{trials} instances"),
    )
}

/// The toy encoder trained on translating textures, with the evaluation
/// losses before and after.
struct Trained {
    output: TrainOutput,
    repeat_identical: bool,
    eval_before: f64,
    eval_after: f64,
    took: Duration,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let velocities = [(1, 0), (0, 1), (2, 1), (-1, 2), (1, -1), (-2, 0), (1, 2), (0, -2)];
        let videos: Vec<Vec<Image>> = velocities
            .iter()
            .enumerate()
            .map(|(s, &v)| synth_translating_texture(6, 64, 64, v, s as u64).unwrap())
            .collect();
        let enc = EncoderConfig::toy();
        let cfg = TrainConfig::toy();
        let mut eval = Vec::new();
        for video in &videos {
            for pair in video.windows(2) {
                for ch in [LabChannel::A, LabChannel::B] {
                    eval.push(Example::new(rgb_to_lab(&pair[0]).unwrap(), rgb_to_lab(&pair[1]).unwrap(), ch).unwrap());
                }
            }
        }
        let roi = RoiConfig {
            temperature: cfg.temperature,
            ..RoiConfig::vanilla(cfg.radius)
        };
        let mean_loss = |p: &EncoderParams| {
            eval.iter()
                .map(|e| example_loss(e, p, &enc, &roi).unwrap())
                .sum::<f64>()
                / eval.len() as f64
        };
        let start = Instant::now();
        let output = train(&videos, &enc, &cfg).unwrap();
        let took = start.elapsed();
        let again = train(&videos, &enc, &cfg).unwrap();
        let repeat_identical = again.params == output.params && again.losses == output.losses;
        Trained {
            eval_before: mean_loss(&EncoderParams::init(&enc, cfg.seed).unwrap()),
            eval_after: mean_loss(&output.params),
            output,
            repeat_identical,
            took,
        }
    })
}

fn exact_flows(video: &SyntheticVideo) -> FlowOverrides<ZeroFlow> {
    let mut flows = FlowOverrides::new(ZeroFlow);
    for t in 1..video.frames.len() {
        for r in select_references(t).unwrap() {
            flows.insert(t, r, video.flow(t, r));
        }
    }
    flows
}

fn motion_benefit() -> Outcome {
    let enc = EncoderConfig::toy();
    let params = &trained().output.params;
    let video = synth_moving_square(SquareSpec::default()).unwrap();
    let flows = exact_flows(&video);
    let run = |motion: bool| {
        let cfg = SegmentConfig {
            motion,
            ..SegmentConfig::default()
        };
        let start = Instant::now();
        let out = segment_video(&video.frames, &video.masks[0], params, &enc, &cfg, &flows).unwrap();
        let took = start.elapsed();
        let js: Vec<f64> = out
            .iter()
            .zip(&video.masks)
            .skip(1)
            .map(|(p, g)| mask_j(p, g, 1))
            .collect();
        (js.iter().sum::<f64>() / js.len() as f64, took)
    };
    let (with, took) = run(true);
    let (without, _) = run(false);
    outcome(
        with >= 0.85 && with - without >= 0.1 && took < Duration::from_secs(60),
        format!(
            "mean J motion-aware {with:.3}, vanilla {without:.3}, gain {:.3} (need >= 0.85 and >= 0.1); motion run {}",
            with - without,
            secs(took)
        ),
    )
}

fn memory_schedule() -> Outcome {
    let at10 = select_references(10).unwrap();
    let at100 = select_references(100).unwrap();
    let schedule_ok = at10 == [0, 5, 7, 9] && at100 == [0, 5, 95, 97, 99];
    let mut bank = MemoryBank::new(MemoryMode::Both);
    let mut peak = 0;
    for t in 0..500 {
        bank.update(t, Raster::zeros(1, 1, 1), Raster::filled(1, 1, 1, 1.0))
            .unwrap();
        peak = peak.max(bank.len());
    }
    let enc = EncoderConfig::toy();
    let params = EncoderParams::init(&enc, 0).unwrap();
    let video = synth_moving_square(SquareSpec {
        frames: 12,
        size: 64,
        side: 16,
        start: (8, 24),
        velocity: (3, 0),
        seed: 5,
    })
    .unwrap();
    let mut modes_ok = 0;
    for memory in [MemoryMode::Both, MemoryMode::LongOnly, MemoryMode::ShortOnly] {
        let cfg = SegmentConfig {
            memory,
            ..SegmentConfig::default()
        };
        if let Ok(out) = segment_video(&video.frames, &video.masks[0], &params, &enc, &cfg, &ZeroFlow) {
            if out.len() == 12 && out.iter().all(|m| m.ids().iter().all(|&id| id <= 1)) {
                modes_ok += 1;
            }
        }
    }
    outcome(
        schedule_ok && peak <= 6 && modes_ok == 3,
        format!(
            "t=10 -> {at10:?}, t=100 -> {at100:?}; peak bank size {peak} over 500 frames (need <= 6); {modes_ok}/3 memory modes ran"
        ),
    )
}

fn topk_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = random_raster(&mut rng, 25, 25, 4);
    let refs: Vec<Raster> = (0..5).map(|_| random_raster(&mut rng, 25, 25, 4)).collect();
    let refs: Vec<&Raster> = refs.iter().collect();
    let block = local_affinity(&q, &refs, &RoiConfig::vanilla(12)).unwrap();
    let identity = topk_filter(&block, TopK::All).unwrap() == block;
    let center = 12 * 25 + 12;
    let full = block.row(center).len();
    let kept = topk_filter(&block, TopK::K(36)).unwrap();
    let kept_len = kept.row(center).len();
    let worst_sum = kept
        .rows()
        .map(|row| (row.iter().map(|c| c.weight).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    outcome(
        identity && full == 3125 && kept_len == 36 && worst_sum <= 1e-5,
        format!(
            "k=all identity: {identity}; centre cell keeps {kept_len} of {full} candidates; max |sum - 1| {worst_sum:.1e}"
        ),
    )
}

fn training_sanity() -> Outcome {
    let t = trained();
    let ratio = t.eval_after / t.eval_before;
    let losses = &t.output.losses;
    let last: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    outcome(
        losses.len() == 200 && ratio < 0.5 && t.repeat_identical && t.took < Duration::from_secs(300),
        format!(
            "evaluation loss {:.3} -> {:.3} (ratio {ratio:.3}) after {} iterations; batch loss {:.3} -> {last:.3}; repeat run identical: {}; {}",
            t.eval_before,
            t.eval_after,
            losses.len(),
            losses[0],
            t.repeat_identical,
            secs(t.took)
        ),
    )
}

fn metric_arithmetic() -> Outcome {
    let gap = generalization_gap(63.9, 64.9, 60.3, 67.7);
    let gap_ok = (gap - 0.4).abs() < 1e-9 && format!("{gap:.1}") == "0.4";
    let mask = |h: usize, w: usize, f: &dyn Fn(usize, usize) -> bool| -> Vec<bool> {
        (0..h * w).map(|i| f(i / w, i % w)).collect()
    };
    fn view(d: &[bool], h: usize, w: usize) -> BinaryView<'_> {
        BinaryView::new(h, w, d).unwrap()
    }
    let a = mask(6, 6, &|y, x| (1..3).contains(&y) && (1..3).contains(&x));
    let shifted = mask(6, 6, &|y, x| (1..3).contains(&y) && (2..4).contains(&x));
    let far = mask(6, 6, &|y, x| y >= 4 && x >= 4);
    let empty = mask(6, 6, &|_, _| false);
    let sq = mask(20, 20, &|y, x| (5..13).contains(&y) && (5..13).contains(&x));
    let sq_shift = mask(20, 20, &|y, x| (5..13).contains(&y) && (6..14).contains(&x));
    let cases = [
        ("J identical", region_j(view(&a, 6, 6), view(&a, 6, 6)).unwrap(), 1.0),
        ("J disjoint", region_j(view(&a, 6, 6), view(&far, 6, 6)).unwrap(), 0.0),
        (
            "J shifted 2x2",
            region_j(view(&a, 6, 6), view(&shifted, 6, 6)).unwrap(),
            1.0 / 3.0,
        ),
        (
            "J empty/empty",
            region_j(view(&empty, 6, 6), view(&empty, 6, 6)).unwrap(),
            1.0,
        ),
        (
            "F identical",
            contour_f(view(&a, 6, 6), view(&a, 6, 6), None).unwrap(),
            1.0,
        ),
        (
            "F empty pred",
            contour_f(view(&empty, 6, 6), view(&a, 6, 6), None).unwrap(),
            0.0,
        ),
        (
            "F shifted square tol 1",
            contour_f(view(&sq_shift, 20, 20), view(&sq, 20, 20), Some(1)).unwrap(),
            1.0,
        ),
    ];
    let failed: Vec<&str> = cases
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-12)
        .map(|c| c.0)
        .collect();
    outcome(
        gap_ok && failed.is_empty(),
        format!(
            "MAST gap {gap:.1} ({gap:.17}); {}/{} J/F unit cases pass{}",
            cases.len() - failed.len(),
            cases.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failing: {failed:?}")
            }
        ),
    )
}

fn static_fixed_point() -> Outcome {
    let enc = EncoderConfig::toy();
    let params = &trained().output.params;
    let video = synth_moving_square(SquareSpec::default()).unwrap();
    let frames = vec![video.frames[0].clone(); 10];
    let mask = &video.masks[0];
    let out = segment_video(&frames, mask, params, &enc, &SegmentConfig::default(), &ZeroFlow).unwrap();
    let js: Vec<f64> = out.iter().map(|m| mask_j(m, mask, 1)).collect();
    let min = js.iter().cloned().fold(1.0, f64::min);
    outcome(
        out[0] == *mask && min >= 0.99,
        format!("per-frame J min {min:.4} over 10 frames (need >= 0.99)"),
    )
}

fn alignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut pad_ok = true;
    for h in 1..=64 {
        for w in 1..=64 {
            for n in [1, 2, 4, 8] {
                let r = random_raster(&mut rng, h, w, 1);
                let (p, info) = pad_to_multiple(&r, n).unwrap();
                let back = unpad(&p, &info).unwrap();
                pad_ok &= back.dims() == r.dims()
                    && back
                        .data()
                        .iter()
                        .zip(r.data())
                        .all(|(a, b)| a.to_bits() == b.to_bits());
            }
        }
    }
    let mut worst_iou: f64 = 1.0;
    for _ in 0..50 {
        let n = if rng.random_bool(0.5) { 2 } else { 4 };
        let (h, w) = (n * rng.random_range(8..=24), n * rng.random_range(8..=24));
        let y0 = n * rng.random_range(0..h / n - 4);
        let x0 = n * rng.random_range(0..w / n - 4);
        let y1 = (y0 + n * rng.random_range(4..=12)).min(h);
        let x1 = (x0 + n * rng.random_range(4..=12)).min(w);
        let ids: Vec<u8> = (0..h * w)
            .map(|i| ((y0..y1).contains(&(i / w)) && (x0..x1).contains(&(i % w))) as u8)
            .collect();
        let m = IndexedMask::new(h, w, ids.clone()).unwrap();
        let (d, info) = align_down(&one_hot(&ids, h, w, 2).unwrap(), n).unwrap();
        let up = align_up(&d, &info, h, w).unwrap();
        let back = IndexedMask::from_fn(h, w, |y, x| (up.get(y, x, 1) > up.get(y, x, 0)) as u8);
        worst_iou = worst_iou.min(mask_j(&back, &m, 1));
    }
    let wide = Raster::filled(480, 854, 2, 0.5);
    let (d, info) = align_down(&wide, 4).unwrap();
    let up = align_up(&d, &info, 480, 854).unwrap();
    let wide_ok = info.pad_right == 2 && d.width() == 214 && (up.height(), up.width()) == (480, 854);
    outcome(
        pad_ok && worst_iou >= 0.95 && wide_ok,
        format!(
            "pad/unpad bitwise for all sizes 1..64, n in {{1,2,4,8}}: {pad_ok}; worst rectangle IoU {worst_iou:.3} over 50; 854 -> 856 -> 854: {wide_ok}"
        ),
    )
}

fn file_formats() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data: Vec<f64> = (0..17 * 23 * 2)
        .map(|_| rng.random_range(-40.0f32..40.0) as f64)
        .collect();
    let field = FlowField::from_interleaved(17, 23, data).unwrap();
    let path = dir.path().join("f.flo");
    flo::write(&path, &field).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let read = flo::read(&path).unwrap();
    let flo_ok = read
        .raster()
        .data()
        .iter()
        .zip(field.raster().data())
        .all(|(a, b)| a.to_bits() == b.to_bits())
        && (read.height(), read.width()) == (17, 23)
        && flo::encode(&read).unwrap() == bytes;
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"HEIP");
    std::fs::write(&path, &bad).unwrap();
    let flo_bad = flo::read(&path).is_err();

    let params = checkpoint::quantize(&EncoderParams::init(&EncoderConfig::toy(), 4).unwrap());
    let ck = dir.path().join("toy.ckpt");
    checkpoint::save(&ck, &params).unwrap();
    let ck_bytes = std::fs::read(&ck).unwrap();
    let (config, loaded) = checkpoint::load(&ck, checkpoint::Architecture::Auto).unwrap();
    let bits = |p: &EncoderParams| p.values().map(f64::to_bits).collect::<Vec<_>>();
    let ck_ok = config == EncoderConfig::toy()
        && bits(&loaded) == bits(&params)
        && checkpoint::encode(&loaded).unwrap() == ck_bytes;
    let mut bad = ck_bytes;
    bad[0] = b'X';
    std::fs::write(&ck, &bad).unwrap();
    let ck_bad = checkpoint::load(&ck, checkpoint::Architecture::Auto).is_err();
    outcome(
        flo_ok && flo_bad && ck_ok && ck_bad,
        format!(".flo round trip {flo_ok}, bad magic rejected {flo_bad}; checkpoint round trip {ck_ok}, bad magic rejected {ck_bad}"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("gradient fidelity", gradient_fidelity),
        ("kernel-oracle equivalence", kernel_oracle),
        ("motion reduction", motion_reduction),
        ("motion benefit", motion_benefit),
        ("memory schedule", memory_schedule),
        ("top-k contract", topk_contract),
        ("training sanity", training_sanity),
        ("metric arithmetic", metric_arithmetic),
        ("static-video fixed point", static_fixed_point),
        ("alignment", alignment),
        ("file formats", file_formats),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {:>2} {}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            name,
            o.detail
        );
    }
    println!("acceptance: {} passed, {} failed", criteria.len() - failed, failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
