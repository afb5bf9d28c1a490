//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero if any fail.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tiny_ssd::audit::{audit, compare, format_table, Reference, Tolerances};
use tiny_ssd::detect::{
    decode_center, detect, format_detection, nms_per_class, BBox, DetectParams,
};
use tiny_ssd::eval::{evaluate, parse_annotation_dir, parse_detections};
use tiny_ssd::graph::{forward, tiny_ssd_spec, HeadOutput};
use tiny_ssd::image::{preprocess_image, Preprocess, RgbImage};
use tiny_ssd::model_io::{init_random, load, quantize_fp16, save, Dtype, WeightStore};
use tiny_ssd::ops::{conv2d, ConvSpec};
use tiny_ssd::priors::{generate_priors, PriorConfig, DEFAULT_VARIANCES};
use tiny_ssd::Shape;

use common::{
    brute_conv2d, brute_map, brute_nms, encode, encode_corners, oracle_detection_lines, random_box,
    random_eval_instance, random_tensor, voc_xml, write_fixture,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn shape_chain() -> Outcome {
    let start = Instant::now();
    let spec = tiny_ssd_spec();
    spec.validate_tiny_ssd().map_err(|e| e.to_string())?;
    let shapes = spec.intermediate_shapes().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    let side = |name: &str| shapes.iter().find(|(n, _)| n == name).map(|(_, s)| s.h);
    let chain: Vec<Option<usize>> = [
        "data", "conv1", "pool1", "fire4", "fire8", "fire9", "fire10", "conv12_2", "conv13_2",
    ]
    .iter()
    .map(|n| side(n))
    .collect();
    let want = [300, 149, 74, 37, 18, 9, 4, 2, 1].map(Some);
    ensure(chain == want, || format!("spatial chain {chain:?}"))?;
    ensure(elapsed < 1.0, || format!("took {elapsed:.3}s"))?;
    Ok(format!(
        "300-149-74-37-18-9-4-2-1 in {:.1} ms",
        elapsed * 1e3
    ))
}

fn forward_pass() -> Outcome {
    let spec = tiny_ssd_spec();
    let store = init_random(&spec, 2024).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let image = random_tensor(&mut rng, Shape::new(1, 3, 300, 300));
    let start = Instant::now();
    let out = forward(&spec, &store, &image).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    ensure(out.priors == 8030, || format!("{} prior rows", out.priors))?;
    ensure(
        out.loc.len() == 8030 * 4 && out.conf.len() == 8030 * 21,
        || format!("loc {} / conf {} values", out.loc.len(), out.conf.len()),
    )?;
    ensure(
        out.loc.iter().chain(&out.conf).all(|v| v.is_finite()),
        || "non-finite output".into(),
    )?;
    ensure(elapsed < 10.0, || format!("forward took {elapsed:.2}s"))?;
    Ok(format!(
        "8030 rows, loc width 4, conf width 21, {elapsed:.2}s"
    ))
}

fn parameters_and_size() -> Outcome {
    let report = audit(&tiny_ssd_spec()).map_err(|e| e.to_string())?;
    print!("{}", format_table(&report));
    let cmp = compare(&report, &Reference::default(), &Tolerances::default());
    let params = &cmp.metrics[0];
    let size = &cmp.metrics[2];
    ensure(
        params.pass && (params.tolerance - 0.06).abs() < 1e-12,
        || {
            format!(
                "params {} deviates {:+.4}",
                report.total_params, params.deviation
            )
        },
    )?;
    ensure(size.pass && (size.tolerance - 0.06).abs() < 1e-12, || {
        format!(
            "fp16 size {:.4} MB deviates {:+.4}",
            report.fp16_mb(),
            size.deviation
        )
    })?;
    Ok(format!(
        "params {} ({:+.2}%), fp16 {:.4} MB ({:+.2}%)",
        report.total_params,
        params.deviation * 100.0,
        report.fp16_mb(),
        size.deviation * 100.0
    ))
}

fn macs() -> Outcome {
    let report = audit(&tiny_ssd_spec()).map_err(|e| e.to_string())?;
    let cmp = compare(&report, &Reference::default(), &Tolerances::default());
    let m = &cmp.metrics[1];
    ensure(m.pass && (m.tolerance - 0.10).abs() < 1e-12, || {
        format!("MACs {} deviates {:+.4}", report.total_macs, m.deviation)
    })?;
    Ok(format!(
        "MACs {} ({:+.3}%)",
        report.total_macs,
        m.deviation * 100.0
    ))
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5150);
    let mut worst = 0f32;
    for i in 0..200 {
        let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=8));
        let (kh, kw): (usize, usize) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (stride, pad): (usize, usize) = (rng.random_range(1..=3), rng.random_range(0..=2));
        let h = rng.random_range(kh.saturating_sub(2 * pad).max(1)..=8);
        let w = rng.random_range(kw.saturating_sub(2 * pad).max(1)..=8);
        let oc = rng.random_range(1..=8);
        let input = random_tensor(&mut rng, Shape::new(n, c, h, w));
        let weights = random_tensor(&mut rng, Shape::new(oc, c, kh, kw)).into_data();
        let bias = random_tensor(&mut rng, Shape::new(1, oc, 1, 1)).into_data();
        let spec = ConvSpec {
            out_channels: oc,
            kernel: (kh, kw),
            stride,
            pad,
            bias: true,
        };
        let got =
            conv2d(&input, &spec, &weights, Some(&bias)).map_err(|e| format!("conv {i}: {e}"))?;
        let want = brute_conv2d(&input, oc, (kh, kw), stride, pad, &weights, &bias);
        ensure(got.shape() == want.shape(), || {
            format!("conv {i}: shape {} vs {}", got.shape(), want.shape())
        })?;
        for (a, b) in got.data().iter().zip(want.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-5, || format!("conv max abs error {worst:e}"))?;

    for i in 0..100 {
        let n = rng.random_range(0..=100);
        let thr = rng.random_range(0.2f32..0.8);
        let cands: Vec<(f32, BBox)> = (0..n)
            .map(|_| (rng.random_range(0..12) as f32 / 12.0, random_box(&mut rng)))
            .collect();
        let got = nms_per_class(&cands, thr);
        let want = brute_nms(&cands, thr);
        ensure(got == want, || {
            format!("nms instance {i}: {got:?} vs {want:?}")
        })?;
    }

    let mut map_err = 0f64;
    for _ in 0..100 {
        let (dets, truths) = random_eval_instance(&mut rng);
        let result = evaluate(&dets, &truths, 0.5);
        let (aps, map) = brute_map(&dets, &truths, 3, 0.5);
        for (c, want) in aps.iter().enumerate() {
            match (result.classes[c].ap, want) {
                (Some(g), Some(w)) => map_err = map_err.max((g - w).abs()),
                (None, None) => {}
                (g, w) => return Err(format!("class {} scored as {g:?} vs {w:?}", c + 1)),
            }
        }
        map_err = map_err.max((result.map - map).abs());
    }
    ensure(map_err <= 1e-9, || format!("mAP max abs error {map_err:e}"))?;
    Ok(format!(
        "conv max err {worst:.2e} (200), NMS exact (100), mAP max err {map_err:.1e} (100)"
    ))
}

fn decode_round_trip() -> Outcome {
    let priors = generate_priors(&PriorConfig::tiny_ssd()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let prior = priors.boxes[rng.random_range(0..priors.len())];
        let loc: [f32; 4] = std::array::from_fn(|_| rng.random_range(-3.0f32..3.0));
        let c = decode_center(&loc, &prior, DEFAULT_VARIANCES);
        let back = encode((c.cx, c.cy, c.w, c.h), &prior, DEFAULT_VARIANCES);
        for (a, b) in loc.iter().zip(back) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    ensure(worst <= 1e-5, || format!("max abs error {worst:e}"))?;
    Ok(format!("1000 offsets, max abs error {worst:.2e}"))
}

fn fp16_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = tiny_ssd_spec();
    let manifest = spec.parameter_manifest().map_err(|e| e.to_string())?;
    let store = init_random(&spec, 31).map_err(|e| e.to_string())?;
    let first = dir.path().join("a.tssd");
    save(&store, &first, Dtype::F16).map_err(|e| e.to_string())?;
    let loaded = load(&first, Some(&manifest)).map_err(|e| e.to_string())?;
    let (quantized, _) = quantize_fp16(&store);
    let bits = |s: &WeightStore| -> Vec<u32> {
        s.iter()
            .flat_map(|(_, b)| b.data.iter().map(|v| v.to_bits()))
            .collect()
    };
    ensure(bits(&loaded) == bits(&quantized), || {
        "loaded values differ from fp16 rounding".into()
    })?;

    let second = dir.path().join("b.tssd");
    save(&loaded, &second, Dtype::F16).map_err(|e| e.to_string())?;
    let (a, b) = (
        std::fs::read(&first).unwrap(),
        std::fs::read(&second).unwrap(),
    );
    ensure(a == b, || {
        "re-saving a loaded model changed its bytes".into()
    })?;
    let again = load(&second, Some(&manifest)).map_err(|e| e.to_string())?;
    ensure(bits(&again) == bits(&loaded), || {
        "second load differs".into()
    })?;
    Ok(format!(
        "{} values bit-exact, re-save idempotent ({} bytes)",
        quantized.element_count(),
        a.len()
    ))
}

fn fixture_map() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_fixture(dir.path());
    let truths = parse_annotation_dir(dir.path()).map_err(|e| e.to_string())?;
    let dets = parse_detections(&oracle_detection_lines(), "oracle").map_err(|e| e.to_string())?;
    let oracle = evaluate(&dets, &truths, 0.5).map;
    let null = evaluate(&[], &truths, 0.5).map;
    ensure((oracle - 1.0).abs() <= 1e-12, || {
        format!("oracle mAP {oracle}")
    })?;
    ensure(null == 0.0, || format!("null mAP {null}"))?;
    Ok(format!("oracle mAP {oracle:.6}, null mAP {null:.6}"))
}

/// Planted rows in a raw head output, and a planted box driven through the full
/// network by head biases, both scored end to end against written annotations.
fn planted_end_to_end() -> Outcome {
    let priors = generate_priors(&PriorConfig::tiny_ssd()).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    let planted = [
        (150usize, 8usize, [31u32, 46, 120, 170]),
        (5400, 15, [151, 61, 270, 280]),
        (7990, 2, [1, 1, 300, 150]),
    ];
    let mut head = HeadOutput {
        batch: 1,
        priors: priors.len(),
        classes: 21,
        loc: vec![0.0; priors.len() * 4],
        conf: (0..priors.len() * 21)
            .map(|i| if i % 21 == 0 { 12.0 } else { 0.0 })
            .collect(),
    };
    let mut objects = Vec::new();
    for &(row, class, px) in &planted {
        let target = BBox::new(
            (px[0] as f32 - 1.0) / 300.0,
            (px[1] as f32 - 1.0) / 300.0,
            px[2] as f32 / 300.0,
            px[3] as f32 / 300.0,
        );
        head.loc[row * 4..row * 4 + 4].copy_from_slice(&encode_corners(
            &target,
            &priors.boxes[row],
            DEFAULT_VARIANCES,
        ));
        head.conf[row * 21] = 0.0;
        head.conf[row * 21 + class] = 12.0;
        objects.push((tiny_ssd::eval::VOC_CLASSES[class - 1], px, false));
    }
    std::fs::write(dir.path().join("planted.xml"), voc_xml(300, 300, &objects)).unwrap();

    // The 1x1 head's first prior reports a dog; every other prior is background.
    let spec = tiny_ssd_spec();
    let mut store = WeightStore::zeros(&spec.parameter_manifest().map_err(|e| e.to_string())?);
    for h in &spec.heads {
        let bias = &mut store.get_mut(&format!("{}/b", h.conf_name())).unwrap().data;
        for p in 0..h.priors_per_cell {
            bias[p * 21] = 12.0;
        }
    }
    let dog = tiny_ssd::eval::class_id("dog").unwrap();
    let row = priors.len() - 4;
    let px = [61u32, 31, 240, 285];
    let target = BBox::new(60.0 / 300.0, 30.0 / 300.0, 240.0 / 300.0, 285.0 / 300.0);
    let conf_b = &mut store.get_mut("conv13_2_mbox_conf/b").unwrap().data;
    conf_b[0] = 0.0;
    conf_b[dog] = 12.0;
    store.get_mut("conv13_2_mbox_loc/b").unwrap().data[..4].copy_from_slice(&encode_corners(
        &target,
        &priors.boxes[row],
        DEFAULT_VARIANCES,
    ));
    std::fs::write(
        dir.path().join("network.xml"),
        voc_xml(300, 300, &[("dog", px, false)]),
    )
    .unwrap();
    let image = preprocess_image(
        &RgbImage::filled(300, 300, [90, 140, 200]),
        &Preprocess::default(),
    );
    let through_net = forward(&spec, &store, &image).map_err(|e| e.to_string())?;

    let params = DetectParams::default();
    let mut lines = String::new();
    for (id, h) in [("planted", &head), ("network", &through_net)] {
        for d in &detect(h, &priors, &params).map_err(|e| e.to_string())?[0] {
            lines += &format_detection(id, d);
            lines.push('\n');
        }
    }
    ensure(lines.lines().count() == 4, || {
        format!("expected 4 detections, got:\n{lines}")
    })?;
    let truths = parse_annotation_dir(dir.path()).map_err(|e| e.to_string())?;
    let dets = parse_detections(&lines, "emitted").map_err(|e| e.to_string())?;
    let result = evaluate(&dets, &truths, 0.5);
    ensure((result.map - 1.0).abs() <= 1e-12, || {
        format!("mAP {}\n{}", result.map, result.report())
    })?;
    Ok(format!(
        "4 planted objects recovered, mAP {:.6}",
        result.map
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("1 shape chain", shape_chain),
        ("2 forward pass", forward_pass),
        ("3 parameters and fp16 size", parameters_and_size),
        ("4 multiply-accumulates", macs),
        ("5 kernel, NMS and mAP oracles", oracles),
        ("6 decode/encode round trip", decode_round_trip),
        ("7 fp16 save/load", fp16_round_trip),
        ("8a fixture mAP", fixture_map),
        ("8b planted objects end to end", planted_end_to_end),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let outcome =
            panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
