//! Reference implementations used as test oracles. None of these call into the
//! production kernels they are compared against.

#![allow(dead_code)]

use rand::{Rng, RngCore};
use tiny_ssd::detect::BBox;
use tiny_ssd::eval::{DetectionRecord, GroundTruthBox};
use tiny_ssd::{Shape, Tensor};

/// Six nested loops over (n, oc, oy, ox) x (ic, ky, kx) with explicit zero padding.
pub fn brute_conv2d(
    input: &Tensor,
    out_c: usize,
    k: (usize, usize),
    stride: usize,
    pad: usize,
    weights: &[f32],
    bias: &[f32],
) -> Tensor {
    let s = input.shape();
    let oh = (s.h + 2 * pad - k.0) / stride + 1;
    let ow = (s.w + 2 * pad - k.1) / stride + 1;
    let mut out = Vec::with_capacity(s.n * out_c * oh * ow);
    for n in 0..s.n {
        for o in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o] as f64;
                    for ic in 0..s.c {
                        for ky in 0..k.0 {
                            for kx in 0..k.1 {
                                let y = (oy * stride + ky) as i64 - pad as i64;
                                let x = (ox * stride + kx) as i64 - pad as i64;
                                if y < 0 || x < 0 || y >= s.h as i64 || x >= s.w as i64 {
                                    continue;
                                }
                                let w = weights[((o * s.c + ic) * k.0 + ky) * k.1 + kx];
                                acc += w as f64 * input.at(n, ic, y as usize, x as usize) as f64;
                            }
                        }
                    }
                    out.push(acc as f32);
                }
            }
        }
    }
    Tensor::new(Shape::new(s.n, out_c, oh, ow), out).unwrap()
}

pub fn random_tensor(rng: &mut impl Rng, shape: Shape) -> Tensor {
    let data = (0..shape.len())
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = (a.xmin as f64, a.ymin as f64, a.xmax as f64, a.ymax as f64);
    let (bx0, by0, bx1, by1) = (b.xmin as f64, b.ymin as f64, b.xmax as f64, b.ymax as f64);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let area_a = (ax1 - ax0).max(0.0) * (ay1 - ay0).max(0.0);
    let area_b = (bx1 - bx0).max(0.0) * (by1 - by0).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Suppression-style NMS: repeatedly take the best remaining candidate and delete
/// everything overlapping it by more than the threshold. Returns kept indices in pick order.
pub fn brute_nms(cands: &[(f32, BBox)], threshold: f32) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..cands.len()).collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for (pos, &i) in remaining.iter().enumerate() {
            let b = remaining[best];
            if cands[i].0 > cands[b].0 || (cands[i].0 == cands[b].0 && i < b) {
                best = pos;
            }
        }
        let pick = remaining.remove(best);
        kept.push(pick);
        remaining.retain(|&j| oracle_iou(&cands[pick].1, &cands[j].1) <= threshold as f64);
    }
    kept
}

pub fn random_box(rng: &mut impl Rng) -> BBox {
    let x0 = rng.random_range(0.0f32..0.8);
    let y0 = rng.random_range(0.0f32..0.8);
    let w = rng.random_range(0.02f32..0.5);
    let h = rng.random_range(0.02f32..0.5);
    BBox::new(x0, y0, (x0 + w).min(1.0), (y0 + h).min(1.0))
}

/// Inverse of the center-size offset decoding, in f64.
pub fn encode(target: (f64, f64, f64, f64), prior: &BBox, var: [f32; 2]) -> [f64; 4] {
    let (tcx, tcy, tw, th) = target;
    let pw = prior.xmax as f64 - prior.xmin as f64;
    let ph = prior.ymax as f64 - prior.ymin as f64;
    let pcx = (prior.xmin as f64 + prior.xmax as f64) / 2.0;
    let pcy = (prior.ymin as f64 + prior.ymax as f64) / 2.0;
    [
        (tcx - pcx) / (pw * var[0] as f64),
        (tcy - pcy) / (ph * var[0] as f64),
        (tw / pw).ln() / var[1] as f64,
        (th / ph).ln() / var[1] as f64,
    ]
}

/// Corner box to offsets.
pub fn encode_corners(target: &BBox, prior: &BBox, var: [f32; 2]) -> [f32; 4] {
    let t = (
        (target.xmin as f64 + target.xmax as f64) / 2.0,
        (target.ymin as f64 + target.ymax as f64) / 2.0,
        target.xmax as f64 - target.xmin as f64,
        target.ymax as f64 - target.ymin as f64,
    );
    encode(t, prior, var).map(|v| v as f32)
}

/// Brute-force VOC evaluator: for every prefix of the ranked detections the
/// matching is replayed from scratch, giving one PR point per prefix; the AP is the
/// 11-point interpolation over those points. Returns per-class AP for classes
/// `1..=classes` (None without positives) and the mean.
pub fn brute_map(
    dets: &[DetectionRecord],
    truths: &[GroundTruthBox],
    classes: usize,
    iou_match: f64,
) -> (Vec<Option<f64>>, f64) {
    let mut aps = Vec::new();
    for class in 1..=classes {
        let mut ranked: Vec<&DetectionRecord> =
            dets.iter().filter(|d| d.class_id == class).collect();
        // Insertion sort: descending score, stable for ties.
        for i in 1..ranked.len() {
            let mut j = i;
            while j > 0 && ranked[j - 1].score < ranked[j].score {
                ranked.swap(j - 1, j);
                j -= 1;
            }
        }
        let gts: Vec<&GroundTruthBox> = truths.iter().filter(|g| g.class_id == class).collect();
        let positives = gts.iter().filter(|g| !g.difficult).count();
        if positives == 0 {
            aps.push(None);
            continue;
        }
        let mut curve = Vec::new();
        for k in 1..=ranked.len() {
            let mut claimed = vec![false; gts.len()];
            let (mut tp, mut fp) = (0usize, 0usize);
            for d in &ranked[..k] {
                let mut best_j = None;
                let mut best_ov = f64::NEG_INFINITY;
                for (j, g) in gts.iter().enumerate() {
                    if g.image_id != d.image_id {
                        continue;
                    }
                    let ov = oracle_iou(&d.bbox, &g.bbox);
                    if ov > best_ov {
                        best_ov = ov;
                        best_j = Some(j);
                    }
                }
                match best_j {
                    Some(j) if best_ov >= iou_match && gts[j].difficult => {}
                    Some(j) if best_ov >= iou_match => {
                        if claimed[j] {
                            fp += 1;
                        } else {
                            claimed[j] = true;
                            tp += 1;
                        }
                    }
                    _ => fp += 1,
                }
            }
            let recall = tp as f64 / positives as f64;
            let precision = if tp + fp == 0 {
                0.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            curve.push((recall, precision));
        }
        let mut ap = 0.0;
        for t in 0..=10 {
            let mut best = 0.0f64;
            for &(r, p) in &curve {
                if r >= t as f64 / 10.0 && p > best {
                    best = p;
                }
            }
            ap += best / 11.0;
        }
        aps.push(Some(ap));
    }
    let scored: Vec<f64> = aps.iter().flatten().copied().collect();
    let map = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    (aps, map)
}

/// Random evaluation instance: up to 20 ground-truth boxes over 3 images and 3
/// classes, detections mixing jittered copies of truths, duplicates and noise.
pub fn random_eval_instance(rng: &mut impl RngCore) -> (Vec<DetectionRecord>, Vec<GroundTruthBox>) {
    let images = ["img0", "img1", "img2"];
    let n_gt = rng.random_range(1..=20);
    let truths: Vec<GroundTruthBox> = (0..n_gt)
        .map(|_| GroundTruthBox {
            image_id: images[rng.random_range(0..3)].to_string(),
            class_id: rng.random_range(1..=3),
            bbox: random_box(rng),
            difficult: rng.random_bool(0.15),
        })
        .collect();
    let mut dets = Vec::new();
    for g in &truths {
        for _ in 0..rng.random_range(0..3) {
            let j = |rng: &mut dyn RngCore| rng.random_range(-0.08f32..0.08);
            let b = &g.bbox;
            let jittered = BBox::new(
                b.xmin + j(rng),
                b.ymin + j(rng),
                b.xmax + j(rng),
                b.ymax + j(rng),
            );
            dets.push(DetectionRecord {
                image_id: g.image_id.clone(),
                class_id: if rng.random_bool(0.85) {
                    g.class_id
                } else {
                    rng.random_range(1..=3)
                },
                score: quantized_score(rng),
                bbox: jittered,
            });
        }
    }
    for _ in 0..rng.random_range(0..10) {
        dets.push(DetectionRecord {
            image_id: images[rng.random_range(0..3)].to_string(),
            class_id: rng.random_range(1..=3),
            score: quantized_score(rng),
            bbox: random_box(rng),
        });
    }
    (dets, truths)
}

/// Scores on a coarse grid so ties occur.
fn quantized_score(rng: &mut impl RngCore) -> f32 {
    rng.random_range(0..20) as f32 / 20.0
}

/// VOC annotation text for one image. Objects are `(class, [xmin, ymin, xmax, ymax], difficult)`
/// in 1-based pixel coordinates.
pub fn voc_xml(width: u32, height: u32, objects: &[(&str, [u32; 4], bool)]) -> String {
    let mut s = format!(
        "<annotation>\n  <size><width>{width}</width><height>{height}</height><depth>3</depth></size>\n"
    );
    for (name, b, difficult) in objects {
        s += &format!(
            "  <object>\n    <name>{name}</name>\n    <difficult>{}</difficult>\n    <bndbox><xmin>{}</xmin><ymin>{}</ymin><xmax>{}</xmax><ymax>{}</ymax></bndbox>\n  </object>\n",
            u8::from(*difficult),
            b[0],
            b[1],
            b[2],
            b[3]
        );
    }
    s + "</annotation>\n"
}

/// Three small images: (image id, width, height, objects).
pub type FixtureImage = (&'static str, u32, u32, Vec<(&'static str, [u32; 4], bool)>);

pub fn fixture() -> Vec<FixtureImage> {
    vec![
        (
            "000001",
            300,
            200,
            vec![
                ("dog", [20, 30, 140, 180], false),
                ("person", [150, 10, 290, 195], false),
            ],
        ),
        (
            "000002",
            250,
            250,
            vec![
                ("car", [1, 100, 120, 200], false),
                ("car", [130, 120, 240, 240], true),
            ],
        ),
        (
            "000003",
            400,
            300,
            vec![
                ("dog", [200, 50, 390, 290], false),
                ("bicycle", [10, 10, 100, 90], false),
            ],
        ),
    ]
}

/// Writes the fixture's annotation files into `dir`.
pub fn write_fixture(dir: &std::path::Path) {
    for (id, w, h, objects) in fixture() {
        std::fs::write(dir.join(format!("{id}.xml")), voc_xml(w, h, &objects)).unwrap();
    }
}

/// Emission lines reproducing every fixture box exactly, with score 1.
pub fn oracle_detection_lines() -> String {
    let mut out = String::new();
    for (id, w, h, objects) in fixture() {
        for (name, b, _) in objects {
            let (w, h) = (w as f64, h as f64);
            out += &format!(
                "{id} {name} 1.0 {} {} {} {}\n",
                (b[0] as f64 - 1.0) / w,
                (b[1] as f64 - 1.0) / h,
                b[2] as f64 / w,
                b[3] as f64 / h
            );
        }
    }
    out
}
