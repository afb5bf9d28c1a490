//! Box decoding, per-class non-maximum suppression and final detections.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::VOC_CLASSES;
use crate::graph::HeadOutput;
use crate::ops::softmax_rows;
use crate::priors::PriorSet;

/// Axis-aligned box in normalized corner form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub xmin: f32,
    pub ymin: f32,
    pub xmax: f32,
    pub ymax: f32,
}

impl BBox {
    pub const fn new(xmin: f32, ymin: f32, xmax: f32, ymax: f32) -> Self {
        BBox {
            xmin,
            ymin,
            xmax,
            ymax,
        }
    }

    pub fn coords(&self) -> [f32; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }

    pub fn width(&self) -> f32 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f32 {
        self.ymax - self.ymin
    }

    pub fn clipped(&self) -> BBox {
        BBox::new(
            self.xmin.clamp(0.0, 1.0),
            self.ymin.clamp(0.0, 1.0),
            self.xmax.clamp(0.0, 1.0),
            self.ymax.clamp(0.0, 1.0),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.coords().iter().all(|v| v.is_finite())
    }

    fn area(&self) -> f64 {
        (self.xmax as f64 - self.xmin as f64).max(0.0)
            * (self.ymax as f64 - self.ymin as f64).max(0.0)
    }

    /// Intersection over union; 0 when both boxes are empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.xmax.min(other.xmax) as f64 - self.xmin.max(other.xmin) as f64).max(0.0);
        let ih = (self.ymax.min(other.ymax) as f64 - self.ymin.max(other.ymin) as f64).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Center-size box, used by the offset decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl CenterBox {
    pub fn from_corners(b: &BBox) -> Self {
        CenterBox {
            cx: (b.xmin as f64 + b.xmax as f64) / 2.0,
            cy: (b.ymin as f64 + b.ymax as f64) / 2.0,
            w: b.xmax as f64 - b.xmin as f64,
            h: b.ymax as f64 - b.ymin as f64,
        }
    }

    pub fn to_corners(&self) -> BBox {
        BBox::new(
            (self.cx - self.w / 2.0) as f32,
            (self.cy - self.h / 2.0) as f32,
            (self.cx + self.w / 2.0) as f32,
            (self.cy + self.h / 2.0) as f32,
        )
    }
}

/// Applies one row of offsets to a prior, without clipping.
pub fn decode_center(loc: &[f32], prior: &BBox, variances: [f32; 2]) -> CenterBox {
    let p = CenterBox::from_corners(prior);
    let (v0, v1) = (variances[0] as f64, variances[1] as f64);
    CenterBox {
        cx: p.cx + loc[0] as f64 * v0 * p.w,
        cy: p.cy + loc[1] as f64 * v0 * p.h,
        w: p.w * (loc[2] as f64 * v1).exp(),
        h: p.h * (loc[3] as f64 * v1).exp(),
    }
}

/// Decodes every row against its prior and clips to the unit square. Rows with
/// non-finite offsets (or that overflow) come back as `None`.
pub fn decode_boxes(
    loc: &[f32],
    priors: &PriorSet,
    variances: [f32; 2],
) -> Result<Vec<Option<BBox>>> {
    if loc.len() != priors.len() * 4 {
        return Err(Error::shape(
            "decode_boxes",
            format!("{} offset values for {} priors", loc.len(), priors.len()),
        ));
    }
    Ok(loc
        .chunks_exact(4)
        .zip(&priors.boxes)
        .map(|(row, prior)| {
            if !row.iter().all(|v| v.is_finite()) {
                return None;
            }
            let b = decode_center(row, prior, variances).to_corners();
            b.is_finite().then(|| b.clipped())
        })
        .collect())
}

/// Orders by descending score, ties by ascending index.
fn rank_order(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy NMS. Returns indices into `candidates` in keep order; a box is kept when
/// its IoU with every previously kept box is at most `iou_threshold`.
pub fn nms_per_class(candidates: &[(f32, BBox)], iou_threshold: f32) -> Vec<usize> {
    let scores: Vec<f32> = candidates.iter().map(|c| c.0).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in rank_order(&scores) {
        let b = &candidates[i].1;
        if kept
            .iter()
            .all(|&k| candidates[k].1.iou(b) <= iou_threshold as f64)
        {
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectParams {
    pub conf_threshold: f32,
    pub iou_threshold: f32,
    pub top_k: usize,
    pub variances: [f32; 2],
}

impl DetectParams {
    /// Low threshold used when producing detections for mAP evaluation.
    pub fn evaluation() -> Self {
        DetectParams {
            conf_threshold: 0.01,
            ..Self::default()
        }
    }
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            conf_threshold: 0.5,
            iou_threshold: 0.45,
            top_k: 200,
            variances: crate::priors::DEFAULT_VARIANCES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// 1-based foreground class; background (0) never appears.
    pub class_id: usize,
    pub score: f32,
    pub bbox: BBox,
    /// Prior row the box was decoded from.
    pub prior: usize,
}

impl Detection {
    pub fn class_name(&self) -> &'static str {
        VOC_CLASSES
            .get(self.class_id - 1)
            .copied()
            .unwrap_or("unknown")
    }
}

/// Runs softmax, thresholding, decoding and per-class NMS for every image in `head`.
pub fn detect(
    head: &HeadOutput,
    priors: &PriorSet,
    params: &DetectParams,
) -> Result<Vec<Vec<Detection>>> {
    if head.priors != priors.len() {
        return Err(Error::shape(
            "detect",
            format!(
                "head has {} prior rows, prior set has {}",
                head.priors,
                priors.len()
            ),
        ));
    }
    if head.classes < 2 {
        return Err(Error::shape("detect", "need at least one foreground class"));
    }
    (0..head.batch)
        .map(|n| {
            detect_image(
                head.loc_rows(n),
                head.conf_rows(n),
                head.classes,
                priors,
                params,
            )
        })
        .collect()
}

fn detect_image(
    loc: &[f32],
    conf: &[f32],
    classes: usize,
    priors: &PriorSet,
    params: &DetectParams,
) -> Result<Vec<Detection>> {
    let probs = softmax_rows(conf, classes);
    let boxes = decode_boxes(loc, priors, params.variances)?;
    let mut dets: Vec<Detection> = (1..classes)
        .into_par_iter()
        .flat_map_iter(|class| {
            let rows: Vec<usize> = (0..priors.len())
                .filter(|&i| {
                    probs[i * classes + class] >= params.conf_threshold && boxes[i].is_some()
                })
                .collect();
            let candidates: Vec<(f32, BBox)> = rows
                .iter()
                .map(|&i| (probs[i * classes + class], boxes[i].unwrap()))
                .collect();
            nms_per_class(&candidates, params.iou_threshold)
                .into_iter()
                .map(|k| Detection {
                    class_id: class,
                    score: candidates[k].0,
                    bbox: candidates[k].1,
                    prior: rows[k],
                })
                .collect::<Vec<_>>()
        })
        .collect();
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.prior.cmp(&b.prior))
    });
    dets.truncate(params.top_k);
    Ok(dets)
}

/// One emission line: `image_id class_name score xmin ymin xmax ymax`.
pub fn format_detection(image_id: &str, d: &Detection) -> String {
    format!(
        "{image_id} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
        d.class_name(),
        d.score,
        d.bbox.xmin,
        d.bbox.ymin,
        d.bbox.xmax,
        d.bbox.ymax
    )
}
