//! PASCAL VOC 2007 detection evaluation: annotation parsing, greedy matching
//! and 11-point interpolated average precision.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::detect::BBox;
use crate::error::{Error, Result};

/// Foreground classes; class id `k` (1-based) is `VOC_CLASSES[k - 1]`.
pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

pub fn class_id(name: &str) -> Result<usize> {
    VOC_CLASSES
        .iter()
        .position(|c| *c == name)
        .map(|i| i + 1)
        .ok_or_else(|| Error::UnknownClass(name.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: BBox,
    pub difficult: bool,
}

/// One parsed detection line.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_id: usize,
    pub score: f32,
    pub bbox: BBox,
}

/// Parses `image_id class_name score xmin ymin xmax ymax` lines. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_detections(text: &str, source_name: &str) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |detail: String| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            detail,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", fields.len())));
        }
        let class_id = class_id(fields[1]).map_err(|e| err(e.to_string()))?;
        let mut nums = [0f32; 5];
        for (v, f) in nums.iter_mut().zip(&fields[2..]) {
            *v = f
                .parse()
                .ok()
                .filter(|v: &f32| v.is_finite())
                .ok_or_else(|| err(format!("bad number `{f}`")))?;
        }
        out.push(DetectionRecord {
            image_id: fields[0].to_string(),
            class_id,
            score: nums[0],
            bbox: BBox::new(nums[1], nums[2], nums[3], nums[4]),
        });
    }
    Ok(out)
}

/// Parses a VOC annotation document. Pixel boxes use the 1-based inclusive VOC
/// convention and are normalized as `((xmin - 1) / W, (ymin - 1) / H, xmax / W, ymax / H)`.
pub fn parse_ground_truth(
    xml: &str,
    image_id: &str,
    source_name: &str,
) -> Result<Vec<GroundTruthBox>> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| Error::Parse {
        source_name: source_name.to_string(),
        line: e.pos().row as usize,
        detail: e.to_string(),
    })?;
    let ctx = XmlCtx {
        doc: &doc,
        source_name,
    };

    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(ctx.err(
            root,
            format!("expected <annotation>, found <{}>", root.tag_name().name()),
        ));
    }
    let objects: Vec<_> = root
        .children()
        .filter(|c| c.has_tag_name("object"))
        .collect();
    if objects.is_empty() {
        return Ok(Vec::new());
    }
    let size = ctx.child(root, "size")?;
    let width = ctx.number(size, "width")?;
    let height = ctx.number(size, "height")?;
    if width <= 0.0 || height <= 0.0 {
        return Err(ctx.err(size, "image size must be positive".into()));
    }

    let mut out = Vec::with_capacity(objects.len());
    for obj in objects {
        let name_node = ctx.child(obj, "name")?;
        let name = name_node.text().unwrap_or("").trim();
        let class_id = class_id(name).map_err(|e| ctx.err(name_node, e.to_string()))?;
        let difficult = match obj.children().find(|c| c.has_tag_name("difficult")) {
            Some(d) => match d.text().unwrap_or("").trim() {
                "1" => true,
                "0" | "" => false,
                other => {
                    return Err(ctx.err(d, format!("<difficult> must be 0 or 1, got `{other}`")))
                }
            },
            None => false,
        };
        let bb = ctx.child(obj, "bndbox")?;
        let (xmin, ymin) = (ctx.number(bb, "xmin")?, ctx.number(bb, "ymin")?);
        let (xmax, ymax) = (ctx.number(bb, "xmax")?, ctx.number(bb, "ymax")?);
        if xmax < xmin || ymax < ymin {
            return Err(ctx.err(bb, "box corners are inverted".into()));
        }
        out.push(GroundTruthBox {
            image_id: image_id.to_string(),
            class_id,
            bbox: BBox::new(
                ((xmin - 1.0) / width) as f32,
                ((ymin - 1.0) / height) as f32,
                (xmax / width) as f32,
                (ymax / height) as f32,
            ),
            difficult,
        });
    }
    Ok(out)
}

struct XmlCtx<'a, 'input> {
    doc: &'a roxmltree::Document<'input>,
    source_name: &'a str,
}

type XmlNode<'a, 'input> = roxmltree::Node<'a, 'input>;

impl<'a, 'input> XmlCtx<'a, 'input> {
    fn err(&self, node: XmlNode<'a, 'input>, detail: String) -> Error {
        Error::Parse {
            source_name: self.source_name.to_string(),
            line: self.doc.text_pos_at(node.range().start).row as usize,
            detail,
        }
    }

    fn child(&self, node: XmlNode<'a, 'input>, tag: &str) -> Result<XmlNode<'a, 'input>> {
        node.children()
            .find(|c| c.has_tag_name(tag))
            .ok_or_else(|| {
                self.err(
                    node,
                    format!("missing <{tag}> in <{}>", node.tag_name().name()),
                )
            })
    }

    fn number(&self, node: XmlNode<'a, 'input>, tag: &str) -> Result<f64> {
        let c = self.child(node, tag)?;
        let text = c.text().unwrap_or("").trim();
        text.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(c, format!("<{tag}> is not a number: `{text}`")))
    }
}

/// Reads every `*.xml` file in `dir`, in file-name order. The image id is the file stem.
pub fn parse_annotation_dir(dir: impl AsRef<Path>) -> Result<Vec<GroundTruthBox>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "xml"));
    paths.sort();
    let mut out = Vec::new();
    for path in paths {
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let text = fs::read_to_string(&path)?;
        out.extend(parse_ground_truth(
            &text,
            &stem,
            &path.display().to_string(),
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    pub class_id: usize,
    /// Non-difficult ground-truth boxes.
    pub positives: usize,
    pub detections: usize,
    /// `None` when the class has no positives; such classes are left out of the mean.
    pub ap: Option<f64>,
    /// (recall, precision) after each ranked detection.
    pub pr: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub classes: Vec<ClassResult>,
    pub map: f64,
}

/// Match state of one ranked detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    /// Best overlap was a difficult box: counted as neither.
    Ignored,
}

/// 11-point interpolated AP: mean over r in {0, 0.1, ..., 1} of the best precision
/// at recall >= r (0 when no such point).
pub fn ap_11_point(pr: &[(f64, f64)]) -> f64 {
    (0..=10)
        .map(|i| {
            let r = i as f64 / 10.0;
            pr.iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Greedy VOC matching for one class. `dets` must already be in rank order.
/// Each detection takes the ground truth with the highest IoU in its image; at
/// IoU >= `iou_match` it is a true positive if that box is unclaimed, a duplicate
/// (false positive) if claimed, and ignored if the box is difficult.
pub fn match_class(
    dets: &[&DetectionRecord],
    truths: &[&GroundTruthBox],
    iou_match: f64,
) -> Vec<Outcome> {
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, gt) in truths.iter().enumerate() {
        by_image.entry(gt.image_id.as_str()).or_default().push(i);
    }
    let mut claimed = vec![false; truths.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for &j in by_image.get(d.image_id.as_str()).into_iter().flatten() {
                let ov = d.bbox.iou(&truths[j].bbox);
                if best.is_none_or(|(_, b)| ov > b) {
                    best = Some((j, ov));
                }
            }
            match best {
                Some((j, ov)) if ov >= iou_match => {
                    if truths[j].difficult {
                        Outcome::Ignored
                    } else if !claimed[j] {
                        claimed[j] = true;
                        Outcome::TruePositive
                    } else {
                        Outcome::FalsePositive
                    }
                }
                _ => Outcome::FalsePositive,
            }
        })
        .collect()
}

fn rank(dets: &mut [&DetectionRecord]) {
    // Stable: equal scores keep their input order.
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
}

pub fn evaluate(dets: &[DetectionRecord], truths: &[GroundTruthBox], iou_match: f64) -> EvalResult {
    let classes: Vec<ClassResult> = (1..=VOC_CLASSES.len())
        .into_par_iter()
        .map(|class| {
            let mut cdets: Vec<&DetectionRecord> =
                dets.iter().filter(|d| d.class_id == class).collect();
            rank(&mut cdets);
            let ctruths: Vec<&GroundTruthBox> =
                truths.iter().filter(|g| g.class_id == class).collect();
            let positives = ctruths.iter().filter(|g| !g.difficult).count();
            let outcomes = match_class(&cdets, &ctruths, iou_match);
            let (mut tp, mut fp) = (0usize, 0usize);
            let mut pr = Vec::with_capacity(outcomes.len());
            for o in outcomes {
                match o {
                    Outcome::TruePositive => tp += 1,
                    Outcome::FalsePositive => fp += 1,
                    Outcome::Ignored => {}
                }
                let recall = if positives > 0 {
                    tp as f64 / positives as f64
                } else {
                    0.0
                };
                let precision = if tp + fp > 0 {
                    tp as f64 / (tp + fp) as f64
                } else {
                    0.0
                };
                pr.push((recall, precision));
            }
            ClassResult {
                class_id: class,
                positives,
                detections: cdets.len(),
                ap: (positives > 0).then(|| ap_11_point(&pr)),
                pr,
            }
        })
        .collect();
    let scored: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    let map = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    EvalResult { classes, map }
}

impl EvalResult {
    /// Per-class AP table followed by `key: value` summary lines.
    pub fn report(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<12} {:>9} {:>10} {:>8}",
            "class", "positives", "detections", "ap"
        )
        .unwrap();
        for c in &self.classes {
            let ap = c.ap.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            writeln!(
                out,
                "{:<12} {:>9} {:>10} {:>8}",
                VOC_CLASSES[c.class_id - 1],
                c.positives,
                c.detections,
                ap
            )
            .unwrap();
        }
        let scored = self.classes.iter().filter(|c| c.ap.is_some()).count();
        writeln!(out, "\nprotocol: voc2007-11point").unwrap();
        writeln!(out, "classes_scored: {scored}").unwrap();
        writeln!(out, "map: {:.6}", self.map).unwrap();
        out
    }

    /// `class,recall,precision` rows for every class with detections.
    pub fn pr_csv(&self) -> String {
        let mut out = String::from("class,recall,precision\n");
        for c in &self.classes {
            for (r, p) in &c.pr {
                writeln!(out, "{},{r:.6},{p:.6}", VOC_CLASSES[c.class_id - 1]).unwrap();
            }
        }
        out
    }
}
