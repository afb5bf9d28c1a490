//! Default boxes for every cell of every detection scale.

use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::graph::ArchSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct PriorScale {
    pub feature_size: usize,
    pub priors_per_cell: usize,
    /// Box sizes in input pixels.
    pub min_size: f32,
    pub max_size: f32,
    /// Ratios other than 1; each contributes a wide and a tall box.
    pub aspect_ratios: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    pub scales: Vec<PriorScale>,
    /// Center and size variances used when decoding offsets.
    pub variances: [f32; 2],
    pub input_size: usize,
}

pub const TINY_SSD_MIN_SIZES: [f32; 6] = [30.0, 60.0, 111.0, 162.0, 213.0, 264.0];
pub const TINY_SSD_MAX_SIZES: [f32; 6] = [60.0, 111.0, 162.0, 213.0, 264.0, 315.0];
pub const DEFAULT_VARIANCES: [f32; 2] = [0.1, 0.2];

impl PriorConfig {
    /// SSD300-style sizes over the six Tiny SSD maps.
    pub fn tiny_ssd() -> Self {
        let maps = [(37, 4), (18, 6), (9, 6), (4, 6), (2, 6), (1, 4)];
        let scales = maps
            .iter()
            .enumerate()
            .map(|(i, &(f, b))| PriorScale {
                feature_size: f,
                priors_per_cell: b,
                min_size: TINY_SSD_MIN_SIZES[i],
                max_size: TINY_SSD_MAX_SIZES[i],
                aspect_ratios: if b == 4 { vec![2.0] } else { vec![2.0, 3.0] },
            })
            .collect();
        PriorConfig {
            scales,
            variances: DEFAULT_VARIANCES,
            input_size: 300,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        for (i, s) in self.scales.iter().enumerate() {
            if s.feature_size == 0 {
                return Err(Error::Config(format!("scale {i}: empty feature map")));
            }
            if s.priors_per_cell != 2 + 2 * s.aspect_ratios.len() {
                return Err(Error::Config(format!(
                    "scale {i}: {} priors per cell does not match aspect ratios {:?}",
                    s.priors_per_cell, s.aspect_ratios
                )));
            }
            if !(s.min_size > 0.0 && s.min_size < s.max_size) {
                return Err(Error::Config(format!(
                    "scale {i}: need 0 < min_size < max_size, got {} / {}",
                    s.min_size, s.max_size
                )));
            }
            if s.min_size > self.input_size as f32 {
                return Err(Error::Config(format!(
                    "scale {i}: min_size exceeds the input"
                )));
            }
            if s.aspect_ratios.iter().any(|&a| a <= 1.0 || !a.is_finite()) {
                return Err(Error::Config(format!(
                    "scale {i}: aspect ratios must be > 1"
                )));
            }
        }
        Ok(())
    }

    /// Checks that scales line up with the architecture's heads (map size and priors per cell).
    pub fn check_against(&self, spec: &ArchSpec) -> Result<()> {
        let shapes = spec.intermediate_shapes()?;
        if self.scales.len() != spec.heads.len() {
            return Err(Error::Config(format!(
                "{} prior scales for {} heads",
                self.scales.len(),
                spec.heads.len()
            )));
        }
        for (scale, head) in self.scales.iter().zip(&spec.heads) {
            let loc = head.loc_name();
            let s = shapes
                .iter()
                .find(|(n, _)| *n == loc)
                .map(|(_, s)| *s)
                .unwrap();
            if (s.h, s.w) != (scale.feature_size, scale.feature_size)
                || head.priors_per_cell != scale.priors_per_cell
            {
                return Err(Error::Config(format!(
                    "head on `{}` is {}x{} with {} priors, prior scale is {}x{} with {}",
                    head.source,
                    s.h,
                    s.w,
                    head.priors_per_cell,
                    scale.feature_size,
                    scale.feature_size,
                    scale.priors_per_cell
                )));
            }
        }
        Ok(())
    }

    pub fn total_priors(&self) -> usize {
        self.scales
            .iter()
            .map(|s| s.feature_size * s.feature_size * s.priors_per_cell)
            .sum()
    }
}

/// Prior boxes in normalized corner form, in head row order.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    pub boxes: Vec<BBox>,
}

impl PriorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Per cell: the `min_size` square, the `sqrt(min*max)` square, then a wide and a tall
/// box for each aspect ratio. Boxes are clipped to the unit square.
pub fn generate_priors(cfg: &PriorConfig) -> Result<PriorSet> {
    cfg.validate()?;
    let input = cfg.input_size as f64;
    let mut boxes = Vec::with_capacity(cfg.total_priors());
    for scale in &cfg.scales {
        let f = scale.feature_size as f64;
        let min = scale.min_size as f64 / input;
        let big = (scale.min_size as f64 * scale.max_size as f64).sqrt() / input;
        let mut sizes = vec![(min, min), (big, big)];
        for &ar in &scale.aspect_ratios {
            let r = (ar as f64).sqrt();
            sizes.push((min * r, min / r));
            sizes.push((min / r, min * r));
        }
        for i in 0..scale.feature_size {
            for j in 0..scale.feature_size {
                let cx = (j as f64 + 0.5) / f;
                let cy = (i as f64 + 0.5) / f;
                for &(w, h) in &sizes {
                    boxes.push(
                        BBox::new(
                            (cx - w / 2.0) as f32,
                            (cy - h / 2.0) as f32,
                            (cx + w / 2.0) as f32,
                            (cy + h / 2.0) as f32,
                        )
                        .clipped(),
                    );
                }
            }
        }
    }
    Ok(PriorSet { boxes })
}
