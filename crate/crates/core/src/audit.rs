//! Static parameter, MAC and model-size accounting for an [`ArchSpec`].
//!
//! One MAC is one multiply-accumulate; bias additions, activations, pooling and
//! post-processing are not counted. Sizes are reported in decimal megabytes.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::Result;
use crate::graph::{display_name, ArchSpec, LayerKind};
use crate::model_io::{self, Dtype};
use crate::ops::ConvSpec;
use crate::tensor::Shape;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAudit {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub output_shape: Shape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub layers: Vec<LayerAudit>,
    pub total_params: u64,
    pub total_macs: u64,
    /// Model-file bytes that are not parameter payload.
    pub framing_bytes: u64,
    pub fp16_bytes: u64,
    pub fp32_bytes: u64,
}

impl AuditReport {
    pub fn fp16_mb(&self) -> f64 {
        self.fp16_bytes as f64 / 1e6
    }

    pub fn fp32_mb(&self) -> f64 {
        self.fp32_bytes as f64 / 1e6
    }
}

fn conv_params(c: &ConvSpec, in_c: usize) -> u64 {
    let (kh, kw) = c.kernel;
    let bias = if c.bias { c.out_channels } else { 0 };
    (in_c * kh * kw * c.out_channels + bias) as u64
}

fn conv_macs(c: &ConvSpec, in_c: usize, out: Shape) -> u64 {
    let (kh, kw) = c.kernel;
    (out.h * out.w * c.out_channels * in_c * kh * kw) as u64
}

pub fn audit(spec: &ArchSpec) -> Result<AuditReport> {
    spec.validate()?;
    let shapes: HashMap<String, Shape> = spec.intermediate_shapes()?.into_iter().collect();
    let mut layers = Vec::new();
    for layer in &spec.layers {
        let in_c: usize = layer.inputs.iter().map(|n| shapes[n].c).sum();
        let out = shapes[&layer.name];
        let (params, macs) = match &layer.kind {
            LayerKind::Conv(c) => (conv_params(c, in_c), conv_macs(c, in_c, out)),
            LayerKind::Pool(_) => (0, 0),
            LayerKind::Fire(f) => {
                let subs = [
                    (
                        f.squeeze_conv(),
                        in_c,
                        Shape::new(1, f.squeeze, out.h, out.w),
                    ),
                    (
                        f.expand1x1_conv(),
                        f.squeeze,
                        Shape::new(1, f.expand1x1, out.h, out.w),
                    ),
                    (
                        f.expand3x3_conv(),
                        f.squeeze,
                        Shape::new(1, f.expand3x3, out.h, out.w),
                    ),
                ];
                subs.iter().fold((0, 0), |(p, m), (c, ic, o)| {
                    (p + conv_params(c, *ic), m + conv_macs(c, *ic, *o))
                })
            }
        };
        layers.push(LayerAudit {
            name: layer.name.clone(),
            params,
            macs,
            output_shape: out,
        });
    }
    for head in &spec.heads {
        let in_c = shapes[&head.source].c;
        for (name, conv) in [(head.loc_name(), head.loc), (head.conf_name(), head.conf)] {
            let out = shapes[&name];
            layers.push(LayerAudit {
                params: conv_params(&conv, in_c),
                macs: conv_macs(&conv, in_c, out),
                name,
                output_shape: out,
            });
        }
    }
    let total_params = layers.iter().map(|l| l.params).sum::<u64>();
    let total_macs = layers.iter().map(|l| l.macs).sum();
    let framing = model_io::framing_len(&spec.parameter_manifest()?) as u64;
    Ok(AuditReport {
        layers,
        total_params,
        total_macs,
        framing_bytes: framing,
        fp16_bytes: framing + total_params * Dtype::F16.size() as u64,
        fp32_bytes: framing + total_params * Dtype::F32.size() as u64,
    })
}

/// Published resource figures to audit against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub params: f64,
    pub macs: f64,
    pub fp16_mb: f64,
}

impl Default for Reference {
    fn default() -> Self {
        Reference {
            params: 1.13e6,
            macs: 571.09e6,
            fp16_mb: 2.3,
        }
    }
}

/// Allowed relative deviation per metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub params: f64,
    pub macs: f64,
    pub size: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            params: 0.06,
            macs: 0.10,
            size: 0.06,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricCheck {
    pub name: &'static str,
    pub measured: f64,
    pub reference: f64,
    /// Signed, `(measured - reference) / reference`.
    pub deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub metrics: Vec<MetricCheck>,
}

impl Comparison {
    pub fn pass(&self) -> bool {
        self.metrics.iter().all(|m| m.pass)
    }
}

pub fn relative_deviation(measured: f64, reference: f64) -> f64 {
    (measured - reference) / reference
}

pub fn compare(report: &AuditReport, reference: &Reference, tol: &Tolerances) -> Comparison {
    let check = |name, measured: f64, reference: f64, tolerance: f64| {
        let deviation = relative_deviation(measured, reference);
        MetricCheck {
            name,
            measured,
            reference,
            deviation,
            tolerance,
            pass: deviation.abs() <= tolerance,
        }
    };
    Comparison {
        metrics: vec![
            check(
                "params",
                report.total_params as f64,
                reference.params,
                tol.params,
            ),
            check("macs", report.total_macs as f64, reference.macs, tol.macs),
            check("fp16_mb", report.fp16_mb(), reference.fp16_mb, tol.size),
        ],
    }
}

/// Aligned per-layer table: layer, params, MACs, output shape.
pub fn format_table(report: &AuditReport) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<20} {:>10} {:>13}  output",
        "layer", "params", "macs"
    )
    .unwrap();
    for l in &report.layers {
        let s = l.output_shape;
        writeln!(
            out,
            "{:<20} {:>10} {:>13}  {}x{}x{}",
            display_name(&l.name),
            l.params,
            l.macs,
            s.c,
            s.h,
            s.w
        )
        .unwrap();
    }
    writeln!(
        out,
        "{:<20} {:>10} {:>13}",
        "total", report.total_params, report.total_macs
    )
    .unwrap();
    out
}

/// `key: value` summary with totals and, when given, deviations from a reference.
pub fn format_summary(report: &AuditReport, cmp: Option<&Comparison>) -> String {
    let mut out = String::new();
    writeln!(out, "total_params: {}", report.total_params).unwrap();
    writeln!(out, "total_macs: {}", report.total_macs).unwrap();
    writeln!(out, "framing_bytes: {}", report.framing_bytes).unwrap();
    writeln!(out, "fp16_bytes: {}", report.fp16_bytes).unwrap();
    writeln!(out, "fp16_mb: {:.6}", report.fp16_mb()).unwrap();
    writeln!(out, "fp32_bytes: {}", report.fp32_bytes).unwrap();
    writeln!(out, "fp32_mb: {:.6}", report.fp32_mb()).unwrap();
    if let Some(cmp) = cmp {
        for m in &cmp.metrics {
            writeln!(out, "{}_reference: {}", m.name, m.reference).unwrap();
            writeln!(out, "{}_deviation: {:+.6}", m.name, m.deviation).unwrap();
            writeln!(out, "{}_tolerance: {}", m.name, m.tolerance).unwrap();
            writeln!(
                out,
                "{}_check: {}",
                m.name,
                if m.pass { "pass" } else { "fail" }
            )
            .unwrap();
        }
        writeln!(out, "check: {}", if cmp.pass() { "pass" } else { "fail" }).unwrap();
    }
    out
}
