//! Declarative network description and the forward-pass executor.
//!
//! An [`ArchSpec`] is an ordered list of conv / pool / fire layers plus a list of
//! multibox heads, each attached to a named feature layer. Layers with several
//! inputs see them concatenated along channels. The special input name
//! [`INPUT`] refers to the image tensor.

use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::WeightStore;
use crate::ops::{self, ConvSpec, PoolSpec, Rounding};
use crate::tensor::{Shape, Tensor};

pub const INPUT: &str = "data";

/// Squeeze 1x1 followed by parallel expand 1x1 / 3x3 convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FireConfig {
    pub squeeze: usize,
    pub expand1x1: usize,
    pub expand3x3: usize,
}

impl FireConfig {
    pub const fn new(squeeze: usize, expand1x1: usize, expand3x3: usize) -> Self {
        FireConfig {
            squeeze,
            expand1x1,
            expand3x3,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.expand1x1 + self.expand3x3
    }

    pub fn squeeze_conv(&self) -> ConvSpec {
        ConvSpec::new(self.squeeze, 1, 1, 0)
    }

    pub fn expand1x1_conv(&self) -> ConvSpec {
        ConvSpec::new(self.expand1x1, 1, 1, 0)
    }

    pub fn expand3x3_conv(&self) -> ConvSpec {
        ConvSpec::new(self.expand3x3, 3, 1, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Conv(ConvSpec),
    Pool(PoolSpec),
    Fire(FireConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn conv(name: &str, input: &str, spec: ConvSpec) -> Self {
        Self::new(name, input, LayerKind::Conv(spec))
    }

    pub fn pool(name: &str, input: &str, spec: PoolSpec) -> Self {
        Self::new(name, input, LayerKind::Pool(spec))
    }

    pub fn fire(name: &str, input: &str, cfg: FireConfig) -> Self {
        Self::new(name, input, LayerKind::Fire(cfg))
    }

    fn new(name: &str, input: &str, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
            inputs: vec![input.to_string()],
        }
    }
}

/// A pair of loc/conf predictor convolutions on one feature layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub source: String,
    pub priors_per_cell: usize,
    pub loc: ConvSpec,
    pub conf: ConvSpec,
}

impl HeadSpec {
    pub fn new(source: &str, priors_per_cell: usize, class_count: usize) -> Self {
        HeadSpec {
            source: source.to_string(),
            priors_per_cell,
            loc: ConvSpec::new(4 * priors_per_cell, 3, 1, 1),
            conf: ConvSpec::new(class_count * priors_per_cell, 3, 1, 1),
        }
    }

    pub fn loc_name(&self) -> String {
        format!("{}_mbox_loc", self.source)
    }

    pub fn conf_name(&self) -> String {
        format!("{}_mbox_conf", self.source)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_size: usize,
    pub input_channels: usize,
    /// Including background at index 0.
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
    pub heads: Vec<HeadSpec>,
}

/// Channel counts of the fire stack, in order.
pub const TINY_SSD_FIRES: [FireConfig; 10] = [
    FireConfig::new(15, 49, 53),
    FireConfig::new(15, 54, 52),
    FireConfig::new(29, 92, 94),
    FireConfig::new(29, 90, 83),
    FireConfig::new(44, 166, 161),
    FireConfig::new(45, 155, 146),
    FireConfig::new(49, 163, 171),
    FireConfig::new(25, 29, 54),
    FireConfig::new(37, 45, 56),
    FireConfig::new(38, 41, 44),
];

/// Spatial size and (loc, conf) channels expected on each detection source.
pub const TINY_SSD_HEADS: [(usize, usize, usize); 6] = [
    (37, 16, 84),
    (18, 24, 126),
    (9, 24, 126),
    (4, 24, 126),
    (2, 24, 126),
    (1, 16, 84),
];

/// The full Tiny SSD graph: fire backbone, auxiliary convolutions and six heads.
pub fn tiny_ssd_spec() -> ArchSpec {
    let pool = || PoolSpec::new(3, 2, Rounding::Ceil);
    let f = |i: usize| TINY_SSD_FIRES[i - 1];
    let layers = vec![
        LayerSpec::conv("conv1", INPUT, ConvSpec::new(57, 3, 2, 0)),
        LayerSpec::pool("pool1", "conv1", pool()),
        LayerSpec::fire("fire1", "pool1", f(1)),
        LayerSpec::fire("fire2", "fire1", f(2)),
        LayerSpec::pool("pool3", "fire2", pool()),
        LayerSpec::fire("fire3", "pool3", f(3)),
        LayerSpec::fire("fire4", "fire3", f(4)),
        LayerSpec::pool("pool5", "fire4", pool()),
        LayerSpec::fire("fire5", "pool5", f(5)),
        LayerSpec::fire("fire6", "fire5", f(6)),
        LayerSpec::fire("fire7", "fire6", f(7)),
        LayerSpec::fire("fire8", "fire7", f(8)),
        LayerSpec::pool("pool9", "fire8", pool()),
        LayerSpec::fire("fire9", "pool9", f(9)),
        LayerSpec::pool("pool10", "fire9", pool()),
        LayerSpec::fire("fire10", "pool10", f(10)),
        LayerSpec::conv("conv12_1", "fire10", ConvSpec::new(51, 3, 2, 1)),
        LayerSpec::conv("conv12_2", "conv12_1", ConvSpec::new(46, 3, 1, 1)),
        LayerSpec::conv("conv13_1", "conv12_2", ConvSpec::new(55, 3, 1, 1)),
        LayerSpec::conv("conv13_2", "conv13_1", ConvSpec::new(85, 3, 2, 1)),
    ];
    let class_count = 21;
    let heads = [
        ("fire4", 4),
        ("fire8", 6),
        ("fire9", 6),
        ("fire10", 6),
        ("conv12_2", 6),
        ("conv13_2", 4),
    ]
    .iter()
    .map(|&(src, b)| HeadSpec::new(src, b, class_count))
    .collect();
    ArchSpec {
        input_size: 300,
        input_channels: 3,
        class_count,
        layers,
        heads,
    }
}

/// One convolution that owns parameters, with its resolved input channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    /// Graph layer (or head) the convolution belongs to.
    pub layer: String,
    /// Blob name prefix; weights are `<prefix>/w`, bias `<prefix>/b`.
    pub prefix: String,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_hw: (usize, usize),
}

/// Name and shape of one parameter blob.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlobSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl BlobSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ArchSpec {
    pub fn from_json(text: &str) -> Result<ArchSpec> {
        let spec: ArchSpec = serde_json::from_str(text).map_err(|e| Error::Parse {
            source_name: "architecture".into(),
            line: e.line(),
            detail: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ArchSpec serializes")
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.input_channels, self.input_size, self.input_size)
    }

    /// Structural checks that apply to any graph: unique names, inputs declared
    /// before use, no cycles, head channel counts consistent with their prior count,
    /// and every layer producing a non-empty output.
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_channels == 0 {
            return Err(Error::Arch("input extents must be positive".into()));
        }
        if self.class_count < 2 {
            return Err(Error::Arch("need at least one foreground class".into()));
        }
        let mut seen: HashSet<&str> = HashSet::from([INPUT]);
        let declared: HashSet<&str> = self.layers.iter().map(|l| l.name.as_str()).collect();
        for layer in &self.layers {
            if !seen.insert(&layer.name) {
                return Err(Error::Arch(format!(
                    "duplicate layer name `{}`",
                    layer.name
                )));
            }
            if layer.inputs.is_empty() {
                return Err(Error::Arch(format!("layer `{}` has no inputs", layer.name)));
            }
            for input in &layer.inputs {
                if !declared.contains(input.as_str()) && input != INPUT {
                    return Err(Error::Arch(format!(
                        "layer `{}` reads unknown input `{input}`",
                        layer.name
                    )));
                }
            }
            match &layer.kind {
                LayerKind::Fire(cfg)
                    if cfg.squeeze == 0 || cfg.expand1x1 == 0 || cfg.expand3x3 == 0 =>
                {
                    return Err(Error::Arch(format!(
                        "fire `{}` has an empty branch",
                        layer.name
                    )));
                }
                LayerKind::Conv(c) if c.out_channels == 0 => {
                    return Err(Error::Arch(format!("conv `{}` has no filters", layer.name)));
                }
                _ => {}
            }
        }
        self.check_order()?;
        for head in &self.heads {
            if !declared.contains(head.source.as_str()) {
                return Err(Error::Arch(format!(
                    "head source `{}` is not a layer",
                    head.source
                )));
            }
            if head.loc.out_channels != 4 * head.priors_per_cell
                || head.conf.out_channels != self.class_count * head.priors_per_cell
            {
                return Err(Error::Arch(format!(
                    "head on `{}`: loc/conf channels {}/{} do not match {} priors per cell",
                    head.source,
                    head.loc.out_channels,
                    head.conf.out_channels,
                    head.priors_per_cell
                )));
            }
        }
        self.intermediate_shapes().map(|_| ())
    }

    /// Kahn's algorithm over the layer graph. A spec whose graph is acyclic but
    /// declared out of order is rejected too, since execution follows declaration order.
    fn check_order(&self) -> Result<()> {
        let index: HashMap<&str, usize> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.name.as_str(), i))
            .collect();
        let mut indegree = vec![0usize; self.layers.len()];
        let mut consumers = vec![Vec::new(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            for input in layer.inputs.iter().filter(|n| n.as_str() != INPUT) {
                let j = index[input.as_str()];
                indegree[i] += 1;
                consumers[j].push(i);
            }
        }
        let mut queue: VecDeque<usize> = (0..self.layers.len())
            .filter(|&i| indegree[i] == 0)
            .collect();
        let mut visited = 0;
        while let Some(i) = queue.pop_front() {
            visited += 1;
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if visited != self.layers.len() {
            let stuck: Vec<&str> = (0..self.layers.len())
                .filter(|&i| indegree[i] > 0)
                .map(|i| self.layers[i].name.as_str())
                .collect();
            return Err(Error::Arch(format!("cycle through layers {stuck:?}")));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for input in layer.inputs.iter().filter(|n| n.as_str() != INPUT) {
                if index[input.as_str()] >= i {
                    return Err(Error::Arch(format!(
                        "layer `{}` is declared before its input `{input}`",
                        layer.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks the structure specific to Tiny SSD on top of [`validate`](Self::validate):
    /// ten fire modules and six detection sources with the expected sizes and head widths.
    pub fn validate_tiny_ssd(&self) -> Result<()> {
        self.validate()?;
        let fires = self
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Fire(_)))
            .count();
        if fires != 10 {
            return Err(Error::Arch(format!(
                "expected 10 fire modules, found {fires}"
            )));
        }
        if self.heads.len() != TINY_SSD_HEADS.len() {
            return Err(Error::Arch(format!(
                "expected {} detection sources, found {}",
                TINY_SSD_HEADS.len(),
                self.heads.len()
            )));
        }
        let shapes: HashMap<String, Shape> = self.intermediate_shapes()?.into_iter().collect();
        for (head, &(size, loc, conf)) in self.heads.iter().zip(&TINY_SSD_HEADS) {
            let s = shapes[&head.source];
            if (s.h, s.w) != (size, size)
                || head.loc.out_channels != loc
                || head.conf.out_channels != conf
            {
                return Err(Error::Arch(format!(
                    "head on `{}` is {}x{} with {}/{} channels, expected {size}x{size} with {loc}/{conf}",
                    head.source, s.h, s.w, head.loc.out_channels, head.conf.out_channels
                )));
            }
        }
        Ok(())
    }

    /// Static shape inference for a single image: the input, every layer output,
    /// then every head output, in execution order.
    pub fn intermediate_shapes(&self) -> Result<Vec<(String, Shape)>> {
        let mut shapes: Vec<(String, Shape)> = vec![(INPUT.to_string(), self.input_shape(1))];
        let mut lookup: HashMap<String, Shape> =
            HashMap::from([(INPUT.to_string(), self.input_shape(1))]);
        for layer in &self.layers {
            let input = joined_shape(&layer.name, &layer.inputs, &lookup)?;
            let out = match &layer.kind {
                LayerKind::Conv(c) => {
                    let (h, w) = c
                        .output_hw(input.h, input.w)
                        .map_err(|e| e.in_layer(&layer.name))?;
                    Shape::new(1, c.out_channels, h, w)
                }
                LayerKind::Pool(p) => {
                    let (h, w) = p
                        .output_hw(input.h, input.w)
                        .map_err(|e| e.in_layer(&layer.name))?;
                    Shape::new(1, input.c, h, w)
                }
                LayerKind::Fire(cfg) => Shape::new(1, cfg.out_channels(), input.h, input.w),
            };
            lookup.insert(layer.name.clone(), out);
            shapes.push((layer.name.clone(), out));
        }
        for head in &self.heads {
            let src = *lookup.get(&head.source).ok_or_else(|| {
                Error::Arch(format!("head source `{}` is not a layer", head.source))
            })?;
            for (name, conv) in [(head.loc_name(), head.loc), (head.conf_name(), head.conf)] {
                let (h, w) = conv
                    .output_hw(src.h, src.w)
                    .map_err(|e| e.in_layer(&name))?;
                shapes.push((name, Shape::new(1, conv.out_channels, h, w)));
            }
        }
        Ok(shapes)
    }

    /// Every parameterised convolution in execution order.
    pub fn conv_units(&self) -> Result<Vec<ConvUnit>> {
        let shapes: HashMap<String, Shape> = self.intermediate_shapes()?.into_iter().collect();
        let mut units = Vec::new();
        for layer in &self.layers {
            let input = joined_shape(&layer.name, &layer.inputs, &shapes)?;
            let out = shapes[&layer.name];
            match &layer.kind {
                LayerKind::Conv(c) => units.push(ConvUnit {
                    layer: layer.name.clone(),
                    prefix: layer.name.clone(),
                    spec: *c,
                    in_channels: input.c,
                    out_hw: (out.h, out.w),
                }),
                LayerKind::Fire(cfg) => {
                    for (sub, spec, in_c) in [
                        ("squeeze", cfg.squeeze_conv(), input.c),
                        ("expand1x1", cfg.expand1x1_conv(), cfg.squeeze),
                        ("expand3x3", cfg.expand3x3_conv(), cfg.squeeze),
                    ] {
                        units.push(ConvUnit {
                            layer: layer.name.clone(),
                            prefix: format!("{}/{sub}", layer.name),
                            spec,
                            in_channels: in_c,
                            out_hw: (out.h, out.w),
                        });
                    }
                }
                LayerKind::Pool(_) => {}
            }
        }
        for head in &self.heads {
            let src = shapes[&head.source];
            for (name, conv) in [(head.loc_name(), head.loc), (head.conf_name(), head.conf)] {
                let out = shapes[&name];
                units.push(ConvUnit {
                    layer: name.clone(),
                    prefix: name,
                    spec: conv,
                    in_channels: src.c,
                    out_hw: (out.h, out.w),
                });
            }
        }
        Ok(units)
    }

    /// Names and shapes of all parameter blobs, in execution order.
    pub fn parameter_manifest(&self) -> Result<Vec<BlobSpec>> {
        let mut blobs = Vec::new();
        for unit in self.conv_units()? {
            let (kh, kw) = unit.spec.kernel;
            blobs.push(BlobSpec {
                name: format!("{}/w", unit.prefix),
                shape: vec![unit.spec.out_channels, unit.in_channels, kh, kw],
            });
            if unit.spec.bias {
                blobs.push(BlobSpec {
                    name: format!("{}/b", unit.prefix),
                    shape: vec![unit.spec.out_channels],
                });
            }
        }
        Ok(blobs)
    }

    /// Total prior rows produced by the heads for one image.
    pub fn prior_count(&self) -> Result<usize> {
        let shapes: HashMap<String, Shape> = self.intermediate_shapes()?.into_iter().collect();
        Ok(self
            .heads
            .iter()
            .map(|h| {
                let s = shapes[&h.loc_name()];
                s.h * s.w * h.priors_per_cell
            })
            .sum())
    }
}

fn joined_shape(layer: &str, inputs: &[String], shapes: &HashMap<String, Shape>) -> Result<Shape> {
    let mut joined: Option<Shape> = None;
    for name in inputs {
        let s = *shapes
            .get(name)
            .ok_or_else(|| Error::Arch(format!("layer `{layer}` reads unknown input `{name}`")))?;
        joined = Some(match joined {
            None => s,
            Some(j) if (j.h, j.w) == (s.h, s.w) => Shape::new(j.n, j.c + s.c, j.h, j.w),
            Some(j) => {
                return Err(Error::shape(
                    layer,
                    format!("inputs disagree on spatial size: {j} vs {s}"),
                ))
            }
        });
    }
    joined.ok_or_else(|| Error::Arch(format!("layer `{layer}` has no inputs")))
}

/// Weights for one convolution, borrowed from a store.
#[derive(Debug, Clone, Copy)]
pub struct ConvWeights<'a> {
    pub weights: &'a [f32],
    pub bias: Option<&'a [f32]>,
}

impl<'a> ConvWeights<'a> {
    pub fn lookup(store: &'a WeightStore, prefix: &str, spec: &ConvSpec) -> Result<Self> {
        let weights = store.data(&format!("{prefix}/w"))?;
        let bias = if spec.bias {
            Some(store.data(&format!("{prefix}/b"))?)
        } else {
            None
        };
        Ok(ConvWeights { weights, bias })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FireWeights<'a> {
    pub squeeze: ConvWeights<'a>,
    pub expand1x1: ConvWeights<'a>,
    pub expand3x3: ConvWeights<'a>,
}

impl<'a> FireWeights<'a> {
    pub fn lookup(store: &'a WeightStore, layer: &str, cfg: &FireConfig) -> Result<Self> {
        Ok(FireWeights {
            squeeze: ConvWeights::lookup(store, &format!("{layer}/squeeze"), &cfg.squeeze_conv())?,
            expand1x1: ConvWeights::lookup(
                store,
                &format!("{layer}/expand1x1"),
                &cfg.expand1x1_conv(),
            )?,
            expand3x3: ConvWeights::lookup(
                store,
                &format!("{layer}/expand3x3"),
                &cfg.expand3x3_conv(),
            )?,
        })
    }
}

fn conv_relu(input: &Tensor, spec: &ConvSpec, w: &ConvWeights, label: &str) -> Result<Tensor> {
    let mut out = ops::conv2d(input, spec, w.weights, w.bias).map_err(|e| e.in_layer(label))?;
    ops::relu_inplace(&mut out);
    Ok(out)
}

/// Squeeze, then both expand branches on the squeezed map, joined on channels.
/// Errors are labelled `fire/<sub-layer>`.
pub fn fire_forward(input: &Tensor, cfg: &FireConfig, weights: &FireWeights) -> Result<Tensor> {
    let squeezed = conv_relu(input, &cfg.squeeze_conv(), &weights.squeeze, "squeeze")?;
    let e1 = conv_relu(
        &squeezed,
        &cfg.expand1x1_conv(),
        &weights.expand1x1,
        "expand1x1",
    )?;
    let e3 = conv_relu(
        &squeezed,
        &cfg.expand3x3_conv(),
        &weights.expand3x3,
        "expand3x3",
    )?;
    ops::concat_channels(&[&e1, &e3])
}

/// Raw head predictions. Rows are priors; each image contributes `priors` rows,
/// ordered by source, then cell row, then cell column, then prior within the cell.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub batch: usize,
    pub priors: usize,
    pub classes: usize,
    /// `batch * priors * 4` box offsets.
    pub loc: Vec<f32>,
    /// `batch * priors * classes` logits (not softmaxed).
    pub conf: Vec<f32>,
}

impl HeadOutput {
    pub fn loc_rows(&self, image: usize) -> &[f32] {
        &self.loc[image * self.priors * 4..(image + 1) * self.priors * 4]
    }

    pub fn conf_rows(&self, image: usize) -> &[f32] {
        &self.conf[image * self.priors * self.classes..(image + 1) * self.priors * self.classes]
    }
}

/// Output shapes observed while executing the graph, in execution order.
pub type Trace = Vec<(String, Shape)>;

pub fn forward(spec: &ArchSpec, store: &WeightStore, image: &Tensor) -> Result<HeadOutput> {
    forward_traced(spec, store, image).map(|(out, _)| out)
}

pub fn forward_traced(
    spec: &ArchSpec,
    store: &WeightStore,
    image: &Tensor,
) -> Result<(HeadOutput, Trace)> {
    let s = image.shape();
    if (s.c, s.h, s.w) != (spec.input_channels, spec.input_size, spec.input_size) {
        return Err(Error::shape(
            INPUT,
            format!(
                "image is {s}, network expects Nx{}x{}x{}",
                spec.input_channels, spec.input_size, spec.input_size
            ),
        ));
    }
    let batch = s.n;
    let mut trace: Trace = vec![(INPUT.to_string(), s)];
    let mut acts: HashMap<&str, Tensor> = HashMap::new();
    acts.insert(INPUT, image.clone());

    for layer in &spec.layers {
        let input = gather_input(&layer.name, &layer.inputs, &acts)?;
        let out = match &layer.kind {
            LayerKind::Conv(c) => {
                let w = ConvWeights::lookup(store, &layer.name, c)?;
                conv_relu(&input, c, &w, &layer.name)?
            }
            LayerKind::Pool(p) => ops::maxpool2d(&input, p).map_err(|e| e.in_layer(&layer.name))?,
            LayerKind::Fire(cfg) => {
                let w = FireWeights::lookup(store, &layer.name, cfg)?;
                fire_forward(&input, cfg, &w).map_err(|e| e.in_layer(&layer.name))?
            }
        };
        trace.push((layer.name.clone(), out.shape()));
        acts.insert(&layer.name, out);
    }

    let classes = spec.class_count;
    let mut per_head = Vec::with_capacity(spec.heads.len());
    for head in &spec.heads {
        let src = acts
            .get(head.source.as_str())
            .ok_or_else(|| Error::Arch(format!("head source `{}` is not a layer", head.source)))?;
        let mut outs = Vec::with_capacity(2);
        for (name, conv) in [(head.loc_name(), head.loc), (head.conf_name(), head.conf)] {
            let w = ConvWeights::lookup(store, &name, &conv)?;
            let t = ops::conv2d(src, &conv, w.weights, w.bias).map_err(|e| e.in_layer(&name))?;
            trace.push((name, t.shape()));
            outs.push(t);
        }
        let conf = outs.pop().unwrap();
        let loc = outs.pop().unwrap();
        per_head.push((loc, conf, head.priors_per_cell));
    }

    let priors: usize = per_head
        .iter()
        .map(|(loc, _, b)| loc.shape().plane() * b)
        .sum();
    let mut loc_rows = Vec::with_capacity(batch * priors * 4);
    let mut conf_rows = Vec::with_capacity(batch * priors * classes);
    for n in 0..batch {
        for (loc, conf, b) in &per_head {
            append_rows(&mut loc_rows, loc, n, *b, 4);
            append_rows(&mut conf_rows, conf, n, *b, classes);
        }
    }
    Ok((
        HeadOutput {
            batch,
            priors,
            classes,
            loc: loc_rows,
            conf: conf_rows,
        },
        trace,
    ))
}

fn gather_input(layer: &str, inputs: &[String], acts: &HashMap<&str, Tensor>) -> Result<Tensor> {
    let parts: Vec<&Tensor> = inputs
        .iter()
        .map(|name| {
            acts.get(name.as_str()).ok_or_else(|| {
                Error::Arch(format!("layer `{layer}` runs before its input `{name}`"))
            })
        })
        .collect::<Result<_>>()?;
    if parts.len() == 1 {
        Ok(parts[0].clone())
    } else {
        ops::concat_channels(&parts).map_err(|e| e.in_layer(layer))
    }
}

/// Permutes a head map `(n, b*width, h, w)` into rows ordered (y, x, prior).
fn append_rows(dst: &mut Vec<f32>, t: &Tensor, n: usize, priors_per_cell: usize, width: usize) {
    let s = t.shape();
    for y in 0..s.h {
        for x in 0..s.w {
            for p in 0..priors_per_cell {
                for k in 0..width {
                    dst.push(t.at(n, p * width + k, y, x));
                }
            }
        }
    }
}

/// Table-style display name, e.g. `conv12_1` -> `Conv12-1`.
pub fn display_name(name: &str) -> String {
    let mut chars = name.chars();
    match chars.next() {
        Some(first) => first
            .to_uppercase()
            .chain(chars)
            .collect::<String>()
            .replace('_', "-"),
        None => String::new(),
    }
}

/// Plain-text architecture table with Type / Stride, Filter Shapes, Input Size and Output Size columns.
pub fn describe_table(spec: &ArchSpec) -> Result<String> {
    let shapes: HashMap<String, Shape> = spec.intermediate_shapes()?.into_iter().collect();
    let hw = |s: Shape| format!("{}x{}", s.h, s.w);
    let mut rows: Vec<[String; 4]> = Vec::new();
    for layer in &spec.layers {
        let input = joined_shape(&layer.name, &layer.inputs, &shapes)?;
        let (kind, filters) = match &layer.kind {
            LayerKind::Conv(c) => (
                stride_label(&layer.name, c.stride),
                format!("{}x{}x{}", c.kernel.0, c.kernel.1, c.out_channels),
            ),
            LayerKind::Pool(p) => (
                stride_label(&layer.name, p.stride),
                format!("{}x{}", p.kernel.0, p.kernel.1),
            ),
            LayerKind::Fire(f) => (
                display_name(&layer.name),
                format!(
                    "{}@S -- {}@E1 -- {}@E3",
                    f.squeeze, f.expand1x1, f.expand3x3
                ),
            ),
        };
        rows.push([kind, filters, hw(input), hw(shapes[&layer.name])]);
    }
    for head in &spec.heads {
        let src = shapes[&head.source];
        for (name, conv) in [(head.loc_name(), head.loc), (head.conf_name(), head.conf)] {
            rows.push([
                stride_label(&name, conv.stride),
                format!("{}x{}x{}", conv.kernel.0, conv.kernel.1, conv.out_channels),
                hw(src),
                hw(shapes[&name]),
            ]);
        }
    }
    let header = [
        "Type / Stride",
        "Filter Shapes",
        "Input Size",
        "Output Size",
    ];
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: [&str; 4]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        format!("{}\n", padded.join(" | ").trim_end())
    };
    let mut out = line(header);
    out.push_str(&format!(
        "{}\n",
        widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("-+-")
    ));
    for row in &rows {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
    }
    Ok(out)
}

fn stride_label(name: &str, stride: usize) -> String {
    if stride > 1 {
        format!("{} / s{stride}", display_name(name))
    } else {
        display_name(name)
    }
}
