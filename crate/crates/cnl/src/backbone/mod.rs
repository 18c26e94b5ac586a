//! Declarative multi-stage CNN architectures with attention insertion points.
//!
//! Two families share one data model: analysis-grade ResNet-50/101 specs
//! (exact layer inventory, never executed) and a small executable toy
//! backbone. Specs serialize to JSON; the schema is the serde form of
//! [`ArchSpec`] and is documented in the repository README.

mod model;

pub use model::{forward, ImagePass, Model};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of the inventory. Parameter/FLOP counting and the receptive
/// field walk consume these; only the toy subset is executable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerOp {
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize },
    Norm { channels: usize },
    Relu,
    MaxPool { kernel: usize, stride: usize, pad: usize },
    GlobalAvgPool,
    Linear { in_features: usize, out_features: usize, bias: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub op: LayerOp,
    /// Layers off the main path (residual downsample projections) do not
    /// advance the spatial chain; they run in parallel from the block input.
    pub main_path: bool,
}

impl Layer {
    fn main(name: impl Into<String>, op: LayerOp) -> Self {
        Layer { name: name.into(), op, main_path: true }
    }

    fn parallel(name: impl Into<String>, op: LayerOp) -> Self {
        Layer { name: name.into(), op, main_path: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub out_channels: usize,
    /// Total spatial stride contributed by the stage.
    pub spatial_stride: usize,
    pub blocks: Vec<BlockSpec>,
}

impl StageSpec {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }
}

/// A response tap: the activation after `block` (1-based) of `stage`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tap {
    pub stage: String,
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InsertionSpec {
    /// Wrap the activation after one block with a single-layer block.
    /// `embed` defaults to half the stage's channels.
    Nl { stage: String, block: usize, embed: Option<usize> },
    /// One cross-layer block: the query is the activation after the last
    /// block of `query_stage`; taps are ordered shallow to deep.
    Cnl { query_stage: String, taps: Vec<Tap>, embed: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpecKind {
    /// Executable desk-scale backbone.
    Toy,
    /// Exact inventory for cost analysis only.
    Analysis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub kind: SpecKind,
    pub input_size: (usize, usize),
    pub input_channels: usize,
    pub num_classes: usize,
    pub stages: Vec<StageSpec>,
    pub head: Vec<Layer>,
    pub insertions: Vec<InsertionSpec>,
}

/// A layer with its spatial extents resolved against a concrete input size.
#[derive(Debug, Clone)]
pub struct ResolvedLayer {
    pub name: String,
    pub op: LayerOp,
    pub in_size: (usize, usize),
    pub out_size: (usize, usize),
}

fn conv_out(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < kernel || stride == 0 {
        return Err(Error::Validation(format!(
            "kernel {kernel} (stride {stride}) does not fit a padded extent of {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

impl ArchSpec {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ArchSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn stage_index(&self, name: &str) -> Result<usize> {
        self.stages
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::Validation(format!("no stage named '{name}'")))
    }

    pub fn stage(&self, name: &str) -> Result<&StageSpec> {
        Ok(&self.stages[self.stage_index(name)?])
    }

    /// Spatial size of a stage's output for a given input size.
    pub fn resolution_after(&self, stage_name: &str, input: (usize, usize)) -> Result<(usize, usize)> {
        let idx = self.stage_index(stage_name)?;
        let mut size = input;
        for stage in &self.stages[..=idx] {
            for block in &stage.blocks {
                for layer in block.layers.iter().filter(|l| l.main_path) {
                    size = apply_spatial(&layer.op, size)?;
                }
            }
        }
        Ok(size)
    }

    /// Walk the full inventory (stages then head) at the given input size.
    /// Downsample branches are resolved from their block's input size.
    pub fn resolved_layers(&self, input: (usize, usize)) -> Result<Vec<ResolvedLayer>> {
        let mut out = Vec::new();
        let mut size = input;
        let mut channels = self.input_channels;
        for stage in &self.stages {
            for block in &stage.blocks {
                // The parallel (downsample) branch chains separately from the
                // block input.
                let mut par_size = size;
                let mut par_channels = channels;
                for layer in &block.layers {
                    let in_size = if layer.main_path { size } else { par_size };
                    let in_ch = if layer.main_path { channels } else { par_channels };
                    check_channels(&layer.name, &layer.op, in_ch)?;
                    let out_size = apply_spatial(&layer.op, in_size)?;
                    out.push(ResolvedLayer {
                        name: layer.name.clone(),
                        op: layer.op.clone(),
                        in_size,
                        out_size,
                    });
                    if layer.main_path {
                        size = out_size;
                        channels = out_channels_of(&layer.op, channels);
                    } else {
                        par_size = out_size;
                        par_channels = out_channels_of(&layer.op, par_channels);
                    }
                }
            }
            if channels != stage.out_channels {
                return Err(Error::Validation(format!(
                    "stage {} ends with {} channels, spec says {}",
                    stage.name, channels, stage.out_channels
                )));
            }
        }
        for layer in &self.head {
            check_channels(&layer.name, &layer.op, channels)?;
            let out_size = apply_spatial(&layer.op, size)?;
            out.push(ResolvedLayer {
                name: layer.name.clone(),
                op: layer.op.clone(),
                in_size: size,
                out_size,
            });
            size = out_size;
            channels = out_channels_of(&layer.op, channels);
        }
        Ok(out)
    }

    /// Resolve a tap to `(positions, channels)` at the given input size.
    pub fn tap_geometry(&self, tap: &Tap, input: (usize, usize)) -> Result<(usize, usize)> {
        let stage = self.stage(&tap.stage)?;
        if tap.block == 0 || tap.block > stage.block_count() {
            return Err(Error::Validation(format!(
                "block {} out of range for stage {} ({} blocks)",
                tap.block,
                tap.stage,
                stage.block_count()
            )));
        }
        // Stage strides land in the first block, so every block's output
        // within a stage shares the stage's output resolution.
        let (h, w) = self.resolution_after(&tap.stage, input)?;
        Ok((h * w, stage.out_channels))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Validation("spec has no stages".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation("need at least two classes".into()));
        }
        let layers = self.resolved_layers(self.input_size)?;
        if let Some(l) = layers.iter().find(|l| l.out_size.0 == 0 || l.out_size.1 == 0) {
            return Err(Error::Validation(format!("layer {} collapses to zero extent", l.name)));
        }
        for ins in &self.insertions {
            match ins {
                InsertionSpec::Nl { stage, block, embed } => {
                    self.tap_geometry(&Tap { stage: stage.clone(), block: *block }, self.input_size)?;
                    if embed == &Some(0) {
                        return Err(Error::Validation("embedding width must be >= 1".into()));
                    }
                }
                InsertionSpec::Cnl { query_stage, taps, embed } => {
                    if taps.is_empty() {
                        return Err(Error::Validation("cross-layer insertion has no taps".into()));
                    }
                    if *embed == 0 {
                        return Err(Error::Validation("embedding width must be >= 1".into()));
                    }
                    self.stage(query_stage)?;
                    let mut last: Option<(usize, usize)> = None;
                    for tap in taps {
                        self.tap_geometry(tap, self.input_size)?;
                        let pos = (self.stage_index(&tap.stage)?, tap.block);
                        if let Some(prev) = last {
                            if pos <= prev {
                                return Err(Error::Validation(
                                    "taps must be ordered shallow to deep".into(),
                                ));
                            }
                        }
                        last = Some(pos);
                    }
                }
            }
        }
        Ok(())
    }
}

fn apply_spatial(op: &LayerOp, size: (usize, usize)) -> Result<(usize, usize)> {
    match op {
        LayerOp::Conv { kernel, stride, pad, .. } | LayerOp::MaxPool { kernel, stride, pad } => {
            Ok((conv_out(size.0, *kernel, *stride, *pad)?, conv_out(size.1, *kernel, *stride, *pad)?))
        }
        LayerOp::Norm { .. } | LayerOp::Relu => Ok(size),
        LayerOp::GlobalAvgPool | LayerOp::Linear { .. } => Ok((1, 1)),
    }
}

fn out_channels_of(op: &LayerOp, current: usize) -> usize {
    match op {
        LayerOp::Conv { out_channels, .. } => *out_channels,
        LayerOp::Linear { out_features, .. } => *out_features,
        _ => current,
    }
}

fn check_channels(name: &str, op: &LayerOp, current: usize) -> Result<()> {
    let expected = match op {
        LayerOp::Conv { in_channels, .. } => Some(*in_channels),
        LayerOp::Norm { channels } => Some(*channels),
        LayerOp::Linear { in_features, .. } => Some(*in_features),
        _ => None,
    };
    match expected {
        Some(e) if e != current => Err(Error::Validation(format!(
            "layer {name} expects {e} input channels, chain carries {current}"
        ))),
        _ => Ok(()),
    }
}

// ── Builders ───────────────────────────────────────────────────────────

fn bottleneck(stage: &str, idx: usize, c_in: usize, mid: usize, c_out: usize, stride: usize) -> BlockSpec {
    let p = format!("{stage}.b{idx}");
    let mut layers = vec![
        Layer::main(format!("{p}.conv1"), LayerOp::Conv { in_channels: c_in, out_channels: mid, kernel: 1, stride: 1, pad: 0 }),
        Layer::main(format!("{p}.norm1"), LayerOp::Norm { channels: mid }),
        Layer::main(format!("{p}.relu1"), LayerOp::Relu),
        Layer::main(format!("{p}.conv2"), LayerOp::Conv { in_channels: mid, out_channels: mid, kernel: 3, stride, pad: 1 }),
        Layer::main(format!("{p}.norm2"), LayerOp::Norm { channels: mid }),
        Layer::main(format!("{p}.relu2"), LayerOp::Relu),
        Layer::main(format!("{p}.conv3"), LayerOp::Conv { in_channels: mid, out_channels: c_out, kernel: 1, stride: 1, pad: 0 }),
        Layer::main(format!("{p}.norm3"), LayerOp::Norm { channels: c_out }),
    ];
    if stride != 1 || c_in != c_out {
        layers.push(Layer::parallel(
            format!("{p}.downsample.conv"),
            LayerOp::Conv { in_channels: c_in, out_channels: c_out, kernel: 1, stride, pad: 0 },
        ));
        layers.push(Layer::parallel(format!("{p}.downsample.norm"), LayerOp::Norm { channels: c_out }));
    }
    layers.push(Layer::main(format!("{p}.relu3"), LayerOp::Relu));
    BlockSpec { layers }
}

/// Canonical bottleneck ResNet for static analysis. Supported depths: 50, 101.
pub fn resnet_spec(depth: usize, input_size: usize, num_classes: usize) -> Result<ArchSpec> {
    let block_counts: [usize; 4] = match depth {
        50 => [3, 4, 6, 3],
        101 => [3, 4, 23, 3],
        other => {
            return Err(Error::InvalidArgument(format!("unsupported depth {other}, expected 50 or 101")))
        }
    };
    // The stem is split so the 112x112 first-conv activation (for a 224
    // input) is addressable as a tap, separately from the pooled 56x56 one.
    let conv1 = StageSpec {
        name: "conv1".into(),
        out_channels: 64,
        spatial_stride: 2,
        blocks: vec![BlockSpec {
            layers: vec![
                Layer::main("conv1.conv", LayerOp::Conv { in_channels: 3, out_channels: 64, kernel: 7, stride: 2, pad: 3 }),
                Layer::main("conv1.norm", LayerOp::Norm { channels: 64 }),
                Layer::main("conv1.relu", LayerOp::Relu),
            ],
        }],
    };
    let pool1 = StageSpec {
        name: "pool1".into(),
        out_channels: 64,
        spatial_stride: 2,
        blocks: vec![BlockSpec {
            layers: vec![Layer::main("pool1.maxpool", LayerOp::MaxPool { kernel: 3, stride: 2, pad: 1 })],
        }],
    };
    let mut stages = vec![conv1, pool1];
    let stage_names = ["res2", "res3", "res4", "res5"];
    let mids = [64, 128, 256, 512];
    let outs = [256, 512, 1024, 2048];
    let strides = [1, 2, 2, 2];
    let mut c_in = 64;
    for s in 0..4 {
        let blocks = (1..=block_counts[s])
            .map(|b| {
                let block_in = if b == 1 { c_in } else { outs[s] };
                let stride = if b == 1 { strides[s] } else { 1 };
                bottleneck(stage_names[s], b, block_in, mids[s], outs[s], stride)
            })
            .collect();
        stages.push(StageSpec {
            name: stage_names[s].into(),
            out_channels: outs[s],
            spatial_stride: strides[s],
            blocks,
        });
        c_in = outs[s];
    }
    let spec = ArchSpec {
        name: format!("resnet{depth}"),
        kind: SpecKind::Analysis,
        input_size: (input_size, input_size),
        input_channels: 3,
        num_classes,
        stages,
        head: vec![
            Layer::main("head.pool", LayerOp::GlobalAvgPool),
            Layer::main("head.fc", LayerOp::Linear { in_features: 2048, out_features: num_classes, bias: true }),
        ],
        insertions: vec![],
    };
    spec.validate()?;
    Ok(spec)
}

/// Executable desk-scale backbone: one 3x3 stride-2 conv + norm + relu per
/// stage, global average pooling, and a linear classifier. At least three
/// stages, so shallow/mid/deep taps exist.
pub fn toy_spec(stage_channels: &[usize], input_size: usize, num_classes: usize) -> Result<ArchSpec> {
    if stage_channels.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "toy backbone needs >= 3 stages, got {}",
            stage_channels.len()
        )));
    }
    let mut stages = Vec::new();
    let mut c_in = 1;
    for (i, &c_out) in stage_channels.iter().enumerate() {
        if c_out == 0 {
            return Err(Error::InvalidArgument("stage channels must be >= 1".into()));
        }
        let name = format!("stage{}", i + 1);
        stages.push(StageSpec {
            name: name.clone(),
            out_channels: c_out,
            spatial_stride: 2,
            blocks: vec![BlockSpec {
                layers: vec![
                    Layer::main(format!("{name}.b1.conv"), LayerOp::Conv { in_channels: c_in, out_channels: c_out, kernel: 3, stride: 2, pad: 1 }),
                    Layer::main(format!("{name}.b1.norm"), LayerOp::Norm { channels: c_out }),
                    Layer::main(format!("{name}.b1.relu"), LayerOp::Relu),
                ],
            }],
        });
        c_in = c_out;
    }
    let spec = ArchSpec {
        name: "toy".into(),
        kind: SpecKind::Toy,
        input_size: (input_size, input_size),
        input_channels: 1,
        num_classes,
        stages,
        head: vec![
            Layer::main("head.pool", LayerOp::GlobalAvgPool),
            Layer::main("head.fc", LayerOp::Linear { in_features: c_in, out_features: num_classes, bias: true }),
        ],
        insertions: vec![],
    };
    spec.validate()?;
    Ok(spec)
}

// ── Insertion presets ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    Baseline,
    Nl5,
    Cnl5,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "baseline" => Ok(Preset::Baseline),
            "nl5" => Ok(Preset::Nl5),
            "cnl5" => Ok(Preset::Cnl5),
            other => Err(Error::Validation(format!(
                "unknown preset '{other}' (expected baseline, nl5, or cnl5)"
            ))),
        }
    }
}

/// Evenly spaced 1-based block indices: `round(i * blocks / n)` for i in 1..=n.
/// For 4 blocks / 2 taps this gives 2, 4; for 6 / 3 it gives 2, 4, 6; for
/// 23 / 3 it gives 8, 15, 23.
fn spaced_blocks(blocks: usize, n: usize) -> Vec<usize> {
    (1..=n).map(|i| ((i * blocks) as f64 / n as f64).round() as usize).collect()
}

/// The five standard tap points: two in the shallow host stage, three in the
/// deeper one, at regular intervals. On the toy backbone, which has one block
/// per stage, this collapses to one tap per non-final stage.
fn preset_taps(spec: &ArchSpec) -> Result<Vec<Tap>> {
    match spec.kind {
        SpecKind::Analysis => {
            let mut taps = Vec::new();
            for (stage, n) in [("res3", 2usize), ("res4", 3usize)] {
                let blocks = spec.stage(stage)?.block_count();
                for b in spaced_blocks(blocks, n) {
                    taps.push(Tap { stage: stage.into(), block: b });
                }
            }
            Ok(taps)
        }
        SpecKind::Toy => Ok(spec.stages[..spec.stages.len() - 1]
            .iter()
            .map(|s| Tap { stage: s.name.clone(), block: s.block_count() })
            .collect()),
    }
}

/// Replace a spec's insertions with a named preset. `embed` overrides the
/// cross-layer embedding width (default 256 for the ResNet specs, one eighth
/// of the query width for the toy backbone).
pub fn apply_preset(spec: &mut ArchSpec, preset: Preset, embed: Option<usize>) -> Result<()> {
    spec.insertions.clear();
    match preset {
        Preset::Baseline => {}
        Preset::Nl5 => {
            for tap in preset_taps(spec)? {
                spec.insertions.push(InsertionSpec::Nl { stage: tap.stage, block: tap.block, embed: None });
            }
        }
        Preset::Cnl5 => {
            let query_stage = spec.stages.last().expect("validated non-empty").name.clone();
            let query_channels = spec.stages.last().unwrap().out_channels;
            let default_embed = match spec.kind {
                SpecKind::Analysis => 256,
                SpecKind::Toy => (query_channels / 8).max(1),
            };
            spec.insertions.push(InsertionSpec::Cnl {
                query_stage,
                taps: preset_taps(spec)?,
                embed: embed.unwrap_or(default_embed),
            });
        }
    }
    spec.validate()
}
