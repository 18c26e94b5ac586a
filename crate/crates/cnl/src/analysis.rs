//! Static cost accounting: exact parameter counts, FLOP counts under a
//! selectable convention, attention-map memory, and receptive fields.
//!
//! Everything here is a pure function of an [`ArchSpec`]; nothing executes.
//! Convolutions and matrix products are the only FLOP carriers (norms,
//! activations and pooling are excluded), which keeps ratios between model
//! variants convention-independent.

use serde::{Deserialize, Serialize};

use crate::backbone::{ArchSpec, InsertionSpec, LayerOp, Tap};
use crate::error::{Error, Result};
use crate::export;

/// Whether one multiply-accumulate counts as one or two floating-point ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlopConvention {
    MacIs1,
    MacIs2,
}

impl FlopConvention {
    pub fn factor(self) -> u64 {
        match self {
            FlopConvention::MacIs1 => 1,
            FlopConvention::MacIs2 => 2,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mac1" => Ok(FlopConvention::MacIs1),
            "mac2" => Ok(FlopConvention::MacIs2),
            other => Err(Error::Validation(format!(
                "unknown FLOP convention '{other}' (expected mac1 or mac2)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FlopConvention::MacIs1 => "mac1",
            FlopConvention::MacIs2 => "mac2",
        }
    }
}

/// Cost of `[m,k] . [k,n]` under a convention.
pub fn matmul_flops(m: usize, k: usize, n: usize, convention: FlopConvention) -> u64 {
    (m as u64) * (k as u64) * (n as u64) * convention.factor()
}

// ── Parameter blocks ───────────────────────────────────────────────────

/// One named group of weights with its dimensions. `count_params` sums the
/// products; an independent walker can enumerate the dims element by element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub dims: Vec<usize>,
}

impl ParamBlock {
    pub fn count(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }
}

fn layer_param_blocks(name: &str, op: &LayerOp, out: &mut Vec<ParamBlock>) {
    match op {
        LayerOp::Conv { in_channels, out_channels, kernel, .. } => {
            out.push(ParamBlock {
                name: format!("{name}.weight"),
                dims: vec![*kernel, *kernel, *in_channels, *out_channels],
            });
        }
        LayerOp::Norm { channels } => {
            out.push(ParamBlock { name: format!("{name}.gamma"), dims: vec![*channels] });
            out.push(ParamBlock { name: format!("{name}.beta"), dims: vec![*channels] });
        }
        LayerOp::Linear { in_features, out_features, bias } => {
            out.push(ParamBlock {
                name: format!("{name}.weight"),
                dims: vec![*in_features, *out_features],
            });
            if *bias {
                out.push(ParamBlock { name: format!("{name}.bias"), dims: vec![*out_features] });
            }
        }
        LayerOp::Relu | LayerOp::MaxPool { .. } | LayerOp::GlobalAvgPool => {}
    }
}

fn insertion_embed(spec: &ArchSpec, ins: &InsertionSpec) -> Result<usize> {
    Ok(match ins {
        InsertionSpec::Nl { stage, embed, .. } => {
            embed.unwrap_or_else(|| (spec.stage(stage).map(|s| s.out_channels).unwrap_or(2) / 2).max(1))
        }
        InsertionSpec::Cnl { embed, .. } => *embed,
    })
}

fn insertion_name(ins: &InsertionSpec) -> String {
    match ins {
        InsertionSpec::Nl { stage, block, .. } => format!("nl@{stage}.b{block}"),
        InsertionSpec::Cnl { query_stage, taps, .. } => {
            format!("cnl@{query_stage}<-{}taps", taps.len())
        }
    }
}

/// Parameter blocks contributed by one insertion. Projections carry no bias;
/// the output normalization carries gamma and beta.
pub fn insertion_param_blocks(spec: &ArchSpec, ins: &InsertionSpec) -> Result<Vec<ParamBlock>> {
    let ce = insertion_embed(spec, ins)?;
    let prefix = insertion_name(ins);
    let mut blocks = Vec::new();
    match ins {
        InsertionSpec::Nl { stage, .. } => {
            let c = spec.stage(stage)?.out_channels;
            blocks.push(ParamBlock { name: format!("{prefix}.theta"), dims: vec![c, ce] });
            blocks.push(ParamBlock { name: format!("{prefix}.phi"), dims: vec![c, ce] });
            blocks.push(ParamBlock { name: format!("{prefix}.g"), dims: vec![c, ce] });
            blocks.push(ParamBlock { name: format!("{prefix}.z"), dims: vec![ce, c] });
            blocks.push(ParamBlock { name: format!("{prefix}.norm.gamma"), dims: vec![c] });
            blocks.push(ParamBlock { name: format!("{prefix}.norm.beta"), dims: vec![c] });
        }
        InsertionSpec::Cnl { query_stage, taps, .. } => {
            let cq = spec.stage(query_stage)?.out_channels;
            blocks.push(ParamBlock { name: format!("{prefix}.theta"), dims: vec![cq, ce] });
            for (i, tap) in taps.iter().enumerate() {
                let cr = spec.stage(&tap.stage)?.out_channels;
                blocks.push(ParamBlock { name: format!("{prefix}.phi{}", i + 1), dims: vec![cr, ce] });
                blocks.push(ParamBlock { name: format!("{prefix}.g{}", i + 1), dims: vec![cr, ce] });
            }
            blocks.push(ParamBlock { name: format!("{prefix}.z"), dims: vec![ce, cq] });
            blocks.push(ParamBlock { name: format!("{prefix}.norm.gamma"), dims: vec![cq] });
            blocks.push(ParamBlock { name: format!("{prefix}.norm.beta"), dims: vec![cq] });
        }
    }
    Ok(blocks)
}

/// Every parameter block of the spec: backbone layers, then insertions.
pub fn param_blocks(spec: &ArchSpec) -> Result<Vec<ParamBlock>> {
    let mut blocks = Vec::new();
    for layer in spec.resolved_layers(spec.input_size)? {
        layer_param_blocks(&layer.name, &layer.op, &mut blocks);
    }
    for ins in &spec.insertions {
        blocks.extend(insertion_param_blocks(spec, ins)?);
    }
    Ok(blocks)
}

/// Exact parameter count: weights plus normalization gamma/beta, over all
/// layers and insertions. Running statistics are not parameters.
pub fn count_params(spec: &ArchSpec) -> Result<u64> {
    Ok(param_blocks(spec)?.iter().map(ParamBlock::count).sum())
}

/// Parameters contributed by the insertions alone.
pub fn insertion_params(spec: &ArchSpec) -> Result<u64> {
    let mut total = 0;
    for ins in &spec.insertions {
        total += insertion_param_blocks(spec, ins)?.iter().map(ParamBlock::count).sum::<u64>();
    }
    Ok(total)
}

// ── FLOPs ──────────────────────────────────────────────────────────────

/// FLOP terms of one attention insertion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionFlops {
    /// theta/phi/g embeddings plus the z back-projection.
    pub projections: u64,
    /// Affinity products `Q . K^T`, summed over branches.
    pub qk: u64,
    /// Aggregations `A . G`, summed over branches.
    pub av: u64,
}

impl AttentionFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.qk + self.av
    }
}

/// FLOPs of one insertion at a given input size.
pub fn insertion_flops(
    spec: &ArchSpec,
    ins: &InsertionSpec,
    input: (usize, usize),
    convention: FlopConvention,
) -> Result<AttentionFlops> {
    let ce = insertion_embed(spec, ins)?;
    match ins {
        InsertionSpec::Nl { stage, block, .. } => {
            let (n, c) = spec.tap_geometry(&Tap { stage: stage.clone(), block: *block }, input)?;
            Ok(AttentionFlops {
                projections: 4 * matmul_flops(n, c, ce, convention),
                qk: matmul_flops(n, ce, n, convention),
                av: matmul_flops(n, n, ce, convention),
            })
        }
        InsertionSpec::Cnl { query_stage, taps, .. } => {
            let q_stage = spec.stage(query_stage)?;
            let (qh, qw) = spec.resolution_after(query_stage, input)?;
            let nq = qh * qw;
            let cq = q_stage.out_channels;
            let mut projections = matmul_flops(nq, cq, ce, convention) // theta
                + matmul_flops(nq, ce, cq, convention); // z
            let (mut qk, mut av) = (0, 0);
            for tap in taps {
                let (nr, cr) = spec.tap_geometry(tap, input)?;
                projections += 2 * matmul_flops(nr, cr, ce, convention); // phi_i, g_i
                qk += matmul_flops(nq, ce, nr, convention);
                av += matmul_flops(nq, nr, ce, convention);
            }
            Ok(AttentionFlops { projections, qk, av })
        }
    }
}

/// FLOPs of the full model at `input`: convolution and linear layers plus
/// attention insertions. Norms, activations and pooling are excluded.
pub fn count_flops(spec: &ArchSpec, input: (usize, usize), convention: FlopConvention) -> Result<u64> {
    let mut total = 0u64;
    for layer in spec.resolved_layers(input)? {
        total += match layer.op {
            LayerOp::Conv { in_channels, out_channels, kernel, .. } => {
                let positions = layer.out_size.0 * layer.out_size.1;
                matmul_flops(positions, kernel * kernel * in_channels, out_channels, convention)
            }
            LayerOp::Linear { in_features, out_features, .. } => {
                matmul_flops(1, in_features, out_features, convention)
            }
            _ => 0,
        };
    }
    for ins in &spec.insertions {
        total += insertion_flops(spec, ins, input, convention)?.total();
    }
    Ok(total)
}

// ── Attention memory ───────────────────────────────────────────────────

/// Entries stored by an insertion's attention maps: `N^2` for a single-layer
/// block at `N` positions, `Nq * sum_i Nri` for a cross-layer block.
pub fn attention_memory(ins: &InsertionSpec, spec: &ArchSpec, input: (usize, usize)) -> Result<u64> {
    match ins {
        InsertionSpec::Nl { stage, block, .. } => {
            let (n, _) = spec.tap_geometry(&Tap { stage: stage.clone(), block: *block }, input)?;
            Ok((n as u64) * (n as u64))
        }
        InsertionSpec::Cnl { query_stage, taps, .. } => {
            let (qh, qw) = spec.resolution_after(query_stage, input)?;
            let nq = (qh * qw) as u64;
            let mut total = 0u64;
            for tap in taps {
                let (nr, _) = spec.tap_geometry(tap, input)?;
                total += nq * nr as u64;
            }
            Ok(total)
        }
    }
}

/// Total attention entries over all insertions.
pub fn attention_memory_total(spec: &ArchSpec, input: (usize, usize)) -> Result<u64> {
    spec.insertions.iter().map(|ins| attention_memory(ins, spec, input)).sum()
}

// ── Receptive fields ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub layer: String,
    /// Input pixels covered by one output activation.
    pub rf_size: u64,
    /// Input pixels between adjacent output activations.
    pub jump: u64,
    /// Center of the first activation's field, in input pixel coordinates.
    pub center: f64,
}

/// Receptive field of a named layer under the standard recurrence
/// `rf_l = rf_{l-1} + (k - 1) * jump_{l-1}`, `jump_l = jump_{l-1} * stride`.
/// The pseudo-layer name `input` resolves to rf 1. Head layers (pooling over
/// all positions, classifier) have no spatial field and are rejected.
pub fn receptive_field(spec: &ArchSpec, layer: &str) -> Result<ReceptiveField> {
    let mut rf = ReceptiveField { layer: "input".into(), rf_size: 1, jump: 1, center: 0.5 };
    if layer == "input" {
        return Ok(rf);
    }
    for resolved in spec.resolved_layers(spec.input_size)? {
        let main = matches!(
            resolved.op,
            LayerOp::Conv { .. } | LayerOp::MaxPool { .. } | LayerOp::Norm { .. } | LayerOp::Relu
        );
        if !main {
            continue;
        }
        if let LayerOp::Conv { kernel, stride, pad, .. } | LayerOp::MaxPool { kernel, stride, pad } =
            resolved.op
        {
            rf.rf_size += (kernel as u64 - 1) * rf.jump;
            rf.center += ((kernel as f64 - 1.0) / 2.0 - pad as f64) * rf.jump as f64;
            rf.jump *= stride as u64;
        }
        if resolved.name == layer {
            rf.layer = resolved.name;
            return Ok(rf);
        }
    }
    Err(Error::UnknownLayer(layer.into()))
}

// ── Reports ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InsertionCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    pub attention_entries: u64,
}

/// Attention-entry comparison between the configured insertions and the
/// other placement at the same taps (single-layer blocks at each tap versus
/// one cross-layer block reading those taps).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryComparison {
    pub nl_entries: u64,
    pub cnl_entries: u64,
    /// `1 - cnl / nl`, as a percentage.
    pub reduction_pct: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub spec_name: String,
    pub input: (usize, usize),
    pub convention: FlopConvention,
    pub baseline_params: u64,
    pub insertion_params: u64,
    pub total_params: u64,
    pub baseline_flops: u64,
    pub insertion_flops: u64,
    pub total_flops: u64,
    pub attention_entries: u64,
    pub insertions: Vec<InsertionCost>,
    pub memory: Option<MemoryComparison>,
}

/// Compare attention memory for the two placements over one tap set.
fn memory_comparison(spec: &ArchSpec, input: (usize, usize)) -> Result<Option<MemoryComparison>> {
    let taps: Vec<Tap> = spec
        .insertions
        .iter()
        .flat_map(|ins| match ins {
            InsertionSpec::Nl { stage, block, .. } => {
                vec![Tap { stage: stage.clone(), block: *block }]
            }
            InsertionSpec::Cnl { taps, .. } => taps.clone(),
        })
        .collect();
    if taps.is_empty() {
        return Ok(None);
    }
    let query_stage = spec.stages.last().expect("validated").name.clone();
    let (qh, qw) = spec.resolution_after(&query_stage, input)?;
    let nq = (qh * qw) as u64;
    let mut nl_entries = 0u64;
    let mut cnl_entries = 0u64;
    for tap in &taps {
        let (nr, _) = spec.tap_geometry(tap, input)?;
        nl_entries += (nr as u64) * (nr as u64);
        cnl_entries += nq * nr as u64;
    }
    let reduction_pct = 100.0 * (1.0 - cnl_entries as f64 / nl_entries as f64);
    Ok(Some(MemoryComparison { nl_entries, cnl_entries, reduction_pct }))
}

/// Assemble the full cost report for a spec at one input size.
pub fn build_report(spec: &ArchSpec, input: (usize, usize), convention: FlopConvention) -> Result<CostReport> {
    let mut baseline = spec.clone();
    baseline.insertions.clear();
    let baseline_params = count_params(&baseline)?;
    let baseline_flops = count_flops(&baseline, input, convention)?;
    let total_params = count_params(spec)?;
    let total_flops = count_flops(spec, input, convention)?;
    let mut insertions = Vec::new();
    for ins in &spec.insertions {
        insertions.push(InsertionCost {
            name: insertion_name(ins),
            params: insertion_param_blocks(spec, ins)?.iter().map(ParamBlock::count).sum(),
            flops: insertion_flops(spec, ins, input, convention)?.total(),
            attention_entries: attention_memory(ins, spec, input)?,
        });
    }
    Ok(CostReport {
        spec_name: spec.name.clone(),
        input,
        convention,
        baseline_params,
        insertion_params: insertion_params(spec)?,
        total_params,
        baseline_flops,
        insertion_flops: total_flops - baseline_flops,
        total_flops,
        attention_entries: attention_memory_total(spec, input)?,
        insertions,
        memory: memory_comparison(spec, input)?,
    })
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<Vec<String>> = vec![
            vec!["spec".into(), "name".into(), self.spec_name.clone()],
            vec!["spec".into(), "input".into(), format!("{}x{}", self.input.0, self.input.1)],
            vec!["spec".into(), "flop_convention".into(), self.convention.name().into()],
            vec!["params".into(), "baseline".into(), self.baseline_params.to_string()],
            vec!["params".into(), "insertions".into(), self.insertion_params.to_string()],
            vec!["params".into(), "total".into(), self.total_params.to_string()],
            vec!["flops".into(), "baseline".into(), self.baseline_flops.to_string()],
            vec!["flops".into(), "insertions".into(), self.insertion_flops.to_string()],
            vec!["flops".into(), "total".into(), self.total_flops.to_string()],
            vec!["attention".into(), "entries_total".into(), self.attention_entries.to_string()],
        ];
        for ins in &self.insertions {
            rows.push(vec!["insertion_params".into(), ins.name.clone(), ins.params.to_string()]);
            rows.push(vec!["insertion_flops".into(), ins.name.clone(), ins.flops.to_string()]);
            rows.push(vec![
                "insertion_attention".into(),
                ins.name.clone(),
                ins.attention_entries.to_string(),
            ]);
        }
        if let Some(m) = &self.memory {
            rows.push(vec!["memory".into(), "nl_entries_at_taps".into(), m.nl_entries.to_string()]);
            rows.push(vec!["memory".into(), "cnl_entries_at_taps".into(), m.cnl_entries.to_string()]);
            rows.push(vec!["memory".into(), "reduction_pct".into(), format!("{}", m.reduction_pct)]);
        }
        export::table_csv(&["section", "metric", "value"], &rows)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{} @ {}x{} ({})\n",
            self.spec_name,
            self.input.0,
            self.input.1,
            self.convention.name()
        ));
        out.push_str(&format!(
            "  params : baseline {:>12}  +insertions {:>12}  total {:>12}\n",
            self.baseline_params, self.insertion_params, self.total_params
        ));
        out.push_str(&format!(
            "  flops  : baseline {:>12}  +insertions {:>12}  total {:>12}\n",
            self.baseline_flops, self.insertion_flops, self.total_flops
        ));
        out.push_str(&format!("  attention entries: {}\n", self.attention_entries));
        for ins in &self.insertions {
            out.push_str(&format!(
                "    {:<24} params {:>10}  flops {:>12}  entries {:>10}\n",
                ins.name, ins.params, ins.flops, ins.attention_entries
            ));
        }
        if let Some(m) = &self.memory {
            out.push_str(&format!(
                "  at the same taps: single-layer blocks store {} entries, the cross-layer block {} ({:.2}% reduction)\n",
                m.nl_entries, m.cnl_entries, m.reduction_pct
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{apply_preset, resnet_spec, toy_spec, Preset};

    #[test]
    fn single_projection_param_arithmetic() {
        // 1x1 projection 1024 -> 512, no bias.
        let spec = resnet_spec(50, 448, 200).unwrap();
        let ins = InsertionSpec::Nl { stage: "res4".into(), block: 2, embed: None };
        let blocks = insertion_param_blocks(&spec, &ins).unwrap();
        let theta = blocks.iter().find(|b| b.name.ends_with("theta")).unwrap();
        assert_eq!(theta.count(), 524_288);
    }

    #[test]
    fn resnet50_baseline_params() {
        let spec = resnet_spec(50, 448, 200).unwrap();
        let total = count_params(&spec).unwrap();
        assert_eq!(total, 23_917_832);
        let rel = (total as f64 - 2.39e7).abs() / 2.39e7;
        assert!(rel < 0.01, "relative deviation {rel}");
    }

    #[test]
    fn resnet101_baseline_params() {
        let spec = resnet_spec(101, 448, 200).unwrap();
        assert_eq!(count_params(&spec).unwrap(), 42_909_960);
    }

    #[test]
    fn nl5_param_delta_exact() {
        // res4: 3 * (4 * 1024 * 512 + 2 * 1024); res3: 2 * (4 * 512 * 256 + 2 * 512)
        for depth in [50, 101] {
            let mut spec = resnet_spec(depth, 448, 200).unwrap();
            apply_preset(&mut spec, Preset::Nl5, None).unwrap();
            assert_eq!(insertion_params(&spec).unwrap(), 7_348_224, "depth {depth}");
        }
    }

    #[test]
    fn cnl5_param_delta_exact() {
        // 2048*256 + 2*(2*512*256) + 3*(2*1024*256) + 256*2048 + 2*2048
        for depth in [50, 101] {
            let mut spec = resnet_spec(depth, 448, 200).unwrap();
            apply_preset(&mut spec, Preset::Cnl5, None).unwrap();
            assert_eq!(insertion_params(&spec).unwrap(), 3_149_824, "depth {depth}");
        }
    }

    #[test]
    fn params_are_insertion_additive() {
        let mut spec = resnet_spec(50, 448, 200).unwrap();
        let baseline = count_params(&spec).unwrap();
        apply_preset(&mut spec, Preset::Cnl5, None).unwrap();
        assert_eq!(count_params(&spec).unwrap(), baseline + insertion_params(&spec).unwrap());
    }

    #[test]
    fn matmul_flops_example() {
        assert_eq!(matmul_flops(2, 3, 4, FlopConvention::MacIs2), 48);
    }

    #[test]
    fn nl_qk_cost_at_28x28() {
        // Single-layer block at 28x28 with a 512-wide embedding.
        let mut spec = resnet_spec(50, 224, 200).unwrap();
        spec.insertions.push(InsertionSpec::Nl { stage: "res4".into(), block: 2, embed: None });
        let ins = spec.insertions[0].clone();
        let flops = insertion_flops(&spec, &ins, (448, 448), FlopConvention::MacIs2).unwrap();
        // res4 at 448 input is 28x28 = 784 positions, embed 1024/2 = 512.
        assert_eq!(flops.qk, 2 * 784 * 784 * 512);
    }

    #[test]
    fn attention_memory_shallow_example() {
        // Single-layer block on a 112x112 layer versus a cross-layer block
        // querying from 7x7.
        let spec = resnet_spec(50, 224, 200).unwrap();
        let nl = InsertionSpec::Nl { stage: "conv1".into(), block: 1, embed: None };
        assert_eq!(attention_memory(&nl, &spec, (224, 224)).unwrap(), 157_351_936);
        let cnl = InsertionSpec::Cnl {
            query_stage: "res5".into(),
            taps: vec![Tap { stage: "conv1".into(), block: 1 }],
            embed: 256,
        };
        assert_eq!(attention_memory(&cnl, &spec, (224, 224)).unwrap(), 614_656);
        let reduction: f64 = 1.0 - 614_656.0 / 157_351_936.0;
        assert!(reduction > 0.99);
        assert!((reduction - 0.9961).abs() < 5e-4);
    }

    #[test]
    fn nl_memory_is_quadratic_in_positions() {
        let spec = resnet_spec(50, 224, 200).unwrap();
        let nl = InsertionSpec::Nl { stage: "res4".into(), block: 2, embed: None };
        let at_224 = attention_memory(&nl, &spec, (224, 224)).unwrap();
        let at_448 = attention_memory(&nl, &spec, (448, 448)).unwrap();
        assert_eq!(at_448, 16 * at_224);
    }

    #[test]
    fn receptive_field_textbook_cases() {
        // Two stacked 3x3 stride-1 convs -> rf 5.
        let mut spec = toy_spec(&[4, 4, 4], 32, 4).unwrap();
        for stage in &mut spec.stages {
            for block in &mut spec_layers(stage) {
                if let LayerOp::Conv { stride, .. } = &mut block.op {
                    *stride = 1;
                }
            }
            stage.spatial_stride = 1;
        }
        let rf = receptive_field(&spec, "stage2.b1.conv").unwrap();
        assert_eq!(rf.rf_size, 5);

        // 3x3 stride-2 then 3x3 stride-1 -> rf 7, jump 2.
        let mut spec2 = toy_spec(&[4, 4, 4], 32, 4).unwrap();
        {
            let stage2 = &mut spec2.stages[1];
            for layer in &mut stage2.blocks[0].layers {
                if let LayerOp::Conv { stride, .. } = &mut layer.op {
                    *stride = 1;
                }
            }
            stage2.spatial_stride = 1;
        }
        let rf2 = receptive_field(&spec2, "stage2.b1.conv").unwrap();
        assert_eq!((rf2.rf_size, rf2.jump), (7, 2));

        assert_eq!(receptive_field(&spec, "input").unwrap().rf_size, 1);
        assert!(receptive_field(&spec, "flux.capacitor").is_err());
    }

    fn spec_layers(stage: &mut crate::backbone::StageSpec) -> Vec<&mut crate::backbone::Layer> {
        stage.blocks.iter_mut().flat_map(|b| b.layers.iter_mut()).collect()
    }

    #[test]
    fn rf_grows_monotonically_with_depth() {
        let spec = resnet_spec(50, 224, 200).unwrap();
        let mut last = 0;
        for name in ["conv1.conv", "res2.b1.conv2", "res3.b1.conv2", "res4.b1.conv2", "res5.b1.conv2"] {
            let rf = receptive_field(&spec, name).unwrap();
            assert!(rf.rf_size > last, "{name}: {} !> {last}", rf.rf_size);
            last = rf.rf_size;
        }
    }

    #[test]
    fn report_includes_memory_comparison() {
        let mut spec = resnet_spec(50, 224, 200).unwrap();
        apply_preset(&mut spec, Preset::Cnl5, None).unwrap();
        let report = build_report(&spec, (224, 224), FlopConvention::MacIs1).unwrap();
        let m = report.memory.as_ref().unwrap();
        assert!(m.cnl_entries < m.nl_entries);
        assert_eq!(report.attention_entries, m.cnl_entries);
        assert!(report.to_csv().starts_with("section,metric,value\n"));
        assert!(report.to_table().contains("params"));
    }
}
