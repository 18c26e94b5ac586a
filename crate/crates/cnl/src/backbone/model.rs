//! Executable toy backbone with attention insertions bound to concrete
//! parameters.
//!
//! Each image runs on its own tape, so read-only inference parallelizes over
//! a batch; parameter updates stay single-writer in the training loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    cnl_forward, nl_forward, AttentionMap, AttnMode, ChannelAffine, CnlParams, CnlVars,
    FeatureMap, NlParams, NlVars, NormMode,
};
use crate::backbone::{ArchSpec, InsertionSpec, LayerOp, SpecKind};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Tape, Tensor, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConvLayer {
    weight: Tensor, // [k*k*cin, cout]
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn init(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let std = (2.0 / fan_in as f64).sqrt();
        ConvLayer {
            weight: Tensor::randn(&[fan_in, out_channels], std, rng).with_requires_grad(true),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    fn geom(&self, height: usize, width: usize) -> ConvGeom {
        ConvGeom {
            height,
            width,
            in_channels: self.in_channels,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ToyStage {
    name: String,
    conv: ConvLayer,
    norm: ChannelAffine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NlInsertion {
    stage_idx: usize,
    params: NlParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CnlInsertion {
    tap_stages: Vec<usize>,
    params: CnlParams,
}

/// A toy backbone with its insertions applied, ready to run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub spec: ArchSpec,
    stages: Vec<ToyStage>,
    nl: Vec<NlInsertion>,
    cnl: Option<CnlInsertion>,
    classifier_weight: Tensor,
    classifier_bias: Tensor,
}

/// One image's forward pass, still attached to its tape.
pub struct ImagePass {
    /// `[1, num_classes]`
    pub logits: Var,
    /// Tape handles aligned with [`Model::params`].
    pub param_vars: Vec<Var>,
    /// Captured attention maps (empty unless capture was requested).
    pub attention: Vec<AttentionMap>,
}

struct Bindings {
    stages: Vec<(Var, Var, Var)>, // conv weight, gamma, beta
    nl: Vec<NlVars>,
    cnl: Option<CnlVars>,
    cls_w: Var,
    cls_b: Var,
}

impl Bindings {
    fn flat(&self) -> Vec<Var> {
        let mut vars = Vec::new();
        for (w, g, b) in &self.stages {
            vars.extend([*w, *g, *b]);
        }
        for nl in &self.nl {
            vars.extend(nl.all());
        }
        if let Some(cnl) = &self.cnl {
            vars.extend(cnl.all());
        }
        vars.extend([self.cls_w, self.cls_b]);
        vars
    }
}

impl Model {
    /// Build parameters for a spec and apply its insertions. The backbone
    /// draws from one seeded stream and the insertions from another, so
    /// models built from the same seed share backbone weights regardless of
    /// preset.
    pub fn from_spec(spec: &ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.kind != SpecKind::Toy {
            return Err(Error::Validation(format!(
                "spec '{}' is analysis-grade and cannot be executed",
                spec.name
            )));
        }
        let mut backbone_rng = ChaCha8Rng::seed_from_u64(seed);
        backbone_rng.set_stream(0);
        let mut insert_rng = ChaCha8Rng::seed_from_u64(seed);
        insert_rng.set_stream(1);

        let mut stages = Vec::new();
        for stage in &spec.stages {
            let conv = stage
                .blocks
                .iter()
                .flat_map(|b| &b.layers)
                .find_map(|l| match &l.op {
                    LayerOp::Conv { in_channels, out_channels, kernel, stride, pad } => {
                        Some(ConvLayer::init(*in_channels, *out_channels, *kernel, *stride, *pad, &mut backbone_rng))
                    }
                    _ => None,
                })
                .ok_or_else(|| Error::Validation(format!("stage {} has no conv layer", stage.name)))?;
            stages.push(ToyStage {
                name: stage.name.clone(),
                conv,
                norm: ChannelAffine::unit_init(stage.out_channels),
            });
        }

        let mut nl = Vec::new();
        let mut cnl = None;
        for ins in &spec.insertions {
            match ins {
                InsertionSpec::Nl { stage, embed, .. } => {
                    let idx = spec.stage_index(stage)?;
                    let channels = spec.stages[idx].out_channels;
                    nl.push(NlInsertion {
                        stage_idx: idx,
                        params: NlParams::init(channels, *embed, &mut insert_rng),
                    });
                }
                InsertionSpec::Cnl { query_stage, taps, embed } => {
                    if cnl.is_some() {
                        return Err(Error::Validation("at most one cross-layer insertion".into()));
                    }
                    let query_idx = spec.stage_index(query_stage)?;
                    if query_idx + 1 != spec.stages.len() {
                        return Err(Error::Validation(
                            "the query must be the final stage of the toy backbone".into(),
                        ));
                    }
                    let tap_stages: Vec<usize> =
                        taps.iter().map(|t| spec.stage_index(&t.stage)).collect::<Result<_>>()?;
                    let resp_channels: Vec<usize> =
                        tap_stages.iter().map(|&i| spec.stages[i].out_channels).collect();
                    let query_channels = spec.stages[query_idx].out_channels;
                    cnl = Some(CnlInsertion {
                        tap_stages,
                        params: CnlParams::init(query_channels, &resp_channels, *embed, &mut insert_rng)?,
                    });
                }
            }
        }

        let c_last = spec.stages.last().expect("validated").out_channels;
        let std = (2.0 / c_last as f64).sqrt();
        Ok(Model {
            spec: spec.clone(),
            stages,
            nl,
            cnl,
            classifier_weight: Tensor::randn(&[c_last, spec.num_classes], std, &mut backbone_rng)
                .with_requires_grad(true),
            classifier_bias: Tensor::zeros(&[spec.num_classes]).with_requires_grad(true),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Number of attention branches whose maps a captured forward returns.
    pub fn attention_branches(&self) -> usize {
        self.nl.len() + self.cnl.as_ref().map_or(0, |c| c.tap_stages.len())
    }

    /// Flat parameter list in a fixed order (stages, single-layer blocks,
    /// cross-layer block, classifier).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut params: Vec<&Tensor> = Vec::new();
        for s in &self.stages {
            params.extend([&s.conv.weight, &s.norm.gamma, &s.norm.beta]);
        }
        for ins in &self.nl {
            let p = &ins.params;
            params.extend([
                &p.theta.weight,
                &p.phi.weight,
                &p.g.weight,
                &p.z.weight,
                &p.out_norm.gamma,
                &p.out_norm.beta,
            ]);
        }
        if let Some(c) = &self.cnl {
            params.push(&c.params.theta.weight);
            for b in &c.params.branches {
                params.extend([&b.phi.weight, &b.g.weight]);
            }
            params.extend([&c.params.z.weight, &c.params.out_norm.gamma, &c.params.out_norm.beta]);
        }
        params.extend([&self.classifier_weight, &self.classifier_bias]);
        params
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut params: Vec<&mut Tensor> = Vec::new();
        for s in &mut self.stages {
            params.extend([&mut s.conv.weight, &mut s.norm.gamma, &mut s.norm.beta]);
        }
        for ins in &mut self.nl {
            let p = &mut ins.params;
            params.extend([
                &mut p.theta.weight,
                &mut p.phi.weight,
                &mut p.g.weight,
                &mut p.z.weight,
                &mut p.out_norm.gamma,
                &mut p.out_norm.beta,
            ]);
        }
        if let Some(c) = &mut self.cnl {
            params.push(&mut c.params.theta.weight);
            for b in &mut c.params.branches {
                params.extend([&mut b.phi.weight, &mut b.g.weight]);
            }
            params.extend([
                &mut c.params.z.weight,
                &mut c.params.out_norm.gamma,
                &mut c.params.out_norm.beta,
            ]);
        }
        params.extend([&mut self.classifier_weight, &mut self.classifier_bias]);
        params
    }

    pub fn param_element_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Normalization layers in execution order: each stage's norm, then any
    /// single-layer block norms at that stage, then the cross-layer norm.
    /// Matches the order of batch-mode norm nodes on a forward tape.
    fn norms_exec_order_mut(&mut self) -> Vec<&mut ChannelAffine> {
        // Split borrows: collect raw pointers per stage index first.
        let mut order: Vec<*mut ChannelAffine> = Vec::new();
        for (idx, stage) in self.stages.iter_mut().enumerate() {
            order.push(&mut stage.norm as *mut _);
            for ins in self.nl.iter_mut().filter(|i| i.stage_idx == idx) {
                order.push(&mut ins.params.out_norm as *mut _);
            }
        }
        if let Some(c) = &mut self.cnl {
            order.push(&mut c.params.out_norm as *mut _);
        }
        // SAFETY: all pointers reference distinct fields of self and live as
        // long as the returned borrows.
        order.into_iter().map(|p| unsafe { &mut *p }).collect()
    }

    /// Fold one forward pass's batch statistics (norm layers in execution
    /// order) into the running estimates.
    pub fn apply_norm_stats(&mut self, stats: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
        let mut norms = self.norms_exec_order_mut();
        if stats.len() != norms.len() {
            return Err(Error::Validation(format!(
                "{} batch-norm records for {} norm layers",
                stats.len(),
                norms.len()
            )));
        }
        for (norm, (mean, var)) in norms.iter_mut().zip(stats) {
            norm.update_running(mean, var);
        }
        Ok(())
    }

    /// Fold the batch statistics recorded on a training-mode forward tape
    /// into the running estimates. The tape must hold exactly one forward
    /// pass of this model, whose norm nodes then line up with the model's
    /// norm layers in execution order.
    pub fn update_running_stats(&mut self, tape: &Tape) -> Result<()> {
        let stats: Vec<(Vec<f64>, Vec<f64>)> = tape
            .batch_norm_stats_in_order()
            .into_iter()
            .map(|(m, v)| (m.to_vec(), v.to_vec()))
            .collect();
        self.apply_norm_stats(&stats)
    }

    fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings {
            stages: self
                .stages
                .iter()
                .map(|s| (tape.leaf(&s.conv.weight), tape.leaf(&s.norm.gamma), tape.leaf(&s.norm.beta)))
                .collect(),
            nl: self.nl.iter().map(|i| i.params.bind(tape)).collect(),
            cnl: self.cnl.as_ref().map(|c| c.params.bind(tape)),
            cls_w: tape.leaf(&self.classifier_weight),
            cls_b: tape.leaf(&self.classifier_bias),
        }
    }

    /// Run one image (`[H*W, Cin]`) through the model on the given tape.
    pub fn run_image(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        norm_mode: NormMode,
        capture: bool,
    ) -> Result<ImagePass> {
        let (in_h, in_w) = self.spec.input_size;
        if image.shape() != [in_h * in_w, self.spec.input_channels] {
            return Err(Error::ShapeMismatch {
                op: "Model::run_image",
                detail: format!(
                    "image {:?} vs expected [{}, {}]",
                    image.shape(),
                    in_h * in_w,
                    self.spec.input_channels
                ),
            });
        }
        let bindings = self.bind(tape);
        let mode = AttnMode::DotMean;
        let mut attention = Vec::new();
        let mut taps: Vec<FeatureMap> = Vec::new();
        let (mut h, mut w) = (in_h, in_w);
        let mut x = FeatureMap::from_tensor(tape, h, w, image)?;

        for (idx, stage) in self.stages.iter().enumerate() {
            let geom = stage.conv.geom(h, w);
            let patches = tape.im2col(x.values(), geom)?;
            let (w_var, gamma, beta) = bindings.stages[idx];
            let feat = tape.matmul(patches, w_var)?;
            let stats = match norm_mode {
                NormMode::PerSample => crate::tensor::NormStats::Batch { eps: stage.norm.eps },
                NormMode::Running => crate::tensor::NormStats::Fixed {
                    mean: stage.norm.running_mean.clone(),
                    var: stage.norm.running_var.clone(),
                    eps: stage.norm.eps,
                },
            };
            let normed = tape.channel_norm(feat, gamma, beta, stats)?;
            let activated = tape.relu(normed);
            h = geom.out_height();
            w = geom.out_width();
            x = FeatureMap::from_var(tape, h, w, activated)?;

            for (ins, vars) in self.nl.iter().zip(&bindings.nl) {
                if ins.stage_idx == idx {
                    let (out, mut map) = nl_forward(tape, &x, &ins.params, vars, mode, norm_mode)?;
                    map.query_id = stage.name.clone();
                    map.response_id = stage.name.clone();
                    x = out;
                    if capture {
                        attention.push(map);
                    }
                }
            }
            if let Some(c) = &self.cnl {
                if c.tap_stages.contains(&idx) {
                    taps.push(x);
                }
            }
        }

        if let Some(c) = &self.cnl {
            let vars = bindings.cnl.as_ref().expect("bound with model");
            let (out, maps) = cnl_forward(tape, &x, &taps, &c.params, vars, mode, norm_mode)?;
            x = out;
            if capture {
                let query_name = self.stages.last().expect("non-empty").name.clone();
                for (mut map, &tap_idx) in maps.into_iter().zip(&c.tap_stages) {
                    map.query_id = query_name.clone();
                    map.response_id = self.stages[tap_idx].name.clone();
                    attention.push(map);
                }
            }
        }

        let pooled = tape.mean_rows(x.values())?;
        let scores = tape.matmul(pooled, bindings.cls_w)?;
        let logits = tape.add_row(scores, bindings.cls_b)?;
        Ok(ImagePass { logits, param_vars: bindings.flat(), attention })
    }
}

/// Batch inference with per-sample normalization statistics. Deterministic:
/// images map to logits rows in order, whatever the thread count.
pub fn forward(model: &Model, batch: &[Tensor], capture: bool) -> Result<(Tensor, Vec<Vec<AttentionMap>>)> {
    let per_image: Vec<(Vec<f64>, Vec<AttentionMap>)> = batch
        .par_iter()
        .map(|image| {
            let mut tape = Tape::new();
            let pass = model.run_image(&mut tape, image, NormMode::Running, capture)?;
            Ok((tape.value(pass.logits).to_vec(), pass.attention))
        })
        .collect::<Result<_>>()?;
    let classes = model.num_classes();
    let mut data = Vec::with_capacity(batch.len() * classes);
    let mut maps = Vec::with_capacity(batch.len());
    for (row, attn) in per_image {
        data.extend(row);
        maps.push(attn);
    }
    Ok((Tensor::new(vec![batch.len(), classes], data)?, maps))
}
