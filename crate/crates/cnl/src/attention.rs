//! Non-local attention blocks: the single-layer block, its two-variable
//! generalization, and the cross-layer block that attends from one query
//! layer over several response layers.
//!
//! A feature map is a `[H*W, C]` matrix whose rows are spatial positions.
//! Query/key/value projections are per-position linear maps (1x1
//! convolutions); the attention map holds the pairwise affinities between
//! query and response positions. The residual branch ends in a zero-
//! initialized per-channel affine normalization, so a freshly built block is
//! exactly the identity.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export;
use crate::tensor::{NormStats, Tape, Tensor, Var};

/// How raw pairwise dot products are normalized into attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnMode {
    /// Divide by the number of response positions (default).
    DotMean,
    /// Row-wise softmax over response positions.
    Softmax,
}

/// Statistics source for output normalization. The toy backbone trains and
/// evaluates with per-sample statistics (its norm batches hold one image, so
/// running averages would mis-scale features at evaluation); the running-
/// statistics mode remains available for frozen-statistics use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics computed from the rows of each call's input.
    PerSample,
    /// Stored running statistics.
    Running,
}

/// A `[H*W, C]` view of a convolutional activation living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Var,
}

impl FeatureMap {
    /// Wrap a tape value of shape `[height*width, channels]`.
    pub fn from_var(tape: &Tape, height: usize, width: usize, values: Var) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("feature map extents must be >= 1".into()));
        }
        let shape = tape.shape(values);
        match shape {
            [rows, channels] if *rows == height * width && *channels >= 1 => {
                Ok(FeatureMap { height, width, channels: *channels, values })
            }
            other => Err(Error::ShapeMismatch {
                op: "FeatureMap::from_var",
                detail: format!("{other:?} does not match {height}x{width} positions"),
            }),
        }
    }

    /// Lift a `[height*width, channels]` tensor onto the tape.
    pub fn from_tensor(tape: &mut Tape, height: usize, width: usize, t: &Tensor) -> Result<Self> {
        let values = tape.leaf(t);
        FeatureMap::from_var(tape, height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> Var {
        self.values
    }

    /// Snapshot the current values as a plain tensor.
    pub fn to_tensor(&self, tape: &Tape) -> Tensor {
        tape.tensor(self.values)
    }
}

/// Pairwise affinities between query and response positions: `[Nq, Nr]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionMap {
    pub matrix: Tensor,
    pub query_id: String,
    pub response_id: String,
}

impl AttentionMap {
    /// `(Nq, Nr)`.
    pub fn dims(&self) -> (usize, usize) {
        let s = self.matrix.shape();
        (s[0], s[1])
    }

    pub fn to_csv(&self) -> String {
        let (nq, nr) = self.dims();
        export::matrix_csv(nq, nr, self.matrix.data())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Whole map as a min-max normalized 8-bit PGM, Nr wide and Nq tall.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (nq, nr) = self.dims();
        export::pgm_bytes(nr, nq, &export::normalize_to_u8(self.matrix.data()))
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }

    /// One query position's attention over response positions, reshaped to
    /// the response layer's spatial extent and rendered as a PGM heat map.
    pub fn query_row_pgm(&self, query_pos: usize, resp_h: usize, resp_w: usize) -> Result<Vec<u8>> {
        let (nq, nr) = self.dims();
        if query_pos >= nq {
            return Err(Error::InvalidArgument(format!(
                "query position {query_pos} out of range for {nq} positions"
            )));
        }
        if resp_h * resp_w != nr {
            return Err(Error::ShapeMismatch {
                op: "query_row_pgm",
                detail: format!("{resp_h}x{resp_w} != {nr} response positions"),
            });
        }
        let row = &self.matrix.data()[query_pos * nr..(query_pos + 1) * nr];
        Ok(export::pgm_bytes(resp_w, resp_h, &export::normalize_to_u8(row)))
    }
}

/// A per-position linear channel map (1x1 convolution), `[Cin, Cout]`, no bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub weight: Tensor,
}

impl Projection {
    pub fn init(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / c_in as f64).sqrt();
        Projection { weight: Tensor::randn(&[c_in, c_out], std, rng).with_requires_grad(true) }
    }

    pub fn identity(c: usize) -> Self {
        let mut w = Tensor::zeros(&[c, c]);
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0;
        }
        Projection { weight: w.with_requires_grad(true) }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Per-channel scale/shift with running statistics for evaluation mode.
///
/// Attention blocks zero-initialize `gamma` and `beta` so the residual branch
/// vanishes at the start of training; backbone layers initialize `gamma` to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelAffine {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl ChannelAffine {
    fn with_gamma(channels: usize, gamma_value: f64) -> Self {
        ChannelAffine {
            gamma: Tensor::full(&[channels], gamma_value).with_requires_grad(true),
            beta: Tensor::zeros(&[channels]).with_requires_grad(true),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// gamma = beta = 0: the branch through this normalization vanishes.
    pub fn zero_init(channels: usize) -> Self {
        Self::with_gamma(channels, 0.0)
    }

    /// gamma = 1, beta = 0: standard backbone normalization init.
    pub fn unit_init(channels: usize) -> Self {
        Self::with_gamma(channels, 1.0)
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Fold one batch's statistics into the running estimates.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        assert_eq!(mean.len(), self.running_mean.len());
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    fn stats_for(&self, mode: NormMode) -> NormStats {
        match mode {
            NormMode::PerSample => NormStats::Batch { eps: self.eps },
            NormMode::Running => NormStats::Fixed {
                mean: self.running_mean.clone(),
                var: self.running_var.clone(),
                eps: self.eps,
            },
        }
    }
}

/// Parameters of a single-layer non-local block over `C` channels.
///
/// Also serves the two-variable form: `theta` reads the query's `Cq`
/// channels, `phi`/`g` read the response's `Cr` channels, and `z` maps the
/// embedding back to `Cq`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlParams {
    pub theta: Projection,
    pub phi: Projection,
    pub g: Projection,
    pub z: Projection,
    pub out_norm: ChannelAffine,
}

impl NlParams {
    /// Single-layer block: query and response widths are both `channels`.
    /// The embedding width defaults to `channels / 2`.
    pub fn init(channels: usize, embed: Option<usize>, rng: &mut impl Rng) -> Self {
        let ce = embed.unwrap_or_else(|| (channels / 2).max(1));
        Self::init_bi(channels, channels, ce, rng)
    }

    /// Two-variable block with distinct query/response widths.
    pub fn init_bi(c_query: usize, c_resp: usize, embed: usize, rng: &mut impl Rng) -> Self {
        NlParams {
            theta: Projection::init(c_query, embed, rng),
            phi: Projection::init(c_resp, embed, rng),
            g: Projection::init(c_resp, embed, rng),
            z: Projection::init(embed, c_query, rng),
            out_norm: ChannelAffine::zero_init(c_query),
        }
    }

    pub fn embed_channels(&self) -> usize {
        self.theta.out_channels()
    }

    pub fn bind(&self, tape: &mut Tape) -> NlVars {
        NlVars {
            theta: tape.leaf(&self.theta.weight),
            phi: tape.leaf(&self.phi.weight),
            g: tape.leaf(&self.g.weight),
            z: tape.leaf(&self.z.weight),
            gamma: tape.leaf(&self.out_norm.gamma),
            beta: tape.leaf(&self.out_norm.beta),
        }
    }
}

/// Tape handles for one bound [`NlParams`].
#[derive(Debug, Clone, Copy)]
pub struct NlVars {
    pub theta: Var,
    pub phi: Var,
    pub g: Var,
    pub z: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl NlVars {
    pub fn all(&self) -> Vec<Var> {
        vec![self.theta, self.phi, self.g, self.z, self.gamma, self.beta]
    }
}

/// One response branch of a cross-layer block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnlBranch {
    pub phi: Projection,
    pub g: Projection,
}

/// Parameters of a cross-layer block: one query projection, one `(phi, g)`
/// pair per response layer, and a single `z` shared across branches and
/// applied once to the summed aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnlParams {
    pub theta: Projection,
    pub branches: Vec<CnlBranch>,
    pub z: Projection,
    pub out_norm: ChannelAffine,
}

impl CnlParams {
    pub fn init(
        c_query: usize,
        response_channels: &[usize],
        embed: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if response_channels.is_empty() {
            return Err(Error::InvalidArgument("a cross-layer block needs >= 1 response".into()));
        }
        Ok(CnlParams {
            theta: Projection::init(c_query, embed, rng),
            branches: response_channels
                .iter()
                .map(|&cr| CnlBranch {
                    phi: Projection::init(cr, embed, rng),
                    g: Projection::init(cr, embed, rng),
                })
                .collect(),
            z: Projection::init(embed, c_query, rng),
            out_norm: ChannelAffine::zero_init(c_query),
        })
    }

    /// Reinterpret single-layer parameters as a one-branch cross-layer block.
    pub fn from_nl(p: &NlParams) -> Self {
        CnlParams {
            theta: p.theta.clone(),
            branches: vec![CnlBranch { phi: p.phi.clone(), g: p.g.clone() }],
            z: p.z.clone(),
            out_norm: p.out_norm.clone(),
        }
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn embed_channels(&self) -> usize {
        self.theta.out_channels()
    }

    pub fn bind(&self, tape: &mut Tape) -> CnlVars {
        CnlVars {
            theta: tape.leaf(&self.theta.weight),
            branches: self
                .branches
                .iter()
                .map(|b| (tape.leaf(&b.phi.weight), tape.leaf(&b.g.weight)))
                .collect(),
            z: tape.leaf(&self.z.weight),
            gamma: tape.leaf(&self.out_norm.gamma),
            beta: tape.leaf(&self.out_norm.beta),
        }
    }
}

/// Tape handles for one bound [`CnlParams`].
#[derive(Debug, Clone)]
pub struct CnlVars {
    pub theta: Var,
    pub branches: Vec<(Var, Var)>,
    pub z: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl CnlVars {
    pub fn all(&self) -> Vec<Var> {
        let mut vars = vec![self.theta];
        for &(phi, g) in &self.branches {
            vars.push(phi);
            vars.push(g);
        }
        vars.push(self.z);
        vars.push(self.gamma);
        vars.push(self.beta);
        vars
    }
}

/// Map every position of `x` through the same linear channel map.
pub fn project_1x1(tape: &mut Tape, x: &FeatureMap, weight: Var) -> Result<FeatureMap> {
    let w_shape = tape.shape(weight);
    if w_shape.len() != 2 || w_shape[0] != x.channels() {
        return Err(Error::ShapeMismatch {
            op: "project_1x1",
            detail: format!("weight {w_shape:?} does not read {} channels", x.channels()),
        });
    }
    let out = tape.matmul(x.values, weight)?;
    FeatureMap::from_var(tape, x.height, x.width, out)
}

/// Pairwise affinities between embedded query rows `[Nq, Ce]` and response
/// rows `[Nr, Ce]`, normalized per [`AttnMode`]. Returns the tape value and
/// a plain snapshot for inspection.
pub fn pairwise_dot(tape: &mut Tape, q: Var, k: Var, mode: AttnMode) -> Result<(Var, AttentionMap)> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(k).to_vec();
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::ShapeMismatch {
            op: "pairwise_dot",
            detail: format!("query {qs:?} vs key {ks:?}: embedding widths differ"),
        });
    }
    let n_resp = ks[0];
    let k_t = tape.transpose(k)?;
    let raw = tape.matmul(q, k_t)?;
    let attn = match mode {
        AttnMode::DotMean => tape.scale(raw, 1.0 / n_resp as f64),
        AttnMode::Softmax => tape.row_softmax(raw)?,
    };
    let map = AttentionMap {
        matrix: tape.tensor(attn),
        query_id: "q".into(),
        response_id: "r".into(),
    };
    Ok((attn, map))
}

/// Shared tail of every block: aggregate -> z -> out-norm -> residual add.
fn finish_block(
    tape: &mut Tape,
    query: &FeatureMap,
    aggregated: Var,
    z: Var,
    gamma: Var,
    beta: Var,
    norm: &ChannelAffine,
    mode: NormMode,
) -> Result<FeatureMap> {
    if norm.channels() != query.channels() {
        return Err(Error::ShapeMismatch {
            op: "out_norm",
            detail: format!("{} channels vs query {}", norm.channels(), query.channels()),
        });
    }
    let zed = tape.matmul(aggregated, z)?;
    if tape.shape(zed)[1] != query.channels() {
        return Err(Error::ShapeMismatch {
            op: "z projection",
            detail: format!("maps to {} channels, query has {}", tape.shape(zed)[1], query.channels()),
        });
    }
    let normed = tape.channel_norm(zed, gamma, beta, norm.stats_for(mode))?;
    let out = tape.add(query.values, normed)?;
    FeatureMap::from_var(tape, query.height, query.width, out)
}

/// Single-layer non-local block: the layer attends over itself.
///
/// `out = x + out_norm(z(f(theta(x), phi(x)) . g(x)))`
pub fn nl_forward(
    tape: &mut Tape,
    x: &FeatureMap,
    params: &NlParams,
    vars: &NlVars,
    attn_mode: AttnMode,
    norm_mode: NormMode,
) -> Result<(FeatureMap, AttentionMap)> {
    nl_bi_forward(tape, x, x, params, vars, attn_mode, norm_mode)
}

/// Two-variable form: the query layer attends over one response layer. The
/// residual term is the query input, and the output keeps its shape.
pub fn nl_bi_forward(
    tape: &mut Tape,
    x_query: &FeatureMap,
    x_resp: &FeatureMap,
    params: &NlParams,
    vars: &NlVars,
    attn_mode: AttnMode,
    norm_mode: NormMode,
) -> Result<(FeatureMap, AttentionMap)> {
    let q = project_1x1(tape, x_query, vars.theta)?;
    let k = project_1x1(tape, x_resp, vars.phi)?;
    let v = project_1x1(tape, x_resp, vars.g)?;
    if k.channels() != q.channels() || v.channels() != q.channels() {
        return Err(Error::ShapeMismatch {
            op: "nl_bi_forward",
            detail: "theta/phi/g must project into one embedding width".into(),
        });
    }
    let (attn, map) = pairwise_dot(tape, q.values(), k.values(), attn_mode)?;
    let aggregated = tape.matmul(attn, v.values())?;
    let out = finish_block(
        tape,
        x_query,
        aggregated,
        vars.z,
        vars.gamma,
        vars.beta,
        &params.out_norm,
        norm_mode,
    )?;
    Ok((out, map))
}

/// Cross-layer block: one query layer attends over `n >= 1` response layers;
/// per-branch aggregations are summed, then projected and normalized once.
///
/// `out = xq + out_norm(z(sum_i f(theta(xq), phi_i(x_ri)) . g_i(x_ri)))`
pub fn cnl_forward(
    tape: &mut Tape,
    x_query: &FeatureMap,
    responses: &[FeatureMap],
    params: &CnlParams,
    vars: &CnlVars,
    attn_mode: AttnMode,
    norm_mode: NormMode,
) -> Result<(FeatureMap, Vec<AttentionMap>)> {
    if responses.is_empty() {
        return Err(Error::InvalidArgument("cnl_forward needs >= 1 response layer".into()));
    }
    if responses.len() != vars.branches.len() || responses.len() != params.branches.len() {
        return Err(Error::ShapeMismatch {
            op: "cnl_forward",
            detail: format!(
                "{} response layers vs {} parameter branches",
                responses.len(),
                params.branches.len()
            ),
        });
    }
    let q = project_1x1(tape, x_query, vars.theta)?;
    let mut maps = Vec::with_capacity(responses.len());
    let mut total: Option<Var> = None;
    for (i, (resp, &(phi, g))) in responses.iter().zip(&vars.branches).enumerate() {
        let k = project_1x1(tape, resp, phi)?;
        let v = project_1x1(tape, resp, g)?;
        if k.channels() != q.channels() || v.channels() != q.channels() {
            return Err(Error::ShapeMismatch {
                op: "cnl_forward",
                detail: format!("branch {i} does not project into the shared embedding width"),
            });
        }
        let (attn, mut map) = pairwise_dot(tape, q.values(), k.values(), attn_mode)?;
        map.response_id = format!("r{}", i + 1);
        maps.push(map);
        let aggregated = tape.matmul(attn, v.values())?;
        total = Some(match total {
            None => aggregated,
            Some(acc) => tape.add(acc, aggregated)?,
        });
    }
    let out = finish_block(
        tape,
        x_query,
        total.expect("at least one branch"),
        vars.z,
        vars.gamma,
        vars.beta,
        &params.out_norm,
        norm_mode,
    )?;
    Ok((out, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_map(tape: &mut Tape, h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let t = Tensor::randn(&[h * w, c], 1.0, rng).with_requires_grad(true);
        FeatureMap::from_tensor(tape, h, w, &t).unwrap()
    }

    #[test]
    fn project_identity_is_noop() {
        let mut tape = Tape::new();
        let mut r = rng(0);
        let x = random_map(&mut tape, 2, 3, 4, &mut r);
        let w = tape.leaf(&Projection::identity(4).weight);
        let y = project_1x1(&mut tape, &x, w).unwrap();
        assert_eq!(tape.value(x.values()), tape.value(y.values()));
    }

    #[test]
    fn project_doubles_second_channel() {
        // Per-position oracle: each row mapped independently by the same matrix.
        let mut tape = Tape::new();
        let x_t = Tensor::from_rows(&[
            vec![1.0, 10.0],
            vec![2.0, 20.0],
            vec![3.0, 30.0],
            vec![4.0, 40.0],
        ])
        .unwrap();
        let x = FeatureMap::from_tensor(&mut tape, 2, 2, &x_t).unwrap();
        let w = tape.leaf(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let y = project_1x1(&mut tape, &x, w).unwrap();
        let expected: Vec<f64> = x_t
            .data()
            .chunks(2)
            .flat_map(|row| vec![row[0], 2.0 * row[1]])
            .collect();
        assert_eq!(tape.value(y.values()), expected.as_slice());
    }

    #[test]
    fn project_single_output_sums_channels() {
        let mut tape = Tape::new();
        let x_t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let x = FeatureMap::from_tensor(&mut tape, 1, 2, &x_t).unwrap();
        let w = tape.leaf(&Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let y = project_1x1(&mut tape, &x, w).unwrap();
        assert_eq!(tape.value(y.values()), &[3.0, 7.0]);
    }

    #[test]
    fn project_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let mut r = rng(0);
        let x = random_map(&mut tape, 2, 2, 3, &mut r);
        let w = tape.leaf(&Tensor::zeros(&[4, 2]));
        assert!(project_1x1(&mut tape, &x, w).is_err());
    }

    #[test]
    fn pairwise_dot_mean_frozen_example() {
        // Naive loop oracle, then divide by Nr = 3.
        let mut tape = Tape::new();
        let q = tape.leaf(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let k = tape.leaf(
            &Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
        );
        let (_, map) = pairwise_dot(&mut tape, q, k, AttnMode::DotMean).unwrap();
        let expected =
            [1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0, 4.0 / 3.0, 7.0 / 3.0];
        for (a, e) in map.matrix.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn pairwise_dot_mean_identity_rows() {
        let mut tape = Tape::new();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let q = tape.leaf(&eye);
        let k = tape.leaf(&eye);
        let (_, map) = pairwise_dot(&mut tape, q, k, AttnMode::DotMean).unwrap();
        assert_eq!(map.matrix.data(), &[0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn pairwise_softmax_rows_normalized() {
        let mut tape = Tape::new();
        let mut r = rng(3);
        let q = tape.leaf(&Tensor::randn(&[4, 3], 1.0, &mut r));
        let k = tape.leaf(&Tensor::randn(&[5, 3], 1.0, &mut r));
        let (_, map) = pairwise_dot(&mut tape, q, k, AttnMode::Softmax).unwrap();
        assert_eq!(map.dims(), (4, 5));
        for row in map.matrix.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nl_zero_init_is_identity() {
        let mut r = rng(7);
        let params = NlParams::init(4, None, &mut r);
        let mut tape = Tape::new();
        let x = random_map(&mut tape, 3, 2, 4, &mut r);
        let vars = params.bind(&mut tape);
        for norm_mode in [NormMode::PerSample, NormMode::Running] {
            let (out, _) =
                nl_forward(&mut tape, &x, &params, &vars, AttnMode::DotMean, norm_mode).unwrap();
            assert_eq!(tape.value(out.values()), tape.value(x.values()));
        }
    }

    #[test]
    fn nl_single_position_closed_form() {
        // 1x1 spatial input, C=2, Ce=1, eval-mode normalization with unit
        // running stats and gamma=1. Worked by hand:
        //   theta(x) = 1, phi(x) = 2, A = [[2]] (dot-mean over 1 position),
        //   g(x) = 4, z(2*4) = [2.4, -1.6], out = x + z / sqrt(1 + eps).
        let mut params = NlParams {
            theta: Projection { weight: Tensor::from_rows(&[vec![0.5], vec![0.25]]).unwrap() },
            phi: Projection { weight: Tensor::from_rows(&[vec![1.0], vec![0.5]]).unwrap() },
            g: Projection { weight: Tensor::from_rows(&[vec![2.0], vec![1.0]]).unwrap() },
            z: Projection { weight: Tensor::from_rows(&[vec![0.3, -0.2]]).unwrap() },
            out_norm: ChannelAffine::zero_init(2),
        };
        params.out_norm.gamma = Tensor::full(&[2], 1.0);
        let mut tape = Tape::new();
        let x = FeatureMap::from_tensor(
            &mut tape,
            1,
            1,
            &Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(),
        )
        .unwrap();
        let vars = params.bind(&mut tape);
        let (out, map) =
            nl_forward(&mut tape, &x, &params, &vars, AttnMode::DotMean, NormMode::Running).unwrap();
        assert_eq!(map.dims(), (1, 1));
        assert!((map.matrix.data()[0] - 2.0).abs() < 1e-15);
        let scale = 1.0 / (1.0 + params.out_norm.eps).sqrt();
        let expected = [1.0 + 2.4 * scale, 2.0 - 1.6 * scale];
        for (a, e) in tape.value(out.values()).iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn nl_zero_input_gives_zero_output() {
        let mut r = rng(9);
        let mut params = NlParams::init(3, None, &mut r);
        params.out_norm.gamma = Tensor::full(&[3], 1.0).with_requires_grad(true);
        let mut tape = Tape::new();
        let x = FeatureMap::from_tensor(&mut tape, 2, 2, &Tensor::zeros(&[4, 3])).unwrap();
        let vars = params.bind(&mut tape);
        for norm_mode in [NormMode::PerSample, NormMode::Running] {
            let (out, _) =
                nl_forward(&mut tape, &x, &params, &vars, AttnMode::DotMean, norm_mode).unwrap();
            assert!(tape.value(out.values()).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bi_form_with_equal_inputs_matches_nl() {
        let mut r = rng(11);
        let mut params = NlParams::init(4, None, &mut r);
        // Activate the branch so the check is not vacuously 0 == 0.
        params.out_norm.gamma = Tensor::randn(&[4], 1.0, &mut r).with_requires_grad(true);
        params.out_norm.beta = Tensor::randn(&[4], 1.0, &mut r).with_requires_grad(true);
        for mode in [AttnMode::DotMean, AttnMode::Softmax] {
            let mut tape = Tape::new();
            let x = random_map(&mut tape, 3, 3, 4, &mut r);
            let vars = params.bind(&mut tape);
            let (out_nl, _) =
                nl_forward(&mut tape, &x, &params, &vars, mode, NormMode::PerSample).unwrap();
            let (out_bi, _) =
                nl_bi_forward(&mut tape, &x, &x, &params, &vars, mode, NormMode::PerSample).unwrap();
            assert_eq!(tape.value(out_nl.values()), tape.value(out_bi.values()));
        }
    }

    #[test]
    fn bi_form_zero_response_returns_query() {
        let mut r = rng(13);
        let mut params = NlParams::init_bi(4, 3, 2, &mut r);
        params.out_norm.gamma = Tensor::full(&[4], 1.0).with_requires_grad(true);
        let mut tape = Tape::new();
        let xq = random_map(&mut tape, 2, 2, 4, &mut r);
        let xr = FeatureMap::from_tensor(&mut tape, 3, 3, &Tensor::zeros(&[9, 3])).unwrap();
        let vars = params.bind(&mut tape);
        let (out, map) =
            nl_bi_forward(&mut tape, &xq, &xr, &params, &vars, AttnMode::DotMean, NormMode::Running)
                .unwrap();
        assert_eq!(map.dims(), (4, 9));
        assert_eq!(tape.value(out.values()), tape.value(xq.values()));
    }

    #[test]
    fn cnl_single_branch_matches_nl() {
        let mut r = rng(17);
        let mut nl = NlParams::init(4, None, &mut r);
        nl.out_norm.gamma = Tensor::randn(&[4], 0.5, &mut r).with_requires_grad(true);
        nl.out_norm.beta = Tensor::randn(&[4], 0.5, &mut r).with_requires_grad(true);
        let cnl = CnlParams::from_nl(&nl);
        for mode in [AttnMode::DotMean, AttnMode::Softmax] {
            let mut tape = Tape::new();
            let x = random_map(&mut tape, 3, 3, 4, &mut r);
            let nl_vars = nl.bind(&mut tape);
            let cnl_vars = cnl.bind(&mut tape);
            let (a, _) = nl_forward(&mut tape, &x, &nl, &nl_vars, mode, NormMode::PerSample).unwrap();
            let (b, maps) =
                cnl_forward(&mut tape, &x, &[x], &cnl, &cnl_vars, mode, NormMode::PerSample).unwrap();
            assert_eq!(maps.len(), 1);
            let (av, bv) = (tape.value(a.values()), tape.value(b.values()));
            for (x, y) in av.iter().zip(bv) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn cnl_zero_init_is_identity() {
        let mut r = rng(19);
        let params = CnlParams::init(4, &[3, 5], 2, &mut r).unwrap();
        let mut tape = Tape::new();
        let xq = random_map(&mut tape, 2, 3, 4, &mut r);
        let r1 = random_map(&mut tape, 4, 4, 3, &mut r);
        let r2 = random_map(&mut tape, 2, 2, 5, &mut r);
        let vars = params.bind(&mut tape);
        let (out, maps) =
            cnl_forward(&mut tape, &xq, &[r1, r2], &params, &vars, AttnMode::DotMean, NormMode::PerSample)
                .unwrap();
        assert_eq!(tape.value(out.values()), tape.value(xq.values()));
        // One attention map per response, each [Nq, Nri].
        assert_eq!(maps[0].dims(), (6, 16));
        assert_eq!(maps[1].dims(), (6, 4));
    }

    #[test]
    fn cnl_zero_second_response_equals_single_branch() {
        // The aggregation is a sum over branches; an all-zero response
        // contributes an all-zero term.
        let mut r = rng(23);
        let mut params = CnlParams::init(4, &[3, 3], 2, &mut r).unwrap();
        params.out_norm.gamma = Tensor::randn(&[4], 0.5, &mut r).with_requires_grad(true);
        let single = CnlParams {
            theta: params.theta.clone(),
            branches: vec![params.branches[0].clone()],
            z: params.z.clone(),
            out_norm: params.out_norm.clone(),
        };
        let mut tape = Tape::new();
        let xq = random_map(&mut tape, 2, 2, 4, &mut r);
        let r1 = random_map(&mut tape, 3, 3, 3, &mut r);
        let r2 = FeatureMap::from_tensor(&mut tape, 2, 3, &Tensor::zeros(&[6, 3])).unwrap();
        let two_vars = params.bind(&mut tape);
        let one_vars = single.bind(&mut tape);
        let (two, _) =
            cnl_forward(&mut tape, &xq, &[r1, r2], &params, &two_vars, AttnMode::DotMean, NormMode::PerSample)
                .unwrap();
        let (one, _) =
            cnl_forward(&mut tape, &xq, &[r1], &single, &one_vars, AttnMode::DotMean, NormMode::PerSample)
                .unwrap();
        for (a, b) in tape.value(two.values()).iter().zip(tape.value(one.values())) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cnl_rejects_branch_count_mismatch() {
        let mut r = rng(29);
        let params = CnlParams::init(4, &[3], 2, &mut r).unwrap();
        let mut tape = Tape::new();
        let xq = random_map(&mut tape, 2, 2, 4, &mut r);
        let r1 = random_map(&mut tape, 2, 2, 3, &mut r);
        let r2 = random_map(&mut tape, 2, 2, 3, &mut r);
        let vars = params.bind(&mut tape);
        assert!(cnl_forward(
            &mut tape,
            &xq,
            &[r1, r2],
            &params,
            &vars,
            AttnMode::DotMean,
            NormMode::PerSample
        )
        .is_err());
    }

    #[test]
    fn permuting_response_rows_leaves_output_unchanged() {
        let mut r = rng(31);
        let mut params = NlParams::init_bi(3, 4, 2, &mut r);
        params.out_norm.gamma = Tensor::randn(&[3], 1.0, &mut r).with_requires_grad(true);
        params.out_norm.beta = Tensor::randn(&[3], 1.0, &mut r).with_requires_grad(true);

        let xq_t = Tensor::randn(&[4, 3], 1.0, &mut r);
        let xr_t = Tensor::randn(&[6, 4], 1.0, &mut r);
        // Reverse-order permutation of response rows.
        let permuted: Vec<f64> =
            xr_t.data().chunks(4).rev().flat_map(|row| row.to_vec()).collect();
        let xr_p = Tensor::new(vec![6, 4], permuted).unwrap();

        let mut tape = Tape::new();
        let xq = FeatureMap::from_tensor(&mut tape, 2, 2, &xq_t).unwrap();
        let xr = FeatureMap::from_tensor(&mut tape, 2, 3, &xr_t).unwrap();
        let xr2 = FeatureMap::from_tensor(&mut tape, 2, 3, &xr_p).unwrap();
        let vars = params.bind(&mut tape);
        let (a, _) =
            nl_bi_forward(&mut tape, &xq, &xr, &params, &vars, AttnMode::DotMean, NormMode::Running)
                .unwrap();
        let (b, _) =
            nl_bi_forward(&mut tape, &xq, &xr2, &params, &vars, AttnMode::DotMean, NormMode::Running)
                .unwrap();
        for (x, y) in tape.value(a.values()).iter().zip(tape.value(b.values())) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn attention_map_csv_and_pgm() {
        let map = AttentionMap {
            matrix: Tensor::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.25]]).unwrap(),
            query_id: "res5".into(),
            response_id: "res3".into(),
        };
        let csv = map.to_csv();
        assert!(csv.starts_with("2,2\n"));
        let pgm = map.to_pgm();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        let row = map.query_row_pgm(1, 1, 2).unwrap();
        assert!(row.starts_with(b"P5\n2 1\n255\n"));
        assert!(map.query_row_pgm(5, 1, 2).is_err());
    }
}
