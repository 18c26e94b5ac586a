//! Named finite-difference checks over every attention forward path, every
//! input and parameter group, both attention-normalization modes and both
//! statistics modes.
//!
//! The analytic side is one backward pass per case; the numeric side
//! re-evaluates the forward closure per coordinate. A fault-injection hook
//! perturbs selected analytic gradients so the suite's failure path can be
//! tested end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    cnl_forward, nl_bi_forward, nl_forward, AttnMode, ChannelAffine, CnlBranch, CnlParams,
    FeatureMap, NlParams, NormMode, Projection,
};
use crate::error::Result;
use crate::export;
use crate::tensor::{finite_diff_grad, max_rel_err, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub seed: u64,
    pub threshold: f64,
    pub eps: f64,
    pub attn_modes: Vec<AttnMode>,
    pub norm_modes: Vec<NormMode>,
    /// Randomized repetitions per (path, mode) combination.
    pub rounds: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 0,
            threshold: 1e-4,
            eps: 1e-5,
            attn_modes: vec![AttnMode::DotMean, AttnMode::Softmax],
            norm_modes: vec![NormMode::PerSample, NormMode::Running],
            rounds: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub threshold: f64,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failing(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    /// Largest observed error, failing checks first.
    pub fn worst(&self) -> Option<&CheckResult> {
        self.checks.iter().max_by(|a, b| {
            (a.passed != b.passed)
                .then(|| if b.passed { std::cmp::Ordering::Greater } else { std::cmp::Ordering::Less })
                .unwrap_or_else(|| a.max_rel_err.total_cmp(&b.max_rel_err))
        })
    }

    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .checks
            .iter()
            .map(|c| {
                vec![
                    c.name.clone(),
                    format!("{}", c.max_rel_err),
                    if c.passed { "pass" } else { "fail" }.to_string(),
                ]
            })
            .collect();
        export::table_csv(&["check", "max_rel_err", "status"], &rows)
    }
}

fn mode_name(mode: AttnMode) -> &'static str {
    match mode {
        AttnMode::DotMean => "dot-mean",
        AttnMode::Softmax => "softmax",
    }
}

fn norm_name(mode: NormMode) -> &'static str {
    match mode {
        NormMode::PerSample => "per-sample",
        NormMode::Running => "running",
    }
}

enum Path {
    Nl,
    Bi,
    Cnl,
}

/// A forward path closed over fixed dimensions; tensors arrive as one slice
/// in a path-specific order.
struct Case {
    name: String,
    targets: Vec<(String, Tensor)>,
    attn: AttnMode,
    norm: NormMode,
    loss_weights: Vec<f64>,
    path: Path,
    running: (Vec<f64>, Vec<f64>),
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).with_requires_grad(true)
}

impl Case {
    fn norm_state(&self, channels: usize) -> ChannelAffine {
        let mut norm = ChannelAffine::zero_init(channels);
        norm.running_mean = self.running.0.clone();
        norm.running_var = self.running.1.clone();
        norm
    }

    /// Evaluate the path on explicit tensors; returns the scalar loss and,
    /// when requested, the leaf vars for gradient extraction.
    fn eval(&self, tensors: &[Tensor], tape: &mut Tape) -> Result<(Var, Vec<Var>)> {
        let leafs: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let out = match self.path {
            Path::Nl => {
                // [x, theta, phi, g, z, gamma, beta], x is 3x3 by C channels.
                let c = tensors[0].shape()[1];
                let x = FeatureMap::from_var(tape, 3, 3, leafs[0])?;
                let params = NlParams {
                    theta: Projection { weight: tensors[1].clone() },
                    phi: Projection { weight: tensors[2].clone() },
                    g: Projection { weight: tensors[3].clone() },
                    z: Projection { weight: tensors[4].clone() },
                    out_norm: self.norm_state(c),
                };
                let vars = crate::attention::NlVars {
                    theta: leafs[1],
                    phi: leafs[2],
                    g: leafs[3],
                    z: leafs[4],
                    gamma: leafs[5],
                    beta: leafs[6],
                };
                let (out, _) = nl_forward(tape, &x, &params, &vars, self.attn, self.norm)?;
                out.values()
            }
            Path::Bi => {
                // [xq, xr, theta, phi, g, z, gamma, beta]; xq 2x2, xr 3x2.
                let cq = tensors[0].shape()[1];
                let xq = FeatureMap::from_var(tape, 2, 2, leafs[0])?;
                let xr = FeatureMap::from_var(tape, 3, 2, leafs[1])?;
                let params = NlParams {
                    theta: Projection { weight: tensors[2].clone() },
                    phi: Projection { weight: tensors[3].clone() },
                    g: Projection { weight: tensors[4].clone() },
                    z: Projection { weight: tensors[5].clone() },
                    out_norm: self.norm_state(cq),
                };
                let vars = crate::attention::NlVars {
                    theta: leafs[2],
                    phi: leafs[3],
                    g: leafs[4],
                    z: leafs[5],
                    gamma: leafs[6],
                    beta: leafs[7],
                };
                let (out, _) = nl_bi_forward(tape, &xq, &xr, &params, &vars, self.attn, self.norm)?;
                out.values()
            }
            Path::Cnl => {
                // [xq, xr1, xr2, theta, phi1, g1, phi2, g2, z, gamma, beta];
                // xq 2x2, xr1 3x3, xr2 2x2.
                let cq = tensors[0].shape()[1];
                let xq = FeatureMap::from_var(tape, 2, 2, leafs[0])?;
                let r1 = FeatureMap::from_var(tape, 3, 3, leafs[1])?;
                let r2 = FeatureMap::from_var(tape, 2, 2, leafs[2])?;
                let params = CnlParams {
                    theta: Projection { weight: tensors[3].clone() },
                    branches: vec![
                        CnlBranch {
                            phi: Projection { weight: tensors[4].clone() },
                            g: Projection { weight: tensors[5].clone() },
                        },
                        CnlBranch {
                            phi: Projection { weight: tensors[6].clone() },
                            g: Projection { weight: tensors[7].clone() },
                        },
                    ],
                    z: Projection { weight: tensors[8].clone() },
                    out_norm: self.norm_state(cq),
                };
                let vars = crate::attention::CnlVars {
                    theta: leafs[3],
                    branches: vec![(leafs[4], leafs[5]), (leafs[6], leafs[7])],
                    z: leafs[8],
                    gamma: leafs[9],
                    beta: leafs[10],
                };
                let (out, _) = cnl_forward(tape, &xq, &[r1, r2], &params, &vars, self.attn, self.norm)?;
                out.values()
            }
        };
        // Loss with distinct per-element weights plus a quadratic term, so
        // no gradient error can cancel across elements.
        let w = tape.constant(tape.shape(out).to_vec(), self.loss_weights.clone())?;
        let weighted = tape.mul(out, w)?;
        let linear = tape.sum(weighted);
        let sq = tape.mul(out, out)?;
        let sq_sum = tape.sum(sq);
        let half = tape.scale(sq_sum, 0.5);
        let loss = tape.add(linear, half)?;
        Ok((loss, leafs))
    }
}

fn make_case(path: Path, attn: AttnMode, norm: NormMode, round: u64, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round * 101 + match path {
        Path::Nl => 1,
        Path::Bi => 2,
        Path::Cnl => 3,
    });
    let (prefix, targets, cq, out_len): (&str, Vec<(String, Tensor)>, usize, usize) = match path {
        Path::Nl => {
            let (c, ce) = (4, 2);
            let t = vec![
                ("x".into(), rand_tensor(&[9, c], &mut rng)),
                ("theta".into(), rand_tensor(&[c, ce], &mut rng)),
                ("phi".into(), rand_tensor(&[c, ce], &mut rng)),
                ("g".into(), rand_tensor(&[c, ce], &mut rng)),
                ("z".into(), rand_tensor(&[ce, c], &mut rng)),
                ("gamma".into(), rand_tensor(&[c], &mut rng)),
                ("beta".into(), rand_tensor(&[c], &mut rng)),
            ];
            ("nl", t, c, 9 * c)
        }
        Path::Bi => {
            let (cq, cr, ce) = (4, 3, 2);
            let t = vec![
                ("xq".into(), rand_tensor(&[4, cq], &mut rng)),
                ("xr".into(), rand_tensor(&[6, cr], &mut rng)),
                ("theta".into(), rand_tensor(&[cq, ce], &mut rng)),
                ("phi".into(), rand_tensor(&[cr, ce], &mut rng)),
                ("g".into(), rand_tensor(&[cr, ce], &mut rng)),
                ("z".into(), rand_tensor(&[ce, cq], &mut rng)),
                ("gamma".into(), rand_tensor(&[cq], &mut rng)),
                ("beta".into(), rand_tensor(&[cq], &mut rng)),
            ];
            ("nl_bi", t, cq, 4 * cq)
        }
        Path::Cnl => {
            let (cq, c1, c2, ce) = (4, 3, 5, 3);
            let t = vec![
                ("xq".into(), rand_tensor(&[4, cq], &mut rng)),
                ("xr1".into(), rand_tensor(&[9, c1], &mut rng)),
                ("xr2".into(), rand_tensor(&[4, c2], &mut rng)),
                ("theta".into(), rand_tensor(&[cq, ce], &mut rng)),
                ("phi1".into(), rand_tensor(&[c1, ce], &mut rng)),
                ("g1".into(), rand_tensor(&[c1, ce], &mut rng)),
                ("phi2".into(), rand_tensor(&[c2, ce], &mut rng)),
                ("g2".into(), rand_tensor(&[c2, ce], &mut rng)),
                ("z".into(), rand_tensor(&[ce, cq], &mut rng)),
                ("gamma".into(), rand_tensor(&[cq], &mut rng)),
                ("beta".into(), rand_tensor(&[cq], &mut rng)),
            ];
            ("cnl", t, cq, 4 * cq)
        }
    };
    let running = (
        (0..cq).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        (0..cq).map(|_| rng.gen_range(0.3..1.5)).collect(),
    );
    let loss_weights = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Case {
        name: format!("{prefix}/{}/{}/r{round}", mode_name(attn), norm_name(norm)),
        targets,
        attn,
        norm,
        loss_weights,
        path,
        running,
    }
}

fn run_case(case: &Case, cfg: &SuiteConfig, fault: Option<&str>, out: &mut Vec<CheckResult>) -> Result<()> {
    let tensors: Vec<Tensor> = case.targets.iter().map(|(_, t)| t.clone()).collect();
    let mut tape = Tape::new();
    let (loss, leafs) = case.eval(&tensors, &mut tape)?;
    tape.backward(loss)?;

    for (i, (target_name, target)) in case.targets.iter().enumerate() {
        let name = format!("{}/{}", case.name, target_name);
        let mut analytic = tape
            .grad(leafs[i])
            .map_or_else(|| vec![0.0; target.len()], <[f64]>::to_vec);
        if let Some(pattern) = fault {
            if name.contains(pattern) {
                for v in &mut analytic {
                    *v += 1e-2;
                }
            }
        }
        let numeric = finite_diff_grad(
            |probe| {
                let mut replaced = tensors.clone();
                replaced[i] = probe.clone();
                let mut t2 = Tape::new();
                let (l, _) = case.eval(&replaced, &mut t2)?;
                Ok(t2.value(l)[0])
            },
            target,
            cfg.eps,
        )?;
        let err = max_rel_err(&analytic, numeric.data());
        out.push(CheckResult { name, max_rel_err: err, passed: err < cfg.threshold });
    }
    Ok(())
}

/// Run the full suite; every path/mode/round/target combination is one check.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    run_suite_with_fault(cfg, None)
}

/// Suite with fault injection: analytic gradients of checks whose name
/// contains `fault` are perturbed, which must make those checks fail.
pub fn run_suite_with_fault(cfg: &SuiteConfig, fault: Option<&str>) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for round in 0..cfg.rounds as u64 {
        for &attn in &cfg.attn_modes {
            for &norm in &cfg.norm_modes {
                for path in [Path::Nl, Path::Bi, Path::Cnl] {
                    let case = make_case(path, attn, norm, round, cfg.seed);
                    run_case(&case, cfg, fault, &mut checks)?;
                }
            }
        }
    }
    Ok(SuiteReport { threshold: cfg.threshold, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let cfg = SuiteConfig { rounds: 1, ..SuiteConfig::default() };
        let report = run_suite(&cfg).unwrap();
        assert!(report.all_passed(), "failing: {:?}", report.failing());
        // 3 paths x (7 + 8 + 11 targets) x 2 attn modes x 2 norm modes.
        assert_eq!(report.checks.len(), 104);
    }

    #[test]
    fn fault_injection_fails_the_named_operation() {
        let cfg = SuiteConfig {
            rounds: 1,
            attn_modes: vec![AttnMode::DotMean],
            norm_modes: vec![NormMode::PerSample],
            ..SuiteConfig::default()
        };
        let report = run_suite_with_fault(&cfg, Some("cnl/dot-mean/per-sample/r0/theta")).unwrap();
        assert!(!report.all_passed());
        let failing = report.failing();
        assert_eq!(failing.len(), 1);
        assert!(failing[0].name.contains("cnl"));
        assert!(failing[0].name.contains("theta"));
        assert!(report.worst().map(|w| !w.passed).unwrap_or(false));
    }

    #[test]
    fn csv_lists_every_check() {
        let cfg = SuiteConfig {
            rounds: 1,
            attn_modes: vec![AttnMode::Softmax],
            norm_modes: vec![NormMode::Running],
            ..SuiteConfig::default()
        };
        let report = run_suite(&cfg).unwrap();
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), report.checks.len() + 1);
        assert!(csv.lines().nth(1).unwrap().ends_with("pass"));
    }
}
