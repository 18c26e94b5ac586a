//! Every differentiable primitive is checked against the central-difference
//! oracle on randomized small shapes, over many seeds, plus a proptest that
//! pins matmul to an independent triple-loop oracle.

use cnl::tensor::{finite_diff_grad, max_rel_err, ConvGeom, NormStats, Tape, Tensor, Var, FD_EPS};
use cnl::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 100;
const TOL: f64 = 1e-4;

/// Scalar loss with distinct per-element weights, so errors cannot cancel:
/// `sum(w . out) + 0.5 * sum(out . out)`.
fn weighted_loss(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let n = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = tape.constant(tape.shape(out).to_vec(), w)?;
    let weighted = tape.mul(out, w)?;
    let linear = tape.sum(weighted);
    let sq = tape.mul(out, out)?;
    let sq_sum = tape.sum(sq);
    let half = tape.scale(sq_sum, 0.5);
    tape.add(linear, half)
}

/// Check analytic gradients of `build` against finite differences, for every
/// input tensor.
fn check_graph<F>(name: &str, inputs: &[Tensor], seed: u64, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars).expect("forward should succeed");
    let loss = weighted_loss(&mut tape, out, seed).unwrap();
    tape.backward(loss).unwrap();

    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .unwrap_or_else(|| panic!("{name}: no gradient reached input {i}"))
            .to_vec();
        let numeric = finite_diff_grad(
            |probe| {
                let mut t2 = Tape::new();
                let vars2: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| t2.leaf(if j == i { probe } else { t }))
                    .collect();
                let out2 = build(&mut t2, &vars2)?;
                let loss2 = weighted_loss(&mut t2, out2, seed)?;
                Ok(t2.value(loss2)[0])
            },
            x,
            FD_EPS,
        )
        .unwrap();
        let err = max_rel_err(&analytic, numeric.data());
        assert!(err < TOL, "{name}: input {i}, seed {seed}: max rel err {err:.3e}");
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).with_requires_grad(true)
}

/// Random values bounded away from zero, for the relu kink.
fn randn_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let t = Tensor::randn(shape, 1.0, rng);
    let data = t.data().iter().map(|&v| if v.abs() < 0.1 { v + 0.2 } else { v }).collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true)
}

fn small_dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

#[test]
fn grad_matmul() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (small_dim(&mut rng), small_dim(&mut rng), small_dim(&mut rng));
        let a = randn(&[m, k], &mut rng);
        let b = randn(&[k, n], &mut rng);
        check_graph("matmul", &[a, b], seed, |t, v| t.matmul(v[0], v[1]));
    }
}

#[test]
fn grad_transpose() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = randn(&[small_dim(&mut rng), small_dim(&mut rng)], &mut rng);
        check_graph("transpose", &[a], seed, |t, v| t.transpose(v[0]));
    }
}

#[test]
fn grad_add_and_mul() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [small_dim(&mut rng), small_dim(&mut rng)];
        let a = randn(&shape, &mut rng);
        let b = randn(&shape, &mut rng);
        check_graph("add", &[a.clone(), b.clone()], seed, |t, v| t.add(v[0], v[1]));
        check_graph("mul", &[a, b], seed, |t, v| t.mul(v[0], v[1]));
    }
}

#[test]
fn grad_add_row() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = (small_dim(&mut rng), small_dim(&mut rng));
        let a = randn(&[n, c], &mut rng);
        let row = randn(&[c], &mut rng);
        check_graph("add_row", &[a, row], seed, |t, v| t.add_row(v[0], v[1]));
    }
}

#[test]
fn grad_scale_relu_sum() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [small_dim(&mut rng), small_dim(&mut rng)];
        let a = randn(&shape, &mut rng);
        check_graph("scale", &[a], seed, |t, v| Ok(t.scale(v[0], -1.7)));
        let b = randn_off_zero(&shape, &mut rng);
        check_graph("relu", &[b], seed, |t, v| Ok(t.relu(v[0])));
        let c = randn(&shape, &mut rng);
        check_graph("sum", &[c], seed, |t, v| Ok(t.sum(v[0])));
    }
}

#[test]
fn grad_mean_rows_and_softmax() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = (small_dim(&mut rng), small_dim(&mut rng));
        let a = randn(&[n, c], &mut rng);
        check_graph("mean_rows", &[a.clone()], seed, |t, v| t.mean_rows(v[0]));
        check_graph("row_softmax", &[a], seed, |t, v| t.row_softmax(v[0]));
    }
}

#[test]
fn grad_cross_entropy() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = small_dim(&mut rng);
        let k = rng.gen_range(2..=5);
        let logits = randn(&[n, k], &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        check_graph("cross_entropy", &[logits], seed, move |t, v| {
            t.cross_entropy(v[0], &labels)
        });
    }
}

#[test]
fn grad_channel_norm_batch_and_fixed() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = (rng.gen_range(2..=5), small_dim(&mut rng));
        let x = randn(&[n, c], &mut rng);
        let gamma = randn(&[c], &mut rng);
        let beta = randn(&[c], &mut rng);
        check_graph("channel_norm/batch", &[x.clone(), gamma.clone(), beta.clone()], seed, |t, v| {
            t.channel_norm(v[0], v[1], v[2], NormStats::Batch { eps: 1e-5 })
        });
        let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
        check_graph("channel_norm/fixed", &[x, gamma, beta], seed, move |t, v| {
            t.channel_norm(
                v[0],
                v[1],
                v[2],
                NormStats::Fixed { mean: mean.clone(), var: var.clone(), eps: 1e-5 },
            )
        });
    }
}

#[test]
fn grad_im2col_conv() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
        let c_in = rng.gen_range(1..=2);
        let c_out = rng.gen_range(1..=2);
        let stride = rng.gen_range(1..=2);
        let geom = ConvGeom { height: h, width: w, in_channels: c_in, kernel: 2, stride, pad: 1 };
        let x = randn(&[h * w, c_in], &mut rng);
        let weight = randn(&[geom.patch_len(), c_out], &mut rng);
        check_graph("im2col+matmul", &[x, weight], seed, move |t, v| {
            let patches = t.im2col(v[0], geom)?;
            t.matmul(patches, v[1])
        });
    }
}

/// Independent triple-loop matmul, used only as an oracle.
fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop_on_integers(
        m in 1usize..5, k in 1usize..5, n in 1usize..5,
        seed in 0u64..10_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-9i32..=9) as f64).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-9i32..=9) as f64).collect();
        let mut tape = Tape::new();
        let av = tape.leaf(&Tensor::new(vec![m, k], a.clone()).unwrap());
        let bv = tape.leaf(&Tensor::new(vec![k, n], b.clone()).unwrap());
        let c = tape.matmul(av, bv).unwrap();
        let expected = matmul_oracle(&a, &b, m, k, n);
        prop_assert_eq!(tape.value(c), expected.as_slice());
    }
}
