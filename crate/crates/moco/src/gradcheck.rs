//! Gradient checks: every graph primitive against central finite
//! differences, the full policy log-likelihood, the REINFORCE loss and the
//! closed-form preference-loss gradient.

use std::fmt::Write as _;

use moco_core::decomposition::{reward, ScalarizationConfig, WeightVector};
use moco_core::model::{Decoding, ModelConfig, PolicyParams};
use moco_core::problems::{generate, Instance, Problem};
use moco_core::rng::{stream_rng, Rng, Stream};
use moco_core::tensor::{analytic_gradients, compare_with_finite_differences, Graph, Primitive, Tensor, Var};
use moco_core::training::{build_pairs, pl_gradient_check, reinforce_loss};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const FD_STEP: f64 = 1e-6;
pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const POLICY_TOL: f64 = 1e-4;
pub const CLOSED_FORM_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Cities of the MOTSP instance used for end-to-end checks.
    pub scale: usize,
    /// Random preference pairs for the closed-form comparison.
    pub pairs: usize,
    #[serde(default)]
    pub inject_fault: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { seed: 0, scale: 4, pairs: 10, inject_fault: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    /// Relative error for finite-difference checks, absolute deviation for
    /// the closed form.
    pub error: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

pub fn render_table(rows: &[CheckRow]) -> String {
    let mut s = format!("{:<28} {:>12} {:>10}  result\n", "check", "error", "tolerance");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<28} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.error,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    s
}

fn random_tensor(rng: &mut Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// `sum(w * y)` with fixed weights, so that every output entry matters.
fn project(g: &mut Graph, y: Var, weights: &[f64]) -> moco_core::Result<Var> {
    let dims = g.dims(y).to_vec();
    let n = g.value(y).len();
    let w = g.constant(Tensor::new(&dims, weights[..n].to_vec())?);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn fd_error<F>(f: &F, point: &[Tensor], fault: bool) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> moco_core::Result<Var>,
{
    let mut analytic = analytic_gradients(f, point)?;
    if fault {
        analytic[0][0] += 1e-2;
    }
    Ok(compare_with_finite_differences(f, point, &analytic, FD_STEP)?.max_rel_error)
}

struct PrimitiveCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    op: Box<dyn Fn(&mut Graph, &[Var]) -> moco_core::Result<Var>>,
}

fn unary(kind: Primitive) -> Box<dyn Fn(&mut Graph, &[Var]) -> moco_core::Result<Var>> {
    Box::new(move |g: &mut Graph, v: &[Var]| g.apply(kind.clone(), &v[..1]))
}

fn binary(kind: Primitive) -> Box<dyn Fn(&mut Graph, &[Var]) -> moco_core::Result<Var>> {
    Box::new(move |g: &mut Graph, v: &[Var]| g.apply(kind.clone(), &v[..2]))
}

fn primitive_cases(rng: &mut Rng) -> Vec<PrimitiveCase> {
    let mut t = |dims: &[usize]| random_tensor(rng, dims, -1.0, 1.0);
    let x34 = t(&[3, 4]);
    vec![
        PrimitiveCase { name: "matmul", inputs: vec![x34.clone(), t(&[4, 2])], op: binary(Primitive::MatMul { transpose_rhs: false }) },
        PrimitiveCase { name: "matmul_t", inputs: vec![x34.clone(), t(&[2, 4])], op: binary(Primitive::MatMul { transpose_rhs: true }) },
        PrimitiveCase { name: "add (broadcast)", inputs: vec![x34.clone(), t(&[4])], op: binary(Primitive::Add) },
        PrimitiveCase { name: "sub", inputs: vec![x34.clone(), t(&[3, 4])], op: binary(Primitive::Sub) },
        PrimitiveCase { name: "mul (broadcast)", inputs: vec![x34.clone(), t(&[1, 4])], op: binary(Primitive::Mul) },
        PrimitiveCase { name: "mul (scalar rhs)", inputs: vec![x34.clone(), t(&[1])], op: binary(Primitive::Mul) },
        PrimitiveCase { name: "scale", inputs: vec![x34.clone()], op: unary(Primitive::Scale(2.5)) },
        PrimitiveCase { name: "tanh", inputs: vec![x34.clone()], op: unary(Primitive::Tanh) },
        PrimitiveCase { name: "sigmoid", inputs: vec![x34.clone()], op: unary(Primitive::Sigmoid) },
        PrimitiveCase { name: "relu", inputs: vec![x34.clone()], op: unary(Primitive::Relu) },
        PrimitiveCase { name: "exp", inputs: vec![x34.clone()], op: unary(Primitive::Exp) },
        PrimitiveCase {
            name: "log",
            inputs: vec![Tensor::new(&[3, 4], x34.data().iter().map(|v| 1.5 + v).collect()).expect("shape")],
            op: unary(Primitive::Log),
        },
        PrimitiveCase { name: "softmax axis 0", inputs: vec![x34.clone()], op: unary(Primitive::Softmax { axis: 0 }) },
        PrimitiveCase { name: "softmax rank 3", inputs: vec![t(&[2, 3, 4])], op: unary(Primitive::Softmax { axis: 1 }) },
        PrimitiveCase { name: "log_softmax", inputs: vec![x34.clone()], op: unary(Primitive::LogSoftmax { axis: 1 }) },
        PrimitiveCase { name: "mean", inputs: vec![x34.clone()], op: unary(Primitive::Mean { axis: 0 }) },
        PrimitiveCase { name: "sum axis", inputs: vec![x34.clone()], op: unary(Primitive::Sum { axis: Some(1) }) },
        PrimitiveCase { name: "sum all", inputs: vec![x34.clone()], op: unary(Primitive::Sum { axis: None }) },
        PrimitiveCase {
            name: "instance_norm axis 0",
            inputs: vec![x34.clone()],
            op: unary(Primitive::InstanceNorm { axis: 0, eps: 1e-5 }),
        },
        PrimitiveCase {
            name: "instance_norm rank 4",
            inputs: vec![t(&[2, 3, 2, 2])],
            op: unary(Primitive::InstanceNorm { axis: 2, eps: 1e-5 }),
        },
        PrimitiveCase { name: "concat axis 0", inputs: vec![t(&[2, 3]), t(&[1, 3])], op: binary(Primitive::Concat { axis: 0 }) },
        PrimitiveCase { name: "concat axis 1", inputs: vec![t(&[2, 3]), t(&[2, 2])], op: binary(Primitive::Concat { axis: 1 }) },
        PrimitiveCase {
            name: "gather",
            inputs: vec![x34.clone()],
            op: unary(Primitive::Gather { axis: 0, indices: vec![2, 0, 2] }),
        },
        PrimitiveCase {
            name: "masked_fill",
            inputs: vec![x34.clone()],
            op: unary(Primitive::MaskedFill {
                mask: (0..12).map(|i| i % 3 == 1).collect(),
                fill: 0.25,
            }),
        },
        PrimitiveCase { name: "topk", inputs: vec![x34.clone()], op: unary(Primitive::TopK { k: 2, axis: 1 }) },
        PrimitiveCase {
            name: "masked softmax",
            inputs: vec![x34],
            op: Box::new(|g: &mut Graph, v: &[Var]| {
                let m = g.masked_fill(v[0], (0..12).map(|i| i % 4 == 3).collect(), f64::NEG_INFINITY)?;
                g.softmax(m, 1)
            }),
        },
    ]
}

fn policy_config(problem: Problem) -> ModelConfig {
    ModelConfig { embed_dim: 8, n_encoder_layers: 1, n_heads: 2, ff_hidden: 16, ..ModelConfig::desk(problem, 2) }
}

fn sampled_actions(params: &PolicyParams, inst: &Instance, lambda: &WeightVector, rng: &mut Rng) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    Ok(p.solve(&mut g, inst, lambda, Decoding::Sample(rng))?.trajectory.actions)
}

pub fn run(cfg: &GradcheckConfig) -> Result<Vec<CheckRow>> {
    let mut rng = stream_rng(cfg.seed, Stream::Diagnostics, 0);
    let mut rows = Vec::new();
    let mut fault = cfg.inject_fault;

    let weights: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for case in primitive_cases(&mut rng) {
        let op = &case.op;
        let f = |g: &mut Graph, v: &[Var]| -> moco_core::Result<Var> {
            let y = op(g, v)?;
            project(g, y, &weights)
        };
        let error = fd_error(&f, &case.inputs, fault)?;
        fault = false;
        rows.push(CheckRow { name: format!("primitive {}", case.name), error, tolerance: PRIMITIVE_TOL });
    }

    let params = PolicyParams::init(policy_config(Problem::Motsp), &mut rng)?;
    let inst = generate(Problem::Motsp, cfg.scale, 2, &mut rng)?;
    let lambda = WeightVector::new(vec![0.3, 0.7])?;
    let actions = sampled_actions(&params, &inst, &lambda, &mut rng)?;
    let f = |g: &mut Graph, v: &[Var]| -> moco_core::Result<Var> {
        let p = params.bind_vars(g, v.to_vec())?;
        let traced = p.solve(g, &inst, &lambda, Decoding::Replay(&actions))?;
        traced.log_likelihood(g)
    };
    rows.push(CheckRow {
        name: format!("policy log-likelihood n={}", cfg.scale),
        error: fd_error(&f, params.tensors(), cfg.inject_fault)?,
        tolerance: POLICY_TOL,
    });

    let scal = ScalarizationConfig::weighted_sum(2);
    let samples: Vec<Vec<usize>> = (0..2).map(|_| sampled_actions(&params, &inst, &lambda, &mut rng)).collect::<Result<_>>()?;
    let rewards: Vec<f64> = samples
        .iter()
        .map(|a| Ok(reward(&moco_core::problems::evaluate(&inst, a)?, &lambda, &scal)?))
        .collect::<Result<_>>()?;
    let f = |g: &mut Graph, v: &[Var]| -> moco_core::Result<Var> {
        let p = params.bind_vars(g, v.to_vec())?;
        let emb = p.encode(g, &inst, &lambda)?;
        let mut lls = Vec::new();
        for a in &samples {
            let t = p.rollout(g, &emb, &inst, Decoding::Replay(a))?;
            lls.push(t.log_likelihood(g)?);
        }
        reinforce_loss(g, &lls, &rewards)
    };
    rows.push(CheckRow {
        name: "reinforce loss".into(),
        error: fd_error(&f, params.tensors(), cfg.inject_fault)?,
        tolerance: POLICY_TOL,
    });

    rows.push(CheckRow {
        name: format!("preference closed form x{}", cfg.pairs),
        error: closed_form_deviation(&params, cfg.scale, cfg.pairs, &mut rng, cfg.inject_fault)?,
        tolerance: CLOSED_FORM_TOL,
    });
    Ok(rows)
}

/// Largest deviation between the autodiff and closed-form preference-loss
/// gradients over `pairs` random pairs on MOTSP instances of size `n`.
pub fn closed_form_deviation(params: &PolicyParams, n: usize, pairs: usize, rng: &mut Rng, fault: bool) -> Result<f64> {
    let scal = ScalarizationConfig::weighted_sum(2);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < pairs {
        let inst = generate(Problem::Motsp, n, 2, rng)?;
        let l0 = rng.gen_range(0.0..1.0);
        let lambda = WeightVector::new(vec![l0, 1.0 - l0])?;
        let a = sampled_actions(params, &inst, &lambda, rng)?;
        let b = loop {
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            if perm != a {
                break perm;
            }
        };
        let values = [&a, &b]
            .iter()
            .map(|x| Ok(moco_core::decomposition::scalarize_objective(&moco_core::problems::evaluate(&inst, x)?, &lambda, &scal)?))
            .collect::<Result<Vec<f64>>>()?;
        let Some(pair) = build_pairs(&values).into_iter().next() else { continue };
        let sols = [&a, &b];
        let beta = rng.gen_range(0.5..5.0);
        let mut check = pl_gradient_check(params, &inst, &lambda, sols[pair.winner], sols[pair.loser], pair.label, beta)?;
        if fault {
            check.autodiff[0].data_mut()[0] += 1e-6;
        }
        let dev = check
            .autodiff
            .iter()
            .zip(&check.closed_form)
            .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max);
        worst = worst.max(dev);
        done += 1;
    }
    Ok(worst)
}
