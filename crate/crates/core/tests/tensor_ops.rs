use moco_core::tensor::{analytic_gradients, finite_diff_check, Graph, Primitive, Tensor, Var};
use moco_core::Error;
use proptest::prelude::*;

fn t(dims: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(dims, data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = g.matmul(a, i).unwrap();
    assert_eq!(g.data(y), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(g.dims(y), &[2, 2]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[0.0; 3]));
    let y = g.softmax(x, 0).unwrap();
    assert!(close(g.data(y), &[1.0 / 3.0; 3], 1e-15));
}

#[test]
fn instance_norm_example() {
    let x = [2.0, 4.0, 6.0];
    let eps = 1e-5;
    let mean = x.iter().sum::<f64>() / 3.0;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
    let oracle: Vec<f64> = x.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect();

    let mut g = Graph::new();
    let v = g.constant(t(&[1, 3], &x));
    let y = g.instance_norm(v, 1, eps).unwrap();
    assert!(close(g.data(y), &oracle, 1e-15));
    assert!(close(g.data(y), &[-1.2247, 0.0, 1.2247], 1e-4));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum_all(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

    let mut g = Graph::new();
    let x = g.param(t(&[2], &[0.0, 0.0]));
    let ls = g.log_softmax(x, 0).unwrap();
    let first = g.gather(ls, 0, vec![0]).unwrap();
    g.backward(first).unwrap();
    assert!(close(g.grad(x).unwrap(), &[0.5, -0.5], 1e-15));
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, -2.0]));
    let y = g.tanh(x).unwrap();
    let s = g.sum_all(y).unwrap();
    g.backward(s).unwrap();
    let once = g.grad(x).unwrap().to_vec();
    g.backward(s).unwrap();
    let twice = g.grad(x).unwrap().to_vec();
    assert!(close(&twice, &once.iter().map(|v| 2.0 * v).collect::<Vec<_>>(), 1e-15));
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), once.as_slice());
}

#[test]
fn errors() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 3], &[0.0; 6]));
    let b = g.constant(t(&[2, 3], &[0.0; 6]));
    match g.matmul(a, b) {
        Err(Error::Shape { dims, .. }) => assert_eq!(dims, vec![vec![2, 3], vec![2, 3]]),
        other => panic!("expected shape error, got {other:?}"),
    }
    let m = g.masked_fill(a, vec![true; 6], f64::NEG_INFINITY).unwrap();
    assert_eq!(g.softmax(m, 1), Err(Error::AllMasked));
    let p = g.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(p), Err(Error::NonScalarRoot(_))));
    assert!(g.concat(&[a, p], 0).is_err());
    assert!(g.gather(a, 0, vec![2]).is_err());
    assert!(g.topk(a, 4, 1).is_err());
}

#[test]
fn finite_difference_examples() {
    let x = t(&[3], &[0.3, -0.7, 0.9]);
    let err = finite_diff_check(
        |g: &mut Graph, v: &[Var]| {
            let y = g.tanh(v[0])?;
            g.sum_all(y)
        },
        &[x.clone()],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let err = finite_diff_check(|g: &mut Graph, _: &[Var]| Ok(g.constant(Tensor::scalar(4.0))), &[x.clone()], 1e-6).unwrap();
    assert_eq!(err, 0.0);

    let nan = finite_diff_check(
        |g: &mut Graph, v: &[Var]| {
            let l = g.log(v[0])?;
            g.sum_all(l)
        },
        &[t(&[1], &[-1.0])],
        1e-6,
    );
    assert!(matches!(nan, Err(Error::NonFinite(_))));
}

#[test]
fn topk_ties_go_to_lowest_index() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 4], &[1.0, 3.0, 3.0, 0.0]));
    let (v, idx) = g.topk(x, 2, 1).unwrap();
    assert_eq!(idx, vec![1, 2]);
    assert_eq!(g.data(v), &[3.0, 3.0]);
}

fn weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i as f64) * 1.37 + 0.4).sin()).collect()
}

/// `sum(w * op(x))` with fixed non-uniform weights.
fn probe(kind: Primitive) -> impl Fn(&mut Graph, &[Var]) -> moco_core::Result<Var> {
    move |g: &mut Graph, v: &[Var]| {
        let y = g.apply(kind.clone(), v)?;
        let dims = g.dims(y).to_vec();
        let n = g.value(y).len();
        let w = g.constant(Tensor::new(&dims, weights(n))?);
        let p = g.mul(y, w)?;
        g.sum_all(p)
    }
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

const TOL: f64 = 1e-5;
const H: f64 = 1e-6;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn binary_primitives_match_finite_differences(a in vals(12), b in vals(12), c in vals(8), d in vals(4)) {
        let x = t(&[3, 4], &a);
        let cases: Vec<(Primitive, Vec<Tensor>)> = vec![
            (Primitive::MatMul { transpose_rhs: false }, vec![x.clone(), t(&[4, 2], &c)]),
            (Primitive::MatMul { transpose_rhs: true }, vec![x.clone(), t(&[2, 4], &c)]),
            (Primitive::Add, vec![x.clone(), t(&[3, 4], &b)]),
            (Primitive::Add, vec![x.clone(), t(&[4], &d)]),
            (Primitive::Sub, vec![x.clone(), t(&[1, 4], &d)]),
            (Primitive::Mul, vec![x.clone(), t(&[3, 4], &b)]),
            (Primitive::Mul, vec![x.clone(), t(&[1], &d[..1])]),
            (Primitive::Concat { axis: 0 }, vec![x.clone(), t(&[2, 4], &c)]),
            (Primitive::Concat { axis: 1 }, vec![x.clone(), t(&[3, 4], &b)]),
        ];
        for (kind, point) in cases {
            let err = finite_diff_check(probe(kind.clone()), &point, H).unwrap();
            prop_assert!(err < TOL, "{kind:?}: {err}");
        }
    }

    #[test]
    fn unary_primitives_match_finite_differences(a in vals(24)) {
        prop_assume!(a.iter().all(|v| v.abs() > 1e-3));
        let x = t(&[2, 3, 4], &a);
        let pos = t(&[2, 3, 4], &a.iter().map(|v| v + 1.5).collect::<Vec<_>>());
        let cases: Vec<(Primitive, Tensor)> = vec![
            (Primitive::Scale(-1.7), x.clone()),
            (Primitive::Tanh, x.clone()),
            (Primitive::Sigmoid, x.clone()),
            (Primitive::Relu, x.clone()),
            (Primitive::Exp, x.clone()),
            (Primitive::Log, pos),
            (Primitive::Softmax { axis: 0 }, x.clone()),
            (Primitive::Softmax { axis: 2 }, x.clone()),
            (Primitive::LogSoftmax { axis: 1 }, x.clone()),
            (Primitive::Mean { axis: 1 }, x.clone()),
            (Primitive::Sum { axis: Some(2) }, x.clone()),
            (Primitive::Sum { axis: None }, x.clone()),
            (Primitive::InstanceNorm { axis: 1, eps: 1e-5 }, x.clone()),
            (Primitive::InstanceNorm { axis: 2, eps: 1e-5 }, x.clone()),
            (Primitive::Gather { axis: 1, indices: vec![2, 0, 2, 1] }, x.clone()),
            (Primitive::MaskedFill { mask: (0..24).map(|i| i % 5 == 0).collect(), fill: 0.3 }, x.clone()),
            (Primitive::TopK { k: 2, axis: 2 }, x.clone()),
        ];
        for (kind, point) in cases {
            let err = finite_diff_check(probe(kind.clone()), &[point], H).unwrap();
            prop_assert!(err < TOL, "{kind:?}: {err}");
        }
    }

    #[test]
    fn rank_four_instance_norm(a in vals(24)) {
        let x = t(&[2, 3, 2, 2], &a);
        let err = finite_diff_check(probe(Primitive::InstanceNorm { axis: 0, eps: 1e-5 }), &[x], H).unwrap();
        prop_assert!(err < TOL);
    }

    #[test]
    fn softmax_is_a_distribution(a in vals(12), masked in prop::collection::vec(any::<bool>(), 12)) {
        let mut mask = masked;
        mask[0] = false;
        mask[4] = false;
        mask[8] = false;
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 4], &a.iter().map(|v| 30.0 * v).collect::<Vec<_>>()));
        let m = g.masked_fill(x, mask.clone(), f64::NEG_INFINITY).unwrap();
        let p = g.softmax(m, 1).unwrap();
        for row in 0..3 {
            let r = &g.data(p)[4 * row..4 * row + 4];
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for j in 0..4 {
                if mask[4 * row + j] {
                    prop_assert_eq!(r[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn instance_norm_standardizes(a in vals(20), shift in -5.0f64..5.0, scale in 0.5f64..4.0) {
        let data: Vec<f64> = a.iter().map(|v| shift + scale * v).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[5, 4], &data));
        let y = g.instance_norm(x, 0, 0.0).unwrap();
        let yd = g.data(y);
        for f in 0..4 {
            let col: Vec<f64> = (0..5).map(|i| yd[4 * i + f]).collect();
            let mean = col.iter().sum::<f64>() / 5.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-8);
        }
        let y = g.instance_norm(x, 0, 1e-5).unwrap();
        let yd = g.data(y);
        for f in 0..4 {
            let raw: Vec<f64> = (0..5).map(|i| data[4 * i + f]).collect();
            let m = raw.iter().sum::<f64>() / 5.0;
            let v = raw.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 5.0;
            let col: Vec<f64> = (0..5).map(|i| yd[4 * i + f]).collect();
            let var = col.iter().map(|x| x * x).sum::<f64>() / 5.0;
            prop_assert!((var - v / (v + 1e-5)).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_deterministic(a in vals(12), b in vals(8)) {
        let run = || {
            let f = |g: &mut Graph, v: &[Var]| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.tanh(h)?;
                let h = g.instance_norm(h, 0, 1e-5)?;
                let h = g.log_softmax(h, 1)?;
                g.sum_all(h)
            };
            analytic_gradients(&f, &[t(&[3, 4], &a), t(&[4, 2], &b)]).unwrap()
        };
        let first = run();
        prop_assert_eq!(first, run());
    }

    #[test]
    fn topk_gradient_only_reaches_selected(a in vals(10), k in 1usize..5) {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 5], &a));
        let (v, idx) = g.topk(x, k, 1).unwrap();
        let w = g.constant(t(&[2, k], &weights(2 * k)));
        let p = g.mul(v, w).unwrap();
        let s = g.sum_all(p).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        for row in 0..2 {
            let sel = &idx[row * k..row * k + k];
            for j in 0..5 {
                if !sel.contains(&j) {
                    prop_assert_eq!(grad[5 * row + j], 0.0);
                }
            }
        }
    }
}
