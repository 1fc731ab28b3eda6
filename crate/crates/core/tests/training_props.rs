use moco_core::decomposition::WeightVector;
use moco_core::model::{run_policy, Decoding, ModelConfig, PolicyParams};
use moco_core::problems::{generate, Instance, Problem};
use moco_core::rng::{derive_seed, rng_from_seed, Stream};
use moco_core::tensor::{finite_diff_check, Graph, Tensor, Var};
use moco_core::training::{
    build_pairs, gradient_variance, pl_gradient_check, pl_loss, reinforce_loss, sample_subproblems, sample_weight,
    Algorithm, PreferencePair, TrainConfig, Trainer,
};
use proptest::prelude::*;

fn small(problem: Problem) -> ModelConfig {
    ModelConfig { embed_dim: 8, n_encoder_layers: 1, n_heads: 2, ff_hidden: 16, ..ModelConfig::desk(problem, 2) }
}

fn pl_value(w: f64, l: f64, y: f64, beta: f64) -> (f64, [f64; 2]) {
    let mut g = Graph::new();
    let wv = g.param(Tensor::scalar(w));
    let lv = g.param(Tensor::scalar(l));
    let loss = pl_loss(&mut g, wv, lv, y, beta).unwrap();
    g.backward(loss).unwrap();
    let gw = g.grad(wv).map_or(0.0, |v| v[0]);
    let gl = g.grad(lv).map_or(0.0, |v| v[0]);
    (g.item(loss), [gw, gl])
}

fn tsp4(seed: u64) -> (PolicyParams, Instance, WeightVector) {
    let params = PolicyParams::init(ModelConfig::desk(Problem::Motsp, 2), &mut rng_from_seed(seed)).unwrap();
    let inst = generate(Problem::Motsp, 4, 2, &mut rng_from_seed(seed + 1)).unwrap();
    (params, inst, WeightVector::new(vec![0.45, 0.55]).unwrap())
}

#[test]
fn pl_loss_examples() {
    let (v, _) = pl_value(-1.3, -1.3, 1.0, 3.5);
    assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((v - 0.693147).abs() < 5e-7);

    let (v, grad) = pl_value(-1.0, -1.2, 1.0, 3.5);
    let z: f64 = 3.5 * (-1.0 - -1.2);
    let oracle = (1.0 + (-z).exp()).ln();
    assert!((v - oracle).abs() < 1e-14);
    assert!((v - 0.403186).abs() < 5e-7);
    let s = 1.0 / (1.0 + (-z).exp());
    assert!((grad[0] + 3.5 * (1.0 - s)).abs() < 1e-14);
    assert!((grad[1] - 3.5 * (1.0 - s)).abs() < 1e-14);

    let (v, grad) = pl_value(-1.0, -1.2, 0.0, 3.5);
    assert_eq!(v, 0.0);
    assert_eq!(grad, [0.0, 0.0]);
}

#[test]
fn pair_construction() {
    assert_eq!(build_pairs(&[3.0, 5.0]), vec![PreferencePair { winner: 0, loser: 1, label: 1.0 }]);
    assert_eq!(build_pairs(&[5.0, 3.0]), vec![PreferencePair { winner: 1, loser: 0, label: 1.0 }]);
    assert_eq!(build_pairs(&[1.0, 2.0, 3.0]).len(), 3);
    assert!(build_pairs(&[2.0, 2.0]).is_empty());
}

#[test]
fn closed_form_gradient_matches_autodiff() {
    let (params, inst, l) = tsp4(20);
    let mut rng = rng_from_seed(21);
    let mut checked = 0;
    while checked < 10 {
        let a = run_policy(&params, &inst, &l, Decoding::Sample(&mut rng)).unwrap().actions;
        let b = run_policy(&params, &inst, &l, Decoding::Sample(&mut rng)).unwrap().actions;
        if a == b {
            continue;
        }
        let c = pl_gradient_check(&params, &inst, &l, &a, &b, 1.0, 3.5).unwrap();
        assert!(c.max_deviation < 1e-10, "{}", c.max_deviation);
        checked += 1;
    }
    let a = run_policy(&params, &inst, &l, Decoding::Greedy).unwrap().actions;
    let b = run_policy(&params, &inst, &l, Decoding::Sample(&mut rng)).unwrap().actions;
    let c = pl_gradient_check(&params, &inst, &l, &a, &b, 0.0, 3.5).unwrap();
    assert_eq!(c.max_deviation, 0.0);
    assert!(c.autodiff.iter().chain(&c.closed_form).all(|t| t.data().iter().all(|&x| x == 0.0)));
}

#[test]
fn small_beta_limit() {
    let (params, inst, l) = tsp4(22);
    let mut rng = rng_from_seed(23);
    let a = run_policy(&params, &inst, &l, Decoding::Sample(&mut rng)).unwrap().actions;
    let b = loop {
        let b = run_policy(&params, &inst, &l, Decoding::Sample(&mut rng)).unwrap().actions;
        if b != a {
            break b;
        }
    };
    let beta = 1e-6;
    let c = pl_gradient_check(&params, &inst, &l, &a, &b, 1.0, beta).unwrap();
    // At beta -> 0 the coefficient is beta/2, so the gradient is
    // -beta/2 * (grad avg_ll(w) - grad avg_ll(l)), up to O(beta^2).
    let unit = pl_gradient_check(&params, &inst, &l, &a, &b, 1.0, 1.0).unwrap();
    let z1 = {
        let (w, lo) = (
            moco_core::model::log_likelihood(&params, &inst, &l, &a).unwrap() / 4.0,
            moco_core::model::log_likelihood(&params, &inst, &l, &b).unwrap() / 4.0,
        );
        w - lo
    };
    let s1 = 1.0 / (1.0 + (-z1).exp());
    let mut scale = 0.0f64;
    let mut worst = 0.0f64;
    for (ad, u) in c.autodiff.iter().zip(&unit.closed_form) {
        for (&x, &y) in ad.data().iter().zip(u.data()) {
            let delta = y / (-(1.0 - s1));
            let limit = -beta / 2.0 * delta;
            worst = worst.max((x - limit).abs());
            scale = scale.max(limit.abs());
        }
    }
    assert!(scale > 0.0);
    assert!(worst <= 1e-5 * scale, "{worst} vs {scale}");
}

#[test]
fn reinforce_examples() {
    let mut g = Graph::new();
    let a = g.param(Tensor::scalar(-2.0));
    let b = g.param(Tensor::scalar(-3.0));
    let loss = reinforce_loss(&mut g, &[a, b], &[-3.0, -5.0]).unwrap();
    g.backward(loss).unwrap();
    // Advantages (+1, -1) scaled by -1/K.
    assert_eq!(g.grad(a).unwrap(), &[-0.5]);
    assert_eq!(g.grad(b).unwrap(), &[0.5]);

    let mut g = Graph::new();
    let a = g.param(Tensor::scalar(-2.0));
    let b = g.param(Tensor::scalar(-3.0));
    let loss = reinforce_loss(&mut g, &[a, b], &[-4.0, -4.0]).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[0.0]);
    assert_eq!(g.grad(b).unwrap(), &[0.0]);

    let mut g = Graph::new();
    let a = g.param(Tensor::scalar(-2.0));
    assert!(reinforce_loss(&mut g, &[a], &[1.0, 2.0]).is_err());
}

#[test]
fn reinforce_gradient_matches_estimator() {
    let params = PolicyParams::init(small(Problem::Motsp), &mut rng_from_seed(24)).unwrap();
    let inst = generate(Problem::Motsp, 4, 2, &mut rng_from_seed(25)).unwrap();
    let l = WeightVector::new(vec![0.6, 0.4]).unwrap();
    let scal = moco_core::decomposition::ScalarizationConfig::weighted_sum(2);
    let mut rng = rng_from_seed(26);
    let samples: Vec<Vec<usize>> =
        (0..3).map(|_| run_policy(&params, &inst, &l, Decoding::Sample(&mut rng)).unwrap().actions).collect();
    let rewards: Vec<f64> = samples
        .iter()
        .map(|a| {
            let f = moco_core::problems::evaluate(&inst, a).unwrap();
            moco_core::decomposition::reward(&f, &l, &scal).unwrap()
        })
        .collect();
    let f = |g: &mut Graph, v: &[Var]| {
        let p = params.bind_vars(g, v.to_vec())?;
        let emb = p.encode(g, &inst, &l)?;
        let mut lls = Vec::new();
        for a in &samples {
            let t = p.rollout(g, &emb, &inst, Decoding::Replay(a))?;
            lls.push(t.log_likelihood(g)?);
        }
        reinforce_loss(g, &lls, &rewards)
    };
    let err = finite_diff_check(&f, params.tensors(), 1e-6).unwrap();
    assert!(err < 1e-4, "{err}");

    // Literal estimator: (1/K) sum_j (R_j - b) grad log p_j, the negated loss gradient.
    let auto = moco_core::tensor::analytic_gradients(&f, params.tensors()).unwrap();
    let k = rewards.len() as f64;
    let b = rewards.iter().sum::<f64>() / k;
    let mut literal: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for (a, r) in samples.iter().zip(&rewards) {
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let t = p.solve(&mut g, &inst, &l, Decoding::Replay(a)).unwrap();
        let ll = t.log_likelihood(&mut g).unwrap();
        g.backward(ll).unwrap();
        for (acc, grad) in literal.iter_mut().zip(p.grads(&g)) {
            for (x, y) in acc.iter_mut().zip(grad.data()) {
                *x += (r - b) / k * y;
            }
        }
    }
    for (a, lit) in auto.iter().zip(&literal) {
        for (x, y) in a.iter().zip(lit) {
            assert!((x + y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn dirichlet_weights() {
    let mut rng = rng_from_seed(27);
    for kappa in [2usize, 3] {
        let draws = 100_000;
        let mut sum = vec![0.0; kappa];
        for _ in 0..draws {
            let w = sample_weight(kappa, &mut rng);
            let s = w.as_slice();
            if kappa == 2 {
                assert_eq!(s[1], 1.0 - s[0]);
            }
            for (a, x) in sum.iter_mut().zip(s) {
                *a += x;
            }
        }
        let k = kappa as f64;
        let var = (k - 1.0) / (k * k * (k + 1.0));
        let sigma = (var / draws as f64).sqrt();
        for a in sum {
            assert!((a / draws as f64 - 1.0 / k).abs() <= 3.0 * sigma);
        }
    }
}

#[test]
fn batches_are_seed_deterministic() {
    let a = sample_subproblems(Problem::Mocvrp, 10, 2, &mut rng_from_seed(28), 4).unwrap();
    let b = sample_subproblems(Problem::Mocvrp, 10, 2, &mut rng_from_seed(28), 4).unwrap();
    assert_eq!(a, b);
    let t = Trainer::new(quick(Algorithm::Pl, 0)).unwrap();
    assert_eq!(t.batch(3).unwrap(), t.batch(3).unwrap());
    assert_ne!(t.batch(3).unwrap(), t.batch(4).unwrap());
}

#[test]
fn gradient_variance_basics() {
    let zero = vec![Tensor::new(&[2, 2], vec![0.0; 4]).unwrap(), Tensor::scalar(0.0)];
    assert_eq!(gradient_variance(&zero), 0.0);
    let g = vec![Tensor::new(&[2], vec![1.0, 3.0]).unwrap(), Tensor::new(&[2], vec![5.0, 7.0]).unwrap()];
    assert_eq!(gradient_variance(&g), 5.0);
}

fn quick(algorithm: Algorithm, steps: usize) -> TrainConfig {
    TrainConfig {
        batch: 2,
        validation_every: 2,
        validation_instances: 2,
        validation_h: 2,
        model: small(Problem::Motsp),
        ..TrainConfig::desk(Problem::Motsp, 10, 2, algorithm, 5, steps)
    }
}

#[test]
fn zero_steps_leave_initialization() {
    let cfg = quick(Algorithm::Pl, 0);
    let init =
        PolicyParams::init(cfg.model.clone(), &mut rng_from_seed(derive_seed(cfg.seed, Stream::Init, 0))).unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    let records = t.run(|_| Ok(())).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].step, 0);
    assert_eq!(records[0].loss, None);
    assert!(records[0].validation_hv.is_some());
    assert_eq!(t.params().tensors(), init.tensors());
}

#[test]
fn training_is_reproducible() {
    for alg in [Algorithm::Pl, Algorithm::Reinforce] {
        let run = || {
            let mut t = Trainer::new(quick(alg, 3)).unwrap();
            let r = t.run(|_| Ok(())).unwrap();
            (r, t.into_params())
        };
        let (ra, pa) = run();
        let (rb, pb) = run();
        assert_eq!(ra, rb);
        assert_eq!(pa.tensors(), pb.tensors());
        let steps: Vec<usize> = ra.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 1, 2, 3]);
        let validated: Vec<usize> = ra.iter().filter(|r| r.validation_hv.is_some()).map(|r| r.step).collect();
        assert_eq!(validated, vec![0, 2, 3]);
        assert!(ra[1..].iter().all(|r| r.grad_variance.is_some_and(|v| v >= 0.0)));
    }
}

#[test]
fn config_validation() {
    let mut c = quick(Algorithm::Pl, 1);
    c.samples_per_subproblem = 1;
    assert!(c.validate().is_err());
    let mut c = quick(Algorithm::Pl, 1);
    c.beta = 0.0;
    assert!(c.validate().is_err());
    let mut c = quick(Algorithm::Pl, 1);
    c.n = 13;
    assert!(c.validate().is_err());
    assert_eq!(moco_core::training::default_beta(2), 3.5);
    assert_eq!(moco_core::training::default_beta(3), 4.5);
}

fn total_pl_loss(avgs: &[f64], values: &[f64], beta: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = avgs.iter().map(|&a| g.constant(Tensor::scalar(a))).collect();
    let mut total = 0.0;
    for p in build_pairs(values) {
        let l = pl_loss(&mut g, vars[p.winner], vars[p.loser], p.label, beta).unwrap();
        total += g.item(l);
    }
    total
}

proptest! {
    #[test]
    fn loss_depends_only_on_objective_order(
        avgs in prop::collection::vec(-5.0f64..0.0, 4),
        values in prop::collection::vec(0.0f64..10.0, 4),
        scale in 0.01f64..100.0,
        shift in -10.0f64..10.0,
    ) {
        let base = total_pl_loss(&avgs, &values, 3.5);
        let rescaled: Vec<f64> = values.iter().map(|v| scale * v + shift).collect();
        prop_assert_eq!(build_pairs(&values), build_pairs(&rescaled));
        prop_assert_eq!(base, total_pl_loss(&avgs, &rescaled, 3.5));
        let warped: Vec<f64> = values.iter().map(|v| v.exp() + v.powi(3)).collect();
        prop_assert_eq!(build_pairs(&values), build_pairs(&warped));
        prop_assert_eq!(base, total_pl_loss(&avgs, &warped, 3.5));
    }

    #[test]
    fn pl_loss_decreases_in_winner_likelihood(l in -5.0f64..0.0, w1 in -5.0f64..0.0, dw in 1e-3f64..3.0, beta in 0.1f64..10.0) {
        let (a, ga) = pl_value(w1, l, 1.0, beta);
        let (b, _) = pl_value(w1 + dw, l, 1.0, beta);
        prop_assert!(b < a);
        prop_assert!(ga[0] < 0.0);
    }
}

#[test]
fn pl_loss_keeps_precision_when_saturated() {
    // beta * (w - l) = 45: loss and gradient are about e^-45, not zero.
    let (loss, g) = pl_value(0.0, -4.5, 1.0, 10.0);
    let want = (-45.0f64).exp();
    assert!((loss - want).abs() <= 1e-12 * want, "{loss}");
    assert!((g[0] + 10.0 * want).abs() <= 1e-12 * want, "{}", g[0]);
    assert!((g[1] - 10.0 * want).abs() <= 1e-12 * want, "{}", g[1]);
}
