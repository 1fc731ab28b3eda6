use moco_core::problems::{evaluate, generate, reset, Instance, Problem, CAPACITY_TOL};
use moco_core::rng::rng_from_seed;
use proptest::prelude::*;

/// Rolls out an episode choosing the unmasked action at quantile `u[t]`.
fn random_rollout(inst: &Instance, u: &[f64]) -> (Vec<usize>, usize, Vec<(usize, usize)>) {
    let mut s = reset(inst);
    let mut decisions = 0;
    let mut counts = Vec::new();
    while !s.done {
        let mask = s.feasible_mask().unwrap();
        let open: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        assert!(!open.is_empty(), "live state with an empty action set");
        let q = u[decisions % u.len()];
        let a = open[((q * open.len() as f64) as usize).min(open.len() - 1)];
        s.step(a).unwrap();
        decisions += 1;
        assert!(s.remaining >= 0.0);
        let visited = s.visited.iter().filter(|&&v| v).count();
        let non_depot = s.partial.iter().filter(|&&a| !(inst.problem() == Problem::Mocvrp && a == 0)).count();
        counts.push((visited, non_depot));
    }
    assert!(s.feasible_mask().is_err());
    (s.partial.clone(), decisions, counts)
}

fn quantiles() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn motsp_episodes(seed in any::<u64>(), n in 2usize..30, kappa in 2usize..4, u in quantiles()) {
        let inst = generate(Problem::Motsp, n, kappa, &mut rng_from_seed(seed)).unwrap();
        let (tour, decisions, counts) = random_rollout(&inst, &u);
        prop_assert_eq!(decisions, n);
        prop_assert!(counts.iter().all(|(v, p)| v == p));
        let mut sorted = tour.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        let f = evaluate(&inst, &tour).unwrap();
        prop_assert_eq!(f.len(), kappa);
        prop_assert!(f.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn mocvrp_routes_respect_capacity(seed in any::<u64>(), n in 2usize..40, u in quantiles()) {
        let inst = generate(Problem::Mocvrp, n, 2, &mut rng_from_seed(seed)).unwrap();
        let (partial, decisions, counts) = random_rollout(&inst, &u);
        prop_assert!(decisions <= 2 * n + 1);
        prop_assert!(counts.iter().all(|(v, p)| v == p));
        prop_assert_eq!(*partial.last().unwrap(), 0);
        prop_assert!(partial.windows(2).all(|w| !(w[0] == 0 && w[1] == 0)));
        let q = inst.capacity().unwrap();
        let mut load = 0.0;
        for &a in &partial {
            if a == 0 {
                load = 0.0;
            } else {
                load += inst.load(a);
                prop_assert!(load <= q + CAPACITY_TOL);
            }
        }
        let f = evaluate(&inst, &partial).unwrap();
        prop_assert!(f.values[1] <= f.values[0] + 1e-12);
    }

    #[test]
    fn mokp_weight_within_capacity(seed in any::<u64>(), n in 2usize..120, u in quantiles()) {
        let inst = generate(Problem::Mokp, n, 2, &mut rng_from_seed(seed)).unwrap();
        let (items, decisions, counts) = random_rollout(&inst, &u);
        prop_assert!(decisions <= n);
        prop_assert!(counts.iter().all(|(v, p)| v == p));
        let w: f64 = items.iter().map(|&i| inst.load(i)).sum();
        prop_assert!(w <= inst.capacity().unwrap() + CAPACITY_TOL);
        let f = evaluate(&inst, &items).unwrap();
        prop_assert!(f.values.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn motsp_relabeling_is_covariant(seed in any::<u64>(), n in 3usize..25, kappa in 2usize..4, u in quantiles(), perm_seed in any::<u64>()) {
        let inst = generate(Problem::Motsp, n, kappa, &mut rng_from_seed(seed)).unwrap();
        let (tour, _, _) = random_rollout(&inst, &u);
        // Fisher-Yates driven by a SplitMix-style counter.
        let mut perm: Vec<usize> = (0..n).collect();
        let mut x = perm_seed;
        for i in (1..n).rev() {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (x >> 33) as usize % (i + 1));
        }
        // Node i of the original becomes node perm[i].
        let mut feats = vec![Vec::new(); n];
        for i in 0..n {
            feats[perm[i]] = inst.features()[i].clone();
        }
        let relabeled = Instance::new(Problem::Motsp, n, kappa, feats, None).unwrap();
        let mapped: Vec<usize> = tour.iter().map(|&a| perm[a]).collect();
        let a = evaluate(&inst, &tour).unwrap();
        let b = evaluate(&relabeled, &mapped).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        // Rotating the tour leaves the objective unchanged too.
        let mut rotated = tour.clone();
        rotated.rotate_left(1);
        let c = evaluate(&inst, &rotated).unwrap();
        for (x, y) in a.values.iter().zip(&c.values) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn generation_is_seed_deterministic(seed in any::<u64>(), n in 2usize..30) {
        for (p, k) in [(Problem::Motsp, 2), (Problem::Motsp, 3), (Problem::Mocvrp, 2), (Problem::Mokp, 2)] {
            let a = generate(p, n, k, &mut rng_from_seed(seed)).unwrap();
            let b = generate(p, n, k, &mut rng_from_seed(seed)).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn generated_values_in_range(seed in any::<u64>(), n in 2usize..60) {
        let cvrp = generate(Problem::Mocvrp, n, 2, &mut rng_from_seed(seed)).unwrap();
        let q = moco_core::problems::cvrp_capacity(n);
        prop_assert_eq!(cvrp.load(0), 0.0);
        for i in 1..=n {
            let d = cvrp.load(i) * q;
            prop_assert!((d - d.round()).abs() < 1e-9 && (1.0..=9.0).contains(&d.round()));
        }
        let kp = generate(Problem::Mokp, n, 2, &mut rng_from_seed(seed)).unwrap();
        for f in kp.features() {
            prop_assert!(f.iter().all(|v| (0.0..1.0).contains(v)));
        }
    }
}

#[test]
fn capacity_constants() {
    assert_eq!(moco_core::problems::cvrp_capacity(20), 30.0);
    assert_eq!(moco_core::problems::cvrp_capacity(50), 40.0);
    assert_eq!(moco_core::problems::cvrp_capacity(100), 50.0);
    assert_eq!(moco_core::problems::knapsack_capacity(50), 12.5);
    assert_eq!(moco_core::problems::knapsack_capacity(100), 25.0);
    assert_eq!(moco_core::problems::knapsack_capacity(200), 25.0);
}

#[test]
fn evaluate_rejects_bad_solutions() {
    let inst = generate(Problem::Motsp, 4, 2, &mut rng_from_seed(3)).unwrap();
    assert!(evaluate(&inst, &[0, 1, 2]).is_err());
    assert!(evaluate(&inst, &[0, 1, 1, 2]).is_err());
    assert!(evaluate(&inst, &[0, 1, 2, 7]).is_err());
    let cvrp = generate(Problem::Mocvrp, 3, 2, &mut rng_from_seed(3)).unwrap();
    assert!(evaluate(&cvrp, &[1, 2, 3]).is_err());
    assert!(evaluate(&cvrp, &[1, 2, 0]).is_err());
    let mut s = reset(&inst);
    s.step(1).unwrap();
    assert!(s.step(1).is_err());
}
