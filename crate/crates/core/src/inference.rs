//! Pareto-front construction from a trained policy.

use alloc::vec;
use alloc::vec::Vec;

use crate::decomposition::{scalarize_objective, ScalarizationConfig, WeightVector};
use crate::error::{invalid, Error, Result};
use crate::model::{BoundPolicy, Decoding, PolicyParams, Trajectory};
use crate::pareto::{gap, normalized_hv, HvFrame, ParetoArchive};
use crate::problems::{self, Instance, Problem};
use crate::tensor::Graph;

/// Number of distinct maps of the unit square used for augmentation.
pub const N_MAPS: usize = 8;

/// Applies map `index` to a point of the unit square.
pub fn map_point(index: usize, [x, y]: [f64; 2]) -> [f64; 2] {
    match index {
        0 => [x, y],
        1 => [y, x],
        2 => [x, 1.0 - y],
        3 => [y, 1.0 - x],
        4 => [1.0 - x, y],
        5 => [1.0 - y, x],
        6 => [1.0 - x, 1.0 - y],
        7 => [1.0 - y, 1.0 - x],
        _ => panic!("map index {index} out of range"),
    }
}

/// One map index per coordinate set.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AugmentTransform {
    maps: Vec<usize>,
}

impl AugmentTransform {
    pub fn new(maps: Vec<usize>) -> Result<Self> {
        if maps.is_empty() || maps.iter().any(|&m| m >= N_MAPS) {
            return Err(invalid!("transform maps must be non-empty indices below {N_MAPS}: {maps:?}"));
        }
        Ok(AugmentTransform { maps })
    }

    pub fn identity(sets: usize) -> Self {
        AugmentTransform { maps: vec![0; sets] }
    }

    pub fn maps(&self) -> &[usize] {
        &self.maps
    }

    pub fn is_identity(&self) -> bool {
        self.maps.iter().all(|&m| m == 0)
    }

    /// Every combination of maps over the problem's coordinate sets, the
    /// identity first. Empty for problems without coordinates.
    pub fn all(problem: Problem, kappa: usize) -> Vec<AugmentTransform> {
        let sets = problem.coordinate_sets(kappa);
        if sets == 0 {
            return Vec::new();
        }
        let total = N_MAPS.pow(sets as u32);
        (0..total)
            .map(|mut code| {
                let mut maps = vec![0; sets];
                for m in maps.iter_mut().rev() {
                    *m = code % N_MAPS;
                    code /= N_MAPS;
                }
                AugmentTransform { maps }
            })
            .collect()
    }
}

/// Maps every coordinate set of `inst`; loads and capacities are untouched.
pub fn apply_transform(inst: &Instance, t: &AugmentTransform) -> Result<Instance> {
    let sets = inst.problem().coordinate_sets(inst.kappa());
    if sets == 0 {
        return Err(Error::Unsupported(alloc::format!("augmentation of {}", inst.problem())));
    }
    if t.maps.len() != sets {
        return Err(invalid!("transform has {} maps, instance has {sets} coordinate sets", t.maps.len()));
    }
    let mut features = inst.features().to_vec();
    for f in &mut features {
        for (s, &m) in t.maps.iter().enumerate() {
            let [x, y] = map_point(m, [f[2 * s], f[2 * s + 1]]);
            f[2 * s] = x;
            f[2 * s + 1] = y;
        }
    }
    Ok(inst.with_features(features))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FrontOptions {
    pub augment: bool,
    /// Insert every augmented rollout into the archive instead of only the
    /// per-weight best.
    pub pool: bool,
}

/// Best solution found for one weight vector.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSolution {
    pub lambda: WeightVector,
    pub trajectory: Trajectory,
    pub scalarized: f64,
}

#[derive(Clone, Debug)]
pub struct Front {
    pub archive: ParetoArchive,
    pub solutions: Vec<WeightSolution>,
    pub rollouts: usize,
    /// Augmentation was requested but the problem has no coordinates.
    pub augment_skipped: bool,
}

/// Greedy rollouts for every weight, optionally over augmented variants.
pub fn solve_front(
    params: &PolicyParams,
    inst: &Instance,
    weights: &[WeightVector],
    scal: &ScalarizationConfig,
    opts: FrontOptions,
) -> Result<Front> {
    let transforms = if opts.augment { AugmentTransform::all(inst.problem(), inst.kappa()) } else { Vec::new() };
    let augment_skipped = opts.augment && transforms.is_empty();
    let variants: Vec<Instance> = if transforms.is_empty() {
        vec![inst.clone()]
    } else {
        transforms.iter().map(|t| apply_transform(inst, t)).collect::<Result<_>>()?
    };

    let mut g = Graph::new();
    let policy: BoundPolicy<'_> = params.bind(&mut g, false);
    let base = g.len();
    let mut archive = ParetoArchive::new(inst.problem().sense());
    let mut solutions = Vec::with_capacity(weights.len());
    let mut rollouts = 0;
    for lambda in weights {
        let mut best: Option<WeightSolution> = None;
        for v in &variants {
            g.truncate(base);
            let traced = policy.solve(&mut g, v, lambda, Decoding::Greedy)?;
            rollouts += 1;
            let mut trajectory = traced.trajectory;
            trajectory.objective = problems::evaluate(inst, &trajectory.actions)?;
            let scalarized = scalarize_objective(&trajectory.objective, lambda, scal)?;
            if opts.pool {
                archive.insert(trajectory.objective.clone())?;
            }
            if best.as_ref().map_or(true, |b| scalarized < b.scalarized) {
                best = Some(WeightSolution { lambda: lambda.clone(), trajectory, scalarized });
            }
        }
        let best = best.expect("at least one variant");
        if !opts.pool {
            archive.insert(best.trajectory.objective.clone())?;
        }
        solutions.push(best);
    }
    Ok(Front { archive, solutions, rollouts, augment_skipped })
}

/// Checks that a dataset, weight set and frame fit the model.
pub fn check_compatible(params: &PolicyParams, dataset: &[Instance], weights: &[WeightVector], frame: &HvFrame) -> Result<()> {
    let cfg = params.config();
    frame.validate()?;
    if frame.kappa() != cfg.kappa || frame.sense != cfg.problem.sense() {
        return Err(invalid!("frame does not match {} with kappa {}", cfg.problem, cfg.kappa));
    }
    if let Some((i, _)) = dataset
        .iter()
        .enumerate()
        .find(|(_, d)| d.problem() != cfg.problem || d.kappa() != cfg.kappa)
    {
        return Err(invalid!("instance {i} does not match {} with kappa {}", cfg.problem, cfg.kappa));
    }
    if weights.is_empty() || weights.iter().any(|w| w.kappa() != cfg.kappa) {
        return Err(invalid!("weights must be a non-empty set of {}-vectors", cfg.kappa));
    }
    Ok(())
}

/// Normalized HV of one instance's front.
pub fn instance_hv(
    params: &PolicyParams,
    inst: &Instance,
    weights: &[WeightVector],
    frame: &HvFrame,
    scal: &ScalarizationConfig,
    opts: FrontOptions,
) -> Result<f64> {
    let front = solve_front(params, inst, weights, scal, opts)?;
    normalized_hv(&front.archive, frame)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean_hv: f64,
    pub per_instance: Vec<f64>,
    pub gap: Option<f64>,
    pub n_instances: usize,
    pub n_weights: usize,
    pub augment: bool,
}

/// Assembles a report from per-instance normalized HVs.
pub fn summarize(per_instance: Vec<f64>, n_weights: usize, augment: bool, hv_ref: Option<f64>) -> Result<EvalReport> {
    if per_instance.is_empty() {
        return Err(invalid!("empty dataset"));
    }
    let mean_hv = per_instance.iter().sum::<f64>() / per_instance.len() as f64;
    let gap = hv_ref.map(|r| gap(mean_hv, r)).transpose()?;
    Ok(EvalReport { mean_hv, n_instances: per_instance.len(), per_instance, gap, n_weights, augment })
}

/// Mean normalized HV over a dataset, evaluated serially.
pub fn evaluate_model(
    params: &PolicyParams,
    dataset: &[Instance],
    weights: &[WeightVector],
    frame: &HvFrame,
    hv_ref: Option<f64>,
    scal: &ScalarizationConfig,
    opts: FrontOptions,
) -> Result<EvalReport> {
    check_compatible(params, dataset, weights, frame)?;
    let hvs = dataset
        .iter()
        .map(|inst| instance_hv(params, inst, weights, frame, scal, opts))
        .collect::<Result<Vec<_>>>()?;
    summarize(hvs, weights.len(), opts.augment, hv_ref)
}
