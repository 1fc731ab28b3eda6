//! Instance generation and step environments for MOTSP, MOCVRP and MOKP.
//!
//! Routing problems are costs to minimize; knapsack profits are maximized.
//! The orientation is carried by [`Sense`] on every [`ObjectiveVector`].
//!
//! MOCVRP demands are stored already divided by the vehicle capacity, so the
//! stored capacity is 1. A depot visit refills the vehicle; the depot cannot
//! be chosen twice in a row, and once the last customer is served the return
//! to the depot is appended automatically.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::rng::Rng;

/// Slack used when comparing loads against capacity.
pub const CAPACITY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Problem {
    #[serde(rename = "MOTSP")]
    Motsp,
    #[serde(rename = "MOCVRP")]
    Mocvrp,
    #[serde(rename = "MOKP")]
    Mokp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Minimize,
    Maximize,
}

impl Problem {
    pub fn sense(self) -> Sense {
        match self {
            Problem::Mokp => Sense::Maximize,
            _ => Sense::Minimize,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Problem::Motsp => "MOTSP",
            Problem::Mocvrp => "MOCVRP",
            Problem::Mokp => "MOKP",
        }
    }

    /// Per-node input feature width.
    pub fn feature_dim(self, kappa: usize) -> usize {
        match self {
            Problem::Motsp => 2 * kappa,
            Problem::Mocvrp => 3,
            Problem::Mokp => 1 + kappa,
        }
    }

    pub fn supports(self, kappa: usize) -> bool {
        match self {
            Problem::Motsp => kappa == 2 || kappa == 3,
            Problem::Mocvrp | Problem::Mokp => kappa == 2,
        }
    }

    /// Number of coordinate sets (one per objective for MOTSP).
    pub fn coordinate_sets(self, kappa: usize) -> usize {
        match self {
            Problem::Motsp => kappa,
            Problem::Mocvrp => 1,
            Problem::Mokp => 0,
        }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for Problem {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MOTSP" | "TSP" => Ok(Problem::Motsp),
            "MOCVRP" | "CVRP" => Ok(Problem::Mocvrp),
            "MOKP" | "KP" => Ok(Problem::Mokp),
            _ => Err(invalid!("unknown problem {s:?}")),
        }
    }
}

/// MOCVRP vehicle capacity for a customer count (nearest of 20/50/100).
pub fn cvrp_capacity(n: usize) -> f64 {
    if n <= 35 {
        30.0
    } else if n <= 75 {
        40.0
    } else {
        50.0
    }
}

/// MOKP knapsack capacity for an item count.
pub fn knapsack_capacity(n: usize) -> f64 {
    if n >= 100 {
        25.0
    } else {
        (n as f64 / 4.0).max(1.0)
    }
}

/// One problem instance. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    problem: Problem,
    n: usize,
    kappa: usize,
    features: Vec<Vec<f64>>,
    capacity: Option<f64>,
}

impl Instance {
    /// Validates and wraps raw data. `n` is the problem size: cities, customers
    /// (the depot is node 0 on top of them) or items.
    pub fn new(
        problem: Problem,
        n: usize,
        kappa: usize,
        features: Vec<Vec<f64>>,
        capacity: Option<f64>,
    ) -> Result<Self> {
        if !problem.supports(kappa) {
            return Err(Error::Unsupported(alloc::format!("{problem} with kappa = {kappa}")));
        }
        if n < 2 {
            return Err(invalid!("problem size must be at least 2, got {n}"));
        }
        let nodes = if problem == Problem::Mocvrp { n + 1 } else { n };
        if features.len() != nodes {
            return Err(invalid!("{problem} of size {n} needs {nodes} nodes, got {}", features.len()));
        }
        let z = problem.feature_dim(kappa);
        for (i, f) in features.iter().enumerate() {
            if f.len() != z {
                return Err(invalid!("node {i} has {} features, expected {z}", f.len()));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(alloc::format!("features of node {i}")));
            }
        }
        match problem {
            Problem::Motsp => {
                if capacity.is_some() {
                    return Err(invalid!("MOTSP takes no capacity"));
                }
            }
            Problem::Mocvrp => {
                let q = capacity.ok_or_else(|| invalid!("MOCVRP needs a capacity"))?;
                if !(q > 0.0 && q.is_finite()) {
                    return Err(invalid!("capacity must be positive, got {q}"));
                }
                if features[0][2] != 0.0 {
                    return Err(invalid!("depot demand must be 0"));
                }
                if let Some(i) = (1..nodes).find(|&i| !(features[i][2] > 0.0 && features[i][2] < q)) {
                    return Err(invalid!("customer {i} demand outside (0, capacity)"));
                }
            }
            Problem::Mokp => {
                let c = capacity.ok_or_else(|| invalid!("MOKP needs a capacity"))?;
                if let Some(i) = (0..nodes).find(|&i| !(features[i][0] >= 0.0 && features[i][0] < c)) {
                    return Err(invalid!("item {i} weight outside [0, capacity)"));
                }
            }
        }
        Ok(Instance { problem, n, kappa, features, capacity })
    }

    pub fn problem(&self) -> Problem {
        self.problem
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    pub fn n_nodes(&self) -> usize {
        self.features.len()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn capacity(&self) -> Option<f64> {
        self.capacity
    }

    /// Coordinates of `node` in coordinate set `set`.
    pub fn coord(&self, node: usize, set: usize) -> [f64; 2] {
        let f = &self.features[node];
        match self.problem {
            Problem::Motsp => [f[2 * set], f[2 * set + 1]],
            _ => [f[0], f[1]],
        }
    }

    /// MOCVRP demand or MOKP weight.
    pub fn load(&self, node: usize) -> f64 {
        match self.problem {
            Problem::Mocvrp => self.features[node][2],
            Problem::Mokp => self.features[node][0],
            Problem::Motsp => 0.0,
        }
    }

    pub fn profit(&self, item: usize, objective: usize) -> f64 {
        self.features[item][1 + objective]
    }

    pub(crate) fn with_features(&self, features: Vec<Vec<f64>>) -> Instance {
        Instance { features, ..self.clone() }
    }

    fn dist(&self, a: usize, b: usize, set: usize) -> f64 {
        let (p, q) = (self.coord(a, set), self.coord(b, set));
        math::hypot(p[0] - q[0], p[1] - q[1])
    }
}

/// Draws a uniform random instance.
pub fn generate(problem: Problem, n: usize, kappa: usize, rng: &mut Rng) -> Result<Instance> {
    if !problem.supports(kappa) {
        return Err(Error::Unsupported(alloc::format!("{problem} with kappa = {kappa}")));
    }
    if n < 2 {
        return Err(invalid!("problem size must be at least 2, got {n}"));
    }
    let z = problem.feature_dim(kappa);
    match problem {
        Problem::Motsp => {
            let features = (0..n).map(|_| (0..z).map(|_| rng.gen::<f64>()).collect()).collect();
            Instance::new(problem, n, kappa, features, None)
        }
        Problem::Mocvrp => {
            let q = cvrp_capacity(n);
            let mut features = Vec::with_capacity(n + 1);
            for i in 0..=n {
                let x = rng.gen::<f64>();
                let y = rng.gen::<f64>();
                let d = if i == 0 { 0.0 } else { rng.gen_range(1..=9u32) as f64 / q };
                features.push(vec![x, y, d]);
            }
            Instance::new(problem, n, kappa, features, Some(1.0))
        }
        Problem::Mokp => {
            let features = (0..n).map(|_| (0..z).map(|_| rng.gen::<f64>()).collect()).collect();
            Instance::new(problem, n, kappa, features, Some(knapsack_capacity(n)))
        }
    }
}

/// An objective vector together with its optimization direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector {
    pub values: Vec<f64>,
    pub sense: Sense,
}

impl ObjectiveVector {
    pub fn new(values: Vec<f64>, sense: Sense) -> Self {
        ObjectiveVector { values, sense }
    }

    pub fn minimize(values: Vec<f64>) -> Self {
        Self::new(values, Sense::Minimize)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values in minimization orientation (maximized objectives negated).
    pub fn minimization(&self) -> Vec<f64> {
        match self.sense {
            Sense::Minimize => self.values.clone(),
            Sense::Maximize => self.values.iter().map(|v| -v).collect(),
        }
    }
}

/// Mutable episode state over a borrowed instance.
#[derive(Clone, Debug)]
pub struct EnvState<'a> {
    pub instance: &'a Instance,
    pub partial: Vec<usize>,
    pub visited: Vec<bool>,
    pub remaining: f64,
    pub current: Option<usize>,
    pub first: Option<usize>,
    pub done: bool,
    served: usize,
}

pub fn reset(instance: &Instance) -> EnvState<'_> {
    let nodes = instance.n_nodes();
    let (remaining, current) = match instance.problem {
        Problem::Motsp => (0.0, None),
        Problem::Mocvrp => (instance.capacity.unwrap_or(1.0), Some(0)),
        Problem::Mokp => (instance.capacity.unwrap_or(0.0), None),
    };
    let mut s = EnvState {
        instance,
        partial: Vec::with_capacity(2 * nodes + 1),
        visited: vec![false; nodes],
        remaining,
        current,
        first: None,
        done: false,
        served: 0,
    };
    if instance.problem == Problem::Mokp && raw_mask(&s).iter().all(|&m| m) {
        s.done = true;
    }
    s
}

fn raw_mask(s: &EnvState<'_>) -> Vec<bool> {
    let inst = s.instance;
    match inst.problem {
        Problem::Motsp => s.visited.clone(),
        Problem::Mocvrp => {
            let customers = inst.n_nodes() - 1;
            let mut m: Vec<bool> = (0..inst.n_nodes())
                .map(|i| i != 0 && (s.visited[i] || inst.load(i) > s.remaining + CAPACITY_TOL))
                .collect();
            m[0] = s.current == Some(0) && s.served < customers;
            m
        }
        Problem::Mokp => (0..inst.n_nodes())
            .map(|i| s.visited[i] || inst.load(i) > s.remaining + CAPACITY_TOL)
            .collect(),
    }
}

impl<'a> EnvState<'a> {
    /// Action mask: `true` marks an action that may NOT be taken.
    pub fn feasible_mask(&self) -> Result<Vec<bool>> {
        if self.done {
            return Err(Error::Done);
        }
        Ok(raw_mask(self))
    }

    /// Applies `action` in place.
    pub fn step(&mut self, action: usize) -> Result<()> {
        let mask = self.feasible_mask()?;
        if action >= mask.len() || mask[action] {
            return Err(Error::MaskedAction { action, partial: self.partial.clone() });
        }
        let inst = self.instance;
        self.partial.push(action);
        match inst.problem {
            Problem::Motsp => {
                self.visited[action] = true;
                if self.first.is_none() {
                    self.first = Some(action);
                }
                self.current = Some(action);
                self.done = self.partial.len() == inst.n_nodes();
            }
            Problem::Mocvrp => {
                if action == 0 {
                    self.remaining = inst.capacity.unwrap_or(1.0);
                } else {
                    self.visited[action] = true;
                    self.served += 1;
                    self.remaining = (self.remaining - inst.load(action)).max(0.0);
                }
                self.current = Some(action);
                if self.served == inst.n_nodes() - 1 {
                    if action != 0 {
                        self.partial.push(0);
                        self.current = Some(0);
                        self.remaining = inst.capacity.unwrap_or(1.0);
                    }
                    self.done = true;
                }
            }
            Problem::Mokp => {
                self.visited[action] = true;
                self.remaining = (self.remaining - inst.load(action)).max(0.0);
                self.done = raw_mask(self).iter().all(|&m| m);
            }
        }
        Ok(())
    }
}

/// Objective vector of a complete feasible solution.
pub fn evaluate(instance: &Instance, partial: &[usize]) -> Result<ObjectiveVector> {
    let nodes = instance.n_nodes();
    if let Some(&bad) = partial.iter().find(|&&a| a >= nodes) {
        return Err(Error::Infeasible(alloc::format!("node {bad} out of range")));
    }
    match instance.problem {
        Problem::Motsp => {
            let mut seen = vec![false; nodes];
            for &a in partial {
                if core::mem::replace(&mut seen[a], true) {
                    return Err(Error::Infeasible(alloc::format!("node {a} visited twice")));
                }
            }
            if partial.len() != nodes {
                return Err(Error::Infeasible(String::from("tour does not visit every node")));
            }
            let values = (0..instance.kappa)
                .map(|set| {
                    (0..nodes)
                        .map(|i| instance.dist(partial[i], partial[(i + 1) % nodes], set))
                        .sum()
                })
                .collect();
            Ok(ObjectiveVector::minimize(values))
        }
        Problem::Mocvrp => {
            let cap = instance.capacity.unwrap_or(1.0);
            let mut seen = vec![false; nodes];
            let (mut total, mut longest) = (0.0f64, 0.0f64);
            let (mut route_len, mut load, mut prev) = (0.0, 0.0, 0usize);
            for &a in partial {
                route_len += instance.dist(prev, a, 0);
                if a == 0 {
                    total += route_len;
                    longest = longest.max(route_len);
                    route_len = 0.0;
                    load = 0.0;
                } else {
                    if core::mem::replace(&mut seen[a], true) {
                        return Err(Error::Infeasible(alloc::format!("customer {a} served twice")));
                    }
                    load += instance.load(a);
                    if load > cap + CAPACITY_TOL {
                        return Err(Error::Infeasible(alloc::format!("route load {load} exceeds {cap}")));
                    }
                }
                prev = a;
            }
            if prev != 0 {
                return Err(Error::Infeasible(String::from("last route does not return to the depot")));
            }
            if seen[1..].iter().any(|s| !s) {
                return Err(Error::Infeasible(String::from("not every customer is served")));
            }
            Ok(ObjectiveVector::minimize(vec![total, longest]))
        }
        Problem::Mokp => {
            let cap = instance.capacity.unwrap_or(0.0);
            let mut seen = vec![false; nodes];
            let mut weight = 0.0;
            for &a in partial {
                if core::mem::replace(&mut seen[a], true) {
                    return Err(Error::Infeasible(alloc::format!("item {a} selected twice")));
                }
                weight += instance.load(a);
            }
            if weight > cap + CAPACITY_TOL {
                return Err(Error::Infeasible(alloc::format!("weight {weight} exceeds {cap}")));
            }
            if (0..nodes).any(|i| !seen[i] && weight + instance.load(i) <= cap - CAPACITY_TOL) {
                return Err(Error::Infeasible(String::from("another item still fits")));
            }
            let values = (0..instance.kappa)
                .map(|j| partial.iter().map(|&a| instance.profit(a, j)).sum())
                .collect();
            Ok(ObjectiveVector::new(values, Sense::Maximize))
        }
    }
}
