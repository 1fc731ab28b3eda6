//! Weight vectors and scalarization of objective vectors.
//!
//! Every function here works in minimization orientation: objectives that
//! are maximized must be negated first (see
//! [`ObjectiveVector::minimization`]).

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::problems::ObjectiveVector;

/// Tolerance on the simplex sum of a weight vector.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// A point of the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if lambda.is_empty() {
            return Err(invalid!("empty weight vector"));
        }
        if lambda.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(invalid!("weight components must be finite and non-negative: {lambda:?}"));
        }
        let s: f64 = lambda.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid!("weights sum to {s}, not 1"));
        }
        Ok(WeightVector(lambda))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn kappa(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        WeightVector::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Number of simplex-lattice points with spacing `1/h` in `kappa` dimensions.
pub fn das_dennis_count(kappa: usize, h: usize) -> usize {
    binomial(h + kappa - 1, kappa - 1)
}

/// All simplex-lattice weight vectors with spacing `1/h`, in lexicographic order.
pub fn das_dennis_weights(kappa: usize, h: usize) -> Result<Vec<WeightVector>> {
    if h == 0 {
        return Err(invalid!("lattice resolution H must be at least 1"));
    }
    if kappa == 0 {
        return Err(invalid!("kappa must be positive"));
    }
    let mut out = Vec::with_capacity(das_dennis_count(kappa, h));
    let mut counts = vec![0usize; kappa];
    fill(&mut counts, 0, h, h, &mut out);
    Ok(out)
}

fn fill(counts: &mut [usize], pos: usize, left: usize, h: usize, out: &mut Vec<WeightVector>) {
    if pos + 1 == counts.len() {
        counts[pos] = left;
        let lambda = counts.iter().map(|&c| c as f64 / h as f64).collect();
        out.push(WeightVector(lambda));
        return;
    }
    for c in 0..=left {
        counts[pos] = c;
        fill(counts, pos + 1, left - c, h, out);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    WeightedSum,
    Tchebycheff,
    #[serde(rename = "PBI")]
    Pbi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarizationConfig {
    pub scheme: Scheme,
    /// Ideal point in minimization orientation.
    pub ideal: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub pbi_alpha: f64,
}

fn default_alpha() -> f64 {
    5.0
}

impl ScalarizationConfig {
    pub fn weighted_sum(kappa: usize) -> Self {
        ScalarizationConfig { scheme: Scheme::WeightedSum, ideal: vec![0.0; kappa], pbi_alpha: 5.0 }
    }

    pub fn new(scheme: Scheme, ideal: Vec<f64>) -> Self {
        ScalarizationConfig { scheme, ideal, pbi_alpha: 5.0 }
    }
}

/// Scalarized value (to be minimized) of `f` under `lambda`.
pub fn scalarize(f: &[f64], lambda: &WeightVector, cfg: &ScalarizationConfig) -> Result<f64> {
    let l = lambda.as_slice();
    if f.len() != l.len() || (cfg.scheme != Scheme::WeightedSum && cfg.ideal.len() != l.len()) {
        return Err(Error::Shape {
            op: "scalarize",
            dims: vec![vec![f.len()], vec![l.len()], vec![cfg.ideal.len()]],
        });
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(alloc::format!("objective vector {f:?}")));
    }
    let z = &cfg.ideal;
    Ok(match cfg.scheme {
        Scheme::WeightedSum => f.iter().zip(l).map(|(v, w)| v * w).sum(),
        Scheme::Tchebycheff => f
            .iter()
            .zip(l)
            .zip(z)
            .map(|((v, w), zi)| w * (v - zi).abs())
            .fold(f64::NEG_INFINITY, f64::max),
        Scheme::Pbi => {
            let norm = math::sqrt(l.iter().map(|w| w * w).sum());
            let proj: f64 = f.iter().zip(z).zip(l).map(|((v, zi), w)| (v - zi) * w).sum();
            let d1 = proj.abs() / norm;
            let d2 = math::sqrt(
                f.iter()
                    .zip(z)
                    .zip(l)
                    .map(|((v, zi), w)| {
                        let r = v - (zi + d1 * w / norm);
                        r * r
                    })
                    .sum(),
            );
            d1 + cfg.pbi_alpha * d2
        }
    })
}

/// Scalarized value of an oriented objective vector.
pub fn scalarize_objective(f: &ObjectiveVector, lambda: &WeightVector, cfg: &ScalarizationConfig) -> Result<f64> {
    scalarize(&f.minimization(), lambda, cfg)
}

/// Reward of a solution: the negated scalarized objective.
pub fn reward(f: &ObjectiveVector, lambda: &WeightVector, cfg: &ScalarizationConfig) -> Result<f64> {
    Ok(-scalarize_objective(f, lambda, cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(v: &[f64]) -> WeightVector {
        WeightVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn lattice_counts() {
        assert_eq!(das_dennis_weights(2, 100).unwrap().len(), 101);
        assert_eq!(das_dennis_weights(3, 13).unwrap().len(), 105);
        assert!(das_dennis_weights(2, 0).is_err());
        for kappa in 1..=3 {
            for h in 1..=100 {
                let ws = das_dennis_weights(kappa, h).unwrap();
                assert_eq!(ws.len(), das_dennis_count(kappa, h));
                for v in &ws {
                    let s: f64 = v.as_slice().iter().sum();
                    assert!((s - 1.0).abs() <= SIMPLEX_TOL);
                    assert!(v.as_slice().iter().all(|&x| x >= 0.0));
                }
            }
        }
    }

    #[test]
    fn lattice_order() {
        let ws: Vec<Vec<f64>> = das_dennis_weights(2, 2).unwrap().into_iter().map(Into::into).collect();
        assert_eq!(ws, vec![vec![0.0, 1.0], vec![0.5, 0.5], vec![1.0, 0.0]]);
    }

    #[test]
    fn weight_vector_validation() {
        assert!(WeightVector::new(vec![0.5, 0.6]).is_err());
        assert!(WeightVector::new(vec![-0.1, 1.1]).is_err());
        assert!(WeightVector::new(vec![]).is_err());
    }

    #[test]
    fn scheme_examples() {
        let ws = ScalarizationConfig::weighted_sum(2);
        assert_eq!(scalarize(&[3.0, 4.0], &w(&[0.25, 0.75]), &ws).unwrap(), 3.75);
        let tch = ScalarizationConfig::new(Scheme::Tchebycheff, vec![0.0, 0.0]);
        assert_eq!(scalarize(&[2.0, 4.0], &w(&[0.5, 0.5]), &tch).unwrap(), 2.0);
        let pbi = ScalarizationConfig::new(Scheme::Pbi, vec![0.0, 0.0]);
        assert!((scalarize(&[2.0, 1.0], &w(&[1.0, 0.0]), &pbi).unwrap() - 7.0).abs() < 1e-12);
        assert!(scalarize(&[f64::NAN, 1.0], &w(&[1.0, 0.0]), &ws).is_err());
        assert!(scalarize(&[1.0], &w(&[1.0, 0.0]), &ws).is_err());
    }

    #[test]
    fn rewards() {
        let ws = ScalarizationConfig::weighted_sum(2);
        let f = ObjectiveVector::minimize(vec![3.0, 4.0]);
        assert_eq!(reward(&f, &w(&[0.25, 0.75]), &ws).unwrap(), -3.75);
        assert_eq!(reward(&f, &w(&[1.0, 0.0]), &ws).unwrap(), -3.0);
        let tch = ScalarizationConfig::new(Scheme::Tchebycheff, vec![3.0, 4.0]);
        assert_eq!(reward(&f, &w(&[0.3, 0.7]), &tch).unwrap(), 0.0);
    }
}
