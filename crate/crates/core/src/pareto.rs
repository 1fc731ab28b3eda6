//! Pareto dominance, non-dominated archives and exact hypervolume.
//!
//! Hypervolume is computed in minimization orientation. Maximized problems
//! are mirrored (`f -> -f`, reference and ideal point negated) before any
//! volume is measured, so a single code path serves all problems.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::problems::{ObjectiveVector, Problem, Sense};

/// `a` dominates `b` under minimization.
pub fn dominates_min(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if x < y {
            strict = true;
        }
    }
    strict
}

/// `a` dominates `b`: no worse everywhere and not identical.
pub fn dominates(a: &ObjectiveVector, b: &ObjectiveVector) -> Result<bool> {
    if a.len() != b.len() || a.sense != b.sense {
        return Err(Error::Shape { op: "dominates", dims: vec![vec![a.len()], vec![b.len()]] });
    }
    Ok(dominates_min(&a.minimization(), &b.minimization()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    /// Inserted; the count is how many archived points it displaced.
    Accepted(usize),
    /// Dominated by (or equal to) an archived point.
    Dominated,
}

/// A set of mutually non-dominated objective vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParetoArchive {
    points: Vec<ObjectiveVector>,
    sense: Sense,
}

impl ParetoArchive {
    pub fn new(sense: Sense) -> Self {
        ParetoArchive { points: Vec::new(), sense }
    }

    pub fn points(&self) -> &[ObjectiveVector] {
        &self.points
    }

    pub fn sense(&self) -> Sense {
        self.sense
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn insert(&mut self, f: ObjectiveVector) -> Result<InsertOutcome> {
        if f.sense != self.sense {
            return Err(invalid!("archive orientation mismatch"));
        }
        if f.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!("objective vector {:?}", f.values)));
        }
        if let Some(p) = self.points.first() {
            if p.len() != f.len() {
                return Err(Error::Shape { op: "archive insert", dims: vec![vec![p.len()], vec![f.len()]] });
            }
        }
        let fm = f.minimization();
        for p in &self.points {
            let pm = p.minimization();
            if pm == fm || dominates_min(&pm, &fm) {
                return Ok(InsertOutcome::Dominated);
            }
        }
        let before = self.points.len();
        self.points.retain(|p| !dominates_min(&fm, &p.minimization()));
        let removed = before - self.points.len();
        self.points.push(f);
        Ok(InsertOutcome::Accepted(removed))
    }
}

/// Reference point and ideal point used to measure and normalize HV, both in
/// the problem's own orientation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HvFrame {
    pub reference: Vec<f64>,
    pub ideal: Vec<f64>,
    pub sense: Sense,
}

impl HvFrame {
    pub fn new(reference: Vec<f64>, ideal: Vec<f64>, sense: Sense) -> Result<Self> {
        let f = HvFrame { reference, ideal, sense };
        f.validate()?;
        Ok(f)
    }

    pub fn kappa(&self) -> usize {
        self.reference.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.reference.len() != self.ideal.len() || self.reference.is_empty() {
            return Err(Error::Shape {
                op: "hv frame",
                dims: vec![vec![self.reference.len()], vec![self.ideal.len()]],
            });
        }
        let (r, z) = self.minimization();
        if r.iter().zip(&z).any(|(ri, zi)| !(zi < ri) || !ri.is_finite() || !zi.is_finite()) {
            return Err(invalid!("degenerate frame: ideal {:?} reference {:?}", self.ideal, self.reference));
        }
        Ok(())
    }

    /// `(reference, ideal)` in minimization orientation.
    pub fn minimization(&self) -> (Vec<f64>, Vec<f64>) {
        match self.sense {
            Sense::Minimize => (self.reference.clone(), self.ideal.clone()),
            Sense::Maximize => (
                self.reference.iter().map(|v| -v).collect(),
                self.ideal.iter().map(|v| -v).collect(),
            ),
        }
    }

    /// Volume of the box spanned by the ideal and reference points.
    pub fn box_volume(&self) -> f64 {
        self.reference.iter().zip(&self.ideal).map(|(r, z)| (r - z).abs()).product()
    }

    /// Standard frame for a problem family and size, where one is tabulated.
    ///
    /// Size 10 routing frames are a small-scale extension of the table
    /// (reference equal to the node count).
    pub fn reference(problem: Problem, kappa: usize, n: usize) -> Option<HvFrame> {
        let (r, z, sense): (Vec<f64>, Vec<f64>, Sense) = match (problem, kappa, n) {
            (Problem::Motsp, 2 | 3, _) => {
                let r = match (kappa, n) {
                    (_, 10) => 10.0,
                    (_, 20) => 20.0,
                    (_, 50) => 35.0,
                    (_, 100) => 65.0,
                    (2, 150) => 85.0,
                    (2, 200) => 115.0,
                    _ => return None,
                };
                (vec![r; kappa], vec![0.0; kappa], Sense::Minimize)
            }
            (Problem::Mocvrp, 2, _) => {
                let r = match n {
                    20 => 30.0,
                    50 => 45.0,
                    100 => 80.0,
                    _ => return None,
                };
                (vec![r, 4.0], vec![0.0, 0.0], Sense::Minimize)
            }
            (Problem::Mokp, 2, _) => {
                let (r, z) = match n {
                    50 => (5.0, 30.0),
                    100 => (20.0, 50.0),
                    200 => (30.0, 75.0),
                    _ => return None,
                };
                (vec![r, r], vec![z, z], Sense::Maximize)
            }
            _ => return None,
        };
        Some(HvFrame { reference: r, ideal: z, sense })
    }
}

/// Exact 2D hypervolume by a sorted sweep. Points must already lie in the box.
pub fn hv2d(points: &[[f64; 2]], reference: [f64; 2]) -> f64 {
    let mut pts: Vec<[f64; 2]> = points
        .iter()
        .copied()
        .filter(|p| p[0] < reference[0] && p[1] < reference[1])
        .collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut area = 0.0;
    let mut best_y = reference[1];
    for p in pts {
        if p[1] < best_y {
            area += (reference[0] - p[0]) * (best_y - p[1]);
            best_y = p[1];
        }
    }
    area
}

/// Exact 3D hypervolume by slicing along the third objective and summing
/// 2D sweeps over each slab.
pub fn hv3d(points: &[[f64; 3]], reference: [f64; 3]) -> f64 {
    let mut pts: Vec<[f64; 3]> = points
        .iter()
        .copied()
        .filter(|p| p[0] < reference[0] && p[1] < reference[1] && p[2] < reference[2])
        .collect();
    pts.sort_by(|a, b| a[2].total_cmp(&b[2]));
    let mut vol = 0.0;
    let mut slice: Vec<[f64; 2]> = Vec::with_capacity(pts.len());
    for i in 0..pts.len() {
        slice.push([pts[i][0], pts[i][1]]);
        let top = if i + 1 < pts.len() { pts[i + 1][2] } else { reference[2] };
        let depth = top - pts[i][2];
        if depth > 0.0 {
            vol += depth * hv2d(&slice, [reference[0], reference[1]]);
        }
    }
    vol
}

/// Hypervolume of minimization-oriented points, clipped to `[ideal, reference]`.
pub fn hypervolume_min(points: &[Vec<f64>], reference: &[f64], ideal: &[f64]) -> Result<f64> {
    let k = reference.len();
    if k < 2 || k > 3 {
        return Err(Error::Unsupported(alloc::format!("hypervolume with {k} objectives")));
    }
    if ideal.len() != k || points.iter().any(|p| p.len() != k) {
        return Err(Error::Shape { op: "hypervolume", dims: vec![vec![k], vec![ideal.len()]] });
    }
    let clip = |p: &Vec<f64>, i: usize| p[i].max(ideal[i]).min(reference[i]);
    Ok(if k == 2 {
        let pts: Vec<[f64; 2]> = points.iter().map(|p| [clip(p, 0), clip(p, 1)]).collect();
        hv2d(&pts, [reference[0], reference[1]])
    } else {
        let pts: Vec<[f64; 3]> = points.iter().map(|p| [clip(p, 0), clip(p, 1), clip(p, 2)]).collect();
        hv3d(&pts, [reference[0], reference[1], reference[2]])
    })
}

pub fn hypervolume(archive: &ParetoArchive, frame: &HvFrame) -> Result<f64> {
    frame.validate()?;
    if archive.sense != frame.sense {
        return Err(invalid!("archive and frame orientation differ"));
    }
    let (r, z) = frame.minimization();
    let pts: Vec<Vec<f64>> = archive.points.iter().map(ObjectiveVector::minimization).collect();
    hypervolume_min(&pts, &r, &z)
}

/// Hypervolume divided by the frame's box volume; lies in `[0, 1]`.
pub fn normalized_hv(archive: &ParetoArchive, frame: &HvFrame) -> Result<f64> {
    let hv = hypervolume(archive, frame)?;
    Ok(hv / frame.box_volume())
}

/// Relative shortfall of `hv` against `hv_ref`.
pub fn gap(hv: f64, hv_ref: f64) -> Result<f64> {
    if !(hv_ref > 0.0) {
        return Err(invalid!("reference hypervolume must be positive, got {hv_ref}"));
    }
    Ok((hv_ref - hv) / hv_ref)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn min(v: &[f64]) -> ObjectiveVector {
        ObjectiveVector::minimize(v.to_vec())
    }

    #[test]
    fn dominance_examples() {
        assert!(dominates(&min(&[1.0, 2.0]), &min(&[2.0, 3.0])).unwrap());
        assert!(!dominates(&min(&[1.0, 2.0]), &min(&[1.0, 2.0])).unwrap());
        assert!(!dominates(&min(&[1.0, 3.0]), &min(&[2.0, 2.0])).unwrap());
        assert!(!dominates(&min(&[2.0, 2.0]), &min(&[1.0, 3.0])).unwrap());
        assert!(dominates(&min(&[1.0]), &min(&[1.0, 2.0])).is_err());
        let a = ObjectiveVector::new(vec![3.0, 4.0], Sense::Maximize);
        let b = ObjectiveVector::new(vec![2.0, 4.0], Sense::Maximize);
        assert!(dominates(&a, &b).unwrap());
    }

    #[test]
    fn archive_examples() {
        let mut a = ParetoArchive::new(Sense::Minimize);
        a.insert(min(&[1.0, 1.0])).unwrap();
        assert_eq!(a.insert(min(&[2.0, 2.0])).unwrap(), InsertOutcome::Dominated);
        assert_eq!(a.insert(min(&[1.0, 1.0])).unwrap(), InsertOutcome::Dominated);
        assert_eq!(a.insert(min(&[0.0, 0.0])).unwrap(), InsertOutcome::Accepted(1));
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn hv_examples() {
        let frame = HvFrame::new(vec![1.0, 1.0], vec![0.0, 0.0], Sense::Minimize).unwrap();
        let mut a = ParetoArchive::new(Sense::Minimize);
        assert_eq!(hypervolume(&a, &frame).unwrap(), 0.0);
        assert_eq!(normalized_hv(&a, &frame).unwrap(), 0.0);
        a.insert(min(&[0.5, 0.5])).unwrap();
        assert_eq!(hypervolume(&a, &frame).unwrap(), 0.25);

        let frame4 = HvFrame::new(vec![4.0, 4.0], vec![0.0, 0.0], Sense::Minimize).unwrap();
        let mut b = ParetoArchive::new(Sense::Minimize);
        for p in [[1.0, 3.0], [2.0, 2.0], [3.0, 1.0]] {
            b.insert(min(&p)).unwrap();
        }
        assert_eq!(hypervolume(&b, &frame4).unwrap(), 6.0);

        let mut c = ParetoArchive::new(Sense::Minimize);
        c.insert(min(&[-1.0, -3.0])).unwrap();
        assert_eq!(normalized_hv(&c, &frame).unwrap(), 1.0);
    }

    #[test]
    fn reference_table() {
        let f = HvFrame::reference(Problem::Motsp, 2, 20).unwrap();
        assert_eq!(f.box_volume(), 400.0);
        let kp = HvFrame::reference(Problem::Mokp, 2, 50).unwrap();
        kp.validate().unwrap();
        assert_eq!(kp.box_volume(), 625.0);
        assert!(HvFrame::reference(Problem::Mocvrp, 3, 20).is_none());
        assert!(HvFrame::new(vec![1.0, 0.0], vec![0.0, 0.0], Sense::Minimize).is_err());
    }

    #[test]
    fn knapsack_mirroring() {
        let frame = HvFrame::new(vec![0.0, 0.0], vec![10.0, 10.0], Sense::Maximize).unwrap();
        let mut a = ParetoArchive::new(Sense::Maximize);
        a.insert(ObjectiveVector::new(vec![5.0, 5.0], Sense::Maximize)).unwrap();
        assert_eq!(hypervolume(&a, &frame).unwrap(), 25.0);
        assert_eq!(normalized_hv(&a, &frame).unwrap(), 0.25);
    }

    #[test]
    fn gap_examples() {
        assert_eq!(gap(0.5, 0.5).unwrap(), 0.0);
        assert_eq!(gap(0.0, 0.7).unwrap(), 1.0);
        assert!((gap(0.6392, 0.6411).unwrap() - 0.0029636562).abs() < 1e-9);
        assert!(gap(0.1, 0.0).is_err());
    }

    #[test]
    fn four_objectives_rejected() {
        assert!(hypervolume_min(&[vec![0.0; 4]], &[1.0; 4], &[0.0; 4]).is_err());
    }
}
