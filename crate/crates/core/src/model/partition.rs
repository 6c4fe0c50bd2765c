//! State partitions: labeled open boxes with pairwise disjoint interiors.
//! Points on region boundaries or in uncovered gaps classify to no state.

use crate::error::{Error, Result};

/// One labeled region. Bounds may be infinite; membership is strict, so
/// boundary points belong to no region.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub label: usize,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Region {
    pub fn new_1d(label: usize, lo: f64, hi: f64) -> Region {
        Region { label, lo: [lo, f64::NEG_INFINITY], hi: [hi, f64::INFINITY] }
    }

    pub fn new_2d(label: usize, lo: [f64; 2], hi: [f64; 2]) -> Region {
        Region { label, lo, hi }
    }

    fn contains(&self, x: [f64; 2], dim: usize) -> bool {
        (0..dim).all(|a| x[a] > self.lo[a] && x[a] < self.hi[a])
    }

    fn overlaps(&self, other: &Region, dim: usize) -> bool {
        (0..dim).all(|a| self.lo[a] < other.hi[a] && other.lo[a] < self.hi[a])
    }

    /// Finite bounds check, needed when a region doubles as an eigensolver
    /// window.
    pub fn is_bounded(&self, dim: usize) -> bool {
        (0..dim).all(|a| self.lo[a].is_finite() && self.hi[a].is_finite())
    }
}

/// A collection of disjoint labeled regions.
#[derive(Debug, Clone)]
pub struct StatePartition {
    dim: usize,
    regions: Vec<Region>,
}

impl StatePartition {
    pub fn new(dim: usize, regions: Vec<Region>) -> Result<StatePartition> {
        if regions.is_empty() {
            return Err(Error::config("state partition needs at least one region"));
        }
        for r in &regions {
            for a in 0..dim {
                if !(r.hi[a] > r.lo[a]) {
                    return Err(Error::config(format!("region {} has empty extent", r.label)));
                }
            }
        }
        let mut labels: Vec<usize> = regions.iter().map(|r| r.label).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != regions.len() {
            return Err(Error::config("region labels must be distinct"));
        }
        for (i, r) in regions.iter().enumerate() {
            for s in &regions[i + 1..] {
                if r.overlaps(s, dim) {
                    return Err(Error::config(format!(
                        "regions {} and {} overlap",
                        r.label, s.label
                    )));
                }
            }
        }
        Ok(StatePartition { dim, regions })
    }

    /// Two half-lines split at `c`: label 0 left, label 1 right.
    pub fn split_1d(c: f64) -> StatePartition {
        StatePartition::new(
            1,
            vec![
                Region::new_1d(0, f64::NEG_INFINITY, c),
                Region::new_1d(1, c, f64::INFINITY),
            ],
        )
        .expect("half-line split is valid")
    }

    /// Two finite cores `(lo, a)` and `(b, hi)` with an uncovered buffer
    /// `[a, b]` between them.
    pub fn cores_1d(lo: f64, a: f64, b: f64, hi: f64) -> Result<StatePartition> {
        StatePartition::new(
            1,
            vec![Region::new_1d(0, lo, a), Region::new_1d(1, b, hi)],
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, label: usize) -> Option<&Region> {
        self.regions.iter().find(|r| r.label == label)
    }

    /// Label of the region strictly containing `x`, or `None`.
    pub fn state_of(&self, x: [f64; 2]) -> Option<usize> {
        self.regions.iter().find(|r| r.contains(x, self.dim)).map(|r| r.label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_classifies_and_excludes_boundary() {
        let p = StatePartition::split_1d(0.0);
        assert_eq!(p.state_of([-0.5, 0.0]), Some(0));
        assert_eq!(p.state_of([0.5, 0.0]), Some(1));
        assert_eq!(p.state_of([0.0, 0.0]), None);
    }

    #[test]
    fn overlap_rejected() {
        let r = vec![Region::new_1d(0, -1.0, 0.1), Region::new_1d(1, 0.0, 1.0)];
        assert!(StatePartition::new(1, r).is_err());
    }

    #[test]
    fn duplicate_labels_rejected() {
        let r = vec![Region::new_1d(0, -1.0, 0.0), Region::new_1d(0, 0.0, 1.0)];
        assert!(StatePartition::new(1, r).is_err());
    }

    #[test]
    fn gap_between_cores_is_no_state() {
        let p = StatePartition::cores_1d(-2.5, -0.15, 0.15, 2.5).unwrap();
        assert_eq!(p.state_of([-1.0, 0.0]), Some(0));
        assert_eq!(p.state_of([0.0, 0.0]), None);
        assert_eq!(p.state_of([1.0, 0.0]), Some(1));
    }
}
