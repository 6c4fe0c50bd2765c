//! Simulation domains.
//!
//! A domain is either all of space (the potential is assumed confining) or a
//! hard-wall box, optionally with periodic axes and excluded axis-aligned
//! blocks. Hard walls are geometry, not energy: the integrator reflects
//! off them and quadrature weights vanish behind them.

use crate::error::{Error, Result};

/// Excluded axis-aligned rectangle inside a hard-wall box. Points in the
/// open interior of a block are outside the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Block {
    fn contains_open(&self, x: [f64; 2], dim: usize) -> bool {
        (0..dim).all(|a| x[a] > self.lo[a] && x[a] < self.hi[a])
    }

    fn overlap_area(&self, lo: [f64; 2], hi: [f64; 2], dim: usize) -> f64 {
        let mut area = 1.0;
        for a in 0..dim {
            let w = (hi[a].min(self.hi[a]) - lo[a].max(self.lo[a])).max(0.0);
            area *= w;
        }
        area
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    /// Unbounded; only meaningful with a confining potential.
    AllSpace { dim: usize },
    /// Box with reflecting (or periodic) walls and optional excluded blocks.
    Box {
        dim: usize,
        lo: [f64; 2],
        hi: [f64; 2],
        periodic: [bool; 2],
        blocks: Vec<Block>,
    },
}

impl Domain {
    pub fn all_space(dim: usize) -> Domain {
        Domain::AllSpace { dim }
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Domain> {
        Domain::boxed(1, [lo, 0.0], [hi, 1.0], [false, false], Vec::new())
    }

    pub fn rectangle(lo: [f64; 2], hi: [f64; 2]) -> Result<Domain> {
        Domain::boxed(2, lo, hi, [false, false], Vec::new())
    }

    pub fn boxed(
        dim: usize,
        lo: [f64; 2],
        hi: [f64; 2],
        periodic: [bool; 2],
        blocks: Vec<Block>,
    ) -> Result<Domain> {
        if dim == 0 || dim > 2 {
            return Err(Error::config("domain dimension must be 1 or 2"));
        }
        for a in 0..dim {
            if !(hi[a] > lo[a]) || !lo[a].is_finite() || !hi[a].is_finite() {
                return Err(Error::config(format!(
                    "box bounds [{}, {}] invalid on axis {a}",
                    lo[a], hi[a]
                )));
            }
        }
        for b in &blocks {
            for a in 0..dim {
                if !(b.hi[a] > b.lo[a]) {
                    return Err(Error::config("block bounds must be nonempty"));
                }
            }
        }
        for (i, b) in blocks.iter().enumerate() {
            for c in &blocks[i + 1..] {
                if b.overlap_area(c.lo, c.hi, dim) > 0.0 {
                    return Err(Error::config("excluded blocks must be disjoint"));
                }
            }
        }
        if !blocks.is_empty() && (periodic[0] || periodic[1]) {
            return Err(Error::config("blocks and periodic axes cannot be combined"));
        }
        Ok(Domain::Box { dim, lo, hi, periodic, blocks })
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::AllSpace { dim } => *dim,
            Domain::Box { dim, .. } => *dim,
        }
    }

    pub fn contains(&self, x: [f64; 2]) -> bool {
        match self {
            Domain::AllSpace { .. } => true,
            Domain::Box { dim, lo, hi, blocks, .. } => {
                for a in 0..*dim {
                    if x[a] < lo[a] || x[a] > hi[a] {
                        return false;
                    }
                }
                !blocks.iter().any(|b| b.contains_open(x, *dim))
            }
        }
    }

    /// Bounding box of a hard-wall domain.
    pub fn bounds(&self) -> Option<([f64; 2], [f64; 2])> {
        match self {
            Domain::AllSpace { .. } => None,
            Domain::Box { lo, hi, .. } => Some((*lo, *hi)),
        }
    }

    pub fn is_periodic(&self, ax: usize) -> bool {
        match self {
            Domain::AllSpace { .. } => false,
            Domain::Box { periodic, .. } => periodic[ax],
        }
    }

    /// Lebesgue measure of a hard-wall domain.
    pub fn volume(&self) -> Option<f64> {
        match self {
            Domain::AllSpace { .. } => None,
            Domain::Box { dim, lo, hi, blocks, .. } => {
                let mut v = 1.0;
                for a in 0..*dim {
                    v *= hi[a] - lo[a];
                }
                for b in blocks {
                    v -= b.overlap_area(*lo, *hi, *dim);
                }
                Some(v)
            }
        }
    }

    /// Area of `cell ∩ domain` for an axis-aligned cell, used as an exact
    /// quadrature weight near walls and block faces.
    pub fn cell_overlap(&self, cell_lo: [f64; 2], cell_hi: [f64; 2]) -> f64 {
        match self {
            Domain::AllSpace { dim } => {
                let mut v = 1.0;
                for a in 0..*dim {
                    v *= cell_hi[a] - cell_lo[a];
                }
                v
            }
            Domain::Box { dim, lo, hi, blocks, .. } => {
                let mut v = 1.0;
                let mut clo = cell_lo;
                let mut chi = cell_hi;
                for a in 0..*dim {
                    clo[a] = clo[a].max(lo[a]);
                    chi[a] = chi[a].min(hi[a]);
                    let w = chi[a] - clo[a];
                    if w <= 0.0 {
                        return 0.0;
                    }
                    v *= w;
                }
                for b in blocks {
                    v -= b.overlap_area(clo, chi, *dim);
                }
                v.max(0.0)
            }
        }
    }

    /// Allowed segments of the line `{x_axis = t}` inside the domain,
    /// parameterized by the other coordinate. 1D sections of 2D domains.
    pub fn sections(&self, axis: usize, t: f64) -> Result<Vec<(f64, f64)>> {
        let other = 1 - axis;
        match self {
            Domain::AllSpace { dim } => {
                if *dim != 2 {
                    return Err(Error::config("sections need a 2D domain"));
                }
                Ok(vec![(f64::NEG_INFINITY, f64::INFINITY)])
            }
            Domain::Box { dim, lo, hi, blocks, .. } => {
                if *dim != 2 {
                    return Err(Error::config("sections need a 2D domain"));
                }
                if t < lo[axis] || t > hi[axis] {
                    return Ok(Vec::new());
                }
                // Collect blocked intervals along the other axis.
                let mut cuts: Vec<(f64, f64)> = blocks
                    .iter()
                    .filter(|b| t > b.lo[axis] && t < b.hi[axis])
                    .map(|b| (b.lo[other], b.hi[other]))
                    .collect();
                cuts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite bounds"));
                let mut segments = Vec::new();
                let mut cursor = lo[other];
                for (a, b) in cuts {
                    if a > cursor {
                        segments.push((cursor, a.min(hi[other])));
                    }
                    cursor = cursor.max(b);
                }
                if cursor < hi[other] {
                    segments.push((cursor, hi[other]));
                }
                Ok(segments.into_iter().filter(|(a, b)| b > a).collect())
            }
        }
    }

    /// Narrowest wall-to-wall width, probed over fine sections along each
    /// axis. Drives the time-step stability guard. `None` for all-space.
    pub fn shortest_width(&self) -> Option<f64> {
        match self {
            Domain::AllSpace { .. } => None,
            Domain::Box { dim, lo, hi, blocks, .. } => {
                if *dim == 1 || blocks.is_empty() {
                    let mut w = hi[0] - lo[0];
                    if *dim == 2 {
                        w = w.min(hi[1] - lo[1]);
                    }
                    return Some(w);
                }
                let mut w = f64::INFINITY;
                for axis in 0..2 {
                    let n = 512;
                    for i in 0..=n {
                        let t = lo[axis] + (hi[axis] - lo[axis]) * i as f64 / n as f64;
                        for (a, b) in self.sections(axis, t).expect("2D box has sections") {
                            w = w.min(b - a);
                        }
                    }
                }
                Some(w)
            }
        }
    }

    /// Map a proposed position back into the domain: wrap periodic axes,
    /// reflect specularly off walls and block faces, repeating until inside.
    /// Falls back to `prev` in the pathological case where reflection fails
    /// to settle (possible only for steps comparable to the geometry).
    pub fn apply_boundary(&self, proposed: [f64; 2], prev: [f64; 2]) -> [f64; 2] {
        match self {
            Domain::AllSpace { .. } => proposed,
            Domain::Box { dim, lo, hi, periodic, blocks } => {
                let mut x = proposed;
                if (0..*dim).any(|a| !x[a].is_finite()) {
                    return prev;
                }
                for _ in 0..64 {
                    for a in 0..*dim {
                        let w = hi[a] - lo[a];
                        if periodic[a] {
                            x[a] = lo[a] + (x[a] - lo[a]).rem_euclid(w);
                        } else {
                            // Fold into the box; two passes cover overshoot
                            // beyond the opposite wall for moderate steps.
                            while x[a] < lo[a] || x[a] > hi[a] {
                                if x[a] < lo[a] {
                                    x[a] = 2.0 * lo[a] - x[a];
                                }
                                if x[a] > hi[a] {
                                    x[a] = 2.0 * hi[a] - x[a];
                                }
                            }
                        }
                    }
                    let mut inside = true;
                    for b in blocks {
                        if b.contains_open(x, *dim) {
                            inside = false;
                            // Reflect across the nearest block face.
                            let mut best = (f64::INFINITY, 0usize, 0.0f64);
                            for a in 0..*dim {
                                let d_lo = x[a] - b.lo[a];
                                let d_hi = b.hi[a] - x[a];
                                if d_lo < best.0 {
                                    best = (d_lo, a, b.lo[a]);
                                }
                                if d_hi < best.0 {
                                    best = (d_hi, a, b.hi[a]);
                                }
                            }
                            let (_, a, face) = best;
                            x[a] = 2.0 * face - x[a];
                            break;
                        }
                    }
                    if inside && self.contains(x) {
                        return x;
                    }
                }
                prev
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corridor_domain() -> Domain {
        // [-1,1]^2 with slabs above and below a corridor |y| <= 0.1 for
        // |x| <= 0.2.
        Domain::boxed(
            2,
            [-1.0, -1.0],
            [1.0, 1.0],
            [false, false],
            vec![
                Block { lo: [-0.2, 0.1], hi: [0.2, 1.0] },
                Block { lo: [-0.2, -1.0], hi: [0.2, -0.1] },
            ],
        )
        .unwrap()
    }

    #[test]
    fn corridor_membership() {
        let d = corridor_domain();
        assert!(d.contains([0.0, 0.0]));
        assert!(d.contains([0.0, 0.1]));
        assert!(!d.contains([0.0, 0.5]));
        assert!(d.contains([0.5, 0.5]));
        assert!(!d.contains([0.0, -0.3]));
    }

    #[test]
    fn corridor_volume_and_width() {
        let d = corridor_domain();
        // 4 - 2 * (0.4 * 0.9) = 3.28
        assert!((d.volume().unwrap() - 3.28).abs() < 1e-12);
        assert!((d.shortest_width().unwrap() - 0.2).abs() < 1e-9);
    }

    #[test]
    fn sections_split_at_blocks() {
        let d = corridor_domain();
        let s = d.sections(0, 0.0).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0].0 - -0.1).abs() < 1e-12 && (s[0].1 - 0.1).abs() < 1e-12);
        let s = d.sections(0, 0.5).unwrap();
        assert_eq!(s, vec![(-1.0, 1.0)]);
    }

    #[test]
    fn reflection_returns_inside() {
        let d = corridor_domain();
        let x = d.apply_boundary([0.05, 0.13], [0.05, 0.08]);
        assert!(d.contains(x));
        assert!((x[1] - 0.07).abs() < 1e-12);
        let x = d.apply_boundary([1.02, 0.5], [0.98, 0.5]);
        assert!((x[0] - 0.98).abs() < 1e-12);
    }

    #[test]
    fn periodic_wrap() {
        let d = Domain::boxed(1, [0.0, 0.0], [1.0, 1.0], [true, false], Vec::new()).unwrap();
        let x = d.apply_boundary([1.25, 0.0], [0.9, 0.0]);
        assert!((x[0] - 0.25).abs() < 1e-12);
        let x = d.apply_boundary([-0.25, 0.0], [0.1, 0.0]);
        assert!((x[0] - 0.75).abs() < 1e-12);
    }
}
