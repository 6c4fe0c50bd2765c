//! Uniform node-centered grids and densities on them.
//!
//! A [`Grid`] carries `n` nodes per axis; node `i` owns the cell
//! `[x_i - h/2, x_i + h/2)` clipped to the grid bounds, so the cell widths
//! coincide with composite-trapezoid weights. Histograms built on the same
//! grid therefore integrate to one by construction, and analytic densities
//! evaluated at the nodes integrate with O(h²) accuracy.

use crate::error::{Error, Result};
use rand::Rng;

/// Uniform 1D or 2D grid. For 1D grids the second axis is degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    lo: [f64; 2],
    hi: [f64; 2],
    n: [usize; 2],
}

impl Grid {
    pub fn new_1d(lo: f64, hi: f64, n: usize) -> Result<Grid> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config(format!("grid bounds [{lo}, {hi}] invalid")));
        }
        if n < 2 {
            return Err(Error::config("grid needs at least 2 nodes per axis"));
        }
        Ok(Grid { dim: 1, lo: [lo, 0.0], hi: [hi, 0.0], n: [n, 1] })
    }

    pub fn new_2d(lo: [f64; 2], hi: [f64; 2], n: [usize; 2]) -> Result<Grid> {
        for ax in 0..2 {
            if !(hi[ax] > lo[ax]) || !lo[ax].is_finite() || !hi[ax].is_finite() {
                return Err(Error::config(format!(
                    "grid bounds [{}, {}] invalid on axis {ax}",
                    lo[ax], hi[ax]
                )));
            }
            if n[ax] < 2 {
                return Err(Error::config("grid needs at least 2 nodes per axis"));
            }
        }
        Ok(Grid { dim: 2, lo, hi, n })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lo(&self) -> [f64; 2] {
        self.lo
    }

    pub fn hi(&self) -> [f64; 2] {
        self.hi
    }

    /// Nodes along one axis.
    pub fn n_axis(&self, ax: usize) -> usize {
        self.n[ax]
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.n[0] * self.n[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Node spacing along an axis.
    pub fn h(&self, ax: usize) -> f64 {
        if self.n[ax] == 1 {
            1.0
        } else {
            (self.hi[ax] - self.lo[ax]) / (self.n[ax] - 1) as f64
        }
    }

    pub fn node(&self, ax: usize, i: usize) -> f64 {
        self.lo[ax] + self.h(ax) * i as f64
    }

    /// Flat index -> per-axis indices (x fastest).
    pub fn unravel(&self, idx: usize) -> [usize; 2] {
        [idx % self.n[0], idx / self.n[0]]
    }

    pub fn ravel(&self, ij: [usize; 2]) -> usize {
        ij[1] * self.n[0] + ij[0]
    }

    /// Coordinates of a flat node index.
    pub fn coords(&self, idx: usize) -> [f64; 2] {
        let ij = self.unravel(idx);
        [self.node(0, ij[0]), if self.dim == 2 { self.node(1, ij[1]) } else { 0.0 }]
    }

    fn axis_weight(&self, ax: usize, i: usize) -> f64 {
        if self.n[ax] == 1 {
            1.0
        } else if i == 0 || i == self.n[ax] - 1 {
            self.h(ax) / 2.0
        } else {
            self.h(ax)
        }
    }

    /// Trapezoid weight of a node (product over axes).
    pub fn weight(&self, idx: usize) -> f64 {
        let ij = self.unravel(idx);
        self.axis_weight(0, ij[0]) * if self.dim == 2 { self.axis_weight(1, ij[1]) } else { 1.0 }
    }

    fn axis_bin(&self, ax: usize, x: f64) -> Option<usize> {
        let h = self.h(ax);
        if x < self.lo[ax] - h / 2.0 || x >= self.hi[ax] + h / 2.0 {
            return None;
        }
        let i = ((x - self.lo[ax]) / h + 0.5).floor() as isize;
        Some(i.clamp(0, self.n[ax] as isize - 1) as usize)
    }

    /// Node whose cell contains `x`, or `None` outside the grid.
    pub fn bin_of(&self, x: [f64; 2]) -> Option<usize> {
        let i = self.axis_bin(0, x[0])?;
        if self.dim == 1 {
            return Some(i);
        }
        let j = self.axis_bin(1, x[1])?;
        Some(self.ravel([i, j]))
    }

    /// Trapezoid integral of nodal values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.len());
        values.iter().enumerate().map(|(i, v)| self.weight(i) * v).sum()
    }
}

/// Density sampled at the nodes of a [`Grid`], normalized so that the
/// trapezoid integral is one.
#[derive(Debug, Clone)]
pub struct GridDensity {
    grid: Grid,
    values: Vec<f64>,
}

impl GridDensity {
    /// Build from a function and normalize.
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 2]) -> f64) -> Result<GridDensity> {
        let values: Vec<f64> = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        GridDensity::from_values(grid, values)
    }

    /// Build from raw nodal values and normalize.
    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<GridDensity> {
        if values.len() != grid.len() {
            return Err(Error::config("density values do not match grid size"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::numerics("density values must be finite and nonnegative"));
        }
        let mut d = GridDensity { grid, values };
        d.normalize()?;
        Ok(d)
    }

    /// Histogram of samples; points outside the grid are dropped.
    pub fn from_samples<'a>(
        grid: Grid,
        samples: impl IntoIterator<Item = &'a [f64; 2]>,
    ) -> Result<GridDensity> {
        let mut counts = vec![0.0f64; grid.len()];
        let mut kept = 0u64;
        for x in samples {
            if let Some(b) = grid.bin_of(*x) {
                counts[b] += 1.0;
                kept += 1;
            }
        }
        if kept == 0 {
            return Err(Error::statistics("no samples fall inside the histogram grid"));
        }
        for (i, c) in counts.iter_mut().enumerate() {
            *c /= kept as f64 * grid.weight(i);
        }
        GridDensity::from_values(grid, counts)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Trapezoid integral (one after normalization).
    pub fn integral(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    pub fn normalize(&mut self) -> Result<()> {
        let z = self.integral();
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::numerics(format!("density integral {z} not positive")));
        }
        for v in &mut self.values {
            *v /= z;
        }
        Ok(())
    }

    /// Add `eps` to every node and renormalize. Used before taking
    /// logarithms of histogram estimates.
    pub fn regularized(&self, eps: f64) -> GridDensity {
        let values: Vec<f64> = self.values.iter().map(|v| v + eps).collect();
        GridDensity::from_values(self.grid.clone(), values).expect("regularization keeps density valid")
    }

    /// Probability mass of each node cell.
    pub fn cell_masses(&self) -> Vec<f64> {
        (0..self.grid.len()).map(|i| self.values[i] * self.grid.weight(i)).collect()
    }

    /// Draw a sample: pick a cell by mass, then uniformly inside it.
    pub fn sample(&self, rng: &mut impl Rng) -> [f64; 2] {
        let masses = self.cell_masses();
        let total: f64 = masses.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut idx = masses.len() - 1;
        for (i, m) in masses.iter().enumerate() {
            if u < *m {
                idx = i;
                break;
            }
            u -= m;
        }
        let ij = self.grid.unravel(idx);
        let mut out = [0.0; 2];
        for ax in 0..self.grid.dim() {
            let i = ij[ax];
            let h = self.grid.h(ax);
            let c = self.grid.node(ax, i);
            let a = (c - h / 2.0).max(self.grid.lo[ax]);
            let b = (c + h / 2.0).min(self.grid.hi[ax]);
            out[ax] = a + (b - a) * rng.random::<f64>();
        }
        out
    }

    /// Reduce onto a coarser grid by redistributing cell masses.
    pub fn rebin(&self, coarse: Grid) -> Result<GridDensity> {
        if coarse.dim() != self.grid.dim() {
            return Err(Error::config("rebin requires matching dimension"));
        }
        let masses = self.cell_masses();
        let mut out = vec![0.0f64; coarse.len()];
        let mut kept = 0.0;
        for (i, m) in masses.iter().enumerate() {
            if let Some(b) = coarse.bin_of(self.grid.coords(i)) {
                out[b] += m;
                kept += m;
            }
        }
        if kept <= 0.0 {
            return Err(Error::numerics("rebin target does not overlap the density support"));
        }
        for (i, v) in out.iter_mut().enumerate() {
            *v /= coarse.weight(i);
        }
        GridDensity::from_values(coarse, out)
    }
}

/// Total-variation distance between two densities on the same grid.
pub fn tv_distance(a: &GridDensity, b: &GridDensity) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::config("total-variation distance requires a common grid"));
    }
    let d = (0..a.grid.len())
        .map(|i| a.grid.weight(i) * (a.values[i] - b.values[i]).abs())
        .sum::<f64>();
    Ok(0.5 * d)
}
