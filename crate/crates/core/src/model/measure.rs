//! Canonical measure μ = Z⁻¹ exp(-βV) dx and its partition function.
//!
//! Quadrature is deterministic: composite trapezoid with automatic tail
//! truncation for confining potentials on all of space, and a midpoint rule
//! with exact cell/domain overlap weights for hard-wall boxes (walls and
//! block faces land inside cells, where trapezoid nodes would see a
//! discontinuity). Each call checks self-convergence by doubling the
//! resolution.

use super::domain::Domain;
use super::potential::Potential;
use crate::error::{Error, Result};
use crate::grid::{Grid, GridDensity};

/// Relative tail cutoff: the integration box keeps every point whose
/// Boltzmann weight is at least this fraction of the maximum.
const TAIL_CUTOFF: f64 = 1e-14;

/// Relative self-convergence tolerance under resolution doubling.
const REFINEMENT_TOL: f64 = 1e-6;

/// Coarse scan half-width used to locate the relevant region of a
/// confining potential.
const SCAN_HALF_WIDTH: f64 = 32.0;

/// Find `[lo, hi]` per axis covering `{ V <= min V + ln(1/cutoff)/beta }`.
pub(crate) fn truncation_box(p: &Potential, beta: f64) -> Result<([f64; 2], [f64; 2])> {
    let dim = p.dim();
    let n = if dim == 1 { 8192 } else { 512 };
    let h = 2.0 * SCAN_HALF_WIDTH / n as f64;
    let mut vmin = f64::INFINITY;
    let coord = |i: usize| -SCAN_HALF_WIDTH + h * i as f64;
    let mut values = Vec::with_capacity(if dim == 1 { n + 1 } else { (n + 1) * (n + 1) });
    if dim == 1 {
        for i in 0..=n {
            values.push(p.energy([coord(i), 0.0]));
        }
    } else {
        for j in 0..=n {
            for i in 0..=n {
                values.push(p.energy([coord(i), coord(j)]));
            }
        }
    }
    for v in &values {
        if !v.is_finite() && !v.is_infinite() {
            return Err(Error::numerics("potential is NaN inside the scan box"));
        }
        vmin = vmin.min(*v);
    }
    if !vmin.is_finite() {
        return Err(Error::numerics("potential has no finite minimum in the scan box"));
    }
    let threshold = vmin + (1.0 / TAIL_CUTOFF).ln() / beta;
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut mark = |i: usize, j: usize| {
        lo[0] = lo[0].min(coord(i));
        hi[0] = hi[0].max(coord(i));
        if dim == 2 {
            lo[1] = lo[1].min(coord(j));
            hi[1] = hi[1].max(coord(j));
        }
    };
    if dim == 1 {
        for (i, v) in values.iter().enumerate() {
            if *v <= threshold {
                mark(i, 0);
            }
        }
    } else {
        for j in 0..=n {
            for i in 0..=n {
                if values[j * (n + 1) + i] <= threshold {
                    mark(i, j);
                }
            }
        }
    }
    if !lo[0].is_finite() {
        return Err(Error::numerics("no integrable region found for the potential"));
    }
    for a in 0..dim {
        lo[a] -= 2.0 * h;
        hi[a] += 2.0 * h;
        if lo[a] <= -SCAN_HALF_WIDTH || hi[a] >= SCAN_HALF_WIDTH {
            return Err(Error::numerics(
                "potential does not confine within the scan box; use a hard-wall domain",
            ));
        }
    }
    Ok((lo, hi))
}

fn trapezoid_all_space(p: &Potential, beta: f64, lo: [f64; 2], hi: [f64; 2], n: usize) -> f64 {
    let dim = p.dim();
    let grid = if dim == 1 {
        Grid::new_1d(lo[0], hi[0], n).expect("truncation box is valid")
    } else {
        Grid::new_2d(lo, hi, [n, n]).expect("truncation box is valid")
    };
    (0..grid.len())
        .map(|i| grid.weight(i) * (-beta * p.energy(grid.coords(i))).exp())
        .sum()
}

fn midpoint_hard_wall(p: &Potential, beta: f64, n: usize) -> f64 {
    let d = p.domain();
    let (lo, hi) = d.bounds().expect("hard-wall domain has bounds");
    let dim = p.dim();
    let hx = (hi[0] - lo[0]) / n as f64;
    if dim == 1 {
        let mut z = 0.0;
        for i in 0..n {
            let a = lo[0] + hx * i as f64;
            let cell_lo = [a, 0.0];
            let cell_hi = [a + hx, 1.0];
            let w = d.cell_overlap(cell_lo, cell_hi);
            if w > 0.0 {
                z += w * (-beta * p.energy([a + hx / 2.0, 0.0])).exp();
            }
        }
        z
    } else {
        let hy = (hi[1] - lo[1]) / n as f64;
        let mut z = 0.0;
        for j in 0..n {
            let b = lo[1] + hy * j as f64;
            for i in 0..n {
                let a = lo[0] + hx * i as f64;
                let w = d.cell_overlap([a, b], [a + hx, b + hy]);
                if w > 0.0 {
                    z += w * (-beta * p.energy([a + hx / 2.0, b + hy / 2.0])).exp();
                }
            }
        }
        z
    }
}

/// Partition function Z = ∫ exp(-βV) over the domain, with `n` quadrature
/// points (or cells) per axis. Fails if doubling the resolution moves the
/// result by more than 1e-6 relative.
pub fn partition_function(p: &Potential, beta: f64, n: usize) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::config("beta must be positive"));
    }
    if n < 64 {
        return Err(Error::config("partition function needs at least 64 points per axis"));
    }
    let (coarse, fine) = match p.domain() {
        Domain::AllSpace { .. } => {
            let (lo, hi) = truncation_box(p, beta)?;
            (
                trapezoid_all_space(p, beta, lo, hi, n),
                trapezoid_all_space(p, beta, lo, hi, 2 * n - 1),
            )
        }
        Domain::Box { .. } => {
            (midpoint_hard_wall(p, beta, n), midpoint_hard_wall(p, beta, 2 * n))
        }
    };
    if !fine.is_finite() || fine <= 0.0 {
        return Err(Error::numerics("partition function is not positive"));
    }
    if ((fine - coarse) / fine).abs() >= REFINEMENT_TOL {
        return Err(Error::numerics(format!(
            "quadrature not converged at {n} points per axis ({coarse} vs {fine}); refine the grid"
        )));
    }
    Ok(fine)
}

/// Normalized canonical measure for a potential at inverse temperature β.
#[derive(Debug, Clone)]
pub struct CanonicalMeasure {
    potential: Potential,
    beta: f64,
    z: f64,
}

impl CanonicalMeasure {
    pub fn new(potential: &Potential, beta: f64, resolution: usize) -> Result<CanonicalMeasure> {
        let z = partition_function(potential, beta, resolution)?;
        Ok(CanonicalMeasure { potential: potential.clone(), beta, z, })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    /// Density of μ with respect to Lebesgue measure (zero outside the
    /// domain).
    pub fn density(&self, x: [f64; 2]) -> f64 {
        if self.potential.domain().contains(x) {
            (-self.beta * self.potential.energy(x)).exp() / self.z
        } else {
            0.0
        }
    }

    /// Restriction of μ to a grid window, renormalized on that grid.
    pub fn grid_density(&self, grid: Grid) -> Result<GridDensity> {
        GridDensity::from_fn(grid, |x| self.density(x))
    }
}
