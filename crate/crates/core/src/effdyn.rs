//! Effective one-dimensional dynamics along a reaction coordinate:
//! conditional drift and diffusion coefficients, simulation of the closed
//! equation, and the marginal-law distance that measures how well the
//! closure tracks the full dynamics.

use crate::error::{Error, Result};
use crate::grid::{Grid, GridDensity};
use crate::model::{Potential, RcRange, ReactionCoordinate};
use crate::sampler::{SimConfig, Trajectory};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// How a coefficient table was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoeffMethod {
    /// Conditional Boltzmann averages by direct quadrature (axis
    /// coordinates only).
    Quadrature,
    /// Per-bin averages along an equilibrium trajectory.
    Trajectory,
}

/// Tabulated drift and squared diffusion of the effective dynamics
/// dz = b(z) dt + sqrt(2 sigma^2(z) / beta) dW on a uniform bin grid.
#[derive(Debug, Clone)]
pub struct EffectiveCoefficients {
    range: RcRange,
    z: Vec<f64>,
    b: Vec<f64>,
    sigma2: Vec<f64>,
    counts: Vec<u64>,
    method: CoeffMethod,
}

impl EffectiveCoefficients {
    pub fn range(&self) -> RcRange {
        self.range
    }

    pub fn bins(&self) -> usize {
        self.z.len()
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn method(&self) -> CoeffMethod {
        self.method
    }

    fn bin_width(&self) -> f64 {
        let (lo, hi) = self.range.bounds();
        (hi - lo) / self.z.len() as f64
    }

    /// Nearest bin, clamped to the table edges on an interval range.
    pub fn clamped_bin(&self, z: f64) -> usize {
        let (lo, _) = self.range.bounds();
        let z = self.range.wrap(z);
        let idx = ((z - lo) / self.bin_width()).floor();
        if idx < 0.0 {
            0
        } else {
            (idx as usize).min(self.z.len() - 1)
        }
    }
}

/// Conditional drift sample -grad V . grad xi + (1/beta) lap xi at a point.
fn drift_sample(p: &Potential, xi: &ReactionCoordinate, beta: f64, x: [f64; 2]) -> f64 {
    let g = p.gradient(x);
    let gx = xi.gradient(x);
    -(g[0] * gx[0] + g[1] * gx[1]) + xi.laplacian(x, p.dim()) / beta
}

/// Number of quadrature nodes per transverse slice.
const SLICE_NODES: usize = 2049;

/// Effective coefficients of an axis coordinate by direct quadrature of
/// the conditional Boltzmann averages on each level slice:
/// b(z) = E(-dV/dz | xi = z) and sigma^2(z) = 1.
pub fn estimate_coefficients_quadrature(
    p: &Potential,
    xi: &ReactionCoordinate,
    beta: f64,
    bins: usize,
) -> Result<EffectiveCoefficients> {
    if beta <= 0.0 {
        return Err(Error::config("beta must be positive"));
    }
    if bins < 4 {
        return Err(Error::config("coefficient table needs at least 4 bins"));
    }
    let axis = xi.as_axis().ok_or_else(|| {
        Error::config("quadrature coefficients need an axis-projection coordinate")
    })?;
    let range = xi.range();
    let (lo, hi) = range.bounds();
    let dz = (hi - lo) / bins as f64;

    let all_space_span: Option<(f64, f64)> = if p.domain().bounds().is_none() && p.dim() == 2 {
        let (blo, bhi) = crate::model::truncation_box(p, beta)?;
        let other = 1 - axis;
        Some((blo[other], bhi[other]))
    } else {
        None
    };

    let mut z = Vec::with_capacity(bins);
    let mut b = Vec::with_capacity(bins);
    for i in 0..bins {
        let zi = lo + (i as f64 + 0.5) * dz;
        let (mass, flux) = if p.dim() == 1 {
            let w = (-beta * p.energy([zi, 0.0])).exp();
            (w, -p.gradient([zi, 0.0])[0] * w)
        } else {
            let segments = if let Some(span) = all_space_span {
                vec![span]
            } else {
                p.domain().sections(axis, zi)?
            };
            let other = 1 - axis;
            let mut mass = 0.0;
            let mut flux = 0.0;
            for &(a0, b0) in &segments {
                if !(b0 > a0) {
                    continue;
                }
                let h = (b0 - a0) / (SLICE_NODES - 1) as f64;
                for k in 0..SLICE_NODES {
                    let y = a0 + h * k as f64;
                    let mut x = [0.0; 2];
                    x[axis] = zi;
                    x[other] = y;
                    let wq = if k == 0 || k == SLICE_NODES - 1 { 0.5 } else { 1.0 };
                    let w = wq * (-beta * p.energy(x)).exp() * h;
                    mass += w;
                    flux += w * (-p.gradient(x)[axis]);
                }
            }
            (mass, flux)
        };
        if mass <= 0.0 || !mass.is_finite() {
            return Err(Error::numerics(format!(
                "conditional mass underflows at z = {zi:.6}; shrink the coordinate range"
            )));
        }
        z.push(zi);
        b.push(flux / mass);
    }
    Ok(EffectiveCoefficients {
        range,
        z,
        b,
        sigma2: vec![1.0; bins],
        counts: vec![0; bins],
        method: CoeffMethod::Quadrature,
    })
}

/// Effective coefficients from per-bin averages along an equilibrium
/// trajectory. Bins never visited outside the sampled hull inherit the
/// nearest visited values so the simulated dynamics sees no artificial
/// absorbing wall; an unvisited bin strictly inside the hull means the
/// run is too short and is an error.
pub fn estimate_coefficients_trajectory(
    p: &Potential,
    xi: &ReactionCoordinate,
    cfg: &SimConfig,
    x0: [f64; 2],
    n_steps: u64,
    bins: usize,
) -> Result<EffectiveCoefficients> {
    cfg.validate_for(p)?;
    if bins < 4 {
        return Err(Error::config("coefficient table needs at least 4 bins"));
    }
    let range = xi.range();
    let (lo, hi) = range.bounds();
    let dz = (hi - lo) / bins as f64;
    let mut sum_b = vec![0.0; bins];
    let mut sum_s2 = vec![0.0; bins];
    let mut counts = vec![0u64; bins];
    let beta = cfg.beta;
    crate::sampler::run_until(p, cfg, x0, n_steps, |_, x| {
        let zc = range.wrap(xi.value(x));
        if zc >= lo && zc <= hi {
            let idx = (((zc - lo) / dz) as usize).min(bins - 1);
            let gx = xi.gradient(x);
            sum_b[idx] += drift_sample(p, xi, beta, x);
            sum_s2[idx] += gx[0] * gx[0] + gx[1] * gx[1];
            counts[idx] += 1;
        }
        false
    })?;

    let first = counts.iter().position(|&c| c > 0);
    let last = counts.iter().rposition(|&c| c > 0);
    let (first, last) = match (first, last) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::statistics("trajectory never entered the coordinate range")),
    };
    for i in first..=last {
        if counts[i] == 0 {
            return Err(Error::statistics(format!(
                "unvisited bin {i} inside the sampled range; run longer or coarsen bins"
            )));
        }
    }
    let mut z = Vec::with_capacity(bins);
    let mut b = vec![0.0; bins];
    let mut sigma2 = vec![0.0; bins];
    for i in 0..bins {
        z.push(lo + (i as f64 + 0.5) * dz);
        let src = i.clamp(first, last);
        b[i] = sum_b[src] / counts[src] as f64;
        sigma2[i] = sum_s2[src] / counts[src] as f64;
    }
    Ok(EffectiveCoefficients {
        range,
        z,
        b,
        sigma2,
        counts,
        method: CoeffMethod::Trajectory,
    })
}

/// Integrate the effective equation with Euler-Maruyama and nearest-bin
/// coefficient lookup. Exiting the table range is an error on an interval
/// range (the table carries no information there); periodic ranges wrap.
pub fn simulate_effective(
    coeffs: &EffectiveCoefficients,
    cfg: &SimConfig,
    z0: f64,
    n_steps: u64,
    stride: u64,
) -> Result<Trajectory> {
    if cfg.dt <= 0.0 || cfg.beta <= 0.0 {
        return Err(Error::config("time step and beta must be positive"));
    }
    if stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    let range = coeffs.range();
    let (lo, hi) = range.bounds();
    let z0 = range.wrap(z0);
    if z0 < lo || z0 > hi {
        return Err(Error::config("initial point outside the coefficient range"));
    }
    let mut rng = cfg.rng();
    let mut z = z0;
    let mut positions = Vec::with_capacity((n_steps / stride + 1) as usize);
    positions.push([z, 0.0]);
    let root = (2.0 * cfg.dt / cfg.beta).sqrt();
    for step in 1..=n_steps {
        let bin = coeffs.clamped_bin(z);
        let g: f64 = StandardNormal.sample(&mut rng);
        z += coeffs.b()[bin] * cfg.dt + root * coeffs.sigma2()[bin].sqrt() * g;
        if range.is_torus() {
            z = range.wrap(z);
        } else if z < lo || z > hi {
            return Err(Error::numerics(format!(
                "effective trajectory left the coefficient range at step {step} (z = {z:.4})"
            )));
        }
        if step % stride == 0 {
            positions.push([z, 0.0]);
        }
    }
    Ok(Trajectory { dim: 1, dt: cfg.dt, stride, positions })
}

/// Distance between the coordinate marginal of the full dynamics and the
/// law of the effective dynamics at one observation time.
#[derive(Debug, Clone, Copy)]
pub struct MarginalDistance {
    pub t: f64,
    /// Bias-corrected relative entropy of the full-dynamics marginal
    /// against the effective law, clamped at zero.
    pub kl: f64,
}

/// Histogram bins for marginal comparisons.
const MARGINAL_BINS: usize = 64;

/// Relative entropy between two count histograms on the same bins.
/// Adjacent bins are pooled until both sides hold at least 5 counts, which
/// keeps single stray samples against an empty reference bin from blowing
/// up the logarithm; the plug-in bias of both empirical laws is then
/// subtracted and the result clamped at zero.
fn corrected_kl(counts_p: &[u64], counts_q: &[u64], n_p: f64, n_q: f64) -> Result<f64> {
    if counts_p.len() != counts_q.len() {
        return Err(Error::config("histogram lengths disagree"));
    }
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut accp = 0.0;
    let mut accq = 0.0;
    for (&a, &b) in counts_p.iter().zip(counts_q) {
        accp += a as f64;
        accq += b as f64;
        if accp >= 5.0 && accq >= 5.0 {
            cells.push((accp, accq));
            accp = 0.0;
            accq = 0.0;
        }
    }
    if accp > 0.0 || accq > 0.0 {
        match cells.last_mut() {
            Some(last) => {
                last.0 += accp;
                last.1 += accq;
            }
            None => cells.push((accp, accq)),
        }
    }
    let mut h = 0.0;
    for &(a, b) in &cells {
        let pp = a / n_p;
        if pp <= 0.0 {
            continue;
        }
        let qq = b / n_q;
        h += pp * ((pp + 1e-12) / (qq + 1e-12)).ln();
    }
    let cells_n = cells.len().max(1) as f64;
    let bias = (cells_n - 1.0) / (2.0 * n_p) + (cells_n - 1.0) / (2.0 * n_q);
    Ok((h - bias).max(0.0))
}

/// Compare the law of xi(X_t) under the full dynamics with the law of the
/// effective dynamics started from the matched initial condition
/// z_0 = xi(X_0), walker by walker, with independent noise. Returns the
/// bias-corrected histogram relative entropy at each requested time.
pub fn marginal_distance(
    p: &Potential,
    xi: &ReactionCoordinate,
    coeffs: &EffectiveCoefficients,
    cfg: &SimConfig,
    psi0: &GridDensity,
    times: &[f64],
    n_paths: usize,
) -> Result<Vec<MarginalDistance>> {
    cfg.validate_for(p)?;
    if n_paths < 1000 {
        return Err(Error::config("marginal comparison needs at least 1000 paths"));
    }
    if times.is_empty() {
        return Err(Error::config("no observation times given"));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    if sorted[0] < 0.0 {
        return Err(Error::config("observation times must be nonnegative"));
    }
    let steps_at: Vec<u64> = sorted.iter().map(|t| (t / cfg.dt).round() as u64).collect();

    let range = coeffs.range();
    let (lo, hi) = range.bounds();
    let grid = Grid::new_1d(lo, hi, MARGINAL_BINS)?;
    let frames = sorted.len();
    let mut counts_x = vec![vec![0u64; grid.len()]; frames];
    let mut counts_z = vec![vec![0u64; grid.len()]; frames];
    let mut dropped = 0u64;
    let mut total = 0u64;
    let root = (2.0 * cfg.dt / cfg.beta).sqrt();

    for w in 0..n_paths {
        // Shared start, independent noise streams for the two laws.
        let mut init_rng = crate::rng::stream_rng(cfg.seed, w as u64);
        let x0 = psi0.sample(&mut init_rng);
        if !p.domain().contains(x0) {
            return Err(Error::config("initial density puts mass outside the domain"));
        }
        let z0 = xi.value(x0);

        let mut rng_x = crate::rng::stream_rng(cfg.seed.wrapping_add(1), w as u64);
        let mut x = x0;
        let mut step = 0u64;
        for (k, &target) in steps_at.iter().enumerate() {
            while step < target {
                x = crate::sampler::em_step(p, cfg, x, &mut rng_x);
                step += 1;
            }
            total += 1;
            match grid.bin_of([range.wrap(xi.value(x)), 0.0]) {
                Some(bx) => counts_x[k][bx] += 1,
                None => dropped += 1,
            }
        }

        let mut rng_z = crate::rng::stream_rng(cfg.seed.wrapping_add(2), w as u64);
        let mut z = range.wrap(z0);
        let mut step = 0u64;
        for (k, &target) in steps_at.iter().enumerate() {
            while step < target {
                let bin = coeffs.clamped_bin(z);
                let g: f64 = rng_z.sample(StandardNormal);
                z += coeffs.b()[bin] * cfg.dt + root * coeffs.sigma2()[bin].sqrt() * g;
                if range.is_torus() {
                    z = range.wrap(z);
                } else if z < lo || z > hi {
                    return Err(Error::numerics(format!(
                        "effective walker left the coefficient range (z = {z:.4})"
                    )));
                }
                step += 1;
            }
            total += 1;
            match grid.bin_of([z, 0.0]) {
                Some(bz) => counts_z[k][bz] += 1,
                None => dropped += 1,
            }
        }
    }
    if dropped as f64 > 0.01 * total as f64 {
        return Err(Error::statistics(format!(
            "{dropped} of {total} samples fell outside the comparison mesh; \
             the coordinate range does not cover the dynamics"
        )));
    }

    let n = n_paths as f64;
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let kl = corrected_kl(&counts_x[k], &counts_z[k], n, n)?;
        out.push(MarginalDistance { t: sorted[k], kl });
    }
    Ok(out)
}

/// Same comparison, but the effective walkers are driven by coefficients
/// re-estimated from the full ensemble on each inter-frame interval
/// (piecewise-frozen in time). Validates that the time-dependent closure
/// does no worse than the equilibrium coefficients far from stationarity.
pub fn marginal_distance_snapshot_coeffs(
    p: &Potential,
    xi: &ReactionCoordinate,
    coeffs: &EffectiveCoefficients,
    cfg: &SimConfig,
    psi0: &GridDensity,
    times: &[f64],
    n_paths: usize,
) -> Result<Vec<MarginalDistance>> {
    cfg.validate_for(p)?;
    if n_paths < 1000 {
        return Err(Error::config("marginal comparison needs at least 1000 paths"));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    if sorted.is_empty() || sorted[0] < 0.0 {
        return Err(Error::config("need nonnegative observation times"));
    }
    let steps_at: Vec<u64> = sorted.iter().map(|t| (t / cfg.dt).round() as u64).collect();
    let range = coeffs.range();
    let (lo, hi) = range.bounds();
    let bins = coeffs.bins();
    let dz = (hi - lo) / bins as f64;
    let grid = Grid::new_1d(lo, hi, MARGINAL_BINS)?;
    let frames = sorted.len();
    let beta = cfg.beta;

    // Evolve the full ensemble in memory, refreshing binned coefficient
    // estimates at every frame boundary.
    let mut xs = Vec::with_capacity(n_paths);
    let mut zs = Vec::with_capacity(n_paths);
    let mut rngs_x = Vec::with_capacity(n_paths);
    let mut rngs_z = Vec::with_capacity(n_paths);
    for w in 0..n_paths {
        let mut init_rng = crate::rng::stream_rng(cfg.seed, w as u64);
        let x0 = psi0.sample(&mut init_rng);
        if !p.domain().contains(x0) {
            return Err(Error::config("initial density puts mass outside the domain"));
        }
        xs.push(x0);
        zs.push(range.wrap(xi.value(x0)));
        rngs_x.push(crate::rng::stream_rng(cfg.seed.wrapping_add(1), w as u64));
        rngs_z.push(crate::rng::stream_rng(cfg.seed.wrapping_add(2), w as u64));
    }

    let estimate_now = |xs: &[[f64; 2]]| -> (Vec<f64>, Vec<f64>) {
        let mut sum_b = vec![0.0; bins];
        let mut sum_s2 = vec![0.0; bins];
        let mut cnt = vec![0u64; bins];
        for &x in xs {
            let zc = range.wrap(xi.value(x));
            if zc >= lo && zc <= hi {
                let i = (((zc - lo) / dz) as usize).min(bins - 1);
                let gx = xi.gradient(x);
                sum_b[i] += drift_sample(p, xi, beta, x);
                sum_s2[i] += gx[0] * gx[0] + gx[1] * gx[1];
                cnt[i] += 1;
            }
        }
        let first = cnt.iter().position(|&c| c > 0).unwrap_or(0);
        let last = cnt.iter().rposition(|&c| c > 0).unwrap_or(bins - 1);
        let mut b = vec![0.0; bins];
        let mut s2 = vec![1.0; bins];
        for i in 0..bins {
            let mut src = i.clamp(first, last);
            // Walk inward to the nearest populated bin.
            while cnt[src] == 0 && src < last {
                src += 1;
            }
            while cnt[src] == 0 && src > first {
                src -= 1;
            }
            if cnt[src] > 0 {
                b[i] = sum_b[src] / cnt[src] as f64;
                s2[i] = sum_s2[src] / cnt[src] as f64;
            }
        }
        (b, s2)
    };

    let root = (2.0 * cfg.dt / cfg.beta).sqrt();
    let mut counts_x = vec![vec![0u64; grid.len()]; frames];
    let mut counts_z = vec![vec![0u64; grid.len()]; frames];
    let mut step = 0u64;
    let mut dropped = 0u64;
    let mut total = 0u64;
    for (k, &target) in steps_at.iter().enumerate() {
        let (b_now, s2_now) = estimate_now(&xs);
        while step < target {
            for w in 0..n_paths {
                xs[w] = crate::sampler::em_step(p, cfg, xs[w], &mut rngs_x[w]);
                let i = {
                    let zc = range.wrap(zs[w]);
                    let idx = ((zc - lo) / dz).floor();
                    if idx < 0.0 {
                        0
                    } else {
                        (idx as usize).min(bins - 1)
                    }
                };
                let g: f64 = rngs_z[w].sample(StandardNormal);
                let mut z = zs[w] + b_now[i] * cfg.dt + root * s2_now[i].sqrt() * g;
                if range.is_torus() {
                    z = range.wrap(z);
                } else {
                    // The frozen-coefficient walker may poke past the table
                    // edge while the ensemble is far from equilibrium;
                    // reflect it back rather than abort the validation.
                    if z < lo {
                        z = 2.0 * lo - z;
                    }
                    if z > hi {
                        z = 2.0 * hi - z;
                    }
                }
                zs[w] = z;
            }
            step += 1;
        }
        for w in 0..n_paths {
            total += 2;
            match grid.bin_of([range.wrap(xi.value(xs[w])), 0.0]) {
                Some(bx) => counts_x[k][bx] += 1,
                None => dropped += 1,
            }
            match grid.bin_of([zs[w], 0.0]) {
                Some(bz) => counts_z[k][bz] += 1,
                None => dropped += 1,
            }
        }
    }
    if dropped as f64 > 0.01 * total as f64 {
        return Err(Error::statistics(
            "too many samples outside the comparison mesh",
        ));
    }
    let n = n_paths as f64;
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let kl = corrected_kl(&counts_x[k], &counts_z[k], n, n)?;
        out.push(MarginalDistance { t: sorted[k], kl });
    }
    Ok(out)
}
