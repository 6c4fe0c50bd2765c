//! Free energy along a reaction coordinate: direct quadrature of the
//! marginal, adaptive biasing force estimation, and importance reweighting
//! of biased trajectories back to the unbiased measure.

use crate::error::{Error, Result};
use crate::model::{Potential, RcRange, ReactionCoordinate};
use crate::sampler::{SimConfig, Trajectory};
use crate::spectral;

/// Minimum per-bin sample count before the running mean force is trusted
/// as a bias. Below the ramp the bias in that bin stays zero.
pub const ABF_RAMP: u64 = 50;

/// Minimum visits for a conditional average to be reported.
pub const MIN_BIN_VISITS: u64 = 100;

/// Minimum effective sample size for a reweighted average.
pub const MIN_ESS: f64 = 10.0;

/// Mean-force profile on a uniform bin grid over the coordinate range.
/// `f` is anchored so the first bin sits at zero; on a periodic coordinate
/// the derivative is first projected onto zero circulation, which is the
/// only gauge in which a single-valued profile exists.
#[derive(Debug, Clone)]
pub struct FreeEnergyProfile {
    range: RcRange,
    z: Vec<f64>,
    fprime: Vec<f64>,
    f: Vec<f64>,
    counts: Vec<u64>,
}

impl FreeEnergyProfile {
    /// Build a profile from per-bin mean-force values. Integrates F' with
    /// the trapezoid rule between bin centers and anchors F(z_0) = 0.
    pub fn from_mean_force(
        range: RcRange,
        fprime: Vec<f64>,
        counts: Vec<u64>,
    ) -> Result<FreeEnergyProfile> {
        let bins = fprime.len();
        if bins < 4 {
            return Err(Error::config("free energy profile needs at least 4 bins"));
        }
        if counts.len() != bins {
            return Err(Error::config("mean force and count arrays disagree in length"));
        }
        let (lo, hi) = range.bounds();
        let dz = (hi - lo) / bins as f64;
        let z: Vec<f64> = (0..bins).map(|i| lo + (i as f64 + 0.5) * dz).collect();
        let mut fprime = fprime;
        if range.is_torus() {
            // Remove the mean so the integral closes around the circle.
            let mean = fprime.iter().sum::<f64>() / bins as f64;
            for v in fprime.iter_mut() {
                *v -= mean;
            }
        }
        let mut f = vec![0.0; bins];
        for i in 1..bins {
            f[i] = f[i - 1] + 0.5 * dz * (fprime[i - 1] + fprime[i]);
        }
        Ok(FreeEnergyProfile { range, z, fprime, f, counts })
    }

    pub fn range(&self) -> RcRange {
        self.range
    }

    pub fn bins(&self) -> usize {
        self.z.len()
    }

    pub fn bin_width(&self) -> f64 {
        let (lo, hi) = self.range.bounds();
        (hi - lo) / self.z.len() as f64
    }

    /// Bin centers.
    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn fprime(&self) -> &[f64] {
        &self.fprime
    }

    pub fn f(&self) -> &[f64] {
        &self.f
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Bin index holding `z`, or `None` outside an interval range.
    /// Periodic coordinates wrap and always land in a bin.
    pub fn bin_of(&self, z: f64) -> Option<usize> {
        let (lo, hi) = self.range.bounds();
        let z = self.range.wrap(z);
        if z < lo || z > hi {
            return None;
        }
        let idx = ((z - lo) / self.bin_width()) as usize;
        Some(idx.min(self.z.len() - 1))
    }

    /// Nearest bin, clamping points outside an interval range to the edge.
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

    /// Free energy at `z` by nearest-bin lookup.
    pub fn f_at(&self, z: f64) -> f64 {
        self.f[self.clamped_bin(z)]
    }

    /// Mean force at `z` by nearest-bin lookup.
    pub fn fprime_at(&self, z: f64) -> f64 {
        self.fprime[self.clamped_bin(z)]
    }

    /// Circulation of F' around a periodic range (zero by construction)
    /// or total rise across an interval. Diagnostic only.
    pub fn circulation(&self) -> f64 {
        let dz = self.bin_width();
        let mut s = 0.0;
        for i in 1..self.fprime.len() {
            s += 0.5 * dz * (self.fprime[i - 1] + self.fprime[i]);
        }
        s
    }
}

/// Local mean force at a point: the projection of the potential gradient
/// onto the coordinate plus the curvature correction,
/// f = (grad V . grad xi)/|grad xi|^2 - (1/beta) div(grad xi / |grad xi|^2).
/// Its conditional average over a level set is the derivative of the free
/// energy at that level.
pub fn local_mean_force(
    p: &Potential,
    xi: &ReactionCoordinate,
    beta: f64,
    x: [f64; 2],
) -> Result<f64> {
    if beta <= 0.0 {
        return Err(Error::config("beta must be positive"));
    }
    let g = p.gradient(x);
    let gx = xi.gradient(x);
    let n2 = gx[0] * gx[0] + gx[1] * gx[1];
    if n2 < 1e-16 {
        return Err(Error::numerics(
            "reaction coordinate gradient vanishes inside the domain",
        ));
    }
    let proj = (g[0] * gx[0] + g[1] * gx[1]) / n2;
    let geom = xi.div_grad_over_norm2(x, p.dim())?;
    Ok(proj - geom / beta)
}

/// Number of quadrature nodes per transverse slice integral.
const SLICE_NODES: usize = 2049;

fn slice_mass(
    p: &Potential,
    beta: f64,
    axis: usize,
    z: f64,
    segments: &[(f64, f64)],
) -> f64 {
    let other = 1 - axis;
    let mut total = 0.0;
    for &(a, b) in segments {
        if !(b > a) {
            continue;
        }
        let h = (b - a) / (SLICE_NODES - 1) as f64;
        let mut s = 0.0;
        for k in 0..SLICE_NODES {
            let y = a + h * k as f64;
            let mut x = [0.0; 2];
            x[axis] = z;
            x[other] = y;
            let w = if k == 0 || k == SLICE_NODES - 1 { 0.5 } else { 1.0 };
            s += w * (-beta * p.energy(x)).exp();
        }
        total += s * h;
    }
    total
}

/// Free energy of an axis-aligned coordinate by direct quadrature of the
/// marginal: F(z) = -(1/beta) ln ∫ exp(-beta V) over the slice {xi = z}.
/// The bin grid covers the coordinate's declared range. Slices whose
/// Boltzmann mass underflows to zero are an error: the range reaches
/// beyond where the marginal is representable.
pub fn free_energy_quadrature(
    p: &Potential,
    xi: &ReactionCoordinate,
    beta: f64,
    bins: usize,
) -> Result<FreeEnergyProfile> {
    if beta <= 0.0 {
        return Err(Error::config("beta must be positive"));
    }
    if bins < 4 {
        return Err(Error::config("free energy profile needs at least 4 bins"));
    }
    let axis = xi.as_axis().ok_or_else(|| {
        Error::config("quadrature free energy needs an axis-projection coordinate")
    })?;
    let range = xi.range();
    let (lo, hi) = range.bounds();
    let dz = (hi - lo) / bins as f64;

    // Transverse extent for unbounded domains comes from the same
    // truncation used by the partition function.
    let all_space_span: Option<(f64, f64)> = if p.domain().bounds().is_none() && p.dim() == 2 {
        let (blo, bhi) = crate::model::truncation_box(p, beta)?;
        let other = 1 - axis;
        Some((blo[other], bhi[other]))
    } else {
        None
    };

    let mut logmass = vec![0.0; bins];
    for i in 0..bins {
        let z = lo + (i as f64 + 0.5) * dz;
        let m = if p.dim() == 1 {
            (-beta * p.energy([z, 0.0])).exp()
        } else if let Some(span) = all_space_span {
            slice_mass(p, beta, axis, z, &[span])
        } else {
            let segs = p.domain().sections(axis, z)?;
            slice_mass(p, beta, axis, z, &segs)
        };
        if m <= 0.0 || !m.is_finite() {
            return Err(Error::numerics(format!(
                "marginal mass underflows at z = {z:.6}; shrink the coordinate range"
            )));
        }
        logmass[i] = m.ln();
    }

    let mut fprime = vec![0.0; bins];
    for i in 0..bins {
        // Central differences of F = -ln(m)/beta; one-sided at interval ends.
        let d = if range.is_torus() {
            let ip = (i + 1) % bins;
            let im = (i + bins - 1) % bins;
            (logmass[ip] - logmass[im]) / (2.0 * dz)
        } else if i == 0 {
            (-3.0 * logmass[0] + 4.0 * logmass[1] - logmass[2]) / (2.0 * dz)
        } else if i == bins - 1 {
            (3.0 * logmass[i] - 4.0 * logmass[i - 1] + logmass[i - 2]) / (2.0 * dz)
        } else {
            (logmass[i + 1] - logmass[i - 1]) / (2.0 * dz)
        };
        fprime[i] = -d / beta;
    }
    FreeEnergyProfile::from_mean_force(range, fprime, vec![0; bins])
}

/// Spectral gap of the one-dimensional diffusion in the marginal potential
/// F along the coordinate. Used to compare coarse-grained relaxation with
/// the per-level transverse rates.
pub fn marginal_gap(
    p: &Potential,
    xi: &ReactionCoordinate,
    beta: f64,
    bins: usize,
    mesh: usize,
) -> Result<f64> {
    let profile = free_energy_quadrature(p, xi, beta, bins)?;
    let range = profile.range();
    let (lo, hi) = range.bounds();
    let dz = profile.bin_width();
    let z0 = profile.z()[0];
    let values = profile.f().to_vec();
    let interp = move |values: &[f64], t: f64| -> (usize, f64) {
        let s = ((t - z0) / dz).clamp(0.0, (values.len() - 1) as f64);
        let i = (s as usize).min(values.len() - 2);
        (i, s - i as f64)
    };
    let ve = values.clone();
    let vg = values;
    let marginal = Potential::custom(
        "marginal",
        crate::model::Domain::interval(lo, hi)?,
        move |x: [f64; 2]| {
            // Piecewise-linear interpolation of the tabulated profile.
            let (i, frac) = interp(&ve, x[0]);
            ve[i] * (1.0 - frac) + ve[i + 1] * frac
        },
        move |x: [f64; 2]| {
            let (i, _) = interp(&vg, x[0]);
            [(vg[i + 1] - vg[i]) / dz, 0.0]
        },
    );
    spectral::spectral_gap(&marginal, beta, mesh)
}

/// Settings for an adaptive biasing force run.
#[derive(Debug, Clone)]
pub struct AbfConfig {
    /// Number of coordinate bins.
    pub bins: usize,
    /// Per-bin sample count below which the bias stays zero.
    pub ramp: u64,
    /// Record a profile snapshot every this many steps (0 disables).
    pub snapshot_stride: u64,
    /// Keep every this-many-th walker position (0 disables).
    pub traj_stride: u64,
    /// Coordinate level whose crossings are counted; defaults to the
    /// midpoint of the coordinate range.
    pub crossing_level: Option<f64>,
}

impl AbfConfig {
    pub fn new(bins: usize) -> AbfConfig {
        AbfConfig {
            bins,
            ramp: ABF_RAMP,
            snapshot_stride: 0,
            traj_stride: 0,
            crossing_level: None,
        }
    }
}

/// Snapshot of the running mean-force estimate at a point in time.
#[derive(Debug, Clone)]
pub struct AbfSnapshot {
    pub step: u64,
    pub fprime: Vec<f64>,
}

/// Result of an adaptive biasing force run.
#[derive(Debug)]
pub struct AbfRun {
    /// Final profile integrated from the converged per-bin mean force.
    pub profile: FreeEnergyProfile,
    pub history: Vec<AbfSnapshot>,
    pub trajectory: Trajectory,
    /// Sign changes of xi(X) - level along the trajectory.
    pub crossings: u64,
    /// Steps whose coordinate fell outside the bin range (bias clamped,
    /// statistics untouched).
    pub out_of_range: u64,
}

/// Adaptive biasing force: accumulate the running conditional mean of the
/// local mean force per bin and subtract it from the drift. At long times
/// the bias converges to F' and the coordinate marginal flattens.
pub fn abf_run(
    p: &Potential,
    xi: &ReactionCoordinate,
    cfg: &SimConfig,
    abf: &AbfConfig,
    x0: [f64; 2],
    n_steps: u64,
) -> Result<AbfRun> {
    cfg.validate_for(p)?;
    if abf.bins < 4 {
        return Err(Error::config("free energy profile needs at least 4 bins"));
    }
    if !p.domain().contains(x0) {
        return Err(Error::config("initial point lies outside the domain"));
    }
    let bins = abf.bins;
    let range = xi.range();
    let (lo, hi) = range.bounds();
    let dz = (hi - lo) / bins as f64;
    let level = abf.crossing_level.unwrap_or(0.5 * (lo + hi));

    let mut sums = vec![0.0; bins];
    let mut counts = vec![0u64; bins];
    let mut rng = cfg.rng();
    let mut x = x0;
    let mut history = Vec::new();
    let mut positions = Vec::new();
    let mut crossings = 0u64;
    let mut out_of_range = 0u64;
    let mut prev_side = (xi.value(x0) - level) > 0.0;
    if abf.traj_stride > 0 {
        positions.push(x0);
    }

    use rand_distr::{Distribution, StandardNormal};
    let scale = cfg.noise_scale();
    for step in 1..=n_steps {
        let z = xi.value(x);
        let zc = range.wrap(z);
        let inside = zc >= lo && zc <= hi;
        let bin = {
            let idx = ((zc - lo) / dz).floor();
            if idx < 0.0 {
                0
            } else {
                (idx as usize).min(bins - 1)
            }
        };
        if inside {
            sums[bin] += local_mean_force(p, xi, cfg.beta, x)?;
            counts[bin] += 1;
        } else {
            out_of_range += 1;
        }
        // Bias with the running estimate once the bin has enough samples.
        let bias = if counts[bin] >= abf.ramp && counts[bin] > 0 {
            sums[bin] / counts[bin] as f64
        } else {
            0.0
        };
        let g = p.gradient(x);
        let gx = xi.gradient(x);
        let mut y = x;
        for a in 0..p.dim() {
            let gauss: f64 = StandardNormal.sample(&mut rng);
            y[a] = x[a] + (-g[a] + bias * gx[a]) * cfg.dt + scale * gauss;
        }
        let xn = p.domain().apply_boundary(y, x);
        let side = (xi.value(xn) - level) > 0.0;
        if side != prev_side {
            crossings += 1;
            prev_side = side;
        }
        x = xn;
        if abf.traj_stride > 0 && step % abf.traj_stride == 0 {
            positions.push(x);
        }
        if abf.snapshot_stride > 0 && step % abf.snapshot_stride == 0 {
            let fprime: Vec<f64> = (0..bins)
                .map(|i| if counts[i] >= abf.ramp { sums[i] / counts[i] as f64 } else { 0.0 })
                .collect();
            history.push(AbfSnapshot { step, fprime });
        }
    }

    let fprime: Vec<f64> = (0..bins)
        .map(|i| if counts[i] >= abf.ramp { sums[i] / counts[i] as f64 } else { 0.0 })
        .collect();
    let profile = FreeEnergyProfile::from_mean_force(range, fprime, counts)?;
    let stride = if abf.traj_stride > 0 { abf.traj_stride } else { n_steps };
    Ok(AbfRun {
        profile,
        history,
        trajectory: Trajectory {
            dim: p.dim(),
            dt: cfg.dt,
            stride,
            positions,
        },
        crossings,
        out_of_range,
    })
}

/// Count sign changes of xi(X) - level along an unbiased run. Companion
/// diagnostic to `AbfRun::crossings` for measuring barrier-crossing gains.
pub fn unbiased_crossings(
    p: &Potential,
    xi: &ReactionCoordinate,
    cfg: &SimConfig,
    x0: [f64; 2],
    n_steps: u64,
    level: f64,
) -> Result<u64> {
    let mut crossings = 0u64;
    let mut prev_side = (xi.value(x0) - level) > 0.0;
    crate::sampler::run_until(p, cfg, x0, n_steps, |_, x| {
        let side = (xi.value(x) - level) > 0.0;
        if side != prev_side {
            crossings += 1;
            prev_side = side;
        }
        false
    })?;
    Ok(crossings)
}

/// Reweighted average with its effective sample size.
#[derive(Debug, Clone, Copy)]
pub struct Reweighted {
    pub mean: f64,
    pub ess: f64,
}

/// Importance-reweight a biased trajectory back to the unbiased measure.
/// Under a bias -F(xi(x)) the stationary weight of a sample is
/// exp(-beta F(xi(x))), self-normalized, so any additive anchor of F
/// cancels. Errors when the effective sample size drops below 10.
pub fn reweighted_average<F>(
    traj: &Trajectory,
    xi: &ReactionCoordinate,
    profile: &FreeEnergyProfile,
    beta: f64,
    phi: F,
) -> Result<Reweighted>
where
    F: Fn([f64; 2]) -> f64,
{
    if traj.positions.is_empty() {
        return Err(Error::config("empty trajectory"));
    }
    // Subtract the max exponent before exponentiating for stability.
    let exponents: Vec<f64> = traj
        .positions
        .iter()
        .map(|&x| -beta * profile.f_at(xi.value(x)))
        .collect();
    let emax = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut wsum = 0.0;
    let mut w2sum = 0.0;
    let mut psum = 0.0;
    for (x, e) in traj.positions.iter().zip(&exponents) {
        let w = (e - emax).exp();
        wsum += w;
        w2sum += w * w;
        psum += w * phi(*x);
    }
    let ess = wsum * wsum / w2sum;
    if ess < MIN_ESS {
        return Err(Error::statistics(format!(
            "effective sample size {ess:.2} below {MIN_ESS}; bias too far from F"
        )));
    }
    Ok(Reweighted { mean: psum / wsum, ess })
}

/// Conditional average of an observable over the samples in the bin
/// containing `z`. Errors below 100 visits.
pub fn conditioned_average<F>(
    traj: &Trajectory,
    xi: &ReactionCoordinate,
    profile: &FreeEnergyProfile,
    z: f64,
    phi: F,
) -> Result<f64>
where
    F: Fn([f64; 2]) -> f64,
{
    let bin = profile
        .bin_of(z)
        .ok_or_else(|| Error::config("conditioning level outside the coordinate range"))?;
    let mut n = 0u64;
    let mut s = 0.0;
    for &x in &traj.positions {
        if profile.bin_of(xi.value(x)) == Some(bin) {
            n += 1;
            s += phi(x);
        }
    }
    if n < MIN_BIN_VISITS {
        return Err(Error::statistics(format!(
            "bin at z = {z:.4} has {n} visits; need at least {MIN_BIN_VISITS}"
        )));
    }
    Ok(s / n as f64)
}

/// Reconstruct the full unbiased average from per-bin conditional averages
/// weighted by the marginal exp(-beta F): sum_z E(phi|z) w(z) / sum_z w(z).
/// Bins with fewer than 100 visits are excluded from both sums.
pub fn reconstructed_average<F>(
    traj: &Trajectory,
    xi: &ReactionCoordinate,
    profile: &FreeEnergyProfile,
    beta: f64,
    phi: F,
) -> Result<f64>
where
    F: Fn([f64; 2]) -> f64,
{
    let bins = profile.bins();
    let mut n = vec![0u64; bins];
    let mut s = vec![0.0; bins];
    for &x in &traj.positions {
        if let Some(b) = profile.bin_of(xi.value(x)) {
            n[b] += 1;
            s[b] += phi(x);
        }
    }
    let fmin = profile.f().iter().cloned().fold(f64::INFINITY, f64::min);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut used = 0;
    for b in 0..bins {
        if n[b] < MIN_BIN_VISITS {
            continue;
        }
        let w = (-beta * (profile.f()[b] - fmin)).exp();
        num += w * s[b] / n[b] as f64;
        den += w;
        used += 1;
    }
    if used == 0 || den <= 0.0 {
        return Err(Error::statistics(
            "no bin reached 100 visits; cannot reconstruct the average",
        ));
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Domain;

    fn energetic(a: f64) -> Potential {
        Potential::builtin("energetic-2d", &[a]).expect("builtin")
    }

    fn axis_rc(lo: f64, hi: f64) -> ReactionCoordinate {
        ReactionCoordinate::axis(0, RcRange::Interval(lo, hi)).expect("axis rc")
    }

    #[test]
    fn mean_force_matches_partial_derivative_for_axis_coordinate() {
        let p = energetic(0.0);
        let xi = axis_rc(-2.0, 2.0);
        for &x in &[[-1.3, 0.4], [0.2, -0.9], [0.9, 0.1]] {
            let f = local_mean_force(&p, &xi, 3.0, x).unwrap();
            let g = p.gradient(x);
            assert!((f - g[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_force_vanishes_on_flat_potential() {
        let p = Potential::builtin("flat", &[0.0, 1.0]).expect("flat");
        let xi = ReactionCoordinate::axis(0, RcRange::Interval(0.0, 1.0)).unwrap();
        let f = local_mean_force(&p, &xi, 2.0, [0.4, 0.0]).unwrap();
        assert_eq!(f, 0.0);
    }

    #[test]
    fn quadrature_on_separable_potential_recovers_double_well() {
        // V(x,y) = (x^2-1)^2 + 2y^2: the y-integral is z-independent, so
        // F(x) = (x^2-1)^2 + const exactly.
        let p = energetic(0.0);
        let xi = axis_rc(-1.6, 1.6);
        let beta = 4.0;
        let prof = free_energy_quadrature(&p, &xi, beta, 128).unwrap();
        let mid = prof.bins() / 2;
        let f0 = prof.f()[mid];
        let z0 = prof.z()[mid];
        let v0 = (z0 * z0 - 1.0) * (z0 * z0 - 1.0);
        for (z, f) in prof.z().iter().zip(prof.f()) {
            let v = (z * z - 1.0) * (z * z - 1.0);
            assert!(
                ((f - f0) - (v - v0)).abs() < 5e-3,
                "z = {z}: F = {f}, V = {v}"
            );
        }
    }

    #[test]
    fn quadrature_entropic_barrier_height_is_log_width_ratio() {
        // Flat corridor potential: F(z) is purely entropic, and the
        // barrier between chamber and corridor is (1/beta) ln(2 / 0.2).
        let p = Potential::builtin("entropic-2d", &[]).expect("builtin");
        let beta = 2.0;
        let xi = axis_rc(-0.99, 0.99);
        let prof = free_energy_quadrature(&p, &xi, beta, 99).unwrap();
        // Chamber slices have width 2, corridor slices width 0.2.
        let f_chamber = prof.f_at(-0.7);
        let f_corridor = prof.f_at(0.0);
        let expected = (2.0f64 / 0.2).ln() / beta;
        assert!(
            ((f_corridor - f_chamber) - expected).abs() < 0.01,
            "entropic barrier {} vs {}",
            f_corridor - f_chamber,
            expected
        );
    }

    #[test]
    fn quadrature_range_past_walls_is_an_error() {
        let p = Potential::builtin("entropic-2d", &[]).expect("builtin");
        let xi = axis_rc(-2.0, 2.0);
        assert!(free_energy_quadrature(&p, &xi, 2.0, 32).is_err());
    }

    #[test]
    fn torus_profile_closes() {
        // Periodic tilted cosine: the gauge-projected profile must return
        // to its anchor after a full turn.
        let dom =
            Domain::boxed(2, [0.0, 0.0], [1.0, 1.0], [true, false], Vec::new()).unwrap();
        let p = Potential::custom(
            "tilted-cosine",
            dom,
            |x: [f64; 2]| (2.0 * std::f64::consts::PI * x[0]).cos(),
            |x: [f64; 2]| {
                [
                    -2.0 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * x[0]).sin(),
                    0.0,
                ]
            },
        );
        let xi = ReactionCoordinate::axis(0, RcRange::Torus(0.0, 1.0)).unwrap();
        let prof = free_energy_quadrature(&p, &xi, 2.0, 64).unwrap();
        assert!(prof.circulation().abs() < 1e-10);
        let span = prof.f().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - prof.f().iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(span > 0.5, "cosine profile should not be flat, span {span}");
    }

    #[test]
    fn abf_flat_potential_estimates_zero_force() {
        let p = Potential::builtin("flat", &[0.0, 1.0]).expect("flat");
        let xi = ReactionCoordinate::axis(0, RcRange::Interval(0.0, 1.0)).unwrap();
        let cfg = SimConfig::new(2.0, 5e-5, 41);
        let abf = AbfConfig::new(16);
        let run = abf_run(&p, &xi, &cfg, &abf, [0.5, 0.5], 200_000).unwrap();
        for (i, v) in run.profile.fprime().iter().enumerate() {
            assert!(v.abs() < 0.05, "bin {i} mean force {v}");
        }
        assert_eq!(run.out_of_range, 0);
    }

    #[test]
    fn abf_recovers_separable_free_energy() {
        let p = energetic(0.0);
        let xi = axis_rc(-1.5, 1.5);
        let beta = 3.0;
        let cfg = SimConfig::new(beta, 2e-4, 7);
        let mut abf = AbfConfig::new(24);
        abf.snapshot_stride = 500_000;
        let run = abf_run(&p, &xi, &cfg, &abf, [-1.0, 0.0], 3_000_000).unwrap();
        let exact = free_energy_quadrature(&p, &xi, beta, 24).unwrap();
        let mut err: f64 = 0.0;
        for i in 0..24 {
            err = err.max((run.profile.f()[i] - exact.f()[i]).abs());
        }
        assert!(err < 0.12, "max anchored free energy error {err}");
        assert!(!run.history.is_empty());
    }

    #[test]
    fn reweighting_is_anchor_invariant_and_counts_ess() {
        let traj = Trajectory {
            dim: 1,
            dt: 1e-3,
            stride: 1,
            positions: (0..200).map(|i| [i as f64 / 200.0, 0.0]).collect(),
        };
        let xi = ReactionCoordinate::axis(0, RcRange::Interval(0.0, 1.0)).unwrap();
        let fp = vec![0.0; 8];
        let base =
            FreeEnergyProfile::from_mean_force(RcRange::Interval(0.0, 1.0), fp, vec![0; 8])
                .unwrap();
        let r = reweighted_average(&traj, &xi, &base, 2.0, |x| x[0]).unwrap();
        // Flat profile: plain average of a uniform sweep.
        assert!((r.mean - 0.4975).abs() < 1e-12);
        assert!((r.ess - 200.0).abs() < 1e-9);

        // A linear profile shifted by a constant gives identical answers.
        let slope =
            FreeEnergyProfile::from_mean_force(RcRange::Interval(0.0, 1.0), vec![1.0; 8], vec![0; 8])
                .unwrap();
        let r1 = reweighted_average(&traj, &xi, &slope, 2.0, |x| x[0]).unwrap();
        let mut shifted = slope.clone();
        for v in shifted.f.iter_mut() {
            *v += 5.0;
        }
        let r2 = reweighted_average(&traj, &xi, &shifted, 2.0, |x| x[0]).unwrap();
        assert!((r1.mean - r2.mean).abs() < 1e-12);
        assert!((r1.ess - r2.ess).abs() < 1e-9);
    }

    #[test]
    fn degenerate_weights_fail_ess_guard() {
        let mut positions = vec![[0.01, 0.0]; 199];
        positions.push([0.99, 0.0]);
        let traj = Trajectory { dim: 1, dt: 1e-3, stride: 1, positions };
        let xi = ReactionCoordinate::axis(0, RcRange::Interval(0.0, 1.0)).unwrap();
        // Steep profile concentrates all weight on the single right sample.
        let prof = FreeEnergyProfile::from_mean_force(
            RcRange::Interval(0.0, 1.0),
            vec![-40.0; 8],
            vec![0; 8],
        )
        .unwrap();
        let err = reweighted_average(&traj, &xi, &prof, 2.0, |x| x[0]);
        assert!(err.is_err());
    }

    #[test]
    fn conditional_average_needs_visits() {
        let traj = Trajectory {
            dim: 1,
            dt: 1e-3,
            stride: 1,
            positions: (0..400).map(|i| [(i % 200) as f64 / 200.0, 0.0]).collect(),
        };
        let xi = ReactionCoordinate::axis(0, RcRange::Interval(0.0, 1.0)).unwrap();
        let prof = FreeEnergyProfile::from_mean_force(
            RcRange::Interval(0.0, 1.0),
            vec![0.0; 4],
            vec![0; 4],
        )
        .unwrap();
        let v = conditioned_average(&traj, &xi, &prof, 0.1, |x| x[0]).unwrap();
        assert!((v - 0.1225).abs() < 1e-2);
        // 400 samples over 4 bins = 100 each; a 40-bin profile starves.
        let fine = FreeEnergyProfile::from_mean_force(
            RcRange::Interval(0.0, 1.0),
            vec![0.0; 40],
            vec![0; 40],
        )
        .unwrap();
        assert!(conditioned_average(&traj, &xi, &fine, 0.1, |x| x[0]).is_err());
    }

    #[test]
    fn reconstruction_matches_plain_average_on_uniform_data() {
        let traj = Trajectory {
            dim: 1,
            dt: 1e-3,
            stride: 1,
            positions: (0..800).map(|i| [(i as f64 + 0.5) / 800.0, 0.0]).collect(),
        };
        let xi = ReactionCoordinate::axis(0, RcRange::Interval(0.0, 1.0)).unwrap();
        let prof = FreeEnergyProfile::from_mean_force(
            RcRange::Interval(0.0, 1.0),
            vec![0.0; 8],
            vec![0; 8],
        )
        .unwrap();
        let rec = reconstructed_average(&traj, &xi, &prof, 2.0, |x| x[0]).unwrap();
        let plain: f64 =
            traj.positions.iter().map(|x| x[0]).sum::<f64>() / traj.positions.len() as f64;
        assert!((rec - plain).abs() < 1e-12);
    }
}
