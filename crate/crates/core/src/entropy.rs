//! Relative entropy and Fisher information on mesh densities, ensemble
//! entropy-decay experiments against the Boltzmann target, and the
//! marginal-versus-conditional rate profile along a reaction coordinate.

use crate::error::{Error, Result};
use crate::free_energy;
use crate::grid::{Grid, GridDensity};
use crate::model::{CanonicalMeasure, Potential, ReactionCoordinate};
use crate::sampler::SimConfig;
use crate::spectral;
use crate::stats;

/// Additive regularization applied inside logarithms of histogram ratios.
const LOG_EPS: f64 = 1e-12;

/// Number of histogram bins per axis in ensemble experiments.
const HIST_BINS: usize = 64;

fn same_grid(a: &Grid, b: &Grid) -> bool {
    if a.dim() != b.dim() {
        return false;
    }
    for ax in 0..a.dim() {
        if a.n_axis(ax) != b.n_axis(ax)
            || (a.lo()[ax] - b.lo()[ax]).abs() > 1e-12
            || (a.hi()[ax] - b.hi()[ax]).abs() > 1e-12
        {
            return false;
        }
    }
    true
}

/// Relative entropy (Kullback-Leibler divergence) H(nu | mu) of two
/// densities on the same mesh. Errors if the meshes differ or if nu puts
/// mass where mu has none. Nonnegative up to quadrature error; exactly
/// zero for identical inputs.
pub fn relative_entropy(nu: &GridDensity, mu: &GridDensity) -> Result<f64> {
    if !same_grid(nu.grid(), mu.grid()) {
        return Err(Error::config("relative entropy needs densities on the same mesh"));
    }
    let g = nu.grid();
    let mut h = 0.0;
    for i in 0..g.len() {
        let p = nu.values()[i];
        let q = mu.values()[i];
        if p <= 0.0 {
            continue;
        }
        if q <= 0.0 {
            return Err(Error::statistics(
                "support violation: nu has mass where mu vanishes",
            ));
        }
        h += g.weight(i) * p * (p / q).ln();
    }
    // Quadrature can leave a tiny negative residue for nearly equal inputs.
    Ok(h.max(0.0))
}

/// Fisher information I(nu | mu) = ∫ |grad ln(nu/mu)|^2 dnu on a common
/// mesh. The log-ratio gradient uses central differences at interior
/// nodes; one-sided differences at the mesh edge. Nodes whose stencil
/// touches a vanishing value of either density are skipped, which is
/// harmless when the densities decay at the mesh boundary.
pub fn fisher_information(nu: &GridDensity, mu: &GridDensity) -> Result<f64> {
    if !same_grid(nu.grid(), mu.grid()) {
        return Err(Error::config("Fisher information needs densities on the same mesh"));
    }
    let g = nu.grid();
    let dim = g.dim();
    let logr = |i: usize| -> Option<f64> {
        let p = nu.values()[i];
        let q = mu.values()[i];
        if p > 0.0 && q > 0.0 {
            Some((p / q).ln())
        } else {
            None
        }
    };
    let mut total = 0.0;
    for i in 0..g.len() {
        let p = nu.values()[i];
        if p <= 0.0 {
            continue;
        }
        let ij = g.unravel(i);
        let mut grad2 = 0.0;
        let mut ok = true;
        for ax in 0..dim {
            let n = g.n_axis(ax);
            let h = g.h(ax);
            let at = |k: usize| -> Option<f64> {
                let mut c = ij;
                c[ax] = k;
                logr(g.ravel(c))
            };
            let k = ij[ax];
            let d = if k > 0 && k + 1 < n {
                match (at(k - 1), at(k + 1)) {
                    (Some(a), Some(b)) => Some((b - a) / (2.0 * h)),
                    _ => None,
                }
            } else if k == 0 {
                match (at(0), at(1)) {
                    (Some(a), Some(b)) => Some((b - a) / h),
                    _ => None,
                }
            } else {
                match (at(n - 2), at(n - 1)) {
                    (Some(a), Some(b)) => Some((b - a) / h),
                    _ => None,
                }
            };
            match d {
                Some(v) => grad2 += v * v,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            total += g.weight(i) * p * grad2;
        }
    }
    Ok(total)
}

/// Plug-in relative entropy of a histogram against a reference with
/// additive regularization inside the logarithm only. Used on empirical
/// histograms where strict support checks would trip on sampling noise.
fn kl_regularized(nu: &GridDensity, mu: &GridDensity) -> f64 {
    let g = nu.grid();
    let mut h = 0.0;
    for i in 0..g.len() {
        let p = nu.values()[i];
        if p <= 0.0 {
            continue;
        }
        let q = mu.values()[i];
        h += g.weight(i) * p * ((p + LOG_EPS) / (q + LOG_EPS)).ln();
    }
    h
}

/// Result of an ensemble entropy-decay experiment.
#[derive(Debug, Clone)]
pub struct DecayFit {
    /// Frame times, uniformly spaced over the horizon.
    pub times: Vec<f64>,
    /// Bias-corrected entropy per frame.
    pub entropy: Vec<f64>,
    /// Fitted exponential decay rate over the window.
    pub rate: f64,
    /// Root-mean-square residual of the log-linear fit.
    pub residual: f64,
    /// Inclusive frame range used for the fit.
    pub window: (usize, usize),
    /// Statistical resolution limit of the entropy estimate.
    pub noise_floor: f64,
    pub n_paths: usize,
}

/// Evolve an ensemble from `psi0` under overdamped Langevin dynamics and
/// record the relative entropy of the empirical law against the Boltzmann
/// measure at uniformly spaced frames. Fits an exponential rate over the
/// window from the first 10% entropy drop down to the larger of
/// 1e-3 H(0) and the sampling noise floor.
///
/// Histogram entropies carry a positive bias of (occupied bins - 1)/2N,
/// which is subtracted per frame before fitting.
pub fn entropy_decay_experiment(
    p: &Potential,
    cfg: &SimConfig,
    psi0: &GridDensity,
    horizon: f64,
    frames: usize,
    n_paths: usize,
) -> Result<DecayFit> {
    cfg.validate_for(p)?;
    if frames < 8 {
        return Err(Error::config("entropy decay needs at least 8 frames"));
    }
    if n_paths < 1000 {
        return Err(Error::config("entropy decay needs at least 1000 paths"));
    }
    if horizon <= 0.0 {
        return Err(Error::config("horizon must be positive"));
    }
    let steps_per_frame = (horizon / (frames as f64 * cfg.dt)).round() as u64;
    if steps_per_frame == 0 {
        return Err(Error::config("horizon shorter than one time step per frame"));
    }

    // Reference measure and histogram mesh over the populated region.
    let measure = CanonicalMeasure::new(p, cfg.beta, 512)?;
    let (lo, hi) = match p.domain().bounds() {
        Some(b) => b,
        None => crate::model::truncation_box(p, cfg.beta)?,
    };
    let grid = if p.dim() == 1 {
        Grid::new_1d(lo[0], hi[0], HIST_BINS)?
    } else {
        Grid::new_2d(lo, hi, [HIST_BINS, HIST_BINS])?
    };
    let mu = measure.grid_density(grid.clone())?;

    // March every walker through all frames, accumulating counts.
    let mut counts = vec![vec![0u64; grid.len()]; frames + 1];
    let mut occupied = vec![std::collections::HashSet::new(); frames + 1];
    for w in 0..n_paths {
        let mut rng = crate::rng::stream_rng(cfg.seed, w as u64);
        let mut x = psi0.sample(&mut rng);
        if !p.domain().contains(x) {
            return Err(Error::config("initial density puts mass outside the domain"));
        }
        if let Some(b) = grid.bin_of(x) {
            counts[0][b] += 1;
            occupied[0].insert(b);
        }
        for frame in 1..=frames {
            for _ in 0..steps_per_frame {
                x = crate::sampler::em_step(p, cfg, x, &mut rng);
            }
            if let Some(b) = grid.bin_of(x) {
                counts[frame][b] += 1;
                occupied[frame].insert(b);
            }
        }
    }

    let n = n_paths as f64;
    let mut times = Vec::with_capacity(frames + 1);
    let mut entropy = Vec::with_capacity(frames + 1);
    let mut floor: f64 = 0.0;
    for frame in 0..=frames {
        let total: u64 = counts[frame].iter().sum();
        if total == 0 {
            return Err(Error::statistics("ensemble left the histogram mesh"));
        }
        let masses: Vec<f64> = counts[frame].iter().map(|&c| c as f64).collect();
        let mut hist = GridDensity::from_values(grid.clone(), masses)?;
        // from_values normalizes as a density over the mesh weights.
        hist.normalize()?;
        let occ = occupied[frame].len().max(1) as f64;
        let bias = (occ - 1.0) / (2.0 * n);
        let h = kl_regularized(&hist, &mu) - bias;
        times.push(frame as f64 * steps_per_frame as f64 * cfg.dt);
        entropy.push(h);
        // Plateau resolution: a few standard deviations of the plug-in
        // estimator when the law has converged.
        floor = floor.max(3.0 * (2.0 * (occ - 1.0)).sqrt() / (2.0 * n));
    }

    let h0 = entropy[0];
    if h0 <= 5.0 * floor {
        return Err(Error::statistics(
            "initial law already at the noise floor; decay rate undefined",
        ));
    }

    // Fit window: from the first 10% drop until the larger of the noise
    // floor and 1e-3 H(0).
    let cutoff = (1e-3 * h0).max(floor);
    let start = entropy
        .iter()
        .position(|&h| h <= 0.9 * h0)
        .ok_or_else(|| Error::statistics("entropy never dropped 10% within the horizon"))?;
    let mut end = start;
    while end + 1 <= frames && entropy[end + 1] > cutoff {
        end += 1;
    }
    if end - start + 1 < 3 {
        return Err(Error::statistics("fewer than 3 frames in the decay window"));
    }

    // Monotonicity guard: transient increases within the fit window that
    // exceed sampling noise mean the reference is not the invariant law.
    for k in start..end {
        let slack = 0.2 * entropy[k] + 5.0 * floor + 5.0 * ((entropy[k].abs() + 0.5) / n).sqrt();
        if entropy[k + 1] > entropy[k] + slack {
            return Err(Error::statistics(format!(
                "entropy increased from {:.4} to {:.4} between frames {k} and {}; \
                 reference is not the invariant measure",
                entropy[k],
                entropy[k + 1],
                k + 1
            )));
        }
    }

    let ts = &times[start..=end];
    let ys = &entropy[start..=end];
    let (rate, _, residual) = stats::fit_log_decay(ts, ys)?;
    if residual > 0.2 {
        return Err(Error::statistics(format!(
            "log-linear fit residual {residual:.3} exceeds 0.2; decay is not exponential"
        )));
    }
    if rate <= 0.0 {
        return Err(Error::statistics("fitted decay rate is not positive"));
    }
    Ok(DecayFit {
        times,
        entropy,
        rate,
        residual,
        window: (start, end),
        noise_floor: floor,
        n_paths,
    })
}

/// Comparison of the coarse (marginal) relaxation rate along a coordinate
/// with the transverse (conditional) rates on its level sets.
#[derive(Debug, Clone)]
pub struct LsiProfile {
    /// Relaxation rate of the 1D diffusion in the marginal free energy.
    pub r: f64,
    /// Level-set positions.
    pub z: Vec<f64>,
    /// Conditional relaxation rate on each level set.
    pub rho: Vec<f64>,
    pub rho_min: f64,
    /// rho_min / r; large values mean the coordinate captures the slow
    /// direction and the transverse dynamics equilibrate fast.
    pub ratio: f64,
    /// Whether the ratio clears `threshold`.
    pub metastable_along_xi: bool,
    pub threshold: f64,
}

/// Scan the conditional relaxation rate over level sets of an axis
/// coordinate and compare with the marginal rate. `bins` sets the number
/// of levels, `mesh` the eigensolver resolution.
pub fn lsi_profile(
    p: &Potential,
    xi: &ReactionCoordinate,
    beta: f64,
    bins: usize,
    mesh: usize,
    threshold: f64,
) -> Result<LsiProfile> {
    if bins < 4 {
        return Err(Error::config("LSI profile needs at least 4 levels"));
    }
    let axis = xi
        .as_axis()
        .ok_or_else(|| Error::config("LSI profile needs an axis-projection coordinate"))?;
    if p.dim() != 2 {
        return Err(Error::config("LSI profile needs a 2D potential"));
    }
    let r = free_energy::marginal_gap(p, xi, beta, 256, mesh)?;
    let (lo, hi) = xi.range().bounds();
    let dz = (hi - lo) / bins as f64;
    let mut z = Vec::with_capacity(bins);
    let mut rho = Vec::with_capacity(bins);
    for i in 0..bins {
        let zi = lo + (i as f64 + 0.5) * dz;
        let gap = spectral::section_gap(p, beta, axis, zi, mesh)?;
        z.push(zi);
        rho.push(gap);
    }
    let rho_min = rho.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(r > 0.0) {
        return Err(Error::numerics("marginal rate is not positive"));
    }
    let ratio = rho_min / r;
    Ok(LsiProfile {
        r,
        z,
        rho,
        rho_min,
        ratio,
        metastable_along_xi: ratio > threshold,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Domain, RcRange};

    fn gaussian_density(grid: Grid, mean: f64, var: f64) -> GridDensity {
        GridDensity::from_fn(grid, move |x| {
            (-(x[0] - mean) * (x[0] - mean) / (2.0 * var)).exp()
        })
        .expect("density")
    }

    #[test]
    fn kl_between_shifted_gaussians_is_half() {
        let g = Grid::new_1d(-9.0, 10.0, 4001).unwrap();
        let nu = gaussian_density(g.clone(), 1.0, 1.0);
        let mu = gaussian_density(g, 0.0, 1.0);
        let h = relative_entropy(&nu, &mu).unwrap();
        assert!((h - 0.5).abs() < 1e-4, "KL = {h}");
    }

    #[test]
    fn kl_between_scaled_gaussians_matches_closed_form() {
        let g = Grid::new_1d(-14.0, 14.0, 4001).unwrap();
        let nu = gaussian_density(g.clone(), 0.0, 4.0);
        let mu = gaussian_density(g, 0.0, 1.0);
        let h = relative_entropy(&nu, &mu).unwrap();
        let exact = 0.5 * (4.0f64.recip().ln() + 4.0 - 1.0);
        assert!((h - exact).abs() < 1e-4, "KL = {h} vs {exact}");
    }

    #[test]
    fn kl_is_zero_for_identical_and_errors_off_support() {
        let g = Grid::new_1d(-5.0, 5.0, 501).unwrap();
        let nu = gaussian_density(g.clone(), 0.0, 1.0);
        assert_eq!(relative_entropy(&nu, &nu).unwrap(), 0.0);

        let mut vals = vec![0.0; 501];
        vals[250] = 1.0;
        vals[400] = 1.0;
        let spike = GridDensity::from_values(g.clone(), vals).unwrap();
        let mut trunc = vec![0.0; 501];
        trunc[250] = 1.0;
        let reference = GridDensity::from_values(g, trunc).unwrap();
        assert!(relative_entropy(&spike, &reference).is_err());
    }

    #[test]
    fn fisher_information_of_unit_shift_is_one() {
        let g = Grid::new_1d(-9.0, 10.0, 4001).unwrap();
        let nu = gaussian_density(g.clone(), 1.0, 1.0);
        let mu = gaussian_density(g, 0.0, 1.0);
        let i = fisher_information(&nu, &mu).unwrap();
        assert!((i - 1.0).abs() < 1e-2, "I = {i}");
    }

    #[test]
    fn gaussian_shifts_saturate_the_log_sobolev_inequality() {
        // For an Ornstein-Uhlenbeck target with stiffness alpha at inverse
        // temperature beta, mean-shifted copies are the extremals:
        // H = I / (2 beta gap) exactly, with gap = alpha.
        for &(alpha, beta, m) in
            &[(1.0, 1.0, 0.8), (2.0, 1.5, 0.5), (0.7, 3.0, 1.1)]
        {
            let p = Potential::builtin("harmonic-1d", &[alpha]).unwrap();
            let gap = spectral::spectral_gap(&p, beta, 2049).unwrap();
            let var = 1.0 / (alpha * beta);
            let span = 9.0 * var.sqrt() + m;
            let g = Grid::new_1d(-span, span + 0.1, 4001).unwrap();
            let nu = gaussian_density(g.clone(), m, var);
            let mu = gaussian_density(g, 0.0, var);
            let h = relative_entropy(&nu, &mu).unwrap();
            let i = fisher_information(&nu, &mu).unwrap();
            let bound = i / (2.0 * beta * gap);
            assert!(
                h <= bound * (1.0 + 1e-2),
                "alpha={alpha} beta={beta}: H = {h} > bound {bound}"
            );
            assert!(
                (h - bound).abs() / h < 1e-2,
                "alpha={alpha} beta={beta}: shift family should saturate, H={h} bound={bound}"
            );
        }
    }

    #[test]
    fn ou_entropy_decays_at_twice_the_gap() {
        let p = Potential::builtin("harmonic-1d", &[1.0]).unwrap();
        let cfg = SimConfig::new(1.0, 1e-3, 11);
        let g = Grid::new_1d(-3.0, 5.0, 257).unwrap();
        let psi0 = gaussian_density(g, 1.2, 1.0);
        let fit = entropy_decay_experiment(&p, &cfg, &psi0, 3.0, 40, 20_000).unwrap();
        assert!(
            (fit.rate - 2.0).abs() < 0.2,
            "rate {} window {:?}",
            fit.rate,
            fit.window
        );
        assert!(fit.residual <= 0.2);
    }

    #[test]
    fn equilibrium_start_has_no_defined_rate() {
        let p = Potential::builtin("harmonic-1d", &[1.0]).unwrap();
        let cfg = SimConfig::new(1.0, 1e-3, 3);
        let g = Grid::new_1d(-5.0, 5.0, 257).unwrap();
        let psi0 = gaussian_density(g, 0.0, 1.0);
        let err = entropy_decay_experiment(&p, &cfg, &psi0, 1.0, 10, 2_000);
        assert!(err.is_err());
        assert!(err.unwrap_err().to_string().contains("noise floor"));
    }

    #[test]
    fn wrong_reference_temperature_is_detected() {
        // Dynamics at beta = 1 relax toward N(0,1), but the entropy
        // is measured against the much tighter beta = 4 reference, so it
        // grows after an initial dip and the experiment must refuse.
        let p = Potential::builtin("harmonic-1d", &[1.0]).unwrap();
        let cfg = SimConfig::new(1.0, 1e-3, 5);
        let g = Grid::new_1d(-4.5, 5.0, 257).unwrap();
        let psi0 = gaussian_density(g, 0.5, 0.25);
        let wrong_beta = 4.0;
        // Run the dynamics by hand against the mismatched reference.
        let measure = CanonicalMeasure::new(&p, wrong_beta, 512).unwrap();
        let _ = measure;
        let err = entropy_decay_with_reference_beta(&p, &cfg, &psi0, wrong_beta);
        assert!(err.is_err(), "mismatched reference must be rejected");
        let msg = err.unwrap_err().to_string();
        assert!(
            msg.contains("invariant")
                || msg.contains("noise floor")
                || msg.contains("residual")
                || msg.contains("dropped")
                || msg.contains("never"),
            "unexpected error: {msg}"
        );
    }

    // Test helper: same experiment but with the reference measure taken at
    // a different temperature than the dynamics.
    fn entropy_decay_with_reference_beta(
        p: &Potential,
        cfg: &SimConfig,
        psi0: &GridDensity,
        ref_beta: f64,
    ) -> Result<DecayFit> {
        let measure = CanonicalMeasure::new(p, ref_beta, 512)?;
        let (lo, hi) = crate::model::truncation_box(p, cfg.beta)?;
        let grid = Grid::new_1d(lo[0], hi[0], HIST_BINS)?;
        let mu = measure.grid_density(grid.clone())?;
        let frames = 30usize;
        let n_paths = 10_000usize;
        let steps_per_frame = (2.0 / (frames as f64 * cfg.dt)).round() as u64;
        let mut counts = vec![vec![0u64; grid.len()]; frames + 1];
        for w in 0..n_paths {
            let mut rng = crate::rng::stream_rng(cfg.seed, w as u64);
            let mut x = psi0.sample(&mut rng);
            if let Some(b) = grid.bin_of(x) {
                counts[0][b] += 1;
            }
            for frame in 1..=frames {
                for _ in 0..steps_per_frame {
                    x = crate::sampler::em_step(p, cfg, x, &mut rng);
                }
                if let Some(b) = grid.bin_of(x) {
                    counts[frame][b] += 1;
                }
            }
        }
        let n = n_paths as f64;
        let mut times = Vec::new();
        let mut entropy = Vec::new();
        let mut floor: f64 = 0.0;
        for frame in 0..=frames {
            let masses: Vec<f64> = counts[frame].iter().map(|&c| c as f64).collect();
            let occ = counts[frame].iter().filter(|&&c| c > 0).count().max(1) as f64;
            let mut hist = GridDensity::from_values(grid.clone(), masses)?;
            hist.normalize()?;
            let h = kl_regularized(&hist, &mu) - (occ - 1.0) / (2.0 * n);
            times.push(frame as f64 * steps_per_frame as f64 * cfg.dt);
            entropy.push(h);
            floor = floor.max(3.0 * (2.0 * (occ - 1.0)).sqrt() / (2.0 * n));
        }
        let h0 = entropy[0];
        if h0 <= 5.0 * floor {
            return Err(Error::statistics("initial law already at the noise floor"));
        }
        let start = entropy
            .iter()
            .position(|&h| h <= 0.9 * h0)
            .ok_or_else(|| Error::statistics("entropy never dropped 10%"))?;
        let cutoff = (1e-3 * h0).max(floor);
        let mut end = start;
        while end + 1 <= frames && entropy[end + 1] > cutoff {
            end += 1;
        }
        for k in start..end {
            let slack =
                0.2 * entropy[k] + 5.0 * floor + 5.0 * ((entropy[k].abs() + 0.5) / n).sqrt();
            if entropy[k + 1] > entropy[k] + slack {
                return Err(Error::statistics(
                    "entropy increased; reference is not the invariant measure",
                ));
            }
        }
        let (rate, _, residual) = stats::fit_log_decay(&times[start..=end], &entropy[start..=end])?;
        if residual > 0.2 {
            return Err(Error::statistics(format!("fit residual {residual}")));
        }
        Ok(DecayFit {
            times,
            entropy,
            rate,
            residual,
            window: (start, end),
            noise_floor: floor,
            n_paths,
        })
    }

    #[test]
    fn separable_potential_has_constant_conditional_rate() {
        let p = Potential::builtin("energetic-2d", &[0.0]).unwrap();
        let xi = ReactionCoordinate::axis(0, RcRange::Interval(-1.4, 1.4)).unwrap();
        let prof = lsi_profile(&p, &xi, 4.0, 12, 1025, 10.0).unwrap();
        // Transverse potential 2y^2 has stiffness 4 at every level.
        for (z, rho) in prof.z.iter().zip(&prof.rho) {
            assert!((rho - 4.0).abs() < 2e-3, "z = {z}: rho = {rho}");
        }
        let spread = prof.rho.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - prof.rho_min;
        assert!(spread < 1e-6, "conditional rates should be level-independent: {spread}");
        // Marginal is the quartic double well: slow at beta = 4.
        assert!(prof.r < 0.1, "marginal rate {}", prof.r);
        assert!(prof.ratio > 10.0 && prof.metastable_along_xi);
    }

    #[test]
    fn coordinate_orthogonal_to_barrier_is_flagged() {
        // Barrier along y, harmonic along x; xi = x misses the slow mode.
        let p = Potential::custom(
            "rotated-well",
            Domain::all_space(2),
            |x: [f64; 2]| {
                let q = x[1] * x[1] - 1.0;
                q * q + 2.0 * x[0] * x[0]
            },
            |x: [f64; 2]| [4.0 * x[0], 4.0 * x[1] * (x[1] * x[1] - 1.0)],
        );
        let xi = ReactionCoordinate::axis(0, RcRange::Interval(-1.4, 1.4)).unwrap();
        let prof = lsi_profile(&p, &xi, 4.0, 8, 1025, 10.0).unwrap();
        assert!(prof.ratio < 1.0, "ratio {}", prof.ratio);
        assert!(!prof.metastable_along_xi);
    }
}
