//! Quasi-stationary distributions on metastable windows: the spectral
//! solution with its exit law, a Fleming-Viot particle approximation, the
//! conditioned-law convergence experiment, and exit-statistics validation
//! against the spectral predictions.

use crate::error::{Error, Result};
use crate::grid::{Grid, GridDensity};
use crate::model::Potential;
use crate::sampler::SimConfig;
use crate::spectral::{eigensolve, SpectralSolution, Window};
use crate::stats;
use rand::Rng;
use rayon::prelude::*;

/// Exit-location law on the absorbing part of the window boundary,
/// discretized at the boundary mesh nodes.
#[derive(Debug, Clone)]
pub struct ExitDensity {
    /// Boundary node positions.
    pub points: Vec<[f64; 2]>,
    /// Absorbing face of each point, encoded as (axis, side).
    pub faces: Vec<(usize, usize)>,
    /// Probability mass per point; sums to one.
    pub mass: Vec<f64>,
    /// Integral of the un-normalized flux formula. The continuum identity
    /// makes it exactly one; its defect measures discretization error.
    pub raw_integral: f64,
}

/// Spectral description of the law of a diffusion conditioned to remain
/// in a window: decay rates, the quasi-stationary density, and the joint
/// exit law it implies.
#[derive(Debug, Clone)]
pub struct QsdSolution {
    window: Window,
    grid: Grid,
    beta: f64,
    /// Two smallest exit rates; the exit time from the QSD is
    /// exponential with rate `lambda[0]`.
    pub lambda: [f64; 2],
    /// Ground eigenfunction, scaled so its window-Boltzmann average is 1;
    /// zero on masked and absorbing nodes.
    pub u1: Vec<f64>,
    /// Quasi-stationary density u1 exp(-beta V) on the window mesh.
    pub nu: GridDensity,
    pub exit: ExitDensity,
    /// Relative pencil residuals of the two eigenpairs.
    pub residual: [f64; 2],
    /// Defect of the discrete Boltzmann average of u1 against the
    /// trapezoid integral of nu (two normalizations of the same object).
    pub norm_defect: f64,
}

impl QsdSolution {
    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Mean exit time from the quasi-stationary law.
    pub fn mean_exit_time(&self) -> f64 {
        1.0 / self.lambda[0]
    }

    /// Spectral gap λ2 - λ1 controlling convergence to the QSD.
    pub fn gap(&self) -> f64 {
        self.lambda[1] - self.lambda[0]
    }
}

/// Ratio of the QSD relaxation time to the exit time, mapped to (0,1):
/// 1 - exp(-λ1/(λ2-λ1)). Near zero the window is a good metastable state
/// (the walker forgets its entry point long before it leaves).
pub fn metastability_index(sol: &QsdSolution) -> f64 {
    1.0 - (-sol.lambda[0] / sol.gap()).exp()
}

/// Solve the absorbed-generator eigenproblem on a window and assemble the
/// quasi-stationary law with its exit density. The window needs at least
/// one absorbing face and a mesh of at least 128 nodes per axis.
pub fn solve(p: &Potential, beta: f64, window: &Window, n: usize) -> Result<QsdSolution> {
    if window.is_pure_neumann() {
        return Err(Error::config(
            "quasi-stationary analysis needs at least one absorbing face",
        ));
    }
    if n < 128 {
        return Err(Error::config("quasi-stationary mesh needs at least 128 nodes"));
    }
    let sol = eigensolve(p, beta, window, n)?;
    let SpectralSolution { grid, lambda, vectors, mass, residual, .. } = sol;
    if !(lambda[0] > 0.0) {
        return Err(Error::numerics("leading exit rate is not positive"));
    }
    if !(lambda[1] > lambda[0] * (1.0 + 1e-12)) {
        return Err(Error::numerics("mesh cannot separate the two leading exit rates"));
    }

    // Window partition function. Active cells carry their domain-clipped
    // Boltzmann mass; absorbing boundary cells got zero mass from the
    // eigensolver but still belong to the window closure, so their
    // trapezoid share is restored (dropping them costs a full order of
    // accuracy in the gauge below).
    let mut zw = 0.0;
    for i in 0..grid.len() {
        if mass[i] > 0.0 {
            zw += mass[i];
        } else if absorbing_in_domain(p, window, &grid, i) {
            zw += grid.weight(i) * (-beta * p.energy(grid.coords(i))).exp();
        }
    }
    if !(zw > 0.0) {
        return Err(Error::numerics("window carries no Boltzmann mass"));
    }

    // Rescale the mean-square-normalized ground state to unit
    // window-Boltzmann average, the gauge in which exit-time and
    // exit-location formulas hold.
    let avg: f64 = mass
        .iter()
        .zip(&vectors[0])
        .map(|(&m, &u)| m * u)
        .sum::<f64>()
        / zw;
    if !(avg > 0.0) {
        return Err(Error::numerics("ground state failed to come out positive"));
    }
    let mut u1: Vec<f64> = vectors[0].iter().map(|&u| u / avg).collect();
    let mut min_interior = f64::INFINITY;
    for (i, &m) in mass.iter().enumerate() {
        if m > 0.0 {
            min_interior = min_interior.min(u1[i]);
        }
    }
    if min_interior < -1e-7 {
        return Err(Error::numerics(format!(
            "ground state changes sign in the interior (min {min_interior:.2e})"
        )));
    }
    for u in u1.iter_mut() {
        if *u < 0.0 {
            *u = 0.0;
        }
    }

    // Quasi-stationary density on the mesh. Its trapezoid integral should
    // already be one (two quadratures of the same gauge); the defect is
    // kept as a discretization diagnostic before exact renormalization.
    let nu_values: Vec<f64> = (0..grid.len())
        .map(|i| u1[i] * (-beta * p.energy(grid.coords(i))).exp() / zw)
        .collect();
    let mut nu = GridDensity::from_values(grid.clone(), nu_values)?;
    let norm_defect = (nu.integral() - 1.0).abs();
    nu.normalize()?;

    let exit = exit_density(p, beta, window, &grid, &u1, &mass, lambda[0], zw)?;

    Ok(QsdSolution {
        window: window.clone(),
        grid,
        beta,
        lambda,
        u1,
        nu,
        exit,
        residual,
        norm_defect,
    })
}

/// Whether a zero-mass node sits on an absorbing window face with its
/// boundary cell inside the domain (as opposed to a masked exterior node).
fn absorbing_in_domain(p: &Potential, window: &Window, grid: &Grid, i: usize) -> bool {
    let ij = grid.unravel(i);
    let mut on_face = false;
    let mut probe = grid.coords(i);
    for a in 0..window.dim() {
        let n_ax = grid.n_axis(a);
        let h = grid.h(a);
        if ij[a] == 0 && window.face_absorbing(a, 0) {
            on_face = true;
            probe[a] += h / 100.0;
        } else if ij[a] == n_ax - 1 && window.face_absorbing(a, 1) {
            on_face = true;
            probe[a] -= h / 100.0;
        }
    }
    on_face && p.domain().contains(probe)
}

/// Exit-location masses from the boundary flux of the ground state:
/// mass ∝ (β λ1)^-1 |∂u1/∂n| exp(-βV) / Z_W per boundary node, with the
/// normal derivative taken one-sidedly into the window (second order).
#[allow(clippy::too_many_arguments)]
fn exit_density(
    p: &Potential,
    beta: f64,
    window: &Window,
    grid: &Grid,
    u1: &[f64],
    mass: &[f64],
    lambda1: f64,
    zw: f64,
) -> Result<ExitDensity> {
    let dim = window.dim();
    let mut points = Vec::new();
    let mut faces = Vec::new();
    let mut raw = Vec::new();
    let scale = 1.0 / (beta * lambda1 * zw);

    for axis in 0..dim {
        for side in 0..2 {
            if !window.face_absorbing(axis, side) {
                continue;
            }
            let n_ax = grid.n_axis(axis);
            if n_ax < 3 {
                return Err(Error::numerics("mesh too coarse for boundary flux"));
            }
            let h = grid.h(axis);
            let (b_idx, i1, i2): (usize, usize, usize) = if side == 0 {
                (0, 1, 2)
            } else {
                (n_ax - 1, n_ax - 2, n_ax - 3)
            };
            let transverse = if dim == 2 { grid.n_axis(1 - axis) } else { 1 };
            for j in 0..transverse {
                let mut ij = [0usize; 2];
                ij[axis] = b_idx;
                if dim == 2 {
                    ij[1 - axis] = j;
                }
                let bnode = grid.ravel(ij);
                let x_b = grid.coords(bnode);
                let mut ij1 = ij;
                ij1[axis] = i1;
                let mut ij2 = ij;
                ij2[axis] = i2;
                let n1 = grid.ravel(ij1);
                let n2 = grid.ravel(ij2);
                // Nodes whose inward neighbors sit outside the domain
                // carry no flux.
                if mass[n1] <= 0.0 {
                    continue;
                }
                let deriv = (4.0 * u1[n1] - u1[n2]).abs() / (2.0 * h);
                let w_t = if dim == 2 {
                    // Transverse trapezoid weight along the face.
                    let nt = grid.n_axis(1 - axis);
                    let ht = grid.h(1 - axis);
                    if j == 0 || j == nt - 1 {
                        0.5 * ht
                    } else {
                        ht
                    }
                } else {
                    1.0
                };
                let m = scale * deriv * (-beta * p.energy(x_b)).exp() * w_t;
                points.push(x_b);
                faces.push((axis, side));
                raw.push(m);
            }
        }
    }
    let raw_integral: f64 = raw.iter().sum();
    if !(raw_integral > 0.0) {
        return Err(Error::numerics("exit flux vanished on every absorbing face"));
    }
    let mass_norm: Vec<f64> = raw.iter().map(|m| m / raw_integral).collect();
    Ok(ExitDensity { points, faces, mass: mass_norm, raw_integral })
}

/// Result of a Fleming-Viot run.
#[derive(Debug)]
pub struct FvResult {
    /// Particle positions at the final time.
    pub positions: Vec<[f64; 2]>,
    /// Occupation density over the second half of the run.
    pub density: GridDensity,
    /// Number of exit-respawn events.
    pub respawns: u64,
    /// Time from which the density was accumulated.
    pub averaged_from: f64,
}

/// Histogram resolution for Fleming-Viot occupation measures.
const FV_BINS: usize = 64;

/// Core Fleming-Viot stepping shared by the density estimator here and
/// the dephasing stage of parallel replica: advance every particle, then
/// respawn the exited ones onto uniformly chosen survivors (resolved in
/// particle-index order). Calls `on_step` after each completed step.
pub(crate) fn fv_evolve(
    p: &Potential,
    cfg: &SimConfig,
    window: &Window,
    xs: &mut [[f64; 2]],
    rngs: &mut [rand_chacha::ChaCha8Rng],
    respawn_rng: &mut rand_chacha::ChaCha8Rng,
    n_steps: u64,
    mut on_step: impl FnMut(u64, &[[f64; 2]]),
) -> Result<u64> {
    let n = xs.len();
    let mut respawns = 0u64;
    let mut survived: Vec<bool> = vec![true; n];
    let mut exited: Vec<usize> = Vec::new();
    for step in 1..=n_steps {
        exited.clear();
        for i in 0..n {
            let x = crate::sampler::em_step(p, cfg, xs[i], &mut rngs[i]);
            xs[i] = x;
            let inside = window.contains(x);
            survived[i] = inside;
            if !inside {
                exited.push(i);
            }
        }
        if !exited.is_empty() {
            let survivors: Vec<usize> = (0..n).filter(|&i| survived[i]).collect();
            if survivors.is_empty() {
                return Err(Error::numerics(format!(
                    "every particle exited the window at step {step}; \
                     shrink the time step or enlarge the ensemble"
                )));
            }
            for &i in &exited {
                let donor = survivors[respawn_rng.random_range(0..survivors.len())];
                xs[i] = xs[donor];
                respawns += 1;
            }
        }
        on_step(step, xs);
    }
    Ok(respawns)
}

/// Fleming-Viot particle system: `n_particles` walkers move independently
/// inside the window; a walker that exits is respawned at the position of
/// another walker chosen uniformly among the survivors of that step
/// (resolved in particle-index order). The long-run occupation measure
/// approximates the quasi-stationary density.
pub fn fleming_viot(
    p: &Potential,
    cfg: &SimConfig,
    window: &Window,
    starts: &[[f64; 2]],
    n_particles: usize,
    t_total: f64,
) -> Result<FvResult> {
    cfg.validate_for(p)?;
    if n_particles < 100 {
        return Err(Error::config("Fleming-Viot needs at least 100 particles"));
    }
    if starts.is_empty() {
        return Err(Error::config("no starting positions given"));
    }
    for x in starts {
        if !window.contains(*x) || !p.domain().contains(*x) {
            return Err(Error::config("starting position outside the window"));
        }
    }
    let n_steps = (t_total / cfg.dt).round() as u64;
    if n_steps == 0 {
        return Err(Error::config("horizon shorter than one step"));
    }

    let mut xs: Vec<[f64; 2]> = (0..n_particles)
        .map(|i| starts[i % starts.len()])
        .collect();
    let mut rngs: Vec<_> = (0..n_particles)
        .map(|i| crate::rng::stream_rng(cfg.seed, i as u64))
        .collect();
    let mut respawn_rng = crate::rng::stream_rng(cfg.seed, n_particles as u64);

    let (lo, hi) = window.bounds();
    let grid = if window.dim() == 1 {
        Grid::new_1d(lo[0], hi[0], FV_BINS)?
    } else {
        Grid::new_2d(lo, hi, [FV_BINS, FV_BINS])?
    };
    let mut occupation = vec![0.0; grid.len()];
    let tail_start = n_steps / 2;

    let respawns = fv_evolve(
        p,
        cfg,
        window,
        &mut xs,
        &mut rngs,
        &mut respawn_rng,
        n_steps,
        |step, xs| {
            if step > tail_start {
                for x in xs {
                    if let Some(b) = grid.bin_of(*x) {
                        occupation[b] += 1.0;
                    }
                }
            }
        },
    )?;
    let mut density = GridDensity::from_values(grid, occupation)?;
    density.normalize()?;
    Ok(FvResult {
        positions: xs,
        density,
        respawns,
        averaged_from: tail_start as f64 * cfg.dt,
    })
}

/// One observation of the conditioned-law experiment.
#[derive(Debug, Clone, Copy)]
pub struct ConditionedPoint {
    pub t: f64,
    /// Total-variation distance of the surviving ensemble to the QSD.
    pub tv: f64,
    pub survivors: usize,
}

/// Outcome of the conditioned-law convergence experiment.
#[derive(Debug, Clone)]
pub struct ConditionedDecay {
    pub points: Vec<ConditionedPoint>,
    /// Fitted exponential decay rate of the distance (compare with the
    /// spectral gap λ2 - λ1).
    pub rate: f64,
    pub residual: f64,
}

/// Evolve independent walkers from `psi0`, discard those that exit the
/// window, and measure the total-variation distance of the surviving
/// ensemble to the quasi-stationary density at each requested time.
/// Errors if fewer than 500 walkers survive to a requested time.
pub fn conditioned_law_convergence(
    p: &Potential,
    cfg: &SimConfig,
    sol: &QsdSolution,
    psi0: &GridDensity,
    times: &[f64],
    n_walkers: usize,
) -> Result<ConditionedDecay> {
    cfg.validate_for(p)?;
    if n_walkers < 1000 {
        return Err(Error::config("conditioned-law experiment needs at least 1000 walkers"));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    if sorted.is_empty() || sorted[0] <= 0.0 {
        return Err(Error::config("need positive observation times"));
    }
    let steps_at: Vec<u64> = sorted.iter().map(|t| (t / cfg.dt).round() as u64).collect();
    let window = sol.window();
    let (lo, hi) = window.bounds();
    let grid = if window.dim() == 1 {
        Grid::new_1d(lo[0], hi[0], FV_BINS)?
    } else {
        Grid::new_2d(lo, hi, [FV_BINS, FV_BINS])?
    };
    let nu_ref = sol.nu.rebin(grid.clone())?;

    let frames = sorted.len();
    let mut counts = vec![vec![0.0f64; grid.len()]; frames];
    let mut survivors = vec![0usize; frames];
    for w in 0..n_walkers {
        let mut rng = crate::rng::stream_rng(cfg.seed, w as u64);
        let mut x = psi0.sample(&mut rng);
        if !window.contains(x) {
            return Err(Error::config("initial density puts mass outside the window"));
        }
        let mut step = 0u64;
        'frames: for (k, &target) in steps_at.iter().enumerate() {
            while step < target {
                x = crate::sampler::em_step(p, cfg, x, &mut rng);
                step += 1;
                if !window.contains(x) {
                    break 'frames;
                }
            }
            if let Some(b) = grid.bin_of(x) {
                counts[k][b] += 1.0;
                survivors[k] += 1;
            }
        }
    }

    let mut points = Vec::with_capacity(frames);
    for k in 0..frames {
        if survivors[k] < 500 {
            return Err(Error::statistics(format!(
                "only {} walkers survive to t = {}; need at least 500",
                survivors[k], sorted[k]
            )));
        }
        let mut hist = GridDensity::from_values(grid.clone(), counts[k].clone())?;
        hist.normalize()?;
        let tv = crate::grid::tv_distance(&hist, &nu_ref)?;
        points.push(ConditionedPoint { t: sorted[k], tv, survivors: survivors[k] });
    }

    // Fit over the points that sit clearly above the sampling floor;
    // closer to it the measured distance is noise-inflated and the fitted
    // rate goes soft.
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for pt in &points {
        let floor = 0.4 * (FV_BINS as f64 / pt.survivors as f64).sqrt();
        if pt.tv > 2.0 * floor {
            ts.push(pt.t);
            ys.push(pt.tv);
        }
    }
    if ts.len() < 3 {
        return Err(Error::statistics(
            "fewer than 3 observation times above the sampling floor",
        ));
    }
    let (rate, _, residual) = stats::fit_log_decay(&ts, &ys)?;
    Ok(ConditionedDecay { points, rate, residual })
}

/// Where exit sampling starts.
#[derive(Debug, Clone, Copy)]
pub enum ExitStart {
    /// Sample initial positions from the quasi-stationary density.
    Qsd,
    /// All walkers start at a fixed point.
    Point([f64; 2]),
}

/// One sampled exit event.
#[derive(Debug, Clone, Copy)]
pub struct ExitRecord {
    pub time: f64,
    pub position: [f64; 2],
    /// Absorbing face the walker crossed, encoded as (axis, side).
    pub face: (usize, usize),
}

/// Monte Carlo exit statistics compared against the spectral predictions.
#[derive(Debug)]
pub struct ExitStats {
    pub records: Vec<ExitRecord>,
    pub mean: f64,
    pub mean_stderr: f64,
    /// Kolmogorov-Smirnov comparison with Exp(λ1).
    pub ks: stats::KsReport,
    /// Independence of exit time quartile and exit location
    /// (None when the window has a single absorbing boundary cell).
    pub independence: Option<stats::Chi2Report>,
    /// Total-variation distance of the empirical exit-location law to the
    /// spectral exit density.
    pub location_tv: f64,
}

/// Simulate exits from the window and compare (time, location) statistics
/// with the quasi-stationary predictions: exponential times, the flux
/// exit density, and independence of time and location.
pub fn exit_statistics(
    p: &Potential,
    cfg: &SimConfig,
    sol: &QsdSolution,
    start: ExitStart,
    n_samples: usize,
) -> Result<ExitStats> {
    cfg.validate_for(p)?;
    if n_samples < 1000 {
        return Err(Error::config("exit statistics need at least 1000 samples"));
    }
    let window = sol.window();
    if let ExitStart::Point(x) = start {
        if !window.contains(x) {
            return Err(Error::config("starting point outside the window"));
        }
    }
    let max_steps = ((200.0 / sol.lambda[0]) / cfg.dt).round() as u64;
    // Walkers are independent with per-index noise streams, so the
    // parallel map reproduces the sequential result exactly.
    let records: Vec<ExitRecord> = (0..n_samples)
        .into_par_iter()
        .map(|w| {
            let mut rng = crate::rng::stream_rng(cfg.seed, w as u64);
            let mut x = match start {
                ExitStart::Qsd => sol.nu.sample(&mut rng),
                ExitStart::Point(x0) => x0,
            };
            if !window.contains(x) {
                // Mesh-cell jitter can spill just past an absorbing face.
                x = clamp_into(window, x);
            }
            let mut step = 0u64;
            loop {
                x = crate::sampler::em_step(p, cfg, x, &mut rng);
                step += 1;
                if !window.contains(x) {
                    return Ok(ExitRecord {
                        time: step as f64 * cfg.dt,
                        position: x,
                        face: crossed_face(window, x),
                    });
                }
                if step >= max_steps {
                    return Err(Error::numerics(
                        "walker failed to exit within 200 mean exit times",
                    ));
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let times: Vec<f64> = records.iter().map(|r| r.time).collect();
    let mean = stats::mean(&times);
    let sd = stats::variance(&times).sqrt();
    let mean_stderr = sd / (times.len() as f64).sqrt();
    let lambda1 = sol.lambda[0];
    let ks = stats::ks_one_sample(&times, |t| 1.0 - (-lambda1 * t).exp())?;

    // Independence of exit-time quartile and exit face; needs at least
    // two distinct faces to be informative.
    let mut face_ids: Vec<(usize, usize)> = records.iter().map(|r| r.face).collect();
    face_ids.sort_unstable();
    face_ids.dedup();
    let independence = if face_ids.len() >= 2 {
        let q1 = stats::quantile(&times, 0.25);
        let q2 = stats::quantile(&times, 0.5);
        let q3 = stats::quantile(&times, 0.75);
        let mut table = vec![vec![0.0; face_ids.len()]; 4];
        for r in &records {
            let row = if r.time <= q1 {
                0
            } else if r.time <= q2 {
                1
            } else if r.time <= q3 {
                2
            } else {
                3
            };
            let col = face_ids.iter().position(|&f| f == r.face).expect("face listed");
            table[row][col] += 1.0;
        }
        Some(stats::chi2_independence(&table)?)
    } else {
        None
    };

    let location_tv = exit_location_tv(sol, &records);
    Ok(ExitStats { records, mean, mean_stderr, ks, independence, location_tv })
}

/// Project an exit position onto the exit-density support and measure the
/// total-variation distance of the empirical location law.
fn exit_location_tv(sol: &QsdSolution, records: &[ExitRecord]) -> f64 {
    let exit = &sol.exit;
    let mut counts = vec![0.0f64; exit.points.len()];
    for r in records {
        // Nearest boundary node on the crossed face.
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (i, (pt, face)) in exit.points.iter().zip(&exit.faces).enumerate() {
            if *face != r.face {
                continue;
            }
            let dx = pt[0] - r.position[0];
            let dy = pt[1] - r.position[1];
            let d = dx * dx + dy * dy;
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        if best == usize::MAX {
            // Face carries no flux nodes; count against the whole law.
            continue;
        }
        counts[best] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    let mut tv = 0.0;
    for (c, m) in counts.iter().zip(&exit.mass) {
        tv += (c / total - m).abs();
    }
    0.5 * tv
}

fn clamp_into(window: &Window, x: [f64; 2]) -> [f64; 2] {
    let (lo, hi) = window.bounds();
    let mut y = x;
    for a in 0..window.dim() {
        let eps = 1e-9 * (hi[a] - lo[a]);
        y[a] = y[a].clamp(lo[a] + eps, hi[a] - eps);
    }
    y
}

/// Classify which absorbing face a just-exited position crossed.
pub(crate) fn crossed_face(window: &Window, x: [f64; 2]) -> (usize, usize) {
    let (lo, hi) = window.bounds();
    let mut best = (0usize, 0usize);
    let mut best_d = f64::INFINITY;
    for axis in 0..window.dim() {
        for side in 0..2 {
            if !window.face_absorbing(axis, side) {
                continue;
            }
            let plane = if side == 0 { lo[axis] } else { hi[axis] };
            let d = (x[axis] - plane).abs();
            if d < best_d {
                best_d = d;
                best = (axis, side);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn flat_unit() -> Potential {
        Potential::builtin("flat", &[0.0, 1.0]).expect("flat builtin")
    }

    // Flat potential on a larger box so walkers genuinely leave the unit
    // window instead of reflecting off coincident domain walls.
    fn flat_wide() -> Potential {
        Potential::builtin("flat", &[-1.0, 2.0]).expect("flat builtin")
    }

    fn double_well() -> Potential {
        Potential::builtin("double-well-1d", &[]).expect("double well builtin")
    }

    #[test]
    fn flat_interval_matches_sine_ground_state() {
        let p = flat_unit();
        let beta = 1.0;
        let w = Window::interval(0.0, 1.0).unwrap().absorbing_all();
        let sol = solve(&p, beta, &w, 513).unwrap();
        assert!((sol.lambda[0] - PI * PI).abs() / (PI * PI) < 1e-3, "λ1 = {}", sol.lambda[0]);
        assert!(
            (sol.lambda[1] - 4.0 * PI * PI).abs() / (4.0 * PI * PI) < 1e-3,
            "λ2 = {}",
            sol.lambda[1]
        );
        // Ground state (π/2) sin(πx) in the unit-Boltzmann-average gauge.
        let g = &sol.grid;
        let mut l2 = 0.0;
        for i in 0..g.len() {
            let x = g.node(0, i);
            let exact = 0.5 * PI * (PI * x).sin();
            l2 += g.weight(i) * (sol.u1[i] - exact) * (sol.u1[i] - exact);
        }
        assert!(l2.sqrt() < 1e-3, "L2 distance {}", l2.sqrt());
        // Symmetric exit: half the mass on each endpoint.
        assert_eq!(sol.exit.points.len(), 2);
        let left: f64 = sol
            .exit
            .mass
            .iter()
            .zip(&sol.exit.faces)
            .filter(|(_, f)| f.1 == 0)
            .map(|(m, _)| m)
            .sum();
        assert!((left - 0.5).abs() < 1e-3, "left exit mass {left}");
        assert!((sol.exit.raw_integral - 1.0).abs() < 1e-3);
        assert!(sol.norm_defect < 1e-6);
        assert!(sol.residual[0] < 1e-8 && sol.residual[1] < 1e-8);
        let idx = metastability_index(&sol);
        let exact_idx = 1.0 - (-1.0f64 / 3.0).exp();
        assert!((idx - exact_idx).abs() < 1e-3);
    }

    #[test]
    fn left_well_exit_statistics_are_one_sided() {
        let p = double_well();
        let beta = 4.0;
        let w = Window::interval(-2.5, 0.0).unwrap().absorbing_all();
        let sol = solve(&p, beta, &w, 513).unwrap();
        assert!(sol.lambda[0] > 0.0 && sol.lambda[1] > sol.lambda[0]);
        // Virtually all exit flux crosses the saddle at 0.
        let right: f64 = sol
            .exit
            .mass
            .iter()
            .zip(&sol.exit.faces)
            .filter(|(_, f)| f.1 == 1)
            .map(|(m, _)| m)
            .sum();
        assert!(right > 1.0 - 1e-6, "right exit mass {right}");
        assert!((sol.exit.raw_integral - 1.0).abs() < 1e-3);
        // Deep metastability: relaxation much faster than exit.
        assert!(metastability_index(&sol) < 0.05);
    }

    #[test]
    fn eigenvalues_are_mesh_cauchy() {
        let p = double_well();
        let beta = 4.0;
        let w = Window::interval(-2.5, 0.0).unwrap().absorbing_all();
        let l129 = solve(&p, beta, &w, 129).unwrap().lambda[0];
        let l257 = solve(&p, beta, &w, 257).unwrap().lambda[0];
        let l513 = solve(&p, beta, &w, 513).unwrap().lambda[0];
        let l1025 = solve(&p, beta, &w, 1025).unwrap().lambda[0];
        let d1 = (l257 - l129).abs();
        let d2 = (l513 - l257).abs();
        let d3 = (l1025 - l513).abs();
        assert!(d2 * 2.0 <= d1, "refinement stalled: {d1} -> {d2}");
        assert!(d3 * 2.0 <= d2, "refinement stalled: {d2} -> {d3}");
    }

    #[test]
    fn fleming_viot_occupation_approaches_the_qsd() {
        let p = flat_wide();
        let beta = 1.0;
        let w = Window::interval(0.0, 1.0).unwrap().absorbing_all();
        let sol = solve(&p, beta, &w, 513).unwrap();
        let cfg = SimConfig::new(beta, 2e-5, 71);
        let fv = fleming_viot(&p, &cfg, &w, &[[0.5, 0.0]], 2000, 1.0).unwrap();
        let nu_coarse = sol.nu.rebin(fv.density.grid().clone()).unwrap();
        let tv = crate::grid::tv_distance(&fv.density, &nu_coarse).unwrap();
        assert!(tv < 0.05, "TV to QSD {tv}");
        assert!(fv.respawns > 0);
    }

    #[test]
    fn fleming_viot_collapse_is_an_error() {
        let p = flat_unit();
        let w = Window::interval(0.499, 0.501).unwrap().absorbing_all();
        // Step kick far wider than the window kills every particle at once.
        let cfg = SimConfig::new(1.0, 2e-3, 5);
        let starts = [[0.5, 0.0]];
        let err = fleming_viot(&p, &cfg, &w, &starts, 100, 0.5);
        assert!(err.is_err());
    }

    #[test]
    fn conditioned_law_decays_at_the_spectral_gap() {
        let p = flat_wide();
        let beta = 1.0;
        let w = Window::interval(0.0, 1.0).unwrap().absorbing_all();
        let sol = solve(&p, beta, &w, 513).unwrap();
        let cfg = SimConfig::new(beta, 2e-5, 3);
        // Point-like start off-center so the second mode is excited.
        let g0 = Grid::new_1d(0.29, 0.31, 17).unwrap();
        let psi0 = GridDensity::from_fn(g0, |_| 1.0).unwrap();
        let times: Vec<f64> = (0..7).map(|k| 0.03 + 0.015 * k as f64).collect();
        let dec =
            conditioned_law_convergence(&p, &cfg, &sol, &psi0, &times, 20_000).unwrap();
        let gap = sol.gap();
        assert!(
            (dec.rate - gap).abs() / gap < 0.25,
            "rate {} vs gap {gap}",
            dec.rate
        );
    }

    #[test]
    fn exits_from_the_qsd_are_exponential_and_independent() {
        let p = flat_wide();
        let beta = 1.0;
        let w = Window::interval(0.0, 1.0).unwrap().absorbing_all();
        let sol = solve(&p, beta, &w, 513).unwrap();
        let cfg = SimConfig::new(beta, 1e-5, 13);
        let st = exit_statistics(&p, &cfg, &sol, ExitStart::Qsd, 1500).unwrap();
        assert!(st.ks.p_value > 0.01, "KS p = {}", st.ks.p_value);
        assert!(
            (st.mean - sol.mean_exit_time()).abs() < 3.0 * st.mean_stderr,
            "mean {} vs {} (stderr {})",
            st.mean,
            sol.mean_exit_time(),
            st.mean_stderr
        );
        let indep = st.independence.expect("two exit faces");
        assert!(indep.p_value > 0.01, "independence p = {}", indep.p_value);
        assert!(st.location_tv < 0.05, "location TV {}", st.location_tv);
    }

    #[test]
    fn boundary_start_breaks_independence() {
        let p = flat_wide();
        let beta = 1.0;
        let w = Window::interval(0.0, 1.0).unwrap().absorbing_all();
        let sol = solve(&p, beta, &w, 513).unwrap();
        let cfg = SimConfig::new(beta, 1e-5, 17);
        let st =
            exit_statistics(&p, &cfg, &sol, ExitStart::Point([0.05, 0.0]), 1500).unwrap();
        // Early exits cluster on the near boundary.
        let indep = st.independence.expect("two exit faces");
        assert!(indep.p_value < 0.01, "independence p = {}", indep.p_value);
        assert!(st.ks.p_value < 0.01, "KS p = {}", st.ks.p_value);
    }
}
