//! Parallel replica dynamics over a state partition, the quasi-stationary
//! kinetic Monte Carlo reduction, and the comparison harness between
//! direct, parallel-replica, and kMC coarse trajectories.

use crate::error::{Error, Result};
use crate::grid::{Grid, GridDensity};
use crate::model::{Potential, Region, StatePartition};
use crate::qsd::{self, QsdSolution};
use crate::rng::stream_rng;
use crate::sampler::{em_step, SimConfig};
use crate::spectral::{default_window, Window};
use crate::stats;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Hard cap on per-replica steps in the parallel stage.
const PARALLEL_STEP_CAP: u64 = 1_000_000_000;
/// Hard cap on auxiliary commitment simulations in the kMC build.
const COMMIT_STEP_CAP: u64 = 1_000_000;
/// Lockstep batch length for the parallel stage.
const DEFAULT_BATCH: u64 = 1024;

/// Parameters of a parallel replica run.
#[derive(Debug, Clone)]
pub struct ParRepConfig {
    /// Replica count N.
    pub n_replicas: usize,
    /// Sliding-window length for the decorrelation stage.
    pub tau_corr: f64,
    /// Fleming-Viot duration of the dephasing stage.
    pub tau_phase: f64,
    pub sim: SimConfig,
}

impl ParRepConfig {
    pub fn new(n_replicas: usize, tau_corr: f64, tau_phase: f64, sim: SimConfig) -> ParRepConfig {
        ParRepConfig { n_replicas, tau_corr, tau_phase, sim }
    }

    fn validate(&self, p: &Potential) -> Result<()> {
        self.sim.validate_for(p)?;
        if self.n_replicas < 2 {
            return Err(Error::config("parallel replica needs at least 2 replicas"));
        }
        if !(self.tau_corr > 0.0) {
            return Err(Error::config("decorrelation time must be positive"));
        }
        if !(self.tau_phase > 0.0) {
            return Err(Error::config("dephasing time must be positive"));
        }
        Ok(())
    }
}

/// Decorrelation and dephasing horizon suggested by a window's spectrum:
/// five relaxation times of the conditioned dynamics, leaving an e^-5
/// residual of the entry-point memory.
pub fn suggested_correlation_time(sol: &QsdSolution) -> f64 {
    5.0 / sol.gap()
}

/// One committed visit of the coarse process: the state, when it was
/// entered, how long it lasted, and where the walker was when it left
/// (the current position for a still-open final visit).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseEvent {
    pub entry: f64,
    pub state: usize,
    pub duration: f64,
    pub exit_point: [f64; 2],
}

/// Piecewise-constant state trajectory. Consecutive events always carry
/// different labels (same-label pushes merge), entry times increase
/// strictly, and durations are positive.
#[derive(Debug, Clone, Default)]
pub struct CoarseTrajectory {
    events: Vec<CoarseEvent>,
    total: f64,
}

impl CoarseTrajectory {
    pub fn new() -> CoarseTrajectory {
        CoarseTrajectory { events: Vec::new(), total: 0.0 }
    }

    /// Append a visit; a visit to the state already on top extends it.
    pub fn push(&mut self, state: usize, duration: f64, exit_point: [f64; 2]) {
        if !(duration > 0.0) {
            return;
        }
        match self.events.last_mut() {
            Some(top) if top.state == state => {
                top.duration += duration;
                top.exit_point = exit_point;
            }
            _ => {
                self.events.push(CoarseEvent { entry: self.total, state, duration, exit_point });
            }
        }
        self.total += duration;
    }

    pub fn events(&self) -> &[CoarseEvent] {
        &self.events
    }

    pub fn total_time(&self) -> f64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Completed residence durations in one state. The final event is
    /// censored by the end of the run and is excluded.
    pub fn residences(&self, state: usize) -> Vec<f64> {
        let n = self.events.len();
        self.events
            .iter()
            .take(n.saturating_sub(1))
            .filter(|e| e.state == state)
            .map(|e| e.duration)
            .collect()
    }

    /// Labels that occur in the trajectory, ascending.
    pub fn labels(&self) -> Vec<usize> {
        let mut ls: Vec<usize> = self.events.iter().map(|e| e.state).collect();
        ls.sort_unstable();
        ls.dedup();
        ls
    }

    /// Counts of observed transitions, indexed `[from][to]`.
    pub fn transition_counts(&self) -> Vec<Vec<f64>> {
        let n = self.events.iter().map(|e| e.state).max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0.0; n]; n];
        for pair in self.events.windows(2) {
            counts[pair[0].state][pair[1].state] += 1.0;
        }
        counts
    }

    /// Total time spent per state label.
    pub fn occupation(&self) -> Vec<f64> {
        let n = self.events.iter().map(|e| e.state).max().map_or(0, |m| m + 1);
        let mut occ = vec![0.0; n];
        for e in &self.events {
            occ[e.state] += e.duration;
        }
        occ
    }

    /// Remove flickers: every visit shorter than `tau` is folded into the
    /// preceding committed visit (leading flickers are credited to the
    /// first committed one). Total time is conserved. Applying the same
    /// filter to trajectories from different generators makes their
    /// residence laws comparable even when one resolves boundary
    /// recrossings and another does not.
    pub fn debounce(&self, tau: f64) -> CoarseTrajectory {
        let mut out = CoarseTrajectory::new();
        let mut lead = 0.0;
        for ev in &self.events {
            if ev.duration >= tau {
                out.push(ev.state, lead + ev.duration, ev.exit_point);
                lead = 0.0;
            } else if let Some(top) = out.events.last_mut() {
                top.duration += ev.duration;
                top.exit_point = ev.exit_point;
                out.total += ev.duration;
            } else {
                lead += ev.duration;
            }
        }
        if out.is_empty() && !self.events.is_empty() {
            // Nothing committed: attribute everything to the dominant state.
            let occ = self.occupation();
            let dominant = occ
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite durations"))
                .map(|(i, _)| i)
                .expect("nonempty");
            out.push(dominant, self.total, self.events.last().expect("nonempty").exit_point);
        }
        out
    }
}

/// Sliding-window commitment detector: feed one label per step; reports
/// the state once `need` consecutive steps carry the same label.
#[derive(Debug, Clone)]
pub(crate) struct CommitWindow {
    need: u64,
    state: Option<usize>,
    run: u64,
}

impl CommitWindow {
    pub(crate) fn new(need: u64) -> CommitWindow {
        CommitWindow { need: need.max(1), state: None, run: 0 }
    }

    pub(crate) fn observe(&mut self, label: usize) -> Option<usize> {
        match self.state {
            Some(s) if s == label => self.run += 1,
            _ => {
                self.state = Some(label);
                self.run = 1;
            }
        }
        if self.run >= self.need {
            self.state
        } else {
            None
        }
    }
}

/// Eigensolver window of a partition region: the region box clipped to
/// the domain (or to the Boltzmann truncation box on all of space), with
/// a face absorbing exactly when it came from the region rather than from
/// the clip (walkers reflect off domain walls but genuinely leave through
/// region boundaries).
pub fn state_window(p: &Potential, beta: f64, region: &Region) -> Result<Window> {
    let outer = default_window(p, beta)?;
    let (olo, ohi) = outer.bounds();
    let dim = p.domain().dim();
    let mut lo = [0.0; 2];
    let mut hi = [0.0; 2];
    let mut absorbing = [[false; 2]; 2];
    for a in 0..dim {
        lo[a] = region.lo[a].max(olo[a]);
        hi[a] = region.hi[a].min(ohi[a]);
        if !(lo[a] < hi[a]) {
            return Err(Error::config(format!(
                "region {} does not intersect the accessible domain",
                region.label
            )));
        }
        absorbing[a][0] = region.lo[a] > olo[a];
        absorbing[a][1] = region.hi[a] < ohi[a];
    }
    let mut w = if dim == 1 {
        Window::interval(lo[0], hi[0])?
    } else {
        Window::rectangle(lo, hi)?
    };
    for a in 0..dim {
        for side in 0..2 {
            if absorbing[a][side] {
                w = w.absorbing(a, side);
            }
        }
    }
    if w.is_pure_neumann() {
        return Err(Error::config(format!(
            "region {} has no face to leave through",
            region.label
        )));
    }
    Ok(w)
}

/// Outcome of a single decorrelation attempt.
#[derive(Debug, Clone, Copy)]
pub enum DecorrOutcome {
    /// The walker stayed in one state for a full window.
    Decorrelated { state: usize, position: [f64; 2], elapsed: f64 },
    /// The walker changed state first.
    Hopped { from: usize, to: usize, position: [f64; 2], elapsed: f64 },
}

/// Run the reference walker until it either stays `tau_corr` continuously
/// in its current state (decorrelated) or hops to a different state.
/// Points covered by no region inherit the previous label.
pub fn decorrelation_step(
    p: &Potential,
    partition: &StatePartition,
    cfg: &SimConfig,
    x0: [f64; 2],
    tau_corr: f64,
) -> Result<DecorrOutcome> {
    cfg.validate_for(p)?;
    if !(tau_corr > 0.0) {
        return Err(Error::config("decorrelation time must be positive"));
    }
    let start = partition
        .state_of(x0)
        .ok_or_else(|| Error::config("starting position is not inside any state"))?;
    let need = (tau_corr / cfg.dt).ceil() as u64;
    let mut rng = stream_rng(cfg.seed, 0);
    let mut x = x0;
    let mut step = 0u64;
    let mut run = 0u64;
    loop {
        x = em_step(p, cfg, x, &mut rng);
        step += 1;
        run += 1;
        let label = partition.state_of(x).unwrap_or(start);
        if label != start {
            return Ok(DecorrOutcome::Hopped {
                from: start,
                to: label,
                position: x,
                elapsed: step as f64 * cfg.dt,
            });
        }
        if run >= need && partition.state_of(x) == Some(start) {
            return Ok(DecorrOutcome::Decorrelated {
                state: start,
                position: x,
                elapsed: step as f64 * cfg.dt,
            });
        }
        if step >= PARALLEL_STEP_CAP {
            return Err(Error::numerics("decorrelation exceeded the step cap"));
        }
    }
}

/// Fraction of independent attempts from `x0` that decorrelate before
/// hopping. High values mean the state is a good metastable trap for the
/// chosen window length; low values mean parallel replica will thrash.
pub fn decorrelation_success_rate(
    p: &Potential,
    partition: &StatePartition,
    cfg: &SimConfig,
    x0: [f64; 2],
    tau_corr: f64,
    n_attempts: usize,
) -> Result<f64> {
    if n_attempts == 0 {
        return Err(Error::config("need at least one attempt"));
    }
    let outcomes: Vec<DecorrOutcome> = (0..n_attempts)
        .into_par_iter()
        .map(|k| {
            let sub = SimConfig { seed: cfg.seed.wrapping_add(k as u64), ..*cfg };
            decorrelation_step(p, partition, &sub, x0, tau_corr)
        })
        .collect::<Result<Vec<_>>>()?;
    let ok = outcomes
        .iter()
        .filter(|o| matches!(o, DecorrOutcome::Decorrelated { .. }))
        .count();
    Ok(ok as f64 / n_attempts as f64)
}

/// Fleming-Viot dephasing: evolve `n` replicas seeded at `x0` inside the
/// window for `tau_phase`, respawning leavers onto survivors. Returns the
/// replica positions, approximately distributed as the window's QSD. The
/// simulation clock of the coarse process does not advance here.
pub fn dephasing_step(
    p: &Potential,
    cfg: &SimConfig,
    window: &Window,
    x0: [f64; 2],
    n: usize,
    tau_phase: f64,
) -> Result<Vec<[f64; 2]>> {
    cfg.validate_for(p)?;
    if n < 2 {
        return Err(Error::config("dephasing needs at least 2 replicas"));
    }
    if !window.contains(x0) {
        return Err(Error::config("seed position outside the window"));
    }
    if tau_phase < 0.0 {
        return Err(Error::config("dephasing time must not be negative"));
    }
    let n_steps = (tau_phase / cfg.dt).round() as u64;
    let mut xs = vec![x0; n];
    let mut rngs: Vec<ChaCha8Rng> =
        (0..n).map(|i| stream_rng(cfg.seed, i as u64)).collect();
    let mut respawn = stream_rng(cfg.seed, n as u64);
    qsd::fv_evolve(p, cfg, window, &mut xs, &mut rngs, &mut respawn, n_steps, |_, _| {})?;
    Ok(xs)
}

/// First-exit result of the parallel stage.
#[derive(Debug, Clone, Copy)]
pub struct ParallelExit {
    /// Index of the replica that exited first.
    pub replica: usize,
    /// Its local step count at exit (wall-clock steps of the stage).
    pub steps: u64,
    pub exit_point: [f64; 2],
    /// Total walker steps executed across replicas.
    pub consumed_steps: u64,
}

impl ParallelExit {
    /// Physical time credited to the coarse clock: N times the first
    /// exit time, the parallel replica identity.
    pub fn clock_advance_steps(&self, n_replicas: usize) -> u64 {
        self.steps * n_replicas as u64
    }
}

fn parallel_stage(
    p: &Potential,
    cfg: &SimConfig,
    window: &Window,
    xs: &mut [[f64; 2]],
    rngs: &mut [ChaCha8Rng],
    batch: u64,
) -> Result<ParallelExit> {
    let mut done = 0u64;
    let mut consumed = 0u64;
    loop {
        let target = done + batch;
        // (steps, replica) lexicographic minimum; within a batch replicas
        // are scanned in index order, so a later replica must exit
        // strictly earlier to win.
        let mut best: Option<(u64, usize, [f64; 2])> = None;
        for (i, x) in xs.iter_mut().enumerate() {
            let limit = best.map_or(target, |(s, _, _)| s - 1);
            let mut local = done;
            while local < limit {
                *x = em_step(p, cfg, *x, &mut rngs[i]);
                local += 1;
                consumed += 1;
                if !window.contains(*x) {
                    best = Some((local, i, *x));
                    break;
                }
            }
        }
        if let Some((steps, replica, exit_point)) = best {
            return Ok(ParallelExit { replica, steps, exit_point, consumed_steps: consumed });
        }
        done = target;
        if done >= PARALLEL_STEP_CAP {
            return Err(Error::numerics(
                "no replica exited within the step cap; the state looks mis-sized",
            ));
        }
    }
}

/// Evolve replicas (assumed approximately QSD-distributed in the window)
/// until the first one exits. Ties between replicas exiting on the same
/// discrete step go to the lowest index.
pub fn parallel_step(
    p: &Potential,
    cfg: &SimConfig,
    window: &Window,
    replicas: &[[f64; 2]],
) -> Result<ParallelExit> {
    cfg.validate_for(p)?;
    if replicas.is_empty() {
        return Err(Error::config("no replicas given"));
    }
    for x in replicas {
        if !window.contains(*x) {
            return Err(Error::config("replica outside the window"));
        }
    }
    let mut xs = replicas.to_vec();
    let mut rngs: Vec<ChaCha8Rng> =
        (0..xs.len()).map(|i| stream_rng(cfg.seed, i as u64)).collect();
    parallel_stage(p, cfg, window, &mut xs, &mut rngs, DEFAULT_BATCH)
}

/// Per-stage cost accounting of a parallel replica run. Step counters
/// are exact; times are counters scaled by dt.
#[derive(Debug, Clone, Default)]
pub struct ParRepAccounting {
    /// Walker steps executed by stage (total compute).
    pub decorr_steps: u64,
    pub phase_steps: u64,
    pub parallel_steps: u64,
    /// Wall-clock steps assuming replicas run concurrently in lockstep.
    pub wall_steps: u64,
    /// Simulated coarse time, in steps, credited by decorrelation.
    pub decorr_clock_steps: u64,
    /// Simulated coarse time, in steps, credited by parallel stages (N x
    /// first exit each round).
    pub parallel_clock_steps: u64,
    /// Completed dephase-parallel rounds.
    pub rounds: u64,
    pub dt: f64,
}

impl ParRepAccounting {
    /// Total simulated coarse time in steps; equals the sum of the two
    /// clock contributions exactly.
    pub fn simulated_steps(&self) -> u64 {
        self.decorr_clock_steps + self.parallel_clock_steps
    }

    pub fn simulated_time(&self) -> f64 {
        self.simulated_steps() as f64 * self.dt
    }

    pub fn wall_time(&self) -> f64 {
        self.wall_steps as f64 * self.dt
    }

    /// Simulated time per wall time; a sequential run scores 1.
    pub fn speedup(&self) -> f64 {
        self.simulated_steps() as f64 / self.wall_steps as f64
    }
}

/// Full three-stage parallel replica loop: decorrelate the reference
/// walker (recording raw hops), dephase N replicas in the decorrelated
/// state, evolve them to first exit, credit N times the exit time to the
/// coarse clock, and continue from the exit point until `t_total` of
/// simulated time has accumulated.
pub fn parrep_run(
    p: &Potential,
    partition: &StatePartition,
    parcfg: &ParRepConfig,
    x0: [f64; 2],
    t_total: f64,
) -> Result<(CoarseTrajectory, ParRepAccounting)> {
    parcfg.validate(p)?;
    let cfg = &parcfg.sim;
    let n = parcfg.n_replicas;
    let horizon = (t_total / cfg.dt).round() as u64;
    if horizon == 0 {
        return Err(Error::config("horizon shorter than one step"));
    }
    let need = (parcfg.tau_corr / cfg.dt).ceil() as u64;
    let phase_len = (parcfg.tau_phase / cfg.dt).round() as u64;

    let mut state = partition
        .state_of(x0)
        .ok_or_else(|| Error::config("starting position is not inside any state"))?;
    let mut windows: Vec<Option<Window>> = Vec::new();

    let mut walker_rng = stream_rng(cfg.seed, 0);
    let mut replica_rngs: Vec<ChaCha8Rng> =
        (1..=n).map(|i| stream_rng(cfg.seed, i as u64)).collect();
    let mut respawn_rng = stream_rng(cfg.seed, n as u64 + 1);

    let mut traj = CoarseTrajectory::new();
    let mut acc = ParRepAccounting { dt: cfg.dt, ..Default::default() };
    let mut x = x0;
    let mut clock = 0u64;

    'outer: loop {
        // Decorrelation: raw coarse recording, one-to-one simulated time.
        let mut run = 0u64;
        loop {
            if clock >= horizon {
                if run > 0 {
                    traj.push(state, run as f64 * cfg.dt, x);
                }
                break 'outer;
            }
            x = em_step(p, cfg, x, &mut walker_rng);
            clock += 1;
            run += 1;
            acc.decorr_steps += 1;
            acc.decorr_clock_steps += 1;
            acc.wall_steps += 1;
            match partition.state_of(x) {
                Some(s) if s != state => {
                    traj.push(state, run as f64 * cfg.dt, x);
                    state = s;
                    run = 0;
                }
                Some(_) if run >= need => {
                    traj.push(state, run as f64 * cfg.dt, x);
                    break;
                }
                _ => {}
            }
        }

        // Dephasing: clock frozen, replicas forget the entry point.
        let label = state;
        if windows.len() <= label {
            windows.resize(label + 1, None);
        }
        if windows[label].is_none() {
            let region = partition
                .region(label)
                .ok_or_else(|| Error::config("state label without a region"))?;
            windows[label] = Some(state_window(p, cfg.beta, region)?);
        }
        let window = windows[label].as_ref().expect("window cached");
        let mut xs = vec![x; n];
        qsd::fv_evolve(
            p,
            cfg,
            window,
            &mut xs,
            &mut replica_rngs,
            &mut respawn_rng,
            phase_len,
            |_, _| {},
        )?;
        acc.phase_steps += phase_len * n as u64;
        acc.wall_steps += phase_len;

        // Parallel: first exit wins; N times its time goes on the clock.
        let exit = parallel_stage(p, cfg, window, &mut xs, &mut replica_rngs, DEFAULT_BATCH)?;
        let advance = exit.clock_advance_steps(n);
        clock += advance;
        acc.parallel_clock_steps += advance;
        acc.parallel_steps += exit.consumed_steps;
        acc.wall_steps += exit.steps;
        acc.rounds += 1;
        traj.push(state, advance as f64 * cfg.dt, exit.exit_point);

        x = exit.exit_point;
        state = match partition.state_of(x) {
            Some(s) => s,
            // Exit into uncovered territory keeps the old label until the
            // next decorrelation settles it.
            None => state,
        };
        if clock >= horizon {
            break;
        }
    }
    Ok((traj, acc))
}

/// Plain sequential simulation recorded as a coarse trajectory, the
/// ground truth the accelerated generators are compared against. Points
/// covered by no region inherit the previous label.
pub fn direct_run(
    p: &Potential,
    partition: &StatePartition,
    cfg: &SimConfig,
    x0: [f64; 2],
    t_total: f64,
) -> Result<CoarseTrajectory> {
    cfg.validate_for(p)?;
    let horizon = (t_total / cfg.dt).round() as u64;
    if horizon == 0 {
        return Err(Error::config("horizon shorter than one step"));
    }
    let mut state = partition
        .state_of(x0)
        .ok_or_else(|| Error::config("starting position is not inside any state"))?;
    let mut rng = stream_rng(cfg.seed, 0);
    let mut traj = CoarseTrajectory::new();
    let mut x = x0;
    let mut run = 0u64;
    for _ in 0..horizon {
        x = em_step(p, cfg, x, &mut rng);
        run += 1;
        if let Some(s) = partition.state_of(x) {
            if s != state {
                traj.push(state, run as f64 * cfg.dt, x);
                state = s;
                run = 0;
            }
        }
    }
    if run > 0 {
        traj.push(state, run as f64 * cfg.dt, x);
    }
    Ok(traj)
}

/// N times the minimum of N independent Exp(lambda) draws, `draws` times.
/// Distributionally this equals Exp(lambda) again, the identity that
/// makes the parallel stage statistically exact.
pub fn synthetic_nmin_exponential(
    lambda: f64,
    n: usize,
    draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::config("rate must be positive"));
    }
    if n == 0 || draws == 0 {
        return Err(Error::config("need at least one replica and one draw"));
    }
    let mut rng = stream_rng(seed, 0);
    let mut out = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mut min = f64::INFINITY;
        for _ in 0..n {
            let u: f64 = rng.random();
            let t = -(1.0 - u).ln() / lambda;
            min = min.min(t);
        }
        out.push(n as f64 * min);
    }
    Ok(out)
}

/// Discrepancy curve between exit statistics after conditioning on
/// survival and exit statistics from the QSD.
#[derive(Debug, Clone)]
pub struct ErrorCurve {
    pub t: Vec<f64>,
    /// Worst test-cell discrepancy at each time.
    pub e: Vec<f64>,
    /// Monte Carlo noise scale per point.
    pub floor: Vec<f64>,
    /// Exponential decay rate fitted over points clearly above the floor
    /// (compare with the window's spectral gap); None when fewer than
    /// three points qualify.
    pub rate: Option<f64>,
    pub residual: Option<f64>,
}

/// Number of exit-time bins in the test family (each split by side).
const ERR_TIME_BINS: usize = 6;

/// Estimate how far the law of (exit time, exit point) after surviving
/// for time t is from the same law started at the QSD. The discrepancy
/// is measured over a fixed family of twelve indicator cells (six
/// exit-time bins, split by exit face) and decays like the spectral gap.
pub fn error_functional(
    p: &Potential,
    cfg: &SimConfig,
    sol: &QsdSolution,
    psi0: Option<&GridDensity>,
    t_grid: &[f64],
    n_samples: usize,
) -> Result<ErrorCurve> {
    cfg.validate_for(p)?;
    if n_samples < 1000 {
        return Err(Error::config("error functional needs at least 1000 samples"));
    }
    if t_grid.is_empty() {
        return Err(Error::config("empty time grid"));
    }
    let window = sol.window();
    let uniform;
    let start = match psi0 {
        Some(d) => d,
        None => {
            let (lo, hi) = window.bounds();
            let grid = if window.dim() == 1 {
                Grid::new_1d(lo[0], hi[0], 64)?
            } else {
                Grid::new_2d(lo, hi, [64, 64])?
            };
            // Strict containment keeps sampled starts off absorbing faces.
            uniform = GridDensity::from_fn(grid, |x| {
                if window.contains(x) && p.domain().contains(x) {
                    1.0
                } else {
                    0.0
                }
            })?;
            &uniform
        }
    };

    // One batch from the QSD (reference) and one from psi0; the
    // conditioned statistics at every t reuse the psi0 batch.
    let reference = exit_batch(p, cfg, sol, window, None, n_samples, 0)?;
    let test = exit_batch(p, cfg, sol, window, Some(start), n_samples, n_samples as u64)?;

    // Exit-time bin edges: sextiles of the reference batch, so every
    // reference time bin carries mass 1/6 by construction.
    let mut ref_times: Vec<f64> = reference.iter().map(|r| r.0).collect();
    ref_times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let edges: Vec<f64> = (1..ERR_TIME_BINS)
        .map(|k| stats::quantile(&ref_times, k as f64 / ERR_TIME_BINS as f64))
        .collect();
    let sides: Vec<(usize, usize)> = {
        let mut s: Vec<(usize, usize)> = reference.iter().map(|r| r.1).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let n_cells = ERR_TIME_BINS * sides.len();
    let cell_of = |t: f64, face: (usize, usize)| -> Option<usize> {
        let side = sides.iter().position(|&f| f == face)?;
        let tb = edges.iter().position(|&e| t <= e).unwrap_or(ERR_TIME_BINS - 1);
        Some(side * ERR_TIME_BINS + tb)
    };

    let mut p_ref = vec![0.0f64; n_cells];
    for (t, face) in &reference {
        if let Some(c) = cell_of(*t, *face) {
            p_ref[c] += 1.0;
        }
    }
    for v in p_ref.iter_mut() {
        *v /= reference.len() as f64;
    }

    let mut sorted_t = t_grid.to_vec();
    sorted_t.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let mut es = Vec::with_capacity(sorted_t.len());
    let mut floors = Vec::with_capacity(sorted_t.len());
    for &t in &sorted_t {
        let mut counts = vec![0.0f64; n_cells];
        let mut survivors = 0usize;
        for (te, face) in &test {
            if *te > t {
                survivors += 1;
                if let Some(c) = cell_of(*te - t, *face) {
                    counts[c] += 1.0;
                }
            }
        }
        if survivors < 200 {
            return Err(Error::statistics(format!(
                "only {survivors} walkers survive to t = {t}; need at least 200"
            )));
        }
        let mut worst = 0.0f64;
        for (c, raw) in counts.iter().enumerate() {
            worst = worst.max((raw / survivors as f64 - p_ref[c]).abs());
        }
        es.push(worst);
        let pbar = 1.0 / n_cells as f64;
        let noise = (pbar * (1.0 - pbar)).sqrt()
            * (1.0 / (survivors as f64).sqrt() + 1.0 / (reference.len() as f64).sqrt());
        floors.push(noise);
    }

    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for ((&t, &e), &f) in sorted_t.iter().zip(&es).zip(&floors) {
        if e > 2.0 * f {
            ts.push(t);
            ys.push(e);
        }
    }
    let (rate, residual) = if ts.len() >= 3 {
        let (r, _, res) = stats::fit_log_decay(&ts, &ys)?;
        (Some(r), Some(res))
    } else {
        (None, None)
    };
    Ok(ErrorCurve { t: sorted_t, e: es, floor: floors, rate, residual })
}

/// Run walkers to window exit; `start` None samples the QSD.
fn exit_batch(
    p: &Potential,
    cfg: &SimConfig,
    sol: &QsdSolution,
    window: &Window,
    start: Option<&GridDensity>,
    n: usize,
    stream_base: u64,
) -> Result<Vec<(f64, (usize, usize))>> {
    let cap = ((200.0 / sol.lambda[0]) / cfg.dt).round() as u64;
    (0..n)
        .into_par_iter()
        .map(|w| {
            let mut rng = stream_rng(cfg.seed, stream_base + w as u64);
            let mut x = match start {
                Some(d) => d.sample(&mut rng),
                None => sol.nu.sample(&mut rng),
            };
            if !window.contains(x) {
                return Err(Error::config("initial density puts mass outside the window"));
            }
            let mut step = 0u64;
            loop {
                x = em_step(p, cfg, x, &mut rng);
                step += 1;
                if !window.contains(x) {
                    return Ok((step as f64 * cfg.dt, qsd::crossed_face(window, x)));
                }
                if step >= cap {
                    return Err(Error::numerics(
                        "walker failed to exit within 200 mean exit times",
                    ));
                }
            }
        })
        .collect()
}

/// One state of the kinetic Monte Carlo reduction.
#[derive(Debug)]
pub struct KmcState {
    pub label: usize,
    /// Exit rate; holding times are Exp(rate).
    pub rate: f64,
    /// Exit locations on the state boundary with their probabilities.
    pub exit_points: Vec<[f64; 2]>,
    pub exit_mass: Vec<f64>,
    /// Successor-state distribution per exit point, indexed by position
    /// in the model's label list; rows sum to one.
    pub kernel: Vec<Vec<f64>>,
    /// Commitment window used when estimating the kernel.
    pub tau_commit: f64,
    /// Spectral solution the rate and exit law came from; None for
    /// hand-built synthetic models.
    pub solution: Option<QsdSolution>,
}

/// Jump-process reduction of the metastable dynamics: per-state exit
/// rates and exit-location kernels, all derived from the window
/// eigenproblems.
#[derive(Debug)]
pub struct KmcModel {
    pub states: Vec<KmcState>,
    /// State labels, aligned with `states` and with kernel columns.
    pub labels: Vec<usize>,
}

impl KmcModel {
    /// Hand-built model from explicit rates and state-to-state switch
    /// kernels (one synthetic exit point per state).
    pub fn synthetic(labels: Vec<usize>, rates: Vec<f64>, kernels: Vec<Vec<f64>>) -> Result<KmcModel> {
        if labels.len() != rates.len() || labels.len() != kernels.len() {
            return Err(Error::config("labels, rates, and kernels must align"));
        }
        let mut states = Vec::with_capacity(labels.len());
        for ((label, rate), row) in labels.iter().zip(&rates).zip(&kernels) {
            if !(*rate > 0.0) {
                return Err(Error::config("rates must be positive"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.len() != labels.len() {
                return Err(Error::config("kernel rows must sum to one over the states"));
            }
            states.push(KmcState {
                label: *label,
                rate: *rate,
                exit_points: vec![[0.0, 0.0]],
                exit_mass: vec![1.0],
                kernel: vec![row.clone()],
                tau_commit: 0.0,
                solution: None,
            });
        }
        Ok(KmcModel { states, labels })
    }

    fn index_of(&self, label: usize) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }
}

/// Build the kMC model: solve the window eigenproblem of every region
/// for its rate and exit density, then estimate the successor kernel of
/// every exit point by auxiliary commitment simulations (the successor is
/// the first state the walker stays in for a full commitment window).
pub fn kmc_build(
    p: &Potential,
    partition: &StatePartition,
    beta: f64,
    mesh: usize,
    cfg: &SimConfig,
    aux_samples: usize,
) -> Result<KmcModel> {
    if aux_samples < 50 {
        return Err(Error::config("kernel estimation needs at least 50 samples per exit point"));
    }
    let sim = SimConfig { beta, ..*cfg };
    sim.validate_for(p)?;
    let labels: Vec<usize> = partition.regions().iter().map(|r| r.label).collect();
    let mut states = Vec::with_capacity(labels.len());
    let mut stream = 0u64;
    for region in partition.regions() {
        let window = state_window(p, beta, region)?;
        let sol = qsd::solve(p, beta, &window, mesh)?;
        let tau_commit = suggested_correlation_time(&sol);
        let commit_steps = (tau_commit / sim.dt).ceil() as u64;

        // Keep exit points carrying real mass; renormalize the rest.
        let mut exit_points = Vec::new();
        let mut exit_mass = Vec::new();
        for (pt, m) in sol.exit.points.iter().zip(&sol.exit.mass) {
            if *m > 1e-9 {
                exit_points.push(*pt);
                exit_mass.push(*m);
            }
        }
        let total: f64 = exit_mass.iter().sum();
        for m in exit_mass.iter_mut() {
            *m /= total;
        }

        let mut kernel = Vec::with_capacity(exit_points.len());
        for pt in &exit_points {
            let base = stream;
            stream += aux_samples as u64;
            let successors: Vec<usize> = (0..aux_samples as u64)
                .into_par_iter()
                .map(|k| {
                    let mut rng = stream_rng(sim.seed, base + k);
                    commit_from(p, partition, &sim, *pt, commit_steps, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut counts = vec![0.0f64; labels.len()];
            for successor in successors {
                let idx = labels
                    .iter()
                    .position(|&l| l == successor)
                    .expect("partition labels are closed under commitment");
                counts[idx] += 1.0;
            }
            for c in counts.iter_mut() {
                *c /= aux_samples as f64;
            }
            kernel.push(counts);
        }
        states.push(KmcState {
            label: region.label,
            rate: sol.lambda[0],
            exit_points,
            exit_mass,
            kernel,
            tau_commit,
            solution: Some(sol),
        });
    }
    Ok(KmcModel { states, labels })
}

/// Simulate from an exit point until some state holds the walker for a
/// full commitment window; that state is the committed successor.
fn commit_from(
    p: &Potential,
    partition: &StatePartition,
    cfg: &SimConfig,
    x0: [f64; 2],
    commit_steps: u64,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let mut window = CommitWindow::new(commit_steps);
    let mut x = x0;
    let mut last = partition.state_of(x0);
    for _ in 0..COMMIT_STEP_CAP {
        x = em_step(p, cfg, x, rng);
        let label = match partition.state_of(x) {
            Some(s) => {
                last = Some(s);
                s
            }
            None => match last {
                Some(s) => s,
                None => continue,
            },
        };
        if let Some(committed) = window.observe(label) {
            return Ok(committed);
        }
    }
    Err(Error::numerics(
        "auxiliary simulation failed to commit to a state within the step cap",
    ))
}

/// Generate a coarse trajectory from the kMC model: exponential holding
/// times, exit points drawn from the exit law, successors drawn from the
/// kernel. Self-transitions merge into one longer visit.
pub fn kmc_simulate(
    model: &KmcModel,
    k_start: usize,
    t_total: f64,
    seed: u64,
) -> Result<CoarseTrajectory> {
    let mut idx = model
        .index_of(k_start)
        .ok_or_else(|| Error::config("start label not in the model"))?;
    if !(t_total > 0.0) {
        return Err(Error::config("horizon must be positive"));
    }
    let mut rng = stream_rng(seed, 0);
    let mut traj = CoarseTrajectory::new();
    while traj.total_time() < t_total {
        let st = &model.states[idx];
        let u: f64 = rng.random();
        let tau = (-(1.0 - u).ln() / st.rate).max(f64::MIN_POSITIVE);
        let pt = draw_index(&st.exit_mass, &mut rng);
        let succ = draw_index(&st.kernel[pt], &mut rng);
        traj.push(st.label, tau, st.exit_points[pt]);
        idx = succ;
    }
    Ok(traj)
}

fn draw_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Per-state residence-law comparison between two coarse trajectories.
#[derive(Debug)]
pub struct CompareReport {
    /// (state label, two-sample KS report on residence durations).
    pub residence: Vec<(usize, stats::KsReport)>,
    /// Homogeneity of transition-count tables; None when the table is
    /// degenerate (fewer than two distinct transition types).
    pub transitions: Option<stats::Chi2Report>,
    pub alpha: f64,
    /// True when every computed p-value exceeds alpha.
    pub pass: bool,
}

/// Compare the laws of two coarse trajectories: per-state two-sample KS
/// on residence durations plus a chi-square homogeneity test on
/// transition counts. Both trajectories need at least 100 events.
pub fn compare_coarse(
    a: &CoarseTrajectory,
    b: &CoarseTrajectory,
    alpha: f64,
) -> Result<CompareReport> {
    if a.len() < 100 || b.len() < 100 {
        return Err(Error::statistics(format!(
            "need at least 100 events per trajectory (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::config("significance level must lie in (0, 1)"));
    }
    let mut labels = a.labels();
    for l in b.labels() {
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    labels.sort_unstable();

    let mut residence = Vec::new();
    let mut pass = true;
    for &l in &labels {
        let ra = a.residences(l);
        let rb = b.residences(l);
        if ra.len() < 8 || rb.len() < 8 {
            return Err(Error::statistics(format!(
                "state {l} has too few residences to compare ({} vs {})",
                ra.len(),
                rb.len()
            )));
        }
        let ks = stats::ks_two_sample(&ra, &rb)?;
        pass &= ks.p_value > alpha;
        residence.push((l, ks));
    }

    // Transition homogeneity over the union of observed transition types.
    let ca = a.transition_counts();
    let cb = b.transition_counts();
    let dim = ca.len().max(cb.len());
    let mut types = Vec::new();
    for i in 0..dim {
        for j in 0..dim {
            let na = ca.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0.0);
            let nb = cb.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0.0);
            if na + nb > 0.0 {
                types.push((na, nb));
            }
        }
    }
    let transitions = if types.len() >= 2 {
        let table = vec![
            types.iter().map(|t| t.0).collect::<Vec<f64>>(),
            types.iter().map(|t| t.1).collect::<Vec<f64>>(),
        ];
        match stats::chi2_independence(&table) {
            Ok(rep) => {
                pass &= rep.p_value > alpha;
                Some(rep)
            }
            Err(_) => None,
        }
    } else {
        None
    };
    Ok(CompareReport { residence, transitions, alpha, pass })
}
