//! Euler-Maruyama integration of the overdamped Langevin equation
//!
//! ```text
//! dX_t = -∇V(X_t) dt + sqrt(2/β) dW_t
//! ```
//!
//! with hard walls and internal obstacles handled by specular reflection
//! (see [`Domain::apply_boundary`]). The integrator is deliberately plain:
//! fixed step, one Gaussian kick per axis, no rejection. Everything that
//! consumes long runs (hop statistics, biased sampling, exit times) streams
//! through a caller-supplied observer so that trajectories of 1e9 steps
//! never have to be stored.
//!
//! [`Domain::apply_boundary`]: crate::model::Domain::apply_boundary

use crate::error::{Error, Result};
use crate::model::{Potential, StatePartition};
use crate::rng::stream_rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

/// Integration parameters shared by every sampling routine.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SimConfig {
    /// Inverse temperature β.
    pub beta: f64,
    /// Time step of the Euler-Maruyama scheme.
    pub dt: f64,
    /// Base seed; together with `stream_id` it pins the noise exactly.
    pub seed: u64,
    /// Independent noise stream under the same seed.
    pub stream_id: u64,
}

impl SimConfig {
    pub fn new(beta: f64, dt: f64, seed: u64) -> SimConfig {
        SimConfig { beta, dt, seed, stream_id: 0 }
    }

    pub fn with_stream(mut self, stream_id: u64) -> SimConfig {
        self.stream_id = stream_id;
        self
    }

    /// Standard deviation of one Gaussian kick, sqrt(2 dt / β).
    pub fn noise_scale(&self) -> f64 {
        (2.0 * self.dt / self.beta).sqrt()
    }

    pub fn rng(&self) -> ChaCha8Rng {
        stream_rng(self.seed, self.stream_id)
    }

    /// Check the parameters against a potential. For hard-wall domains the
    /// kick must stay well below the narrowest feature, otherwise a single
    /// step can tunnel through an obstacle that reflection should block.
    pub fn validate_for(&self, p: &Potential) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::config("beta must be positive and finite"));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config("dt must be positive and finite"));
        }
        if let Some(w) = p.domain().shortest_width() {
            if self.noise_scale() > 0.15 * w {
                return Err(Error::config(format!(
                    "dt {} too large: kick {:.3e} exceeds 15% of the narrowest width {:.3e}",
                    self.dt,
                    self.noise_scale(),
                    w
                )));
            }
        }
        Ok(())
    }
}

/// One Euler-Maruyama step with explicit Gaussian increments, exposed so
/// tests can drive the scheme with chosen noise.
pub fn em_step_with_noise(p: &Potential, cfg: &SimConfig, x: [f64; 2], g: [f64; 2]) -> [f64; 2] {
    let grad = p.gradient(x);
    let s = cfg.noise_scale();
    let mut y = x;
    for a in 0..p.dim() {
        y[a] = x[a] - grad[a] * cfg.dt + s * g[a];
    }
    p.domain().apply_boundary(y, x)
}

/// One Euler-Maruyama step drawing the increments from `rng`.
pub fn em_step(p: &Potential, cfg: &SimConfig, x: [f64; 2], rng: &mut ChaCha8Rng) -> [f64; 2] {
    let mut g = [0.0; 2];
    for a in g.iter_mut().take(p.dim()) {
        *a = StandardNormal.sample(rng);
    }
    em_step_with_noise(p, cfg, x, g)
}

/// Outcome of a streamed run.
#[derive(Debug, Clone, Copy)]
pub struct RunEnd {
    /// Number of steps actually taken.
    pub steps: u64,
    /// Position after the last step.
    pub x: [f64; 2],
    /// Whether the observer requested the stop (false: step budget hit).
    pub stopped: bool,
}

/// Stream a trajectory through `observe` without storing it. The observer
/// sees the state after each step (step index starting at 1) and returns
/// `true` to stop the run there.
pub fn run_until<F>(
    p: &Potential,
    cfg: &SimConfig,
    x0: [f64; 2],
    max_steps: u64,
    mut observe: F,
) -> Result<RunEnd>
where
    F: FnMut(u64, [f64; 2]) -> bool,
{
    cfg.validate_for(p)?;
    if !p.domain().contains(x0) {
        return Err(Error::config("initial point lies outside the domain"));
    }
    let mut rng = cfg.rng();
    let mut x = x0;
    for step in 1..=max_steps {
        x = em_step(p, cfg, x, &mut rng);
        if observe(step, x) {
            return Ok(RunEnd { steps: step, x, stopped: true });
        }
    }
    Ok(RunEnd { steps: max_steps, x, stopped: false })
}

/// A stored trajectory, subsampled every `stride` steps (frame 0 is the
/// initial condition).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dim: usize,
    pub dt: f64,
    pub stride: u64,
    pub positions: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn time(&self, frame: usize) -> f64 {
        self.dt * (self.stride * frame as u64) as f64
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Integrate `n_steps` steps and keep every `stride`-th point.
pub fn simulate(
    p: &Potential,
    cfg: &SimConfig,
    x0: [f64; 2],
    n_steps: u64,
    stride: u64,
) -> Result<Trajectory> {
    if stride == 0 {
        return Err(Error::config("stride must be at least 1"));
    }
    let mut positions = Vec::with_capacity((n_steps / stride + 2) as usize);
    positions.push(x0);
    run_until(p, cfg, x0, n_steps, |step, x| {
        if step % stride == 0 {
            positions.push(x);
        }
        false
    })?;
    Ok(Trajectory { dim: p.dim(), dt: cfg.dt, stride, positions })
}

/// Time average of an observable with a block-resolved error bar.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ErgodicAverage {
    pub mean: f64,
    /// Standard error across 32 equal time blocks.
    pub stderr: f64,
    pub burn_in_steps: u64,
    pub averaged_steps: u64,
}

/// Run the dynamics for `burn_in + n_steps` steps and average `f` over the
/// final `n_steps`, reporting a 32-block standard error.
pub fn ergodic_average<F>(
    p: &Potential,
    cfg: &SimConfig,
    x0: [f64; 2],
    burn_in: u64,
    n_steps: u64,
    mut f: F,
) -> Result<ErgodicAverage>
where
    F: FnMut([f64; 2]) -> f64,
{
    const BLOCKS: u64 = 32;
    if n_steps < BLOCKS {
        return Err(Error::config("ergodic average needs at least 32 steps"));
    }
    let block_len = n_steps / BLOCKS;
    let used = block_len * BLOCKS;
    let mut block_means = Vec::with_capacity(BLOCKS as usize);
    let mut acc = 0.0;
    let mut in_block = 0u64;
    run_until(p, cfg, x0, burn_in + used, |step, x| {
        if step > burn_in {
            acc += f(x);
            in_block += 1;
            if in_block == block_len {
                block_means.push(acc / block_len as f64);
                acc = 0.0;
                in_block = 0;
            }
        }
        false
    })?;
    let mean = crate::stats::mean(&block_means);
    let var = crate::stats::variance(&block_means);
    Ok(ErgodicAverage {
        mean,
        stderr: (var / BLOCKS as f64).sqrt(),
        burn_in_steps: burn_in,
        averaged_steps: used,
    })
}

/// A committed jump between states of a partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HopEvent {
    /// Step index at which the new state was entered.
    pub step: u64,
    pub from: usize,
    pub to: usize,
}

/// Streaming state labeler. Points outside every region keep the previous
/// label, so with core regions separated by a buffer the recorded events
/// are committed transitions rather than boundary chatter.
#[derive(Debug, Clone)]
pub struct HopRecorder {
    partition: StatePartition,
    current: Option<usize>,
    /// Steps spent per state (buffer steps count towards the inherited one).
    pub steps_in_state: Vec<u64>,
    pub events: Vec<HopEvent>,
}

impl HopRecorder {
    pub fn new(partition: StatePartition) -> HopRecorder {
        let n = partition.regions().len();
        HopRecorder { partition, current: None, steps_in_state: vec![0; n], events: Vec::new() }
    }

    pub fn current(&self) -> Option<usize> {
        self.current
    }

    /// Feed the state after one step; returns the label now in force.
    pub fn observe(&mut self, step: u64, x: [f64; 2]) -> Option<usize> {
        if let Some(s) = self.partition.state_of(x) {
            match self.current {
                Some(c) if c != s => self.events.push(HopEvent { step, from: c, to: s }),
                _ => {}
            }
            self.current = Some(s);
        }
        if let Some(c) = self.current {
            self.steps_in_state[c] += 1;
        }
        self.current
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Region;

    fn harmonic(alpha: f64) -> Potential {
        Potential::builtin("harmonic-1d", &[alpha]).unwrap()
    }

    #[test]
    fn noiseless_step_contracts_towards_the_well() {
        let p = harmonic(1.3);
        let cfg = SimConfig::new(1.0, 1e-2, 0);
        let mut x = [2.0, 0.0];
        for _ in 0..100 {
            x = em_step_with_noise(&p, &cfg, x, [0.0, 0.0]);
        }
        let exact = 2.0 * (1.0 - 1.3 * 1e-2_f64).powi(100);
        assert!((x[0] - exact).abs() < 1e-12);
        assert_eq!(x[1], 0.0);
    }

    #[test]
    fn trajectory_stays_inside_hard_walls() {
        let p = Potential::builtin("entropic-2d", &[]).unwrap();
        let cfg = SimConfig::new(2.0, 1e-4, 7);
        let end = run_until(&p, &cfg, [-1.0, 0.0], 100_000, |_, x| {
            assert!(p.domain().contains(x), "escaped to {x:?}");
            false
        })
        .unwrap();
        assert!(!end.stopped);
        assert_eq!(end.steps, 100_000);
    }

    #[test]
    fn ou_stationary_moments() {
        // For V = αx²/2 the invariant law is N(0, 1/(αβ)).
        let p = harmonic(1.0);
        let cfg = SimConfig::new(2.0, 1e-3, 42);
        let avg = ergodic_average(&p, &cfg, [0.0, 0.0], 50_000, 4_000_000, |x| x[0] * x[0])
            .unwrap();
        assert!(
            (avg.mean - 0.5).abs() < 4.0 * avg.stderr.max(2e-3),
            "var {} +- {}",
            avg.mean,
            avg.stderr
        );
        assert!(avg.stderr < 0.02);
    }

    #[test]
    fn same_seed_reproduces_same_path_and_streams_differ() {
        let p = harmonic(1.0);
        let cfg = SimConfig::new(1.0, 1e-3, 9);
        let a = simulate(&p, &cfg, [1.0, 0.0], 1000, 10).unwrap();
        let b = simulate(&p, &cfg, [1.0, 0.0], 1000, 10).unwrap();
        assert_eq!(a.positions, b.positions);
        let c = simulate(&p, &cfg.with_stream(1), [1.0, 0.0], 1000, 10).unwrap();
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn run_until_stops_on_exit() {
        let p = Potential::builtin("flat", &[0.0, 2.0]).unwrap();
        let cfg = SimConfig::new(1.0, 1e-4, 3);
        let end = run_until(&p, &cfg, [1.9, 0.0], 10_000_000, |_, x| x[0] < 1.0).unwrap();
        assert!(end.stopped);
        assert!(end.x[0] < 1.0);
    }

    #[test]
    fn hop_recorder_ignores_buffer_chatter() {
        let cores = StatePartition::new(
            1,
            vec![
                Region::new_1d(0, f64::NEG_INFINITY, -0.2),
                Region::new_1d(1, 0.2, f64::INFINITY),
            ],
        )
        .unwrap();
        let mut rec = HopRecorder::new(cores);
        let xs = [-0.5, -0.1, 0.1, -0.1, -0.5, 0.1, 0.5, 0.1, -0.1, 0.5];
        for (i, &x) in xs.iter().enumerate() {
            rec.observe(i as u64 + 1, [x, 0.0]);
        }
        // Only the committed crossing at x = 0.5 counts.
        assert_eq!(rec.events.len(), 1);
        assert_eq!(rec.events[0], HopEvent { step: 7, from: 0, to: 1 });
        assert_eq!(rec.steps_in_state.iter().sum::<u64>(), 10);
    }

    #[test]
    fn too_large_kick_is_rejected_on_narrow_domains() {
        let p = Potential::builtin("entropic-2d", &[]).unwrap();
        let cfg = SimConfig::new(2.0, 1e-2, 0);
        assert!(cfg.validate_for(&p).is_err());
    }
}
