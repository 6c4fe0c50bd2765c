//! Command-line experiment runner. Every compute module is exposed as a
//! subcommand driven by a flat config file; each run writes CSV/JSON
//! artifacts plus a run manifest that suffices to re-derive them
//! byte-for-byte (`run_manifest.json` is itself accepted wherever a
//! config file is).
//!
//! Exit codes: 0 success, 1 config problem, 2 numerical failure,
//! 3 statistical failure (library-level always; failed in-run checks only
//! under `--strict`).

use crate::config::{self, resolve_common, CommonBlock, RawConfig, Resolver};
use crate::error::{Error, Result};
use crate::grid::{tv_distance, Grid, GridDensity};
use crate::model::{Potential, RcRange, ReactionCoordinate, Region, StatePartition};
use crate::output::{self, fmt_f64, Artifacts};
use crate::spectral::Window;
use crate::{effdyn, entropy, free_energy, parrep, qsd, sampler};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "metastable",
    version,
    about = "Sampling and spectral diagnostics for metastable overdamped Langevin dynamics"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat config file, or the run manifest JSON of a previous run.
    #[arg(short, long)]
    config: PathBuf,
    /// Exit with code 3 when an in-run statistical check fails.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one trajectory and record strided samples.
    Simulate(RunArgs),
    /// Ensemble relative-entropy decay toward the Boltzmann measure.
    EntropyDecay(RunArgs),
    /// Marginal vs conditional relaxation rates along a coordinate.
    LsiProfile(RunArgs),
    /// Free-energy profile of a reaction coordinate.
    FreeEnergy(RunArgs),
    /// Adaptive biasing force run with crossing statistics.
    Abf(RunArgs),
    /// Effective 1D dynamics: coefficients and marginal-law distance.
    Effdyn(RunArgs),
    /// Window eigenproblem: eigenvalues, QSD, exit law.
    Qsd(RunArgs),
    /// Fleming-Viot particle estimate of the QSD.
    FlemingViot(RunArgs),
    /// Exit time and location statistics from a window.
    ExitStats(RunArgs),
    /// Parallel replica coarse dynamics with cost accounting.
    Parrep(RunArgs),
    /// Kinetic Monte Carlo reduction and jump-process simulation.
    Kmc(RunArgs),
    /// Compare two artifacts (coarse trajectories or profiles).
    Compare(RunArgs),
    /// Check a config file and list resolved defaults without running.
    Validate(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::EntropyDecay(_) => "entropy-decay",
            Command::LsiProfile(_) => "lsi-profile",
            Command::FreeEnergy(_) => "free-energy",
            Command::Abf(_) => "abf",
            Command::Effdyn(_) => "effdyn",
            Command::Qsd(_) => "qsd",
            Command::FlemingViot(_) => "fleming-viot",
            Command::ExitStats(_) => "exit-stats",
            Command::Parrep(_) => "parrep",
            Command::Kmc(_) => "kmc",
            Command::Compare(_) => "compare",
            Command::Validate(_) => "validate",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Simulate(a)
            | Command::EntropyDecay(a)
            | Command::LsiProfile(a)
            | Command::FreeEnergy(a)
            | Command::Abf(a)
            | Command::Effdyn(a)
            | Command::Qsd(a)
            | Command::FlemingViot(a)
            | Command::ExitStats(a)
            | Command::Parrep(a)
            | Command::Kmc(a)
            | Command::Compare(a)
            | Command::Validate(a) => a,
        }
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let is_error = e.use_stderr();
            let _ = e.print();
            return if is_error { 1 } else { 0 };
        }
    };
    let name = cli.command.name();
    let args = cli.command.args();
    match dispatch(name, args) {
        Ok(failed) => {
            if failed.is_empty() {
                0
            } else {
                for f in &failed {
                    eprintln!("[metastable] check failed: {f}");
                }
                if args.strict {
                    3
                } else {
                    0
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn stage(msg: &str) {
    eprintln!("[metastable] {msg}");
}

/// Load, resolve, and run one subcommand; returns the failed checks.
fn dispatch(name: &str, args: &RunArgs) -> Result<Vec<String>> {
    let raw = RawConfig::from_file(&args.config)?;
    if name == "validate" {
        return run_validate(&raw);
    }
    let mut r = Resolver::new(&raw);
    let common = resolve_common(&mut r);
    let block = common
        .as_ref()
        .and_then(|c| resolve_block(&c.subcommand, &mut r, c));
    r.finish();
    r.ensure_clean()?;
    let common = common.expect("clean resolution produced the common block");
    let block = block.expect("clean resolution produced the subcommand block");
    if common.subcommand != name {
        return Err(Error::config(format!(
            "config declares run.subcommand = {} but `{name}` was invoked",
            common.subcommand
        )));
    }
    if common.threads > 0 {
        // The pool is process-global; a second configuration attempt in
        // the same process is a no-op.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(common.threads)
            .build_global();
    }
    let t0 = Instant::now();
    let run = match block {
        Block::Simulate(b) => run_simulate(&common, b, &mut r),
        Block::EntropyDecay(b) => run_entropy(&common, b, &mut r),
        Block::LsiProfile(b) => run_lsi(&common, b, &mut r),
        Block::FreeEnergy(b) => run_free_energy(&common, b, &mut r),
        Block::Abf(b) => run_abf(&common, b, &mut r),
        Block::Effdyn(b) => run_effdyn(&common, b, &mut r),
        Block::Qsd(b) => run_qsd(&common, b, &mut r),
        Block::FlemingViot(b) => run_fv(&common, b, &mut r),
        Block::ExitStats(b) => run_exit_stats(&common, b, &mut r),
        Block::Parrep(b) => run_parrep(&common, b, &mut r),
        Block::Kmc(b) => run_kmc(&common, b, &mut r),
        Block::Compare(b) => run_compare(&common, b, &mut r),
    }?;
    let manifest = output::run_manifest(&common.subcommand, r.resolved(), t0.elapsed().as_secs_f64());
    run.artifacts.write_json("run_manifest.json", &manifest)?;
    println!(
        "{}: wrote {} to {}",
        common.subcommand,
        run.summary,
        run.artifacts.dir().display()
    );
    Ok(run.failed_checks)
}

/// What a subcommand hands back to the dispatcher.
struct RunOutput {
    artifacts: Artifacts,
    summary: String,
    failed_checks: Vec<String>,
}

fn artifacts_for(common: &CommonBlock, r: &Resolver) -> Result<Artifacts> {
    Artifacts::new(
        &common.output_dir,
        output::manifest_echo(&common.subcommand, r.resolved()),
    )
}

// ---------------------------------------------------------------------
// Config blocks per subcommand.

enum Block {
    Simulate(SimulateBlock),
    EntropyDecay(EntropyBlock),
    LsiProfile(LsiBlock),
    FreeEnergy(FreeEnergyBlock),
    Abf(AbfBlock),
    Effdyn(EffdynBlock),
    Qsd(QsdBlock),
    FlemingViot(FvBlock),
    ExitStats(ExitBlock),
    Parrep(ParrepBlock),
    Kmc(KmcBlock),
    Compare(CompareBlock),
}

fn resolve_block(sub: &str, r: &mut Resolver, c: &CommonBlock) -> Option<Block> {
    match sub {
        "simulate" => resolve_simulate(r, c).map(Block::Simulate),
        "entropy-decay" => resolve_entropy(r, c).map(Block::EntropyDecay),
        "lsi-profile" => resolve_lsi(r, c).map(Block::LsiProfile),
        "free-energy" => resolve_free_energy(r, c).map(Block::FreeEnergy),
        "abf" => resolve_abf(r, c).map(Block::Abf),
        "effdyn" => resolve_effdyn(r, c).map(Block::Effdyn),
        "qsd" => resolve_qsd(r, c).map(Block::Qsd),
        "fleming-viot" => resolve_fv(r, c).map(Block::FlemingViot),
        "exit-stats" => resolve_exit_stats(r, c).map(Block::ExitStats),
        "parrep" => resolve_parrep(r, c).map(Block::Parrep),
        "kmc" => resolve_kmc(r, c).map(Block::Kmc),
        "compare" => resolve_compare(r, c).map(Block::Compare),
        _ => None,
    }
}

struct SimulateBlock {
    x0: [f64; 2],
    t_total: f64,
    stride: u64,
}

fn resolve_simulate(r: &mut Resolver, c: &CommonBlock) -> Option<SimulateBlock> {
    let x0 = r.require_point("simulate.x0", c.potential.dim());
    let t_total = require_positive(r, "simulate.t_total");
    let stride = positive_u64_or(r, "simulate.stride", 100);
    Some(SimulateBlock { x0: x0?, t_total: t_total?, stride: stride? })
}

struct EntropyBlock {
    start_box: Vec<f64>,
    horizon: f64,
    frames: usize,
    n_paths: usize,
}

fn resolve_entropy(r: &mut Resolver, c: &CommonBlock) -> Option<EntropyBlock> {
    let arity = [2 * c.potential.dim()];
    let start_box = r.require_floats("entropy.start_box", &arity);
    let horizon = require_positive(r, "entropy.horizon");
    let frames = r.usize_or("entropy.frames", 24);
    let n_paths = r.usize_or("entropy.n_paths", 20_000);
    Some(EntropyBlock {
        start_box: start_box?,
        horizon: horizon?,
        frames: frames?,
        n_paths: n_paths?,
    })
}

struct LsiBlock {
    xi: ReactionCoordinate,
    levels: usize,
    mesh: usize,
    threshold: f64,
}

fn resolve_lsi(r: &mut Resolver, c: &CommonBlock) -> Option<LsiBlock> {
    let xi = resolve_rc(r, "lsi", c);
    let levels = r.usize_or("lsi.levels", 16);
    let mesh = r.usize_or("lsi.mesh", 257);
    let threshold = require_positive_or(r, "lsi.threshold", 10.0);
    Some(LsiBlock { xi: xi?, levels: levels?, mesh: mesh?, threshold: threshold? })
}

struct FreeEnergyBlock {
    xi: ReactionCoordinate,
    bins: usize,
    method: String,
    t_total: Option<f64>,
    x0: Option<[f64; 2]>,
}

fn resolve_free_energy(r: &mut Resolver, c: &CommonBlock) -> Option<FreeEnergyBlock> {
    let xi = resolve_rc(r, "fe", c);
    let bins = r.usize_or("fe.bins", 64);
    let method = r.choice_or("fe.method", "quadrature", &["quadrature", "trajectory"]);
    let (t_total, x0) = match method.as_deref() {
        Some("trajectory") => (
            require_positive(r, "fe.t_total").map(Some),
            r.require_point("fe.x0", c.potential.dim()).map(Some),
        ),
        _ => (Some(None), Some(None)),
    };
    Some(FreeEnergyBlock {
        xi: xi?,
        bins: bins?,
        method: method?,
        t_total: t_total?,
        x0: x0?,
    })
}

struct AbfBlock {
    xi: ReactionCoordinate,
    abf: free_energy::AbfConfig,
    x0: [f64; 2],
    t_total: f64,
    baseline: bool,
}

fn resolve_abf(r: &mut Resolver, c: &CommonBlock) -> Option<AbfBlock> {
    let xi = resolve_rc(r, "abf", c);
    let bins = r.usize_or("abf.bins", 64);
    let defaults = free_energy::AbfConfig::new(bins.unwrap_or(64));
    let ramp = r.u64_or("abf.ramp", defaults.ramp);
    let snapshot_stride = r.u64_or("abf.snapshot_stride", 0);
    let crossing_level = r.maybe_f64("abf.crossing_level");
    let x0 = r.require_point("abf.x0", c.potential.dim());
    let t_total = require_positive(r, "abf.t_total");
    let baseline = r.bool_or("abf.baseline", false);
    let mut abf = free_energy::AbfConfig::new(bins?);
    abf.ramp = ramp?;
    abf.snapshot_stride = snapshot_stride?;
    abf.crossing_level = crossing_level;
    Some(AbfBlock {
        xi: xi?,
        abf,
        x0: x0?,
        t_total: t_total?,
        baseline: baseline?,
    })
}

struct EffdynBlock {
    xi: ReactionCoordinate,
    bins: usize,
    method: String,
    fit_t_total: Option<f64>,
    fit_x0: Option<[f64; 2]>,
    start_box: Vec<f64>,
    times: Vec<f64>,
    n_paths: usize,
}

fn resolve_effdyn(r: &mut Resolver, c: &CommonBlock) -> Option<EffdynBlock> {
    let xi = resolve_rc(r, "effdyn", c);
    let bins = r.usize_or("effdyn.bins", 64);
    let method = r.choice_or("effdyn.method", "quadrature", &["quadrature", "trajectory"]);
    let (fit_t_total, fit_x0) = match method.as_deref() {
        Some("trajectory") => (
            require_positive(r, "effdyn.fit_t_total").map(Some),
            r.require_point("effdyn.fit_x0", c.potential.dim()).map(Some),
        ),
        _ => (Some(None), Some(None)),
    };
    let arity = [2 * c.potential.dim()];
    let start_box = r.require_floats("effdyn.start_box", &arity);
    let times = r.require_float_list("effdyn.times", 1);
    let n_paths = r.usize_or("effdyn.n_paths", 20_000);
    Some(EffdynBlock {
        xi: xi?,
        bins: bins?,
        method: method?,
        fit_t_total: fit_t_total?,
        fit_x0: fit_x0?,
        start_box: start_box?,
        times: times?,
        n_paths: n_paths?,
    })
}

struct QsdBlock {
    window: Window,
    mesh: usize,
}

fn resolve_qsd(r: &mut Resolver, c: &CommonBlock) -> Option<QsdBlock> {
    let window = resolve_window(r, "qsd", c.potential.dim());
    let mesh = r.usize_or("qsd.mesh", 513);
    Some(QsdBlock { window: window?, mesh: mesh? })
}

struct FvBlock {
    window: Window,
    start: [f64; 2],
    n_particles: usize,
    t_total: f64,
    mesh: usize,
    tv_tolerance: f64,
}

fn resolve_fv(r: &mut Resolver, c: &CommonBlock) -> Option<FvBlock> {
    let window = resolve_window(r, "fv", c.potential.dim());
    let start = r.require_point("fv.start", c.potential.dim());
    let n_particles = r.usize_or("fv.n_particles", 1000);
    let t_total = require_positive(r, "fv.t_total");
    let mesh = r.usize_or("fv.mesh", 0);
    let tv_tolerance = require_positive_or(r, "fv.tv_tolerance", 0.05);
    Some(FvBlock {
        window: window?,
        start: start?,
        n_particles: n_particles?,
        t_total: t_total?,
        mesh: mesh?,
        tv_tolerance: tv_tolerance?,
    })
}

struct ExitBlock {
    window: Window,
    mesh: usize,
    n_samples: usize,
    start: qsd::ExitStart,
    alpha: f64,
    location_tol: f64,
}

fn resolve_exit_stats(r: &mut Resolver, c: &CommonBlock) -> Option<ExitBlock> {
    let window = resolve_window(r, "exit", c.potential.dim());
    let mesh = r.usize_or("exit.mesh", 513);
    let n_samples = r.usize_or("exit.n_samples", 2000);
    let start_s = r.str_or("exit.start", "qsd");
    let start = if start_s == "qsd" {
        Some(qsd::ExitStart::Qsd)
    } else {
        match parse_point_text(&start_s, c.potential.dim()) {
            Some(p) => Some(qsd::ExitStart::Point(p)),
            None => {
                r.flag("exit.start", "expected `qsd` or a point (one number per dimension)");
                None
            }
        }
    };
    let alpha = require_alpha_or(r, "exit.alpha", 0.01);
    let location_tol = require_positive_or(r, "exit.location_tol", 0.05);
    Some(ExitBlock {
        window: window?,
        mesh: mesh?,
        n_samples: n_samples?,
        start: start?,
        alpha: alpha?,
        location_tol: location_tol?,
    })
}

struct ParrepBlock {
    partition: StatePartition,
    n_replicas: usize,
    t_total: f64,
    x0: [f64; 2],
    mesh: usize,
    tau_corr: Option<f64>,
    tau_phase: Option<f64>,
}

fn resolve_parrep(r: &mut Resolver, c: &CommonBlock) -> Option<ParrepBlock> {
    let partition = resolve_partition(r, "parrep", c.potential.dim());
    let n_replicas = r.require_usize("parrep.n_replicas");
    let t_total = require_positive(r, "parrep.t_total");
    let x0 = r.require_point("parrep.x0", c.potential.dim());
    let mesh = r.usize_or("parrep.mesh", 513);
    let tau_corr = r.maybe_f64("parrep.tau_corr");
    let tau_phase = r.maybe_f64("parrep.tau_phase");
    Some(ParrepBlock {
        partition: partition?,
        n_replicas: n_replicas?,
        t_total: t_total?,
        x0: x0?,
        mesh: mesh?,
        tau_corr,
        tau_phase,
    })
}

struct KmcBlock {
    partition: StatePartition,
    mesh: usize,
    aux_samples: usize,
    t_total: f64,
    start_state: usize,
}

fn resolve_kmc(r: &mut Resolver, c: &CommonBlock) -> Option<KmcBlock> {
    let partition = resolve_partition(r, "kmc", c.potential.dim());
    let mesh = r.usize_or("kmc.mesh", 513);
    let aux_samples = r.usize_or("kmc.aux_samples", 200);
    let t_total = require_positive(r, "kmc.t_total");
    let start_state = r.require_usize("kmc.start_state");
    Some(KmcBlock {
        partition: partition?,
        mesh: mesh?,
        aux_samples: aux_samples?,
        t_total: t_total?,
        start_state: start_state?,
    })
}

struct CompareBlock {
    a: PathBuf,
    b: PathBuf,
    alpha: f64,
    debounce: f64,
    tolerance: f64,
}

fn resolve_compare(r: &mut Resolver, _c: &CommonBlock) -> Option<CompareBlock> {
    let a = r.require_str("compare.a");
    let b = r.require_str("compare.b");
    let alpha = require_alpha_or(r, "compare.alpha", 0.01);
    let debounce = r.f64_or("compare.debounce", 0.0);
    let tolerance = require_positive_or(r, "compare.tolerance", 0.1);
    Some(CompareBlock {
        a: PathBuf::from(a?),
        b: PathBuf::from(b?),
        alpha: alpha?,
        debounce: debounce?,
        tolerance: tolerance?,
    })
}

// ---------------------------------------------------------------------
// Shared resolution helpers.

fn require_positive(r: &mut Resolver, key: &str) -> Option<f64> {
    let v = r.require_f64(key)?;
    if v > 0.0 {
        Some(v)
    } else {
        r.flag(key, "must be positive");
        None
    }
}

fn require_positive_or(r: &mut Resolver, key: &str, default: f64) -> Option<f64> {
    let v = r.f64_or(key, default)?;
    if v > 0.0 {
        Some(v)
    } else {
        r.flag(key, "must be positive");
        None
    }
}

fn require_alpha_or(r: &mut Resolver, key: &str, default: f64) -> Option<f64> {
    let v = r.f64_or(key, default)?;
    if v > 0.0 && v < 1.0 {
        Some(v)
    } else {
        r.flag(key, "must lie strictly between 0 and 1");
        None
    }
}

fn positive_u64_or(r: &mut Resolver, key: &str, default: u64) -> Option<u64> {
    let v = r.u64_or(key, default)?;
    if v > 0 {
        Some(v)
    } else {
        r.flag(key, "must be at least 1");
        None
    }
}

fn parse_point_text(s: &str, dim: usize) -> Option<[f64; 2]> {
    let parts: Vec<f64> = s
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .ok()?;
    if parts.len() != dim {
        return None;
    }
    Some(config::pad_point(&parts))
}

/// `<sec>.window` (lo hi per axis) plus `<sec>.absorbing` (`all` or a
/// list of face tokens among x-, x+, y-, y+).
fn resolve_window(r: &mut Resolver, sec: &str, dim: usize) -> Option<Window> {
    let key = format!("{sec}.window");
    let arity = [2 * dim];
    let b = r.require_floats(&key, &arity)?;
    let built = if dim == 1 {
        Window::interval(b[0], b[1])
    } else {
        Window::rectangle([b[0], b[2]], [b[1], b[3]])
    };
    let base = match built {
        Ok(w) => Some(w),
        Err(e) => {
            r.flag(&key, e.to_string());
            None
        }
    };
    let akey = format!("{sec}.absorbing");
    let spec = r.str_or(&akey, "all");
    let mut w = base?;
    if spec == "all" {
        return Some(w.absorbing_all());
    }
    for tok in spec.split_whitespace() {
        match face_of_token(tok) {
            Some((axis, side)) if axis < dim => {
                w = w.absorbing(axis, side);
            }
            _ => {
                r.flag(&akey, format!("`{tok}` is not a face token (x-, x+, y-, y+)"));
                return None;
            }
        }
    }
    Some(w)
}

fn face_of_token(tok: &str) -> Option<(usize, usize)> {
    match tok {
        "x-" => Some((0, 0)),
        "x+" => Some((0, 1)),
        "y-" => Some((1, 0)),
        "y+" => Some((1, 1)),
        _ => None,
    }
}

fn face_token(face: (usize, usize)) -> &'static str {
    match face {
        (0, 0) => "x-",
        (0, 1) => "x+",
        (1, 0) => "y-",
        _ => "y+",
    }
}

/// `<sec>.axis` (x|y), `<sec>.range` (lo hi; defaults to the domain or
/// Boltzmann truncation box along the axis), `<sec>.periodic`.
fn resolve_rc(r: &mut Resolver, sec: &str, c: &CommonBlock) -> Option<ReactionCoordinate> {
    let akey = format!("{sec}.axis");
    let axis_s = r.choice_or(&akey, "x", &["x", "y", "0", "1"])?;
    let axis = match axis_s.as_str() {
        "x" | "0" => 0,
        _ => 1,
    };
    if axis >= c.potential.dim() {
        r.flag(&akey, "axis exceeds the model dimension");
        return None;
    }
    let rkey = format!("{sec}.range");
    let range_v = match r.maybe_str(&rkey) {
        Some(text) => {
            let parts: Option<Vec<f64>> = text
                .split_whitespace()
                .map(|t| t.parse().ok())
                .collect();
            match parts {
                Some(v) if v.len() == 2 && v[0] < v[1] => Some([v[0], v[1]]),
                _ => {
                    r.flag(&rkey, "expected `lo hi` with lo < hi");
                    None
                }
            }
        }
        None => {
            let derived = match c.potential.domain().bounds() {
                Some((lo, hi)) => Some([lo[axis], hi[axis]]),
                None => match crate::spectral::default_window(&c.potential, c.sim.beta) {
                    Ok(w) => {
                        let (lo, hi) = w.bounds();
                        Some([lo[axis], hi[axis]])
                    }
                    Err(e) => {
                        r.flag(&rkey, e.to_string());
                        None
                    }
                },
            };
            if let Some(b) = derived {
                r.record(&rkey, config::join_floats(&b));
            }
            derived
        }
    }?;
    let periodic = r.bool_or(&format!("{sec}.periodic"), false)?;
    let range = if periodic {
        RcRange::Torus(range_v[0], range_v[1])
    } else {
        RcRange::Interval(range_v[0], range_v[1])
    };
    match ReactionCoordinate::axis(axis, range) {
        Ok(xi) => Some(xi),
        Err(e) => {
            r.flag(&akey, e.to_string());
            None
        }
    }
}

/// Either `<sec>.split = c` (1D two-state partition) or explicit
/// `<sec>.region0`, `<sec>.region1`, ... boxes (lo hi per axis; `inf` and
/// `-inf` allowed). Labels follow the region index.
fn resolve_partition(r: &mut Resolver, sec: &str, dim: usize) -> Option<StatePartition> {
    let skey = format!("{sec}.split");
    if let Some(c) = r.maybe_f64(&skey) {
        if dim != 1 {
            r.flag(&skey, "split points only define 1D partitions");
            return None;
        }
        return Some(StatePartition::split_1d(c));
    }
    let mut regions = Vec::new();
    for k in 0.. {
        let key = format!("{sec}.region{k}");
        let text = match r.maybe_str(&key) {
            Some(t) => t,
            None => break,
        };
        let parts: Option<Vec<f64>> = text
            .split_whitespace()
            .map(|t| t.parse().ok())
            .collect();
        let bounds = match parts {
            Some(v) if v.len() == 2 * dim => v,
            _ => {
                r.flag(&key, format!("expected {} numbers (lo hi per axis)", 2 * dim));
                return None;
            }
        };
        let region = if dim == 1 {
            Region::new_1d(k, bounds[0], bounds[1])
        } else {
            Region::new_2d(k, [bounds[0], bounds[2]], [bounds[1], bounds[3]])
        };
        regions.push(region);
    }
    if regions.is_empty() {
        r.flag(
            &skey,
            format!("partition needs {sec}.split or {sec}.region0, {sec}.region1, ..."),
        );
        return None;
    }
    match StatePartition::new(dim, regions) {
        Ok(p) => Some(p),
        Err(e) => {
            r.flag(&format!("{sec}.region0"), e.to_string());
            None
        }
    }
}

/// Uniform density over a config box, clipped to the accessible domain.
fn box_density(p: &Potential, bounds: &[f64]) -> Result<GridDensity> {
    let dim = p.dim();
    let grid = if dim == 1 {
        Grid::new_1d(bounds[0], bounds[1], 129)?
    } else {
        Grid::new_2d([bounds[0], bounds[2]], [bounds[1], bounds[3]], [65, 65])?
    };
    GridDensity::from_fn(grid, |x| if p.domain().contains(x) { 1.0 } else { 0.0 })
}

fn steps_for(t_total: f64, dt: f64) -> Result<u64> {
    let n = (t_total / dt).round();
    if n < 1.0 {
        return Err(Error::config("horizon shorter than one time step"));
    }
    Ok(n as u64)
}

// ---------------------------------------------------------------------
// Subcommand bodies.

fn run_simulate(c: &CommonBlock, b: SimulateBlock, r: &mut Resolver) -> Result<RunOutput> {
    let art = artifacts_for(c, r)?;
    let n_steps = steps_for(b.t_total, c.sim.dt)?;
    stage(&format!("integrating {n_steps} steps (stride {})", b.stride));
    let traj = sampler::simulate(&c.potential, &c.sim, b.x0, n_steps, b.stride)?;
    let dim = c.potential.dim();
    let cols: Vec<&str> = if dim == 1 { vec!["t", "x"] } else { vec!["t", "x", "y"] };
    let rows: Vec<Vec<String>> = traj
        .positions
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut row = vec![fmt_f64(traj.time(i)), fmt_f64(x[0])];
            if dim > 1 {
                row.push(fmt_f64(x[1]));
            }
            row
        })
        .collect();
    art.write_csv("trajectory.csv", &cols, &rows)?;
    Ok(RunOutput {
        artifacts: art,
        summary: format!("{} frames", traj.len()),
        failed_checks: Vec::new(),
    })
}

fn run_entropy(c: &CommonBlock, b: EntropyBlock, r: &mut Resolver) -> Result<RunOutput> {
    let art = artifacts_for(c, r)?;
    let psi0 = box_density(&c.potential, &b.start_box)?;
    stage(&format!(
        "evolving {} paths over {} frames",
        b.n_paths, b.frames
    ));
    let fit = entropy::entropy_decay_experiment(
        &c.potential,
        &c.sim,
        &psi0,
        b.horizon,
        b.frames,
        b.n_paths,
    )?;
    let rows: Vec<Vec<String>> = fit
        .times
        .iter()
        .zip(&fit.entropy)
        .map(|(t, h)| vec![fmt_f64(*t), fmt_f64(*h)])
        .collect();
    art.write_csv("entropy_decay.csv", &["t", "entropy"], &rows)?;
    art.write_json(
        "entropy.json",
        &json!({
            "rate": fit.rate,
            "residual": fit.residual,
            "fit_window": [fit.times[fit.window.0], fit.times[fit.window.1]],
            "noise_floor": fit.noise_floor,
            "n_paths": fit.n_paths,
        }),
    )?;
    Ok(RunOutput {
        artifacts: art,
        summary: format!("decay rate {}", fmt_f64(fit.rate)),
        failed_checks: Vec::new(),
    })
}

fn run_lsi(c: &CommonBlock, b: LsiBlock, r: &mut Resolver) -> Result<RunOutput> {
    let art = artifacts_for(c, r)?;
    stage(&format!("scanning {} level sets at mesh {}", b.levels, b.mesh));
    let prof = entropy::lsi_profile(
        &c.potential,
        &b.xi,
        c.sim.beta,
        b.levels,
        b.mesh,
        b.threshold,
    )?;
    let rows: Vec<Vec<String>> = prof
        .z
        .iter()
        .zip(&prof.rho)
        .map(|(z, rho)| vec![fmt_f64(*z), fmt_f64(*rho)])
        .collect();
    art.write_csv("lsi_profile.csv", &["z", "rho"], &rows)?;
    art.write_json(
        "lsi.json",
        &json!({
            "marginal_rate": prof.r,
            "rho_min": prof.rho_min,
            "ratio": prof.ratio,
            "metastable_along_xi": prof.metastable_along_xi,
            "threshold": prof.threshold,
        }),
    )?;
    Ok(RunOutput {
        artifacts: art,
        summary: format!("ratio {}", fmt_f64(prof.ratio)),
        failed_checks: Vec::new(),
    })
}

fn write_profile_csv(
    art: &Artifacts,
    name: &str,
    prof: &free_energy::FreeEnergyProfile,
) -> Result<()> {
    let rows: Vec<Vec<String>> = (0..prof.bins())
        .map(|i| {
            vec![
                fmt_f64(prof.z()[i]),
                fmt_f64(prof.f()[i]),
                fmt_f64(prof.fprime()[i]),
                prof.counts()[i].to_string(),
            ]
        })
        .collect();
    art.write_csv(name, &["z", "f", "fprime", "counts"], &rows)?;
    Ok(())
}

fn run_free_energy(c: &CommonBlock, b: FreeEnergyBlock, r: &mut Resolver) -> Result<RunOutput> {
    let art = artifacts_for(c, r)?;
    let prof = match b.method.as_str() {
        "quadrature" => {
            stage("integrating the marginal by quadrature");
            free_energy::free_energy_quadrature(&c.potential, &b.xi, c.sim.beta, b.bins)?
        }
        _ => {
            let t_total = b.t_total.expect("resolved");
            let x0 = b.x0.expect("resolved");
            let n_steps = steps_for(t_total, c.sim.dt)?;
            stage(&format!("sampling the mean force over {n_steps} steps"));
            trajectory_mean_force(c, &b.xi, x0, n_steps, b.bins)?
        }
    };
    write_profile_csv(&art, "free_energy.csv", &prof)?;
    art.write_json(
        "free_energy.json",
        &json!({
            "method": b.method,
            "bins": prof.bins(),
            "circulation": prof.circulation(),
        }),
    )?;
    Ok(RunOutput {
        artifacts: art,
        summary: format!("{} bins", prof.bins()),
        failed_checks: Vec::new(),
    })
}

/// Per-bin conditional average of the local mean force along an unbiased
/// trajectory, integrated into a free-energy profile.
fn trajectory_mean_force(
    c: &CommonBlock,
    xi: &ReactionCoordinate,
    x0: [f64; 2],
    n_steps: u64,
    bins: usize,
) -> Result<free_energy::FreeEnergyProfile> {
    let range = xi.range();
    let (lo, hi) = range.bounds();
    let width = (hi - lo) / bins as f64;
    let mut sums = vec![0.0f64; bins];
    let mut counts = vec![0u64; bins];
    let mut failure: Option<Error> = None;
    sampler::run_until(&c.potential, &c.sim, x0, n_steps, |_, x| {
        let z = range.wrap(xi.value(x));
        if z < lo || z >= hi {
            return false;
        }
        let bin = (((z - lo) / width) as usize).min(bins - 1);
        match free_energy::local_mean_force(&c.potential, xi, c.sim.beta, x) {
            Ok(f) => {
                sums[bin] += f;
                counts[bin] += 1;
                false
            }
            Err(e) => {
                failure = Some(e);
                true
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let fprime: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, n)| if *n > 0 { s / *n as f64 } else { 0.0 })
        .collect();
    free_energy::FreeEnergyProfile::from_mean_force(range, fprime, counts)
}

fn run_abf(c: &CommonBlock, b: AbfBlock, r: &mut Resolver) -> Result<RunOutput> {
    let art = artifacts_for(c, r)?;
    let n_steps = steps_for(b.t_total, c.sim.dt)?;
    stage(&format!("adaptive biasing over {n_steps} steps"));
    let run = free_energy::abf_run(&c.potential, &b.xi, &c.sim, &b.abf, b.x0, n_steps)?;
    write_profile_csv(&art, "abf_profile.csv", &run.profile)?;
    if !run.history.is_empty() {
        let z = run.profile.z();
        let mut rows = Vec::new();
        for snap in &run.history {
            for (i, f) in snap.fprime.iter().enumerate() {
                rows.push(vec![snap.step.to_string(), fmt_f64(z[i]), fmt_f64(*f)]);
            }
        }
        art.write_csv("abf_history.csv", &["step", "z", "fprime"], &rows)?;
    }
    let baseline = if b.baseline {
        let level = b
            .abf
            .crossing_level
            .unwrap_or_else(|| {
                let (lo, hi) = b.xi.range().bounds();
                0.5 * (lo + hi)
            });
        stage("rerunning unbiased for the crossing baseline");
        Some(free_energy::unbiased_crossings(
            &c.potential,
            &b.xi,
            &c.sim,
            b.x0,
            n_steps,
            level,
        )?)
    } else {
        None
    };
    art.write_json(
        "abf.json",
        &json!({
            "crossings": run.crossings,
            "unbiased_crossings": baseline,
            "out_of_range": run.out_of_range,
            "snapshots": run.history.len(),
        }),
    )?;
    Ok(RunOutput {
        artifacts: art,
        summary: format!("{} crossings", run.crossings),
        failed_checks: Vec::new(),
    })
}

fn run_effdyn(c: &CommonBlock, b: EffdynBlock, r: &mut Resolver) -> Result<RunOutput> {
    let art = artifacts_for(c, r)?;
    let coeffs = match b.method.as_str() {
        "quadrature" => {
            stage("building coefficients by conditional quadrature");
            effdyn::estimate_coefficients_quadrature(&c.potential, &b.xi, c.sim.beta, b.bins)?
        }
        _ => {
            let t = b.fit_t_total.expect("resolved");
            let x0 = b.fit_x0.expect("resolved");
            let n = steps_for(t, c.sim.dt)?;
            stage(&format!("estimating coefficients from a {n}-step trajectory"));
            effdyn::estimate_coefficients_trajectory(&c.potential, &b.xi, &c.sim, x0, n, b.bins)?
        }
    };
    let rows: Vec<Vec<String>> = (0..coeffs.bins())
        .map(|i| {
            vec![
                fmt_f64(coeffs.z()[i]),
                fmt_f64(coeffs.b()[i]),
                fmt_f64(coeffs.sigma2()[i]),
                coeffs.counts()[i].to_string(),
            ]
        })
        .collect();
    art.write_csv("effdyn_coeffs.csv", &["z", "b", "sigma2", "counts"], &rows)?;
    let psi0 = box_density(&c.potential, &b.start_box)?;
    stage(&format!(
        "comparing marginals over {} paths at {} times",
        b.n_paths,
        b.times.len()
    ));
    let dist = effdyn::marginal_distance(
        &c.potential,
        &b.xi,
        &coeffs,
        &c.sim,
        &psi0,
        &b.times,
        b.n_paths,
    )?;
    let rows: Vec<Vec<String>> = dist
        .iter()
        .map(|d| vec![fmt_f64(d.t), fmt_f64(d.kl)])
        .collect();
    art.write_csv("effdyn_distance.csv", &["t", "kl"], &rows)?;
    let max_kl = dist.iter().map(|d| d.kl).fold(0.0f64, f64::max);
    art.write_json(
        "effdyn.json",
        &json!({
            "method": b.method,
            "bins": coeffs.bins(),
            "max_kl": max_kl,
        }),
    )?;
    Ok(RunOutput {
        artifacts: art,
        summary: format!("max marginal distance {}", fmt_f64(max_kl)),
        failed_checks: Vec::new(),
    })
}

fn density_rows(d: &GridDensity, dim: usize) -> Vec<Vec<String>> {
    (0..d.grid().len())
        .map(|i| {
            let x = d.grid().coords(i);
            let mut row = vec![fmt_f64(x[0])];
            if dim > 1 {
                row.push(fmt_f64(x[1]));
            }
            row.push(fmt_f64(d.values()[i]));
            row
        })
        .collect()
}

fn density_cols(dim: usize, value: &'static str) -> Vec<&'static str> {
    if dim == 1 {
        vec!["x", value]
    } else {
        vec!["x", "y", value]
    }
}

fn run_qsd(c: &CommonBlock, b: QsdBlock, r: &mut Resolver) -> Result<RunOutput> {
    let art = artifacts_for(c, r)?;
    stage(&format!("solving the window eigenproblem at mesh {}", b.mesh));
    let sol = qsd::solve(&c.potential, c.sim.beta, &b.window, b.mesh)?;
    let dim = c.potential.dim();
    art.write_csv("qsd_density.csv", &density_cols(dim, "nu"), &density_rows(&sol.nu, dim))?;
    let exit_rows: Vec<Vec<String>> = sol
        .exit
        .points
        .iter()
        .zip(&sol.exit.faces)
        .zip(&sol.exit.mass)
        .map(|((pt, face), m)| {
            let mut row = vec![fmt_f64(pt[0])];
            if dim > 1 {
                row.push(fmt_f64(pt[1]));
            }
            row.push(face_token(*face).to_string());
            row.push(fmt_f64(*m));
            row
        })
        .collect();
    let exit_cols: Vec<&str> = if dim == 1 {
        vec!["x", "face", "mass"]
    } else {
        vec!["x", "y", "face", "mass"]
    };
    art.write_csv("qsd_exit.csv", &exit_cols, &exit_rows)?;
    art.write_json(
        "qsd.json",
        &json!({
            "lambda1": sol.lambda[0],
            "lambda2": sol.lambda[1],
            "gap": sol.gap(),
            "mean_exit_time": sol.mean_exit_time(),
            "metastability_index": qsd::metastability_index(&sol),
            "residual": [sol.residual[0], sol.residual[1]],
            "norm_defect": sol.norm_defect,
            "exit_raw_integral": sol.exit.raw_integral,
        }),
    )?;
    Ok(RunOutput {
        artifacts: art,
        summary: format!("lambda1 {}", fmt_f64(sol.lambda[0])),
        failed_checks: Vec::new(),
    })
}

fn run_fv(c: &CommonBlock, b: FvBlock, r: &mut Resolver) -> Result<RunOutput> {
    let art = artifacts_for(c, r)?;
    stage(&format!(
        "evolving {} Fleming-Viot particles to t = {}",
        b.n_particles,
        fmt_f64(b.t_total)
    ));
    let fv = qsd::fleming_viot(
        &c.potential,
        &c.sim,
        &b.window,
        &[b.start],
        b.n_particles,
        b.t_total,
    )?;
    let dim = c.potential.dim();
    art.write_csv(
        "fv_density.csv",
        &density_cols(dim, "density"),
        &density_rows(&fv.density, dim),
    )?;
    let mut failed = Vec::new();
    let tv = if b.mesh >= 128 {
        stage(&format!("solving the reference eigenproblem at mesh {}", b.mesh));
        let sol = qsd::solve(&c.potential, c.sim.beta, &b.window, b.mesh)?;
        let nu = sol.nu.rebin(fv.density.grid().clone())?;
        let tv = tv_distance(&fv.density, &nu)?;
        if tv > b.tv_tolerance {
            failed.push(format!(
                "fleming-viot occupation TV {} to the QSD exceeds {}",
                fmt_f64(tv),
                fmt_f64(b.tv_tolerance)
            ));
        }
        Some(tv)
    } else {
        None
    };
    art.write_json(
        "fv.json",
        &json!({
            "n_particles": b.n_particles,
            "respawns": fv.respawns,
            "averaged_from": fv.averaged_from,
            "tv_to_qsd": tv,
            "tv_tolerance": b.tv_tolerance,
        }),
    )?;
    Ok(RunOutput {
        artifacts: art,
        summary: match tv {
            Some(tv) => format!("TV to QSD {}", fmt_f64(tv)),
            None => format!("{} respawns", fv.respawns),
        },
        failed_checks: failed,
    })
}

fn run_exit_stats(c: &CommonBlock, b: ExitBlock, r: &mut Resolver) -> Result<RunOutput> {
    let art = artifacts_for(c, r)?;
    stage(&format!("solving the window eigenproblem at mesh {}", b.mesh));
    let sol = qsd::solve(&c.potential, c.sim.beta, &b.window, b.mesh)?;
    stage(&format!("sampling {} exits", b.n_samples));
    let stats_out = qsd::exit_statistics(&c.potential, &c.sim, &sol, b.start, b.n_samples)?;
    let dim = c.potential.dim();
    let cols: Vec<&str> = if dim == 1 {
        vec!["time", "x", "face"]
    } else {
        vec!["time", "x", "y", "face"]
    };
    let rows: Vec<Vec<String>> = stats_out
        .records
        .iter()
        .map(|rec| {
            let mut row = vec![fmt_f64(rec.time), fmt_f64(rec.position[0])];
            if dim > 1 {
                row.push(fmt_f64(rec.position[1]));
            }
            row.push(face_token(rec.face).to_string());
            row
        })
        .collect();
    art.write_csv("exit_records.csv", &cols, &rows)?;

    let expected = 1.0 / sol.lambda[0];
    let mut failed = Vec::new();
    if stats_out.ks.p_value <= b.alpha {
        failed.push(format!(
            "exit-time KS against Exp(lambda1) rejected (p = {})",
            fmt_f64(stats_out.ks.p_value)
        ));
    }
    if (stats_out.mean - expected).abs() > 3.0 * stats_out.mean_stderr {
        failed.push(format!(
            "mean exit time {} differs from 1/lambda1 = {} by more than 3 stderr",
            fmt_f64(stats_out.mean),
            fmt_f64(expected)
        ));
    }
    if let Some(ind) = &stats_out.independence {
        if ind.p_value <= b.alpha {
            failed.push(format!(
                "exit time/location independence rejected (p = {})",
                fmt_f64(ind.p_value)
            ));
        }
    }
    if stats_out.location_tv > b.location_tol {
        failed.push(format!(
            "exit-location TV {} exceeds {}",
            fmt_f64(stats_out.location_tv),
            fmt_f64(b.location_tol)
        ));
    }
    art.write_json(
        "exit.json",
        &json!({
            "n_samples": stats_out.records.len(),
            "lambda1": sol.lambda[0],
            "mean": stats_out.mean,
            "mean_stderr": stats_out.mean_stderr,
            "expected_mean": expected,
            "ks": {
                "statistic": stats_out.ks.statistic,
                "p_value": stats_out.ks.p_value,
                "n_effective": stats_out.ks.n_effective,
            },
            "independence": stats_out.independence.as_ref().map(|ind| json!({
                "statistic": ind.statistic,
                "dof": ind.dof,
                "p_value": ind.p_value,
            })),
            "location_tv": stats_out.location_tv,
            "alpha": b.alpha,
            "checks_failed": failed,
        }),
    )?;
    Ok(RunOutput {
        artifacts: art,
        summary: format!(
            "mean exit {} (expected {})",
            fmt_f64(stats_out.mean),
            fmt_f64(expected)
        ),
        failed_checks: failed,
    })
}

fn run_parrep(c: &CommonBlock, b: ParrepBlock, r: &mut Resolver) -> Result<RunOutput> {
    // Solve the per-state eigenproblems up front: they back the derived
    // correlation window and always appear in the accounting, so a rerun
    // from the manifest (where tau_corr arrives pinned) writes identical
    // artifacts.
    let mut per_state = Vec::new();
    let mut tau_suggested = 0.0f64;
    for region in b.partition.regions() {
        stage(&format!(
            "solving state {} eigenproblem at mesh {}",
            region.label, b.mesh
        ));
        let window = parrep::state_window(&c.potential, c.sim.beta, region)?;
        let sol = qsd::solve(&c.potential, c.sim.beta, &window, b.mesh)?;
        let suggested = parrep::suggested_correlation_time(&sol);
        per_state.push(json!({
            "label": region.label,
            "lambda1": sol.lambda[0],
            "gap": sol.gap(),
            "tau_suggested": suggested,
        }));
        tau_suggested = tau_suggested.max(suggested);
    }
    let tau_corr = match b.tau_corr {
        Some(t) if t > 0.0 => t,
        Some(_) => return Err(Error::config("parrep.tau_corr must be positive")),
        None => {
            r.record("parrep.tau_corr", fmt_f64(tau_suggested));
            tau_suggested
        }
    };
    let tau_phase = match b.tau_phase {
        Some(t) if t > 0.0 => t,
        Some(_) => return Err(Error::config("parrep.tau_phase must be positive")),
        None => {
            r.record("parrep.tau_phase", fmt_f64(tau_corr));
            tau_corr
        }
    };
    let art = artifacts_for(c, r)?;
    let parcfg = parrep::ParRepConfig::new(b.n_replicas, tau_corr, tau_phase, c.sim);
    stage(&format!(
        "running parallel replica with N = {} to t = {}",
        b.n_replicas,
        fmt_f64(b.t_total)
    ));
    let (traj, acc) = parrep::parrep_run(&c.potential, &b.partition, &parcfg, b.x0, b.t_total)?;
    let dim = c.potential.dim();
    art.write_csv(
        "parrep_trajectory.csv",
        &output::coarse_columns(dim),
        &output::coarse_rows(&traj, dim),
    )?;
    art.write_json(
        "parrep_accounting.json",
        &json!({
            "n_replicas": b.n_replicas,
            "tau_corr": tau_corr,
            "tau_phase": tau_phase,
            "rounds": acc.rounds,
            "decorr_steps": acc.decorr_steps,
            "phase_steps": acc.phase_steps,
            "parallel_steps": acc.parallel_steps,
            "wall_steps": acc.wall_steps,
            "decorr_clock_steps": acc.decorr_clock_steps,
            "parallel_clock_steps": acc.parallel_clock_steps,
            "simulated_steps": acc.simulated_steps(),
            "simulated_time": acc.simulated_time(),
            "wall_time": acc.wall_time(),
            "speedup": acc.speedup(),
            "events": traj.len(),
            "per_state": per_state,
        }),
    )?;
    Ok(RunOutput {
        artifacts: art,
        summary: format!(
            "{} events, speedup {}",
            traj.len(),
            fmt_f64(acc.speedup())
        ),
        failed_checks: Vec::new(),
    })
}

fn run_kmc(c: &CommonBlock, b: KmcBlock, r: &mut Resolver) -> Result<RunOutput> {
    let art = artifacts_for(c, r)?;
    stage(&format!(
        "building the jump model at mesh {} with {} auxiliary runs per exit",
        b.mesh, b.aux_samples
    ));
    let model = parrep::kmc_build(
        &c.potential,
        &b.partition,
        c.sim.beta,
        b.mesh,
        &c.sim,
        b.aux_samples,
    )?;
    let dim = c.potential.dim();
    let states: Vec<Value> = model
        .states
        .iter()
        .map(|st| {
            let exits: Vec<Value> = st
                .exit_points
                .iter()
                .zip(&st.exit_mass)
                .zip(&st.kernel)
                .map(|((pt, m), row)| {
                    let kernel: serde_json::Map<String, Value> = model
                        .labels
                        .iter()
                        .zip(row)
                        .map(|(l, p)| (l.to_string(), json!(p)))
                        .collect();
                    let point = if dim == 1 {
                        json!([pt[0]])
                    } else {
                        json!([pt[0], pt[1]])
                    };
                    json!({ "point": point, "mass": m, "kernel": kernel })
                })
                .collect();
            json!({
                "label": st.label,
                "rate": st.rate,
                "mean_residence": 1.0 / st.rate,
                "tau_commit": st.tau_commit,
                "exits": exits,
            })
        })
        .collect();
    art.write_json("kmc_model.json", &json!({ "states": states }))?;
    stage(&format!("simulating the jump process to t = {}", fmt_f64(b.t_total)));
    let traj = parrep::kmc_simulate(&model, b.start_state, b.t_total, c.sim.seed)?;
    art.write_csv(
        "kmc_trajectory.csv",
        &output::coarse_columns(dim),
        &output::coarse_rows(&traj, dim),
    )?;
    Ok(RunOutput {
        artifacts: art,
        summary: format!("{} events", traj.len()),
        failed_checks: Vec::new(),
    })
}

fn run_compare(c: &CommonBlock, b: CompareBlock, r: &mut Resolver) -> Result<RunOutput> {
    let art = artifacts_for(c, r)?;
    let cols_a = output::csv_columns(&b.a)?;
    let cols_b = output::csv_columns(&b.b)?;
    let coarse = cols_a.first().map(String::as_str) == Some("entry_time");
    if coarse != (cols_b.first().map(String::as_str) == Some("entry_time")) {
        return Err(Error::config(
            "compare.a and compare.b are different kinds of artifacts",
        ));
    }
    let (report, failed, summary) = if coarse {
        compare_coarse_files(&b)?
    } else {
        compare_profile_files(&b)?
    };
    art.write_json("compare.json", &report)?;
    Ok(RunOutput { artifacts: art, summary, failed_checks: failed })
}

fn compare_coarse_files(b: &CompareBlock) -> Result<(Value, Vec<String>, String)> {
    stage("comparing coarse trajectories");
    let mut ta = output::read_coarse_trajectory(&b.a)?;
    let mut tb = output::read_coarse_trajectory(&b.b)?;
    if b.debounce > 0.0 {
        ta = ta.debounce(b.debounce);
        tb = tb.debounce(b.debounce);
    }
    let report = parrep::compare_coarse(&ta, &tb, b.alpha)?;
    let mut failed = Vec::new();
    if !report.pass {
        failed.push(format!(
            "coarse trajectories differ at level {}",
            fmt_f64(b.alpha)
        ));
    }
    let residence: Vec<Value> = report
        .residence
        .iter()
        .map(|(state, ks)| {
            json!({
                "state": state,
                "statistic": ks.statistic,
                "p_value": ks.p_value,
                "n_effective": ks.n_effective,
            })
        })
        .collect();
    let value = json!({
        "kind": "coarse",
        "a": b.a.display().to_string(),
        "b": b.b.display().to_string(),
        "debounce": b.debounce,
        "alpha": b.alpha,
        "residence": residence,
        "transitions": report.transitions.as_ref().map(|t| json!({
            "statistic": t.statistic,
            "dof": t.dof,
            "p_value": t.p_value,
        })),
        "pass": report.pass,
    });
    let min_p = report
        .residence
        .iter()
        .map(|(_, ks)| ks.p_value)
        .fold(1.0f64, f64::min);
    Ok((value, failed, format!("pass = {} (min p = {})", report.pass, fmt_f64(min_p))))
}

fn compare_profile_files(b: &CompareBlock) -> Result<(Value, Vec<String>, String)> {
    stage("comparing profiles");
    let pa = read_profile(&b.a)?;
    let pb = read_profile(&b.b)?;
    if pa.0.len() != pb.0.len() {
        return Err(Error::config(format!(
            "profiles have {} and {} bins; rebin before comparing",
            pa.0.len(),
            pb.0.len()
        )));
    }
    for (za, zb) in pa.0.iter().zip(&pb.0) {
        if (za - zb).abs() > 1e-9 {
            return Err(Error::config("profile bin centers disagree"));
        }
    }
    // Profiles are defined up to a constant; anchor both at the bin where
    // the first profile attains its minimum.
    let anchor = pa
        .1
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.partial_cmp(y.1).expect("finite profile"))
        .map(|(i, _)| i)
        .expect("nonempty profile");
    let mut max_err = 0.0f64;
    let mut sq = 0.0f64;
    for i in 0..pa.0.len() {
        let da = pa.1[i] - pa.1[anchor];
        let db = pb.1[i] - pb.1[anchor];
        let e = (da - db).abs();
        max_err = max_err.max(e);
        sq += e * e;
    }
    let rms = (sq / pa.0.len() as f64).sqrt();
    let mut failed = Vec::new();
    if max_err > b.tolerance {
        failed.push(format!(
            "profile max anchored error {} exceeds {}",
            fmt_f64(max_err),
            fmt_f64(b.tolerance)
        ));
    }
    let value = json!({
        "kind": "profile",
        "a": b.a.display().to_string(),
        "b": b.b.display().to_string(),
        "bins": pa.0.len(),
        "anchor_z": pa.0[anchor],
        "max_error": max_err,
        "rms_error": rms,
        "tolerance": b.tolerance,
        "pass": failed.is_empty(),
    });
    Ok((value, failed, format!("max anchored error {}", fmt_f64(max_err))))
}

fn read_profile(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let (header, cols) = output::read_csv_columns(path)?;
    let zi = header.iter().position(|h| h == "z");
    let fi = header.iter().position(|h| h == "f");
    match (zi, fi) {
        (Some(zi), Some(fi)) => Ok((cols[zi].clone(), cols[fi].clone())),
        _ => Err(Error::config(format!(
            "{}: expected columns z and f, found {}",
            path.display(),
            header.join(",")
        ))),
    }
}

// ---------------------------------------------------------------------
// Validation (no simulation).

fn run_validate(raw: &RawConfig) -> Result<Vec<String>> {
    let mut r = Resolver::new(raw);
    let common = resolve_common(&mut r);
    match &common {
        Some(c) => {
            resolve_block(&c.subcommand.clone(), &mut r, c);
            r.finish();
        }
        None => {
            // Without a valid model/sim section the block schemas cannot
            // be applied; report what is known.
        }
    }
    if r.findings().is_empty() {
        println!("ok: no findings");
    } else {
        println!("findings:");
        for f in r.findings() {
            println!("  {f}");
        }
    }
    println!("resolved configuration:");
    for (k, v) in r.resolved() {
        let mark = if r.was_defaulted(k) { "  (default)" } else { "" };
        println!("  {k} = {v}{mark}");
    }
    Ok(Vec::new())
}
