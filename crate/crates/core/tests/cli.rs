//! End-to-end tests of the `metastable` binary: config resolution, exit
//! codes, artifact layout, and byte-reproducibility from run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_metastable")
}

struct Run {
    out: Output,
    dir: PathBuf,
}

impl Run {
    fn code(&self) -> i32 {
        self.out.status.code().expect("process exited")
    }

    fn stdout(&self) -> String {
        String::from_utf8_lossy(&self.out.stdout).into_owned()
    }

    fn stderr(&self) -> String {
        String::from_utf8_lossy(&self.out.stderr).into_owned()
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn json(&self, name: &str) -> serde_json::Value {
        let text = fs::read_to_string(self.artifact(name))
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        serde_json::from_str(&text).expect("valid json")
    }
}

/// Run a subcommand in `work` with the given config text; artifacts land
/// in a fresh subdirectory of `work`.
fn run(work: &Path, sub: &str, config_text: &str, strict: bool, tag: &str) -> Run {
    let config = work.join(format!("{tag}.cfg"));
    fs::write(&config, config_text).unwrap();
    let dir = work.join(format!("{tag}-out"));
    run_with_config(work, sub, &config, strict, &dir)
}

fn run_with_config(work: &Path, sub: &str, config: &Path, strict: bool, dir: &Path) -> Run {
    let mut cmd = Command::new(bin());
    cmd.arg(sub).arg("--config").arg(config).current_dir(work);
    cmd.env("METASTABLE_OUTPUT_DIR", dir);
    if strict {
        cmd.arg("--strict");
    }
    let out = cmd.output().expect("binary runs");
    Run { out, dir: dir.to_path_buf() }
}

const QSD_FLAT: &str = "run.subcommand = qsd\n\
model.potential = flat\n\
model.params = 0 1\n\
sim.beta = 1\n\
sim.dt = 2e-5\n\
qsd.window = 0 1\n\
qsd.mesh = 513\n";

#[test]
fn qsd_run_matches_the_interval_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run(tmp.path(), "qsd", QSD_FLAT, false, "qsd");
    assert_eq!(r.code(), 0, "stderr: {}", r.stderr());
    let j = r.json("qsd.json");
    let pi2 = std::f64::consts::PI.powi(2);
    let l1 = j["lambda1"].as_f64().unwrap();
    let l2 = j["lambda2"].as_f64().unwrap();
    assert!((l1 - pi2).abs() / pi2 < 5e-3, "lambda1 {l1}");
    assert!((l2 - 4.0 * pi2).abs() / (4.0 * pi2) < 5e-3, "lambda2 {l2}");
    for name in ["qsd_density.csv", "qsd_exit.csv", "run_manifest.json"] {
        assert!(r.artifact(name).exists(), "{name} missing");
    }
}

#[test]
fn repeated_runs_and_manifest_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = "run.subcommand = simulate\n\
model.potential = double-well-1d\n\
sim.beta = 4\n\
sim.dt = 2.5e-4\n\
sim.seed = 9\n\
simulate.x0 = -1\n\
simulate.t_total = 2\n\
simulate.stride = 40\n";
    let a = run(tmp.path(), "simulate", cfg, false, "a");
    let b = run(tmp.path(), "simulate", cfg, false, "b");
    assert_eq!(a.code(), 0, "stderr: {}", a.stderr());
    assert_eq!(b.code(), 0);
    let ta = fs::read(a.artifact("trajectory.csv")).unwrap();
    let tb = fs::read(b.artifact("trajectory.csv")).unwrap();
    assert_eq!(ta, tb, "same config must give identical bytes");

    // Rerun from the manifest of the first run: same artifacts again.
    let c = run_with_config(
        tmp.path(),
        "simulate",
        &a.artifact("run_manifest.json"),
        false,
        &tmp.path().join("c-out"),
    );
    assert_eq!(c.code(), 0, "stderr: {}", c.stderr());
    let tc = fs::read(c.artifact("trajectory.csv")).unwrap();
    assert_eq!(ta, tc, "manifest rerun must reproduce the run");

    // The manifests agree on everything except wall time and placement.
    let mut ma = a.json("run_manifest.json");
    let mut mc = c.json("run_manifest.json");
    for m in [&mut ma, &mut mc] {
        m["wall_seconds"] = 0.into();
        m["config"]["run.output_dir"] = "".into();
    }
    assert_eq!(ma, mc);
}

#[test]
fn validate_lists_findings_without_running() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = "run.subcommand = qsd\n\
model.potential = flat\n\
model.params = 0 1\n\
sim.beta = 1\n\
sim.dt = 2e-5\n\
qsd.window = 0 1\n\
qsd.typo = 3\n";
    let r = run(tmp.path(), "validate", cfg, false, "val");
    assert_eq!(r.code(), 0, "stderr: {}", r.stderr());
    let out = r.stdout();
    assert!(out.contains("qsd.typo: unknown key"), "stdout: {out}");
    assert!(out.contains("qsd.mesh = 513  (default)"), "stdout: {out}");
    assert!(!r.artifact("qsd.json").exists(), "validate must not run");
}

#[test]
fn config_problems_exit_with_code_1() {
    let tmp = tempfile::tempdir().unwrap();

    // Missing config file.
    let miss = run_with_config(
        tmp.path(),
        "qsd",
        &tmp.path().join("nope.cfg"),
        false,
        &tmp.path().join("miss-out"),
    );
    assert_eq!(miss.code(), 1, "stderr: {}", miss.stderr());

    // Declared subcommand disagrees with the invoked one.
    let r = run(tmp.path(), "simulate", QSD_FLAT, false, "mismatch");
    assert_eq!(r.code(), 1);
    assert!(r.stderr().contains("run.subcommand"), "stderr: {}", r.stderr());

    // Unknown key on a real run.
    let bad = format!("{QSD_FLAT}qsd.typo = 1\n");
    let r = run(tmp.path(), "qsd", &bad, false, "unknown");
    assert_eq!(r.code(), 1);
    assert!(r.stderr().contains("unknown key"), "stderr: {}", r.stderr());

    // Unstable time step.
    let bad = QSD_FLAT.replace("sim.dt = 2e-5", "sim.dt = 0.05");
    let r = run(tmp.path(), "qsd", &bad, false, "dt");
    assert_eq!(r.code(), 1);
    assert!(r.stderr().contains("too large"), "stderr: {}", r.stderr());
}

#[test]
fn numerical_failures_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    // The effective walk on a range much narrower than the accessible
    // region escapes the coefficient table, which is a numerics error.
    let cfg = "run.subcommand = effdyn\n\
model.potential = energetic-2d\n\
sim.beta = 4\n\
sim.dt = 1e-4\n\
effdyn.bins = 16\n\
effdyn.range = -0.6 0.6\n\
effdyn.start_box = -0.2 0.2 -0.2 0.2\n\
effdyn.times = 0.5\n\
effdyn.n_paths = 1000\n";
    let r = run(tmp.path(), "effdyn", cfg, false, "esc");
    assert_eq!(r.code(), 2, "stderr: {}", r.stderr());
    assert!(r.stderr().contains("numerics"), "stderr: {}", r.stderr());
}

#[test]
fn failed_checks_exit_0_normally_and_3_under_strict() {
    let tmp = tempfile::tempdir().unwrap();
    // An unreachable TV tolerance makes the Fleming-Viot check fail
    // without making the run erroneous.
    let cfg = "run.subcommand = fleming-viot\n\
model.potential = flat\n\
model.params = -1 2\n\
sim.beta = 1\n\
sim.dt = 2e-5\n\
fv.window = 0 1\n\
fv.start = 0.5\n\
fv.n_particles = 150\n\
fv.t_total = 0.15\n\
fv.mesh = 129\n\
fv.tv_tolerance = 1e-9\n";
    let r = run(tmp.path(), "fleming-viot", cfg, false, "lax");
    assert_eq!(r.code(), 0, "stderr: {}", r.stderr());
    assert!(r.stderr().contains("check failed"), "stderr: {}", r.stderr());
    let j = r.json("fv.json");
    assert!(j["tv_to_qsd"].as_f64().unwrap() > 1e-9);

    let r = run(tmp.path(), "fleming-viot", cfg, true, "strict");
    assert_eq!(r.code(), 3, "stderr: {}", r.stderr());
}

#[test]
fn csv_echo_omits_placement_keys_and_env_overrides_the_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run(tmp.path(), "qsd", QSD_FLAT, false, "echo");
    assert_eq!(r.code(), 0, "stderr: {}", r.stderr());
    let text = fs::read_to_string(r.artifact("qsd_density.csv")).unwrap();
    assert!(text.starts_with("# metastable "));
    assert!(text.contains("# qsd.window = 0 1\n"));
    assert!(!text.contains("run.output_dir"), "placement key leaked into echo");
    assert!(!text.contains("sim.threads"), "thread count leaked into echo");
    // The manifest still records where the artifacts actually went.
    let m = r.json("run_manifest.json");
    assert_eq!(
        m["config"]["run.output_dir"].as_str().unwrap(),
        r.dir.to_str().unwrap()
    );
}

#[test]
fn compare_accepts_its_own_coarse_output() {
    let tmp = tempfile::tempdir().unwrap();
    // Synthesize a well-formed coarse trajectory: alternating states with
    // a mix of short and long residences.
    let mut rows = String::from("entry_time,state,residence,exit_x\n");
    let mut t = 0.0;
    for k in 0..240 {
        let dur = 0.5 + 1.7 * ((k * 37 % 11) as f64) / 11.0;
        let state = k % 2;
        let exit = if state == 0 { 0.1 } else { -0.1 };
        rows.push_str(&format!("{t},{state},{dur},{exit}\n"));
        t += dur;
    }
    let csv = tmp.path().join("coarse.csv");
    fs::write(&csv, rows).unwrap();
    let cfg = format!(
        "run.subcommand = compare\n\
model.potential = flat\n\
model.params = 0 1\n\
sim.beta = 1\n\
sim.dt = 2e-5\n\
compare.a = {0}\n\
compare.b = {0}\n",
        csv.display()
    );
    let r = run(tmp.path(), "compare", &cfg, true, "cmp");
    assert_eq!(r.code(), 0, "stderr: {}", r.stderr());
    let j = r.json("compare.json");
    assert_eq!(j["kind"], "coarse");
    assert_eq!(j["pass"], true);
}

#[test]
fn help_and_usage_errors_keep_clap_conventions() {
    let out = Command::new(bin()).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["qsd", "parrep", "kmc", "fleming-viot", "entropy-decay"] {
        assert!(text.contains(sub), "help lists {sub}");
    }

    let out = Command::new(bin()).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1), "unknown subcommand is a usage error");
}
