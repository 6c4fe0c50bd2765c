//! Experiment configuration: a flat text format with one `section.key =
//! value` assignment per line, `#` comments, and no nesting beyond the
//! single dot. A run manifest JSON written by a previous run is accepted
//! anywhere a config file is, which makes every artifact re-derivable
//! from its manifest alone.
//!
//! Resolution never panics and never stops at the first problem: every
//! missing or malformed key becomes a finding, so `validate` can report
//! all of them at once while `run` refuses to start on the first one.

use crate::error::{Error, Result};
use crate::model::Potential;
use crate::sampler::SimConfig;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Environment variable that overrides `run.output_dir`. The only
/// environment influence on a run, so artifacts can be re-derived into a
/// fresh directory without editing the manifest.
pub const OUTPUT_DIR_ENV: &str = "METASTABLE_OUTPUT_DIR";

/// Experiments a config file may declare in `run.subcommand`. The
/// `validate` verb is not an experiment and takes any of these configs.
pub const RUN_SUBCOMMANDS: [&str; 12] = [
    "simulate",
    "entropy-decay",
    "lsi-profile",
    "free-energy",
    "abf",
    "effdyn",
    "qsd",
    "fleming-viot",
    "exit-stats",
    "parrep",
    "kmc",
    "compare",
];

/// Parsed key-value pairs, untyped.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    /// Parse the flat text format. Duplicate keys and keys without
    /// exactly one dot are rejected.
    pub fn parse(text: &str) -> Result<RawConfig> {
        let mut values = BTreeMap::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = match raw_line.find('#') {
                Some(i) => &raw_line[..i],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `section.key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let dots = key.chars().filter(|c| *c == '.').count();
            if dots != 1 || key.starts_with('.') || key.ends_with('.') {
                return Err(Error::config(format!(
                    "line {}: key `{key}` must have the form section.key",
                    lineno + 1
                )));
            }
            if key.contains(char::is_whitespace) {
                return Err(Error::config(format!(
                    "line {}: key `{key}` contains whitespace",
                    lineno + 1
                )));
            }
            if values.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::config(format!(
                    "line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
        }
        Ok(RawConfig { values })
    }

    /// Load a config file. A JSON run manifest (as written by a previous
    /// run) is recognized and its resolved config section is used.
    pub fn from_file(path: &Path) -> Result<RawConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if text.trim_start().starts_with('{') {
            return RawConfig::from_manifest_json(&text)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())));
        }
        RawConfig::parse(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    fn from_manifest_json(text: &str) -> std::result::Result<RawConfig, String> {
        let doc: serde_json::Value =
            serde_json::from_str(text).map_err(|e| format!("invalid json: {e}"))?;
        let config = doc
            .get("config")
            .and_then(|c| c.as_object())
            .ok_or("manifest has no `config` object")?;
        let mut values = BTreeMap::new();
        for (k, v) in config {
            let s = v
                .as_str()
                .ok_or_else(|| format!("manifest config value for `{k}` is not a string"))?;
            values.insert(k.clone(), s.to_string());
        }
        Ok(RawConfig { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Insert or replace a key, used when deriving configs in memory.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }
}

/// One problem discovered during resolution.
#[derive(Debug, Clone)]
pub struct Finding {
    pub key: String,
    pub message: String,
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

/// Typed reader over a [`RawConfig`] that records which keys were
/// consumed, which values were defaulted, and every problem found.
pub struct Resolver<'a> {
    raw: &'a RawConfig,
    taken: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
    defaulted: BTreeSet<String>,
    findings: Vec<Finding>,
}

impl<'a> Resolver<'a> {
    pub fn new(raw: &'a RawConfig) -> Resolver<'a> {
        Resolver {
            raw,
            taken: BTreeSet::new(),
            resolved: BTreeMap::new(),
            defaulted: BTreeSet::new(),
            findings: Vec::new(),
        }
    }

    pub fn findings(&self) -> &[Finding] {
        &self.findings
    }

    /// Resolved `key = value` table, canonical text per value.
    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }

    pub fn was_defaulted(&self, key: &str) -> bool {
        self.defaulted.contains(key)
    }

    pub fn flag(&mut self, key: &str, message: impl Into<String>) {
        // Messages often come from Error::Config displays; drop the
        // redundant prefix so findings read `key: problem`.
        let message = message.into();
        let message = match message.strip_prefix("config: ") {
            Some(m) => m.to_string(),
            None => message,
        };
        self.findings.push(Finding { key: key.to_string(), message });
    }

    /// Record a value computed at run time (a derived default), so the
    /// manifest carries it explicitly.
    pub fn record(&mut self, key: &str, value: impl Into<String>) {
        self.resolved.insert(key.to_string(), value.into());
        self.defaulted.insert(key.to_string());
    }

    fn take(&mut self, key: &str) -> Option<&'a str> {
        self.taken.insert(key.to_string());
        self.raw.get(key)
    }

    fn keep(&mut self, key: &str, value: String, is_default: bool) {
        self.resolved.insert(key.to_string(), value);
        if is_default {
            self.defaulted.insert(key.to_string());
        }
    }

    fn parse_with<T>(
        &mut self,
        key: &str,
        text: &str,
        what: &str,
        parse: impl Fn(&str) -> Option<(T, String)>,
    ) -> Option<T> {
        match parse(text) {
            Some((v, canonical)) => {
                self.keep(key, canonical, false);
                Some(v)
            }
            None => {
                self.flag(key, format!("`{text}` is not {what}"));
                None
            }
        }
    }

    pub fn require_str(&mut self, key: &str) -> Option<String> {
        match self.take(key) {
            Some(v) if !v.is_empty() => {
                let v = v.to_string();
                self.keep(key, v.clone(), false);
                Some(v)
            }
            Some(_) => {
                self.flag(key, "required value is empty");
                None
            }
            None => {
                self.flag(key, "required");
                None
            }
        }
    }

    pub fn str_or(&mut self, key: &str, default: &str) -> String {
        match self.take(key) {
            Some(v) => {
                let v = v.to_string();
                self.keep(key, v.clone(), false);
                v
            }
            None => {
                self.keep(key, default.to_string(), true);
                default.to_string()
            }
        }
    }

    pub fn maybe_str(&mut self, key: &str) -> Option<String> {
        self.take(key).map(|v| {
            let v = v.to_string();
            self.keep(key, v.clone(), false);
            v
        })
    }

    /// Required value from a fixed set of choices.
    pub fn require_choice(&mut self, key: &str, allowed: &[&str]) -> Option<String> {
        let v = self.require_str(key)?;
        if allowed.contains(&v.as_str()) {
            Some(v)
        } else {
            self.flag(key, format!("`{v}` is not one of {}", allowed.join("|")));
            None
        }
    }

    pub fn choice_or(&mut self, key: &str, default: &str, allowed: &[&str]) -> Option<String> {
        let v = self.str_or(key, default);
        if allowed.contains(&v.as_str()) {
            Some(v)
        } else {
            self.flag(key, format!("`{v}` is not one of {}", allowed.join("|")));
            None
        }
    }

    pub fn require_f64(&mut self, key: &str) -> Option<f64> {
        match self.take(key) {
            Some(v) => self.parse_with(key, v, "a number", parse_f64),
            None => {
                self.flag(key, "required");
                None
            }
        }
    }

    pub fn f64_or(&mut self, key: &str, default: f64) -> Option<f64> {
        match self.take(key) {
            Some(v) => self.parse_with(key, v, "a number", parse_f64),
            None => {
                self.keep(key, crate::output::fmt_f64(default), true);
                Some(default)
            }
        }
    }

    /// Optional float: absent is fine and leaves no resolved entry.
    pub fn maybe_f64(&mut self, key: &str) -> Option<f64> {
        match self.take(key) {
            Some(v) => self.parse_with(key, v, "a number", parse_f64),
            None => None,
        }
    }

    pub fn require_u64(&mut self, key: &str) -> Option<u64> {
        match self.take(key) {
            Some(v) => self.parse_with(key, v, "a nonnegative integer", parse_u64),
            None => {
                self.flag(key, "required");
                None
            }
        }
    }

    pub fn u64_or(&mut self, key: &str, default: u64) -> Option<u64> {
        match self.take(key) {
            Some(v) => self.parse_with(key, v, "a nonnegative integer", parse_u64),
            None => {
                self.keep(key, default.to_string(), true);
                Some(default)
            }
        }
    }

    pub fn usize_or(&mut self, key: &str, default: usize) -> Option<usize> {
        self.u64_or(key, default as u64).map(|v| v as usize)
    }

    pub fn require_usize(&mut self, key: &str) -> Option<usize> {
        self.require_u64(key).map(|v| v as usize)
    }

    pub fn bool_or(&mut self, key: &str, default: bool) -> Option<bool> {
        match self.take(key) {
            Some(v) => self.parse_with(key, v, "true or false", |s| match s {
                "true" => Some((true, "true".to_string())),
                "false" => Some((false, "false".to_string())),
                _ => None,
            }),
            None => {
                self.keep(key, default.to_string(), true);
                Some(default)
            }
        }
    }

    /// Required list of floats whose length must be one of `arities`.
    pub fn require_floats(&mut self, key: &str, arities: &[usize]) -> Option<Vec<f64>> {
        let v = match self.take(key) {
            Some(v) => v,
            None => {
                self.flag(key, "required");
                return None;
            }
        };
        let parsed = self.parse_with(key, v, "a space-separated list of numbers", parse_floats)?;
        if arities.contains(&parsed.len()) {
            Some(parsed)
        } else {
            let want: Vec<String> = arities.iter().map(usize::to_string).collect();
            self.flag(
                key,
                format!("expected {} numbers, found {}", want.join(" or "), parsed.len()),
            );
            None
        }
    }

    /// Required list of floats with at least `min_len` entries.
    pub fn require_float_list(&mut self, key: &str, min_len: usize) -> Option<Vec<f64>> {
        let v = match self.take(key) {
            Some(v) => v,
            None => {
                self.flag(key, "required");
                return None;
            }
        };
        let parsed = self.parse_with(key, v, "a space-separated list of numbers", parse_floats)?;
        if parsed.len() >= min_len {
            Some(parsed)
        } else {
            self.flag(key, format!("expected at least {min_len} numbers"));
            None
        }
    }

    pub fn floats_or(&mut self, key: &str, default: &[f64]) -> Option<Vec<f64>> {
        match self.take(key) {
            Some(v) => self.parse_with(key, v, "a space-separated list of numbers", parse_floats),
            None => {
                self.keep(key, join_floats(default), true);
                Some(default.to_vec())
            }
        }
    }

    /// A point in the model space: one number per dimension, padded to
    /// the internal 2-slot representation.
    pub fn require_point(&mut self, key: &str, dim: usize) -> Option<[f64; 2]> {
        let v = self.require_floats(key, &[dim])?;
        Some(pad_point(&v))
    }

    /// Flag any key never consumed by the schema walk.
    pub fn finish(&mut self) {
        let keys: Vec<String> = self.raw.keys().map(str::to_string).collect();
        for key in keys {
            if !self.taken.contains(&key) {
                self.flag(&key, "unknown key");
            }
        }
    }

    /// Error out on the first finding; used by `run`, which must not
    /// start simulating from a flawed config.
    pub fn ensure_clean(&self) -> Result<()> {
        match self.findings.first() {
            None => Ok(()),
            Some(first) => {
                let extra = self.findings.len() - 1;
                if extra == 0 {
                    Err(Error::config(first.to_string()))
                } else {
                    Err(Error::config(format!("{first} (+{extra} more findings)")))
                }
            }
        }
    }
}

fn parse_f64(s: &str) -> Option<(f64, String)> {
    let v: f64 = s.parse().ok()?;
    if v.is_nan() {
        return None;
    }
    Some((v, crate::output::fmt_f64(v)))
}

fn parse_u64(s: &str) -> Option<(u64, String)> {
    let v: u64 = s.parse().ok()?;
    Some((v, v.to_string()))
}

// An empty value is the empty list; manifests round-trip defaults like
// `model.params = ` through this path.
fn parse_floats(s: &str) -> Option<(Vec<f64>, String)> {
    let mut out = Vec::new();
    for tok in s.split_whitespace() {
        let v: f64 = tok.parse().ok()?;
        if v.is_nan() {
            return None;
        }
        out.push(v);
    }
    let canonical = join_floats(&out);
    Some((out, canonical))
}

pub(crate) fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| crate::output::fmt_f64(*x)).collect::<Vec<_>>().join(" ")
}

pub(crate) fn pad_point(v: &[f64]) -> [f64; 2] {
    let mut p = [0.0; 2];
    for (slot, x) in p.iter_mut().zip(v) {
        *slot = *x;
    }
    p
}

/// The keys shared by every subcommand: the model, the integrator, and
/// the run plumbing.
pub struct CommonBlock {
    pub potential: Potential,
    pub sim: SimConfig,
    pub threads: usize,
    pub output_dir: String,
    pub subcommand: String,
}

/// Resolve the common sections. Returns None when any finding was
/// recorded; the resolver keeps the full list either way.
pub fn resolve_common(r: &mut Resolver) -> Option<CommonBlock> {
    let name = r.require_str("model.potential");
    let params = r.floats_or("model.params", &[]);
    let potential = match (&name, &params) {
        (Some(n), Some(ps)) => match Potential::builtin(n, ps) {
            Ok(p) => Some(p),
            Err(e) => {
                r.flag("model.potential", e.to_string());
                None
            }
        },
        _ => None,
    };

    let beta = r.require_f64("sim.beta");
    let dt = r.require_f64("sim.dt");
    let seed = r.u64_or("sim.seed", 0);
    let threads = r.usize_or("sim.threads", 0);

    let sim = match (beta, dt, seed) {
        (Some(beta), Some(dt), Some(seed)) => {
            let cfg = SimConfig::new(beta, dt, seed);
            if let Some(p) = &potential {
                // Flag an unstable step but keep resolving so that
                // validation can scan the subcommand block too; a real
                // run still aborts on the finding.
                if let Err(e) = cfg.validate_for(p) {
                    r.flag("sim.dt", e.to_string());
                }
                Some(cfg)
            } else {
                None
            }
        }
        _ => None,
    };

    let subcommand = r.require_choice("run.subcommand", &RUN_SUBCOMMANDS);

    // The env override is the one piece of ambient state; the resolved
    // table records whatever actually applies.
    let output_dir = match std::env::var(OUTPUT_DIR_ENV) {
        Ok(dir) if !dir.is_empty() => {
            r.take("run.output_dir");
            r.record("run.output_dir", dir.clone());
            dir
        }
        _ => r.str_or("run.output_dir", "metastable-out"),
    };

    Some(CommonBlock {
        potential: potential?,
        sim: sim?,
        threads: threads?,
        output_dir,
        subcommand: subcommand?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "\
# comment line
run.subcommand = qsd
model.potential = flat
model.params = 0 1
sim.beta = 1.0
sim.dt = 2e-5   # trailing comment
qsd.window = 0 1
";

    #[test]
    fn parses_and_resolves_with_defaults() {
        let raw = RawConfig::parse(GOOD).unwrap();
        let mut r = Resolver::new(&raw);
        let common = resolve_common(&mut r).unwrap();
        assert_eq!(common.subcommand, "qsd");
        assert_eq!(common.sim.beta, 1.0);
        assert_eq!(common.sim.seed, 0);
        assert!(r.was_defaulted("sim.seed"));
        assert!(!r.was_defaulted("sim.beta"));
        assert_eq!(r.resolved()["sim.dt"], "0.00002");
        assert_eq!(r.resolved()["model.params"], "0 1");
        assert!(r.findings().is_empty());
    }

    #[test]
    fn missing_and_malformed_keys_become_findings() {
        let raw = RawConfig::parse(
            "run.subcommand = qsd\nmodel.potential = flat\nsim.dt = fast\nsim.bogus = 1\n",
        )
        .unwrap();
        let mut r = Resolver::new(&raw);
        assert!(resolve_common(&mut r).is_none());
        r.finish();
        let keys: Vec<&str> = r.findings().iter().map(|f| f.key.as_str()).collect();
        assert!(keys.contains(&"sim.beta"), "findings: {keys:?}");
        assert!(keys.contains(&"sim.dt"));
        assert!(keys.contains(&"sim.bogus"));
        assert!(r.ensure_clean().is_err());
    }

    #[test]
    fn unstable_dt_finding_carries_the_computed_bound() {
        let raw = RawConfig::parse(
            "run.subcommand = simulate\nmodel.potential = flat\nmodel.params = 0 1\n\
             sim.beta = 1\nsim.dt = 0.05\n",
        )
        .unwrap();
        let mut r = Resolver::new(&raw);
        // Resolution continues (validate wants the full scan) but the
        // finding blocks ensure_clean.
        assert!(resolve_common(&mut r).is_some());
        assert!(r.ensure_clean().is_err());
        let dt_finding = r
            .findings()
            .iter()
            .find(|f| f.key == "sim.dt")
            .expect("stability finding");
        assert!(
            dt_finding.message.contains("kick") && dt_finding.message.contains("width"),
            "bound should appear in: {}",
            dt_finding.message
        );
    }

    #[test]
    fn malformed_lines_and_duplicates_are_rejected() {
        assert!(RawConfig::parse("beta = 1\n").is_err());
        assert!(RawConfig::parse("a.b.c = 1\n").is_err());
        assert!(RawConfig::parse("sim.beta = 1\nsim.beta = 2\n").is_err());
        assert!(RawConfig::parse("sim.be ta = 1\n").is_err());
    }

    #[test]
    fn manifest_json_round_trips_through_the_loader() {
        let raw = RawConfig::parse(GOOD).unwrap();
        let mut r = Resolver::new(&raw);
        resolve_common(&mut r).unwrap();
        let manifest = crate::output::run_manifest("qsd", r.resolved(), 1.25);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("run_manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        let back = RawConfig::from_file(&path).unwrap();
        let mut r2 = Resolver::new(&back);
        let common = resolve_common(&mut r2).unwrap();
        assert_eq!(common.sim.dt, 2e-5);
        assert_eq!(r.resolved()["sim.dt"], r2.resolved()["sim.dt"]);
    }
}
