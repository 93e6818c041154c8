//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use lagot::bench::SETTINGS;
use lagot::lagrangian::{LagrangianSpec, MetricField, PotentialKind, PotentialSpec};
use lagot::metric_learn::MetricLearnConfig;
use lagot::nlot::NlotConfig;
use lagot::nn::LbfgsConfig;

use crate::error::{CliError, CliResult};

/// Which trainer a configuration drives; selects the defaults.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Nlot,
    Metric,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Nlot => "nlot",
            Task::Metric => "metric",
        }
    }
}

const TASKS: &[&str] = &["nlot", "metric"];

const LAGRANGIANS: &[&str] = &[
    "auto",
    "kinetic",
    "potential.box",
    "potential.slit",
    "potential.hill",
    "potential.well",
    "potential.gmm",
    "metric.circle",
    "metric.mass_splitting",
    "metric.x_paths",
];

#[derive(Clone, Copy, Debug)]
enum Kind {
    Text,
    Choice(&'static [&'static str]),
    Count,
    Seed,
    Real,
    Sizes,
}

struct Key {
    name: &'static str,
    kind: Kind,
    nlot: &'static str,
    metric: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: &'static str) -> Key {
    Key { name, kind, nlot: default, metric: default }
}

const fn split(name: &'static str, kind: Kind, nlot: &'static str, metric: &'static str) -> Key {
    Key { name, kind, nlot, metric }
}

const SCHEMA: &[Key] = &[
    split("task", Kind::Choice(TASKS), "nlot", "metric"),
    split("dataset", Kind::Choice(&SETTINGS), "translation", "circle"),
    key("data_dir", Kind::Text, ""),
    key("out_dir", Kind::Text, "run"),
    key("seed", Kind::Seed, "0"),
    key("steps", Kind::Count, "1000"),
    key("source", Kind::Count, "0"),
    key("target", Kind::Count, "1"),
    key("checkpoint_every", Kind::Count, "100"),
    key("log_every", Kind::Count, "1"),
    key("lagrangian.kind", Kind::Choice(LAGRANGIANS), "auto"),
    key("lagrangian.m1", Kind::Real, "0.01"),
    key("lagrangian.m2", Kind::Real, "1"),
    key("lagrangian.m3", Kind::Real, "0.05"),
    key("lagrangian.m4", Kind::Real, "0.01"),
    key("lagrangian.m5", Kind::Real, "0.1"),
    key("lagrangian.sharpness", Kind::Real, "20"),
    key("metric.eps", Kind::Real, "0.1"),
    key("knots", Kind::Count, "30"),
    key("quad_nodes", Kind::Count, "100"),
    key("leaky_slope", Kind::Real, "0.01"),
    key("potential.hidden", Kind::Sizes, "64,64,64,64"),
    key("potential.rate_start", Kind::Real, "0.0001"),
    split("potential.rate_end", Kind::Real, "0.01", "0.0001"),
    key("conjugate.hidden", Kind::Sizes, "64,64,64,64"),
    key("conjugate.rate_start", Kind::Real, "0.0001"),
    split("conjugate.rate_end", Kind::Real, "0.01", "0.0001"),
    key("predictor.hidden", Kind::Sizes, "1024,1024"),
    key("predictor.rate", Kind::Real, "0.0001"),
    key("batch", Kind::Count, "1024"),
    key("lbfgs.iters", Kind::Count, "20"),
    key("lbfgs.history", Kind::Count, "10"),
    key("metric.hidden", Kind::Sizes, "64,64"),
    key("metric.rate", Kind::Real, "0.005"),
    key("metric.update_frequency", Kind::Count, "10"),
    key("metric.rounds", Kind::Count, "100"),
    key("eval.samples", Kind::Count, "2048"),
    key("eval.grid", Kind::Count, "20"),
    key("export.samples", Kind::Count, "64"),
    key("export.count", Kind::Count, "64"),
    key("export.fine_tune", Kind::Count, "0"),
];

fn lookup(name: &str) -> CliResult<&'static Key> {
    SCHEMA.iter().find(|k| k.name == name).ok_or_else(|| CliError::Usage(format!("unknown config key `{name}`")))
}

fn canonical(key: &Key, raw: &str) -> CliResult<String> {
    let raw = raw.trim();
    let raw = raw.strip_prefix('"').and_then(|r| r.strip_suffix('"')).unwrap_or(raw);
    let bad = |what: &str| CliError::Usage(format!("`{}`: expected {what}, got `{raw}`", key.name));
    match key.kind {
        Kind::Text => Ok(raw.to_string()),
        Kind::Choice(options) => {
            if options.contains(&raw) {
                Ok(raw.to_string())
            } else {
                Err(bad(&format!("one of {}", options.join(", "))))
            }
        }
        Kind::Count => raw.parse::<usize>().map(|v| v.to_string()).map_err(|_| bad("a non-negative integer")),
        Kind::Seed => raw.parse::<u64>().map(|v| v.to_string()).map_err(|_| bad("an unsigned 64-bit integer")),
        Kind::Real => match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v.to_string()),
            _ => Err(bad("a finite number")),
        },
        Kind::Sizes => {
            if raw.is_empty() {
                return Ok(String::new());
            }
            let sizes = raw
                .split(',')
                .map(|s| s.trim().parse::<usize>().ok().filter(|&v| v > 0))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("a comma-separated list of positive integers"))?;
            Ok(sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
        }
    }
}

/// Validated configuration. Every schema key is present in canonical form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    pub fn defaults(task: Task) -> Self {
        let values = SCHEMA
            .iter()
            .map(|k| (k.name, if task == Task::Nlot { k.nlot } else { k.metric }.to_string()))
            .collect();
        Self { values }
    }

    pub fn set(&mut self, name: &str, raw: &str) -> CliResult<()> {
        let key = lookup(name)?;
        let value = canonical(key, raw)?;
        self.values.insert(key.name, value);
        Ok(())
    }

    /// Applies an override of the form `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> CliResult<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v)
    }

    /// Applies every assignment in `text` on top of the current values.
    pub fn merge_text(&mut self, text: &str) -> CliResult<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {}: expected key = value, got `{line}`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str, task: Task) -> CliResult<Self> {
        let mut cfg = Self::defaults(task);
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, task: Task) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, task)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in SCHEMA {
            let v = &self.values[key.name];
            match key.kind {
                Kind::Text | Kind::Choice(_) => writeln!(out, "{} = \"{}\"", key.name, v),
                _ => writeln!(out, "{} = {}", key.name, v),
            }
            .expect("writing to a string");
        }
        out
    }

    pub fn get(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).unwrap_or_else(|| panic!("`{name}` is not a schema key"))
    }

    pub fn count(&self, name: &str) -> usize {
        self.get(name).parse().expect("validated count")
    }

    pub fn real(&self, name: &str) -> f64 {
        self.get(name).parse().expect("validated number")
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").parse().expect("validated seed")
    }

    pub fn sizes(&self, name: &str) -> Vec<usize> {
        let v = self.get(name);
        if v.is_empty() {
            Vec::new()
        } else {
            v.split(',').map(|s| s.parse().expect("validated sizes")).collect()
        }
    }

    pub fn task(&self) -> Task {
        if self.get("task") == "metric" {
            Task::Metric
        } else {
            Task::Nlot
        }
    }

    pub fn nlot_config(&self) -> NlotConfig {
        NlotConfig {
            knots: self.count("knots"),
            quad_nodes: self.count("quad_nodes"),
            potential_hidden: self.sizes("potential.hidden"),
            conjugate_hidden: self.sizes("conjugate.hidden"),
            predictor_hidden: self.sizes("predictor.hidden"),
            slope: self.real("leaky_slope"),
            potential_rate: (self.real("potential.rate_start"), self.real("potential.rate_end")),
            conjugate_rate: (self.real("conjugate.rate_start"), self.real("conjugate.rate_end")),
            predictor_rate: self.real("predictor.rate"),
            batch: self.count("batch"),
            lbfgs: LbfgsConfig {
                max_iters: self.count("lbfgs.iters"),
                history: self.count("lbfgs.history"),
                ..LbfgsConfig::default()
            },
            steps: self.count("steps"),
            seed: self.seed(),
        }
    }

    pub fn metric_config(&self) -> MetricLearnConfig {
        MetricLearnConfig {
            inner: self.nlot_config(),
            metric_hidden: self.sizes("metric.hidden"),
            metric_rate: self.real("metric.rate"),
            update_frequency: self.count("metric.update_frequency"),
            rounds: self.count("metric.rounds"),
            seed: self.seed(),
        }
    }

    /// Cost for `train`; `auto` follows the dataset.
    pub fn lagrangian(&self) -> LagrangianSpec {
        let kind = match self.get("lagrangian.kind") {
            "auto" => match self.get("dataset") {
                "translation" | "identity" => "kinetic".to_string(),
                d if PotentialKind::parse(d).is_some() => format!("potential.{d}"),
                d => format!("metric.{d}"),
            },
            k => k.to_string(),
        };
        let eps = self.real("metric.eps");
        if let Some(p) = kind.strip_prefix("potential.") {
            let m = ["lagrangian.m1", "lagrangian.m2", "lagrangian.m3", "lagrangian.m4", "lagrangian.m5"]
                .map(|k| self.real(k));
            LagrangianSpec::KineticMinusPotential(PotentialSpec {
                kind: PotentialKind::parse(p).expect("validated potential"),
                m,
                sharpness: self.real("lagrangian.sharpness"),
            })
        } else {
            match kind.as_str() {
                "metric.circle" => LagrangianSpec::Metric(MetricField::Circle { eps }),
                "metric.mass_splitting" => LagrangianSpec::Metric(MetricField::MassSplitting { delta: eps }),
                "metric.x_paths" => LagrangianSpec::Metric(MetricField::XPaths { delta: eps }),
                _ => LagrangianSpec::Kinetic,
            }
        }
    }
}
