//! Experiment config files.
//!
//! A config is a flat TOML document of `key = value` pairs. Hyperparameters
//! use their conventional short names (`K`, `T`, `E`, `m`, `tau`, ...).
//! `layout` is a comma-separated list of `shift:clients` entries, where the
//! shift is a rotation in degrees (`"0:10, 180:10"`) or a `+`-joined set of
//! class indices (`"2+3+4+5+6+7:60, 0+1+8+9:40"`).
//!
//! Unknown keys, type errors and missing required keys are all reported
//! together in one [`Error::Config`].

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::datagen::{ClusterLayout, ClusterSpec, Shift};
use crate::error::{Error, Result};
use crate::protocols::ProtocolKind;
use crate::similarity::TwoHopRule;
use crate::simulator::{ExperimentConfig, ShiftKind};

pub const REQUIRED_KEYS: [&str; 4] = ["protocol", "K", "layout", "seed"];

/// Every accepted key, in echo order.
pub const KNOWN_KEYS: [&str; 26] = [
    "name",
    "protocol",
    "K",
    "layout",
    "shift",
    "seed",
    "T",
    "E",
    "m",
    "batch_size",
    "learning_rate",
    "tau",
    "tau_max",
    "train_n",
    "val_n",
    "test_n",
    "n_classes",
    "dim",
    "hidden_dim",
    "class_separation",
    "pens_selection_rounds",
    "pens_top_fraction",
    "two_hop",
    "two_hop_rule",
    "output_dir",
    "comment",
];

const FLOAT_KEYS: [&str; 5] = [
    "learning_rate",
    "tau",
    "tau_max",
    "class_separation",
    "pens_top_fraction",
];

/// Keys `sweep` may vary.
pub const SWEEPABLE_KEYS: [&str; 16] = [
    "seed",
    "T",
    "E",
    "m",
    "batch_size",
    "learning_rate",
    "tau",
    "tau_max",
    "train_n",
    "val_n",
    "test_n",
    "hidden_dim",
    "class_separation",
    "pens_selection_rounds",
    "pens_top_fraction",
    "dim",
];

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

fn suggestion(key: &str) -> Option<&'static str> {
    KNOWN_KEYS
        .iter()
        .map(|k| (strsim::levenshtein(key, k), *k))
        .filter(|&(d, _)| d <= 2)
        .min()
        .map(|(_, k)| k)
}

fn as_usize(key: &str, v: &Value) -> Result<usize, String> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        other => Err(format!("`{key}` must be a non-negative integer, got {other}")),
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64, String> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(format!("`{key}` must be a number, got {other}")),
    }
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str, String> {
    v.as_str().ok_or_else(|| format!("`{key}` must be a string, got {v}"))
}

/// Parses a layout string; `shift` decides how single-number shifts read.
pub fn parse_layout(text: &str, shift: Option<ShiftKind>) -> Result<ClusterLayout, String> {
    let entries: Vec<&str> = text.split(',').map(str::trim).filter(|e| !e.is_empty()).collect();
    if entries.is_empty() {
        return Err(format!("layout `{text}` has no entries"));
    }
    let kind = shift.unwrap_or(if text.contains('+') {
        ShiftKind::Label
    } else {
        ShiftKind::Rotation
    });
    let mut clusters = Vec::with_capacity(entries.len());
    for entry in entries {
        let (spec, count) = entry
            .rsplit_once(':')
            .ok_or_else(|| format!("layout entry `{entry}` is not `shift:clients`"))?;
        let clients: usize = count
            .trim()
            .parse()
            .map_err(|_| format!("layout entry `{entry}`: bad client count `{count}`"))?;
        let shift = match kind {
            ShiftKind::Rotation => Shift::Rotation(
                spec.trim()
                    .parse()
                    .map_err(|_| format!("layout entry `{entry}`: bad rotation `{spec}`"))?,
            ),
            ShiftKind::Label => {
                let set = spec
                    .split('+')
                    .map(|c| c.trim().parse::<usize>())
                    .collect::<Result<BTreeSet<_>, _>>()
                    .map_err(|_| format!("layout entry `{entry}`: bad class list `{spec}`"))?;
                Shift::Labels(set)
            }
        };
        clusters.push(ClusterSpec { shift, clients });
    }
    Ok(ClusterLayout::new(clusters))
}

/// Applies one scalar key to `cfg`. Layout, shift and name are handled by the caller.
fn apply_key(cfg: &mut ExperimentConfig, key: &str, v: &Value) -> Result<(), String> {
    match key {
        "protocol" => cfg.protocol = as_str(key, v)?.parse()?,
        "K" => cfg.k = as_usize(key, v)?,
        "seed" => cfg.seed = as_usize(key, v)? as u64,
        "T" => cfg.rounds = as_usize(key, v)?,
        "E" => cfg.epochs = as_usize(key, v)?,
        "m" => cfg.m = as_usize(key, v)?,
        "batch_size" => cfg.batch_size = as_usize(key, v)?,
        "learning_rate" => cfg.learning_rate = as_f64(key, v)?,
        "tau" => cfg.tau = as_f64(key, v)?,
        "tau_max" => cfg.tau_max = as_f64(key, v)?,
        "train_n" => cfg.train_n = as_usize(key, v)?,
        "val_n" => cfg.val_n = as_usize(key, v)?,
        "test_n" => cfg.test_n = as_usize(key, v)?,
        "n_classes" => cfg.n_classes = as_usize(key, v)?,
        "dim" => cfg.dim = as_usize(key, v)?,
        "hidden_dim" => cfg.hidden_dim = as_usize(key, v)?,
        "class_separation" => cfg.class_separation = as_f64(key, v)?,
        "pens_selection_rounds" => cfg.pens_selection_rounds = as_usize(key, v)?,
        "pens_top_fraction" => cfg.pens_top_fraction = as_f64(key, v)?,
        "two_hop" => {
            cfg.two_hop = v
                .as_bool()
                .ok_or_else(|| format!("`two_hop` must be true or false, got {v}"))?
        }
        "two_hop_rule" => {
            cfg.two_hop_rule = match as_str(key, v)? {
                "most_similar" => TwoHopRule::MostSimilar,
                "least_similar" => TwoHopRule::LeastSimilar,
                other => {
                    return Err(format!(
                        "`two_hop_rule` must be most_similar or least_similar, got `{other}`"
                    ))
                }
            }
        }
        "output_dir" => cfg.output_dir = Some(PathBuf::from(as_str(key, v)?)),
        "comment" => {
            as_str(key, v)?;
        }
        _ => unreachable!("key {key} checked against KNOWN_KEYS"),
    }
    Ok(())
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let table: Table = toml::from_str(text).map_err(|e| Error::config(format!("config is not valid TOML: {e}")))?;
    let mut problems = Vec::new();

    for key in table.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            problems.push(match suggestion(key) {
                Some(s) => format!("unknown key `{key}` (did you mean `{s}`?)"),
                None => format!("unknown key `{key}`"),
            });
        }
    }
    for key in REQUIRED_KEYS {
        if !table.contains_key(key) {
            problems.push(format!("missing required key `{key}`"));
        }
    }

    let mut cfg = ExperimentConfig::new(ProtocolKind::Dac, ClusterLayout::new(Vec::new()), 0);
    let mut bad_keys = Vec::new();
    for (key, v) in &table {
        if matches!(key.as_str(), "layout" | "shift" | "name") || !KNOWN_KEYS.contains(&key.as_str()) {
            continue;
        }
        if let Err(p) = apply_key(&mut cfg, key, v) {
            problems.push(p);
            bad_keys.push(key.as_str());
        }
    }

    let shift = match table.get("shift") {
        None => None,
        Some(v) => match v.as_str() {
            Some("rotation") => Some(ShiftKind::Rotation),
            Some("label") => Some(ShiftKind::Label),
            _ => {
                problems.push(format!("`shift` must be \"rotation\" or \"label\", got {v}"));
                None
            }
        },
    };
    if let Some(v) = table.get("layout") {
        match as_str("layout", v).and_then(|s| parse_layout(s, shift)) {
            Ok(layout) => {
                cfg.shift = shift.unwrap_or(match layout.clusters.first().map(|c| &c.shift) {
                    Some(Shift::Labels(_)) => ShiftKind::Label,
                    _ => ShiftKind::Rotation,
                });
                cfg.layout = layout;
            }
            Err(p) => {
                problems.push(p);
                bad_keys.push("layout");
            }
        }
    }
    cfg.name = match table.get("name") {
        Some(v) => match as_str("name", v) {
            Ok(s) => s.to_string(),
            Err(p) => {
                problems.push(p);
                String::new()
            }
        },
        None => cfg.protocol.name().to_string(),
    };

    // Cross-key checks only make sense once every key they read parsed.
    let readable = table.contains_key("layout") && table.contains_key("K") && bad_keys.is_empty();
    if problems.is_empty() || readable {
        problems.extend(cfg.problems());
    }
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(problems))
    }
}

fn quote(s: &str) -> String {
    Value::String(s.to_string()).to_string()
}

fn float(x: f64) -> String {
    Value::Float(x).to_string()
}

/// The fully resolved config in the same format [`parse_config_str`] reads.
pub fn echo(cfg: &ExperimentConfig) -> String {
    let rule = match cfg.two_hop_rule {
        TwoHopRule::MostSimilar => "most_similar",
        TwoHopRule::LeastSimilar => "least_similar",
    };
    let mut lines = vec![
        format!("name = {}", quote(&cfg.name)),
        format!("protocol = {}", quote(cfg.protocol.name())),
        format!("K = {}", cfg.k),
        format!("layout = {}", quote(&cfg.layout.to_string())),
        format!("shift = {}", quote(cfg.shift.name())),
        format!("seed = {}", cfg.seed),
        format!("T = {}", cfg.rounds),
        format!("E = {}", cfg.epochs),
        format!("m = {}", cfg.m),
        format!("batch_size = {}", cfg.batch_size),
        format!("learning_rate = {}", float(cfg.learning_rate)),
        format!("tau = {}", float(cfg.tau)),
        format!("tau_max = {}", float(cfg.tau_max)),
        format!("train_n = {}", cfg.train_n),
        format!("val_n = {}", cfg.val_n),
        format!("test_n = {}", cfg.test_n),
        format!("n_classes = {}", cfg.n_classes),
        format!("dim = {}", cfg.dim),
        format!("hidden_dim = {}", cfg.hidden_dim),
        format!("class_separation = {}", float(cfg.class_separation)),
        format!("pens_selection_rounds = {}", cfg.pens_selection_rounds),
        format!("pens_top_fraction = {}", float(cfg.pens_top_fraction)),
        format!("two_hop = {}", cfg.two_hop),
        format!("two_hop_rule = {}", quote(rule)),
    ];
    if let Some(dir) = &cfg.output_dir {
        lines.push(format!("output_dir = {}", quote(&dir.to_string_lossy())));
    }
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

/// `base` with one sweepable scalar replaced, revalidated. The run name
/// gets a `param=value` suffix so reports keep sweep points apart.
pub fn with_param(base: &ExperimentConfig, param: &str, value: f64) -> Result<ExperimentConfig> {
    if !SWEEPABLE_KEYS.contains(&param) {
        return Err(Error::config(format!(
            "`{param}` is not sweepable (expected one of {})",
            SWEEPABLE_KEYS.join(", ")
        )));
    }
    let mut cfg = base.clone();
    let integral = !FLOAT_KEYS.contains(&param);
    let v = if integral {
        if value.fract() != 0.0 || value < 0.0 {
            return Err(Error::config(format!(
                "`{param}` needs a non-negative integer, got {value}"
            )));
        }
        Value::Integer(value as i64)
    } else {
        Value::Float(value)
    };
    apply_key(&mut cfg, param, &v).map_err(Error::config)?;
    cfg.name = format!("{} {param}={value}", base.name);
    cfg.validate()?;
    Ok(cfg)
}
