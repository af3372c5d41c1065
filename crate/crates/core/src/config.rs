//! Experiment configuration files.
//!
//! A flat, sectioned `key = value` format:
//!
//! ```text
//! # comment
//! [federation]
//! workers = 20
//! rounds = 5
//! [data]
//! source = synth
//! [defense]
//! name = fedavg
//! ```
//!
//! Every accepted key is listed in [`KEYS`]; anything else is an error that
//! names the offending line. Relative data paths resolve against the config
//! file's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::aggregation::Defense;
use crate::attacks::{AttackConfig, AttackKind, TriggerPosition, TriggerSpec};
use crate::data::Regime;
use crate::diagnostics::FeatureMode;
use crate::error::{FslError, Result};
use crate::sim::{DataSource, ExperimentConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Integer,
    Float,
    Bool,
    Text,
    IntList,
}

impl ValueKind {
    fn describe(self) -> &'static str {
        match self {
            ValueKind::Integer => "integer",
            ValueKind::Float => "number",
            ValueKind::Bool => "true/false",
            ValueKind::Text => "text",
            ValueKind::IntList => "comma-separated integers",
        }
    }
}

pub struct KeyDoc {
    pub section: &'static str,
    pub key: &'static str,
    pub kind: ValueKind,
    /// `None` marks a required key.
    pub default: Option<&'static str>,
    pub doc: &'static str,
}

const fn key(
    section: &'static str,
    key: &'static str,
    kind: ValueKind,
    default: Option<&'static str>,
    doc: &'static str,
) -> KeyDoc {
    KeyDoc {
        section,
        key,
        kind,
        default,
        doc,
    }
}

use ValueKind::*;

pub const KEYS: &[KeyDoc] = &[
    key("federation", "workers", Integer, None, "number of workers K"),
    key(
        "federation",
        "fraction",
        Float,
        Some("1.0"),
        "fraction C of workers selected per round, in (0, 1]",
    ),
    key("federation", "rounds", Integer, None, "training rounds T"),
    key(
        "federation",
        "local_epochs",
        Integer,
        Some("3"),
        "local epochs E per round",
    ),
    key("federation", "batch_size", Integer, Some("64"), "local batch size BS"),
    key("federation", "lr", Float, Some("0.01"), "SGD learning rate"),
    key(
        "federation",
        "momentum",
        Float,
        Some("0.9"),
        "SGD momentum, reset every round",
    ),
    key(
        "federation",
        "seed",
        Integer,
        Some("1"),
        "master seed for every random stream",
    ),
    key(
        "federation",
        "report_window",
        Integer,
        Some("10"),
        "summary averages the last this many rounds",
    ),
    key(
        "model",
        "hidden",
        IntList,
        Some("32"),
        "hidden layer widths; empty for softmax regression",
    ),
    key(
        "model",
        "conv_filters",
        Integer,
        Some("0"),
        "3x3 conv filters before the dense layers; 0 disables",
    ),
    key("data", "source", Text, None, "mnist or synth"),
    key(
        "data",
        "dir",
        Text,
        Some("data/mnist"),
        "directory with the four MNIST IDX files (raw or .gz)",
    ),
    key(
        "data",
        "train_limit",
        Integer,
        Some("none"),
        "subsample the training set to this many examples",
    ),
    key(
        "data",
        "test_limit",
        Integer,
        Some("none"),
        "subsample the test set to this many examples",
    ),
    key("data", "partition", Text, Some("iid"), "iid or dirichlet"),
    key(
        "data",
        "alpha",
        Float,
        Some("1.0"),
        "Dirichlet concentration for partition = dirichlet",
    ),
    key("data", "classes", Integer, Some("10"), "synth: number of classes"),
    key(
        "data",
        "per_class",
        Integer,
        Some("100"),
        "synth: training examples per class",
    ),
    key(
        "data",
        "test_per_class",
        Integer,
        Some("50"),
        "synth: test examples per class",
    ),
    key(
        "data",
        "dim",
        Integer,
        Some("64"),
        "synth: feature dimension (a perfect square allows triggers)",
    ),
    key(
        "data",
        "spread",
        Float,
        Some("0.15"),
        "synth: per-feature noise standard deviation",
    ),
    key("attack", "kind", Text, Some("none"), "none, label_flip or backdoor"),
    key("attack", "source", Integer, Some("0"), "source class"),
    key("attack", "target", Integer, Some("1"), "target class"),
    key(
        "attack",
        "attackers",
        Integer,
        Some("none"),
        "number of attackers drawn at random",
    ),
    key(
        "attack",
        "attacker_ids",
        IntList,
        Some("none"),
        "explicit attacker worker ids",
    ),
    key(
        "attack",
        "poison_fraction",
        Float,
        Some("0.5"),
        "backdoor: share of source-class examples stamped",
    ),
    key(
        "attack",
        "start_round",
        Integer,
        Some("0"),
        "first round with poisoned training",
    ),
    key(
        "attack",
        "allow_excess_attackers",
        Bool,
        Some("false"),
        "permit more than K/5 attackers",
    ),
    key(
        "attack.trigger",
        "height",
        Integer,
        Some("3"),
        "trigger height in pixels",
    ),
    key("attack.trigger", "width", Integer, Some("3"), "trigger width in pixels"),
    key(
        "attack.trigger",
        "position",
        Text,
        Some("bottom_right"),
        "bottom_right or \"row,col\" of the top-left corner",
    ),
    key(
        "attack.trigger",
        "value",
        Float,
        Some("1.0"),
        "pixel value written by the trigger",
    ),
    key(
        "defense",
        "name",
        Text,
        None,
        "fedavg, median, tmean, mkrum, fgold or fl_defender",
    ),
    key(
        "defense",
        "trim_beta",
        Float,
        Some("0.2"),
        "tmean: fraction trimmed from each end",
    ),
    key(
        "defense",
        "krum_f",
        Integer,
        Some("auto"),
        "mkrum: assumed attackers, default ceil(0.2 m)",
    ),
    key(
        "defense",
        "krum_select",
        Integer,
        Some("auto"),
        "mkrum: updates averaged, default m - f",
    ),
    key(
        "output",
        "dir",
        Text,
        Some("out"),
        "output directory (relative to the working directory)",
    ),
    key(
        "output",
        "record_wall_time",
        Bool,
        Some("false"),
        "write measured times into metrics.csv instead of 0",
    ),
    key(
        "output",
        "diagnostics",
        Text,
        Some("none"),
        "comma-separated feature modes to dump: all, last, lastpca, engineered",
    ),
    key(
        "output",
        "diagnostics_round",
        Integer,
        Some("0"),
        "round whose updates the diagnostics use",
    ),
];

const SECTIONS: [&str; 7] = [
    "federation",
    "model",
    "data",
    "attack",
    "attack.trigger",
    "defense",
    "output",
];

/// Settings that shape the files written, not the results.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub record_wall_time: bool,
    pub diagnostics: Vec<FeatureMode>,
    pub diagnostics_round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub output: OutputConfig,
}

struct Entry {
    value: String,
    line: usize,
}

struct Parsed<'a> {
    path: &'a Path,
    entries: BTreeMap<(String, String), Entry>,
    sections: BTreeSet<String>,
}

impl Parsed<'_> {
    fn err(&self, line: usize, message: String) -> FslError {
        FslError::ConfigSyntax {
            path: self.path.to_path_buf(),
            line,
            message,
        }
    }

    fn raw(&self, section: &str, key: &str) -> Result<Option<&Entry>> {
        let entry = self.entries.get(&(section.to_string(), key.to_string()));
        if entry.is_none()
            && KEYS
                .iter()
                .any(|k| k.section == section && k.key == key && k.default.is_none())
        {
            return Err(FslError::Config(format!(
                "{}: missing required key `{key}` in [{section}]",
                self.path.display()
            )));
        }
        Ok(entry)
    }

    fn typed<T>(
        &self,
        section: &str,
        key: &str,
        kind: ValueKind,
        conv: impl Fn(&str) -> Option<T>,
    ) -> Result<Option<T>> {
        match self.raw(section, key)? {
            None => Ok(None),
            Some(e) if e.value == "none" || e.value == "auto" => Ok(None),
            Some(e) => conv(&e.value).map(Some).ok_or_else(|| {
                self.err(
                    e.line,
                    format!("`{key}` expects {}, got {:?}", kind.describe(), e.value),
                )
            }),
        }
    }

    /// Type-check every present key so malformed lines are reported before
    /// anything that depends on other keys.
    fn check_types(&self) -> Result<()> {
        for (sec, key) in self.entries.keys() {
            let doc = KEYS
                .iter()
                .find(|d| d.section == sec && d.key == key)
                .expect("checked in tokenize");
            match doc.kind {
                Integer => self.u64(sec, key).map(drop)?,
                Float => self.float(sec, key).map(drop)?,
                Bool => self.bool(sec, key).map(drop)?,
                Text => (),
                IntList => self.int_list(sec, key).map(drop)?,
            }
        }
        Ok(())
    }

    fn int(&self, section: &str, key: &str) -> Result<Option<usize>> {
        self.typed(section, key, Integer, |v| v.parse().ok())
    }

    fn u64(&self, section: &str, key: &str) -> Result<Option<u64>> {
        self.typed(section, key, Integer, |v| v.parse().ok())
    }

    fn float(&self, section: &str, key: &str) -> Result<Option<f64>> {
        self.typed(section, key, Float, |v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
    }

    fn bool(&self, section: &str, key: &str) -> Result<Option<bool>> {
        self.typed(section, key, Bool, |v| v.parse().ok())
    }

    fn text(&self, section: &str, key: &str) -> Result<Option<String>> {
        self.typed(section, key, Text, |v| Some(v.to_string()))
    }

    fn int_list(&self, section: &str, key: &str) -> Result<Option<Vec<usize>>> {
        self.typed(section, key, IntList, |v| {
            if v.trim().is_empty() {
                return Some(Vec::new());
            }
            v.split(',').map(|p| p.trim().parse().ok()).collect()
        })
    }

    /// Turn a semantic error on a present key into one naming its line.
    fn at(&self, section: &str, key: &str, message: String) -> FslError {
        match self.entries.get(&(section.to_string(), key.to_string())) {
            Some(e) => self.err(e.line, message),
            None => FslError::Config(message),
        }
    }
}

fn strip_value(raw: &str) -> String {
    let v = raw.split('#').next().unwrap_or("").trim();
    let v = v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v);
    v.to_string()
}

fn tokenize<'a>(path: &'a Path, text: &str) -> Result<Parsed<'a>> {
    let mut parsed = Parsed {
        path,
        entries: BTreeMap::new(),
        sections: BTreeSet::new(),
    };
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(name) = trimmed.strip_prefix('[') {
            let name = name
                .split('#')
                .next()
                .unwrap_or("")
                .trim()
                .strip_suffix(']')
                .ok_or_else(|| parsed.err(line, format!("malformed section header {trimmed:?}")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(parsed.err(line, format!("unknown section [{name}]")));
            }
            parsed.sections.insert(name.to_string());
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = trimmed
            .split_once('=')
            .ok_or_else(|| parsed.err(line, format!("expected `key = value`, got {trimmed:?}")))?;
        let k = k.trim();
        let sec = section
            .clone()
            .ok_or_else(|| parsed.err(line, format!("key `{k}` outside any section")))?;
        if !KEYS.iter().any(|d| d.section == sec && d.key == k) {
            return Err(parsed.err(line, format!("unknown key `{k}` in [{sec}]")));
        }
        let id = (sec.clone(), k.to_string());
        if let Some(prev) = parsed.entries.get(&id) {
            return Err(parsed.err(
                line,
                format!("duplicate key `{k}` in [{sec}] (lines {} and {line})", prev.line),
            ));
        }
        parsed.entries.insert(
            id,
            Entry {
                value: strip_value(v),
                line,
            },
        );
    }
    Ok(parsed)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Parse config text. `path` is used for messages and to resolve relative
/// data directories.
pub fn parse_config_str(text: &str, path: &Path) -> Result<RunConfig> {
    let p = tokenize(path, text)?;
    p.check_types()?;
    let base = path.parent().unwrap_or(Path::new("."));
    let d = ExperimentConfig::default();

    let fraction = p.float("federation", "fraction")?.unwrap_or(d.fraction);
    let regime = match p.text("data", "partition")?.as_deref().unwrap_or("iid") {
        "iid" => Regime::Iid,
        "dirichlet" => Regime::Dirichlet {
            alpha: p.float("data", "alpha")?.unwrap_or(1.0),
        },
        other => {
            return Err(p.at(
                "data",
                "partition",
                format!("partition must be iid or dirichlet, got {other:?}"),
            ))
        }
    };
    let source = p.text("data", "source")?.expect("required");
    let data = match source.as_str() {
        "mnist" => DataSource::Mnist {
            dir: resolve(base, &p.text("data", "dir")?.unwrap_or_else(|| "data/mnist".into())),
            train_limit: p.int("data", "train_limit")?,
            test_limit: p.int("data", "test_limit")?,
        },
        "synth" => DataSource::Synth {
            classes: p.int("data", "classes")?.unwrap_or(10),
            per_class: p.int("data", "per_class")?.unwrap_or(100),
            test_per_class: p.int("data", "test_per_class")?.unwrap_or(50),
            dim: p.int("data", "dim")?.unwrap_or(64),
            spread: p.float("data", "spread")?.unwrap_or(0.15),
        },
        other => {
            return Err(p.at(
                "data",
                "source",
                format!("source must be mnist or synth, got {other:?}"),
            ))
        }
    };

    let defense_name = p.text("defense", "name")?.expect("required");
    let defense = match Defense::from_name(&defense_name).map_err(|e| p.at("defense", "name", e.to_string()))? {
        Defense::TrimmedMean { .. } => Defense::TrimmedMean {
            beta: p.float("defense", "trim_beta")?.unwrap_or(0.2),
        },
        Defense::MultiKrum { .. } => Defense::MultiKrum {
            f: p.int("defense", "krum_f")?,
            n_select: p.int("defense", "krum_select")?,
        },
        other => other,
    };

    let kind = match p.text("attack", "kind")?.as_deref().unwrap_or("none") {
        "none" => AttackKind::None,
        "label_flip" | "lf" => AttackKind::LabelFlip,
        "backdoor" | "ba" => AttackKind::Backdoor,
        other => {
            return Err(p.at(
                "attack",
                "kind",
                format!("attack kind must be none, label_flip or backdoor, got {other:?}"),
            ))
        }
    };
    let trigger = if p.sections.contains("attack.trigger") {
        let position = match p
            .text("attack.trigger", "position")?
            .as_deref()
            .unwrap_or("bottom_right")
        {
            "bottom_right" => TriggerPosition::BottomRight,
            other => {
                let parts: Option<Vec<usize>> = other.split(',').map(|s| s.trim().parse().ok()).collect();
                match parts.as_deref() {
                    Some(&[row, col]) => TriggerPosition::Custom { row, col },
                    _ => {
                        return Err(p.at(
                            "attack.trigger",
                            "position",
                            format!("position must be bottom_right or \"row,col\", got {other:?}"),
                        ))
                    }
                }
            }
        };
        let t = TriggerSpec::default();
        Some(TriggerSpec {
            height: p.int("attack.trigger", "height")?.unwrap_or(t.height),
            width: p.int("attack.trigger", "width")?.unwrap_or(t.width),
            position,
            value: p.float("attack.trigger", "value")?.unwrap_or(t.value),
        })
    } else {
        None
    };
    if kind == AttackKind::Backdoor && trigger.is_none() {
        return Err(p.at(
            "attack",
            "kind",
            "trigger required for a backdoor attack: add an [attack.trigger] section".into(),
        ));
    }
    let attack = AttackConfig {
        kind,
        source: p.int("attack", "source")?.unwrap_or(0),
        target: p.int("attack", "target")?.unwrap_or(1),
        trigger,
        poison_fraction: p.float("attack", "poison_fraction")?.unwrap_or(0.5),
        attackers: p
            .int_list("attack", "attacker_ids")?
            .unwrap_or_default()
            .into_iter()
            .collect(),
        allow_excess_attackers: p.bool("attack", "allow_excess_attackers")?.unwrap_or(false),
        start_round: p.int("attack", "start_round")?.unwrap_or(0),
    };

    let conv = p.int("model", "conv_filters")?.unwrap_or(0);
    let experiment = ExperimentConfig {
        workers: p.int("federation", "workers")?.expect("required"),
        fraction,
        batch_size: p.int("federation", "batch_size")?.unwrap_or(d.batch_size),
        local_epochs: p.int("federation", "local_epochs")?.unwrap_or(d.local_epochs),
        lr: p.float("federation", "lr")?.unwrap_or(d.lr),
        momentum: p.float("federation", "momentum")?.unwrap_or(d.momentum),
        rounds: p.int("federation", "rounds")?.expect("required"),
        seed: p.u64("federation", "seed")?.unwrap_or(d.seed),
        regime,
        hidden: p.int_list("model", "hidden")?.unwrap_or(d.hidden),
        conv_filters: (conv > 0).then_some(conv),
        data,
        defense,
        attack,
        attacker_count: p.int("attack", "attackers")?,
        report_window: p.int("federation", "report_window")?.unwrap_or(d.report_window),
    };
    experiment.validate()?;

    let diagnostics = match p.text("output", "diagnostics")? {
        None => Vec::new(),
        Some(list) => list
            .split(',')
            .map(|m| m.parse::<FeatureMode>())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| p.at("output", "diagnostics", e.to_string()))?,
    };
    let output = OutputConfig {
        dir: PathBuf::from(p.text("output", "dir")?.unwrap_or_else(|| "out".into())),
        record_wall_time: p.bool("output", "record_wall_time")?.unwrap_or(false),
        diagnostics,
        diagnostics_round: p.int("output", "diagnostics_round")?.unwrap_or(0),
    };
    if !output.diagnostics.is_empty() && output.diagnostics_round >= experiment.rounds {
        return Err(p.at(
            "output",
            "diagnostics_round",
            format!(
                "diagnostics round {} ≥ T = {}",
                output.diagnostics_round, experiment.rounds
            ),
        ));
    }
    Ok(RunConfig { experiment, output })
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| FslError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text, path)
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Every setting that affects results, one `section.key = value` per line in
/// a fixed order. Hashing this text identifies a configuration independently
/// of comments, ordering and defaulted keys.
pub fn canonical_text(c: &ExperimentConfig) -> String {
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    put("federation.workers", c.workers.to_string());
    put("federation.fraction", format!("{:?}", c.fraction));
    put("federation.rounds", c.rounds.to_string());
    put("federation.local_epochs", c.local_epochs.to_string());
    put("federation.batch_size", c.batch_size.to_string());
    put("federation.lr", format!("{:?}", c.lr));
    put("federation.momentum", format!("{:?}", c.momentum));
    put("federation.seed", c.seed.to_string());
    put("federation.report_window", c.report_window.to_string());
    put("model.hidden", list(&c.hidden));
    put("model.conv_filters", c.conv_filters.unwrap_or(0).to_string());
    match &c.data {
        DataSource::Mnist {
            dir,
            train_limit,
            test_limit,
        } => {
            put("data.source", "mnist".into());
            put("data.dir", dir.display().to_string());
            put("data.train_limit", format!("{train_limit:?}"));
            put("data.test_limit", format!("{test_limit:?}"));
        }
        DataSource::Synth {
            classes,
            per_class,
            test_per_class,
            dim,
            spread,
        } => {
            put("data.source", "synth".into());
            put(
                "data.synth",
                format!("{classes},{per_class},{test_per_class},{dim},{spread:?}"),
            );
        }
    }
    put("data.partition", format!("{:?}", c.regime));
    put("defense", format!("{:?}", c.defense));
    put("attack", format!("{:?}", c.attack));
    put("attack.attackers", format!("{:?}", c.attacker_count));
    s
}

/// Markdown reference of every key, its type and default.
pub fn reference_markdown() -> String {
    let mut s = String::from("# Configuration reference\n\nGenerated from the parser's key table.\n");
    for section in SECTIONS {
        let _ = write!(
            s,
            "\n## [{section}]\n\n| key | type | default | meaning |\n|---|---|---|---|\n"
        );
        for k in KEYS.iter().filter(|k| k.section == section) {
            let _ = writeln!(
                s,
                "| `{}` | {} | {} | {} |",
                k.key,
                k.kind.describe(),
                k.default.map_or("**required**".to_string(), |d| format!("`{d}`")),
                k.doc
            );
        }
    }
    s.push_str("\nA backdoor attack requires an `[attack.trigger]` section; its presence enables the trigger.\n");
    s
}
