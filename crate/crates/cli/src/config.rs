//! Config file loading: JSON with defaults, `--override` edits, and errors
//! that point at the offending line.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use dilemma_forge::harness::{HarnessError, DEFAULT_CONVERGENCE_THRESHOLD, DEFAULT_CONVERGENCE_WINDOW};
use dilemma_forge::{AdmoSettings, AgentConfig, ExperimentConfig, GameKind, GameSpec, ManipulationMode};
use serde::Deserialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// A problem with user input; maps to exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    game: RawGame,
    #[serde(default)]
    agent_defaults: RawAgent,
    agents: Option<Vec<RawAgent>>,
    episodes: Option<usize>,
    batch_size: Option<usize>,
    cost_weight: Option<f64>,
    seeds: Option<Vec<u64>>,
    smoothing_window: Option<usize>,
    convergence_window: Option<usize>,
    convergence_threshold: Option<f64>,
    checkpoint_every: Option<usize>,
    allow_matrix_bypass: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGame {
    kind: GameKind,
    n_agents: usize,
    er_threshold: Option<usize>,
    horizon: Option<usize>,
    discount: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAgent {
    mode: Option<String>,
    /// Fake-incentive constant.
    c: Option<f64>,
    admo: Option<AdmoSettings>,
    policy_hidden: Option<Vec<usize>>,
    incentive_hidden: Option<Vec<usize>>,
    r_max: Option<f64>,
    lr_policy: Option<f64>,
    lr_incentive: Option<f64>,
    incentive_bias_init: Option<f64>,
    exploration: Option<f64>,
}

impl RawAgent {
    fn merged(&self, defaults: &RawAgent) -> RawAgent {
        RawAgent {
            mode: self.mode.clone().or_else(|| defaults.mode.clone()),
            c: self.c.or(defaults.c),
            admo: self.admo.clone().or_else(|| defaults.admo.clone()),
            policy_hidden: self.policy_hidden.clone().or_else(|| defaults.policy_hidden.clone()),
            incentive_hidden: self
                .incentive_hidden
                .clone()
                .or_else(|| defaults.incentive_hidden.clone()),
            r_max: self.r_max.or(defaults.r_max),
            lr_policy: self.lr_policy.or(defaults.lr_policy),
            lr_incentive: self.lr_incentive.or(defaults.lr_incentive),
            incentive_bias_init: self.incentive_bias_init.or(defaults.incentive_bias_init),
            exploration: self.exploration.or(defaults.exploration),
        }
    }

    fn resolve(&self, field: &str) -> Result<AgentConfig, (String, String)> {
        let base = AgentConfig::default();
        let mode_name = self.mode.as_deref().unwrap_or("honest");
        let err = |name: &str, reason: String| (format!("{field}.{name}"), reason);
        if self.c.is_some() && mode_name != "fake_incentive" {
            return Err(err(
                "c",
                format!("only fake_incentive takes c, but the mode is {mode_name}"),
            ));
        }
        if self.admo.is_some() && mode_name != "admo" {
            return Err(err(
                "admo",
                format!("only admo takes settings, but the mode is {mode_name}"),
            ));
        }
        let mode = match mode_name {
            "honest" => ManipulationMode::Honest,
            "partial_comm" => ManipulationMode::PartialComm,
            "bypass" => ManipulationMode::Bypass,
            "reverse" => ManipulationMode::Reverse,
            "fake_incentive" => ManipulationMode::FakeIncentive {
                c_adv: self.c.ok_or_else(|| err("c", "fake_incentive requires the constant c".into()))?,
            },
            "admo" => ManipulationMode::Admo(self.admo.clone().unwrap_or_default()),
            other => {
                return Err(err(
                    "mode",
                    format!(
                        "unknown mode {other:?}; expected one of honest, partial_comm, fake_incentive, bypass, reverse, admo"
                    ),
                ))
            }
        };
        Ok(AgentConfig {
            policy_hidden: self.policy_hidden.clone().unwrap_or(base.policy_hidden),
            incentive_hidden: self.incentive_hidden.clone().unwrap_or(base.incentive_hidden),
            r_max: self.r_max.unwrap_or(base.r_max),
            lr_policy: self.lr_policy.unwrap_or(base.lr_policy),
            lr_incentive: self.lr_incentive.unwrap_or(base.lr_incentive),
            incentive_bias_init: self.incentive_bias_init.unwrap_or(base.incentive_bias_init),
            exploration: self.exploration.unwrap_or(base.exploration),
            mode,
        })
    }
}

/// A fully resolved experiment config plus where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub source: String,
}

impl LoadedConfig {
    /// SHA-256 of the canonical JSON of the resolved config. Formatting,
    /// key order and spelled-out defaults do not change it.
    pub fn hash(&self) -> String {
        config_hash(&self.config)
    }
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    // serde_json's default map is ordered by key, so this is canonical
    let canonical =
        serde_json::to_string(&serde_json::to_value(config).expect("config serializes")).expect("value serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load(path: &Path, overrides: &[String]) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    let source = path.display().to_string();
    let config = parse(&text, &source, overrides)?;
    Ok(LoadedConfig { config, source })
}

/// Parses, applies overrides, fills defaults and validates.
pub fn parse(text: &str, source: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut value: Value =
        serde_json::from_str(text).map_err(|e| ConfigError(format!("{source}:{}:{}: {e}", e.line(), e.column())))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let lines = key_lines(text);
    let overridden: Vec<(String, &String)> = overrides
        .iter()
        .filter_map(|o| {
            let path = o.split_once('=')?.0;
            Some((canonical_path(&parse_path(path.trim())?), o))
        })
        .collect();
    let at = |field: &str| {
        if let Some((_, o)) = overridden
            .iter()
            .rev()
            .find(|(p, _)| field == p || field.starts_with(&format!("{p}.")) || field.starts_with(&format!("{p}[")))
        {
            return format!("--override {o}: {field}");
        }
        match locate(&lines, field) {
            Some(line) => format!("{source}:{line}: {field}"),
            None => format!("{source}: {field}"),
        }
    };
    let raw: RawConfig = if overrides.is_empty() {
        // reparse the text so serde reports line and column
        serde_json::from_str(text).map_err(|e| ConfigError(format!("{source}:{}:{}: {e}", e.line(), e.column())))?
    } else {
        serde_json::from_value(value).map_err(|e| ConfigError(format!("{source} (after overrides): {e}")))?
    };

    let mut game = match raw.game.kind {
        GameKind::EscapeRoom => {
            let m = raw
                .game
                .er_threshold
                .ok_or_else(|| ConfigError(format!("{}: the escape room requires er_threshold", at("game"))))?;
            GameSpec::escape_room(raw.game.n_agents, m)
        }
        GameKind::Ipd => GameSpec::ipd(raw.game.n_agents),
        GameKind::StagHunt => GameSpec::stag_hunt(raw.game.n_agents),
    };
    if raw.game.kind != GameKind::EscapeRoom && raw.game.er_threshold.is_some() {
        return Err(ConfigError(format!(
            "{}: er_threshold only applies to the escape room",
            at("game.er_threshold")
        )));
    }
    if let Some(h) = raw.game.horizon {
        game = game.with_horizon(h);
    }
    if let Some(d) = raw.game.discount {
        game = game.with_discount(d);
    }

    let mut config = ExperimentConfig::new(game);
    let entries = raw
        .agents
        .unwrap_or_else(|| vec![RawAgent::default(); config.game.n_agents]);
    config.agents = entries
        .iter()
        .enumerate()
        .map(|(j, a)| a.merged(&raw.agent_defaults).resolve(&format!("agents[{j}]")))
        .collect::<Result<_, _>>()
        .map_err(|(field, reason)| ConfigError(format!("{}: {reason}", at(&field))))?;
    if let Some(v) = raw.episodes {
        config.episodes = v;
    }
    if let Some(v) = raw.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = raw.cost_weight {
        config.cost_weight = v;
    }
    if let Some(v) = raw.seeds {
        config.seeds = v;
    }
    if let Some(v) = raw.smoothing_window {
        config.smoothing_window = v;
    }
    config.convergence_window = raw.convergence_window.unwrap_or(DEFAULT_CONVERGENCE_WINDOW);
    config.convergence_threshold = raw.convergence_threshold.unwrap_or(DEFAULT_CONVERGENCE_THRESHOLD);
    if let Some(v) = raw.checkpoint_every {
        config.checkpoint_every = v;
    }
    if let Some(v) = raw.allow_matrix_bypass {
        config.allow_matrix_bypass = v;
    }

    config.validate().map_err(|e| match e {
        HarnessError::Config { field, reason } => ConfigError(format!("{}: {reason}", at(&field))),
        other => ConfigError(format!("{source}: {other}")),
    })?;
    Ok(config)
}

#[derive(Debug, Clone, PartialEq)]
enum PathSeg {
    Key(String),
    Index(usize),
}

fn parse_path(path: &str) -> Option<Vec<PathSeg>> {
    let mut segs = Vec::new();
    for part in path.split('.') {
        let (name, mut rest) = match part.find('[') {
            Some(i) => (&part[..i], &part[i..]),
            None => (part, ""),
        };
        if !name.is_empty() {
            match name.parse::<usize>() {
                Ok(i) => segs.push(PathSeg::Index(i)),
                Err(_) => segs.push(PathSeg::Key(name.to_string())),
            }
        }
        while !rest.is_empty() {
            let close = rest.find(']')?;
            segs.push(PathSeg::Index(rest[1..close].parse().ok()?));
            rest = &rest[close + 1..];
        }
    }
    if segs.is_empty() {
        None
    } else {
        Some(segs)
    }
}

/// `agents[1].mode` form of a parsed path, as used in error fields.
fn canonical_path(segs: &[PathSeg]) -> String {
    let mut out = String::new();
    for seg in segs {
        match seg {
            PathSeg::Key(k) if out.is_empty() => out.push_str(k),
            PathSeg::Key(k) => {
                out.push('.');
                out.push_str(k);
            }
            PathSeg::Index(i) => out.push_str(&format!("[{i}]")),
        }
    }
    out
}

/// Applies one `path=value` edit. The value is read as JSON when it parses
/// and as a bare string otherwise, so `mode=reverse` works unquoted.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override {spec:?} is not of the form key=value")))?;
    let segs = parse_path(path.trim()).ok_or_else(|| ConfigError(format!("override {spec:?} has a malformed key")))?;
    let new_value = serde_json::from_str(raw_value.trim()).unwrap_or_else(|_| Value::String(raw_value.trim().into()));

    let mut node = root;
    for (k, seg) in segs.iter().enumerate() {
        let last = k + 1 == segs.len();
        node = match seg {
            PathSeg::Key(key) => {
                if node.is_null() {
                    *node = Value::Object(Default::default());
                }
                let map = node
                    .as_object_mut()
                    .ok_or_else(|| ConfigError(format!("override {spec:?}: {key} is not inside an object")))?;
                map.entry(key.clone()).or_insert(Value::Null)
            }
            PathSeg::Index(i) => {
                let items = node
                    .as_array_mut()
                    .ok_or_else(|| ConfigError(format!("override {spec:?}: index {i} applied to a non-array")))?;
                let len = items.len();
                items
                    .get_mut(*i)
                    .ok_or_else(|| ConfigError(format!("override {spec:?}: index {i} out of range (length {len})")))?
            }
        };
        if last {
            *node = new_value;
            return Ok(());
        }
    }
    unreachable!("paths are non-empty")
}

/// Line of every key and array element in a JSON document, by dotted path
/// (`agents[1].mode`).
fn key_lines(text: &str) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    let mut scanner = Scanner {
        bytes: text.as_bytes(),
        pos: 0,
        line: 1,
    };
    scanner.value("", &mut out);
    out
}

/// Line of `field`, or of its nearest ancestor that appears in the text.
fn locate(lines: &HashMap<String, usize>, field: &str) -> Option<usize> {
    let mut path = field.to_string();
    loop {
        if let Some(l) = lines.get(&path) {
            return Some(*l);
        }
        let cut = path.rfind(['.', '['])?;
        path.truncate(cut);
    }
}

struct Scanner<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl Scanner<'_> {
    fn skip_ws(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            match b {
                b'\n' => self.line += 1,
                b' ' | b'\t' | b'\r' => {}
                _ => return,
            }
            self.pos += 1;
        }
    }

    fn string(&mut self) -> String {
        let start = self.pos + 1;
        self.pos += 1;
        while let Some(&b) = self.bytes.get(self.pos) {
            match b {
                b'\\' => self.pos += 2,
                b'"' => {
                    self.pos += 1;
                    return String::from_utf8_lossy(&self.bytes[start..self.pos - 1]).into_owned();
                }
                _ => self.pos += 1,
            }
        }
        String::new()
    }

    fn value(&mut self, path: &str, out: &mut HashMap<String, usize>) {
        self.skip_ws();
        match self.bytes.get(self.pos) {
            Some(b'{') => {
                self.pos += 1;
                loop {
                    self.skip_ws();
                    match self.bytes.get(self.pos) {
                        Some(b'"') => {
                            let line = self.line;
                            let key = self.string();
                            let child = if path.is_empty() { key } else { format!("{path}.{key}") };
                            out.entry(child.clone()).or_insert(line);
                            self.skip_ws();
                            self.pos += 1; // ':'
                            self.value(&child, out);
                        }
                        Some(b',') => self.pos += 1,
                        Some(b'}') => {
                            self.pos += 1;
                            return;
                        }
                        _ => return,
                    }
                }
            }
            Some(b'[') => {
                self.pos += 1;
                let mut index = 0;
                loop {
                    self.skip_ws();
                    match self.bytes.get(self.pos) {
                        Some(b',') => self.pos += 1,
                        Some(b']') => {
                            self.pos += 1;
                            return;
                        }
                        None => return,
                        _ => {
                            let child = format!("{path}[{index}]");
                            out.entry(child.clone()).or_insert(self.line);
                            self.value(&child, out);
                            index += 1;
                        }
                    }
                }
            }
            Some(b'"') => {
                self.string();
            }
            Some(_) => {
                while let Some(&b) = self.bytes.get(self.pos) {
                    if matches!(b, b',' | b'}' | b']') || b.is_ascii_whitespace() {
                        break;
                    }
                    self.pos += 1;
                }
            }
            None => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
  "game": {"kind": "escape_room", "n_agents": 2, "er_threshold": 1},
  "agents": [
    {"mode": "honest"},
    {"mode": "fake_incentive", "c": 50}
  ],
  "episodes": 64,
  "seeds": [0, 1, 2]
}"#;

    #[test]
    fn parses_modes_and_defaults() {
        let c = parse(BASE, "base.json", &[]).unwrap();
        assert_eq!(c.agents[1].mode, ManipulationMode::FakeIncentive { c_adv: 50.0 });
        assert_eq!(c.episodes, 64);
        assert_eq!(c.seeds, vec![0, 1, 2]);
        assert_eq!(c.batch_size, ExperimentConfig::new(c.game.clone()).batch_size);
    }

    #[test]
    fn threshold_error_names_field_and_line() {
        let text = BASE.replace("\"er_threshold\": 1", "\"er_threshold\": 2");
        let err = parse(&text, "bad.json", &[]).unwrap_err().0;
        assert!(err.starts_with("bad.json:2: game.er_threshold"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected_with_position() {
        let text = BASE.replace("\"episodes\"", "\"epsiodes\"");
        let err = parse(&text, "typo.json", &[]).unwrap_err().0;
        assert!(err.contains("typo.json:7:") && err.contains("epsiodes"), "{err}");
    }

    #[test]
    fn agent_errors_point_at_the_agent() {
        let text = BASE.replace("\"c\": 50", "\"c\": 1");
        let err = parse(&text, "c.json", &[]).unwrap_err().0;
        assert!(err.starts_with("c.json:5: agents[1].mode"), "{err}");
        let text = BASE.replace("\"mode\": \"honest\"", "\"mode\": \"sneaky\"");
        let err = parse(&text, "m.json", &[]).unwrap_err().0;
        assert!(
            err.starts_with("m.json:4: agents[0].mode") && err.contains("sneaky"),
            "{err}"
        );
    }

    #[test]
    fn overrides_edit_nested_values() {
        let c = parse(
            BASE,
            "base.json",
            &[
                "seeds=[1,2]".into(),
                "agents[0].mode=reverse".into(),
                "game.horizon=3".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.seeds, vec![1, 2]);
        assert_eq!(c.agents[0].mode, ManipulationMode::Reverse);
        assert_eq!(c.game.horizon, 3);
        let c = parse(BASE, "base.json", &["agents.1.c=60".into()]).unwrap();
        assert_eq!(c.agents[1].mode, ManipulationMode::FakeIncentive { c_adv: 60.0 });
        assert!(parse(BASE, "base.json", &["agents[5].mode=honest".into()]).is_err());
        assert!(parse(BASE, "base.json", &["seeds".into()]).is_err());
        let err = parse(BASE, "base.json", &["game.er_threshold=2".into()]).unwrap_err().0;
        assert!(
            err.starts_with("--override game.er_threshold=2: game.er_threshold"),
            "{err}"
        );
    }

    #[test]
    fn hash_ignores_formatting_but_not_values() {
        let a = parse(BASE, "a", &[]).unwrap();
        let compact: String = BASE.split_whitespace().collect::<Vec<_>>().join("");
        let b = parse(
            &compact.replace("\"seeds\":[0,1,2]", "\"seeds\":[0,1,2],\"batch_size\":16"),
            "b",
            &[],
        )
        .unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c = parse(BASE, "c", &["cost_weight=0.02".into()]).unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
    }

    #[test]
    fn agent_defaults_apply_to_every_agent() {
        let text = r#"{"game": {"kind": "stag_hunt", "n_agents": 3},
            "agent_defaults": {"lr_policy": 0.05, "policy_hidden": [8]},
            "agents": [{"mode": "admo", "admo": {"s": -1}}, {}, {"lr_policy": 0.1}]}"#;
        let c = parse(text, "d", &[]).unwrap();
        assert_eq!(c.agents[0].lr_policy, 0.05);
        assert_eq!(c.agents[1].policy_hidden, vec![8]);
        assert_eq!(c.agents[2].lr_policy, 0.1);
        match &c.agents[0].mode {
            ManipulationMode::Admo(s) => assert_eq!(s.s, -1.0),
            m => panic!("unexpected mode {m:?}"),
        }
    }
}
