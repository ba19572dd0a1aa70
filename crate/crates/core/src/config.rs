//! Run configuration: every tunable in one tree, read from plain-text
//! `key = value` files.
//!
//! Keys are dotted paths into [`RunConfig`] (`train.rerank.w_l_final`).
//! `#` starts a comment. `include = other.conf` splices another file at that
//! point, resolved relative to the including file; later assignments win.
//! Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::agents::{ListenerConfig, PretrainConfig};
use crate::distractors::SimilarityMetric;
use crate::evalkit::FluencyConfig;
use crate::tom::wl_preset;
use crate::trainer::TrainConfig;
use crate::world::{Split, WorldConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexConfig {
    pub metric: SimilarityMetric,
    /// Neighbors kept per item.
    pub k: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            metric: SimilarityMetric::Visual,
            k: 50,
        }
    }
}

/// Settings for the standalone `evaluate` pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub episodes: usize,
    /// Use ground-truth captions instead of the speaker.
    pub gold: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            episodes: 1000,
            gold: false,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub listener: ListenerConfig,
    pub pretrain: PretrainConfig,
    pub index: IndexConfig,
    pub fluency: FluencyConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.schema.validate()?;
        if self.world.n_items < 10 || self.world.d_img == 0 || !(self.world.noise_std >= 0.0) {
            return Err(Error::Config("world needs n_items >= 10, d_img >= 1, noise_std >= 0".into()));
        }
        let l = &self.listener;
        if l.d_w == 0 || l.hidden == 0 || l.joint == 0 {
            return Err(Error::Config("listener dimensions must be positive".into()));
        }
        let p = &self.pretrain;
        if p.n_candidates < 2 || p.sets_per_step == 0 || p.eval_interval == 0 || p.eval_trials == 0 || !(p.lr > 0.0) {
            return Err(Error::Config("invalid pretraining settings".into()));
        }
        self.index.metric.validate()?;
        if self.index.k == 0 {
            return Err(Error::Config("index.k must be >= 1".into()));
        }
        let f = &self.fluency;
        if f.order < 2 || !(f.alpha_u > 0.0) || !(f.alpha_m > 0.0) {
            return Err(Error::Config("fluency needs order >= 2 and positive smoothing".into()));
        }
        self.train.validate()?;
        if self.train.speaker.d_w == 0 || self.train.speaker.hidden == 0 {
            return Err(Error::Config("speaker dimensions must be positive".into()));
        }
        if self.train.game.n_candidates > self.index.k + 1 {
            return Err(Error::Config(format!(
                "n_candidates {} needs index.k >= {}",
                self.train.game.n_candidates,
                self.train.game.n_candidates - 1
            )));
        }
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be >= 1".into()));
        }
        Ok(())
    }

    /// Defaults overridden by `path` (and anything it includes).
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, None)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        read_assignments(path, &mut Vec::new(), &mut out)?;
        self.apply_all(&out)
    }

    /// Applies `text`; includes resolve against `base` (or the working directory).
    pub fn apply_text(&mut self, text: &str, base: Option<&Path>) -> Result<()> {
        let mut out = Vec::new();
        let origin = base.map(|b| b.join("<inline>")).unwrap_or_else(|| PathBuf::from("<inline>"));
        parse_lines(text, &origin, &mut Vec::new(), &mut out)?;
        self.apply_all(&out)
    }

    /// Applies one `key = value` override, for command-line `--set`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.apply_all(&[Assignment {
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            origin: "--set".into(),
        }])
    }

    fn apply_all(&mut self, assignments: &[Assignment]) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let leaves = flatten(&tree);
        for a in assignments {
            let current = leaves
                .get(&a.key)
                .ok_or_else(|| Error::Config(format!("{}: unknown key `{}`", a.origin, a.key)))?;
            let value = convert(&a.key, &a.value, current).map_err(|e| Error::Config(format!("{}: {e}", a.origin)))?;
            let pointer = format!("/{}", a.key.replace('.', "/"));
            *tree.pointer_mut(&pointer).expect("leaf exists") = value;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    /// Every key with its resolved value, sorted; parses back to `self`.
    pub fn to_text(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut s = String::new();
        for (k, v) in flatten(&tree) {
            s.push_str(&k);
            s.push_str(" = ");
            s.push_str(&render(&v));
            s.push('\n');
        }
        s
    }
}

struct Assignment {
    key: String,
    value: String,
    origin: String,
}

fn read_assignments(path: &Path, stack: &mut Vec<PathBuf>, out: &mut Vec<Assignment>) -> Result<()> {
    let canon = fs::canonicalize(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if stack.contains(&canon) {
        return Err(Error::Config(format!("include cycle through {}", path.display())));
    }
    let text = fs::read_to_string(&canon)?;
    stack.push(canon.clone());
    parse_lines(&text, &canon, stack, out)?;
    stack.pop();
    Ok(())
}

fn parse_lines(text: &str, origin: &Path, stack: &mut Vec<PathBuf>, out: &mut Vec<Assignment>) -> Result<()> {
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let at = format!("{}:{}", origin.display(), n + 1);
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{at}: expected `key = value`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key == "include" {
            let dir = origin.parent().unwrap_or(Path::new("."));
            read_assignments(&dir.join(value), stack, out)?;
            continue;
        }
        out.push(Assignment {
            key: key.to_string(),
            value: value.to_string(),
            origin: at,
        });
    }
    Ok(())
}

fn flatten(v: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            leaf => {
                out.insert(prefix.to_string(), leaf.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", v, &mut out);
    out
}

/// Parses `raw` to the JSON type of the current value at `key`.
fn convert(key: &str, raw: &str, current: &Value) -> std::result::Result<Value, String> {
    let bad = || format!("bad value `{raw}` for `{key}`");
    if key.ends_with("w_l_final") {
        if let Ok(w) = wl_preset(raw) {
            return Ok(Value::Number(Number::from_f64(w).ok_or_else(bad)?));
        }
    }
    let number = |raw: &str| -> std::result::Result<Value, String> {
        if let Ok(u) = raw.parse::<u64>() {
            return Ok(Value::Number(u.into()));
        }
        let f: f64 = raw.parse().map_err(|_| bad())?;
        Number::from_f64(f).map(Value::Number).ok_or_else(bad)
    };
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::Number(raw.parse::<u64>().map_err(|_| bad())?.into()),
        Value::Number(_) => number(raw)?,
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(_) => Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| Value::String(s.to_string()))
                .collect(),
        ),
        Value::Null => match raw {
            "none" | "null" => Value::Null,
            _ => number(raw)?,
        },
        Value::Object(_) => return Err(bad()),
    })
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(xs) => xs.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Resolved config as a JSON object for manifests.
pub fn to_json(cfg: &RunConfig) -> Map<String, Value> {
    match serde_json::to_value(cfg).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("config is a struct"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distractors::Difficulty;
    use crate::tom::RerankMode;

    #[test]
    fn overrides_and_presets() {
        let cfg = RunConfig::parse(
            "# grid cell\ntrain.rerank.mode = rsa\ntrain.rerank.w_l_final = high\ntrain.game.difficulty = hard\n\
             train.ppo.max_grad_norm = 0.5\nindex.metric = hybrid:0.3:onehot\nworld.schema.sizes = tiny, huge\n",
        )
        .unwrap();
        assert_eq!(cfg.train.rerank.mode, RerankMode::Rsa);
        assert_eq!(cfg.train.rerank.w_l_final, 1000.0);
        assert_eq!(cfg.train.game.difficulty, Difficulty::Hard);
        assert_eq!(cfg.train.ppo.max_grad_norm, Some(0.5));
        assert_eq!(cfg.index.metric.to_string(), "hybrid:0.3:onehot");
        assert_eq!(cfg.world.schema.sizes, vec!["tiny", "huge"]);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::parse("train.nope = 1").is_err());
        assert!(RunConfig::parse("world.schema.max_objects = 0").is_err());
        assert!(RunConfig::parse("train.game.thresholds.theta1 = 0.9").is_err());
        assert!(RunConfig::parse("train.total_steps = -3").is_err());
        assert!(RunConfig::parse("just words").is_err());
    }

    #[test]
    fn text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.joint.lambda = 0.123456789;
        cfg.train.ppo.max_grad_norm = Some(1.0);
        cfg.world.seed = u64::MAX;
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn includes_resolve_relative_and_detect_cycles() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/base.conf"), "train.seed = 9\ntrain.total_steps = 5\n").unwrap();
        fs::write(dir.path().join("run.conf"), "include = sub/base.conf\ntrain.seed = 4\n").unwrap();
        let cfg = RunConfig::load(&dir.path().join("run.conf")).unwrap();
        assert_eq!((cfg.train.seed, cfg.train.total_steps), (4, 5));
        fs::write(dir.path().join("a.conf"), "include = b.conf\n").unwrap();
        fs::write(dir.path().join("b.conf"), "include = a.conf\n").unwrap();
        let err = RunConfig::load(&dir.path().join("a.conf")).unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
    }
}
