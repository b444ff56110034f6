//! Plain `key = value` configuration files and model presets.
//!
//! A config file holds one setting per line; `#` starts a comment and blank
//! lines are ignored. Keys are the long flag names of the subcommand
//! (`stride = 16`, `pattern = append`, `verify-oracle = true`), with `_`
//! accepted for `-`. Values from the file are applied first and flags given
//! on the command line win.

use std::ffi::OsString;
use std::path::Path;

use ralm_core::model::{LoraTargets, ModelConfig, PositionScheme};

use crate::error::{CliError, CliResult};

/// Environment variable that overrides the output directory of every
/// subcommand (a command-line `--out-dir` still wins).
pub const OUT_DIR_ENV: &str = "RALM_OUT_DIR";

/// One `key = value` entry with its 1-based line number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_config(text: &str) -> CliResult<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::data(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(CliError::data(format!("line {}: bad key {key:?}", i + 1)));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(CliError::data(format!("line {}: {key} already set on line {}", i + 1, prev.line)));
        }
        out.push(Entry { line: i + 1, key, value: value.trim().to_string() });
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> CliResult<Vec<Entry>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Turns config entries into flags for `sub`, rejecting keys it does not
/// know. Switch flags take `true`/`false`.
pub fn entries_to_args(entries: &[Entry], sub: &clap::Command) -> CliResult<Vec<OsString>> {
    let mut args = Vec::new();
    for e in entries {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(e.key.as_str()))
            .filter(|a| !matches!(a.get_id().as_str(), "config" | "help"))
            .ok_or_else(|| CliError::data(format!("line {}: unknown setting {:?}", e.line, e.key)))?;
        if arg.get_action().takes_values() {
            args.push(OsString::from(format!("--{}", e.key)));
            args.push(OsString::from(&e.value));
        } else {
            match e.value.as_str() {
                "true" => args.push(OsString::from(format!("--{}", e.key))),
                "false" => {}
                v => return Err(CliError::data(format!("line {}: {} takes true or false, got {v:?}", e.line, e.key))),
            }
        }
    }
    Ok(args)
}

/// Named model sizes. `mlp_ratio` scales the MLP width with `hidden` when
/// the hidden size is overridden.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Two layers, `h = 64`: unit tests and smoke runs.
    Tiny,
    /// Four layers, `h = 256`, `T = 4096`.
    Desk,
    /// Eight layers, `h = 512`: the runtime comparison.
    Bench,
}

impl Preset {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "desk" => Ok(Preset::Desk),
            "bench" => Ok(Preset::Bench),
            other => Err(CliError::data(format!("unknown preset {other:?} (tiny, desk, bench)"))),
        }
    }

    pub fn config(self) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig { max_seq: 1024, ..ModelConfig::tiny(2, 64, 4) },
            Preset::Desk => ModelConfig::default(),
            Preset::Bench => ModelConfig { layers: 8, hidden: 512, heads: 8, mlp_dim: 2048, ..ModelConfig::default() },
        }
    }

    fn mlp_ratio(self) -> usize {
        match self {
            Preset::Tiny => 2,
            _ => 4,
        }
    }
}

/// Architecture overrides applied on top of a preset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelOverrides {
    pub layers: Option<usize>,
    pub hidden: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_dim: Option<usize>,
    pub max_seq: Option<usize>,
    pub lora_rank: Option<usize>,
    pub lora_targets: Option<String>,
    pub position: Option<String>,
}

impl ModelOverrides {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply(&self, preset: Preset) -> CliResult<ModelConfig> {
        let mut cfg = preset.config();
        if let Some(h) = self.hidden {
            cfg.hidden = h;
            cfg.mlp_dim = preset.mlp_ratio() * h;
        }
        cfg.layers = self.layers.unwrap_or(cfg.layers);
        cfg.heads = self.heads.unwrap_or(cfg.heads);
        cfg.mlp_dim = self.mlp_dim.unwrap_or(cfg.mlp_dim);
        cfg.max_seq = self.max_seq.unwrap_or(cfg.max_seq);
        cfg.lora_rank = self.lora_rank.unwrap_or(cfg.lora_rank);
        if let Some(t) = &self.lora_targets {
            cfg.lora_targets =
                LoraTargets::parse(t).ok_or_else(|| CliError::data(format!("unknown lora target set {t:?} (kv, qkvo)")))?;
        }
        if let Some(p) = &self.position {
            cfg.position = PositionScheme::parse(p)
                .ok_or_else(|| CliError::data(format!("unknown position scheme {p:?} (rotary, learned)")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses a comma-separated list such as `1024,2048,3072`.
pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| CliError::data(format!("bad {what} entry {p:?}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let e = parse_config("# scenario\nstride = 16\n\npattern=append # trailing\nverify_oracle = true\n").unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!((e[0].key.as_str(), e[0].value.as_str(), e[0].line), ("stride", "16", 2));
        assert_eq!(e[1].value, "append");
        assert_eq!(e[2].key, "verify-oracle");
    }

    #[test]
    fn rejects_malformed_lines_and_duplicates() {
        assert!(parse_config("stride 16").is_err());
        assert!(parse_config("= 3").is_err());
        assert!(parse_config("a = 1\na = 2").is_err());
    }

    #[test]
    fn presets_validate_and_overrides_apply() {
        for p in ["tiny", "desk", "bench"] {
            Preset::parse(p).unwrap().config().validate().unwrap();
        }
        let o = ModelOverrides { hidden: Some(128), layers: Some(3), ..Default::default() };
        let cfg = o.apply(Preset::Tiny).unwrap();
        assert_eq!((cfg.hidden, cfg.mlp_dim, cfg.layers), (128, 256, 3));
        let bad = ModelOverrides { heads: Some(5), ..Default::default() };
        assert!(bad.apply(Preset::Desk).is_err());
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<usize>("1024, 2048,3072", "length").unwrap(), vec![1024, 2048, 3072]);
        assert!(parse_list::<usize>("1,x", "length").is_err());
    }
}
