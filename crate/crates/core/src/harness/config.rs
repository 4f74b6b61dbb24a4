use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::knowledge::DittoMode;
use crate::serializer::PromptMode;
use crate::tabular::Split;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "KAER_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Full,
    Desk,
}

/// Flat run configuration. Relative paths resolve against the working
/// directory of the process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Directory holding `tableA.csv`, `tableB.csv` and `{split}.csv`;
    /// explicit paths win.
    pub data_dir: Option<PathBuf>,
    pub table_a: Option<PathBuf>,
    pub table_b: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub mode: PromptMode,
    pub rule_typer: bool,
    pub gazetteer: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub ditto_mode: Option<DittoMode>,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub use_segments: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub max_len: usize,
    pub min_count: usize,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub work_dir: PathBuf,
}

/// Keys whose flag values are taken as text rather than JSON scalars.
const TEXT_KEYS: [&str; 12] = [
    "profile", "data_dir", "table_a", "table_b", "train", "valid", "test", "mode", "gazetteer", "annotations",
    "ditto_mode", "work_dir",
];

fn defaults() -> Map<String, Value> {
    let v = json!({
        "profile": "full",
        "data_dir": null,
        "table_a": null,
        "table_b": null,
        "train": null,
        "valid": null,
        "test": null,
        "mode": "slash",
        "rule_typer": false,
        "gazetteer": null,
        "annotations": null,
        "ditto_mode": null,
        "d_model": 64,
        "n_heads": 4,
        "n_layers": 2,
        "d_ff": 128,
        "dropout": 0.1,
        "use_segments": true,
        "batch_size": 64,
        "epochs": 20,
        "lr": 3e-5,
        "max_len": 512,
        "min_count": 1,
        "seed": 0,
        "threads": 0,
        "work_dir": "kaer-run",
    });
    match v {
        Value::Object(m) => m,
        _ => unreachable!(),
    }
}

fn profile_overrides(profile: &str) -> Result<Map<String, Value>> {
    match profile {
        "full" => Ok(Map::new()),
        "desk" => match json!({"batch_size": 16, "epochs": 10, "lr": 1e-3, "max_len": 128}) {
            Value::Object(m) => Ok(m),
            _ => unreachable!(),
        },
        other => Err(Error::Domain(format!("unknown profile `{other}` (expected full or desk)"))),
    }
}

/// Turns `key=value` style flag text into a JSON value of the key's kind.
pub fn flag_value(key: &str, text: &str) -> Result<Value> {
    if !defaults().contains_key(key) {
        return Err(Error::Domain(format!("unknown configuration key `{key}`")));
    }
    if TEXT_KEYS.contains(&key) {
        return Ok(Value::String(text.to_string()));
    }
    serde_json::from_str(text).map_err(|_| Error::Domain(format!("`{text}` is not a valid value for {key}")))
}

fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::format(path.display().to_string(), 1, "config must be a JSON object")),
        Err(e) => Err(Error::format(path.display().to_string(), e.line(), e.to_string())),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_layers(None, Map::new(), None).expect("defaults are valid")
    }
}

impl RunConfig {
    /// Desk-profile defaults.
    pub fn desk() -> Self {
        let mut flags = Map::new();
        flags.insert("profile".into(), "desk".into());
        Self::from_layers(None, flags, None).expect("desk defaults are valid")
    }

    /// Resolves a configuration from, in increasing precedence: defaults,
    /// the profile, the config file, `KAER_SEED`, and `flags`.
    pub fn resolve(file: Option<&Path>, flags: Map<String, Value>) -> Result<Self> {
        let file = file.map(read_config_file).transpose()?;
        let env_seed = std::env::var(SEED_ENV).ok();
        Self::from_layers(file, flags, env_seed.as_deref())
    }

    pub fn from_layers(
        file: Option<Map<String, Value>>,
        flags: Map<String, Value>,
        env_seed: Option<&str>,
    ) -> Result<Self> {
        let file = file.unwrap_or_default();
        let profile = flags
            .get("profile")
            .or_else(|| file.get("profile"))
            .and_then(Value::as_str)
            .unwrap_or("full")
            .to_string();
        let mut merged = defaults();
        for layer in [profile_overrides(&profile)?, file] {
            merged.extend(layer);
        }
        if let Some(seed) = env_seed {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::Domain(format!("{SEED_ENV}=`{seed}` is not an unsigned integer")))?;
            merged.insert("seed".into(), seed.into());
        }
        merged.extend(flags);
        if merged.get("ditto_mode").and_then(Value::as_str) == Some("off") {
            merged.insert("ditto_mode".into(), Value::Null);
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(merged))
            .map_err(|e| Error::Domain(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Domain(format!("lr must be a non-negative number, got {}", self.lr)));
        }
        self.encoder_config(crate::tokenizer::SPECIAL_TOKENS.len()).validate()
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_position: self.max_len,
            dropout_rate: self.dropout,
            use_segments: self.use_segments,
            seed: self.seed,
        }
    }

    fn data_file(&self, file: &str) -> Option<PathBuf> {
        self.data_dir.as_ref().map(|d| d.join(file))
    }

    pub fn table_a_path(&self) -> Result<PathBuf> {
        self.table_a
            .clone()
            .or_else(|| self.data_file("tableA.csv"))
            .ok_or_else(|| Error::Domain("no table_a (or data_dir) configured".into()))
    }

    pub fn table_b_path(&self) -> Result<PathBuf> {
        self.table_b
            .clone()
            .or_else(|| self.data_file("tableB.csv"))
            .ok_or_else(|| Error::Domain("no table_b (or data_dir) configured".into()))
    }

    /// Pair file of `split`: the explicit path, else `{split}.csv` in
    /// `data_dir` when that file exists.
    pub fn split_path(&self, split: Split) -> Option<PathBuf> {
        let explicit = match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        };
        explicit
            .clone()
            .or_else(|| self.data_file(&format!("{split}.csv")).filter(|p| p.is_file()))
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.work_dir.join("prepared")
    }

    pub fn batch_path(&self, split: Split) -> PathBuf {
        self.prepared_dir().join(format!("{split}.jsonl"))
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.prepared_dir().join("vocab.tsv")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.prepared_dir().join("manifest.json")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.work_dir.join("checkpoint.bin")
    }

    pub fn loss_log_path(&self) -> PathBuf {
        self.work_dir.join("loss_log.tsv")
    }

    pub fn metrics_path(&self, split: Split) -> PathBuf {
        self.work_dir.join(format!("metrics_{split}.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: Value) -> Map<String, Value> {
        match v {
            Value::Object(m) => m,
            _ => panic!(),
        }
    }

    #[test]
    fn defaults_and_desk_profile() {
        let full = RunConfig::default();
        assert_eq!((full.batch_size, full.max_len, full.epochs), (64, 512, 20));
        assert_eq!(full.lr, 3e-5);
        let desk = RunConfig::desk();
        assert_eq!((desk.batch_size, desk.max_len, desk.epochs), (16, 128, 10));
        assert_eq!(desk.lr, 1e-3);
    }

    #[test]
    fn precedence() {
        let file = map(json!({"profile": "desk", "epochs": 3, "seed": 1, "mode": "space"}));
        let cfg = RunConfig::from_layers(Some(file.clone()), Map::new(), Some("7")).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.seed, 7);
        let mut flags = Map::new();
        flags.insert("seed".into(), flag_value("seed", "9").unwrap());
        flags.insert("mode".into(), flag_value("mode", "slash").unwrap());
        let cfg = RunConfig::from_layers(Some(file), flags, Some("7")).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.mode, PromptMode::Slash);
    }

    #[test]
    fn flag_mode_equals_file_mode() {
        let from_file = RunConfig::from_layers(Some(map(json!({"mode": "slash"}))), Map::new(), None).unwrap();
        let mut flags = Map::new();
        flags.insert("mode".into(), flag_value("mode", "slash").unwrap());
        assert_eq!(RunConfig::from_layers(None, flags, None).unwrap(), from_file);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(flag_value("nope", "1").is_err());
        assert!(flag_value("epochs", "many").is_err());
        assert!(RunConfig::from_layers(Some(map(json!({"bogus": 1}))), Map::new(), None).is_err());
        assert!(RunConfig::from_layers(None, Map::new(), Some("-3")).is_err());
        assert!(RunConfig::from_layers(Some(map(json!({"d_model": 30}))), Map::new(), None).is_err());
        let off = RunConfig::from_layers(Some(map(json!({"ditto_mode": "off"}))), Map::new(), None).unwrap();
        assert_eq!(off.ditto_mode, None);
    }
}
