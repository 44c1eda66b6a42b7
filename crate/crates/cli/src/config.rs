//! Run configuration: a preset, optionally overlaid by a TOML file, then by flags.
//!
//! ```toml
//! preset = "nano"
//!
//! [model]            # any ModelConfig field except vocab_size
//! hidden_size = 64
//!
//! [train]            # any TrainConfig field
//! total_steps = 2000
//! [train.regularizer]
//! mode = "cp-l"
//! beta = 2.0
//!
//! [data]
//! corpus = "corpus.txt"
//! vocab = "vocab.txt"
//! min_len = 10
//! vocab_size = 30522   # used only when no vocab file is given
//!
//! [eval]
//! n_per_interval = 1000
//! bins = 10
//! intervals = "10:50,50:200,200:512"
//! seed = 0
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lenreg_core::encoder::ModelConfig;
use lenreg_core::losses::LossMode;
use lenreg_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_len: Option<usize>,
    /// Size of the vocabulary built from the corpus when no vocab file is given.
    pub vocab_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            vocab: None,
            eval_corpus: None,
            min_len: None,
            vocab_size: 30_522,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_per_interval: usize,
    pub bins: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intervals: Option<String>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_per_interval: 1000,
            bins: 10,
            intervals: None,
            seed: 0,
        }
    }
}

/// Fully resolved settings of one run; serialized into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

/// Values given on the command line; each one that is set wins over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub mode: Option<LossMode>,
    pub beta: Option<f64>,
    pub t: Option<f64>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub n_per_interval: Option<usize>,
    pub bins: Option<usize>,
    pub intervals: Option<String>,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn overlay<T: Serialize + for<'de> Deserialize<'de>>(
    base: &T,
    table: Option<&toml::Value>,
    section: &str,
) -> Result<T> {
    let Some(table) = table else {
        return Ok(serde_json::from_value(serde_json::to_value(base)?)?);
    };
    let mut value = toml::Value::try_from(base).with_context(|| format!("encoding [{section}]"))?;
    merge(&mut value, table.clone());
    value
        .try_into()
        .with_context(|| format!("invalid [{section}] section"))
}

fn load_file(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    for key in table.keys() {
        if !["preset", "model", "train", "data", "eval"].contains(&key.as_str()) {
            bail!("unknown top-level key `{key}` in {}", path.display());
        }
    }
    if table.get("model").and_then(|m| m.get("vocab_size")).is_some() {
        bail!("model.vocab_size is taken from the vocabulary file and cannot be set");
    }
    Ok(table)
}

/// Relative paths in a config file are resolved against the file's directory.
fn rebase(path: &mut Option<PathBuf>, dir: &Path) {
    if let Some(p) = path.as_mut() {
        if p.is_relative() {
            *p = dir.join(&*p);
        }
    }
}

pub fn resolve(config_path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let file = match config_path {
        Some(p) => load_file(p)?,
        None => toml::Table::new(),
    };
    let preset = ov
        .preset
        .clone()
        .or_else(|| file.get("preset").and_then(|v| v.as_str()).map(String::from))
        .unwrap_or_else(|| "nano".to_string());
    let base_model = ModelConfig::preset(&preset, 0)
        .with_context(|| format!("unknown preset `{preset}` (expected nano, mini or base)"))?;
    let base_train = TrainConfig::preset(&preset).expect("model and train presets share names");

    let mut model: ModelConfig = overlay(&base_model, file.get("model"), "model")?;
    let mut train: TrainConfig = overlay(&base_train, file.get("train"), "train")?;
    let mut data: DataConfig = overlay(&DataConfig::default(), file.get("data"), "data")?;
    let mut eval: EvalConfig = overlay(&EvalConfig::default(), file.get("eval"), "eval")?;
    if let Some(dir) = config_path.and_then(Path::parent) {
        rebase(&mut data.corpus, dir);
        rebase(&mut data.vocab, dir);
        rebase(&mut data.eval_corpus, dir);
    }

    if let Some(m) = ov.mode {
        train.regularizer.mode = m;
    }
    if let Some(b) = ov.beta {
        train.regularizer.beta = b;
    }
    if let Some(t) = ov.t {
        train.regularizer.t = t;
    }
    if let Some(a) = ov.alpha {
        train.regularizer.alpha = a;
    }
    if let Some(s) = ov.seed {
        train.seed = s;
        model.seed = s;
        eval.seed = s;
    }
    if let Some(n) = ov.steps {
        train.total_steps = n;
        if train.warmup_steps > n {
            log::warn!("warmup_steps {} capped at total_steps {n}", train.warmup_steps);
            train.warmup_steps = n;
        }
    }
    if ov.corpus.is_some() {
        data.corpus = ov.corpus.clone();
    }
    if ov.vocab.is_some() {
        data.vocab = ov.vocab.clone();
    }
    if ov.eval_corpus.is_some() {
        data.eval_corpus = ov.eval_corpus.clone();
    }
    if let Some(n) = ov.n_per_interval {
        eval.n_per_interval = n;
    }
    if let Some(b) = ov.bins {
        eval.bins = b;
    }
    if ov.intervals.is_some() {
        eval.intervals = ov.intervals.clone();
    }
    train.validate()?;
    if eval.bins == 0 || eval.n_per_interval == 0 {
        bail!("eval.bins and eval.n_per_interval must be positive");
    }
    Ok(RunConfig {
        preset,
        model,
        train,
        data,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_file_overrides_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "preset = \"nano\"\n[model]\nnum_layers = 3\n[train]\ntotal_steps = 50\nwarmup_steps = 5\n\
             [train.regularizer]\nmode = \"ls\"\nalpha = 0.2\n[data]\ncorpus = \"c.txt\"\n",
        )
        .unwrap();
        let cfg = resolve(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(cfg.model.num_layers, 3);
        assert_eq!(cfg.model.hidden_size, 64);
        assert_eq!(cfg.train.total_steps, 50);
        assert_eq!(cfg.train.regularizer.mode, LossMode::Ls);
        assert_eq!(cfg.train.regularizer.alpha, 0.2);
        assert_eq!(cfg.data.corpus, Some(dir.path().join("c.txt")));

        let ov = Overrides {
            mode: Some(LossMode::CpL),
            beta: Some(2.0),
            seed: Some(9),
            ..Overrides::default()
        };
        let cfg = resolve(Some(&path), &ov).unwrap();
        assert_eq!(cfg.train.regularizer.mode, LossMode::CpL);
        assert_eq!(cfg.train.regularizer.beta, 2.0);
        assert_eq!((cfg.train.seed, cfg.model.seed, cfg.eval.seed), (9, 9, 9));
    }

    #[test]
    fn rejects_unknown_keys_and_presets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[train]\nlearning_rate = 1.0\n").unwrap();
        assert!(resolve(Some(&path), &Overrides::default()).is_err());
        std::fs::write(&path, "[model]\nvocab_size = 10\n").unwrap();
        assert!(resolve(Some(&path), &Overrides::default()).is_err());
        let ov = Overrides {
            preset: Some("giant".into()),
            ..Overrides::default()
        };
        assert!(resolve(None, &ov).is_err());
    }

    #[test]
    fn steps_override_caps_warmup() {
        let ov = Overrides {
            steps: Some(40),
            ..Overrides::default()
        };
        let cfg = resolve(None, &ov).unwrap();
        assert_eq!((cfg.train.total_steps, cfg.train.warmup_steps), (40, 40));
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let cfg = resolve(None, &Overrides::default()).unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
