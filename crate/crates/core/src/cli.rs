//! Command implementations behind the `grounder` binary.
//!
//! Every command takes a [`RunConfig`], assembled from built-in defaults, an
//! optional TOML file and `section.key=value` overrides, in increasing order
//! of precedence. Output files never contain timestamps, so equal inputs give
//! equal files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{generate_synthetic, load_manifest, save_manifest, DatasetManifest, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{phrase_set, report, EvalReport, ReportOptions};
use crate::gradcheck::{self, GradcheckConfig, GroupCheck};
use crate::model::{Mode, ModelConfig, ModelParams};
use crate::optim::{train, training_set, EpochMetrics, TrainConfig};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "GROUNDER_THREADS";

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const SEED_FILE: &str = "seed";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Output directory of `synth`.
    pub data_dir: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    /// Defaults to `run_dir/checkpoint.bin`.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `run_dir`.
    pub report_dir: Option<PathBuf>,
}

/// Model sizes; vocabulary size and feature width come from the data and
/// batchnorm from the training section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub share_embeddings: bool,
    pub lstm_init_scale: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelSection {
            embed_dim: d.embed_dim,
            hidden_dim: d.hidden_dim,
            attention_dim: d.attention_dim,
            share_embeddings: d.share_embeddings,
            lstm_init_scale: d.lstm_init_scale,
            bn_momentum: d.bn_momentum,
            bn_eps: d.bn_eps,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self, vocab_size: usize, feature_dim: usize, batchnorm: bool) -> ModelConfig {
        ModelConfig {
            vocab_size,
            feature_dim,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            attention_dim: self.attention_dim,
            share_embeddings: self.share_embeddings,
            batchnorm,
            lstm_init_scale: self.lstm_init_scale,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub sentence_constraint: bool,
    /// Which manifest to evaluate: `train`, `val` or `test`.
    pub split: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            sentence_constraint: false,
            split: "test".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 2000,
            val: 500,
            test: 500,
        }
    }
}

pub const DEFAULT_FRACTIONS: [f64; 7] = [0.0, 0.0312, 0.0625, 0.125, 0.25, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub fractions: Vec<f64>,
    /// Mode for non-zero fractions; fraction 0 always trains unsupervised.
    pub mode: Mode,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            fractions: DEFAULT_FRACTIONS.to_vec(),
            mode: Mode::SemiSupervised,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub synth: SynthConfig,
    pub splits: SplitSizes,
    pub sweep: SweepSection,
    pub gradcheck: GradcheckConfig,
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("bad key {key:?}")))?;
    let mut t = table;
    for p in parts {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p:?} in {key:?} is not a section")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Parses `value` as a TOML value, taking it as a plain string if it is not
/// one (so `paths.train=data/train.jsonl` needs no quotes).
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        RunConfig::from_parts(Some(text), &[])
    }

    /// Defaults, then the file contents, then `key=value` overrides (a
    /// leading `--` is accepted).
    pub fn from_parts(file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match file {
            Some(text) => toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let o = o.trim_start_matches("--");
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let config: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        RunConfig::from_parts(text.as_deref(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    fn run_dir(&self) -> Result<&Path> {
        self.paths
            .run_dir
            .as_deref()
            .ok_or_else(|| Error::Config("paths.run_dir is required".into()))
    }

    fn checkpoint_path(&self) -> Result<PathBuf> {
        match &self.paths.checkpoint {
            Some(p) => Ok(p.clone()),
            None => Ok(self.run_dir()?.join(CHECKPOINT_FILE)),
        }
    }
}

/// Sizes the global worker pool from [`THREADS_ENV`] when it is set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// One-line JSON error record: `{"error":kind,"code":n,"message":...}`.
pub fn error_line(err: &Error) -> String {
    serde_json::json!({
        "error": err.kind(),
        "code": err.exit_code(),
        "message": err.to_string(),
    })
    .to_string()
}

fn require(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    let p = path.clone().ok_or_else(|| Error::Config(format!("{key} is required")))?;
    if !p.exists() {
        return Err(Error::Data(format!("{key} {} does not exist", p.display())));
    }
    Ok(p)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFiles {
    pub vocab: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    /// Held-out names, one per line as words.
    pub held_out: PathBuf,
}

/// Writes `vocab.txt`, `train/val/test.jsonl` with their feature files, the
/// held-out names and the synthesis config into `paths.data_dir`. The three
/// splits share one world and use seeds `synth.seed`, `+1` and `+2`.
pub fn cmd_synth(config: &RunConfig) -> Result<SynthFiles> {
    let dir = config
        .paths
        .data_dir
        .clone()
        .ok_or_else(|| Error::Config("paths.data_dir is required".into()))?;
    create_dir(&dir)?;
    let base = &config.synth;
    let mut vocab = None;
    let mut held = None;
    let mut split_paths = Vec::new();
    for (k, (split, samples)) in [
        ("train", config.splits.train),
        ("val", config.splits.val),
        ("test", config.splits.test),
    ]
    .into_iter()
    .enumerate()
    {
        let cfg = SynthConfig {
            split: split.into(),
            samples,
            seed: base.seed.wrapping_add(k as u64),
            exclude_held_out: if split == "train" { base.exclude_held_out } else { Some(false) },
            ..base.clone()
        };
        let out = generate_synthetic(&cfg)?;
        let path = dir.join(format!("{split}.jsonl"));
        save_manifest(&out.manifest, &path)?;
        split_paths.push(path);
        held.get_or_insert_with(|| {
            out.world
                .held_out_phrases()
                .iter()
                .map(|p| out.vocab.decode(p) + "\n")
                .collect::<String>()
        });
        vocab.get_or_insert(out.vocab);
    }
    let vocab_path = dir.join(&base.vocab_file);
    vocab.expect("three splits").save(&vocab_path)?;
    let held_path = dir.join("held_out.txt");
    write(&held_path, held.expect("three splits"))?;
    write(&dir.join("synth.toml"), config.to_toml())?;
    let [train, val, test]: [PathBuf; 3] = split_paths.try_into().expect("three splits");
    Ok(SynthFiles {
        vocab: vocab_path,
        train,
        val,
        test,
        held_out: held_path,
    })
}

fn check_compatible(a: &DatasetManifest, b: &DatasetManifest) -> Result<()> {
    if a.vocab_size != b.vocab_size || a.feature_dim != b.feature_dim {
        return Err(Error::Data(format!(
            "splits {:?} and {:?} disagree on vocabulary ({} vs {}) or feature width ({} vs {})",
            a.split, b.split, a.vocab_size, b.vocab_size, a.feature_dim, b.feature_dim
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    pub model: ModelParams,
}

/// Trains on loaded splits and writes the run directory: the config echo,
/// the seed, one metrics line per epoch and the checkpoint of the best
/// epoch. With `epochs = 0` the freshly initialized model is saved and the
/// metrics file is empty.
pub fn train_into(
    config: &RunConfig,
    train_set: &DatasetManifest,
    val_set: Option<&DatasetManifest>,
    run_dir: &Path,
) -> Result<TrainSummary> {
    if let Some(v) = val_set {
        check_compatible(train_set, v)?;
    }
    let tc = &config.train;
    TrainConfig { epochs: tc.epochs.max(1), ..tc.clone() }.validate()?;
    let model_config = config
        .model
        .to_config(train_set.vocab_size, train_set.feature_dim, tc.resolved_batchnorm());
    let model = ModelParams::new(model_config, tc.seed)?;

    create_dir(run_dir)?;
    write(&run_dir.join(CONFIG_FILE), config.to_toml())?;
    write(&run_dir.join(SEED_FILE), format!("{}\n", tc.seed))?;

    let (model, adam, best_epoch, metrics) = if tc.epochs == 0 {
        (model, None, 0, Vec::new())
    } else {
        let masked = training_set(train_set, tc)?;
        let out = train(&masked, val_set, tc, model)?;
        (out.model, Some(out.adam), out.best_epoch, out.metrics)
    };
    let lines: String = metrics
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect();
    write(&run_dir.join(METRICS_FILE), lines)?;
    let checkpoint = Checkpoint {
        model,
        adam,
        run_config: config.to_json(),
        best_epoch,
        metrics: metrics.clone(),
    };
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    checkpoint.save(&ckpt_path)?;
    Ok(TrainSummary {
        run_dir: run_dir.to_path_buf(),
        checkpoint: ckpt_path,
        best_epoch,
        metrics,
        model: checkpoint.model,
    })
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary> {
    let train_path = require(&config.paths.train, "paths.train")?;
    let train_set = load_manifest(&train_path)?;
    let val_set = match &config.paths.val {
        Some(_) => Some(load_manifest(&require(&config.paths.val, "paths.val")?)?),
        None => None,
    };
    train_into(config, &train_set, val_set.as_ref(), config.run_dir()?)
}

/// Evaluates the checkpoint on the split named by `eval.split` and writes
/// `report.json` and `report.csv`. The novel-phrase row is included when
/// `paths.train` is set.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalReport> {
    let ckpt_path = config.checkpoint_path()?;
    let checkpoint = Checkpoint::load(&ckpt_path)?;
    let (key, path) = match config.eval.split.as_str() {
        "train" => ("paths.train", &config.paths.train),
        "val" => ("paths.val", &config.paths.val),
        "test" => ("paths.test", &config.paths.test),
        other => return Err(Error::Config(format!("eval.split must be train, val or test, not {other:?}"))),
    };
    let dataset = load_manifest(&require(path, key)?)?;
    let training = match &config.paths.train {
        Some(_) => Some(phrase_set(&load_manifest(&require(&config.paths.train, "paths.train")?)?)),
        None => None,
    };
    let cfg = &checkpoint.model.config;
    if cfg.vocab_size != dataset.vocab_size || cfg.feature_dim != dataset.feature_dim {
        return Err(Error::Data(format!(
            "checkpoint expects vocabulary {} and feature width {}, {} has {} and {}",
            cfg.vocab_size, cfg.feature_dim, dataset.split, dataset.vocab_size, dataset.feature_dim
        )));
    }
    let rep = report(
        &dataset,
        &checkpoint.model,
        &ReportOptions {
            sentence_constraint: config.eval.sentence_constraint,
            training_phrases: training.as_ref(),
        },
    )?;
    let dir = match &config.paths.report_dir {
        Some(d) => d.clone(),
        None => config.run_dir()?.to_path_buf(),
    };
    create_dir(&dir)?;
    write(
        &dir.join("report.json"),
        serde_json::to_string_pretty(&rep).expect("report serializes") + "\n",
    )?;
    write(&dir.join("report.csv"), rep.to_csv())?;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub mode: Mode,
    pub lambda: f64,
    pub best_epoch: usize,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

pub const SWEEP_HEADER: &str = "fraction,mode,lambda,best_epoch,val_accuracy,test_accuracy";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out += &format!(
            "{},{},{},{},{},{}\n",
            r.fraction,
            r.mode.name(),
            r.lambda,
            r.best_epoch,
            opt(r.val_accuracy),
            opt(r.test_accuracy)
        );
    }
    out
}

/// Trains one model per supervision fraction into `run_dir/frac-<f>` and
/// writes `run_dir/sweep.csv` with one row per fraction.
pub fn cmd_sweep(config: &RunConfig) -> Result<Vec<SweepRow>> {
    let run_dir = config.run_dir()?;
    let train_set = load_manifest(&require(&config.paths.train, "paths.train")?)?;
    let val_set = match &config.paths.val {
        Some(_) => Some(load_manifest(&require(&config.paths.val, "paths.val")?)?),
        None => None,
    };
    let test_set = match &config.paths.test {
        Some(_) => Some(load_manifest(&require(&config.paths.test, "paths.test")?)?),
        None => None,
    };
    if config.sweep.fractions.is_empty() {
        return Err(Error::Config("sweep.fractions is empty".into()));
    }
    let mut rows = Vec::new();
    for &fraction in &config.sweep.fractions {
        let mode = if fraction == 0.0 {
            Mode::Unsupervised
        } else {
            config.sweep.mode
        };
        let mut cfg = config.clone();
        cfg.train.mode = mode;
        cfg.train.supervision_fraction = fraction;
        let dir = run_dir.join(format!("frac-{fraction}"));
        let summary = train_into(&cfg, &train_set, val_set.as_ref(), &dir)?;
        let test_accuracy = match &test_set {
            Some(t) => Some(report(t, &summary.model, &ReportOptions::default())?.overall_accuracy),
            None => None,
        };
        let val_accuracy = summary
            .metrics
            .iter()
            .find(|m| m.epoch == summary.best_epoch)
            .and_then(|m| m.val_accuracy);
        rows.push(SweepRow {
            fraction,
            mode,
            lambda: cfg.train.resolved_lambda(),
            best_epoch: summary.best_epoch,
            val_accuracy,
            test_accuracy,
        });
    }
    write(&run_dir.join("sweep.csv"), sweep_csv(&rows))?;
    Ok(rows)
}

/// Runs the gradient check with `gradcheck.*` settings. Writes
/// `gradcheck.json` into `paths.run_dir` when one is given.
pub fn cmd_gradcheck(config: &RunConfig) -> Result<Vec<GroupCheck>> {
    let checks = gradcheck::run(&config.gradcheck)?;
    if let Some(dir) = &config.paths.run_dir {
        create_dir(dir)?;
        write(
            &dir.join("gradcheck.json"),
            serde_json::to_string_pretty(&checks).expect("checks serialize") + "\n",
        )?;
    }
    Ok(checks)
}
