//! Experiment configuration: a TOML file, `--set section.key=value`
//! overrides, and `PROPSPAN_WORKSPACE` for the workspace root.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use propspan::neural::{EncoderConfig, EncoderKind, PretrainConfig, DEFAULT_CHECKPOINT_FRACTIONS};
use propspan::pipelines::{FineTune, SiTrainConfig, TcTrainConfig};
use propspan::segmenter::SplitStrategy;
use propspan::synth::SynthConfig;
use serde::{Deserialize, Serialize};

pub const WORKSPACE_ENV: &str = "PROPSPAN_WORKSPACE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paths: Paths,
    pub seeds: Seeds,
    pub encoder: EncoderSection,
    pub prepare: PrepareSection,
    pub pretrain: PretrainSection,
    pub si: SiSection,
    pub tc: TcSection,
    pub synth: SynthSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            seeds: Seeds::default(),
            encoder: EncoderSection::default(),
            prepare: PrepareSection::default(),
            pretrain: PretrainSection::default(),
            si: SiSection::default(),
            tc: TcSection::default(),
            synth: SynthSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub workspace: PathBuf,
    /// Directory of `article<id>.txt` files.
    pub articles: PathBuf,
    pub si_labels: Option<PathBuf>,
    pub tc_labels: Option<PathBuf>,
    /// Extra unlabelled articles for masked-LM pre-training.
    pub pretrain_corpus: Option<PathBuf>,
    /// `surface v1 … vn` vectors for freshly initialized token embeddings.
    pub embeddings: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            workspace: "work".into(),
            articles: "articles".into(),
            si_labels: None,
            tc_labels: None,
            pretrain_corpus: None,
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub split: u64,
    pub pretrain: u64,
    pub si: u64,
    pub tc: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            split: 1,
            pretrain: 13,
            si: 17,
            tc: 19,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub kind: EncoderKind,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    /// Embedding width; defaults to `hidden_dim`.
    pub embed_dim: Option<usize>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::desk(2000);
        Self {
            kind: d.kind,
            vocab_size: d.vocab_size,
            hidden_dim: d.hidden_dim,
            layers: d.layers,
            heads: d.heads,
            max_seq_len: d.max_seq_len,
            dropout: d.dropout,
            embed_dim: None,
        }
    }
}

impl EncoderSection {
    /// Encoder for a tokenizer vocabulary of `vocab_len` entries.
    pub fn build(&self, vocab_len: usize) -> Result<EncoderConfig> {
        if vocab_len > self.vocab_size {
            bail!(
                "vocabulary has {vocab_len} entries but encoder.vocab_size is {}",
                self.vocab_size
            );
        }
        let cfg = EncoderConfig {
            kind: self.kind,
            vocab_size: vocab_len,
            hidden_dim: self.hidden_dim,
            layers: self.layers,
            heads: self.heads,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
            embed_dim: self.embed_dim.unwrap_or(self.hidden_dim),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheStrategy {
    Paragraph,
    Sentence,
    ExactSpan,
}

impl CacheStrategy {
    pub fn name(self) -> &'static str {
        match self {
            CacheStrategy::Paragraph => "paragraph",
            CacheStrategy::Sentence => "sentence",
            CacheStrategy::ExactSpan => "exact_span",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareSection {
    pub max_tokens: usize,
    /// Caches to build; empty means every strategy the labels allow.
    pub strategies: Vec<CacheStrategy>,
}

impl Default for PrepareSection {
    fn default() -> Self {
        Self {
            max_tokens: propspan::segmenter::DEFAULT_MAX_TOKENS,
            strategies: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub total_steps: u64,
    pub checkpoint_fractions: Vec<f64>,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            total_steps: d.total_steps,
            checkpoint_fractions: d.checkpoint_fractions,
            lr: d.lr,
            batch_size: d.batch_size,
        }
    }
}

/// Where a fine-tuning run gets its encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Pretrained,
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiSection {
    pub strategy: SplitStrategy,
    pub init: Init,
    /// Pre-training checkpoint to start from when `init = "pretrained"`.
    pub checkpoint_fraction: f64,
    pub undersample: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub lr: f64,
    pub freeze_encoder: bool,
}

impl Default for SiSection {
    fn default() -> Self {
        let d = SiTrainConfig::default();
        Self {
            strategy: d.strategy,
            init: Init::Pretrained,
            checkpoint_fraction: 1.0,
            undersample: d.undersample,
            epochs: d.tune.epochs,
            batch_size: d.tune.batch_size,
            patience: d.tune.patience,
            lr: d.tune.lr,
            freeze_encoder: d.tune.freeze_encoder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcSection {
    pub init: Init,
    pub checkpoint_fraction: f64,
    pub oversample: bool,
    /// Fine-tune one member per pre-training checkpoint and vote.
    pub ensemble: bool,
    pub member_fractions: Vec<f64>,
    pub resolve_overlaps: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub lr: f64,
    pub freeze_encoder: bool,
}

impl Default for TcSection {
    fn default() -> Self {
        let d = TcTrainConfig::default();
        Self {
            init: Init::Pretrained,
            checkpoint_fraction: 1.0,
            oversample: d.oversample,
            ensemble: false,
            member_fractions: DEFAULT_CHECKPOINT_FRACTIONS.to_vec(),
            resolve_overlaps: true,
            epochs: d.tune.epochs,
            batch_size: d.tune.batch_size,
            patience: d.tune.patience,
            lr: d.tune.lr,
            freeze_encoder: d.tune.freeze_encoder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub articles: usize,
    pub seed: u64,
    pub phrase_rate: f64,
    pub long_paragraph_rate: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            articles: d.articles,
            seed: d.seed,
            phrase_rate: d.phrase_rate,
            long_paragraph_rate: d.long_paragraph_rate,
        }
    }
}

impl SynthSection {
    pub fn build(&self) -> SynthConfig {
        SynthConfig {
            articles: self.articles,
            seed: self.seed,
            phrase_rate: self.phrase_rate,
            long_paragraph_rate: self.long_paragraph_rate,
        }
    }
}

impl ExperimentConfig {
    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            total_steps: self.pretrain.total_steps,
            checkpoint_fractions: self.pretrain.checkpoint_fractions.clone(),
            lr: self.pretrain.lr,
            batch_size: self.pretrain.batch_size,
            seed: self.seeds.pretrain,
        }
    }

    pub fn si_config(&self) -> SiTrainConfig {
        SiTrainConfig {
            strategy: self.si.strategy,
            max_tokens: self.prepare.max_tokens,
            undersample: self.si.undersample,
            tune: FineTune {
                epochs: self.si.epochs,
                batch_size: self.si.batch_size,
                patience: self.si.patience,
                lr: self.si.lr,
                seed: self.seeds.si,
                freeze_encoder: self.si.freeze_encoder,
            },
        }
    }

    pub fn tc_config(&self) -> TcTrainConfig {
        TcTrainConfig {
            oversample: self.tc.oversample,
            tune: FineTune {
                epochs: self.tc.epochs,
                batch_size: self.tc.batch_size,
                patience: self.tc.patience,
                lr: self.tc.lr,
                seed: self.seeds.tc,
                freeze_encoder: self.tc.freeze_encoder,
            },
        }
    }

    /// Parses TOML text, applies overrides and resolves relative paths
    /// against `base`.
    pub fn from_toml(text: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: Self = toml::Value::Table(value)
            .try_into()
            .context("config does not match the schema")?;
        cfg.resolve(base);
        Ok(cfg)
    }

    /// Loads `path` (or defaults when `None`), then applies overrides and the
    /// workspace environment variable.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (text, base) = match path {
            Some(p) => (
                std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?,
                std::path::absolute(p.parent().unwrap_or(Path::new("")).join("."))?,
            ),
            None => (String::new(), std::env::current_dir()?),
        };
        let mut cfg = Self::from_toml(&text, overrides, &base)?;
        if let Some(ws) = std::env::var_os(WORKSPACE_ENV) {
            cfg.paths.workspace = PathBuf::from(ws);
        }
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        fix(&mut paths.workspace);
        fix(&mut paths.articles);
        for p in [
            &mut paths.si_labels,
            &mut paths.tc_labels,
            &mut paths.pretrain_corpus,
            &mut paths.embeddings,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `section.key=value`; the value is read as a TOML literal, falling back to
/// a plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{part}` is not a section"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Configuration written next to a synthetic corpus.
pub fn synthetic_config_toml() -> &'static str {
    include_str!("../configs/synthetic.toml")
}
