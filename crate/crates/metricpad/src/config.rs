//! Run configuration: one TOML file per run, overridden by command-line flags.
//!
//! ```toml
//! seed = 7
//! out = "runs/toy"
//!
//! [benchmark]
//! preset = "grandtest-toy"
//!
//! [train]
//! epochs = 100
//! loss = "anomaly"
//!
//! [evaluate]
//! references = 3
//!
//! [protocol]
//! kind = "intra"
//! ```
//!
//! The top-level seed drives both the benchmark and training unless
//! `benchmark.seed` pins the data separately. Paths are relative to the
//! working directory. A run manifest is itself a valid config: its resolved
//! `config` section is read back when the file ends in `.json`.

use std::path::{Path, PathBuf};

use metricpad_core::bench::{self, Benchmark, BenchmarkSpec};
use metricpad_core::eval::ApcerGranularity;
use metricpad_core::fewshot::DEFAULT_PAIRS;
use metricpad_core::losses::SoftmaxSign;
use metricpad_core::protocol::{HoldoutPai, PipelineConfig, ProtocolKind, ProtocolSpec};
use metricpad_core::train::{LossKind, MiningMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{io, Error, Result};

pub const GRANDTEST_TOY: &str = "grandtest-toy";
pub const DEFAULT_OUT: &str = "metricpad-out";

/// Where the samples come from. At most one of `preset`, `spec` and `path`;
/// none means the toy preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSource {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<BenchmarkSpec>,
    /// A JSONL or CSV sample file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Generator seed; defaults to the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// Reference pairs `M`.
    pub references: usize,
    pub apcer: ApcerGranularity,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub early_stop_patience: Option<usize>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            references: DEFAULT_PAIRS,
            apcer: ApcerGranularity::Type,
            early_stop_patience: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Written by `train`, read by `evaluate`; defaults to `<out>/checkpoint.json`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub benchmark: BenchmarkSource,
    pub train: TrainConfig,
    pub evaluate: EvaluateConfig,
    pub protocol: ProtocolSpec,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub loss: Option<LossKind>,
    pub mode: Option<MiningMode>,
    pub softmax_sign: Option<SoftmaxSign>,
    pub references: Option<usize>,
    pub protocol: Option<ProtocolKind>,
    pub holdout_tag: Option<String>,
    pub holdout_pai: Option<HoldoutPai>,
    pub epochs: Option<usize>,
}

/// A loaded config together with the bytes it came from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub bytes: Vec<u8>,
    /// Command recorded in a manifest, when the config was one.
    pub manifest_command: Option<String>,
}

fn config_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {msg}", path.display()))
}

pub fn parse_toml(text: &str, path: &Path) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| config_err(path, e))
}

/// Reads a TOML config, or the `config` section of a JSON manifest.
pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| config_err(path, e))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| config_err(path, e))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let (config, manifest_command) = if is_json {
        let m: crate::manifest::Manifest = serde_json::from_str(text).map_err(|e| config_err(path, e))?;
        let config = m
            .config
            .ok_or_else(|| config_err(path, "manifest has no config to replay"))?;
        (config, Some(m.command))
    } else {
        (parse_toml(text, path)?, None)
    };
    Ok(Loaded {
        config,
        bytes,
        manifest_command,
    })
}

pub fn softmax_sign_name(s: SoftmaxSign) -> &'static str {
    match s {
        SoftmaxSign::PaperLiteral => "paper",
        SoftmaxSign::Corrected => "corrected",
    }
}

pub fn parse_softmax_sign(s: &str) -> Result<SoftmaxSign> {
    match s {
        "paper" => Ok(SoftmaxSign::PaperLiteral),
        "corrected" => Ok(SoftmaxSign::Corrected),
        other => Err(Error::Usage(format!("unknown softmax sign {other:?}, expected paper or corrected"))),
    }
}

impl RunConfig {
    /// Applies overrides and fills every default, so the result no longer
    /// depends on anything outside itself.
    pub fn resolve(mut self, o: &Overrides) -> Result<RunConfig> {
        let seed = o.seed.or(self.seed).unwrap_or(0);
        self.seed = Some(seed);
        self.train.seed = seed;
        self.out = Some(o.out.clone().or(self.out).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)));
        if let Some(c) = &o.checkpoint {
            self.checkpoint = Some(c.clone());
        }
        if let Some(l) = o.loss {
            self.train.loss = l;
        }
        if let Some(m) = o.mode {
            self.train.mode = m;
        }
        if let Some(s) = o.softmax_sign {
            self.train.loss_config.softmax_sign = s;
        }
        if let Some(m) = o.references {
            self.evaluate.references = m;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if o.holdout_tag.is_some() || o.holdout_pai.is_some() {
            self.protocol.kind = ProtocolKind::Holdout;
            self.protocol.holdout_tag = o.holdout_tag.clone();
            self.protocol.holdout_pai = o.holdout_pai.clone();
        }
        if let Some(kind) = o.protocol {
            self.protocol.kind = kind;
            if kind == ProtocolKind::Intra {
                self.protocol.holdout_tag = None;
                self.protocol.holdout_pai = None;
            }
        }

        let b = &mut self.benchmark;
        match (&b.preset, &b.spec, &b.path) {
            (None, None, None) => b.preset = Some(GRANDTEST_TOY.into()),
            (Some(_), None, None) | (None, Some(_), None) | (None, None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "benchmark takes only one of preset, spec or path".into(),
                ))
            }
        }
        if let Some(p) = &b.preset {
            if p != GRANDTEST_TOY {
                return Err(Error::Config(format!("unknown benchmark preset {p:?}, expected {GRANDTEST_TOY}")));
            }
        }
        if b.path.is_some() {
            if b.seed.is_some() {
                return Err(Error::Config("benchmark.seed has no effect on an ingested file".into()));
            }
        } else {
            let bseed = *b.seed.get_or_insert(seed);
            if let Some(spec) = &mut b.spec {
                spec.seed = bseed;
                spec.validate()?;
            }
        }

        self.protocol.validate()?;
        self.train.loss_config.validate()?;
        if self.evaluate.references == 0 {
            return Err(Error::Config("evaluate.references must be at least 1".into()));
        }
        Ok(self)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir().join("checkpoint.json"))
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            train: self.train.clone(),
            references: self.evaluate.references,
            apcer: self.evaluate.apcer,
            early_stop_patience: self.evaluate.early_stop_patience,
        }
    }

    /// Generates or ingests the samples. Call on a resolved config.
    pub fn benchmark(&self) -> Result<Benchmark> {
        let b = &self.benchmark;
        if let Some(path) = &b.path {
            return io::ingest(path);
        }
        let seed = b.seed.or(self.seed).unwrap_or(0);
        let spec = match &b.spec {
            Some(spec) => spec.clone(),
            None => BenchmarkSpec::grandtest_toy(seed),
        };
        Ok(bench::generate(&spec)?)
    }

    /// Canonical JSON, the form that is hashed into manifests.
    /// Compact JSON with object keys sorted.
    pub fn canonical_json(&self) -> Vec<u8> {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_vec(&value).expect("value serializes")
    }
}
