//! Run configuration: defaults, an optional versioned TOML file, then
//! command-line flags, in increasing precedence.

use std::fs;
use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::{Deserialize, Serialize};

use mrn::data::Split;
use mrn::evaluation::Protocol;
use mrn::model::Variant;
use mrn::training::{DropoutMode, PretrainConfig, TrainConfig};

use crate::args::{EvalArgs, ModelArgs, SplitArg, TrainArgs};
use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// On-disk form. Every key is optional except `version`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub version: u32,
    pub variant: Option<String>,
    pub blocks: Option<usize>,
    pub dim: Option<usize>,
    pub seed: Option<u64>,
    pub iters: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub dropout: Option<f64>,
    pub dropout_mode: Option<String>,
    pub clip: Option<f64>,
    pub freeze_cnn: Option<bool>,
    pub pretrain_iters: Option<usize>,
    pub eval_interval: Option<usize>,
    pub protocol: Option<String>,
    pub postprocess: Option<bool>,
    pub split: Option<String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| CliError::Validation(format!("config file: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Validation(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }
}

/// Evaluation options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub protocol: Protocol,
    pub postprocess: bool,
    pub split: Split,
}

/// Fully resolved settings for one command. Sections a command does not use
/// are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Option<Variant>,
    pub blocks: Option<usize>,
    pub dim: usize,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub eval: Option<EvalSettings>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.blocks == Some(0) {
            return Err(CliError::Validation("--blocks must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(CliError::Validation("--dim must be at least 1".into()));
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn to_file(&self) -> ConfigFile {
        let t = &self.train;
        ConfigFile {
            version: CONFIG_VERSION,
            variant: self.variant.map(|v| v.to_string()),
            blocks: self.blocks,
            dim: Some(self.dim),
            seed: Some(t.seed),
            iters: Some(t.iterations),
            batch: Some(t.batch_size),
            lr: Some(t.learning_rate),
            dropout: Some(t.dropout),
            dropout_mode: Some(t.dropout_mode.to_string()),
            clip: t.clip,
            freeze_cnn: Some(t.freeze_cnn),
            pretrain_iters: Some(self.pretrain.iterations),
            eval_interval: Some(t.eval_interval),
            protocol: self.eval.map(|e| e.protocol.to_string()),
            postprocess: self.eval.map(|e| e.postprocess),
            split: self.eval.map(|e| SplitArg::from(e.split).to_string()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("config serialises")
    }
}

fn from_cli(m: &ArgMatches, id: &str) -> bool {
    m.try_contains_id(id).unwrap_or(false) && m.value_source(id) == Some(ValueSource::CommandLine)
}

/// The flag value if given on the command line, else the file value, else
/// the flag default.
pub fn pick<T>(m: &ArgMatches, id: &str, flag: T, file: Option<T>) -> T {
    if from_cli(m, id) {
        flag
    } else {
        file.unwrap_or(flag)
    }
}

fn parse_key<T: std::str::FromStr<Err = mrn::Error>>(v: &Option<String>) -> Result<Option<T>, CliError> {
    v.as_deref().map(str::parse::<T>).transpose().map_err(CliError::from)
}

pub fn resolve_eval(m: &ArgMatches, eval: &EvalArgs, f: &ConfigFile) -> Result<EvalSettings, CliError> {
    let split = match &f.split {
        Some(s) => Some(s.parse::<SplitArg>().map_err(CliError::Validation)?),
        None => None,
    };
    Ok(EvalSettings {
        protocol: pick(m, "protocol", eval.protocol, parse_key::<Protocol>(&f.protocol)?),
        postprocess: pick(m, "postprocess", eval.postprocess, f.postprocess),
        split: pick(m, "split", eval.split, split).into(),
    })
}

/// Merges `f` under the flags in `m` (the subcommand's matches). `model`
/// is absent for the sweep, which fixes variants and depths itself.
pub fn resolve(
    m: &ArgMatches,
    model: Option<&ModelArgs>,
    dim: usize,
    train: &TrainArgs,
    eval: Option<&EvalArgs>,
    f: &ConfigFile,
) -> Result<RunConfig, CliError> {
    let seed = pick(m, "seed", train.seed, f.seed);
    let variant = match model {
        Some(a) => Some(pick(m, "variant", a.variant, parse_key(&f.variant)?)),
        None => None,
    };
    let cfg = RunConfig {
        variant,
        blocks: model.map(|a| pick(m, "blocks", a.blocks, f.blocks)),
        dim: pick(m, "dim", dim, f.dim),
        train: TrainConfig {
            batch_size: pick(m, "batch", train.batch, f.batch),
            iterations: pick(m, "iters", train.iters, f.iters),
            learning_rate: pick(m, "lr", train.lr, f.lr),
            dropout: pick(m, "dropout", train.dropout, f.dropout),
            dropout_mode: pick(
                m,
                "dropout_mode",
                train.dropout_mode,
                parse_key::<DropoutMode>(&f.dropout_mode)?,
            ),
            seed,
            clip: if from_cli(m, "clip") {
                train.clip
            } else {
                f.clip.or(train.clip)
            },
            freeze_cnn: pick(m, "freeze_cnn", train.freeze_cnn, f.freeze_cnn),
            eval_interval: pick(m, "eval_interval", train.eval_interval, f.eval_interval),
            ..TrainConfig::default()
        },
        pretrain: PretrainConfig {
            iterations: pick(m, "pretrain_iters", train.pretrain_iters, f.pretrain_iters),
            seed,
            ..PretrainConfig::default()
        },
        eval: eval.map(|e| resolve_eval(m, e, f)).transpose()?,
    };
    cfg.validate()?;
    Ok(cfg)
}
