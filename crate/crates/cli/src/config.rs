//! Run configuration: built-in defaults, then a flat JSON file, then flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use dact_core::TrainConfig;
use serde_json::{Map, Value};

/// One optional flag per config key; a set flag beats the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    /// Flat JSON object of config keys
    #[arg(long, value_name = "FILE")]
    pub config: Option<std::path::PathBuf>,
    /// Sub-dialogue length W
    #[arg(long)]
    pub window: Option<usize>,
    /// Context padding P on each side
    #[arg(long)]
    pub padding: Option<usize>,
    /// Center bound C
    #[arg(long)]
    pub center_bound: Option<f64>,
    /// Width bound D (defaults to W + 2P)
    #[arg(long)]
    pub deviation_scale: Option<f64>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Tokens per utterance M
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "BOOL")]
    pub use_bias: Option<bool>,
    /// Select models on online validation accuracy
    #[arg(long, value_name = "BOOL")]
    pub online: Option<bool>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long, value_name = "BOOL")]
    pub pool_true_length: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub literal_loss_divisor: Option<bool>,
    #[arg(long, value_parser = ["feature_mean", "position_mean"])]
    pub key_mean: Option<String>,
}

macro_rules! overrides {
    ($flags:expr, $($field:ident),* $(,)?) => {{
        let mut out: Vec<(&'static str, Value)> = Vec::new();
        $(
            if let Some(v) = &$flags.$field {
                out.push((stringify!($field), serde_json::to_value(v).expect("flag values serialize")));
            }
        )*
        out
    }};
}

impl ConfigFlags {
    fn overrides(&self) -> Vec<(&'static str, Value)> {
        overrides!(
            self,
            window,
            padding,
            center_bound,
            deviation_scale,
            heads,
            max_tokens,
            embed_dim,
            hidden_dim,
            head_dim,
            ff_dim,
            learning_rate,
            epochs,
            batch_size,
            seed,
            use_bias,
            online,
            clip_norm,
            dropout,
            vocab_size,
            pool_true_length,
            literal_loss_divisor,
            key_mean,
        )
    }

    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut map: Map<String, Value> = match serde_json::to_value(TrainConfig::default())? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        if let Some(path) = &self.config {
            merge_file(&mut map, path)?;
        }
        for (k, v) in self.overrides() {
            map.insert(k.to_string(), v);
        }
        let config: TrainConfig = serde_json::from_value(Value::Object(map)).context("invalid configuration")?;
        config.validate()?;
        Ok(config)
    }
}

fn merge_file(map: &mut Map<String, Value>, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let Value::Object(file) = value else {
        bail!("config {} must be a flat JSON object", path.display());
    };
    for (k, v) in file {
        if !map.contains_key(&k) {
            bail!("unknown config key {k:?} in {}", path.display());
        }
        map.insert(k, v);
    }
    Ok(())
}
