//! Config files and flag overrides. Precedence: flags, then the config file,
//! then built-in defaults.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use slidemine::sampling::{Balance, Task};
use slidemine::scorer::TrainMode;
use slidemine::slide_store::Magnification;
use slidemine::tiling::TilingConfig;
use slidemine::training::TrainConfig;

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn parse_task(s: &str) -> Result<Task, String> {
    parse_enum(s)
}

fn parse_balance(s: &str) -> Result<Balance, String> {
    parse_enum(s)
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    parse_enum(s)
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| {
        anyhow::Error::new(slidemine::Error::Configuration(format!(
            "{}: line {} column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        )))
    })
}

#[derive(Args, Debug, Clone, Default)]
pub struct TilingArgs {
    /// Tiling config (JSON).
    #[arg(long = "tiling-config")]
    pub tiling_config: Option<PathBuf>,
    #[arg(long)]
    pub magnification: Option<Magnification>,
    #[arg(long)]
    pub tile_px: Option<u32>,
    #[arg(long)]
    pub stride_px: Option<u32>,
    #[arg(long)]
    pub min_tissue_fraction: Option<f64>,
}

impl TilingArgs {
    fn apply(&self, cfg: &mut TilingConfig) {
        if let Some(m) = self.magnification {
            cfg.magnification = m;
        }
        if let Some(t) = self.tile_px {
            cfg.tile_px = t;
            if self.stride_px.is_none() {
                cfg.stride_px = t;
            }
        }
        if let Some(s) = self.stride_px {
            cfg.stride_px = s;
        }
        if let Some(f) = self.min_tissue_fraction {
            cfg.min_tissue_fraction = f;
        }
    }

    pub fn resolve(&self) -> Result<TilingConfig> {
        let mut cfg: TilingConfig = read_config(&self.tiling_config)?;
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// Training config (JSON, keys as in the echoed config.json).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// one_stage, adc_detection or diffuse_given_adc.
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    /// merged or per_label.
    #[arg(long, value_parser = parse_balance)]
    pub balance: Option<Balance>,
    /// partial_fine_tune or full.
    #[arg(long, value_parser = parse_mode)]
    pub train_mode: Option<TrainMode>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub pool_capacity: Option<usize>,
    #[arg(long)]
    pub magnification: Option<Magnification>,
    #[arg(long)]
    pub tile_px: Option<u32>,
    #[arg(long)]
    pub stride_px: Option<u32>,
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = read_config(&self.config)?;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { cfg.$f = v; } )* };
        }
        set!(seed, task, balance, train_mode, max_epochs, batch_size, k, pool_capacity);
        TilingArgs {
            tiling_config: None,
            magnification: self.magnification,
            tile_px: self.tile_px,
            stride_px: self.stride_px,
            min_tissue_fraction: None,
        }
        .apply(&mut cfg.tiling);
        cfg.validate()?;
        Ok(cfg)
    }
}
