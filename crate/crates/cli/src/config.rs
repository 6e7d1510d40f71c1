//! Run-config resolution: preset, then config file, then `--set`, then `--seed`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use red_forge::training::TrainConfig;

use crate::commands::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Base settings.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Run-config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set run.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed (same as `--set run.seed=S`).
    #[arg(long)]
    seed: Option<u64>,
}

pub const CONFIG_FILE: &str = "config.txt";

impl ConfigArgs {
    /// Resolve the configuration. `fallback` is a config file used when
    /// `--config` is absent, e.g. the one saved next to a checkpoint.
    pub fn resolve(&self, fallback: Option<&Path>) -> Result<TrainConfig, CliError> {
        let mut cfg = match self.preset.unwrap_or(Preset::Desk) {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::default(),
        };
        let file = self.config.as_deref().or(fallback.filter(|p| p.is_file()));
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            cfg = TrainConfig::from_config_str(&text, cfg).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

/// The config saved beside a checkpoint by `train`.
pub fn beside(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE)
}

/// `<stem>.config.txt` next to a file output.
pub fn for_file(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}.config.txt"))
}

pub fn write(cfg: &TrainConfig, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, cfg.to_config_string()).map_err(|e| CliError::io(path, e))
}
