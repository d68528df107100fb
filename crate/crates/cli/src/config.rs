//! Config loading and command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use groundlift_core::depth::NoiseModel;
use groundlift_core::pipeline::{BinsMode, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BinsArg {
    Ground,
    Uniform,
}

/// Flags named after config keys. Precedence: file, then `--set`, then
/// named flags.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Config file, or `default` for built-in defaults.
    #[arg(long, value_name = "FILE|default")]
    pub config: Option<String>,
    /// Override any key by its dotted path, e.g. `depth.noise.sigma=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// `seed`
    #[arg(long)]
    pub seed: Option<u64>,
    /// `n_uavs`
    #[arg(long)]
    pub n_uavs: Option<usize>,
    /// `depth.bins`
    #[arg(long, value_enum)]
    pub bins: Option<BinsArg>,
    /// `depth.m`
    #[arg(long)]
    pub m: Option<usize>,
    /// `depth.d`
    #[arg(long)]
    pub d: Option<f64>,
    /// `depth.noise`: `none`, `sigma=S[,gain=G]` or `eps=E`.
    #[arg(long)]
    pub noise: Option<NoiseModel>,
    /// `hpl.enabled`
    #[arg(long)]
    pub hpl: bool,
    /// `hpl.tau`
    #[arg(long)]
    pub tau: Option<f64>,
    /// `hpl.n_max`
    #[arg(long)]
    pub n_max: Option<usize>,
    /// `hpl.sigma`
    #[arg(long)]
    pub sigma: Option<f64>,
    /// `hpl.refine.steps`
    #[arg(long)]
    pub steps: Option<usize>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut table = match self.config.as_deref() {
            None | Some("default") => toml::Table::try_from(RunConfig::default())?,
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).with_context(|| format!("reading config {path}"))?;
                text.parse::<toml::Table>()
                    .map_err(|e| groundlift_core::Error::Config(format!("{path}: {e}")))?
            }
        };
        for kv in &self.set {
            apply_set(&mut table, kv)?;
        }
        let mut cfg = RunConfig::from_toml(&toml::to_string(&table)?)?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.n_uavs {
            cfg.n_uavs = Some(v);
        }
        if let Some(v) = self.bins {
            cfg.depth.bins = match v {
                BinsArg::Ground => BinsMode::Ground,
                BinsArg::Uniform => BinsMode::Uniform,
            };
        }
        if let Some(v) = self.m {
            cfg.depth.m = v;
        }
        if let Some(v) = self.d {
            cfg.depth.d = v;
        }
        if let Some(v) = self.noise {
            cfg.depth.noise = v;
        }
        if self.hpl {
            cfg.hpl.enabled = true;
        }
        if let Some(v) = self.tau {
            cfg.hpl.tau = v;
        }
        if let Some(v) = self.n_max {
            cfg.hpl.n_max = v;
        }
        if let Some(v) = self.sigma {
            cfg.hpl.sigma = v;
        }
        if let Some(v) = self.steps {
            cfg.hpl.refine.steps = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads the config and points `output_dir` at `out` when given.
    pub fn load_with_output(&self, out: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = self.load()?;
        if let Some(dir) = out {
            cfg.output_dir = Some(PathBuf::from(dir));
        }
        Ok(cfg)
    }
}

fn apply_set(table: &mut toml::Table, kv: &str) -> Result<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!(usage(format!("bad key '{key}'")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| usage(format!("'{p}' in '{key}' is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn usage(msg: String) -> anyhow::Error {
    anyhow!(groundlift_core::Error::Config(msg))
}
