use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ems_core::env::EnvConfig;
use ems_core::grid::{bundled, load_case, NetworkModel};
use ems_core::ppo::PpoConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Base,
    ResilientRl,
    ResilientOpt,
}

impl Mode {
    /// Label used in CSV `method` columns.
    pub fn method(self) -> &'static str {
        match self {
            Mode::Base => "base",
            Mode::ResilientRl => "rl",
            Mode::ResilientOpt => "opt",
        }
    }
}

/// Everything a run depends on. Loaded from TOML, then overridden by flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Bundled case name or path to a case file.
    pub case: String,
    pub out: PathBuf,
    pub seed: u64,
    pub threshold: f64,
    pub alpha: f64,
    pub mode: Mode,
    /// Policy checkpoint for evaluation; defaults to `<out>/policy.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub ppo: PpoConfig,
    pub env: EnvConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            case: "mvdc12".into(),
            out: PathBuf::from("out"),
            seed: 0,
            threshold: 0.0005,
            alpha: 0.95,
            mode: Mode::ResilientRl,
            checkpoint: None,
            ppo: PpoConfig::default(),
            env: EnvConfig::default(),
        }
    }
}

/// Flag values that override the config file when present.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub case: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
    pub alpha: Option<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(c) = &flags.case {
            cfg.case = c.clone();
        }
        if let Some(o) = &flags.out {
            cfg.out = o.clone();
        }
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        if let Some(t) = flags.threshold {
            cfg.threshold = t;
        }
        if let Some(a) = flags.alpha {
            cfg.alpha = a;
        }
        cfg.ppo.seed = cfg.seed;
        if let Some(n) = threads_from_env()? {
            cfg.ppo.threads = Some(cfg.ppo.threads.map_or(n, |t| t.min(n)));
        }
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        // 1 is accepted so the scenario audit can show that nothing survives it
        if !(0.0..=1.0).contains(&self.threshold) {
            bail!("threshold must lie in [0, 1], got {}", self.threshold);
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            bail!("alpha must lie in (0, 1), got {}", self.alpha);
        }
        self.ppo.validate()?;
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("policy.ckpt"))
    }

    pub fn model(&self) -> Result<NetworkModel> {
        load_model(&self.case)
    }

    pub fn create_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))
    }
}

/// A path that exists wins over a bundled name.
pub fn load_model(case: &str) -> Result<NetworkModel> {
    if Path::new(case).exists() {
        return load_case(case).with_context(|| format!("loading {case}"));
    }
    if bundled::source(case).is_some() {
        return Ok(bundled::load(case)?);
    }
    bail!("no case file or bundled case named {case:?}")
}

/// `EMS_THREADS` caps rollout parallelism.
fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("EMS_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("EMS_THREADS={v:?}"))?;
            if n == 0 {
                bail!("EMS_THREADS must be at least 1");
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}
