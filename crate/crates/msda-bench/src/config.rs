//! Resolved run configuration: defaults, then config file, then flags.
//!
//! The config file is flat `key=value` text mirroring the flags ('#' starts a
//! comment). Unknown keys are rejected so typos fail loudly, and flags always
//! win over file values. Every command echoes the fully-resolved config into
//! its report.

use msda_core::reference::Mode;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub preset: String,
    pub repeats: usize,
    pub mode: Mode,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Flag values as parsed from the command line (None = not given).
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub preset: Option<String>,
    pub repeats: Option<usize>,
    pub mode: Option<Mode>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn resolve(
        config_path: Option<&Path>,
        flags: &Overrides,
        default_preset: &str,
        default_repeats: usize,
    ) -> Result<RunConfig, ConfigError> {
        let mut rc = RunConfig {
            seed: 0,
            workers: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            preset: default_preset.to_string(),
            repeats: default_repeats,
            mode: Mode::Inference,
            out: None,
        };
        if let Some(path) = config_path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
            rc.apply_file(&text)?;
        }
        if let Some(v) = flags.seed {
            rc.seed = v;
        }
        if let Some(v) = flags.workers {
            rc.workers = v.max(1);
        }
        if let Some(v) = &flags.preset {
            rc.preset = v.clone();
        }
        if let Some(v) = flags.repeats {
            rc.repeats = v.max(1);
        }
        if let Some(v) = flags.mode {
            rc.mode = v;
        }
        if let Some(v) = &flags.out {
            rc.out = Some(v.clone());
        }
        Ok(rc)
    }

    fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| {
                ConfigError(format!("line {}: bad value for {key}: {e}", lineno + 1))
            };
            match key {
                "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
                "workers" => self.workers = value.parse::<usize>().map_err(|e| bad(&e))?.max(1),
                "preset" => self.preset = value.to_string(),
                "repeats" => self.repeats = value.parse::<usize>().map_err(|e| bad(&e))?.max(1),
                "mode" => self.mode = parse_mode(value).ok_or_else(|| bad(&"expected inference|train"))?,
                "out" => self.out = Some(PathBuf::from(value)),
                other => {
                    return Err(ConfigError(format!(
                        "line {}: unknown key \"{other}\"",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(())
    }

    /// One-line echo of the resolved configuration, printed atop every report.
    pub fn echo(&self, command: &str) -> String {
        format!(
            "# msda-bench {command} seed={} workers={} preset={} repeats={} mode={}{}",
            self.seed,
            self.workers,
            self.preset,
            self.repeats,
            mode_name(self.mode),
            match &self.out {
                Some(p) => format!(" out={}", p.display()),
                None => String::new(),
            }
        )
    }
}

pub fn parse_mode(s: &str) -> Option<Mode> {
    match s {
        "inference" => Some(Mode::Inference),
        "train" => Some(Mode::Train),
        _ => None,
    }
}

pub fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Inference => "inference",
        Mode::Train => "train",
    }
}
