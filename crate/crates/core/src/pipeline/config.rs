//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::merging::{ConfFilter, MergeParams};
use crate::pipeline::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Precomputed,
    Subprocess,
    Sim,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "precomputed" => Ok(Self::Precomputed),
            "subprocess" => Ok(Self::Subprocess),
            "sim" | "simulated" => Ok(Self::Sim),
            _ => Err(format!("unknown backend kind '{s}' (expected precomputed, subprocess or sim)")),
        }
    }
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Precomputed => "precomputed",
            Self::Subprocess => "subprocess",
            Self::Sim => "sim",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Command line for the subprocess backend, run through `sh -c`.
    pub cmd: Option<String>,
    /// Directory of per-image detection files for the precomputed backend.
    pub dir: Option<PathBuf>,
    /// Simulator parameter file for the sim backend.
    pub sim: Option<PathBuf>,
}

/// Run configuration. Defaults: tile 640, stride 512, conf 0.25, NMS IoU
/// 0.45, tau 16, lambda 0.2, mu 0, full-image inputs 640 and 1280.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tile_size: u32,
    pub stride: u32,
    pub conf: f64,
    pub nms_iou: f64,
    pub tau: f64,
    pub lambda: f64,
    pub mu: f64,
    /// Input sizes of the two full-image strategies.
    pub input_full: [u32; 2],
    pub min_visibility: f64,
    pub classes_file: Option<PathBuf>,
    pub backend: BackendConfig,
    pub seed: u64,
    pub conf_after_adjust: bool,
    /// Worker threads; 0 means one per core. Not part of the echoed config.
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tile_size: 640,
            stride: 512,
            conf: 0.25,
            nms_iou: 0.45,
            tau: 16.0,
            lambda: 0.2,
            mu: 0.0,
            input_full: [640, 1280],
            min_visibility: 0.4,
            classes_file: None,
            backend: BackendConfig {
                kind: BackendKind::Precomputed,
                cmd: None,
                dir: None,
                sim: None,
            },
            seed: 42,
            conf_after_adjust: false,
            jobs: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, PipelineError> {
    value
        .parse()
        .map_err(|_| PipelineError::Config(format!("{key}: cannot parse '{value}'")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl PipelineConfig {
    pub const KEYS: [&'static str; 17] = [
        "tile_size",
        "stride",
        "conf",
        "nms_iou",
        "tau",
        "lambda",
        "mu",
        "input_full",
        "min_visibility",
        "classes_file",
        "backend.kind",
        "backend.cmd",
        "backend.dir",
        "backend.sim",
        "seed",
        "conf_after_adjust",
        "jobs",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let value = value.trim();
        match key {
            "tile_size" => self.tile_size = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "conf" => self.conf = parse(key, value)?,
            "nms_iou" => self.nms_iou = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "mu" => self.mu = parse(key, value)?,
            "input_full" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                let [a, b] = parts.as_slice() else {
                    return Err(PipelineError::Config(format!(
                        "input_full: expected two comma-separated sizes, got '{value}'"
                    )));
                };
                self.input_full = [parse(key, a)?, parse(key, b)?];
            }
            "min_visibility" => self.min_visibility = parse(key, value)?,
            "classes_file" => self.classes_file = opt_path(value),
            "backend.kind" => self.backend.kind = value.parse().map_err(PipelineError::Config)?,
            "backend.cmd" => self.backend.cmd = (!value.is_empty()).then(|| value.to_string()),
            "backend.dir" => self.backend.dir = opt_path(value),
            "backend.sim" => self.backend.sim = opt_path(value),
            "seed" => self.seed = parse(key, value)?,
            "conf_after_adjust" => self.conf_after_adjust = parse(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            _ => return Err(PipelineError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn from_kv_text(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| PipelineError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_kv_text(&text)
    }

    /// Every parameter that affects results, as sorted key/value strings.
    pub fn effective(&self) -> BTreeMap<String, String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("tile_size", self.tile_size.to_string());
        put("stride", self.stride.to_string());
        put("conf", format!("{:.6}", self.conf));
        put("nms_iou", format!("{:.6}", self.nms_iou));
        put("tau", format!("{:.6}", self.tau));
        put("lambda", format!("{:.6}", self.lambda));
        put("mu", format!("{:.6}", self.mu));
        put("input_full", format!("{},{}", self.input_full[0], self.input_full[1]));
        put("min_visibility", format!("{:.6}", self.min_visibility));
        put("classes_file", path(&self.classes_file));
        put("backend.kind", self.backend.kind.as_str().to_string());
        put("backend.cmd", self.backend.cmd.clone().unwrap_or_default());
        put("backend.dir", path(&self.backend.dir));
        put("backend.sim", path(&self.backend.sim));
        put("seed", self.seed.to_string());
        put("conf_after_adjust", self.conf_after_adjust.to_string());
        m
    }

    pub fn to_kv_text(&self) -> String {
        self.effective().iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k} = {v}");
            s
        })
    }

    /// SHA-256 of the effective configuration text, hex encoded.
    pub fn params_hash(&self) -> String {
        Sha256::digest(self.to_kv_text().as_bytes())
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }

    pub fn merge_params(&self) -> MergeParams<f64> {
        MergeParams {
            conf_threshold: self.conf,
            nms_iou: self.nms_iou,
            tau: self.tau,
            lambda: self.lambda,
            mu: self.mu,
            conf_filter: if self.conf_after_adjust {
                ConfFilter::AfterAdjust
            } else {
                ConfFilter::BeforeAdjust
            },
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.merge_params().validate()?;
        if self.tile_size == 0 || self.stride == 0 || self.stride > self.tile_size {
            return Err(PipelineError::Config(format!(
                "need 0 < stride <= tile_size, got stride {} and tile_size {}",
                self.stride, self.tile_size
            )));
        }
        if self.input_full.contains(&0) {
            return Err(PipelineError::Config("input_full sizes must be positive".into()));
        }
        if !(self.min_visibility > 0.0 && self.min_visibility <= 1.0) {
            return Err(PipelineError::Config("min_visibility must lie in (0, 1]".into()));
        }
        Ok(())
    }
}
