//! Flat `section.key=value` pipeline configuration.
//!
//! A config file holds one `key=value` per line; `#` starts a comment and
//! blank lines are ignored. Every key has a default, so an empty file is a
//! valid configuration. Unknown keys are rejected by name.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::centers::StopMode;
use crate::local_otsu::OtsuParams;
use crate::stack_io::HistogramCropParams;
use crate::stfilter::FilterParams;
use crate::subsurf::SubsurfParams;
use crate::synth::Domain;
use crate::tracker::TrackParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    /// `line` is 0 when the key did not come from a file.
    #[error("unknown key {key}{}", at_line(*.line))]
    UnknownKey { key: String, line: usize },
    #[error("invalid value for {key}: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("malformed line {line}: {text}")]
    Malformed { line: usize, text: String },
}

fn at_line(line: usize) -> String {
    if line == 0 {
        String::new()
    } else {
        format!(" (line {line})")
    }
}

/// Image used for the SUBSURF edge weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeSource {
    /// The cropped input stack.
    Original,
    /// The filtered stack.
    Filtered,
}

impl EdgeSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeSource::Original => "original",
            EdgeSource::Filtered => "filtered",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoConfig {
    /// Input slice pattern (`dir/frame_%04d.pgm`) or directory.
    pub input: Option<PathBuf>,
    /// Run directory for outputs.
    pub output: Option<PathBuf>,
    /// Reference data directory for `eval`.
    pub gold: Option<PathBuf>,
    /// Bits per sample of the input PGMs.
    pub bit_depth: u32,
    /// Write trajectory overlays as colour PPMs.
    pub overlay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub domain: Domain,
    pub noise: f64,
    pub seed: u64,
    /// Mover description file; the built-in five-mover scene when absent.
    pub movers: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    /// Per-slice score below which a dip is counted.
    pub exclusion_threshold: f64,
    /// Consecutive dips that exclude a combination.
    pub run_length: usize,
    /// Number of best combinations counted in the frequency table.
    pub top_n: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            exclusion_threshold: 0.15,
            run_length: 3,
            top_n: 20,
        }
    }
}

/// Every tunable of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub io: IoConfig,
    pub crop: HistogramCropParams,
    pub filter: FilterParams,
    pub otsu: OtsuParams,
    pub subsurf: SubsurfParams,
    pub edge_source: EdgeSource,
    pub track: TrackParams,
    /// Distance within which a computed centre is identified with a
    /// reference object.
    pub match_radius: f64,
    pub sweep: SweepConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            io: IoConfig {
                input: None,
                output: None,
                gold: None,
                bit_depth: 8,
                overlay: true,
            },
            crop: HistogramCropParams { p_noise: 0.0 },
            filter: FilterParams::default(),
            otsu: OtsuParams::default(),
            subsurf: SubsurfParams::default(),
            edge_source: EdgeSource::Original,
            track: TrackParams::default(),
            match_radius: 10.0,
            sweep: SweepConfig::default(),
            synth: SynthConfig {
                domain: Domain::default(),
                noise: 0.1,
                seed: 1,
                movers: None,
            },
        }
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn real(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = v.parse().map_err(|_| invalid(key, format!("expected a number, got {v:?}")))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(invalid(key, format!("expected a finite number, got {v:?}")))
    }
}

fn count(key: &str, v: &str) -> Result<usize, ConfigError> {
    v.parse().map_err(|_| invalid(key, format!("expected a non-negative integer, got {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(invalid(key, format!("expected true or false, got {v:?}"))),
    }
}

fn optional<T>(v: &str, parse: impl Fn(&str) -> Result<T, ConfigError>) -> Result<Option<T>, ConfigError> {
    if v == "none" {
        Ok(None)
    } else {
        parse(v).map(Some)
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (v != "none" && !v.is_empty()).then(|| PathBuf::from(v))
}

fn show_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn show_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl PipelineConfig {
    /// Sets one key. The key must be one listed by [`PipelineConfig::entries`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let k = key;
        match key {
            "io.input" => self.io.input = path(v),
            "io.output" => self.io.output = path(v),
            "io.gold" => self.io.gold = path(v),
            "io.bit_depth" => {
                self.io.bit_depth = match v {
                    "8" => 8,
                    "16" => 16,
                    _ => return Err(invalid(k, format!("expected 8 or 16, got {v:?}"))),
                }
            }
            "io.overlay" => self.io.overlay = flag(k, v)?,
            "crop.p_noise" => self.crop.p_noise = real(k, v)?,
            "filter.tau_f" => self.filter.tau = real(k, v)?,
            "filter.k" => self.filter.k = real(k, v)?,
            "filter.sigma" => self.filter.sigma = real(k, v)?,
            "filter.h" => self.filter.h = real(k, v)?,
            "filter.rho" => self.filter.rho = count(k, v)?,
            "filter.dtheta" => self.filter.dtheta = real(k, v)?,
            "filter.outer_tol" => self.filter.outer_tol = real(k, v)?,
            "filter.max_outer" => self.filter.max_outer = count(k, v)?,
            "filter.sor_omega" => self.filter.sor.omega = real(k, v)?,
            "filter.sor_tol" => self.filter.sor.tol = real(k, v)?,
            "filter.sor_max_sweeps" => self.filter.sor.max_sweeps = count(k, v)?,
            "filter.freeze_clt" => self.filter.freeze_clt = flag(k, v)?,
            "filter.force_clt" => self.filter.force_clt = optional(v, |x| real(k, x))?,
            "filter.force_g" => self.filter.force_g = optional(v, |x| real(k, x))?,
            "otsu.window" => {
                self.otsu.window = if v == "whole" {
                    None
                } else {
                    Some(count(k, v)?)
                }
            }
            "otsu.delta" => self.otsu.delta = real(k, v)?,
            "otsu.presence_test" => self.otsu.presence_test = flag(k, v)?,
            "subsurf.tau_s" => self.subsurf.tau = real(k, v)?,
            "subsurf.eps2" => self.subsurf.eps2 = real(k, v)?,
            "subsurf.k" => self.subsurf.k = real(k, v)?,
            "subsurf.sigma" => self.subsurf.sigma = real(k, v)?,
            "subsurf.h" => self.subsurf.h = real(k, v)?,
            "subsurf.stop_tol" => self.subsurf.stop_tol = real(k, v)?,
            "subsurf.max_steps" => self.subsurf.max_steps = count(k, v)?,
            "subsurf.sor_omega" => self.subsurf.sor.omega = real(k, v)?,
            "subsurf.sor_tol" => self.subsurf.sor.tol = real(k, v)?,
            "subsurf.sor_max_sweeps" => self.subsurf.sor.max_sweeps = count(k, v)?,
            "subsurf.level" => self.subsurf.level = real(k, v)?,
            "subsurf.margin" => self.subsurf.margin = optional(v, |x| count(k, x))?,
            "subsurf.edge_source" => {
                self.edge_source = match v {
                    "original" => EdgeSource::Original,
                    "filtered" => EdgeSource::Filtered,
                    _ => return Err(invalid(k, format!("expected original or filtered, got {v:?}"))),
                }
            }
            "centers.h" => self.track.eikonal.h = real(k, v)?,
            "centers.tol" => self.track.eikonal.tol = real(k, v)?,
            "centers.max_iter" => self.track.eikonal.max_iter = count(k, v)?,
            "centers.stop" => {
                self.track.eikonal.stop = match v {
                    "joint" => StopMode::Joint,
                    "per_slice" => StopMode::PerSlice,
                    _ => return Err(invalid(k, format!("expected joint or per_slice, got {v:?}"))),
                }
            }
            "centers.min_area" => self.track.min_area = count(k, v)?,
            "track.dr" => self.track.link.dr = real(k, v)?,
            "track.dr2" => self.track.link.dr2 = real(k, v)?,
            "track.dr_theta" => self.track.link.dr_theta = count(k, v)?,
            "track.dtheta" => self.track.link.dtheta = real(k, v)?,
            "eval.match_radius" => self.match_radius = real(k, v)?,
            "sweep.exclusion_threshold" => self.sweep.exclusion_threshold = real(k, v)?,
            "sweep.run_length" => self.sweep.run_length = count(k, v)?,
            "sweep.top_n" => self.sweep.top_n = count(k, v)?,
            "synth.width" => self.synth.domain.width = count(k, v)?,
            "synth.height" => self.synth.domain.height = count(k, v)?,
            "synth.slices" => self.synth.domain.slices = count(k, v)?,
            "synth.background" => self.synth.domain.background = real(k, v)?,
            "synth.noise" => self.synth.noise = real(k, v)?,
            "synth.seed" => {
                self.synth.seed = v.parse().map_err(|_| invalid(k, format!("expected an integer, got {v:?}")))?
            }
            "synth.movers" => self.synth.movers = path(v),
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    line: 0,
                })
            }
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = &self.filter;
        let o = &self.otsu;
        let s = &self.subsurf;
        let t = &self.track;
        vec![
            ("io.input", show_path(&self.io.input)),
            ("io.output", show_path(&self.io.output)),
            ("io.gold", show_path(&self.io.gold)),
            ("io.bit_depth", self.io.bit_depth.to_string()),
            ("io.overlay", self.io.overlay.to_string()),
            ("crop.p_noise", self.crop.p_noise.to_string()),
            ("filter.tau_f", f.tau.to_string()),
            ("filter.k", f.k.to_string()),
            ("filter.sigma", f.sigma.to_string()),
            ("filter.h", f.h.to_string()),
            ("filter.rho", f.rho.to_string()),
            ("filter.dtheta", f.dtheta.to_string()),
            ("filter.outer_tol", f.outer_tol.to_string()),
            ("filter.max_outer", f.max_outer.to_string()),
            ("filter.sor_omega", f.sor.omega.to_string()),
            ("filter.sor_tol", f.sor.tol.to_string()),
            ("filter.sor_max_sweeps", f.sor.max_sweeps.to_string()),
            ("filter.freeze_clt", f.freeze_clt.to_string()),
            ("filter.force_clt", show_opt(&f.force_clt)),
            ("filter.force_g", show_opt(&f.force_g)),
            ("otsu.window", o.window.map_or_else(|| "whole".to_string(), |w| w.to_string())),
            ("otsu.delta", o.delta.to_string()),
            ("otsu.presence_test", o.presence_test.to_string()),
            ("subsurf.tau_s", s.tau.to_string()),
            ("subsurf.eps2", s.eps2.to_string()),
            ("subsurf.k", s.k.to_string()),
            ("subsurf.sigma", s.sigma.to_string()),
            ("subsurf.h", s.h.to_string()),
            ("subsurf.stop_tol", s.stop_tol.to_string()),
            ("subsurf.max_steps", s.max_steps.to_string()),
            ("subsurf.sor_omega", s.sor.omega.to_string()),
            ("subsurf.sor_tol", s.sor.tol.to_string()),
            ("subsurf.sor_max_sweeps", s.sor.max_sweeps.to_string()),
            ("subsurf.level", s.level.to_string()),
            ("subsurf.margin", show_opt(&s.margin)),
            ("subsurf.edge_source", self.edge_source.as_str().to_string()),
            ("centers.h", t.eikonal.h.to_string()),
            ("centers.tol", t.eikonal.tol.to_string()),
            ("centers.max_iter", t.eikonal.max_iter.to_string()),
            ("centers.stop", t.eikonal.stop.as_str().to_string()),
            ("centers.min_area", t.min_area.to_string()),
            ("track.dr", t.link.dr.to_string()),
            ("track.dr2", t.link.dr2.to_string()),
            ("track.dr_theta", t.link.dr_theta.to_string()),
            ("track.dtheta", t.link.dtheta.to_string()),
            ("eval.match_radius", self.match_radius.to_string()),
            ("sweep.exclusion_threshold", self.sweep.exclusion_threshold.to_string()),
            ("sweep.run_length", self.sweep.run_length.to_string()),
            ("sweep.top_n", self.sweep.top_n.to_string()),
            ("synth.width", self.synth.domain.width.to_string()),
            ("synth.height", self.synth.domain.height.to_string()),
            ("synth.slices", self.synth.domain.slices.to_string()),
            ("synth.background", self.synth.domain.background.to_string()),
            ("synth.noise", self.synth.noise.to_string()),
            ("synth.seed", self.synth.seed.to_string()),
            ("synth.movers", show_path(&self.synth.movers)),
        ]
    }

    /// Applies the lines of a config file on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: n + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { key, line: n + 1 },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Self::parse(&text)?)
    }

    /// The fully resolved configuration, one `key=value` per line. Parsing
    /// this text gives back the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let sec = key.split('.').next().unwrap_or("");
            if sec != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                section = sec;
            }
            writeln!(s, "{key}={value}").unwrap();
        }
        s
    }

    /// SHA-256 of the processing parameters (paths excluded), as hex.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (key, value) in self.entries().into_iter().filter(|(k, _)| !k.starts_with("io.")) {
            hasher.update(key.as_bytes());
            hasher.update(b"=");
            hasher.update(value.as_bytes());
            hasher.update(b"\n");
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Checks every stage's parameters.
    pub fn validate(&self) -> crate::Result<()> {
        self.filter.validate()?;
        self.otsu.validate()?;
        self.subsurf.validate()?;
        self.track.link.validate()?;
        if !(0.0..=1.0).contains(&self.crop.p_noise) {
            return Err(crate::Error::param("crop.p_noise", format!("{} outside [0, 1]", self.crop.p_noise)));
        }
        Ok(())
    }
}
