//! Flat `section.key=value` configuration files.
//!
//! ```text
//! # comments and blank lines are ignored
//! model.decoder_width=16
//! model.enable_dam=false
//! train.lr=1e-4
//! synth.buildings=1,4
//! ```
//! Keys not listed in the defaults are rejected, so a typo never silently
//! falls back to a default.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::synth::SynthSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub decay_factor: f64,
    /// Epochs between learning-rate drops; `0` keeps the rate constant.
    pub decay_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 100,
            decay_factor: 0.1,
            decay_every: 50,
            batch_size: 4,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", format!("must be > 0, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("train.decay_factor", "must lie in (0,1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true/false, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(key, p)).collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(usize, usize)> {
    match parse_list::<usize>(key, v)?.as_slice() {
        [a] => Ok((*a, *a)),
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::config(key, "expected `n` or `lo,hi`")),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "model.encoder.channels" => {
                let c: Vec<usize> = parse_list(key, v)?;
                m.encoder.channels = c
                    .try_into()
                    .map_err(|_| Error::config(key, "expected four comma-separated widths"))?;
            }
            "model.encoder.attention_level" => m.encoder.attention_level = parse(key, v)?,
            "model.encoder.sr_ratio" => m.encoder.sr_ratio = parse(key, v)?,
            "model.encoder.num_heads" => m.encoder.num_heads = parse(key, v)?,
            "model.encoder.mlp_ratio" => m.encoder.mlp_ratio = parse(key, v)?,
            "model.decoder_width" => m.decoder_width = parse(key, v)?,
            "model.rfb_branch_width" => m.rfb_branch_width = parse(key, v)?,
            "model.enable_fam" => m.enable_fam = parse_bool(key, v)?,
            "model.enable_dem" => m.enable_dem = parse_bool(key, v)?,
            "model.enable_rfb" => m.enable_rfb = parse_bool(key, v)?,
            "model.enable_dam" => m.enable_dam = parse_bool(key, v)?,
            "model.tile_size" => m.tile_size = parse(key, v)?,
            "model.threshold" => m.threshold = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.decay_factor" => t.decay_factor = parse(key, v)?,
            "train.decay_every" => t.decay_every = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.augment" => t.augment = parse_bool(key, v)?,
            "synth.canvas" => s.canvas = parse(key, v)?,
            "synth.buildings" => s.buildings = parse_pair(key, v)?,
            "synth.size" => s.size = parse_pair(key, v)?,
            "synth.rotation" => s.rotation = parse_bool(key, v)?,
            "synth.occluders" => s.occluders = parse_pair(key, v)?,
            "synth.occluder_radius" => s.occluder_radius = parse_pair(key, v)?,
            "synth.occluder_opacity" => s.occluder_opacity = parse(key, v)?,
            "synth.noise" => s.noise = parse(key, v)?,
            "synth.seed" => s.seed = parse(key, v)?,
            "synth.train_images" => s.train_images = parse(key, v)?,
            "synth.test_images" => s.test_images = parse(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Apply `key=value` lines over the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", no + 1), format!("expected key=value, got {line:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }

    /// Every key, in a form [`parse`](Self::parse) reads back unchanged.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let s = &self.synth;
        let c = m.encoder.channels;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("model.encoder.channels", format!("{},{},{},{}", c[0], c[1], c[2], c[3]));
        kv("model.encoder.attention_level", m.encoder.attention_level.to_string());
        kv("model.encoder.sr_ratio", m.encoder.sr_ratio.to_string());
        kv("model.encoder.num_heads", m.encoder.num_heads.to_string());
        kv("model.encoder.mlp_ratio", m.encoder.mlp_ratio.to_string());
        kv("model.decoder_width", m.decoder_width.to_string());
        kv("model.rfb_branch_width", m.rfb_branch_width.to_string());
        kv("model.enable_fam", m.enable_fam.to_string());
        kv("model.enable_dem", m.enable_dem.to_string());
        kv("model.enable_rfb", m.enable_rfb.to_string());
        kv("model.enable_dam", m.enable_dam.to_string());
        kv("model.tile_size", m.tile_size.to_string());
        kv("model.threshold", m.threshold.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.decay_factor", t.decay_factor.to_string());
        kv("train.decay_every", t.decay_every.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.augment", t.augment.to_string());
        kv("synth.canvas", s.canvas.to_string());
        kv("synth.buildings", format!("{},{}", s.buildings.0, s.buildings.1));
        kv("synth.size", format!("{},{}", s.size.0, s.size.1));
        kv("synth.rotation", s.rotation.to_string());
        kv("synth.occluders", format!("{},{}", s.occluders.0, s.occluders.1));
        kv("synth.occluder_radius", format!("{},{}", s.occluder_radius.0, s.occluder_radius.1));
        kv("synth.occluder_opacity", s.occluder_opacity.to_string());
        kv("synth.noise", s.noise.to_string());
        kv("synth.seed", s.seed.to_string());
        kv("synth.train_images", s.train_images.to_string());
        kv("synth.test_images", s.test_images.to_string());
        out
    }
}
